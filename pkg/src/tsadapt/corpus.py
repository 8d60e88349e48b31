"""Labeled synthetic corpora and parallel (source, target) manifests on disk.

A corpus directory holds per-utterance files named <id>.wav, <id>.feat and
<id>.labels.npy plus a corpus.tsv index. A parallel manifest is a text file of
tab-separated pairs preceded by '#key=value' metadata lines; feature paths are
relative to the manifest's directory, and sibling .wav / .labels.npy files are
picked up by convention.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import features as feat
from . import signal as sig
from .network import Network, forward

MANIFEST_COLUMNS = ("source id", "source feature path", "target id",
                    "target feature path", "frames", "domain tags")


@dataclass(frozen=True)
class FeatureConfig:
    """Front-end geometry shared by every utterance in a corpus."""

    frame_len: int = 400
    hop: int = 160
    fft_size: int = 512
    n_mels: int = 80
    floor: float = feat.LOG_FLOOR

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "FeatureConfig":
        return FeatureConfig(**json.loads(text))


def featurize(wave: sig.Waveform, cfg: FeatureConfig, alpha: float = 0.0) -> np.ndarray:
    """Log mel features of a waveform; alpha != 0 warps the spectrogram first."""
    spec = feat.stft(wave, cfg.frame_len, cfg.hop, cfg.fft_size)
    if alpha != 0.0:
        spec = feat.warp_spectrogram(spec, feat.WarpConfig(alpha))
    return feat.log_mel_fbank(spec, cfg.n_mels, cfg.floor)


@dataclass(frozen=True)
class UtteranceRecord:
    """Pointers to one utterance's files; paths are absolute once loaded."""

    id: str
    feat_path: Path
    wav_path: Path | None = None
    label_path: Path | None = None
    domain: str = ""

    def load_features(self) -> np.ndarray:
        return feat.read_features(self.feat_path)[0]

    def load_labels(self) -> np.ndarray | None:
        if self.label_path is None:
            return None
        return np.load(self.label_path)

    def load_wave(self) -> sig.Waveform:
        if self.wav_path is None:
            raise ValueError(f"record {self.id} has no waveform file")
        return sig.read_wav(self.wav_path)


def _relpath(path: Path, root: Path) -> str:
    return Path(os.path.relpath(path, root)).as_posix()


def _sibling(feat_path: Path, suffix: str) -> Path | None:
    p = feat_path.with_suffix(suffix)
    return p if p.exists() else None


def _write_record(out_dir: Path, utt_id: str, wave: sig.Waveform,
                  labels: np.ndarray | None, domain: str, cfg: FeatureConfig,
                  alpha: float = 0.0) -> UtteranceRecord:
    """Persist one utterance; features are computed from the stored 16-bit audio
    so that re-featurizing the WAV always reproduces the feature file."""
    wav_path = out_dir / f"{utt_id}.wav"
    feat_path = out_dir / f"{utt_id}.feat"
    sig.write_wav(wav_path, wave)
    stored = sig.read_wav(wav_path)
    feats = featurize(stored, cfg, alpha=alpha)
    feat.write_features(feat_path, feats, cfg.frame_len, cfg.hop, wave.sample_rate)
    label_path = None
    if labels is not None:
        label_path = out_dir / f"{utt_id}.labels.npy"
        np.save(label_path, np.asarray(labels, dtype=np.int32))
    return UtteranceRecord(utt_id, feat_path, wav_path, label_path, domain)


def synth_corpus(spec: sig.SynthSpec, count: int, seed: int, out_dir: str | Path,
                 cfg: FeatureConfig | None = None,
                 domain: str = "clean") -> list[UtteranceRecord]:
    """Generate `count` labeled utterances with derived per-utterance seeds.

    Waveforms, features and labels are persisted under out_dir along with a
    corpus.tsv index; identical arguments reproduce identical bytes.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = cfg or FeatureConfig(frame_len=spec.frame_len, hop=spec.hop)
    if (cfg.frame_len, cfg.hop) != (spec.frame_len, spec.hop):
        raise ValueError("feature frame geometry must match the synthesis spec")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        utt_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        utt = sig.synth_utterance(spec, utt_seed)
        record = _write_record(out_dir, f"utt{i:05d}", utt.wave, utt.frame_labels,
                               domain, cfg)
        frames = feat.read_feature_header(record.feat_path).frames
        if frames != utt.frame_labels.size:
            raise RuntimeError(f"utt{i}: {frames} frames vs "
                               f"{utt.frame_labels.size} labels")
        records.append(record)
    meta = {"kind": "corpus", "count": str(count), "seed": str(seed),
            "domain": domain, "feature_config": cfg.to_json(),
            "num_classes": str(spec.num_classes)}
    _write_index(out_dir / "corpus.tsv", records, meta)
    return records


def _write_index(path: Path, records: Sequence[UtteranceRecord], meta: dict) -> None:
    root = path.parent
    with open(path, "w") as f:
        for k in sorted(meta):
            f.write(f"#{k}={meta[k]}\n")
        for r in records:
            wav = _relpath(r.wav_path, root) if r.wav_path else "-"
            lab = _relpath(r.label_path, root) if r.label_path else "-"
            f.write(f"{r.id}\t{_relpath(r.feat_path, root)}\t{wav}\t{lab}\t"
                    f"{r.domain}\n")


def load_corpus(index_path: str | Path) -> tuple[list[UtteranceRecord], dict]:
    """Read a corpus.tsv index; referenced files must exist."""
    index_path = Path(index_path)
    if index_path.is_dir():
        index_path = index_path / "corpus.tsv"
    root = index_path.parent
    records, meta = [], {}
    with open(index_path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                k, _, v = line[1:].partition("=")
                meta[k] = v
                continue
            utt_id, fp, wav, lab, domain = line.split("\t")
            feat_path = root / fp
            if not feat_path.exists():
                raise FileNotFoundError(f"{index_path}: missing feature file {feat_path}")
            records.append(UtteranceRecord(
                utt_id, feat_path,
                root / wav if wav != "-" else None,
                root / lab if lab != "-" else None, domain))
    return records, meta


def load_labeled(records: Sequence[UtteranceRecord]) -> list[tuple[np.ndarray, np.ndarray]]:
    """(features, labels) pairs for supervised training; every record needs labels."""
    out = []
    for r in records:
        labels = r.load_labels()
        if labels is None:
            raise ValueError(f"record {r.id} has no labels")
        feats = r.load_features()
        if feats.shape[0] != labels.size:
            raise ValueError(f"record {r.id}: {feats.shape[0]} frames vs "
                             f"{labels.size} labels")
        out.append((feats, labels))
    return out


@dataclass(frozen=True)
class ManifestPair:
    source: UtteranceRecord
    target: UtteranceRecord
    frames: int


@dataclass
class ParallelManifest:
    """Ordered (source, target) utterance pairs plus generation metadata.

    Target ids are unique; a repeated source id always references the same
    files. Per-pair generation draws live in metadata under 'draw.<target id>'.
    """

    pairs: list[ManifestPair]
    metadata: dict = field(default_factory=dict)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.pairs)

    def iter_pairs(self) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray | None]]:
        """Yield (source features, target features, target labels or None) per pair."""
        for p in self.pairs:
            yield (p.source.load_features(), p.target.load_features(),
                   p.target.load_labels())

    def validate(self) -> None:
        seen: dict[str, ManifestPair] = {}
        targets = set()
        for p in self.pairs:
            if p.target.id in targets:
                raise ValueError(f"duplicate target id {p.target.id}")
            targets.add(p.target.id)
            src_frames = feat.read_feature_header(p.source.feat_path).frames
            tgt_frames = feat.read_feature_header(p.target.feat_path).frames
            if not (src_frames == tgt_frames == p.frames):
                raise ValueError(f"pair {p.source.id}->{p.target.id}: source {src_frames} "
                                 f"and target {tgt_frames} frames, manifest says {p.frames}")

    def save(self, path: str | Path) -> None:
        path = Path(path)
        root = path.parent
        with open(path, "w") as f:
            for k in sorted(self.metadata):
                f.write(f"#{k}={self.metadata[k]}\n")
            for p in self.pairs:
                domains = f"{p.source.domain},{p.target.domain}"
                f.write(f"{p.source.id}\t{_relpath(p.source.feat_path, root)}\t"
                        f"{p.target.id}\t{_relpath(p.target.feat_path, root)}\t"
                        f"{p.frames}\t{domains}\n")

    @staticmethod
    def load(path: str | Path, validate: bool = True) -> "ParallelManifest":
        path = Path(path)
        root = path.parent
        pairs, metadata = [], {}
        with open(path) as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    k, _, v = line[1:].partition("=")
                    metadata[k] = v
                    continue
                cols = line.split("\t")
                if len(cols) != 6:
                    raise ValueError(f"{path}: expected 6 tab-separated fields "
                                     f"{MANIFEST_COLUMNS}, got {len(cols)}")
                src_id, src_fp, tgt_id, tgt_fp, frames, domains = cols
                src_dom, _, tgt_dom = domains.partition(",")
                src_path, tgt_path = root / src_fp, root / tgt_fp
                src = UtteranceRecord(src_id, src_path, _sibling(src_path, ".wav"),
                                      _sibling(src_path, ".labels.npy"), src_dom)
                tgt = UtteranceRecord(tgt_id, tgt_path, _sibling(tgt_path, ".wav"),
                                      _sibling(tgt_path, ".labels.npy"), tgt_dom)
                pairs.append(ManifestPair(src, tgt, int(frames)))
        manifest = ParallelManifest(pairs, metadata, root)
        if validate:
            manifest.validate()
        return manifest


def build_noisy_parallel(clean: Sequence[UtteranceRecord], noises: Sequence[sig.Waveform],
                         snr_lo: float, snr_hi: float, seed: int, out_dir: str | Path,
                         cfg: FeatureConfig, replica: int = 0) -> ParallelManifest:
    """Mix every clean utterance with seeded noise/offset/SNR draws and featurize both sides.

    SNR is drawn uniformly from [snr_lo, snr_hi]; every draw is recorded in the
    manifest metadata. The noise waveforms are persisted next to the manifest so
    the corpus can be scaled later.
    """
    if snr_lo > snr_hi:
        raise ValueError(f"snr_lo {snr_lo} exceeds snr_hi {snr_hi}")
    if not clean or not noises:
        raise ValueError("need at least one clean utterance and one noise")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    noise_paths = []
    for i, noise in enumerate(noises):
        p = out_dir / f"noise{i:02d}.wav"
        if not p.exists():
            sig.write_wav(p, noise)
        noise_paths.append(p)
    # mix from the stored noise audio so scaling reproduces the same pipeline
    noises = [sig.read_wav(p) for p in noise_paths]

    pairs, meta = [], {}
    for i, src in enumerate(clean):
        try:
            pair, draw = _mix_pair(src, noises, snr_lo, snr_hi,
                                   [seed, replica, i], out_dir, cfg, replica)
        except Exception as e:
            raise RuntimeError(f"failed to build noisy pair for {src.id}: {e}") from e
        pairs.append(pair)
        meta[f"draw.{pair.target.id}"] = draw
    meta.update({
        "mode": "noisy", "seed": str(seed), "snr_lo": repr(snr_lo),
        "snr_hi": repr(snr_hi), "feature_config": cfg.to_json(),
        "noise_count": str(len(noises)),
    })
    for i, p in enumerate(noise_paths):
        meta[f"noise.{i}.path"] = _relpath(p, out_dir)
    return ParallelManifest(pairs, meta, out_dir)


def _mix_pair(src: UtteranceRecord, noises: Sequence[sig.Waveform], snr_lo: float,
              snr_hi: float, seed_key: list[int], out_dir: Path, cfg: FeatureConfig,
              replica: int) -> tuple[ManifestPair, str]:
    rng = np.random.default_rng(seed_key)
    clean_wave = src.load_wave()
    noise_idx = int(rng.integers(len(noises)))
    noise = noises[noise_idx]
    offset = int(rng.integers(0, len(noise) - len(clean_wave) + 1))
    snr = float(rng.uniform(snr_lo, snr_hi))
    mixed = sig.mix_at_snr(clean_wave, noise, snr, offset=offset)
    tgt_id = f"{src.id}-n{replica}"
    target = _write_record(out_dir, tgt_id, mixed, src.load_labels(),
                           f"noisy-snr{snr:.1f}", cfg)
    frames = feat.read_feature_header(target.feat_path).frames
    src_frames = feat.read_feature_header(src.feat_path).frames
    if src_frames != frames:
        raise ValueError(f"{src.id}: clean side has {src_frames} frames, mixed {frames}")
    return ManifestPair(src, target, frames), f"{noise_idx},{offset},{snr!r}"


def build_warped_parallel(adults: Sequence[UtteranceRecord], alpha: float, seed: int,
                          out_dir: str | Path, cfg: FeatureConfig) -> ParallelManifest:
    """Pair each utterance's plain features with bilinear-warped ones (same wave).

    Frame counts match by construction since both sides share the STFT.
    """
    feat.WarpConfig(alpha)  # validates |alpha| < 1
    if not adults:
        raise ValueError("need at least one source utterance")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for source in adults:
        wave = source.load_wave()
        tgt_id = f"{source.id}-warped"
        target = _write_record(out_dir, tgt_id, wave, source.load_labels(),
                               f"warped-a{alpha:g}", cfg, alpha=alpha)
        frames = feat.read_feature_header(target.feat_path).frames
        pairs.append(ManifestPair(source, target, frames))
    meta = {"mode": "warped", "alpha": repr(alpha), "seed": str(seed),
            "feature_config": cfg.to_json()}
    return ParallelManifest(pairs, meta, out_dir)


def filter_by_domain_classifier(manifest: ParallelManifest, clf: Network,
                                accept_class: int, threshold: float,
                                side: str = "target") -> ParallelManifest:
    """Keep pairs whose chosen side's mean posterior for accept_class reaches threshold.

    Never grows the pair count and is idempotent at a fixed threshold; the
    retained fraction is recorded in the result's metadata.
    """
    if side not in ("source", "target"):
        raise ValueError(f"side must be 'source' or 'target', got {side!r}")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if not 0 <= accept_class < clf.output_dim:
        raise ValueError(f"accept_class {accept_class} outside classifier range "
                         f"[0, {clf.output_dim})")
    kept = []
    for p in manifest.pairs:
        record = p.target if side == "target" else p.source
        posteriors = forward(clf, record.load_features().astype(np.float64))
        if float(posteriors[:, accept_class].mean()) >= threshold:
            kept.append(p)
    kept_ids = {p.target.id for p in kept}
    meta = {k: v for k, v in manifest.metadata.items()
            if not k.startswith("draw.") or k[len("draw."):] in kept_ids}
    fraction = len(kept) / len(manifest.pairs) if manifest.pairs else 0.0
    meta["filter.retained_fraction"] = repr(fraction)
    meta["filter.threshold"] = repr(threshold)
    meta["filter.accept_class"] = str(accept_class)
    meta["filter.side"] = side
    return ParallelManifest(kept, meta, manifest.root)


def scale_corpus(manifest: ParallelManifest, factor: int, seed: int) -> ParallelManifest:
    """Grow a noisy manifest factor-fold by regenerating pairs with fresh draws.

    New pairs are genuinely new mixes written next to the originals, never
    duplicates: the scan over (source, noise, offset, SNR) tuples redraws on
    collision. Requires the generation metadata written by build_noisy_parallel.
    """
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    if factor == 1:
        return manifest
    meta = manifest.metadata
    required = ("mode", "snr_lo", "snr_hi", "feature_config", "noise_count")
    missing = [k for k in required if k not in meta]
    if missing:
        raise ValueError(f"manifest lacks generation metadata {missing}; cannot scale")
    if meta["mode"] != "noisy":
        raise ValueError(f"only noisy manifests can be scaled, got mode={meta['mode']!r}")
    out_dir = manifest.root
    cfg = FeatureConfig.from_json(meta["feature_config"])
    snr_lo, snr_hi = float(meta["snr_lo"]), float(meta["snr_hi"])
    noises = [sig.read_wav(manifest.root / meta[f"noise.{i}.path"])
              for i in range(int(meta["noise_count"]))]

    def draw_tuple(pair: ManifestPair) -> tuple:
        return (pair.source.id, *_parse_draw(meta[f"draw.{pair.target.id}"]))

    seen = {draw_tuple(p) for p in manifest.pairs}
    new_pairs = list(manifest.pairs)
    new_meta = dict(meta)
    for replica in range(1, factor):
        for i, p in enumerate(manifest.pairs):
            for attempt in range(100):
                key = [seed, replica, i, attempt]
                pair, draw = _mix_pair(p.source, noises, snr_lo, snr_hi, key,
                                       out_dir, cfg, replica)
                tup = (p.source.id, *_parse_draw(draw))
                if tup not in seen:
                    seen.add(tup)
                    new_pairs.append(pair)
                    new_meta[f"draw.{pair.target.id}"] = draw
                    break
            else:
                raise RuntimeError(f"could not draw a fresh mix for {p.source.id}")
    new_meta["scale.factor"] = str(factor)
    new_meta["scale.seed"] = str(seed)
    return ParallelManifest(new_pairs, new_meta, out_dir)


def _parse_draw(draw: str) -> tuple[int, int, float]:
    n, off, s = draw.split(",")
    return int(n), int(off), float(s)
