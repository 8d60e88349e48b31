"""Scripted experiment scenarios: noisy-domain adaptation, unseen-noise robustness,
and warped-domain (children's-speech analog) adaptation, with trend assertions.

Every scenario is a deterministic function of its seed and writes all artifacts
(corpora, manifests, checkpoints, reports) under its output directory. Supervised
baselines use the fixed standard recipe; adapted students train until the
convergence rule fires, per the adaptation procedure.
"""

from __future__ import annotations

import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import corpus as corp
from . import distill
from . import evaluation as ev
from . import network as net
from . import signal as sig


@dataclass(frozen=True)
class SuiteConfig:
    """Sizes and recipes for the paper-analog scenarios; defaults are calibrated
    to run one noisy-scenario seed in a few minutes on a laptop-class machine."""

    num_classes: int = 20
    train_utts: int = 2000
    eval_utts: int = 250
    duration: float = 0.5
    sample_rate: int = 16000
    snr_lo: float = 5.0
    snr_hi: float = 20.0
    warp_alpha: float = 0.1
    scale_factor: int = 4
    hidden: tuple[int, ...] = (96, 96, 96)
    context_k: int = 4
    # standard supervised recipe (teacher, multi-condition, pseudo-label)
    hard_epochs: int = 4
    hard_lr: float = 0.03
    # adaptation recipe (until convergence)
    adapt_epochs: int = 40
    adapt_lr: float = 0.005
    batch_frames: int = 1024

    def synth_spec(self) -> sig.SynthSpec:
        return sig.SynthSpec(sig.default_templates(self.num_classes, self.sample_rate),
                             duration=self.duration, sample_rate=self.sample_rate,
                             gain_range=(0.4, 1.0))

    def bucket_spec(self) -> sig.SynthSpec:
        # longer pauses expose the noise floor so the SNR detector can reach
        # high-SNR buckets; used only for the bucket-breakdown evaluation
        return replace(self.synth_spec(), voiced_ms=(70.0, 120.0), gap_ms=55.0)

    def feature_config(self) -> corp.FeatureConfig:
        return corp.FeatureConfig()

    def hard_config(self, seed: int) -> distill.TsConfig:
        return distill.TsConfig(batch_frames=self.batch_frames, max_epochs=self.hard_epochs,
                                lr=self.hard_lr, lr_decay=0.95, momentum=0.9,
                                clip_norm=5.0, seed=seed)

    def adapt_config(self, seed: int) -> distill.TsConfig:
        return distill.TsConfig(batch_frames=self.batch_frames, max_epochs=self.adapt_epochs,
                                lr=self.adapt_lr, lr_decay=0.98, momentum=0.9,
                                clip_norm=5.0, warmup_epochs=2, tol=1e-4, patience=8,
                                seed=seed)

    def adapt4_config(self, seed: int) -> distill.TsConfig:
        # the scaled corpus sees 4x the updates per epoch, so fewer sweeps reach
        # the same update budget
        return replace(self.adapt_config(seed), max_epochs=16, lr_decay=0.95,
                       warmup_epochs=1, patience=4)


SMOKE_CONFIG = SuiteConfig(num_classes=6, train_utts=60, eval_utts=20, duration=0.4,
                           hidden=(32,), context_k=2, hard_epochs=2, adapt_epochs=3,
                           scale_factor=2, batch_frames=512)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def init_model(dims: Sequence[int], seed: int, context_k: int,
               norm_source: Sequence[np.ndarray]) -> net.Network:
    """Fresh network whose fixed input normalization comes from a training corpus."""
    model = net.init_network(dims, "tanh", seed=seed, context=net.ContextWindow(context_k))
    stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in norm_source])
    return net.set_input_norm(model, stacked.mean(axis=0), stacked.std(axis=0) + 1e-3)


def _fer(model: net.Network, items: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    errors = frames = 0
    for feats, labels in items:
        posteriors = net.forward(model, np.asarray(feats, dtype=np.float64))
        errors += int(np.sum(posteriors.argmax(axis=1) != labels))
        frames += labels.size
    return 100.0 * errors / frames


@dataclass
class Assertion:
    name: str
    passed: bool
    detail: str
    soft: bool = False

    def line(self) -> str:
        status = "PASS" if self.passed else ("FINDING" if self.soft else "FAIL")
        return f"[{status}] {self.name}: {self.detail}"


@dataclass
class ScenarioResult:
    scenario: str
    seed: int
    metrics: dict[str, float]
    results: list[ev.EvalResult] = field(default_factory=list)

    def save(self, path: Path) -> None:
        path.write_text(json.dumps({"scenario": self.scenario, "seed": self.seed,
                                    "metrics": self.metrics}, sort_keys=True, indent=1))


def _train_and_save(kind: str, out_dir: Path, model, report) -> None:
    net.save_checkpoint(out_dir / f"{kind}.ckpt", model)
    report.save(out_dir / f"{kind}.report.tsv")


def run_noisy_scenario(seed: int, out_dir: str | Path,
                       cfg: SuiteConfig | None = None) -> ScenarioResult:
    """Clean teacher, multi-condition baseline, pseudo-label baseline, and T/S
    students at 1x and 4x parallel data, evaluated on clean/noisy/held-out-noise
    and a wide-SNR bucket corpus."""
    cfg = cfg or SuiteConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fcfg = cfg.feature_config()
    spec = cfg.synth_spec()

    _log(f"[noisy seed {seed}] synthesizing corpora")
    train_recs = corp.synth_corpus(spec, cfg.train_utts, 100 + seed, out_dir / "train")
    eval_recs = corp.synth_corpus(spec, cfg.eval_utts, 900 + seed, out_dir / "eval")

    train_noises = [sig.synth_noise(k, 45.0, cfg.sample_rate, 10 * seed + i)
                    for i, k in enumerate(("pink", "band"))]
    eval_noises = [sig.synth_noise(k, 45.0, cfg.sample_rate, 7000 + 10 * seed + i)
                   for i, k in enumerate(("pink", "band"))]
    heldout_noise = sig.synth_noise("hiss", 45.0, cfg.sample_rate, 7000 + 10 * seed + 7)

    _log(f"[noisy seed {seed}] building parallel corpora")
    pairs1 = corp.build_noisy_parallel(train_recs, train_noises, cfg.snr_lo, cfg.snr_hi,
                                       300 + seed, out_dir / "pairs", fcfg)
    pairs1.save(out_dir / "pairs" / "manifest-1x.tsv")
    pairs4 = corp.scale_corpus(pairs1, cfg.scale_factor, 310 + seed)
    pairs4.save(out_dir / "pairs" / f"manifest-{cfg.scale_factor}x.tsv")

    eval_noisy = corp.build_noisy_parallel(eval_recs, eval_noises, cfg.snr_lo, cfg.snr_hi,
                                           400 + seed, out_dir / "eval-noisy", fcfg)
    eval_hiss = corp.build_noisy_parallel(eval_recs, [heldout_noise], cfg.snr_lo, cfg.snr_hi,
                                          500 + seed, out_dir / "eval-hiss", fcfg)

    clean_eval = corp.load_labeled(eval_recs)
    noisy_eval = [(p.target.load_features(), p.target.load_labels())
                  for p in eval_noisy.pairs]
    hiss_eval = [(p.target.load_features(), p.target.load_labels())
                 for p in eval_hiss.pairs]

    train_clean = corp.load_labeled(train_recs)
    train_noisy = [(p.target.load_features(), p.target.load_labels())
                   for p in pairs1.pairs]

    dims = [fcfg.n_mels * (2 * cfg.context_k + 1), *cfg.hidden, cfg.num_classes]
    hard_cfg = cfg.hard_config(seed)

    _log(f"[noisy seed {seed}] training teacher")
    teacher, rep = distill.train_hard(
        init_model(dims, seed, cfg.context_k, [f for f, _ in train_clean]),
        train_clean, hard_cfg)
    _train_and_save("teacher", out_dir, teacher, rep)

    _log(f"[noisy seed {seed}] training multi-condition baseline")
    multicond, rep = distill.train_hard(
        init_model(dims, seed + 1, cfg.context_k, [f for f, _ in train_noisy]),
        train_noisy, hard_cfg)
    _train_and_save("multicond", out_dir, multicond, rep)

    _log(f"[noisy seed {seed}] pseudo-label baseline")
    pseudo, rep = distill.pseudo_label_adapt(teacher, [f for f, _ in train_noisy], hard_cfg)
    _train_and_save("pseudo", out_dir, pseudo, rep)

    _log(f"[noisy seed {seed}] T/S adaptation 1x")
    ts1, rep = distill.ts_adapt(teacher, pairs1, cfg.adapt_config(seed))
    _train_and_save("ts1x", out_dir, ts1, rep)

    _log(f"[noisy seed {seed}] T/S adaptation {cfg.scale_factor}x")
    ts4, rep = distill.ts_adapt(teacher, pairs4, cfg.adapt4_config(seed))
    _train_and_save(f"ts{cfg.scale_factor}x", out_dir, ts4, rep)

    _log(f"[noisy seed {seed}] evaluating")
    models = {"teacher": teacher, "multicond": multicond, "pseudo": pseudo,
              "ts1x": ts1, f"ts{cfg.scale_factor}x": ts4}
    teacher_data = {"teacher": "clean", "multicond": "noisy", "pseudo": "clean",
                    "ts1x": "clean", f"ts{cfg.scale_factor}x": "clean"}
    student_data = {"teacher": "none", "multicond": "none", "pseudo": "self-labeled noisy",
                    "ts1x": "parallel 1x", f"ts{cfg.scale_factor}x":
                    f"parallel {cfg.scale_factor}x"}
    metrics: dict[str, float] = {}
    results: list[ev.EvalResult] = []
    for name, model in models.items():
        for cond, items in (("clean", clean_eval), ("noisy", noisy_eval),
                            ("heldout", hiss_eval)):
            err = _fer(model, items)
            metrics[f"{name}_{cond}"] = err
            results.append(ev.EvalResult(name, cond, err, teacher_data=teacher_data[name],
                                         student_data=student_data[name]))

    clean_feats = [f for f, _ in clean_eval]
    noisy_feats = [f for f, _ in noisy_eval]
    metrics["gap_clone"] = ev.behavioral_gap(teacher, clean_feats, teacher, noisy_feats)
    metrics[f"gap_ts{cfg.scale_factor}x"] = ev.behavioral_gap(teacher, clean_feats, ts4,
                                                              noisy_feats)

    # wide-SNR corpus with long pauses for the SNR detector (bucket analysis)
    _log(f"[noisy seed {seed}] bucket breakdown")
    bucket_recs = corp.synth_corpus(cfg.bucket_spec(), cfg.eval_utts, 950 + seed,
                                    out_dir / "eval-bucket")
    bucket_pairs = corp.build_noisy_parallel(bucket_recs, eval_noises, -4.0, 48.0,
                                             600 + seed, out_dir / "eval-bucket-mix", fcfg)
    for name in ("teacher", f"ts{cfg.scale_factor}x"):
        model = models[name]
        per_utt = []
        for p in bucket_pairs.pairs:
            feats = p.target.load_features()
            labels = p.target.load_labels()
            posteriors = net.forward(model, feats.astype(np.float64))
            errors = int(np.sum(posteriors.argmax(axis=1) != labels))
            est = sig.estimate_snr(p.target.load_wave(), fcfg.frame_len, fcfg.hop)
            per_utt.append(ev.UtteranceResult(labels.size, errors, est))
        report = ev.bucket_breakdown(per_utt)
        for bucket, (err, frames) in report.buckets.items():
            metrics[f"bucket_{name}_{bucket.name}"] = err
            metrics[f"bucketframes_{name}_{bucket.name}"] = frames
        results.append(ev.EvalResult(
            name, "wide-snr", report.overall_error,
            teacher_data=teacher_data[name], student_data=student_data[name],
            buckets={b.value: v for b, v in report.buckets.items()},
            sentinel_frames=report.sentinel_frames))

    result = ScenarioResult("noisy", seed, metrics, results)
    result.save(out_dir / "metrics.json")
    ev.write_results(out_dir / "results.jsonl", results)
    return result


def run_children_scenario(seed: int, out_dir: str | Path,
                          cfg: SuiteConfig | None = None) -> ScenarioResult:
    """Adults-to-children analog: teacher on plain features, evaluation and
    adaptation on bilinear-warped features, plus the domain-classifier filter."""
    cfg = cfg or SuiteConfig(train_utts=1200)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fcfg = cfg.feature_config()
    spec = cfg.synth_spec()

    _log(f"[children seed {seed}] synthesizing corpora")
    train_recs = corp.synth_corpus(spec, cfg.train_utts, 100 + seed, out_dir / "train")
    eval_recs = corp.synth_corpus(spec, cfg.eval_utts, 900 + seed, out_dir / "eval")

    _log(f"[children seed {seed}] warping")
    pairs = corp.build_warped_parallel(train_recs, cfg.warp_alpha, seed,
                                       out_dir / "pairs", fcfg)
    pairs.save(out_dir / "pairs" / "manifest-warped.tsv")
    eval_warp = corp.build_warped_parallel(eval_recs, cfg.warp_alpha, seed,
                                           out_dir / "eval-warped", fcfg)

    train_clean = corp.load_labeled(train_recs)
    clean_eval = corp.load_labeled(eval_recs)
    warped_eval = [(p.target.load_features(), p.target.load_labels())
                   for p in eval_warp.pairs]

    dims = [fcfg.n_mels * (2 * cfg.context_k + 1), *cfg.hidden, cfg.num_classes]
    _log(f"[children seed {seed}] training teacher")
    teacher, rep = distill.train_hard(
        init_model(dims, seed, cfg.context_k, [f for f, _ in train_clean]),
        train_clean, cfg.hard_config(seed))
    _train_and_save("teacher", out_dir, teacher, rep)

    _log(f"[children seed {seed}] T/S adaptation on warped pairs")
    student, rep = distill.ts_adapt(teacher, pairs, cfg.adapt_config(seed))
    _train_and_save("student", out_dir, student, rep)

    metrics = {
        "teacher_plain": _fer(teacher, clean_eval),
        "teacher_warped": _fer(teacher, warped_eval),
        "student_warped": _fer(student, warped_eval),
        "student_plain": _fer(student, clean_eval),
    }

    # two-domain classifier filter: ground-truth composition is known
    _log(f"[children seed {seed}] domain-classifier filter")
    n_plain = cfg.eval_utts * 2 // 5
    n_clf = min(300, len(train_clean) // 2)
    clf_items = []
    for feats, _ in train_clean[:n_clf]:
        clf_items.append((feats, np.zeros(feats.shape[0], dtype=np.int32)))
    for p in pairs.pairs[n_clf:2 * n_clf]:
        feats = p.target.load_features()
        clf_items.append((feats, np.ones(feats.shape[0], dtype=np.int32)))
    clf_dims = [fcfg.n_mels * (2 * cfg.context_k + 1), 64, 2]
    clf, _ = distill.train_hard(
        init_model(clf_dims, seed + 9, cfg.context_k, [f for f, _ in clf_items]),
        clf_items, cfg.hard_config(seed))
    clf_acc = 100.0 - _fer(clf, [(f, np.full(f.shape[0], y, dtype=np.int32))
                                 for (f, _), y in zip(clf_items, [0] * n_clf + [1] * n_clf)])
    net.save_checkpoint(out_dir / "domain_clf.ckpt", clf)

    mixed = []
    for p in eval_warp.pairs[:n_plain]:
        mixed.append(corp.ManifestPair(p.source, p.source, p.frames))
    mixed += eval_warp.pairs[n_plain:]
    mixed_manifest = corp.ParallelManifest(mixed, dict(eval_warp.metadata), eval_warp.root)
    kept = corp.filter_by_domain_classifier(mixed_manifest, clf, accept_class=1,
                                            threshold=0.5, side="target")
    true_fraction = (len(mixed) - n_plain) / len(mixed)
    metrics.update({
        "clf_frame_acc": clf_acc,
        "filter_retained": float(kept.metadata["filter.retained_fraction"]),
        "filter_true_fraction": true_fraction,
    })

    result = ScenarioResult("children", seed, metrics)
    result.save(out_dir / "metrics.json")
    return result


def _seed_average(per_seed: Sequence[ScenarioResult], key: str) -> float:
    return float(np.mean([r.metrics[key] for r in per_seed]))


def noisy_assertions(per_seed: Sequence[ScenarioResult],
                     scale_factor: int = 4) -> list[Assertion]:
    """Seed-averaged trend checks for the noisy scenario (Tables 1-3 analogs)."""
    avg = lambda k: _seed_average(per_seed, k)
    ts_hi = f"ts{scale_factor}x"
    out = [
        Assertion("teacher clean error <= 5%",
                  avg("teacher_clean") <= 5.0,
                  f"teacher clean {avg('teacher_clean'):.2f}%"),
        Assertion("teacher degrades >= 10 points on noisy",
                  avg("teacher_noisy") - avg("teacher_clean") >= 10.0,
                  f"clean {avg('teacher_clean'):.2f}% -> noisy {avg('teacher_noisy'):.2f}%"),
        Assertion("T/S 1x beats multi-condition on noisy",
                  avg("ts1x_noisy") < avg("multicond_noisy"),
                  f"ts1x {avg('ts1x_noisy'):.2f}% vs multicond {avg('multicond_noisy'):.2f}%"),
        Assertion("T/S 1x beats multi-condition on clean",
                  avg("ts1x_clean") < avg("multicond_clean"),
                  f"ts1x {avg('ts1x_clean'):.2f}% vs multicond {avg('multicond_clean'):.2f}%"),
        Assertion(f"T/S {scale_factor}x <= T/S 1x on noisy",
                  avg(f"{ts_hi}_noisy") <= avg("ts1x_noisy"),
                  f"{ts_hi} {avg(f'{ts_hi}_noisy'):.2f}% vs ts1x {avg('ts1x_noisy'):.2f}%"),
        Assertion(f"T/S {scale_factor}x noisy within 3 points of teacher clean",
                  avg(f"{ts_hi}_noisy") <= avg("teacher_clean") + 3.0,
                  f"{ts_hi} noisy {avg(f'{ts_hi}_noisy'):.2f}% vs teacher clean "
                  f"{avg('teacher_clean'):.2f}%"),
        Assertion("behavioral gap shrinks by factor >= 5",
                  avg("gap_clone") >= 5.0 * avg(f"gap_{ts_hi}"),
                  f"clone {avg('gap_clone'):.3f} -> {ts_hi} {avg(f'gap_{ts_hi}'):.3f} nats/frame"),
        Assertion(f"T/S {scale_factor}x <= T/S 1x on held-out noise",
                  avg(f"{ts_hi}_heldout") <= avg("ts1x_heldout"),
                  f"{ts_hi} {avg(f'{ts_hi}_heldout'):.2f}% vs ts1x "
                  f"{avg('ts1x_heldout'):.2f}%"),
        Assertion("pseudo-label baseline >= T/S 1x on noisy (soft)",
                  avg("pseudo_noisy") >= avg("ts1x_noisy"),
                  f"pseudo {avg('pseudo_noisy'):.2f}% vs ts1x {avg('ts1x_noisy'):.2f}%",
                  soft=True),
    ]
    # bucket criterion: adapted student at or below the teacher in every bucket
    # up to [20,35); buckets must all be populated
    for bucket in sig.SnrBucket:
        frames = avg(f"bucketframes_teacher_{bucket.name}")
        out.append(Assertion(f"bucket {bucket.value} populated", frames > 0,
                             f"{frames:.0f} frames"))
    for bucket in (sig.SnrBucket.BELOW_5, sig.SnrBucket.FROM_5_TO_20,
                   sig.SnrBucket.FROM_20_TO_35):
        t_err = avg(f"bucket_teacher_{bucket.name}")
        s_err = avg(f"bucket_ts{scale_factor}x_{bucket.name}")
        out.append(Assertion(f"student <= teacher in bucket {bucket.value}",
                             s_err <= t_err, f"student {s_err:.2f}% vs teacher {t_err:.2f}%"))
    return out


def children_assertions(per_seed: Sequence[ScenarioResult]) -> list[Assertion]:
    """Seed-averaged trend checks for the warped-domain scenario (Tables 5-6 analog)."""
    avg = lambda k: _seed_average(per_seed, k)
    gap = avg("teacher_warped") - avg("teacher_plain")
    recovered = avg("teacher_warped") - avg("student_warped")
    return [
        Assertion("teacher degrades >= 10 points on warped speech", gap >= 10.0,
                  f"plain {avg('teacher_plain'):.2f}% -> warped {avg('teacher_warped'):.2f}%"),
        Assertion("adaptation recovers >= 50% of the warp gap",
                  recovered >= 0.5 * gap,
                  f"student warped {avg('student_warped'):.2f}%, recovered "
                  f"{recovered:.1f} of {gap:.1f} points"),
        Assertion("domain classifier frame accuracy >= 95%",
                  avg("clf_frame_acc") >= 95.0, f"{avg('clf_frame_acc'):.1f}%"),
        Assertion("retained fraction within 5 points of ground truth",
                  abs(avg("filter_retained") - avg("filter_true_fraction")) <= 0.05,
                  f"retained {avg('filter_retained'):.3f} vs true "
                  f"{avg('filter_true_fraction'):.3f}"),
    ]


SCENARIOS: dict[str, tuple[Callable, Callable]] = {
    "noisy": (run_noisy_scenario, noisy_assertions),
    "children": (run_children_scenario, children_assertions),
}


def _run_one(args: tuple) -> ScenarioResult:
    scenario, seed, out_dir, cfg = args
    return SCENARIOS[scenario][0](seed, out_dir, cfg)


def run_suite(scenario: str, seeds: Sequence[int], out_dir: str | Path,
              cfg: SuiteConfig | None = None, jobs: int = 1,
              ) -> tuple[list[ScenarioResult], list[Assertion]]:
    """Run a scenario over several seeds and evaluate its trend assertions.

    With fewer than 3 seeds the assertions are reported but marked as having
    insufficient seeds. Seeds run in parallel worker processes when jobs > 1.
    """
    if scenario == "mismatch":
        # the unseen-noise comparison reuses the noisy pipeline's held-out metric
        scenario = "noisy"
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}, expected one of "
                         f"{sorted(SCENARIOS) + ['mismatch']}")
    out_dir = Path(out_dir)
    tasks = [(scenario, s, out_dir / f"seed{s}", cfg) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_run_one, tasks))
    else:
        per_seed = [_run_one(t) for t in tasks]
    scale = (cfg or SuiteConfig()).scale_factor
    check = SCENARIOS[scenario][1]
    assertions = (check(per_seed, scale) if scenario == "noisy" else check(per_seed))
    if len(seeds) < 3:
        assertions = [replace_assertion_insufficient(a) for a in assertions]
    return per_seed, assertions


def replace_assertion_insufficient(a: Assertion) -> Assertion:
    return Assertion(a.name, a.passed, a.detail + " [insufficient seeds for a trend claim]",
                     soft=True)
