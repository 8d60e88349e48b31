"""Frame error rates, per-SNR-bucket breakdowns, and experiment report tables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .distill import kl_divergence
from .network import Network, forward
from .signal import SNR_SENTINEL_DB, SnrBucket, snr_bucket


def frame_error_rate(posteriors: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of frames whose argmax posterior differs from the label.

    Argmax ties resolve toward the lowest class index.
    """
    posteriors = np.asarray(posteriors)
    labels = np.asarray(labels)
    if posteriors.shape[0] != labels.shape[0]:
        raise ValueError(f"{posteriors.shape[0]} posterior rows vs {labels.shape[0]} labels")
    return 100.0 * float(np.mean(posteriors.argmax(axis=1) != labels))


@dataclass(frozen=True)
class UtteranceResult:
    """Per-utterance error counts plus the estimated SNR used for bucketing."""

    frames: int
    errors: int
    snr_db: float


@dataclass
class BucketReport:
    """Frame-weighted error per SNR bucket; sentinel-SNR utterances sit outside."""

    buckets: dict[SnrBucket, tuple[float, int]]
    sentinel_frames: int
    overall_error: float
    bucket_weighted_error: float


def bucket_breakdown(results: Sequence[UtteranceResult]) -> BucketReport:
    """Group per-utterance results into the four SNR buckets.

    Utterances whose SNR equals the estimator sentinel are excluded from every
    bucket and counted separately; the frame-weighted average over buckets can
    therefore differ from the overall error.
    """
    if not results:
        raise ValueError("no utterance results to bucket")
    frames = {b: 0 for b in SnrBucket}
    errors = {b: 0 for b in SnrBucket}
    sentinel_frames = 0
    total_frames = total_errors = 0
    for r in results:
        total_frames += r.frames
        total_errors += r.errors
        if r.snr_db == SNR_SENTINEL_DB:
            sentinel_frames += r.frames
            continue
        b = snr_bucket(r.snr_db)
        frames[b] += r.frames
        errors[b] += r.errors
    buckets = {b: (100.0 * errors[b] / frames[b] if frames[b] else 0.0, frames[b])
               for b in SnrBucket}
    in_bucket = sum(frames.values())
    weighted = 100.0 * sum(errors.values()) / in_bucket if in_bucket else 0.0
    return BucketReport(buckets, sentinel_frames,
                        100.0 * total_errors / total_frames, weighted)


def behavioral_gap(teacher: Network, source_features: Sequence[np.ndarray],
                   student: Network, target_features: Sequence[np.ndarray]) -> float:
    """Mean per-frame KL from teacher-on-source to student-on-target posteriors."""
    if len(source_features) != len(target_features):
        raise ValueError(f"{len(source_features)} source vs {len(target_features)} "
                         "target utterances")
    total, frames = 0.0, 0
    for src, tgt in zip(source_features, target_features):
        if src.shape[0] != tgt.shape[0]:
            raise ValueError(f"misaligned pair: {src.shape[0]} vs {tgt.shape[0]} frames")
        p_t = forward(teacher, np.asarray(src, dtype=np.float64))
        p_s = forward(student, np.asarray(tgt, dtype=np.float64))
        total += kl_divergence(p_t, p_s)
        frames += src.shape[0]
    return total / frames


@dataclass
class EvalResult:
    """One model evaluated on one corpus, with optional KL and bucket columns."""

    model_id: str
    corpus_id: str
    error_rate: float
    mean_kl: float | None = None
    teacher_data: str = ""
    student_data: str = ""
    buckets: dict[str, tuple[float, int]] | None = None
    sentinel_frames: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        if d["buckets"] is not None:
            d["buckets"] = {k: list(v) for k, v in d["buckets"].items()}
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvalResult":
        d = json.loads(text)
        if d.get("buckets") is not None:
            d["buckets"] = {k: (float(v[0]), int(v[1])) for k, v in d["buckets"].items()}
        return EvalResult(**d)


def write_results(path: str | Path, results: Sequence[EvalResult]) -> None:
    with open(path, "w") as f:
        for r in results:
            f.write(r.to_json() + "\n")


def read_results(path: str | Path) -> list[EvalResult]:
    with open(path) as f:
        return [EvalResult.from_json(line) for line in f if line.strip()]


def experiment_table(results: Sequence[EvalResult]) -> str:
    """Aligned text table: teacher/student training data first, one error column
    per evaluation condition, rows sorted by (teacher data, student data)."""
    conditions = sorted({r.corpus_id for r in results})
    header = ["teacher data", "student data"] + [f"{c} err%" for c in conditions]
    by_model: dict[tuple[str, str, str], dict[str, EvalResult]] = {}
    for r in results:
        key = (r.teacher_data, r.student_data, r.model_id)
        by_model.setdefault(key, {})[r.corpus_id] = r
    rows = []
    for (teacher, student, _model), cells in sorted(by_model.items()):
        row = [teacher or "-", student or "-"]
        for c in conditions:
            r = cells.get(c)
            row.append(f"{r.error_rate:.2f}" if r is not None else "-")
        rows.append(row)
    widths = [max(len(header[i]), *(len(row[i]) for row in rows)) if rows else len(header[i])
              for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"
