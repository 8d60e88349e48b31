"""Soft-label losses and the teacher/student adaptation loop, plus the baseline trainers.

All trainers share one mini-batch engine driven by an interpolated loss
lambda * soft_ce + (1 - lambda) * hard_ce, so the lambda = 1 and lambda = 0
endpoints reduce bitwise to pure distillation and pure hard-label training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .network import (Network, backward, clone, forward, forward_stacked,
                      prepare_input, sgd_step, softmax_floored)


@dataclass(frozen=True)
class TsConfig:
    """Hyperparameters and stopping rule shared by all trainers.

    Training stops when the relative improvement of the validation objective
    over the best seen so far stays below `tol` for `patience` consecutive
    epochs, or at `max_epochs`.
    """

    batch_frames: int = 1024
    max_epochs: int = 30
    lr: float = 0.05
    lr_decay: float = 0.95
    momentum: float = 0.9
    clip_norm: float = 5.0  # global gradient-norm ceiling per update; None disables
    warmup_epochs: int = 0  # linear ramp to full lr over the first epochs
    tol: float = 1e-3
    patience: int = 3
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_frames < 1 or self.max_epochs < 1:
            raise ValueError("batch_frames and max_epochs must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")


@dataclass(frozen=True)
class EpochRow:
    """One report line; epoch 0 is the evaluation-only pass before any update."""

    epoch: int
    train_obj: float
    val_obj: float
    val_fer: float | None
    wall_s: float


@dataclass
class LossReport:
    rows: list[EpochRow] = field(default_factory=list)

    @property
    def final_val(self) -> float:
        return self.rows[-1].val_obj

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for r in self.rows:
                fer = "NA" if r.val_fer is None else format(r.val_fer, ".17g")
                f.write(f"{r.epoch}\t{r.train_obj:.17g}\t{r.val_obj:.17g}\t{fer}\t"
                        f"{r.wall_s:.6f}\n")

    @staticmethod
    def load(path: str | Path) -> "LossReport":
        rows = []
        with open(path) as f:
            for line in f:
                epoch, train, val, fer, wall = line.rstrip("\n").split("\t")
                rows.append(EpochRow(int(epoch), float(train), float(val),
                                     None if fer == "NA" else float(fer), float(wall)))
        return LossReport(rows)


def _validate_posteriors(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"{name} must be a frames x classes matrix")
    if np.any(p <= 0.0):
        raise ValueError(f"{name} has non-positive entries; apply the posterior floor")
    if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError(f"{name} rows do not sum to 1 within 1e-6")
    return p


def kl_divergence(teacher: np.ndarray, student: np.ndarray) -> float:
    """KL(teacher || student), summed over frames and classes, in nats."""
    t = _validate_posteriors(teacher, "teacher")
    s = _validate_posteriors(student, "student")
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch: teacher {t.shape}, student {s.shape}")
    return float(np.sum(t * (np.log(t) - np.log(s))))


def entropy(posteriors: np.ndarray) -> float:
    """Shannon entropy in nats, summed over frames."""
    p = _validate_posteriors(posteriors, "posteriors")
    return float(-np.sum(p * np.log(p)))


def soft_ce_loss(teacher: np.ndarray, student_logits: np.ndarray
                 ) -> tuple[float, np.ndarray]:
    """Soft-target cross-entropy -sum(T * log softmax(logits)) and its logit gradient.

    The gradient per frame is softmax(logits) - teacher, which is also the
    gradient of the KL divergence: the teacher entropy term does not depend on
    the student.
    """
    t = _validate_posteriors(teacher, "teacher")
    logits = np.asarray(student_logits, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"shape mismatch: teacher {t.shape}, logits {logits.shape}")
    p_s = softmax_floored(logits)
    loss = float(-np.sum(t * np.log(p_s)))
    return loss, p_s - t


def hard_ce_loss(labels: np.ndarray, logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy against integer labels; equals soft_ce_loss with one-hot rows."""
    labels = np.asarray(labels)
    logits = np.asarray(logits, dtype=np.float64)
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {logits.shape[0]} frames")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"label out of range [0, {logits.shape[1]})")
    p_s = softmax_floored(logits)
    rows = np.arange(logits.shape[0])
    loss = float(-np.sum(np.log(p_s[rows, labels])))
    grad = p_s.copy()
    grad[rows, labels] -= 1.0
    return loss, grad


@dataclass
class TrainItem:
    """One utterance of aligned training material for the engine."""

    feats: np.ndarray  # student-side input, frames x dims
    soft: np.ndarray | None = None  # teacher posteriors, frames x classes
    labels: np.ndarray | None = None  # hard class indices

    def __post_init__(self):
        n = self.feats.shape[0]
        if self.soft is not None and self.soft.shape[0] != n:
            raise ValueError(f"{self.soft.shape[0]} soft-target rows for {n} frames")
        if self.labels is not None and self.labels.shape[0] != n:
            raise ValueError(f"{self.labels.shape[0]} labels for {n} frames")


def _batch_loss(lam: float, logits: np.ndarray, soft: np.ndarray | None,
                labels: np.ndarray | None) -> tuple[float, np.ndarray]:
    # Exact branches at the endpoints keep lambda in {0, 1} bitwise equal to the
    # pure objectives.
    if lam == 1.0:
        return soft_ce_loss(soft, logits)
    if lam == 0.0:
        return hard_ce_loss(labels, logits)
    l_soft, g_soft = soft_ce_loss(soft, logits)
    l_hard, g_hard = hard_ce_loss(labels, logits)
    return lam * l_soft + (1.0 - lam) * l_hard, lam * g_soft + (1.0 - lam) * g_hard


def _stacked(item: TrainItem, net: Network) -> np.ndarray:
    return prepare_input(net, np.asarray(item.feats, dtype=np.float64))


def _evaluate(net: Network, items: Sequence[TrainItem], lam: float,
              batch_frames: int) -> tuple[float, float | None]:
    """Frame-averaged objective and frame error rate (None without labels)."""
    total, frames = 0.0, 0
    errors, labeled = 0, 0
    for item in items:
        x = _stacked(item, net)
        for lo in range(0, x.shape[0], batch_frames):
            hi = min(lo + batch_frames, x.shape[0])
            _, cache = forward_stacked(net, x[lo:hi])
            soft = item.soft[lo:hi] if item.soft is not None else None
            labels = item.labels[lo:hi] if item.labels is not None else None
            loss, _ = _batch_loss(lam, cache.logits, soft, labels)
            total += loss
            frames += hi - lo
            if item.labels is not None:
                errors += int(np.sum(cache.logits.argmax(axis=1) != labels))
                labeled += hi - lo
    fer = 100.0 * errors / labeled if labeled else None
    return total / frames, fer


def _run_training(student: Network, items: Sequence[TrainItem], lam: float,
                  cfg: TsConfig) -> tuple[Network, LossReport]:
    """Shared mini-batch SGD loop over shuffled utterances with aligned frames.

    The returned network carries the parameters of the best validation epoch,
    not necessarily the last one.
    """
    if not items:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(cfg.seed)
    n_val = int(round(cfg.val_fraction * len(items)))
    order = rng.permutation(len(items))
    val_items = [items[i] for i in order[:n_val]]
    train_items = [items[i] for i in order[n_val:]]
    if not val_items:  # tiny corpora validate on the training material
        val_items = train_items

    t0 = time.perf_counter()
    report = LossReport()
    train_obj0, _ = _evaluate(student, train_items, lam, cfg.batch_frames)
    val_obj, val_fer = _evaluate(student, val_items, lam, cfg.batch_frames)
    report.rows.append(EpochRow(0, train_obj0, val_obj, val_fer,
                                time.perf_counter() - t0))

    velocity = None
    best_val = val_obj
    best_params = ([w.copy() for w in student.weights],
                   [b.copy() for b in student.biases])
    streak = 0
    for epoch in range(1, cfg.max_epochs + 1):
        if epoch <= cfg.warmup_epochs:
            lr = cfg.lr * epoch / (cfg.warmup_epochs + 1)
        else:
            lr = cfg.lr * cfg.lr_decay ** (epoch - cfg.warmup_epochs - 1)
        pending_x: list[np.ndarray] = []
        pending_soft: list[np.ndarray] = []
        pending_labels: list[np.ndarray] = []
        loss_sum, frame_sum, batch_no = 0.0, 0, 0

        def flush(block: int | None) -> None:
            nonlocal velocity, loss_sum, frame_sum, batch_no
            nonlocal pending_x, pending_soft, pending_labels
            while pending_x:
                have = sum(a.shape[0] for a in pending_x)
                if block is not None and have < block:
                    return
                x = np.concatenate(pending_x) if len(pending_x) > 1 else pending_x[0]
                soft = (np.concatenate(pending_soft) if len(pending_soft) > 1
                        else pending_soft[0]) if pending_soft else None
                labels = (np.concatenate(pending_labels) if len(pending_labels) > 1
                          else pending_labels[0]) if pending_labels else None
                take = have if block is None else block
                bx, bs = x[:take], soft[:take] if soft is not None else None
                bl = labels[:take] if labels is not None else None
                pending_x = [x[take:]] if take < have else []
                pending_soft = [soft[take:]] if soft is not None and take < have else []
                pending_labels = [labels[take:]] if labels is not None and take < have else []
                _, cache = forward_stacked(student, bx)
                loss, dlogits = _batch_loss(lam, cache.logits, bs, bl)
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite training loss at epoch {epoch}, batch {batch_no}")
                grads = backward(student, cache, dlogits / bx.shape[0])
                if cfg.clip_norm is not None:
                    norm = np.sqrt(sum(float((dw**2).sum() + (db**2).sum())
                                       for dw, db in grads))
                    if norm > cfg.clip_norm:
                        scale = cfg.clip_norm / norm
                        grads = [(dw * scale, db * scale) for dw, db in grads]
                velocity = sgd_step(student, grads, lr, cfg.momentum, velocity)
                loss_sum += loss
                frame_sum += bx.shape[0]
                batch_no += 1
                if block is None:
                    return

        for i in rng.permutation(len(train_items)):
            item = train_items[i]
            pending_x.append(_stacked(item, student))
            if item.soft is not None:
                pending_soft.append(np.asarray(item.soft, dtype=np.float64))
            if item.labels is not None:
                pending_labels.append(np.asarray(item.labels))
            flush(cfg.batch_frames)
        flush(None)

        val_obj, val_fer = _evaluate(student, val_items, lam, cfg.batch_frames)
        report.rows.append(EpochRow(epoch, loss_sum / frame_sum, val_obj, val_fer,
                                    time.perf_counter() - t0))
        improvement = (best_val - val_obj) / max(abs(best_val), 1e-12)
        streak = streak + 1 if improvement < cfg.tol else 0
        if val_obj < best_val:
            best_val = val_obj
            best_params = ([w.copy() for w in student.weights],
                           [b.copy() for b in student.biases])
        if streak >= cfg.patience:
            break
    student.weights = [w.copy() for w in best_params[0]]
    student.biases = [b.copy() for b in best_params[1]]
    return student, report


def _teacher_targets(teacher: Network, sources: Iterable[np.ndarray]) -> list[np.ndarray]:
    return [forward(teacher, np.asarray(src, dtype=np.float64)) for src in sources]


def _as_pairs(corpus) -> list[tuple]:
    """Accept a ParallelManifest or a sequence of (src, tgt[, labels]) tuples."""
    if hasattr(corpus, "iter_pairs"):
        pairs = list(corpus.iter_pairs())
    else:
        pairs = list(corpus)
    if not pairs:
        raise ValueError("empty corpus")
    for i, pair in enumerate(pairs):
        src, tgt = pair[0], pair[1]
        if src.shape[0] != tgt.shape[0]:
            raise ValueError(f"pair {i}: source has {src.shape[0]} frames, "
                             f"target {tgt.shape[0]}")
    return pairs


def ts_adapt(teacher: Network, corpus, cfg: TsConfig) -> tuple[Network, LossReport]:
    """Adapt a clone of the teacher to the target domain on parallel unlabeled pairs.

    The teacher runs on the source side of every pair to produce soft targets;
    only the cloned student is updated. Target-side labels, when a pair carries
    them, are used solely for the report's frame error column.
    """
    pairs = _as_pairs(corpus)
    soft = _teacher_targets(teacher, (p[0] for p in pairs))
    items = [TrainItem(np.asarray(p[1]), s, p[2] if len(p) > 2 else None)
             for p, s in zip(pairs, soft)]
    student = clone(teacher)
    return _run_training(student, items, 1.0, cfg)


def train_hard(net: Network, data: Sequence[tuple[np.ndarray, np.ndarray]],
               cfg: TsConfig) -> tuple[Network, LossReport]:
    """Supervised cross-entropy training on (features, frame labels) pairs.

    Fed mixed-condition labeled data this is the multi-condition baseline; the
    input network is left untouched and a trained copy is returned.
    """
    if not data:
        raise ValueError("empty corpus")
    items = []
    for feats, labels in data:
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= net.output_dim):
            raise ValueError(f"label out of range [0, {net.output_dim})")
        items.append(TrainItem(np.asarray(feats), None, labels))
    return _run_training(clone(net), items, 0.0, cfg)


def pseudo_label_adapt(teacher: Network, target_features: Sequence[np.ndarray],
                       cfg: TsConfig) -> tuple[Network, LossReport]:
    """Self-training baseline: hard labels are the teacher's argmax on the target data.

    Ties break toward the lowest class index. The student starts as a clone of
    the teacher, as in ts_adapt.
    """
    if not target_features:
        raise ValueError("empty target set")
    items = []
    for feats in target_features:
        feats = np.asarray(feats)
        posteriors = forward(teacher, np.asarray(feats, dtype=np.float64))
        items.append(TrainItem(feats, None, posteriors.argmax(axis=1)))
    return _run_training(clone(teacher), items, 0.0, cfg)


def interpolated_distill(teacher: Network, corpus, lam: float,
                         cfg: TsConfig) -> tuple[Network, LossReport]:
    """Knowledge distillation with hard labels: lam * soft_ce + (1-lam) * hard_ce.

    Requires target-side labels on every pair. lam = 1 reduces to ts_adapt and
    lam = 0 to train_hard on the target side, batch for batch.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    pairs = _as_pairs(corpus)
    if any(len(p) < 3 or p[2] is None for p in pairs):
        raise ValueError("interpolated distillation needs target-side labels on every pair")
    soft = _teacher_targets(teacher, (p[0] for p in pairs))
    items = [TrainItem(np.asarray(p[1]), s, np.asarray(p[2]))
             for p, s in zip(pairs, soft)]
    return _run_training(clone(teacher), items, lam, cfg)
