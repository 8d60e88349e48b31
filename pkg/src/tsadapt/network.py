"""Minimal dense softmax classifier: seeded init, exact backprop, SGD, gradient checking.

Parameters and activations are kept in float64; checkpoints persist at float32.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

POSTERIOR_FLOOR = 1e-12  # posteriors are floored and renormalized, keeping log-ratios finite

ACTIVATIONS = ("tanh", "relu", "none")
_ACT_IDS = {name: i for i, name in enumerate(ACTIVATIONS)}

CHECKPOINT_MAGIC = b"TSNETCK\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ContextWindow:
    """Frames of left/right context stacked onto each frame; edges replicate."""

    k: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"context k must be >= 0, got {self.k}")

    @property
    def width(self) -> int:
        return 2 * self.k + 1


@dataclass
class Network:
    """Ordered affine layers with per-layer activations; the last layer feeds a softmax.

    weights[i] has shape (in_dim, out_dim) so a batch of frames propagates as x @ W + b.
    An optional fixed input transform (x - input_shift) / input_scale, applied per
    feature dimension before context stacking, keeps raw log energies trainable; it
    is part of the model's input convention and is never updated by training.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]
    context: ContextWindow = field(default_factory=ContextWindow)
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) != len(self.activations):
            raise ValueError("weights, biases and activations must have equal length")
        for i, act in enumerate(self.activations):
            if act not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {act!r}")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: input dim {self.weights[i].shape[0]} does not "
                                 f"chain with previous output {self.weights[i - 1].shape[1]}")
        if (self.input_shift is None) != (self.input_scale is None):
            raise ValueError("input_shift and input_scale must be set together")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_network(dims: Sequence[int], activation: str = "tanh", seed: int = 0,
                 context: ContextWindow | None = None) -> Network:
    """Seeded uniform init scaled by 1/sqrt(fan_in); biases zero; hidden layers use
    `activation`, the output layer is linear."""
    if len(dims) < 2:
        raise ValueError(f"need at least input and output dims, got {list(dims)}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dims must be >= 1, got {list(dims)}")
    rng = np.random.default_rng(seed)
    weights, biases, acts = [], [], []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(dims[i], dims[i + 1])))
        biases.append(np.zeros(dims[i + 1]))
        acts.append(activation if i < len(dims) - 2 else "none")
    return Network(weights, biases, tuple(acts), context or ContextWindow())


def clone(net: Network) -> Network:
    return copy.deepcopy(net)


def set_input_norm(net: Network, shift: np.ndarray, scale: np.ndarray) -> Network:
    """Attach a per-dimension input standardization (typically training-corpus
    mean and standard deviation); returns the same network."""
    shift = np.asarray(shift, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if shift.shape != scale.shape or shift.ndim != 1:
        raise ValueError("shift and scale must be 1-D vectors of equal length")
    if np.any(scale <= 0):
        raise ValueError("input scale entries must be positive")
    net.input_shift, net.input_scale = shift, scale
    return net


def apply_input_norm(net: Network, features: np.ndarray) -> np.ndarray:
    """The network's fixed input transform; identity when none is attached."""
    feats = np.asarray(features, dtype=np.float64)
    if net.input_shift is None:
        return feats
    if feats.shape[1] != net.input_shift.size:
        raise ValueError(f"feature dim {feats.shape[1]} does not match input "
                         f"normalization length {net.input_shift.size}")
    return (feats - net.input_shift) / net.input_scale


def stack_context(features: np.ndarray, ctx: ContextWindow) -> np.ndarray:
    """Stack 2k+1 neighboring frames onto each frame, replicating at the edges."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("features must be a non-empty frames x dims matrix")
    if ctx.k == 0:
        return feats
    n = feats.shape[0]
    offsets = np.arange(-ctx.k, ctx.k + 1)
    idx = np.clip(np.arange(n)[:, None] + offsets[None, :], 0, n - 1)
    return feats[idx].reshape(n, -1)


def _apply_activation(z: np.ndarray, act: str) -> np.ndarray:
    if act == "tanh":
        return np.tanh(z)
    if act == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, act: str) -> np.ndarray:
    if act == "tanh":
        return 1.0 - a**2
    if act == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def softmax_floored(logits: np.ndarray) -> np.ndarray:
    """Row softmax, floored at POSTERIOR_FLOOR and renormalized; rows sum to 1."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p = np.maximum(p, POSTERIOR_FLOOR)
    return p / p.sum(axis=1, keepdims=True)


@dataclass
class ForwardCache:
    """Per-layer state from one forward pass, consumed by backward()."""

    x: np.ndarray
    zs: list[np.ndarray]
    acts: list[np.ndarray]

    @property
    def logits(self) -> np.ndarray:
        return self.acts[-1]


def prepare_input(net: Network, features: np.ndarray,
                  ctx: ContextWindow | None = None) -> np.ndarray:
    """Normalize and context-stack raw features into the network's input layout."""
    ctx = ctx if ctx is not None else net.context
    x = stack_context(apply_input_norm(net, features), ctx)
    if x.shape[1] != net.input_dim:
        raise ValueError(f"stacked feature dim {x.shape[1]} (dims {features.shape[1]} x "
                         f"window {ctx.width}) does not match network input {net.input_dim}")
    return x


def forward_stacked(net: Network, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass on an already prepared (normalized, stacked) input block."""
    if x.shape[1] != net.input_dim:
        raise ValueError(f"input dim {x.shape[1]} does not match network input "
                         f"{net.input_dim}")
    zs, acts = [], []
    a = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = a @ w + b
        a = _apply_activation(z, act)
        zs.append(z)
        acts.append(a)
    return softmax_floored(acts[-1]), ForwardCache(x, zs, acts)


def forward_with_cache(net: Network, features: np.ndarray,
                       ctx: ContextWindow | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass returning (posteriors, cache); the cache is required by backward()."""
    return forward_stacked(net, prepare_input(net, features, ctx))


def forward(net: Network, features: np.ndarray,
            ctx: ContextWindow | None = None) -> np.ndarray:
    """Posterior matrix, one row per frame; rows sum to 1 after the posterior floor."""
    posteriors, _ = forward_with_cache(net, features, ctx)
    return posteriors


def backward(net: Network, cache: ForwardCache | None,
             dloss_dlogits: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact parameter gradients given dLoss/dLogits from the matching forward pass."""
    if cache is None:
        raise ValueError("backward needs the ForwardCache from the matching forward pass")
    if dloss_dlogits.shape != cache.logits.shape:
        raise ValueError(f"dloss_dlogits shape {dloss_dlogits.shape} does not match "
                         f"logits {cache.logits.shape}")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.weights)
    delta = dloss_dlogits
    for i in range(len(net.weights) - 1, -1, -1):
        delta = delta * _activation_grad(cache.zs[i], cache.acts[i], net.activations[i])
        a_prev = cache.acts[i - 1] if i > 0 else cache.x
        grads[i] = (a_prev.T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = delta @ net.weights[i].T
    return grads


def sgd_step(net: Network, grads: list[tuple[np.ndarray, np.ndarray]], lr: float,
             momentum: float = 0.0,
             velocity: list[tuple[np.ndarray, np.ndarray]] | None = None,
             ) -> list[tuple[np.ndarray, np.ndarray]]:
    """One in-place SGD update: v <- momentum*v + grad, p <- p - lr*v.

    Returns the velocity buffers; pass them back in to carry momentum across steps.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if velocity is None:
        velocity = [(np.zeros_like(w), np.zeros_like(b))
                    for w, b in zip(net.weights, net.biases)]
    for i, (dw, db) in enumerate(grads):
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise FloatingPointError(f"non-finite gradient at layer {i}, aborting update")
        vw, vb = velocity[i]
        vw *= momentum
        vw += dw
        vb *= momentum
        vb += db
        net.weights[i] -= lr * vw
        net.biases[i] -= lr * vb
    return velocity


def grad_check(net: Network, loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
               features: np.ndarray, ctx: ContextWindow | None = None,
               eps: float = 1e-5, max_params: int = 10_000) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn` maps logits to (scalar loss, dLoss/dLogits). Every parameter is
    perturbed, so the network must stay small.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if net.param_count() > max_params:
        raise ValueError(f"{net.param_count()} parameters exceed the exhaustive-check "
                         f"limit {max_params}")
    ctx = ctx if ctx is not None else net.context
    _, cache = forward_with_cache(net, features, ctx)
    _, dlogits = loss_fn(cache.logits)
    analytic = backward(net, cache, dlogits)

    def loss_at_current() -> float:
        _, c = forward_with_cache(net, features, ctx)
        return loss_fn(c.logits)[0]

    worst = 0.0
    for i in range(len(net.weights)):
        for param, grad in ((net.weights[i], analytic[i][0]), (net.biases[i], analytic[i][1])):
            flat = param.reshape(-1)
            gflat = grad.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                up = loss_at_current()
                flat[j] = orig - eps
                down = loss_at_current()
                flat[j] = orig
                numeric = (up - down) / (2.0 * eps)
                denom = max(abs(gflat[j]), abs(numeric), 1e-8)
                worst = max(worst, abs(gflat[j] - numeric) / denom)
    return worst


def save_checkpoint(path: str | Path, net: Network) -> None:
    """Persist the network as float32 little-endian blobs behind a validated header.

    The header records layer count, dims, activation ids and context k; a
    norm-length field covers the optional input-normalization vectors appended
    after the layer blobs.
    """
    dims = net.dims
    norm_len = 0 if net.input_shift is None else net.input_shift.size
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IIII", CHECKPOINT_VERSION, len(net.weights),
                            net.context.k, norm_len))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        f.write(struct.pack(f"<{len(net.weights)}I",
                            *(_ACT_IDS[a] for a in net.activations)))
        for w, b in zip(net.weights, net.biases):
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
        if norm_len:
            f.write(np.ascontiguousarray(net.input_shift, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(net.input_scale, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Network:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, not a network checkpoint")
        version, n_layers, context_k, norm_len = struct.unpack("<IIII", f.read(16))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        dims = struct.unpack(f"<{n_layers + 1}I", f.read(4 * (n_layers + 1)))
        act_ids = struct.unpack(f"<{n_layers}I", f.read(4 * n_layers))
        try:
            acts = tuple(ACTIVATIONS[i] for i in act_ids)
        except IndexError:
            raise ValueError(f"{path}: unknown activation id in {act_ids}") from None
        weights, biases = [], []
        for i in range(n_layers):
            n_w, n_b = dims[i] * dims[i + 1], dims[i + 1]
            blob = f.read(4 * (n_w + n_b))
            if len(blob) != 4 * (n_w + n_b):
                raise ValueError(f"{path}: layer {i} truncated, expected "
                                 f"{dims[i]}x{dims[i + 1]} weights plus bias")
            flat = np.frombuffer(blob, dtype="<f4").astype(np.float64)
            weights.append(flat[:n_w].reshape(dims[i], dims[i + 1]))
            biases.append(flat[n_w:])
        shift = scale = None
        if norm_len:
            blob = f.read(8 * norm_len)
            if len(blob) != 8 * norm_len:
                raise ValueError(f"{path}: truncated input-normalization section")
            vecs = np.frombuffer(blob, dtype="<f4").astype(np.float64)
            shift, scale = vecs[:norm_len], vecs[norm_len:]
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after layer {n_layers - 1}")
    return Network(weights, biases, acts, ContextWindow(context_k), shift, scale)
