"""STFT, 80-dim log mel filterbank features, and bilinear frequency warping."""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signal import Waveform, frame_count

LOG_FLOOR = 1e-10  # power floor before the log, keeps silence finite

FEATURE_MAGIC = b"TSFEAT\x00\x00"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sIIIIII")


@dataclass(frozen=True)
class Spectrogram:
    """Frames x bins magnitude matrix with its frequency/frame geometry."""

    mags: np.ndarray
    bin_hz: float
    frame_len: int
    hop: int

    def __post_init__(self):
        mags = np.asarray(self.mags, dtype=np.float64)
        object.__setattr__(self, "mags", mags)
        if mags.ndim != 2:
            raise ValueError("magnitudes must be a frames x bins matrix")
        if not np.all(np.isfinite(mags)) or np.any(mags < 0):
            raise ValueError("magnitudes must be finite and non-negative")

    @property
    def n_bins(self) -> int:
        return self.mags.shape[1]

    @property
    def nyquist_hz(self) -> float:
        return self.bin_hz * (self.n_bins - 1)


@dataclass(frozen=True)
class WarpConfig:
    """Bilinear warp factor; |alpha| < 1 keeps the map's pole off the unit circle."""

    alpha: float = 0.1

    def __post_init__(self):
        if not abs(self.alpha) < 1.0:
            raise ValueError(f"|alpha| must be < 1, got {self.alpha}")


def stft(wave: Waveform, frame_len: int, hop: int, fft_size: int) -> Spectrogram:
    """Hann-windowed magnitude STFT; frames = floor((N - frame_len)/hop) + 1."""
    if not 1 <= hop <= frame_len:
        raise ValueError(f"need frame_len >= hop >= 1, got frame_len={frame_len} hop={hop}")
    if fft_size < frame_len:
        raise ValueError(f"fft_size {fft_size} smaller than frame_len {frame_len}")
    n_frames = frame_count(len(wave), frame_len, hop)
    idx = np.arange(n_frames)[:, None] * hop + np.arange(frame_len)[None, :]
    frames = wave.samples[idx] * np.hanning(frame_len)
    mags = np.abs(np.fft.rfft(frames, n=fft_size, axis=1))
    return Spectrogram(mags, wave.sample_rate / fft_size, frame_len, hop)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_bins: int, nyquist_hz: float) -> np.ndarray:
    """Triangular mel filters spanning 0 Hz to Nyquist, as an (n_mels, n_bins) matrix."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if n_mels > n_bins:
        raise ValueError(f"n_mels {n_mels} exceeds bin count {n_bins}")
    edges = mel_to_hz(np.linspace(0.0, float(hz_to_mel(nyquist_hz)), n_mels + 2))
    bin_freqs = np.linspace(0.0, nyquist_hz, n_bins)
    fbank = np.zeros((n_mels, n_bins))
    for k in range(n_mels):
        lo, mid, hi = edges[k], edges[k + 1], edges[k + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        fbank[k] = np.maximum(0.0, np.minimum(up, down))
    return fbank


def log_mel_fbank(spec: Spectrogram, n_mels: int = 80, floor: float = LOG_FLOOR) -> np.ndarray:
    """Natural-log mel filterbank energies of the squared magnitudes (frames x n_mels)."""
    if floor <= 0:
        raise ValueError("floor must be positive")
    fbank = mel_filterbank(n_mels, spec.n_bins, spec.nyquist_hz)
    energies = spec.mags**2 @ fbank.T
    return np.log(np.maximum(energies, floor))


def bilinear_warp_frequency(omega, alpha: float):
    """Bilinear frequency map w + 2*arctan(-a*sin(w) / (1 + a*cos(w))) on [0, pi].

    Strictly increasing for |alpha| < 1, fixes 0 and pi, and composing with
    -alpha inverts it exactly. Accepts scalars or arrays.
    """
    if not abs(alpha) < 1.0:
        raise ValueError(f"|alpha| must be < 1, got {alpha}")
    w = np.asarray(omega, dtype=np.float64)
    if np.any(w < 0.0) or np.any(w > np.pi):
        raise ValueError("omega must lie in [0, pi]")
    out = w + 2.0 * np.arctan(-alpha * np.sin(w) / (1.0 + alpha * np.cos(w)))
    out = np.clip(out, 0.0, np.pi)
    return float(out) if np.isscalar(omega) else out


def warp_spectrogram(spec: Spectrogram, cfg: WarpConfig) -> Spectrogram:
    """Resample each frame's magnitudes along the warped frequency axis.

    Output bin at normalized frequency w reads the input at
    bilinear_warp_frequency(w, alpha) via linear interpolation, which moves
    spectral peaks the opposite way (upward for alpha > 0). Endpoint bins are
    preserved exactly; alpha = 0 is the identity.
    """
    if cfg.alpha == 0.0:
        return spec
    n_bins = spec.n_bins
    omega = np.linspace(0.0, np.pi, n_bins)
    src = bilinear_warp_frequency(omega, cfg.alpha) * (n_bins - 1) / np.pi
    src[0], src[-1] = 0.0, n_bins - 1
    i0 = np.clip(src.astype(np.int64), 0, n_bins - 2)
    w = src - i0
    mags = spec.mags[:, i0] * (1.0 - w) + spec.mags[:, i0 + 1] * w
    return Spectrogram(mags, spec.bin_hz, spec.frame_len, spec.hop)


@dataclass(frozen=True)
class FeatureMeta:
    """Geometry recorded in a feature file header."""

    frames: int
    dims: int
    frame_len: int
    hop: int
    sample_rate: int


def write_features(path: str | Path, feats: np.ndarray, frame_len: int, hop: int,
                   sample_rate: int) -> None:
    """Persist a frames x dims matrix as the 32-bit little-endian feature container."""
    feats = np.ascontiguousarray(feats, dtype="<f4")
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("features must be a non-empty frames x dims matrix")
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, feats.shape[0], feats.shape[1],
                          frame_len, hop, sample_rate)
    with open(path, "wb") as f:
        f.write(header)
        f.write(feats.tobytes())


def read_feature_header(path: str | Path) -> FeatureMeta:
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature header")
    magic, version, frames, dims, frame_len, hop, rate = _HEADER.unpack(raw)
    if magic != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, not a feature file")
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature version {version}")
    return FeatureMeta(frames, dims, frame_len, hop, rate)


def read_features(path: str | Path) -> tuple[np.ndarray, FeatureMeta]:
    """Load a feature file as (float32 frames x dims matrix, header metadata)."""
    meta = read_feature_header(path)
    with open(path, "rb") as f:
        f.seek(_HEADER.size)
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != meta.frames * meta.dims:
        raise ValueError(f"{path}: payload holds {data.size} floats, header promises "
                         f"{meta.frames}x{meta.dims}")
    return data.reshape(meta.frames, meta.dims).copy(), meta
