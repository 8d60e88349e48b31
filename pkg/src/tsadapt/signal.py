"""Waveforms, synthetic labeled utterances, SNR-controlled noise mixing and SNR estimation."""

from __future__ import annotations

import enum
import math
import wave as wave_io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Returned by estimate_snr when the noise-power estimate underflows the floor.
SNR_SENTINEL_DB = 99.0


class SnrBucket(enum.Enum):
    """SNR ranges in dB, half-open [lo, hi); BELOW_5 is open below, ABOVE_35 closed at 35."""

    BELOW_5 = "<5dB"
    FROM_5_TO_20 = "[5,20)dB"
    FROM_20_TO_35 = "[20,35)dB"
    ABOVE_35 = ">=35dB"


@dataclass(frozen=True)
class Waveform:
    """Mono sample sequence with its sample rate. Samples are float64 in nominal [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain non-finite values")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for synthetic utterances: one resonance template per class.

    Each class is a distinct set of 2-3 formant-like resonant frequencies (Hz). An
    utterance is a concatenation of randomly ordered class segments; each segment is
    harmonic excitation shaped by the class resonances, with an attack/release
    envelope and a short silent tail so that utterances contain noise-exposed pauses.
    """

    class_templates: tuple[tuple[float, ...], ...]
    duration: float  # seconds
    sample_rate: int = 16000
    frame_len: int = 400  # samples, for label alignment
    hop: int = 160
    voiced_ms: tuple[float, float] = (90.0, 150.0)
    gap_ms: float = 30.0  # silent tail after each segment, labeled with the segment
    attack_ms: float = 10.0
    release_ms: float = 20.0
    f0_hz: tuple[float, float] = (95.0, 135.0)
    gain_range: tuple[float, float] = (0.85, 1.0)
    resonance_bw_hz: float = 140.0
    rms_target: float = 0.1

    @property
    def num_classes(self) -> int:
        return len(self.class_templates)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 class templates, got {self.num_classes}")
        if self.duration <= 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if self.sample_rate <= 0 or self.frame_len <= 0 or self.hop <= 0:
            raise ValueError("sample_rate, frame_len and hop must be positive")
        nyquist = self.sample_rate / 2
        for c, freqs in enumerate(self.class_templates):
            if not 2 <= len(freqs) <= 3:
                raise ValueError(f"class {c}: expected 2-3 resonant frequencies, got {len(freqs)}")
            if any(f <= 0 or f >= nyquist for f in freqs):
                raise ValueError(f"class {c}: resonances must lie in (0, {nyquist}) Hz")
        if len(set(self.class_templates)) != self.num_classes:
            raise ValueError("class templates must be distinct")


def default_templates(num_classes: int, sample_rate: int = 16000) -> tuple[tuple[float, ...], ...]:
    """Deterministic grid of formant-like triples, distinct per class.

    Single bands repeat across classes so no one band identifies a class; the
    triple does. This keeps the task solvable when noise masks one band.
    """
    templates = []
    for c in range(num_classes):
        i, j = c % 5, c // 5
        f1 = 380.0 + 95.0 * i
        f2 = 1300.0 + 260.0 * (j % 4)
        f3 = 3000.0 + 160.0 * ((i + 2 * j) % 5) + 850.0 * (j // 4)
        templates.append((f1, f2, f3))
    nyquist = sample_rate / 2
    if any(f >= nyquist * 0.95 for t in templates for f in t):
        raise ValueError(f"{num_classes} classes need a sample rate above {sample_rate}")
    return tuple(templates)


@dataclass(frozen=True)
class LabeledUtterance:
    """Waveform plus one class label per feature frame (frame config from its SynthSpec)."""

    wave: Waveform
    frame_labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.frame_labels, dtype=np.int32)
        object.__setattr__(self, "frame_labels", labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("frame labels outside [0, num_classes)")


def frame_count(n_samples: int, frame_len: int, hop: int) -> int:
    """Number of full frames: floor((N - frame_len) / hop) + 1."""
    if n_samples < frame_len:
        raise ValueError(f"waveform of {n_samples} samples shorter than frame_len {frame_len}")
    return (n_samples - frame_len) // hop + 1


def _harmonic_segment(rng: np.random.Generator, spec: SynthSpec, freqs: tuple[float, ...],
                      n_voiced: int) -> np.ndarray:
    """One voiced segment: random-phase harmonics of a jittered f0, weighted by
    Lorentzian resonance responses at the class frequencies."""
    f0 = rng.uniform(*spec.f0_hz)
    gain = rng.uniform(*spec.gain_range)
    bw = spec.resonance_bw_hz
    f_max = min(spec.sample_rate * 0.45, max(freqs) + 6 * bw)
    k = np.arange(1, int(f_max / f0) + 1)
    fk = k * f0
    amps = np.zeros(k.size)
    for f_res in freqs:
        amps += 1.0 / (1.0 + ((fk - f_res) / bw) ** 2)
    keep = amps > 0.02 * amps.max()
    fk, amps = fk[keep], amps[keep]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=fk.size)

    t = np.arange(n_voiced) / spec.sample_rate
    seg = np.sin(2.0 * np.pi * np.outer(t, fk) + phases) @ amps

    na = max(1, int(spec.attack_ms * 1e-3 * spec.sample_rate))
    nr = max(1, int(spec.release_ms * 1e-3 * spec.sample_rate))
    env = np.ones(n_voiced)
    env[:na] = np.linspace(0.0, 1.0, na, endpoint=False)
    env[-nr:] *= np.linspace(1.0, 0.0, nr)
    seg *= env

    rms = math.sqrt(float(np.mean(seg**2)))
    if rms > 0:
        seg *= gain * spec.rms_target / rms
    return seg


def synth_utterance(spec: SynthSpec, seed: int) -> LabeledUtterance:
    """Generate one labeled utterance; identical (spec, seed) is bit-identical.

    Segments of random class order fill the requested duration. Each frame's label
    is the class whose segment (voiced part plus silent tail) contains the frame
    center, so labels align with the features module's frame count.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    total = int(round(spec.duration * spec.sample_rate))
    if total < spec.frame_len:
        raise ValueError("duration shorter than one frame")

    n_gap = int(spec.gap_ms * 1e-3 * spec.sample_rate)
    samples = np.zeros(total)
    starts: list[int] = []
    classes: list[int] = []
    pos = 0
    while pos < total:
        cls = int(rng.integers(spec.num_classes))
        n_voiced = int(rng.uniform(*spec.voiced_ms) * 1e-3 * spec.sample_rate)
        seg = _harmonic_segment(rng, spec, spec.class_templates[cls], n_voiced)
        end = min(pos + n_voiced, total)
        samples[pos:end] = seg[: end - pos]
        starts.append(pos)
        classes.append(cls)
        pos += n_voiced + n_gap

    n_frames = frame_count(total, spec.frame_len, spec.hop)
    centers = np.arange(n_frames) * spec.hop + spec.frame_len // 2
    seg_idx = np.searchsorted(np.asarray(starts), centers, side="right") - 1
    labels = np.asarray(classes, dtype=np.int32)[seg_idx]

    wave = Waveform(samples, spec.sample_rate)
    return LabeledUtterance(wave, labels, spec.num_classes)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float,
               offset: int | None = None, seed: int = 0) -> Waveform:
    """Add noise to clean at an exact full-segment SNR.

    The noise is cropped to the clean length at `offset` (drawn from `seed` when
    None) and scaled by g = sqrt(P_clean / (P_noise * 10^(snr_db/10))) with P the
    mean squared sample over the used segment, so the achieved power-ratio SNR
    equals snr_db by construction.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError(f"sample-rate mismatch: clean {clean.sample_rate} Hz, noise {noise.sample_rate} Hz")
    n = len(clean)
    if len(noise) < n:
        raise ValueError(f"noise ({len(noise)} samples) shorter than clean ({n})")
    if offset is None:
        offset = int(np.random.default_rng(seed).integers(0, len(noise) - n + 1))
    if offset < 0 or offset + n > len(noise):
        raise ValueError(f"offset {offset} leaves fewer than {n} noise samples")
    segment = noise.samples[offset : offset + n]

    p_clean = float(np.mean(clean.samples**2))
    p_noise = float(np.mean(segment**2))
    if p_clean <= 0.0:
        raise ValueError("clean waveform has zero power")
    if p_noise <= 0.0:
        raise ValueError("noise segment has zero power")
    g = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + g * segment, clean.sample_rate)


def estimate_snr(mixed: Waveform, frame_len: int, hop: int,
                 noise_floor: float = 1e-12) -> float:
    """Percentile-split SNR detector.

    Frame energies are split into a speech estimate (mean energy of frames at or
    above the 70th percentile) and a noise estimate (at or below the 20th);
    returns 10*log10(speech/noise), or SNR_SENTINEL_DB when the noise estimate
    underflows `noise_floor`. Needs at least 10 frames.
    """
    n_frames = frame_count(len(mixed), frame_len, hop)
    if n_frames < 10:
        raise ValueError(f"need at least 10 frames to estimate SNR, got {n_frames}")
    idx = np.arange(n_frames)[:, None] * hop + np.arange(frame_len)[None, :]
    energies = np.mean(mixed.samples[idx] ** 2, axis=1)
    hi, lo = np.percentile(energies, [70.0, 20.0])
    speech = float(np.mean(energies[energies >= hi]))
    noise = float(np.mean(energies[energies <= lo]))
    if noise <= noise_floor:
        return SNR_SENTINEL_DB
    return 10.0 * math.log10(speech / noise)


def snr_bucket(snr_db: float) -> SnrBucket:
    """Map a finite SNR to its Table-style bucket (half-open boundaries)."""
    if not math.isfinite(snr_db):
        raise ValueError(f"SNR must be finite, got {snr_db}")
    if snr_db < 5.0:
        return SnrBucket.BELOW_5
    if snr_db < 20.0:
        return SnrBucket.FROM_5_TO_20
    if snr_db < 35.0:
        return SnrBucket.FROM_20_TO_35
    return SnrBucket.ABOVE_35


NOISE_KINDS = ("pink", "band", "hiss")


def synth_noise(kind: str, duration: float, sample_rate: int, seed: int) -> Waveform:
    """Deterministic synthetic noise; each kind is a non-stationary family.

    The spectral character wanders over time (band center walk, tilt and level
    modulation), so different crop offsets into one long wave sample genuinely
    different noise, the way crops of a real recording would. Kinds: pink
    (sloped broadband), band (wandering mid-band), hiss (high-passed).
    """
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}, expected one of {NOISE_KINDS}")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    chunk = int(0.25 * sample_rate)
    hop = chunk // 2
    window = np.hanning(chunk)
    freqs = np.fft.rfftfreq(chunk, d=1.0 / sample_rate)
    samples = np.zeros(n + chunk)
    for start in range(0, n, hop):
        spec = np.fft.rfft(rng.normal(size=chunk) * window)
        if kind == "pink":
            slope = rng.uniform(0.4, 0.7)
            shape = 1.0 / np.maximum(freqs, 30.0) ** slope
        elif kind == "band":
            center = rng.uniform(800.0, 3200.0)
            width = rng.uniform(350.0, 800.0)
            shape = np.exp(-0.5 * ((freqs - center) / width) ** 2)
        else:  # hiss
            knee = rng.uniform(2800.0, 4200.0)
            shape = 1.0 / (1.0 + np.exp(-(freqs - knee) / 300.0))
        shape[0] = 0.0
        gain = 10.0 ** (rng.uniform(-5.0, 5.0) / 20.0)
        samples[start : start + chunk] += gain * np.fft.irfft(spec * shape, n=chunk)
    samples = samples[:n]
    samples *= 0.1 / math.sqrt(float(np.mean(samples**2)))
    return Waveform(samples, sample_rate)


def read_wav(path: str | Path) -> Waveform:
    """Read a mono 16-bit PCM WAV; samples are scaled to [-1, 1) by 1/32768.

    Any other variant is rejected with the offending header field named.
    """
    with wave_io.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: channels={w.getnchannels()}, only mono is supported")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: sample width={w.getsampwidth()} bytes, only 16-bit PCM is supported")
        if w.getcomptype() != "NONE":
            raise ValueError(f"{path}: compression type={w.getcomptype()!r}, only uncompressed PCM is supported")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path: str | Path, wave: Waveform) -> None:
    """Write a mono 16-bit PCM WAV; samples are clipped to [-1, 1)."""
    scaled = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave_io.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wave.sample_rate)
        w.writeframes(scaled.tobytes())
