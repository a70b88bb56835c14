"""MFCC extraction: pre-emphasis, Hamming frames, radix-2 FFT, mel filterbank, DCT."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataLoadError, DimensionError, InputError


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate_hz) <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)
        if not np.all(np.isfinite(self.samples)):
            raise InputError("audio contains non-finite samples")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise InputError("audio samples must lie in [-1, 1]")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class FeatureConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    preemphasis: float = 0.97
    n_filters: int = 26
    n_coeffs: int = 13
    low_hz: float = 0.0
    high_hz: float = 8000.0
    n_fft: int = 512
    log_floor: float = 1e-10

    def frame_length(self, sample_rate: int) -> int:
        return int(round(self.frame_ms * sample_rate / 1000.0))

    def hop_length(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))


@dataclass
class MfccMatrix:
    values: np.ndarray
    frame_ms: float = 25.0
    hop_ms: float = 10.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"MFCC matrix must be 2-D, got shape {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def coeffs(self) -> int:
        return self.values.shape[1]


# -- framing ----------------------------------------------------------------

def n_frames(n_samples: int, frame_len: int, hop: int) -> int:
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // hop + 1


def preemphasize(x: np.ndarray, coeff: float = 0.97) -> np.ndarray:
    y = np.array(x, dtype=np.float64)
    y[1:] -= coeff * x[:-1]
    return y


def frame_signal(x: np.ndarray, frame_len: int, hop: int, preemphasis: float = 0.97,
                 window: bool = True) -> np.ndarray:
    """Pre-emphasize ``x`` then cut it into Hamming-windowed frames (frames x frame_len)."""
    if frame_len <= 0 or hop <= 0 or hop > frame_len:
        raise ConfigError(f"need frame length >= hop > 0, got {frame_len}/{hop}")
    x = np.asarray(x, dtype=np.float64)
    count = n_frames(x.size, frame_len, hop)
    if count == 0:
        raise InputError(f"signal of {x.size} samples is shorter than one frame ({frame_len})")
    y = preemphasize(x, preemphasis) if preemphasis else x
    idx = np.arange(frame_len)[None, :] + hop * np.arange(count)[:, None]
    frames = y[idx]
    if window:
        frames = frames * np.hamming(frame_len)
    return frames


def frame_and_window(signal: AudioSignal, frame_ms: float = 25.0, hop_ms: float = 10.0,
                     preemphasis: float = 0.97) -> np.ndarray:
    if not frame_ms >= hop_ms > 0:
        raise ConfigError(f"need frame_ms >= hop_ms > 0, got {frame_ms}/{hop_ms}")
    sr = signal.sample_rate_hz
    frame_len = int(round(frame_ms * sr / 1000.0))
    hop = int(round(hop_ms * sr / 1000.0))
    return frame_signal(signal.samples, frame_len, hop, preemphasis)


# -- spectrum ---------------------------------------------------------------

def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time FFT along the last axis."""
    x = np.asarray(x)
    n = x.shape[-1]
    if not _is_power_of_two(n):
        raise ConfigError(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    a = x[..., _bit_reverse_indices(n)].astype(np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        a = a.reshape(lead + (n // size, size))
        even = a[..., :half]
        odd = a[..., half:] * twiddle
        a = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return a.reshape(lead + (n,))


def power_spectrum(frame: np.ndarray, n_fft: int = 512) -> np.ndarray:
    """|DFT|^2 / n_fft over the n_fft // 2 + 1 non-negative bins; works row-wise on 2-D input."""
    if not _is_power_of_two(n_fft):
        raise ConfigError(f"n_fft must be a power of two, got {n_fft}")
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] > n_fft:
        raise ConfigError(f"n_fft={n_fft} is shorter than the frame ({frame.shape[-1]})")
    pad = [(0, 0)] * (frame.ndim - 1) + [(0, n_fft - frame.shape[-1])]
    spec = fft_radix2(np.pad(frame, pad))[..., : n_fft // 2 + 1]
    return (spec.real ** 2 + spec.imag ** 2) / n_fft


# -- mel filterbank ---------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class MelFilterbank:
    weights: np.ndarray  # n_filters x n_bins
    low_hz: float
    high_hz: float
    edges_hz: np.ndarray = field(repr=False, default=None)

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]

    @property
    def n_bins(self) -> int:
        return self.weights.shape[1]


def mel_filterbank(n_filters: int = 26, n_fft: int = 512, sample_rate: int = 16000,
                   low_hz: float = 0.0, high_hz: float | None = None) -> MelFilterbank:
    """Triangular filters equally spaced on the HTK mel scale, evaluated at DFT bin centres."""
    if high_hz is None:
        high_hz = sample_rate / 2.0
    if n_filters < 1:
        raise ConfigError("need at least one mel filter")
    if not 0 <= low_hz < high_hz <= sample_rate / 2.0:
        raise ConfigError(f"bad mel band [{low_hz}, {high_hz}] for sample rate {sample_rate}")
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(weights, float(low_hz), float(high_hz), edges)


def mel_filter_energies(power: np.ndarray, fb: MelFilterbank, floor: float = 1e-10) -> np.ndarray:
    """Log filter energies; accepts one spectrum or a frames x bins matrix."""
    power = np.asarray(power, dtype=np.float64)
    if power.shape[-1] != fb.n_bins:
        raise DimensionError(
            f"spectrum has {power.shape[-1]} bins but the filterbank expects {fb.n_bins}")
    return np.log(np.maximum(power @ fb.weights.T, floor))


def dct_matrix(n_filters: int, L: int) -> np.ndarray:
    i = np.arange(L + 1)[:, None]
    n = np.arange(1, n_filters + 1)[None, :]
    return np.cos(i * (n - 0.5) * np.pi / n_filters)


def dct_mfcc(Sn: np.ndarray, L: int) -> np.ndarray:
    """C_i = sum_n Sn[n] cos(i (n - 1/2) pi / Nf) for i = 0..L (row-wise on 2-D input)."""
    Sn = np.asarray(Sn, dtype=np.float64)
    if L < 0 or Sn.shape[-1] < 1:
        raise ConfigError(f"need L >= 0 and at least one filter, got L={L}, Nf={Sn.shape[-1]}")
    return Sn @ dct_matrix(Sn.shape[-1], L).T


def extract_mfcc(signal: AudioSignal, cfg: FeatureConfig | None = None) -> MfccMatrix:
    cfg = cfg or FeatureConfig()
    sr = signal.sample_rate_hz
    frames = frame_and_window(signal, cfg.frame_ms, cfg.hop_ms, cfg.preemphasis)
    power = power_spectrum(frames, cfg.n_fft)
    high = min(cfg.high_hz, sr / 2.0)
    fb = mel_filterbank(cfg.n_filters, cfg.n_fft, sr, cfg.low_hz, high)
    Sn = mel_filter_energies(power, fb, cfg.log_floor)
    return MfccMatrix(dct_mfcc(Sn, cfg.n_coeffs - 1), cfg.frame_ms, cfg.hop_ms)


# -- file formats -----------------------------------------------------------

def read_wav(path) -> AudioSignal:
    """PCM16 WAV; multi-channel input is averaged down to mono."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise DataLoadError(f"{path}: only 16-bit PCM is supported")
            channels = w.getnchannels()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataLoadError(f"{path}: {exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return AudioSignal(pcm, rate)


def write_wav(path, signal: AudioSignal) -> None:
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(signal.sample_rate_hz)
        w.writeframes(pcm.tobytes())


def write_mfcc(path, m: MfccMatrix) -> None:
    lines = [f"mfcc,v1,{m.frames},{m.coeffs},{m.frame_ms:.17g},{m.hop_ms:.17g}"]
    lines += [",".join(format(v, ".17g") for v in row) for row in m.values]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mfcc(path) -> MfccMatrix:
    try:
        with open(path, encoding="ascii") as fh:
            header = fh.readline().strip().split(",")
            if len(header) != 6 or header[:2] != ["mfcc", "v1"]:
                raise DataLoadError(f"{path}: not an mfcc v1 file")
            frames, coeffs = int(header[2]), int(header[3])
            rows = [line for line in fh.read().splitlines() if line.strip()]
        values = np.array([[float(v) for v in r.split(",")] for r in rows], dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataLoadError(f"{path}: {exc}") from exc
    values = values.reshape(len(rows), -1) if rows else np.zeros((0, coeffs))
    if values.shape != (frames, coeffs):
        raise DataLoadError(f"{path}: header says {frames}x{coeffs}, body is {values.shape}")
    return MfccMatrix(values, float(header[4]), float(header[5]))
