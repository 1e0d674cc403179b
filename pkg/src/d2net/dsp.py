"""STFT analysis/synthesis, log1p features and the ratio-mask Wiener filter."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "StftConfig", "Spectrogram", "stft", "istft", "stft_adjoint", "hann", "cola_envelope",
    "is_cola", "frame_count", "features", "invert_features", "wiener_masks", "wiener_filter",
    "WIENER_EPS",
]

WIENER_EPS = 1e-10


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 128
    hop: int = 32
    window: str = "hann"
    sample_rate: int = 8000

    def __post_init__(self):
        if self.window_size < 1 or self.hop < 1:
            raise ValueError("window_size and hop must be positive")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @classmethod
    def desk(cls) -> "StftConfig":
        return cls()

    @classmethod
    def paper(cls) -> "StftConfig":
        return cls(window_size=4096, hop=1024, sample_rate=44100)

    @property
    def freq_bins(self) -> int:
        return self.window_size // 2 + 1


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def cola_envelope(window: np.ndarray, hop: int) -> np.ndarray:
    """Steady-state sum of squared windows at each phase of the hop."""
    w2 = window ** 2
    env = np.zeros(hop)
    for start in range(0, len(window), hop):
        seg = w2[start:start + hop]
        env[:len(seg)] += seg
    return env


def is_cola(config: StftConfig, tol: float = 1e-10) -> bool:
    env = cola_envelope(hann(config.window_size), config.hop)
    return bool(np.ptp(env) <= tol * max(env.max(), 1e-300)) and env.min() > 0


def frame_count(num_samples: int, hop: int) -> int:
    return -(-num_samples // hop)


@dataclass
class Spectrogram:
    """One-sided complex STFT, ``values`` shaped [D, T, channels]."""

    values: np.ndarray
    config: StftConfig
    length: int

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"spectrogram values must be [D, T, C], got {self.values.shape}")
        if self.values.shape[0] != self.config.freq_bins:
            raise ValueError(f"{self.values.shape[0]} bins does not match window {self.config.window_size}")

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def shape(self):
        return self.values.shape


def _check(config: StftConfig) -> None:
    if not is_cola(config):
        raise ValueError(f"Hann window {config.window_size} with hop {config.hop} is not COLA")


def _as_channels(wave) -> tuple[np.ndarray, bool]:
    w = np.asarray(wave, dtype=np.float64)
    if w.ndim == 1:
        return w[:, None], True
    if w.ndim != 2:
        raise ValueError(f"waveform must be [n] or [n, channels], got {w.shape}")
    return w, False


def stft(wave, config: StftConfig = StftConfig()) -> Spectrogram:
    """Centered STFT with ``ceil(n / hop)`` frames.

    Frame ``t`` is centered on sample ``t * hop``; the signal is zero-padded
    by half a window on the left and as needed on the right.
    """
    _check(config)
    x, _ = _as_channels(wave)
    n = x.shape[0]
    if n < 1:
        raise ValueError("stft: empty input")
    N, hop = config.window_size, config.hop
    T = frame_count(n, hop)
    left = N // 2
    total = (T - 1) * hop + N
    padded = np.zeros((max(total, left + n), x.shape[1]))
    padded[left:left + n] = x
    frames = sliding_window_view(padded, N, axis=0)[::hop][:T]     # [T, C, N]
    spec = np.fft.rfft(frames * hann(N), axis=-1)                    # [T, C, D]
    return Spectrogram(spec.transpose(2, 0, 1).copy(), config, n)


def _overlap_add(frames: np.ndarray, hop: int, total: int) -> np.ndarray:
    """frames [T, C, N] -> [total, C]."""
    T, C, N = frames.shape
    out = np.zeros((total, C))
    for t in range(T):
        out[t * hop:t * hop + N] += frames[t].T
    return out


def _envelope(T: int, N: int, hop: int) -> np.ndarray:
    w2 = hann(N) ** 2
    env = np.zeros((T - 1) * hop + N)
    for t in range(T):
        env[t * hop:t * hop + N] += w2
    return env


def istft(spec: Spectrogram, length: int | None = None) -> np.ndarray:
    """Windowed overlap-add inverse, normalized by the squared-window envelope.

    Returns [n] for single-channel spectrograms, [n, channels] otherwise.
    """
    cfg = spec.config
    _check(cfg)
    N, hop = cfg.window_size, cfg.hop
    D, T, C = spec.values.shape
    n = spec.length if length is None else length
    frames = np.fft.irfft(spec.values.transpose(1, 2, 0), n=N, axis=-1) * hann(N)
    total = (T - 1) * hop + N
    y = _overlap_add(frames, hop, total)
    env = _envelope(T, N, hop)
    y /= np.where(env > 1e-12, env, 1.0)[:, None]
    left = N // 2
    y = y[left:left + n]
    if y.shape[0] < n:
        y = np.pad(y, ((0, n - y.shape[0]), (0, 0)))
    return y[:, 0] if C == 1 else y


def stft_adjoint(spec: Spectrogram) -> np.ndarray:
    """Adjoint of :func:`stft` under the one-sided inner product.

    The one-sided inner product weights interior bins by 2 and DC/Nyquist by
    1, so it equals the full-spectrum inner product. ``istft`` is this
    adjoint followed by division by ``N * envelope``.
    """
    cfg = spec.config
    N, hop = cfg.window_size, cfg.hop
    D, T, C = spec.values.shape
    frames = np.fft.irfft(spec.values.transpose(1, 2, 0), n=N, axis=-1) * N * hann(N)
    y = _overlap_add(frames, hop, (T - 1) * hop + N)
    left = N // 2
    y = y[left:left + spec.length]
    return y[:, 0] if C == 1 else y


def features(spec: Spectrogram | np.ndarray) -> np.ndarray:
    """log(1 + |spec|)."""
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    return np.log1p(np.abs(values))


def invert_features(feat: np.ndarray) -> np.ndarray:
    return np.expm1(feat)


def wiener_masks(est_mags: Sequence[np.ndarray], eps: float = WIENER_EPS) -> np.ndarray:
    """Power ratio masks ``(v_s + eps/S) / (sum v + eps)`` with ``v = mag**2``.

    Masks lie in [0, 1] and sum to one per bin; a bin where every source is
    silent splits evenly.
    """
    mags = np.stack([np.asarray(m, dtype=np.float64) for m in est_mags])
    if np.any(mags < 0):
        raise ValueError("wiener: magnitude estimates must be non-negative")
    S = mags.shape[0]
    power = mags ** 2
    return (power + eps / S) / (power.sum(axis=0) + eps)


def wiener_filter(est_mags: Mapping[str, np.ndarray] | Sequence[np.ndarray], mix: Spectrogram,
                  eps: float = WIENER_EPS):
    """Split the mixture spectrogram among sources by ratio masks.

    ``est_mags`` maps source name to a [D, T, C] magnitude estimate (a
    sequence is accepted too). Returns the same container type of
    :class:`Spectrogram`.
    """
    named = isinstance(est_mags, Mapping)
    names = list(est_mags) if named else None
    mags = [est_mags[k] for k in names] if named else list(est_mags)
    for m in mags:
        if np.shape(m) != mix.values.shape:
            raise ValueError(f"wiener: estimate shape {np.shape(m)} != mixture {mix.values.shape}")
    masks = wiener_masks(mags, eps)
    outs = [Spectrogram(mask * mix.values, mix.config, mix.length) for mask in masks]
    return dict(zip(names, outs)) if named else outs
