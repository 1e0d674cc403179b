"""Waveform-level separation and corpus scoring around a trained model."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nm
from .data import SourceSet
from .dsp import Spectrogram, StftConfig, features, istft, stft, wiener_filter
from .eval import TrackScores, score_track
from .model import D2Net

__all__ = ["RateMismatchError", "predict_magnitudes", "separate", "separate_tracks",
           "evaluate_tracks", "mixture_baseline"]


class RateMismatchError(ValueError):
    """Input audio rate differs from the model's STFT rate."""


def predict_magnitudes(model: D2Net, spec: Spectrogram, keep_blocks: int | None = None) -> dict[str, np.ndarray]:
    """Model magnitude estimates per source, each [D, T, C].

    Every channel goes through the model independently; predictions are
    clamped at zero before leaving the log domain.
    """
    feats = features(spec).transpose(2, 0, 1).astype(model.dtype)       # [C, D, T]
    with nm.no_grad():
        out = model.forward(nm.Tensor(feats), keep_blocks=keep_blocks).data   # [C, S, D, T]
    mags = np.expm1(np.maximum(out.astype(np.float64), 0.0))
    return {name: mags[:, i].transpose(1, 2, 0) for i, name in enumerate(model.config.sources)}


def separate(model: D2Net, wave: np.ndarray, stft_config: StftConfig, wiener: bool = True,
             keep_blocks: int | None = None) -> dict[str, np.ndarray]:
    """Separate a mono [n] or multichannel [n, C] waveform into sources.

    With ``wiener`` the mixture spectrogram is split by power ratio masks;
    otherwise predicted magnitudes are paired with the mixture phase.
    Outputs have the input's shape.
    """
    wave = np.asarray(wave, dtype=np.float64)
    spec = stft(wave, stft_config)
    mags = predict_magnitudes(model, spec, keep_blocks)
    if wiener:
        parts = wiener_filter(mags, spec)
    else:
        phase = np.exp(1j * np.angle(spec.values))
        parts = {k: Spectrogram(m * phase, spec.config, spec.length) for k, m in mags.items()}
    out = {}
    for name, part in parts.items():
        y = istft(part, length=wave.shape[0])
        out[name] = y.reshape(wave.shape)
    return out


def check_rate(sample_rate: int, stft_config: StftConfig) -> None:
    if int(sample_rate) != int(stft_config.sample_rate):
        raise RateMismatchError(f"input is {sample_rate} Hz but the model expects "
                                f"{stft_config.sample_rate} Hz; resample required")


def separate_tracks(model: D2Net, tracks: Sequence[SourceSet], stft_config: StftConfig,
                    keep_blocks: int | None = None) -> list[dict[str, np.ndarray]]:
    return [separate(model, t.mixture, stft_config, keep_blocks=keep_blocks) for t in tracks]


def evaluate_tracks(model: D2Net, tracks: Sequence[SourceSet], stft_config: StftConfig,
                    frame_seconds: float = 1.0, keep_blocks: int | None = None, bss: bool = False,
                    filter_len: int = 512) -> list[TrackScores]:
    scores = []
    for track in tracks:
        check_rate(track.sample_rate, stft_config)
        est = separate(model, track.mixture, stft_config, keep_blocks=keep_blocks)
        scores.append(score_track(track.name, track.sources, est, track.sample_rate,
                                  frame_seconds, bss=bss, filter_len=filter_len))
    return scores


def mixture_baseline(tracks: Sequence[SourceSet], frame_seconds: float = 1.0) -> list[TrackScores]:
    """Scores obtained by using the mixture itself as every source estimate."""
    out = []
    for track in tracks:
        mix = track.mixture
        out.append(score_track(track.name, track.sources, {k: mix for k in track.sources},
                               track.sample_rate, frame_seconds))
    return out
