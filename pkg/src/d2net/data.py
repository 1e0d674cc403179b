"""WAV I/O, the synthetic multi-source corpus, shuffling augmentation and batching."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .dsp import StftConfig, features, frame_count, stft
from .model import SOURCES

__all__ = [
    "SourceSet", "TrainConfig", "load_wav", "save_wav", "load_corpus", "save_corpus",
    "synth_corpus", "shuffle_augment", "split_tracks", "cut_clips", "make_batches",
    "clip_features",
]


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def load_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM16 or float32 WAV as float64 samples in [-1, 1].

    Returns ``(samples, sample_rate)``; samples are [n] for mono and
    [n, channels] otherwise.
    """
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise ValueError(f"{path}: malformed or unsupported WAV ({exc})") from None
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype} (need PCM16 or float32)")
    if samples.ndim == 2 and samples.shape[1] > 2:
        raise ValueError(f"{path}: {samples.shape[1]} channels, at most 2 supported")
    return samples, int(rate)


def save_wav(path, samples, sample_rate: int, fmt: str = "float32") -> Path:
    """Write ``samples`` as ``float32`` or ``pcm16``."""
    x = np.asarray(samples)
    if x.ndim == 2 and x.shape[1] > 2:
        raise ValueError("at most 2 channels supported")
    if fmt == "float32":
        data = x.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(sample_rate), data)
    return path


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

@dataclass
class SourceSet:
    """One track: equally long source waveforms sharing a sample rate."""

    sources: dict[str, np.ndarray]
    sample_rate: int
    name: str = ""

    def __post_init__(self):
        self.sources = {k: np.asarray(v, dtype=np.float64) for k, v in self.sources.items()}
        lengths = {v.shape for v in self.sources.values()}
        if len(lengths) > 1:
            raise ValueError(f"track {self.name!r}: sources differ in shape {sorted(lengths)}")

    @property
    def mixture(self) -> np.ndarray:
        it = iter(self.sources.values())
        mix = next(it).copy()
        for wave in it:
            mix += wave
        return mix

    def __len__(self) -> int:
        return next(iter(self.sources.values())).shape[0]

    @property
    def source_names(self) -> list[str]:
        return list(self.sources)


def load_corpus(root, sources: Sequence[str] = SOURCES) -> list[SourceSet]:
    """Load ``<root>/<track>/<source>.wav`` folders, sorted by track name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    tracks = []
    for track_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        waves, rates = {}, set()
        for name in sources:
            wave, rate = load_wav(track_dir / f"{name}.wav")
            waves[name] = wave
            rates.add(rate)
        if len(rates) != 1:
            raise ValueError(f"{track_dir}: sources have different sample rates {sorted(rates)}")
        tracks.append(SourceSet(waves, rates.pop(), track_dir.name))
    if not tracks:
        raise ValueError(f"no tracks found under {root}")
    return tracks


def save_corpus(root, tracks: Sequence[SourceSet], fmt: str = "float32") -> Path:
    root = Path(root)
    for i, track in enumerate(tracks):
        folder = root / (track.name or f"track{i:03d}")
        for name, wave in track.sources.items():
            save_wav(folder / f"{name}.wav", wave, track.sample_rate, fmt)
    return root


def _note_track(rng, n, sr, dur_range, rest_prob):
    """Random note segmentation as (start, stop) sample pairs."""
    notes, pos = [], 0
    while pos < n:
        length = int(rng.uniform(*dur_range) * sr)
        if rng.random() >= rest_prob:
            notes.append((pos, min(pos + length, n)))
        pos += length
    return notes


def _envelope(length, sr, attack=0.02, release=0.05):
    env = np.ones(length)
    a = min(length, max(1, int(attack * sr)))
    r = min(length - a, max(1, int(release * sr)))
    env[:a] = np.linspace(0, 1, a, endpoint=False)
    if r > 0:
        env[length - r:] *= np.linspace(1, 0, r)
    return env


def _vocals(rng, n, sr):
    out = np.zeros(n)
    t_all = np.arange(n) / sr
    for a, b in _note_track(rng, n, sr, (0.3, 1.0), 0.2):
        f0 = np.exp(rng.uniform(np.log(220), np.log(440)))
        rate, depth = rng.uniform(4.5, 6.5), rng.uniform(0.01, 0.03)
        t = t_all[a:b] - t_all[a]
        inst = f0 * (1 + depth * np.sin(2 * np.pi * rate * t))
        phase = 2 * np.pi * np.cumsum(inst) / sr
        note = np.zeros(b - a)
        for h in range(1, 12):
            if h * f0 * (1 + depth) >= 0.45 * sr:
                break
            note += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
        out[a:b] += note * _envelope(b - a, sr, 0.04, 0.08)
    return out


def _drums(rng, n, sr):
    out = np.zeros(n)
    step = 60.0 / rng.uniform(90, 140) / 2
    low = rng.uniform(1000, 1500)
    sos = signal.butter(4, [low, min(3500, 0.45 * sr)], btype="bandpass", fs=sr, output="sos")
    pos = rng.uniform(0, step)
    while pos * sr < n:
        if rng.random() < 0.6:
            start = int(pos * sr)
            length = min(n - start, int(0.25 * sr))
            tau = rng.uniform(0.02, 0.06)
            burst = rng.standard_normal(length) * np.exp(-np.arange(length) / (tau * sr))
            out[start:start + length] += rng.uniform(0.5, 1.0) * burst
        pos += step
    return signal.sosfilt(sos, out)


def _bass(rng, n, sr):
    out = np.zeros(n)
    for a, b in _note_track(rng, n, sr, (0.25, 1.0), 0.1):
        f0 = np.exp(rng.uniform(np.log(45), np.log(140)))
        t = np.arange(b - a) / sr
        note = np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
        if 2 * f0 < 200:
            note += 0.3 * np.sin(4 * np.pi * f0 * t)
        decay = np.exp(-t / rng.uniform(0.3, 1.0))
        out[a:b] += note * decay * _envelope(b - a, sr, 0.01, 0.03)
    return out


def _other(rng, n, sr):
    out = np.zeros(n)
    for a, b in _note_track(rng, n, sr, (1.0, 2.0), 0.1):
        root = np.exp(rng.uniform(np.log(250), np.log(500)))
        third = 1.26 if rng.random() < 0.5 else 1.19
        t = np.arange(b - a) / sr
        chord = sum(np.sin(2 * np.pi * root * r * t + rng.uniform(0, 2 * np.pi))
                    for r in (1.0, third, 1.5))
        out[a:b] += chord * _envelope(b - a, sr, 0.15, 0.2)
    return out


_GENERATORS = {"vocals": (_vocals, 0.10), "drums": (_drums, 0.07),
               "bass": (_bass, 0.10), "other": (_other, 0.08)}


def synth_corpus(seed: int, n_tracks: int, seconds: float, sample_rate: int = 8000) -> list[SourceSet]:
    """Deterministic four-source synthetic corpus.

    ``vocals`` are vibrato harmonic tones, ``drums`` band-passed noise
    bursts, ``bass`` low sinusoids under 200 Hz and ``other`` mid-band
    triads. Each source is scaled to a per-track RMS near its nominal level.
    """
    if n_tracks < 2:
        raise ValueError("synth_corpus needs at least 2 tracks")
    n = int(round(seconds * sample_rate))
    children = np.random.SeedSequence(seed).spawn(n_tracks)
    tracks = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        waves = {}
        for name in SOURCES:
            gen, level = _GENERATORS[name]
            wave = gen(rng, n, sample_rate)
            rms = np.sqrt(np.mean(wave ** 2))
            gain = level * 10 ** (rng.uniform(-3, 3) / 20) / rms if rms > 0 else 0.0
            waves[name] = wave * gain
        tracks.append(SourceSet(waves, sample_rate, f"synth{i:03d}"))
    return tracks


def shuffle_augment(tracks: Sequence[SourceSet], epoch_seed: int) -> list[SourceSet]:
    """Remix tracks by permuting every source stream independently.

    Remixed track ``i`` takes source ``s`` from track ``perm_s[i]``; waves
    are cut to the shortest member so the sum stays well defined.
    """
    if len(tracks) < 2:
        return list(tracks)
    rng = np.random.default_rng(epoch_seed)
    names = tracks[0].source_names
    perms = {name: rng.permutation(len(tracks)) for name in names}
    out = []
    for i in range(len(tracks)):
        picks = {name: tracks[perms[name][i]].sources[name] for name in names}
        n = min(len(w) for w in picks.values())
        out.append(SourceSet({k: w[:n] for k, w in picks.items()}, tracks[0].sample_rate,
                             "+".join(str(perms[name][i]) for name in names)))
    return out


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    clip_seconds: float = 5
    batch_size: int | None = None
    epochs: int = 50
    validation_fraction: float = 0.1
    seed: int = 0
    learning_rate: float = 1e-3
    grad_clip: float | None = 5.0
    workers: int = 1

    def __post_init__(self):
        if self.clip_seconds <= 0:
            raise ValueError(f"clip_seconds must be positive, got {self.clip_seconds}")
        if self.batch_size is None:
            # 20 x 5 s and 5 x 20 s keep the number of updates comparable
            self.batch_size = max(1, int(round(100 / self.clip_seconds)))
        if self.batch_size < 1 or self.clip_seconds <= 0 or self.epochs < 0:
            raise ValueError("invalid training configuration")


def split_tracks(tracks: Sequence[SourceSet], validation_fraction: float = 0.1,
                 seed: int = 0) -> tuple[list[SourceSet], list[SourceSet]]:
    """Hold out whole tracks for validation; the split depends only on ``seed``."""
    n = len(tracks)
    if n < 2 or validation_fraction <= 0:
        return list(tracks), []
    n_val = min(n - 1, max(1, int(round(n * validation_fraction))))
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    val = set(order[:n_val].tolist())
    return ([t for i, t in enumerate(tracks) if i not in val],
            [t for i, t in enumerate(tracks) if i in val])


def cut_clips(track: SourceSet, clip_samples: int) -> list[SourceSet]:
    """Consecutive non-overlapping clips; a shorter tail is dropped."""
    n = len(track)
    if n < clip_samples:
        return [track]
    return [SourceSet({k: w[a:a + clip_samples] for k, w in track.sources.items()},
                      track.sample_rate, f"{track.name}@{a}")
            for a in range(0, n - clip_samples + 1, clip_samples)]


def clip_features(clip: SourceSet, stft_config: StftConfig,
                  sources: Sequence[str] = SOURCES) -> tuple[np.ndarray, np.ndarray]:
    """Mixture features [D, T] and stacked targets [S, D, T] of a mono clip."""
    mix = features(stft(clip.mixture, stft_config))[..., 0]
    targets = np.stack([features(stft(clip.sources[s], stft_config))[..., 0] for s in sources])
    return mix, targets


def make_batches(tracks: Sequence[SourceSet], config: TrainConfig, stft_config: StftConfig,
                 sources: Sequence[str] = SOURCES, shuffle_seed: int | None = None,
                 dtype=np.float32) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(mix [B, D, T], targets [B, S, D, T])`` feature batches.

    Clips are ``clip_seconds`` long; clip order is shuffled when
    ``shuffle_seed`` is given. The last batch may be smaller.
    """
    if not tracks:
        return
    sr = tracks[0].sample_rate
    clip_samples = int(round(config.clip_seconds * sr))
    if clip_samples < stft_config.window_size:
        raise ValueError(f"clip of {clip_samples} samples is shorter than the "
                         f"{stft_config.window_size}-sample window")
    clips = [c for t in tracks for c in cut_clips(t, clip_samples)]
    if any(len(c) < stft_config.window_size for c in clips):
        raise ValueError("a track is shorter than the STFT window")
    order = np.arange(len(clips))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(clips))
    for start in range(0, len(order), config.batch_size):
        chunk = [clips[i] for i in order[start:start + config.batch_size]]
        T = max(frame_count(len(c), stft_config.hop) for c in chunk)
        mixes, targets = [], []
        for clip in chunk:
            m, tg = clip_features(clip, stft_config, sources)
            pad = T - m.shape[-1]
            mixes.append(np.pad(m, ((0, 0), (0, pad))))
            targets.append(np.pad(tg, ((0, 0), (0, 0), (0, pad))))
        yield np.stack(mixes).astype(dtype), np.stack(targets).astype(dtype)
