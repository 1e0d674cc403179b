"""Separation metrics and the median-over-tracks aggregation.

``sdr`` is the plain framewise signal-to-distortion ratio used for the
headline numbers. ``bss_eval`` performs the image-style decomposition of an
estimate into target, spatial distortion, interference and artifact parts
by least-squares projection onto delayed copies of the references, with
distortion filters estimated once on the whole signal and ratios computed
per frame.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy.signal import fftconvolve

__all__ = [
    "SDR_CAP", "METRICS", "sdr", "framewise_sdr", "BssDecomposition", "BssResult",
    "bss_decompose", "bss_eval", "TrackScores", "score_track", "aggregate",
    "write_report", "heatmap",
]

SDR_CAP = 300.0
METRICS = ("SDR", "SIR", "SAR", "ISR")


def _db(num: float, den: float) -> float:
    if den <= 0:
        return SDR_CAP
    if num <= 0:
        return -SDR_CAP
    return float(np.clip(10 * np.log10(num / den), -SDR_CAP, SDR_CAP))


def _frames(n: int, frame: int) -> list[slice]:
    if frame >= n:
        return [slice(0, n)]
    return [slice(a, a + frame) for a in range(0, n - frame + 1, frame)]


def framewise_sdr(reference, estimate, frame_seconds: float = 1.0,
                  sample_rate: int = 8000) -> np.ndarray:
    """Per-frame SDR in dB; frames with a silent reference are NaN."""
    s = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"sdr: reference {s.shape} and estimate {e.shape} differ")
    if frame_seconds <= 0:
        raise ValueError("frame_seconds must be positive")
    frame = max(1, int(round(frame_seconds * sample_rate)))
    out = []
    for win in _frames(s.shape[0], frame):
        num = float(np.sum(s[win] ** 2))
        if num == 0:
            out.append(np.nan)
            continue
        out.append(_db(num, float(np.sum((s[win] - e[win]) ** 2))))
    return np.array(out)


def sdr(reference, estimate, frame_seconds: float = 1.0, sample_rate: int = 8000) -> float:
    """Median framewise SDR (dB), NaN when the reference is silent throughout.

    A perfect estimate scores ``SDR_CAP``.
    """
    values = framewise_sdr(reference, estimate, frame_seconds, sample_rate)
    values = values[np.isfinite(values)]
    return float(np.median(values)) if values.size else float("nan")


# ---------------------------------------------------------------------------
# BSS decomposition
# ---------------------------------------------------------------------------

@dataclass
class BssDecomposition:
    s_true: np.ndarray
    e_spat: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray
    regularized: bool = False

    @property
    def estimate(self) -> np.ndarray:
        return self.s_true + self.e_spat + self.e_interf + self.e_artif


def _as3d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    return x


class _Projector:
    """Least-squares projection onto delayed copies of a reference set.

    ``refs`` is [S, n, C]; the basis holds every source/channel delayed by
    0 .. L-1 samples.
    """

    def __init__(self, refs: np.ndarray, filter_len: int):
        self.refs = refs
        S, n, C = refs.shape
        L = filter_len
        self.L, self.n = L, n
        self.nfft = int(2 ** np.ceil(np.log2(n + L - 1)))
        flat = refs.transpose(0, 2, 1).reshape(S * C, n)
        self.spec = np.fft.rfft(flat, self.nfft)
        M = S * C
        gram = np.empty((M, L, M, L))
        for a in range(M):
            corr = np.fft.irfft(self.spec * np.conj(self.spec[a]), self.nfft)   # [M, nfft]
            # gram[(a, i), (b, j)] = sum_u r_a[u] r_b[u + i - j] = corr[b][i - j]
            for b in range(M):
                c = corr[b]
                row = np.concatenate(([c[0]], c[-1:-L:-1])) if L > 1 else c[:1]
                gram[a, :, b, :] = scipy.linalg.toeplitz(c[:L], row)
        self.gram = gram.reshape(M * L, M * L)
        self.regularized = False
        try:
            self.factor = scipy.linalg.cho_factor(self.gram)
            diag = np.abs(np.diag(self.factor[0]))
            # squared diagonal spread of the factor is a cheap condition proxy
            if not np.isfinite(diag).all() or diag.min() ** 2 < 1e-12 * diag.max() ** 2:
                raise np.linalg.LinAlgError
        except (np.linalg.LinAlgError, ValueError):
            scale = max(np.trace(self.gram) / self.gram.shape[0], 1e-300)
            self.factor = scipy.linalg.cho_factor(self.gram + 1e-10 * scale * np.eye(self.gram.shape[0]))
            self.regularized = True

    def project(self, estimate: np.ndarray) -> np.ndarray:
        """estimate [n, C] -> projection [n + L - 1, C]."""
        S, n, C = self.refs.shape
        L = self.L
        est_spec = np.fft.rfft(estimate.T, self.nfft)                  # [C, F]
        out = np.zeros((n + L - 1, C))
        for c in range(C):
            xc = np.fft.irfft(self.spec * np.conj(est_spec[c]), self.nfft)   # [M, nfft]
            rhs = np.concatenate([xc[:, :1], xc[:, -1:-L:-1]], axis=1) if L > 1 else xc[:, :1]
            coef = scipy.linalg.cho_solve(self.factor, rhs.reshape(-1)).reshape(S * C, L)
            flat = self.refs.transpose(0, 2, 1).reshape(S * C, n)
            for m in range(S * C):
                out[:, c] += fftconvolve(coef[m], flat[m])[:n + L - 1]
        return out


def bss_decompose(references, estimate, j: int, filter_len: int = 512) -> BssDecomposition:
    """Split ``estimate`` of source ``j`` into target/spatial/interference/artifact parts.

    ``references`` is [S, n] or [S, n, C]; ``estimate`` is [n] or [n, C].
    Outputs are zero-padded to ``n + filter_len - 1`` samples.
    """
    refs = _as3d(references)
    est = np.asarray(estimate, dtype=np.float64)
    est = est[:, None] if est.ndim == 1 else est
    if est.shape != refs.shape[1:]:
        raise ValueError(f"estimate {est.shape} does not match references {refs.shape[1:]}")
    return _decompose(refs, est, j, _Projector(refs[j:j + 1], filter_len), _Projector(refs, filter_len))


def _decompose(refs, est, j, own: _Projector, full: _Projector) -> BssDecomposition:
    n, C = est.shape
    L = own.L
    pad = lambda x: np.concatenate([x, np.zeros((L - 1, C))])  # noqa: E731
    s_true = pad(refs[j])
    e_spat = own.project(est) - s_true
    e_interf = full.project(est) - s_true - e_spat
    e_artif = pad(est) - s_true - e_spat - e_interf
    return BssDecomposition(s_true, e_spat, e_interf, e_artif, own.regularized or full.regularized)


@dataclass
class BssResult:
    """Framewise metrics, each [S, frames], plus a rank-deficiency flag."""

    sdr: np.ndarray
    isr: np.ndarray
    sir: np.ndarray
    sar: np.ndarray
    regularized: bool = False

    def median(self) -> dict[str, np.ndarray]:
        def med(a):
            return np.array([np.median(r[np.isfinite(r)]) if np.isfinite(r).any() else np.nan for r in a])
        return {"SDR": med(self.sdr), "ISR": med(self.isr), "SIR": med(self.sir), "SAR": med(self.sar)}


def bss_eval(references, estimates, frame_seconds: float = 1.0, sample_rate: int = 8000,
             filter_len: int = 512) -> BssResult:
    """Framewise SDR/ISR/SIR/SAR for every source.

    ``references`` and ``estimates`` are [S, n] or [S, n, C]. Frames where
    the reference source is silent are NaN.
    """
    refs, ests = _as3d(references), _as3d(estimates)
    if refs.shape != ests.shape:
        raise ValueError(f"references {refs.shape} and estimates {ests.shape} differ")
    S, n, C = refs.shape
    full = _Projector(refs, filter_len)
    wins = _frames(n, max(1, int(round(frame_seconds * sample_rate))))
    out = np.full((4, S, len(wins)), np.nan)
    flagged = full.regularized
    for j in range(S):
        own = _Projector(refs[j:j + 1], filter_len)
        parts = _decompose(refs, ests[j], j, own, full)
        flagged |= parts.regularized
        for t, win in enumerate(wins):
            s_t = parts.s_true[win]
            energy = np.sum(s_t ** 2)
            if energy == 0:
                continue
            sp, it, ar = parts.e_spat[win], parts.e_interf[win], parts.e_artif[win]
            out[0, j, t] = _db(energy, np.sum((sp + it + ar) ** 2))
            out[1, j, t] = _db(energy, np.sum(sp ** 2))
            out[2, j, t] = _db(np.sum((s_t + sp) ** 2), np.sum(it ** 2))
            out[3, j, t] = _db(np.sum((s_t + sp + it) ** 2), np.sum(ar ** 2))
    return BssResult(*out, regularized=flagged)


# ---------------------------------------------------------------------------
# aggregation and reports
# ---------------------------------------------------------------------------

@dataclass
class TrackScores:
    track: str
    scores: dict[str, dict[str, float]] = field(default_factory=dict)


def score_track(track: str, references: Mapping[str, np.ndarray], estimates: Mapping[str, np.ndarray],
                sample_rate: int, frame_seconds: float = 1.0, bss: bool = False,
                filter_len: int = 512) -> TrackScores:
    """Score every source; SIR/SAR/ISR are computed only when ``bss`` is set."""
    names = list(references)
    scores = {name: {"SDR": sdr(references[name], estimates[name], frame_seconds, sample_rate),
                     "SIR": np.nan, "SAR": np.nan, "ISR": np.nan} for name in names}
    if bss:
        res = bss_eval(np.stack([references[k] for k in names]),
                       np.stack([estimates[k] for k in names]),
                       frame_seconds, sample_rate, filter_len).median()
        for i, name in enumerate(names):
            for metric in ("SIR", "SAR", "ISR"):
                scores[name][metric] = float(res[metric][i])
    return TrackScores(track, scores)


def aggregate(tracks: Sequence[TrackScores]) -> dict:
    """Median of each metric per source (NaNs excluded) plus flat report rows."""
    if not tracks:
        raise ValueError("aggregate needs at least one track")
    rows = [(t.track, src, metric, float(v))
            for t in tracks for src, m in t.scores.items() for metric, v in m.items()]
    table: dict[str, dict[str, list[float]]] = {}
    for _, src, metric, v in rows:
        table.setdefault(src, {}).setdefault(metric, []).append(v)
    medians = {}
    for src, metrics in table.items():
        medians[src] = {}
        for metric, values in metrics.items():
            finite = [v for v in values if np.isfinite(v)]
            medians[src][metric] = float(np.median(finite)) if finite else float("nan")
    return {"median": medians, "rows": rows, "tracks": [t.track for t in tracks]}


def heatmap(tracks: Sequence[TrackScores], metric: str = "SDR") -> tuple[list[str], list[str], np.ndarray]:
    """Tracks x sources matrix of one metric."""
    sources = list(tracks[0].scores)
    mat = np.array([[t.scores[s][metric] for s in sources] for t in tracks], dtype=float)
    return [t.track for t in tracks], sources, mat


def write_report(out_dir, tracks: Sequence[TrackScores], extra: dict | None = None) -> dict:
    """Write ``scores.tsv``, ``summary.json`` and ``heatmap_sdr.tsv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = aggregate(tracks)
    with open(out_dir / "scores.tsv", "w") as fh:
        fh.write("track\tsource\tmetric\tvalue\n")
        for row in summary["rows"]:
            fh.write("\t".join((row[0], row[1], row[2], repr(row[3]))) + "\n")
    doc = {"median": summary["median"], "num_tracks": len(tracks)}
    if extra:
        doc.update(extra)
    (out_dir / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_nan_safe))
    names, sources, mat = heatmap(tracks)
    with open(out_dir / "heatmap_sdr.tsv", "w") as fh:
        fh.write("track\t" + "\t".join(sources) + "\n")
        for name, row in zip(names, mat):
            fh.write(name + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    return summary


def _nan_safe(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj))
