"""MSE training with Adam, per-epoch source shuffling and best-validation selection."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .data import SourceSet, TrainConfig, make_batches, shuffle_augment, split_tracks
from .dsp import StftConfig
from .model import D2Net, save_checkpoint

__all__ = ["TrainingError", "TrainResult", "train", "dataset_loss", "clip_grad_norm"]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or activation."""


@dataclass
class TrainResult:
    model: D2Net
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("nan")
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    seconds: float = 0.0


def clip_grad_norm(params: Sequence[nm.Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                              for p in params if p.grad is not None)))
    if max_norm and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return total


def dataset_loss(model: D2Net, tracks: Sequence[SourceSet], config: TrainConfig,
                 stft_config: StftConfig) -> float:
    """Clip-weighted mean MSE over ``tracks`` without gradient tracking."""
    total, count = 0.0, 0
    with nm.no_grad():
        for mix, target in make_batches(tracks, config, stft_config, model.config.sources,
                                        dtype=model.dtype):
            pred = model(nm.Tensor(mix))
            total += float(nm.mse_loss(pred, target).data) * len(mix)
            count += len(mix)
    return total / count if count else float("nan")


def _checked_loss(model, tracks, config, stft_config, epoch: int) -> float:
    try:
        return dataset_loss(model, tracks, config, stft_config)
    except nm.NumericError as exc:
        raise TrainingError(f"non-finite value evaluating after epoch {epoch}: {exc}") from exc


def _activation_peak(model: D2Net, mix: np.ndarray) -> float:
    try:
        with nm.no_grad():
            return float(np.max(np.abs(model(nm.Tensor(mix)).data)))
    except nm.NumericError:
        return float("inf")


def train(model: D2Net, tracks: Sequence[SourceSet], config: TrainConfig, stft_config: StftConfig,
          log_path=None, checkpoint_path=None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit ``model`` to ``tracks`` and keep the best-validation weights.

    Each epoch remixes the training tracks by independent per-source
    permutations before cutting clips. Without a validation split the
    training loss selects the checkpoint instead.
    """
    t0 = time.perf_counter()
    model.workers = config.workers
    train_tracks, val_tracks = split_tracks(tracks, config.validation_fraction, config.seed)
    params = list(model.parameters().values())
    opt = nm.Adam(params, lr=config.learning_rate)
    result = TrainResult(model)
    result.initial_loss = _checked_loss(model, train_tracks, config, stft_config, 0)
    best = {k: v.data.copy() for k, v in model.parameters().items()}
    best_score = (_checked_loss(model, val_tracks, config, stft_config, 0) if val_tracks
                  else result.initial_loss)
    result.best_val_loss = best_score

    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "a")
        log_fh.write("epoch\ttrain_loss\tval_loss\tgrad_norm\tseconds\n")
    try:
        for epoch in range(1, config.epochs + 1):
            epoch_t = time.perf_counter()
            remixed = shuffle_augment(train_tracks, epoch_seed=config.seed * 100003 + epoch)
            losses, norms = [], []
            for b, (mix, target) in enumerate(make_batches(
                    remixed, config, stft_config, model.config.sources,
                    shuffle_seed=config.seed * 100003 + epoch, dtype=model.dtype)):
                opt.zero_grad()
                try:
                    loss = nm.mse_loss(model(nm.Tensor(mix)), target)
                    loss.backward()
                except nm.NumericError as exc:
                    raise TrainingError(f"non-finite value at epoch {epoch} batch {b}: {exc}; "
                                        f"max|output|={_activation_peak(model, mix):.3g}") from exc
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
                norms.append(clip_grad_norm(params, config.grad_clip or 0.0))
                opt.step()
                losses.append(value)
            train_loss = float(np.mean(losses)) if losses else float("nan")
            val_loss = (_checked_loss(model, val_tracks, config, stft_config, epoch) if val_tracks
                        else train_loss)
            row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                   "grad_norm": float(np.mean(norms)) if norms else 0.0,
                   "seconds": time.perf_counter() - epoch_t}
            result.history.append(row)
            if val_loss < best_score:
                best_score = val_loss
                best = {k: v.data.copy() for k, v in model.parameters().items()}
                result.best_epoch = epoch
            if log_fh:
                log_fh.write(f"{epoch}\t{train_loss!r}\t{val_loss!r}\t{row['grad_norm']!r}\t"
                             f"{row['seconds']:.3f}\n")
                log_fh.flush()
            log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
            if on_epoch:
                on_epoch(row)
    finally:
        if log_fh:
            log_fh.close()

    model.load_parameters(best)
    result.best_val_loss = best_score
    result.final_loss = dataset_loss(model, train_tracks, config, stft_config)
    result.seconds = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, epoch=result.best_epoch,
                        val_loss=best_score, seed=config.seed, stft=stft_config)
    return result
