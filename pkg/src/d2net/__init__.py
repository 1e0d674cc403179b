"""Dilated GRU and dilated grouped convolution networks for music source separation."""
from .data import SourceSet, TrainConfig, load_corpus, load_wav, save_wav, synth_corpus
from .dsp import StftConfig, istft, stft, wiener_filter, wiener_masks
from .eval import bss_eval, sdr
from .model import D2Net, ModelConfig, load_checkpoint, save_checkpoint, truncate_blocks
from .numerics import Tensor
from .pipeline import RateMismatchError, separate
from .train import train

__all__ = [
    "SourceSet", "TrainConfig", "load_corpus", "load_wav", "save_wav", "synth_corpus",
    "StftConfig", "istft", "stft", "wiener_filter", "wiener_masks", "bss_eval", "sdr",
    "D2Net", "ModelConfig", "load_checkpoint", "save_checkpoint", "truncate_blocks",
    "Tensor", "RateMismatchError", "separate", "train",
]
__version__ = "0.1.0"
