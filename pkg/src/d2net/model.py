"""D2 blocks, the full separation network, checkpoints and block truncation."""
from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nm
from .dsp import StftConfig
from .layers import DilatedGruParams, GroupedConvParams, dilated_gru_parallel_forward, grouped_conv1d
from .numerics import ShapeError, Tensor

__all__ = [
    "BLOCK_VARIANTS", "SOURCES", "ModelConfig", "D2Block", "D2Net", "Checkpoint",
    "save_checkpoint", "load_checkpoint", "truncate_blocks",
]

SOURCES = ("vocals", "drums", "bass", "other")
BLOCK_VARIANTS = ("dgru_dgconv", "dense", "residual", "dgconv_dgru", "conv_dgconv")


@dataclass
class ModelConfig:
    freq_bins: int = 65
    channels: int = 64
    num_blocks: int = 2
    conv_dilations: list[int] = field(default_factory=lambda: [2, 4])
    gru_dilations: list[int] = field(default_factory=lambda: [2, 2])
    groups: int = 4
    kernel: int = 3
    sources: list[str] = field(default_factory=lambda: list(SOURCES))
    block_variant: str = "dgru_dgconv"
    leaky_slope: float = nm.LEAKY_SLOPE

    def __post_init__(self):
        self.conv_dilations = [int(d) for d in self.conv_dilations]
        self.gru_dilations = [int(d) for d in self.gru_dilations]
        self.sources = [str(s) for s in self.sources]
        self.validate()

    def validate(self) -> None:
        if self.freq_bins < 1 or self.channels < 1 or self.kernel < 1 or self.groups < 1:
            raise ValueError("freq_bins, channels, kernel and groups must be positive")
        # zero blocks is the fully truncated model
        if self.num_blocks < 0:
            raise ValueError(f"num_blocks must be >= 0, got {self.num_blocks}")
        if len(self.conv_dilations) != self.num_blocks or len(self.gru_dilations) != self.num_blocks:
            raise ValueError(f"need {self.num_blocks} conv and gru dilations, got "
                             f"{self.conv_dilations} and {self.gru_dilations}")
        if any(d < 1 for d in self.conv_dilations + self.gru_dilations):
            raise ValueError("dilations must be >= 1")
        if self.channels % self.groups:
            raise ValueError(f"channels {self.channels} not divisible by groups {self.groups}")
        if self.channels % 2:
            raise ValueError("channels must be even (two GRU directions of C/2)")
        if self.block_variant not in BLOCK_VARIANTS:
            raise ValueError(f"unknown block variant {self.block_variant!r}")
        if not self.sources:
            raise ValueError("at least one source is required")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = dict(freq_bins=2049, channels=2048, num_blocks=3, conv_dilations=[2, 4, 8],
                    gru_dilations=[2, 2, 2], groups=32, kernel=3)
        base.update(overrides)
        return cls(**base)

    @property
    def output_channels(self) -> int:
        return len(self.sources) * self.freq_bins

    def layer_table(self) -> list[tuple[str, str, int, int]]:
        """(unit, layer, in, out) rows in network order."""
        C = self.channels
        rows = [("input", f"conv(k={self.kernel}, d=1)", self.freq_bins, C)]
        for i in range(self.num_blocks):
            first = f"dgru(k={self.gru_dilations[i]})"
            if self.block_variant == "conv_dgconv":
                first = "conv(k=1, d=1)"
            second = f"conv(k={self.kernel}, d={self.conv_dilations[i]}, groups={self.groups})"
            pair = [first, second]
            if self.block_variant == "dgconv_dgru":
                pair.reverse()
            rows += [(f"block{i + 1}", pair[0], C, C), (f"block{i + 1}", pair[1], C, C)]
        rows.append(("output", f"conv(k={self.kernel}, d=1)", C, self.output_channels))
        return rows

    def parameter_count(self) -> int:
        """Closed-form parameter count (weight-norm pairs count v and g)."""
        C, D, K, G = self.channels, self.freq_bins, self.kernel, self.groups
        H = C // 2

        def conv(cin, cout, k, groups):
            return cout * (cin // groups) * k + 2 * cout

        gru = 2 * (3 * H * C + 3 * H * H + 6 * H)
        first = conv(C, C, 1, 1) if self.block_variant == "conv_dgconv" else gru
        block = first + conv(C, C, K, G)
        return conv(D, C, K, 1) + self.num_blocks * block + conv(C, self.output_channels, K, 1)

    def to_items(self) -> list[tuple[str, str]]:
        out = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            out.append((f.name, str(value)))
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.name in ("conv_dilations", "gru_dilations"):
                kw[f.name] = [int(v) for v in raw.split(",") if v]
            elif f.name == "sources":
                kw[f.name] = [v for v in raw.split(",") if v]
            elif f.name == "block_variant":
                kw[f.name] = raw
            elif f.name == "leaky_slope":
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


class D2Block:
    """Dilated GRU + dilated grouped convolution with a three-way sum.

    ``variant`` selects one of the block designs: ``dgru_dgconv`` (default),
    ``dense`` (block input also added into the conv input), ``residual``
    (per-layer residuals), ``dgconv_dgru`` (conv first) and ``conv_dgconv``
    (GRU replaced by an ungrouped kernel-1 convolution).
    """

    def __init__(self, channels: int, gru_dilation: int, conv_dilation: int, groups: int,
                 kernel: int, variant: str = "dgru_dgconv", slope: float = nm.LEAKY_SLOPE,
                 rng: np.random.Generator | None = None, dtype=None):
        rng = rng or np.random.default_rng()
        self.channels = channels
        self.variant = variant
        self.slope = slope
        self.gru: DilatedGruParams | None = None
        self.pointwise: GroupedConvParams | None = None
        if variant == "conv_dgconv":
            self.pointwise = GroupedConvParams.init(channels, channels, 1, rng=rng, dtype=dtype)
        else:
            self.gru = DilatedGruParams.init(channels, channels // 2, dilation=gru_dilation,
                                             bidirectional=True, rng=rng, dtype=dtype)
        self.conv = GroupedConvParams.init(channels, channels, kernel, groups=groups,
                                           dilation=conv_dilation, rng=rng, dtype=dtype)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        if self.gru is not None:
            params.update({f"gru.{k}": v for k, v in self.gru.parameters().items()})
        if self.pointwise is not None:
            params.update({f"pointwise.{k}": v for k, v in self.pointwise.parameters().items()})
        params.update({f"conv.{k}": v for k, v in self.conv.parameters().items()})
        return params

    def _recurrent(self, x: Tensor, workers: int) -> Tensor:
        if self.gru is not None:
            return dilated_gru_parallel_forward(x, self.gru, branch_workers=workers)
        return nm.leaky_relu(grouped_conv1d(x, self.pointwise), self.slope)

    def _conv(self, x: Tensor) -> Tensor:
        return nm.leaky_relu(grouped_conv1d(x, self.conv), self.slope)

    def forward_parts(self, x: Tensor, workers: int = 1) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(recurrent_out, conv_out, block_out)``."""
        if x.shape[-2] != self.channels:
            raise ShapeError(f"D2 block expects {self.channels} channels, got {x.shape[-2]}")
        v = self.variant
        if v == "dgconv_dgru":
            c = self._conv(x)
            g = self._recurrent(c, workers)
            return g, c, x + c + g
        g = self._recurrent(x, workers)
        if v == "residual":
            u = x + g
            c = self._conv(u)
            return g, c, u + c
        c = self._conv(x + g if v == "dense" else g)
        return g, c, x + g + c

    def forward(self, x: Tensor, workers: int = 1) -> Tensor:
        return self.forward_parts(x, workers)[2]

    __call__ = forward


class D2Net:
    """Input conv, a stack of D2 blocks, and an output conv to all sources.

    Input is a log1p-magnitude map [D, T] or [B, D, T]; output is
    [S, D, T] or [B, S, D, T]. The output layer is linear.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | int | None = None,
                 dtype=None, workers: int = 1):
        config.validate()
        self.config = config
        self.workers = workers
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        C, K = config.channels, config.kernel
        self.input_conv = GroupedConvParams.init(config.freq_bins, C, K, rng=rng, dtype=dtype)
        self.blocks = [
            D2Block(C, config.gru_dilations[i], config.conv_dilations[i], config.groups, K,
                    config.block_variant, config.leaky_slope, rng=rng, dtype=dtype)
            for i in range(config.num_blocks)
        ]
        self.output_conv = GroupedConvParams.init(C, config.output_channels, K, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return self.input_conv.v.dtype

    def parameters(self) -> dict[str, Tensor]:
        params = {f"input_conv.{k}": v for k, v in self.input_conv.parameters().items()}
        for i, block in enumerate(self.blocks):
            params.update({f"blocks.{i}.{k}": v for k, v in block.parameters().items()})
        params.update({f"output_conv.{k}": v for k, v in self.output_conv.parameters().items()})
        return params

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def forward(self, mix: Tensor, keep_blocks: int | None = None) -> Tensor:
        D = self.config.freq_bins
        if mix.ndim not in (2, 3) or mix.shape[-2] != D:
            raise ShapeError(f"model expects [D={D}, T] or [B, {D}, T] input, got {mix.shape}")
        squeeze = mix.ndim == 2
        x = nm.reshape(mix, (1,) + mix.shape) if squeeze else mix
        h = nm.leaky_relu(grouped_conv1d(x, self.input_conv), self.config.leaky_slope)
        blocks = self.blocks if keep_blocks is None else self.blocks[:keep_blocks]
        for block in blocks:
            h = block(h, self.workers)
        y = grouped_conv1d(h, self.output_conv)
        B, _, T = y.shape
        y = nm.reshape(y, (B, len(self.config.sources), D, T))
        return nm.reshape(y, y.shape[1:]) if squeeze else y

    __call__ = forward

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Inference helper: returns non-negative log-magnitude estimates."""
        with nm.no_grad():
            out = self.forward(Tensor(np.asarray(features, dtype=self.dtype)))
        return np.maximum(out.data, 0)

    # -- checkpoints -----------------------------------------------------
    def to_checkpoint(self, epoch: int = 0, val_loss: float = float("nan"), seed: int = 0,
                      stft: StftConfig | None = None) -> "Checkpoint":
        params = {k: v.data.astype("<f4") for k, v in self.parameters().items()}
        return Checkpoint(dataclasses.replace(self.config), params, epoch=epoch,
                          val_loss=val_loss, seed=seed, stft=stft or StftConfig())

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", dtype=None, workers: int = 1) -> "D2Net":
        model = cls(dataclasses.replace(ckpt.config), rng=0, dtype=dtype, workers=workers)
        model.load_parameters(ckpt.params)
        return model

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        mine = self.parameters()
        if set(mine) != set(arrays):
            missing = sorted(set(mine) - set(arrays))
            extra = sorted(set(arrays) - set(mine))
            raise KeyError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for name, tensor in mine.items():
            src = np.asarray(arrays[name])
            if src.shape != tensor.shape:
                raise ShapeError(f"{name}: checkpoint shape {src.shape} != model {tensor.shape}")
            tensor.data[...] = src


def truncate_blocks(source: "D2Net | Checkpoint", keep: int) -> D2Net:
    """Model reusing the trained input/output convs and the first ``keep`` blocks.

    Weights are shared with ``source`` when it is a model; nothing is retrained.
    """
    model = source if isinstance(source, D2Net) else D2Net.from_checkpoint(source)
    n = model.config.num_blocks
    if not (0 <= keep <= n):
        raise ValueError(f"keep must be in [0, {n}], got {keep}")
    cfg = dataclasses.replace(model.config, num_blocks=keep,
                              conv_dilations=model.config.conv_dilations[:keep],
                              gru_dilations=model.config.gru_dilations[:keep])
    out = D2Net.__new__(D2Net)
    out.config = cfg
    out.workers = model.workers
    out.input_conv = model.input_conv
    out.blocks = model.blocks[:keep]
    out.output_conv = model.output_conv
    return out


# ---------------------------------------------------------------------------
# checkpoint file: text manifest, then little-endian float32 payload
# ---------------------------------------------------------------------------

_MAGIC = "D2NET-CHECKPOINT 1"
_END = "END"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    epoch: int = 0
    val_loss: float = float("nan")
    seed: int = 0
    stft: StftConfig = field(default_factory=StftConfig)

    def to_bytes(self) -> bytes:
        lines = [_MAGIC]
        lines += [f"config.{k}={v}" for k, v in self.config.to_items()]
        lines += [f"stft.{k}={getattr(self.stft, k)}" for k in ("window_size", "hop", "window", "sample_rate")]
        lines += [f"meta.seed={self.seed}", f"meta.epoch={self.epoch}",
                  f"meta.val_loss={float(self.val_loss)!r}"]
        payload = io.BytesIO()
        offset = 0
        for name, arr in self.params.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            shape = "x".join(str(d) for d in data.shape) or "scalar"
            lines.append(f"param.{name}={shape};{offset};{data.size}")
            payload.write(data.tobytes())
            offset += data.nbytes
        lines.append(_END)
        return ("\n".join(lines) + "\n").encode("utf-8") + payload.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        end = blob.find(f"\n{_END}\n".encode())
        if not blob.startswith(_MAGIC.encode()) or end < 0:
            raise ValueError("not a D2NET checkpoint (bad header)")
        header = blob[:end].decode("utf-8").split("\n")
        body = memoryview(blob)[end + len(_END) + 2:]
        config, meta, params, stft_items = {}, {}, {}, {}
        for line in header[1:]:
            key, _, value = line.partition("=")
            section, _, name = key.partition(".")
            if section == "config":
                config[name] = value
            elif section == "stft":
                stft_items[name] = value if name == "window" else int(value)
            elif section == "meta":
                meta[name] = value
            elif section == "param":
                shape_s, off_s, count_s = value.split(";")
                shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
                off, count = int(off_s), int(count_s)
                if off + 4 * count > len(body):
                    raise ValueError(f"checkpoint truncated at parameter {name}")
                params[name] = np.frombuffer(body[off:off + 4 * count], dtype="<f4").reshape(shape).copy()
            else:
                raise ValueError(f"unknown manifest line {line!r}")
        return cls(ModelConfig.from_items(config), params, epoch=int(meta.get("epoch", 0)),
                   val_loss=float(meta.get("val_loss", "nan")), seed=int(meta.get("seed", 0)),
                   stft=StftConfig(**stft_items))


def save_checkpoint(path, ckpt: Checkpoint | D2Net, **meta) -> Path:
    if isinstance(ckpt, D2Net):
        ckpt = ckpt.to_checkpoint(**meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
