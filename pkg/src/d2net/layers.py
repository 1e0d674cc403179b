"""Dilated GRU and dilated grouped 1-D convolution with weight normalization.

Both layers are fused autodiff operations: the forward pass runs in numpy
and a hand-written backward closure supplies the gradients. Activations
are laid out ``[B, C, T]`` (a missing batch axis is accepted and restored).

GRU gate rows are stacked in ``r, z, n`` order, one slab per direction:

    r_t = sigmoid(W_ir x_t + b_ir + W_hr h_{t-k} + b_hr)
    z_t = sigmoid(W_iz x_t + b_iz + W_hz h_{t-k} + b_hz)
    n_t = tanh(W_in x_t + b_in + r_t * (W_hn h_{t-k} + b_hn))
    h_t = (1 - z_t) * n_t + z_t * h_{t-k}

With dilation ``k`` the time indices split into ``k`` residue classes that
never interact. The scan advances up to ``branch_workers`` of those
branches per step as extra lanes of one vectorized update, so a dilation-2
layer needs half as many sequential steps. Each lane goes through the same
per-matrix BLAS call regardless of how many lanes share a step, which keeps
the result bit-identical across worker counts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericError, ShapeError, Tensor, get_default_dtype, make_op

__all__ = [
    "DilatedGruParams", "GroupedConvParams",
    "dilated_gru_forward", "dilated_gru_parallel_forward", "gru_trace",
    "conv1d", "grouped_conv1d", "weight_norm_effective", "uniform_init",
]

_GATES = {"r": 0, "z": 1, "n": 2}


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or get_default_dtype())


@dataclass
class DilatedGruParams:
    """Weights of a (possibly bidirectional) Dilated GRU.

    ``w_ih`` is ``[ndir, 3H, D_in]``, ``w_hh`` is ``[ndir, 3H, H]`` and the
    biases are ``[ndir, 3H]``. Direction 0 runs forward in time, direction 1
    (if present) backward.
    """

    w_ih: Tensor
    w_hh: Tensor
    b_ih: Tensor
    b_hh: Tensor
    dilation: int = 1

    def __post_init__(self):
        if int(self.dilation) < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        self.dilation = int(self.dilation)
        nd, h3, _ = self.w_ih.shape
        if h3 % 3 or h3 == 0:
            raise ShapeError(f"w_ih rows must be 3*H, got {h3}")
        H = h3 // 3
        if self.w_hh.shape != (nd, h3, H):
            raise ShapeError(f"w_hh shape {self.w_hh.shape} != {(nd, h3, H)}")
        for name in ("b_ih", "b_hh"):
            if getattr(self, name).shape != (nd, h3):
                raise ShapeError(f"{name} shape {getattr(self, name).shape} != {(nd, h3)}")
        if nd not in (1, 2):
            raise ShapeError(f"expected 1 or 2 directions, got {nd}")

    @classmethod
    def init(cls, input_size: int, hidden_size: int, dilation: int = 1,
             bidirectional: bool = True, rng: np.random.Generator | None = None,
             dtype=None) -> "DilatedGruParams":
        if hidden_size < 1 or input_size < 1:
            raise ValueError("input_size and hidden_size must be positive")
        rng = rng or np.random.default_rng()
        nd = 2 if bidirectional else 1
        H = hidden_size

        def mk(shape, fan_in):
            return Tensor(uniform_init(rng, shape, fan_in, dtype), requires_grad=True)

        return cls(mk((nd, 3 * H, input_size), input_size), mk((nd, 3 * H, H), H),
                   mk((nd, 3 * H), H), mk((nd, 3 * H), H), dilation=dilation)

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[2]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[2]

    @property
    def num_directions(self) -> int:
        return self.w_ih.shape[0]

    @property
    def bidirectional(self) -> bool:
        return self.num_directions == 2

    @property
    def output_size(self) -> int:
        return self.num_directions * self.hidden_size

    def gate(self, name: str, direction: int = 0) -> np.ndarray:
        """View of one named weight, e.g. ``"W_hn"`` or ``"b_iz"``."""
        kind, src, gate = name[0], name[2], name[3]
        H = self.hidden_size
        rows = slice(_GATES[gate] * H, (_GATES[gate] + 1) * H)
        table = {("W", "i"): self.w_ih, ("W", "h"): self.w_hh,
                 ("b", "i"): self.b_ih, ("b", "h"): self.b_hh}
        return table[kind, src].data[direction, rows]

    def parameters(self) -> dict[str, Tensor]:
        return {"w_ih": self.w_ih, "w_hh": self.w_hh, "b_ih": self.b_ih, "b_hh": self.b_hh}


def _sigmoid(x):
    half = x.dtype.type(0.5)
    return half + half * np.tanh(half * x)


def _to_time_major(X: np.ndarray, nd: int, Tp: int) -> np.ndarray:
    """[B, D, T] -> [nd, Tp, B, D]; direction 1 is time-reversed, tail zero-padded."""
    B, D, T = X.shape
    xt = X.transpose(2, 0, 1)
    out = np.zeros((nd, Tp, B, D), dtype=X.dtype)
    out[0, :T] = xt
    if nd == 2:
        out[1, :T] = xt[::-1]
    return out


def _from_time_major(Y: np.ndarray, T: int) -> np.ndarray:
    """[nd, Tp, B, H] -> [B, nd*H, T], undoing the reversal of direction 1."""
    nd, _, B, H = Y.shape
    Y = Y[:, :T].copy()
    if nd == 2:
        Y[1] = Y[1, ::-1]
    return Y.transpose(2, 0, 3, 1).reshape(B, nd * H, T)


def _prep_h0(h0, nd, k, B, H, dtype) -> np.ndarray:
    if h0 is None:
        return np.zeros((nd, k, B, H), dtype=dtype)
    h = np.asarray(h0.data if isinstance(h0, Tensor) else h0, dtype=dtype)
    if h.ndim == 3:
        h = h[:, :, None, :]
    try:
        return np.ascontiguousarray(np.broadcast_to(h, (nd, k, B, H)))
    except ValueError:
        raise ShapeError(f"h0 shape {h.shape} incompatible with {(nd, k, B, H)}") from None


def _scan(gi, w_hh, b_hh, h0, lanes):
    """Run the recurrence over ``gi`` of shape [nd, S, k, B, 3H]."""
    nd, S, k, B, H3 = gi.shape
    H = H3 // 3
    whT = w_hh.transpose(0, 2, 1)[:, None]          # [nd, 1, H, 3H]
    bh = b_hh[:, None, None, :]
    shape = (nd, S, k, B, H)
    cache = {name: np.empty(shape, dtype=gi.dtype) for name in ("h", "hprev", "r", "z", "n", "hn")}
    for j0 in range(0, k, lanes):
        lane = slice(j0, min(j0 + lanes, k))
        h = h0[:, lane].copy()
        for s in range(S):
            gh = np.matmul(h, whT) + bh
            g = gi[:, s, lane]
            r = _sigmoid(g[..., :H] + gh[..., :H])
            z = _sigmoid(g[..., H:2 * H] + gh[..., H:2 * H])
            hn = gh[..., 2 * H:]
            n = np.tanh(g[..., 2 * H:] + r * hn)
            cache["hprev"][:, s, lane] = h
            h = (1 - z) * n + z * h
            cache["h"][:, s, lane] = h
            cache["r"][:, s, lane] = r
            cache["z"][:, s, lane] = z
            cache["n"][:, s, lane] = n
            cache["hn"][:, s, lane] = hn
    return cache


def _scan_backward(dh_out, cache, w_hh, lanes):
    nd, S, k, B, H = dh_out.shape
    dgi = np.empty((nd, S, k, B, 3 * H), dtype=dh_out.dtype)
    dgh = np.empty_like(dgi)
    whh = w_hh[:, None]                              # [nd, 1, 3H, H]
    for j0 in range(0, k, lanes):
        lane = slice(j0, min(j0 + lanes, k))
        carry = np.zeros((nd, lane.stop - lane.start, B, H), dtype=dh_out.dtype)
        for s in range(S - 1, -1, -1):
            dh = dh_out[:, s, lane] + carry
            r = cache["r"][:, s, lane]
            z = cache["z"][:, s, lane]
            n = cache["n"][:, s, lane]
            hn = cache["hn"][:, s, lane]
            hp = cache["hprev"][:, s, lane]
            dn = dh * (1 - z)
            da_n = dn * (1 - n * n)
            da_z = dh * (hp - n) * z * (1 - z)
            da_r = da_n * hn * r * (1 - r)
            dgi[:, s, lane, :, :H] = da_r
            dgi[:, s, lane, :, H:2 * H] = da_z
            dgi[:, s, lane, :, 2 * H:] = da_n
            dgh[:, s, lane, :, :H] = da_r
            dgh[:, s, lane, :, H:2 * H] = da_z
            dgh[:, s, lane, :, 2 * H:] = da_n * r
            carry = dh * z + np.matmul(dgh[:, s, lane], whh)
    return dgi, dgh


def dilated_gru_parallel_forward(x: Tensor, params: DilatedGruParams, branch_workers: int = 1,
                                 h0=None) -> Tensor:
    """Dilated GRU over ``x`` of shape [D_in, T] or [B, D_in, T].

    ``branch_workers`` branches of the dilation are advanced together per
    step. ``h0`` (constant, no gradient) holds one initial state per branch,
    shaped [ndir, k, B, H] or [ndir, k, H]; zeros by default.

    Returns [ndir*H, T] (or [B, ndir*H, T]); directions are concatenated
    along the channel axis, forward first.
    """
    if int(branch_workers) < 1:
        raise ValueError(f"branch_workers must be >= 1, got {branch_workers}")
    squeeze = x.ndim == 2
    X = x.data[None] if squeeze else x.data
    if X.ndim != 3:
        raise ShapeError(f"dilated GRU input must be [D, T] or [B, D, T], got {x.shape}")
    B, D, T = X.shape
    if D != params.input_size:
        raise ShapeError(f"dilated GRU: input has {D} channels, weights expect {params.input_size}")
    if T < 1:
        raise ShapeError("dilated GRU: empty sequence")
    k = params.dilation
    nd, H = params.num_directions, params.hidden_size
    S = -(-T // k)
    Tp = S * k
    lanes = min(int(branch_workers), k)
    W_ih, W_hh = params.w_ih.data, params.w_hh.data
    dtype = W_ih.dtype
    X = X.astype(dtype, copy=False)

    seq = _to_time_major(X, nd, Tp)                                    # [nd, Tp, B, D]
    gi = np.matmul(seq.reshape(nd, Tp * B, D), W_ih.transpose(0, 2, 1))
    gi += params.b_ih.data[:, None, :]
    gi = gi.reshape(nd, S, k, B, 3 * H)
    hinit = _prep_h0(h0, nd, k, B, H, dtype)
    cache = _scan(gi, W_hh, params.b_hh.data, hinit, lanes)
    out = _from_time_major(cache["h"].reshape(nd, Tp, B, H), T)
    if squeeze:
        out = out[0]

    def backward(g):
        G = g[None] if squeeze else g
        G = G.reshape(B, nd, H, T).transpose(1, 3, 0, 2)                # [nd, T, B, H]
        dh = np.zeros((nd, Tp, B, H), dtype=dtype)
        dh[0, :T] = G[0]
        if nd == 2:
            dh[1, :T] = G[1, ::-1]
        dgi, dgh = _scan_backward(dh.reshape(nd, S, k, B, H), cache, W_hh, lanes)
        dgi = dgi.reshape(nd, Tp * B, 3 * H)
        dgh = dgh.reshape(nd, Tp * B, 3 * H)
        hprev = cache["hprev"].reshape(nd, Tp * B, H)
        d_w_hh = np.matmul(dgh.transpose(0, 2, 1), hprev)
        d_b_hh = dgh.sum(axis=1)
        d_w_ih = np.matmul(dgi.transpose(0, 2, 1), seq.reshape(nd, Tp * B, D))
        d_b_ih = dgi.sum(axis=1)
        dseq = np.matmul(dgi, W_ih).reshape(nd, Tp, B, D)
        dxt = dseq[0, :T].copy()
        if nd == 2:
            dxt += dseq[1, :T][::-1]
        dx = dxt.transpose(1, 2, 0)
        if squeeze:
            dx = dx[0]
        return dx, d_w_ih, d_w_hh, d_b_ih, d_b_hh

    return make_op("dilated_gru", out,
                   (x, params.w_ih, params.w_hh, params.b_ih, params.b_hh), backward)


def dilated_gru_forward(x: Tensor, params: DilatedGruParams, h0=None) -> Tensor:
    """Serial reference execution: one branch at a time."""
    return dilated_gru_parallel_forward(x, params, branch_workers=1, h0=h0)


def gru_trace(x: np.ndarray, params: DilatedGruParams, h0=None) -> dict[str, np.ndarray]:
    """Gate activations ``r, z, n`` and states ``h``, each [ndir, T, B, H] in scan order."""
    X = np.asarray(x)
    X = X[None] if X.ndim == 2 else X
    B, D, T = X.shape
    k, nd, H = params.dilation, params.num_directions, params.hidden_size
    S = -(-T // k)
    seq = _to_time_major(X.astype(params.w_ih.dtype), nd, S * k)
    gi = np.matmul(seq.reshape(nd, -1, D), params.w_ih.data.transpose(0, 2, 1))
    gi += params.b_ih.data[:, None, :]
    cache = _scan(gi.reshape(nd, S, k, B, 3 * H), params.w_hh.data, params.b_hh.data,
                  _prep_h0(h0, nd, k, B, H, gi.dtype), 1)
    return {name: cache[name].reshape(nd, S * k, B, H)[:, :T] for name in ("r", "z", "n", "h")}


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class GroupedConvParams:
    """Weight-normalized grouped dilated convolution.

    The effective kernel is ``g * v / ||v||`` per output channel, with
    ``v`` shaped [C_out, C_in/G, K].
    """

    v: Tensor
    g: Tensor
    bias: Tensor
    groups: int = 1
    dilation: int = 1

    def __post_init__(self):
        c_out, cin_g, K = self.v.shape
        if self.groups < 1 or self.dilation < 1:
            raise ValueError("groups and dilation must be positive")
        if c_out % self.groups:
            raise ShapeError(f"out channels {c_out} not divisible by groups {self.groups}")
        if self.dilation * (K - 1) % 2:
            raise ShapeError(f"kernel {K} with dilation {self.dilation} cannot be padded symmetrically")
        if self.g.shape != (c_out,) or self.bias.shape != (c_out,):
            raise ShapeError("g and bias must be [C_out]")

    @classmethod
    def init(cls, in_channels: int, out_channels: int, kernel_size: int, groups: int = 1,
             dilation: int = 1, rng: np.random.Generator | None = None, dtype=None):
        if in_channels % groups or out_channels % groups:
            raise ShapeError(f"channels {in_channels}->{out_channels} not divisible by groups {groups}")
        rng = rng or np.random.default_rng()
        fan_in = in_channels // groups * kernel_size
        v = uniform_init(rng, (out_channels, in_channels // groups, kernel_size), fan_in, dtype)
        g = np.sqrt((v.astype(np.float64) ** 2).sum(axis=(1, 2))).astype(v.dtype)
        bias = uniform_init(rng, (out_channels,), fan_in, dtype)
        return cls(Tensor(v, requires_grad=True), Tensor(g, requires_grad=True),
                   Tensor(bias, requires_grad=True), groups=groups, dilation=dilation)

    @property
    def in_channels(self) -> int:
        return self.v.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.v.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.v.shape[2]

    @property
    def receptive_field(self) -> int:
        return self.dilation * (self.kernel_size - 1) + 1

    def parameters(self) -> dict[str, Tensor]:
        return {"v": self.v, "g": self.g, "bias": self.bias}


def weight_norm_effective(v: Tensor, g: Tensor) -> Tensor:
    """``g * v / ||v||`` with the norm taken per output channel (axis 0)."""
    V = v.data
    axes = tuple(range(1, V.ndim))
    norm = np.sqrt((V * V).sum(axis=axes, keepdims=True))
    if np.any(norm == 0):
        raise NumericError("weight_norm: zero-norm direction vector")
    shape = (-1,) + (1,) * (V.ndim - 1)
    G = g.data.reshape(shape)
    u = V / norm
    w = G * u

    def backward(dw):
        dg = (dw * u).sum(axis=axes)
        dv = (G / norm) * (dw - (dw * u).sum(axis=axes, keepdims=True) * u)
        return dv, dg

    return make_op("weight_norm", w, (v, g), backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1,
           dilation: int = 1) -> Tensor:
    """Length-preserving grouped dilated convolution with symmetric zero padding.

    ``x`` is [C_in, T] or [B, C_in, T]; ``weight`` is [C_out, C_in/G, K].
    """
    squeeze = x.ndim == 2
    X = x.data[None] if squeeze else x.data
    W = weight.data
    B, c_in, T = X.shape
    c_out, cin_g, K = W.shape
    G = groups
    if c_in % G or c_out % G:
        raise ShapeError(f"conv1d: channels {c_in}->{c_out} not divisible by groups {G}")
    if cin_g * G != c_in:
        raise ShapeError(f"conv1d: input has {c_in} channels, weight expects {cin_g * G}")
    span = dilation * (K - 1)
    if span % 2:
        raise ShapeError(f"conv1d: kernel {K} with dilation {dilation} is not symmetric-paddable")
    pad = span // 2
    cout_g = c_out // G
    xp = np.pad(X, ((0, 0), (0, 0), (pad, pad)))
    cols = np.stack([xp[:, :, i * dilation:i * dilation + T] for i in range(K)], axis=2)
    cols = cols.reshape(B, G, cin_g * K, T)
    Wr = W.reshape(G, cout_g, cin_g * K)
    out = np.matmul(Wr, cols).reshape(B, c_out, T)
    if bias is not None:
        out += bias.data[:, None]
    if squeeze:
        out = out[0]

    def backward(g):
        dout = (g[None] if squeeze else g).reshape(B, G, cout_g, T)
        dW = np.matmul(dout.transpose(1, 2, 0, 3).reshape(G, cout_g, B * T),
                       cols.transpose(1, 0, 3, 2).reshape(G, B * T, cin_g * K))
        dcols = np.matmul(Wr.transpose(0, 2, 1), dout).reshape(B, c_in, K, T)
        dxp = np.zeros_like(xp)
        for i in range(K):
            dxp[:, :, i * dilation:i * dilation + T] += dcols[:, :, i]
        dx = dxp[:, :, pad:pad + T]
        if squeeze:
            dx = dx[0]
        db = None if bias is None else dout.sum(axis=(0, 3)).reshape(c_out)
        return dx, dW.reshape(W.shape), db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv1d", out, parents, backward)


def grouped_conv1d(x: Tensor, params: GroupedConvParams) -> Tensor:
    """Convolve with the weight-normalized kernel of ``params``."""
    c_in = x.shape[-2]
    if c_in != params.in_channels:
        raise ShapeError(f"grouped_conv1d: input has {c_in} channels, layer expects {params.in_channels}")
    w = weight_norm_effective(params.v, params.g)
    return conv1d(x, w, params.bias, groups=params.groups, dilation=params.dilation)

