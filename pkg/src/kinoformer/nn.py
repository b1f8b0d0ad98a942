"""Parameter storage and transformer building blocks on top of :mod:`adcore`."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import adcore as ad
from .adcore import Tensor

NEG_INF = -1e9


class ParamStore(OrderedDict):
    """Ordered name -> Tensor map with deterministic initialisation."""

    def __init__(self, rng: np.random.Generator | None = None, dtype=None):
        super().__init__()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = dtype or ad.get_default_dtype()

    def add(self, name: str, shape, init: str = "xavier", std: float | None = None) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        shape = tuple(shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            data = self.rng.normal(0.0, std, shape)
        elif init == "xavier":
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            fan_out = shape[-1] if len(shape) == 2 else shape[0]
            data = self.rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), shape)
        else:
            raise ValueError(f"unknown init {init}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.values():
            p.zero_grad()

    def state(self) -> dict:
        return OrderedDict((k, v.data.copy()) for k, v in self.items())

    def load(self, arrays: dict) -> None:
        missing = set(self) - set(arrays)
        extra = set(arrays) - set(self)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in arrays.items():
            if v.shape != self[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self[k].shape}")
            self[k].data = np.array(v, dtype=self[k].dtype)

    def astype(self, dtype) -> None:
        self.dtype = np.dtype(dtype).type
        for p in self.values():
            p.data = p.data.astype(self.dtype)
            p.grad = None

    def count(self) -> int:
        return int(sum(p.data.size for p in self.values()))


def linear(x: Tensor, ps: ParamStore, name: str) -> Tensor:
    return ad.add(ad.matmul(x, ps[name + ".w"]), ps[name + ".b"])


def add_linear(ps: ParamStore, name: str, n_in: int, n_out: int) -> None:
    ps.add(name + ".w", (n_in, n_out))
    ps.add(name + ".b", (n_out,), "zeros")


def sinusoidal_table(n_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    k = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, k / d_model)
    pe = np.zeros((n_positions, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def causal_mask(n_q: int, n_k: int) -> np.ndarray:
    """Additive mask letting query t see keys 0..t."""
    allowed = np.arange(n_k)[None, :] <= np.arange(n_q)[:, None]
    return np.where(allowed, 0.0, NEG_INF)


class Ctx:
    """Per-forward settings: dropout on/off and its rng."""

    __slots__ = ("training", "rng", "rate")

    def __init__(self, training: bool = False, rng: np.random.Generator | None = None, rate: float = 0.0):
        self.training = training
        self.rng = rng
        self.rate = rate

    def drop(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.rate, self.training, self.rng)


def add_attention(ps: ParamStore, name: str, d: int) -> None:
    for k in ("q", "k", "v", "o"):
        add_linear(ps, f"{name}.{k}", d, d)


def attention(ps: ParamStore, name: str, xq: Tensor, xkv: Tensor, heads: int,
              mask: np.ndarray | None, ctx: Ctx) -> Tensor:
    b, lq, d = xq.shape
    lk = xkv.shape[1]
    dh = d // heads

    def split(t, n):
        return ad.permute(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(linear(xq, ps, name + ".q"), lq)
    k = split(linear(xkv, ps, name + ".k"), lk)
    v = split(linear(xkv, ps, name + ".v"), lk)
    scores = ad.scalar_mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = ad.add(scores, Tensor(mask.astype(scores.dtype)))
    w = ctx.drop(ad.softmax(scores, axis=-1))
    o = ad.reshape(ad.permute(ad.matmul(w, v), (0, 2, 1, 3)), (b, lq, d))
    return linear(o, ps, name + ".o")


def add_mlp(ps: ParamStore, name: str, d: int, hidden: int) -> None:
    add_linear(ps, name + ".fc1", d, hidden)
    add_linear(ps, name + ".fc2", hidden, d)


def mlp(ps: ParamStore, name: str, x: Tensor, ctx: Ctx) -> Tensor:
    h = ctx.drop(ad.gelu(linear(x, ps, name + ".fc1")))
    return ctx.drop(linear(h, ps, name + ".fc2"))


def add_encoder_block(ps: ParamStore, name: str, d: int, hidden: int) -> None:
    ps.add(name + ".norm1", (d,), "ones")
    add_attention(ps, name + ".attn", d)
    ps.add(name + ".norm2", (d,), "ones")
    add_mlp(ps, name + ".mlp", d, hidden)


def encoder_block(ps: ParamStore, name: str, x: Tensor, heads: int, mask, ctx: Ctx) -> Tensor:
    h = ad.rmsnorm(x, ps[name + ".norm1"])
    x = ad.add(x, ctx.drop(attention(ps, name + ".attn", h, h, heads, mask, ctx)))
    return ad.add(x, mlp(ps, name + ".mlp", ad.rmsnorm(x, ps[name + ".norm2"]), ctx))


def add_decoder_block(ps: ParamStore, name: str, d: int, hidden: int) -> None:
    ps.add(name + ".norm1", (d,), "ones")
    add_attention(ps, name + ".self", d)
    ps.add(name + ".norm2", (d,), "ones")
    ps.add(name + ".norm_mem", (d,), "ones")
    add_attention(ps, name + ".cross", d)
    ps.add(name + ".norm3", (d,), "ones")
    add_mlp(ps, name + ".mlp", d, hidden)


def decoder_block(ps: ParamStore, name: str, x: Tensor, mem: Tensor, heads: int,
                  self_mask, cross_mask, ctx: Ctx) -> Tensor:
    h = ad.rmsnorm(x, ps[name + ".norm1"])
    x = ad.add(x, ctx.drop(attention(ps, name + ".self", h, h, heads, self_mask, ctx)))
    h = ad.rmsnorm(x, ps[name + ".norm2"])
    m = ad.rmsnorm(mem, ps[name + ".norm_mem"])
    x = ad.add(x, ctx.drop(attention(ps, name + ".cross", h, m, heads, cross_mask, ctx)))
    return ad.add(x, mlp(ps, name + ".mlp", ad.rmsnorm(x, ps[name + ".norm3"]), ctx))


def attention_param_count(d: int) -> int:
    return 4 * (d * d + d)


def mlp_param_count(d: int, hidden: int) -> int:
    return d * hidden + hidden + hidden * d + d


def encoder_block_param_count(d: int, hidden: int) -> int:
    return 2 * d + attention_param_count(d) + mlp_param_count(d, hidden)


def decoder_block_param_count(d: int, hidden: int) -> int:
    return 4 * d + 2 * attention_param_count(d) + mlp_param_count(d, hidden)
