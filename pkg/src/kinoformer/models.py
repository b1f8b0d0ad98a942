"""The multi-task kinodynamics transformer and its three comparison models.

All models consume normalised numpy arrays shaped (batch, steps, channels):
actions (..., 2), body-frame pose deltas (..., 6) and flattened terrain
patches (..., P*P).  Action predictions are raw commands in (-1, 1); pose
predictions are normalised deltas.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from . import adcore as ad
from . import nn
from .adcore import Tensor
from .nn import Ctx, ParamStore

ACTION_DIM = 2
POSE_DIM = 6


class Mode(str, enum.Enum):
    FKD = "FKD"
    IKD = "IKD"
    BC = "BC"
    WARMUP = "WARMUP"


class UnsupportedModeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    mlp_dim: int | None = None
    dropout: float = 0.3
    history: int = 6
    horizon: int = 3
    n_context: int | None = None
    pe_kind: str = "sinusoidal"
    final_norm: bool = True
    patch_head: bool = False
    pre_norm: bool = True
    patch_size: int = 16
    mask_ratio: float = 0.5
    e2e_dropout: float = 0.2

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even")
        if self.horizon < 1 or self.contexts < 1:
            raise ValueError("horizon and n_context must be >= 1")
        if self.pe_kind not in ("sinusoidal", "learnable"):
            raise ValueError(f"unknown pe_kind {self.pe_kind}")
        if not self.pre_norm:
            raise ValueError("only pre-norm blocks are implemented")

    @property
    def hidden(self) -> int:
        return self.mlp_dim or self.d_model

    @property
    def contexts(self) -> int:
        return self.n_context or self.horizon

    @property
    def d_embed(self) -> int:
        return self.d_model // 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2

    @property
    def max_positions(self) -> int:
        return self.history + self.horizon

    def to_dict(self) -> dict:
        return asdict(self)


FULL_CONFIG = ModelConfig(d_model=512, enc_layers=6, dec_layers=4, heads=8, dropout=0.3)
DESK_CONFIG = ModelConfig()


def positional_encoding(kind: str, position: int, d_model: int, table: np.ndarray | None = None) -> np.ndarray:
    if position < 0:
        raise ValueError("position must be non-negative")
    if kind == "sinusoidal":
        return nn.sinusoidal_table(position + 1, d_model)[position]
    if kind == "learnable":
        if table is None or position >= table.shape[0]:
            raise IndexError(f"position {position} outside learnable table")
        return table[position]
    raise ValueError(f"unknown kind {kind}")


def _const(x, dtype=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype or ad.get_default_dtype()))


class _Tokenizer:
    """Per-modality affine embeddings, fusion map and positional encodings."""

    cfg: ModelConfig
    params: ParamStore

    @property
    def dtype(self):
        return self.params.dtype

    def _c(self, x) -> Tensor:
        return _const(x, self.params.dtype)

    def astype(self, dtype):
        self.params.astype(dtype)
        return self

    def _add_tokenizer(self, ps: ParamStore) -> None:
        c = self.cfg
        nn.add_linear(ps, "embed.action", ACTION_DIM, c.d_embed)
        nn.add_linear(ps, "embed.pose", POSE_DIM, c.d_embed)
        nn.add_linear(ps, "embed.patch", c.patch_dim, c.d_embed)
        nn.add_linear(ps, "fuse", 3 * c.d_embed, c.d_model)
        if c.pe_kind == "learnable":
            ps.add("pe", (c.max_positions, c.d_model), "normal", std=0.1)
        self._sin = nn.sinusoidal_table(c.max_positions, c.d_model)

    def embed_modalities(self, a, p, i):
        ps = self.params
        a, p, i = (x if isinstance(x, Tensor) else self._c(x) for x in (a, p, i))
        return (nn.linear(a, ps, "embed.action"), nn.linear(p, ps, "embed.pose"),
                nn.linear(i, ps, "embed.patch"))

    def fuse_token(self, a_hat: Tensor, p_hat: Tensor, i_hat: Tensor) -> Tensor:
        if not (a_hat.shape[-1] == p_hat.shape[-1] == i_hat.shape[-1]):
            raise ad.ShapeError(f"fuse: embedding widths {a_hat.shape}, {p_hat.shape}, {i_hat.shape} differ")
        return nn.linear(ad.concat([a_hat, p_hat, i_hat], axis=-1), self.params, "fuse")

    def tokens(self, a, p, i) -> Tensor:
        return self.fuse_token(*self.embed_modalities(a, p, i))

    def pe(self, start: int, n: int) -> Tensor:
        if start + n > self.cfg.max_positions:
            raise IndexError(f"positions {start}..{start + n - 1} exceed table of {self.cfg.max_positions}")
        if self.cfg.pe_kind == "learnable":
            return self.params["pe"][start:start + n]
        return self._c(self._sin[start:start + n])


def _heads_param_count(c: ModelConfig) -> int:
    n = c.d_model * POSE_DIM + POSE_DIM + c.d_model * ACTION_DIM + ACTION_DIM
    if c.final_norm:
        n += c.d_model
    if c.patch_head:
        n += c.d_model * c.patch_dim + c.patch_dim
    return n


def _tokenizer_param_count(c: ModelConfig) -> int:
    de = c.d_embed
    n = (ACTION_DIM + 1) * de + (POSE_DIM + 1) * de + (c.patch_dim + 1) * de + (3 * de + 1) * c.d_model
    if c.pe_kind == "learnable":
        n += c.max_positions * c.d_model
    return n


class MultiTaskTransformer(_Tokenizer):
    """Encoder over fused history tokens plus context tokens; masked decoder over future tokens."""

    kind = "vertiformer"

    def __init__(self, cfg: ModelConfig = DESK_CONFIG, seed: int = 0):
        self.cfg = cfg
        ps = self.params = ParamStore(np.random.default_rng(seed))
        self._add_tokenizer(ps)
        c = cfg
        ps.add("context", (c.contexts, c.d_model), "normal", std=0.2)
        ps.add("mask.action", (c.d_embed,), "normal", std=0.2)
        ps.add("mask.pose", (c.d_embed,), "normal", std=0.2)
        ps.add("mask.patch", (c.d_embed,), "normal", std=0.2)
        for k in range(c.enc_layers):
            nn.add_encoder_block(ps, f"enc{k}", c.d_model, c.hidden)
        for k in range(c.dec_layers):
            nn.add_decoder_block(ps, f"dec{k}", c.d_model, c.hidden)
        if c.final_norm:
            ps.add("final_norm", (c.d_model,), "ones")
        nn.add_linear(ps, "head.pose", c.d_model, POSE_DIM)
        nn.add_linear(ps, "head.action", c.d_model, ACTION_DIM)
        if c.patch_head:
            nn.add_linear(ps, "head.patch", c.d_model, c.patch_dim)

    @staticmethod
    def param_count(c: ModelConfig) -> int:
        return (_tokenizer_param_count(c) + c.contexts * c.d_model + 3 * c.d_embed
                + c.enc_layers * nn.encoder_block_param_count(c.d_model, c.hidden)
                + c.dec_layers * nn.decoder_block_param_count(c.d_model, c.hidden)
                + _heads_param_count(c))

    def ctx(self, training: bool = False, rng=None) -> Ctx:
        return Ctx(training, rng, self.cfg.dropout)

    def encode(self, z: Tensor, ctx: Ctx | None = None):
        """Returns (history outputs, context outputs)."""
        ctx = ctx or self.ctx()
        c = self.cfg
        if z.ndim != 3 or z.shape[1] != c.history:
            raise ad.ShapeError(f"encode expects (batch, {c.history}, d_model) tokens, got {z.shape}")
        b = z.shape[0]
        x = ad.add(z, self.pe(0, c.history))
        ctx_tokens = ad.broadcast_to(self.params["context"], (b, c.contexts, c.d_model))
        x = ad.concat([x, ctx_tokens], axis=1)
        for k in range(c.enc_layers):
            x = nn.encoder_block(self.params, f"enc{k}", x, c.heads, None, ctx)
        return x[:, :c.history], x[:, c.history:]

    def build_future_tokens(self, mode: Mode, future_actions=None, future_deltas=None,
                            batch: int | None = None) -> Tensor:
        c, ps = self.cfg, self.params
        mode = Mode(mode)
        need_a = mode in (Mode.FKD, Mode.WARMUP)
        need_p = mode in (Mode.IKD, Mode.WARMUP)
        if need_a and future_actions is None:
            raise ValueError(f"{mode.value} needs future actions")
        if need_p and future_deltas is None:
            raise ValueError(f"{mode.value} needs future pose deltas")
        for arr in (future_actions, future_deltas):
            if arr is not None:
                batch = np.shape(arr)[0]
        if batch is None:
            raise ValueError("batch size required when no future inputs are given")
        shape = (batch, c.horizon, c.d_embed)
        a_hat = nn.linear(self._c(future_actions), ps, "embed.action") if need_a else ad.broadcast_to(ps["mask.action"], shape)
        p_hat = nn.linear(self._c(future_deltas), ps, "embed.pose") if need_p else ad.broadcast_to(ps["mask.pose"], shape)
        i_hat = ad.broadcast_to(ps["mask.patch"], shape)
        return ad.add(self.fuse_token(a_hat, p_hat, i_hat), self.pe(c.history, c.horizon))

    def decode(self, contexts: Tensor, future: Tensor, ctx: Ctx | None = None) -> Tensor:
        ctx = ctx or self.ctx()
        c = self.cfg
        k, tau = contexts.shape[1], future.shape[1]
        if k < tau:
            raise ValueError(f"{k} context tokens cannot serve {tau} future steps")
        self_mask = nn.causal_mask(tau, tau)
        cross_mask = nn.causal_mask(tau, k)
        x = future
        for i in range(c.dec_layers):
            x = nn.decoder_block(self.params, f"dec{i}", x, contexts, c.heads, self_mask, cross_mask, ctx)
        return x

    def heads_forward(self, e: Tensor) -> dict:
        ps = self.params
        if self.cfg.final_norm:
            e = ad.rmsnorm(e, ps["final_norm"])
        out = {"deltas": nn.linear(e, ps, "head.pose"),
               "actions": ad.tanh(nn.linear(e, ps, "head.action"))}
        if self.cfg.patch_head:
            out["patches"] = nn.linear(e, ps, "head.patch")
        return out

    def forward(self, hist_actions, hist_deltas, hist_patches, mode: Mode,
                future_actions=None, future_deltas=None, ctx: Ctx | None = None) -> dict:
        """One pass producing all horizon steps."""
        ctx = ctx or self.ctx()
        z = self.tokens(hist_actions, hist_deltas, hist_patches)
        _, contexts = self.encode(z, ctx)
        f = self.build_future_tokens(mode, future_actions, future_deltas, batch=z.shape[0])
        return self.heads_forward(self.decode(contexts, f, ctx))


def multitask_loss(pred: dict, targets: dict, mode: Mode | None = None, patch_head: bool = False) -> Tensor:
    """Sum of per-head mean squared errors; both heads are always supervised."""
    dt = pred["deltas"].dtype
    loss = ad.add(ad.mse(pred["deltas"], _const(targets["deltas"], dt)),
                  ad.mse(pred["actions"], _const(targets["actions"], dt)))
    if patch_head:
        loss = ad.add(loss, ad.mse(pred["patches"], _const(targets["patches"], dt)))
    return loss


class MaskedEncoder(_Tokenizer):
    """Encoder-only baseline: masked-token reconstruction plus per-task heads on the pooled output."""

    kind = "encoder"
    tasks = ("FKD", "IKD", "BC")

    def __init__(self, cfg: ModelConfig = DESK_CONFIG, seed: int = 0):
        self.cfg = cfg
        ps = self.params = ParamStore(np.random.default_rng(seed))
        self._add_tokenizer(ps)
        c = cfg
        ps.add("mask.token", (c.d_model,), "normal", std=0.2)
        for k in range(c.enc_layers):
            nn.add_encoder_block(ps, f"enc{k}", c.d_model, c.hidden)
        ps.add("final_norm", (c.d_model,), "ones")
        nn.add_linear(ps, "recon", c.d_model, c.d_model)
        d, tau = c.d_model, c.horizon
        head_in = {"FKD": d + tau * ACTION_DIM, "IKD": d + tau * POSE_DIM, "BC": d}
        head_out = {"FKD": tau * POSE_DIM, "IKD": tau * ACTION_DIM, "BC": tau * ACTION_DIM}
        for t in self.tasks:
            nn.add_linear(ps, f"task.{t}.fc1", head_in[t], d)
            nn.add_linear(ps, f"task.{t}.fc2", d, head_out[t])

    def ctx(self, training: bool = False, rng=None) -> Ctx:
        return Ctx(training, rng, self.cfg.dropout)

    def head_params(self) -> list:
        return [k for k in self.params if k.startswith("task.")]

    def encode(self, z: Tensor, ctx: Ctx) -> Tensor:
        x = ad.add(z, self.pe(0, z.shape[1]))
        for k in range(self.cfg.enc_layers):
            x = nn.encoder_block(self.params, f"enc{k}", x, self.cfg.heads, None, ctx)
        return ad.rmsnorm(x, self.params["final_norm"])

    def forward(self, hist_actions, hist_deltas, hist_patches, mask_ratio: float | None = None,
                ctx: Ctx | None = None, rng: np.random.Generator | None = None,
                token_mask: np.ndarray | None = None) -> dict:
        """Mask tokens at random, encode, reconstruct; returns outputs, pooled state and loss."""
        ctx = ctx or self.ctx()
        z = self.tokens(hist_actions, hist_deltas, hist_patches)
        b, t, d = z.shape
        if token_mask is None:
            ratio = self.cfg.mask_ratio if mask_ratio is None else mask_ratio
            token_mask = (rng.random((b, t)) < ratio) if ratio > 0 else np.zeros((b, t), bool)
        m = np.broadcast_to(token_mask[..., None], (b, t, d)).astype(z.dtype)
        x = ad.add(ad.mul(z, self._c(1.0 - m)), ad.mul(self.params["mask.token"], self._c(m)))
        h = self.encode(x, ctx)
        recon = nn.linear(h, self.params, "recon")
        n_masked = float(m.sum())
        if n_masked > 0:
            diff = ad.mul(ad.sub(recon, self._c(z.data)), self._c(m))
            loss = ad.scalar_mul(ad.sum_(ad.mul(diff, diff)), 1.0 / n_masked)
        else:
            loss = self._c(0.0)
        return {"outputs": h, "pooled": ad.mean(h, axis=1), "recon": recon, "recon_loss": loss,
                "token_mask": token_mask}

    def task_forward(self, pooled: Tensor, mode: Mode, future_actions=None, future_deltas=None,
                     ctx: Ctx | None = None) -> dict:
        ctx = ctx or self.ctx()
        mode = Mode(mode)
        b, tau = pooled.shape[0], self.cfg.horizon
        if mode == Mode.FKD:
            x = ad.concat([pooled, self._c(np.reshape(future_actions, (b, -1)))], axis=-1)
        elif mode == Mode.IKD:
            x = ad.concat([pooled, self._c(np.reshape(future_deltas, (b, -1)))], axis=-1)
        elif mode == Mode.BC:
            x = pooled
        else:
            raise UnsupportedModeError(f"encoder baseline has no {mode.value} head")
        name = f"task.{mode.value}"
        h = ctx.drop(ad.gelu(nn.linear(x, self.params, name + ".fc1")))
        y = nn.linear(h, self.params, name + ".fc2")
        if mode == Mode.FKD:
            return {"deltas": ad.reshape(y, (b, tau, POSE_DIM))}
        return {"actions": ad.tanh(ad.reshape(y, (b, tau, ACTION_DIM)))}

    def predict(self, hist_actions, hist_deltas, hist_patches, mode: Mode,
                future_actions=None, future_deltas=None) -> dict:
        with ad.no_grad():
            out = self.forward(hist_actions, hist_deltas, hist_patches, mask_ratio=0.0)
            return self.task_forward(out["pooled"], mode, future_actions, future_deltas)


class CausalDecoder(_Tokenizer):
    """Decoder-only baseline trained with next-token prediction.

    Token k fuses (action taken at step k, pose delta that arrived at step k,
    patch at step k).  Position k predicts the delta caused by its action and
    the next action.
    """

    kind = "decoder"

    def __init__(self, cfg: ModelConfig = DESK_CONFIG, seed: int = 0):
        self.cfg = cfg
        ps = self.params = ParamStore(np.random.default_rng(seed))
        self._add_tokenizer(ps)
        c = cfg
        for k in range(c.dec_layers):
            nn.add_encoder_block(ps, f"blk{k}", c.d_model, c.hidden)
        ps.add("final_norm", (c.d_model,), "ones")
        nn.add_linear(ps, "head.pose", c.d_model, POSE_DIM)
        nn.add_linear(ps, "head.action", c.d_model, ACTION_DIM)

    def ctx(self, training: bool = False, rng=None) -> Ctx:
        return Ctx(training, rng, self.cfg.dropout)

    def forward(self, seq_actions, seq_deltas, seq_patches, ctx: Ctx | None = None) -> dict:
        ctx = ctx or self.ctx()
        z = self.tokens(seq_actions, seq_deltas, seq_patches)
        n = z.shape[1]
        if n < 1:
            raise ValueError("decoder needs at least one token")
        x = ad.add(z, self.pe(0, n))
        mask = nn.causal_mask(n, n)
        for k in range(self.cfg.dec_layers):
            x = nn.encoder_block(self.params, f"blk{k}", x, self.cfg.heads, mask, ctx)
        x = ad.rmsnorm(x, self.params["final_norm"])
        return {"deltas": nn.linear(x, self.params, "head.pose"),
                "actions": ad.tanh(nn.linear(x, self.params, "head.action"))}

    def rollout(self, hist_actions, hist_deltas, hist_patches, current_patch, mode: Mode,
                future_actions=None, future_deltas=None) -> dict:
        """Autoregressive prediction of ``horizon`` steps; one forward call per step.

        History arrays follow the transition layout used by the other models
        (action k, delta caused by action k, patch k for k < T).  Future patch
        slots reuse ``current_patch``.
        """
        mode = Mode(mode)
        if mode == Mode.BC:
            raise UnsupportedModeError("decoder-only baseline cannot run BC: every token needs an action and a pose")
        if mode not in (Mode.FKD, Mode.IKD):
            raise UnsupportedModeError(f"decoder-only baseline has no {mode.value} rollout")
        tau = self.cfg.horizon
        ha, hd, hp = (np.asarray(x) for x in (hist_actions, hist_deltas, hist_patches))
        cur = np.asarray(current_patch)[:, None]
        acts = list(np.moveaxis(ha[:, 1:], 1, 0))
        dels = list(np.moveaxis(hd, 1, 0))
        pats = list(np.moveaxis(hp[:, 1:], 1, 0)) + [cur[:, 0]]
        pred_d, pred_a = [], []
        self.calls = 0
        with ad.no_grad():
            if mode == Mode.FKD:
                for k in range(tau):
                    acts.append(np.asarray(future_actions)[:, k])
                    out = self.forward(np.stack(acts, 1), np.stack(dels, 1), np.stack(pats, 1))
                    self.calls += 1
                    d = out["deltas"].data[:, -1]
                    pred_d.append(d)
                    dels.append(d)
                    pats.append(cur[:, 0])
                return {"deltas": np.stack(pred_d, 1)}
            t = ha.shape[1]
            for k in range(tau):
                n = len(acts)
                while len(dels) < n:
                    dels.append(np.asarray(future_deltas)[:, len(dels) - t])
                while len(pats) < n:
                    pats.append(cur[:, 0])
                out = self.forward(np.stack(acts, 1), np.stack(dels[:n], 1), np.stack(pats[:n], 1))
                self.calls += 1
                a = out["actions"].data[:, -1]
                pred_a.append(a)
                acts.append(a)
            return {"actions": np.stack(pred_a, 1)}


class End2EndRegressor:
    """Convolutional patch encoder plus fully connected FKD regressor."""

    kind = "end2end"
    channels = (8, 16, 32)

    dtype = _Tokenizer.dtype
    _c = _Tokenizer._c
    astype = _Tokenizer.astype

    def __init__(self, cfg: ModelConfig = DESK_CONFIG, seed: int = 0):
        self.cfg = cfg
        ps = self.params = ParamStore(np.random.default_rng(seed))
        cin = 1
        for k, co in enumerate(self.channels):
            ps.add(f"conv{k}.w", (co, cin, 3, 3))
            ps.add(f"conv{k}.b", (co,), "zeros")
            cin = co
        c = cfg
        n_in = c.history * (self.channels[-1] + ACTION_DIM + POSE_DIM) + c.horizon * ACTION_DIM
        dims = (n_in, 256, 512, 64)
        for k in range(3):
            nn.add_linear(ps, f"fc{k}", dims[k], dims[k + 1])
        nn.add_linear(ps, "out", 64, POSE_DIM * c.horizon)

    def ctx(self, training: bool = False, rng=None) -> Ctx:
        return Ctx(training, rng, self.cfg.e2e_dropout)

    def patch_features(self, patches) -> Tensor:
        """(B, T, P*P) -> (B, T, 32) via three stride-2 conv stages and global average pooling."""
        p = self.cfg.patch_size
        x = patches if isinstance(patches, Tensor) else self._c(patches)
        b, t = x.shape[:2]
        h = ad.reshape(x, (b * t, 1, p, p))
        for k in range(len(self.channels)):
            h = ad.relu(ad.conv2d(h, self.params[f"conv{k}.w"], self.params[f"conv{k}.b"], stride=2, pad=1))
        h = ad.mean(h, axis=(2, 3))
        return ad.reshape(h, (b, t, self.channels[-1]))

    def forward(self, hist_actions, hist_deltas, hist_patches, future_actions, ctx: Ctx | None = None) -> dict:
        ctx = ctx or self.ctx()
        feats = self.patch_features(hist_patches)
        b = feats.shape[0]
        x = ad.concat([ad.reshape(feats, (b, -1)), self._c(np.reshape(hist_actions, (b, -1))),
                       self._c(np.reshape(hist_deltas, (b, -1))), self._c(np.reshape(future_actions, (b, -1)))])
        for k in range(3):
            x = ctx.drop(ad.tanh(nn.linear(x, self.params, f"fc{k}")))
        y = nn.linear(x, self.params, "out")
        return {"deltas": ad.reshape(y, (b, self.cfg.horizon, POSE_DIM))}


MODEL_KINDS = {
    "vertiformer": MultiTaskTransformer,
    "encoder": MaskedEncoder,
    "decoder": CausalDecoder,
    "end2end": End2EndRegressor,
}


def build_model(kind: str, cfg: ModelConfig, seed: int = 0):
    try:
        return MODEL_KINDS[kind](cfg, seed)
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}") from None
