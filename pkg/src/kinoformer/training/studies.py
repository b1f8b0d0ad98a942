"""Sequence-order probe and the ablation grid runner."""
from __future__ import annotations

import math
import time
import traceback
from dataclasses import dataclass, replace

import numpy as np

from .. import adcore as ad
from .. import nn
from ..geometry import chain_deltas
from ..models import ACTION_DIM, POSE_DIM, Mode, ModelConfig
from ..nn import Ctx, ParamStore
from .data import NormalizationStats, WindowDataset, fit_normalization, window_dataset
from .loop import TrainConfig, evaluate_offline, predict_dataset, train
from .optim import AdamW

# ---------------------------------------------------------------- sequence-order probe

PROBE_FIELDS = ("variant", "seed", "epoch", "train_loss", "val_loss", "val_acc")


class OrderProbe:
    """Encoder plus linear classifier deciding whether a history window is in temporal order.

    ``unified`` fuses each step's three modalities into one token; ``separate``
    maps every modality to its own token (3T tokens, no fusion map).
    """

    def __init__(self, variant: str, cfg: ModelConfig, patch_dim: int, seed: int = 0):
        if variant not in ("unified", "separate"):
            raise ValueError(f"unknown probe variant {variant}")
        self.variant, self.cfg = variant, cfg
        ps = self.params = ParamStore(np.random.default_rng(seed))
        d = cfg.d_model
        de = cfg.d_embed if variant == "unified" else d
        nn.add_linear(ps, "embed.action", ACTION_DIM, de)
        nn.add_linear(ps, "embed.pose", POSE_DIM, de)
        nn.add_linear(ps, "embed.patch", patch_dim, de)
        if variant == "unified":
            nn.add_linear(ps, "fuse", 3 * de, d)
        for k in range(cfg.enc_layers):
            nn.add_encoder_block(ps, f"enc{k}", d, cfg.hidden)
        ps.add("final_norm", (d,), "ones")
        nn.add_linear(ps, "cls", d, 1)
        self._pe = nn.sinusoidal_table(3 * cfg.history, d)

    def logits(self, a, p, i, ctx: Ctx) -> ad.Tensor:
        ps = self.params
        c = lambda x: ad.Tensor(np.asarray(x, dtype=ps.dtype))
        ea, ep, ei = (nn.linear(c(x), ps, n) for x, n in ((a, "embed.action"), (p, "embed.pose"), (i, "embed.patch")))
        if self.variant == "unified":
            z = nn.linear(ad.concat([ea, ep, ei], axis=-1), ps, "fuse")
        else:
            b, t, d = ea.shape
            z = ad.reshape(ad.stack([ea, ep, ei], axis=2), (b, 3 * t, d))
        x = ad.add(z, c(self._pe[:z.shape[1]]))
        for k in range(self.cfg.enc_layers):
            x = nn.encoder_block(ps, f"enc{k}", x, self.cfg.heads, None, ctx)
        pooled = ad.mean(ad.rmsnorm(x, ps["final_norm"]), axis=1)
        return ad.reshape(nn.linear(pooled, ps, "cls"), (-1,))


def bce_with_logits(z: ad.Tensor, y: np.ndarray) -> ad.Tensor:
    return ad.mean(ad.sub(ad.softplus(z), ad.mul(z, ad.Tensor(y.astype(z.dtype)))))


def random_derangement_order(t: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly drawn permutation of range(t) other than the identity."""
    while True:
        perm = rng.permutation(t)
        if np.any(perm != np.arange(t)):
            return perm


def balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``n // 2`` ones (shuffled windows) at random positions."""
    y = np.zeros(n)
    y[: n // 2] = 1.0
    return rng.permutation(y)


def shuffle_windows(a, p, i, labels, rng):
    """Permute the time steps of every labelled window; modalities of a step move together."""
    a, p, i = a.copy(), p.copy(), i.copy()
    for k in np.nonzero(labels)[0]:
        perm = random_derangement_order(a.shape[1], rng)
        a[k], p[k], i[k] = a[k, perm], p[k, perm], i[k, perm]
    return a, p, i


def _probe_eval(probe, ds, stats, idx, labels, shuffle_rng_seed, chunk=512):
    b = ds.batch(idx, stats)
    a, p, i = shuffle_windows(b.hist_actions, b.hist_deltas, b.hist_patches, labels,
                              np.random.default_rng(shuffle_rng_seed))
    z = []
    with ad.no_grad():
        for s in range(0, len(idx), chunk):
            z.append(probe.logits(a[s:s + chunk], p[s:s + chunk], i[s:s + chunk], Ctx()).data.astype(np.float64))
    z = np.concatenate(z)
    loss = float(np.mean(np.logaddexp(0.0, z) - labels * z))
    acc = float(np.mean((z > 0) == (labels > 0.5)))
    return loss, acc


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 10
    batch: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.08
    max_examples: int | None = None
    dtype: str = "float32"


def sequence_order_probe(variant: str, train_ds: WindowDataset, val_ds: WindowDataset, model_cfg: ModelConfig,
                         cfg: ProbeConfig = ProbeConfig(), seed: int = 0,
                         stats: NormalizationStats | None = None) -> list:
    """Train an order classifier; returns per-epoch rows (epoch 0 is the untrained probe)."""
    stats = stats or fit_normalization(train_ds)
    probe = OrderProbe(variant, model_cfg, train_ds.patch_dim, seed)
    probe.params.astype(cfg.dtype)
    rng = np.random.default_rng(seed + 1)
    n_tr = len(train_ds) if cfg.max_examples is None else min(len(train_ds), cfg.max_examples)
    n_tr -= n_tr % 2
    tr_pool = np.sort(rng.permutation(len(train_ds))[:n_tr])
    n_va = len(val_ds) - len(val_ds) % 2
    va_idx = np.arange(n_va)
    va_labels = balanced_labels(n_va, np.random.default_rng(10_000 + seed))
    opt = AdamW(probe.params, cfg.lr, cfg.weight_decay)
    rows = []

    def log(epoch, train_loss):
        vl, va = _probe_eval(probe, val_ds, stats, va_idx, va_labels, 20_000 + seed)
        rows.append({"variant": variant, "seed": seed, "epoch": epoch, "train_loss": train_loss,
                     "val_loss": vl, "val_acc": va})

    log(0, math.nan)
    for e in range(cfg.epochs):
        order = rng.permutation(tr_pool)
        labels = balanced_labels(n_tr, rng)
        total = 0.0
        for s in range(0, n_tr, cfg.batch):
            idx = order[s:s + cfg.batch]
            b = train_ds.batch(idx, stats)
            y = labels[s:s + cfg.batch]
            a, p, i = shuffle_windows(b.hist_actions, b.hist_deltas, b.hist_patches, y, rng)
            probe.params.zero_grad()
            loss = bce_with_logits(probe.logits(a, p, i, Ctx(True, rng, model_cfg.dropout)), y)
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        log(e + 1, total / n_tr)
    return rows


# ---------------------------------------------------------------- ablations

ABLATION_FIELDS = ("study", "kind", "pe_kind", "final_norm", "patch_head", "horizon", "seed", "status",
                   "val_loss", "val_fkd", "err_x", "err_y", "err_z", "err_avg", "xy_cum_err", "wall_time")

STUDIES = {
    "pe": [{"pe_kind": "sinusoidal"}, {"pe_kind": "learnable"}],
    "norm": [{"final_norm": True}, {"final_norm": False}],
    "patch_head": [{"patch_head": False}, {"patch_head": True}],
    "horizon": [{"kind": "vertiformer", "horizon": 6}, {"kind": "decoder", "horizon": 6}],
    "models": [{"kind": k} for k in ("vertiformer", "encoder", "decoder", "end2end")],
}


def grid_cells(studies) -> list:
    """Expand study names into (study, cell) pairs in a fixed order."""
    out = []
    for s in studies:
        if s not in STUDIES:
            raise ValueError(f"unknown study {s}; choose from {sorted(STUDIES)}")
        out.extend((s, dict(c)) for c in STUDIES[s])
    return out


def xy_cumulative_error(model, ds: WindowDataset, stats: NormalizationStats) -> float:
    """Mean over examples of the summed per-step XY position error of composed FKD predictions."""
    pred = predict_dataset(model, ds, stats, Mode.FKD)
    b = ds.all(stats)
    poses = chain_deltas(b.cur_pose, stats.denorm_deltas(pred["deltas"]))
    err = np.hypot(poses[..., 0] - b.fut_poses[..., 0], poses[..., 1] - b.fut_poses[..., 1])
    return float(err.sum(axis=1).mean())


def run_cell(study: str, cell: dict, seed: int, episodes, base_model: ModelConfig, base_train: TrainConfig,
             val_fraction: float = 0.2, stride: int = 1, split_seed: int = 0) -> dict:
    kind = cell.get("kind", "vertiformer")
    mcfg = replace(base_model, **{k: v for k, v in cell.items() if k != "kind"})
    row = {"study": study, "kind": kind, "pe_kind": mcfg.pe_kind, "final_norm": mcfg.final_norm,
           "patch_head": mcfg.patch_head, "horizon": mcfg.horizon, "seed": seed}
    t0 = time.perf_counter()
    try:
        tr, va = window_dataset(episodes, mcfg.history, mcfg.horizon, stride, val_fraction, split_seed)
        res = train(kind, tr, va, mcfg, replace(base_train, seed=seed))
        rep = evaluate_offline(res.model, va, res.stats, Mode.FKD)
        row.update(status="ok", val_loss=res.best_val, val_fkd=rep.delta_mse, err_x=rep.err_x, err_y=rep.err_y,
                   err_z=rep.err_z, err_avg=rep.err_avg, xy_cum_err=xy_cumulative_error(res.model, va, res.stats))
    except Exception as err:  # a failed cell is recorded and the grid continues
        row.update(status=f"failed: {type(err).__name__}: {err}".replace("\n", " "))
        row["traceback"] = traceback.format_exc()
    row["wall_time"] = time.perf_counter() - t0
    return row


def ablation_runner(cells, seeds, episodes, base_model: ModelConfig = ModelConfig(),
                    base_train: TrainConfig = TrainConfig(), on_row=None, **kw) -> list:
    """Train every (cell, seed) pair; returns one row per pair in grid order."""
    rows = []
    for study, cell in cells:
        for seed in seeds:
            row = run_cell(study, cell, seed, episodes, base_model, base_train, **kw)
            rows.append(row)
            if on_row:
                on_row(row)
    return rows
