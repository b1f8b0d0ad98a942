"""Training loops for all four model kinds, the masking curriculum and offline metrics."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import adcore as ad
from ..geometry import chain_deltas
from ..models import Mode, ModelConfig, UnsupportedModeError, build_model, multitask_loss
from .data import Batch, NormalizationStats, WindowDataset, fit_normalization
from .optim import AdamW

LOG_FIELDS = ("epoch", "mode_mix", "train_loss", "val_loss", "val_fkd", "err_x", "err_y", "err_z", "err_avg")


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.08
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 50
    batch: int = 64
    warmup_epochs: int = 5
    mask_split: float = 0.5
    seed: int = 0
    bc_fraction: float = 0.0
    pretrain_fraction: float = 0.5
    dtype: str = "float64"
    eval_batch: int = 512

    def __post_init__(self):
        if not 0.0 <= self.mask_split <= 1.0:
            raise ValueError("mask_split must lie in [0, 1]")
        if not 0.0 <= self.bc_fraction <= 1.0:
            raise ValueError("bc_fraction must lie in [0, 1]")
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


FULL_TRAIN = TrainConfig(epochs=200, batch=512)


def curriculum_mode(epoch: int, rng: np.random.Generator, cfg: TrainConfig) -> Mode:
    """Masking mode for one batch; ``epoch`` counts training epochs from 0."""
    if epoch < cfg.warmup_epochs:
        return Mode.WARMUP
    if cfg.bc_fraction > 0 and rng.random() < cfg.bc_fraction:
        return Mode.BC
    return Mode.FKD if rng.random() < cfg.mask_split else Mode.IKD


# ---------------------------------------------------------------- predictions

def predict(model, b: Batch, mode: Mode) -> dict:
    """Evaluation-mode predictions as numpy: normalised ``deltas`` and/or raw ``actions``."""
    mode = Mode(mode)
    kind = model.kind
    with ad.no_grad():
        if kind == "vertiformer":
            out = model.forward(b.hist_actions, b.hist_deltas, b.hist_patches, mode, b.fut_actions, b.fut_deltas)
        elif kind == "encoder":
            out = model.predict(b.hist_actions, b.hist_deltas, b.hist_patches, mode, b.fut_actions, b.fut_deltas)
        elif kind == "decoder":
            return model.rollout(b.hist_actions, b.hist_deltas, b.hist_patches, b.cur_patch, mode,
                                 b.fut_actions, b.fut_deltas)
        elif kind == "end2end":
            if mode != Mode.FKD:
                raise UnsupportedModeError("end2end baseline only predicts forward kinodynamics")
            out = model.forward(b.hist_actions, b.hist_deltas, b.hist_patches, b.fut_actions)
        else:
            raise ValueError(f"unknown model kind {kind}")
    return {k: v.data.astype(np.float64) for k, v in out.items() if k in ("deltas", "actions")}


def predict_dataset(model, ds: WindowDataset, stats: NormalizationStats, mode: Mode, chunk: int = 512):
    parts = []
    for s in range(0, len(ds), chunk):
        b = ds.batch(np.arange(s, min(s + chunk, len(ds))), stats)
        parts.append(predict(model, b, mode))
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


# ---------------------------------------------------------------- metrics

def error_rates(pred_poses: np.ndarray, true_poses: np.ndarray, cur_poses: np.ndarray) -> np.ndarray:
    """Scale-normalised MAE for x, y, z.

    The scale of each component is the std of the true displacement from the
    current pose, taken over all examples and steps.
    """
    disp = true_poses[..., :3] - cur_poses[:, None, :3]
    scale = np.maximum(disp.reshape(-1, 3).std(axis=0), 1e-12)
    return np.abs(pred_poses[..., :3] - true_poses[..., :3]).reshape(-1, 3).mean(axis=0) / scale


@dataclass(frozen=True)
class OfflineReport:
    mode: str
    n: int
    err_x: float = math.nan
    err_y: float = math.nan
    err_z: float = math.nan
    action_mae: float = math.nan
    delta_mse: float = math.nan

    @property
    def err_avg(self) -> float:
        return (self.err_x + self.err_y + self.err_z) / 3.0

    def row(self) -> dict:
        d = asdict(self)
        d["err_avg"] = self.err_avg
        return d


REPORT_FIELDS = ("mode", "n", "err_x", "err_y", "err_z", "err_avg", "action_mae", "delta_mse")


def evaluate_offline(model, ds: WindowDataset, stats: NormalizationStats, mode: Mode,
                     tau: int | None = None, chunk: int = 512) -> OfflineReport:
    """Error rates of composed absolute poses (FKD) or action MAE (IKD, BC) over ``ds``."""
    mode = Mode(mode)
    trained = model.cfg.horizon
    tau = trained if tau is None else tau
    if tau > trained:
        raise ValueError(f"horizon {tau} exceeds the trained horizon {trained}; re-train to change it")
    if ds.horizon != trained:
        raise ValueError(f"dataset horizon {ds.horizon} does not match model horizon {trained}")
    if len(ds) == 0:
        raise ValueError("empty evaluation set")
    pred = predict_dataset(model, ds, stats, mode, chunk)
    allb = ds.all(stats)
    if mode == Mode.FKD:
        d = stats.denorm_deltas(pred["deltas"][:, :tau])
        poses = chain_deltas(allb.cur_pose, d)
        ex, ey, ez = error_rates(poses, allb.fut_poses[:, :tau], allb.cur_pose)
        mse = float(np.mean((pred["deltas"][:, :tau] - allb.fut_deltas[:, :tau]) ** 2))
        return OfflineReport(mode.value, len(ds), float(ex), float(ey), float(ez), delta_mse=mse)
    mae = float(np.mean(np.abs(pred["actions"][:, :tau] - allb.fut_actions_raw[:, :tau])))
    return OfflineReport(mode.value, len(ds), action_mae=mae)


# ---------------------------------------------------------------- per-kind objectives

def _vf_loss(model, b: Batch, mode: Mode, ctx) -> ad.Tensor:
    out = model.forward(b.hist_actions, b.hist_deltas, b.hist_patches, mode, b.fut_actions, b.fut_deltas, ctx)
    targets = {"deltas": b.fut_deltas, "actions": b.fut_actions_raw, "patches": b.next_patches}
    return multitask_loss(out, targets, mode, model.cfg.patch_head)


def _dec_seq(b: Batch):
    """Teacher-forced decoder inputs and targets over one window."""
    a, d, p = b.actions_all, b.deltas_all, b.patches_all
    seq = (a[:, 1:], d[:, :-1], p[:, 1:-1])
    return seq, d[:, 1:], b.actions_raw[:, 2:]


def _dec_loss(model, b: Batch, ctx) -> ad.Tensor:
    seq, t_d, t_a = _dec_seq(b)
    out = model.forward(*seq, ctx=ctx)
    dt = out["deltas"].dtype
    loss = ad.mse(out["deltas"], ad.Tensor(t_d.astype(dt)))
    if t_a.shape[1]:
        loss = ad.add(loss, ad.mse(out["actions"][:, :-1], ad.Tensor(t_a.astype(dt))))
    return loss


def _e2e_loss(model, b: Batch, ctx) -> ad.Tensor:
    out = model.forward(b.hist_actions, b.hist_deltas, b.hist_patches, b.fut_actions, ctx)
    return ad.mse(out["deltas"], ad.Tensor(b.fut_deltas.astype(out["deltas"].dtype)))


def _enc_task_loss(model, pooled, b: Batch, ctx) -> ad.Tensor:
    dt = pooled.dtype
    fkd = model.task_forward(pooled, Mode.FKD, b.fut_actions, b.fut_deltas, ctx)
    ikd = model.task_forward(pooled, Mode.IKD, b.fut_actions, b.fut_deltas, ctx)
    bc = model.task_forward(pooled, Mode.BC, ctx=ctx)
    act = ad.Tensor(b.fut_actions_raw.astype(dt))
    return ad.add(ad.add(ad.mse(fkd["deltas"], ad.Tensor(b.fut_deltas.astype(dt))),
                         ad.mse(ikd["actions"], act)), ad.mse(bc["actions"], act))


def _enc_pooled(model, b: Batch):
    with ad.no_grad():
        out = model.forward(b.hist_actions, b.hist_deltas, b.hist_patches, mask_ratio=0.0)
    return out["pooled"].detach()


def validation_loss(model, ds: WindowDataset, stats: NormalizationStats, chunk: int = 512) -> float:
    """The kind's own objective on ``ds`` in evaluation mode (example-weighted)."""
    total, n = 0.0, 0
    ctx = model.ctx(False)
    for s in range(0, len(ds), chunk):
        b = ds.batch(np.arange(s, min(s + chunk, len(ds))), stats)
        with ad.no_grad():
            if model.kind == "vertiformer":
                v = 0.5 * (_vf_loss(model, b, Mode.FKD, ctx).item() + _vf_loss(model, b, Mode.IKD, ctx).item())
            elif model.kind == "encoder":
                v = _enc_task_loss(model, _enc_pooled(model, b), b, ctx).item()
            elif model.kind == "decoder":
                v = _dec_loss(model, b, ctx).item()
            else:
                v = _e2e_loss(model, b, ctx).item()
        total += v * len(b)
        n += len(b)
    return total / n


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: object
    stats: NormalizationStats
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    best_state: dict = field(default_factory=dict)
    wall_time: float = 0.0


def _epoch_row(model, epoch: int, mix: str, train_loss: float, val: WindowDataset, stats, cfg) -> dict:
    row = {"epoch": epoch, "mode_mix": mix, "train_loss": train_loss,
           "val_loss": validation_loss(model, val, stats, cfg.eval_batch)}
    rep = evaluate_offline(model, val, stats, Mode.FKD, chunk=cfg.eval_batch)
    row.update(val_fkd=rep.delta_mse, err_x=rep.err_x, err_y=rep.err_y, err_z=rep.err_z, err_avg=rep.err_avg)
    return row


def train(kind: str, train_ds: WindowDataset, val_ds: WindowDataset, model_cfg: ModelConfig,
          cfg: TrainConfig = TrainConfig(), stats: NormalizationStats | None = None,
          on_epoch=None, init_state: dict | None = None) -> TrainResult:
    """Train one model; the returned model holds the best-validation parameters.

    Determinism: all randomness flows from ``cfg.seed``.  ``on_epoch(row)`` is
    called after every logged epoch, including the epoch-0 evaluation at
    initialisation.  ``init_state`` replaces the seeded initial parameters
    (used to resume from a checkpoint).
    """
    import time

    t0 = time.perf_counter()
    if train_ds.horizon != model_cfg.horizon or train_ds.history != model_cfg.history:
        raise ValueError("dataset window does not match the model's history/horizon")
    stats = stats or fit_normalization(train_ds)
    model = build_model(kind, model_cfg, cfg.seed)
    if np.dtype(cfg.dtype) != np.dtype(model.dtype):
        model.astype(cfg.dtype)
    if init_state is not None:
        model.params.load(init_state)
    rng = np.random.default_rng(cfg.seed + 1)
    res = TrainResult(model, stats)

    def log(row):
        res.log.append(row)
        if row["val_loss"] < res.best_val or not res.best_state:
            res.best_val, res.best_epoch = row["val_loss"], row["epoch"]
            res.best_state = model.params.state()
        if on_epoch:
            on_epoch(row)

    def evaluate(epoch, mix, train_loss):
        try:
            return _epoch_row(model, epoch, mix, train_loss, val_ds, stats, cfg)
        except ad.NonFiniteError as err:
            raise TrainingAborted(f"non-finite value while evaluating epoch {epoch}: {err}") from err

    log(evaluate(0, "", math.nan))

    n_pre = int(round(cfg.pretrain_fraction * cfg.epochs)) if kind == "encoder" else 0
    opt = AdamW(model.params, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps_adam)
    for e in range(cfg.epochs):
        if kind == "encoder" and e == n_pre:
            opt = AdamW(model.params, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps_adam,
                        names=model.head_params())
        perm = rng.permutation(len(train_ds))
        mix, losses = Counter(), []
        for bi, s in enumerate(range(0, len(perm), cfg.batch)):
            b = train_ds.batch(np.sort(perm[s:s + cfg.batch]), stats)
            ctx = model.ctx(True, rng)
            model.params.zero_grad()
            try:
                if kind == "vertiformer":
                    mode = curriculum_mode(e, rng, cfg)
                    mix[mode.value] += 1
                    loss = _vf_loss(model, b, mode, ctx)
                elif kind == "encoder":
                    phase = "MASK" if e < n_pre else "HEADS"
                    mix[phase] += 1
                    if e < n_pre:
                        loss = model.forward(b.hist_actions, b.hist_deltas, b.hist_patches, ctx=ctx,
                                             rng=rng)["recon_loss"]
                    else:
                        loss = _enc_task_loss(model, _enc_pooled(model, b), b, ctx)
                elif kind == "decoder":
                    mix["NTP"] += 1
                    loss = _dec_loss(model, b, ctx)
                else:
                    mix["FKD"] += 1
                    loss = _e2e_loss(model, b, ctx)
                value = loss.item()
                if not math.isfinite(value):
                    raise ad.NonFiniteError("loss is not finite")
                if loss.requires_grad:
                    ad.backward(loss)
                opt.step()
            except ad.NonFiniteError as err:
                raise TrainingAborted(f"non-finite value at epoch {e + 1}, batch {bi}: {err}") from err
            losses.append(value * len(b))
        mix_s = "|".join(f"{k}:{v}" for k, v in sorted(mix.items()))
        log(evaluate(e + 1, mix_s, sum(losses) / len(train_ds)))

    model.params.load(res.best_state)
    res.wall_time = time.perf_counter() - t0
    return res
