"""Model predictive path integral control over 18-step action sequences."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import adcore as ad
from ..geometry import compose_pose_array
from ..models import Mode
from ..terrainsim import ElevationMap, SimParams, step_batch


@dataclass(frozen=True)
class CostParams:
    w_dist: float = 1.0
    w_roll: float = 0.5
    w_pitch: float = 0.5
    goal_radius: float = 0.25
    lam: float = 0.2
    sigma_throttle: float = 0.3
    sigma_steer: float = 0.3
    horizon: int = 18
    n_samples: int = 1000

    def __post_init__(self):
        if min(self.w_dist, self.w_roll, self.w_pitch) < 0:
            raise ValueError("cost weights must be non-negative")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.sigma_throttle < 0 or self.sigma_steer < 0:
            raise ValueError("noise stds must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Candidate:
    actions: np.ndarray    # (H, 2)
    poses: np.ndarray      # (H, 6)
    cost: float


def trajectory_cost(poses: np.ndarray, goal, cp: CostParams) -> np.ndarray:
    """Summed per-step cost of (N, H, 6) pose rollouts."""
    dist = np.hypot(poses[..., 0] - goal[0], poses[..., 1] - goal[1])
    c = cp.w_dist * dist + cp.w_roll * np.abs(poses[..., 3]) + cp.w_pitch * np.abs(poses[..., 4])
    return c.sum(axis=-1)


def mppi_weights(costs: np.ndarray, lam: float) -> np.ndarray:
    w = np.exp(-(costs - costs.min()) / lam)
    return w / w.sum()


def shift_sequence(seq: np.ndarray) -> np.ndarray:
    """Drop the executed first step and repeat the last one."""
    return np.concatenate([seq[1:], seq[-1:]], axis=0)


@dataclass
class MPPIResult:
    actions: np.ndarray
    samples: np.ndarray
    poses: np.ndarray
    costs: np.ndarray
    weights: np.ndarray

    def best(self) -> Candidate:
        k = int(np.argmin(self.costs))
        return Candidate(self.samples[k], self.poses[k], float(self.costs[k]))


def mppi_plan(rollout_fn, goal, cp: CostParams, rng: np.random.Generator, prev_optimal=None,
              n_samples: int | None = None, shift: bool = True) -> MPPIResult:
    """One path-integral update around the (shifted) previous optimum.

    ``rollout_fn`` maps (N, H, 2) action sequences to (N, H, 6) poses.
    """
    n = cp.n_samples if n_samples is None else n_samples
    h = cp.horizon
    nominal = np.zeros((h, 2)) if prev_optimal is None else np.asarray(prev_optimal, dtype=np.float64)
    if nominal.shape != (h, 2):
        raise ValueError(f"previous sequence must be ({h}, 2), got {nominal.shape}")
    if shift and prev_optimal is not None:
        nominal = shift_sequence(nominal)
    noise = rng.normal(size=(n, h, 2)) * np.array([cp.sigma_throttle, cp.sigma_steer])
    samples = np.clip(nominal + noise, -1.0, 1.0)
    poses = np.asarray(rollout_fn(samples), dtype=np.float64)
    costs = trajectory_cost(poses, goal, cp)
    w = mppi_weights(costs, cp.lam)
    return MPPIResult(np.einsum("n,nhc->hc", w, samples), samples, poses, costs, w)


def oracle_rollout_fn(m: ElevationMap, p: SimParams, pose, stall: int = 0):
    """Rollouts through the true simulator from ``pose``."""
    pose = np.asarray(pose, dtype=np.float64)

    def fn(actions):
        n, h, _ = actions.shape
        cur = np.broadcast_to(pose, (n, 6)).copy()
        st = np.full(n, stall)
        status = np.zeros(n, dtype=int)
        out = np.empty((n, h, 6))
        for k in range(h):
            cur, st, status = step_batch(cur, st, status, actions[:, k], m, p)
            out[:, k] = cur
        return out

    return fn


def fkd_predict(model, hist_actions, hist_deltas, hist_patches, cur_patch, future_actions) -> np.ndarray:
    """Normalised FKD delta predictions for any model kind."""
    with ad.no_grad():
        if model.kind == "vertiformer":
            return model.forward(hist_actions, hist_deltas, hist_patches, Mode.FKD, future_actions)["deltas"].data
        if model.kind == "encoder":
            return model.predict(hist_actions, hist_deltas, hist_patches, Mode.FKD, future_actions)["deltas"].data
        if model.kind == "decoder":
            return model.rollout(hist_actions, hist_deltas, hist_patches, cur_patch, Mode.FKD, future_actions)["deltas"]
        return model.forward(hist_actions, hist_deltas, hist_patches, future_actions)["deltas"].data


def model_rollout_fn(model, stats, history, pose):
    """Rollouts by chaining horizon-length FKD predictions.

    After each call the sampled actions and predicted deltas are appended to
    a copy of the history; their patch slots reuse the latest observed patch.
    """
    tau = model.cfg.horizon
    ha, hd, hp = history.arrays()
    cur_patch = history.current_patch
    pose = np.asarray(pose, dtype=np.float64)
    dt = model.dtype

    def fn(actions):
        n, h, _ = actions.shape
        if h % tau:
            raise ValueError(f"rollout length {h} is not a multiple of the model horizon {tau}")
        a_n = stats.norm_actions(actions).astype(dt)
        hist_a = np.broadcast_to(stats.norm_actions(ha).astype(dt), (n,) + ha.shape)
        hist_d = np.broadcast_to(stats.norm_deltas(hd).astype(dt), (n,) + hd.shape)
        hist_p = np.broadcast_to(stats.norm_patches(hp).astype(dt), (n,) + hp.shape)
        cp = np.broadcast_to(stats.norm_patches(cur_patch).astype(dt), (n, cur_patch.size))
        rep_p = np.broadcast_to(cp[:, None], (n, tau, cur_patch.size))
        cur = np.broadcast_to(pose, (n, 6)).copy()
        out = np.empty((n, h, 6))
        t = ha.shape[0]
        for s in range(0, h, tau):
            fa = a_n[:, s:s + tau]
            d_n = fkd_predict(model, hist_a, hist_d, hist_p, cp, fa)
            d = stats.denorm_deltas(np.asarray(d_n, dtype=np.float64))
            for k in range(tau):
                cur = compose_pose_array(cur, d[:, k])
                out[:, s + k] = cur
            hist_a = np.concatenate([hist_a, fa], axis=1)[:, -t:]
            hist_d = np.concatenate([hist_d, d_n.astype(dt)], axis=1)[:, -t:]
            hist_p = np.concatenate([hist_p, rep_p], axis=1)[:, -t:]
        return out

    return fn
