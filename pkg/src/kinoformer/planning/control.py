"""Controllers, closed-loop trials and their metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import adcore as ad
from ..geometry import Action, Pose6, relative_pose_array
from ..models import Mode
from ..terrainsim import (ElevationMap, Episode, SimParams, SimState, Status, TerrainParams, WorldSpec,
                          extract_patch, flat_map, generate_terrain, settle, settle_array, step_dynamics)
from .globalplan import dijkstra_plan, traversability_costmap
from .mppi import CostParams, mppi_plan, model_rollout_fn, oracle_rollout_fn

HELD_OUT_SEED_BASE = 900_000_000
START_X = 0.4
FAR_BAND = 0.4
STOP = Action(0.0, 0.0)


class HistoryBuffer:
    """The last ``T`` observed transitions (action, resulting delta, patch before the action)."""

    def __init__(self, history: int, pose, patch):
        self.history = history
        self.pose = np.asarray(pose, dtype=np.float64)
        self.current_patch = np.asarray(patch, dtype=np.float64).ravel()
        # a stationary prefix stands in for the unobserved past
        self.actions = [np.zeros(2)] * history
        self.deltas = [np.zeros(6)] * history
        self.patches = [self.current_patch] * history

    def push(self, action, pose, patch) -> None:
        pose = np.asarray(pose, dtype=np.float64)
        self.actions = self.actions[1:] + [np.asarray(action, dtype=np.float64)]
        self.deltas = self.deltas[1:] + [relative_pose_array(self.pose, pose)]
        self.patches = self.patches[1:] + [self.current_patch]
        self.pose = pose
        self.current_patch = np.asarray(patch, dtype=np.float64).ravel()

    def arrays(self):
        return np.array(self.actions), np.array(self.deltas), np.array(self.patches)


@dataclass
class Observation:
    pose: np.ndarray
    patch: np.ndarray
    goal: tuple | None


class Controller:
    """Base interface: ``reset`` at the start of a trial, then ``act`` every tick."""

    def reset(self, obs: Observation) -> None:
        pass

    def act(self, obs: Observation) -> Action:
        raise NotImplementedError

    def observe(self, action: Action, obs: Observation) -> None:
        pass


class RandomController(Controller):
    def __init__(self, seed: int = 0):
        self.seed = seed

    def reset(self, obs):
        self.rng = np.random.default_rng(self.seed)

    def act(self, obs):
        return Action(*self.rng.uniform(-1.0, 1.0, 2))


class _HistoryController(Controller):
    def __init__(self, model, stats):
        self.model, self.stats = model, stats

    def reset(self, obs):
        self.buffer = HistoryBuffer(self.model.cfg.history, obs.pose, obs.patch)

    def observe(self, action, obs):
        self.buffer.push(action.as_array(), obs.pose, obs.patch)

    def _hist(self):
        s, dt = self.stats, self.model.dtype
        ha, hd, hp = self.buffer.arrays()
        return (s.norm_actions(ha)[None].astype(dt), s.norm_deltas(hd)[None].astype(dt),
                s.norm_patches(hp)[None].astype(dt))


class MPPIController(_HistoryController):
    """FKD-driven MPPI; ``model=None`` substitutes the true simulator for the learned model."""

    def __init__(self, model, stats, cp: CostParams, seed: int = 0, world: ElevationMap | None = None,
                 sim: SimParams = SimParams(), iterations: int = 1):
        super().__init__(model, stats)
        self.cp, self.seed, self.world, self.sim, self.iterations = cp, seed, world, sim, iterations

    def reset(self, obs):
        self.rng = np.random.default_rng(self.seed)
        self.plan = None
        if self.model is not None:
            super().reset(obs)

    def observe(self, action, obs):
        if self.model is not None:
            super().observe(action, obs)

    def act(self, obs):
        if self.model is None:
            fn = oracle_rollout_fn(self.world, self.sim, obs.pose)
        else:
            fn = model_rollout_fn(self.model, self.stats, self.buffer, obs.pose)
        plan = self.plan
        for i in range(self.iterations):
            plan = mppi_plan(fn, obs.goal, self.cp, self.rng, plan, shift=(i == 0)).actions
        self.plan = plan
        return Action(*plan[0])


def path_to_world(m: ElevationMap, path) -> np.ndarray:
    rc = np.asarray(path, dtype=np.float64)
    return np.stack([m.origin[0] + rc[:, 1] * m.resolution, m.origin[1] + rc[:, 0] * m.resolution], axis=1)


def world_to_cell(m: ElevationMap, x: float, y: float) -> tuple:
    return (int(round((y - m.origin[1]) / m.resolution)), int(round((x - m.origin[0]) / m.resolution)))


def desired_poses(path_xy: np.ndarray, pose, m: ElevationMap, sim: SimParams, n: int = 3):
    """``n`` poses spaced ``v_max * dt`` apart along the path ahead of the closest point.

    Returns (n, 6) poses settled on the terrain, or None when the path is exhausted.
    """
    seg = np.diff(path_xy, axis=0)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    k = int(np.argmin(np.hypot(path_xy[:, 0] - pose[0], path_xy[:, 1] - pose[1])))
    spacing = sim.v_max * sim.dt
    if arc[-1] - arc[k] < 1e-9:
        return None
    s = np.minimum(arc[k] + spacing * np.arange(1, n + 1), arc[-1])
    x = np.interp(s, arc, path_xy[:, 0])
    y = np.interp(s, arc, path_xy[:, 1])
    idx = np.clip(np.searchsorted(arc, s, side="left") - 1, 0, len(seg) - 1)
    yaw = np.arctan2(seg[idx, 1], seg[idx, 0])
    return settle_array(m, x, y, yaw, sim)


class IKDController(_HistoryController):
    """Global Dijkstra path, three look-ahead poses, inverse-kinodynamics action."""

    def __init__(self, model, stats, world: ElevationMap, sim: SimParams = SimParams(), k_grad: float = 10.0):
        super().__init__(model, stats)
        self.world, self.sim = world, sim
        self.costmap = traversability_costmap(world, k_grad)

    def reset(self, obs):
        super().reset(obs)
        res = dijkstra_plan(self.costmap, world_to_cell(self.world, *obs.pose[:2]),
                            world_to_cell(self.world, *obs.goal))
        self.path = path_to_world(self.world, res.path) if res.found else None

    def act(self, obs):
        if self.path is None:
            return STOP
        des = desired_poses(self.path, obs.pose, self.world, self.sim, self.model.cfg.horizon)
        if des is None:
            return STOP
        chain = np.vstack([obs.pose[None], des])
        d = relative_pose_array(chain[:-1], chain[1:])
        ha, hd, hp = self._hist()
        fd = self.stats.norm_deltas(d)[None].astype(self.model.dtype)
        with ad.no_grad():
            if self.model.kind == "decoder":
                a = self.model.rollout(ha, hd, hp, self.stats.norm_patches(self.buffer.current_patch)[None],
                                       Mode.IKD, future_deltas=fd)["actions"]
            elif self.model.kind == "encoder":
                a = self.model.predict(ha, hd, hp, Mode.IKD, future_deltas=fd)["actions"].data
            else:
                a = self.model.forward(ha, hd, hp, Mode.IKD, future_deltas=fd)["actions"].data
        return Action(*np.asarray(a, dtype=np.float64)[0, 0])


class BCController(_HistoryController):
    """Zero-shot behaviour cloning: both future modalities masked."""

    def act(self, obs):
        ha, hd, hp = self._hist()
        with ad.no_grad():
            if self.model.kind == "encoder":
                a = self.model.predict(ha, hd, hp, Mode.BC)["actions"].data
            else:
                a = self.model.forward(ha, hd, hp, Mode.BC)["actions"].data
        return Action(*np.asarray(a, dtype=np.float64)[0, 0])


@dataclass(frozen=True)
class RunMetrics:
    success: bool
    traversal_time: float
    mean_abs_roll: float
    mean_abs_pitch: float
    failure: str
    steps: int
    world_seed: int | None = None

    def row(self) -> dict:
        return asdict(self)


METRIC_FIELDS = ("trial", "world_seed", "success", "traversal_time", "mean_abs_roll", "mean_abs_pitch",
                 "failure", "steps")


def trace_metrics(trace: Episode, task: str, world: WorldSpec, goal=None, goal_radius: float = 0.25,
                  world_seed=None) -> RunMetrics:
    """Metrics of one trial recomputed from its recorded poses and final status."""
    poses = trace.poses
    steps = trace.steps
    roll = float(np.mean(np.abs(poses[:, 3])))
    pitch = float(np.mean(np.abs(poses[:, 4])))
    status = Status(trace.status)
    if task == "BC":
        crossed = np.nonzero(poses[:, 0] >= world.length - FAR_BAND)[0]
        ok = crossed.size > 0 and status not in (Status.ROLLED_OVER, Status.STUCK)
        t = float(crossed[0] * trace.dt) if ok else math.nan
    else:
        ok = status == Status.AT_GOAL
        t = float(steps * trace.dt) if ok else math.nan
    if ok:
        failure = ""
    elif status == Status.RUNNING:
        failure = "timeout"
    else:
        failure = status.value
    return RunMetrics(bool(ok), t, roll, pitch, failure, steps, world_seed)


@dataclass(frozen=True)
class TrialSpec:
    world: WorldSpec = field(default_factory=WorldSpec)
    sim: SimParams = field(default_factory=SimParams)
    terrain: TerrainParams = field(default_factory=lambda: TerrainParams(h_max=0.15))
    flat: bool = False
    max_steps: int = 90


def held_out_world(index: int, spec: TrialSpec) -> tuple:
    seed = HELD_OUT_SEED_BASE + index
    m = flat_map(spec.world, seed) if spec.flat else generate_terrain(seed, spec.terrain, spec.world)
    return seed, m


def run_trial(controller: Controller, m: ElevationMap, task: str, spec: TrialSpec, world_seed=None):
    """Drive ``controller`` from the near edge toward the far edge; returns (RunMetrics, trace)."""
    p, w = spec.sim, spec.world
    y = w.width / 2.0
    goal = None if task == "BC" else (w.length - START_X, y)
    state = SimState(settle(m, START_X, y, 0.0, p), goal=goal)
    poses, actions, patches = [], [], []

    def observe():
        pa = state.pose.as_array()
        return Observation(pa, extract_patch(m, pa, p.patch_size, p.patch_extent, p.clearance), goal)

    obs = observe()
    controller.reset(obs)
    for _ in range(spec.max_steps):
        if state.terminal:
            break
        if task == "BC" and state.pose.x >= w.length - FAR_BAND:
            break
        a = controller.act(obs)
        poses.append(obs.pose)
        actions.append(a.as_array())
        patches.append(obs.patch)
        state = step_dynamics(state, a, m, p)
        obs = observe()
        controller.observe(a, obs)
    poses.append(obs.pose)
    actions.append(STOP.as_array())
    patches.append(obs.patch)
    trace = Episode(p.dt, np.array(poses), np.array(actions), np.array(patches), m.seed, state.status)
    return trace_metrics(trace, task, w, goal, p.goal_radius, world_seed), trace


def summarize(metrics: list) -> dict:
    ok = [r for r in metrics if r.success]
    times = np.array([r.traversal_time for r in ok])
    return {"n_trials": len(metrics), "successes": len(ok),
            "time_mean": float(times.mean()) if ok else math.nan,
            "time_std": float(times.std()) if ok else math.nan,
            "mean_abs_roll": float(np.mean([r.mean_abs_roll for r in metrics])) if metrics else math.nan,
            "mean_abs_pitch": float(np.mean([r.mean_abs_pitch for r in metrics])) if metrics else math.nan}


def closed_loop_eval(task: str, make_controller, n_trials: int, spec: TrialSpec = TrialSpec(),
                     first_world: int = 0):
    """Run ``n_trials`` held-out worlds; ``make_controller(world_map)`` builds a fresh controller.

    Returns (metrics list, summary dict, traces).
    """
    if task not in ("FKD", "IKD", "BC"):
        raise ValueError(f"unknown task {task}")
    metrics, traces = [], []
    for i in range(n_trials):
        seed, m = held_out_world(first_world + i, spec)
        r, tr = run_trial(make_controller(m), m, task, spec, seed)
        metrics.append(r)
        traces.append(tr)
    return metrics, summarize(metrics), traces
