"""Synthetic rugged-terrain world, analytic vehicle dynamics and demo data collection."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .geometry import Action, Pose6, wrap_angle


class OutOfBoundsError(ValueError):
    pass


class Status(str, enum.Enum):
    RUNNING = "running"
    STUCK = "stuck"
    ROLLED_OVER = "rolled_over"
    AT_GOAL = "at_goal"
    OUT_OF_BOUNDS = "out_of_bounds"


_STATUS_CODES = list(Status)


@dataclass(frozen=True)
class WorldSpec:
    """Testbed footprint plus a flat-sampling apron wide enough for patch crops."""
    length: float = 4.0
    width: float = 2.5
    margin: float = 1.25
    resolution: float = 0.05


@dataclass(frozen=True)
class TerrainParams:
    n_bumps: int = 90
    bump_height_range: tuple = (0.02, 0.3)
    bump_radius_range: tuple = (0.08, 0.3)
    noise_amp: float = 0.015
    noise_cell: float = 0.2
    h_max: float = 0.3


@dataclass(frozen=True)
class SimParams:
    wheelbase: float = 0.32
    track: float = 0.25
    v_max: float = 0.6
    steer_max: float = 0.5
    dt: float = 1.0 / 3.0
    clearance: float = 0.1
    slope_stall_threshold: float = 0.6
    rollover_limit: float = 0.9
    k_slip: float = 0.8
    goal_radius: float = 0.25
    stuck_steps: int = 3
    patch_size: int = 16
    patch_extent: float = 1.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not self.rollover_limit < math.pi / 2:
            raise ValueError("rollover_limit must be below pi/2")


@dataclass
class ElevationMap:
    heights: np.ndarray          # (rows along y, cols along x), meters
    resolution: float
    origin: tuple = (0.0, 0.0)   # world (x, y) of cell (0, 0)
    seed: int | None = None

    @property
    def height_cells(self) -> int:
        return self.heights.shape[0]

    @property
    def width_cells(self) -> int:
        return self.heights.shape[1]

    @property
    def extent(self) -> tuple:
        ox, oy = self.origin
        r = self.resolution
        return ox, ox + (self.width_cells - 1) * r, oy, oy + (self.height_cells - 1) * r

    def cell_center(self, row: int, col: int) -> tuple:
        return self.origin[0] + col * self.resolution, self.origin[1] + row * self.resolution

    def contains(self, x, y, margin: float = 0.0):
        x0, x1, y0, y1 = self.extent
        return (x >= x0 + margin) & (x <= x1 - margin) & (y >= y0 + margin) & (y <= y1 - margin)

    def sample(self, x, y):
        """Bilinear interpolation of the surrounding four cells."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if not np.all(self.contains(x, y)):
            raise OutOfBoundsError("elevation query outside the map")
        fx = (x - self.origin[0]) / self.resolution
        fy = (y - self.origin[1]) / self.resolution
        j0 = np.clip(np.floor(fx).astype(np.int64), 0, self.width_cells - 2)
        i0 = np.clip(np.floor(fy).astype(np.int64), 0, self.height_cells - 2)
        tx, ty = fx - j0, fy - i0
        h = self.heights
        top = h[i0, j0] * (1 - tx) + h[i0, j0 + 1] * tx
        bot = h[i0 + 1, j0] * (1 - tx) + h[i0 + 1, j0 + 1] * tx
        out = top * (1 - ty) + bot * ty
        return out if out.ndim else float(out)


def sample_elevation(m: ElevationMap, x, y):
    return m.sample(x, y)


def world_grid(world: WorldSpec) -> tuple:
    r = world.resolution
    nx = int(round((world.length + 2 * world.margin) / r)) + 1
    ny = int(round((world.width + 2 * world.margin) / r)) + 1
    xs = -world.margin + r * np.arange(nx)
    ys = -world.margin + r * np.arange(ny)
    return xs, ys


def bump_field(xs, ys, centers, heights, radii) -> np.ndarray:
    """Sum of isotropic Gaussian bumps evaluated on the (ys, xs) grid."""
    gx, gy = np.meshgrid(xs, ys)
    out = np.zeros_like(gx)
    for (cx, cy), h, r in zip(centers, heights, radii):
        out += h * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2.0 * r * r))
    return out


def _value_noise(xs, ys, cell: float, rng: np.random.Generator) -> np.ndarray:
    nx = int(math.ceil((xs[-1] - xs[0]) / cell)) + 2
    ny = int(math.ceil((ys[-1] - ys[0]) / cell)) + 2
    lattice = rng.uniform(-1.0, 1.0, size=(ny, nx))
    fx = (xs - xs[0]) / cell
    fy = (ys - ys[0]) / cell
    jx, iy = np.floor(fx).astype(int), np.floor(fy).astype(int)
    tx, ty = fx - jx, fy - iy
    sx, sy = tx * tx * (3 - 2 * tx), ty * ty * (3 - 2 * ty)
    a = lattice[np.ix_(iy, jx)]
    b = lattice[np.ix_(iy, jx + 1)]
    c = lattice[np.ix_(iy + 1, jx)]
    d = lattice[np.ix_(iy + 1, jx + 1)]
    sx, sy = sx[None, :], sy[:, None]
    return (a * (1 - sx) + b * sx) * (1 - sy) + (c * (1 - sx) + d * sx) * sy


def generate_terrain(seed: int, params: TerrainParams = TerrainParams(),
                     world: WorldSpec = WorldSpec()) -> ElevationMap:
    """Gaussian rock field plus smooth value noise, deterministic per seed.

    Bump centers fall inside the testbed footprint; the apron only sees their
    tails and the noise.  Heights are rescaled if their range exceeds h_max.
    """
    rng = np.random.default_rng(seed)
    xs, ys = world_grid(world)
    n = params.n_bumps
    centers = np.column_stack([rng.uniform(0.0, world.length, n), rng.uniform(0.0, world.width, n)])
    heights = rng.uniform(*params.bump_height_range, n)
    radii = rng.uniform(*params.bump_radius_range, n)
    h = bump_field(xs, ys, centers, heights, radii)
    if params.noise_amp > 0:
        h = h + params.noise_amp * _value_noise(xs, ys, params.noise_cell, rng)
    span = float(h.max() - h.min())
    if span > params.h_max > 0:
        h = h * (params.h_max / span)
    return ElevationMap(h, world.resolution, (float(xs[0]), float(ys[0])), seed)


def flat_map(world: WorldSpec = WorldSpec(), seed: int | None = None) -> ElevationMap:
    xs, ys = world_grid(world)
    return ElevationMap(np.zeros((ys.size, xs.size)), world.resolution, (float(xs[0]), float(ys[0])), seed)


def patch_margin(p: SimParams, m: ElevationMap) -> float:
    """Distance from the map edge the vehicle center must keep."""
    return p.patch_extent / math.sqrt(2.0) + m.resolution


def _contact_plane(m: ElevationMap, x, y, yaw, p: SimParams):
    hl, hw = p.wheelbase / 2.0, p.track / 2.0
    u = np.array([hl, hl, -hl, -hl])
    w = np.array([hw, -hw, hw, -hw])
    c, s = np.cos(yaw)[..., None], np.sin(yaw)[..., None]
    cx = x[..., None] + u * c - w * s
    cy = y[..., None] + u * s + w * c
    e = m.sample(cx, cy)
    a = e.mean(axis=-1)
    b = (e @ u) / (u @ u)
    cc = (e @ w) / (w @ w)
    return a, b, cc


def settle_array(m: ElevationMap, x, y, yaw, p: SimParams) -> np.ndarray:
    """Full poses for planar (x, y, yaw) resting on the terrain."""
    x, y, yaw = (np.asarray(v, dtype=np.float64) for v in (x, y, yaw))
    a, b, c = _contact_plane(m, x, y, yaw, p)
    return np.stack([x, y, a + p.clearance, np.arctan(c), -np.arctan(b), wrap_angle(yaw)], axis=-1)


def settle(m: ElevationMap, x: float, y: float, yaw: float, p: SimParams = SimParams()) -> Pose6:
    return Pose6.from_array(settle_array(m, np.array([x]), np.array([y]), np.array([yaw]), p)[0])


def step_batch(poses: np.ndarray, stall: np.ndarray, status: np.ndarray, actions: np.ndarray,
               m: ElevationMap, p: SimParams, goal=None):
    """Vectorised dynamics step.

    ``status`` holds integer indices into :class:`Status`.  Returns new
    (poses, stall, status); terminal rows come back unchanged.
    """
    poses = np.asarray(poses, dtype=np.float64)
    running = status == 0
    thr = np.clip(actions[..., 0], -1.0, 1.0)
    st = np.clip(actions[..., 1], -1.0, 1.0)
    pitch, yaw0 = poses[..., 4], poses[..., 5]
    uphill = -pitch * np.sign(thr)
    slip = np.maximum(0.0, 1.0 - p.k_slip * np.maximum(0.0, np.sin(uphill)))
    v = p.v_max * thr * slip
    v = np.where((uphill > p.slope_stall_threshold) & (np.abs(thr) > 0), 0.0, v)
    omega = v / p.wheelbase * np.tan(p.steer_max * st)
    vp = v * np.cos(pitch)
    turning = np.abs(omega) > 1e-12
    safe_w = np.where(turning, omega, 1.0)
    yaw1 = yaw0 + omega * p.dt
    dx = np.where(turning, vp / safe_w * (np.sin(yaw1) - np.sin(yaw0)), vp * p.dt * np.cos(yaw0))
    dy = np.where(turning, -vp / safe_w * (np.cos(yaw1) - np.cos(yaw0)), vp * p.dt * np.sin(yaw0))
    x1, y1 = poses[..., 0] + dx, poses[..., 1] + dy

    inside = m.contains(x1, y1, patch_margin(p, m))
    ok = running & inside
    new = poses.copy()
    if np.any(ok):
        new[ok] = settle_array(m, x1[ok], y1[ok], yaw1[ok], p)
    new_status = status.copy()
    new_status[running & ~inside] = _STATUS_CODES.index(Status.OUT_OF_BOUNDS)

    moved = np.hypot(new[..., 0] - poses[..., 0], new[..., 1] - poses[..., 1]) > 1e-9
    new_stall = np.where(ok & ~moved & (np.abs(thr) > 0), stall + 1, 0)
    new_stall = np.where(running, new_stall, stall)

    rolled = ok & ((np.abs(new[..., 3]) > p.rollover_limit) | (np.abs(new[..., 4]) > p.rollover_limit))
    stuck = ok & ~rolled & (new_stall >= p.stuck_steps)
    new_status[rolled] = _STATUS_CODES.index(Status.ROLLED_OVER)
    new_status[stuck] = _STATUS_CODES.index(Status.STUCK)
    if goal is not None:
        d = np.hypot(new[..., 0] - goal[0], new[..., 1] - goal[1])
        reached = ok & ~rolled & ~stuck & (d < p.goal_radius)
        new_status[reached] = _STATUS_CODES.index(Status.AT_GOAL)
    return new, new_stall, new_status


@dataclass(frozen=True)
class SimState:
    pose: Pose6
    status: Status = Status.RUNNING
    stall_count: int = 0
    goal: tuple | None = None

    @property
    def terminal(self) -> bool:
        return self.status != Status.RUNNING


def status_code(s: Status) -> int:
    return _STATUS_CODES.index(Status(s))


def status_from_code(c: int) -> Status:
    return _STATUS_CODES[int(c)]


def step_dynamics(s: SimState, a: Action, m: ElevationMap, p: SimParams = SimParams()) -> SimState:
    if s.terminal:
        return s
    poses, stall, status = step_batch(s.pose.as_array()[None], np.array([s.stall_count]),
                                      np.array([0]), a.as_array()[None], m, p, s.goal)
    return SimState(Pose6.from_array(poses[0]), status_from_code(status[0]), int(stall[0]), s.goal)


def patch_offsets(size: int, extent: float) -> np.ndarray:
    return (np.arange(size) + 0.5) * (extent / size) - extent / 2.0


def extract_patch(m: ElevationMap, pose, size: int = 16, extent: float = 1.0,
                  clearance: float = 0.1) -> np.ndarray:
    """Heading-aligned crop; rows run along body x, columns along body y.

    Values are elevation minus the contact-plane height under the vehicle,
    so flat ground reads zero.
    """
    pa = pose.as_array() if isinstance(pose, Pose6) else np.asarray(pose, dtype=np.float64)
    o = patch_offsets(size, extent)
    u, w = o[:, None], o[None, :]
    c, s = math.cos(pa[5]), math.sin(pa[5])
    xs = pa[0] + u * c - w * s
    ys = pa[1] + u * s + w * c
    return m.sample(xs, ys) - (pa[2] - clearance)


@dataclass(frozen=True)
class DemoParams:
    k_p: float = 1.5
    cruise: float = 0.7
    slope_ref: float = 0.9


def demo_policy_step(s: SimState, goal, m: ElevationMap, rng: np.random.Generator,
                     noise_scale: float, demo: DemoParams = DemoParams()) -> Action:
    """Pure-pursuit steering toward ``goal`` with slope-aware cruise throttle."""
    pa = s.pose
    err = wrap_angle(math.atan2(goal[1] - pa.y, goal[0] - pa.x) - pa.yaw)
    steer = float(np.clip(demo.k_p * err, -1.0, 1.0))
    slope = max(abs(pa.roll), abs(pa.pitch))
    thr = demo.cruise * (1.0 - 0.5 * min(1.0, slope / demo.slope_ref))
    if noise_scale > 0:
        nt, ns = rng.normal(0.0, noise_scale, 2)
        thr, steer = thr + nt, steer + ns
    return Action(thr, steer)


@dataclass
class Episode:
    dt: float
    poses: np.ndarray      # (n, 6)
    actions: np.ndarray    # (n, 2); the last row is the null action
    patches: np.ndarray    # (n, P, P)
    map_seed: int | None = None
    status: Status = Status.RUNNING

    @property
    def n_records(self) -> int:
        return self.poses.shape[0]

    @property
    def steps(self) -> int:
        return self.n_records - 1

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]

    @property
    def records(self) -> list:
        return [(Pose6.from_array(p), Action(*a), i) for p, a, i in zip(self.poses, self.actions, self.patches)]


Policy = Callable[[SimState, tuple], Action]


def rollout_episode(m: ElevationMap, start, goals: Sequence, p: SimParams, policy: Policy,
                    max_steps: int) -> Episode:
    """Run ``policy`` until a terminal status or ``max_steps``.

    Reaching an intermediate goal advances to the next one.  Failed episodes
    are kept.
    """
    goals = list(goals)
    state = start if isinstance(start, SimState) else SimState(start)
    gi = 0
    if goals:
        state = replace(state, goal=tuple(goals[0]))
    poses, actions, patches = [], [], []

    def record(a: Action):
        poses.append(state.pose.as_array())
        actions.append(a.as_array())
        patches.append(extract_patch(m, state.pose, p.patch_size, p.patch_extent, p.clearance))

    for _ in range(max_steps):
        if state.terminal:
            break
        a = policy(state, state.goal)
        record(a)
        state = step_dynamics(state, a, m, p)
        if state.status == Status.AT_GOAL and gi + 1 < len(goals):
            gi += 1
            state = replace(state, status=Status.RUNNING, goal=tuple(goals[gi]))
    record(Action(0.0, 0.0))
    return Episode(p.dt, np.array(poses), np.array(actions), np.array(patches), m.seed, state.status)


@dataclass(frozen=True)
class CorpusSpec:
    total_steps: int = 10800
    seed: int = 0
    episode_max_steps: int = 150
    flat_fraction: float = 0.2
    noise_scale: float = 0.35
    cruise_range: tuple = (0.4, 1.0)
    n_goals: int = 4
    terrain: TerrainParams = field(default_factory=TerrainParams)
    world: WorldSpec = field(default_factory=WorldSpec)


def episode_world(seed: int, flat: bool, spec: CorpusSpec) -> ElevationMap:
    return flat_map(spec.world, seed) if flat else generate_terrain(seed, spec.terrain, spec.world)


def generate_corpus(spec: CorpusSpec, p: SimParams = SimParams()) -> list:
    """Demonstration episodes on fresh worlds until ``total_steps`` transitions exist.

    Returns ``(episode, world_seed, flat)`` triples.
    """
    out, total, k = [], 0, 0
    rng = np.random.default_rng(spec.seed)
    lo = 0.5
    while total < spec.total_steps:
        world_seed = spec.seed * 100_000 + k
        k += 1
        flat = bool(rng.random() < spec.flat_fraction)
        m = episode_world(world_seed, flat, spec)
        w = spec.world
        start_xy = rng.uniform([lo, lo], [w.length - lo, w.width - lo])
        yaw = rng.uniform(-math.pi, math.pi)
        goals = [tuple(g) for g in rng.uniform([lo, lo], [w.length - lo, w.width - lo], (spec.n_goals, 2))]
        demo = DemoParams(cruise=float(rng.uniform(*spec.cruise_range)))
        prng = np.random.default_rng(rng.integers(2**63))

        def policy(s, g, m=m, demo=demo, prng=prng):
            return demo_policy_step(s, g, m, prng, spec.noise_scale, demo)

        start = settle(m, start_xy[0], start_xy[1], yaw, p)
        ep = rollout_episode(m, start, goals, p, policy, min(spec.episode_max_steps, spec.total_steps - total))
        total += ep.steps
        out.append((ep, world_seed, flat))
    return out
