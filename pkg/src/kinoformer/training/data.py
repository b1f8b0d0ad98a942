"""Windowing episodes into fixed-length examples, and normalisation statistics.

A window of ``T + tau`` transitions needs ``T + tau + 1`` records: transition
``k`` pairs action ``a_k`` and patch ``i_k`` with the body-frame delta from pose
``k`` to pose ``k + 1``.  Episode "length" below always means its number of
transitions.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..geometry import relative_pose_array
from ..terrainsim import Episode

STD_FLOOR = 1e-6


class ShortEpisodeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class NormalizationStats:
    action_mean: np.ndarray
    action_std: np.ndarray
    delta_mean: np.ndarray
    delta_std: np.ndarray
    patch_mean: float
    patch_std: float

    def norm_actions(self, a):
        return (np.asarray(a) - self.action_mean) / self.action_std

    def norm_deltas(self, d):
        return (np.asarray(d) - self.delta_mean) / self.delta_std

    def denorm_deltas(self, d):
        return np.asarray(d) * self.delta_std + self.delta_mean

    def norm_patches(self, p):
        return (np.asarray(p) - self.patch_mean) / self.patch_std

    def to_dict(self) -> dict:
        return {"action_mean": self.action_mean.tolist(), "action_std": self.action_std.tolist(),
                "delta_mean": self.delta_mean.tolist(), "delta_std": self.delta_std.tolist(),
                "patch_mean": float(self.patch_mean), "patch_std": float(self.patch_std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["action_mean"]), np.array(d["action_std"]), np.array(d["delta_mean"]),
                   np.array(d["delta_std"]), float(d["patch_mean"]), float(d["patch_std"]))

    @classmethod
    def identity(cls, patch_size: int = 16) -> "NormalizationStats":
        return cls(np.zeros(2), np.ones(2), np.zeros(6), np.ones(6), 0.0, 1.0)


def _mean_std(x: np.ndarray, axis):
    return x.mean(axis=axis), np.maximum(x.std(axis=axis), STD_FLOOR)


def episode_transitions(ep: Episode):
    """(actions (L, 2), deltas (L, 6), patches (L + 1, P*P), poses (L + 1, 6)) for an episode."""
    poses = np.asarray(ep.poses, dtype=np.float64)
    deltas = relative_pose_array(poses[:-1], poses[1:])
    patches = ep.patches.reshape(ep.n_records, -1).astype(np.float64)
    return ep.actions[:-1].astype(np.float64), deltas, patches, poses


@dataclass
class Batch:
    """A gathered, normalised batch.  ``*_all`` arrays span the whole window."""

    history: int
    horizon: int
    actions_all: np.ndarray     # (B, T+tau, 2) normalised
    actions_raw: np.ndarray     # (B, T+tau, 2)
    deltas_all: np.ndarray      # (B, T+tau, 6) normalised
    patches_all: np.ndarray     # (B, T+tau+1, P*P) normalised
    poses_all: np.ndarray       # (B, T+tau+1, 6) raw world poses
    provenance: np.ndarray      # (B, 2) episode id, start

    def __len__(self) -> int:
        return self.actions_all.shape[0]

    @property
    def hist_actions(self):
        return self.actions_all[:, :self.history]

    @property
    def hist_deltas(self):
        return self.deltas_all[:, :self.history]

    @property
    def hist_patches(self):
        return self.patches_all[:, :self.history]

    @property
    def fut_actions(self):
        return self.actions_all[:, self.history:]

    @property
    def fut_actions_raw(self):
        return self.actions_raw[:, self.history:]

    @property
    def fut_deltas(self):
        return self.deltas_all[:, self.history:]

    @property
    def cur_patch(self):
        return self.patches_all[:, self.history]

    @property
    def next_patches(self):
        """Patch observed after each future step, the patch-head target."""
        return self.patches_all[:, self.history + 1:]

    @property
    def cur_pose(self):
        return self.poses_all[:, self.history]

    @property
    def fut_poses(self):
        return self.poses_all[:, self.history + 1:]


class WindowDataset:
    """All contiguous windows of ``history + horizon`` transitions over a set of episodes."""

    def __init__(self, episodes, history: int, horizon: int, stride: int = 1, episode_ids=None):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.history, self.horizon, self.stride = history, horizon, stride
        n = history + horizon
        ids = list(range(len(episodes))) if episode_ids is None else list(episode_ids)
        acts, dels, pats, poses, starts, prov = [], [], [], [], [], []
        offset, self.skipped = 0, 0
        for eid, ep in zip(ids, episodes):
            a, d, p, q = episode_transitions(ep)
            length = a.shape[0]
            if length < n:
                self.skipped += 1
                continue
            # pad per-transition arrays so every record row has one entry
            acts.append(np.vstack([a, np.zeros((1, 2))]))
            dels.append(np.vstack([d, np.zeros((1, 6))]))
            pats.append(p)
            poses.append(q)
            s = np.arange(0, length - n + 1, stride)
            starts.append(offset + s)
            prov.append(np.stack([np.full_like(s, eid), s], 1))
            offset += length + 1
        if self.skipped:
            warnings.warn(f"skipped {self.skipped} episode(s) shorter than {n} transitions", ShortEpisodeWarning)
        self.episode_ids = sorted({int(e) for e in np.concatenate(prov)[:, 0]}) if prov else []
        self.actions = np.vstack(acts) if acts else np.zeros((0, 2))
        self.deltas = np.vstack(dels) if dels else np.zeros((0, 6))
        self.patches = np.vstack(pats) if pats else np.zeros((0, 1))
        self.poses = np.vstack(poses) if poses else np.zeros((0, 6))
        self.starts = np.concatenate(starts) if starts else np.zeros(0, int)
        self.provenance = np.concatenate(prov) if prov else np.zeros((0, 2), int)
        # rows of records that are the start of a transition (the last record of an episode is not)
        self.transition_rows = np.unique((self.starts[:, None] + np.arange(n)).ravel())

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[1]

    def batch(self, idx, stats: NormalizationStats) -> Batch:
        idx = np.asarray(idx)
        g = self.starts[idx]
        n = self.history + self.horizon
        rows = g[:, None] + np.arange(n)
        rows1 = g[:, None] + np.arange(n + 1)
        a = self.actions[rows]
        return Batch(self.history, self.horizon, stats.norm_actions(a), a,
                     stats.norm_deltas(self.deltas[rows]), stats.norm_patches(self.patches[rows1]),
                     self.poses[rows1], self.provenance[idx])

    def all(self, stats: NormalizationStats) -> Batch:
        return self.batch(np.arange(len(self)), stats)


def split_episodes(n_episodes: int, val_fraction: float = 0.2, seed: int = 0):
    """Deterministic episode-level split; returns (train ids, val ids), each sorted."""
    if n_episodes < 2:
        raise ValueError("need at least two episodes to split")
    perm = np.random.default_rng(seed).permutation(n_episodes)
    n_val = min(max(1, int(round(val_fraction * n_episodes))), n_episodes - 1)
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def window_dataset(episodes, history: int, horizon: int, stride: int = 1, val_fraction: float = 0.2,
                   seed: int = 0):
    """Window a corpus and split it by episode into (train, val) datasets."""
    tr, va = split_episodes(len(episodes), val_fraction, seed)
    train = WindowDataset([episodes[i] for i in tr], history, horizon, stride, tr)
    val = WindowDataset([episodes[i] for i in va], history, horizon, stride, va)
    return train, val


def fit_normalization(ds: WindowDataset) -> NormalizationStats:
    """Per-channel statistics over the transitions covered by training windows."""
    if len(ds) == 0:
        raise ValueError("cannot fit normalisation on an empty dataset")
    rows = ds.transition_rows
    am, asd = _mean_std(ds.actions[rows], 0)
    dm, dsd = _mean_std(ds.deltas[rows], 0)
    pm, psd = _mean_std(ds.patches[rows], None)
    return NormalizationStats(am, asd, dm, dsd, float(pm), float(psd))
