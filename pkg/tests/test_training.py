import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinoformer import adcore as ad
from kinoformer.geometry import Pose6, PoseDelta, compose_pose
from kinoformer.models import Mode, ModelConfig, build_model
from kinoformer.terrainsim import Episode
from kinoformer.training import (AdamState, NormalizationStats, ShortEpisodeWarning, TrainConfig,
                                 TrainingAborted, WindowDataset, ablation_runner, adamw_step, curriculum_mode,
                                 error_rates, evaluate_offline, fit_normalization, grid_cells, sequence_order_probe,
                                 split_episodes, train, window_dataset)
from kinoformer.training.loop import _vf_loss
from kinoformer.training.studies import balanced_labels, random_derangement_order, shuffle_windows

TINY = ModelConfig(d_model=8, enc_layers=1, dec_layers=1, heads=2, history=2, horizon=2, patch_size=4)


def _episode(n_transitions, seed=0, patch=4):
    rng = np.random.default_rng(seed)
    n = n_transitions + 1
    poses = np.cumsum(rng.normal(0, 0.1, (n, 6)), axis=0)
    actions = rng.uniform(-1, 1, (n, 2))
    actions[-1] = 0.0
    return Episode(1 / 3, poses, actions, rng.normal(size=(n, patch, patch)))


def _corpus(n_eps=6, length=12):
    return [_episode(length, s) for s in range(n_eps)]


# ---------------------------------------------------------------- windowing

def test_window_counts():
    assert len(WindowDataset([_episode(5)], 3, 2)) == 1
    assert len(WindowDataset([_episode(7)], 3, 2)) == 3
    assert len(WindowDataset([_episode(7)], 3, 2, stride=2)) == 2
    with pytest.raises(ValueError):
        WindowDataset([_episode(7)], 3, 2, stride=0)


def test_short_episodes_skipped_with_warning():
    with pytest.warns(ShortEpisodeWarning):
        ds = WindowDataset([_episode(4), _episode(9), _episode(3)], 3, 2)
    assert ds.skipped == 2 and len(ds) == 5


def test_windows_are_contiguous_and_in_order():
    eps = [_episode(9, 0), _episode(8, 1)]
    ds = WindowDataset(eps, 3, 2)
    b = ds.all(NormalizationStats.identity())
    for k, (eid, start) in enumerate(ds.provenance):
        ep = eps[eid]
        assert np.array_equal(b.poses_all[k], ep.poses[start:start + 6])
        assert np.array_equal(b.actions_raw[k], ep.actions[start:start + 5])
        assert np.array_equal(b.patches_all[k], ep.patches[start:start + 6].reshape(6, -1))
    assert b.cur_pose.shape == (len(ds), 6) and b.fut_poses.shape == (len(ds), 2, 6)
    assert np.array_equal(b.next_patches, b.patches_all[:, 4:])


def test_split_has_no_episode_leakage():
    tr, va = window_dataset(_corpus(10), 2, 2, val_fraction=0.3)
    assert set(tr.episode_ids).isdisjoint(va.episode_ids)
    assert len(set(tr.episode_ids) | set(va.episode_ids)) == 10
    assert split_episodes(10, 0.3, 0) == split_episodes(10, 0.3, 0)


# ---------------------------------------------------------------- normalisation

def test_two_sample_channel_and_constant_channel():
    p = np.zeros((3, 6))
    a = np.array([[0.0, 5.0], [2.0, 5.0], [0.0, 0.0]])
    ep = Episode(1 / 3, p, a, np.zeros((3, 2, 2)))
    st_ = fit_normalization(WindowDataset([ep], 1, 1))
    assert st_.action_mean[0] == 1.0 and st_.action_std[0] == 1.0
    assert st_.action_std[1] == 1e-6
    assert np.all(st_.norm_actions(a[:2])[:, 1] == 0.0)
    assert np.all(st_.delta_std == 1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_normalise_roundtrip(seed):
    ds = WindowDataset([_episode(10, seed)], 2, 2)
    s = fit_normalization(ds)
    d = np.random.default_rng(seed).normal(size=(4, 6))
    assert np.max(np.abs(s.denorm_deltas(s.norm_deltas(d)) - d)) < 1e-9
    back = NormalizationStats.from_dict(s.to_dict())
    assert np.array_equal(back.delta_std, s.delta_std) and back.patch_mean == s.patch_mean


def test_stats_use_training_transitions_only():
    ds = WindowDataset([_episode(6, 1)], 2, 2)
    a = _episode(6, 1).actions[:-1]
    s = fit_normalization(ds)
    assert np.allclose(s.action_mean, a.mean(0)) and np.allclose(s.action_std, a.std(0))


# ---------------------------------------------------------------- curriculum and optimiser

def test_curriculum_examples():
    rng = np.random.default_rng(0)
    cfg = TrainConfig(warmup_epochs=5)
    assert curriculum_mode(0, rng, cfg) == Mode.WARMUP
    assert curriculum_mode(4, rng, cfg) == Mode.WARMUP
    draws = [curriculum_mode(5, rng, cfg) for _ in range(10_000)]
    frac = sum(d == Mode.FKD for d in draws) / len(draws)
    assert 0.48 <= frac <= 0.52
    assert set(draws) == {Mode.FKD, Mode.IKD}
    one = TrainConfig(mask_split=1.0, warmup_epochs=0)
    assert all(curriculum_mode(3, rng, one) == Mode.FKD for _ in range(200))
    with pytest.raises(ValueError):
        TrainConfig(mask_split=1.5)


def test_adamw_examples():
    p = {"w": np.array([0.7, -0.2])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), lr=1e-3, weight_decay=0.0)
    assert np.array_equal(p["w"], [0.7, -0.2])
    p = {"w": np.array([0.0])}
    adamw_step(p, {"w": np.array([1.0])}, AdamState(), lr=1e-3, weight_decay=0.0)
    assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert p["w"][0] == pytest.approx(-9.99999e-4, rel=1e-6)
    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([0.0])}, AdamState(), lr=1e-3, weight_decay=0.08)
    assert p["w"][0] == pytest.approx(1 - 8e-5, abs=1e-15)


def test_adamw_rejects_non_finite_gradient_by_name():
    with pytest.raises(ad.NonFiniteError, match="enc0.q"):
        adamw_step({"enc0.q": np.zeros(2)}, {"enc0.q": np.array([np.nan, 0.0])}, AdamState())


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-4, 1e-1))
def test_adamw_first_step_is_sign_step(g, lr):
    p = {"w": np.array([0.0])}
    adamw_step(p, {"w": np.array([g])}, AdamState(), lr=lr, weight_decay=0.0)
    if abs(g) > 1e-3:
        assert p["w"][0] == pytest.approx(-lr * math.copysign(1.0, g), rel=1e-4)


# ---------------------------------------------------------------- metrics

class _MeanPredictor:
    """Stand-in model that always predicts the normalised mean delta (zeros)."""

    kind = "end2end"

    def __init__(self, cfg):
        self.cfg = cfg

    def forward(self, ha, hd, hp, fa, ctx=None):
        return {"deltas": ad.Tensor(np.zeros((ha.shape[0], self.cfg.horizon, 6)))}


def test_error_rate_of_mean_predictor_matches_brute_force():
    eps = _corpus(5, 10)
    ds = WindowDataset(eps, 2, 2)
    b = ds.all(NormalizationStats.identity())
    mu = b.fut_deltas.reshape(-1, 6).mean(0)
    s = NormalizationStats(np.zeros(2), np.ones(2), mu, np.ones(6), 0.0, 1.0)
    rep = evaluate_offline(_MeanPredictor(TINY), ds, s, Mode.FKD)
    # brute force: compose the mean delta step by step with scalar pose objects
    errs, disps = [], []
    for k in range(len(ds)):
        pose = Pose6.from_array(b.cur_pose[k])
        for t in range(2):
            pose = compose_pose(pose, PoseDelta(*mu))
            truth = b.fut_poses[k, t]
            errs.append([abs(pose.x - truth[0]), abs(pose.y - truth[1]), abs(pose.z - truth[2])])
            disps.append(truth[:3] - b.cur_pose[k, :3])
    errs, disps = np.array(errs), np.array(disps)
    sigma = np.sqrt(((disps - disps.mean(0)) ** 2).mean(0))
    expect = errs.mean(0) / sigma
    assert np.allclose([rep.err_x, rep.err_y, rep.err_z], expect, rtol=1e-9)
    assert rep.err_avg == pytest.approx(expect.mean(), rel=1e-9)


def test_perfect_predictor_zero_error():
    rng = np.random.default_rng(0)
    cur = rng.normal(size=(5, 6))
    fut = rng.normal(size=(5, 3, 6))
    assert np.all(error_rates(fut, fut, cur) == 0.0)


def test_horizon_guard():
    ds = WindowDataset(_corpus(2, 10), 2, 2)
    m = build_model("vertiformer", TINY)
    with pytest.raises(ValueError, match="exceeds the trained horizon"):
        evaluate_offline(m, ds, fit_normalization(ds), Mode.FKD, tau=3)


# ---------------------------------------------------------------- training

def test_gradient_flow_and_warmup_masks():
    tr, _ = window_dataset(_corpus(4, 10), 2, 2)
    s = fit_normalization(tr)
    m = build_model("vertiformer", ModelConfig(**{**TINY.to_dict(), "pe_kind": "learnable"}))
    b = tr.batch(np.arange(8), s)
    m.params.zero_grad()
    ad.backward(ad.add(_vf_loss(m, b, Mode.FKD, m.ctx()), _vf_loss(m, b, Mode.IKD, m.ctx())))
    dead = [k for k, p in m.params.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []
    m.params.zero_grad()
    ad.backward(_vf_loss(m, b, Mode.WARMUP, m.ctx()))
    for k in ("mask.action", "mask.pose"):
        g = m.params[k].grad
        assert g is None or not np.any(g)
    assert np.any(m.params["mask.patch"].grad)


def test_zero_epochs_returns_initialisation():
    tr, va = window_dataset(_corpus(4, 10), 2, 2)
    res = train("vertiformer", tr, va, TINY, TrainConfig(epochs=0))
    init = build_model("vertiformer", TINY, 0).params.state()
    assert all(np.array_equal(init[k], v.data) for k, v in res.model.params.items())
    assert len(res.log) == 1 and res.log[0]["epoch"] == 0


@pytest.mark.parametrize("kind", ["vertiformer", "encoder", "decoder", "end2end"])
def test_training_is_deterministic(kind):
    tr, va = window_dataset(_corpus(5, 12), 2, 2)
    cfg = TrainConfig(epochs=2, batch=8, warmup_epochs=1)
    a = train(kind, tr, va, TINY, cfg)
    b = train(kind, tr, va, TINY, cfg)
    assert a.log == b.log or all(str(x) == str(y) for x, y in zip(a.log, b.log))
    assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)
    assert a.best_epoch == b.best_epoch


def test_log_rows_and_mode_mix():
    tr, va = window_dataset(_corpus(5, 12), 2, 2)
    res = train("vertiformer", tr, va, TINY, TrainConfig(epochs=3, batch=8, warmup_epochs=2))
    assert [r["epoch"] for r in res.log] == [0, 1, 2, 3]
    assert res.log[1]["mode_mix"].startswith("WARMUP:") and res.log[2]["mode_mix"].startswith("WARMUP:")
    assert "WARMUP" not in res.log[3]["mode_mix"]
    assert res.best_val == min(r["val_loss"] for r in res.log)


def test_nan_aborts_with_location(monkeypatch):
    from kinoformer.training import loop

    tr, va = window_dataset(_corpus(4, 10), 2, 2)
    calls = {"n": 0}
    real = loop._e2e_loss

    def flaky(model, b, ctx):
        calls["n"] += ctx.training
        loss = real(model, b, ctx)
        return ad.scalar_mul(loss, math.nan) if calls["n"] == 2 else loss

    monkeypatch.setattr(loop, "_e2e_loss", flaky)
    with pytest.raises(TrainingAborted, match="epoch 1, batch 1"):
        train("end2end", tr, va, TINY, TrainConfig(epochs=1, batch=8))


def test_nan_at_initialisation_aborts():
    tr, va = window_dataset(_corpus(4, 10), 2, 2)
    bad = {k: v.copy() for k, v in build_model("end2end", TINY).params.state().items()}
    bad["out.b"][0] = np.nan
    with pytest.raises(TrainingAborted, match="epoch 0"):
        train("end2end", tr, va, TINY, TrainConfig(epochs=1, batch=8), init_state=bad)


# ---------------------------------------------------------------- studies

def test_probe_labels_and_shuffles():
    rng = np.random.default_rng(0)
    for n in (1, 2, 7, 64):
        y = balanced_labels(n, rng)
        assert y.sum() == n // 2
    for _ in range(50):
        perm = random_derangement_order(4, rng)
        assert sorted(perm) == [0, 1, 2, 3] and np.any(perm != np.arange(4))
    a = np.arange(12.0).reshape(2, 6, 1)
    labels = np.array([0.0, 1.0])
    a2, p2, i2 = shuffle_windows(a, a * 10, a * 100, labels, rng)
    assert np.array_equal(a2[0], a[0]) and not np.array_equal(a2[1], a[1])
    assert np.array_equal(p2[1], a2[1] * 10) and np.array_equal(i2[1], a2[1] * 100)


@pytest.mark.parametrize("variant", ["unified", "separate"])
def test_probe_runs_and_starts_near_chance(variant):
    from kinoformer.training import ProbeConfig

    tr, va = window_dataset(_corpus(6, 14), 2, 0)
    rows = sequence_order_probe(variant, tr, va, TINY, ProbeConfig(epochs=1, batch=16, dtype="float64"), 0)
    assert [r["epoch"] for r in rows] == [0, 1]
    assert all(0.0 <= r["val_acc"] <= 1.0 for r in rows)


def test_ablation_grid_rows():
    assert len(grid_cells(["pe"])) == 2
    with pytest.raises(ValueError):
        grid_cells(["nope"])
    eps = _corpus(5, 12)
    base = TINY
    rows = ablation_runner(grid_cells(["pe"]), [0, 1, 2], eps, base, TrainConfig(epochs=1, batch=16, warmup_epochs=0))
    assert len(rows) == 6
    assert all(r["status"] == "ok" for r in rows)
    again = ablation_runner(grid_cells(["pe"]), [0], eps, base, TrainConfig(epochs=1, batch=16, warmup_epochs=0))
    assert again[0]["err_avg"] == rows[0]["err_avg"]


def test_ablation_records_failures_and_continues():
    rows = ablation_runner([("models", {"kind": "unknown"}), ("models", {"kind": "end2end"})], [0],
                           _corpus(5, 12), TINY, TrainConfig(epochs=1, batch=16))
    assert rows[0]["status"].startswith("failed") and rows[1]["status"] == "ok"


def test_short_episodes_warning_can_be_silenced():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        WindowDataset([_episode(9)], 2, 2)
