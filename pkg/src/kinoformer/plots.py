"""Figures written next to the CSV outputs (headless Agg backend)."""
from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_training_log(rows, path, title: str = ""):
    ep = [int(r["epoch"]) for r in rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.plot(ep, [_num(r["train_loss"]) for r in rows], label="train")
    a.plot(ep, [_num(r["val_loss"]) for r in rows], label="val")
    a.plot(ep, [_num(r["val_fkd"]) for r in rows], label="val FKD (pose MSE)", ls="--")
    a.set_xlabel("epoch")
    a.set_ylabel("loss")
    a.legend()
    for k in ("err_x", "err_y", "err_z", "err_avg"):
        b.plot(ep, [_num(r[k]) for r in rows], label=k)
    b.set_xlabel("epoch")
    b.set_ylabel("error rate")
    b.legend()
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_traces(traces, metrics, path, length: float = 4.0, width: float = 2.5):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.add_patch(plt.Rectangle((0, 0), length, width, fill=False, lw=1.0, color="0.4"))
    for tr, m in zip(traces, metrics):
        ax.plot(tr.poses[:, 0], tr.poses[:, 1], color="tab:green" if m.success else "tab:red", lw=1.0)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ok = sum(m.success for m in metrics)
    ax.set_title(f"{ok}/{len(metrics)} successful")
    return _save(fig, path)


def plot_ablation(rows, path, label_key: str, metric: str = "err_avg"):
    groups = defaultdict(list)
    for r in rows:
        groups[str(r[label_key])].append(_num(r.get(metric)))
    labels = list(groups)
    means = [np.nanmean(groups[k]) if groups[k] else math.nan for k in labels]
    stds = [np.nanstd(groups[k]) if groups[k] else 0.0 for k in labels]
    fig, ax = plt.subplots(figsize=(1.6 * len(labels) + 2, 3.5))
    ax.bar(labels, means, yerr=stds, capsize=4, color="tab:blue")
    ax.set_ylabel(metric)
    ax.set_xlabel(label_key)
    return _save(fig, path)


def plot_probe(rows, path):
    curves = defaultdict(lambda: defaultdict(list))
    for r in rows:
        curves[r["variant"]][int(r["epoch"])].append(_num(r["val_acc"]))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for v, by_ep in curves.items():
        ep = sorted(by_ep)
        ax.plot(ep, [np.median(by_ep[e]) for e in ep], marker="o", label=v)
    ax.axhline(0.5, color="0.5", ls=":")
    ax.set_xlabel("epoch")
    ax.set_ylabel("order accuracy (median over seeds)")
    ax.legend()
    return _save(fig, path)
