"""Command-line entry point: gen-data, train, eval, run, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path


from . import io, plots
from .config import ConfigError, RunConfig, config_hash, from_dict, load_config, save_config
from .models import MODEL_KINDS, Mode
from .planning import (METRIC_FIELDS, BCController, IKDController, MPPIController, RandomController, TrialSpec,
                       closed_loop_eval)
from .terrainsim import generate_corpus
from .training import (ABLATION_FIELDS, LOG_FIELDS, PROBE_FIELDS, REPORT_FIELDS, ProbeConfig, TrainingAborted,
                       ablation_runner, evaluate_offline, grid_cells, sequence_order_probe, train, window_dataset)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise RuntimeError(f"output directory {out} is not writable: {err}") from err
    return out


def _datasets(cfg: RunConfig, data_dir, horizon=None):
    if not (Path(data_dir) / "manifest.json").exists():
        raise UsageError(f"no manifest.json in {data_dir}; run gen-data first")
    eps = io.load_corpus(data_dir)
    if len(eps) < 2:
        raise RuntimeError("need at least two episodes")
    h = cfg.model.horizon if horizon is None else horizon
    d = cfg.data
    return eps, window_dataset(eps, cfg.model.history, h, d.stride, d.val_fraction, d.split_seed)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.hours is not None:
        cfg = replace(cfg, data=replace(cfg.data, hours=args.hours))
    if args.seed is not None:
        cfg = replace(cfg, data=replace(cfg.data, seed=args.seed))
    out = _prepare_out(args.out)
    (out / "episodes").mkdir(exist_ok=True)
    corpus = generate_corpus(cfg.data.corpus_spec(cfg.sim.dt), cfg.sim)
    entries = []
    for k, (ep, seed, flat) in enumerate(corpus):
        name = f"episodes/episode_{k:05d}.jsonl"
        io.write_episode(out / name, ep)
        entries.append({"file": name, "steps": ep.steps, "seed": seed})
    man = io.write_manifest(out / "manifest.json", entries)
    save_config(out / "config.json", cfg)
    print(f"wrote {len(entries)} episodes, {man['total_steps']} steps to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.kind:
        cfg = replace(cfg, kind=args.kind)
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    out = _prepare_out(args.out)
    ck_path, snap = out / "checkpoint.zip", out / "config.json"
    init = None
    if args.resume:
        if not snap.exists() or not ck_path.exists():
            raise UsageError(f"--resume needs an existing run in {out}")
        old = json.loads(snap.read_text())
        if config_hash(old) != cfg.hash():
            raise UsageError("--resume rejected: configuration differs from the snapshot in the output directory")
        init = io.load_checkpoint(ck_path).tensors
    _, (tr, va) = _datasets(cfg, args.data)
    save_config(snap, cfg)
    rows = []
    try:
        res = train(cfg.kind, tr, va, cfg.model, cfg.train, init_state=init,
                    on_epoch=lambda r: (rows.append(r), print(_fmt_row(r), flush=True)))
    except TrainingAborted as err:
        io.write_csv(out / "train_log.csv", rows, LOG_FIELDS)
        print(f"training aborted: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    io.write_csv(out / "train_log.csv", res.log, LOG_FIELDS)
    io.save_checkpoint(ck_path, io.checkpoint_from_model(res.model, res.stats, cfg.to_dict(),
                                                         {"best_epoch": res.best_epoch, "best_val": res.best_val}))
    plots.plot_training_log(res.log, out / "train_log.png", cfg.kind)
    print(f"best epoch {res.best_epoch} (val {res.best_val:.4g}); checkpoint {ck_path}")
    return EXIT_OK


def _fmt_row(r) -> str:
    return " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items())


def _load_model(path):
    ck = io.load_checkpoint(path)
    model, stats = io.model_from_checkpoint(ck)
    cfg = from_dict(RunConfig, ck.run_config) if ck.run_config else RunConfig(kind=ck.kind, model=model.cfg)
    return model, stats, cfg


def cmd_eval(args) -> int:
    model, stats, cfg = _load_model(args.checkpoint)
    tau = args.tau or model.cfg.horizon
    if tau > model.cfg.horizon:
        raise UsageError(f"--tau {tau} exceeds the trained horizon {model.cfg.horizon}; re-train to change it")
    _, (tr, va) = _datasets(cfg, args.data)
    ds = {"val": va, "train": tr}[args.split]
    rep = evaluate_offline(model, ds, stats, Mode(args.mode), tau)
    row = rep.row()
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.mode}_{args.split}.csv")
    io.write_csv(out, [row], REPORT_FIELDS)
    print(_fmt_row(row))
    return EXIT_OK


def cmd_run(args) -> int:
    if args.oracle or args.random:
        model = stats = None
        cfg = _config(args)
    else:
        if not args.checkpoint:
            raise UsageError("run needs --checkpoint unless --oracle or --random is given")
        model, stats, cfg = _load_model(args.checkpoint)
        if args.config:
            cfg = replace(_config(args), kind=cfg.kind, model=cfg.model)
        if args.dtype:
            model.astype(args.dtype)
    ev = cfg.eval
    n = args.n_trials if args.n_trials is not None else ev.n_trials
    first = args.first_world if args.first_world is not None else ev.first_world
    spec = TrialSpec(cfg.data.world, cfg.sim, replace(cfg.data.terrain, h_max=ev.h_max),
                     args.flat or ev.flat, ev.max_steps)
    cost = cfg.cost if args.samples is None else replace(cfg.cost, n_samples=args.samples)
    task = args.task

    def make(world):
        if args.random:
            return RandomController(ev.planner_seed)
        if task == "FKD":
            return MPPIController(model, stats, cost, ev.planner_seed, world, cfg.sim, ev.mppi_iterations)
        if args.oracle:
            raise UsageError("--oracle only applies to the FKD task")
        if task == "IKD":
            return IKDController(model, stats, world, cfg.sim)
        return BCController(model, stats)

    out = _prepare_out(args.out)
    save_config(out / "config.json", cfg)
    metrics, summary, traces = closed_loop_eval(task, make, n, spec, first)
    (out / "traces").mkdir(exist_ok=True)
    rows = []
    for i, (m, tr) in enumerate(zip(metrics, traces)):
        io.write_episode(out / "traces" / f"trial_{i:03d}.jsonl", tr)
        rows.append(dict(m.row(), trial=i))
    rows.append({"trial": "summary", "success": summary["successes"], "traversal_time": summary["time_mean"],
                 "mean_abs_roll": summary["mean_abs_roll"], "mean_abs_pitch": summary["mean_abs_pitch"],
                 "steps": summary["n_trials"]})
    io.write_csv(out / "metrics.csv", rows, METRIC_FIELDS)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    plots.plot_traces(traces, metrics, out / "trajectories.png", spec.world.length, spec.world.width)
    print(f"{task}: {summary['successes']}/{summary['n_trials']} successful")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ab = cfg.ablation
    studies = args.study or list(ab.studies)
    seeds = args.seeds or list(ab.seeds)
    tcfg = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    grid = grid_cells([s for s in studies if s != "probe"])
    if args.dry_run:
        for study, cell in grid:
            for s in seeds:
                print(f"{study} {json.dumps(cell, sort_keys=True)} seed={s}")
        if "probe" in studies:
            for v in ("unified", "separate"):
                for s in seeds:
                    print(f"probe {{\"variant\": \"{v}\"}} seed={s}")
        return EXIT_OK
    if not (Path(args.data) / "manifest.json").exists():
        raise UsageError(f"no manifest.json in {args.data}; run gen-data first")
    out = _prepare_out(args.out)
    save_config(out / "config.json", cfg)
    eps = io.load_corpus(args.data)
    d = cfg.data
    for study in studies:
        if study == "probe":
            tr, va = window_dataset(eps, cfg.model.history, 0, d.stride, d.val_fraction, d.split_seed)
            pcfg = ProbeConfig(epochs=ab.probe_epochs if args.epochs is None else args.epochs,
                               batch=tcfg.batch, lr=tcfg.lr, weight_decay=tcfg.weight_decay,
                               max_examples=ab.probe_max_examples, dtype=tcfg.dtype)
            rows = []
            for v in ("unified", "separate"):
                for s in seeds:
                    rows += sequence_order_probe(v, tr, va, cfg.model, pcfg, s)
            io.write_csv(out / "probe.csv", rows, PROBE_FIELDS)
            plots.plot_probe(rows, out / "probe.png")
            continue
        cells = [c for c in grid if c[0] == study]
        rows = ablation_runner(cells, seeds, eps, cfg.model, tcfg, val_fraction=d.val_fraction, stride=d.stride,
                               split_seed=d.split_seed, on_row=lambda r: print(_fmt_row(
                                   {k: r[k] for k in ABLATION_FIELDS if k in r}), flush=True))
        io.write_csv(out / f"ablation_{study}.csv", rows, ABLATION_FIELDS)
        label = {"pe": "pe_kind", "norm": "final_norm", "patch_head": "patch_head"}.get(study, "kind")
        plots.plot_ablation(rows, out / f"ablation_{study}.png", label)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kinoformer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate demonstration episodes")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--hours", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--kind", choices=sorted(MODEL_KINDS))
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="offline error rates on held-out windows")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=["FKD", "IKD", "BC"], default="FKD")
    e.add_argument("--tau", type=int)
    e.add_argument("--split", choices=["val", "train"], default="val")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run", help="closed-loop trials on held-out worlds")
    r.add_argument("--checkpoint")
    r.add_argument("--config")
    r.add_argument("--task", choices=["FKD", "IKD", "BC"], default="FKD")
    r.add_argument("--n-trials", type=int)
    r.add_argument("--first-world", type=int)
    r.add_argument("--samples", type=int, help="MPPI samples per update")
    r.add_argument("--flat", action="store_true")
    r.add_argument("--oracle", action="store_true", help="use the true dynamics as the model")
    r.add_argument("--random", action="store_true", help="random-action controller")
    r.add_argument("--dtype", choices=["float32", "float64"])
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="ablation studies and the sequence-order probe")
    a.add_argument("--config")
    a.add_argument("--data")
    a.add_argument("--out")
    a.add_argument("--study", action="append", choices=["pe", "norm", "horizon", "patch_head", "models", "probe"])
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--epochs", type=int)
    a.add_argument("--dry-run", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "ablate" and not args.dry_run and not (args.data and args.out):
        print("kinoformer ablate: error: --data and --out are required unless --dry-run", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as err:
        print(f"kinoformer {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # any other failure is a runtime failure
        print(f"kinoformer {args.command}: failed: {type(err).__name__}: {err}", file=sys.stderr)
        if os.environ.get("KINOFORMER_DEBUG"):
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
