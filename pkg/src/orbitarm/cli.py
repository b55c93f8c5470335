"""Command-line entry point: ``orbitarm {train,eval,robustness,maintenance,selftest}``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure.  Outputs go under the configured output directory unless
``ORBITARM_OUTPUT_ROOT`` is set.  Worker count never changes results: every
job draws only from its own named random streams.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import dynamics as dyn
from . import eval as ev
from .config import RunConfig, load_config, parse_grid
from .errors import ConfigError
from .nn import load_agent

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def code_hash():
    """SHA-256 over the package sources and bundled data, in path order."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".yaml") and "__pycache__" not in p.parts:
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _manifest(cfg: RunConfig, model, **extra):
    m = {
        "package_version": __version__,
        "code_sha256": code_hash(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "model_version": model.version,
        "model_sha256": model.checksum,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    m.update(extra)
    return m


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _workers(n):
    return max(1, int(n if n is not None else (os.cpu_count() or 1)))


def _resolve_config(args):
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    else:
        cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
    return cfg


# ------------------------------------------------------------------ train

def cmd_train(args):
    from .trainer import SpaceRobotTask, train

    cfg = _resolve_config(args)
    tc = cfg.train
    updates = {}
    if args.buffer is not None:
        updates["buffer_size"] = args.buffer
        if args.minibatch is None and tc.minibatch > args.buffer:
            updates["minibatch"] = max(1, args.buffer // 10)
    if args.minibatch is not None:
        updates["minibatch"] = args.minibatch
    if args.prior_budget is not None:
        updates["prior_budget"] = args.prior_budget
    try:
        tc = replace(tc, **updates)
    except ConfigError as exc:
        raise ConfigError(f"train.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    cfg = replace(cfg, train=tc)
    if args.print_config:
        print(cfg.to_yaml(), end="")
        return EXIT_OK

    model = dyn.load_model(cfg.model_file)
    epochs = tc.epochs if args.epochs is None else args.epochs
    if epochs < 1:
        raise ConfigError("epochs", "must be at least 1")
    print(f"schedule: {tc.epochs} epochs = {tc.total_episodes} episodes / "
          f"{tc.episodes_per_epoch} episodes per epoch (buffer {tc.buffer_size} / horizon {tc.horizon})")
    if epochs != tc.epochs:
        print(f"running {epochs} epochs (override)")

    run_dir = Path(args.run_dir) if args.run_dir else cfg.output_root() / f"train-seed{cfg.seed}-{cfg.digest()[:10]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    _write_json(run_dir / "manifest.json", _manifest(cfg, model, command="train", epochs=epochs))

    workers = _workers(args.workers)
    task = SpaceRobotTask(model, cfg.rewards, tc.horizon, tc.prior_budget)
    train(task, replace(tc, workers=workers), out_dir=run_dir, epochs=epochs, log=print,
          eval_thresholds=tuple(cfg.eval.thresholds))
    print(f"run directory: {run_dir}")
    return EXIT_OK


# ------------------------------------------------------------- controllers

def find_checkpoints(path):
    """Map agent id to checkpoint file for the latest epoch under ``path``.

    ``path`` may be a run directory, its ``checkpoints`` directory, or one
    ``epochNNNN_<agent>.ckpt`` file (its sibling agents are picked up).
    """
    p = Path(path)
    if p.is_file():
        stem = p.name.rsplit("_", 1)[0]
        files = sorted(p.parent.glob(f"{stem}_*.ckpt"))
    else:
        d = p / "checkpoints" if (p / "checkpoints").is_dir() else p
        files = sorted(d.glob("epoch*_*.ckpt"))
        if files:
            last = files[-1].name.rsplit("_", 1)[0]
            files = [f for f in files if f.name.rsplit("_", 1)[0] == last]
    found = {f.stem.rsplit("_", 1)[1]: f for f in files}
    if set(found) != {"m", "b"}:
        raise ConfigError("checkpoint", f"no manipulator/base checkpoint pair under {path}")
    return found


def _controller(args, cfg, model):
    """Returns ``(controller, label, checkpoint files)``."""
    from .priors import ExpertPolicy

    if args.expert:
        return ExpertPolicy(model, budget=cfg.train.prior_budget), "expert", []
    if not args.checkpoint:
        raise ConfigError("checkpoint", "pass --checkpoint PATH or --expert")
    files = find_checkpoints(args.checkpoint)
    pols = {}
    for a, f in files.items():
        pol, _, header = load_agent(f)
        if header["agent"] != a:
            raise ConfigError("checkpoint", f"{f} holds agent {header['agent']!r}, expected {a!r}")
        pols[a] = pol
    return ev.PolicyController(pols), "policy", [files["m"], files["b"]]


def _thresholds(args, cfg):
    return tuple(cfg.eval.relaxed_thresholds if getattr(args, "relaxed", False) else cfg.eval.thresholds)


# ------------------------------------------------------------------- eval

def format_table(summary, label, episodes, seed, thresholds):
    lines = [f"{label}: {episodes} episodes, seed {seed}, thresholds pos/ori/att = "
             + "/".join(f"{t:g}" for t in thresholds)]
    for m in ev.METRICS:
        lines.append(f"  {m:<5} {summary[m]:10.4f}   {ev.METRIC_DEFINITIONS[m]}")
    return "\n".join(lines)


def cmd_eval(args):
    cfg = _resolve_config(args)
    model = dyn.load_model(cfg.model_file)
    ctrl, label, ckpts = _controller(args, cfg, model)
    episodes = args.episodes if args.episodes is not None else cfg.eval.episodes
    if episodes < 1:
        raise ConfigError("episodes", "must be at least 1")
    thr = _thresholds(args, cfg)
    summary, per = ev.evaluate(model, ctrl, episodes, cfg.seed, rewards=cfg.rewards, thresholds=thr,
                               workers=_workers(args.workers))
    print(format_table(summary, label, episodes, cfg.seed, thr))
    out = Path(args.out) if args.out else cfg.output_root() / f"eval-{label}-seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w") as fh:
        fh.write("metric,value,definition\n")
        for m in ev.METRICS:
            fh.write(f"{m},{summary[m]!r},\"{ev.METRIC_DEFINITIONS[m]}\"\n")
    with open(out / "episodes.csv", "w") as fh:
        fh.write("episode,success,ape,aoe,abae,failed\n")
        for i in range(episodes):
            fh.write(f"{i},{int(per['success'][i])},{per['ape'][i]!r},{per['aoe'][i]!r},"
                     f"{per['abae'][i]!r},{int(per['failed'][i])}\n")
    _write_json(out / "manifest.json", _manifest(
        cfg, model, command="eval", controller=label, episodes=episodes, thresholds=list(thr),
        checkpoints={Path(c).name: ev.file_sha256(c) for c in ckpts}))
    print(f"results: {out}")
    return EXIT_OK


# ------------------------------------------------------------- robustness

def cmd_robustness(args):
    cfg = _resolve_config(args)
    names = list(ev.SCENARIOS) if args.scenario == "all" else [args.scenario]
    for n in names:
        if n not in ev.SCENARIOS:
            raise ConfigError("scenario", f"unknown scenario {n!r}; choose from {', '.join(ev.SCENARIOS)} or all")
    grids = {n: parse_grid(args.grid if args.grid is not None else cfg.robustness.grids[n]) for n in names}
    if args.full_scale:
        episodes, seeds = 5000, list(range(5))
    else:
        episodes = args.episodes if args.episodes is not None else cfg.robustness.episodes
        seeds = ([int(s) for s in args.seeds.split(",") if s.strip()] if args.seeds
                 else [int(s) for s in cfg.robustness.seeds])
    if not seeds:
        raise ConfigError("seeds", "at least one seed is required")
    model = dyn.load_model(cfg.model_file)
    ctrl, label, ckpts = _controller(args, cfg, model)
    thr = _thresholds(args, cfg)
    campaigns = {}
    for n in names:
        campaigns[n] = ev.run_scenario(model, ctrl, n, grids[n], seeds, episodes, cfg.rewards, thr,
                                       workers=_workers(args.workers))
        for r in campaigns[n]:
            print(f"{n} {r.value:g}: " + "  ".join(f"{m}={r.mean(m):.4f}+-{r.std(m):.4f}" for m in ev.METRICS))
    out = Path(args.out) if args.out else cfg.output_root() / f"robustness-{label}"
    meta = _manifest(cfg, model, command="robustness", controller=label, thresholds=list(thr))
    ev.plot_export(out, campaigns, seeds, episodes, checkpoints=ckpts, figures=not args.no_figures, extra=meta)
    print(f"results: {out}")
    return EXIT_OK


# ------------------------------------------------------------ maintenance

def cmd_maintenance(args):
    cfg = _resolve_config(args)
    model = dyn.load_model(cfg.model_file)
    ctrl, label, ckpts = _controller(args, cfg, model)
    out = Path(args.out) if args.out else cfg.output_root() / f"maintenance-{label}-seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    tr = ev.maintenance_replay(model, ctrl, out / "trace.csv", cfg.seed, args.episode, args.steps, cfg.rewards)
    ev.plot_trace(out / "trace.png", tr)
    _write_json(out / "manifest.json", _manifest(
        cfg, model, command="maintenance", controller=label, episode=args.episode, steps=args.steps,
        checkpoints={Path(c).name: ev.file_sha256(c) for c in ckpts}))
    half = tr["e_att"].shape[1] // 2
    print(f"e_att mean over steps 1-{half}: {tr['e_att'][0, :half].mean():.4f} rad, "
          f"steps {half + 1}-{2 * half}: {tr['e_att'][0, half:].mean():.4f} rad")
    print(f"trace: {out / 'trace.csv'}")
    return EXIT_OK


# --------------------------------------------------------------- selftest

def cmd_selftest(args):
    from .selftest import run_selftest

    ok, _ = run_selftest()
    return EXIT_OK if ok else EXIT_RUNTIME


# ----------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="orbitarm", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"orbitarm {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--workers", type=int,
                        help="worker processes (default: CPU count); results do not depend on it")

    def controller(sp):
        sp.add_argument("--checkpoint", help="run directory, checkpoints directory, or one .ckpt file")
        sp.add_argument("--expert", action="store_true", help="use the planner + PID expert instead")
        sp.add_argument("--relaxed", action="store_true", help="use the relaxed success thresholds")

    t = sub.add_parser("train", help="train both agents")
    common(t)
    t.add_argument("--epochs", type=int, help="number of epochs to run (default: from the schedule)")
    t.add_argument("--buffer", type=int, help="buffer size in transitions")
    t.add_argument("--minibatch", type=int, help="minibatch size (default: unchanged, or buffer/10 if larger)")
    t.add_argument("--prior-budget", type=int, help="planner iteration budget for guidance")
    t.add_argument("--run-dir", help="explicit run directory")
    t.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or the expert")
    common(e)
    controller(e)
    e.add_argument("--episodes", type=int, help="evaluation episodes (default 1000)")
    e.add_argument("--out", help="output directory")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("robustness", help="fault-injection campaign")
    r.add_argument("scenario", help=f"one of {', '.join(ev.SCENARIOS)}, or all")
    common(r, seed=False)
    controller(r)
    r.add_argument("--grid", help="start:step:stop or comma list (default: from the config)")
    r.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    r.add_argument("--episodes", type=int, help="episodes per grid point and seed (default 200)")
    r.add_argument("--full-scale", action="store_true", help="5000 episodes x 5 seeds per point")
    r.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=cmd_robustness)

    m = sub.add_parser("maintenance", help="single extended reach-and-hold replay with full trace")
    common(m)
    controller(m)
    m.add_argument("--episode", type=int, default=0, help="episode index within the seed")
    m.add_argument("--steps", type=int, default=100, help="replay length in control steps")
    m.add_argument("--out", help="output directory")
    m.set_defaults(func=cmd_maintenance)

    s = sub.add_parser("selftest", help="fast invariant suite")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
