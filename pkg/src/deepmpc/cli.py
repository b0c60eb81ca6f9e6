"""Command-line entry point: ``deepmpc run | metrics | train``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .adaptive_loop import IntegratorTask, train
from .exceptions import DeepMPCError
from .harness import CONTROLLERS, RunConfig, compute_metrics, export_csv, export_plot_script, read_csv, run_scenario


class _JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, code=2)


def _fail(kind, message, code=1, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    sys.exit(code)


def _cmd_run(args):
    cfg = RunConfig(scenario=args.scenario, controller=args.controller, duration=args.duration, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = run_scenario(cfg)
    csv_path = export_csv(log, out / "trajectory.csv")
    export_plot_script(log, out / "plot_trajectory.py", csv_name=csv_path.name)
    summary = {"scenario": str(cfg.scenario_path), "controller": cfg.controller, "seed": cfg.seed,
               "records": len(log), "log": str(csv_path)}
    if len(log):
        metrics = compute_metrics(log).to_dict()
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
        summary["metrics"] = metrics
    if log.failure is not None:
        _fail("RunFailure", log.failure["message"], failure=log.failure, log=str(csv_path))
    print(json.dumps(summary, indent=2))


def _cmd_metrics(args):
    log = read_csv(args.log)
    print(json.dumps(compute_metrics(log, threshold=args.threshold).to_dict(), indent=2))


def _cmd_train(args):
    with open(args.config) as fh:
        conf = json.load(fh)
    env = IntegratorTask.from_dict(conf.get("task", {}))
    value_kwargs = dict(conf.get("value", {}))
    if "hidden_layer_sizes" in value_kwargs:
        value_kwargs["hidden_layer_sizes"] = tuple(value_kwargs["hidden_layer_sizes"])
    seed = args.seed if args.seed is not None else int(conf.get("seed", 0))
    value, curve = train(env, args.episodes, int(conf.get("episode_length", 30)), seed=seed,
                         controller_kwargs=conf.get("controller"), value_kwargs=value_kwargs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curve.write_csv(out / "learning_curve.csv")
    (out / "value.json").write_text(json.dumps(value.to_dict()) + "\n")
    print(json.dumps({"episodes": args.episodes, "seed": seed, "final_cost": curve.total_cost[-1],
                      "learning_curve": str(out / "learning_curve.csv"), "value": str(out / "value.json")}, indent=2))


def build_parser():
    p = _JsonArgumentParser(prog="deepmpc", description="Robust tracking MPC with learned uncertainty: scenario runner")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_JsonArgumentParser)

    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("--scenario", required=True, help="scenario JSON file or canonical number 1..6")
    r.add_argument("--controller", choices=CONTROLLERS, default="adaptive")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--duration", type=float, default=None)
    r.set_defaults(func=_cmd_run)

    m = sub.add_parser("metrics", help="metrics of a trajectory CSV")
    m.add_argument("--log", required=True)
    m.add_argument("--threshold", type=float, default=1e-2)
    m.set_defaults(func=_cmd_metrics)

    t = sub.add_parser("train", help="value-learning episodes on the integrator task")
    t.add_argument("--config", required=True)
    t.add_argument("--episodes", type=int, required=True)
    t.add_argument("--out", default=".")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=_cmd_train)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (DeepMPCError, ValueError, KeyError, OSError) as exc:
        _fail(type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
