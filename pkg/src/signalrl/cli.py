"""Command-line entry point: ``signalrl <command> [options]``.

Results go to ``--out`` (default: ``$SIGNALRL_OUT``, else ``./results``).
Trained agents are cached under ``<out>/agents`` unless ``--no-cache`` is given.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .agent import Hyperparams, load_hyperparams, train_agent
from .experiments import (DEFAULT_PERTURBATIONS, SweepResult, evaluate, export_results,
                          make_controller, mapping_source, robustness_deltas, robustness_eval,
                          sensitivity_sweep, sweep_detection_rate, training_source, whole_day_eval)
from .nn import CheckpointError, gradient_check, read_checkpoint, write_checkpoint
from .scenarios import ScenarioError, load_scenario

OUT_ENV = "SIGNALRL_OUT"
GRADCHECK_TOLERANCE = 1e-4

log = logging.getLogger("signalrl")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _agent_map(text: str) -> dict[float, str]:
    out = {}
    for item in text.split(","):
        rate, sep, path = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected RATE=PATH entries, got {item!r}")
        out[float(rate)] = path
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="built-in scenario name or YAML file")
    common.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    common.add_argument("--reps", type=int, default=5, help="evaluation episodes per cell")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./results)")
    common.add_argument("--checkpoint", help="agent checkpoint to write (train) or read")
    common.add_argument("--hyperparams", help="YAML file with hyperparameter overrides")
    common.add_argument("--no-cache", action="store_true", help="always retrain agents")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="signalrl",
                                     description="Traffic-signal DQN under partial detection.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("train", parents=[common], help="train one agent and save its checkpoint")
    p.add_argument("--detection-rate", type=float)

    p = sub.add_parser("eval", parents=[common], help="evaluate a controller over --reps seeds")
    p.add_argument("--controller", choices=("dqn", "pretimed", "longest-queue"))
    p.add_argument("--detection-rate", type=float)

    p = sub.add_parser("sweep-detection", parents=[common],
                       help="one agent per detection rate, evaluated per rate")
    p.add_argument("--rates", type=_floats, default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    p.add_argument("--agents", type=_agent_map, help="RATE=CHECKPOINT,... instead of training")
    p.add_argument("--no-pretimed", action="store_true")

    p = sub.add_parser("sweep-sensitivity", parents=[common],
                       help="fixed agent vs per-value optimal agents")
    p.add_argument("--axis", choices=("flow", "detection_rate"), default="detection_rate")
    p.add_argument("--train-value", type=float)
    p.add_argument("--eval-values", type=_floats)
    p.add_argument("--detection-rate", type=float,
                   help="detection rate for flow sweeps (default 1.0)")

    p = sub.add_parser("whole-day", parents=[common], help="24 h evaluation binned by hour")
    p.add_argument("--rates", type=_floats, default=[0.2, 1.0])
    p.add_argument("--no-pretimed", action="store_true")

    p = sub.add_parser("robustness", parents=[common],
                       help="agents evaluated under perturbed simulations")
    p.add_argument("--rates", type=_floats, default=[0.2, 0.6, 1.0])
    p.add_argument("--perturbations", default=",".join(DEFAULT_PERTURBATIONS),
                   help="comma-separated subset of: " + ", ".join(DEFAULT_PERTURBATIONS))

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--trials", type=int, default=100)
    return parser


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "results")


def _hyperparams(args) -> Hyperparams:
    return load_hyperparams(args.hyperparams) if args.hyperparams else Hyperparams()


def _scenario(args, default: str):
    return load_scenario(args.scenario or default)


def _source(args, hp):
    cache = None if args.no_cache else _out_dir(args) / "agents"
    return training_source(hp, args.seed, cache)


def _report(result: SweepResult, out: Path, prefix: str) -> None:
    runs, summary = export_results(result, out, prefix)
    print(f"{'scenario':<22} {'controller':<26} {'p':>5} {'flow':>5} {'wait_all':>9} "
          f"{'ci95':>7} {'detected':>9} {'undetected':>10}")
    for row in result.summary():
        if any(r.hour is not None for r in result.records):
            break
        print(f"{row.scenario:<22} {row.controller:<26} {_num(row.detection_rate, 5)} "
              f"{_num(row.flow_scale, 5)} {_num(row.wait_all[0], 9)} {_num(row.wait_all[1], 7)} "
              f"{_num(row.wait_detected[0], 9)} {_num(row.wait_undetected[0], 10)}")
    print(f"wrote {runs} and {summary}")


def _num(value, width: int) -> str:
    return f"{'-':>{width}}" if value is None else f"{value:>{width}.3f}"


def cmd_train(args) -> int:
    hp = _hyperparams(args)
    scenario = _scenario(args, "medium")
    if args.detection_rate is not None:
        scenario = scenario.with_detection_rate(args.detection_rate)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)

    def progress(episode, penalty, eps):
        log.info("episode %d/%d penalty %.4f epsilon %.3f", episode + 1, hp.train_episodes,
                 penalty, eps)

    net, curve = train_agent(scenario, hp, args.seed, progress=progress)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "agent.ckpt"
    write_checkpoint(net, ckpt)
    curve.write_csv(out / "learning_curve.csv")
    print(f"wrote {ckpt} and {out / 'learning_curve.csv'}")
    return 0


def cmd_eval(args) -> int:
    hp = _hyperparams(args)
    scenario = _scenario(args, "medium")
    if args.detection_rate is not None:
        scenario = scenario.with_detection_rate(args.detection_rate)
    kind = args.controller or ("dqn" if args.checkpoint else "pretimed")
    if kind == "dqn":
        if not args.checkpoint:
            raise ValueError("--controller dqn needs --checkpoint")
        kind = read_checkpoint(args.checkpoint, expected_dims=hp.mlp_spec().layer_dims)
    controller = make_controller(kind, hp, scenario.road.lane_length)
    result = SweepResult(axis="seed", records=evaluate(scenario, controller, args.reps, args.seed))
    _report(result, _out_dir(args), "eval")
    return 0


def cmd_sweep_detection(args) -> int:
    hp = _hyperparams(args)
    scenario = _scenario(args, "medium")
    source = mapping_source(args.agents, hp) if args.agents else _source(args, hp)
    result = sweep_detection_rate(scenario, args.rates, args.reps, source, hp, args.seed,
                                  include_pretimed=not args.no_pretimed)
    _report(result, _out_dir(args), "detection")
    return 0


def cmd_sweep_sensitivity(args) -> int:
    hp = _hyperparams(args)
    if args.axis == "flow":
        scenario = _scenario(args, "uniform")
        scenario = scenario.with_detection_rate(
            1.0 if args.detection_rate is None else args.detection_rate)
        train_value = 1.0 if args.train_value is None else args.train_value
        values = args.eval_values or [0.0, 0.25, 0.5, 1.0, 1.5]
    else:
        scenario = _scenario(args, "medium")
        train_value = 0.2 if args.train_value is None else args.train_value
        values = args.eval_values or [0.1, 0.2, 0.3, 0.4]
    result = sensitivity_sweep(scenario, args.axis, train_value, values, args.reps,
                               _source(args, hp), hp, args.seed)
    _report(result, _out_dir(args), f"sensitivity_{args.axis}")
    return 0


def cmd_whole_day(args) -> int:
    hp = _hyperparams(args)
    scenario = _scenario(args, "day")
    result = whole_day_eval(scenario, args.rates, args.reps, _source(args, hp), hp, args.seed,
                            include_pretimed=not args.no_pretimed)
    _report(result, _out_dir(args), "whole_day")
    return 0


def cmd_robustness(args) -> int:
    hp = _hyperparams(args)
    scenario = _scenario(args, "medium")
    names = [n for n in args.perturbations.split(",") if n]
    unknown = [n for n in names if n not in DEFAULT_PERTURBATIONS]
    if unknown:
        raise ValueError(f"unknown perturbations {unknown}; choose from {list(DEFAULT_PERTURBATIONS)}")
    perts = {n: DEFAULT_PERTURBATIONS[n] for n in names}
    result = robustness_eval(scenario, args.rates, args.reps, _source(args, hp), hp, perts,
                             args.seed)
    _report(result, _out_dir(args), "robustness")
    for (name, rate), delta in sorted(robustness_deltas(result, scenario.name).items()):
        print(f"delta wait {name:<12} p={rate:<4g} {_num(delta, 8)}")
    return 0


def cmd_gradcheck(args) -> int:
    err = gradient_check(trials=args.trials, seed=args.seed)
    ok = err < GRADCHECK_TOLERANCE
    print(f"max relative gradient error {err:.3e} ({'ok' if ok else 'FAILED'}, "
          f"tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-detection": cmd_sweep_detection,
    "sweep-sensitivity": cmd_sweep_sensitivity,
    "whole-day": cmd_whole_day,
    "robustness": cmd_robustness,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("signalrl: error: a command is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.reps < 1:
        parser.error("--reps must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"signalrl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
