"""Command-line entry points: experiment runs, fleet benchmarks, log tools,
and the operator gateway.

Subcommands:
  run       one collection method (or all three) on a task, seeded
  fleet     one-operator-N-robots throughput benchmark at a calibrated
            policy success level
  metrics   print the JSON metrics report for a saved log
  validate  check a saved log against the format's invariants
  replay    re-render a saved log to the terminal, no interaction
  serve     start the network gateway for human operation
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import TICK_RATE
from .datastore import (
    EpisodeEnd,
    Header,
    TrajectoryStore,
    continuity_violations,
    validate,
)
from .domain import Frame, Mode, Template
from .experiment import ExperimentConfig, compare_methods, run_method
from .fleet import (
    BENCHMARK_T_MAX,
    FleetConfig,
    FleetRuntime,
    collection_efficiency,
    run_fleet,
)
from .gateway import serve as gateway_serve
from .gridworld import GRID_H, GRID_W, TEMPLATE_KINDS, make_task
from .operators import parse_operator_spec
from .policies import calibrate_epsilon, noisy_expert
from .sentinel import DEFAULT_T_MAX, OracleSentinel, build_sentinel, parse_sentinel_spec

log = logging.getLogger(__name__)

_TEMPLATES = {t.value: t for t in Template}


def _template(name: str) -> Template:
    try:
        return _TEMPLATES[name.lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(
            f"unknown task {name!r}; choose from {sorted(_TEMPLATES)}"
        ) from None


def _write_json(payload: dict, out: Path | None, name: str) -> None:
    text = json.dumps(payload, indent=2)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")


# --- run --------------------------------------------------------------------

def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    kwargs: dict = {
        "template": args.task,
        "seed": args.seed,
        "max_rounds": args.rounds,
        "n_robots": args.robots,
    }
    if args.sentinel:
        name, opts = parse_sentinel_spec(args.sentinel)
        kwargs["t_max"] = int(opts.pop("t_max", DEFAULT_T_MAX))
        if name == "oracle":
            kwargs["oracle_sentinel"] = OracleSentinel(
                fpr=opts.get("fpr", 0.0), fnr=opts.get("fnr", 0.0)
            )
        else:
            kwargs["learned_threshold"] = opts.get("threshold", 0.0)
    if args.operator:
        operator = parse_operator_spec(args.operator)
        if operator is None:
            raise SystemExit("`run` needs a scripted operator; `human` is for `serve`")
        kwargs["strategy_override"] = operator.strategy
        kwargs["rewind_depth"] = operator.rewind_depth
        kwargs["operator_latency"] = (operator.latency_min, operator.latency_max)
    return ExperimentConfig(**kwargs)


def cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    out = Path(args.out) if args.out else None
    if args.method == "compare":
        report = compare_methods(config)
        _write_json(report, out, f"compare-{args.task.value}-seed{args.seed}.json")
        return 0
    outcome = run_method(args.method, config)
    _write_json(
        outcome.to_json(), out, f"{args.method}-{args.task.value}-seed{args.seed}.json"
    )
    if out is not None and outcome.store is not None:
        path = outcome.store.save(out / f"{args.method}-{args.task.value}-seed{args.seed}")
        log.info("trajectory log written to %s", path)
    return 0


# --- fleet ------------------------------------------------------------------

def cmd_fleet(args: argparse.Namespace) -> int:
    task = make_task(args.task)
    log.info(
        "calibrating policy noise for %.0f%% task success...", args.policy_success * 100
    )
    epsilon = calibrate_epsilon(args.task, args.policy_success, trials=args.calibration_trials)
    log.info("using epsilon=%.4f", epsilon)
    config = FleetConfig(
        n_robots=args.robots,
        task=task,
        policy=noisy_expert(epsilon),
        sentinel=build_sentinel(f"oracle:fpr=0,fnr=0,t_max={args.t_max}"),
        max_ticks=args.ticks,
    )
    fleet_log = run_fleet(config, seed=args.seed)
    payload = fleet_log.metrics()
    payload["epsilon"] = epsilon
    payload["policy_success_target"] = args.policy_success
    payload["episodes"] = len(fleet_log.episode_scores)
    _write_json(payload, Path(args.out) if args.out else None,
                f"fleet-{args.task.value}-n{args.robots}-seed{args.seed}.json")
    if args.out:
        path = fleet_log.store.save(
            Path(args.out) / f"fleet-{args.task.value}-n{args.robots}-seed{args.seed}"
        )
        log.info("trajectory log written to %s", path)
    return 0


# --- metrics / validate -----------------------------------------------------

def _load_store(path: str) -> TrajectoryStore:
    return TrajectoryStore.load(path)


def cmd_metrics(args: argparse.Namespace) -> int:
    store = _load_store(args.log)
    header = next(r for r in store.records if isinstance(r, Header))
    by_mode = {m: 0 for m in Mode}
    for frame in store.frames():
        by_mode[frame.mode] += 1
    collected = sum(by_mode.values())
    paused = by_mode[Mode.AWAITING_INTERVENTION]
    busy = by_mode[Mode.INTERVENTION] + by_mode[Mode.REWIND]
    scores = [r.score.as_float for r in store.records if isinstance(r, EpisodeEnd)]
    payload = {
        "task": header.task_name,
        "n_robots": len(header.robot_ids),
        "collected_frames": collected,
        "paused_frames": paused,
        "frames_by_mode": {m.value: n for m, n in by_mode.items()},
        "intervention_rate": busy / collected if collected else 0.0,
        "collection_efficiency": (
            collection_efficiency(len(header.robot_ids), collected, paused)
            if collected
            else 0.0
        ),
        "episodes": len(scores),
        "mean_score": float(np.mean(scores)) if scores else None,
    }
    print(json.dumps(payload, indent=2))
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    store = _load_store(args.log)
    report = validate(store)
    violations = list(report.violations)
    if args.continuity:
        violations.extend(continuity_violations(store))
    for violation in violations:
        print(violation)
    if violations:
        print(f"INVALID: {len(violations)} violation(s)")
        return 1
    print("ok")
    return 0


# --- replay -----------------------------------------------------------------

def _render_features(features: np.ndarray, template: Template) -> str:
    """Poor man's renderer from the logged observation alone: occupancy
    planes back to ascii. Object identity is gone, kinds remain."""
    kinds = TEMPLATE_KINDS[template]
    cells = GRID_W * GRID_H
    n_planes = len(kinds) + 1
    planes = features[: n_planes * cells].reshape(n_planes, GRID_H, GRID_W)
    held = features[n_planes * cells + 6] > 0
    grid = [["." for _ in range(GRID_W)] for _ in range(GRID_H)]
    for k_i, kind in enumerate(kinds):
        for r in range(GRID_H):
            for c in range(GRID_W):
                count = int(planes[k_i, r, c])
                if count == 1:
                    grid[r][c] = kind[0]
                elif count > 1:
                    grid[r][c] = str(min(count, 9))
    for r in range(GRID_H):
        for c in range(GRID_W):
            if planes[-1, r, c] > 0:
                grid[r][c] = "&" if held else "@"
    return "\n".join("".join(row) for row in grid)


def cmd_replay(args: argparse.Namespace) -> int:
    store = _load_store(args.log)
    header = next(r for r in store.records if isinstance(r, Header))
    template = Template(header.task_name)
    delay = 0.0 if args.speed <= 0 else 1.0 / (TICK_RATE * args.speed)
    for record in store.records:
        if not isinstance(record, Frame):
            continue
        line = (
            f"[{record.robot_id} {record.episode_id} t={record.tick:4d}] "
            f"{record.mode.value:<20} step={record.step_index} "
            f"{record.actor.value}:{record.action.name}"
        )
        if record.sentinel_verdict is not None:
            line += f" z={int(record.sentinel_verdict)}"
        print(line)
        print(_render_features(record.observation, template))
        print()
        if delay:
            time.sleep(delay)
    return 0


# --- serve ------------------------------------------------------------------

def cmd_serve(args: argparse.Namespace) -> int:
    task = make_task(args.task)
    config = FleetConfig(
        n_robots=args.robots,
        task=task,
        policy=noisy_expert(args.policy_epsilon),
        sentinel=build_sentinel(args.sentinel),
        operator=None,  # the connected humans are the operator
        max_ticks=1,  # unused; the gateway ticks the runtime itself
    )
    runtime = FleetRuntime(config, seed=args.seed)
    gateway_serve(
        runtime,
        args.port,
        ws_port=args.ws_port,
        ticks_per_second=args.tps,
    )
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcent",
        description="Rewind-and-refine data collection on a desk-scale gridworld fleet",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a collection method end to end")
    p_run.add_argument("--task", type=_template, required=True)
    p_run.add_argument(
        "--method", choices=["passive", "adversarial", "gcent", "compare"], required=True
    )
    p_run.add_argument("--robots", type=int, default=1)
    p_run.add_argument("--rounds", type=int, default=5)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--sentinel", default=None, help="e.g. oracle:fpr=0.05,fnr=0.05")
    p_run.add_argument("--operator", default=None, help="e.g. scripted:rewind:k=full")
    p_run.add_argument("--out", default=None, help="directory for reports and logs")
    p_run.set_defaults(func=cmd_run)

    p_fleet = sub.add_parser("fleet", help="one-operator-N-robots throughput benchmark")
    p_fleet.add_argument("--task", type=_template, required=True)
    p_fleet.add_argument("--robots", type=int, default=2)
    p_fleet.add_argument(
        "--policy-success",
        type=float,
        default=0.6,
        help="calibrated autonomous success level (0.4, 0.6, 0.8 in the benchmark)",
    )
    p_fleet.add_argument("--ticks", type=int, default=20_000)
    p_fleet.add_argument("--seed", type=int, default=0)
    p_fleet.add_argument("--calibration-trials", type=int, default=200)
    p_fleet.add_argument(
        "--t-max",
        type=int,
        default=BENCHMARK_T_MAX,
        help="sentinel stall patience in ticks for the benchmark run",
    )
    p_fleet.add_argument("--out", default=None)
    p_fleet.set_defaults(func=cmd_fleet)

    p_metrics = sub.add_parser("metrics", help="print the JSON metrics for a log")
    p_metrics.add_argument("--log", required=True)
    p_metrics.set_defaults(func=cmd_metrics)

    p_validate = sub.add_parser("validate", help="check a log against the invariants")
    p_validate.add_argument("--log", required=True)
    p_validate.add_argument(
        "--continuity",
        action="store_true",
        help="also flag world-state jumps no single action explains",
    )
    p_validate.set_defaults(func=cmd_validate)

    p_replay = sub.add_parser("replay", help="re-render a log; no interaction")
    p_replay.add_argument("--log", required=True)
    p_replay.add_argument(
        "--speed", type=float, default=10.0, help="playback multiplier; 0 = no delay"
    )
    p_replay.set_defaults(func=cmd_replay)

    p_serve = sub.add_parser("serve", help="start the operator gateway")
    p_serve.add_argument("--port", type=int, default=8765)
    p_serve.add_argument("--ws-port", type=int, default=None)
    p_serve.add_argument("--robots", type=int, default=2)
    p_serve.add_argument("--task", type=_template, default=Template.STACKING)
    p_serve.add_argument("--seed", type=int, default=0)
    p_serve.add_argument("--policy-epsilon", type=float, default=0.2)
    p_serve.add_argument("--sentinel", default="oracle:fpr=0,fnr=0")
    p_serve.add_argument("--tps", type=float, default=float(TICK_RATE))
    p_serve.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
