"""Command-line entry point: ``hypertune <subcommand> ...``.

Exit status: 0 success, 1 replay disagreement, 2 invalid input, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from . import report, scenario, simengine
from .errors import HypertuneError, NonMonotonic, ValidationError
from .planner import plan_initial
from .speedmodel import benchmark_sweep, to_text

log = logging.getLogger("hypertune")

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_INVALID = 2
EXIT_RUNTIME = 3
BENCH_ATTEMPTS = 3


FIXTURE_ALIASES = {"csd36.cfg": "csd36_mobilenet.cfg"}


def resolve_scenario(path: str) -> Path:
    """``path`` as given, else a bundled fixture of the same file name."""
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("hypertune") / "fixtures" / FIXTURE_ALIASES.get(p.name, p.name)
    if p.parent.name == "fixtures" and bundled.is_file():
        return Path(str(bundled))
    return p


def _load(args) -> scenario.Scenario:
    sc = scenario.load(resolve_scenario(args.scenario))
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "controller", None) is not None:
        changes["controller"] = args.controller == "on"
    policy = {}
    if getattr(args, "mode", None):
        policy["mode"] = args.mode
    if getattr(args, "eq3_literal", False):
        policy["eq3_literal"] = True
    if getattr(args, "naive_inverse", False):
        policy["naive_inverse"] = True
    if policy:
        changes["policy"] = dataclasses.replace(sc.policy, **policy)
    return dataclasses.replace(sc, **changes) if changes else sc


def _kernel(args):
    from .livenet import SyntheticKernel

    return SyntheticKernel(kind=args.kernel, iters_per_sample=args.iters_per_sample,
                           seconds_per_sample=args.seconds_per_sample, overhead_samples=args.overhead_samples)


def cmd_bench(args) -> int:
    from .livenet import KernelExecutor

    sizes = [int(b) for b in args.batch_sizes.split(",") if b.strip()]
    executor = KernelExecutor(_kernel(args), args.cores)
    for attempt in range(1, BENCH_ATTEMPTS + 1):
        try:
            model = benchmark_sweep(executor, sizes, args.steps_per_probe, args.node_class)
            break
        except NonMonotonic as exc:
            if attempt == BENCH_ATTEMPTS:
                raise
            log.warning("benchmark attempt %d: %s", attempt, exc)
    text = to_text(model)
    if args.out:
        Path(args.out).write_text(text)
        log.info("wrote %s", args.out)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_plan(args) -> int:
    sc = _load(args)
    plan = plan_initial(list(sc.nodes), sc.models, sc.dataset, literal=sc.policy.eq3_literal,
                        privacy_slack=sc.policy.privacy_slack)
    print(f"generation {plan.generation}")
    print(f"steps_per_epoch {plan.steps_per_epoch}")
    print(f"predicted_step_time {plan.predicted_step_time:.6f}")
    print(f"{'node':<12}{'class':<10}{'batch':>8}{'share':>10}")
    for n in sc.nodes:
        print(f"{n.node_id:<12}{n.node_class:<10}{plan.batch_sizes[n.node_id]:>8}{plan.dataset_shares[n.node_id]:>10}")
    return EXIT_OK


def cmd_sim(args) -> int:
    sc = _load(args)
    trace = simengine.run(sc)
    if args.out:
        trace.to_csv(args.out)
        log.info("wrote %s", args.out)
    baselines = {} if args.no_baselines else report.baseline_traces(sc)
    sys.stdout.write(report.emit_report(trace, sc, baselines).format())
    return EXIT_OK


def cmd_coord(args) -> int:
    from .livenet import LiveConfig, coordinator_run

    cfg = LiveConfig.from_file(resolve_scenario(args.scenario))
    changes = {}
    if args.controller is not None:
        changes["controller"] = args.controller == "on"
    if args.mode:
        changes["policy"] = dataclasses.replace(cfg.policy, mode=args.mode)
    cfg = dataclasses.replace(cfg, **changes)
    local = _kernel(args) if args.local_worker else None
    try:
        trace = coordinator_run(args.listen, cfg, args.workers, local_worker=local,
                                on_listen=lambda ep: log.info("listening on %s", ep))
    except HypertuneError as exc:
        partial = getattr(exc, "trace", None)
        if args.out and partial is not None:
            partial.to_csv(args.out)
            log.error("wrote partial trace %s", args.out)
        raise
    if args.out:
        trace.to_csv(args.out)
        log.info("wrote %s", args.out)
    if trace.steps:
        sys.stdout.write(report.emit_report(trace).format())
    return EXIT_OK


def cmd_work(args) -> int:
    from .livenet import ThrottleSchedule, worker_run

    throttle = ThrottleSchedule.parse(args.throttle) if args.throttle else None
    return worker_run(args.connect, _kernel(args), node_id=args.node_id, node_class=args.node_class,
                      core_count=args.cores, throttle=throttle, connect_timeout=args.connect_timeout)


def cmd_replay(args) -> int:
    from .replay import replay_file

    result = replay_file(args.trace)
    print(f"recorded decisions {len(result.recorded)}, replayed {len(result.replayed)}")
    if result.agree:
        print("agree")
        return EXIT_OK
    k = result.first_difference()
    rec = result.recorded[k] if k < len(result.recorded) else None
    rep = result.replayed[k] if k < len(result.replayed) else None
    print(f"disagree at decision {k}: recorded {rec} replayed {rep}")
    return EXIT_MISMATCH


def _add_kernel_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel", choices=("compute", "sleep"), default="compute")
    p.add_argument("--iters-per-sample", type=int, default=20000)
    p.add_argument("--seconds-per-sample", type=float, default=2e-4)
    p.add_argument("--overhead-samples", type=int, default=10)


def _add_controller_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--controller", choices=("on", "off"))
    p.add_argument("--mode", choices=("speed", "cpu"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypertune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="benchmark the local synthetic kernel and write a speed model")
    p.add_argument("--out")
    p.add_argument("--batch-sizes", default="8,16,32,64,128")
    p.add_argument("--steps-per-probe", type=int, default=3)
    p.add_argument("--class", dest="node_class", default="local")
    p.add_argument("--cores", type=int, default=1)
    _add_kernel_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plan", help="print the initial batch plan of a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--eq3-literal", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("sim", help="simulate a scenario, write the trace and print a report")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    _add_controller_args(p)
    p.add_argument("--eq3-literal", action="store_true")
    p.add_argument("--naive-inverse", action="store_true")
    p.add_argument("--no-baselines", action="store_true", help="skip the controller-off and single-node runs")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("coord", help="run a live coordinator")
    p.add_argument("--scenario", required=True)
    p.add_argument("--listen", default="127.0.0.1:7070")
    p.add_argument("--workers", type=int, required=True)
    p.add_argument("--out")
    _add_controller_args(p)
    p.add_argument("--local-worker", action="store_true", help="also train in the coordinator process")
    _add_kernel_args(p)
    p.set_defaults(func=cmd_coord)

    p = sub.add_parser("work", help="run a live worker")
    p.add_argument("--connect", default="127.0.0.1:7070")
    p.add_argument("--node-id")
    p.add_argument("--class", dest="node_class", default="worker")
    p.add_argument("--cores", type=int, default=1)
    p.add_argument("--throttle", help="emulated contention, e.g. '40:0.5,80:1'")
    p.add_argument("--connect-timeout", type=float, default=10.0)
    _add_kernel_args(p)
    p.set_defaults(func=cmd_work)

    p = sub.add_parser("replay", help="re-run the controller over a recorded trace")
    p.add_argument("trace")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("HYPERTUNE_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"hypertune {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (HypertuneError, OSError) as exc:
        print(f"hypertune {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
