"""Command-line front end: run a model, or compare event orderings.

    hybridsafe run --model bouncing-ball --variant safe --t-end 10 --out-trace ball.csv
    hybridsafe compare-order --model three-balls --variant unsafe
    hybridsafe list-models
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .core import HybridModel, Trace, TrapKind
from .detect import DEFAULT_ARM_THRESHOLD, DEFAULT_LIMBO_OFFSET, DEFAULT_UNSAFE_OFFSET
from .engine import EngineConfig, Safety, SimOutcome, Verdict, simulate
from .integrate import StepConfig
from .models import (
    MODELS,
    DEFAULT_BALLS,
    BallParams,
    BouncingBallParams,
    bouncing_ball,
    three_balls,
)
from .traceio import events_to_json, trace_to_csv, write_events_json, write_trace_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_REPEAT_MISMATCH = 9
TRAP_EXIT_CODES = {
    TrapKind.UNSAFE_LEVEL_CROSSED: 10,
    TrapKind.UNHANDLED_SIMULTANEITY: 11,
    TrapKind.UNHANDLED_LIMBO: 12,
    TrapKind.NON_FINITE_STATE: 13,
}


class SpecError(ValueError):
    """Flags that do not describe a runnable simulation."""


class RepeatRunMismatch(RuntimeError):
    """Two runs with identical inputs produced different traces."""


@dataclass(frozen=True)
class RunSpec:
    model: str
    variant: str
    params: Dict[str, float] = field(default_factory=dict)
    t_end: float = 10.0
    dt: float = 1e-3
    t_tol: float = 1e-9
    simultaneity_tol: Optional[float] = None
    limbo_offset: float = DEFAULT_LIMBO_OFFSET
    unsafe_offset: float = DEFAULT_UNSAFE_OFFSET
    order: Optional[Tuple[str, ...]] = None
    out_trace: Optional[str] = None
    out_events: Optional[str] = None

    def safety(self) -> Safety:
        try:
            return MODELS[self.model][self.variant]
        except KeyError:
            raise SpecError(f"unknown model/variant {self.model}/{self.variant}") from None

    def build_model(self) -> HybridModel:
        safety = self.safety()
        offsets = dict(limbo_offset=self.limbo_offset, unsafe_offset=self.unsafe_offset)
        params = dict(self.params)
        try:
            if self.model == "bouncing-ball":
                arm = params.pop("arm_threshold", DEFAULT_ARM_THRESHOLD)
                p = BouncingBallParams(**_take(params, ("h0", "c", "g"), BouncingBallParams()))
                model = bouncing_ball(p, self.variant, arm_threshold=arm, **offsets)
            else:
                balls = []
                for k, default in enumerate(DEFAULT_BALLS, start=1):
                    vals = {q: params.pop(f"b{k}.{q}", getattr(default, q))
                            for q in ("x0", "v0", "m", "r")}
                    balls.append(BallParams(**vals))
                order = self.order if safety is Safety.UNSAFE else None
                model = three_balls(*balls, variant=self.variant, order=order, **offsets)
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from None
        if params:
            raise SpecError(f"unknown parameters for {self.model}: {sorted(params)}")
        return model

    def engine_config(self) -> EngineConfig:
        try:
            return EngineConfig(
                step=StepConfig(dt=self.dt, t_tol=self.t_tol),
                t_end=self.t_end,
                simultaneity_tol=self.simultaneity_tol,
                safety=self.safety(),
            )
        except ValueError as exc:
            raise SpecError(str(exc)) from None

    def build(self) -> Tuple[HybridModel, EngineConfig]:
        return self.build_model(), self.engine_config()


def _take(params: dict, keys, defaults) -> dict:
    return {k: params.pop(k, getattr(defaults, k)) for k in keys}


def run(spec: RunSpec) -> Tuple[int, SimOutcome]:
    """Simulate, write the requested files, and map the outcome to an exit code."""
    model, cfg = spec.build()
    outcome = simulate(model, cfg)
    if spec.out_trace:
        write_trace_csv(outcome.trace, spec.out_trace)
    if spec.out_events:
        write_events_json(outcome.trace, spec.out_events)
    if outcome.trap is not None:
        return TRAP_EXIT_CODES[outcome.trap.kind], outcome
    return EXIT_OK, outcome


# -- order comparator -----------------------------------------------------------


@dataclass
class DeterminismReport:
    permutations: List[Tuple[str, ...]]
    digests: List[str]
    verdict: str  # "OrderInvariant" | "OrderSensitive"
    divergence_time: Optional[float] = None
    diverging_variables: List[str] = field(default_factory=list)
    # every variable that differs anywhere, by first divergence
    later_diverging_variables: List[str] = field(default_factory=list)
    conflict_batches: int = 0
    accidental_determinism_risk: bool = False
    final_states: List[Dict[str, float]] = field(default_factory=list)
    note: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def trace_digest(trace: Trace) -> str:
    return hashlib.sha256(trace_to_csv(trace).encode()).hexdigest()


def first_divergence(a: Trace, b: Trace) -> Optional[Tuple[float, List[str]]]:
    """Time and variables of the first sample where two traces differ."""
    for sa, sb in zip(a.samples, b.samples):
        if sa == sb:
            continue
        names = [n for n, u, v in zip(a.names, sa.state, sb.state) if u != v]
        if sa.mode != sb.mode:
            names.append("mode")
        if sa.status != sb.status:
            names.append("status")
        return min(sa.time, sb.time), names
    if len(a.samples) != len(b.samples):
        k = min(len(a.samples), len(b.samples))
        longer = a if len(a.samples) > k else b
        return longer.samples[k].time, ["length"]
    return None


def _all_diverging(a: Trace, b: Trace) -> List[str]:
    seen: List[str] = []
    for sa, sb in zip(a.samples, b.samples):
        for n, u, v in zip(a.names, sa.state, sb.state):
            if u != v and n not in seen:
                seen.append(n)
    return seen


def compare_models(model: HybridModel, cfg: EngineConfig,
                   permutations: Optional[Sequence[Sequence]] = None) -> DeterminismReport:
    """Run ``model`` once per event order and diff the traces sample by sample.

    The first permutation is also run a second time; if the two runs differ
    the simulator itself is nondeterministic and :class:`RepeatRunMismatch`
    is raised.
    """
    ids = [d.id for d in model.detectors]
    if permutations is None:
        permutations = list(itertools.permutations(ids))
    perms = [tuple(ids[o] if isinstance(o, int) else o for o in p) for p in permutations]
    if not perms:
        raise ValueError("need at least one permutation")

    outcomes = [simulate(model, replace(cfg, event_order=p)) for p in perms]
    again = simulate(model, replace(cfg, event_order=perms[0]))
    if trace_to_csv(again.trace) != trace_to_csv(outcomes[0].trace) or \
            events_to_json(again.trace) != events_to_json(outcomes[0].trace):
        raise RepeatRunMismatch(f"two runs with order {perms[0]} differ")

    digests = [trace_digest(o.trace) for o in outcomes]
    conflicts = sum(1 for b in outcomes[0].batches
                    if len(b.members) > 1 and b.verdict is not Verdict.INDEPENDENT)
    finals = [dict(zip(o.trace.names, o.trace.samples[-1].state)) for o in outcomes]
    report = DeterminismReport(perms, digests, "OrderInvariant",
                               conflict_batches=conflicts, final_states=finals)

    base = outcomes[0].trace
    earliest = None
    for o in outcomes[1:]:
        div = first_divergence(base, o.trace)
        if div is not None and (earliest is None or div[0] < earliest[0]):
            earliest = div
            report.later_diverging_variables = _all_diverging(base, o.trace)
    if earliest is not None:
        report.verdict = "OrderSensitive"
        report.divergence_time, report.diverging_variables = earliest[0], earliest[1]
        report.note = ("order of simultaneous actions changes the result: the model is "
                       "nondeterministic here, and any fixed order is accidental determinism")
    elif conflicts:
        report.accidental_determinism_risk = True
        report.note = ("identical under all orders, but conflicting simultaneous actions "
                       "were applied: accidental determinism risk")
    else:
        report.note = "no order dependence observed (intensional determinism)"
    return report


def compare_order(spec: RunSpec, permutations: Optional[Sequence[Sequence]] = None
                  ) -> DeterminismReport:
    if spec.safety() is not Safety.UNSAFE:
        raise SpecError("compare-order needs an order-dependent (unsafe) variant")
    model, cfg = spec.build()
    return compare_models(model, cfg, permutations)


# -- argument parsing -----------------------------------------------------------


def _param(text: str) -> Tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    name = name.strip()
    if "." not in name:
        name = name.replace("-", "_")
    try:
        return name, float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {value!r}") from None


def _order(text: str) -> Tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(int(p) if p.isdigit() else p for p in parts)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, choices=sorted(MODELS))
    p.add_argument("--variant", required=True)
    p.add_argument("--t-end", type=float, default=10.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--t-tol", type=float, default=1e-9)
    p.add_argument("--simultaneity-tol", type=float, default=None)
    p.add_argument("--limbo-offset", type=float, default=DEFAULT_LIMBO_OFFSET)
    p.add_argument("--unsafe-offset", type=float, default=DEFAULT_UNSAFE_OFFSET)
    p.add_argument("--param", type=_param, action="append", default=[],
                   metavar="NAME=VALUE", help="model parameter override (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridsafe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one model")
    _add_common(p_run)
    p_run.add_argument("--order", type=_order, default=None,
                       help="detector order for unsafe variants, e.g. b2-b3,b1-b2")
    p_run.add_argument("--out-trace", default=None)
    p_run.add_argument("--out-events", default=None)

    p_cmp = sub.add_parser("compare-order", help="diff runs under permuted event orders")
    _add_common(p_cmp)
    p_cmp.add_argument("--order", type=_order, action="append", default=None,
                       help="one permutation per flag; default: all permutations")

    sub.add_parser("list-models", help="print models and their variants")
    return parser


def _spec(args) -> RunSpec:
    return RunSpec(
        model=args.model,
        variant=args.variant,
        params=dict(args.param),
        t_end=args.t_end,
        dt=args.dt,
        t_tol=args.t_tol,
        simultaneity_tol=args.simultaneity_tol,
        limbo_offset=args.limbo_offset,
        unsafe_offset=args.unsafe_offset,
        order=args.order if args.command == "run" else None,
        out_trace=getattr(args, "out_trace", None),
        out_events=getattr(args, "out_events", None),
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "list-models":
        for name, variants in MODELS.items():
            for variant, safety in variants.items():
                print(f"{name}\t{variant}\t{safety.value}")
        return EXIT_OK

    try:
        spec = _spec(args)
        spec.build()
    except SpecError as exc:
        parser.print_usage(sys.stderr)
        print(f"hybridsafe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if args.command == "run":
        code, outcome = run(spec)
        if outcome.trap is not None:
            trap = outcome.trap
            print(f"trapped: {trap.kind.value} at t={trap.time!r} {json.dumps(trap.detail)}",
                  file=sys.stderr)
        else:
            last = outcome.trace.samples[-1]
            print(f"reached t_end={last.time!r} mode={last.mode} status={last.status.value}",
                  file=sys.stderr)
        return code

    try:
        report = compare_order(spec, args.order)
    except SpecError as exc:
        parser.print_usage(sys.stderr)
        print(f"hybridsafe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RepeatRunMismatch as exc:
        print(f"hybridsafe: simulator nondeterminism: {exc}", file=sys.stderr)
        return EXIT_REPEAT_MISMATCH
    print(report.to_json())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
