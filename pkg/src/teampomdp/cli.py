"""Command-line interface.

Subcommands front the library operations and emit JSON reports (stdout or
--out).  Exit codes: 0 success, 2 validation failure, 3 enumeration guard,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import ais, duality, fixtures, modelio, planner
from .coordinator import sort_key
from .learner import LearnerConfig, train
from .model import (
    BehavioralPolicy,
    EnumerationLimitError,
    ModelValidationError,
    sample_trajectory,
    validate,
)
from .planner import NumericError

EXIT_VALIDATION = 2
EXIT_SIZING = 3
EXIT_NUMERIC = 4


def _load(path: str):
    if path in fixtures.FIXTURE_NAMES:
        return fixtures.build_fixture(path)
    return modelio.load_model(path)


def _parse_lambda(text: str) -> list:
    lam = [float(x) for x in text.split(",")] if text else [0.0]
    if any(x < 0 for x in lam):
        raise ValueError("multipliers must be nonnegative")
    return lam


def _emit(report: dict, out: str | None):
    payload = json.dumps(report, indent=1, default=_json_default)
    if out:
        with open(out, "w") as f:
            f.write(payload + "\n")
    else:
        print(payload)


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    return repr(x)


def _config_hash(args: argparse.Namespace) -> str:
    blob = json.dumps({k: repr(v) for k, v in sorted(vars(args).items()) if k != "func"})
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _report_base(args) -> dict:
    return {"command": args.command, "config_hash": _config_hash(args)}


def cmd_validate(args) -> int:
    model = _load(args.model)
    rep = validate(model)
    _emit({**_report_base(args), "ok": rep.ok, "violations": rep.messages()}, args.out)
    return 0 if rep.ok else EXIT_VALIDATION


def cmd_plan_exact(args) -> int:
    model = _load(args.model)
    lam = _parse_lambda(args.lam)
    tables = planner.exact_dp(model, lam, args.horizon)
    report = {
        **_report_base(args),
        "lambda": lam,
        "horizon": args.horizon,
        "aggregate": tables.aggregate,
        "lagrangian_aggregate": tables.lagrangian_aggregate,
        "initial_values": {repr(items): v for items, v in sorted(tables.V[0].items(), key=lambda kv: sort_key(kv[0]))},
        "layer_sizes": [len(v) for v in tables.V],
    }
    if args.tables:
        report["V"] = [
            {repr(items): v for items, v in sorted(layer.items(), key=lambda kv: sort_key(kv[0]))}
            for layer in tables.V
        ]
    _emit(report, args.out)
    return 0


def cmd_plan_ais(args) -> int:
    model = _load(args.model)
    lam = _parse_lambda(args.lam)
    bundle = ais.parse_generator(args.generator, model, args.horizon)
    tables = planner.compressed_dp(model, bundle, lam, args.horizon)
    report = {
        **_report_base(args),
        "generator": args.generator,
        "lambda": lam,
        "horizon": args.horizon,
        "aggregate": tables.aggregate,
        "lagrangian_aggregate": tables.lagrangian_aggregate,
        "initial_values": {repr(z): v for z, v in sorted(tables.V[0].items(), key=lambda kv: sort_key(kv[0]))},
        "layer_sizes": [len(v) for v in tables.V],
    }
    _emit(report, args.out)
    return 0


def cmd_certify(args) -> int:
    model = _load(args.model)
    bundle = ais.parse_generator(args.generator, model, args.horizon)
    cert = ais.certify(model, bundle, args.horizon)
    _emit({**_report_base(args), "generator": args.generator, **cert.as_dict()}, args.out)
    return 0


def cmd_bounds(args) -> int:
    model = _load(args.model)
    lam = _parse_lambda(args.lam)
    with open(args.cert) as f:
        doc = json.load(f)
    cert = ais.Certification(
        eps_p1=doc["eps_p1"], eps_p2=doc["eps_p2"], delta_p=doc["delta_p"],
        eps_c1=doc["eps_c1"], eps_c2=doc["eps_c2"], delta_c=doc["delta_c"],
        horizon=doc.get("horizon"), infinite=doc.get("infinite", False),
    )
    T = None if args.horizon == 0 else args.horizon
    b = ais.gap_bounds(cert, args.stage if T else None, T, model.discount, lam, model)
    _emit({
        **_report_base(args),
        "lambda": lam, "t": b.t, "horizon": b.T,
        "M_c": b.M_c, "M_p": b.M_p, "N_term": b.N_term, "total": b.total,
    }, args.out)
    return 0


def cmd_dual(args) -> int:
    model = _load(args.model)
    result = duality.dual_ascent(
        model, args.horizon, iters=args.iters,
        lambda_max=args.lambda_max,
    )
    report = {
        **_report_base(args),
        "horizon": args.horizon,
        "lambda_star": list(result.lam_star),
        "dual_value": result.dual_value,
        "supergradient": result.supergradient.tolist(),
        "comp_slack_residual": result.comp_slack_residual,
        "iterations": result.iterations,
        "converged": result.converged,
        "lambda_max": result.lambda_max,
        "C": result.C,
        "D": result.D.tolist(),
    }
    if result.mixture_value is not None:
        report["mixture_value"] = result.mixture_value
        report["mixture_label"] = result.mixture_label
    _emit(report, args.out)
    return 0


def cmd_oracle(args) -> int:
    model = _load(args.model)
    value, points = duality.primal_oracle(model, args.horizon)
    _emit({
        **_report_base(args),
        "horizon": args.horizon,
        "primal_value": value,
        "points": sorted(set(points)),
    }, args.out)
    return 0


def cmd_train(args) -> int:
    model = _load(args.model)
    kwargs = {}
    if args.config:
        with open(args.config) as f:
            kwargs = json.load(f)
    for key in ("batch_size", "horizon", "maxiters", "seed"):
        v = getattr(args, key)
        if v is not None:
            kwargs[key] = v
    if "exponents" in kwargs:
        kwargs["exponents"] = tuple(kwargs["exponents"])
    if "scales" in kwargs:
        kwargs["scales"] = tuple(kwargs["scales"])
    config = LearnerConfig(**kwargs)
    state, _bundle = train(model, config, checkpoint_path=args.checkpoint)
    if args.metrics:
        state.to_csv(args.metrics, model.num_constraints)
    report = {
        **_report_base(args),
        "iterations": state.iteration,
        "lambda": state.lam.tolist(),
        "running_lambda": state.running_average("lam").tolist(),
        "running_violation": state.running_average("violation").tolist(),
        "running_lagrangian": float(state.running_average("lagrangian_mean")),
        "final_risks": [state.metrics[-1]["risk_coord"], state.metrics[-1]["risk_sup"]],
        "metrics_path": args.metrics,
        "aborted": state.aborted,
    }
    _emit(report, args.out)
    return 0 if not state.aborted else EXIT_NUMERIC


def cmd_simulate(args) -> int:
    model = _load(args.model)
    if args.policy == "uniform":
        policy = BehavioralPolicy.uniform(model)
    elif args.policy.startswith("always:"):
        policy = BehavioralPolicy.always(model, args.policy.split(":", 1)[1].split(","))
    else:
        raise ValueError(f"unknown policy {args.policy!r} (use uniform or always:a,b)")
    episodes = []
    for e in range(args.episodes):
        traj = sample_trajectory(model, policy, args.horizon, seed=(args.seed, e))
        episodes.append({
            "observations": [list(o) for o in traj.observations],
            "actions": [list(a) for a in traj.actions],
            "costs_c": list(traj.costs_c),
            "costs_d": [list(d) for d in traj.costs_d],
        })
    _emit({**_report_base(args), "seed": args.seed, "episodes": episodes}, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="teampomdp",
        description="Planning and primal-dual learning for finite cooperative "
                    "multi-agent constrained POMDPs.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        sp = sub.add_parser(name)
        sp.add_argument("model", help="model JSON path or bundled fixture name")
        sp.add_argument("--out", default=None, help="write the JSON report here")
        sp.set_defaults(func=fn)
        return sp

    add("validate", cmd_validate)

    sp = add("plan-exact", cmd_plan_exact)
    sp.add_argument("--lambda", dest="lam", default="0", help="comma-separated multipliers")
    sp.add_argument("--horizon", type=int, required=True)
    sp.add_argument("--tables", action="store_true", help="include full value tables")

    sp = add("plan-ais", cmd_plan_ais)
    sp.add_argument("--generator", required=True, help="identity|constant|window:k|belief")
    sp.add_argument("--lambda", dest="lam", default="0")
    sp.add_argument("--horizon", type=int, required=True)

    sp = add("certify", cmd_certify)
    sp.add_argument("--generator", required=True)
    sp.add_argument("--horizon", type=int, required=True)

    sp = add("bounds", cmd_bounds)
    sp.add_argument("--cert", required=True, help="certification JSON (from certify)")
    sp.add_argument("--lambda", dest="lam", default="0")
    sp.add_argument("--stage", type=int, default=1)
    sp.add_argument("--horizon", type=int, required=True, help="0 means infinite-horizon limits")

    sp = add("dual", cmd_dual)
    sp.add_argument("--horizon", type=int, required=True)
    sp.add_argument("--iters", type=int, default=80)
    sp.add_argument("--lambda-max", type=float, default=None)

    sp = add("oracle", cmd_oracle)
    sp.add_argument("--horizon", type=int, required=True)

    sp = add("train", cmd_train)
    sp.add_argument("--config", default=None, help="LearnerConfig overrides as JSON")
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sp.add_argument("--horizon", type=int, default=None)
    sp.add_argument("--maxiters", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--metrics", default=None, help="write per-iteration CSV here")
    sp.add_argument("--checkpoint", default=None, help="write final weights here")

    sp = add("simulate", cmd_simulate)
    sp.add_argument("--policy", default="uniform")
    sp.add_argument("--episodes", type=int, default=1)
    sp.add_argument("--horizon", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ModelValidationError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except EnumerationLimitError as err:
        print(f"sizing error: {err}", file=sys.stderr)
        return EXIT_SIZING
    except (NumericError, FloatingPointError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
