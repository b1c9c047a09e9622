"""Command-line interface: mvmdp <subcommand> ...

Exit codes: 0 ok, 2 bad configuration, 3 bad model, 4 solver failure,
5 failed checks (reproduce only).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import mdp as mdp_core
from .diagnostics import build_chains, finite_difference, performance_derivative, performance_difference
from .dp import EPS_TIE, backward_induction
from .evaluation import evaluate, simulate
from .grid import local_maxima, segment_check, sweep
from .lattice import LatticeError
from .models import BUILTIN, build_named
from .policies import PolicyUndefinedError, policy_from_document, policy_to_document
from .portfolio import PortfolioError, PortfolioSpec, example_spec, pseudo_value, solve_closed_form
from .reproduce import EXPERIMENTS, reproduce
from .solver import EPS_FIX, MAX_ITERS, SolverError, solve, solve_multi_start

EXIT_OK, EXIT_CONFIG, EXIT_MODEL, EXIT_SOLVER, EXIT_CHECKS = 0, 2, 3, 4, 5
DIGITS = 12


class ConfigError(ValueError):
    pass


def _round(obj):
    """Round floats to 12 significant digits; drop wall-clock fields."""
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items() if k not in ("runtime", "wall_time")}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if not math.isfinite(x) else float(f"{x:.{DIGITS}g}")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _fmt(x) -> str:
    return f"{float(x):.{DIGITS}g}"


def _emit(doc, out: str | None):
    text = json.dumps(_round(doc), indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _threads(args) -> int:
    env = os.environ.get("MVMDP_THREADS")
    n = int(env) if env else args.threads
    if n < 1:
        raise ConfigError("thread count must be positive")
    return n


def _positive(name, value):
    if value is not None and not value > 0:
        raise ConfigError(f"{name} must be positive")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _json_arg(text: str | None) -> dict:
    if not text:
        return {}
    try:
        return json.loads(Path(text).read_text()) if Path(text).is_file() else json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--params is not valid JSON: {exc}") from exc


def _model(args):
    if getattr(args, "model", None):
        if not Path(args.model).is_file():
            raise ConfigError(f"model file {args.model} not found")
        m = mdp_core.load(args.model)
    elif getattr(args, "name", None):
        m = build_named(args.name, _json_arg(args.params))
    else:
        raise ConfigError("give --model <file> or --name <builtin>")
    mdp_core.ensure_valid(m)
    return m


def _policy(path, model):
    if not Path(path).is_file():
        raise ConfigError(f"policy file {path} not found")
    return policy_from_document(json.loads(Path(path).read_text()), model)


def _s0(model, s0: int) -> int:
    if not 0 <= s0 < model.num_states:
        raise ConfigError(f"s0={s0} outside 0..{model.num_states - 1}")
    return s0


# -- subcommands ---------------------------------------------------------------


def cmd_models(args) -> int:
    if args.action == "emit":
        m = build_named(args.name, _json_arg(args.params))
        doc = mdp_core.to_document(m, noise_atoms=args.atoms)
        text = json.dumps(doc) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    m = mdp_core.load(args.model)
    report = mdp_core.validate(m)
    lo, hi = mdp_core.pseudo_mean_domain(m) if report.ok else (None, None)
    _emit({"ok": report.ok, "violations": list(report.violations), "horizon": m.horizon,
           "num_states": m.num_states, "num_actions": m.num_actions,
           "pseudo_mean_domain": [lo, hi]}, args.out)
    return EXIT_OK if report.ok else EXIT_MODEL


def cmd_inner_solve(args) -> int:
    m = _model(args)
    _positive("--quantize", args.quantize)
    sol = backward_induction(m, _s0(m, args.s0), args.y0, quantize=args.quantize,
                             eps_tie=args.eps_tie, keep_values=False)
    ev = evaluate(m, sol.policy, args.s0)
    doc = {"s0": args.s0, "y0": args.y0, "value": sol.value, "evaluation": ev.as_dict(),
           "lattice": sol.lattice_stats(), "policy": policy_to_document(sol.policy)}
    if args.policy_out:
        Path(args.policy_out).write_text(json.dumps(_round(policy_to_document(sol.policy))))
        del doc["policy"]
    _emit(doc, args.out)
    return EXIT_OK


def cmd_solve(args) -> int:
    m = _model(args)
    s0 = _s0(m, args.s0)
    _positive("--eps-fix", args.eps_fix)
    _positive("--eps-tie", args.eps_tie)
    _positive("--quantize", args.quantize)
    if args.max_iters < 0:
        raise ConfigError("--max-iters must be nonnegative")
    opts = dict(max_iters=args.max_iters, eps_fix=args.eps_fix, eps_tie=args.eps_tie,
                quantize=args.quantize, escape=not args.no_escape)
    if args.multi_start:
        ms = solve_multi_start(m, s0, _floats(args.multi_start), threads=_threads(args), **opts)
        best, doc, reports = ms.best, ms.as_dict(), ms.reports
    else:
        best = solve(m, s0, args.y0_init, **opts)
        doc, reports = best.as_dict(), [best]
    if args.trace_csv:
        rows = [[_fmt(r.y0_init), e.k, e.kind, _fmt(e.y), _fmt(e.mv), _fmt(e.inner_value)]
                for r in reports for e in r.trace]
        _write_csv(args.trace_csv, ["y0_init", "k", "kind", "y", "J", "J_hat"], rows)
    if args.policy_out and best.policy is not None:
        Path(args.policy_out).write_text(json.dumps(_round(policy_to_document(best.policy))))
    _emit(doc, args.out)
    return EXIT_OK if all(r.converged for r in reports) else EXIT_SOLVER


def cmd_grid(args) -> int:
    m = _model(args)
    _positive("--step", args.step)
    _positive("--quantize", args.quantize)
    lo = args.lo if args.lo is not None else mdp_core.pseudo_mean_domain(m, args.s0)[0]
    hi = args.hi if args.hi is not None else mdp_core.pseudo_mean_domain(m, args.s0)[1]
    curve = sweep(m, _s0(m, args.s0), (lo, hi), args.step, quantize=args.quantize,
                  fingerprints=not args.no_fingerprints, threads=_threads(args))
    if args.csv:
        _write_csv(args.csv, ["y0", "J_hat", "fingerprint", "segment_id"],
                   [[_fmt(y), _fmt(v), "" if f is None else f, "" if g is None else g]
                    for y, v, f, g in curve.rows()])
    y, j = curve.global_max
    doc = {"s0": args.s0, "interval": [lo, hi], "step": args.step, "points": len(curve.y),
           "global_max": {"y0": y, "J_hat": j},
           "local_maxima": [{"y0": p.y, "J_hat": p.value, "is_global": p.is_global}
                            for p in local_maxima(curve)]}
    if curve.fingerprints is not None:
        seg = segment_check(curve)
        doc["segments"] = int(curve.segments[-1]) + 1
        doc["segment_check"] = {"checked": seg.checked, "ok": seg.ok,
                                "violations": [list(v) for v in seg.violations[:20]]}
    _emit(doc, args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    m = _model(args)
    s0 = _s0(m, args.s0)
    view = _policy(args.policy, m)
    doc = {"exact": evaluate(m, view, s0, args.y0).as_dict()}
    if args.simulate:
        n, seed = args.simulate
        doc["simulation"] = simulate(m, view, s0, n_paths=int(n), seed=int(seed)).as_dict()
    _emit(doc, args.out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    m = _model(args)
    s0 = _s0(m, args.s0)
    a, b = _policy(args.policy_a, m), _policy(args.policy_b, m)
    ca, cb = build_chains(m, a, b, s0, args.y0)
    ea, eb = evaluate(m, a, s0), evaluate(m, b, s0)
    fd = finite_difference(m, a, b, s0)
    _emit({"y0": ca.y0,
           "difference_formula": performance_difference(ca, cb),
           "direct_difference": eb.mv - ea.mv,
           "derivative_formula": performance_derivative(ca, cb),
           "finite_difference": fd.extrapolated,
           "finite_difference_steps": dict(zip([str(h) for h in fd.steps], fd.centered))},
          args.out)
    return EXIT_OK


def cmd_portfolio(args) -> int:
    spec = PortfolioSpec.load(args.spec) if args.spec else example_spec()
    sol = solve_closed_form(spec, args.s0)
    doc = sol.as_dict()
    doc["warnings"] = spec.warnings()
    if args.curve:
        lo, hi, step = _floats(args.curve)
        _positive("curve step", step)
        ys = lo + step * np.arange(int(round((hi - lo) / step)) + 1)
        vals = pseudo_value(spec, args.s0, ys)
        if args.csv:
            _write_csv(args.csv, ["y", "J_hat"], [[_fmt(y), _fmt(v)] for y, v in zip(ys, vals)])
        else:
            doc["curve"] = [[y, v] for y, v in zip(ys, vals)]
    _emit(doc, args.out)
    return EXIT_OK


def cmd_reproduce(args) -> int:
    rep = reproduce(args.experiment, threads=_threads(args))
    sys.stderr.write(rep.table() + "\n")
    _emit(rep.as_dict(), args.out)
    return EXIT_OK if rep.ok else EXIT_CHECKS


# -- parser --------------------------------------------------------------------


def _add_model(p):
    p.add_argument("--model", help="model JSON document")
    p.add_argument("--name", choices=sorted(BUILTIN), help="built-in model instead of --model")
    p.add_argument("--params", help="JSON object (or file) of built-in model parameters")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads (MVMDP_THREADS overrides)")
    common.add_argument("--out", help="write JSON here instead of stdout")
    parser = argparse.ArgumentParser(prog="mvmdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("models", parents=[common], help="emit or validate model documents")
    p.add_argument("action", choices=["emit", "validate"])
    p.add_argument("--name", choices=sorted(BUILTIN))
    p.add_argument("--params")
    p.add_argument("--model", help="document to validate")
    p.add_argument("--atoms", action="store_true", help="write noise models as atom lists")
    p.set_defaults(func=cmd_models)

    p = sub.add_parser("inner-solve", parents=[common], help="backward induction at one pseudo mean")
    _add_model(p)
    p.add_argument("--s0", type=int, required=True)
    p.add_argument("--y0", type=float, required=True)
    p.add_argument("--quantize", type=float, help="pseudo-mean grid step Δy")
    p.add_argument("--eps-tie", type=float, default=EPS_TIE)
    p.add_argument("--policy-out", help="write the policy document here")
    p.set_defaults(func=cmd_inner_solve)

    p = sub.add_parser("solve", parents=[common], help="alternating pseudo-mean iteration")
    _add_model(p)
    p.add_argument("--s0", type=int, required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--y0-init", type=float)
    g.add_argument("--multi-start", help="comma-separated initial pseudo means")
    p.add_argument("--max-iters", type=int, default=MAX_ITERS)
    p.add_argument("--eps-fix", type=float, default=EPS_FIX)
    p.add_argument("--eps-tie", type=float, default=EPS_TIE)
    p.add_argument("--quantize", type=float)
    p.add_argument("--no-escape", action="store_true", help="skip the tied-action swap search")
    p.add_argument("--trace-csv")
    p.add_argument("--policy-out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("grid", parents=[common], help="sweep the optimal pseudo mean-variance over y0")
    _add_model(p)
    p.add_argument("--s0", type=int, required=True)
    p.add_argument("--from", dest="lo", type=float)
    p.add_argument("--to", dest="hi", type=float)
    p.add_argument("--step", type=float, required=True)
    p.add_argument("--quantize", type=float)
    p.add_argument("--no-fingerprints", action="store_true")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("evaluate", parents=[common], help="exact (and simulated) moments of a policy")
    _add_model(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--s0", type=int, required=True)
    p.add_argument("--y0", type=float, help="report the pseudo mean-variance here")
    p.add_argument("--simulate", nargs=2, type=int, metavar=("N", "SEED"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", parents=[common], help="difference and derivative identities for two policies")
    _add_model(p)
    p.add_argument("--policy-a", required=True)
    p.add_argument("--policy-b", required=True)
    p.add_argument("--s0", type=int, required=True)
    p.add_argument("--y0", type=float, help="chain pseudo mean (default: mean of policy a)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("portfolio", parents=[common], help="closed-form multi-period portfolio solution")
    p.add_argument("--spec", help="spec JSON (default: built-in three-asset example)")
    p.add_argument("--s0", type=float, required=True)
    p.add_argument("--curve", help="from,to,step for the pseudo mean-variance curve")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_portfolio)

    p = sub.add_parser("reproduce", parents=[common], help="run an experiment recipe with pass/fail checks")
    p.add_argument("experiment", choices=sorted(EXPERIMENTS))
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except mdp_core.ModelError as exc:
        return _fail(EXIT_MODEL, "model", exc)
    except (SolverError, LatticeError, PolicyUndefinedError, PortfolioError) as exc:
        return _fail(EXIT_SOLVER, "solver", exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "config", exc)


def _fail(code: int, kind: str, exc: Exception) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__,
                                 "message": str(exc)}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
