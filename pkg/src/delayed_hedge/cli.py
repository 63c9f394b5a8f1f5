"""Command-line entry point.

Every subcommand writes its artifacts atomically and prints a one-line JSON
summary on stdout.  Exit status: 0 when all checks pass, 1 on a tolerance
failure, 2 on a usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path

from .errors import ConfigParseError, DelayedHedgeError, ToleranceFailure

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONVERGENCE_COLUMNS = ("N", "H", "lambda", "price", "limit_value", "gap")
MARTINGALE_COLUMNS = ("s", "t", "test", "statistic", "stderr")


# --- io helpers -------------------------------------------------------------------------


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _plain(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if hasattr(obj, "item"):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n"


def csv_text(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _load_json(path, loader, what):
    if path is None:
        raise ConfigParseError(f"missing {what} file argument")
    p = Path(path)
    if not p.is_file():
        raise ConfigParseError(f"{what} file not found: {p}")
    try:
        return loader(p)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{what} file {p} is not valid JSON: {exc}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigParseError(f"{what} file {p} is invalid: {exc}") from None


def load_payoff(path):
    from .model_core import PayoffSpec

    return _load_json(path, PayoffSpec.from_json, "payoff")


def load_params(path):
    from .model_core import ModelParams

    return _load_json(path, ModelParams.from_json, "params")


def load_policy(path):
    from .relaxed_measure_sim import VolatilityPolicy

    return _load_json(path, VolatilityPolicy.from_json, "policy")


def resolve_threads(value) -> int:
    if value is None:
        env = os.environ.get("DELAYED_HEDGE_THREADS")
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise ConfigParseError(f"DELAYED_HEDGE_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise ConfigParseError(f"threads must be >= 1, got {value}")
    return int(value)


def parse_int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigParseError(f"expected a comma-separated list of integers, got {text!r}") from None


# --- experiments ---------------------------------------------------------------------------
# each returns (summary dict, {filename: text}); summary["passed"] drives the exit code


def exp_limit(payoff, params, A, nodes=64, out=None, **_):
    from .limit_solver import LimitProblem, limit_value, limit_value_continuum

    spec, p = load_payoff(payoff), load_params(params)
    prob = LimitProblem.build(float(A), p, spec, nodes=int(nodes))
    sol = limit_value(prob)
    exact, mult = limit_value_continuum(float(A), p, spec)
    summary = {
        "command": "price-limit",
        "A": float(A),
        "nodes": int(nodes),
        "value": sol.value,
        "multiplier": sol.multiplier,
        "randomized": sol.randomized,
        "constraint_residual": sol.constraint_residual,
        "continuum_value": exact,
        "continuum_multiplier": mult,
    }
    zeta_rows = [{"z": float(z), "zeta": float(v)} for z, v in zip(prob.quad.nodes, sol.zeta_values)]
    return summary, {"limit.json": dumps(summary), "zeta.csv": csv_text(zeta_rows, ("z", "zeta"))}


def exp_discrete(payoff, params, N, lam, s_nodes=None, g_nodes=None, quad_nodes=None, no_delay=False, **_):
    from .delayed_dp import DelayedProblem, DPGrid, indifference_price_dp, indifference_price_nodelay

    spec, p = load_payoff(payoff), load_params(params)
    defaults = DPGrid()
    grid = DPGrid(
        s_nodes=int(s_nodes or defaults.s_nodes),
        g_nodes=int(g_nodes or defaults.g_nodes),
        quad_nodes=int(quad_nodes or defaults.quad_nodes),
    )
    prob = DelayedProblem(p, spec, int(N), float(lam))
    rep = indifference_price_nodelay(prob, grid) if no_delay else indifference_price_dp(prob, grid)
    summary = {
        "command": "price-discrete",
        "N": prob.N,
        "lambda": prob.lam,
        "delay": not no_delay,
        "price": rep.price,
        "numerator_log": rep.numerator_log,
        "denominator_log": rep.denominator_log,
        "diagnostics": rep.diagnostics,
    }
    return summary, {"discrete.json": dumps(summary)}


def exp_envelope(payoff, params, **_):
    from .envelope import superrep_price

    spec, p = load_payoff(payoff), load_params(params)
    res = superrep_price(spec, p)
    summary = {
        "command": "envelope",
        "price": res.value_at_s0,
        "hedge_slope": res.right_derivative_at_s0,
        "finite": res.finite,
        "hull_vertices": [list(v) for v in res.hull_vertices],
    }
    return summary, {"envelope.json": dumps(summary)}


def exp_dual(policy, params, H, A, paths=20_000, seed=7, payoff=None, threads=1, **_):
    from .model_core import butterfly
    from .relaxed_measure_sim import dual_report, simulate_paths

    pol, p = load_policy(policy), load_params(params)
    spec = butterfly() if payoff is None else load_payoff(payoff)
    ens = simulate_paths(pol, float(H), p, P=int(paths), seed=int(seed), threads=threads)
    rep = dual_report(ens, float(A), spec)
    body = rep.to_dict()
    body.update({"H": float(H), "A": float(A), "paths": int(paths), "seed": int(seed)})
    rows = body["martingale_stats"]
    summary = {
        "command": "simulate-dual",
        "entropy": rep.entropy,
        "scaled_entropy": rep.scaled_entropy,
        "weak_duality_bound": rep.weak_duality_bound,
        "weak_duality_stderr": rep.weak_duality_stderr,
    }
    return summary, {"dual_report.json": dumps(body), "martingale_stats.csv": csv_text(rows, MARTINGALE_COLUMNS)}


def exp_convergence(payoff, params, A, N="4,8,16,32", **_):
    from .delayed_dp import convergence_study

    spec, p = load_payoff(payoff), load_params(params)
    rows = convergence_study(float(A), spec, p, parse_int_list(N))
    summary = {"command": "convergence", "A": float(A), "rows": rows}
    return summary, {"convergence.csv": csv_text(rows, CONVERGENCE_COLUMNS)}


def exp_acceptance(seed=7, paths=20_000, threads=1, log=None, **_):
    from .acceptance import run_suite

    results = run_suite(seed=int(seed), paths=int(paths), threads=threads, log=log)
    lines = "".join(r.line() + "\n" for r in results)
    conv = next(r for r in results if r.number == 6).metrics["rows"]
    mart = next(r for r in results if r.number == 8).metrics["stats"]
    failed = [r.number for r in results if not r.passed]
    summary = {"command": "acceptance-suite", "passed": not failed, "failed": failed, "criteria": len(results)}
    files = {
        "acceptance.json": dumps({"seed": int(seed), "paths": int(paths), "criteria": [r.to_dict() for r in results]}),
        "acceptance.txt": lines,
        "convergence.csv": csv_text(conv, CONVERGENCE_COLUMNS),
        "martingale_stats.csv": csv_text(mart, MARTINGALE_COLUMNS),
    }
    return summary, files


EXPERIMENTS = {
    "limit": exp_limit,
    "discrete": exp_discrete,
    "envelope": exp_envelope,
    "dual-sim": exp_dual,
    "convergence": exp_convergence,
    "acceptance-suite": exp_acceptance,
}


def check_expectations(summary: dict, expect: dict, tol: float):
    """Compare numeric summary fields against expected values; raise on the first miss."""
    for key, want in expect.items():
        if key not in summary:
            raise ConfigParseError(f"check refers to unknown output field {key!r}")
        got = summary[key]
        if not (isinstance(got, (int, float)) and math.isfinite(got) and abs(got - float(want)) <= tol):
            raise ToleranceFailure(f"check {key}: got {got}, expected {want} +- {tol}")


def run_config(path, threads: int = 1, log=None):
    """Run a TOML experiment config; returns ``(summary, written paths)``.

    Layout::

        kind = "envelope"          # limit | discrete | envelope | dual-sim | convergence | acceptance-suite
        output_dir = "out"
        payoff = "payoff.json"     # relative paths resolve against the config file
        params = "params.json"
        [knobs]                    # A, N, lam, nodes, H, paths, seed, policy, ...
        [checks]                   # optional: tolerance = 1e-9, expect = { price = 1.0 }
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigParseError(f"config file not found: {path}")
    try:
        cfg = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigParseError(f"config {path} is not valid TOML: {exc}") from None
    kind = cfg.get("kind")
    if kind not in EXPERIMENTS:
        raise ConfigParseError(f"unknown experiment kind {kind!r}; expected one of {sorted(EXPERIMENTS)}")
    base = path.parent
    args = dict(cfg.get("knobs", {}))
    for key in ("payoff", "params", "policy"):
        val = cfg.get(key, args.get(key))
        if val is not None:
            args[key] = str(base / val)
    if "lambda" in args:
        args["lam"] = args.pop("lambda")
    out = base / cfg.get("output_dir", "out")
    try:
        summary, files = EXPERIMENTS[kind](threads=threads, log=log, **args)
    except TypeError as exc:
        raise ConfigParseError(f"bad knobs for {kind}: {exc}") from None
    written = _write_all(out, files)
    checks = cfg.get("checks", {})
    if checks:
        check_expectations(summary, checks.get("expect", {}), float(checks.get("tolerance", 1e-9)))
    if summary.get("passed") is False:
        raise ToleranceFailure(f"failed criteria: {summary.get('failed')}")
    return summary, written


def _write_all(out_dir, files):
    out_dir = Path(out_dir)
    written = []
    for name, text in files.items():
        atomic_write(out_dir / name, text)
        written.append(str(out_dir / name))
    return written


# --- argument parsing -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="delayed-hedge", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None, help="worker cap (default: $DELAYED_HEDGE_THREADS or 1)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, payoff=True, params=True):
        if payoff:
            p.add_argument("--payoff", required=True, help="payoff JSON {breakpoints, values}")
        if params:
            p.add_argument("--params", required=True, help="model JSON {s0, sigma, mu, T}")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("price-limit", help="value of the scaling-limit control problem")
    common(p)
    p.add_argument("--A", type=float, required=True)
    p.add_argument("--nodes", type=int, default=64)

    p = sub.add_parser("price-discrete", help="indifference price with one-period delay")
    common(p)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--s-nodes", type=int)
    p.add_argument("--g-nodes", type=int)
    p.add_argument("--quad-nodes", type=int)
    p.add_argument("--no-delay", action="store_true", help="drop the delay (diagnostic)")

    p = sub.add_parser("envelope", help="super-replication price and buy-and-hold hedge")
    common(p)

    p = sub.add_parser("simulate-dual", help="relaxed-measure Monte Carlo and dual bounds")
    common(p, payoff=False)
    p.add_argument("--policy", required=True, help="policy JSON {partition, pieces}")
    p.add_argument("--payoff", default=None, help="payoff JSON for the duality bound (default: butterfly)")
    p.add_argument("--H", type=float, required=True)
    p.add_argument("--A", type=float, required=True)
    p.add_argument("--paths", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("convergence", help="discrete prices along N against the limit value")
    common(p)
    p.add_argument("--A", type=float, required=True)
    p.add_argument("--N", default="4,8,16,32", help="comma-separated list")

    p = sub.add_parser("acceptance-suite", help="run every acceptance criterion")
    p.add_argument("--out", default="acceptance_out")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--paths", type=int, default=20_000)

    p = sub.add_parser("run", help="run a TOML experiment config")
    p.add_argument("config")
    return ap


COMMANDS = {
    "price-limit": "limit",
    "price-discrete": "discrete",
    "envelope": "envelope",
    "simulate-dual": "dual-sim",
    "convergence": "convergence",
    "acceptance-suite": "acceptance-suite",
}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    log = lambda line: print(line, file=sys.stderr)  # noqa: E731
    try:
        threads = resolve_threads(args.threads)
        if args.command == "run":
            summary, written = run_config(args.config, threads=threads, log=log)
        else:
            knobs = {k: v for k, v in vars(args).items() if k not in ("command", "threads", "out")}
            summary, files = EXPERIMENTS[COMMANDS[args.command]](threads=threads, log=log, **knobs)
            written = _write_all(args.out, files)
            if summary.get("passed") is False:
                raise ToleranceFailure(f"failed criteria: {summary.get('failed')}")
    except ToleranceFailure as exc:
        print(json.dumps({"status": "fail", "error": str(exc)}))
        return 1
    except (ConfigParseError, DelayedHedgeError, ValueError) as exc:
        print(json.dumps({"status": "error", "error": f"{type(exc).__name__}: {exc}"}))
        return 2
    summary = {k: v for k, v in summary.items() if k not in ("rows", "diagnostics")}
    summary.update({"status": "pass", "outputs": written})
    print(json.dumps(summary, sort_keys=True, default=_plain))
    return 0


if __name__ == "__main__":
    sys.exit(main())
