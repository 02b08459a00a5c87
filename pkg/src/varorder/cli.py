"""Command-line front end.

Subcommands ``forward``, ``asymptotics``, ``transform``, ``invert`` and
``verify``.  Exit codes: 0 success, 1 a verified invariant failed, 2 invalid
input, 3 solver failure, 4 fit or inversion did not converge.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
import warnings
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from .asymptotics import (
    AdmissibilityError,
    expansion_coefficients,
    profiles_for,
    verify_expansion,
)
from .inversion import (
    FitError,
    InversionError,
    fit_exponents,
    recover_breakpoints,
    recover_range,
)
from .laplace_domain import (
    SmallPError,
    cd_factors,
    interface_recursion,
    solve_bvp,
    verify_coefficient_identities,
)
from .model import (
    BoundaryExcitation,
    ProblemFileError,
    ProblemSpec,
    load_problem,
    problem_from_dict,
)
from .sturm_liouville import dump_pair_csv
from .time_domain import ContourConfig, CoverageError, FluxSeries, laplace_from_time, time_fluxes

log = logging.getLogger("varorder")

EXIT_OK, EXIT_FAILED, EXIT_INPUT, EXIT_SOLVER, EXIT_FIT = 0, 1, 2, 3, 4


class InputError(ValueError):
    """Malformed command-line input or data file."""


# ----------------------------------------------------------------------------
# I/O helpers
# ----------------------------------------------------------------------------

def parse_grid(text: str) -> np.ndarray:
    """``lo:hi:logN`` (geometric) or ``lo:hi:linN`` (uniform) grid."""
    try:
        lo_s, hi_s, kind = text.split(":")
        lo, hi = float(lo_s), float(hi_s)
        if kind.startswith("log"):
            n, log_spaced = int(kind[3:]), True
        elif kind.startswith("lin"):
            n, log_spaced = int(kind[3:]), False
        else:
            raise ValueError
    except ValueError:
        raise InputError(f"bad grid {text!r}: expected lo:hi:logN or lo:hi:linN") from None
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi and n >= 2):
        raise InputError(f"bad grid {text!r}: need finite lo < hi and N >= 2")
    if log_spaced:
        if lo <= 0:
            raise InputError(f"bad grid {text!r}: log grids need lo > 0")
        return np.logspace(np.log10(lo), np.log10(hi), n)
    return np.linspace(lo, hi, n)


def parse_pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"expected lo,hi, got {text!r}") from None
    if not 0 < lo < hi:
        raise InputError(f"expected 0 < lo < hi, got {text!r}")
    return lo, hi


def fmt(v: float) -> str:
    return f"{float(v):.17g}"


def csv_text(header: list[str], columns: list[np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in zip(*columns):
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def emit(args, text: str, inputs: list, params: dict, started: float) -> None:
    """Write ``text`` to ``--out`` with a manifest sidecar, or to stdout."""
    if args.out in (None, "-"):
        sys.stdout.write(text)
        return
    out = Path(args.out)
    manifest = {
        "command": args.command,
        "inputs": {str(p): sha256(p) for p in inputs},
        "parameters": params,
        "global": {"threads": args.threads, "seed": args.seed, "tol": args.tol},
        "version": tool_version(),
        "wall_time_s": time.perf_counter() - started,
    }
    write_atomic(out, text)
    write_atomic(out.with_name(out.name + ".manifest.json"), json_text(manifest))


def read_problem(path) -> ProblemSpec:
    if not Path(path).is_file():
        raise InputError(f"{path}: no such file")
    return load_problem(path)


def read_series(path, column: str | None = None) -> tuple[str, np.ndarray, np.ndarray, str]:
    """Read a two-or-more column CSV; returns ``(domain, abscissa, values, column)``.

    The first header entry must be ``p`` (Laplace data) or ``t`` (time data).
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise InputError(f"{path}: need a header and at least one data row")
    header = [h.strip() for h in rows[0]]
    if header[0] not in ("p", "t") or len(header) < 2:
        raise InputError(f"{path}: header must start with 'p' or 't' followed by a flux column")
    if column is None:
        col = 1
    elif column in header[1:]:
        col = header.index(column)
    else:
        raise InputError(f"{path}: no column {column!r} in {header}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric entry ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise InputError(f"{path}: ragged rows")
    if not np.all(np.isfinite(data)):
        raise InputError(f"{path}: NaN or Inf in data")
    x = data[:, 0]
    if np.any(np.diff(x) <= 0) or x[0] <= 0:
        raise InputError(f"{path}: abscissa must be positive and strictly increasing")
    domain = "laplace" if header[0] == "p" else "time"
    return domain, x, data[:, col], header[col]


def read_known(path) -> tuple[ProblemSpec, BoundaryExcitation]:
    """Medium and excitation from a problem file; its order only fixes the length."""
    if not Path(path).is_file():
        raise InputError(f"{path}: no such file")
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ProblemFileError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    spec = problem_from_dict(data)
    return spec, spec.excitation


def contour_from(args) -> ContourConfig:
    return ContourConfig(theta=args.theta * np.pi, delta=args.delta, quad_nodes=args.quad_nodes)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def regrid(spec: ProblemSpec, grid: int) -> ProblemSpec:
    """Override the grid, capping the eigenpair count at what the grid resolves."""
    return spec.with_grid(grid, min(spec.eigenpairs, max(1, grid // 4)))


def cmd_forward(args) -> int:
    started = time.perf_counter()
    spec = read_problem(args.problem)
    if args.grid is not None:
        spec = regrid(spec, args.grid)
    params = {"mode": args.mode, "grid_per_interval": spec.grid_per_interval, "eigenpairs": spec.eigenpairs}
    if args.dump_pairs:
        from .laplace_domain import interval_data

        for i, pair in enumerate(interval_data(spec).pairs):
            dump_pair_csv(pair, Path(args.dump_pairs) / f"pair_{i}.csv")
    if args.mode == "laplace":
        p = parse_grid(args.p_grid)
        sols = [solve_bvp(spec, pk, extrapolate=args.extrapolate) for pk in p]
        cols = [p, np.array([s.flux_left for s in sols]), np.array([s.flux_right for s in sols])]
        header = ["p", "flux_left", "flux_right"]
        for j in range(1, spec.n + 1):
            header.append(f"h_{j}")
            cols.append(np.array([s.traces[j] for s in sols]))
        params.update(p_grid=args.p_grid, extrapolate=args.extrapolate)
    else:
        t = parse_grid(args.t_grid)
        contour = contour_from(args)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fl, fr = time_fluxes(spec, contour, t, threads=args.threads, tol=args.tol)
        header, cols = ["t", "flux_left", "flux_right"], [t, fl, fr]
        params.update(t_grid=args.t_grid, contour=asdict(contour))
    emit(args, csv_text(header, cols), [args.problem], params, started)
    return EXIT_OK


def cmd_asymptotics(args) -> int:
    started = time.perf_counter()
    spec = read_problem(args.problem)
    if args.grid is not None:
        spec = regrid(spec, args.grid)
    fac, xt, prof = profiles_for(spec)
    exp = expansion_coefficients(spec, args.side, profiles=prof)
    report = exp.to_json()
    report["xtable"] = xt.to_json()
    report["factors"] = {
        k: np.asarray(getattr(fac, k)).tolist()
        for k in ("c_star", "d_star", "c0_star", "cminus_star", "d0_star", "dminus_star")
    }
    report["m_factors"] = prof.M.tolist()
    report["sign_violations"] = exp.sign_violations()
    params = {"side": args.side, "grid_per_interval": spec.grid_per_interval, "eigenpairs": spec.eigenpairs}
    if args.verify:
        check = verify_expansion(spec, args.side, parse_grid(args.p_grid))
        report["verification"] = {"slope": check.slope, "target": check.target, "pass": check.passed}
        params["p_grid"] = args.p_grid
    emit(args, json_text(report), [args.problem], params, started)
    return EXIT_OK


def cmd_transform(args) -> int:
    started = time.perf_counter()
    domain, t, f, col = read_series(args.data, args.column)
    if domain != "time":
        raise InputError(f"{args.data}: transform needs a time CSV (first column 't')")
    p = parse_grid(args.p_grid)
    series = laplace_from_time(FluxSeries("time", t, f, col), p, degree=args.degree)
    params = {"p_grid": args.p_grid, "degree": args.degree, "column": col}
    emit(args, csv_text(["p", "flux"], [series.abscissa, series.values]), [args.data], params, started)
    return EXIT_OK


def cmd_invert(args) -> int:
    started = time.perf_counter()
    domain, x, f, col = read_series(args.data, args.column)
    inputs = [args.data]
    if domain == "time":
        p = parse_grid(args.p_grid)
        series = laplace_from_time(FluxSeries("time", x, f, col), p)
    else:
        series = FluxSeries("laplace", x, f, col)
    known = args.medium != "none"
    window = parse_pair(args.p_window) if args.p_window else None
    params = {
        "side": args.side, "medium": args.medium, "monotone": args.monotone, "max_terms": args.max_terms,
        "p_window": window, "merge_tol": args.merge_tol, "input_domain": domain,
    }
    if known:
        if args.monotone == "none":
            raise InputError(
                "breakpoint recovery with a known medium needs a monotone order; "
                "use --monotone inc|dec, or --medium none for range-only output"
            )
        spec, excitation = read_known(args.medium)
        inputs.append(args.medium)
        far = args.side != excitation.side
        fit = fit_exponents(series, excitation, args.max_terms, args.merge_tol, window, far_end=far)
        rec = recover_breakpoints(fit, spec.medium, args.monotone, excitation.side)
        report = {"mode": "breakpoints", "fit": fit.to_json(), "recovered": rec.to_json()}
    else:
        far = args.excited is not None and args.excited != args.side
        fit = fit_exponents(series, None, args.max_terms, args.merge_tol, window, far_end=far)
        report = {"mode": "range", "fit": fit.to_json(), "range": list(recover_range(fit))}
    if not fit.sign_ok:
        log.warning("fitted coefficients violate the sign law")
    emit(args, json_text(report), inputs, params, started)
    return EXIT_OK


def _check(rows: list, name: str, value, threshold, vacuous: bool = False, above: bool = False):
    """Append a table row; the value must be below ``threshold`` (above it with ``above``)."""
    if vacuous:
        rows.append({"invariant": name, "value": None, "threshold": threshold, "status": "vacuous"})
    else:
        ok = bool(np.isfinite(value) and (value > threshold if above else value < threshold))
        rows.append({"invariant": name, "value": float(value), "threshold": threshold,
                     "status": "pass" if ok else "fail"})


def cmd_verify(args) -> int:
    started = time.perf_counter()
    spec = read_problem(args.problem)
    if args.grid is not None:
        spec = regrid(spec, args.grid)
    tol = args.tol
    rows: list[dict] = []
    n0 = spec.n == 0
    try:
        fac, xt, prof = profiles_for(spec)
    except AdmissibilityError as exc:
        rows.append({"invariant": "X table", "value": None, "threshold": None, "status": f"fail: {exc}"})
        fac = xt = prof = None
    if prof is not None:
        _check(rows, "M_i = 1", prof.m_deviation(), tol)
        xmin = min((xt(m, spec.n) for m in range(1, spec.n + 1)), default=1.0)
        _check(rows, "min X_m^n > 0", xmin, 0.0, vacuous=n0, above=True)
        bounds = fac.bound_violations()
        _check(rows, "d* < 0 and c* >= 1 - d*", float(len(bounds)), 0.5, vacuous=n0)
        _check(rows, "descent identity", xt.descent_residual, tol, vacuous=n0)
        _check(rows, "determinant identity", xt.determinant_residual, tol, vacuous=n0)
        jumps = float(np.max(np.abs(prof.derivative_jumps))) if prof.derivative_jumps.size else 0.0
        _check(rows, "profile derivative jumps", jumps, 1e-6, vacuous=n0)
    # identities are stated for left excitation; the excitation side does not enter them
    left_spec = ProblemSpec(spec.order, spec.medium, BoundaryExcitation(spec.excitation.coeffs, "left"),
                            spec.grid_per_interval, spec.eigenpairs)
    r_res, cont = 0.0, 0.0
    for p in args.p:
        sol = solve_bvp(left_spec, p)
        cont = max(cont, float(np.max(sol.continuity)) if sol.continuity.size else 0.0)
        if not n0:
            state = interface_recursion(*cd_factors(left_spec, p))
            rep = verify_coefficient_identities(sol, state, left_spec)
            r_res = max(r_res, rep.r_residual, rep.r_tilde_residual)
    _check(rows, "r_n h_n = h_0 and r~_n h_n = h_1", r_res, 1e-6, vacuous=n0)
    _check(rows, "flux continuity at breakpoints", cont, args.continuity_tol, vacuous=n0)
    all_ok = all(r["status"] in ("pass", "vacuous") for r in rows)
    width = max(len(r["invariant"]) for r in rows)
    for r in rows:
        val = "-" if r["value"] is None else f"{r['value']:.3e}"
        print(f"{r['invariant']:<{width}}  {val:>11}  {r['status']}")
    report = {"invariants": rows, "pass": all_ok}
    params = {"p": list(args.p), "grid_per_interval": spec.grid_per_interval, "eigenpairs": spec.eigenpairs}
    if args.out is not None:
        emit(args, json_text(report), [args.problem], params, started)
    return EXIT_OK if all_ok else EXIT_FAILED


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="varorder", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=1, help="worker threads for data-parallel maps")
    ap.add_argument("--seed", type=int, default=0, help="recorded in manifests; all algorithms are deterministic")
    ap.add_argument("--tol", type=float, default=1e-8, help="tolerance for identity checks and contour truncation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, grid=True):
        sp.add_argument("-o", "--out", help="output file (default: stdout)")
        if grid:
            sp.add_argument("--grid", type=int, help="override grid_per_interval")

    sp = sub.add_parser("forward", help="boundary fluxes in the Laplace or time domain")
    sp.add_argument("problem")
    sp.add_argument("--mode", choices=("laplace", "time"), default="laplace")
    sp.add_argument("--p-grid", default="1e-6:1:log61")
    sp.add_argument("--t-grid", default="0.01:100:log41")
    sp.add_argument("--extrapolate", action="store_true", help="Richardson-extrapolate from half the grid")
    sp.add_argument("--theta", type=float, default=0.75, help="ray angle as a multiple of pi")
    sp.add_argument("--delta", type=float, default=1.0, help="arc radius in units of 1/t")
    sp.add_argument("--quad-nodes", type=int, default=16)
    sp.add_argument("--dump-pairs", metavar="DIR", help="write per-interval x,v,w,dv,dw CSVs to DIR")
    common(sp)
    sp.set_defaults(func=cmd_forward)

    sp = sub.add_parser("asymptotics", help="small-p expansion coefficients")
    sp.add_argument("problem")
    sp.add_argument("--side", choices=("left", "right"), default="left")
    sp.add_argument("--verify", action="store_true", help="fit the remainder slope")
    sp.add_argument("--p-grid", default="1e-6:1e-3:log25")
    common(sp)
    sp.set_defaults(func=cmd_asymptotics)

    sp = sub.add_parser("transform", help="Laplace transform of a time CSV")
    sp.add_argument("data")
    sp.add_argument("--p-grid", default="1e-2:1:log21")
    sp.add_argument("--degree", type=int, help="excitation degree for the tail model")
    sp.add_argument("--column", help="flux column (default: the second)")
    common(sp, grid=False)
    sp.set_defaults(func=cmd_transform)

    sp = sub.add_parser("invert", help="recover the order from flux data")
    sp.add_argument("data")
    sp.add_argument("--side", choices=("left", "right"), default="left", help="end where the flux was measured")
    sp.add_argument("--medium", required=True, help="problem file with the known medium and excitation, or 'none'")
    sp.add_argument("--excited", choices=("left", "right"),
                    help="excited end when --medium none (default: the measured end)")
    sp.add_argument("--monotone", choices=("inc", "dec", "none"), default="inc")
    sp.add_argument("--max-terms", type=int, default=3)
    sp.add_argument("--p-window", help="lo,hi fit window")
    sp.add_argument("--merge-tol", type=float, default=0.02)
    sp.add_argument("--p-grid", default="1e-6:1e-3:log40", help="transform grid for time CSV input")
    sp.add_argument("--column", help="flux column (default: the second)")
    common(sp, grid=False)
    sp.set_defaults(func=cmd_invert)

    sp = sub.add_parser("verify", help="check the structural invariants of a problem")
    sp.add_argument("problem")
    sp.add_argument("--p", type=float, nargs="+", default=[1e-6, 1e-5, 1e-4])
    sp.add_argument("--continuity-tol", type=float, default=1e-3)
    common(sp)
    sp.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except ProblemFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for v in getattr(exc, "violations", ()):
            print(f"  {v}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, CoverageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FitError, InversionError) as exc:
        print(f"error: no convergence: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (ArithmeticError, SmallPError, AdmissibilityError, np.linalg.LinAlgError) as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
