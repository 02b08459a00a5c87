"""Problem description: variable order, medium, boundary excitation.

Everything here is immutable.  Structural problems (wrong shapes, unsorted
breakpoints, non-finite numbers) are rejected when a problem file is parsed;
the mathematical admissibility conditions are collected by :func:`validate`,
which never raises.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

__all__ = [
    "PiecewisePolynomial",
    "PiecewiseOrder",
    "MediumCoefficients",
    "BoundaryExcitation",
    "ProblemSpec",
    "Violation",
    "ValidationReport",
    "ProblemFileError",
    "validate",
    "order_violations",
    "ghat",
    "load_problem",
    "save_problem",
    "problem_from_dict",
    "problem_to_dict",
    "MIN_GRID",
]

#: smallest accepted number of grid cells per subinterval
MIN_GRID = 16

# dense sampling used by the bound checks
_SAMPLES_PER_CELL = 64


@dataclass(frozen=True)
class PiecewisePolynomial:
    """Piecewise polynomial on ``mesh``.

    Cell ``i`` covers ``[mesh[i], mesh[i+1]]`` and carries ascending
    coefficients in the local variable ``x - mesh[i]``.
    """

    mesh: tuple[float, ...]
    coeffs: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        # tuples keep specs hashable for the grid caches
        object.__setattr__(self, "mesh", tuple(float(m) for m in self.mesh))
        object.__setattr__(self, "coeffs", tuple(tuple(float(c) for c in row) for row in self.coeffs))

    @classmethod
    def constant(cls, value: float, a: float, b: float) -> PiecewisePolynomial:
        return cls((float(a), float(b)), ((float(value),),))

    @classmethod
    def from_arrays(cls, mesh: Sequence[float], coeffs: Sequence[Sequence[float]]) -> PiecewisePolynomial:
        return cls(tuple(float(m) for m in mesh), tuple(tuple(float(c) for c in row) for row in coeffs))

    @property
    def domain(self) -> tuple[float, float]:
        return self.mesh[0], self.mesh[-1]

    @property
    def is_constant(self) -> bool:
        return len(self.coeffs) == 1 and all(c == 0.0 for c in self.coeffs[0][1:])

    def _cell(self, x: np.ndarray, side: str) -> np.ndarray:
        mesh = np.asarray(self.mesh)
        if side == "left":
            idx = np.searchsorted(mesh, x, side="left") - 1
        else:
            idx = np.searchsorted(mesh, x, side="right") - 1
        return np.clip(idx, 0, len(self.coeffs) - 1)

    def _eval_side(self, x: np.ndarray, side: str, deriv: int) -> np.ndarray:
        idx = self._cell(x, side)
        out = np.zeros_like(x, dtype=float)
        mesh = np.asarray(self.mesh)
        for i, row in enumerate(self.coeffs):
            sel = idx == i
            if not np.any(sel):
                continue
            c = np.asarray(row, dtype=float)
            if deriv:
                c = np.polynomial.polynomial.polyder(c, deriv) if len(c) > deriv else np.zeros(1)
            out[sel] = np.polynomial.polynomial.polyval(x[sel] - mesh[i], c)
        return out

    def __call__(self, x, side: str = "mean", deriv: int = 0):
        """Evaluate at ``x``.

        ``side`` picks the cell used at mesh nodes: ``"left"`` and ``"right"``
        give one-sided limits, ``"mean"`` their average.
        """
        xa = np.asarray(x, dtype=float)
        scalar = xa.ndim == 0
        xa = np.atleast_1d(xa)
        if side == "mean":
            val = 0.5 * (self._eval_side(xa, "left", deriv) + self._eval_side(xa, "right", deriv))
        elif side in ("left", "right"):
            val = self._eval_side(xa, side, deriv)
        else:
            raise ValueError(f"unknown side {side!r}")
        return float(val[0]) if scalar else val

    def sample_grid(self, per_cell: int = _SAMPLES_PER_CELL) -> np.ndarray:
        pts = [np.linspace(a, b, per_cell + 1) for a, b in zip(self.mesh[:-1], self.mesh[1:])]
        return np.unique(np.concatenate(pts))

    def jumps(self) -> list[tuple[float, float]]:
        """Value jumps at interior mesh nodes as ``(node, right - left)``."""
        out = []
        for m in self.mesh[1:-1]:
            out.append((m, self(m, side="right") - self(m, side="left")))
        return out

    def to_json(self) -> dict:
        if self.is_constant:
            return {"const": self.coeffs[0][0]}
        return {"mesh": list(self.mesh), "poly_coeffs": [list(r) for r in self.coeffs]}


@dataclass(frozen=True)
class PiecewiseOrder:
    """Piecewise constant fractional order: ``values[i]`` on ``(breakpoints[i], breakpoints[i+1])``."""

    breakpoints: tuple[float, ...]
    values: tuple[float, ...]

    def __init__(self, breakpoints: Sequence[float], values: Sequence[float]):
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in breakpoints))
        object.__setattr__(self, "values", tuple(float(v) for v in values))

    @property
    def n(self) -> int:
        """Number of interior breakpoints."""
        return len(self.values) - 1

    @property
    def length(self) -> float:
        return self.breakpoints[-1]

    @property
    def intervals(self) -> list[tuple[float, float]]:
        return list(zip(self.breakpoints[:-1], self.breakpoints[1:]))

    def reflected(self) -> PiecewiseOrder:
        L = self.length
        return PiecewiseOrder([L - b for b in reversed(self.breakpoints)], list(reversed(self.values)))

    def __call__(self, x):
        idx = np.clip(np.searchsorted(self.breakpoints, x, side="right") - 1, 0, self.n)
        return np.asarray(self.values)[idx]


@dataclass(frozen=True)
class MediumCoefficients:
    """Density ``rho``, diffusivity ``sigma`` and potential ``q`` on ``[0, L]``.

    The bounds default to the extrema of a dense sample and can be declared
    explicitly; :func:`validate` checks the coefficients against them.
    """

    rho: PiecewisePolynomial
    sigma: PiecewisePolynomial
    q: PiecewisePolynomial
    rho_lo: float | None = None
    rho_hi: float | None = None
    sigma_lo: float | None = None
    sigma_hi: float | None = None

    def __post_init__(self):
        for name, fn in (("rho", self.rho), ("sigma", self.sigma)):
            vals = fn(fn.sample_grid(), side="right")
            vals = np.concatenate([vals, fn(fn.sample_grid(), side="left")])
            if getattr(self, f"{name}_lo") is None:
                object.__setattr__(self, f"{name}_lo", float(np.min(vals)))
            if getattr(self, f"{name}_hi") is None:
                object.__setattr__(self, f"{name}_hi", float(np.max(vals)))

    @classmethod
    def constant(cls, L: float, rho: float = 1.0, sigma: float = 1.0, q: float = 0.0) -> MediumCoefficients:
        return cls(
            PiecewisePolynomial.constant(rho, 0.0, L),
            PiecewisePolynomial.constant(sigma, 0.0, L),
            PiecewisePolynomial.constant(q, 0.0, L),
        )

    @property
    def domain(self) -> tuple[float, float]:
        lo = max(f.domain[0] for f in (self.rho, self.sigma, self.q))
        hi = min(f.domain[1] for f in (self.rho, self.sigma, self.q))
        return lo, hi

    def reflected(self, L: float) -> MediumCoefficients:
        """Coefficients of ``x -> f(L - x)``, exact for polynomial pieces."""
        return MediumCoefficients(
            _reflect(self.rho, L), _reflect(self.sigma, L), _reflect(self.q, L),
            self.rho_lo, self.rho_hi, self.sigma_lo, self.sigma_hi,
        )


def _reflect(f: PiecewisePolynomial, L: float) -> PiecewisePolynomial:
    P = np.polynomial.Polynomial
    mesh = [L - m for m in reversed(f.mesh)]
    rows = []
    for i in reversed(range(len(f.coeffs))):
        a, b = f.mesh[i], f.mesh[i + 1]
        # old local variable s = x_old - a = (L - x_new) - a = (b - a) - (x_new - (L - b))
        poly = P(f.coeffs[i])(P([b - a, -1.0]))
        c = list(poly.coef) + [0.0] * (len(f.coeffs[i]) - len(poly.coef))
        rows.append(tuple(float(v) for v in c[: len(f.coeffs[i])]))
    return PiecewisePolynomial(tuple(mesh), tuple(rows))


@dataclass(frozen=True)
class BoundaryExcitation:
    """Boundary datum ``g(t) = sum_k coeffs[k-2] t**k`` applied at ``side``."""

    coeffs: tuple[float, ...]
    side: str = "left"

    def __init__(self, coeffs: Sequence[float], side: str = "left"):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in coeffs))
        object.__setattr__(self, "side", side)

    @property
    def degree(self) -> int:
        """Declared degree ``N`` (last power carried by ``coeffs``)."""
        return len(self.coeffs) + 1

    @property
    def leading(self) -> float:
        return self.coeffs[-1]

    def scaled(self, factor: float) -> BoundaryExcitation:
        return BoundaryExcitation([factor * c for c in self.coeffs], self.side)


@dataclass(frozen=True)
class ProblemSpec:
    order: PiecewiseOrder
    medium: MediumCoefficients
    excitation: BoundaryExcitation
    grid_per_interval: int = 256
    eigenpairs: int = 64

    @property
    def n(self) -> int:
        return self.order.n

    @property
    def length(self) -> float:
        return self.order.length

    def with_grid(self, grid_per_interval: int | None = None, eigenpairs: int | None = None) -> ProblemSpec:
        return ProblemSpec(
            self.order, self.medium, self.excitation,
            self.grid_per_interval if grid_per_interval is None else grid_per_interval,
            self.eigenpairs if eigenpairs is None else eigenpairs,
        )


@dataclass(frozen=True)
class Violation:
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.location}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def messages(self) -> list[str]:
        return [str(v) for v in self.violations]


class ProblemFileError(ValueError):
    """Problem file could not be parsed or describes an inadmissible problem."""

    def __init__(self, message: str, violations: Sequence[Violation] = ()):
        super().__init__(message)
        self.violations = tuple(violations)


def _finite(x) -> bool:
    try:
        return bool(np.all(np.isfinite(np.asarray(x, dtype=float))))
    except (TypeError, ValueError):
        return False


def _check_order(order: PiecewiseOrder, out: list[Violation]) -> None:
    bp, vals = order.breakpoints, order.values
    if len(bp) < 2:
        out.append(Violation("order.breakpoints", "need at least 0 and L"))
        return
    if len(vals) != len(bp) - 1:
        out.append(Violation("order.values", f"expected {len(bp) - 1} values, got {len(vals)}"))
    if not _finite(bp) or not _finite(vals):
        out.append(Violation("order", "non-finite number"))
        return
    if bp[0] != 0.0:
        out.append(Violation("order.breakpoints[0]", f"first breakpoint must be 0, got {bp[0]}"))
    if bp[-1] <= 0.0:
        out.append(Violation("order.breakpoints[-1]", "L must be positive"))
    for i in range(len(bp) - 1):
        if not bp[i] < bp[i + 1]:
            out.append(Violation(f"order.breakpoints[{i + 1}]", "breakpoints must be strictly increasing"))
    for i, a in enumerate(vals):
        if not 0.0 < a < 1.0:
            out.append(Violation(f"order.values[{i}]", f"alpha={a} outside (0, 1)"))
    if vals and max(vals) >= 2.0 * min(vals):
        out.append(Violation("order.values", f"max alpha {max(vals)} >= 2*min alpha {2.0 * min(vals)}"))


def _check_medium(medium: MediumCoefficients, L: float | None, out: list[Violation]) -> None:
    for name in ("rho", "sigma", "q"):
        f: PiecewisePolynomial = getattr(medium, name)
        if not _finite(f.mesh) or not all(_finite(r) for r in f.coeffs):
            out.append(Violation(f"medium.{name}", "non-finite number"))
            return
        if len(f.coeffs) != len(f.mesh) - 1:
            out.append(Violation(f"medium.{name}", "poly_coeffs must have one row per mesh cell"))
            return
        if any(not a < b for a, b in zip(f.mesh[:-1], f.mesh[1:])):
            out.append(Violation(f"medium.{name}.mesh", "mesh must be strictly increasing"))
            return
        if L is not None and (f.domain[0] != 0.0 or abs(f.domain[1] - L) > 1e-12 * max(1.0, L)):
            out.append(Violation(f"medium.{name}.mesh", f"domain {f.domain} does not match [0, {L}]"))
    lo_hi = {
        "rho": (medium.rho_lo, medium.rho_hi),
        "sigma": (medium.sigma_lo, medium.sigma_hi),
    }
    for name, (lo, hi) in lo_hi.items():
        f = getattr(medium, name)
        xs = f.sample_grid()
        vals = np.concatenate([f(xs, side="left"), f(xs, side="right")])
        if not lo > 0.0:
            out.append(Violation(f"medium.{name}_lo", f"lower bound {lo} must be positive"))
        bad = np.nonzero((vals < lo) | (vals > hi))[0]
        if bad.size:
            x_bad = np.concatenate([xs, xs])[bad[0]]
            out.append(Violation(f"medium.{name}", f"value {vals[bad[0]]:.6g} at x={x_bad:.6g} outside [{lo}, {hi}]"))
    xs = medium.q.sample_grid()
    qv = np.concatenate([medium.q(xs, side="left"), medium.q(xs, side="right")])
    if np.any(qv < 0.0):
        i = int(np.argmin(qv))
        out.append(Violation("medium.q", f"negative potential {qv[i]:.6g} at x={np.concatenate([xs, xs])[i]:.6g}"))
    for node, jump in medium.sigma.jumps():
        if abs(jump) > 1e-10 * max(1.0, abs(medium.sigma(node))):
            out.append(Violation("medium.sigma", f"discontinuous at x={node} (jump {jump:.3g})"))


def order_violations(order: PiecewiseOrder) -> ValidationReport:
    """Admissibility of an order on its own."""
    out: list[Violation] = []
    _check_order(order, out)
    return ValidationReport(tuple(out))


def validate(spec: ProblemSpec) -> ValidationReport:
    """Collect every violated admissibility condition of ``spec``.

    Never raises: malformed input shows up as a violation.
    """
    out: list[Violation] = []
    try:
        _check_order(spec.order, out)
    except Exception as exc:  # pragma: no cover - defensive
        out.append(Violation("order", f"unreadable: {exc}"))
    L = None
    try:
        if _finite(spec.order.breakpoints) and spec.order.breakpoints:
            L = spec.order.breakpoints[-1]
        _check_medium(spec.medium, L, out)
    except Exception as exc:
        out.append(Violation("medium", f"unreadable: {exc}"))
    try:
        exc_ = spec.excitation
        if len(exc_.coeffs) < 1:
            out.append(Violation("excitation.coeffs", "need at least g_2 (N >= 2)"))
        elif not _finite(exc_.coeffs):
            out.append(Violation("excitation.coeffs", "non-finite number"))
        elif exc_.coeffs[-1] == 0.0:
            out.append(Violation(f"excitation.coeffs[{len(exc_.coeffs) - 1}]", f"g_N = 0 for declared N={exc_.degree}"))
        if exc_.side not in ("left", "right"):
            out.append(Violation("excitation.side", f"must be 'left' or 'right', got {exc_.side!r}"))
    except Exception as exc:
        out.append(Violation("excitation", f"unreadable: {exc}"))
    try:
        if int(spec.grid_per_interval) != spec.grid_per_interval or spec.grid_per_interval < MIN_GRID:
            out.append(Violation("discretization.grid_per_interval", f"must be an integer >= {MIN_GRID}"))
        if int(spec.eigenpairs) != spec.eigenpairs or spec.eigenpairs < 1:
            out.append(Violation("discretization.eigenpairs", "must be a positive integer"))
    except Exception as exc:
        out.append(Violation("discretization", f"unreadable: {exc}"))
    return ValidationReport(tuple(out))


def ghat(excitation: BoundaryExcitation, p):
    """Laplace transform of the polynomial excitation, ``sum g_k k! p**(-k-1)``.

    Accepts real ``p > 0`` or complex ``p`` off the closed negative real axis.
    """
    pa = np.asarray(p)
    if np.iscomplexobj(pa):
        if np.any((pa.imag == 0) & (pa.real <= 0)):
            raise ValueError("p must lie off the closed negative real axis")
    elif np.any(pa <= 0):
        raise ValueError(f"p must be positive, got {p}")
    total = np.zeros_like(pa, dtype=complex if np.iscomplexobj(pa) else float)
    for k, g in enumerate(excitation.coeffs, start=2):
        if g:
            total = total + g * math.factorial(k) * pa ** (-k - 1.0)
    return total[()] if total.ndim == 0 else total


# ----------------------------------------------------------------------------
# problem files
# ----------------------------------------------------------------------------

def _num(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ProblemFileError(f"{where}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ProblemFileError(f"{where}: NaN/Inf not permitted")
    return float(value)


def _num_list(value: Any, where: str) -> list[float]:
    if not isinstance(value, list):
        raise ProblemFileError(f"{where}: expected an array")
    return [_num(v, f"{where}[{i}]") for i, v in enumerate(value)]


def _poly_from_json(obj: Any, where: str, L: float, default: float | None = None) -> PiecewisePolynomial:
    if obj is None:
        if default is None:
            raise ProblemFileError(f"{where}: missing")
        return PiecewisePolynomial.constant(default, 0.0, L)
    if not isinstance(obj, dict):
        raise ProblemFileError(f"{where}: expected an object")
    if "const" in obj:
        if set(obj) != {"const"}:
            raise ProblemFileError(f"{where}: 'const' cannot be combined with other keys")
        return PiecewisePolynomial.constant(_num(obj["const"], f"{where}.const"), 0.0, L)
    try:
        mesh = _num_list(obj["mesh"], f"{where}.mesh")
        rows = obj["poly_coeffs"]
    except KeyError as exc:
        raise ProblemFileError(f"{where}: missing key {exc}") from None
    if not isinstance(rows, list) or len(rows) != len(mesh) - 1:
        raise ProblemFileError(f"{where}.poly_coeffs: need {len(mesh) - 1} rows for {len(mesh)} mesh nodes")
    coeffs = []
    for i, r in enumerate(rows):
        c = _num_list(r, f"{where}.poly_coeffs[{i}]")
        if not c:
            raise ProblemFileError(f"{where}.poly_coeffs[{i}]: empty row")
        coeffs.append(c)
    if any(not a < b for a, b in zip(mesh[:-1], mesh[1:])):
        raise ProblemFileError(f"{where}.mesh: must be strictly increasing")
    return PiecewisePolynomial.from_arrays(mesh, coeffs)


def problem_from_dict(data: Any) -> ProblemSpec:
    """Build a :class:`ProblemSpec` from decoded JSON (structural checks only)."""
    if not isinstance(data, dict):
        raise ProblemFileError("top level: expected an object")
    for key in ("order", "medium", "excitation"):
        if key not in data:
            raise ProblemFileError(f"top level: missing key {key!r}")
    order_d = data["order"]
    if not isinstance(order_d, dict) or "breakpoints" not in order_d or "values" not in order_d:
        raise ProblemFileError("order: need 'breakpoints' and 'values'")
    bp = _num_list(order_d["breakpoints"], "order.breakpoints")
    vals = _num_list(order_d["values"], "order.values")
    if len(bp) < 2:
        raise ProblemFileError("order.breakpoints: need at least [0, L]")
    for i in range(len(bp) - 1):
        if not bp[i] < bp[i + 1]:
            raise ProblemFileError(f"order.breakpoints[{i + 1}]: breakpoints out of order ({bp[i]} >= {bp[i + 1]})")
    if len(vals) != len(bp) - 1:
        raise ProblemFileError(f"order.values: expected {len(bp) - 1} entries, got {len(vals)}")
    L = bp[-1]
    med = data["medium"]
    if not isinstance(med, dict):
        raise ProblemFileError("medium: expected an object")
    unknown = set(med) - {"rho", "sigma", "q"}
    if unknown:
        raise ProblemFileError(f"medium: unknown keys {sorted(unknown)}")
    medium = MediumCoefficients(
        _poly_from_json(med.get("rho"), "medium.rho", L),
        _poly_from_json(med.get("sigma"), "medium.sigma", L),
        _poly_from_json(med.get("q"), "medium.q", L, default=0.0),
    )
    ex = data["excitation"]
    if not isinstance(ex, dict) or "coeffs" not in ex:
        raise ProblemFileError("excitation: need 'coeffs'")
    coeffs = _num_list(ex["coeffs"], "excitation.coeffs")
    side = ex.get("side", "left")
    if side not in ("left", "right"):
        raise ProblemFileError(f"excitation.side: must be 'left' or 'right', got {side!r}")
    disc = data.get("discretization", {})
    if not isinstance(disc, dict):
        raise ProblemFileError("discretization: expected an object")
    grid = disc.get("grid_per_interval", 256)
    eig = disc.get("eigenpairs", 64)
    for name, v in (("grid_per_interval", grid), ("eigenpairs", eig)):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ProblemFileError(f"discretization.{name}: expected an integer, got {v!r}")
    return ProblemSpec(PiecewiseOrder(bp, vals), medium, BoundaryExcitation(coeffs, side), grid, eig)


def problem_to_dict(spec: ProblemSpec) -> dict:
    """Canonical JSON form; constants use the ``{"const": c}`` shorthand."""
    return {
        "order": {"breakpoints": list(spec.order.breakpoints), "values": list(spec.order.values)},
        "medium": {
            "rho": spec.medium.rho.to_json(),
            "sigma": spec.medium.sigma.to_json(),
            "q": spec.medium.q.to_json(),
        },
        "excitation": {"coeffs": list(spec.excitation.coeffs), "side": spec.excitation.side},
        "discretization": {"grid_per_interval": spec.grid_per_interval, "eigenpairs": spec.eigenpairs},
    }


def load_problem(path, check: bool = True) -> ProblemSpec:
    """Read a problem file.

    Raises :class:`ProblemFileError` on malformed input, and, when ``check``
    is set, on an inadmissible problem (violations attached).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ProblemFileError(f"{path}: {exc.strerror or exc}") from None
    try:
        data = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ProblemFileError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    except ValueError as exc:
        raise ProblemFileError(f"{path}: {exc}") from None
    spec = problem_from_dict(data)
    if check:
        report = validate(spec)
        if not report.ok:
            raise ProblemFileError(f"{path}: inadmissible problem: " + "; ".join(report.messages()), report.violations)
    return spec


def _reject_constant(name: str):
    raise ValueError(f"{name} not permitted")


def save_problem(spec: ProblemSpec, path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(spec), indent=2) + "\n", encoding="utf-8")
