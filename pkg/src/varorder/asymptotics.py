"""Small-p limits: interface factors, the X table, canonical profiles and
the first-order flux expansion coefficients.

Conventions.  ``u`` solves the p-free problem with data ``u(0)=1, u(L)=0``
and ``ubar`` the one with ``ubar(0)=0, ubar(L)=1``.  For excitation at end
``a`` and measurement at end ``e`` the flux ratio behaves like

    U'(e)/ghat = phi_a'(e) + sum_i s_e (phi_a, phi_e)_i / sigma(e) * p**alpha_i + ...

with ``phi_left = u``, ``phi_right = ubar`` and ``s_e = -1`` at the left end,
``+1`` at the right end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma

from .laplace_domain import interval_data, solve_bvp
from .model import BoundaryExcitation, ProblemSpec, ghat
from .sturm_liouville import FundamentalPair, StarredConstants, weighted_inner

__all__ = [
    "AdmissibilityError",
    "InterfaceFactors",
    "XTable",
    "CanonicalProfiles",
    "AsymptoticExpansion",
    "ExpansionCheck",
    "interface_factors",
    "x_table",
    "canonical_profiles",
    "expansion_coefficients",
    "verify_expansion",
    "fit_slope",
    "trace_expansions",
    "tauberian_time_asymptote",
    "tauberian_polynomial",
    "profiles_for",
    "flux_ratio",
]

IDENTITY_TOL = 1e-8


class AdmissibilityError(ArithmeticError):
    """A structural invariant that must hold exactly failed, which signals corrupted numerics."""


@dataclass(frozen=True)
class InterfaceFactors:
    """Limits and first-order coefficients of ``c_m(p)``, ``d_m(p)``, m = 1..n.

    ``c_m(p) ~ c_star + c0_star p**alpha_m + cminus_star p**alpha_{m-1}``
    and likewise for ``d``.
    """

    c_star: np.ndarray
    d_star: np.ndarray
    c0_star: np.ndarray
    cminus_star: np.ndarray
    d0_star: np.ndarray
    dminus_star: np.ndarray

    @property
    def n(self) -> int:
        return len(self.c_star)

    def bound_violations(self) -> list[str]:
        out = []
        for m, (c, d) in enumerate(zip(self.c_star, self.d_star), start=1):
            if not d < 0:
                out.append(f"d*_{m} = {d:.6g} is not negative")
            if not c >= (1.0 - d) * (1 - 1e-12):
                out.append(f"c*_{m} = {c:.6g} < 1 - d*_{m} = {1 - d:.6g}")
        return out


def interface_factors(pairs, stars, sigma=None) -> InterfaceFactors:
    """Evaluate the starred factors from endpoint derivatives and starred constants.

    ``sigma`` (callable) overrides the nodal diffusivity stored on the pairs.
    """
    pairs = list(pairs)
    stars = list(stars)
    n = len(pairs) - 1
    out = {k: np.zeros(n) for k in ("c", "d", "c0", "cm", "d0", "dm")}
    for m in range(1, n + 1):
        prev: FundamentalPair = pairs[m - 1]
        cur: FundamentalPair = pairs[m]
        sp: StarredConstants = stars[m - 1]
        sc: StarredConstants = stars[m]
        s = float(sigma(cur.interval[0])) if sigma is not None else cur.sigma_left
        vp = prev.dv_right
        c = (cur.dv_left - prev.dw_right) / vp
        d = cur.dw_left / vp
        out["c"][m - 1] = c
        out["d"][m - 1] = d
        out["c0"][m - 1] = -sc.E_star / (s * vp)
        out["cm"][m - 1] = -(sp.G_star - c * sp.F_star) / (s * vp)
        out["d0"][m - 1] = sc.F_star / (s * vp)
        out["dm"][m - 1] = d * sp.F_star / (s * vp)
    return InterfaceFactors(out["c"], out["d"], out["c0"], out["cm"], out["d0"], out["dm"])


@dataclass(frozen=True)
class XTable:
    """``X[l, m]`` for ``1 <= l <= n+2`` and ``0 <= m <= n`` (row 0 unused)."""

    X: np.ndarray
    n: int
    descent_residual: float = 0.0
    determinant_residual: float = 0.0

    def __call__(self, l: int, m: int) -> float:
        return float(self.X[l, m])

    def to_json(self) -> list[list[float]]:
        return [[float(v) for v in row] for row in self.X[1:]]


def x_table(factors: InterfaceFactors, n: int | None = None) -> XTable:
    """Fill the X table and police its positivity and identities."""
    n = factors.n if n is None else n
    if n != factors.n:
        raise ValueError(f"factors describe {factors.n} interfaces, not {n}")
    c = np.concatenate([[np.nan], factors.c_star])  # 1-based
    d = np.concatenate([[np.nan], factors.d_star])
    X = np.zeros((n + 3, n + 1))
    for l in range(1, n + 3):
        for m in range(0, n + 1):
            if m < l - 1:
                X[l, m] = 0.0
            elif m == l - 1:
                X[l, m] = 1.0
            elif m == l:
                X[l, m] = c[l]
            else:
                X[l, m] = c[m] * X[l, m - 1] + d[m - 1] * X[l, m - 2]
    for m in range(1, n + 1):
        if not X[m, n] > 0:
            raise AdmissibilityError(f"admissibility breach: X_{m}^{n} = {X[m, n]:.6g} is not positive")
    desc = 0.0
    for m in range(1, n + 1):
        lhs = c[m] * X[m + 1, n] + d[m] * X[m + 2, n]
        desc = max(desc, abs(lhs - X[m, n]) / abs(X[m, n]))
    det = 0.0
    prod = 1.0
    for m in range(1, n + 1):
        prod *= d[m]
        lhs = X[2, m] * X[1, n] - X[1, m] * X[2, n]
        rhs = (-1) ** (m + 1) * X[m + 2, n] * prod
        det = max(det, abs(lhs - rhs) / max(abs(X[2, m] * X[1, n]), abs(X[1, m] * X[2, n]), abs(rhs), 1e-300))
    if desc > IDENTITY_TOL or det > IDENTITY_TOL:
        raise AdmissibilityError(f"admissibility breach: X identities fail (descent {desc:.3g}, determinant {det:.3g})")
    return XTable(X, n, desc, det)


@dataclass(frozen=True)
class CanonicalProfiles:
    """Per-interval pieces of ``u``, ``ubar``, ``utilde`` and the ``M`` factors.

    ``a_u[i], b_u[i]`` are the coefficients of ``v_i, w_i`` in ``u`` on
    interval ``i``; likewise for ``ubar`` and ``utilde``.
    ``value_jumps`` and ``derivative_jumps`` hold, per breakpoint, the
    mismatches ``(u, ubar)`` of the one-sided values and scheme derivatives.
    """

    pairs: tuple[FundamentalPair, ...]
    a_u: np.ndarray
    b_u: np.ndarray
    a_ubar: np.ndarray
    b_ubar: np.ndarray
    a_ut: np.ndarray
    b_ut: np.ndarray
    M: np.ndarray  # M_{-1} .. M_n
    value_jumps: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    derivative_jumps: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def piece(self, name: str, i: int) -> np.ndarray:
        a, b = {"u": (self.a_u, self.b_u), "ubar": (self.a_ubar, self.b_ubar),
                "utilde": (self.a_ut, self.b_ut)}[name]
        pr = self.pairs[i]
        return a[i] * pr.v + b[i] * pr.w

    def dpiece(self, name: str, i: int, end: str) -> float:
        a, b = {"u": (self.a_u, self.b_u), "ubar": (self.a_ubar, self.b_ubar),
                "utilde": (self.a_ut, self.b_ut)}[name]
        pr = self.pairs[i]
        if end == "left":
            return a[i] * pr.dv_left + b[i] * pr.dw_left
        return a[i] * pr.dv_right + b[i] * pr.dw_right

    def on_grid(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Global ``(x, values)`` with breakpoints listed once."""
        xs = [self.pairs[0].x] + [pr.x[1:] for pr in self.pairs[1:]]
        vs = [self.piece(name, 0)] + [self.piece(name, i)[1:] for i in range(1, len(self.pairs))]
        return np.concatenate(xs), np.concatenate(vs)

    @property
    def u(self):
        return self.on_grid("u")[1]

    @property
    def ubar(self):
        return self.on_grid("ubar")[1]

    @property
    def utilde(self):
        return self.on_grid("utilde")[1]

    def inner(self, f: str, g: str, i: int, rule: str = "simpson") -> float:
        return weighted_inner(self.pairs[i].grid, self.piece(f, i), self.piece(g, i), rule)

    def m_deviation(self) -> float:
        return float(np.max(np.abs(self.M - 1.0)))


def canonical_profiles(pairs, xtable: XTable, sigma=None, tol: float = 1e-6) -> CanonicalProfiles:
    """Assemble ``u``, ``ubar``, ``utilde`` and ``M`` from the pairs and X table.

    Raises :class:`AdmissibilityError` with per-breakpoint jumps when the
    gluing residual exceeds ``tol``.
    """
    pairs = tuple(pairs)
    n = len(pairs) - 1
    if xtable.n != n:
        raise ValueError(f"X table has n={xtable.n}, pairs describe n={n}")
    X = xtable.X
    sig = (lambda x: float(sigma(x))) if sigma is not None else None
    s_at = [pairs[0].sigma_left] + [pr.sigma_right for pr in pairs]  # sigma(x_0..x_{n+1})
    if sig is not None:
        s_at = [sig(pairs[0].interval[0])] + [sig(pr.interval[1]) for pr in pairs]
    sL = s_at[-1]
    vnL = pairs[-1].dv_right
    x1n = X[1, n]
    a_u = np.array([X[i + 1, n] / x1n for i in range(n + 1)])
    b_u = np.array([X[i + 2, n] / x1n for i in range(n + 1)])
    a_ub = np.zeros(n + 1)
    b_ub = np.zeros(n + 1)
    for i in range(n + 1):
        if i > 0:
            a_ub[i] = X[1, i - 1] / x1n * (vnL / pairs[i - 1].dv_right) * (sL / s_at[i])
        b_ub[i] = X[1, i] / x1n * (vnL / pairs[i].dv_right) * (sL / s_at[i + 1])
    M = np.ones(n + 2)  # M[0] is M_{-1}
    prod = 1.0
    for i in range(n + 1):
        prod *= pairs[i].dw_left / (-pairs[i].dv_right)
        M[i + 1] = s_at[0] / s_at[i + 1] * prod
    a_ut = a_u * M[:-1]
    b_ut = b_u * M[1:]
    prof = CanonicalProfiles(pairs, a_u, b_u, a_ub, b_ub, a_ut, b_ut, M)
    vj, dj = [], []
    for m in range(1, n + 1):
        row_v, row_d = [], []
        for name in ("u", "ubar"):
            left = prof.piece(name, m - 1)[-1]
            right = prof.piece(name, m)[0]
            row_v.append(right - left)
            dl = s_at[m] * prof.dpiece(name, m - 1, "right")
            dr = s_at[m] * prof.dpiece(name, m, "left")
            scale = max(abs(dl), abs(dr), 1e-300)
            row_d.append((dr - dl) / scale)
        vj.append(row_v)
        dj.append(row_d)
    vj = np.asarray(vj).reshape(-1, 2)
    dj = np.asarray(dj).reshape(-1, 2)
    prof = CanonicalProfiles(pairs, a_u, b_u, a_ub, b_ub, a_ut, b_ut, M, vj, dj)
    worst = max(np.max(np.abs(vj), initial=0.0), np.max(np.abs(dj), initial=0.0))
    if worst > tol:
        detail = "; ".join(
            f"x_{m}: value jumps {vj[m - 1]}, derivative jumps {dj[m - 1]}" for m in range(1, n + 1)
        )
        raise AdmissibilityError(f"gluing residual {worst:.3g} exceeds {tol:g}: {detail}")
    return prof


@dataclass(frozen=True)
class AsymptoticExpansion:
    """``U'(end)/ghat = C0 + sum_i C_{i+1} p**alpha_i + O(p**residual_order)``.

    ``side`` names the measured end (``left_flux`` or ``right_flux``);
    ``excitation`` the end carrying the datum.
    """

    side: str
    C0: float
    terms: tuple[tuple[float, float], ...]
    residual_order: float
    excitation: str = "left"

    @property
    def alphas(self) -> np.ndarray:
        return np.array([a for a, _ in self.terms])

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([c for _, c in self.terms])

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        out = np.full(p.shape, self.C0)
        for a, c in self.terms:
            out = out + c * p**a
        return out

    def level_sets(self) -> dict[float, float]:
        """Coefficients summed over equal exponents."""
        out: dict[float, float] = {}
        for a, c in self.terms:
            out[a] = out.get(a, 0.0) + c
        return out

    def expected_sign(self) -> float:
        """Sign of every first-order coefficient implied by positivity of the profiles."""
        return -1.0 if self.side == "left_flux" else 1.0

    def sign_violations(self) -> list[int]:
        s = self.expected_sign()
        return [i for i, (_, c) in enumerate(self.terms) if not c * s > 0]

    def to_json(self) -> dict:
        return {
            "side": self.side,
            "excitation": self.excitation,
            "C0": self.C0,
            "terms": [{"alpha": a, "C": c} for a, c in self.terms],
            "residual_order": self.residual_order,
        }


def _side_name(side: str) -> str:
    aliases = {"left": "left_flux", "right": "right_flux", "left_flux": "left_flux", "right_flux": "right_flux"}
    try:
        return aliases[side]
    except KeyError:
        raise ValueError(f"side must be left_flux or right_flux, got {side!r}") from None


def profiles_for(spec: ProblemSpec, tol: float = 1e-6):
    data = interval_data(spec)
    fac = interface_factors(data.pairs, data.stars)
    xt = x_table(fac)
    return fac, xt, canonical_profiles(data.pairs, xt, tol=tol)


def expansion_coefficients(spec: ProblemSpec, side: str = "left_flux", rule: str = "simpson",
                           profiles: CanonicalProfiles | None = None) -> AsymptoticExpansion:
    """Coefficients of the first-order small-p expansion of the boundary flux ratio.

    ``rule="trapezoid"`` returns the coefficients the discrete solver obeys
    exactly (lumped mass); the default Simpson rule is the accurate continuum
    value.
    """
    side = _side_name(side)
    if profiles is None:
        profiles = profiles_for(spec)[2]
    prof = profiles
    pairs = prof.pairs
    n = len(pairs) - 1
    exc = spec.excitation.side
    src = "u" if exc == "left" else "ubar"
    if side == "left_flux":
        other, sgn, s_e = "u", -1.0, pairs[0].sigma_left
        C0 = prof.dpiece(src, 0, "left")
    else:
        other, sgn, s_e = "ubar", 1.0, pairs[-1].sigma_right
        C0 = prof.dpiece(src, n, "right")
    terms = tuple(
        (spec.order.values[i], sgn * prof.inner(src, other, i, rule) / s_e) for i in range(n + 1)
    )
    return AsymptoticExpansion(side, float(C0), terms, 2.0 * min(spec.order.values), exc)


def fit_slope(p, r, middle: float = 0.6) -> tuple[float, float]:
    """Least-squares slope of ``log|r|`` against ``log p`` on the middle fraction of the range."""
    lp = np.log(np.asarray(p, dtype=float))
    lr = np.log(np.abs(np.asarray(r, dtype=float)))
    lo, hi = lp.min(), lp.max()
    pad = 0.5 * (1.0 - middle) * (hi - lo)
    sel = (lp >= lo + pad - 1e-12) & (lp <= hi - pad + 1e-12) & np.isfinite(lr)
    if sel.sum() < 2:
        sel = np.isfinite(lr)
    A = np.column_stack([lp[sel], np.ones(sel.sum())])
    coef, *_ = np.linalg.lstsq(A, lr[sel], rcond=None)
    return float(coef[0]), float(coef[1])


@dataclass(frozen=True)
class ExpansionCheck:
    slope: float
    target: float
    passed: bool
    p: np.ndarray
    residuals: np.ndarray

    def to_json(self) -> dict:
        return {"slope": self.slope, "target": self.target, "pass": self.passed,
                "p": self.p.tolist(), "residuals": self.residuals.tolist()}


def verify_expansion(spec: ProblemSpec, side: str, p_grid, expansion: AsymptoticExpansion | None = None,
                     tol: float = 0.05, middle: float = 0.6) -> ExpansionCheck:
    """Fit the decay order of ``flux/ghat - expansion`` over ``p_grid``.

    Without an explicit ``expansion`` the lumped-mass coefficients are used,
    so the residual reflects the remainder and not quadrature mismatch.
    """
    side = _side_name(side)
    p = np.sort(np.asarray(p_grid, dtype=float))
    if p.size < 8 or np.log10(p[-1] / p[0]) < 3 - 1e-9 or p[-1] >= 1 or p[0] <= 0:
        raise ValueError("p_grid must hold at least 8 points in (0, 1) spanning 3 decades")
    if expansion is None:
        expansion = expansion_coefficients(spec, side, rule="trapezoid")
    res = np.empty(p.size)
    for k, pk in enumerate(p):
        sol = solve_bvp(spec, pk)
        flux = sol.flux_left if side == "left_flux" else sol.flux_right
        res[k] = flux / ghat(spec.excitation, pk) - expansion(pk)
    slope, _ = fit_slope(p, res, middle)
    target = expansion.residual_order
    return ExpansionCheck(slope, target, bool(slope >= target - tol), p, res)


def trace_expansions(spec: ProblemSpec, rule: str = "simpson", profiles: CanonicalProfiles | None = None):
    """First-order expansions of ``h_1/ghat`` and ``h_n/ghat`` (left excitation).

    Returns two ``(leading, ((alpha_i, coeff_i), ...))`` tuples.
    """
    fac, xt, prof = profiles_for(spec) if profiles is None else (None, None, profiles)
    pairs = prof.pairs
    n = len(pairs) - 1
    alphas = spec.order.values
    s0 = pairs[0].sigma_left
    sL = pairs[-1].sigma_right
    w00 = pairs[0].dw_left
    vnL = pairs[-1].dv_right
    lead1 = prof.b_u[0]  # X_2^n / X_1^n
    leadn = prof.a_u[n]  # 1 / X_1^n
    t1, tn = [], []
    for i in range(n + 1):
        g = pairs[i].grid
        u_i = prof.piece("u", i)
        ut_i = prof.piece("utilde", i) - (pairs[0].v if i == 0 else 0.0)
        ub_i = prof.piece("ubar", i) - (pairs[-1].w if i == n else 0.0)
        t1.append((alphas[i], -weighted_inner(g, u_i, ut_i, rule) / (s0 * w00)))
        tn.append((alphas[i], weighted_inner(g, u_i, ub_i, rule) / (sL * vnL)))
    return (float(lead1), tuple(t1)), (float(leadn), tuple(tn))


def tauberian_time_asymptote(expansion: AsymptoticExpansion, s: float, t_grid) -> np.ndarray:
    """Large-time flux asymptote for ``ghat(p) = p**(s-1)``, ``s < -1``."""
    if not s < -1:
        raise ValueError(f"s must be < -1, got {s}")
    t = np.asarray(t_grid, dtype=float)
    if np.any(t <= 0):
        raise ValueError("t_grid must be positive")
    exps = [(-s, 1.0 - s, expansion.C0)] + [(-s - a, 1.0 - s - a, c) for a, c in expansion.terms]
    out = np.zeros_like(t)
    for power, garg, c in exps:
        if garg <= 0 and float(garg).is_integer():
            raise ValueError(f"Gamma pole at argument {garg}")
        out = out + c * t**power / gamma(garg)
    return out


def tauberian_polynomial(expansion: AsymptoticExpansion, excitation: BoundaryExcitation, t_grid) -> np.ndarray:
    """Asymptote for a polynomial datum, summed term by term (``s = -k``)."""
    from math import factorial

    t = np.asarray(t_grid, dtype=float)
    out = np.zeros_like(t)
    for k, g in enumerate(excitation.coeffs, start=2):
        if g:
            out = out + g * factorial(k) * tauberian_time_asymptote(expansion, -float(k), t)
    return out


def flux_ratio(spec: ProblemSpec, p, side: str = "left_flux") -> np.ndarray:
    """``flux/ghat`` from the solver at each ``p`` (helper for checks)."""
    side = _side_name(side)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    out = np.empty(p.size)
    for k, pk in enumerate(p):
        sol = solve_bvp(spec, pk)
        out[k] = (sol.flux_left if side == "left_flux" else sol.flux_right) / ghat(spec.excitation, pk)
    return out
