"""Recover the variable order from small-p flux data.

The flux ratio is fitted to ``C0 + sum_i C_i p**a_i`` plus nuisance
monomials that absorb the leading remainder (``p**(a_i + a_j)``, and for
an unknown excitation the integer powers from lower-degree datum terms).
Amplitudes are linear given the exponents, so the exponents are found by
variable projection.  Breakpoints then follow from the cumulative weighted
mass of the canonical profile, obtained by integrating an initial value
problem with the fitted ``C0`` as initial slope.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, least_squares

from .model import (
    BoundaryExcitation,
    MediumCoefficients,
    PiecewiseOrder,
    PiecewisePolynomial,
    ghat,
    order_violations,
)
from .time_domain import FluxSeries

__all__ = [
    "FitError",
    "InversionError",
    "ExponentFit",
    "RecoveredOrder",
    "fit_exponents",
    "estimate_degree",
    "recover_breakpoints",
    "recover_range",
    "recover_constant_rho",
    "profile_ivp",
]

log = logging.getLogger(__name__)

A_LO, A_HI = 0.01, 0.99
CANCELLATION_MAX = 3.0


class FitError(RuntimeError):
    """Exponent fit failed (underdetermined window or no admissible model)."""


class InversionError(ValueError):
    """Fitted coefficients are inconsistent with the declared medium."""


@dataclass(frozen=True)
class ExponentFit:
    """Fitted expansion ``y = C0 + sum C_i p**alpha_i`` of the normalized flux.

    ``scale`` is the factor the flux was divided by after normalization
    (``ghat`` when the excitation is known, else ``p**-(N+1)`` and a unit
    rescaling); coefficients are reported in the normalized units.
    """

    C0_hat: float
    terms: tuple[tuple[float, float], ...]
    residual_norm: float
    p_window: tuple[float, float]
    degree: int | None = None
    far_end: bool = False
    sign_ok: bool = True
    candidates: tuple[dict, ...] = field(default_factory=tuple)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([a for a, _ in self.terms])

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([c for _, c in self.terms])

    def to_json(self) -> dict:
        return {
            "C0": self.C0_hat,
            "terms": [{"alpha": a, "C": c} for a, c in self.terms],
            "residual_norm": self.residual_norm,
            "p_window": list(self.p_window),
            "degree": self.degree,
            "sign_ok": self.sign_ok,
            "candidates": list(self.candidates),
        }


@dataclass(frozen=True)
class RecoveredOrder:
    breakpoints_hat: tuple[float, ...]
    values_hat: tuple[float, ...]
    range_hat: tuple[float, ...]
    diagnostics: dict = field(default_factory=dict)

    def order(self) -> PiecewiseOrder:
        return PiecewiseOrder(self.breakpoints_hat, self.values_hat)

    def to_json(self) -> dict:
        return {
            "breakpoints": list(self.breakpoints_hat),
            "values": list(self.values_hat),
            "range": list(self.range_hat),
            "diagnostics": self.diagnostics,
        }


# ----------------------------------------------------------------------------
# exponent fitting
# ----------------------------------------------------------------------------

def estimate_degree(p, flux, max_degree: int = 12, decades: float = 1.0) -> int:
    """Integer ``N`` whose ``p**-(N+1)`` law best matches the smallest-p data."""
    p = np.asarray(p, dtype=float)
    f = np.abs(np.asarray(flux, dtype=float))
    sel = p <= p.min() * 10**decades
    if sel.sum() < 3:
        sel = np.argsort(p)[:3]
    lp, lf = np.log(p[sel]), np.log(f[sel])
    best, best_r = 2, np.inf
    for N in range(2, max_degree + 1):
        r = lf + (N + 1) * lp
        res = float(np.sum((r - r.mean()) ** 2))
        if res < best_r:
            best, best_r = N, res
    return best


def _nuisance(alphas, order: int) -> list[float]:
    out = set()
    for k in range(2, order + 1):
        for combo in itertools.combinations_with_replacement(alphas, k):
            out.add(round(sum(combo), 12))
    return sorted(out)


class _Problem:
    """Variable-projection objective.

    Nonlinear parameters are the exponents followed by ``n_poly``
    coefficients of the datum polynomial ``1 + b_1 p + ...`` that multiplies
    the expansion when the excitation is unknown.
    """

    def __init__(self, p, y, nuisance_order, n_poly=0):
        self.p = p
        self.lp = np.log(p)
        self.y = y
        self.order = nuisance_order
        self.n_poly = n_poly
        self.p_hi = float(p.max())

    def split(self, x):
        x = np.asarray(x, dtype=float)
        m = x.size - self.n_poly
        return np.sort(x[:m]), x[m:]

    def target(self, b):
        if not len(b):
            return self.y
        return self.y / np.polyval(np.r_[b[::-1], 1.0], self.p)

    def design(self, alphas):
        nz = [e for e in _nuisance(alphas, self.order) if self.p_hi**e > 1e-13]
        cols = [np.ones_like(self.p)] + [np.exp(a * self.lp) for a in alphas] + [np.exp(e * self.lp) for e in nz]
        return np.column_stack(cols), len(nz)

    def solve(self, x):
        alphas, b = self.split(x)
        y = self.target(b)
        w = 1.0 / np.abs(y)
        A, k = self.design(alphas)
        Aw = A * w[:, None]
        norms = np.linalg.norm(Aw, axis=0)
        coef, *_ = np.linalg.lstsq(Aw / norms, y * w, rcond=1e-14)
        coef = coef / norms
        return coef, (A @ coef - y) * w, k

    def residual(self, x):
        return self.solve(x)[1]

    def cancellation(self, x, coef) -> float:
        # near-collinear columns fit the data through large cancelling terms
        alphas, b = self.split(x)
        A, _ = self.design(alphas)
        spread = np.max(np.abs(self.target(b) - coef[0]))
        if spread == 0:
            return 1.0
        return float(np.max(np.sum(np.abs(A[:, 1:] * coef[1:]), axis=1)) / spread)


def _refine(prob: _Problem, start, radius: float):
    """Levenberg-Marquardt refinement from a grid seed.

    Exponents that leave the box of half-width ``radius`` around the seed are
    discarded so each seed only explores its own basin.  The coarse
    difference step is needed because the objective sits near machine
    precision at the optimum, where trust-region steps stall.
    """
    start = np.asarray(start, dtype=float)
    m = start.size - prob.n_poly
    try:
        res = least_squares(prob.residual, start, method="lm", x_scale=0.1, diff_step=1e-6,
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200 * start.size)
    except (ValueError, np.linalg.LinAlgError):
        return None
    x = res.x
    a = x[:m]
    if not np.all(np.isfinite(x)) or np.any(np.abs(a - start[:m]) > radius) or a.min() < A_LO or a.max() > A_HI:
        return None
    order = np.argsort(a)
    return np.r_[a[order], x[m:]]


def _merge(alphas, merge_tol):
    groups: list[list[float]] = []
    for a in np.sort(alphas):
        if groups and a - groups[-1][-1] < merge_tol:
            groups[-1].append(a)
        else:
            groups.append([a])
    return np.array([np.mean(g) for g in groups]), len(groups) < len(alphas)


def _aicc(rss, n, k, floor):
    rss = max(rss, n * floor**2)
    corr = 2.0 * k * (k + 1) / (n - k - 1) if n - k - 1 > 0 else np.inf
    return n * math.log(rss / n) + 2 * k + corr


def _assess(prob: _Problem, x, far_end, merge_tol, significance, precision) -> dict:
    a, b = prob.split(x)
    coef, r, k_nuis = prob.solve(x)
    C0, C = float(coef[0]), coef[1:1 + len(a)]
    rss = float(np.sum(r**2))
    n = prob.p.size
    k = 1 + 2 * len(a) + k_nuis + prob.n_poly
    contrib = np.abs(C) * prob.p_hi**a
    spread = float(np.max(np.abs(prob.target(b) - C0)))
    why = []
    if np.any(contrib < significance * max(contrib.max(), spread)):
        why.append("insignificant term")
    if np.any(a <= A_LO + 5e-3) or np.any(a >= A_HI - 5e-3):
        why.append("exponent at search bound")
    if len(a) > 1 and np.any(np.diff(a) < merge_tol):
        why.append("unmerged exponents")
    expected = -np.sign(C0) if far_end else np.sign(C0)
    sign_ok = bool(np.all(np.sign(C) == expected))
    if not sign_ok:
        why.append("sign law violated")
    if a.max() >= 2 * a.min():
        why.append("max alpha >= 2 min alpha")
    cancellation = prob.cancellation(x, coef)
    if cancellation > CANCELLATION_MAX:
        why.append("cancelling terms")
    return dict(m=len(a), alphas=a.tolist(), C0=C0, C=C.tolist(), datum=b.tolist(), rss=rss,
                aicc=_aicc(rss, n, k, precision), rejected=why, sign_ok=sign_ok,
                cancellation=cancellation)


def _seeds(m: int, step: float):
    grid = np.arange(0.05, 0.95 + 1e-9, step)
    for combo in itertools.combinations(grid, m):
        if combo[-1] < 2.0 * combo[0]:
            yield np.asarray(combo)


def fit_exponents(
    data: FluxSeries,
    excitation: BoundaryExcitation | None = None,
    max_terms: int = 3,
    merge_tol: float = 0.02,
    p_window: tuple[float, float] | None = None,
    far_end: bool = False,
    nuisance_order: int = 2,
    precision: float = 1e-10,
    significance: float = 1e-3,
) -> ExponentFit:
    """Fit exponents and coefficients of the first-order expansion.

    Every admissible exponent tuple on a coarse grid seeds a local
    Levenberg-Marquardt refinement; the lowest-residual admissible result is
    kept for each term count and the count is chosen by AICc.

    Parameters
    ----------
    data
        Laplace-domain flux samples.
    excitation
        Known datum; ``None`` normalizes by the fitted ``p**-(N+1)`` law and
        fits the lower-degree datum terms as a polynomial factor.
    far_end
        Whether the flux is measured at the end opposite the excitation,
        which flips the expected sign of the first-order coefficients.
    precision
        Relative accuracy of the data; residuals below it do not count as
        improvements during model selection.
    significance
        Terms contributing less than this fraction of the largest first-order
        term at the top of the window are rejected as spurious.
    """
    if data.domain != "laplace":
        raise ValueError("fit_exponents needs Laplace-domain samples")
    p_all, f_all = data.abscissa, data.values
    lo, hi = p_window if p_window is not None else (p_all.min(), min(p_all.max(), 1e-3))
    sel = (p_all >= lo * (1 - 1e-12)) & (p_all <= hi * (1 + 1e-12))
    p, f = p_all[sel], f_all[sel]
    if p.size < 4 * max_terms:
        raise FitError(f"underdetermined window: {p.size} samples for up to {max_terms} terms (need {4 * max_terms})")
    if np.log10(p.max() / p.min()) < 3 - 1e-9:
        raise FitError("the p window must span at least three decades")
    if np.any(f == 0):
        raise FitError("flux data contain zeros")
    degree = None
    n_poly = 0
    if excitation is not None:
        y = f / ghat(excitation, p)
    else:
        degree = estimate_degree(p, f)
        n_poly = degree - 2
        y = f * p ** (degree + 1.0)
        y = y / abs(y[np.argmin(p)])
    prob = _Problem(p, y, nuisance_order, n_poly)
    cands = []
    for m in range(1, max_terms + 1):
        step = {1: 0.05, 2: 0.05, 3: 0.1}.get(m, 0.15)
        best = None
        for s0 in _seeds(m, step):
            x = _refine(prob, np.r_[s0, np.zeros(n_poly)], 2 * step)
            if x is None:
                continue
            a, b = prob.split(x)
            merged, did = _merge(a, merge_tol)
            if did:
                x = _refine(prob, np.r_[merged, b], 2 * step)
                if x is None:
                    continue
            c = _assess(prob, x, far_end, merge_tol, significance, precision)
            if best is None or (bool(c["rejected"]), c["rss"]) < (bool(best["rejected"]), best["rss"]):
                best = c
        if best is not None:
            cands.append(best)
    ok = [c for c in cands if not c["rejected"]]
    if not ok:
        raise FitError("no admissible model: " + "; ".join(f"m={c['m']}: {', '.join(c['rejected'])}" for c in cands))
    best = min(ok, key=lambda c: c["aicc"])
    return ExponentFit(
        best["C0"],
        tuple(zip(best["alphas"], best["C"])),
        float(math.sqrt(best["rss"] / p.size)),
        (float(p.min()), float(p.max())),
        degree,
        far_end,
        best["sign_ok"],
        tuple(cands),
    )


# ----------------------------------------------------------------------------
# profile reconstruction
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ProfileIVP:
    """Two independent p-free solutions and their weighted Gram integrals.

    ``y1(0)=1, sigma y1'(0)=0`` and ``y2(0)=0, sigma y2'(0)=1``; the state
    is integrated piecewise across the coefficient meshes.
    """

    x_max: float
    segments: tuple

    def state(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty((7, x.size))
        for k, xv in enumerate(x):
            for a, b, sol in self.segments:
                if xv <= b + 1e-15 or sol is self.segments[-1][2]:
                    out[:, k] = sol(min(max(xv, a), b))
                    break
        return out


def profile_ivp(medium: MediumCoefficients, x_max: float, rtol: float = 1e-11) -> ProfileIVP:
    """Integrate ``(sigma y')' = q y`` with the Gram integrals up to ``x_max``.

    The coefficient pieces are continued past the medium domain when
    ``x_max`` exceeds it (the last polynomial piece is extrapolated).
    """
    nodes = sorted(set(medium.rho.mesh) | set(medium.sigma.mesh) | set(medium.q.mesh))
    nodes = [x for x in nodes if 0.0 < x < x_max] + [x_max]
    y0 = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
    segs = []
    a = 0.0

    for b in nodes:
        mid = 0.5 * (a + b)
        side_r = lambda x, f: f(x, side="right") if x < mid else f(x, side="left")  # noqa: E731

        def rhs(x, s, side_r=side_r):
            sig = float(medium.sigma(x, side="mean"))
            q = float(side_r(x, medium.q))
            rho = float(side_r(x, medium.rho))
            y1, f1, y2, f2 = s[0], s[1], s[2], s[3]
            return [f1 / sig, q * y1, f2 / sig, q * y2, rho * y1 * y1, rho * y1 * y2, rho * y2 * y2]

        sol = solve_ivp(rhs, (a, b), y0, method="DOP853", rtol=rtol, atol=1e-14, dense_output=True)
        if not sol.success:
            raise InversionError(f"profile integration failed on [{a}, {b}]: {sol.message}")
        segs.append((a, b, sol.sol))
        y0 = sol.y[:, -1]
        a = b
    return ProfileIVP(x_max, tuple(segs))


def _domain_end(medium: MediumCoefficients) -> float:
    return medium.domain[1]


def _first_root(fun, lo, hi, n=400):
    xs = np.linspace(lo, hi, n + 1)
    vals = np.array([fun(x) for x in xs])
    idx = np.nonzero(np.sign(vals[1:]) != np.sign(vals[:-1]))[0]
    if idx.size == 0:
        return None
    i = int(idx[0])
    return brentq(fun, xs[i], xs[i + 1], xtol=1e-14, rtol=1e-14)


def _profile_pair(fit: ExponentFit, medium: MediumCoefficients, excitation_side: str, reach: float):
    """Length and cumulative-mass function of the reconstructed profiles."""
    s0 = float(medium.sigma(0.0, side="right"))
    ivp = profile_ivp(medium, reach)
    if excitation_side == "left":
        k = s0 * fit.C0_hat  # u = y1 + k y2

        def u_of(x):
            st = ivp.state(x)
            return st[0] + k * st[2]

        L = _first_root(lambda x: float(u_of(x)[0]), 1e-12 * reach, reach)
        if L is None:
            raise InversionError(f"u has no zero in (0, {reach:g}]: inconsistent C0 = {fit.C0_hat:g}")

        def mass(x):
            st = ivp.state(x)
            return st[4] + 2 * k * st[5] + k * k * st[6]

        return L, mass, s0
    if excitation_side == "right":
        kb = s0 * fit.C0_hat  # ubar = kb y2
        if not kb > 0:
            raise InversionError(f"right excitation needs a positive C0, got {fit.C0_hat:g}")
        L = _first_root(lambda x: float(kb * ivp.state(x)[2][0] - 1.0), 1e-12 * reach, reach)
        if L is None:
            raise InversionError(f"ubar never reaches 1 in (0, {reach:g}]: inconsistent C0 = {fit.C0_hat:g}")
        stL = ivp.state(L)
        c = -stL[0][0] / stL[2][0]  # u = y1 + c y2 vanishes at L

        def mass(x):
            st = ivp.state(x)
            return kb * (st[5] + c * st[6])

        return L, mass, s0
    raise ValueError(f"excitation_side must be 'left' or 'right', got {excitation_side!r}")


def _reflected_fit(fit: ExponentFit) -> ExponentFit:
    # x -> L - x flips the sign of every flux coefficient
    return ExponentFit(
        -fit.C0_hat, tuple((a, -c) for a, c in fit.terms), fit.residual_norm, fit.p_window,
        fit.degree, fit.far_end, fit.sign_ok, fit.candidates,
    )


def _measured_end(fit: ExponentFit, excitation_side: str) -> str:
    if excitation_side not in ("left", "right"):
        raise ValueError(f"excitation_side must be 'left' or 'right', got {excitation_side!r}")
    if not fit.far_end:
        return excitation_side
    return "right" if excitation_side == "left" else "left"


def recover_breakpoints(
    fit: ExponentFit,
    medium: MediumCoefficients,
    monotone: str = "increasing",
    excitation_side: str = "left",
    reach: float | None = None,
) -> RecoveredOrder:
    """Breakpoints of a monotone order from a fit of a boundary flux.

    ``fit`` must be normalized by the known excitation; its ``far_end`` flag
    says whether the flux was measured at the end opposite ``excitation_side``.
    Each first-order coefficient is the weighted mass of the reconstructed
    profile on one piece, so the breakpoints are the levels of the
    cumulative mass.  Right-end measurements are handled in the mirrored
    medium.
    """
    mono = {"increasing": "increasing", "inc": "increasing", "decreasing": "decreasing", "dec": "decreasing"}.get(
        monotone
    )
    if mono is None:
        raise ValueError("breakpoint recovery needs a monotone order ('increasing' or 'decreasing')")
    if fit.degree is not None:
        raise ValueError("breakpoint recovery needs a fit normalized by the known excitation")
    if _measured_end(fit, excitation_side) == "right":
        L = _domain_end(medium)
        flipped = "decreasing" if mono == "increasing" else "increasing"
        other = "right" if excitation_side == "left" else "left"
        rec = recover_breakpoints(_reflected_fit(fit), medium.reflected(L), flipped, other, reach)
        bps = tuple(float(L - b) for b in reversed(rec.breakpoints_hat))
        bps = (0.0,) + bps[1:]
        diag = dict(rec.diagnostics, monotone=mono, mirrored=True)
        return RecoveredOrder(bps, tuple(reversed(rec.values_hat)), rec.range_hat, diag)
    reach = 1.5 * _domain_end(medium) if reach is None else reach
    L, mass, s0 = _profile_pair(fit, medium, excitation_side, reach)
    order_idx = np.argsort(fit.alphas)
    if mono == "decreasing":
        order_idx = order_idx[::-1]
    alphas = fit.alphas[order_idx]
    masses = -s0 * fit.coeffs[order_idx]
    if np.any(masses <= 0):
        raise InversionError(f"nonpositive piece mass from coefficients {fit.coeffs.tolist()}")
    total = float(mass(L)[0])
    levels = np.cumsum(masses)
    bps = [0.0]
    for i, lev in enumerate(levels[:-1]):
        if lev >= total:
            raise InversionError(f"coefficient mass exceeds remaining mass at piece {i} ({lev:g} >= {total:g})")
        x = brentq(lambda x: float(mass(x)[0]) - lev, bps[-1], L, xtol=1e-14, rtol=1e-14)
        bps.append(float(x))
    bps.append(float(L))
    rec = RecoveredOrder(
        tuple(bps),
        tuple(float(a) for a in alphas),
        tuple(sorted(float(a) for a in fit.alphas)),
        {
            "L_hat": float(L),
            "mass_total": total,
            "mass_fitted": float(levels[-1]),
            "mass_mismatch": float(abs(levels[-1] - total) / total),
            "fit_residual": fit.residual_norm,
            "monotone": mono,
        },
    )
    viol = order_violations(rec.order())
    if not viol.ok:
        rec.diagnostics["violations"] = viol.messages()
    return rec


def recover_range(fit: ExponentFit) -> tuple[float, ...]:
    """The set of order values, one per exponent level set."""
    return tuple(sorted(float(a) for a in fit.alphas))


def recover_constant_rho(
    fit: ExponentFit,
    sigma: PiecewisePolynomial,
    q: PiecewisePolynomial | None = None,
    excitation_side: str = "left",
    reach: float | None = None,
) -> tuple[float, float]:
    """Length and constant density from a fit normalized by the known excitation.

    Returns ``(L_hat, rho_hat)``.  The flux must be measured at ``x = 0``
    since the unknown length rules out mirroring the medium.
    """
    if _measured_end(fit, excitation_side) != "left":
        raise ValueError("constant-density recovery needs the flux at x = 0")
    a, b = sigma.domain
    q = q if q is not None else PiecewisePolynomial.constant(0.0, a, b)
    medium = MediumCoefficients(PiecewisePolynomial.constant(1.0, a, b), sigma, q)
    reach = 1.5 * b if reach is None else reach
    L, mass, s0 = _profile_pair(fit, medium, excitation_side, reach)
    rho = -s0 * float(np.sum(fit.coeffs)) / float(mass(L)[0])
    if not rho > 0:
        raise InversionError(f"inconsistent data: nonpositive density estimate {rho:g}")
    return float(L), float(rho)


def expansion_series(fit: ExponentFit, p: Sequence[float]) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    out = np.full(p.shape, fit.C0_hat)
    for a, c in fit.terms:
        out = out + c * p**a
    return out
