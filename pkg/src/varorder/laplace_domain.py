"""Laplace-domain boundary value problem and the interface recursion.

For each Laplace variable ``p`` the transformed solution solves

    -(sigma U')' + (rho p**alpha(x) + q) U = 0   on (0, L)

with the excitation transform at one end and zero at the other.  Its values
``h_j`` at the breakpoints are linked by a three-term relation whose
coefficients ``c_m(p)``, ``d_m(p)`` come from per-interval eigen-series.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .model import MIN_GRID, ProblemSpec, ghat
from .sturm_liouville import (
    AuxiliarySeries,
    EigenSystem,
    FundamentalPair,
    StarredConstants,
    auxiliary_series,
    dirichlet_solve,
    eigenpairs,
    fundamental_solutions,
    interval_grid,
    left_flux,
    right_flux,
    solve_tridiagonal,
    starred_constants,
    stencil,
)

__all__ = [
    "GlobalGrid",
    "LaplaceSolution",
    "RecursionState",
    "IdentityReport",
    "SmallPError",
    "global_grid",
    "interval_data",
    "solve_bvp",
    "solve_nodal",
    "cd_factors",
    "interface_recursion",
    "verify_coefficient_identities",
    "flux_from_series",
    "eigen_expansion",
    "tridiagonal_traces",
]


class SmallPError(ArithmeticError):
    """Raised when ``p`` is too large for the small-p recursion to be defined."""


@dataclass(frozen=True)
class GlobalGrid:
    """Union of the per-interval uniform grids; breakpoints are nodes."""

    x: np.ndarray
    h: np.ndarray
    sigma: np.ndarray
    sigma_face: np.ndarray
    rho_l: np.ndarray
    rho_r: np.ndarray
    q_l: np.ndarray
    q_r: np.ndarray
    alpha: np.ndarray  # per cell
    nodes: tuple[int, ...]  # index of every breakpoint, 0 .. n+1

    def coefficient(self, p):
        """Cell-end samples of ``rho p**alpha + q``; ``p`` may be an array (batch axis first)."""
        p = np.asarray(p)
        pa = p[..., None] ** self.alpha
        return self.q_l + self.rho_l * pa, self.q_r + self.rho_r * pa


@lru_cache(maxsize=32)
def _global_grid(order, medium, grid_n: int) -> GlobalGrid:
    parts = [interval_grid(medium, a, b, grid_n) for a, b in order.intervals]
    x = np.concatenate([parts[0].x] + [g.x[1:] for g in parts[1:]])
    sig = np.concatenate([parts[0].sigma] + [g.sigma[1:] for g in parts[1:]])
    cat = lambda name: np.concatenate([getattr(g, name) for g in parts])  # noqa: E731
    h = np.concatenate([np.full(g.n, g.h) for g in parts])
    alpha = np.concatenate([np.full(g.n, a) for g, a in zip(parts, order.values)])
    nodes = tuple(int(i) * grid_n for i in range(len(parts) + 1))
    arrays = dict(x=x, h=h, sigma=sig, sigma_face=cat("sigma_face"), rho_l=cat("rho_l"), rho_r=cat("rho_r"),
                  q_l=cat("q_l"), q_r=cat("q_r"), alpha=alpha)
    for a in arrays.values():
        a.setflags(write=False)
    return GlobalGrid(nodes=nodes, **arrays)


def global_grid(spec: ProblemSpec) -> GlobalGrid:
    return _global_grid(spec.order, spec.medium, spec.grid_per_interval)


@dataclass(frozen=True)
class IntervalData:
    pairs: tuple[FundamentalPair, ...]
    eigs: tuple[EigenSystem, ...]
    stars: tuple[StarredConstants, ...]


@lru_cache(maxsize=16)
def _interval_data(order, medium, grid_n: int, K: int) -> IntervalData:
    pairs = tuple(fundamental_solutions(medium, iv, grid_n) for iv in order.intervals)
    eigs = tuple(eigenpairs(medium, iv, K, grid_n) for iv in order.intervals)
    stars = tuple(starred_constants(pr) for pr in pairs)
    return IntervalData(pairs, eigs, stars)


def interval_data(spec: ProblemSpec) -> IntervalData:
    """Fundamental pairs, eigensystems and starred constants of every interval (cached)."""
    return _interval_data(spec.order, spec.medium, spec.grid_per_interval, spec.eigenpairs)


def aux_at(spec: ProblemSpec, p: float) -> list[AuxiliarySeries]:
    data = interval_data(spec)
    return [
        auxiliary_series(e, (pr.sigma_left, pr.sigma_right), p, a, st)
        for pr, e, st, a in zip(data.pairs, data.eigs, data.stars, spec.order.values)
    ]


def solve_nodal(grid: GlobalGrid, p, left, right):
    """Nodal solution for one or many (possibly complex) ``p``; batch axis first."""
    c_l, c_r = grid.coefficient(p)
    diag, off = stencil(grid.h, grid.sigma_face, c_l, c_r)
    return dirichlet_solve(diag, off, left, right), c_l, c_r


@dataclass(frozen=True)
class LaplaceSolution:
    """Transformed solution at one ``p``.

    ``flux_left``/``flux_right`` are the derivatives ``dU/dx`` at ``0`` and ``L``.
    ``continuity`` holds the interface mismatch of one-sided second-order
    derivative stencils, relative to the local derivative scale.
    """

    p: float
    x: np.ndarray
    values: np.ndarray
    traces: np.ndarray
    flux_left: float
    flux_right: float
    side: str = "left"
    continuity: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n(self) -> int:
        return len(self.traces) - 2


def _one_sided_derivatives(x, u, i):
    hl = x[i] - x[i - 1]
    hr = x[i + 1] - x[i]
    d_minus = (3 * u[i] - 4 * u[i - 1] + u[i - 2]) / (2 * hl)
    d_plus = (-3 * u[i] + 4 * u[i + 1] - u[i + 2]) / (2 * hr)
    return d_minus, d_plus


def solve_bvp(spec: ProblemSpec, p: float, extrapolate: bool = False) -> LaplaceSolution:
    """Solve the global Laplace-domain problem at real ``p > 0``.

    With ``extrapolate`` the traces and boundary derivatives are Richardson
    extrapolated from this grid and the one with half as many cells, which
    removes the leading ``h**2`` error term.  Nodal values stay on the fine
    grid.
    """
    p = float(p)
    if extrapolate:
        fine = solve_bvp(spec, p)
        coarse_n = spec.grid_per_interval // 2
        if spec.grid_per_interval % 2 or coarse_n < MIN_GRID:
            raise ValueError("extrapolation needs an even grid with at least 2*MIN_GRID cells per interval")
        coarse = solve_bvp(spec.with_grid(coarse_n), p)
        rich = lambda a, b: (4.0 * a - b) / 3.0  # noqa: E731
        return LaplaceSolution(
            p, fine.x, fine.values, rich(fine.traces, coarse.traces),
            float(rich(fine.flux_left, coarse.flux_left)), float(rich(fine.flux_right, coarse.flux_right)),
            fine.side, fine.continuity,
        )
    if not p > 0:
        raise ValueError(f"p must be positive, got {p}")
    grid = global_grid(spec)
    g = float(ghat(spec.excitation, p))
    left, right = (g, 0.0) if spec.excitation.side == "left" else (0.0, g)
    u, c_l, c_r = solve_nodal(grid, p, left, right)
    if not np.all(np.isfinite(u)):
        raise ArithmeticError(f"non-finite Laplace solution at p={p:g}")
    fl = left_flux(u, grid.h[0], grid.sigma_face[0], c_l[0]) / grid.sigma[0]
    fr = right_flux(u, grid.h[-1], grid.sigma_face[-1], c_r[-1]) / grid.sigma[-1]
    cont = []
    for i in grid.nodes[1:-1]:
        dm, dp = _one_sided_derivatives(grid.x, u, i)
        cont.append(abs(dp - dm) / max(abs(dp), abs(dm), 1e-300))
    return LaplaceSolution(p, grid.x, u, u[list(grid.nodes)].copy(), float(fl), float(fr),
                           spec.excitation.side, np.asarray(cont))


def cd_factors(spec: ProblemSpec, p: float, pairs=None, aux=None):
    """Quotients ``c_m(p)``, ``d_m(p)`` for ``m = 1..n``.

    Raises :class:`SmallPError` when a denominator is not positive (its sign
    at ``p = 0`` is that of ``-sigma v'_{m-1}(x_m) > 0``).
    """
    if pairs is None:
        pairs = interval_data(spec).pairs
    if aux is None:
        aux = aux_at(spec, p)
    c, d = [], []
    for m in range(1, spec.n + 1):
        prev, cur = pairs[m - 1], pairs[m]
        s = cur.sigma_left
        den = aux[m - 1].F - s * prev.dv_right
        if not den > 0:
            raise SmallPError(f"p outside small-p regime (p_0 exceeded): denominator {den:.3g} at interface {m}, p={p:g}")
        c.append((aux[m].E + aux[m - 1].G - s * cur.dv_left + s * prev.dw_right) / den)
        d.append(-(aux[m].F + s * cur.dw_left) / den)
    return np.asarray(c), np.asarray(d)


@dataclass(frozen=True)
class RecursionState:
    c: np.ndarray
    d: np.ndarray
    r: np.ndarray  # r_0 .. r_n
    s: np.ndarray  # s_0 .. s_n
    r_tilde: np.ndarray  # r~_1 .. r~_n
    s_tilde: np.ndarray  # s~_1 .. s~_n


def interface_recursion(c, d) -> RecursionState:
    c = np.asarray(c, dtype=float)
    d = np.asarray(d, dtype=float)
    if c.shape != d.shape:
        raise ValueError("c and d must have equal length")
    n = len(c)
    r = np.zeros(n + 1)
    s = np.zeros(n + 1)
    r[0] = 1.0
    for m in range(1, n + 1):
        r[m] = c[m - 1] * r[m - 1] + s[m - 1]
        s[m] = d[m - 1] * r[m - 1]
    rt = np.zeros(n)
    st = np.zeros(n)
    if n:
        rt[0] = 1.0
        for m in range(2, n + 1):
            rt[m - 1] = c[m - 1] * rt[m - 2] + st[m - 2]
            st[m - 1] = d[m - 1] * rt[m - 2]
    return RecursionState(c, d, r, s, rt, st)


def tridiagonal_traces(spec: ProblemSpec, p: float, aux=None) -> np.ndarray:
    """Traces ``h_0..h_{n+1}`` from the three-term relation alone (left excitation)."""
    c, d = cd_factors(spec, p, aux=aux)
    n = spec.n
    h = np.zeros(n + 2)
    h[0] = float(ghat(spec.excitation, p))
    if n == 0:
        return h
    # rows m=1..n: c_m h_m + d_m h_{m+1} = h_{m-1}
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    for m in range(1, n + 1):
        A[m - 1, m - 1] = c[m - 1]
        if m < n:
            A[m - 1, m] = d[m - 1]
        if m > 1:
            A[m - 1, m - 2] = -1.0
    rhs[0] = h[0]
    h[1:-1] = np.linalg.solve(A, rhs)
    return h


@dataclass(frozen=True)
class IdentityReport:
    p: float
    r_residual: float  # |r_n h_n - h_0| / |h_0|
    r_tilde_residual: float  # |r~_n h_n - h_1| / |h_0|
    tridiagonal_residuals: np.ndarray

    @property
    def vacuous(self) -> bool:
        return len(self.tridiagonal_residuals) == 0

    def max_residual(self) -> float:
        vals = [self.r_residual, self.r_tilde_residual, *self.tridiagonal_residuals]
        return float(max(vals)) if not self.vacuous else 0.0


def verify_coefficient_identities(sol: LaplaceSolution, state: RecursionState, spec: ProblemSpec | None = None,
                                  aux=None) -> IdentityReport:
    """Residuals of ``r_n h_n = h_0``, ``r~_n h_n = h_1`` and of the three-term system.

    The traces must come from a left-excited solve.  The three-term residuals
    need ``spec`` (for the fundamental pairs) and the auxiliary series.
    """
    n = sol.n
    if n == 0:
        return IdentityReport(sol.p, 0.0, 0.0, np.zeros(0))
    if sol.side != "left":
        raise ValueError("coefficient identities are stated for left excitation")
    h = sol.traces
    scale = abs(h[0])
    r1 = abs(state.r[n] * h[n] - h[0]) / scale
    r2 = abs(state.r_tilde[n - 1] * h[n] - h[1]) / scale
    tri = []
    if spec is not None:
        pairs = interval_data(spec).pairs
        aux = aux if aux is not None else aux_at(spec, sol.p)
        for j in range(1, n + 1):
            s = pairs[j].sigma_left
            lhs = h[j] * (aux[j].E + aux[j - 1].G - s * pairs[j].dv_left + s * pairs[j - 1].dw_right)
            rhs = h[j - 1] * (aux[j - 1].F - s * pairs[j - 1].dv_right) + h[j + 1] * (aux[j].F + s * pairs[j].dw_left)
            tri.append(abs(lhs - rhs) / scale)
    return IdentityReport(sol.p, float(r1), float(r2), np.asarray(tri))


def flux_from_series(spec: ProblemSpec, p: float, traces, aux=None) -> tuple[float, float]:
    """Boundary derivatives assembled from the end traces and the auxiliaries.

    Left: ``sigma(0) U'(0) = h_0 sigma v_0'(0) + h_1 sigma w_0'(0) + h_1 F_0 - h_0 E_0``.
    Right: ``sigma(L) U'(L) = h_n (sigma v_n'(L) - F_n) + h_{n+1} (sigma w_n'(L) + G_n)``.
    """
    pairs = interval_data(spec).pairs
    aux = aux if aux is not None else aux_at(spec, p)
    h = np.asarray(traces)
    a0, an = aux[0], aux[-1]
    p0, pn = pairs[0], pairs[-1]
    s0, sL = p0.sigma_left, pn.sigma_right
    left = h[0] * (s0 * p0.dv_left - a0.E) + h[1] * (s0 * p0.dw_left + a0.F)
    right = h[-2] * (sL * pn.dv_right - an.F) + h[-1] * (sL * pn.dw_right + an.G)
    return float(left / s0), float(right / sL)


@dataclass(frozen=True)
class EigenExpansion:
    x: np.ndarray
    values: np.ndarray  # truncated expansion at probe points
    envelope: np.ndarray  # bound on the omitted modes


def eigen_expansion(spec: ProblemSpec, p: float, traces, probes) -> EigenExpansion:
    """Evaluate the local eigenfunction representation at grid ``probes``.

    Each probe must be a grid node strictly inside some interval.  The
    envelope bounds the modes beyond ``K`` by Cauchy-Schwarz on the residual
    coefficient mass and the residual of the discrete Green function.
    """
    data = interval_data(spec)
    h = np.asarray(traces)
    probes = np.atleast_1d(np.asarray(probes, dtype=float))
    vals = np.empty(probes.size)
    env = np.empty(probes.size)
    bps = spec.order.breakpoints
    for i, xp in enumerate(probes):
        j = int(np.clip(np.searchsorted(bps, xp, side="right") - 1, 0, spec.n))
        pr, eg = data.pairs[j], data.eigs[j]
        g = pr.grid
        k = int(round((xp - g.a) / g.h))
        if not 0 < k < g.n or abs(g.x[k] - xp) > 1e-9 * max(1.0, abs(xp)):
            raise ValueError(f"probe {xp} is not an interior grid node of interval {j}")
        pa = p ** spec.order.values[j]
        lam = eg.lam
        a_k = (h[j] * pr.sigma_left * eg.dphi_left - h[j + 1] * pr.sigma_right * eg.dphi_right) / lam
        base = h[j] * pr.v + h[j + 1] * pr.w
        series = -np.sum((pa / (pa + lam)) * a_k * eg.phi[:, k])
        vals[i] = base[k] + series
        mass = g.lumped_mass[1:-1]
        r_a = max(float(np.sum(mass * base[1:-1] ** 2) - np.sum(a_k**2)), 0.0)
        diag, off = stencil(g.h, g.sigma_face, g.q_l, g.q_r)
        e = np.zeros(g.n - 1)
        e[k - 1] = 1.0
        z = solve_tridiagonal(off[1:-1], diag[1:-1], off[1:-1], e)
        s_k = float(np.sum(mass * z**2))
        r_s = max(s_k - float(np.sum(eg.phi[:, k] ** 2 / lam**2)), 0.0)
        env[i] = pa * np.sqrt(r_a) * np.sqrt(r_s)
    return EigenExpansion(probes, vals, env)

