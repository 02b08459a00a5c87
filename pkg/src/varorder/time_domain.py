"""Time-domain flux by contour inversion, and the numerical Laplace transform
of sampled time series.

The solution is split as ``U = g(t) h + W`` with ``h`` the p-free profile
carrying unit data at the excited end.  ``W`` is recovered from its
transform ``ghat(p) (V(p) - h)`` along a Hankel-type contour: an arc of
radius ``delta`` around the origin and two rays at angles ``+-theta``.  The
contour is written in the scaled variable ``z = t p`` so one configuration
serves every ``t``; the rays are cut where ``exp(Re z) < 1e-16``.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson
from scipy.optimize import minimize_scalar
from scipy.special import gamma, gammaincc

from .laplace_domain import global_grid, solve_nodal
from .model import BoundaryExcitation, ProblemSpec, ghat
from .sturm_liouville import left_flux, right_flux

__all__ = [
    "ContourConfig",
    "FluxSeries",
    "CoverageError",
    "excitation_eval",
    "contour_nodes",
    "forward_flux_time",
    "time_fluxes",
    "solution_time",
    "laplace_from_time",
]

log = logging.getLogger(__name__)

_TRUNC = math.log(1e16)


class CoverageError(ValueError):
    """Time series too short for a trustworthy Laplace transform."""

    def __init__(self, message: str, required_t_max: float | None = None):
        super().__init__(message)
        self.required_t_max = required_t_max


@dataclass(frozen=True)
class ContourConfig:
    """Contour shape in the scaled variable ``z = t p``."""

    theta: float = 0.75 * math.pi
    delta: float = 1.0
    quad_nodes: int = 16

    def __post_init__(self):
        if not math.pi / 2 < self.theta < math.pi:
            raise ValueError(f"theta must lie in (pi/2, pi), got {self.theta}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.quad_nodes < 16:
            raise ValueError(f"quad_nodes must be >= 16, got {self.quad_nodes}")

    @property
    def ray_length(self) -> float:
        return max(_TRUNC / abs(math.cos(self.theta)), 4.0 * self.delta)


@dataclass(frozen=True)
class FluxSeries:
    """Sampled boundary flux, in time or in the Laplace variable."""

    domain: str
    abscissa: np.ndarray
    values: np.ndarray
    side: str = "left"

    def __post_init__(self):
        if self.domain not in ("time", "laplace"):
            raise ValueError(f"domain must be 'time' or 'laplace', got {self.domain!r}")
        a = np.asarray(self.abscissa, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if a.shape != v.shape or a.ndim != 1:
            raise ValueError("abscissa and values must be 1-D of equal length")
        if a.size and (np.any(a <= 0) or np.any(np.diff(a) <= 0)):
            raise ValueError("abscissas must be positive and strictly increasing")
        if self.domain == "time" and not np.all(np.isfinite(v)):
            raise ValueError("time-domain flux must be finite at every sample")
        object.__setattr__(self, "abscissa", a)
        object.__setattr__(self, "values", v)

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.abscissa.tolist(), self.values.tolist()))


def excitation_eval(excitation: BoundaryExcitation, t):
    """``g(t) = sum_k g_k t**k``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    out = np.zeros_like(t)
    for k, g in enumerate(excitation.coeffs, start=2):
        out = out + g * t**k
    return out[()] if out.ndim == 0 else out


def _ray_panels(delta: float, Z: float) -> np.ndarray:
    edges = [delta]
    while edges[-1] < min(4.0, Z):
        edges.append(min(2.0 * edges[-1], Z))
    while edges[-1] < Z:
        edges.append(min(edges[-1] + 4.0, Z))
    return np.asarray(edges)


def contour_nodes(contour: ContourConfig) -> tuple[np.ndarray, np.ndarray]:
    """Nodes ``z`` and weights ``dz`` on the upper half of the scaled contour.

    The arc runs from angle 0 to ``theta``, then the ray goes out to the
    truncation radius.
    """
    x, w = np.polynomial.legendre.leggauss(contour.quad_nodes)
    th, d = contour.theta, contour.delta
    phi = 0.5 * th * (x + 1.0)
    z_arc = d * np.exp(1j * phi)
    w_arc = 0.5 * th * w * 1j * z_arc
    edges = _ray_panels(d, contour.ray_length)
    zs, ws = [z_arc], [w_arc]
    e = np.exp(1j * th)
    for a, b in zip(edges[:-1], edges[1:]):
        r = 0.5 * (b - a) * (x + 1.0) + a
        zs.append(r * e)
        ws.append(0.5 * (b - a) * w * e)
    return np.concatenate(zs), np.concatenate(ws)


def _end_fluxes(grid, u, c_l, c_r):
    fl = left_flux(u, grid.h[0], grid.sigma_face[0], c_l[..., 0]) / grid.sigma[0]
    fr = right_flux(u, grid.h[-1], grid.sigma_face[-1], c_r[..., -1]) / grid.sigma[-1]
    return fl, fr


def _unit_data(spec: ProblemSpec):
    return (1.0, 0.0) if spec.excitation.side == "left" else (0.0, 1.0)


def _static_profile(spec: ProblemSpec):
    grid = global_grid(spec)
    left, right = _unit_data(spec)
    h, c_l, c_r = solve_nodal(grid, 0.0, left, right)
    return h, _end_fluxes(grid, h, c_l, c_r)


def _contour_terms(spec: ProblemSpec, t: float, z, wz, want_field: bool):
    """Contour contribution ``W(t, .)`` at one ``t`` (fluxes and optional field)."""
    grid = global_grid(spec)
    p = z / t
    left, right = _unit_data(spec)
    V, c_l, c_r = solve_nodal(grid, p, left, right)
    fl, fr = _end_fluxes(grid, V, c_l, c_r)
    h, (hl, hr) = _static_profile(spec)
    weight = np.exp(z) * ghat(spec.excitation, p) * wz / t
    out_l = np.imag(np.sum(weight * (fl - hl))) / math.pi
    out_r = np.imag(np.sum(weight * (fr - hr))) / math.pi
    # remaining ray integral ~ |integrand at the cut| / |cos theta|
    tail = abs(weight[-1] / wz[-1] * (fl[-1] - hl)) / abs(math.cos(np.angle(z[-1]))) / math.pi
    fld = None
    if want_field:
        fld = np.imag(weight @ (V - h)) / math.pi
    return out_l, out_r, fld, tail


def _run(spec, contour, t_grid, want_field, threads):
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or np.any(t <= 0):
        raise ValueError("t_grid must be a 1-D array of positive times")
    z, wz = contour_nodes(contour)
    job = lambda tk: _contour_terms(spec, float(tk), z, wz, want_field)  # noqa: E731
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(job, t))
    else:
        results = [job(tk) for tk in t]
    return t, results


def time_fluxes(spec: ProblemSpec, contour: ContourConfig | None = None, t_grid=(), threads: int = 1,
                tol: float = 1e-8):
    """Boundary derivatives ``(U_x(t, 0), U_x(t, L))`` on ``t_grid``."""
    contour = contour or ContourConfig()
    t, results = _run(spec, contour, t_grid, False, threads)
    _, (hl, hr) = _static_profile(spec)
    g = excitation_eval(spec.excitation, t)
    fl = g * hl + np.array([r[0] for r in results])
    fr = g * hr + np.array([r[1] for r in results])
    trunc = np.array([r[3] for r in results])
    scale = np.maximum(np.abs(fl), np.abs(fr))
    bad = trunc > tol * np.maximum(scale, 1e-300)
    if np.any(bad):
        warnings.warn(
            f"contour truncation error up to {np.max(trunc / np.maximum(scale, 1e-300)):.2g} (relative) "
            f"at {int(bad.sum())} time(s); lengthen the rays",
            RuntimeWarning,
            stacklevel=2,
        )
    return fl, fr


def forward_flux_time(spec: ProblemSpec, contour: ContourConfig | None = None, t_grid=(), side: str = "left",
                      threads: int = 1) -> FluxSeries:
    """Boundary flux ``U_x(t, end)`` on ``t_grid`` at ``side`` (``left`` = ``x=0``)."""
    fl, fr = time_fluxes(spec, contour, t_grid, threads)
    vals = fl if side == "left" else fr
    return FluxSeries("time", np.asarray(t_grid, dtype=float), vals, side)


def solution_time(spec: ProblemSpec, contour: ContourConfig | None = None, t_grid=(), threads: int = 1):
    """Nodal ``U(t, x)``; returns ``(x, U)`` with one row per time."""
    contour = contour or ContourConfig()
    t, results = _run(spec, contour, t_grid, True, threads)
    h, _ = _static_profile(spec)
    g = excitation_eval(spec.excitation, t)
    U = g[:, None] * h[None, :] + np.array([r[2] for r in results])
    return global_grid(spec).x, U


def _tail_model(t, N, beta):
    return np.column_stack([t**N, t ** (N - beta)])


def _fit_tail(t, f, N):
    """Fit ``a t**N + b t**(N - beta)``; ``beta`` by a bounded 1-D search."""

    def resid(beta):
        A = _tail_model(t, N, beta) / np.abs(f)[:, None]
        coef, *_ = np.linalg.lstsq(A, f / np.abs(f), rcond=None)
        return float(np.sum((A @ coef - f / np.abs(f)) ** 2)), coef

    best = minimize_scalar(lambda b: resid(b)[0], bounds=(0.02, 0.98), method="bounded",
                           options={"xatol": 1e-6})
    beta = float(best.x)
    return resid(beta)[1], beta


def _upper_tail(s, p, T):
    """``int_T^inf exp(-p t) t**(s-1) dt``."""
    return gammaincc(s, p * T) * gamma(s) / p**s


def laplace_from_time(series: FluxSeries, p_grid, degree: int | None = None, tail_window: float = 0.1,
                      max_tail: float = 0.1) -> FluxSeries:
    """Numerical Laplace transform of a time series with an analytic tail.

    The samples (with the origin prepended, where the flux vanishes) are
    integrated by Simpson's rule on their own, possibly log-spaced, abscissas.
    Beyond the last sample the flux is continued by ``a t**N + b t**(N-beta)``
    fitted to the samples with ``t >= tail_window * t_max``.  ``degree`` is
    the polynomial degree ``N`` of the excitation; when omitted it is the
    rounded log-log slope of the last samples.

    Raises :class:`CoverageError` if the tail exceeds ``max_tail`` of the
    integral at any ``p``.
    """
    if series.domain != "time":
        raise ValueError("expected a time-domain series")
    t = series.abscissa
    f = series.values
    p = np.asarray(p_grid, dtype=float)
    if np.any(p <= 0):
        raise ValueError("p must be positive")
    if t.size < 8:
        raise CoverageError("need at least 8 time samples")
    T = t[-1]
    sel = t >= tail_window * T
    if sel.sum() < 4:
        sel = np.zeros_like(t, dtype=bool)
        sel[-4:] = True
    if degree is None:
        k = np.nonzero(sel)[0]
        slope = np.polyfit(np.log(t[k]), np.log(np.abs(f[k]) + 1e-300), 1)[0]
        degree = max(2, int(round(slope)))
    (a, b), beta = _fit_tail(t[sel], f[sel], degree)
    tt = np.concatenate([[0.0], t])
    ff = np.concatenate([[0.0], f])
    out = np.empty(p.size)
    for k, pk in enumerate(p):
        body = simpson(np.exp(-pk * tt) * ff, x=tt)
        tail = a * _upper_tail(degree + 1.0, pk, T) + b * _upper_tail(degree + 1.0 - beta, pk, T)
        total = body + tail
        if abs(tail) > max_tail * abs(total):
            need = _required_tmax(a, b, beta, degree, pk, max_tail, abs(total))
            raise CoverageError(
                f"tail is {abs(tail / total):.1%} of the transform at p={pk:g}; extend samples to t_max >= {need:.3g}",
                need,
            )
        out[k] = total
    return FluxSeries("laplace", p, out, series.side)


def _required_tmax(a, b, beta, N, p, frac, total):
    T = 1.0 / p
    for _ in range(200):
        tail = abs(a * _upper_tail(N + 1.0, p, T) + b * _upper_tail(N + 1.0 - beta, p, T))
        if tail <= frac * total:
            return T
        T *= 1.25
    return T
