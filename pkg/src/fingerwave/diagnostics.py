"""Post-processing of travelling-wave solutions.

Quantities tied to the doubly infinite domain (``g_F`` and the mass-balance
speed) are evaluated on the truncated solution and are only estimates there.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import grid_fem as fem
from .constitutive import validate_bounds
from .continuation import SOURCE_FLOOR, hysteresis_source, trapezoid_weights
from .tw_scheme import Params, Solution


class UndefinedResultError(ArithmeticError):
    """A diagnostic has a vanishing denominator."""


def _params(sol: Solution, params: Params | None) -> Params:
    return params if params is not None else sol.params


@dataclass
class FluxProfile:
    z: np.ndarray
    values: np.ndarray
    mean: float
    max_deviation: float
    bottom: float  # same quantity on the bottom line, bottom element row only
    top: float  # same on the top line

    @property
    def relative_deviation(self) -> float:
        return self.max_deviation / abs(self.mean) if self.mean != 0 else float("inf")


def strip_fluxes(sol: Solution, params: Params | None = None,
                 regularization: bool = False) -> np.ndarray:
    """Mean vertical flux ``(1/h_z) integral k(s) (d_z p + g)`` over each element row.

    ``k`` is the element average used by the stiffness matrix and ``d_z p``
    the elementwise P1 gradient, so the integral is exact for the discrete
    fields.  With ``regularization`` the term ``c eps d_z s`` that the
    regularized saturation equation adds to the flux is included.
    """
    params = _params(sol, params)
    grid = sol.grid
    k_el = fem.element_average(grid, params.constitutive.eval_k(sol.s))
    integrand = k_el * (fem.element_gradients(grid, sol.p)[:, 1] + params.g)
    if regularization:
        integrand = integrand + params.c * params.epsilon * fem.element_gradients(grid, sol.s)[:, 1]
    strip = grid.triangles.min(axis=1) // (grid.nx + 1)
    return np.bincount(strip, weights=integrand * grid.areas, minlength=grid.nz) / grid.hz


def line_flux(sol: Solution, params: Params | None, j: int, regularization: bool = False) -> float:
    """``F_c`` on mesh line ``j``: ``integral k(s) (d_z p + g) - c s`` in ``y``.

    The first term averages the two adjacent element rows (only one on the
    bottom and top lines); ``s`` is integrated along the line with the
    trapezoid rule.
    """
    params = _params(sol, params)
    return _line_values(sol, params, np.array([j]), regularization)[0]


def _line_values(sol: Solution, params: Params, js: np.ndarray, regularization: bool) -> np.ndarray:
    grid = sol.grid
    strips = strip_fluxes(sol, params, regularization)
    below = strips[np.clip(js - 1, 0, grid.nz - 1)]
    above = strips[np.clip(js, 0, grid.nz - 1)]
    k_part = np.where(js == 0, above, np.where(js == grid.nz, below, 0.5 * (below + above)))
    s_int = grid.as_rows(sol.s)[js] @ trapezoid_weights(grid)
    return k_part - params.c * s_int


def flux_profile(sol: Solution, params: Params | None = None,
                 regularization: bool = False) -> FluxProfile:
    """Flux quantity ``F_c(z)`` on every interior horizontal mesh line.

    Parameters
    ----------
    regularization : bool
        Add the ``c eps d_z s`` flux of the regularized saturation equation.
        Off by default, giving the unregularized flux quantity.
    """
    params = _params(sol, params)
    grid = sol.grid
    js = np.arange(1, grid.nz)
    vals = _line_values(sol, params, js, regularization)
    mean = float(vals.mean()) if vals.size else float("nan")
    dev = float(np.max(np.abs(vals - mean))) if vals.size else 0.0
    ends = _line_values(sol, params, np.array([0, grid.nz]), regularization)
    return FluxProfile(js * grid.hz, vals, mean, dev, float(ends[0]), float(ends[1]))


def top_flux_identity(sol: Solution, params: Params | None = None) -> tuple[float, float]:
    """Both sides of ``F_c(bottom) = F - c integral over the top of s``.

    Returns ``(bottom flux, F - c int s(., H))`` with ``F`` the loaded top flux.
    """
    params = _params(sol, params)
    grid = sol.grid
    rhs = params.top_load - params.c * float(np.sum(trapezoid_weights(grid) * grid.as_rows(sol.s)[-1]))
    return line_flux(sol, params, 0), rhs


def free_boundary(sol: Solution, params: Params | None = None, threshold: float | None = None) -> np.ndarray:
    """Per column, the highest ``z`` where ``[p - pc(s)]_+`` exceeds ``threshold * c tau``.

    In other words the source ``[p - pc(s)]_+ / (c tau)`` is compared with
    ``threshold``, which defaults to ``1e-8`` of its maximum (at least
    ``SOURCE_FLOOR``).  Columns where it never exceeds the threshold get 0.
    """
    params = _params(sol, params)
    grid = sol.grid
    src = grid.as_rows(hysteresis_source(sol, params))
    if threshold is None:
        threshold = max(1e-8 * float(src.max()), SOURCE_FLOOR)
    active = src > threshold
    j_top = np.where(active.any(axis=0), grid.nz - np.argmax(active[::-1], axis=0), 0)
    return np.where(active.any(axis=0), j_top * grid.hz, 0.0)


def s_star(sol: Solution) -> np.ndarray:
    """Saturation along the top line (the far-field saturation profile)."""
    return sol.grid.as_rows(sol.s)[-1].copy()


def g_F(sol: Solution, params: Params | None = None) -> float:
    """Residual gravity ``g - F / integral k(s*)`` (infinite-domain estimate)."""
    params = _params(sol, params)
    k_int = float(np.sum(trapezoid_weights(sol.grid) * params.constitutive.eval_k(s_star(sol))))
    if k_int <= 0:
        raise UndefinedResultError("integral of k(s*) vanishes")
    return params.g - params.top_load / k_int


def c_mass_balance(sol: Solution, params: Params | None = None, s_ref: float | None = None) -> float:
    """Mass-balance speed ``(F - k(s_ref) g L) / integral (s* - s_ref)`` (infinite-domain estimate).

    ``s_ref`` is the far-field saturation below the finger, by default ``s0_base``.
    """
    params = _params(sol, params)
    s_ref = params.s0_base if s_ref is None else float(s_ref)
    denom = float(np.sum(trapezoid_weights(sol.grid) * (s_star(sol) - s_ref)))
    if not denom > 0:
        raise UndefinedResultError(f"integral of s* - s_ref is {denom:.3g}, not positive")
    k_ref = float(params.constitutive.eval_k(s_ref))
    return (params.top_load - k_ref * params.g * params.L) / denom


@dataclass
class LipschitzReport:
    C_P: float
    rho: float
    dy_s0: float
    source_bound: float
    C_s: float
    max_dz_s: float
    max_dy_s: float

    @property
    def passed(self) -> bool:
        return max(self.max_dz_s, self.max_dy_s) <= self.C_s

    @property
    def margin(self) -> float:
        """``C_s`` minus the largest measured slope (negative on violation)."""
        return self.C_s - max(self.max_dz_s, self.max_dy_s)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(passed=self.passed, margin=self.margin)
        return out


def lipschitz_check(sol: Solution, params: Params | None = None) -> LipschitzReport:
    """Compare measured saturation slopes with ``C_s = C_P / rho + |d_y s0| + |p0 - pc(s0)| / (c tau)``."""
    params = _params(sol, params)
    grid = sol.grid
    laws = params.constitutive
    bounds, _ = validate_bounds(laws, params.g, params.L, min(max(params.s0_base, 0.0), 0.999),
                                params.F_inf)
    grad_p = fem.element_gradients(grid, sol.p)
    C_P = float(np.max(np.hypot(grad_p[:, 0], grad_p[:, 1])))
    bottom = grid.as_rows(np.arange(grid.n_nodes))[0]
    s0 = sol.s[bottom]
    p0 = sol.p[bottom]
    dy_s0 = float(np.max(np.abs(np.diff(s0)))) / grid.hy if s0.size > 1 else 0.0
    src = float(np.max(np.abs(p0 - laws.eval_pc(s0)))) / (params.c * params.tau)
    rho = bounds.rho
    C_s = (C_P / rho if rho > 0 else float("inf")) + dy_s0 + src
    grad_s = fem.element_gradients(grid, sol.s)
    return LipschitzReport(C_P, rho, dy_s0, src, C_s,
                           float(np.max(np.abs(grad_s[:, 1]))), float(np.max(np.abs(grad_s[:, 0]))))


def bound_diagnostics(sol: Solution, params: Params | None = None) -> dict:
    """A-priori bound quantities measured on a solution (reported, never asserted)."""
    params = _params(sol, params)
    grid = sol.grid
    laws = params.constitutive
    grad_p = fem.element_gradients(grid, sol.p)
    p_max = float(np.max(sol.p))
    S = grid.as_rows(sol.s)
    dz_steps = np.diff(S, axis=0)
    lip = lipschitz_check(sol, params)
    gap = sol.p - laws.eval_pc(sol.s)
    return {
        "max_p": p_max,
        "max_grad_p": float(np.max(np.hypot(grad_p[:, 0], grad_p[:, 1]))),
        "max_s": float(np.max(sol.s)),
        "pc_inv_max_p": float(laws.eval_pc_inv(p_max)),
        "max_p_minus_pc": float(np.max(gap)),
        "c_tau_C_s": params.c * params.tau * lip.C_s,
        "max_z_undershoot": float(max(0.0, -np.min(dz_steps))) if dz_steps.size else 0.0,
        "min_s": float(np.min(sol.s)),
    }
