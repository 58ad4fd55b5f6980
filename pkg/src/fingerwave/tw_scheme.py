"""Travelling-wave solutions of the truncated hysteretic Richards system.

Unknowns are nodal P1 fields ``p`` (pressure) and ``s`` (saturation) on the
rectangle ``(0, L) x (0, H)``.  The bottom carries Dirichlet data
``s = s0``, ``p = p0(y)``; all Top nodes share a single pressure value ``p*``
whose equation receives the prescribed far-field flux; the lateral sides are
natural.  Writing ``q = [p - pc(s)]_+`` (nodal, integrated with the lumped
mass ``m``), the discrete system is

    K(k(s)) p + G(k(s)) + m q / tau = F e_top          (pressure rows)
    (D + eps K1) s = m q / (c tau)                      (saturation rows)

where ``G`` is the gravity load and ``D`` the ``d/dz`` matrix.  The damped
alternating iteration of :func:`pressure_step` / :func:`saturation_step` has
exactly these fixed points.  Because the lagged saturation update is violently
unstable for smooth modes at the default parameters, :func:`fixed_point_solve`
by default finds the fixed point with a pseudo-transient semismooth Newton
method and then certifies it with one sweep of the alternating iteration.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import grid_fem as fem
from .constitutive import ClampLog, ConstitutiveLaws, paper_laws, pos_part, validate_bounds
from .linsolve import Factorization, SolverError, solve_matrix

METHODS = ("newton", "picard")
FLUX_CONVENTIONS = ("total", "per_length")


class ParamsError(ValueError):
    """Parameter set violates a hard requirement."""


@dataclass(frozen=True)
class Params:
    """Physical and numerical parameters of one travelling-wave solve.

    Defaults reproduce the reference configuration (``g = 1``, ``tau = 2``,
    ``kappa = 0.001``, ``a = 0.32``, ``F_inf = 0.056``, ``M = 4``,
    ``epsilon = 0.0008``) on a 128 x 128 mesh of ``(0, 2)^2``.

    ``flux_convention`` selects how ``F_inf`` enters the merged top equation:
    ``"total"`` loads it as is, ``"per_length"`` multiplies it by ``L``.
    ``method`` selects the fixed-point driver (see :func:`fixed_point_solve`).
    """

    L: float = 2.0
    H: float = 2.0
    nx: int = 128
    nz: int = 128
    g: float = 1.0
    tau: float = 2.0
    c: float = 0.04
    F_inf: float = 0.056
    kappa: float = 0.001
    a: float = 0.32
    s0_base: float = 1e-5
    delta: float = 0.078
    d: float = 0.25
    y_c: float | None = None  # None centres the bump at L / 2
    M: float = 4.0
    epsilon: float = 0.0008
    tol_fp: float = 1e-9
    max_iter: int = 20000
    rtol_lin: float = 1e-10
    p_init: float = 4.5
    s_init: float = 1e-5
    flux_convention: str = "total"
    method: str = "newton"
    ptc_dt0: float = 0.5
    ptc_max_steps: int = 5000
    newton_tol: float = 1e-11
    laws: ConstitutiveLaws | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for name in ("L", "H", "tau", "c", "kappa", "M", "tol_fp", "rtol_lin", "d", "ptc_dt0"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ParamsError(f"{name} must be positive, got {v}")
        for name in ("nx", "nz", "max_iter", "ptc_max_steps"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ParamsError(f"{name} must be a positive integer, got {v}")
        if not (self.epsilon >= 0):
            raise ParamsError(f"epsilon must be >= 0, got {self.epsilon}")
        if not (self.delta >= 0):
            raise ParamsError(f"delta must be >= 0, got {self.delta}")
        if self.flux_convention not in FLUX_CONVENTIONS:
            raise ParamsError(f"flux_convention must be one of {FLUX_CONVENTIONS}")
        if self.method not in METHODS:
            raise ParamsError(f"method must be one of {METHODS}")

    @property
    def constitutive(self) -> ConstitutiveLaws:
        return self.laws if self.laws is not None else paper_laws(self.kappa, self.a)

    @property
    def center(self) -> float:
        return 0.5 * self.L if self.y_c is None else float(self.y_c)

    @property
    def top_load(self) -> float:
        return self.F_inf * (self.L if self.flux_convention == "per_length" else 1.0)

    def replace(self, **changes) -> "Params":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "laws"}
        return out

    def warnings(self) -> list[str]:
        """Soft checks: damping strength and the parameter windows."""
        out = []
        if self.M < 1.0 / self.tau:
            out.append(f"M = {self.M} below 1/tau = {1.0 / self.tau}; the damped iteration may diverge")
        _, viol = validate_bounds(self.constitutive, self.g, self.L, self.s0_base,
                                  self.F_inf, self.c)
        out.extend(viol)
        return out


@dataclass
class Solution:
    """Fields of one solve together with its convergence record."""

    s: np.ndarray
    p: np.ndarray
    p_star: float
    iters: int
    residual_history: list[float]
    params: Params
    converged: bool
    grid: fem.Grid = field(repr=False)
    clamp: ClampLog = field(default_factory=ClampLog)
    newton_steps: int = 0
    factorizations: int = 0
    final_residual: float = float("nan")
    wall_time: float = 0.0


# ---------------------------------------------------------------------------
# discretization cache


class Discretization:
    """Operators and index maps shared by all steps of one parameter set."""

    def __init__(self, params: Params, grid: fem.Grid | None = None):
        self.params = params
        self.laws = params.constitutive
        self.grid = grid if grid is not None else fem.build_grid(params.L, params.H, params.nx, params.nz)
        g = self.grid
        self.bottom = g.nodes_tagged(fem.BOTTOM)
        self.s0, self.p0 = boundary_data(params, g)
        self.ml = fem.lumped_mass(g)
        self.mass = fem.assemble_mass(g, 1.0)
        self.dz = fem.assemble_dz(g)
        self.k1 = fem.assemble_stiffness(g, 1.0)
        self.S = (self.dz + params.epsilon * self.k1).tocsr()

        self.pmap, self.top = fem.dof_map_for(g, self.bottom, merge_top=True)
        self.smap, _ = fem.dof_map_for(g, self.bottom, merge_top=False)
        self.Pp = fem.prolongation(self.pmap)
        self.Ps = fem.prolongation(self.smap)
        self.n_p = self.Pp.shape[1]
        self.n_s = self.Ps.shape[1]
        self.p_lift = np.zeros(g.n_nodes)
        self.p_lift[self.bottom] = self.p0
        self.s_lift = np.zeros(g.n_nodes)
        self.s_lift[self.bottom] = self.s0
        self.e_top = np.zeros(self.n_p)
        self.e_top[self.top] = 1.0
        self._s_factor: Factorization | None = None
        self._perm: np.ndarray | None = None

    def with_params(self, params: Params) -> "Discretization":
        """Shallow copy sharing all operators, bound to another ``c``, ``F_inf`` or controls."""
        self.coupled_perm()
        self.saturation_factor()
        other = copy.copy(self)
        other.params = params
        return other

    # -- packing -----------------------------------------------------------
    def pack(self, p: np.ndarray, s: np.ndarray) -> np.ndarray:
        x = np.zeros(self.n_p + self.n_s)
        free = np.flatnonzero(self.pmap >= 0)
        # reversed: the first Top node supplies the merged value
        x[self.pmap[free[::-1]]] = np.asarray(p)[free[::-1]]
        free = np.flatnonzero(self.smap >= 0)
        x[self.n_p + self.smap[free]] = np.asarray(s)[free]
        return x

    def unpack(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.Pp @ x[: self.n_p] + self.p_lift, self.Ps @ x[self.n_p:] + self.s_lift

    def coupled_perm(self) -> np.ndarray:
        """Nested-dissection order with p and s of each node adjacent, merged top last."""
        if self._perm is None:
            order = fem.nested_dissection(self.grid)
            rank = np.empty(order.size)
            rank[order] = np.arange(order.size)
            key = np.zeros(self.n_p + self.n_s)
            free = np.flatnonzero(self.pmap >= 0)
            key[self.pmap[free]] = 2 * rank[free]
            key[self.top] = np.inf
            free = np.flatnonzero(self.smap >= 0)
            key[self.n_p + self.smap[free]] = 2 * rank[free] + 1
            self._perm = np.argsort(key, kind="stable")
        return self._perm

    def saturation_factor(self) -> Factorization:
        # the saturation matrix never changes, so one factorization serves every step
        if self._s_factor is None:
            self._s_factor = Factorization((self.Ps.T @ self.S @ self.Ps).tocsc())
        return self._s_factor

    # -- residual of the coupled system ------------------------------------
    def residual(self, x: np.ndarray, jacobian: bool = False, log: ClampLog | None = None):
        prm = self.params
        p, s = self.unpack(x)
        k = self.laws.eval_k(s, log)
        K = fem.assemble_stiffness(self.grid, k)
        G = fem.assemble_gravity_load(self.grid, k, prm.g)
        pc = self.laws.eval_pc(s)
        gap = p - pc
        q = pos_part(gap)
        r_p = self.Pp.T @ (K @ p + G + self.ml * q / prm.tau) - prm.top_load * self.e_top
        r_s = self.Ps.T @ (self.S @ s - self.ml * q / (prm.c * prm.tau))
        R = np.concatenate([r_p, r_s])
        if not jacobian:
            return R
        chi = (gap > 0).astype(float)
        dpc = self.laws.eval_pc_prime(s)
        Dk = fem.assemble_flux_sensitivity(self.grid, p, self.laws.eval_k_prime(s), prm.g)
        w = self.ml * chi / prm.tau
        ct = prm.c * prm.tau
        J_pp = K + sp.diags(w)
        J_ps = Dk - sp.diags(w * dpc)
        J_sp = -sp.diags(self.ml * chi / ct)
        J_ss = self.S + sp.diags(self.ml * chi * dpc / ct)
        Pp, Ps = self.Pp, self.Ps
        J = sp.bmat([[Pp.T @ J_pp @ Pp, Pp.T @ J_ps @ Ps],
                     [Ps.T @ J_sp @ Pp, Ps.T @ J_ss @ Ps]], format="csc")
        return R, J


def boundary_data(params: Params, grid: fem.Grid) -> tuple[np.ndarray, np.ndarray]:
    """Bottom traces ``(s0, p0)`` ordered like ``grid.nodes_tagged(BOTTOM)``.

    ``p0(y) = pc(s0) + delta * exp(-((y - y_c) / d)^2)``.
    """
    if params.delta < 0:
        raise ParamsError("delta must be nonnegative")
    y = grid.y[grid.nodes_tagged(fem.BOTTOM)]
    s0 = np.full(y.size, params.s0_base)
    p0 = params.constitutive.eval_pc(s0) + params.delta * np.exp(-(((y - params.center) / params.d) ** 2))
    return s0, p0


def _disc(params: Params, disc: Discretization | None) -> Discretization:
    if disc is None:
        return Discretization(params)
    if disc.params is params:
        return disc
    if _geometry_key(disc.params) != _geometry_key(params):
        raise ParamsError("discretization was built for a different grid or boundary data")
    return disc.with_params(params)


def _geometry_key(p: Params):
    return (p.L, p.H, p.nx, p.nz, p.epsilon, p.s0_base, p.delta, p.d, p.center, p.kappa, p.a)


# ---------------------------------------------------------------------------
# the alternating iteration


def pressure_step(s_prev, p_prev, params: Params, disc: Discretization | None = None,
                  factorization: Factorization | None = None, log: ClampLog | None = None):
    """One damped pressure update with saturation frozen at ``s_prev``.

    Solves ``M p - div(k(s_prev) (grad p + g e_z)) = M p_prev - [p_prev - pc(s_prev)]_+ / tau``
    with the boundary conditions of the truncated problem.

    Returns
    -------
    p_new : ndarray
        Nodal pressure.
    p_star : float
        The shared Top value.
    """
    D = _disc(params, disc)
    grid = D.grid
    s_prev = grid.check_field(s_prev, "s_prev")
    p_prev = grid.check_field(p_prev, "p_prev")
    k = D.laws.eval_k(s_prev, log)
    q = pos_part(p_prev - D.laws.eval_pc(s_prev))
    A = params.M * D.mass + fem.assemble_stiffness(grid, k)
    b = params.M * (D.mass @ p_prev) - D.ml * q / params.tau - fem.assemble_gravity_load(grid, k, params.g)
    system = fem.reduce_system(A, b, grid, (D.bottom, D.p0), merge_top=True, top_load=params.top_load)
    x, _ = solve_matrix(system.matrix, system.rhs, rtol=params.rtol_lin, factorization=factorization)
    p_new = system.expand(x)
    return p_new, float(x[system.top_dof])


def saturation_step(s_prev, p_new, params: Params, disc: Discretization | None = None):
    """Solve ``d_z s - eps Lap s = [p_new - pc(s_prev)]_+ / (c tau)`` with ``s = s0`` at the bottom."""
    D = _disc(params, disc)
    grid = D.grid
    s_prev = grid.check_field(s_prev, "s_prev")
    p_new = grid.check_field(p_new, "p_new")
    q = pos_part(p_new - D.laws.eval_pc(s_prev))
    rhs = D.Ps.T @ (D.ml * q / (params.c * params.tau) - D.S @ D.s_lift)
    x, _ = solve_matrix(D.Ps.T @ D.S @ D.Ps, rhs, rtol=params.rtol_lin,
                        factorization=D.saturation_factor())
    return D.Ps @ x + D.s_lift


def _sup(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


def _initial_fields(params: Params, D: Discretization, init):
    if init is None:
        p = np.full(D.grid.n_nodes, float(params.p_init))
        s = np.full(D.grid.n_nodes, float(params.s_init))
    else:
        p = D.grid.check_field(init[0], "initial p").copy()
        s = D.grid.check_field(init[1], "initial s").copy()
    # Dirichlet data and the merged top value are imposed from the start
    p[D.bottom] = D.p0
    s[D.bottom] = D.s0
    top = D.grid.nodes_tagged(fem.TOP)
    p[top] = p[top[0]]
    return p, s


def picard_sweep(p, s, params: Params, D: Discretization, log: ClampLog | None = None):
    """One pressure step followed by one saturation step; returns ``(p, s, update)``."""
    p_new, _ = pressure_step(s, p, params, D, log=log)
    s_new = saturation_step(s, p_new, params, D)
    return p_new, s_new, _sup(p_new - p) + _sup(s_new - s)


def _ptc_newton(D: Discretization, x: np.ndarray, params: Params, log: ClampLog,
                history: list[float], callback: Callable | None = None):
    """Pseudo-transient continuation on the saturation rows, one Newton step per pseudo step.

    The pseudo-time term ``m (s - s_old) / (c dt)`` turns the saturation rows
    into the co-moving evolution ``s_t + c (d_z s - eps Lap s) = q / tau`` with
    the pressure rows kept algebraic.  ``dt`` grows with the residual decrease
    and shrinks after a rejected step.
    """
    perm = D.coupled_perm()
    shift = np.concatenate([np.zeros(D.n_p), D.Ps.T @ D.ml / params.c])
    dt = params.ptc_dt0
    R, J = D.residual(x, True)
    r = np.linalg.norm(R)
    steps = nfact = 0
    converged = False
    while steps < params.ptc_max_steps:
        try:
            lu = Factorization(J + sp.diags(shift / dt), perm=perm)
            nfact += 1
            dx = -lu.solve(R)
        except SolverError:
            dt /= 4.0
            steps += 1
            continue
        x_new = x + dx
        R_new, J_new = D.residual(x_new, True)
        r_new = np.linalg.norm(R_new)
        steps += 1
        if not np.isfinite(r_new) or (r_new > 10.0 * r and _sup(R_new) >= params.newton_tol):
            dt /= 4.0
            if dt < 1e-12:
                break
            continue
        x, R, J = x_new, R_new, J_new
        upd = _sup(dx)
        history.append(upd)
        if callback is not None:
            callback(steps, dt, r_new, upd)
        if _sup(R) < params.newton_tol and upd < 0.1 * params.tol_fp:
            converged = True
            break
        dt = min(1e15, dt * min(10.0, max(0.5, r / max(r_new, 1e-300))))
        r = r_new
    return x, converged, steps, nfact, _sup(R)


def fixed_point_solve(params: Params, init: tuple[np.ndarray, np.ndarray] | None = None,
                      disc: Discretization | None = None,
                      callback: Callable | None = None) -> Solution:
    """Compute a fixed point of the alternating pressure/saturation iteration.

    Parameters
    ----------
    params : Params
        ``params.method == "picard"`` runs the plain alternation until
        ``||dp||_inf + ||ds||_inf < tol_fp`` or ``max_iter`` sweeps.
        ``"newton"`` (default) solves the same discrete fixed-point equations
        with pseudo-transient semismooth Newton and then performs one plain
        sweep from the result; that sweep's update size is the reported
        convergence measure.
    init : (p, s), optional
        Starting fields; defaults to the constants ``p_init`` and ``s_init``.
    disc : Discretization, optional
        Reuse operators across solves on the same grid.
    callback : callable, optional
        Called as ``callback(step, dt, residual_norm, update)`` on every
        accepted Newton step or ``callback(iter, None, None, update)`` on
        every plain sweep.

    Returns
    -------
    Solution
        Flagged ``converged=False`` when the tolerance was not met; this is
        not an error.
    """
    t0 = time.perf_counter()
    D = _disc(params, disc)
    p, s = _initial_fields(params, D, init)
    history: list[float] = []
    log = ClampLog()
    steps = nfact = 0
    final_res = float("nan")

    if params.method == "picard":
        converged = False
        iters = 0
        while iters < params.max_iter:
            p, s, upd = picard_sweep(p, s, params, D, log)
            iters += 1
            history.append(upd)
            if callback is not None:
                callback(iters, None, None, upd)
            if not np.isfinite(upd):
                break
            if upd < params.tol_fp:
                converged = True
                break
        final_res = _sup(D.residual(D.pack(p, s)))
    else:
        x, newton_ok, steps, nfact, final_res = _ptc_newton(D, D.pack(p, s), params, log, history, callback)
        p, s = D.unpack(x)
        # certification: one plain sweep must leave the state in place
        p_c, s_c, upd = picard_sweep(p, s, params, D, log)
        history.append(upd)
        converged = bool(newton_ok and upd < params.tol_fp)
        if converged:
            p, s = p_c, s_c
        iters = len(history)

    clamp = ClampLog()
    D.laws.eval_k(s, clamp)
    top = D.grid.nodes_tagged(fem.TOP)
    return Solution(s=s, p=p, p_star=float(p[top[0]]), iters=iters, residual_history=history,
                    params=params, converged=converged, grid=D.grid, clamp=clamp,
                    newton_steps=steps, factorizations=nfact, final_residual=final_res,
                    wall_time=time.perf_counter() - t0)


def strong_residual(sol: Solution, params: Params | None = None,
                    disc: Discretization | None = None) -> tuple[float, float]:
    """Residuals of the flux balance and of the hysteresis law on a solution.

    ``r_pde`` is the sup norm of ``c (D + eps K1) s + K p + G`` over test
    functions vanishing on the bottom and on the top.  ``r_hys`` is the sup
    norm of ``c tau m^-1 (D + eps K1) s - [p - pc(s)]_+`` over non-bottom
    nodes.
    """
    params = params or sol.params
    D = _disc(params, disc)
    grid = D.grid
    k = D.laws.eval_k(sol.s)
    K = fem.assemble_stiffness(grid, k)
    G = fem.assemble_gravity_load(grid, k, params.g)
    Ss = D.S @ sol.s
    interior = (grid.tags & (fem.BOTTOM | fem.TOP)) == 0
    r_pde = _sup((params.c * Ss + K @ sol.p + G)[interior])
    free = (grid.tags & fem.BOTTOM) == 0
    q = pos_part(sol.p - D.laws.eval_pc(sol.s))
    r_hys = _sup((params.c * params.tau * Ss / D.ml - q)[free])
    return r_pde, r_hys


# ---------------------------------------------------------------------------
# variational oracle


def energy(p, s, params: Params, disc: Discretization | None = None) -> float:
    """Discrete convex functional whose minimizer is the frozen-saturation pressure.

    ``A(p) = sum_i m_i [p_i - pc(s_i)]_+^2 / (2 tau)
             + 1/2 integral k(s) |grad p + g e_z|^2 - F p*``
    with the lumped mass ``m`` (the same quadrature the scheme uses for the
    source) and ``F`` the top load of the chosen flux convention.
    """
    D = _disc(params, disc)
    grid = D.grid
    p = grid.check_field(p, "p")
    s = grid.check_field(s, "s")
    top = grid.nodes_tagged(fem.TOP)
    p_star = p[top[0]]
    if np.max(np.abs(p[top] - p_star)) > 1e-12 * max(1.0, abs(p_star)):
        raise ParamsError("pressure is not constant on the top boundary")
    q = pos_part(p - D.laws.eval_pc(s))
    a = fem.element_average(grid, D.laws.eval_k(s))
    gp = fem.element_gradients(grid, p)
    gp[:, 1] += params.g
    quad = 0.5 * np.sum(a * grid.areas * np.einsum("td,td->t", gp, gp))
    return float(np.sum(D.ml * q * q) / (2.0 * params.tau) + quad - params.top_load * p_star)


def energy_gradient(p, s, params: Params, disc: Discretization | None = None) -> np.ndarray:
    """Gradient of :func:`energy` with respect to the free pressure unknowns."""
    D = _disc(params, disc)
    k = D.laws.eval_k(s)
    K = fem.assemble_stiffness(D.grid, k)
    G = fem.assemble_gravity_load(D.grid, k, params.g)
    q = pos_part(p - D.laws.eval_pc(s))
    return D.Pp.T @ (K @ p + G + D.ml * q / params.tau) - params.top_load * D.e_top


@dataclass
class VariationalResult:
    p: np.ndarray
    energies: list[float]
    iterations: int
    converged: bool
    gradient_norm: float

    @property
    def monotone(self) -> bool:
        e = np.asarray(self.energies)
        scale = max(1.0, float(np.max(np.abs(e)))) if e.size else 1.0
        return bool(np.all(np.diff(e) <= 1e-12 * scale))


def variational_pressure_solve(s_frozen, params: Params, p_start=None, tol: float = 1e-10,
                               max_iter: int = 5000,
                               disc: Discretization | None = None) -> VariationalResult:
    """Minimize :func:`energy` over admissible pressures with ``s`` frozen.

    Iterates :func:`pressure_step` with fixed saturation; the matrix does not
    change, so a single factorization is reused.  Stops once the sup norm of
    the energy gradient falls below ``tol``.
    """
    D = _disc(params, disc)
    grid = D.grid
    s = grid.check_field(s_frozen, "s_frozen")
    p = np.full(grid.n_nodes, params.p_init) if p_start is None else grid.check_field(p_start).copy()
    p[D.bottom] = D.p0
    top = grid.nodes_tagged(fem.TOP)
    p[top] = p[top[0]]

    k = D.laws.eval_k(s)
    A = params.M * D.mass + fem.assemble_stiffness(grid, k)
    system = fem.reduce_system(A, np.zeros(grid.n_nodes), grid, (D.bottom, D.p0), merge_top=True)
    lu = Factorization(system.matrix)
    energies = [energy(p, s, params, D)]
    grad = _sup(energy_gradient(p, s, params, D))
    converged = grad < tol
    it = 0
    while not converged and it < max_iter:
        p, _ = pressure_step(s, p, params, D, factorization=lu)
        it += 1
        energies.append(energy(p, s, params, D))
        grad = _sup(energy_gradient(p, s, params, D))
        converged = grad < tol
    return VariationalResult(p, energies, it, converged, grad)


def energy_directional_check(p, s, params: Params, n_dirs: int = 10, seed: int = 0,
                             step: float = 1e-5, disc: Discretization | None = None) -> float:
    """Largest relative central-difference derivative of :func:`energy` at ``p``.

    Directions are random admissible perturbations (zero on the bottom,
    constant on the top).  Each derivative is divided by the sum of the
    magnitudes of its three contributions (obstacle, Dirichlet energy, top
    load), so the result is scale free; it is small only near a minimizer.
    """
    D = _disc(params, disc)
    rng = np.random.default_rng(seed)
    k = D.laws.eval_k(s)
    K = fem.assemble_stiffness(D.grid, k)
    G = fem.assemble_gravity_load(D.grid, k, params.g)
    q = pos_part(p - D.laws.eval_pc(s))
    worst = 0.0
    for _ in range(n_dirs):
        v = D.Pp @ rng.standard_normal(D.n_p)
        fd = (energy(p + step * v, s, params, D) - energy(p - step * v, s, params, D)) / (2 * step)
        parts = (abs(v @ (D.ml * q)) / params.tau + abs(v @ (K @ p + G))
                 + abs(params.top_load * (D.Pp.T @ v)[D.top]))
        worst = max(worst, abs(fd) / max(parts, 1e-300))
    return worst


def ode_transport(p, params: Params, grid: fem.Grid | None = None) -> np.ndarray:
    """Columnwise implicit Euler for ``c tau ds/dz = [p - pc(s)]_+`` from ``s(0) = s0``.

    Each step solves the scalar monotone equation
    ``c tau (s - s_prev) / h = [p - pc(s)]_+`` by Newton, falling back to
    bisection on ``[s_prev, s_prev + h [p - pc(s_prev)]_+ / (c tau)]`` where
    Newton fails to converge.
    """
    if grid is None:
        grid = fem.build_grid(params.L, params.H, params.nx, params.nz)
    laws = params.constitutive
    P = grid.as_rows(grid.check_field(p, "p"))
    h = grid.hz
    ct = params.c * params.tau
    out = np.empty_like(P)
    out[0] = params.s0_base
    for j in range(1, grid.nz + 1):
        s_prev = out[j - 1]
        pj = P[j]

        def fn(s):
            return ct * (s - s_prev) / h - pos_part(pj - laws.eval_pc(s))

        hi = s_prev + h * pos_part(pj - laws.eval_pc(s_prev)) / ct
        s = s_prev.copy()
        for _ in range(50):
            f = fn(s)
            active = (pj - laws.eval_pc(s)) > 0
            df = ct / h + np.where(active, laws.eval_pc_prime(s), 0.0)
            s_new = np.clip(s - f / df, s_prev, hi)
            if np.max(np.abs(s_new - s)) <= 1e-15 * max(1.0, float(np.max(np.abs(s_new)))):
                s = s_new
                break
            s = s_new
        bad = np.abs(fn(s)) > 1e-12 * (ct / h) * np.maximum(1.0, np.abs(s))
        if np.any(bad):
            lo_b, hi_b = s_prev[bad].copy(), hi[bad].copy()
            pb, sp_b = pj[bad], s_prev[bad]
            for _ in range(200):
                m = 0.5 * (lo_b + hi_b)
                pos = ct * (m - sp_b) / h - pos_part(pb - laws.eval_pc(m)) > 0
                hi_b = np.where(pos, m, hi_b)
                lo_b = np.where(pos, lo_b, m)
            s[bad] = 0.5 * (lo_b + hi_b)
        out[j] = s
    return out.ravel()


def as_dict(sol: Solution) -> dict:
    """Scalar summary of a solution (fields omitted)."""
    return {
        "converged": sol.converged,
        "iters": sol.iters,
        "newton_steps": sol.newton_steps,
        "factorizations": sol.factorizations,
        "final_residual": sol.final_residual,
        "p_star": sol.p_star,
        "max_s": float(np.max(sol.s)),
        "clamped": sol.clamp.total,
        "wall_time": sol.wall_time,
        "last_update": sol.residual_history[-1] if sol.residual_history else None,
    }
