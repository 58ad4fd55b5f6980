"""Wave-speed sweeps, wave-speed selection and the Type I / Type II split.

Boundary derivatives ``d_z p`` are one-sided nodal differences between the
boundary line and its neighbour, integrated in ``y`` with the trapezoid rule.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import grid_fem as fem
from .tw_scheme import Discretization, Params, Solution, fixed_point_solve

SOURCE_FLOOR = 1e-12  # default thresholds never go below this absolute level

TYPE_I = "TypeI"
TYPE_II = "TypeII"
UNCLASSIFIED = "Unclassified"


class BracketError(ValueError):
    """The bracket does not enclose a sign change."""


class ContinuationError(RuntimeError):
    """An inner solve failed to converge where convergence is required."""


def trapezoid_weights(grid: fem.Grid) -> np.ndarray:
    w = np.full(grid.nx + 1, grid.hy)
    w[[0, -1]] *= 0.5
    return w


def row_dz(grid: fem.Grid, values, j: int) -> np.ndarray:
    """Nodal ``d_z`` along mesh line ``j``: one-sided on the boundary lines, centred inside."""
    V = grid.as_rows(values)
    if j == 0:
        return (V[1] - V[0]) / grid.hz
    if j == grid.nz:
        return (V[-1] - V[-2]) / grid.hz
    return (V[j + 1] - V[j - 1]) / (2.0 * grid.hz)


def _params(sol: Solution, params: Params | None) -> Params:
    return params if params is not None else sol.params


def eval_G1(sol: Solution, params: Params | None = None) -> float:
    """``c - kappa * integral over the bottom of d_z p / (L s0)``."""
    params = _params(sol, params)
    if params.s0_base == 0:
        raise ValueError("G1 is undefined for s0_base = 0")
    grid = sol.grid
    kappa = params.constitutive.kappa if params.constitutive.kappa is not None else params.kappa
    flux = float(np.sum(trapezoid_weights(grid) * row_dz(grid, sol.p, 0)))
    return params.c - kappa * flux / (params.L * params.s0_base)


def bottom_flux(sol: Solution, params: Params | None = None) -> float:
    """``integral over the bottom of k(s0) (d_z p + g) - c s0``."""
    params = _params(sol, params)
    grid = sol.grid
    laws = params.constitutive
    s_b = grid.as_rows(sol.s)[0]
    integrand = laws.eval_k(s_b) * (row_dz(grid, sol.p, 0) + params.g) - params.c * s_b
    return float(np.sum(trapezoid_weights(grid) * integrand))


def eval_G_general(sol: Solution, params: Params | None = None, s_star: float | None = None) -> float:
    """Bottom-flux closure residual ``F_c - (g k(s*) - c s*) L`` without the small-``s`` shortcuts.

    ``s_star`` defaults to ``params.s0_base``.
    """
    params = _params(sol, params)
    s_star = params.s0_base if s_star is None else float(s_star)
    k_star = float(params.constitutive.eval_k(s_star))
    return bottom_flux(sol, params) - (params.g * k_star - params.c * s_star) * params.L


def eval_G2(sol: Solution, params: Params | None = None) -> float:
    """``integral over the top of k(s) d_z p``; nonpositive for finger-type solutions."""
    params = _params(sol, params)
    grid = sol.grid
    k_top = params.constitutive.eval_k(grid.as_rows(sol.s)[-1])
    return float(np.sum(trapezoid_weights(grid) * k_top * row_dz(grid, sol.p, grid.nz)))


def hysteresis_source(sol: Solution, params: Params | None = None) -> np.ndarray:
    """Nodal ``[p - pc(s)]_+ / (c tau)``."""
    params = _params(sol, params)
    gap = sol.p - params.constitutive.eval_pc(sol.s)
    return np.maximum(gap, 0.0) / (params.c * params.tau)


def source_height(sol: Solution, params: Params | None = None,
                  dz_threshold: float | None = None) -> tuple[float, int]:
    """Height ``h`` of the highest mesh line where the source exceeds the threshold.

    Returns ``(z, row index)``; ``(0.0, -1)`` when the source is nowhere active.
    ``dz_threshold`` defaults to ``1e-8`` times the maximal source, but at
    least ``SOURCE_FLOOR`` so rounding noise on a flat state is not counted.
    """
    params = _params(sol, params)
    grid = sol.grid
    src = grid.as_rows(hysteresis_source(sol, params))
    peak = float(src.max())
    if dz_threshold is None:
        dz_threshold = max(1e-8 * peak, SOURCE_FLOOR)
    rows = np.flatnonzero((src > dz_threshold).any(axis=1))
    if peak <= 0 or rows.size == 0:
        return 0.0, -1
    j = int(rows.max())
    return j * grid.hz, j


def classify_details(sol: Solution, params: Params | None = None,
                     dz_threshold: float | None = None, margin: int = 2) -> dict:
    params = _params(sol, params)
    grid = sol.grid
    G2 = eval_G2(sol, params)
    h, j = source_height(sol, params, dz_threshold)
    reaches_top = j >= grid.nz - margin
    if j < 0:
        label = UNCLASSIFIED
    elif not reaches_top and G2 <= 0:
        label = TYPE_I
    elif reaches_top and G2 > 0:
        label = TYPE_II
    else:
        label = UNCLASSIFIED
    return {"label": label, "G2": G2, "h": h, "h_index": j, "reaches_top": bool(reaches_top)}


def classify(sol: Solution, params: Params | None = None,
             dz_threshold: float | None = None, margin: int = 2) -> str:
    """``TypeI`` when the source dies below ``H - margin`` rows and ``G2 <= 0``,
    ``TypeII`` when it reaches the top band and ``G2 > 0``, else ``Unclassified``.
    """
    return classify_details(sol, params, dz_threshold, margin)["label"]


@dataclass
class SweepRecord:
    c: float
    converged: bool
    iters: int
    G1: float
    G2: float
    label: str
    h: float
    p_star: float
    max_s: float
    h_index: int = -1
    G: float = float("nan")
    wall_time: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def record_for(sol: Solution, params: Params | None = None, dz_threshold: float | None = None,
               margin: int = 2) -> SweepRecord:
    params = _params(sol, params)
    det = classify_details(sol, params, dz_threshold, margin)
    return SweepRecord(
        c=params.c, converged=sol.converged, iters=sol.iters, G1=eval_G1(sol, params),
        G2=det["G2"], label=det["label"], h=det["h"], p_star=sol.p_star,
        max_s=float(np.max(sol.s)), h_index=det["h_index"], G=eval_G_general(sol, params),
        wall_time=sol.wall_time,
    )


def _failed_record(c: float, exc: Exception) -> SweepRecord:
    nan = float("nan")
    return SweepRecord(c=c, converged=False, iters=0, G1=nan, G2=nan, label=UNCLASSIFIED,
                       h=nan, p_star=nan, max_s=nan, error=f"{type(exc).__name__}: {exc}")


@dataclass
class SweepResult:
    records: list[SweepRecord]
    solutions: list[Solution | None] = field(default_factory=list, repr=False)

    def labels(self) -> list[str]:
        return [r.label for r in self.records]

    def transition(self) -> tuple[float, float] | None:
        return transition_bracket(self.records)


def transition_bracket(records: Sequence[SweepRecord]) -> tuple[float, float] | None:
    """First pair ``(c_prev, c_next)`` where a TypeI record is followed by a non-TypeI one."""
    for prev, nxt in zip(records, records[1:]):
        if prev.label == TYPE_I and nxt.label != TYPE_I:
            return prev.c, nxt.c
    return None


def sweep_c(params: Params, c_values: Sequence[float], warm_start: bool = False,
            disc: Discretization | None = None, keep_solutions: bool = False,
            callback: Callable[[SweepRecord], None] | None = None,
            init: tuple[np.ndarray, np.ndarray] | None = None) -> SweepResult:
    """Solve for each ``c`` in order.

    With ``warm_start`` each solve starts from the previous converged
    solution (``init`` seeds the first one); otherwise every solve starts
    from the constant initial guess.  Failures are recorded and the sweep
    continues; a failed warm step falls back to the last good state.
    """
    c_values = [float(c) for c in c_values]
    if any(b < a for a, b in zip(c_values, c_values[1:])):
        raise ValueError("c_values must be sorted in increasing order")
    if disc is None:
        disc = Discretization(params.replace(c=c_values[0]) if c_values else params)
    records: list[SweepRecord] = []
    sols: list[Solution | None] = []
    prev = init
    for c in c_values:
        prm = params.replace(c=c)
        try:
            sol = fixed_point_solve(prm, init=prev if warm_start else None, disc=disc)
            rec = record_for(sol, prm)
            if warm_start and sol.converged:
                prev = (sol.p, sol.s)
        except Exception as exc:  # recorded, the sweep goes on
            sol, rec = None, _failed_record(c, exc)
        records.append(rec)
        sols.append(sol if keep_solutions else None)
        if callback is not None:
            callback(rec)
    return SweepResult(records, sols)


def locate_transition(params: Params, c_lo: float, c_hi: float, tol_c: float,
                      warm_start: bool = False, init: tuple[np.ndarray, np.ndarray] | None = None,
                      disc: Discretization | None = None,
                      callback: Callable[[SweepRecord], None] | None = None
                      ) -> tuple[tuple[float, float], list[SweepRecord]]:
    """Shrink a TypeI -> non-TypeI bracket below ``tol_c``.

    Cold mode bisects on the label.  Warm mode also bisects, but every trial
    starts from the latest TypeI solution (``init`` for ``c_lo``), so the
    result is the end of the branch reached by path following.
    """
    if disc is None:
        disc = Discretization(params.replace(c=c_lo))
    records: list[SweepRecord] = []

    def run(c, start):
        prm = params.replace(c=c)
        sol = fixed_point_solve(prm, init=start, disc=disc)
        rec = record_for(sol, prm)
        records.append(rec)
        if callback is not None:
            callback(rec)
        return sol, rec

    lo, hi = float(c_lo), float(c_hi)
    if not warm_start:
        while hi - lo > tol_c:
            mid = 0.5 * (lo + hi)
            _, rec = run(mid, None)
            if rec.label == TYPE_I:
                lo = mid
            else:
                hi = mid
        return (lo, hi), records

    state = init
    if state is None:
        sol, rec = run(lo, None)
        if rec.label != TYPE_I:
            raise BracketError(f"warm refinement needs a TypeI start, got {rec.label} at c={lo}")
        state = (sol.p, sol.s)
    while hi - lo > tol_c:
        c = 0.5 * (lo + hi)
        sol, rec = run(c, state)
        if rec.label == TYPE_I and sol.converged:
            lo, state = c, (sol.p, sol.s)
        else:
            hi = c
    return (lo, hi), records


@dataclass
class WaveSpeedResult:
    c_bar: float
    bracket: tuple[float, float]
    G1_bracket: tuple[float, float]
    records: list[SweepRecord]


def find_wave_speed(params: Params, bracket: tuple[float, float], tol_c: float,
                    disc: Discretization | None = None,
                    g1: Callable[[float], float] | None = None,
                    callback: Callable[[SweepRecord], None] | None = None) -> WaveSpeedResult:
    """Bisection on ``G1(c)`` with cold starts.

    The bracket only needs a sign change; either orientation is accepted and
    preserved.  ``g1(c)`` replaces the solve-and-evaluate step (useful for
    testing the bisection itself).
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not lo < hi:
        raise BracketError(f"bracket must satisfy lo < hi, got {bracket}")
    if not tol_c > 0:
        raise ValueError("tol_c must be positive")
    records: list[SweepRecord] = []
    if g1 is None and disc is None:
        disc = Discretization(params.replace(c=lo))

    def G(c):
        if g1 is not None:
            return float(g1(c))
        prm = params.replace(c=c)
        sol = fixed_point_solve(prm, disc=disc)
        rec = record_for(sol, prm)
        records.append(rec)
        if callback is not None:
            callback(rec)
        if not sol.converged:
            raise ContinuationError(f"solve at c={c} did not converge")
        return rec.G1

    f_lo, f_hi = G(lo), G(hi)
    if not (np.sign(f_lo) * np.sign(f_hi) < 0):
        raise BracketError(f"G1 has no sign change on [{lo}, {hi}]: {f_lo:.4g}, {f_hi:.4g}")
    while hi - lo > tol_c:
        mid = 0.5 * (lo + hi)
        f_mid = G(mid)
        if f_mid == 0:
            lo = hi = mid
            f_lo = f_hi = 0.0
            break
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    return WaveSpeedResult(0.5 * (lo + hi), (lo, hi), (f_lo, f_hi), records)
