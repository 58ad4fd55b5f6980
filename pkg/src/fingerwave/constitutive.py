"""Capillary pressure and permeability laws for the imbibition branch.

A law set bundles ``pc``, ``k`` and their derivatives as vectorised callables
on saturation.  Every evaluation goes through :func:`clamp_saturation`, which
maps values outside ``[0, 1]`` back into the unit interval and counts how many
entries were moved.  The counts live in a caller-owned :class:`ClampLog`, so
the laws themselves stay pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ArrayFn = Callable[[np.ndarray], np.ndarray]


class ConstitutiveError(ValueError):
    """Non-finite input or an inadmissible law."""


@dataclass
class ClampLog:
    """Running tally of saturation values pulled back into ``[0, 1]``."""

    below: int = 0
    above: int = 0
    worst: float = 0.0  # largest distance outside the interval seen so far

    @property
    def total(self) -> int:
        return self.below + self.above

    def merge(self, other: "ClampLog") -> None:
        self.below += other.below
        self.above += other.above
        self.worst = max(self.worst, other.worst)


def _finite(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ConstitutiveError(f"{name} contains non-finite values")
    return arr


def clamp_saturation(s, log: ClampLog | None = None) -> np.ndarray:
    s = _finite(s, "saturation")
    lo = s < 0.0
    hi = s > 1.0
    if log is not None and (lo.any() or hi.any()):
        log.below += int(lo.sum())
        log.above += int(hi.sum())
        log.worst = max(log.worst, float(np.max(np.maximum(-s, s - 1.0))))
    return np.clip(s, 0.0, 1.0)


def pos_part(x):
    """``max(0, x)`` elementwise."""
    return np.maximum(x, 0.0)


def _bisect_inverse(f: ArrayFn, values: np.ndarray, lo: float, hi: float, tol: float = 1e-12):
    """Solve ``f(s) = v`` for increasing ``f`` on ``[lo, hi]``, clamping outside the range."""
    v = np.asarray(values, dtype=float)
    a = np.full(v.shape, lo)
    b = np.full(v.shape, hi)
    # enough halvings to shrink [lo, hi] below tol
    n_iter = int(np.ceil(np.log2(max(hi - lo, tol) / tol))) + 1
    for _ in range(n_iter):
        m = 0.5 * (a + b)
        up = f(m) < v
        a = np.where(up, m, a)
        b = np.where(up, b, m)
    return 0.5 * (a + b)


@dataclass(frozen=True)
class ConstitutiveLaws:
    """Monotone capillary pressure ``pc`` and permeability ``k`` on saturation.

    Parameters
    ----------
    pc, pc_prime, k, k_prime : callable
        Vectorised functions of saturation in ``[0, 1]``.
    pc_inv : callable, optional
        Inverse of ``pc``.  When omitted it is computed by bisection to 1e-12.
    kappa, a : float, optional
        Base permeability and kink saturation, kept for reporting when the
        laws come from :func:`paper_laws`.
    """

    pc: ArrayFn
    pc_prime: ArrayFn
    k: ArrayFn
    k_prime: ArrayFn
    pc_inv: ArrayFn | None = None
    kappa: float | None = None
    a: float | None = None
    name: str = "custom"
    extras: dict = field(default_factory=dict, compare=False)

    def eval_pc(self, s, log: ClampLog | None = None) -> np.ndarray:
        return np.asarray(self.pc(clamp_saturation(s, log)), dtype=float)

    def eval_pc_prime(self, s, log: ClampLog | None = None) -> np.ndarray:
        """Derivative of the clamped law: zero where ``s`` lies outside [0, 1]."""
        s = _finite(s, "saturation")
        inside = (s >= 0.0) & (s <= 1.0)
        return np.where(inside, self.pc_prime(np.clip(s, 0.0, 1.0)), 0.0)

    def eval_k(self, s, log: ClampLog | None = None) -> np.ndarray:
        return np.asarray(self.k(clamp_saturation(s, log)), dtype=float)

    def eval_k_prime(self, s, log: ClampLog | None = None) -> np.ndarray:
        s = _finite(s, "saturation")
        inside = (s >= 0.0) & (s <= 1.0)
        return np.where(inside, self.k_prime(np.clip(s, 0.0, 1.0)), 0.0)

    def eval_pc_inv(self, p) -> np.ndarray:
        """Saturation with ``pc(s) = p``, clamped to ``[0, 1]``."""
        p = _finite(p, "pressure")
        if self.pc_inv is not None:
            return np.clip(self.pc_inv(p), 0.0, 1.0)
        return _bisect_inverse(self.pc, p, 0.0, 1.0)


def paper_laws(kappa: float = 0.001, a: float = 0.32) -> ConstitutiveLaws:
    """Identity capillary pressure and the piecewise quadratic permeability.

    ``k(s) = kappa`` below the kink ``a`` and ``kappa + (s - a)**2`` above it.
    """
    if not (kappa > 0):
        raise ConstitutiveError(f"kappa must be positive, got {kappa}")

    def k(s):
        s = np.asarray(s, dtype=float)
        return kappa + np.where(s < a, 0.0, (s - a) ** 2)

    def k_prime(s):
        s = np.asarray(s, dtype=float)
        return np.where(s < a, 0.0, 2.0 * (s - a))

    return ConstitutiveLaws(
        pc=lambda s: np.asarray(s, dtype=float) + 0.0,
        pc_prime=lambda s: np.ones_like(np.asarray(s, dtype=float)),
        k=k,
        k_prime=k_prime,
        pc_inv=lambda p: np.asarray(p, dtype=float) + 0.0,
        kappa=float(kappa),
        a=float(a),
        name="paper",
    )


def general_laws(pc: ArrayFn, pc_prime: ArrayFn, k: ArrayFn, k_prime: ArrayFn,
                 name: str = "custom") -> ConstitutiveLaws:
    """Laws without a closed-form inverse; ``pc_inv`` falls back to bisection."""
    return ConstitutiveLaws(pc=pc, pc_prime=pc_prime, k=k, k_prime=k_prime, name=name)


@dataclass(frozen=True)
class ParamBounds:
    """Admissible windows for wave speed and far-field flux."""

    c1: float
    c2: float
    F_lo: float
    F_hi: float
    rho: float  # smallest sampled pc'

    def c_admissible(self, c: float) -> bool:
        return self.c1 < c < self.c2

    def F_admissible(self, F: float) -> bool:
        return self.F_lo < F < self.F_hi


def validate_bounds(laws: ConstitutiveLaws, g: float, L: float, s_star: float,
                    F_inf: float, c: float | None = None,
                    n_samples: int = 1001) -> tuple[ParamBounds, list[str]]:
    """Evaluate the parameter windows and collect (non-fatal) violations.

    Returns
    -------
    bounds : ParamBounds
        ``c1 = g k'(s*)``, ``c2 = g (k(1) - k(s*)) / (1 - s*)``,
        ``F_lo = g L [k(s*) + k'(s*) (1 - s*)]`` and ``F_hi = g L k(1)``.
    violations : list of str
        Human-readable warnings.  Nothing here stops a run.
    """
    if not (0.0 <= s_star < 1.0):
        raise ConstitutiveError(f"s_star must lie in [0, 1), got {s_star}")
    ks = float(laws.eval_k(s_star))
    kps = float(laws.eval_k_prime(s_star))
    k1 = float(laws.eval_k(1.0))
    c1 = g * kps
    c2 = g * (k1 - ks) / (1.0 - s_star)
    F_lo = g * L * (ks + kps * (1.0 - s_star))
    F_hi = g * L * k1

    samples = np.linspace(0.0, 1.0, n_samples)[1:-1]
    rho = float(np.min(laws.eval_pc_prime(samples)))
    bounds = ParamBounds(c1, c2, F_lo, F_hi, rho)

    out: list[str] = []
    if rho <= 0:
        out.append(f"pc' is not bounded away from zero (min sampled {rho:.3g})")
    kv = laws.eval_k(samples)
    if np.any(kv <= 0):
        out.append("k is not positive on (0, 1)")
    if np.any(np.diff(kv) < 0):
        out.append("k is not nondecreasing on (0, 1)")
    if kps <= 0:
        out.append(f"k'(s*) = {kps:.3g} is not positive; strict convexity assumption fails")
    if s_star <= 0:
        out.append("s* = 0 lies on the boundary of (0, 1)")
    if c is not None and not bounds.c_admissible(c):
        out.append(f"c = {c} outside ({c1:.6g}, {c2:.6g})")
    if not bounds.F_admissible(F_inf):
        out.append(f"F_inf = {F_inf} outside ({F_lo:.6g}, {F_hi:.6g})")
    return bounds, out
