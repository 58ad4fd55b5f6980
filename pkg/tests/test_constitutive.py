import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fingerwave.constitutive import (ClampLog, ConstitutiveError, clamp_saturation, general_laws,
                                     paper_laws, pos_part, validate_bounds)

LAWS = paper_laws(0.001, 0.32)
unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


def test_k_below_kink_is_kappa():
    assert LAWS.eval_k(0.1) == pytest.approx(0.001, abs=0)


def test_k_above_kink():
    # 0.001 + 0.18^2
    assert LAWS.eval_k(0.5) == pytest.approx(0.0334, rel=1e-14)


def test_k_continuous_at_kink():
    a = 0.32
    assert LAWS.eval_k(a) == 0.001
    assert LAWS.eval_k(np.nextafter(a, 0)) == 0.001
    assert LAWS.eval_k(a + 1e-9) == pytest.approx(0.001, abs=1e-15)


def test_pc_identity_and_roundtrip():
    assert LAWS.eval_pc(0.3) == 0.3
    assert LAWS.eval_pc_inv(LAWS.eval_pc(0.7)) == pytest.approx(0.7, abs=1e-12)
    assert LAWS.eval_pc(0.0) == 0.0


def test_non_finite_input_rejected():
    with pytest.raises(ConstitutiveError):
        LAWS.eval_k(np.nan)
    with pytest.raises(ConstitutiveError):
        LAWS.eval_pc(np.array([0.1, np.inf]))


def test_clamping_is_counted():
    log = ClampLog()
    k = LAWS.eval_k(np.array([-1e-6, 0.5, 1.0 + 1e-6]), log)
    assert log.below == 1 and log.above == 1
    assert log.worst == pytest.approx(1e-6)
    assert k[0] == 0.001 and k[2] == pytest.approx(0.001 + 0.68 ** 2)
    assert clamp_saturation(0.5, log).item() == 0.5
    assert log.total == 2


@pytest.mark.parametrize("x, expected", [(-1.0, 0.0), (0.0, 0.0), (2.5, 2.5)])
def test_pos_part(x, expected):
    assert pos_part(x) == expected


def test_validate_bounds_reference_run():
    b, viol = validate_bounds(LAWS, g=1.0, L=2.0, s_star=0.0, F_inf=0.056, c=0.04)
    assert b.c1 == 0.0
    assert b.c2 == pytest.approx(0.4624, rel=1e-12)
    assert b.F_lo == pytest.approx(0.002, rel=1e-12)
    assert b.F_hi == pytest.approx(0.9268, rel=1e-12)
    assert b.F_admissible(0.056)
    assert b.rho == 1.0
    # k'(s*) = 0 is reported, not fatal
    assert any("k'(s*)" in v for v in viol)
    assert not any("F_inf" in v for v in viol)


def test_validate_bounds_linear_k_degenerate_window():
    lin = general_laws(lambda s: s, lambda s: np.ones_like(s), lambda s: s, lambda s: np.ones_like(s))
    b, _ = validate_bounds(lin, g=1.0, L=1.0, s_star=0.5, F_inf=0.7)
    assert b.c1 == pytest.approx(1.0)
    assert b.c2 == pytest.approx(1.0)


def test_validate_bounds_flags_large_flux():
    b, viol = validate_bounds(LAWS, 1.0, 2.0, 0.0, F_inf=0.9268 + 1.0)
    assert any("F_inf" in v for v in viol)


def test_general_laws_bisection_inverse():
    laws = general_laws(lambda s: np.asarray(s) ** 3 + s, lambda s: 3 * np.asarray(s) ** 2 + 1,
                        lambda s: 0.1 + np.asarray(s), lambda s: np.ones_like(s))
    s = np.linspace(0.01, 0.99, 17)
    assert np.max(np.abs(laws.eval_pc_inv(laws.eval_pc(s)) - s)) < 1e-12


@given(unit, unit)
def test_monotone_laws(s1, s2):
    lo, hi = min(s1, s2), max(s1, s2)
    if lo < hi:
        assert LAWS.eval_pc(lo) < LAWS.eval_pc(hi)
    assert LAWS.eval_k(lo) <= LAWS.eval_k(hi)


@given(st.floats(min_value=0.01, max_value=0.99))
def test_derivative_consistency(s):
    h = 1e-5
    fd_pc = (LAWS.eval_pc(s + h) - LAWS.eval_pc(s - h)) / (2 * h)
    assert abs(fd_pc - LAWS.eval_pc_prime(s)) <= 1e-8
    if abs(s - 0.32) > 2 * h:
        fd_k = (LAWS.eval_k(s + h) - LAWS.eval_k(s - h)) / (2 * h)
        # k is quadratic away from the kink, so central differences are exact up to rounding
        assert abs(fd_k - LAWS.eval_k_prime(s)) <= 1e-8


@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
def test_pos_part_identity(x):
    assert pos_part(x) + pos_part(-x) == abs(x)


@settings(max_examples=50)
@given(unit)
def test_pc_inverse_roundtrip(s):
    assert abs(LAWS.eval_pc_inv(LAWS.eval_pc(s)) - s) <= 1e-12
