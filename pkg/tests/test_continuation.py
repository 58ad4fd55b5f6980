import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fingerwave import grid_fem as fem
from fingerwave.continuation import (TYPE_I, TYPE_II, UNCLASSIFIED, BracketError, SweepRecord,
                                     classify, classify_details, eval_G1, eval_G2,
                                     eval_G_general, find_wave_speed, record_for, source_height,
                                     sweep_c, transition_bracket)
from fingerwave.tw_scheme import Params, Solution


def synthetic(P, p_fn, s_fn):
    g = fem.build_grid(P.L, P.H, P.nx, P.nz)
    p = p_fn(g.y, g.z)
    s = s_fn(g.y, g.z)
    top = g.nodes_tagged(fem.TOP)
    return Solution(s=s, p=p, p_star=float(p[top[0]]), iters=0, residual_history=[], params=P,
                    converged=True, grid=g)


P8 = Params(nx=8, nz=8)


def test_G1_linear_pressure():
    sol = synthetic(P8, lambda y, z: 1.0 + 3.0 * z, lambda y, z: np.full_like(y, 1e-5))
    assert eval_G1(sol) == pytest.approx(0.04 - 0.001 * 3.0 / 1e-5, rel=1e-12)


def test_G1_undefined_for_zero_s0():
    P = P8.replace(s0_base=0.0)
    sol = synthetic(P, lambda y, z: z, lambda y, z: 0 * y)
    with pytest.raises(ValueError):
        eval_G1(sol)


def test_constant_state_closures():
    P = P8.replace(delta=0.0, F_inf=1.0 * 0.001 * 2.0)
    sol = synthetic(P, lambda y, z: np.full_like(y, 1e-5), lambda y, z: np.full_like(y, 1e-5))
    assert eval_G1(sol) == P.c
    assert eval_G_general(sol) == pytest.approx(0.0, abs=1e-18)
    assert eval_G2(sol) == 0.0
    assert classify(sol) == UNCLASSIFIED


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-1, 1), st.floats(0.01, 0.1))
def test_G_identity(slope, wiggle, c):
    # with s_* = s0 and k(s0) = kappa the full residual is L s0 (c - G1)
    P = P8.replace(c=c)
    sol = synthetic(P, lambda y, z: slope * z + wiggle * np.sin(3 * y) * z,
                    lambda y, z: np.full_like(y, P.s0_base))
    G, G1 = eval_G_general(sol), eval_G1(sol)
    assert G == pytest.approx(P.L * P.s0_base * (c - G1), rel=1e-9, abs=1e-15)
    # with s_* = 0 the c s_* term drops out
    assert eval_G_general(sol, s_star=0.0) == pytest.approx(-P.L * P.s0_base * G1, rel=1e-9, abs=1e-15)


def test_G2_linear_pressure():
    sol = synthetic(P8, lambda y, z: 3.0 * z, lambda y, z: np.full_like(y, 0.5))
    assert eval_G2(sol) == pytest.approx((0.001 + 0.18 ** 2) * 3.0 * 2.0, rel=1e-12)


def test_classification_cases():
    s = lambda y, z: np.full_like(y, 0.2)  # noqa: E731
    finger = synthetic(P8, lambda y, z: 0.2 + np.maximum(0.0, 1.0 - z), s)
    det = classify_details(finger)
    assert det["label"] == TYPE_I
    assert det["h_index"] == 3 and det["h"] == pytest.approx(0.75)
    small = synthetic(P8, lambda y, z: 1.2 + 0.1 * z, s)
    assert classify(small) == TYPE_II
    mixed = synthetic(P8, lambda y, z: 1.2 - 0.1 * z, s)
    assert classify(mixed) == UNCLASSIFIED
    assert source_height(synthetic(P8, lambda y, z: 0 * y, s)) == (0.0, -1)


def test_transition_bracket():
    def rec(c, label):
        return SweepRecord(c, True, 1, 0.0, 0.0, label, 0.0, 0.0, 0.0)
    recs = [rec(0.04, TYPE_I), rec(0.045, TYPE_I), rec(0.05, UNCLASSIFIED), rec(0.06, TYPE_II)]
    assert transition_bracket(recs) == (0.045, 0.05)
    assert transition_bracket(recs[2:]) is None


def test_bisection_linear_family():
    res = find_wave_speed(P8, (-1.0, 1.0), 1e-6, g1=lambda c: c)
    assert abs(res.c_bar) < 1e-6
    assert res.bracket[1] - res.bracket[0] <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.9, 0.9), st.sampled_from([1.0, -1.0]))
def test_bisection_keeps_sign_orientation(root, sign):
    res = find_wave_speed(P8, (-1.0, 1.0), 1e-5, g1=lambda c: sign * (root - c))
    f_lo, f_hi = res.G1_bracket
    assert np.sign(f_lo) == sign or f_lo == 0
    assert np.sign(f_hi) == -sign or f_hi == 0
    assert abs(res.c_bar - root) <= 1e-5


def test_bisection_bracket_errors():
    with pytest.raises(BracketError):
        find_wave_speed(P8, (0.1, 0.2), 1e-3, g1=lambda c: c)
    with pytest.raises(BracketError):
        find_wave_speed(P8, (0.2, 0.1), 1e-3, g1=lambda c: c)


def test_sweep_requires_sorted():
    with pytest.raises(ValueError):
        sweep_c(P8, [0.05, 0.04])


def test_single_point_sweep_matches_direct_solve(small_params, small_solution):
    res = sweep_c(small_params, [small_params.c], keep_solutions=True)
    direct = record_for(small_solution)
    assert len(res.records) == 1
    r = res.records[0]
    assert (r.G1, r.G2, r.label, r.h) == (direct.G1, direct.G2, direct.label, direct.h)
    assert r.label == TYPE_I


def test_warm_sweep_deterministic(small_params):
    a = sweep_c(small_params, [0.04, 0.05], warm_start=True)
    b = sweep_c(small_params, [0.04, 0.05], warm_start=True)
    strip = lambda recs: [{k: v for k, v in r.to_dict().items() if k != "wall_time"} for r in recs]  # noqa: E731
    assert strip(a.records) == strip(b.records)


def test_failed_solve_is_recorded():
    bad = Params(nx=4, nz=4, ptc_max_steps=1, M=4.0)
    res = sweep_c(bad, [0.04])
    assert len(res.records) == 1 and not res.records[0].converged
