from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from brcdr.global_clock import (DCW_MAX, EARLY, LATE, FdivState, IntegralPathState, bbpd_vote,
                                bow_inl, dcdl_delay, dsm_step, integral_accumulate,
                                kdcdl_calibrate, mmd_divide, run_fdiv)

K = 183e-15
T_LC = 62.5e-12


def _carries(frac, n):
    acc, out = 0.0, []
    for _ in range(n):
        c, acc = dsm_step(frac, acc)
        out.append(c)
    return out


def test_dsm_quarter_pattern():
    assert _carries(0.25, 8) == [0, 0, 0, 1, 0, 0, 0, 1]


@given(st.integers(0, 2 ** 16 - 1))
@settings(max_examples=50, deadline=None)
def test_dsm_matches_rational_oracle(num):
    frac = num / 2 ** 16
    assert _carries(frac, 300) == oracles.dsm_carries(Fraction(num, 2 ** 16), 300)


@pytest.mark.parametrize("frac", [0.04, 0.0395, 0.5, 0.9])
def test_dsm_carry_density(frac):
    for n in (100, 1000, 7777):
        assert abs(sum(_carries(frac, n)) - frac * n) <= 1.0 + 1e-9


def test_mmd_range():
    assert mmd_divide(16, T_LC) == pytest.approx(16 * T_LC)
    with pytest.raises(ValueError):
        mmd_divide(33)
    with pytest.raises(ValueError):
        mmd_divide(7)
    with pytest.raises(ValueError):
        FdivState(div_int=31, frac_ctrl=1.5)
    with pytest.raises(ValueError):
        run_fdiv(10, ratio=40.0)


def test_bbpd_tie_is_early():
    assert bbpd_vote(1.0, 1.0) == EARLY
    assert bbpd_vote(1.0, 2.0) == EARLY
    assert bbpd_vote(2.0, 1.0) == LATE


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_bbpd_time_offset_invariance(a, b, c):
    # exact shifts only: dyadic offsets keep the comparison exact
    c = round(c * 256) / 256
    a, b = round(a * 256) / 256, round(b * 256) / 256
    assert bbpd_vote(a + c, b + c) == bbpd_vote(a, b)


def test_dcdl_midscale_and_clamp():
    residue = 256 * K / T_LC
    dcw, delay, clamped = dcdl_delay(residue, K, T_LC)
    assert dcw == 256 and delay == pytest.approx(256 * K) and not clamped
    dcw, _, clamped = dcdl_delay(0.999, K / 4, T_LC)
    assert dcw == DCW_MAX and clamped
    with pytest.raises(ValueError):
        dcdl_delay(0.5, 0.0)


def test_bow_inl_shape():
    inl = bow_inl(0.73)
    assert inl[0] == 0 and inl[-1] == 0 and inl.max() == pytest.approx(0.73, rel=1e-3)


@pytest.mark.parametrize("ratio", [16.04, 16.25, 17.333])
def test_perfect_gain_gives_uniform_edges(ratio):
    run = run_fdiv(4096, ratio, t_lc=T_LC, calibrate=False)
    err = run.edge_error()
    assert np.max(np.abs(err)) <= K / 2 + 1e-18
    assert np.max(np.abs(err)) < 1e-12


def test_wrong_gain_leaves_periodic_error():
    run = run_fdiv(4096, 16.04, t_lc=T_LC, k_init=1.1 * K, calibrate=False)
    assert np.max(np.abs(run.edge_error())) > 10 * K


@pytest.mark.parametrize("k_init", [0.9 * K, 1.1 * K])
def test_gain_calibration_converges(k_init):
    run = run_fdiv(2 ** 16, 16.04, t_lc=T_LC, k_init=k_init, inl=bow_inl(0.73))
    assert run.k_dcdl[-1] == pytest.approx(K, rel=0.03)
    assert not run.k_floored
    tail = run.edge_error()[-4096:]
    assert np.max(np.abs(tail - tail.mean())) < 4 * K


def test_calibration_ignores_small_steps():
    assert kdcdl_calibrate(1.0, EARLY, 10, 9, 0.01, 0.1, 4) == (1.0, False)
    k, _ = kdcdl_calibrate(1.0, EARLY, 20, 9, 0.01, 0.1, 4)
    assert k == pytest.approx(0.99)
    k, _ = kdcdl_calibrate(1.0, EARLY, 2, 20, 0.01, 0.1, 4)
    assert k == pytest.approx(1.01)
    assert kdcdl_calibrate(0.105, EARLY, 20, 9, 0.01, 0.1, 4) == (0.1, True)


def test_integral_examples():
    s = IntegralPathState(ki=2 ** -10, clamp=0.01, nominal_frac=0.04)
    s, frac = integral_accumulate([3, -1, 2], s)
    assert s.freq_accum == pytest.approx(4 * 2 ** -10)
    assert frac == pytest.approx(0.04 + 4 * 2 ** -10) and not s.clamped
    for _ in range(10):
        s, frac = integral_accumulate([4, 4], s)
    assert s.freq_accum == 0.01 and s.clamped
    s, _ = integral_accumulate([0.0], s)
    assert s.clamped  # sticky


@given(st.lists(st.integers(-4, 4), max_size=200))
def test_integral_is_bounded_and_linear_inside_clamp(votes):
    s = IntegralPathState(ki=1e-4, clamp=1.0)
    for v in votes:
        s, _ = integral_accumulate([v], s)
    assert s.freq_accum == pytest.approx(1e-4 * sum(votes), abs=1e-12)
