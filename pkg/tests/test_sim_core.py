import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brcdr.sim_core import (ClockDomain, JitterSpec, Polynomial, PrbsState, SingleBitResponse,
                            ctle_shape, jitter_offset, lane_bits, lossy_channel, prbs_next,
                            prbs_sequence, waveform_value)


def _reference_lfsr(n, m, register, count):
    """Bit-serial Fibonacci LFSR written out longhand."""
    reg = [(register >> i) & 1 for i in range(n)]  # reg[i] = bit i
    out = []
    for _ in range(count):
        msb = reg[n - 1]
        out.append(1 if msb else -1)
        fb = reg[n - 1] ^ reg[m - 1]
        reg = [fb] + reg[:-1]
    return out


def test_prbs7_period_is_127():
    seq, _ = prbs_sequence(254, PrbsState.all_ones(Polynomial.PRBS7))
    assert np.array_equal(seq[:127], seq[127:])
    assert all(not np.array_equal(seq[:127], np.roll(seq[:127], k)) for k in range(1, 127))


def test_prbs7_balance():
    seq, _ = prbs_sequence(127, PrbsState.all_ones(Polynomial.PRBS7))
    assert (seq == 1).sum() == 64 and (seq == -1).sum() == 63


def test_prbs_matches_longhand_lfsr():
    state = PrbsState(0b1011001, Polynomial.PRBS7)
    seq, _ = prbs_sequence(300, state)
    assert seq.tolist() == _reference_lfsr(7, 6, 0b1011001, 300)
    s31 = PrbsState(0x1234567, Polynomial.PRBS31)
    seq31, _ = prbs_sequence(200, s31)
    assert seq31.tolist() == _reference_lfsr(31, 28, 0x1234567, 200)


def test_prbs_next_agrees_with_bulk():
    state = PrbsState.all_ones(Polynomial.PRBS31)
    bulk, end = prbs_sequence(50, state)
    s = state
    one = []
    for _ in range(50):
        b, s = prbs_next(s)
        one.append(b)
    assert one == bulk.tolist()
    assert s == end


def test_prbs_rejects_zero_register():
    with pytest.raises(ValueError):
        PrbsState(0, Polynomial.PRBS7)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_lane_bits_are_bipolar_and_seed_deterministic(seed):
    a = lane_bits(500, seed)
    assert set(np.unique(a)) <= {-1, 1}
    assert np.array_equal(a, lane_bits(500, seed))


def test_from_cursors_reproduces_cursors():
    sbr = SingleBitResponse.from_cursors([0.1, 1.0, 0.3, -0.05], main=1)
    assert sbr.k_lo == -2 and sbr.k_hi == 3
    np.testing.assert_allclose(sbr.cursors(0.0), [0, 0.1, 1.0, 0.3, -0.05, 0])
    assert sbr.h(1, 0.5) == pytest.approx(0.5 * (0.3 - 0.05))


def test_sbr_validation():
    with pytest.raises(ValueError):
        SingleBitResponse(np.zeros(100), 32, 50)
    with pytest.raises(ValueError):
        SingleBitResponse.from_cursors([1.0, 0.5], main=0, oversampling=4)
    with pytest.raises(ValueError):
        SingleBitResponse(np.ones(10), 32, 5)


def test_sbr_csv_roundtrip(tmp_path):
    sbr = lossy_channel(10)
    sbr.to_csv(tmp_path / "s.csv")
    back = SingleBitResponse.from_csv(tmp_path / "s.csv")
    assert back.cursor_index == sbr.cursor_index
    np.testing.assert_array_equal(back.samples, sbr.samples)


def test_lossy_channel_hits_requested_nyquist_loss():
    ui = 31.25e-12
    for loss in (10.0, 20.0):
        sbr = lossy_channel(loss, pole_ratio=2)
        n = len(sbr.samples) + 8192
        f = np.fft.rfftfreq(n, ui / 32)
        i = np.argmin(np.abs(f - 16e9))
        pulse = np.fft.rfft(sbr.samples, n)[i]
        rect = np.fft.rfft(np.ones(32), n)[i]  # divide out the 1-UI transmit pulse
        assert 20 * np.log10(abs(pulse / rect)) == pytest.approx(-loss, abs=0.3)


def test_ctle_boosts_high_frequency_and_keeps_dc():
    raw = lossy_channel(20)
    eq = ctle_shape(raw, 4e9, 16e9, 40e9)
    assert eq.samples.sum() == pytest.approx(raw.samples.sum(), rel=2e-3)
    # post-cursor ISI relative to the main cursor shrinks
    assert eq.h(1) / eq.h(0) < raw.h(1) / raw.h(0)


def test_ctle_cancelling_pole_is_identity():
    raw = lossy_channel(12)
    same = ctle_shape(raw, 5e9, 5e9, math.inf)
    np.testing.assert_allclose(same.samples, raw.samples, atol=1e-12)
    assert same.cursor_index == raw.cursor_index


def test_ctle_rejects_pole_below_zero():
    with pytest.raises(ValueError):
        ctle_shape(lossy_channel(12), 5e9, 4e9, 40e9)


def test_waveform_is_superposition():
    sbr = SingleBitResponse.from_cursors([0.2, 1.0, 0.4, 0.1], main=1)
    bits = np.array([1, -1, 1, 1, -1, 1, -1, -1, 1, 1], dtype=float)
    n = 5
    expect = sum(bits[n - k] * sbr.h(k, 0.25) for k in range(sbr.k_lo, sbr.k_hi + 1))
    assert waveform_value(sbr, bits, 0.25, n) == pytest.approx(expect)


def test_waveform_window_too_short():
    sbr = SingleBitResponse.from_cursors([0.2, 1.0, 0.4, 0.1], main=1)
    with pytest.raises(ValueError):
        waveform_value(sbr, np.ones(3), 0.0, 1)
    with pytest.raises(ValueError):
        waveform_value(sbr, np.ones(20), 1.0, 10)


def test_clock_domain_bounds():
    assert ClockDomain(ppm_offset=2500).rx_scale == pytest.approx(1.0025)
    with pytest.raises(ValueError):
        ClockDomain(ppm_offset=20000)


def test_jitter_offset_sinusoid_and_rj():
    rng = np.random.default_rng(0)
    spec = JitterSpec(sj_amplitude=0.3, sj_frequency=1e8)
    n = np.arange(320)
    j = jitter_offset(spec, n, rng)
    assert np.max(np.abs(j)) == pytest.approx(0.3, rel=1e-3)
    rj = jitter_offset(JitterSpec(rj_sigma=0.05), np.arange(200_000), rng)
    assert np.std(rj) == pytest.approx(0.05, rel=0.02)
    with pytest.raises(ValueError):
        JitterSpec(rj_sigma=-1)
