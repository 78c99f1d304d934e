import numpy as np
import pytest

from brcdr.afe import (DATA, EM, PD, AfeConfig, dac_voltage, decide, dfe_apply, sample_three,
                       sampler_decide)
from brcdr.sim_core import SingleBitResponse


def test_dac_codes():
    cfg = AfeConfig(dac_fullscale=0.63)
    assert dac_voltage(0, cfg) == 0.0
    assert dac_voltage(63, cfg) == pytest.approx(0.63)
    assert cfg.dac_lsb == pytest.approx(0.01)
    with pytest.raises(ValueError):
        dac_voltage(64, cfg)
    with pytest.raises(ValueError):
        AfeConfig(dac_bits=7)


def test_dfe_removes_previous_bit_contribution():
    assert dfe_apply(0.9, 1, 0.3) == pytest.approx(0.6)
    assert dfe_apply(0.9, -1, 0.3) == pytest.approx(1.2)


def test_comparator_tie_is_high_and_offsets_shift_threshold():
    assert decide(0.2, 0.2, 0.0, 0.0) == 1
    assert decide(0.19, 0.2, 0.0, 0.0) == -1
    assert decide(0.19, 0.2, 0.02, 0.0) == 1
    cfg = AfeConfig(sampler_offset=(0.0, 0.05, -0.05))
    assert sampler_decide(0.0, 0.02, cfg, which=PD) == 1
    assert sampler_decide(0.0, -0.02, cfg, which=EM) == -1
    assert sampler_decide(0.0, 0.0, cfg, which=DATA) == 1


def test_noise_requires_rng_and_is_unbiased():
    cfg = AfeConfig(sampler_noise_sigma=0.1)
    with pytest.raises(ValueError):
        sampler_decide(0.0, 0.0, cfg)
    rng = np.random.default_rng(3)
    votes = [sampler_decide(0.05, 0.0, cfg, rng) for _ in range(20000)]
    from scipy import stats
    assert np.mean(np.array(votes) == 1) == pytest.approx(stats.norm.cdf(0.5), abs=0.01)


def test_sample_three_error_samplers_use_signed_reference():
    sbr = SingleBitResponse.from_cursors([1.0, 0.0], main=0)
    cfg = AfeConfig(dac_fullscale=63 / 50)  # one code = 0.02 V
    bits = -np.ones(40)
    out = sample_three(bits, sbr, 20, 0.0, 0.0, dlev_code=40, pdlev_code=55, prev_bit=-1, cfg=cfg)
    # y = -1.0; Dlev = 0.8 -> |y| above Dlev so e agrees with d; Pdlev = 1.1 -> below
    assert (out.d, out.e_pd, out.e_em) == (-1, -1, 1)


def test_sample_three_eye_monitor_delay():
    sbr = SingleBitResponse.from_cursors([1.0, 0.0], main=0)
    cfg = AfeConfig()
    bits = np.zeros(40)
    bits[20] = 1
    o0 = sample_three(bits, sbr, 20, 0.0, 0.0, 60, 60, 1, cfg)
    o1 = sample_three(bits, sbr, 20, 0.0, 0.5, 60, 30, 1, cfg)
    assert o0.e_em == 1 and o1.e_em == 1  # 0.5 V at half a UI is above 30/63 V
    o2 = sample_three(bits, sbr, 20, 0.0, 0.6, 60, 30, 1, cfg)
    assert o2.e_em == -1
    with pytest.raises(ValueError):
        sample_three(bits, sbr, 20, 1.2, 0.0, 60, 60, 1, cfg)
