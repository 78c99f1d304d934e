"""Behavioral receiver front end: 1-tap DFE summer, comparators, reference DACs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .sim_core import SingleBitResponse, sample_table

DATA, PD, EM = 0, 1, 2  # sampler order in AfeConfig.sampler_offset


@dataclass(frozen=True)
class AfeConfig:
    dfe_tap: float = 0.0
    sampler_noise_sigma: float = 0.0
    sampler_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dac_fullscale: float = 1.0
    dac_bits: int = 6

    def __post_init__(self):
        if self.dac_bits != 6:
            raise ValueError("reference DACs are 6-bit")
        if self.sampler_noise_sigma < 0:
            raise ValueError("sampler_noise_sigma must be nonnegative")
        if self.dac_fullscale <= 0:
            raise ValueError("dac_fullscale must be positive")
        object.__setattr__(self, "sampler_offset", tuple(float(v) for v in self.sampler_offset))
        if len(self.sampler_offset) != 3:
            raise ValueError("sampler_offset needs one value per sampler (data, pd, em)")

    @property
    def dac_max(self) -> int:
        return (1 << self.dac_bits) - 1

    @property
    def dac_lsb(self) -> float:
        return self.dac_fullscale / self.dac_max


@dataclass(frozen=True)
class SamplerOutputs:
    d: int
    e_pd: int
    e_em: int


@njit(cache=True)
def dfe_apply(v_in, prev_bit, tap):
    return v_in - prev_bit * tap


@njit(cache=True)
def decide(v, vref, offset, noise):
    """Comparator: +1 when ``v - vref + offset + noise`` is >= 0, else -1."""
    return 1 if v - vref + offset + noise >= 0.0 else -1


def sampler_decide(v: float, vref: float, cfg: AfeConfig, rng: np.random.Generator | None = None,
                   which: int = DATA) -> int:
    noise = 0.0
    if cfg.sampler_noise_sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required when sampler noise is enabled")
        noise = rng.normal(0.0, cfg.sampler_noise_sigma)
    return decide(v, vref, cfg.sampler_offset[which], noise)


def dac_voltage(code: int, cfg: AfeConfig) -> float:
    if not 0 <= code <= cfg.dac_max:
        raise ValueError(f"DAC code {code} outside 0..{cfg.dac_max}")
    return cfg.dac_fullscale * code / cfg.dac_max


def sample_three(bits, sbr: SingleBitResponse, n: int, clk_phase: float, eca_extra_delay: float,
                 dlev_code: int, pdlev_code: int, prev_bit: int, cfg: AfeConfig,
                 rng: np.random.Generator | None = None) -> SamplerOutputs:
    """Data, phase-detection error and eye-monitor samples for bit ``n``.

    Error samplers slice against ``vref * d`` where ``d`` is the concurrent
    data decision, so one comparator covers both symbol levels.
    """
    if not 0.0 <= clk_phase < 1.0:
        raise ValueError("clk_phase must lie in [0, 1)")
    if eca_extra_delay < 0:
        raise ValueError("eca_extra_delay must be nonnegative")
    bits = np.asarray(bits, dtype=np.float64)
    k_lo, table = sbr.phase_table()
    v = dfe_apply(sample_table(bits, n, k_lo, table, clk_phase), prev_bit, cfg.dfe_tap)
    if eca_extra_delay == 0.0:
        v_em = v
    else:
        v_em = dfe_apply(sample_table(bits, n, k_lo, table, clk_phase + eca_extra_delay),
                         prev_bit, cfg.dfe_tap)
    d = sampler_decide(v, 0.0, cfg, rng, DATA)
    e_pd = sampler_decide(v, d * dac_voltage(dlev_code, cfg), cfg, rng, PD)
    e_em = sampler_decide(v_em, d * dac_voltage(pdlev_code, cfg), cfg, rng, EM)
    return SamplerOutputs(d, e_pd, e_em)
