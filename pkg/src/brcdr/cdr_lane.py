"""Per-lane timing recovery.

The numeric kernels here are compiled with numba and take plain scalars so
the closed-loop engine can call them once per UI; the dataclass wrappers
below them are the convenient entry points for scripts and tests.

Vote convention: ``UP`` means the sampling clock is early and the phase
interpolator code should increase (sample later); ``DN`` the opposite.
Error samples use ``e = sign(y - d * Dlev)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .global_clock import EARLY, bbpd_vote

UP, DN, HOLD = 1, -1, 0


class Vote(enum.IntEnum):
    UP = UP
    DN = DN
    HOLD = HOLD


# Sign-sign Mueller-Mueller over all 16 (d_prev, d, e_prev, e) patterns.
# (1, 1, -1, 1) and (-1, -1, 1, -1) need a rising post-cursor residual, so
# with a DFE that removes h1 they never fire.
MMPD_TABLE: dict[tuple[int, int, int, int], Vote] = {}


@njit(cache=True)
def mmpd_vote(d_prev, d, e_prev, e):
    z = e * d_prev - e_prev * d
    if z > 0:
        return UP
    if z < 0:
        return DN
    return HOLD


for _p in np.ndindex(2, 2, 2, 2):
    _pat = tuple(1 if b else -1 for b in _p)
    MMPD_TABLE[_pat] = Vote(mmpd_vote(*_pat))
del _p, _pat


@njit(cache=True)
def _walk(code, counter, inc, m, code_max):
    """Random-walk filter: move ``code`` one LSB each time ``counter`` reaches +/-m."""
    counter += inc
    while counter >= m:
        counter -= m
        if code < code_max:
            code += 1
    while counter <= -m:
        counter += m
        if code > 0:
            code -= 1
    return code, counter


@njit(cache=True)
def dlev_update(dlev_code, counter, d, e_pd, m=1, code_max=63):
    """SS-LMS toward the median of ``|y|``: up when the sample lies beyond ``Dlev * d``."""
    return _walk(dlev_code, counter, e_pd * d, m, code_max)


@njit(cache=True)
def pdlev_update(pdlev_code, counter, x_prev, x, x_next, e_em, m=1, code_max=63):
    """SS-LMS on the eye-monitor sample, only for decided pattern (-1, +1, -1)."""
    if x_prev == -1 and x == 1 and x_next == -1:
        return _walk(pdlev_code, counter, e_em, m, code_max)
    return pdlev_code, counter


@njit(cache=True)
def bdlev_update(bdlev_code, counter, d, e, m=1, code_max=63):
    """Prior-art biased data level: down steps weigh three times the up steps."""
    inc = 1 if e * d > 0 else -3
    return _walk(bdlev_code, counter, inc, m, code_max)


@njit(cache=True)
def dfe_tap_adapt(tap_code, counter, d_prev, e_pd, m=1, code_max=63):
    """SS-LMS toward a zero residual post-cursor."""
    return _walk(tap_code, counter, e_pd * d_prev, m, code_max)


@njit(cache=True)
def proportional_step(accum, pi_code, vote, k_ratio, threshold):
    """Weighted majority buffer: UP adds 1, DN subtracts ``k_ratio``.

    ``pi_code`` is unwrapped here; callers reduce it modulo the PI size.
    """
    if vote == UP:
        accum += 1.0
    elif vote == DN:
        accum -= k_ratio
    while accum >= threshold:
        accum -= threshold
        pi_code += 1
    while accum <= -threshold:
        accum += threshold
        pi_code -= 1
    return accum, pi_code


@njit(cache=True)
def eca_decide(k_ratio, snap_on, snap_off, k_step, k_min, k_max, deadband):
    """One eye-climbing decision from the delayed/undelayed Pdlev averages."""
    diff = snap_on - snap_off
    if abs(diff) <= deadband:
        return k_ratio
    if diff > 0:
        k_ratio -= k_step
    else:
        k_ratio += k_step
    return min(max(k_ratio, k_min), k_max)


@dataclass(frozen=True)
class LaneCdrState:
    dlev_code: int = 32
    pdlev_code: int = 32
    pi_code: int = 0
    vote_accum: float = 0.0
    dfe_tap: float = 0.0
    d_prev: int = 1
    e_pd_prev: int = 1
    dlev_counter: int = 0
    pdlev_counter: int = 0
    pi_bits: int = 8

    def __post_init__(self):
        if not (0 <= self.dlev_code <= 63 and 0 <= self.pdlev_code <= 63):
            raise ValueError("Dlev/Pdlev codes are 6-bit")
        object.__setattr__(self, "pi_code", self.pi_code % (1 << self.pi_bits))


def proportional_update(state: LaneCdrState, vote: int, k_ratio: float,
                        threshold: float = 16) -> LaneCdrState:
    if k_ratio <= 0:
        raise ValueError("k_ratio must be positive")
    accum, code = proportional_step(state.vote_accum, state.pi_code, int(vote), k_ratio, threshold)
    return replace(state, vote_accum=accum, pi_code=code % (1 << state.pi_bits))


@dataclass(frozen=True)
class EcaState:
    k_ratio: float = 1.0
    dither_on: bool = False
    dither_period: int = 8192
    pdlev_snapshot_on: float = math.nan
    pdlev_snapshot_off: float = math.nan
    k_step: float = 1 / 16
    k_min: float = 1 / 8
    k_max: float = 8.0
    deadband: float = 0.0
    dither_delay: float = 1 / 32

    def __post_init__(self):
        if not self.k_min <= self.k_ratio <= self.k_max:
            raise ValueError("k_ratio outside [k_min, k_max]")
        if self.dither_period < 2:
            raise ValueError("dither_period must span at least two UI")

    @property
    def extra_delay(self) -> float:
        """CLK_ECA delay relative to CLK in UI for the current dither half."""
        return self.dither_delay if self.dither_on else 0.0


def pdlev_snapshot(pdlev_codes) -> float:
    """Mean Pdlev code over the second half of one dither phase."""
    codes = np.asarray(pdlev_codes, dtype=float)
    if codes.size == 0:
        raise ValueError("empty Pdlev stream")
    return float(codes[codes.size // 2:].mean())


def eca_step(eca: EcaState, pdlev_codes) -> EcaState:
    """Close one dither phase.

    ``pdlev_codes`` is the Pdlev code stream observed during the phase that
    just ended.  Ending an ``on`` phase completes a cycle, so ``k_ratio`` is
    adjusted from the two snapshots before the delay switches off again.
    """
    snap = pdlev_snapshot(pdlev_codes)
    if not eca.dither_on:
        return replace(eca, pdlev_snapshot_off=snap, dither_on=True)
    k = eca.k_ratio
    if not math.isnan(eca.pdlev_snapshot_off):
        k = eca_decide(k, snap, eca.pdlev_snapshot_off, eca.k_step, eca.k_min, eca.k_max,
                       eca.deadband)
    return replace(eca, pdlev_snapshot_on=snap, k_ratio=k, dither_on=False)


@dataclass(frozen=True)
class PiModel:
    bits: int = 8
    mode: str = "ideal"

    def __post_init__(self):
        if self.mode not in ("ideal", "diamond"):
            raise ValueError(f"unknown PI mode {self.mode!r}")
        if self.bits < 2:
            raise ValueError("PI needs at least 2 bits (one code per quadrant)")

    @property
    def n_codes(self) -> int:
        return 1 << self.bits

    @property
    def phases_per_quadrant(self) -> int:
        return 1 << (self.bits - 2)

    def table(self) -> np.ndarray:
        """Output phase in UI for every code; one full PI turn spans 1 UI."""
        codes = np.arange(self.n_codes)
        if self.mode == "ideal":
            return codes / self.n_codes
        n = self.phases_per_quadrant
        q, k = np.divmod(codes, n)
        return (q + np.arctan2(k, n - k) / (np.pi / 2)) / 4


def pi_phase(code: int, model: PiModel) -> float:
    if not 0 <= code < model.n_codes:
        raise ValueError(f"PI code {code} outside 0..{model.n_codes - 1}")
    return float(model.table()[code])


@dataclass(frozen=True)
class IlcmState:
    """Injection-locked multiplier tracked at reference-edge granularity.

    ``osc_phase`` is the time (UI) of the oscillator edge aligned with the
    latest injection; ``ref_period`` is the free-running period of
    ``mult_ratio`` oscillator cycles, trimmed by ``freq_track_accum``.
    """

    ref_period: float
    mult_ratio: int = 16
    realign_beta: float = 0.5
    osc_phase: float = 0.0
    freq_track_accum: float = 0.0
    trim_step: float = 0.0

    def __post_init__(self):
        if not 0 < self.realign_beta <= 1:
            raise ValueError("realign_beta must lie in (0, 1]")

    @property
    def period(self) -> float:
        return self.ref_period + self.freq_track_accum


@njit(cache=True)
def ilcm_advance(osc_phase, period, trim, ref_edge, beta, trim_step):
    """Free-run one reference period, vote, realign and trim.

    Returns ``(osc_phase, trim, vote)``; the vote compares the reference edge
    with the oscillator's predicted edge.
    """
    predicted = osc_phase + period + trim
    vote = bbpd_vote(ref_edge, predicted)
    osc_phase = predicted + beta * (ref_edge - predicted)
    if vote == EARLY:
        trim -= trim_step
    else:
        trim += trim_step
    return osc_phase, trim, vote


def ilcm_step(ilcm: IlcmState, ref_edge_phase: float) -> tuple[IlcmState, int]:
    osc, trim, vote = ilcm_advance(ilcm.osc_phase, ilcm.ref_period, ilcm.freq_track_accum,
                                   ref_edge_phase, ilcm.realign_beta, ilcm.trim_step)
    return replace(ilcm, osc_phase=osc, freq_track_accum=trim), vote
