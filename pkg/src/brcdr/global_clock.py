"""Shared frequency-tracking path: integral accumulator and fractional divider.

The fractional divider (FDIV) is a multi-modulus divider (MMD) driven by a
first-order delta-sigma modulator (DSM) whose phase residue is cancelled by
a digitally-controlled delay line (DCDL).  The DCDL gain estimate is
trained by sign-sign LMS from the bang-bang phase detector in the
injection-locked multiplier.

Times are in seconds in the dataclass API and in UI inside the compiled
loops; the loops only ever see one unit at a time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

EARLY, LATE = 1, -1
DCW_MAX = 511
T_LC_DEFAULT = 62.5e-12  # 16 GHz LC PLL
K_DCDL_TRUE_DEFAULT = 183e-15  # one DCDL LSB
MMD_MIN, MMD_MAX = 8, 32


@njit(cache=True)
def bbpd_vote(edge_a, edge_b):
    """EARLY when ``edge_a`` arrives no later than ``edge_b``."""
    return EARLY if edge_a <= edge_b else LATE


@dataclass(frozen=True)
class IntegralPathState:
    freq_accum: float = 0.0
    ki: float = 2.0 ** -22
    clamp: float = 0.08
    nominal_frac: float = 0.0
    lane_vote_sum: float = 0.0
    clamped: bool = False

    @property
    def frac_ctrl(self) -> float:
        return self.nominal_frac + self.freq_accum


@njit(cache=True)
def integral_step(freq_accum, vote_sum, ki, clamp):
    """Returns ``(freq_accum, clamped)``."""
    freq_accum += ki * vote_sum
    if freq_accum > clamp:
        return clamp, True
    if freq_accum < -clamp:
        return -clamp, True
    return freq_accum, False


def integral_accumulate(votes, state: IntegralPathState) -> tuple[IntegralPathState, float]:
    """Fold one batch of per-lane (weighted) vote sums into the frequency word."""
    total = float(np.sum(votes))
    acc, hit = integral_step(state.freq_accum, total, state.ki, state.clamp)
    new = replace(state, freq_accum=acc, lane_vote_sum=total, clamped=state.clamped or hit)
    return new, new.frac_ctrl


@njit(cache=True)
def dsm_step(frac, dsm_accum):
    """First-order DSM.  Returns ``(carry, residue)``; the residue is the new accumulator."""
    dsm_accum += frac
    carry = math.floor(dsm_accum)
    return carry, dsm_accum - carry


def mmd_divide(modulus: int, t_lc: float = T_LC_DEFAULT) -> float:
    if not MMD_MIN <= modulus <= MMD_MAX:
        raise ValueError(f"MMD modulus {modulus} outside {MMD_MIN}..{MMD_MAX}")
    return modulus * t_lc


def bow_inl(max_lsb: float = 0.73, n_codes: int = DCW_MAX + 1) -> np.ndarray:
    """Smooth parabolic INL profile in LSB, zero at both ends."""
    x = np.arange(n_codes) / (n_codes - 1)
    return 4.0 * max_lsb * x * (1.0 - x)


@njit(cache=True)
def dcdl_code(residue, k_dcdl, t_lc):
    """Returns ``(dcw, clamped)``."""
    dcw = int(round(residue * t_lc / k_dcdl))
    if dcw > DCW_MAX:
        return DCW_MAX, True
    if dcw < 0:
        return 0, True
    return dcw, False


@njit(cache=True)
def dcdl_true_delay(dcw, k_true, inl):
    return k_true * (dcw + inl[dcw])


def dcdl_delay(residue: float, k_dcdl: float, t_lc: float = T_LC_DEFAULT,
               k_true: float | None = None, inl=None) -> tuple[int, float, bool]:
    """Code for a residue and the delay the line really produces.

    Returns ``(dcw, delay_seconds, clamped)``.  ``k_true`` defaults to the
    estimate (an ideal line); ``inl`` is an LSB profile over all 512 codes.
    """
    if k_dcdl <= 0:
        raise ValueError("k_dcdl must be positive")
    k_true = k_dcdl if k_true is None else k_true
    inl = np.zeros(DCW_MAX + 1) if inl is None else np.asarray(inl, float)
    dcw, clamped = dcdl_code(residue, k_dcdl, t_lc)
    return dcw, float(dcdl_true_delay(dcw, k_true, inl)), clamped


@njit(cache=True)
def kdcdl_calibrate(k_dcdl, bb_vote, dcw, dcw_prev, mu, k_floor, min_step=1):
    """Sign-sign LMS step.  Returns ``(k_dcdl, floored)``.

    An EARLY vote means the divider period came out short, which is the
    positive error sign.  Code steps smaller than ``min_step`` are skipped:
    single-LSB steps are correlated with the line's own rounding error and
    would bias the estimate.
    """
    step = dcw - dcw_prev
    if abs(step) < min_step or step == 0:
        return k_dcdl, False
    err = 1.0 if bb_vote == EARLY else -1.0
    k_dcdl -= mu * err * (1.0 if step > 0 else -1.0)
    if k_dcdl <= k_floor:
        return k_floor, True
    return k_dcdl, False


@dataclass(frozen=True)
class FdivState:
    div_int: int = 16
    frac_ctrl: float = 0.0
    dsm_accum: float = 0.0
    dcw: int = 0
    k_dcdl: float = K_DCDL_TRUE_DEFAULT
    t_mmd_prev: float = 0.0
    dcw_prev: int = 0

    def __post_init__(self):
        if not 0 <= self.dcw <= DCW_MAX:
            raise ValueError("dcw is a 9-bit code")
        if not MMD_MIN <= self.div_int + self.frac_ctrl <= MMD_MAX:
            raise ValueError("division ratio outside 8..32")


@njit(cache=True)
def fdiv_advance(ratio, dsm_accum, mmd_edge, dcw, k_est, t_lc, k_true, inl):
    """One divider output cycle.

    Returns ``(edge, dsm_accum, mmd_edge, dcw, modulus, dcw_clamped)`` where
    ``edge`` is the DCDL-delayed output edge time.
    """
    div_int = math.floor(ratio)
    carry, dsm_accum = dsm_step(ratio - div_int, dsm_accum)
    modulus = div_int + carry
    if modulus < MMD_MIN or modulus > MMD_MAX:
        raise ValueError("MMD modulus out of range")
    mmd_edge += modulus * t_lc
    dcw, clamped = dcdl_code(dsm_accum, k_est, t_lc)
    edge = mmd_edge + dcdl_true_delay(dcw, k_true, inl)
    return edge, dsm_accum, mmd_edge, dcw, modulus, clamped


@njit(cache=True)
def _run_fdiv(n_cycles, ratio, t_lc, k_true, k_init, inl, mu, k_floor, calibrate,
              beta, trim_step, min_step):
    edges = np.empty(n_cycles)
    osc = np.empty(n_cycles)
    k_hist = np.empty(n_cycles)
    dcws = np.empty(n_cycles, dtype=np.int64)
    moduli = np.empty(n_cycles, dtype=np.int64)
    dsm_accum = 0.0
    mmd_edge = 0.0
    dcw = 0
    k_est = k_init
    period = ratio * t_lc
    trim = 0.0
    osc_phase = 0.0
    flags = 0
    for i in range(n_cycles):
        dcw_prev = dcw
        edge, dsm_accum, mmd_edge, dcw, modulus, clamped = fdiv_advance(
            ratio, dsm_accum, mmd_edge, dcw, k_est, t_lc, k_true, inl)
        if clamped:
            flags |= 1
        if i == 0:
            osc_phase = edge
            vote = EARLY
        else:
            predicted = osc_phase + period + trim
            vote = bbpd_vote(edge, predicted)
            osc_phase = predicted + beta * (edge - predicted)
            trim += -trim_step if vote == EARLY else trim_step
            if calibrate:
                k_est, floored = kdcdl_calibrate(k_est, vote, dcw, dcw_prev, mu, k_floor,
                                                 min_step)
                if floored:
                    flags |= 2
        edges[i] = edge
        osc[i] = osc_phase
        k_hist[i] = k_est
        dcws[i] = dcw
        moduli[i] = modulus
    return edges, osc, k_hist, dcws, moduli, flags


@dataclass
class FdivRun:
    """Open-loop divider run at a fixed ratio (times in seconds)."""

    edges: np.ndarray
    ilcm_edges: np.ndarray
    k_dcdl: np.ndarray
    dcw: np.ndarray
    modulus: np.ndarray
    dcw_clamped: bool
    k_floored: bool
    ratio: float
    t_lc: float

    @property
    def period(self) -> float:
        return self.ratio * self.t_lc

    def edge_error(self, which: str = "fdiv") -> np.ndarray:
        """Deviation of edges from the ideal uniform grid ``n * ratio * t_lc``."""
        e = self.edges if which == "fdiv" else self.ilcm_edges
        n = np.arange(1, len(e) + 1)
        return e - n * self.period


def run_fdiv(n_cycles: int, ratio: float = 16.04, *, t_lc: float = T_LC_DEFAULT,
             k_true: float = K_DCDL_TRUE_DEFAULT, k_init: float | None = None,
             inl=None, mu: float | None = None, calibrate: bool = True,
             realign_beta: float = 0.5, trim_step: float | None = None,
             k_floor: float | None = None, cal_min_step: int = 4) -> FdivRun:
    """Drive the divider and ILCM reference loop for ``n_cycles`` output edges.

    ``mu`` defaults to 2^-10 of the true gain; ``trim_step`` to 1e-6 of the
    output period.
    """
    if not MMD_MIN <= ratio < MMD_MAX:
        raise ValueError("division ratio outside 8..32")
    inl = np.zeros(DCW_MAX + 1) if inl is None else np.asarray(inl, float)
    k_init = k_true if k_init is None else k_init
    mu = k_true * 2.0 ** -10 if mu is None else mu
    trim_step = 1e-6 * ratio * t_lc if trim_step is None else trim_step
    k_floor = k_true / 16 if k_floor is None else k_floor
    # work in units of t_lc to keep the compiled loop well scaled
    s = 1.0 / t_lc
    edges, osc, k_hist, dcws, moduli, flags = _run_fdiv(
        int(n_cycles), float(ratio), 1.0, k_true * s, k_init * s, inl, mu * s, k_floor * s,
        bool(calibrate), float(realign_beta), trim_step * s, int(cal_min_step))
    return FdivRun(edges * t_lc, osc * t_lc, k_hist * t_lc, dcws, moduli,
                   bool(flags & 1), bool(flags & 2), float(ratio), t_lc)
