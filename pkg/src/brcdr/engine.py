"""Closed-loop multi-lane simulation kernel.

One compiled loop runs every lane UI by UI and the shared clock path once per
32-UI batch (one divider output cycle).  All times are in transmitter UI.

Per batch ``b``:
  1. the fractional divider emits an edge; the injection-locked multiplier
     realigns to it and yields 32 sampling ticks;
  2. each lane latches its PI code and samples 32 bits: data, PD-error and
     eye-monitor comparators, then PD vote, level adaptation, DFE tap and
     proportional update;
  3. weighted lane votes feed the shared integral path, which trims the
     divider ratio (or, with divider tracking frozen, rotates the PIs).

Each lane owns a private xorshift stream so its noise does not depend on how
many other lanes run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .cdr_lane import (DN, UP, _walk, eca_decide, mmpd_vote, pdlev_update,
                       proportional_step)
from .global_clock import (EARLY, bbpd_vote, dcdl_code, dcdl_true_delay, dsm_step,
                           integral_step, kdcdl_calibrate)
from .sim_core import sample_table

BATCH_UI = 32


@njit(cache=True)
def _xorshift(state):
    x = state
    x ^= (x >> np.uint64(12))
    x ^= (x << np.uint64(25))
    x ^= (x >> np.uint64(27))
    return x, x * np.uint64(2685821657736338717)


@njit(cache=True)
def _gauss(rng, lane):
    s, a = _xorshift(rng[lane])
    s, b = _xorshift(s)
    rng[lane] = s
    u1 = ((a >> np.uint64(11)) + np.uint64(1)) * (1.0 / 9007199254740993.0)
    u2 = (b >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@njit(cache=True)
def _pi_phase(code, table):
    n = table.shape[0]
    q = code // n
    return q + table[code - q * n]


@njit(cache=True)
def _simulate(bits, k_lo, sbr_table, n_batches, warmup_batches,
              lane_p, eca_p, glob_p, fdiv_int, inl, pi_table, pi_init, rng,
              eye_bins, eye_grid, eca_on, dfe_adapt, integral_on, fdiv_tracking,
              calibrate, cal_min_step):
    """Scalar parameters arrive packed in float arrays built by ``run_engine``."""
    L = bits.shape[0]
    nbits = bits.shape[1]
    (threshold, k_init, dlev_init, pdlev_init, dlev_m, pdlev_m, bdlev_m, tap_m, tap_init,
     noise_sigma, off_d, off_pd, off_em, dac_lsb, rj_sigma, sj_amp, sj_w) = (
        lane_p[0], lane_p[1], lane_p[2], lane_p[3], lane_p[4], lane_p[5], lane_p[6], lane_p[7],
        lane_p[8], lane_p[9], lane_p[10], lane_p[11], lane_p[12], lane_p[13], lane_p[14],
        lane_p[15], lane_p[16])
    dither_period = int(eca_p[0])
    k_step, k_min, k_max, deadband, dither_delay = eca_p[1], eca_p[2], eca_p[3], eca_p[4], eca_p[5]
    (ki, clamp, nominal_frac, t_lc, k_true, k_est, mu, k_floor, beta, trim_step,
     ilcm_period) = (glob_p[0], glob_p[1], glob_p[2], glob_p[3], glob_p[4], glob_p[5],
                     glob_p[6], glob_p[7], glob_p[8], glob_p[9], glob_p[10])
    n_codes = pi_table.shape[0]
    tap_lsb = dac_lsb
    pb, vb, v_range = int(eye_bins[0]), int(eye_bins[1]), eye_bins[2]

    # lane state
    pi_code = pi_init.copy()
    vote_acc = np.zeros(L)
    k_ratio = np.full(L, k_init)
    dlev = np.full(L, int(dlev_init), dtype=np.int64)
    pdlev = np.full(L, int(pdlev_init), dtype=np.int64)
    bdlev = np.full(L, int(dlev_init), dtype=np.int64)
    tap_code = np.full(L, int(tap_init), dtype=np.int64)
    c_dlev = np.zeros(L, dtype=np.int64)
    c_pdlev = np.zeros(L, dtype=np.int64)
    c_bdlev = np.zeros(L, dtype=np.int64)
    c_tap = np.zeros(L, dtype=np.int64)
    d1 = np.ones(L, dtype=np.int64)    # d[n-1]
    d2 = np.ones(L, dtype=np.int64)    # d[n-2]
    e1 = np.ones(L, dtype=np.int64)    # e_pd[n-1]
    em1 = np.ones(L, dtype=np.int64)   # e_em[n-1]
    dither_on = False
    ui_in_phase = 0
    snap_sum = np.zeros(L)
    snap_n = 0
    snap_off = np.full(L, np.nan)
    pi_int = 0.0  # integral-path PI rotation in codes (frozen divider mode)

    # global state
    freq_acc = 0.0
    dsm_acc = 0.0
    mmd_edge = 0.0
    dcw = 0
    osc = 0.0
    trim = 0.0
    flags = 0

    # outputs
    t_clk = np.empty((L, n_batches))
    tel_frac = np.empty(n_batches)
    tel_dcw = np.empty(n_batches, dtype=np.int64)
    tel_k = np.empty(n_batches)
    tel_mod = np.empty(n_batches, dtype=np.int64)
    tel_edge = np.empty(n_batches)
    tel_osc = np.empty(n_batches)
    tel_kr = np.empty((L, n_batches))
    tel_pdlev = np.empty((L, n_batches), dtype=np.int64)
    tel_dlev = np.empty((L, n_batches), dtype=np.int64)
    tel_bdlev = np.empty((L, n_batches), dtype=np.int64)
    errors = np.zeros(L, dtype=np.int64)
    counted = np.zeros(L, dtype=np.int64)
    ph_sum = np.zeros(L)
    ph_sq = np.zeros(L)
    y_min_plus = np.full(L, np.inf)
    y_max_minus = np.full(L, -np.inf)
    n_prev = np.full(L, -1, dtype=np.int64)
    n_votes = np.zeros(L, dtype=np.int64)

    for b in range(n_batches):
        # shared clock path: divider edge, then injection realignment
        ratio = fdiv_int + nominal_frac + (freq_acc if fdiv_tracking else 0.0)
        div_int = math.floor(ratio)
        carry, dsm_acc = dsm_step(ratio - div_int, dsm_acc)
        modulus = div_int + carry
        if modulus < 8 or modulus > 32:
            flags |= 4
            modulus = min(max(modulus, 8), 32)
        mmd_edge += modulus * t_lc
        dcw_prev = dcw
        dcw, clamped = dcdl_code(dsm_acc, k_est, t_lc)
        if clamped:
            flags |= 8
        edge = mmd_edge + dcdl_true_delay(dcw, k_true, inl)
        if b == 0:
            osc = edge
        else:
            predicted = osc + ilcm_period + trim
            vote = bbpd_vote(edge, predicted)
            osc = predicted + beta * (edge - predicted)
            trim += -trim_step if vote == EARLY else trim_step
            if calibrate:
                k_est, floored = kdcdl_calibrate(k_est, vote, dcw, dcw_prev, mu, k_floor,
                                                 cal_min_step)
                if floored:
                    flags |= 16
        tick = (ilcm_period + trim) / BATCH_UI
        counting = b >= warmup_batches
        vote_sum = 0.0

        for lane in range(L):
            code = pi_code[lane] + int(math.floor(pi_int))
            base = osc + _pi_phase(code, pi_table)
            t_clk[lane, b] = base
            kr = k_ratio[lane]
            tap = tap_code[lane] * tap_lsb
            vd = dlev[lane] * dac_lsb
            vp = pdlev[lane] * dac_lsb
            vbd = bdlev[lane] * dac_lsb
            for j in range(BATCH_UI):
                t = base + j * tick
                if sj_amp != 0.0:
                    t -= sj_amp * math.sin(sj_w * t)
                if rj_sigma > 0.0:
                    t -= rj_sigma * _gauss(rng, lane)
                n = int(math.floor(t + 0.5))
                ph = t - n
                y = sample_table(bits[lane], n, k_lo, sbr_table, ph) - tap * d1[lane]
                if eca_on and dither_on:
                    y_em = sample_table(bits[lane], n, k_lo, sbr_table, ph + dither_delay) \
                        - tap * d1[lane]
                else:
                    y_em = y
                nz_d = nz_p = nz_e = 0.0
                if noise_sigma > 0.0:
                    nz_d = noise_sigma * _gauss(rng, lane)
                    nz_p = noise_sigma * _gauss(rng, lane)
                    nz_e = noise_sigma * _gauss(rng, lane)
                d = 1 if y + off_d + nz_d >= 0.0 else -1
                e = 1 if y - d * vd + off_pd + nz_p >= 0.0 else -1
                em = 1 if y_em - d * vp + off_em + nz_e >= 0.0 else -1
                eb = 1 if y - d * vbd + off_pd + nz_p >= 0.0 else -1

                v = mmpd_vote(d1[lane], d, e1[lane], e)
                dlev[lane], c_dlev[lane] = _walk(dlev[lane], c_dlev[lane], e * d, dlev_m, 63)
                pdlev[lane], c_pdlev[lane] = pdlev_update(pdlev[lane], c_pdlev[lane], d2[lane],
                                                          d1[lane], d, em1[lane], pdlev_m, 63)
                inc = 1 if eb * d > 0 else -3
                bdlev[lane], c_bdlev[lane] = _walk(bdlev[lane], c_bdlev[lane], inc, bdlev_m, 63)
                if dfe_adapt:
                    tap_code[lane], c_tap[lane] = _walk(tap_code[lane], c_tap[lane],
                                                        e * d1[lane], tap_m, 63)
                vote_acc[lane], pi_code[lane] = proportional_step(vote_acc[lane], pi_code[lane],
                                                                  v, kr, threshold)
                if v == UP:
                    vote_sum += 1.0
                elif v == DN:
                    vote_sum -= kr
                vd = dlev[lane] * dac_lsb
                vp = pdlev[lane] * dac_lsb
                vbd = bdlev[lane] * dac_lsb
                tap = tap_code[lane] * tap_lsb

                if counting and 0 <= n < nbits:
                    if v != 0:
                        n_votes[lane] += 1
                    x = bits[lane, n]
                    if n != n_prev[lane]:
                        counted[lane] += 1
                        if d != x:
                            errors[lane] += 1
                    ph_sum[lane] += ph
                    ph_sq[lane] += ph * ph
                    if n < 1 or d1[lane] != bits[lane, n - 1]:
                        pass  # error propagation is not part of the eye
                    elif x > 0:
                        if y < y_min_plus[lane]:
                            y_min_plus[lane] = y
                    elif y > y_max_minus[lane]:
                        y_max_minus[lane] = y
                    if pb > 0:
                        # scanning monitor sampler sweeps the phase bins round-robin
                        s = (b * BATCH_UI + j) % pb
                        off = s / pb - 0.5
                        ys = sample_table(bits[lane], n, k_lo, sbr_table, ph + off) \
                            - tap * d1[lane]
                        # a sample before the clock still belongs to bit n; class by bits[n]
                        vi = int(math.floor((ys + v_range) / (2.0 * v_range) * vb))
                        vi = min(max(vi, 0), vb - 1)
                        eye_grid[lane, 1 if x > 0 else 0, s, vi] += 1
                n_prev[lane] = n
                d2[lane] = d1[lane]
                d1[lane] = d
                e1[lane] = e
                em1[lane] = em

            tel_kr[lane, b] = k_ratio[lane]
            tel_pdlev[lane, b] = pdlev[lane]
            tel_dlev[lane, b] = dlev[lane]
            tel_bdlev[lane, b] = bdlev[lane]

        # eye-climbing: dither bookkeeping at UI granularity, decided per batch
        if eca_on:
            for lane in range(L):
                if ui_in_phase >= dither_period // 2:
                    snap_sum[lane] += pdlev[lane] * BATCH_UI
            if ui_in_phase >= dither_period // 2:
                snap_n += BATCH_UI
            ui_in_phase += BATCH_UI
            if ui_in_phase >= dither_period:
                for lane in range(L):
                    snap = snap_sum[lane] / max(snap_n, 1)
                    if not dither_on:
                        snap_off[lane] = snap
                    elif not math.isnan(snap_off[lane]):
                        k_ratio[lane] = eca_decide(k_ratio[lane], snap, snap_off[lane], k_step,
                                                   k_min, k_max, deadband)
                    snap_sum[lane] = 0.0
                snap_n = 0
                ui_in_phase = 0
                dither_on = not dither_on

        if integral_on:
            freq_acc, hit = integral_step(freq_acc, vote_sum, ki, clamp)
            if hit:
                flags |= 1
            if not fdiv_tracking:
                # frozen divider: the same word rotates the PIs by frac * T_LC per batch
                pi_int += freq_acc * t_lc * n_codes
        tel_frac[b] = nominal_frac + freq_acc
        tel_dcw[b] = dcw
        tel_k[b] = k_est
        tel_mod[b] = modulus
        tel_edge[b] = edge
        tel_osc[b] = osc

    return (t_clk, tel_frac, tel_dcw, tel_k, tel_mod, tel_edge, tel_osc, tel_kr, tel_pdlev,
            tel_dlev, tel_bdlev, errors, counted, ph_sum, ph_sq, y_min_plus, y_max_minus,
            tap_code, n_votes, flags)


@dataclass
class EngineParams:
    """Flat parameter set for one closed-loop run (all times in UI)."""

    n_ui: int
    warmup_ui: int = 200_000
    lanes: int = 1
    seed: int = 0
    pattern: str = "prbs31"
    # afe
    dfe_tap: float = 0.0
    dfe_adapt: bool = False
    sampler_noise_sigma: float = 0.0
    sampler_offset: tuple = (0.0, 0.0, 0.0)
    dac_fullscale: float = 1.0
    # lane loops
    pi_bits: int = 8
    pi_mode: str = "ideal"
    initial_phase: float = 0.0
    threshold: float = 16.0
    k_ratio: float = 1.0
    dlev_init: int = 32
    pdlev_init: int = 32
    dlev_m: int = 16
    pdlev_m: int = 4
    bdlev_m: int = 16
    tap_m: int = 64
    # eca
    eca_on: bool = False
    dither_period: int = 8192
    k_step: float = 1 / 16
    k_min: float = 1 / 8
    k_max: float = 8.0
    deadband: float = 0.0
    dither_delay: float = 1 / 32
    # jitter
    rj_sigma: float = 0.0
    sj_amplitude: float = 0.0
    sj_frequency_per_ui: float = 0.0
    # shared clock path
    ppm_offset: float = 0.0
    integral_on: bool = True
    fdiv_tracking: bool = True
    ki: float = 2.0 ** -22
    clamp: float = 0.08
    div_int: int = 16
    nominal_frac: float | None = None
    k_dcdl_true: float = 183e-15 / 31.25e-12
    k_dcdl_init: float | None = None
    inl: np.ndarray | None = None
    calibrate: bool = True
    cal_min_step: int = 4
    mu: float | None = None
    realign_beta: float = 0.5
    trim_step: float = 3.2e-5
    # eye capture
    eye_phase_bins: int = 0
    eye_v_bins: int = 128
    eye_v_range: float = 1.0

    @property
    def t_lc(self) -> float:
        return 2.0 / (1.0 + self.ppm_offset * 1e-6)


@dataclass
class EngineResult:
    params: EngineParams
    t_clk: np.ndarray
    frac_ctrl: np.ndarray
    dcw: np.ndarray
    k_dcdl: np.ndarray
    modulus: np.ndarray
    fdiv_edge: np.ndarray
    ilcm_edge: np.ndarray
    k_ratio: np.ndarray
    pdlev: np.ndarray
    dlev: np.ndarray
    bdlev: np.ndarray
    errors: np.ndarray
    counted: np.ndarray
    lock_mean: np.ndarray
    lock_std: np.ndarray
    vem: np.ndarray
    dfe_tap_code: np.ndarray
    vote_density: np.ndarray
    eye_grid: np.ndarray | None
    flags: int

    @property
    def warmup_batches(self) -> int:
        return self.params.warmup_ui // BATCH_UI

    @property
    def ber(self) -> np.ndarray:
        return self.errors / np.maximum(self.counted, 1)

    def lane_ppm(self) -> np.ndarray:
        """Recovered-clock frequency error per lane after warmup, from a linear fit."""
        w = self.warmup_batches
        b = np.arange(w, self.t_clk.shape[1])
        out = []
        for row in self.t_clk[:, w:]:
            slope = np.polyfit(b - b[0], row - BATCH_UI * b, 1)[0]
            out.append(slope / BATCH_UI * 1e6)
        return np.array(out)

    def mean_ratio(self) -> float:
        return float(self.modulus[self.warmup_batches:].mean())

    def settled_mean(self, arr: np.ndarray) -> np.ndarray:
        """Mean of a per-lane telemetry row over the post-warmup window."""
        return arr[:, self.warmup_batches:].mean(axis=1)

    @property
    def clamp_hit(self) -> bool:
        return bool(self.flags & 1)

    @property
    def loss_of_lock(self) -> bool:
        return bool(self.flags & (1 | 4 | 8)) or bool(np.any(self.ber > 0.1))


def run_engine(p: EngineParams, sbr) -> EngineResult:
    from .cdr_lane import PiModel
    from .sim_core import lane_bits

    if p.n_ui <= p.warmup_ui:
        raise ValueError("n_ui must exceed warmup_ui")
    if not 1 <= p.lanes <= 4:
        raise ValueError("lanes must be 1..4")
    n_batches = -(-p.n_ui // BATCH_UI)
    nbits = n_batches * BATCH_UI + 256
    bits = np.stack([lane_bits(nbits, p.seed * 16 + lane, p.pattern) for lane in range(p.lanes)])
    k_lo, table = sbr.phase_table()
    dac_lsb = p.dac_fullscale / 63
    pi_table = PiModel(p.pi_bits, p.pi_mode).table()
    n_codes = pi_table.size
    tap_code = int(round(p.dfe_tap / dac_lsb))
    lane_p = np.array([p.threshold, p.k_ratio, p.dlev_init, p.pdlev_init, p.dlev_m, p.pdlev_m,
                       p.bdlev_m, p.tap_m, tap_code, p.sampler_noise_sigma,
                       *p.sampler_offset, dac_lsb, p.rj_sigma, p.sj_amplitude,
                       2 * np.pi * p.sj_frequency_per_ui], dtype=float)
    eca_p = np.array([p.dither_period, p.k_step, p.k_min, p.k_max, p.deadband, p.dither_delay])
    t_lc = p.t_lc
    required = BATCH_UI / t_lc
    frac = (required - p.div_int) if p.nominal_frac is None else p.nominal_frac
    if not p.fdiv_tracking and p.nominal_frac is None:
        frac = 0.0
    k_init = p.k_dcdl_true if p.k_dcdl_init is None else p.k_dcdl_init
    mu = p.k_dcdl_true * 2.0 ** -10 if p.mu is None else p.mu
    inl = np.zeros(512) if p.inl is None else np.asarray(p.inl, float)
    glob_p = np.array([p.ki, p.clamp, frac, t_lc, p.k_dcdl_true, k_init, mu,
                       p.k_dcdl_true / 16, p.realign_beta, p.trim_step, float(BATCH_UI)])
    pi_init = np.full(p.lanes, int(round(p.initial_phase * n_codes)), dtype=np.int64)
    rng = np.array([np.random.SeedSequence([p.seed, lane]).generate_state(1, np.uint64)[0] | 1
                    for lane in range(p.lanes)], dtype=np.uint64)
    pb = p.eye_phase_bins
    eye_grid = np.zeros((p.lanes, 2, max(pb, 1), p.eye_v_bins), dtype=np.int64)
    eye_bins = np.array([pb, p.eye_v_bins, p.eye_v_range], dtype=float)
    out = _simulate(bits, k_lo, table, n_batches, p.warmup_ui // BATCH_UI, lane_p, eca_p,
                    glob_p, float(p.div_int), inl, pi_table, pi_init, rng, eye_bins, eye_grid,
                    p.eca_on, p.dfe_adapt, p.integral_on, p.fdiv_tracking, p.calibrate,
                    p.cal_min_step)
    (t_clk, frac_t, dcw, k_t, mod, edge, osc, kr, pdl, dl, bdl, errors, counted, ph_sum, ph_sq,
     ymin, ymax, tap_final, n_votes, flags) = out
    cnt = (n_batches - p.warmup_ui // BATCH_UI) * BATCH_UI
    mean = ph_sum / cnt
    std = np.sqrt(np.maximum(ph_sq / cnt - mean ** 2, 0.0))
    return EngineResult(p, t_clk, frac_t, dcw, k_t, mod, edge, osc, kr, pdl, dl, bdl, errors,
                        counted, mean, std, ymin - ymax, tap_final, n_votes / cnt,
                        eye_grid if pb > 0 else None, int(flags))
