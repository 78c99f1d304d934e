"""Scenario orchestration: closed-loop runs, sweeps and the measurement subcommands."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .config import ConfigError, ScenarioConfig
from .engine import BATCH_UI, EngineParams, EngineResult, run_engine
from .global_clock import bow_inl, run_fdiv
from .sim_core import SingleBitResponse, ctle_shape, lane_bits, lossy_channel

EXIT_OK, EXIT_LOSS_OF_LOCK, EXIT_CONFIG = 0, 2, 3


def build_channel(cfg: ScenarioConfig) -> SingleBitResponse:
    ch = cfg.channel
    if ch.kind == "csv":
        try:
            return SingleBitResponse.from_csv(ch.path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load SBR from {ch.path}: {exc}") from exc
    raw = lossy_channel(ch.loss_db, pole_ratio=ch.pole_ratio, amplitude=ch.amplitude, ui=cfg.ui)
    return ctle_shape(raw, ch.ctle_zero_hz, ch.ctle_pole1_hz, ch.ctle_pole2_hz, ui=cfg.ui)


def dfe_tap_volts(cfg: ScenarioConfig, sbr: SingleBitResponse) -> float:
    if cfg.afe.dfe_tap is not None:
        return cfg.afe.dfe_tap
    return cfg.afe.dfe_tap_h1 * sbr.h(1, 0.0)


def quantized_tap(cfg: ScenarioConfig, sbr: SingleBitResponse) -> float:
    lsb = cfg.afe.dac_fullscale / 63
    return round(dfe_tap_volts(cfg, sbr) / lsb) * lsb


def engine_params(cfg: ScenarioConfig, sbr: SingleBitResponse) -> EngineParams:
    f = cfg.fdiv
    k_true = f.k_dcdl_true / cfg.ui
    return EngineParams(
        n_ui=cfg.n_ui, warmup_ui=cfg.warmup_ui, lanes=cfg.lanes, seed=cfg.seed,
        pattern=cfg.pattern, dfe_tap=dfe_tap_volts(cfg, sbr), dfe_adapt=cfg.afe.dfe_adapt,
        sampler_noise_sigma=cfg.afe.sampler_noise_sigma,
        sampler_offset=tuple(cfg.afe.sampler_offset), dac_fullscale=cfg.afe.dac_fullscale,
        pi_bits=cfg.lane.pi_bits, pi_mode=cfg.lane.pi_mode, initial_phase=cfg.lane.initial_phase,
        threshold=cfg.lane.threshold, k_ratio=cfg.lane.k_ratio, dlev_init=cfg.lane.dlev_init,
        pdlev_init=cfg.lane.pdlev_init, dlev_m=cfg.lane.dlev_m, pdlev_m=cfg.lane.pdlev_m,
        bdlev_m=cfg.lane.bdlev_m, tap_m=cfg.lane.tap_m,
        eca_on=cfg.eca.on, dither_period=cfg.eca.dither_period, k_step=cfg.eca.k_step,
        k_min=cfg.eca.k_min, k_max=cfg.eca.k_max, deadband=cfg.eca.deadband,
        dither_delay=cfg.eca.dither_delay,
        rj_sigma=cfg.jitter.rj_sigma, sj_amplitude=cfg.jitter.sj_amplitude,
        sj_frequency_per_ui=cfg.jitter.sj_frequency * cfg.ui,
        ppm_offset=cfg.ppm_offset, integral_on=f.integral, fdiv_tracking=f.tracking, ki=f.ki,
        clamp=f.clamp, div_int=f.div_int, nominal_frac=f.nominal_frac, k_dcdl_true=k_true,
        k_dcdl_init=k_true * (1 + f.k_dcdl_init_error),
        inl=bow_inl(f.inl_max_lsb) if f.inl_max_lsb else None, calibrate=f.calibrate,
        mu=k_true * f.mu_rel, cal_min_step=f.cal_min_step, realign_beta=f.realign_beta,
        trim_step=f.trim_step, eye_phase_bins=cfg.eye.phase_bins, eye_v_bins=cfg.eye.v_bins,
        eye_v_range=cfg.eye.v_range)


@dataclass
class RunReport:
    config_hash: str
    seed: int
    lanes: list[dict]
    clock: dict
    oracle: dict
    loss_of_lock: bool
    result: EngineResult | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "lanes": self.lanes,
                "clock": self.clock, "oracle": self.oracle, "loss_of_lock": self.loss_of_lock}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def summary(self) -> dict:
        out = {"config_hash": self.config_hash, "seed": self.seed,
               "loss_of_lock": self.loss_of_lock}
        for k, v in self.clock.items():
            out[f"clock.{k}"] = v
        for k, v in self.oracle.items():
            out[f"oracle.{k}"] = v
        for i, lane in enumerate(self.lanes):
            for k, v in lane.items():
                out[f"lane{i}.{k}"] = v
        return out

    @property
    def exit_code(self) -> int:
        return EXIT_LOSS_OF_LOCK if self.loss_of_lock else EXIT_OK


def _f(x) -> float:
    x = float(x)
    return x if math.isfinite(x) else None


def run(cfg: ScenarioConfig, sbr: SingleBitResponse | None = None) -> RunReport:
    """Closed-loop simulation of every configured lane plus the shared clock path."""
    sbr = build_channel(cfg) if sbr is None else sbr
    res = run_engine(engine_params(cfg, sbr), sbr)
    w = res.warmup_batches
    lsb = cfg.afe.dac_fullscale / 63
    ppm = res.lane_ppm()
    lanes = []
    for i in range(cfg.lanes):
        lanes.append({
            "lock_phase": _f(res.lock_mean[i]),
            "lock_std": _f(res.lock_std[i]),
            "dlev_code": int(res.dlev[i, -1]),
            "pdlev_code": int(res.pdlev[i, -1]),
            "bdlev_code": int(res.bdlev[i, -1]),
            "pdlev_mean_code": _f(res.pdlev[i, w:].mean()),
            "bdlev_mean_code": _f(res.bdlev[i, w:].mean()),
            "dlev_mean_code": _f(res.dlev[i, w:].mean()),
            "k_ratio": _f(res.k_ratio[i, -1]),
            "k_ratio_mean": _f(res.k_ratio[i, w:].mean()),
            "dfe_tap": _f(res.dfe_tap_code[i] * lsb),
            "errors": int(res.errors[i]),
            "bits": int(res.counted[i]),
            "ber": _f(res.ber[i]),
            "vem": _f(res.vem[i]),
            "residual_ppm": _f(ppm[i]),
            "vote_density": _f(res.vote_density[i]),
        })
    clock = {
        "mean_ratio": _f(res.mean_ratio()),
        "required_ratio": _f(BATCH_UI / res.params.t_lc),
        "frac_ctrl_final": _f(res.frac_ctrl[-1]),
        "k_dcdl_rel_final": _f(res.k_dcdl[-1] / res.params.k_dcdl_true),
        "integral_clamp_hit": res.clamp_hit,
        "flags": res.flags,
    }
    tap = quantized_tap(cfg, sbr)
    oracle = {"dfe_tap_quantized": _f(tap)}
    try:
        oracle["mm_crossing"] = _f(metrics.mm_lock_phase(sbr, tap))
    except ValueError:
        oracle["mm_crossing"] = None
    a, v = metrics.vem_argmax(sbr, tap)
    oracle["vem_argmax_phase"] = _f(a)
    oracle["vem_max"] = _f(v)
    return RunReport(cfg.config_hash(), cfg.seed, lanes, clock, oracle, res.loss_of_lock, res)


def write_run(report: RunReport, out_dir, decimate: int = 64) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "summary.txt"]
    paths[0].write_text(report.to_json())
    metrics.write_summary(paths[1], report.summary())
    if report.result is not None:
        paths.append(out / "telemetry.csv")
        write_telemetry(report.result, paths[-1], decimate)
    return paths


def write_telemetry(res: EngineResult, path, decimate: int = 64) -> None:
    n = res.frac_ctrl.size
    L = res.t_clk.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["batch", "frac_ctrl", "dcw", "k_dcdl_rel", "carry_density"]
        for i in range(L):
            head += [f"lane{i}_phase_ui", f"lane{i}_k_ratio", f"lane{i}_dlev", f"lane{i}_pdlev"]
        w.writerow(head)
        for b in range(0, n, decimate):
            seg = res.modulus[b:b + decimate]
            row = [b, f"{res.frac_ctrl[b]:.9f}", int(res.dcw[b]),
                   f"{res.k_dcdl[b] / res.params.k_dcdl_true:.6f}",
                   f"{(seg - np.floor(seg.mean())).mean():.6f}"]
            for i in range(L):
                row += [f"{res.t_clk[i, b] - BATCH_UI * b:.6f}", f"{res.k_ratio[i, b]:.4f}",
                        int(res.dlev[i, b]), int(res.pdlev[i, b])]
            w.writerow(row)


def sweep(cfg: ScenarioConfig, path: str, values) -> list[RunReport]:
    """Independent runs with one field varied; point ``i`` uses seed ``cfg.seed + i``."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    cfgs = [cfg.with_value(path, v).with_value("seed", cfg.seed + i) for i, v in enumerate(values)]
    return [run(c) for c in cfgs]


def write_sweep(reports: list[RunReport], path: str, values, out_file) -> None:
    keys = sorted(reports[0].summary())
    with open(out_file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([path] + keys)
        for v, r in zip(values, reports):
            s = r.summary()
            w.writerow([v] + [s.get(k) for k in keys])


def eye(cfg: ScenarioConfig, phase_bins: int = 64) -> tuple[metrics.EyeDiagram, RunReport]:
    """Closed-loop run with the scanning monitor sampler; one merged eye over all lanes."""
    if cfg.eye.phase_bins == 0:
        cfg = cfg.with_value("eye.phase_bins", phase_bins)
    rep = run(cfg)
    grid = rep.result.eye_grid.sum(axis=0)
    e = metrics.EyeDiagram(cfg.eye.phase_bins, cfg.eye.v_bins, cfg.eye.v_range, grid)
    return e, rep


def frozen_eye(sbr: SingleBitResponse, tap: float, phase: float, n_bits: int = 200_000,
               seed: int = 0, phase_bins: int = 64, v_bins: int = 256,
               v_range: float = 1.0) -> metrics.EyeDiagram:
    """Eye around a fixed sampling phase with ideal (transmitted-bit) DFE feedback."""
    bits = lane_bits(n_bits, seed).astype(float)
    k_lo, table = sbr.phase_table()
    from .sim_core import sample_table
    e = metrics.EyeDiagram(phase_bins, v_bins, v_range)
    offs = np.arange(phase_bins) / phase_bins - 0.5
    lo, hi = sbr.k_hi + 2, n_bits + k_lo - 2
    idx = np.arange(lo, hi)
    for o in offs:
        y = np.array([sample_table(bits, n, k_lo, table, phase + o) for n in idx])
        y -= tap * bits[idx - 1]
        e.add(bits[idx], np.full(idx.size, o), y)
    return e


def bathtub(cfg: ScenarioConfig, offsets=None, n_bits: int = 2_000_000) -> tuple[metrics.BathtubCurve, RunReport]:
    """Lock closed-loop, then sweep the frozen sampling phase around the mean lock point."""
    rep = run(cfg)
    sbr = build_channel(cfg)
    offsets = np.linspace(-0.5, 0.5, 41) if offsets is None else np.asarray(offsets)
    bits = lane_bits(n_bits, cfg.seed * 16 + 7, cfg.pattern)
    curve = metrics.bathtub(sbr, bits, rep.lanes[0]["lock_phase"], offsets,
                            dfe_tap=rep.lanes[0]["dfe_tap"],
                            noise_sigma=cfg.afe.sampler_noise_sigma,
                            rj_sigma=cfg.jitter.rj_sigma, seed=cfg.seed)
    return curve, rep


def jtol(cfg: ScenarioConfig, freqs, target_ber: float = 1e-4, ui_budget: int = 200_000,
         warmup_ui: int = 50_000) -> metrics.JtolCurve:
    """Jitter tolerance with the integral path off (first-order proportional loop).

    Each trial runs at least three SJ periods and ``ui_budget`` UI after warmup.
    """
    sbr = build_channel(cfg)
    base = cfg.with_value("fdiv.integral", False)

    def trial(f, a):
        n = int(max(ui_budget, 3.0 / (f * cfg.ui)))
        c = base.with_value("warmup_ui", warmup_ui).with_value("n_ui", warmup_ui + n)
        c = c.with_value("jitter.sj_frequency", float(f)).with_value("jitter.sj_amplitude", float(a))
        res = run_engine(engine_params(c, sbr), sbr)
        return res.errors.sum() / max(res.counted.sum(), 1) < target_ber

    return metrics.jtol_sweep(trial, freqs)


def jtol_corner_estimate(vote_density: float, threshold: float, pi_bits: int,
                         hf_tolerance: float, ui: float = 31.25e-12) -> float:
    """Slew-limited corner: proportional slew rate divided by 2*pi*(high-frequency tolerance)."""
    slew = vote_density / (threshold * 2 ** pi_bits) / ui
    return slew / (2 * math.pi * hf_tolerance)


def fdiv_phase(run_result, which: str = "ilcm", f_carrier: float = 16e9) -> np.ndarray:
    """Edge-time error of a divider run as carrier phase in radians."""
    return 2 * np.pi * f_carrier * run_result.edge_error(which)


def spectrum(cfg: ScenarioConfig, n_cycles: int = 2 ** 16, calibrated: bool = True,
             settle: int = 2 ** 14) -> metrics.PhaseSpectrum:
    """Recovered-clock spectrum of the divider plus multiplier at the configured ratio.

    With ``calibrated`` the DCDL gain is trained for ``settle`` cycles before
    the analysis window; otherwise it stays at its initial error.
    """
    f = cfg.fdiv
    t_lc = 2 * cfg.ui / (1 + cfg.ppm_offset * 1e-6)
    ratio = f.div_int + (f.nominal_frac if f.nominal_frac is not None
                         else BATCH_UI * cfg.ui / t_lc - f.div_int)
    run_ = run_fdiv(n_cycles + settle, ratio, t_lc=t_lc, k_true=f.k_dcdl_true,
                    k_init=f.k_dcdl_true * (1 + f.k_dcdl_init_error),
                    inl=bow_inl(f.inl_max_lsb), mu=f.k_dcdl_true * f.mu_rel,
                    calibrate=calibrated, realign_beta=f.realign_beta,
                    trim_step=f.trim_step * cfg.ui, cal_min_step=f.cal_min_step)
    theta = fdiv_phase(run_)[settle:]
    return metrics.spectrum(theta, 1.0 / (ratio * t_lc))
