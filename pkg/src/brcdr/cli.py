"""Command-line entry point: ``brcdr <subcommand> --config scenario.toml``."""
from __future__ import annotations

import argparse
import ast
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, metrics
from .config import ConfigError, ScenarioConfig

log = logging.getLogger("brcdr")


def _value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brcdr", description="Baud-rate multi-lane CDR simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="scenario TOML file")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("run", help="closed-loop run, writes report.json/summary.txt/telemetry.csv"))
    sp = common(sub.add_parser("sweep", help="independent runs over one config field"))
    sp.add_argument("--param", required=True, help="dotted field path, e.g. eca.k_step")
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp = common(sub.add_parser("eye", help="closed-loop eye histogram"))
    sp.add_argument("--phase-bins", type=int, default=64)
    sp = common(sub.add_parser("bathtub", help="frozen-phase BER sweep around the lock point"))
    sp.add_argument("--points", type=int, default=41)
    sp.add_argument("--bits", type=int, default=2_000_000)
    sp = common(sub.add_parser("jtol", help="jitter tolerance curve"))
    sp.add_argument("--freqs", default="1e5,3e5,1e6,3e6,1e7,3e7,1e8", help="SJ frequencies in Hz")
    sp.add_argument("--target-ber", type=float, default=1e-4)
    sp.add_argument("--ui-budget", type=int, default=200_000)
    sp = common(sub.add_parser("spectrum", help="divider/multiplier phase spectrum"))
    sp.add_argument("--cycles", type=int, default=2 ** 16)
    sp.add_argument("--uncalibrated", action="store_true", help="also write the spectrum with "
                    "DCDL calibration disabled")
    return p


def _load(args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_value("seed", args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _load(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return _dispatch(args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG


def _dispatch(args, cfg: ScenarioConfig, out: Path) -> int:
    tag = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    if args.command == "run":
        rep = harness.run(cfg)
        harness.write_run(rep, out, cfg.telemetry_decimate)
        log.info("wrote %s", out)
        return rep.exit_code
    if args.command == "sweep":
        values = [_value(v) for v in args.values.split(",") if v.strip()]
        reps = harness.sweep(cfg, args.param, values)
        harness.write_sweep(reps, args.param, values, out / "sweep.csv")
        for i, r in enumerate(reps):
            (out / f"report_{i}.json").write_text(r.to_json())
        return max(r.exit_code for r in reps)
    if args.command == "eye":
        e, rep = harness.eye(cfg, args.phase_bins)
        e.to_csv(out / "eye.csv")
        metrics.write_summary(out / "eye_summary.txt", {**tag, "vem": metrics.measure_vem(e),
                                                         "samples": e.total})
        return rep.exit_code
    if args.command == "bathtub":
        curve, rep = harness.bathtub(cfg, np.linspace(-0.5, 0.5, args.points), args.bits)
        curve.to_csv(out / "bathtub.csv")
        metrics.write_summary(out / "bathtub_summary.txt",
                              {**tag, "lock_phase": rep.lanes[0]["lock_phase"],
                               "opening_1e-6": curve.opening(1e-6), "bits": curve.n_bits})
        return rep.exit_code
    if args.command == "jtol":
        curve = harness.jtol(cfg, _floats(args.freqs), args.target_ber, args.ui_budget)
        curve.to_csv(out / "jtol.csv")
        metrics.write_summary(out / "jtol_summary.txt",
                              {**tag, "omitted": curve.omitted, "target_ber": args.target_ber})
        return harness.EXIT_OK
    if args.command == "spectrum":
        sp = harness.spectrum(cfg, args.cycles, calibrated=True)
        sp.to_csv(out / "spectrum_calibrated.csv")
        summary = {**tag, "calibrated.integrated_spur_dbc": sp.integrated_spur_dbc,
                   "bandwidth_hz": sp.bandwidth_hz}
        if args.uncalibrated:
            raw = harness.spectrum(cfg, args.cycles, calibrated=False)
            raw.to_csv(out / "spectrum_uncalibrated.csv")
            summary["uncalibrated.integrated_spur_dbc"] = raw.integrated_spur_dbc
        metrics.write_summary(out / "spectrum_summary.txt", summary)
        return harness.EXIT_OK
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
