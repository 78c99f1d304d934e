import json
from pathlib import Path

import numpy as np
import pytest

from brcdr import harness
from brcdr.cli import main
from brcdr.config import ConfigError, ScenarioConfig, load_config

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"

SMALL = """
n_ui = 120_000
warmup_ui = 60_000
seed = 4
[afe]
dfe_tap_h1 = 0.5
"""


def _write(tmp_path, text, name="s.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- configuration --------------------------------------------------------

@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_scenarios_load(path):
    cfg = load_config(path)
    assert len(cfg.config_hash()) == 64


def test_config_hash_tracks_content():
    a = ScenarioConfig(n_ui=10_000, warmup_ui=0)
    assert a.config_hash() == ScenarioConfig(n_ui=10_000, warmup_ui=0).config_hash()
    assert a.config_hash() != a.with_value("eca.k_step", 0.125).config_hash()
    assert ScenarioConfig.from_dict(a.to_dict()) == a


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"eca": {"dither_period": 1000}},
    {"lane": {"pi_mode": "square"}},
    {"n_ui": 10, "warmup_ui": 20},
    {"lanes": 5},
    {"fdiv": {"realign_beta": 0.0}},
    {"channel": {"kind": "csv"}},
    {"afe": "not a table"},
])
def test_config_rejects_bad_input(data):
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict(data)


def test_with_value_paths():
    cfg = ScenarioConfig()
    assert cfg.with_value("lane.threshold", 8.0).lane.threshold == 8.0
    assert cfg.with_value("seed", 9).seed == 9
    for bad in ("lane", "lane.nope", "a.b.c", "nope"):
        with pytest.raises(ConfigError):
            cfg.with_value(bad, 1)


def test_unreadable_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "n_ui = [unclosed"))


# --- harness --------------------------------------------------------------

def test_run_report_fields(tmp_path):
    cfg = ScenarioConfig.from_dict({"n_ui": 120_000, "warmup_ui": 60_000, "lanes": 2})
    rep = harness.run(cfg)
    d = json.loads(rep.to_json())
    assert d["config_hash"] == cfg.config_hash() and d["seed"] == cfg.seed
    assert len(d["lanes"]) == 2 and d["lanes"][0]["bits"] > 0
    assert {"mean_ratio", "required_ratio", "integral_clamp_hit"} <= set(d["clock"])
    assert rep.exit_code == harness.EXIT_OK
    paths = harness.write_run(rep, tmp_path)
    assert [p.name for p in paths] == ["report.json", "summary.txt", "telemetry.csv"]
    assert "lane1.lock_phase=" in (tmp_path / "summary.txt").read_text()


def test_clamped_integral_reports_loss_of_lock():
    cfg = ScenarioConfig.from_dict({"n_ui": 120_000, "warmup_ui": 60_000, "ppm_offset": 2500,
                                    "fdiv": {"nominal_frac": 0.0, "clamp": 1e-4}})
    rep = harness.run(cfg)
    assert rep.clock["integral_clamp_hit"] and rep.loss_of_lock
    assert rep.exit_code == harness.EXIT_LOSS_OF_LOCK


def test_sweep_uses_consecutive_seeds():
    cfg = ScenarioConfig.from_dict({"n_ui": 80_000, "warmup_ui": 40_000, "seed": 10})
    reps = harness.sweep(cfg, "lane.threshold", [8.0, 16.0])
    assert [r.seed for r in reps] == [10, 11]
    with pytest.raises(ConfigError):
        harness.sweep(cfg, "lane.threshold", [])
    with pytest.raises(ConfigError):
        harness.sweep(cfg, "lane.nothing", [1])


def test_frozen_eye_matches_worst_case(lane0_sbr):
    from brcdr.metrics import measure_vem, vem_vs_phase
    tap = 0.5 * lane0_sbr.h(1)
    e = harness.frozen_eye(lane0_sbr, tap, 0.0, n_bits=30_000, phase_bins=8, v_bins=512)
    worst = 2 * vem_vs_phase(lane0_sbr, tap, [0.0])[0, 1]
    # PRBS31 over a short run does not visit the worst pattern; opening can only be larger
    assert worst - 0.01 <= measure_vem(e) <= worst + 0.2


def test_jtol_corner_estimate_scales_with_threshold():
    a = harness.jtol_corner_estimate(0.3, 16, 8, 0.5)
    assert harness.jtol_corner_estimate(0.3, 8, 8, 0.5) == pytest.approx(2 * a)


# --- command line ---------------------------------------------------------

def test_cli_run(tmp_path):
    cfg = _write(tmp_path, SMALL)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["seed"] == 4
    assert main(["run", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "p")]) == 0
    assert json.loads((tmp_path / "p" / "report.json").read_text())["seed"] == 5


def test_cli_config_errors(tmp_path, capsys):
    bad = _write(tmp_path, "nonsense_key = 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == harness.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "none.toml"),
                 "--out", str(tmp_path)]) == harness.EXIT_CONFIG
    cfg = _write(tmp_path, SMALL, "ok.toml")
    assert main(["sweep", "--config", str(cfg), "--param", "lane.zzz", "--values", "1",
                 "--out", str(tmp_path)]) == harness.EXIT_CONFIG


def test_cli_loss_of_lock_exit(tmp_path):
    text = "ppm_offset = 2500\n" + SMALL + "[fdiv]\nnominal_frac = 0.0\nclamp = 1e-4\n"
    cfg = _write(tmp_path, text, "lol.toml")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == harness.EXIT_LOSS_OF_LOCK


def test_cli_sweep_eye_bathtub(tmp_path):
    cfg = str(_write(tmp_path, SMALL))
    assert main(["sweep", "--config", cfg, "--param", "lane.threshold", "--values", "8,16",
                 "--out", str(tmp_path / "sw")]) == 0
    rows = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("lane.threshold,") and len(rows) == 3
    assert main(["eye", "--config", cfg, "--phase-bins", "16", "--out", str(tmp_path / "e")]) == 0
    assert "vem=" in (tmp_path / "e" / "eye_summary.txt").read_text()
    assert main(["bathtub", "--config", cfg, "--points", "11", "--bits", "20000",
                 "--out", str(tmp_path / "b")]) == 0
    assert len((tmp_path / "b" / "bathtub.csv").read_text().splitlines()) == 12


def test_cli_spectrum_and_jtol(tmp_path):
    text = "ppm_offset = 2500\n" + SMALL + "[fdiv]\nk_dcdl_init_error = 0.1\ninl_max_lsb = 0.73\n"
    cfg = str(_write(tmp_path, text))
    assert main(["spectrum", "--config", cfg, "--cycles", str(2 ** 14), "--uncalibrated",
                 "--out", str(tmp_path / "s")]) == 0
    summary = (tmp_path / "s" / "spectrum_summary.txt").read_text()
    vals = dict(line.split("=", 1) for line in summary.splitlines())
    assert float(vals["calibrated.integrated_spur_dbc"]) < float(vals["uncalibrated.integrated_spur_dbc"])
    assert main(["jtol", "--config", cfg, "--freqs", "1e7,1e8", "--ui-budget", "20000",
                 "--out", str(tmp_path / "j")]) == 0
    assert len((tmp_path / "j" / "jtol.csv").read_text().splitlines()) >= 2
