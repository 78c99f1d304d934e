"""Behavioral simulator for a multi-lane baud-rate CDR with a shared fractional-divider clock path."""
from .config import ConfigError, ScenarioConfig
from .engine import EngineParams, EngineResult, run_engine
from .harness import RunReport, run, sweep
from .metrics import (BathtubCurve, EyeDiagram, JtolCurve, PhaseSpectrum, measure_vem,
                      mm_lock_phase, spectrum, vem_vs_phase)
from .sim_core import SingleBitResponse, ctle_shape, lane_bits, lossy_channel

__version__ = "0.1.0"

__all__ = [
    "BathtubCurve", "ConfigError", "EngineParams", "EngineResult", "EyeDiagram", "JtolCurve",
    "PhaseSpectrum", "RunReport", "ScenarioConfig", "SingleBitResponse", "ctle_shape",
    "lane_bits", "lossy_channel", "measure_vem", "mm_lock_phase", "run", "run_engine",
    "spectrum", "sweep", "vem_vs_phase",
]
