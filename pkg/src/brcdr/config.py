"""Scenario configuration: TOML sections mapped onto frozen dataclasses."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import tomli


class ConfigError(ValueError):
    """Raised for malformed or inconsistent scenario files."""


@dataclass(frozen=True, slots=True)
class ChannelConfig:
    kind: str = "synthetic"  # "synthetic" or "csv"
    path: str = ""
    loss_db: float = 15.0
    pole_ratio: float = 8.0
    ctle_zero_hz: float = 6e9
    ctle_pole1_hz: float = 30e9
    ctle_pole2_hz: float = 40e9
    amplitude: float = 1.0

    def validate(self):
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"channel.kind must be 'synthetic' or 'csv', got {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ConfigError("channel.path is required for a csv channel")
        if self.kind == "synthetic":
            if self.loss_db <= 0 or self.pole_ratio < 1 or self.amplitude <= 0:
                raise ConfigError("synthetic channel needs loss_db > 0, pole_ratio >= 1, amplitude > 0")
            if not 0 < self.ctle_zero_hz <= self.ctle_pole1_hz <= self.ctle_pole2_hz:
                raise ConfigError("CTLE needs 0 < zero <= pole1 <= pole2")


@dataclass(frozen=True, slots=True)
class AfeSection:
    dfe_tap: float | None = None  # volts; overrides dfe_tap_h1
    dfe_tap_h1: float = 0.5  # tap as a fraction of h1 at the cursor peak
    dfe_adapt: bool = False
    sampler_noise_sigma: float = 0.0
    sampler_offset: tuple = (0.0, 0.0, 0.0)
    dac_fullscale: float = 1.0

    def validate(self):
        if self.sampler_noise_sigma < 0:
            raise ConfigError("afe.sampler_noise_sigma must be >= 0")
        if len(self.sampler_offset) != 3:
            raise ConfigError("afe.sampler_offset needs three values")
        if self.dac_fullscale <= 0:
            raise ConfigError("afe.dac_fullscale must be > 0")


@dataclass(frozen=True, slots=True)
class LaneSection:
    threshold: float = 16.0
    k_ratio: float = 1.0
    pi_bits: int = 8
    pi_mode: str = "ideal"
    initial_phase: float = 0.0
    dlev_init: int = 32
    pdlev_init: int = 32
    dlev_m: int = 16
    pdlev_m: int = 4
    bdlev_m: int = 16
    tap_m: int = 64

    def validate(self):
        if self.threshold <= 0 or self.k_ratio <= 0:
            raise ConfigError("lane.threshold and lane.k_ratio must be > 0")
        if self.pi_mode not in ("ideal", "diamond"):
            raise ConfigError("lane.pi_mode must be 'ideal' or 'diamond'")
        if not 2 <= self.pi_bits <= 12:
            raise ConfigError("lane.pi_bits must be 2..12")
        for name in ("dlev_init", "pdlev_init"):
            if not 0 <= getattr(self, name) <= 63:
                raise ConfigError(f"lane.{name} must be a 6-bit code")
        for name in ("dlev_m", "pdlev_m", "bdlev_m", "tap_m"):
            if getattr(self, name) < 1:
                raise ConfigError(f"lane.{name} must be >= 1")


@dataclass(frozen=True, slots=True)
class EcaSection:
    on: bool = False
    dither_period: int = 8192
    k_step: float = 1 / 16
    k_min: float = 1 / 8
    k_max: float = 8.0
    deadband: float = 0.0
    dither_delay: float = 1 / 32

    def validate(self):
        if self.dither_period < 64 or self.dither_period % 64:
            raise ConfigError("eca.dither_period must be a positive multiple of 64 UI")
        if not 0 < self.k_min <= self.k_max:
            raise ConfigError("eca needs 0 < k_min <= k_max")
        if self.k_step <= 0 or self.deadband < 0 or self.dither_delay < 0:
            raise ConfigError("eca.k_step > 0, deadband >= 0, dither_delay >= 0 required")


@dataclass(frozen=True, slots=True)
class FdivSection:
    tracking: bool = True
    integral: bool = True
    ki: float = 2.0 ** -22
    clamp: float = 0.08
    div_int: int = 16
    nominal_frac: float | None = None
    k_dcdl_true: float = 183e-15  # seconds per LSB
    k_dcdl_init_error: float = 0.0  # relative error of the initial estimate
    inl_max_lsb: float = 0.0
    calibrate: bool = True
    mu_rel: float = 2.0 ** -10
    cal_min_step: int = 4
    realign_beta: float = 0.5
    trim_step: float = 3.2e-5  # UI per reference edge

    def validate(self):
        if not 8 <= self.div_int < 32:
            raise ConfigError("fdiv.div_int must be in 8..31")
        if self.ki <= 0 or self.clamp <= 0:
            raise ConfigError("fdiv.ki and fdiv.clamp must be > 0")
        if self.k_dcdl_true <= 0 or not -0.5 < self.k_dcdl_init_error < 0.5:
            raise ConfigError("fdiv.k_dcdl_true > 0 and |k_dcdl_init_error| < 0.5 required")
        if not 0 < self.realign_beta <= 1:
            raise ConfigError("fdiv.realign_beta must be in (0, 1]")
        if self.mu_rel <= 0 or self.cal_min_step < 1:
            raise ConfigError("fdiv.mu_rel > 0 and cal_min_step >= 1 required")


@dataclass(frozen=True, slots=True)
class JitterSection:
    rj_sigma: float = 0.0  # UI rms
    sj_amplitude: float = 0.0  # UI peak
    sj_frequency: float = 0.0  # Hz

    def validate(self):
        if self.rj_sigma < 0 or self.sj_amplitude < 0 or self.sj_frequency < 0:
            raise ConfigError("jitter values must be >= 0")


@dataclass(frozen=True, slots=True)
class EyeSection:
    phase_bins: int = 0
    v_bins: int = 128
    v_range: float = 1.0

    def validate(self):
        if self.phase_bins < 0 or self.v_bins < 2 or self.v_range <= 0:
            raise ConfigError("eye needs phase_bins >= 0, v_bins >= 2, v_range > 0")


_SECTIONS = {"channel": ChannelConfig, "afe": AfeSection, "lane": LaneSection,
             "eca": EcaSection, "fdiv": FdivSection, "jitter": JitterSection, "eye": EyeSection}


@dataclass(frozen=True, slots=True)
class ScenarioConfig:
    n_ui: int = 1_000_000
    warmup_ui: int = 200_000
    seed: int = 0
    lanes: int = 1
    pattern: str = "prbs31"
    ppm_offset: float = 0.0
    ui: float = 31.25e-12
    telemetry_decimate: int = 64
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    afe: AfeSection = field(default_factory=AfeSection)
    lane: LaneSection = field(default_factory=LaneSection)
    eca: EcaSection = field(default_factory=EcaSection)
    fdiv: FdivSection = field(default_factory=FdivSection)
    jitter: JitterSection = field(default_factory=JitterSection)
    eye: EyeSection = field(default_factory=EyeSection)

    def __post_init__(self):
        if self.n_ui <= self.warmup_ui or self.warmup_ui < 0:
            raise ConfigError("n_ui must exceed warmup_ui >= 0")
        if not 1 <= self.lanes <= 4:
            raise ConfigError("lanes must be 1..4")
        if self.pattern not in ("prbs7", "prbs31", "random"):
            raise ConfigError("pattern must be prbs7, prbs31 or random")
        if abs(self.ppm_offset) > 10000:
            raise ConfigError("|ppm_offset| must be <= 10000")
        if self.telemetry_decimate < 1:
            raise ConfigError("telemetry_decimate must be >= 1")
        for name in _SECTIONS:
            getattr(self, name).validate()

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        kwargs: dict[str, Any] = {}
        for name, sec_cls in _SECTIONS.items():
            raw = data.pop(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"[{name}] must be a table")
            kwargs[name] = _build(sec_cls, raw, name)
        top = {f.name for f in fields(cls)} - set(_SECTIONS)
        unknown = set(data) - top
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        kwargs.update(data)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_value(self, path: str, value) -> "ScenarioConfig":
        """Copy with one scalar field replaced; ``path`` is dotted, e.g. ``eca.k_step``."""
        parts = path.split(".")
        if len(parts) == 1:
            _check_scalar(self, parts[0], path)
            return replace(self, **{parts[0]: value})
        if len(parts) == 2 and parts[0] in _SECTIONS:
            sec = getattr(self, parts[0])
            _check_scalar(sec, parts[1], path)
            try:
                new_sec = replace(sec, **{parts[1]: value})
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
            return replace(self, **{parts[0]: new_sec})
        raise ConfigError(f"no scalar config field at {path!r}")


def _check_scalar(obj, name, path):
    if name not in {f.name for f in fields(obj)} or name in _SECTIONS:
        raise ConfigError(f"no scalar config field at {path!r}")


def _build(sec_cls, raw: dict, name: str):
    known = {f.name for f in fields(sec_cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return sec_cls(**vals)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def load_config(path) -> ScenarioConfig:
    return ScenarioConfig.load(Path(path))
