"""Stimulus and channel primitives: PRBS data, single-bit responses, jitter.

Time is measured in unit intervals (UI) of the transmitter unless a name
says otherwise.  A single-bit response (SBR) is stored oversampled; its
value ``k`` UI after the main cursor at fractional phase ``phi`` is read by
linear interpolation between the stored samples.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit
from scipy import signal

DEFAULT_UI = 31.25e-12  # 32 Gb/s NRZ
DEFAULT_OVERSAMPLING = 32


class Polynomial(enum.Enum):
    PRBS7 = 7
    PRBS31 = 31


# (register length, feedback tap a, feedback tap b) -> x^n + x^m + 1
_TAPS = {Polynomial.PRBS7: (7, 6), Polynomial.PRBS31: (31, 28)}


@dataclass(frozen=True)
class PrbsState:
    """Fibonacci LFSR register.  Bit ``n-1`` is the next bit shifted out."""

    register: int
    polynomial: Polynomial = Polynomial.PRBS7

    def __post_init__(self):
        n, _ = _TAPS[self.polynomial]
        if self.register <= 0 or self.register >= (1 << n):
            raise ValueError(f"register must be a nonzero {n}-bit value, got {self.register:#x}")

    @classmethod
    def all_ones(cls, polynomial: Polynomial = Polynomial.PRBS7) -> "PrbsState":
        n, _ = _TAPS[polynomial]
        return cls((1 << n) - 1, polynomial)


def prbs_next(state: PrbsState) -> tuple[int, PrbsState]:
    """Shift the LFSR once; return the output bit as +1/-1 and the new state."""
    n, m = _TAPS[state.polynomial]
    reg = state.register
    out = (reg >> (n - 1)) & 1
    fb = ((reg >> (n - 1)) ^ (reg >> (m - 1))) & 1
    reg = ((reg << 1) | fb) & ((1 << n) - 1)
    return (1 if out else -1), replace(state, register=reg)


@njit(cache=True)
def _lfsr_run(register, n, m, count):
    out = np.empty(count, dtype=np.int8)
    mask = (1 << n) - 1
    for i in range(count):
        b = (register >> (n - 1)) & 1
        fb = ((register >> (n - 1)) ^ (register >> (m - 1))) & 1
        register = ((register << 1) | fb) & mask
        out[i] = 1 if b else -1
    return out, register


def prbs_sequence(count: int, state: PrbsState) -> tuple[np.ndarray, PrbsState]:
    """Bulk version of :func:`prbs_next`; identical output stream."""
    n, m = _TAPS[state.polynomial]
    bits, reg = _lfsr_run(np.int64(state.register), n, m, int(count))
    return bits, replace(state, register=int(reg))


def lane_bits(count: int, seed: int, pattern: str = "prbs31") -> np.ndarray:
    """Transmit pattern for one lane as an int8 array of +1/-1.

    ``prbs7``/``prbs31`` start from a seed-derived register; ``random``
    draws i.i.d. bits.
    """
    if pattern == "random":
        rng = np.random.default_rng(seed)
        return (2 * rng.integers(0, 2, size=count) - 1).astype(np.int8)
    poly = {"prbs7": Polynomial.PRBS7, "prbs31": Polynomial.PRBS31}.get(pattern)
    if poly is None:
        raise ValueError(f"unknown data pattern {pattern!r}")
    n, _ = _TAPS[poly]
    reg = int(np.random.default_rng(seed).integers(1, 1 << n))
    bits, _ = prbs_sequence(count, PrbsState(reg, poly))
    return bits


@dataclass(frozen=True)
class SingleBitResponse:
    """Oversampled pulse response of the channel (and CTLE, if applied)."""

    samples: np.ndarray
    oversampling: int = DEFAULT_OVERSAMPLING
    cursor_index: int | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        object.__setattr__(self, "samples", s)
        if self.oversampling < 8:
            raise ValueError("oversampling must be at least 8 samples/UI")
        if self.cursor_index is None:
            object.__setattr__(self, "cursor_index", int(np.argmax(s)))
        c, os_ = self.cursor_index, self.oversampling
        if not (0 <= c - os_ and c + os_ < len(s)):
            raise ValueError("cursor_index +/- one UI must lie inside the sample array")
        h0 = s[c]
        if h0 <= 0:
            raise ValueError("main cursor must be positive")
        others = self.cursors(0.0)
        others = np.delete(others, -self.k_lo)
        if others.size and np.max(np.abs(others)) > h0:
            raise ValueError("main cursor is not dominant")

    @classmethod
    def from_cursors(cls, cursors, main: int, oversampling: int = DEFAULT_OVERSAMPLING,
                     pad_ui: int = 1) -> "SingleBitResponse":
        """Piecewise-linear SBR through UI-spaced cursor values.

        ``cursors[main]`` is h0; the response is zero ``pad_ui`` UI beyond
        either end of the list.
        """
        c = np.concatenate([np.zeros(pad_ui), np.asarray(cursors, float), np.zeros(pad_ui)])
        t_ui = np.arange(len(c))
        t = np.arange((len(c) - 1) * oversampling + 1) / oversampling
        samples = np.interp(t, t_ui, c)
        return cls(samples, oversampling, (main + pad_ui) * oversampling)

    @property
    def k_lo(self) -> int:
        return -math.ceil(self.cursor_index / self.oversampling)

    @property
    def k_hi(self) -> int:
        return math.ceil((len(self.samples) - 1 - self.cursor_index) / self.oversampling)

    @property
    def span(self) -> int:
        """Number of UI-spaced cursors covering the support."""
        return self.k_hi - self.k_lo + 1

    def h(self, k: int, phase: float = 0.0) -> float:
        """Cursor ``k`` (h0 main, negative = precursor) at fractional phase."""
        return float(self.value_at(k + phase))

    def value_at(self, t_ui):
        """SBR value at ``t_ui`` UI relative to the main cursor (0 outside support)."""
        s = self.samples
        idx = self.cursor_index + np.asarray(t_ui, float) * self.oversampling
        return np.interp(idx, np.arange(len(s)), s, left=0.0, right=0.0)

    def cursors(self, phase: float = 0.0) -> np.ndarray:
        """All cursors h_k(phase) for k = k_lo..k_hi."""
        return self.value_at(np.arange(self.k_lo, self.k_hi + 1) + phase)

    def phase_table(self) -> tuple[int, np.ndarray]:
        """Cursor values on the oversampling grid, for the sampling kernels.

        Returns ``(k_lo, table)`` where ``table[j, s]`` is the SBR at
        ``(k_lo + j) + s/oversampling`` UI, ``s = 0..oversampling``.
        """
        os_ = self.oversampling
        j = np.arange(self.span)[:, None] + self.k_lo
        s = np.arange(os_ + 1)[None, :]
        idx = self.cursor_index + j * os_ + s
        ok = (idx >= 0) & (idx < len(self.samples))
        table = np.where(ok, self.samples[np.clip(idx, 0, len(self.samples) - 1)], 0.0)
        return self.k_lo, np.ascontiguousarray(table)

    def scaled(self, gain: float) -> "SingleBitResponse":
        return SingleBitResponse(self.samples * gain, self.oversampling, self.cursor_index)

    def to_csv(self, path) -> None:
        lines = [f"oversampling={self.oversampling},cursor_index={self.cursor_index}"]
        lines += [repr(float(v)) for v in self.samples]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "SingleBitResponse":
        """Read an SBR written by :meth:`to_csv`.

        First line is the header ``oversampling=<int>,cursor_index=<int>``;
        each following line holds one sample in volts.
        """
        text = Path(path).read_text().strip().splitlines()
        header = dict(item.split("=") for item in text[0].replace(" ", "").split(","))
        try:
            os_, cursor = int(header["oversampling"]), int(header["cursor_index"])
        except KeyError as exc:
            raise ValueError(f"SBR CSV header is missing {exc}") from None
        return cls(np.array([float(v) for v in text[1:]]), os_, cursor)


def _rect_pulse_response(b, a, oversampling: int, tail_ui: int) -> np.ndarray:
    pulse = np.zeros((tail_ui + 1) * oversampling)
    pulse[:oversampling] = 1.0
    return signal.lfilter(b, a, pulse)


def _analog_to_digital(zeros_hz, poles_hz, gain, fs):
    """Bilinear discretisation of a real-pole/zero transfer function with unity-normalised DC gain."""
    num = np.poly1d([1.0])
    den = np.poly1d([1.0])
    for fz in zeros_hz:
        num *= np.poly1d([1.0 / (2 * np.pi * fz), 1.0])
    for fp in poles_hz:
        if math.isinf(fp):
            continue
        den *= np.poly1d([1.0 / (2 * np.pi * fp), 1.0])
    b, a = signal.bilinear(gain * num.coeffs, den.coeffs, fs)
    return b, a


def lossy_channel(loss_db: float = 15.0, nyquist_hz: float = 16e9, pole_ratio: float = 1.0,
                  amplitude: float = 1.0, oversampling: int = DEFAULT_OVERSAMPLING,
                  ui: float = DEFAULT_UI, tail_ui: int = 24) -> SingleBitResponse:
    """Two-real-pole low-pass whose insertion loss at Nyquist is ``loss_db``.

    The second pole sits ``pole_ratio`` times above the first.
    """
    if loss_db <= 0:
        raise ValueError("loss_db must be positive")
    target = 10 ** (-loss_db / 20)

    def mag(p1):
        f = nyquist_hz
        return 1 / math.sqrt((1 + (f / p1) ** 2) * (1 + (f / (p1 * pole_ratio)) ** 2))

    lo, hi = 1e6, 1e13
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        lo, hi = (mid, hi) if mag(mid) < target else (lo, mid)
    p1 = math.sqrt(lo * hi)
    fs = oversampling / ui
    b, a = _analog_to_digital([], [p1, p1 * pole_ratio], 1.0, fs)
    y = amplitude * _rect_pulse_response(b, a, oversampling, tail_ui)
    return SingleBitResponse(y, oversampling)


def ctle_shape(sbr: SingleBitResponse, zero_hz: float, pole1_hz: float, pole2_hz: float,
               dc_gain: float = 1.0, ui: float = DEFAULT_UI, tail_ui: int = 8) -> SingleBitResponse:
    """Filter an SBR with ``dc_gain (1 + s/wz) / ((1 + s/wp1)(1 + s/wp2))``.

    ``pole2_hz`` may be ``inf`` to drop the second pole.  The result gets
    ``tail_ui`` UI of extra samples for the filter tail and a fresh
    ``cursor_index`` at its new peak.
    """
    if not (zero_hz > 0 and pole1_hz > 0 and pole2_hz > 0):
        raise ValueError("CTLE corner frequencies must be positive")
    if pole1_hz < zero_hz or pole2_hz < zero_hz:
        raise ValueError("CTLE poles must not lie below the zero")
    if dc_gain <= 0:
        raise ValueError("dc_gain must be positive")
    fs = sbr.oversampling / ui
    b, a = _analog_to_digital([zero_hz], [pole1_hz, pole2_hz], dc_gain, fs)
    x = np.concatenate([sbr.samples, np.zeros(tail_ui * sbr.oversampling)])
    y = signal.lfilter(b, a, x)
    if np.allclose(b, a):
        # exact pole-zero cancellation: keep the original cursor bookkeeping
        return SingleBitResponse(y[: len(sbr.samples)] * 1.0, sbr.oversampling, sbr.cursor_index)
    return SingleBitResponse(y, sbr.oversampling)


@njit(cache=True)
def sample_table(bits, n, k_lo, table, phase):
    """Receive voltage for bit ``n`` sampled ``phase`` UI after its cursor.

    ``phase`` may be any real; it is split into whole UI (which move the
    bit index) and a fraction in [0, 1).  Bits outside ``bits`` count as 0.
    """
    shift = math.floor(phase)
    n = n + shift
    frac = phase - shift
    os_ = table.shape[1] - 1
    s = frac * os_
    i0 = int(s)
    if i0 >= os_:
        i0 = os_ - 1
    f = s - i0
    acc = 0.0
    nb = bits.shape[0]
    for j in range(table.shape[0]):
        i = n - (k_lo + j)
        if 0 <= i < nb:
            acc += bits[i] * ((1.0 - f) * table[j, i0] + f * table[j, i0 + 1])
    return acc


def waveform_value(sbr: SingleBitResponse, bits, phase: float, n: int | None = None) -> float:
    """Sampler input for bit ``n`` of ``bits`` at fractional ``phase`` in [0, 1).

    ``n`` defaults to the latest position for which the whole SBR support
    fits inside the window.
    """
    if not 0.0 <= phase < 1.0:
        raise ValueError("phase must lie in [0, 1)")
    bits = np.asarray(bits, dtype=np.float64)
    need_before, need_after = sbr.k_hi, -sbr.k_lo
    if n is None:
        n = len(bits) - 1 - need_after
    if n - need_before < 0 or n + need_after >= len(bits):
        raise ValueError(f"bit window too short: need {need_before} bits before and "
                         f"{need_after} after position {n}")
    k_lo, table = sbr.phase_table()
    return float(sample_table(bits, n, k_lo, table, phase))


@dataclass(frozen=True)
class ClockDomain:
    """TX/RX frequency relation.  ``ppm_offset`` > 0 means the RX LC clock is fast."""

    nominal_ui: float = DEFAULT_UI
    ppm_offset: float = 0.0

    def __post_init__(self):
        if abs(self.ppm_offset) > 10000:
            raise ValueError("|ppm_offset| must not exceed 10000")
        if self.nominal_ui <= 0:
            raise ValueError("nominal_ui must be positive")

    @property
    def rx_scale(self) -> float:
        return 1.0 + self.ppm_offset * 1e-6


@dataclass(frozen=True)
class JitterSpec:
    rj_sigma: float = 0.0
    sj_amplitude: float = 0.0
    sj_frequency: float = 0.0

    def __post_init__(self):
        if self.rj_sigma < 0 or self.sj_amplitude < 0:
            raise ValueError("jitter amplitudes must be nonnegative")


def jitter_offset(spec: JitterSpec, n, rng: np.random.Generator, ui: float = DEFAULT_UI):
    """Sampling-instant displacement in UI for UI index (or array) ``n``."""
    n = np.asarray(n, dtype=float)
    out = spec.sj_amplitude * np.sin(2 * np.pi * spec.sj_frequency * n * ui)
    if spec.rj_sigma > 0:
        out = out + rng.normal(0.0, spec.rj_sigma, size=n.shape)
    return out if out.ndim else float(out)
