"""Measurement engines: worst-case eye, eye histograms, bathtub, phase spectra, JTOL."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from numba import njit
from scipy import stats

from .sim_core import SingleBitResponse, sample_table


def vem_vs_phase(sbr: SingleBitResponse, dfe_tap: float, phases) -> np.ndarray:
    """Worst-case half eye opening by cursor enumeration.

    Returns an ``(n, 2)`` array of ``(phase, vem)`` with
    ``vem = h0 - sum_{k != 0} |h_k|`` and h1 replaced by ``h1 - dfe_tap``.
    """
    phases = np.atleast_1d(np.asarray(phases, dtype=float))
    ks = np.arange(sbr.k_lo, sbr.k_hi + 1)
    h = sbr.value_at(ks[None, :] + phases[:, None])
    i0 = -sbr.k_lo
    h[:, i0 + 1] -= dfe_tap
    isi = np.abs(h).sum(axis=1) - np.abs(h[:, i0])
    return np.column_stack([phases, h[:, i0] - isi])


def _first_crossing(phases, diff):
    s = np.sign(diff)
    idx = np.nonzero(s[:-1] * s[1:] <= 0)[0]
    if idx.size == 0:
        raise ValueError("no crossing inside the phase range")
    # take the crossing closest to the cursor peak
    i = idx[np.argmin(np.abs(phases[idx]))]
    a, b = diff[i], diff[i + 1]
    if a == b:
        return float(phases[i])
    return float(phases[i] + (phases[i + 1] - phases[i]) * a / (a - b))


def mm_lock_phase(sbr: SingleBitResponse, dfe_tap: float = 0.0,
                  search=(-0.5, 0.5), step: float = 1e-3) -> float:
    """Phase where the DFE residual post-cursor equals the precursor."""
    ph = np.arange(search[0], search[1] + step / 2, step)
    diff = sbr.value_at(ph + 1) - dfe_tap - sbr.value_at(ph - 1)
    return _first_crossing(ph, diff)


def vem_argmax(sbr: SingleBitResponse, dfe_tap: float = 0.0,
               search=(-0.5, 0.5), step: float = 1e-3) -> tuple[float, float]:
    ph = np.arange(search[0], search[1] + step / 2, step)
    v = vem_vs_phase(sbr, dfe_tap, ph)[:, 1]
    i = int(np.argmax(v))
    return float(ph[i]), float(v[i])


@dataclass
class EyeDiagram:
    """Histogram of sampler-input voltage per (symbol, phase bin, voltage bin).

    Phase bins cover [-0.5, 0.5) UI around the recovered clock; bin
    ``phase_bins // 2`` starts at the clock itself.
    """

    phase_bins: int = 64
    v_bins: int = 256
    v_range: float = 1.0
    grid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grid is None:
            self.grid = np.zeros((2, self.phase_bins, self.v_bins), dtype=np.int64)
        if self.grid.shape != (2, self.phase_bins, self.v_bins):
            raise ValueError("grid shape does not match bin counts")
        if np.any(self.grid < 0):
            raise ValueError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.grid.sum())

    @property
    def phase_offsets(self) -> np.ndarray:
        return np.arange(self.phase_bins) / self.phase_bins - 0.5

    @property
    def v_centers(self) -> np.ndarray:
        w = 2 * self.v_range / self.v_bins
        return -self.v_range + w * (np.arange(self.v_bins) + 0.5)

    def add(self, symbols, phase_offsets, volts) -> None:
        cls = (np.asarray(symbols) > 0).astype(int)
        pb = np.floor((np.asarray(phase_offsets) + 0.5) * self.phase_bins).astype(int) % self.phase_bins
        vb = np.floor((np.asarray(volts) + self.v_range) / (2 * self.v_range) * self.v_bins).astype(int)
        vb = np.clip(vb, 0, self.v_bins - 1)
        np.add.at(self.grid, (cls, pb, vb), 1)

    def merge(self, other: "EyeDiagram") -> "EyeDiagram":
        if (other.phase_bins, other.v_bins, other.v_range) != (self.phase_bins, self.v_bins, self.v_range):
            raise ValueError("eye diagrams use different binning")
        return EyeDiagram(self.phase_bins, self.v_bins, self.v_range, self.grid + other.grid)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase_ui", "volts", "count_minus", "count_plus"])
            for p, ph in enumerate(self.phase_offsets):
                for v, vc in enumerate(self.v_centers):
                    lo, hi = self.grid[0, p, v], self.grid[1, p, v]
                    if lo or hi:
                        w.writerow([f"{ph:.6f}", f"{vc:.6g}", int(lo), int(hi)])


def measure_vem(eye: EyeDiagram, phase_bin: int | None = None) -> float:
    """Full vertical opening between the innermost levels of the two symbols.

    Uses bin centres, so the result is within one voltage bin of the
    sampled extremes.  A closed eye gives a value <= 0.
    """
    p = eye.phase_bins // 2 if phase_bin is None else phase_bin
    plus, minus = eye.grid[1, p], eye.grid[0, p]
    if not plus.any() or not minus.any():
        raise ValueError("eye column holds no samples for one of the symbols")
    vc = eye.v_centers
    return float(vc[np.nonzero(plus)[0][0]] - vc[np.nonzero(minus)[0][-1]])


@dataclass
class BathtubCurve:
    points: list[tuple[float, float, float]]  # (phase, ber, upper bound)
    n_bits: int

    def __post_init__(self):
        ph = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(ph, ph[1:])):
            raise ValueError("bathtub phases must be strictly increasing")

    @property
    def phases(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def ber(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def upper(self) -> np.ndarray:
        return np.array([p[2] for p in self.points])

    def opening(self, target: float) -> float:
        """Width (UI) of the contiguous region around the centre whose BER bound is below ``target``."""
        ok = self.upper < target
        if not ok.any():
            return 0.0
        ph = self.phases
        c = int(np.argmin(np.abs(ph)))
        if not ok[c]:
            c = int(np.nonzero(ok)[0][np.argmin(np.abs(ph[ok]))])
        lo = hi = c
        while lo > 0 and ok[lo - 1]:
            lo -= 1
        while hi < len(ph) - 1 and ok[hi + 1]:
            hi += 1
        step = ph[1] - ph[0] if len(ph) > 1 else 0.0
        return float(ph[hi] - ph[lo] + step)

    def merge(self, other: "BathtubCurve") -> "BathtubCurve":
        """Pool two runs over the same phase grid (counts add)."""
        if not np.allclose(self.phases, other.phases):
            raise ValueError("bathtubs use different phase grids")
        n = self.n_bits + other.n_bits
        pts = []
        for (p, b1, _), (_, b2, _) in zip(self.points, other.points):
            errs = round(b1 * self.n_bits + b2 * other.n_bits)
            pts.append((p, errs / n, ber_upper_bound(errs, n)))
        return BathtubCurve(pts, n)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase_ui", "ber", "ber_upper"])
            for p, b, u in self.points:
                w.writerow([f"{p:.6f}", f"{b:.6e}", f"{u:.6e}"])


def wilson_upper(errors: int, n: int, z: float = 1.96) -> float:
    if n <= 0:
        return 1.0
    p = errors / n
    den = 1 + z * z / n
    centre = p + z * z / (2 * n)
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return min(1.0, (centre + half) / den)


def ber_upper_bound(errors: int, n: int) -> float:
    """Wilson 95% upper bound, or the rule-of-three bound when error-free."""
    return 3.0 / n if errors == 0 else wilson_upper(errors, n)


@njit(cache=True)
def _ber_scan(bits, k_lo, table, dfe_tap, center, offsets, noise_sigma, rj_sigma, start, count,
              seed):
    np.random.seed(seed)
    errors = np.zeros(offsets.shape[0], dtype=np.int64)
    for p in range(offsets.shape[0]):
        d_prev = 1
        for i in range(start, start + count):
            ph = center + offsets[p]
            if rj_sigma > 0:
                ph += rj_sigma * np.random.standard_normal()
            v = sample_table(bits, i, k_lo, table, ph) - dfe_tap * d_prev
            if noise_sigma > 0:
                v += noise_sigma * np.random.standard_normal()
            d = 1 if v >= 0.0 else -1
            if d != bits[i]:
                errors[p] += 1
            d_prev = d
    return errors


def bathtub(sbr: SingleBitResponse, bits, center: float, offsets, *, dfe_tap: float = 0.0,
            noise_sigma: float = 0.0, rj_sigma: float = 0.0, seed: int = 0) -> BathtubCurve:
    """BER at fixed sampling phases ``center + offsets`` with the clock held open-loop.

    The DFE feeds back decided bits.  Each point uses every bit of ``bits``
    except the SBR support at both ends.
    """
    bits = np.asarray(bits, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=float)
    k_lo, table = sbr.phase_table()
    start = sbr.k_hi + 2
    count = len(bits) - start + k_lo - 2
    if count <= 0:
        raise ValueError("bit sequence too short for the SBR support")
    errs = _ber_scan(bits, k_lo, table, dfe_tap, center, offsets, noise_sigma, rj_sigma,
                     start, count, seed)
    pts = [(float(o), e / count, ber_upper_bound(int(e), count)) for o, e in zip(offsets, errs)]
    return BathtubCurve(pts, count)


def q_function(x):
    return stats.norm.sf(x)


@dataclass
class PhaseSpectrum:
    freqs: np.ndarray
    power_dbc: np.ndarray
    integrated_spur_dbc: float
    spurs: list[tuple[float, float]]
    carrier_power: float
    total_power: float
    bandwidth_hz: float

    def level_at(self, freq: float, bins: int = 2) -> float:
        """Cluster power (dBc) around the bin nearest ``freq``."""
        i = int(np.argmin(np.abs(self.freqs - freq)))
        lin = 10 ** (self.power_dbc[max(0, i - bins): i + bins + 1] / 10)
        return float(10 * np.log10(lin.sum()))

    def floor_near(self, freq: float, span: int = 64, guard: int = 4) -> float:
        """Median bin level (dBc) in a window around ``freq`` excluding its cluster."""
        i = int(np.argmin(np.abs(self.freqs - freq)))
        lo, hi = max(0, i - span), min(len(self.freqs), i + span + 1)
        idx = [j for j in range(lo, hi) if abs(j - i) > guard]
        return float(np.median(self.power_dbc[idx]))

    def excess_over_floor(self, freq: float, bins: int = 2, span: int = 64,
                          guard: int = 4) -> float:
        """Cluster power around ``freq`` over the same number of bins of local noise (dB).

        The noise level is the mean bin power in the window used by
        ``floor_near``; a noise-only cluster reads about 0 dB.
        """
        i = int(np.argmin(np.abs(self.freqs - freq)))
        lo, hi = max(0, i - span), min(len(self.freqs), i + span + 1)
        idx = [j for j in range(lo, hi) if abs(j - i) > guard]
        noise = np.mean(10 ** (self.power_dbc[idx] / 10)) * (2 * bins + 1)
        return float(self.level_at(freq, bins) - 10 * np.log10(noise))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_hz", "dbc"])
            for f, p in zip(self.freqs, self.power_dbc):
                w.writerow([f"{f:.6e}", f"{p:.4f}"])


def spectrum(theta, sample_rate: float, *, detrend: bool = True, cluster: int = 2,
             spur_threshold_db: float = 10.0) -> PhaseSpectrum:
    """Hann-windowed spectrum of ``exp(j * theta)`` relative to the carrier.

    Spurs are local maxima more than ``spur_threshold_db`` above the median
    bin; each counts with ``cluster`` bins either side.  Spur integration
    runs up to the Nyquist rate of ``theta``.
    """
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    if n < 2 ** 14:
        raise ValueError("need at least 2**14 phase samples")
    if detrend:
        x = np.arange(n)
        theta = theta - np.polyval(np.polyfit(x, theta, 1), x)
    w = np.hanning(n)
    X = np.fft.fft(np.exp(1j * theta) * w)
    p = np.abs(X) ** 2 / (n * np.sum(w ** 2))
    p = np.fft.fftshift(p)
    freqs = np.fft.fftshift(np.fft.fftfreq(n, 1.0 / sample_rate))
    c = int(np.argmin(np.abs(freqs)))
    carrier = p[c - cluster: c + cluster + 1].sum()
    floor = np.median(p)
    taken = np.zeros(n, dtype=bool)
    taken[c - cluster: c + cluster + 1] = True
    peaks = np.nonzero((p[1:-1] > p[:-2]) & (p[1:-1] >= p[2:]))[0] + 1
    peaks = peaks[p[peaks] > floor * 10 ** (spur_threshold_db / 10)]
    spurs = []
    spur_power = 0.0
    for i in peaks[np.argsort(p[peaks])[::-1]]:
        lo, hi = max(0, i - cluster), min(n, i + cluster + 1)
        if taken[i]:
            continue
        sl = ~taken[lo:hi]
        pw = p[lo:hi][sl].sum()
        taken[lo:hi] = True
        spur_power += pw
        spurs.append((float(freqs[i]), float(10 * np.log10(pw / carrier))))
    integrated = 10 * np.log10(spur_power / carrier) if spur_power > 0 else -math.inf
    with np.errstate(divide="ignore"):
        dbc = 10 * np.log10(p / carrier)
    return PhaseSpectrum(freqs, dbc, float(integrated), spurs, float(carrier), float(p.sum()),
                         sample_rate / 2)


@dataclass
class JtolCurve:
    points: list[tuple[float, float]]
    omitted: list[float] = field(default_factory=list)

    def __post_init__(self):
        if any(a <= 0 for _, a in self.points):
            raise ValueError("tolerated amplitudes must be positive")

    @property
    def freqs(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def slope_db_per_decade(self, fmax: float | None = None) -> float:
        f, a = self.freqs, self.amplitudes
        sel = f <= fmax if fmax is not None else np.ones_like(f, dtype=bool)
        if sel.sum() < 2:
            raise ValueError("need two points for a slope")
        return float(np.polyfit(np.log10(f[sel]), 20 * np.log10(a[sel]), 1)[0])

    def corner(self) -> float:
        """Frequency where the low-frequency -20 dB/dec asymptote meets the high-frequency floor.

        The asymptote is fitted through the two lowest frequencies; the floor
        is the tolerance at the highest frequency.
        """
        f, a = self.freqs, self.amplitudes
        if len(f) < 3:
            raise ValueError("need three points for a corner estimate")
        floor = a[-1]
        c = np.mean(a[:2] * f[:2])  # a = c / f on the asymptote
        return float(c / floor)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sj_frequency_hz", "sj_amplitude_ui"])
            for f, a in self.points:
                w.writerow([f"{f:.6e}", f"{a:.6f}"])


def jtol_sweep(trial: Callable[[float, float], bool], freqs: Iterable[float], *,
               a_min: float = 0.02, a_max: float = 64.0, rel_tol: float = 0.05) -> JtolCurve:
    """Largest SJ amplitude per frequency for which ``trial(freq, amp)`` passes.

    Bisects in log-amplitude between a passing and a failing bracket.  A
    frequency that fails already at ``a_min`` is omitted and listed in
    ``omitted``; one that still passes at ``a_max`` reports ``a_max``.
    """
    pts, omitted = [], []
    for f in freqs:
        if not trial(f, a_min):
            omitted.append(float(f))
            continue
        lo, hi = a_min, a_max
        if trial(f, hi):
            pts.append((float(f), hi))
            continue
        while hi / lo > 1 + rel_tol:
            mid = math.sqrt(lo * hi)
            if trial(f, mid):
                lo = mid
            else:
                hi = mid
        pts.append((float(f), lo))
    return JtolCurve(pts, omitted)


def write_summary(path, values: dict) -> None:
    """Flat ``key=value`` report, one entry per line, keys sorted."""
    lines = [f"{k}={values[k]}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n")
