"""Signal conditioning: bandpass -> resample -> per-lead normalization -> lead mask.

The order is fixed by :func:`preprocess_signal`; masking after normalization
guarantees masked channels are exact zeros carrying no statistics.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .config import LEAD_NAMES
from .errors import ConfigurationError, InputError

N_LEADS = 12


@dataclass(frozen=True)
class FilterSpec:
    sample_rate_hz: float = 500.0
    order: int = 4
    low_hz: float = 0.5
    high_hz: float = 45.0

    def __post_init__(self):
        nyquist = self.sample_rate_hz / 2.0
        if self.order < 1:
            raise ConfigurationError(f"filter order must be >= 1, got {self.order}")
        if not 0.0 < self.low_hz < self.high_hz:
            raise ConfigurationError(f"need 0 < low_hz < high_hz, got {self.low_hz}, {self.high_hz}")
        if self.high_hz >= nyquist:
            raise ConfigurationError(f"high_hz={self.high_hz} must be below Nyquist {nyquist}")


@dataclass
class RawSignal:
    leads: np.ndarray  # [12, L] millivolts
    sample_rate_hz: float = 500.0

    def __post_init__(self):
        self.leads = np.asarray(self.leads, dtype=np.float64)
        if self.leads.ndim != 2 or self.leads.shape[0] != N_LEADS:
            raise InputError(f"raw signal must be [12, L], got {self.leads.shape}")
        if self.leads.shape[1] < 2 * self.sample_rate_hz:
            raise InputError(f"raw signal shorter than 2 s ({self.leads.shape[1]} samples at {self.sample_rate_hz} Hz)")


@dataclass(frozen=True)
class LeadMask:
    included: tuple = (True,) * N_LEADS

    def __post_init__(self):
        inc = tuple(bool(v) for v in self.included)
        if len(inc) != N_LEADS:
            raise InputError(f"lead mask needs {N_LEADS} entries, got {len(inc)}")
        if not any(inc):
            raise InputError("lead mask must include at least one lead")
        object.__setattr__(self, "included", inc)

    @classmethod
    def from_names(cls, names) -> "LeadMask":
        names = list(names)
        unknown = [n for n in names if n not in LEAD_NAMES]
        if unknown:
            raise InputError(f"unknown lead name(s): {unknown}")
        return cls(tuple(n in names for n in LEAD_NAMES))

    @classmethod
    def full(cls) -> "LeadMask":
        return cls()

    @property
    def names(self) -> list[str]:
        return [n for n, keep in zip(LEAD_NAMES, self.included) if keep]

    @property
    def is_full(self) -> bool:
        return all(self.included)


def design_butterworth_bandpass(spec: FilterSpec) -> np.ndarray:
    """Second-order sections of a Butterworth bandpass (bilinear transform, prewarped)."""
    return sps.butter(spec.order, [spec.low_hz, spec.high_hz], btype="bandpass",
                      fs=spec.sample_rate_hz, output="sos")


def sos_response(sos: np.ndarray, freqs_hz, fs: float) -> np.ndarray:
    """Complex H(e^{jw}) of a biquad cascade evaluated directly from its coefficients."""
    z = np.exp(1j * 2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs)
    zi = 1.0 / z
    h = np.ones_like(z)
    for b0, b1, b2, a0, a1, a2 in sos:
        h *= (b0 + b1 * zi + b2 * zi ** 2) / (a0 + a1 * zi + a2 * zi ** 2)
    return h


def filtfilt(sos: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Zero-phase forward-backward filtering along the last axis.

    Edges are extended by odd reflection over three times the realized
    filter order (two poles per second-order section).
    """
    x = np.asarray(x, dtype=np.float64)
    padlen = 3 * 2 * len(sos)
    if x.shape[-1] <= padlen:
        raise InputError(f"signal of length {x.shape[-1]} too short for filtering (need > {padlen})")
    return sps.sosfiltfilt(sos, x, axis=-1, padtype="odd", padlen=padlen)


def resample(x: np.ndarray, from_hz: float, to_hz: float) -> np.ndarray:
    """Rate conversion after bandpassing; integer ratios decimate by plain slicing."""
    x = np.asarray(x, dtype=np.float64)
    ratio = Fraction(to_hz / from_hz).limit_denominator(1000)
    if ratio <= 0 or abs(float(ratio) - to_hz / from_hz) > 1e-12:
        raise ConfigurationError(f"resampling ratio {to_hz}/{from_hz} is not a simple rational")
    length = x.shape[-1]
    n_out = (length * ratio.numerator) // ratio.denominator
    if ratio.numerator == 1:
        y = x[..., :: ratio.denominator]
    else:
        y = sps.resample_poly(x, ratio.numerator, ratio.denominator, axis=-1)
    return np.ascontiguousarray(y[..., :n_out])


def normalize_per_lead(x: np.ndarray, min_std: float = 1e-8) -> np.ndarray:
    """Zero mean, unit population std per lead; flat leads become zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    flat = sd < min_std
    out = (x - mu) / np.where(flat, 1.0, sd)
    return np.where(flat, 0.0, out)


def apply_lead_mask(x: np.ndarray, mask: LeadMask) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] != N_LEADS:
        raise InputError(f"expected {N_LEADS} leads, got shape {x.shape}")
    if mask.is_full:
        return x
    keep = np.asarray(mask.included)[:, None]
    return np.where(keep, x, 0.0)


def preprocess_signal(raw: RawSignal, target_hz: float = 100.0, mask: LeadMask | None = None,
                      spec: FilterSpec | None = None) -> np.ndarray:
    spec = spec or FilterSpec(sample_rate_hz=raw.sample_rate_hz)
    sos = design_butterworth_bandpass(spec)
    x = filtfilt(sos, raw.leads)
    x = resample(x, raw.sample_rate_hz, target_hz)
    x = normalize_per_lead(x)
    if mask is not None:
        x = apply_lead_mask(x, mask)
    return x


def worker_count() -> int:
    """Pool width from CPF_THREADS (0 or unset means single-threaded)."""
    try:
        return max(0, int(os.environ.get("CPF_THREADS", "0")))
    except ValueError:
        return 0


def preprocess_many(raws, target_hz: float = 100.0, mask: LeadMask | None = None) -> list[np.ndarray]:
    fn = lambda r: preprocess_signal(r, target_hz, mask)  # noqa: E731
    n = worker_count()
    if n <= 1:
        return [fn(r) for r in raws]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, raws))
