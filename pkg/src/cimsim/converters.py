"""Behavioral DAC/ADC models and weight quantizers.

The converters are linear code<->voltage maps over a fixed dynamic range with
per-unit power/area constants.  Weight quantization is linear for FG devices
and snap-to-measured-state (after a moving-average smoothing) for ReRAM.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError


@dataclass(frozen=True)
class ConverterSpec:
    """Bit depth, dynamic range and per-unit power/area of one DAC/ADC pair."""

    bits: int = 8
    v_lo_volts: float = 0.2
    v_hi_volts: float = 0.8
    dac_power_watts: float = 400e-6
    adc_power_watts: float = 9.38e-6
    dac_area_um2: float = 25600.0
    adc_area_um2: float = 6681.1

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise DomainError(f"converter bits must be in [1, 16], got {self.bits}")
        if not self.v_lo_volts < self.v_hi_volts:
            raise DomainError("converter range requires v_lo < v_hi")

    @property
    def n_codes(self) -> int:
        return 1 << self.bits

    @property
    def lsb_volts(self) -> float:
        return (self.v_hi_volts - self.v_lo_volts) / (self.n_codes - 1)


def dac_encode(code, spec: ConverterSpec):
    """Voltage produced for a digital code; codes span [v_lo, v_hi] inclusive."""
    code = np.asarray(code)
    if np.any(code < 0) or np.any(code >= spec.n_codes):
        raise DomainError(f"code out of range [0, {spec.n_codes - 1}]")
    out = spec.v_lo_volts + code * spec.lsb_volts
    return float(out) if out.ndim == 0 else out


def adc_quantize(v, spec: ConverterSpec):
    """Nearest code for a voltage; saturates outside [v_lo, v_hi]."""
    v = np.asarray(v, dtype=float)
    t = (v - spec.v_lo_volts) / spec.lsb_volts
    code = np.clip(np.floor(t + 0.5), 0, spec.n_codes - 1).astype(np.int64)
    return int(code) if code.ndim == 0 else code


def quantize_io(v, spec: ConverterSpec):
    """Voltage after an ADC->DAC code round-trip (idempotent, half-LSB error)."""
    dtype = v.dtype if isinstance(v, np.ndarray) else float
    out = np.asarray(spec.v_lo_volts + adc_quantize(v, spec) * spec.lsb_volts, dtype=dtype)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LinearLevels:
    """n equally spaced weight levels on [-1, 1]."""

    n: int

    def __post_init__(self):
        if self.n < 2:
            raise DomainError(f"linear quantizer needs >= 2 levels, got {self.n}")

    def levels(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.n)


@dataclass(frozen=True)
class MeasuredStates:
    """Weight-equivalent values of measured device states, smoothed then snapped.

    ``window`` is the total width of the centered moving average applied to the
    sorted state list (truncated at the ends).
    """

    states: np.ndarray
    window: int = 3

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim != 1 or s.size < 1:
            raise DomainError("measured states must be a non-empty 1-D list")
        if not np.all(np.diff(s) >= 0):
            raise DomainError("measured states must be sorted ascending")
        if self.window < 1:
            raise DomainError(f"moving-average window must be >= 1, got {self.window}")
        object.__setattr__(self, "states", s)

    def levels(self) -> np.ndarray:
        s = self.states
        lo = (self.window - 1) // 2
        hi = self.window // 2
        out = np.empty_like(s)
        for i in range(s.size):
            out[i] = s[max(0, i - lo): min(s.size, i + hi + 1)].mean()
        return out


WeightQuantizer = LinearLevels | MeasuredStates


def snap_to_levels(w, levels: np.ndarray):
    """Nearest level; exact ties round away from zero."""
    w = np.asarray(w, dtype=float)
    idx = np.searchsorted(levels, w)
    lo = np.clip(idx - 1, 0, levels.size - 1)
    hi = np.clip(idx, 0, levels.size - 1)
    d_lo = np.abs(w - levels[lo])
    d_hi = np.abs(levels[hi] - w)
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (np.abs(levels[hi]) >= np.abs(levels[lo])))
    out = np.where(pick_hi, levels[hi], levels[lo])
    return float(out) if out.ndim == 0 else out


def quantize_weight(w, q: WeightQuantizer):
    """Snap a weight in [-1, 1] onto the quantizer's level set."""
    w = np.asarray(w, dtype=float)
    if np.any(np.abs(w) > 1.0):
        raise DomainError(f"weight magnitude {float(np.max(np.abs(w)))} exceeds 1")
    out = snap_to_levels(w, q.levels())
    return float(out) if np.ndim(out) == 0 else out
