"""Hardware reports: per-layer and aggregate power, neuron currents, area.

Layer tile power for one MVM operation is V_DD times the sum of the absolute
post-limit currents on every select line (both polarities).  Converter power
is per-unit constants times the layer's input/output activation counts.  The
aggregate average power is the mean of the per-layer averages; the aggregate
peak is the max of the per-layer peaks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .converters import ConverterSpec
from .devices import DeviceKind
from .exceptions import CimSimError, DomainError
from .network import Conv2d, LayerTelemetry, MvmLayer, NetworkModel


class ReportError(CimSimError, ValueError):
    """Telemetry is empty or inconsistent."""


DEFAULT_V_DD_VOLTS = 1.2


@dataclass(frozen=True)
class AreaConstants:
    reram_pair_area_um2: float = 8.64
    fg_pair_area_um2: float = 78.72
    dac_area_um2: float = 25600.0
    adc_area_um2: float = 6681.1

    def __post_init__(self):
        if min(self.reram_pair_area_um2, self.fg_pair_area_um2,
               self.dac_area_um2, self.adc_area_um2) <= 0:
            raise DomainError("area constants must be positive")

    def pair_area(self, kind: DeviceKind) -> float:
        return self.reram_pair_area_um2 if kind is DeviceKind.RERAM else self.fg_pair_area_um2


def layer_tile_power(currents, v_dd_volts: float) -> float:
    """Tile power for one set of DTA input currents: V_DD * sum(|I|)."""
    i = np.asarray(currents, dtype=float)
    if i.size and not np.all(np.isfinite(i)):
        raise DomainError("non-finite current in telemetry")
    return float(v_dd_volts * np.sum(np.abs(i)))


def layer_converter_power(n_inputs: int, n_outputs: int, spec: ConverterSpec) -> float:
    """DAC power per input plus ADC power per output."""
    if n_inputs < 0 or n_outputs < 0:
        raise DomainError("converter counts must be non-negative")
    return n_inputs * spec.dac_power_watts + n_outputs * spec.adc_power_watts


def layer_area(n_pairs: int, n_inputs: int, n_outputs: int, kind: DeviceKind,
               consts: AreaConstants = AreaConstants()) -> float:
    """Device-pair area plus converter area for one layer."""
    if min(n_pairs, n_inputs, n_outputs) < 0:
        raise DomainError("area counts must be non-negative")
    return (n_pairs * consts.pair_area(kind)
            + n_inputs * consts.dac_area_um2
            + n_outputs * consts.adc_area_um2)


@dataclass
class LayerStats:
    """Streaming accumulator over the post-limit currents of one layer."""

    name: str
    n_currents: int = 0
    sum_abs_current: float = 0.0
    peak_abs_current: float = 0.0
    n_ops: int = 0
    sum_op_power: float = 0.0
    peak_op_power: float = 0.0
    v_dd_volts: float = DEFAULT_V_DD_VOLTS

    def update(self, t: LayerTelemetry):
        i = np.abs(np.stack([t.i_plus, t.i_minus], axis=-1))  # (P, C, 2)
        self.n_currents += i.size
        self.sum_abs_current += float(i.sum())
        self.peak_abs_current = max(self.peak_abs_current, float(i.max()))
        op_power = self.v_dd_volts * i.sum(axis=(1, 2))  # per MVM operation
        self.n_ops += op_power.size
        self.sum_op_power += float(op_power.sum())
        self.peak_op_power = max(self.peak_op_power, float(op_power.max()))

    @property
    def avg_current(self) -> float:
        if self.n_currents == 0:
            raise ReportError(f"no telemetry recorded for {self.name}")
        return self.sum_abs_current / self.n_currents

    @property
    def avg_power(self) -> float:
        if self.n_ops == 0:
            raise ReportError(f"no telemetry recorded for {self.name}")
        return self.sum_op_power / self.n_ops


class TelemetryAccumulator:
    """Collects per-layer stats across every batch of an inference run."""

    def __init__(self, v_dd_volts: float = DEFAULT_V_DD_VOLTS):
        self.v_dd_volts = v_dd_volts
        self.layers: dict[str, LayerStats] = {}

    def __call__(self, telemetry: list[LayerTelemetry]):
        for t in telemetry:
            stats = self.layers.setdefault(
                t.name, LayerStats(t.name, v_dd_volts=self.v_dd_volts))
            stats.update(t)


def neuron_current_stats(acc: TelemetryAccumulator):
    """{layer: (peak A, avg A)} plus an 'overall' entry across all layers."""
    if not acc.layers:
        raise ReportError("empty telemetry")
    out = {}
    total_sum, total_n, peak = 0.0, 0, 0.0
    for name, s in acc.layers.items():
        out[name] = (s.peak_abs_current, s.avg_current)
        total_sum += s.sum_abs_current
        total_n += s.n_currents
        peak = max(peak, s.peak_abs_current)
    out["overall"] = (peak, total_sum / total_n)
    return out


@dataclass
class LayerReport:
    name: str
    n_pairs: int
    n_inputs: int
    n_outputs: int
    tile_avg_power_w: float
    tile_peak_power_w: float
    converter_power_w: float
    peak_neuron_current_a: float
    avg_neuron_current_a: float
    area_um2: float


@dataclass
class PowerAreaReport:
    layers: list[LayerReport]
    avg_power_w: float
    peak_power_w: float
    total_converter_power_w: float
    total_area_um2: float
    v_dd_volts: float


def _converter_input_count(layer: MvmLayer) -> int:
    """DAC count of a layer: one per driven input position.

    A padded convolution drives DACs for the full padded plane, not just the
    raw image, so the count uses the post-padding shape.
    """
    c, h, w = (layer.in_shape + (1, 1))[:3] if len(layer.in_shape) < 3 else layer.in_shape
    spec = layer.spec
    if isinstance(spec, Conv2d) and spec.padding:
        return int(c * (h + 2 * spec.padding) * (w + 2 * spec.padding))
    return int(np.prod(layer.in_shape))


def build_report(
    model: NetworkModel,
    acc: TelemetryAccumulator,
    consts: AreaConstants = AreaConstants(),
) -> PowerAreaReport:
    """Assemble the per-layer and aggregate report from accumulated telemetry."""
    layers = []
    for layer in model.mvm_layers:
        if layer.name not in acc.layers:
            raise ReportError(f"no telemetry for layer {layer.name}")
        s = acc.layers[layer.name]
        n_in = _converter_input_count(layer)
        n_out = int(np.prod(layer.out_shape))
        layers.append(LayerReport(
            name=layer.name,
            n_pairs=layer.n_pairs,
            n_inputs=n_in,
            n_outputs=n_out,
            tile_avg_power_w=s.avg_power,
            tile_peak_power_w=s.peak_op_power,
            converter_power_w=layer_converter_power(n_in, n_out, model.converter),
            peak_neuron_current_a=s.peak_abs_current,
            avg_neuron_current_a=s.avg_current,
            area_um2=layer_area(layer.n_pairs, n_in, n_out, model.device_kind, consts),
        ))
    return PowerAreaReport(
        layers=layers,
        avg_power_w=float(np.mean([l.tile_avg_power_w for l in layers])),
        peak_power_w=float(max(l.tile_peak_power_w for l in layers)),
        total_converter_power_w=float(sum(l.converter_power_w for l in layers)),
        total_area_um2=float(sum(l.area_um2 for l in layers)),
        v_dd_volts=acc.v_dd_volts,
    )


@dataclass(frozen=True)
class OverheadEntry:
    name: str
    ratio: float
    overhead_dominated: bool


def tile_overhead_ratio(converter_power_w: float, tile_avg_power_w: float) -> OverheadEntry:
    """Converter-to-tile power ratio; flagged when converters dominate."""
    if tile_avg_power_w == 0.0:
        return OverheadEntry("", math.inf, True)
    ratio = converter_power_w / tile_avg_power_w
    return OverheadEntry("", ratio, ratio > 1.0)


def tile_overhead_report(report: PowerAreaReport) -> list[OverheadEntry]:
    out = []
    for l in report.layers:
        e = tile_overhead_ratio(l.converter_power_w, l.tile_avg_power_w)
        out.append(OverheadEntry(l.name, e.ratio, e.overhead_dominated))
    return out


_CSV_HEADER = [
    "layer",
    "pairs",
    "inputs",
    "outputs",
    "avg_layer_power_w",
    "peak_layer_power_w",
    "converter_power_w",
    "peak_neuron_current_a",
    "avg_neuron_current_a",
    "area_um2",
]


def report_rows(report: PowerAreaReport) -> list[list]:
    rows = [list(_CSV_HEADER)]
    for l in report.layers:
        rows.append([
            l.name, l.n_pairs, l.n_inputs, l.n_outputs,
            repr(l.tile_avg_power_w), repr(l.tile_peak_power_w),
            repr(l.converter_power_w), repr(l.peak_neuron_current_a),
            repr(l.avg_neuron_current_a), repr(l.area_um2),
        ])
    rows.append([
        "aggregate", sum(l.n_pairs for l in report.layers),
        sum(l.n_inputs for l in report.layers), sum(l.n_outputs for l in report.layers),
        repr(report.avg_power_w), repr(report.peak_power_w),
        repr(report.total_converter_power_w), "", "", repr(report.total_area_um2),
    ])
    return rows


def report_json(report: PowerAreaReport) -> str:
    payload = {
        "v_dd_volts": report.v_dd_volts,
        "layers": [vars(l) for l in report.layers],
        "aggregate": {
            "avg_power_w": report.avg_power_w,
            "peak_power_w": report.peak_power_w,
            "converter_power_w": report.total_converter_power_w,
            "total_area_um2": report.total_area_um2,
        },
        "tile_overhead": [vars(e) for e in tile_overhead_report(report)],
    }
    return json.dumps(payload, indent=2, sort_keys=True)
