"""Device-accurate simulator for analog non-volatile compute-in-memory accelerators."""

__version__ = "0.1.0"

from .converters import ConverterSpec, LinearLevels, MeasuredStates, quantize_io, quantize_weight
from .crossbar import CrossbarTile, DtaSpec, dta_limit, dta_output, tile_forward
from .devices import (
    DeviceKind,
    DeviceState,
    FgParams,
    MeasurementSweep,
    ReRamParams,
    fg_current,
    fg_floating_voltage,
    fit_fg_params,
    fit_reram_params,
    reram_current,
    state_to_weight,
    weight_to_state,
)
from .network import NetworkModel, forward, lenet5_preset, predict
from .training import Dataset, TrainConfig, evaluate_quantized, sgd_step, train

__all__ = [name for name in dir() if not name.startswith("_")]
