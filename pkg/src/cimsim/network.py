"""Networks composed of crossbar tiles: conv (im2col), pooling and FC layers.

Layer inputs live in a digital activation domain [0, 1]; each MVM layer
encodes them to bit-line voltages in the training clip range, runs the tile,
and the DTA output voltage divided by V_max becomes the next activation.
Pooling is done digitally between tiles.  The whole forward pass is recorded
on an autodiff tape so training can differentiate end-to-end through the
device laws and DTA limits.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import DualValue, Tape, affine, matmul, record, relu, reshape, sinh, take, tanh, transpose
from .converters import ConverterSpec, quantize_io
from .crossbar import CrossbarTile, DtaSpec, fg_colsum_node, fg_dta_spec, reram_dta_spec
from .devices import DeviceKind, FgParams, ReRamParams
from .exceptions import DomainError, ShapeError


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise DomainError(f"invalid conv spec {self}")


@dataclass(frozen=True)
class AvgPool:
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise DomainError(f"invalid pool size {self.size}")


@dataclass(frozen=True)
class FullyConnected:
    out_features: int

    def __post_init__(self):
        if self.out_features < 1:
            raise DomainError(f"invalid fc width {self.out_features}")


LayerSpec = Conv2d | AvgPool | FullyConnected


def conv_as_tile(layer: Conv2d, in_channels: int) -> tuple[int, int]:
    """Crossbar dimensions of an im2col-mapped conv: (C_in*k^2, C_out)."""
    return in_channels * layer.kernel * layer.kernel, layer.out_channels


@dataclass
class MvmLayer:
    """A conv or fc layer bound to one weight matrix / crossbar tile."""

    name: str
    spec: Conv2d | FullyConnected
    in_shape: tuple
    out_shape: tuple
    rows: int
    cols: int
    weights: np.ndarray
    dta: DtaSpec
    _idx_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_pairs(self) -> int:
        return self.rows * self.cols

    def im2col_indices(self, batch: int) -> np.ndarray:
        """Flat gather indices (P, R) into the padded voltage tensor."""
        if batch in self._idx_cache:
            return self._idx_cache[batch]
        c_in, h, w = self.in_shape
        k, s, pad = self.spec.kernel, self.spec.stride, self.spec.padding
        hp, wp = h + 2 * pad, w + 2 * pad
        oh = (hp - k) // s + 1
        ow = (wp - k) // s + 1
        b_i, oh_i, ow_i = np.meshgrid(
            np.arange(batch), np.arange(oh), np.arange(ow), indexing="ij"
        )
        pos = np.stack([b_i, oh_i, ow_i], axis=-1).reshape(-1, 3)
        c_i, kh_i, kw_i = np.meshgrid(
            np.arange(c_in), np.arange(k), np.arange(k), indexing="ij"
        )
        ker = np.stack([c_i, kh_i, kw_i], axis=-1).reshape(-1, 3)
        rows_h = pos[:, 1][:, None] * s + ker[:, 1][None, :]
        rows_w = pos[:, 2][:, None] * s + ker[:, 2][None, :]
        idx = (
            ((pos[:, 0][:, None] * c_in + ker[:, 0][None, :]) * hp + rows_h) * wp + rows_w
        )
        self._idx_cache[batch] = idx
        return idx


@dataclass
class PoolLayer:
    name: str
    spec: AvgPool
    in_shape: tuple
    out_shape: tuple


@dataclass
class NetworkModel:
    """Ordered layers bound to tiles plus the shared analog operating point."""

    device_kind: DeviceKind
    device_params: ReRamParams | FgParams
    converter: ConverterSpec
    layers: list
    input_shape: tuple
    clip_lo_volts: float = 0.2
    clip_hi_volts: float = 0.6
    v_tun_volts: float = 0.0
    dtype: type = np.float64

    def __post_init__(self):
        if not (self.converter.v_lo_volts <= self.clip_lo_volts
                < self.clip_hi_volts <= self.converter.v_hi_volts):
            raise DomainError("training clip range must lie inside the DAC range")

    @property
    def mvm_layers(self) -> list[MvmLayer]:
        return [l for l in self.layers if isinstance(l, MvmLayer)]

    def tile(self, layer: MvmLayer) -> CrossbarTile:
        """Materialize the differential-pair tile for one layer's weights."""
        sp, sm = weights_to_state_matrices(layer.weights, self.device_kind, self.device_params)
        return CrossbarTile(
            kind=self.device_kind,
            states_plus=sp,
            states_minus=sm,
            params=self.device_params,
            dta=layer.dta,
            v_tun_volts=self.v_tun_volts,
        )

    def copy(self) -> "NetworkModel":
        m = copy.copy(self)
        m.layers = [
            replace(l, weights=l.weights.copy(), _idx_cache={}) if isinstance(l, MvmLayer)
            else l
            for l in self.layers
        ]
        return m


def weights_to_state_matrices(w: np.ndarray, kind: DeviceKind, params):
    """Differential programming: w+ = relu(w), w- = relu(-w), each mapped affinely."""
    if kind is DeviceKind.RERAM:
        lo, hi = params.g_min_nm, params.g_max_nm
    else:
        lo, hi = params.v_fg0_min_volts, params.v_fg0_max_volts
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return mid - np.maximum(w, 0) * half, mid - np.maximum(-w, 0) * half


def encode_input(x, clip_lo_volts: float = 0.2, clip_hi_volts: float = 0.6,
                 spec: ConverterSpec | None = None):
    """Map a normalized value in [0, 1] onto the input-voltage clip range.

    With a converter spec the voltage is additionally snapped to the DAC grid.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x > 1):
        raise DomainError("normalized inputs must lie in [0, 1]")
    v = clip_lo_volts + x * (clip_hi_volts - clip_lo_volts)
    if spec is not None:
        v = quantize_io(v, spec)
    return float(v) if np.ndim(v) == 0 else v


# tape plumbing ops used only by the network forward -------------------------

ad.register_op(
    "quantize_io",
    lambda v, c: quantize_io(v[0], c[0]),
    lambda g, v, o, c: (_ for _ in ()).throw(
        ShapeError("IO quantization is test-only and not differentiable")
    ),
)
ad.register_op(
    "pad_hw",
    lambda v, c: np.pad(v[0], ((0, 0), (0, 0), (c[0], c[0]), (c[0], c[0])),
                        constant_values=c[1]),
    lambda g, v, o, c: (g[:, :, c[0]: g.shape[2] - c[0], c[0]: g.shape[3] - c[0]],),
)


@dataclass
class LayerTelemetry:
    """Post-limit DTA currents and output voltages of one MVM layer, one batch."""

    name: str
    i_plus: np.ndarray
    i_minus: np.ndarray
    v_out: np.ndarray


@dataclass
class ForwardResult:
    scores: np.ndarray
    telemetry: list[LayerTelemetry]
    tape: Tape
    score_node: DualValue
    param_nodes: dict


def _mvm_state_nodes(tape, layer, model, trainable, need_grad, params_out,
                     state_override=None):
    """Tape nodes for the two polarity state matrices of one layer."""
    kind, p = model.device_kind, model.device_params
    if kind is DeviceKind.RERAM:
        lo, hi = p.g_min_nm, p.g_max_nm
    else:
        lo, hi = p.v_fg0_min_volts, p.v_fg0_max_volts
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    if trainable == "states":
        if state_override is not None and layer.name in state_override:
            sp, sm = state_override[layer.name]
        else:
            sp, sm = weights_to_state_matrices(layer.weights, kind, p)
        sp_n = ad.parameter(tape, np.asarray(sp, dtype=model.dtype))
        sm_n = ad.parameter(tape, np.asarray(sm, dtype=model.dtype))
        params_out[layer.name] = (sp_n, sm_n)
        return sp_n, sm_n
    w_n = (ad.parameter if need_grad else ad.constant)(
        tape, np.asarray(layer.weights, dtype=model.dtype))
    params_out[layer.name] = w_n
    sp_n = affine(relu(w_n), -half, mid)
    sm_n = affine(relu(-w_n), -half, mid)
    return sp_n, sm_n


def _mvm_colsums(v_node, sp_n, sm_n, model, layer, need_grad):
    p = model.device_params
    if model.device_kind is DeviceKind.RERAM:
        drive = sinh(affine(v_node, 1.0 / p.v0_volts,
                            -layer.dta.v_select_volts / p.v0_volts))
        wp = affine(ad.exp(affine(sp_n, -1.0 / p.g0_nm, 0.0)), p.i0_amps, 0.0)
        wm = affine(ad.exp(affine(sm_n, -1.0 / p.g0_nm, 0.0)), p.i0_amps, 0.0)
        return matmul(drive, wp), matmul(drive, wm)
    return (
        fg_colsum_node(v_node, sp_n, p, layer.dta, model.v_tun_volts, need_grad),
        fg_colsum_node(v_node, sm_n, p, layer.dta, model.v_tun_volts, need_grad),
    )


def forward(
    model: NetworkModel,
    images: np.ndarray,
    quantize: bool = False,
    need_grad: bool = False,
    trainable: str = "weights",
    collect_telemetry: bool = False,
    state_override: dict | None = None,
) -> ForwardResult:
    """Run a batch through the network, recording everything on a fresh tape.

    ``quantize`` applies the converter code round-trip to every tile input
    voltage (test-time IO quantization).  ``trainable`` selects whether the
    tape parameters are the signed weights or the raw device state matrices.
    """
    x = np.asarray(images, dtype=model.dtype)
    if x.ndim == len(model.input_shape):
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"expected input shape {model.input_shape}, got {x.shape[1:]}")
    if np.any(x < 0) or np.any(x > 1):
        raise DomainError("normalized inputs must lie in [0, 1]")
    batch = x.shape[0]
    tape = Tape()
    params_out: dict = {}
    telemetry: list[LayerTelemetry] = []
    lo, hi = model.clip_lo_volts, model.clip_hi_volts
    x_n = ad.constant(tape, x)

    for layer in model.layers:
        if isinstance(layer, PoolLayer):
            b, c, h, w = (batch, *layer.in_shape)
            s = layer.spec.size
            x_n = reshape(x_n, (b, c, h // s, s, w // s, s))
            x_n = record("sum", x_n, ctx=((3, 5),))
            x_n = affine(x_n, 1.0 / (s * s), 0.0)
            continue
        v_n = affine(x_n, hi - lo, lo)
        if quantize:
            v_n = record("quantize_io", v_n, ctx=(model.converter,))
        if isinstance(layer.spec, Conv2d):
            if layer.spec.padding:
                v_n = record("pad_hw", v_n, ctx=(layer.spec.padding, lo))
            idx = layer.im2col_indices(batch)
            v_n = take(v_n, idx, idx.shape)
        elif v_n.value.ndim != 2:
            v_n = reshape(v_n, (batch, layer.rows))
        sp_n, sm_n = _mvm_state_nodes(tape, layer, model, trainable, need_grad,
                                      params_out, state_override)
        cs_p, cs_m = _mvm_colsums(v_n, sp_n, sm_n, model, layer, need_grad)
        i_max = layer.dta.i_max_amps
        lim_p = affine(tanh(affine(cs_p, 1.0 / i_max, 0.0)), i_max, 0.0)
        lim_m = affine(tanh(affine(cs_m, 1.0 / i_max, 0.0)), i_max, 0.0)
        u = affine(lim_p - lim_m, layer.dta.gain_v_per_a / layer.dta.v_max_volts, 0.0)
        x_n = tanh(relu(u))
        if collect_telemetry:
            telemetry.append(LayerTelemetry(
                layer.name, lim_p.value, lim_m.value,
                layer.dta.v_max_volts * x_n.value,
            ))
        if isinstance(layer.spec, Conv2d):
            oh, ow = layer.out_shape[1], layer.out_shape[2]
            x_n = reshape(x_n, (batch, oh, ow, layer.cols))
            x_n = transpose(x_n, (0, 3, 1, 2))

    v_max = model.mvm_layers[-1].dta.v_max_volts
    score_node = affine(x_n, v_max, 0.0)
    return ForwardResult(
        scores=np.asarray(score_node.value, dtype=float),
        telemetry=telemetry,
        tape=tape,
        score_node=score_node,
        param_nodes=params_out,
    )


def predict(model: NetworkModel, image: np.ndarray) -> int:
    """Class index with the highest score; ties break to the lowest index."""
    scores = forward(model, image).scores
    return int(np.argmax(scores[0]))


def _chain_shapes(layers: list[LayerSpec], input_shape: tuple):
    """Resolve per-layer in/out shapes for a spec list."""
    shape = tuple(input_shape)
    resolved = []
    for spec in layers:
        if isinstance(spec, Conv2d):
            if len(shape) != 3:
                raise ShapeError(f"conv layer needs (C, H, W) input, got {shape}")
            c, h, w = shape
            hp, wp = h + 2 * spec.padding, w + 2 * spec.padding
            if hp < spec.kernel or wp < spec.kernel:
                raise ShapeError(f"kernel {spec.kernel} exceeds padded input {hp}x{wp}")
            oh = (hp - spec.kernel) // spec.stride + 1
            ow = (wp - spec.kernel) // spec.stride + 1
            out = (spec.out_channels, oh, ow)
        elif isinstance(spec, AvgPool):
            c, h, w = shape
            if h % spec.size or w % spec.size:
                raise ShapeError(f"pool size {spec.size} does not divide {h}x{w}")
            out = (c, h // spec.size, w // spec.size)
        else:
            out = (spec.out_features,)
        resolved.append((spec, shape, out))
        shape = out
    return resolved


def build_network(
    specs: list[LayerSpec],
    input_shape: tuple,
    device_kind: DeviceKind,
    device_params,
    converter: ConverterSpec | None = None,
    seed: int = 42,
    init_scale: float = 0.1,
    init_out_shift: float = 0.05,
    dtype: type = np.float64,
    dta: DtaSpec | None = None,
    v_select_volts: float | None = None,
) -> NetworkModel:
    """Assemble a model from layer specs; weights start U(-init_scale, +init_scale).

    The last MVM layer's weights are shifted by ``init_out_shift`` so output
    columns start with positive differential currents.  The DTA clamps
    negative outputs to zero with zero slope, so an output column whose
    pre-activation is negative for every input can never recover during
    training; a small positive bias at init keeps all class outputs live.
    """
    converter = converter or ConverterSpec()
    if dta is None:
        if v_select_volts is not None:
            dta = (reram_dta_spec(v_select_volts) if device_kind is DeviceKind.RERAM
                   else fg_dta_spec(v_select_volts))
        else:
            dta = reram_dta_spec() if device_kind is DeviceKind.RERAM else fg_dta_spec()
    rng = np.random.default_rng(seed)
    layers = []
    for i, (spec, in_shape, out_shape) in enumerate(_chain_shapes(specs, input_shape)):
        name = f"L{i}_{type(spec).__name__.lower()}"
        if isinstance(spec, AvgPool):
            layers.append(PoolLayer(name, spec, in_shape, out_shape))
            continue
        if isinstance(spec, Conv2d):
            rows, cols = conv_as_tile(spec, in_shape[0])
        else:
            rows, cols = int(np.prod(in_shape)), spec.out_features
        weights = rng.uniform(-init_scale, init_scale, size=(rows, cols))
        layers.append(MvmLayer(name, spec, in_shape, out_shape, rows, cols, weights, dta))
    mvm = [l for l in layers if isinstance(l, MvmLayer)]
    if mvm:
        mvm[-1].weights = mvm[-1].weights + init_out_shift
    return NetworkModel(
        device_kind=device_kind,
        device_params=device_params,
        converter=converter,
        layers=layers,
        input_shape=tuple(input_shape),
        dtype=dtype,
    )


def calibrate_gains(
    model: NetworkModel,
    sample_images: np.ndarray,
    u_target: float = 1.2,
    percentile: float = 95.0,
    iters: int = 3,
) -> NetworkModel:
    """Size each layer's DTA gain from its observed differential currents.

    The formula-default gain maps a full +/-I_max swing onto the output range,
    but real column currents sit orders of magnitude below I_max (especially
    for subthreshold floating-gate tiles), which collapses every activation
    toward zero.  Here each tile's gain is set so the given percentile of
    |I+ - I-| on a sample batch lands at ``u_target`` in normalized output
    units (v_out = V_max * tanh(relu(u))).  Layers are recalibrated jointly
    for a few passes because upstream gains change downstream currents.

    Mutates and returns ``model``.
    """
    if u_target <= 0:
        raise DomainError("u_target must be positive")
    for _ in range(iters):
        res = forward(model, sample_images, collect_telemetry=True)
        for layer, tel in zip(model.mvm_layers, res.telemetry):
            scale = float(np.percentile(np.abs(tel.i_plus - tel.i_minus), percentile))
            if scale <= 0.0:
                raise DomainError(
                    f"{layer.name}: zero differential current; cannot calibrate gain"
                )
            layer.dta = replace(
                layer.dta, gain_v_per_a=u_target * layer.dta.v_max_volts / scale
            )
    return model


def lenet5_specs() -> list[LayerSpec]:
    return [
        Conv2d(6, 5, padding=2),
        AvgPool(2),
        Conv2d(16, 5),
        AvgPool(2),
        FullyConnected(120),
        FullyConnected(84),
        FullyConnected(10),
    ]


def lenet5_preset(
    device_kind: DeviceKind,
    device_params,
    converter: ConverterSpec | None = None,
    seed: int = 42,
    dtype: type = np.float64,
) -> NetworkModel:
    """LeNet-5 on 28x28 inputs (first conv pads to 32x32)."""
    return build_network(
        lenet5_specs(),
        input_shape=(1, 28, 28),
        device_kind=device_kind,
        device_params=device_params,
        converter=converter,
        seed=seed,
        dtype=dtype,
    )