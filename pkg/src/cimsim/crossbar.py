"""Differential crossbar tile: bit-line drive, KCL column sums, DTA limiting.

One tile holds an R x C matrix of device pairs.  ``tile_forward`` is the
reference composition (pair currents -> column sums -> per-polarity current
limit -> differential gain -> relu -> output tanh).  The batched column-sum
engines below are exactly the same law evaluated over many input rows at
once; the fused FG kernel is also registered as a tape primitive so training
can differentiate through it without materializing per-device graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .devices import (
    DeviceKind,
    FgParams,
    ReRamParams,
    fg_current,
    fg_floating_voltage,
    reram_current,
)
from .exceptions import DomainError, ShapeError
from .numerics import ln1pexp, sigmoid

#: fraction of V_max a full-scale differential current maps to with the
#: default transimpedance gain
_DEFAULT_GAIN_FILL = 0.8


def default_gain(v_max_volts: float, i_max_amps: float) -> float:
    """Gain mapping a +/-I_max differential to ~80% of the output swing."""
    return math.atanh(_DEFAULT_GAIN_FILL) * v_max_volts / i_max_amps


@dataclass(frozen=True)
class DtaSpec:
    """Differential transimpedance amplifier limits and gain."""

    i_max_amps: float
    v_max_volts: float
    gain_v_per_a: float
    v_select_volts: float = 0.0

    def __post_init__(self):
        if self.i_max_amps <= 0 or self.v_max_volts <= 0 or self.gain_v_per_a <= 0:
            raise DomainError("i_max, v_max and gain must all be positive")


def reram_dta_spec(v_select_volts: float = 0.0) -> DtaSpec:
    i_max, v_max = 0.1e-3, 0.5
    return DtaSpec(i_max, v_max, default_gain(v_max, i_max), v_select_volts)


def fg_dta_spec(v_select_volts: float = 0.2) -> DtaSpec:
    i_max, v_max = 1.0e-3, 0.6
    return DtaSpec(i_max, v_max, default_gain(v_max, i_max), v_select_volts)


@dataclass
class CrossbarTile:
    """State matrices for both polarities plus device and DTA parameters.

    ``states_plus``/``states_minus`` hold raw state values: gaps in nm for
    ReRAM, floating-node voltages in V for FG.
    """

    kind: DeviceKind
    states_plus: np.ndarray
    states_minus: np.ndarray
    params: ReRamParams | FgParams
    dta: DtaSpec
    v_tun_volts: float = 0.0  # FG tunneling terminal, held constant in inference

    def __post_init__(self):
        sp = np.atleast_2d(np.asarray(self.states_plus, dtype=float))
        sm = np.atleast_2d(np.asarray(self.states_minus, dtype=float))
        if sp.shape != sm.shape:
            raise ShapeError(f"polarity matrices differ: {sp.shape} vs {sm.shape}")
        self.states_plus = sp
        self.states_minus = sm
        lo, hi = self.state_bounds
        for name, s in (("states_plus", sp), ("states_minus", sm)):
            if np.any(s < lo) or np.any(s > hi):
                raise DomainError(f"{name} outside device bounds [{lo}, {hi}]")

    @property
    def rows(self) -> int:
        return self.states_plus.shape[0]

    @property
    def cols(self) -> int:
        return self.states_plus.shape[1]

    @property
    def state_bounds(self) -> tuple[float, float]:
        if self.kind is DeviceKind.RERAM:
            return self.params.g_min_nm, self.params.g_max_nm
        return self.params.v_fg0_min_volts, self.params.v_fg0_max_volts


def _device_current(v_in, state, tile: CrossbarTile):
    if tile.kind is DeviceKind.RERAM:
        return reram_current(state, np.asarray(v_in) - tile.dta.v_select_volts, tile.params)
    v_fg = fg_floating_voltage(
        state,
        v_in,
        v_d=tile.dta.v_select_volts,
        v_s=tile.params.v_dd_volts,
        v_tun=tile.v_tun_volts,
        p=tile.params,
    )
    return fg_current(v_fg, tile.dta.v_select_volts, tile.params)


def device_pair_current(v_in: float, s_plus: float, s_minus: float, tile: CrossbarTile):
    """Currents of one differential pair driven at bit-line voltage ``v_in``."""
    return (
        _device_current(v_in, s_plus, tile),
        _device_current(v_in, s_minus, tile),
    )


# ---------------------------------------------------------------------------
# batched column-sum engines (the same laws, evaluated for P input rows)


def reram_colsums(v_in: np.ndarray, gaps: np.ndarray, p: ReRamParams, dta: DtaSpec):
    """Select-line currents (P, C) for inputs (P, R) and a gap matrix (R, C).

    The law factorizes: I0*exp(-g/g0) depends only on state, sinh(V/V0) only
    on the drive, so the KCL sum is a matmul.
    """
    drive = np.sinh((v_in - dta.v_select_volts) / p.v0_volts)
    weights = p.i0_amps * np.exp(-gaps / p.g0_nm)
    return drive @ weights


def _fg_reduction(p: FgParams, dta: DtaSpec, v_tun: float):
    """Constants reducing the FG law to i_th*(sp(b - q*v)^2 - sp(b - q*v - d)^2)."""
    q = p.kappa / (2.0 * p.u_t_volts)
    v_fg_const = (
        p.c_gdo_ratio * dta.v_select_volts
        + p.c_gso_ratio * p.v_dd_volts
        + p.c_tun_ratio * v_tun
    )
    drop = p.v_dd_volts - dta.v_select_volts
    base0 = q * (p.v_dd_volts - p.v_tp_volts - v_fg_const) + p.sigma * drop / (2.0 * p.u_t_volts)
    delta = drop / (2.0 * p.u_t_volts)
    return q, base0, delta


_FG_CHUNK = 512


def fg_colsums(
    v_in: np.ndarray,
    vfg0: np.ndarray,
    p: FgParams,
    dta: DtaSpec,
    v_tun: float = 0.0,
    want_grad_cache: bool = False,
):
    """Select-line currents (P, C) for inputs (P, R) and a V_FG0 matrix (R, C).

    Evaluated chunked over input rows in the dtype of ``v_in``.  With
    ``want_grad_cache`` the per-device derivative d(current)/d(exponent)
    is kept for the backward pass.
    """
    dtype = v_in.dtype if v_in.dtype in (np.float32, np.float64) else np.float64
    q, base0, delta = _fg_reduction(p, dta, v_tun)
    # exponent x1[p,r,c] = base[r,c] - gv[p,r], with both ln1pexp args derived
    base = np.asarray(base0 - q * vfg0, dtype=dtype)
    gv = np.asarray(q * p.c_in_ratio * v_in, dtype=dtype)
    delta = dtype.type(delta) if hasattr(dtype, "type") else np.dtype(dtype).type(delta)
    i_th = np.dtype(dtype).type(p.i_th_pmos_amps)
    n, r = gv.shape
    c = base.shape[1]
    out = np.empty((n, c), dtype=dtype)
    dcache = np.empty((n, r, c), dtype=dtype) if want_grad_cache else None
    for i in range(0, n, _FG_CHUNK):
        x1 = base[None, :, :] - gv[i: i + _FG_CHUNK, :, None]
        x2 = x1 - delta
        l1 = ln1pexp(x1)
        l2 = ln1pexp(x2)
        if want_grad_cache:
            d = l1 * sigmoid(x1) - l2 * sigmoid(x2)
            d *= 2.0 * i_th
            dcache[i: i + _FG_CHUNK] = d
        np.square(l1, out=l1)
        np.square(l2, out=l2)
        l1 -= l2
        out[i: i + _FG_CHUNK] = l1.sum(axis=1)
    out *= i_th
    return (out, dcache) if want_grad_cache else out


def _fg_colsum_fwd(values, ctx):
    v_in, vfg0 = values
    p, dta, v_tun, need_grad, cache = ctx
    if need_grad:
        out, d = fg_colsums(v_in, vfg0, p, dta, v_tun, want_grad_cache=True)
        cache.append(d)
        return out
    return fg_colsums(v_in, vfg0, p, dta, v_tun)


def _fg_colsum_vjp(g, values, out, ctx):
    v_in, vfg0 = values
    p, dta, v_tun, need_grad, cache = ctx
    if not cache:
        raise ShapeError("fg_colsum recorded without need_grad; cannot backpropagate")
    d = cache[0]
    q, _, _ = _fg_reduction(p, dta, v_tun)
    # x = base - q*c_in*v - q*vfg0 terms: d(x)/d(vfg0) = -q, d(x)/d(v_in) = -q*c_in
    g_vfg0 = -q * np.einsum("prc,pc->rc", d, g)
    g_vin = -q * p.c_in_ratio * np.einsum("prc,pc->pr", d, g)
    return g_vin.astype(v_in.dtype, copy=False), g_vfg0.astype(vfg0.dtype, copy=False)


ad.register_op("fg_colsum", _fg_colsum_fwd, _fg_colsum_vjp)


def fg_colsum_node(v_in: ad.DualValue, vfg0: ad.DualValue, p: FgParams, dta: DtaSpec,
                   v_tun: float = 0.0, need_grad: bool = True) -> ad.DualValue:
    """Tape primitive wrapping :func:`fg_colsums` with its analytic vjp."""
    return ad.record("fg_colsum", v_in, vfg0, ctx=(p, dta, v_tun, need_grad, []))


def colsums(tile: CrossbarTile, v_in: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unlimited select-line currents (P, C) for both polarities."""
    v_in = np.atleast_2d(np.asarray(v_in, dtype=float))
    if v_in.shape[1] != tile.rows:
        raise ShapeError(f"expected {tile.rows} input voltages, got {v_in.shape[1]}")
    if tile.kind is DeviceKind.RERAM:
        drive = np.sinh((v_in - tile.dta.v_select_volts) / tile.params.v0_volts)
        scale = tile.params.i0_amps
        wp = scale * np.exp(-tile.states_plus / tile.params.g0_nm)
        wm = scale * np.exp(-tile.states_minus / tile.params.g0_nm)
        return drive @ wp, drive @ wm
    return (
        fg_colsums(v_in, tile.states_plus, tile.params, tile.dta, tile.v_tun_volts),
        fg_colsums(v_in, tile.states_minus, tile.params, tile.dta, tile.v_tun_volts),
    )


def select_line_current(tile: CrossbarTile, v_in: np.ndarray, polarity: str, col: int) -> float:
    """KCL sum of the chosen-polarity device currents into column ``col``."""
    if polarity not in ("plus", "minus"):
        raise DomainError(f"polarity must be 'plus' or 'minus', got {polarity!r}")
    v_in = np.asarray(v_in, dtype=float)
    if v_in.ndim != 1 or v_in.size != tile.rows:
        raise ShapeError(f"expected {tile.rows} input voltages, got shape {v_in.shape}")
    if not 0 <= col < tile.cols:
        raise ShapeError(f"column {col} outside [0, {tile.cols})")
    ip, im = colsums(tile, v_in)
    return float((ip if polarity == "plus" else im)[0, col])


def dta_limit(i_sl, i_max_amps: float):
    """Soft current limit I_max * tanh(I_sl / I_max)."""
    if i_max_amps <= 0:
        raise DomainError("i_max must be positive")
    out = i_max_amps * np.tanh(np.asarray(i_sl) / i_max_amps)
    return float(out) if out.ndim == 0 else out


def dta_output(i_plus, i_minus, dta: DtaSpec):
    """Pre-ADC voltage: V_max * tanh(relu(G * (I+ - I-) / V_max)).

    Expects currents already passed through :func:`dta_limit`.  Doubles as
    the network activation; negative differentials clip to 0 V.
    """
    u = dta.gain_v_per_a * (np.asarray(i_plus) - np.asarray(i_minus)) / dta.v_max_volts
    out = dta.v_max_volts * np.tanh(np.maximum(u, 0))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TileForwardResult:
    v_out: np.ndarray
    i_dta_plus: np.ndarray
    i_dta_minus: np.ndarray


def tile_forward(tile: CrossbarTile, v_in: np.ndarray) -> TileForwardResult:
    """Full tile MVM for one input vector (or a (P, R) batch of vectors)."""
    v = np.asarray(v_in, dtype=float)
    squeeze = v.ndim == 1
    ip, im = colsums(tile, v)
    ip = dta_limit(ip, tile.dta.i_max_amps)
    im = dta_limit(im, tile.dta.i_max_amps)
    v_out = dta_output(ip, im, tile.dta)
    if squeeze:
        return TileForwardResult(v_out[0], ip[0], im[0])
    return TileForwardResult(v_out, ip, im)