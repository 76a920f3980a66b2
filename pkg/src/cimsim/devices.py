"""Analog non-volatile device models: ReRAM filament-gap and floating-gate synapse.

Both device laws are pure functions of (state, terminal voltages, calibration
parameters).  The trainable state is the filament gap in nm for ReRAM and the
stored floating-node voltage in V for the FG transistor; abstract weights in
[-1, 1] map affinely onto those states (larger weight -> larger current).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import DomainError, FitError
from .fitting import levenberg_marquardt
from .numerics import ln1pexp, sigmoid


@dataclass(frozen=True)
class ReRamParams:
    """Calibration constants for the ReRAM current law I0*exp(-g/g0)*sinh(V/V0)."""

    i0_amps: float
    g0_nm: float
    v0_volts: float
    g_min_nm: float = 0.1
    g_max_nm: float = 1.7

    def __post_init__(self):
        if not (self.i0_amps > 0 and self.g0_nm > 0 and self.v0_volts > 0):
            raise DomainError("i0_amps, g0_nm and v0_volts must all be positive")
        if not (0 < self.g_min_nm < self.g_max_nm):
            raise DomainError(
                f"gap bounds must satisfy 0 < g_min < g_max, got "
                f"[{self.g_min_nm}, {self.g_max_nm}] nm"
            )


@dataclass(frozen=True)
class FgParams:
    """Calibration constants for the subthreshold-to-inversion PMOS FG synapse.

    The capacitive divider ratios are the composite couplings C_x/C_T; only
    those composites are observable, so the proportionality of the
    floating-node relation is folded into them and treated as equality.
    delta_vth_inject_volts / delta_vth_tunnel_volts record the measured
    per-pulse programming steps as metadata; programming itself is modeled
    as direct state writes.
    """

    i_th_pmos_amps: float
    kappa: float
    sigma: float
    u_t_volts: float
    v_tp_volts: float
    v_dd_volts: float
    c_in_ratio: float
    c_gdo_ratio: float
    c_gso_ratio: float
    c_tun_ratio: float
    v_fg0_min_volts: float
    v_fg0_max_volts: float
    delta_vth_inject_volts: float = 0.04234
    delta_vth_tunnel_volts: float = 0.02206

    def __post_init__(self):
        if self.i_th_pmos_amps <= 0:
            raise DomainError("i_th_pmos_amps must be positive")
        if not 0 < self.kappa <= 1:
            raise DomainError(f"kappa must be in (0, 1], got {self.kappa}")
        if self.u_t_volts <= 0:
            raise DomainError("u_t_volts must be positive")
        ratios = (self.c_in_ratio, self.c_gdo_ratio, self.c_gso_ratio, self.c_tun_ratio)
        if any(not 0 < r < 1 for r in ratios):
            raise DomainError(f"capacitance ratios must each lie in (0, 1), got {ratios}")
        if sum(ratios) > 1:
            raise DomainError(f"capacitance ratios sum to {sum(ratios)} > 1")
        if not self.v_fg0_min_volts < self.v_fg0_max_volts:
            raise DomainError("v_fg0_min_volts must be below v_fg0_max_volts")


class DeviceKind(enum.Enum):
    RERAM = "reram"
    FG = "fg"


class StateKind(enum.Enum):
    RERAM_GAP = "reram_gap"
    FG_FLOATING_VOLTAGE = "fg_floating_voltage"


@dataclass(frozen=True)
class DeviceState:
    """One programmed device: a gap in nm (ReRAM) or a V_FG0 in volts (FG)."""

    kind: StateKind
    value: float


@dataclass(frozen=True)
class MeasurementSweep:
    """One measured I-V sweep at a fixed programmed state.

    ``label`` carries the known state for fitting: the gap in nm for ReRAM
    sweeps, or the drain voltage in V for FG sweeps (whose voltage column is
    the floating-gate voltage).
    """

    voltages: np.ndarray
    currents: np.ndarray
    label: float | None = None

    def __post_init__(self):
        v = np.asarray(self.voltages, dtype=float)
        i = np.asarray(self.currents, dtype=float)
        if v.ndim != 1 or v.shape != i.shape:
            raise DomainError("sweep voltage and current columns must be equal-length 1-D")
        if v.size >= 2 and not np.all(np.diff(v) > 0):
            raise DomainError("sweep voltages must be strictly increasing")
        object.__setattr__(self, "voltages", v)
        object.__setattr__(self, "currents", i)


def _check_gap(g, p: ReRamParams):
    g = np.asarray(g, dtype=float)
    if np.any(g < p.g_min_nm):
        raise DomainError(f"gap {float(np.min(g))} nm below g_min {p.g_min_nm} nm")
    if np.any(g > p.g_max_nm):
        raise DomainError(f"gap {float(np.max(g))} nm above g_max {p.g_max_nm} nm")
    return g


def reram_current(g, v, p: ReRamParams):
    """Current through a ReRAM device with gap ``g`` (nm) at voltage ``v`` (V).

    Accepts scalars or broadcastable arrays.
    """
    g = _check_gap(g, p)
    v = np.asarray(v, dtype=float)
    out = p.i0_amps * np.exp(-g / p.g0_nm) * np.sinh(v / p.v0_volts)
    return float(out) if out.ndim == 0 else out


def fg_floating_voltage(v_fg0, v_in, v_d, v_s, v_tun, p: FgParams):
    """Total floating-node voltage from the stored value and coupled terminals."""
    out = (
        np.asarray(v_fg0, dtype=float)
        + p.c_in_ratio * np.asarray(v_in, dtype=float)
        + p.c_gdo_ratio * v_d
        + p.c_gso_ratio * v_s
        + p.c_tun_ratio * v_tun
    )
    return float(out) if out.ndim == 0 else out


def _fg_exponents(v_fg, v_d, p: FgParams):
    """The two ln(1+e^x) arguments of the FG current law."""
    over = p.kappa * (p.v_dd_volts - np.asarray(v_fg, dtype=float) - p.v_tp_volts)
    drop = p.v_dd_volts - v_d
    a1 = (over + p.sigma * drop) / (2.0 * p.u_t_volts)
    a2 = (over - drop) / (2.0 * p.u_t_volts)
    return a1, a2


def fg_current(v_fg, v_d, p: FgParams):
    """Source-drain current of the PMOS FG synapse.

    Evaluated in the overflow-safe ln(1+e^x) form; zero when the drain sits
    at V_DD, positive below it.
    """
    a1, a2 = _fg_exponents(v_fg, v_d, p)
    l1 = ln1pexp(a1)
    l2 = ln1pexp(a2)
    out = p.i_th_pmos_amps * (l1 * l1 - l2 * l2)
    return float(out) if out.ndim == 0 else out


def fg_current_dvfg(v_fg, v_d, p: FgParams):
    """d(fg_current)/d(v_fg); used by the tape and the fitter."""
    a1, a2 = _fg_exponents(v_fg, v_d, p)
    scale = -p.kappa / (2.0 * p.u_t_volts)
    out = (
        2.0
        * p.i_th_pmos_amps
        * scale
        * (ln1pexp(a1) * sigmoid(a1) - ln1pexp(a2) * sigmoid(a2))
    )
    return float(out) if np.ndim(out) == 0 else out


def _state_bounds(kind: DeviceKind, params) -> tuple[float, float]:
    if kind is DeviceKind.RERAM:
        return params.g_min_nm, params.g_max_nm
    return params.v_fg0_min_volts, params.v_fg0_max_volts


def weight_to_state_value(w, kind: DeviceKind, params):
    """Affine weight->state map on raw values; w=+1 hits the high-current end."""
    w = np.asarray(w, dtype=float)
    if np.any(np.abs(w) > 1.0):
        raise DomainError(f"weight magnitude {float(np.max(np.abs(w)))} exceeds 1")
    lo, hi = _state_bounds(kind, params)
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    out = mid - w * half
    return float(out) if out.ndim == 0 else out


def state_value_to_weight(s, kind: DeviceKind, params):
    """Exact inverse of :func:`weight_to_state_value`."""
    s = np.asarray(s, dtype=float)
    lo, hi = _state_bounds(kind, params)
    if np.any(s < lo) or np.any(s > hi):
        raise DomainError(f"state outside physical bounds [{lo}, {hi}]")
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    out = (mid - s) / half
    return float(out) if out.ndim == 0 else out


def weight_to_state(w: float, kind: DeviceKind, params) -> DeviceState:
    value = weight_to_state_value(w, kind, params)
    state_kind = StateKind.RERAM_GAP if kind is DeviceKind.RERAM else StateKind.FG_FLOATING_VOLTAGE
    return DeviceState(state_kind, value)


def state_to_weight(state: DeviceState, params) -> float:
    kind = DeviceKind.RERAM if state.kind is StateKind.RERAM_GAP else DeviceKind.FG
    return state_value_to_weight(state.value, kind, params)


@dataclass(frozen=True)
class FitResult:
    params: object
    residual_norm: float
    iterations: int
    converged: bool
    residual_history: np.ndarray = field(repr=False, default=None)


def _flatten_sweeps(sweeps):
    if not sweeps:
        raise FitError("no measurement sweeps supplied")
    labels, volts, currents = [], [], []
    for s in sweeps:
        if s.label is None:
            raise FitError("every sweep needs a state label for fitting")
        labels.append(np.full(s.voltages.size, float(s.label)))
        volts.append(s.voltages)
        currents.append(s.currents)
    return np.concatenate(labels), np.concatenate(volts), np.concatenate(currents)


def fit_reram_params(
    sweeps: list[MeasurementSweep],
    g_min_nm: float = 0.1,
    g_max_nm: float = 1.7,
) -> FitResult:
    """Least-squares fit of (I0, g0, V0) to sweeps with known gaps.

    Sweeps carry the programmed gap (nm) in ``label``.  Positive parameters
    are fit in log space with damped least squares.
    """
    gaps, volts, currents = _flatten_sweeps(sweeps)
    if gaps.size < 3:
        raise FitError(f"need at least 3 samples, got {gaps.size}")
    if np.unique(gaps).size < 2:
        raise FitError("need sweeps at >= 2 distinct gap states")
    if np.unique(volts).size < 2:
        raise FitError("need >= 2 distinct voltages")

    # Slope of ln|I| vs g at matching voltages seeds g0; scale seeds I0.
    g0_seed = max((g_max_nm - g_min_nm) / 4.0, 1e-3)
    v0_seed = max(np.max(np.abs(volts)) / 2.0, 1e-3)
    nz = np.abs(currents) > 0
    i0_seed = np.median(
        np.abs(currents[nz]) / (np.exp(-gaps[nz] / g0_seed) * np.abs(np.sinh(volts[nz] / v0_seed)))
    ) if np.any(nz) else 1e-6

    def residuals(theta):
        i0, g0, v0 = np.exp(theta)
        return i0 * np.exp(-gaps / g0) * np.sinh(volts / v0) - currents

    theta, info = levenberg_marquardt(residuals, np.log([i0_seed, g0_seed, v0_seed]))
    i0, g0, v0 = np.exp(theta)
    params = ReRamParams(i0_amps=i0, g0_nm=g0, v0_volts=v0, g_min_nm=g_min_nm, g_max_nm=g_max_nm)
    return FitResult(params, info.residual_norm, info.iterations, info.converged,
                     info.residual_history)


def fit_fg_params(sweeps: list[MeasurementSweep], base: FgParams) -> FitResult:
    """Fit (I_th_pmos, kappa, sigma, V_TP) with U_T held at the thermal voltage.

    Sweep voltage columns are floating-gate voltages; ``label`` is the drain
    voltage of the sweep.  At least two distinct drain voltages are required,
    otherwise sigma and V_TP are not separately identifiable.  Fixed values
    (V_DD, U_T, coupling ratios, state bounds) come from ``base``.
    """
    vds, vfgs, currents = _flatten_sweeps(sweeps)
    if vds.size < 4:
        raise FitError(f"need at least 4 samples, got {vds.size}")
    if np.unique(vds).size < 2:
        raise FitError("need sweeps at >= 2 distinct drain voltages")

    def make(theta):
        log_ith, kappa, sigma, v_tp = theta
        return replace(
            base,
            i_th_pmos_amps=float(np.exp(log_ith)),
            kappa=float(np.clip(kappa, 1e-3, 1.0)),
            sigma=float(sigma),
            v_tp_volts=float(v_tp),
        )

    def residuals(theta):
        p = make(theta)
        return fg_current(vfgs, vds, p) - currents

    seed = np.array([np.log(base.i_th_pmos_amps), base.kappa, base.sigma, base.v_tp_volts])
    theta, info = levenberg_marquardt(residuals, seed)
    return FitResult(make(theta), info.residual_norm, info.iterations, info.converged,
                     info.residual_history)
