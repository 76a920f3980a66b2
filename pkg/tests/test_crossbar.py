import math

import numpy as np
import pytest

from cimsim import autodiff as ad
from cimsim.crossbar import (
    CrossbarTile,
    DtaSpec,
    colsums,
    default_gain,
    device_pair_current,
    dta_limit,
    dta_output,
    fg_colsum_node,
    fg_colsums,
    fg_dta_spec,
    reram_colsums,
    reram_dta_spec,
    select_line_current,
    tile_forward,
)
from cimsim.devices import DeviceKind
from cimsim.exceptions import DomainError, ShapeError

RNG = np.random.default_rng(21)


def make_tile(kind, params, rows=4, cols=3, v_select=None):
    if kind is DeviceKind.RERAM:
        lo, hi = params.g_min_nm, params.g_max_nm
        dta = reram_dta_spec() if v_select is None else reram_dta_spec(v_select)
    else:
        lo, hi = params.v_fg0_min_volts, params.v_fg0_max_volts
        dta = fg_dta_spec() if v_select is None else fg_dta_spec(v_select)
    sp = RNG.uniform(lo, hi, (rows, cols))
    sm = RNG.uniform(lo, hi, (rows, cols))
    return CrossbarTile(kind, sp, sm, params, dta)


class TestDtaSpec:
    def test_default_gain_maps_imax_to_80pct(self):
        dta = reram_dta_spec()
        u = dta.gain_v_per_a * dta.i_max_amps / dta.v_max_volts
        assert math.tanh(u) == pytest.approx(0.8, abs=1e-12)

    def test_device_defaults(self):
        r, f = reram_dta_spec(), fg_dta_spec()
        assert (r.i_max_amps, r.v_max_volts, r.v_select_volts) == (0.1e-3, 0.5, 0.0)
        assert (f.i_max_amps, f.v_max_volts, f.v_select_volts) == (1.0e-3, 0.6, 0.2)

    def test_invalid(self):
        with pytest.raises(DomainError):
            DtaSpec(i_max_amps=-1, v_max_volts=0.5, gain_v_per_a=1e4)


class TestTileValidation:
    def test_state_bounds_checked(self, reram_params):
        good = np.full((2, 2), 1.0)
        bad = np.full((2, 2), 99.0)
        with pytest.raises(DomainError):
            CrossbarTile(DeviceKind.RERAM, bad, good, reram_params, reram_dta_spec())

    def test_polarity_shapes_must_match(self, reram_params):
        with pytest.raises(ShapeError):
            CrossbarTile(DeviceKind.RERAM, np.ones((2, 2)), np.ones((2, 3)),
                         reram_params, reram_dta_spec())


class TestColumnSums:
    def test_reram_matches_brute_force(self, reram_params):
        tile = make_tile(DeviceKind.RERAM, reram_params)
        v = RNG.uniform(0.2, 0.6, tile.rows)
        ip, im = colsums(tile, v)
        for c in range(tile.cols):
            exp_p = sum(device_pair_current(v[r], tile.states_plus[r, c],
                                            tile.states_minus[r, c], tile)[0]
                        for r in range(tile.rows))
            assert ip[0, c] == pytest.approx(exp_p, rel=1e-12)
            assert select_line_current(tile, v, "plus", c) == pytest.approx(exp_p, rel=1e-12)

    def test_fg_matches_brute_force(self, fg_params):
        tile = make_tile(DeviceKind.FG, fg_params)
        v = RNG.uniform(0.2, 0.6, tile.rows)
        ip, im = colsums(tile, v)
        for c in range(tile.cols):
            exp_m = sum(device_pair_current(v[r], tile.states_plus[r, c],
                                            tile.states_minus[r, c], tile)[1]
                        for r in range(tile.rows))
            assert im[0, c] == pytest.approx(exp_m, rel=1e-10)

    def test_batched_engines_match_tile(self, reram_params, fg_params):
        v = RNG.uniform(0.2, 0.6, (6, 4))
        t_r = make_tile(DeviceKind.RERAM, reram_params)
        np.testing.assert_allclose(
            reram_colsums(v, t_r.states_plus, reram_params, t_r.dta),
            colsums(t_r, v)[0], rtol=1e-14)
        t_f = make_tile(DeviceKind.FG, fg_params)
        np.testing.assert_allclose(
            fg_colsums(v, t_f.states_minus, fg_params, t_f.dta),
            colsums(t_f, v)[1], rtol=1e-12)

    def test_shape_errors(self, reram_params):
        tile = make_tile(DeviceKind.RERAM, reram_params)
        with pytest.raises(ShapeError):
            colsums(tile, np.ones(tile.rows + 1))
        with pytest.raises(ShapeError):
            select_line_current(tile, np.ones(tile.rows), "plus", 99)
        with pytest.raises(DomainError):
            select_line_current(tile, np.ones(tile.rows), "sideways", 0)


class TestDtaTransfer:
    def test_limit_bounds(self):
        i = np.linspace(-5e-3, 5e-3, 1001)
        out = dta_limit(i, 1e-4)
        assert np.all(np.abs(out) <= 1e-4)
        # near-linear for small currents
        assert dta_limit(1e-6, 1e-4) == pytest.approx(1e-6, rel=1e-3)

    def test_limit_rejects_bad_imax(self):
        with pytest.raises(DomainError):
            dta_limit(1e-6, 0.0)

    def test_output_clips_negative_differential(self):
        dta = reram_dta_spec()
        assert dta_output(1e-5, 2e-5, dta) == 0.0

    def test_output_below_vmax(self):
        dta = reram_dta_spec()
        assert 0.0 < dta_output(2e-4, 0.0, dta) < dta.v_max_volts

    def test_output_formula(self):
        dta = DtaSpec(i_max_amps=1e-4, v_max_volts=0.5, gain_v_per_a=5000.0)
        ip, im = 3e-5, 1e-5
        expect = 0.5 * math.tanh(5000.0 * (ip - im) / 0.5)
        assert dta_output(ip, im, dta) == pytest.approx(expect, rel=1e-12)


class TestTileForward:
    def test_composition(self, reram_params):
        tile = make_tile(DeviceKind.RERAM, reram_params)
        v = RNG.uniform(0.2, 0.6, tile.rows)
        res = tile_forward(tile, v)
        ip, im = colsums(tile, v)
        lim_p = dta_limit(ip[0], tile.dta.i_max_amps)
        lim_m = dta_limit(im[0], tile.dta.i_max_amps)
        np.testing.assert_allclose(res.i_dta_plus, lim_p, rtol=1e-14)
        np.testing.assert_allclose(res.v_out, dta_output(lim_p, lim_m, tile.dta),
                                   rtol=1e-14)

    def test_batch_matches_single(self, fg_params):
        tile = make_tile(DeviceKind.FG, fg_params)
        v = RNG.uniform(0.2, 0.6, (3, tile.rows))
        batched = tile_forward(tile, v)
        for i in range(3):
            single = tile_forward(tile, v[i])
            np.testing.assert_allclose(batched.v_out[i], single.v_out, rtol=1e-12)


class TestFgColsumPrimitive:
    def test_vjp_matches_finite_differences(self, fg_params):
        dta = fg_dta_spec()
        rows, cols, batch = 3, 2, 2
        vfg0 = RNG.uniform(fg_params.v_fg0_min_volts, fg_params.v_fg0_max_volts,
                           (rows, cols))
        v_in = RNG.uniform(0.2, 0.6, (batch, rows))
        seed = RNG.uniform(0.5, 1.5, (batch, cols))

        tape = ad.Tape()
        v_n = ad.parameter(tape, v_in)
        s_n = ad.parameter(tape, vfg0)
        out = fg_colsum_node(v_n, s_n, fg_params, dta, 0.0, need_grad=True)
        loss = ad.sum_along(out * ad.constant(tape, seed), None)
        grads = ad.backward(tape, loss)

        h = 1e-7
        for arr, node in ((v_in, v_n), (vfg0, s_n)):
            got = grads[node.node]
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                ap = arr.copy(); ap[idx] += h
                am = arr.copy(); am[idx] -= h
                def val(a):
                    v, s = (a, vfg0) if arr is v_in else (v_in, a)
                    return float((fg_colsums(v, s, fg_params, dta) * seed).sum())
                fd = (val(ap) - val(am)) / (2 * h)
                assert got[idx] == pytest.approx(fd, rel=1e-4, abs=1e-15)
                it.iternext()

    def test_backward_without_cache_rejected(self, fg_params):
        tape = ad.Tape()
        v_n = ad.parameter(tape, RNG.uniform(0.2, 0.6, (1, 2)))
        s_n = ad.parameter(tape, np.full((2, 2), 1.4))
        out = fg_colsum_node(v_n, s_n, fg_params, fg_dta_spec(), need_grad=False)
        with pytest.raises(ShapeError):
            ad.backward(tape, ad.sum_along(out, None))


def test_default_gain_formula():
    assert default_gain(0.5, 1e-4) == pytest.approx(math.atanh(0.8) * 0.5 / 1e-4)
