import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htgquant.quantizer import (
    DELTA_FLOOR,
    PerChannelParams,
    QuantParams,
    UniformQuantizer,
    dequantize,
    error_metrics,
    error_report,
    fake_quant,
    fit_params,
    fit_weight_per_channel,
    quantize,
    quantize_per_channel,
)


# pure-Python reference, written independently of numpy's rounding/clipping
def ref_fit(values, bits):
    lo, hi = min(values), max(values)
    qmax = 2**bits - 1
    if lo == hi:
        return DELTA_FLOOR, 0
    delta = (hi - lo) / qmax
    return delta, min(max(round(-lo / delta), 0), qmax)


def ref_quantize(x, delta, lam, bits):
    return min(max(round(x / delta) + lam, 0), 2**bits - 1)


finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


class TestFitParams:
    def test_zero_to_255(self):
        p = fit_params(np.array([[0.0, 255.0], [17.0, 3.0]]), 8)
        assert p.delta == 1.0
        assert p.zero_offset == 0

    def test_symmetric_range_rounds_half_to_even(self):
        p = fit_params(np.array([[-1.0, 1.0]]), 8)
        assert p.delta == pytest.approx(2 / 255)
        # -(-1)/(2/255) = 127.5 -> 128 under half-to-even
        assert p.zero_offset == 128

    def test_constant_tensor(self):
        p = fit_params(np.full((3, 4), 3.0), 4)
        assert p.delta == DELTA_FLOOR
        assert p.zero_offset == 0
        # the clamp saturates at 15 codes of 1e-8, so the round trip loses almost everything
        back = fake_quant(np.array([3.0]), p)
        assert back[0] == pytest.approx(15 * DELTA_FLOOR)
        assert abs(back[0] - 3.0) <= 3.0

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(ValueError):
            fit_params(np.array([[0.0, bad]]), 8)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_params(np.zeros((0, 3)), 8)

    @pytest.mark.parametrize("bits", [1, 17])
    def test_bits_range(self, bits):
        with pytest.raises(ValueError):
            fit_params(np.array([[0.0, 1.0]]), bits)

    def test_clip_quantile_narrows_range(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1000, 1))
        x[0, 0] = 50.0
        full = fit_params(x, 8)
        clipped = fit_params(x, 8, clip_quantile=0.99)
        assert clipped.delta < full.delta / 5

    @given(st.lists(finite, min_size=1, max_size=40), st.integers(2, 16))
    def test_matches_reference(self, values, bits):
        p = fit_params(np.array(values)[:, None], bits)
        delta, lam = ref_fit(values, bits)
        assert p.delta == delta
        assert p.zero_offset == lam


class TestQuantizeDequantize:
    def test_examples(self):
        p = QuantParams(0.1, 128, 8)
        assert quantize(0.0, p) == 128
        assert quantize(1000.0, p) == 255
        assert dequantize(np.array([128]), p)[0] == 0.0
        assert dequantize(np.array([3]), QuantParams(0.5, 2, 4))[0] == 0.5

    @pytest.mark.parametrize("bits", [2, 4, 8, 12])
    def test_grid_enumeration(self, bits):
        p = QuantParams(0.037, 2 ** (bits - 1) - 1, bits)
        k = np.arange(2**bits)
        g = (k - p.zero_offset) * p.delta
        np.testing.assert_array_equal(quantize(g, p), k)
        np.testing.assert_array_equal(dequantize(k, p), g)
        np.testing.assert_array_equal(fake_quant(p.grid(), p), p.grid())

    def test_out_of_range_codes(self):
        p = QuantParams(1.0, 0, 4)
        with pytest.raises(ValueError):
            dequantize(np.array([16]), p)
        with pytest.raises(ValueError):
            dequantize(np.array([-1]), p)

    @pytest.mark.parametrize("kw", [dict(delta=0.0), dict(delta=-1.0), dict(zero_offset=256), dict(zero_offset=-1)])
    def test_invalid_params(self, kw):
        args = dict(delta=1.0, zero_offset=0, bits=8) | kw
        with pytest.raises(ValueError):
            QuantParams(**args)

    @given(st.lists(finite, min_size=1, max_size=50), st.floats(1e-3, 10.0), st.integers(2, 12), st.data())
    def test_quantize_matches_reference(self, xs, delta, bits, data):
        lam = data.draw(st.integers(0, 2**bits - 1))
        p = QuantParams(delta, lam, bits)
        got = quantize(np.array(xs), p)
        assert got.tolist() == [ref_quantize(x, delta, lam, bits) for x in xs]

    @given(st.lists(finite, min_size=2, max_size=60), st.integers(2, 10))
    def test_fake_quant_is_composition_and_bounded(self, xs, bits):
        x = np.array(xs)
        p = fit_params(x[:, None], bits)
        fq = fake_quant(x, p)
        np.testing.assert_array_equal(fq, dequantize(quantize(x, p), p))
        lo, hi = p.grid()[0], p.grid()[-1]
        inside = (x >= lo) & (x <= hi)
        slack = 1e-9 * max(1.0, np.abs(x).max())
        assert np.all(np.abs(fq - x)[inside] <= p.delta / 2 + slack)

    @given(st.lists(finite, min_size=2, max_size=60), st.floats(1e-3, 5.0), st.integers(2, 10))
    def test_monotone_and_saturating(self, xs, delta, bits):
        x = np.sort(np.array(xs))
        p = QuantParams(delta, 2 ** (bits - 1), bits)
        q = quantize(x, p)
        assert np.all(np.diff(q) >= 0)
        assert q.min() >= 0 and q.max() <= p.qmax


class TestPerChannel:
    def test_independent_columns(self):
        w = np.array([[0.0, 0.0], [1.0, 255.0], [0.5, 100.0]])
        pc = fit_weight_per_channel(w, 8)
        assert pc.deltas.tolist() == [1 / 255, 1.0]
        assert len(pc) == 2

    def test_identical_columns(self):
        col = np.random.default_rng(1).normal(size=7)
        pc = fit_weight_per_channel(np.stack([col, col], axis=1), 4)
        assert pc.params[0] == pc.params[1]

    def test_column_loop_oracle(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(16, 9)) * rng.uniform(0.1, 10, size=9)
        pc = fit_weight_per_channel(w, 4)
        q = quantize_per_channel(w, pc)
        for j in range(w.shape[1]):
            p = fit_params(w[:, j : j + 1], 4)
            assert pc.params[j] == p
            np.testing.assert_array_equal(q[:, j], quantize(w[:, j], p))

    def test_shape_mismatch(self):
        pc = fit_weight_per_channel(np.ones((3, 2)), 8)
        with pytest.raises(ValueError):
            quantize_per_channel(np.ones((3, 4)), pc)


class TestErrorReport:
    def test_grid_aligned_is_exact(self):
        p = QuantParams(0.25, 4, 4)
        rep = error_report(p.grid()[None, :], p)
        assert rep.mse == 0.0
        assert rep.sqnr_db == math.inf

    def test_half_step(self):
        p = QuantParams(0.5, 0, 8)
        rep = error_report(np.array([[0.0, 0.25]]), p)
        assert rep.max_abs_err == 0.25

    def test_formula_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(20, 6))
        p = fit_params(x, 4)
        rep = error_report(x, p)
        fq = fake_quant(x, p)
        err = [(a - b) ** 2 for a, b in zip(x.ravel().tolist(), fq.ravel().tolist())]
        sig = sum(a * a for a in x.ravel().tolist())
        assert rep.mse == pytest.approx(sum(err) / len(err), rel=1e-12)
        assert rep.sqnr_db == pytest.approx(10 * math.log10(sig / sum(err)), rel=1e-12)
        assert rep.max_abs_err == pytest.approx(max(abs(a - b) for a, b in zip(x.ravel(), fq.ravel())))

    def test_zero_signal(self):
        assert error_metrics(np.zeros(3), np.ones(3)).sqnr_db == -math.inf


class TestUniformQuantizerEstimator:
    def test_tensor_roundtrip_is_fake_quant(self):
        x = np.random.default_rng(4).normal(size=(30, 5))
        est = UniformQuantizer(bits=6).fit(x)
        codes = est.transform(x)
        np.testing.assert_array_equal(est.inverse_transform(codes), fake_quant(x, est.params_))
        assert est.get_params() == {"bits": 6, "granularity": "tensor", "clip_quantile": 1.0}

    def test_channel(self):
        w = np.random.default_rng(5).normal(size=(12, 4))
        est = UniformQuantizer(bits=4, granularity="channel").fit(w)
        assert isinstance(est.params_, PerChannelParams)
        assert est.fit_transform(w).max() <= 15

    def test_unfitted_and_bad_shape(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            UniformQuantizer().transform(np.ones((2, 2)))
        est = UniformQuantizer().fit(np.ones((2, 3)))
        with pytest.raises(ValueError):
            est.transform(np.ones((2, 4)))


@settings(max_examples=50)
@given(st.integers(2, 16))
def test_qmax(bits):
    assert QuantParams(1.0, 0, bits).qmax == 2**bits - 1
