"""Normalized convolution contracts: bias behaviour, full/zero confidence,
monotonic confidence propagation, range, and gradients."""

import numpy as np
import pytest

from fusanet import nconv
from fusanet import tensor as T


def make_layer(cin=2, cout=3, k=3, seed=0):
    return nconv.NConv2d(cin, cout, k, np.random.default_rng(seed))


class TestNConvForward:
    def test_full_confidence_equals_normalized_plain_conv(self):
        rng = np.random.default_rng(1)
        layer = make_layer()
        x = T.Tensor(rng.standard_normal((1, 2, 8, 8)))
        c = T.Tensor(np.ones((1, 1, 8, 8)))
        y, c2 = nconv.nconv_forward(x, c, layer)

        w = layer.effective_weight().data
        b = layer.bias.data
        plain = T.conv2d(x, T.Tensor(w), padding=layer.padding).data
        expect = plain / w.sum(axis=(1, 2, 3))[None, :, None, None] + b[None, :, None, None]
        # interior only: zero padding shrinks the confidence denominator at borders
        np.testing.assert_allclose(y.data[:, :, 1:-1, 1:-1], expect[:, :, 1:-1, 1:-1],
                                   atol=1e-10)

    def test_zero_confidence_yields_bias(self):
        rng = np.random.default_rng(2)
        layer = make_layer()
        layer.bias.data[:] = [0.5, -1.0, 2.0]
        x = T.Tensor(rng.standard_normal((1, 2, 6, 6)))
        c = T.Tensor(np.zeros((1, 1, 6, 6)))
        y, c2 = nconv.nconv_forward(x, c, layer)
        for co, bias in enumerate([0.5, -1.0, 2.0]):
            np.testing.assert_allclose(y.data[0, co], bias, atol=1e-12)
        np.testing.assert_array_equal(c2.data, 0.0)

    def test_single_observed_pixel_spreads_its_value(self):
        layer = make_layer(cin=1, cout=1, k=3, seed=3)
        layer.bias.data[:] = 0.0
        x = np.zeros((1, 1, 7, 7))
        x[0, 0, 3, 3] = 4.2
        c = np.zeros((1, 1, 7, 7))
        c[0, 0, 3, 3] = 1.0
        y, c2 = nconv.nconv_forward(T.Tensor(x), T.Tensor(c), layer)
        support = y.data[0, 0, 2:5, 2:5]
        np.testing.assert_allclose(support, 4.2, atol=1e-9)
        outside = y.data[0, 0, 0, 0]
        assert outside == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch_errors(self):
        layer = make_layer()
        with pytest.raises(ValueError, match="aligned"):
            nconv.nconv_forward(T.Tensor(np.zeros((1, 2, 6, 6))),
                                T.Tensor(np.zeros((1, 1, 5, 5))), layer)

    def test_effective_weights_strictly_positive(self):
        layer = make_layer(seed=4)
        layer.raw_weight.data[:] = -30.0  # softplus keeps this positive
        assert layer.effective_weight().data.min() > 0


class TestConfidencePropagation:
    def test_range_always_unit_interval(self):
        rng = np.random.default_rng(5)
        layer = make_layer(seed=5)
        for _ in range(10):
            c = T.Tensor(rng.uniform(size=(1, 1, 8, 8)))
            x = T.Tensor(rng.standard_normal((1, 2, 8, 8)) * 10)
            _, c2 = nconv.nconv_forward(x, c, layer)
            assert c2.data.min() >= 0.0 and c2.data.max() <= 1.0

    def test_monotone_in_each_confidence_pixel(self):
        rng = np.random.default_rng(6)
        layer = make_layer(seed=6)
        x = T.Tensor(rng.standard_normal((1, 2, 8, 8)))
        c0 = rng.uniform(0.1, 0.8, size=(1, 1, 8, 8))
        _, base = nconv.nconv_forward(x, T.Tensor(c0), layer)
        for trial in range(50):
            c1 = c0.copy()
            r, cc = rng.integers(0, 8, 2)
            c1[0, 0, r, cc] = min(1.0, c1[0, 0, r, cc] + rng.uniform(0.05, 0.2))
            _, up = nconv.nconv_forward(x, T.Tensor(c1), layer)
            assert (up.data >= base.data - 1e-12).all()

    def test_chained_layers_keep_range(self):
        rng = np.random.default_rng(7)
        l1 = make_layer(cin=1, cout=4, seed=8)
        l2 = make_layer(cin=4, cout=2, seed=9)
        x = T.Tensor(rng.standard_normal((1, 1, 8, 8)))
        c = T.Tensor((rng.uniform(size=(1, 1, 8, 8)) > 0.7).astype(float))
        y, c1 = nconv.nconv_forward(x, c, l1)
        _, c2 = nconv.nconv_forward(y, c1, l2)
        for cm in (c1, c2):
            assert cm.data.min() >= 0.0 and cm.data.max() <= 1.0


class TestConfidencePredictor:
    def test_zero_confidence_gives_bias_path(self):
        rng = np.random.default_rng(10)
        cp = nconv.ConfidencePredictor(3, 4, 2, rng)
        x = T.Tensor(rng.standard_normal((1, 3, 6, 6)))
        out = cp(x, T.Tensor(np.zeros((1, 1, 6, 6))))
        assert out.data.std() < 1e-12  # constant map
        assert 0.0 < out.data.min() and out.data.max() < 1.0

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        cp = nconv.ConfidencePredictor(2, 4, 2, rng)
        x = T.Tensor(rng.standard_normal((1, 2, 8, 8)))
        c = T.Tensor(rng.uniform(size=(1, 1, 8, 8)))
        a = cp(x, c).data
        b = cp(x, c).data
        assert np.array_equal(a, b)

    def test_one_hot_confidence_raises_output_nearby(self):
        rng = np.random.default_rng(12)
        cp = nconv.ConfidencePredictor(1, 4, 2, rng)
        x = T.Tensor(np.full((1, 1, 9, 9), 2.0))
        c = np.zeros((1, 1, 9, 9))
        c[0, 0, 4, 4] = 1.0
        out = cp(x, T.Tensor(c)).data[0, 0]
        zero = cp(x, T.Tensor(np.zeros((1, 1, 9, 9)))).data[0, 0]
        assert out[4, 4] > zero[4, 4]
        assert out[4, 4] > out[0, 0] or out[4, 4] > out[8, 8]

    def test_depth_validation(self):
        with pytest.raises(ValueError, match="at least one"):
            nconv.ConfidencePredictor(2, 4, 0, np.random.default_rng(0))


class TestNConvGradients:
    def test_gradcheck_inputs_confidence_and_parameters(self):
        rng = np.random.default_rng(13)
        layer = make_layer(cin=2, cout=2, seed=14)
        x0 = rng.standard_normal((1, 2, 6, 6))
        c0 = rng.uniform(0.15, 0.85, (1, 1, 6, 6))

        rep = T.gradcheck(lambda x: nconv.nconv_forward(x, T.Tensor(c0), layer)[0].rms(),
                          T.Tensor(x0), tol=1e-3)
        assert rep.passed, f"wrt features: {rep}"

        rep = T.gradcheck(lambda c: nconv.nconv_forward(T.Tensor(x0), c, layer)[0].rms(),
                          T.Tensor(c0), tol=1e-3)
        assert rep.passed, f"wrt confidence: {rep}"

        def wrt_weights(v):
            saved = layer.raw_weight
            layer.raw_weight = v
            try:
                y, c2 = nconv.nconv_forward(T.Tensor(x0), T.Tensor(c0), layer)
                return T.add(y.rms(), c2.rms())
            finally:
                layer.raw_weight = saved

        rep = T.gradcheck(wrt_weights, T.Tensor(layer.raw_weight.data.copy()), tol=1e-3)
        assert rep.passed, f"wrt weights: {rep}"

        rep = T.gradcheck(lambda c: nconv.nconv_forward(T.Tensor(x0), c, layer)[1].rms(),
                          T.Tensor(c0), tol=1e-3)
        assert rep.passed, f"confidence output wrt confidence: {rep}"
