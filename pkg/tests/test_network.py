import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnneelm.network import (
    ActivationMode,
    Layer,
    LossMode,
    NetworkParams,
    ProbabilityClampWarning,
    activation_slope,
    backward,
    batch_loss,
    build_network,
    forward,
    log_likelihood_literal,
    loss,
    loss_terms,
    predict,
    sigmoid,
    sigmoid_mod,
    softmax,
)
from cnneelm.numerics import DimensionError, Rng

from .oracles import LN6, SIGMOID_1, SIGMOID_2, SOFTMAX_E_FIRST, conv_same_ref, finite_difference, sigmoid_ref

MODES = list(ActivationMode)
LOSSES = list(LossMode)


def small_net(seed=0, mode=ActivationMode.BASELINE, shape=(3, 8, 8), classes=4):
    return build_network(Rng(seed), shape, classes, (2, 3), hidden=5, mode=mode)


def fd_max_relative_error(params, x, y, loss_mode, act, coords_per_tensor=6, seed=0, h=1e-5, floor=1e-6):
    """Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over sampled coordinates."""
    grads = backward(forward(params, x, act), params, y, loss_mode)
    g = np.random.default_rng(seed)
    worst = 0.0
    f = lambda: batch_loss(params, x, y, loss_mode, act)  # noqa: E731
    for (_, layer), (dw, db) in zip(params.param_layers(), grads):
        for arr, garr in ((layer.weights, dw), (layer.bias, db)):
            for flat in g.choice(arr.size, size=min(coords_per_tensor, arr.size), replace=False):
                idx = np.unravel_index(flat, arr.shape)
                num = finite_difference(f, arr, idx, h)
                ana = garr[idx]
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


class TestActivations:
    def test_sigmoid_values(self):
        assert sigmoid(0.0) == 0.5
        assert sigmoid(2.0) == pytest.approx(SIGMOID_2, abs=1e-15)
        assert sigmoid(2.0) == pytest.approx(sigmoid_ref(2.0), abs=1e-15)

    def test_sigmoid_symmetry_and_extremes(self, rng):
        x = rng.normal(scale=10, size=100)
        assert np.allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-15)
        assert sigmoid(-800.0) == 0.0 and sigmoid(800.0) == 1.0
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            sigmoid(np.array([-1e4, 1e4]))

    def test_sigmoid_mod(self, rng):
        assert sigmoid_mod(0.0) == 0.5
        assert sigmoid_mod(2.0) == pytest.approx(SIGMOID_1, abs=1e-15)
        x = rng.normal(scale=5, size=1000)
        assert np.abs(sigmoid_mod(x) - sigmoid(x / 2)).max() <= 1e-15

    def test_slopes_at_zero(self):
        assert activation_slope(0.0, ActivationMode.BASELINE) == pytest.approx(0.25, abs=1e-12)
        assert activation_slope(0.0, ActivationMode.FLATTENED) == pytest.approx(0.125, abs=1e-12)

    def test_flattened_slope_identity(self, rng):
        x = rng.normal(scale=4, size=50)
        assert np.allclose(activation_slope(x, "flattened"), activation_slope(x / 2, "baseline") / 2, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50))
    def test_monotone(self, a, b):
        if a < b:
            assert sigmoid(a) <= sigmoid(b)


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax(np.zeros(6)), 1 / 6)

    def test_closed_form(self):
        assert softmax(np.array([1.0, 0, 0, 0, 0, 0]))[0] == pytest.approx(SOFTMAX_E_FIRST, abs=1e-12)
        # closed form e/(e+5) = 0.3521874...
        assert SOFTMAX_E_FIRST == pytest.approx(math.e / (math.e + 5), abs=1e-15)
        assert SOFTMAX_E_FIRST == pytest.approx(0.3521874, abs=1e-7)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.floats(-100, 100))
    def test_sum_and_shift_invariance(self, logits, k):
        z = np.array(logits)
        p = softmax(z)
        assert abs(p.sum() - 1) < 1e-9 and np.all(p > 0)
        assert np.abs(softmax(z + k) - p).max() < 1e-12


class TestLosses:
    def test_uniform_cross_entropy(self):
        assert loss(np.full(6, 1 / 6), 2, LossMode.CROSS_ENTROPY) == pytest.approx(LN6, abs=1e-12)

    def test_perfect_prediction(self):
        p = np.eye(6)[3]
        assert loss(p, 3, "cross-entropy") == 0.0

    def test_log_likelihood_two_classes(self):
        # one-vs-rest Bernoulli terms: y=1 branch log 0.5, y=0 branch log(1-0.5); mean over C=2, negated
        direct = -(math.log(0.5) + math.log(1 - 0.5)) / 2
        assert loss(np.array([0.5, 0.5]), 0, "log-likelihood") == pytest.approx(direct, abs=1e-15)
        assert -direct == pytest.approx(-0.693147, abs=1e-6)

    def test_entropy_literal(self):
        p = np.array([0.3, 0.7])
        assert loss(p, 1, "entropy-literal") == pytest.approx(-0.7 * math.log(0.7), abs=1e-15)

    def test_clamp_flagged(self):
        p = np.array([1.0, 0.0])
        with pytest.warns(ProbabilityClampWarning):
            v = loss(p, 1, "cross-entropy")
        assert v == pytest.approx(-math.log(1e-12))
        _, _, clamped = loss_terms(p[None], np.array([1]), "log-likelihood")
        assert clamped[0]

    def test_literal_log_likelihood(self):
        assert log_likelihood_literal(0.5, 3, 6) == pytest.approx(math.log(0.5))
        assert np.isfinite(log_likelihood_literal(0.0, 1, 2))

    @pytest.mark.parametrize("mode", LOSSES)
    def test_logit_gradient_matches_difference(self, mode, rng):
        z = rng.normal(size=5)
        _, g, _ = loss_terms(softmax(z)[None], np.array([2]), mode)
        for k in range(5):
            f = lambda: float(loss_terms(softmax(z)[None], np.array([2]), mode)[0][0])  # noqa: E731
            assert g[0, k] == pytest.approx(finite_difference(f, z, k), abs=1e-8)


class TestForward:
    def test_zero_weights_uniform(self):
        net = small_net()
        for _, layer in net.param_layers():
            layer.weights[:] = 0
            layer.bias[:] = 0
        tr = forward(net, np.ones((3, 8, 8)))
        assert np.all(tr.logits == 0)
        assert np.allclose(tr.probs, 0.25)

    def test_pure(self, rng):
        net = small_net()
        x = rng.normal(size=(2, 3, 8, 8))
        a, b = forward(net, x), forward(net, x)
        assert np.array_equal(a.logits, b.logits) and np.array_equal(a.features, b.features)

    def test_one_by_one_conv_on_constant_image(self):
        w, b, c = 0.7, -0.2, 0.3
        net = NetworkParams(
            [Layer("conv", {"kernel": 1, "in": 1, "out": 1}, np.full((1, 1, 1, 1), w), np.array([b])),
             Layer("fc", {"in": 16, "out": 2}, np.zeros((16, 2)), np.zeros(2))],
            (1, 4, 4), 2)
        tr = forward(net, np.full((1, 4, 4), c))
        assert np.allclose(tr.inputs[1], w * c + b, atol=1e-15)

    def test_conv_matches_loop_oracle(self, rng):
        net = small_net()
        x = rng.normal(size=(3, 8, 8))
        tr = forward(net, x)
        conv = net.layers[0]
        assert np.allclose(tr.inputs[1][0], conv_same_ref(x, conv.weights, conv.bias), atol=1e-12)

    def test_shapes_and_feature_layer(self, rng):
        net = build_network(Rng(0))
        tr = forward(net, rng.normal(size=(4, 9, 12, 12)))
        assert tr.logits.shape == (4, 6)
        assert tr.features.shape == (4, 64) and tr.fc_outputs.shape == (4, 64)
        assert np.allclose(tr.features, sigmoid(tr.fc_outputs))

    def test_shape_mismatch_names_layer(self):
        with pytest.raises(DimensionError, match="layer 0"):
            forward(small_net(), np.zeros((2, 8, 8)))
        net = small_net()
        net.layers[0] = Layer("conv", {"kernel": 3}, np.zeros((2, 5, 3, 3)), np.zeros(2))
        with pytest.raises(DimensionError, match="layer 0 \\(conv\\)"):
            forward(net, np.zeros((3, 8, 8)))

    def test_accepts_patch_set(self, rng):
        from cnneelm.saliency import extract_patches

        net = build_network(Rng(0))
        ps = extract_patches(rng.random((48, 48)))
        assert forward(net, ps).logits.shape == (1, 6)

    def test_init_gain(self):
        base = build_network(Rng(5), mode="baseline")
        flat = build_network(Rng(5), mode="flattened")
        # identical draws scaled by the activation-matched gain; the logit layer is unscaled
        assert np.allclose(flat.layers[0].weights, 2 * base.layers[0].weights)
        assert np.array_equal(flat.layers[-1].weights, base.layers[-1].weights)
        limit = np.sqrt(6 / (9 * 9 + 8 * 9))
        assert np.abs(base.layers[0].weights).max() <= 4 * limit


class TestBackward:
    @pytest.mark.parametrize("act", MODES)
    @pytest.mark.parametrize("loss_mode", LOSSES)
    def test_finite_differences_small_net(self, act, loss_mode, rng):
        net = small_net(1, act)
        x = rng.normal(size=(3, 3, 8, 8))
        y = np.array([0, 3, 1])
        assert fd_max_relative_error(net, x, y, loss_mode, act) <= 1e-4

    def test_zero_loss_zero_output_gradient(self):
        net = NetworkParams([Layer("fc", {"in": 2, "out": 2}, np.zeros((2, 2)), np.array([0.0, -1e6]))], (2, 1, 1), 2)
        x = np.ones((1, 2, 1, 1))
        dw, db = backward(forward(net, x), net, [0], "cross-entropy")[0]
        assert not dw.any() and not db.any()

    def test_doubling_input_doubles_weight_gradient(self, rng):
        net = NetworkParams([Layer("fc", {"in": 4, "out": 3}, np.zeros((4, 3)), rng.normal(size=3))], (4, 1, 1), 3)
        x = rng.normal(size=(1, 4, 1, 1))
        g1 = backward(forward(net, x), net, [1])[0][0]
        g2 = backward(forward(net, 2 * x), net, [1])[0][0]
        assert np.allclose(g2, 2 * g1, atol=1e-15)

    def test_stale_trace(self, rng):
        net = small_net()
        tr = forward(net, rng.normal(size=(1, 3, 8, 8)))
        other = build_network(Rng(0), (3, 8, 8), 4, (2,), hidden=5)
        with pytest.raises(DimensionError):
            backward(tr, other, [0])
        with pytest.raises(DimensionError):
            backward(tr, net, [0, 1])

    def test_predict(self, rng):
        net = small_net()
        x = rng.normal(size=(5, 3, 8, 8))
        assert np.array_equal(predict(net, x), np.argmax(forward(net, x).logits, axis=1))
