import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cornercase.exceptions import NumericalError, ShapeError, TrainingError, UsageError
from cornercase.tensor_core import (
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    Network,
    ReLU,
    Softmax,
    forward,
    input_gradient,
    load_weights,
    parameter_gradients,
    save_weights,
    sgd_step,
    sgd_train,
    weights_from_bytes,
    weights_to_bytes,
)
from helpers import central_difference, max_rel_error, random_small_net


def _prob_objective(weights):
    def objective(probs, acts):
        return float(weights @ probs), {len(acts) - 1: weights}
    return objective


def test_softmax_of_equal_logits_is_uniform():
    p, _ = Softmax().forward(np.zeros((1, 2)))
    np.testing.assert_array_equal(p[0], [0.5, 0.5])


def test_relu_definition():
    out, _ = ReLU().forward(np.array([[-1.0, 2.0]]))
    np.testing.assert_array_equal(out, [[0.0, 2.0]])


def test_identity_1x1_conv():
    conv = Conv2D(1, 1, 1, 1)
    conv.set_params([np.ones((1, 1, 1, 1)), np.zeros(1)])
    x = np.random.default_rng(0).uniform(size=(2, 5, 4, 1))
    out, _ = conv.forward(x)
    np.testing.assert_array_equal(out, x)


def test_linear_model_gradient_equals_weights():
    w = np.array([0.5, -2.0, 3.0, 0.25])
    net = Network([Flatten(), Dense(4, 2), Softmax()], (2, 2, 1))
    net.set_params([(), (np.stack([w, np.zeros(4)], axis=1), np.zeros(2)), ()])

    def logit0(probs, acts):
        seed = np.array([1.0, 0.0])
        return float(acts[1][0]), {1: seed}

    g = input_gradient(net, np.ones((2, 2, 1)), logit0)
    np.testing.assert_array_equal(g.ravel(), w)


def test_constant_objective_has_zero_gradient(rng):
    net = random_small_net(rng, "pool")
    g = input_gradient(net, rng.uniform(size=net.input_shape), lambda p, a: (3.0, {}))
    assert g.shape == net.input_shape
    assert not g.any()


def test_dense_16_8_3_input_gradient_matches_finite_differences(rng):
    net = Network([Flatten(), Dense(16, 8), ReLU(), Dense(8, 3), Softmax()], (4, 4, 1))
    net.init_params(7)
    for _ in range(20):
        w = rng.normal(size=3)
        x = rng.uniform(size=(4, 4, 1))
        g = input_gradient(net, x, _prob_objective(w))
        fd = central_difference(lambda z: float(w @ net.forward(z)[0]), x)
        assert max_rel_error(g, fd) < 1e-4


@pytest.mark.parametrize("kind", ["dense", "conv", "pool"])
def test_input_gradient_per_layer_kind(kind, rng):
    for _ in range(5):
        net = random_small_net(rng, kind)
        w = rng.normal(size=net.n_classes)
        x = rng.uniform(size=net.input_shape)
        g = input_gradient(net, x, _prob_objective(w))
        fd = central_difference(lambda z: float(w @ net.forward(z)[0]), x)
        assert max_rel_error(g, fd) < 1e-4


@pytest.mark.parametrize("kind", ["dense", "conv", "pool"])
def test_parameter_gradients_match_finite_differences(kind, rng):
    for _ in range(5):
        net = random_small_net(rng, kind)
        X = rng.uniform(size=(4,) + net.input_shape)
        y = rng.integers(0, net.n_classes, size=4)
        grads = parameter_gradients(net, X, y)
        for k, layer in enumerate(net.layers):
            for i, p in enumerate(layer.params):
                def loss_at(v, k=k, i=i):
                    trial = net.copy()
                    ps = list(trial.layers[k].params)
                    ps[i] = v
                    trial.layers[k].set_params(ps)
                    return trial.loss_and_gradients(X, y)[0]
                fd = central_difference(loss_at, p)
                assert max_rel_error(grads[k][i], fd) < 1e-4, (kind, k, i)


def test_maxpool_routes_gradient_to_first_max():
    pool = MaxPool2D()
    x = np.array([[1.0, 3.0], [3.0, 0.0]]).reshape(1, 2, 2, 1)
    out, cache = pool.forward(x)
    assert out.item() == 3.0
    dx, _ = pool.backward(np.ones((1, 1, 1, 1)), cache)
    np.testing.assert_array_equal(dx[0, ..., 0], [[0.0, 1.0], [0.0, 0.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (1, 4, 6, 2), elements=st.floats(-5, 5)))
def test_maxpool_gradient_only_at_maxima(x):
    pool = MaxPool2D()
    out, cache = pool.forward(x)
    dx, _ = pool.backward(np.ones_like(out), cache)
    for r in range(2):
        for c in range(3):
            block = x[0, 2 * r:2 * r + 2, 2 * c:2 * c + 2]
            gblock = dx[0, 2 * r:2 * r + 2, 2 * c:2 * c + 2]
            assert np.all(block[gblock > 0] == block.max(axis=(0, 1))[np.nonzero(gblock > 0)[2]])
            assert gblock.sum() == 2


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-300, 300)))
def test_softmax_is_a_distribution(z):
    p, _ = Softmax().forward(z)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_forward_is_pure_and_records_every_layer(rng):
    net = random_small_net(rng, "pool")
    x = rng.uniform(size=net.input_shape)
    p1, acts1 = forward(net, x)
    p2, acts2 = forward(net, x)
    assert len(acts1) == len(net.layers)
    np.testing.assert_array_equal(p1, p2)
    for a, b in zip(acts1, acts2):
        np.testing.assert_array_equal(a, b)
    assert abs(p1.sum() - 1) < 1e-6


def test_forward_rejects_wrong_shape(rng):
    net = random_small_net(rng, "dense")
    with pytest.raises(ShapeError):
        forward(net, np.zeros((5, 5, 1)))


def test_construction_rejects_mismatched_stack():
    with pytest.raises(ShapeError):
        Network([Flatten(), Dense(10, 3), Softmax()], (4, 4, 1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_reports_layer_index():
    net = Network([Flatten(), Dense(4, 2), Softmax()], (2, 2, 1))
    net.set_params([(), (np.full((4, 2), 1e308), np.zeros(2)), ()])
    with pytest.raises(NumericalError) as info:
        forward(net, np.ones((2, 2, 1)))
    assert info.value.layer == 1


def test_cross_entropy_gradient_vanishes_for_certain_correct_prediction():
    net = Network([Flatten(), Dense(2, 2), Softmax()], (1, 2, 1))
    net.set_params([(), (np.array([[800.0, -800.0], [0.0, 0.0]]), np.zeros(2)), ()])
    loss, grads = net.loss_and_gradients(np.array([[[[1.0], [0.0]]]]), [0])
    assert loss == 0.0
    assert not grads[1][0].any() and not grads[1][1].any()


def test_empty_batch_is_usage_error(rng):
    net = random_small_net(rng, "dense")
    with pytest.raises(UsageError):
        parameter_gradients(net, np.zeros((0, 4, 4, 1)), [])


def test_zero_learning_rate_step_is_noop(rng):
    net = random_small_net(rng, "conv")
    before = [tuple(p.copy() for p in ps) for ps in net.get_params()]
    grads = parameter_gradients(net, rng.uniform(size=(2,) + net.input_shape), [0, 1])
    sgd_step(net, grads, 0.0)
    for old, new in zip(before, net.get_params()):
        for a, b in zip(old, new):
            np.testing.assert_array_equal(a, b)


def _separable(rng, n=60):
    X = rng.uniform(size=(n, 2, 2, 1))
    y = (X[:, 0, 0, 0] + X[:, 1, 1, 0] > X[:, 0, 1, 0] + X[:, 1, 0, 0]).astype(int)
    margin = np.abs(X[:, 0, 0, 0] + X[:, 1, 1, 0] - X[:, 0, 1, 0] - X[:, 1, 0, 0]) > 0.1
    return X[margin], y[margin]


def test_separable_toy_reaches_full_training_accuracy(rng):
    X, y = _separable(rng)
    # a hand-fit linear rule already separates the set
    hand = (X[:, 0, 0, 0] + X[:, 1, 1, 0] - X[:, 0, 1, 0] - X[:, 1, 0, 0] > 0).astype(int)
    assert np.all(hand == y)
    net = Network([Flatten(), Dense(4, 2), Softmax()], (2, 2, 1)).init_params(0)
    result = sgd_train(net, X, y, epochs=50, learning_rate=0.5, rng_seed=0, batch_size=8)
    assert result.accuracy == 1.0
    assert len(result.losses) == 50


def test_zero_epochs_returns_initialisation(rng):
    net = random_small_net(rng, "dense")
    result = sgd_train(net, rng.uniform(size=(4, 4, 4, 1)), [0, 1, 2, 0], 0, 0.1, 0)
    for a, b in zip(net.get_params(), result.model.get_params()):
        for p, q in zip(a, b):
            np.testing.assert_array_equal(p, q)


def test_training_is_deterministic(rng):
    X, y = _separable(rng)
    net = Network([Flatten(), Dense(4, 3), ReLU(), Dense(3, 2), Softmax()], (2, 2, 1)).init_params(3)
    a = sgd_train(net, X, y, 5, 0.1, rng_seed=11)
    b = sgd_train(net, X, y, 5, 0.1, rng_seed=11)
    assert weights_to_bytes(a.model) == weights_to_bytes(b.model)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_training_error(rng):
    X, y = _separable(rng)
    net = Network([Flatten(), Dense(4, 2), Softmax()], (2, 2, 1)).init_params(0)
    with pytest.raises(TrainingError):
        sgd_train(net, X * 1e150, y, 3, 1e160, 0, momentum=0.0)


def test_nonpositive_learning_rate_rejected(rng):
    net = random_small_net(rng, "dense")
    with pytest.raises(UsageError):
        sgd_train(net, rng.uniform(size=(2, 4, 4, 1)), [0, 1], 1, 0.0, 0)


def test_weight_file_round_trip_is_bit_exact(tmp_path, rng):
    for kind in ("dense", "conv", "pool"):
        net = random_small_net(rng, kind)
        path = tmp_path / f"{kind}.dprb"
        save_weights(net, path)
        raw = path.read_bytes()
        assert raw[:4] == b"DPRB"
        back = load_weights(path)
        assert weights_to_bytes(back) == raw
        assert back.kinds() == net.kinds()
        x = rng.uniform(size=net.input_shape)
        np.testing.assert_array_equal(back.forward(x)[0], net.forward(x)[0])


def test_weight_file_rejects_garbage(rng):
    net = random_small_net(rng, "dense")
    raw = weights_to_bytes(net)
    with pytest.raises(UsageError):
        weights_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(UsageError):
        weights_from_bytes(raw[:-3])
