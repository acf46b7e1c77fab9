import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cornercase import coverage as C
from cornercase.coverage import CoverageMap, NeuronId, NeuronValues
from cornercase.exceptions import UsageError
from cornercase.tensor_core import Conv2D, Dense, Flatten, Network, ReLU, Softmax
from helpers import central_difference, random_small_net


def dense_probe(units=3):
    """Flatten -> Dense(4, units) -> Softmax: the logits are the only counted layer."""
    net = Network([Flatten(), Dense(4, units), Softmax()], (2, 2, 1), name=f"probe{units}")
    net.set_params([(), (np.eye(4, units), np.zeros(units)), ()])
    return net


def values_of(net, x):
    return C.neuron_activations(net, net.forward(x)[1])


def by_hand(raw, t):
    lo, hi = min(raw), max(raw)
    norm = [0.0] * len(raw) if hi == lo else [(r - lo) / (hi - lo) for r in raw]
    return {i for i, v in enumerate(norm) if v > t}


def test_dense_values_min_max_normalised():
    net = dense_probe()
    v = values_of(net, np.array([2.0, 4.0, 6.0, 0.0]).reshape(2, 2, 1))
    np.testing.assert_array_equal(v.layers[1], [0.0, 0.5, 1.0])


def test_constant_layer_normalises_to_zero():
    net = dense_probe()
    v = values_of(net, np.array([3.0, 3.0, 3.0, 0.0]).reshape(2, 2, 1))
    np.testing.assert_array_equal(v.layers[1], [0.0, 0.0, 0.0])


def test_conv_neuron_is_channel_mean():
    net = Network([Conv2D(1, 1, 1, 2), Flatten(), Dense(8, 2), Softmax()], (2, 2, 1), name="c")
    net.set_params([(np.array([1.0, 2.0]).reshape(1, 1, 1, 2), np.zeros(2)), (), (np.zeros((8, 2)), np.zeros(2)), ()])
    v = values_of(net, np.array([0.0, 1.0, 1.0, 0.0]).reshape(2, 2, 1))
    np.testing.assert_array_equal(v.raw[0], [0.5, 1.0])


def test_values_read_after_relu():
    net = Network([Flatten(), Dense(4, 3), ReLU(), Dense(3, 2), Softmax()], (2, 2, 1), name="r")
    net.set_params([(), (np.eye(4, 3), np.zeros(3)), (), (np.ones((3, 2)), np.zeros(2)), ()])
    v = values_of(net, np.array([-5.0, 2.0, 4.0, 0.0]).reshape(2, 2, 1))
    np.testing.assert_array_equal(v.raw[1], [0.0, 2.0, 4.0])
    assert set(v.layers) == {1, 3}


def test_softmax_not_counted(rng):
    net = random_small_net(rng, "pool")
    kinds = {net.layers[k].kind for k, _, _ in C.neuron_layers(net)}
    assert kinds == {"conv2d", "dense"}
    assert CoverageMap(net).total_neurons == 2 + 3


def test_threshold_one_never_activates(rng):
    net = random_small_net(rng, "conv")
    cmap = CoverageMap(net, threshold=1.0)
    for _ in range(50):
        assert cmap.update(values_of(net, rng.uniform(size=net.input_shape))) == 0
    assert cmap.coverage_ratio() == 0.0


def test_fresh_map_is_empty(rng):
    cmap = CoverageMap(random_small_net(rng, "dense"))
    assert cmap.coverage_ratio() == 0.0
    assert cmap.activated == set()


def test_update_sequences_match_set_union_oracle():
    net = dense_probe()
    raws = [[2.0, 4.0, 6.0], [5.0, 1.0, 3.0], [1.0, 1.0, 1.0], [0.0, 9.0, 1.0], [3.0, 3.0, 2.0]]
    inputs = [np.array(r + [0.0]).reshape(2, 2, 1) for r in raws]
    for t in (0.0, 0.25, 0.5, 0.99):
        for n in range(len(raws) + 1):
            for seq in itertools.permutations(range(len(raws)), n):
                cmap = CoverageMap(net, threshold=t)
                expected = set()
                for i in seq:
                    before = set(expected)
                    expected |= by_hand(raws[i], t)
                    assert cmap.update(values_of(net, inputs[i])) == len(expected - before)
                assert cmap.activated == {NeuronId(1, u) for u in expected}


def test_update_rejects_values_from_another_model(rng):
    a, b = random_small_net(rng, "dense"), random_small_net(rng, "conv")
    with pytest.raises(UsageError):
        CoverageMap(a).update(values_of(b, rng.uniform(size=b.input_shape)))


def test_threshold_outside_unit_interval_rejected(rng):
    with pytest.raises(UsageError):
        CoverageMap(random_small_net(rng, "dense"), threshold=1.5)


def test_select_uncovered_fully_covered_is_none():
    net = dense_probe()
    cmap = CoverageMap(net)
    cmap.activated_mask[:] = True
    assert cmap.select_uncovered(np.random.default_rng(0)) is None


def test_select_uncovered_single_candidate():
    cmap = CoverageMap(dense_probe())
    cmap.activated_mask[[0, 2]] = True
    rng = np.random.default_rng(0)
    assert {cmap.select_uncovered(rng) for _ in range(20)} == {NeuronId(1, 1)}


def test_select_uncovered_is_uniform():
    cmap = CoverageMap(dense_probe(4))
    rng = np.random.default_rng(2024)
    counts = {}
    for _ in range(10_000):
        n = cmap.select_uncovered(rng)
        counts[n] = counts.get(n, 0) + 1
    assert len(counts) == 4
    assert all(abs(c - 2500) <= 150 for c in counts.values())
    chi2 = sum((c - 2500) ** 2 / 2500 for c in counts.values())
    assert chi2 < 16.27  # p = 0.001, 3 dof


@pytest.mark.parametrize("k,ratio", [(0, 0.0), (3, 0.25), (12, 1.0)])
def test_ratio_counts(k, ratio):
    net = dense_probe(12)
    cmap = CoverageMap(net, threshold=0.5)
    vals = np.zeros(12)
    vals[:k] = 1.0
    cmap.update(NeuronValues(net.name, {1: vals}))
    assert cmap.coverage_ratio() == ratio
    assert cmap.report()["activated"] == k


def test_report_layout(rng):
    net = random_small_net(rng, "pool")
    cmap = CoverageMap(net, threshold=0.3)
    cmap.update(values_of(net, rng.uniform(size=net.input_shape)))
    rep = cmap.report()
    assert set(rep) >= {"total_neurons", "activated", "ratio", "threshold", "per_layer"}
    assert sum(p["neurons"] for p in rep["per_layer"]) == rep["total_neurons"]
    assert sum(p["activated"] for p in rep["per_layer"]) == rep["activated"]


def _stream(rng, net, n):
    return [values_of(net, rng.uniform(size=net.input_shape)) for _ in range(n)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
def test_ratio_non_increasing_in_threshold(seed, t1, t2):
    rng = np.random.default_rng(seed)
    net = random_small_net(rng, "pool")
    lo, hi = sorted((t1, t2))
    a, b = CoverageMap(net, lo), CoverageMap(net, hi)
    for v in _stream(rng, net, 5):
        a.update(v)
        b.update(v)
    assert a.coverage_ratio() >= b.coverage_ratio()
    assert a.ratio_at(hi) == b.coverage_ratio()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 0.9))
def test_ratio_non_decreasing_in_inputs(seed, t):
    rng = np.random.default_rng(seed)
    net = random_small_net(rng, "conv")
    cmap = CoverageMap(net, t)
    last = 0.0
    for v in _stream(rng, net, 8):
        new = cmap.update(v)
        assert new >= 0
        assert cmap.coverage_ratio() >= last
        last = cmap.coverage_ratio()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 6), st.integers(0, 6))
def test_merge_equals_concatenated_stream(seed, n1, n2):
    rng = np.random.default_rng(seed)
    net = random_small_net(rng, "dense")
    s1, s2 = _stream(rng, net, n1), _stream(rng, net, n2)
    a, b, whole = CoverageMap(net, 0.4), CoverageMap(net, 0.4), CoverageMap(net, 0.4)
    for v in s1:
        a.update(v)
    for v in s2:
        b.update(v)
    for v in s2 + s1:
        whole.update(v)
    np.testing.assert_array_equal(a.merge(b).activated_mask, whole.activated_mask)
    np.testing.assert_array_equal(b.merge(a).activated_mask, whole.activated_mask)
    np.testing.assert_array_equal(a.merge(b).high_water, whole.high_water)


def test_merge_rejects_different_thresholds(rng):
    net = random_small_net(rng, "dense")
    with pytest.raises(UsageError):
        CoverageMap(net, 0.1).merge(CoverageMap(net, 0.2))


@pytest.mark.parametrize("kind", ["dense", "conv", "pool"])
def test_neuron_value_seed_matches_finite_differences(kind, rng):
    net = random_small_net(rng, kind)
    x = rng.uniform(size=net.input_shape)
    for k, _, units in C.neuron_layers(net):
        for u in range(units):
            n = NeuronId(k, u)

            def objective(probs, acts, n=n):
                return C.neuron_value_and_seed(net, acts, n)

            g = net.value_and_input_gradient(x, objective)[1]
            fd = central_difference(lambda z: values_of(net, z)[n], x)
            np.testing.assert_allclose(g, fd, atol=1e-6)
