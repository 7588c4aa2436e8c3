"""Compressed-size model, regularizers and exact bounds of the space."""

import itertools

import numpy as np
import pytest

import tensor_engine as te
from data_io import make_stream
from search_space import SearchLayer
from search_space import extract_argmax_config
from search_space import retained_count
from size_model import BIAS_BITS
from size_model import LayerGeometry
from size_model import binary_entropy
from size_model import binary_entropy_tensor
from size_model import constraint_regularizer
from size_model import dense8_bits
from size_model import empirical_entropy
from size_model import enumerate_space
from size_model import estimate_config
from size_model import exact_regularizer
from size_model import expectation_regularizer
from size_model import expected_layer_size
from size_model import expected_network_macs
from size_model import layer_size
from size_model import mac_cost
from size_model import network_size
from size_model import one_hot_samples
from size_model import space_bounds
from size_model import space_cardinality
from supernet import build_supernet
from tensor_engine import Tensor


@pytest.fixture
def mlp_net(mlp_space):
    return build_supernet(mlp_space, (5,), 3, rng=make_stream(0, "init"))


SMALL_CONFIG = [
    {"width": 0, "sparsity": 0, "bitwidth": 1, "operator": 0},  # fc1: 3 of 6 outputs, s=0.5, 4 bits
    {"width": 0, "sparsity": 1, "bitwidth": 2, "operator": 0},  # head: dense float
]


class TestBinaryEntropy:
    def test_values(self):
        assert binary_entropy(0.5) == 1.0
        assert binary_entropy(0.0) == 0.0
        assert binary_entropy(1.0) == 0.0
        assert binary_entropy(0.1) == pytest.approx(0.4689955935892812)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            binary_entropy(1.2)

    def test_derivative(self):
        s = Tensor(0.2, requires_grad=True)
        te.backward(binary_entropy_tensor(s))
        assert s.grad == pytest.approx(np.log2(0.8 / 0.2))

    def test_derivative_is_finite_at_the_edges(self):
        s = Tensor(1.0, requires_grad=True)
        te.backward(binary_entropy_tensor(s))
        assert np.isfinite(s.grad)

    def test_empirical_entropy(self):
        assert empirical_entropy([0, 1, 0, 1]) == pytest.approx(1.0)
        assert empirical_entropy([3, 3, 3]) == 0.0
        assert empirical_entropy([]) == 0.0


class TestLayerSize:
    @pytest.mark.parametrize("s, b, elements, bits", [
        (1.0, 8, 100, 800.0),
        (0.5, 4, 10, 50.0),
        (0.1, 2, 1000, 2468.996),
    ])
    def test_values(self, s, b, elements, bits):
        assert layer_size(s, b, 1.0, LayerGeometry(elements, 1)) == pytest.approx(bits, abs=1e-3)

    def test_width_and_kernel_scale_the_count(self):
        # ceil(0.5 * 6) = 3 outputs, 2 of the producer's channels, 3x3 kernel
        assert layer_size(1.0, 4, 0.5, LayerGeometry(6, 5, 9), in_retained=2) == 4 * 3 * 2 * 9

    @staticmethod
    def _layer():
        return SearchLayer("fc", "dense", 5, 10, [0.5, 1.0], [0.2, 0.4], [2, 4], ["dense"])

    def test_options_are_combined_before_pricing(self):
        layer = self._layer()
        eps, out_soft = expected_layer_size(Tensor([0.5, 0.5]), Tensor([0.0, 1.0]), Tensor([0.0, 1.0]),
                                            Tensor([1.0]), layer, 5.0)
        assert eps.item() == pytest.approx((4 + binary_entropy(0.3)) * 10 * 5)
        assert out_soft.item() == 10.0
        averaged = 0.5 * (layer_size(0.2, 4, 1.0, LayerGeometry(10, 5)) + layer_size(0.4, 4, 1.0, LayerGeometry(10, 5)))
        assert eps.item() != pytest.approx(averaged)

    def test_one_hot_matches_the_discrete_price(self):
        eps, _ = expected_layer_size(Tensor([1.0, 0.0]), Tensor([1.0, 0.0]), Tensor([1.0, 0.0]), Tensor([1.0]),
                                     self._layer(), 5.0)
        assert eps.item() == pytest.approx(layer_size(0.2, 2, 0.5, LayerGeometry(10, 5)))

    def test_gradient(self):
        layer = self._layer()

        def fn(z_s, z_q, z_w):
            return expected_layer_size(z_s, z_q, z_w, Tensor([1.0]), layer, 5.0)[0]

        assert te.check_gradients(fn, [[0.3, 0.7], [0.6, 0.4], [0.25, 0.75]]) < 1e-6


class TestDiscreteSize:
    def test_hand_computed_mlp(self, mlp_net):
        est = estimate_config(mlp_net.layers, SMALL_CONFIG, mlp_net.input_channels, target=400.0)
        # (4 + H(0.5)) * 3 * 5  +  32 * 3 * 3
        assert est.per_layer == [75.0, 288.0]
        assert est.total == 363.0
        assert est.bias_bits == BIAS_BITS * 6
        assert est.relative_error() == pytest.approx(37 / 400)
        assert est.fits()

    def test_soft_estimate_matches_one_hot(self, tiny_net):
        rng = np.random.default_rng(5)
        for _ in range(10):
            config = [{d.kind: int(rng.integers(len(d))) for d in layer.decisions} for layer in tiny_net.layers]
            hard = estimate_config(tiny_net.layers, config, tiny_net.input_channels).total
            soft, _ = network_size(tiny_net.layers, one_hot_samples(tiny_net.layers, config), tiny_net.input_channels)
            assert soft.item() == pytest.approx(hard, rel=1e-12)

    def test_soft_macs_match_one_hot(self, tiny_net):
        config = [{d.kind: len(d) - 1 for d in layer.decisions} for layer in tiny_net.layers]
        soft = expected_network_macs(tiny_net.layers, one_hot_samples(tiny_net.layers, config),
                                     tiny_net.input_channels)
        assert soft.item() == pytest.approx(mac_cost(tiny_net.layers, config, tiny_net.input_channels))

    def test_identity_forwards_channels_for_free(self):
        space = {"template": "cnn", "layers": [{"name": "a", "channels": 4}, {"name": "b", "channels": 4}],
                 "width": [1.0], "sparsity": [1.0], "bitwidth": [8], "operators": ["conv1x1", "identity"]}
        net = build_supernet(space, (4, 4, 4), 2, rng=make_stream(0, "init"))
        skip = [{"width": 0, "sparsity": 0, "bitwidth": 0, "operator": 1}] * 2 + [
            {"width": 0, "sparsity": 0, "bitwidth": 0, "operator": 0}]
        est = estimate_config(net.layers, skip, 4)
        assert est.per_layer == [0.0, 0.0, 8.0 * 4 * 2]

    def test_dense8(self, mlp_net):
        assert dense8_bits(mlp_net.layers, 5) == 8.0 * 6 * 5 + 8.0 * 3 * 6


class TestBounds:
    def test_matches_enumeration(self, tiny_net):
        sizes = [estimate_config(tiny_net.layers, c, tiny_net.input_channels).total
                 for c in enumerate_space(tiny_net.layers)]
        bounds = space_bounds(tiny_net.layers, tiny_net.input_channels)
        assert bounds["count"] == len(sizes) == space_cardinality(tiny_net.layers)
        assert bounds["min"] == pytest.approx(min(sizes))
        assert bounds["max"] == pytest.approx(max(sizes))
        assert estimate_config(tiny_net.layers, bounds["min_config"], tiny_net.input_channels).total == \
            pytest.approx(bounds["min"])

    def test_mac_bounds(self, tiny_net):
        macs = [mac_cost(tiny_net.layers, c, tiny_net.input_channels) for c in enumerate_space(tiny_net.layers)]
        bounds = space_bounds(tiny_net.layers, tiny_net.input_channels, "mac-count")
        assert (bounds["min"], bounds["max"]) == pytest.approx((min(macs), max(macs)))


class TestRegularizers:
    def test_constraint_regularizer(self):
        reg = constraint_regularizer([Tensor(90.0), Tensor(120.0)], 100.0)
        assert reg.item() == pytest.approx(15.0)
        assert constraint_regularizer([Tensor(90.0)], 100.0, normalize=True).item() == pytest.approx(0.1)

    def test_expectation_form_can_vanish(self):
        # samples on both sides of the target cancel in expectation, not per sample
        assert expectation_regularizer([Tensor(90.0), Tensor(110.0)], 100.0).item() == pytest.approx(0.0)
        assert constraint_regularizer([Tensor(90.0), Tensor(110.0)], 100.0).item() == pytest.approx(10.0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            constraint_regularizer([], 1.0)
        with pytest.raises(ValueError):
            constraint_regularizer([Tensor(1.0)], 0.0)

    def test_exact_regularizer_at_a_point_mass(self, mlp_net):
        for layer, idx in zip(mlp_net.layers, SMALL_CONFIG):
            for d in layer.decisions:
                probs = np.zeros(len(d))
                probs[idx[d.kind]] = 1.0
                d.set_probs(probs)
        assert exact_regularizer(mlp_net.layers, 400.0, 5) == pytest.approx(37.0)


# ----------------------------
# Enumeration suite on random toy spaces
# ----------------------------

TOY_SPACES = 50


def _toy_space(rng):
    """Two dense layers whose options all have distinct costs within each decision."""
    inputs = int(rng.integers(2, 5))
    layers, in_count = [], inputs
    for i in range(2):
        out = int(rng.integers(2, 6))
        widths = sorted(rng.choice([0.5, 1.0], size=int(rng.integers(1, 3)), replace=False))
        sparsities = sorted(rng.choice([0.1, 0.25, 0.5, 1.0], size=int(rng.integers(1, 3)), replace=False))
        bitwidths = sorted(rng.choice([1, 2, 4, 8], size=int(rng.integers(2, 4)), replace=False))
        layers.append(SearchLayer(f"fc{i}", "dense", in_count, out, widths, sparsities, bitwidths, ["dense"]))
        in_count = out
    return layers, inputs


def _brute_force(layers, inputs: int, target: float) -> tuple[float, float]:
    """(E_z |E(z) - e*|, |E_z E(z) - e*|) by direct enumeration of every option combination."""
    per_layer = [list(itertools.product(*(range(len(d)) for d in layer.decisions))) for layer in layers]
    mean_gap, mean_size = 0.0, 0.0
    for combo in itertools.product(*per_layer):
        p, size, in_count = 1.0, 0.0, inputs
        for layer, choice in zip(layers, combo):
            for d, k in zip(layer.decisions, choice):
                p *= d.probs[k]
            w, s, b, _ = choice
            out = retained_count(layer.width.options[w], layer.out_channels)
            size += (layer.bitwidth.options[b] + binary_entropy(layer.sparsity.options[s])) * out * in_count
            in_count = out
        mean_gap += p * abs(size - target)
        mean_size += p * size
    return mean_gap, abs(mean_size - target)


def _point_mass(layers, config):
    for layer, idx in zip(layers, config):
        for d in layer.decisions:
            d.set_probs(np.eye(len(d))[idx[d.kind]])


def _random_config(layers, rng):
    return [{d.kind: int(rng.integers(len(d))) for d in layer.decisions} for layer in layers]


def _simplex_grid(n: int, steps: int = 20):
    for combo in itertools.product(range(steps + 1), repeat=n - 1):
        if sum(combo) <= steps:
            yield np.array([*combo, steps - sum(combo)], dtype=np.float64) / steps


class TestEnumerationSuite:
    def test_exact_regularizer_matches_brute_force(self):
        rng = np.random.default_rng(2024)
        for _ in range(TOY_SPACES):
            layers, inputs = _toy_space(rng)
            for layer in layers:
                for d in layer.decisions:
                    d.set_probs(rng.dirichlet(np.ones(len(d))))
            target = estimate_config(layers, _random_config(layers, rng), inputs).total
            expected, _ = _brute_force(layers, inputs, target)
            assert exact_regularizer(layers, target, inputs) == pytest.approx(expected, rel=1e-9, abs=1e-9)

    def test_point_mass_on_the_target_vanishes(self):
        rng = np.random.default_rng(7)
        for _ in range(TOY_SPACES):
            layers, inputs = _toy_space(rng)
            config = _random_config(layers, rng)
            target = estimate_config(layers, config, inputs).total
            _point_mass(layers, config)
            assert exact_regularizer(layers, target, inputs) == pytest.approx(0.0, abs=1e-9)
            assert estimate_config(layers, extract_argmax_config(layers), inputs).total == target

    def test_per_sample_form_bounds_the_expectation_form(self):
        rng = np.random.default_rng(11)
        for _ in range(TOY_SPACES):
            layers, inputs = _toy_space(rng)
            for layer in layers:
                for d in layer.decisions:
                    d.set_probs(rng.dirichlet(np.ones(len(d))))
            # a target at the mean size zeroes the expectation form, never the per-sample one
            _, offset = _brute_force(layers, inputs, 0.0)
            per_sample, in_expectation = _brute_force(layers, inputs, offset)
            assert in_expectation == pytest.approx(0.0, abs=1e-9 * offset)
            assert per_sample > 1e-6 * offset
            assert exact_regularizer(layers, offset, inputs) >= in_expectation

    @pytest.mark.slow
    def test_only_one_hot_distributions_vanish(self):
        rng = np.random.default_rng(3)
        for _ in range(TOY_SPACES):
            layers, inputs = _toy_space(rng)
            config = _random_config(layers, rng)
            target = estimate_config(layers, config, inputs).total
            _point_mass(layers, config)
            li = int(rng.integers(len(layers)))
            choices = [d for d in layers[li].decisions if len(d) > 1]
            d = choices[int(rng.integers(len(choices)))]
            chosen = config[li][d.kind]
            for probs in _simplex_grid(len(d)):
                d.set_probs(probs)
                value = exact_regularizer(layers, target, inputs)
                if probs[chosen] == 1.0:
                    assert value == pytest.approx(0.0, abs=1e-9)
                else:
                    assert value > 1e-6
            d.set_probs(np.eye(len(d))[chosen])
