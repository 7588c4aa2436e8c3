"""Concrete extraction, the three-stage plan, training and deployment re-quantization."""

import math

import numpy as np
import pytest

import finetune
from data_io import make_stream
from data_io import read_metrics
from errors import ConfigError
from finetune import ConcreteLayer
from finetune import FinetunePlan
from finetune import accuracy
from finetune import clone
from finetune import decomposed_forward
from finetune import deploy_quantize
from finetune import effective_weights_of
from finetune import extract_concrete
from finetune import hold_shift_bound
from finetune import integer_decomposition_check
from finetune import predict
from finetune import probabilistic_quantized_forward
from finetune import pruning_ramp
from finetune import psnr
from finetune import run_finetune
from search_space import quantize_Qhat
from search_space import retained_count
from tensor_engine import Tensor

# conv3x3 at half width, sparsity 0.25, 4 bits; the head keeps sparsity 0.25 and 4 bits
HALF = [{"width": 0, "sparsity": 0, "bitwidth": 1, "operator": 0}] * 3


def _plan(tiny_cfg, epochs=(1, 2, 1), steps_per_epoch=3):
    spec = dict(tiny_cfg["finetune"], epochs=list(epochs))
    return FinetunePlan.from_config(spec, steps_per_epoch)


@pytest.fixture
def concrete(tiny_net):
    return extract_concrete(tiny_net, HALF)


class TestPlan:
    def test_stages(self, tiny_cfg):
        plan = _plan(tiny_cfg)
        assert plan.total_steps == 12
        assert [plan.stage_of(t) for t in (0, 2, 3, 8, 9, 11)] == [(1, 0), (1, 2), (2, 0), (2, 5), (3, 0), (3, 2)]

    def test_ramp(self, tiny_cfg):
        plan = _plan(tiny_cfg)
        assert [plan.ramp_fraction(t) for t in range(12)] == pytest.approx(
            [0.0, 0.0, 0.0, 0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 1.0, 1.0])
        assert pruning_ramp(0, plan, 0.4) == 1.0
        assert pruning_ramp(11, plan, 0.4) == pytest.approx(0.4)

    def test_ramp_boundaries(self, tiny_cfg):
        plan = _plan(tiny_cfg)
        assert pruning_ramp(3, plan, 0.4) == 1.0  # first step of stage 2
        assert pruning_ramp(8, plan, 0.4) == pytest.approx(0.4)  # last step of stage 2

    def test_ramp_midpoint_is_half_pruned(self, tiny_cfg):
        plan = _plan(tiny_cfg, epochs=(1, 1, 1))
        assert pruning_ramp(4, plan, 0.4) == pytest.approx(0.7)

    def test_single_step_ramp_jumps_to_the_target(self, tiny_cfg):
        plan = _plan(tiny_cfg, epochs=(1, 1, 1), steps_per_epoch=1)
        assert pruning_ramp(0, plan, 0.4) == 1.0
        assert pruning_ramp(1, plan, 0.4) == pytest.approx(0.4)

    def test_ramp_never_decreases_the_pruned_fraction(self, tiny_cfg):
        plan = _plan(tiny_cfg, epochs=(2, 3, 2), steps_per_epoch=5)
        values = [pruning_ramp(t, plan, 0.1) for t in range(plan.total_steps)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_first_stage_restarts(self, tiny_cfg):
        plan = _plan(tiny_cfg, epochs=(3, 1, 1))
        assert plan.learning_rate(0) == pytest.approx(0.05)
        assert plan.learning_rate(3) == pytest.approx(0.05)

    def test_bad_plans(self, tiny_cfg):
        with pytest.raises(ConfigError):
            _plan(tiny_cfg, epochs=(1, 0, 1))
        with pytest.raises(ConfigError):
            FinetunePlan.from_config(dict(tiny_cfg["finetune"], number_format="int"), 3)


class TestProbabilisticQuantization:
    def test_alpha_extremes(self, rng):
        theta, r, beta = rng.normal(size=40), 1.0, 0.3
        full = probabilistic_quantized_forward(theta, 4, r, beta, 1.0)
        np.testing.assert_array_equal(full.data, quantize_Qhat(theta, 4, r, beta).data)
        none = probabilistic_quantized_forward(theta, 4, r, beta, 0.0)
        np.testing.assert_array_equal(none.data, np.clip(theta, -1.3, 1.3))

    def test_mixture_takes_one_of_the_two(self, rng):
        theta = rng.normal(size=200)
        mixed = probabilistic_quantized_forward(theta, 3, 1.0, 0.0, 0.5, make_stream(0, "quant"), "q").data
        quantized = probabilistic_quantized_forward(theta, 3, 1.0, 0.0, 1.0, number_format="q").data
        clipped = np.clip(theta, -1.0, 1.0)
        assert np.all((mixed == quantized) | (mixed == clipped))
        assert 0 < np.sum(mixed == quantized) < 200

    def test_float_layers_pass_through(self, rng):
        theta = rng.normal(size=5)
        np.testing.assert_array_equal(probabilistic_quantized_forward(theta, 32, None, 0.0, 0.7).data, theta)

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            probabilistic_quantized_forward(np.ones(3), 4, 1.0, 0.0, 1.5)


class TestExtraction:
    def test_shapes_follow_the_config(self, concrete):
        shapes = [(layer.name, layer.in_channels, layer.out_channels) for layer in concrete.layers]
        assert shapes == [("conv1", 1, 2), ("conv2", 2, 2), ("head", 2, 3)]
        assert concrete.layers[0].theta.shape == (2, 1, 3, 3)
        assert concrete.layers[2].theta.shape == (2, 3)
        assert all(layer.mask.all() for layer in concrete.weighted_layers())

    def test_weights_are_copied(self, tiny_net, concrete):
        concrete.layers[0].theta.data[...] = 0.0
        assert np.abs(tiny_net.layers[0].branches["conv3x3"].theta.data).sum() > 0

    def test_state_dict_round_trip(self, concrete):
        for layer in concrete.weighted_layers():
            layer.refresh_mask(layer.sparsity)
        tensors, meta = concrete.state_dict()
        other = clone(concrete)
        for layer in other.weighted_layers():
            layer.theta.data = layer.theta.data + 1.0
            layer.refresh_mask(1.0)
        other.load_state_dict(tensors, meta)
        for a, b in zip(concrete.weighted_layers(), other.weighted_layers()):
            np.testing.assert_array_equal(a.theta.data, b.theta.data)
            np.testing.assert_array_equal(a.mask, b.mask)
            assert a.beta == b.beta


class TestMasks:
    def test_pruned_elements_stay_pruned_as_the_ramp_grows(self, concrete):
        for layer in concrete.weighted_layers():
            theta = layer.theta.data.copy()
            pruned = np.zeros(theta.shape, dtype=bool)
            for p in np.linspace(0.0, 1.0 - layer.sparsity, 16):
                layer.refresh_mask(1.0 - p)
                now = layer.mask == 0
                assert np.all(now[pruned])
                assert int(layer.mask.sum()) == retained_count(1.0 - p, theta.size)
                pruned = now
            np.testing.assert_array_equal(layer.theta.data, theta)

    def test_shift_bound_projection(self):
        layer = ConcreteLayer("fc", "dense", 4, 1, 0.75, 4, theta=Tensor(np.array([[0.1], [-0.2], [0.7], [0.3]])),
                              beta=0.5, mask=np.array([[1.0], [1.0], [1.0], [0.0]]))
        hold_shift_bound(layer)
        np.testing.assert_array_equal(layer.theta.data.ravel(), [0.5, -0.5, 0.7, 0.3])

    def test_shift_bound_leaves_unshifted_layers_alone(self):
        theta = np.array([[0.1], [-0.2]])
        layer = ConcreteLayer("fc", "dense", 2, 1, 1.0, 32, theta=Tensor(theta.copy()), beta=0.5,
                              mask=np.ones((2, 1)))
        hold_shift_bound(layer)
        np.testing.assert_array_equal(layer.theta.data, theta)


class TestMetrics:
    def test_accuracy(self):
        assert accuracy(np.array([[0.1, 0.9], [2.0, 1.0]]), np.array([1, 1])) == 0.5

    def test_psnr(self):
        target = np.linspace(0.0, 1.0, 11)
        assert psnr(target + 0.1, target) == pytest.approx(20.0)
        assert math.isinf(psnr(target, target))


class TestIntegerDecomposition:
    def test_conv(self, rng):
        x, theta = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
        assert integer_decomposition_check(x, theta, 4, 1.0, 0.2) < 1e-9

    def test_dense(self, rng):
        x, theta = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        assert integer_decomposition_check(x, theta, 3, 0.8, 0.5, op="dense") < 1e-9

    def test_decomposed_forward_matches_training_weights(self, concrete, tiny_data):
        for layer in concrete.weighted_layers():
            layer.refresh_mask(layer.sparsity)
        np.testing.assert_allclose(decomposed_forward(concrete, tiny_data.x_test), predict(concrete, tiny_data.x_test),
                                   atol=1e-9)


class TestRunFinetune:
    def test_short_run(self, tiny_cfg, tiny_data, concrete, tmp_path):
        steps_per_epoch = len(tiny_data.x_train) // tiny_cfg["finetune"]["batch_size"]
        plan = FinetunePlan.from_config(tiny_cfg["finetune"], steps_per_epoch)
        result = run_finetune(concrete, plan, tiny_data, seed=3, batch_size=16, out_dir=tmp_path, progress=False)
        assert [row["stage"] for row in result.history] == [1, 2, 3]
        assert len(read_metrics(tmp_path / "finetune_metrics.csv")) == 3
        assert 0.0 <= result.metric <= 1.0
        assert np.isfinite(result.weight_norm_growth)
        for layer in result.net.weighted_layers():
            assert layer.mask.sum() == retained_count(layer.sparsity, layer.theta.size)
            kept = np.abs(layer.theta.data[layer.mask > 0])
            assert np.all(kept >= layer.beta)
            assert layer.r is None or layer.r.item() > 0

    def test_retained_counts_follow_the_ramp(self, tiny_cfg, tiny_data, concrete):
        plan = _plan(tiny_cfg)
        result = run_finetune(concrete, plan, tiny_data, seed=3, batch_size=16, progress=False)
        layers = result.net.weighted_layers()
        slack = max(1.0 / layer.theta.size for layer in layers)
        for row in result.history:
            step = (row["epoch"] + 1) * plan.steps_per_epoch - 1
            ramp = plan.ramp_fraction(step)
            expected = np.mean([
                retained_count(1.0 - (1.0 - layer.sparsity) * ramp, layer.theta.size) / layer.theta.size
                for layer in layers
            ])
            assert abs(row["sparsity_fraction"] - expected) <= slack

    def test_keeps_the_masks_of_the_last_step(self, tiny_cfg, tiny_data, concrete, monkeypatch):
        seen = []
        original = finetune.effective_weights

        def recording(net, alpha, rng, number_format):
            if rng is not None:
                seen.append([(layer.mask.copy(), layer.beta) for layer in net.weighted_layers()])
            return original(net, alpha, rng, number_format)

        monkeypatch.setattr(finetune, "effective_weights", recording)
        result = run_finetune(concrete, _plan(tiny_cfg), tiny_data, seed=3, batch_size=16, progress=False)
        assert len(seen) == 12
        for layer, (mask, beta) in zip(result.net.weighted_layers(), seen[-1]):
            np.testing.assert_array_equal(layer.mask, mask)
            assert layer.beta == beta

    def test_deployed_levels_match_trained_weights(self, tiny_cfg, tiny_data, concrete):
        result = run_finetune(concrete, _plan(tiny_cfg), tiny_data, seed=3, batch_size=16, progress=False)
        deployed = deploy_quantize(result.net, 8)
        for trained, layer in zip(result.net.weighted_layers(), deployed.weighted_layers()):
            np.testing.assert_allclose(layer.level_weights(), effective_weights_of(trained) * trained.mask,
                                       atol=1e-12)

    def test_same_seed_same_weights(self, tiny_cfg, tiny_data, tiny_net):
        runs = []
        for _ in range(2):
            net = extract_concrete(tiny_net, HALF)
            plan = FinetunePlan.from_config(tiny_cfg["finetune"], 3)
            runs.append(run_finetune(net, plan, tiny_data, seed=3, batch_size=16, progress=False).net)
        for a, b in zip(*(run.weighted_layers() for run in runs)):
            assert a.theta.data.tobytes() == b.theta.data.tobytes()


class TestDeployment:
    def test_grid_stays_close_and_pruned_stay_zero(self, concrete):
        for layer in concrete.weighted_layers():
            layer.refresh_mask(layer.sparsity)
        deployed = deploy_quantize(concrete, 8)
        for trained, layer in zip(concrete.weighted_layers(), deployed.weighted_layers()):
            assert np.all(layer.weights[layer.mask == 0] == 0.0)
            np.testing.assert_allclose(layer.level_weights(), effective_weights_of(trained) * trained.mask,
                                       atol=1e-12)
            assert np.abs(layer.weights - layer.level_weights()).max() <= layer.step_size / 2 + 1e-12
            assert np.abs(layer.codes).max() <= 2 ** 7 - 1

    def test_forward_shape(self, concrete, tiny_data):
        for layer in concrete.weighted_layers():
            layer.refresh_mask(layer.sparsity)
        out = deploy_quantize(concrete, 8).forward(tiny_data.x_test)
        assert out.shape == (len(tiny_data.x_test), 3)

    @pytest.mark.parametrize("grid_bits", [0, 32])
    def test_grid_bits_range(self, concrete, grid_bits):
        with pytest.raises(ValueError):
            deploy_quantize(concrete, grid_bits)
