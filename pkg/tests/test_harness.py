"""Pipeline, random-search baseline, report merging and the slower experiment drivers."""

import json
from types import SimpleNamespace

import numpy as np
import pytest

import harness.random_search
from codec.container import decompress_network
from data_io import MetricsWriter
from data_io import derive_seed
from data_io import make_stream
from data_io import read_metrics
from dnas_search import resolve_target
from errors import ConfigError
from harness.experiments import COLUMNS
from harness.experiments import TAUS
from harness.experiments import closest_config
from harness.experiments import pin_distribution
from harness.experiments import regularizer_grid
from harness.experiments import run_ablation
from harness.pipeline import finetune_and_deploy
from harness.pipeline import make_plan
from harness.random_search import ENVELOPE_FIELDS
from harness.random_search import TRIAL_FIELDS
from harness.random_search import best_so_far_envelope
from harness.random_search import random_search
from harness.random_search import sample_feasible_config
from harness.reports import merge_reports
from search_space import extract_argmax_config
from size_model import estimate_config


class TestEnvelope:
    def test_running_maximum(self):
        mean, std = best_so_far_envelope([0.1, 0.5, 0.3], permutations=50)
        assert np.all(np.diff(mean) >= 0)
        assert mean[-1] == 0.5 and std[-1] == 0.0
        assert 0.1 < mean[0] < 0.5

    def test_single_trial(self):
        mean, std = best_so_far_envelope([0.7])
        np.testing.assert_array_equal(mean, [0.7])
        np.testing.assert_array_equal(std, [0.0])


class TestSampling:
    def test_feasible_configs_meet_the_target(self, tiny_net):
        target, cost = resolve_target({"fraction_of_dense8": 0.3}, tiny_net)
        rng = make_stream(0, "trial")
        for _ in range(5):
            config = sample_feasible_config(tiny_net.layers, tiny_net.input_channels, target, cost, rng)
            assert estimate_config(tiny_net.layers, config, tiny_net.input_channels).total <= target
            assert [c["name"] for c in config] == ["conv1", "conv2", "head"]

    def test_gives_up(self, tiny_net):
        with pytest.raises(ConfigError):
            sample_feasible_config(tiny_net.layers, tiny_net.input_channels, 1.0, "compressed-bits",
                                   make_stream(0, "trial"), max_tries=20)

    def test_pinned_distribution_has_the_chosen_argmax(self, tiny_net):
        target, cost = resolve_target({"fraction_of_dense8": 0.3}, tiny_net)
        config = closest_config(tiny_net.layers, tiny_net.input_channels, target, cost, make_stream(0, "trial"),
                                draws=50)
        pin_distribution(tiny_net.layers, config, 0.9)
        assert [c["indices"] for c in extract_argmax_config(tiny_net.layers)] == [c["indices"] for c in config]
        conv1 = tiny_net.layers[0]
        assert conv1.width.probs.max() == pytest.approx(0.9)


def test_make_plan_rounds_partial_batches(tiny_cfg, tiny_data):
    tiny_cfg["finetune"]["batch_size"] = 20
    plan = make_plan(tiny_cfg, tiny_data)
    assert plan.steps_per_epoch == 3


def test_trials_train_with_their_own_seeds(tiny_cfg, tiny_data, monkeypatch):
    seeds = []

    def record(cfg, data, net, config, seed, target, out_dir, kind="udc"):
        seeds.append(seed)
        return SimpleNamespace(metric=0.5, deployed_metric=0.5, payload_bits=10,
                               summary=lambda: {"E": 1.0, "relative_error": 0.0})

    monkeypatch.setattr(harness.random_search, "finetune_and_deploy", record)
    random_search(tiny_cfg, tiny_data, trials=3, jobs=1, progress=False)
    assert seeds == [derive_seed(tiny_cfg["seed"], "trial", i) for i in range(3)]
    assert len(set(seeds)) == 3


class TestPipeline:
    def test_artifacts(self, tiny_cfg, tiny_data, tiny_net, tmp_path):
        config = extract_argmax_config(tiny_net.layers)
        target, _ = resolve_target(tiny_cfg["target"], tiny_net)
        outcome = finetune_and_deploy(tiny_cfg, tiny_data, tiny_net, config, 3, target, tmp_path, kind="udc")
        assert outcome.payload_bits == sum(row.stored_bits for row in outcome.report)
        restored = decompress_network((tmp_path / "model.udc").read_bytes())
        assert restored.evaluate(tiny_data.x_test, tiny_data.y_test) == outcome.deployed_metric
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["kind"] == "udc"
        assert summary["E"] == pytest.approx(outcome.estimate.total)
        assert (tmp_path / "finetune.ckpt").exists()
        assert len(read_metrics(tmp_path / "finetune_metrics.csv")) == 3
        assert (tmp_path / "size_report.csv").read_text().startswith("name,")


class TestMergeReports:
    def _random_run(self, path):
        trials = MetricsWriter(path / "random_search.csv", TRIAL_FIELDS)
        for i, metric in enumerate((0.4, 0.6)):
            trials.write({"trial": i, "metric": metric, "deployed_metric": metric, "E": 100.0 + i,
                          "relative_error": -0.1, "payload_bits": 90})
        envelope = MetricsWriter(path / "random_search_envelope.csv", ENVELOPE_FIELDS)
        envelope.write({"trials": 1, "mean_best": 0.5, "std_best": 0.1})
        envelope.write({"trials": 2, "mean_best": 0.6, "std_best": 0.0})

    def test_merges_searched_and_random_runs(self, tmp_path):
        searched = tmp_path / "udc"
        searched.mkdir()
        (searched / "summary.json").write_text(json.dumps({
            "kind": "udc", "number_format": "qhat", "E": 120.0, "payload_bits": 110, "metric": 0.7,
            "deployed_metric": 0.69}))
        MetricsWriter(searched / "finetune_metrics.csv", ["epoch", "stage", "weight_norm", "metric"]).write(
            {"epoch": 0, "stage": 1, "weight_norm": 2.5, "metric": 0.6})
        baseline = tmp_path / "random"
        baseline.mkdir()
        self._random_run(baseline)

        summary = merge_reports([searched, baseline], tmp_path / "merged")
        assert summary["random"] == {"kind": "random", "trials": 2, "best": 0.6}
        scatter = read_metrics(tmp_path / "merged" / "size_vs_metric.csv")
        assert [row["kind"] for row in scatter] == ["udc", "random", "random"]
        envelope = read_metrics(tmp_path / "merged" / "random_envelope.csv")
        assert [float(row["searched_metric"]) for row in envelope] == [0.7, 0.7]
        norms = read_metrics(tmp_path / "merged" / "weight_norms.csv")
        assert norms[0]["number_format"] == "qhat"

    def test_rerun_replaces_outputs(self, tmp_path):
        run = tmp_path / "random"
        run.mkdir()
        self._random_run(run)
        merge_reports([run], tmp_path / "merged")
        merge_reports([run], tmp_path / "merged")
        assert len(read_metrics(tmp_path / "merged" / "size_vs_metric.csv")) == 2

    def test_missing_run(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            merge_reports([tmp_path / "absent"], tmp_path / "merged")


@pytest.mark.slow
def test_random_search(tiny_cfg, tiny_data, tmp_path):
    result = random_search(tiny_cfg, tiny_data, trials=2, jobs=2, out_dir=tmp_path, progress=False)
    assert len(result["trials"]) == 2
    assert all(row["E"] <= result["target"] for row in result["trials"])
    assert [row["trials"] for row in result["envelope"]] == [1, 2]
    assert len(read_metrics(tmp_path / "random_search.csv")) == 2
    assert (tmp_path / "trial_000" / "model.udc").exists()


@pytest.mark.slow
def test_regularizer_grid(tiny_cfg, tiny_data, tmp_path):
    rows = regularizer_grid(tiny_cfg, tiny_data, draws=20, out_dir=tmp_path)
    assert len(rows) == len(TAUS) * len(COLUMNS)
    assert all(row["L_E"] >= 0 and np.isfinite(row["gradient_variance"]) for row in rows)
    assert len(read_metrics(tmp_path / "regularizer_grid.csv")) == len(rows)


def test_regularizer_grid_directions(tiny_cfg, tiny_data):
    rows = {(row["tau"], row["column"]): row for row in regularizer_grid(tiny_cfg, tiny_data, draws=200)}
    low, high = TAUS
    # sharper samples sit closer to the argmax configuration
    assert rows[(low, "vanilla")]["L_E"] < rows[(high, "vanilla")]["L_E"]
    # rejection-sampled mixtures agree with the argmax more often than plain relaxed samples
    assert rows[(low, "xi0.5_theta0.99")]["L_E"] < rows[(low, "xi0.5_theta0")]["L_E"]
    # and the price of a low temperature is noisier architecture gradients
    assert rows[(low, "vanilla")]["gradient_variance"] > rows[(high, "vanilla")]["gradient_variance"]


@pytest.mark.slow
def test_ablation(tiny_cfg, tiny_data, tmp_path):
    rows = run_ablation(tiny_cfg, tiny_data, grid={"full": {}, "single_sample": {"samples": 1}}, seeds=(0,),
                        out_dir=tmp_path)
    assert [row["variant"] for row in rows] == ["full", "single_sample"]
    assert all(row["within_tolerance"] in (0, 1) for row in rows)
    assert (tmp_path / "full_seed0" / "arch.json").exists()
