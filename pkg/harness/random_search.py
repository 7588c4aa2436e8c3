"""
Random-search baseline: uniformly drawn configurations that satisfy the size
target, each trained with the same finetune pipeline as a searched one.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from tqdm import tqdm

from data_io import MetricsWriter
from data_io import derive_seed
from data_io import make_stream
from dnas_search import check_feasible
from dnas_search import resolve_target
from errors import ConfigError
from harness.pipeline import finetune_and_deploy
from search_space import config_from_indices
from size_model import estimate_config
from supernet import build_supernet

logger = logging.getLogger(__name__)

PERMUTATIONS = 100
TRIAL_FIELDS = ["trial", "metric", "deployed_metric", "E", "relative_error", "payload_bits"]
ENVELOPE_FIELDS = ["trials", "mean_best", "std_best"]


def sample_feasible_config(layers, input_channels: int, target: float, cost: str, rng, max_tries: int = 100000):
    """Uniform over option indices, rejected until E <= e*."""
    for _ in range(max_tries):
        indices = [{d.kind: int(rng.integers(len(d))) for d in layer.decisions} for layer in layers]
        if estimate_config(layers, indices, input_channels, cost=cost).total <= target:
            return config_from_indices(layers, indices)
    raise ConfigError("target", f"no configuration with E <= {target:.1f} in {max_tries} uniform draws")


def best_so_far_envelope(metrics, permutations: int = PERMUTATIONS, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of the running maximum over random orderings of the trials."""
    metrics = np.asarray(metrics, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    runs = np.stack([np.maximum.accumulate(metrics[rng.permutation(metrics.size)]) for _ in range(permutations)])
    return runs.mean(axis=0), runs.std(axis=0)


def random_search(cfg: dict, data, trials: int, jobs: int = 1, out_dir=None, progress: bool = True) -> dict:
    seed = cfg["seed"]
    net = build_supernet(cfg["space"], data.input_shape, data.num_outputs, data.task, rng=make_stream(seed, "init"))
    target, cost = resolve_target(cfg["target"], net)
    check_feasible(net, target, cost)
    configs = [sample_feasible_config(net.layers, net.input_channels, target, cost, make_stream(seed, "trial", i))
               for i in range(trials)]

    out = Path(out_dir) if out_dir else None

    def run(i):
        trial_dir = out / f"trial_{i:03d}" if out else None
        if trial_dir:
            trial_dir.mkdir(parents=True, exist_ok=True)
        return finetune_and_deploy(cfg, data, net, configs[i], derive_seed(seed, "trial", i), target, trial_dir,
                                   kind="random")

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        outcomes = list(tqdm(pool.map(run, range(trials)), total=trials, desc="random search", disable=not progress))

    rows = []
    for i, outcome in enumerate(outcomes):
        summary = outcome.summary()
        rows.append({"trial": i, "metric": outcome.metric, "deployed_metric": outcome.deployed_metric,
                     "E": summary["E"], "relative_error": summary["relative_error"],
                     "payload_bits": outcome.payload_bits})
    mean, std = best_so_far_envelope([row["metric"] for row in rows], rng=make_stream(seed, "trial", trials))
    envelope = [{"trials": n + 1, "mean_best": float(m), "std_best": float(s)} for n, (m, s) in enumerate(zip(mean, std))]
    if out:
        trial_writer = MetricsWriter(out / "random_search.csv", TRIAL_FIELDS)
        for row in rows:
            trial_writer.write(row)
        envelope_writer = MetricsWriter(out / "random_search_envelope.csv", ENVELOPE_FIELDS)
        for row in envelope:
            envelope_writer.write(row)
    logger.info("random search: best %.4f, median %.4f over %d trials", max(r["metric"] for r in rows),
                float(np.median([r["metric"] for r in rows])), trials)
    return {"trials": rows, "envelope": envelope, "target": target, "cost": cost}
