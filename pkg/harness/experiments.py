"""Ablations of the search components and the relaxed-regularizer measurements at fixed π."""

import copy
import logging
from pathlib import Path

import numpy as np

from data_io import MetricsWriter
from data_io import make_stream
from dnas_search import gradient_variance
from dnas_search import measure_relaxed_regularizer
from dnas_search import resolve_target
from dnas_search import run_search
from harness.pipeline import finetune_and_deploy
from search_space import config_from_indices
from size_model import estimate_config
from supernet import build_supernet

logger = logging.getLogger(__name__)

# overrides of the `search` section per variant
ABLATIONS = {
    "full": {},
    "no_projection": {"projection": False},
    "no_rejection": {"rejection": False},
    "single_sample": {"samples": 1},
}

ABLATION_FIELDS = ["variant", "seed", "E", "target", "relative_error", "within_tolerance", "metric", "deployed_metric"]


def run_ablation(cfg: dict, data, grid=None, seeds=(0, 1), tolerance: float = 0.02, out_dir=None,
                 progress: bool = False) -> list[dict]:
    """Search then finetune once per (variant, seed); rows report constraint error and the final metric."""
    grid = ABLATIONS if grid is None else grid
    out = Path(out_dir) if out_dir else None
    writer = MetricsWriter(out / "ablation.csv", ABLATION_FIELDS) if out else None
    rows = []
    for variant, overrides in grid.items():
        for seed in seeds:
            run_cfg = copy.deepcopy(cfg)
            run_cfg["seed"] = seed
            run_cfg["search"].update(overrides)
            run_dir = out / f"{variant}_seed{seed}" if out else None
            result = run_search(run_cfg, data, run_dir, progress=progress)
            outcome = finetune_and_deploy(run_cfg, data, result.net, result.config, seed, result.target, run_dir,
                                          kind=variant)
            rel = result.estimate.relative_error()
            row = {"variant": variant, "seed": seed, "E": result.estimate.total, "target": result.target,
                   "relative_error": rel, "within_tolerance": int(abs(rel) <= tolerance),
                   "metric": outcome.metric, "deployed_metric": outcome.deployed_metric}
            rows.append(row)
            if writer:
                writer.write(row)
            logger.info("%s seed %d: relative error %+.4f, metric %.4f", variant, seed, rel, outcome.metric)
    return rows


# ----------------------------
# Relaxed regularizer at fixed π
# ----------------------------

TAUS = (0.66, 10.0)
# (column, ξ, ϑ); ξ = None leaves π unprojected
COLUMNS = (
    ("vanilla", None, 0.0),
    ("xi0.5_theta0", 0.5, 0.0),
    ("xi0.5_theta0.5", 0.5, 0.5),
    ("xi0.5_theta0.99", 0.5, 0.99),
)
GRID_FIELDS = ["tau", "column", "xi", "theta_mix", "L_E", "gradient_variance"]


def closest_config(layers, input_channels: int, target: float, cost: str, rng, draws: int = 4000):
    """Among uniformly drawn configurations, the one with E closest to e*."""
    best, gap = None, np.inf
    for _ in range(draws):
        indices = [{d.kind: int(rng.integers(len(d))) for d in layer.decisions} for layer in layers]
        g = abs(estimate_config(layers, indices, input_channels, cost=cost).total - target)
        if g < gap:
            best, gap = indices, g
    return config_from_indices(layers, best)


def pin_distribution(layers, config, confidence: float):
    """Set every decision to put `confidence` on the option chosen by `config`, the rest spread evenly."""
    for layer, choice in zip(layers, config):
        for d in layer.decisions:
            k = len(d)
            probs = np.full(k, (1.0 - confidence) / (k - 1)) if k > 1 else np.ones(1)
            probs[choice["indices"][d.kind]] = confidence if k > 1 else 1.0
            d.set_probs(probs)


def regularizer_grid(cfg: dict, data, draws: int = 200, confidence: float = 0.95, out_dir=None) -> list[dict]:
    """
    L_E over relaxed samples for τ x (projection, rejection mix) at a fixed π
    whose argmax configuration meets the target. Every cell reuses the same
    noise stream.
    """
    seed = cfg["seed"]
    net = build_supernet(cfg["space"], data.input_shape, data.num_outputs, data.task, rng=make_stream(seed, "init"))
    target, cost = resolve_target(cfg["target"], net)
    config = closest_config(net.layers, net.input_channels, target, cost, make_stream(seed, "trial"))
    pin_distribution(net.layers, config, confidence)
    r = int(cfg["search"].get("rejection_samples", 16))
    rows = []
    for tau in TAUS:
        variance = gradient_variance(net.layers, net.input_channels, target, tau, draws,
                                     rng=make_stream(seed, "sample"), cost=cost)
        for column, xi, theta_mix in COLUMNS:
            value = measure_relaxed_regularizer(net.layers, net.input_channels, target, tau, xi, theta_mix, draws,
                                                rng=make_stream(seed, "sample"), rejection_samples=r, cost=cost)
            rows.append({"tau": tau, "column": column, "xi": "" if xi is None else xi, "theta_mix": theta_mix,
                         "L_E": value, "gradient_variance": variance})
            logger.info("tau %.2f %s: L_E %.4f", tau, column, value)
    if out_dir:
        writer = MetricsWriter(Path(out_dir) / "regularizer_grid.csv", GRID_FIELDS)
        for row in rows:
            writer.write(row)
    return rows
