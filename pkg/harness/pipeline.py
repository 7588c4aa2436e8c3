"""Finetune, deploy and compress one configuration; shared by the CLI and the experiments."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

from codec.container import compress_network
from codec.container import format_report
from data_io import atomic_write_bytes
from data_io import atomic_write_json
from data_io import save_checkpoint
from dnas_search import resolve_target
from finetune import FinetunePlan
from finetune import decomposed_forward
from finetune import deploy_quantize
from finetune import extract_concrete
from finetune import run_finetune
from finetune import score
from size_model import estimate_config

logger = logging.getLogger(__name__)


@dataclass
class TrialOutcome:
    config: list
    estimate: object
    metric: float  # trained network, fully quantized forward
    deployed_metric: float  # after re-quantization to the b*-bit grid
    decomposed_metric: float  # integer weights plus the shared β·sign term
    weight_norm_growth: float
    payload_bits: int  # coded masks and values
    container: bytes
    report: list

    def summary(self) -> dict:
        return {
            "metric": self.metric,
            "deployed_metric": self.deployed_metric,
            "decomposed_metric": self.decomposed_metric,
            "weight_norm_growth": self.weight_norm_growth,
            "payload_bits": self.payload_bits,
            "E": self.estimate.total,
            "target": self.estimate.target,
            "relative_error": self.estimate.relative_error() if self.estimate.target else None,
        }


def make_plan(cfg: dict, data) -> FinetunePlan:
    batch = min(int(cfg["finetune"]["batch_size"]), len(data.x_train))
    return FinetunePlan.from_config(cfg["finetune"], math.ceil(len(data.x_train) / batch))


def finetune_and_deploy(cfg: dict, data, net, config, seed: int, target: float | None = None, out_dir=None,
                        progress: bool = False, kind: str = "udc", config_hash: str = "") -> TrialOutcome:
    """
    Extract `config` from the supernet, train it through the three stages,
    re-quantize for deployment and build the compressed container. With
    `out_dir` every artifact is written there.
    """
    settings = cfg["finetune"]
    plan = make_plan(cfg, data)
    concrete = extract_concrete(net, config)
    result = run_finetune(concrete, plan, data, seed, int(settings["batch_size"]), out_dir,
                          flip=settings.get("flip", False), crop_pad=settings.get("crop_pad", 0), progress=progress)
    deployed = deploy_quantize(result.net, plan.deploy_bits, plan.number_format)
    deployed_metric = deployed.evaluate(data.x_test, data.y_test)
    decomposed_metric = score(data.task, decomposed_forward(result.net, data.x_test, plan.number_format), data.y_test)
    blob, rows = compress_network(deployed, cfg["codec"]["mask_codec"], cfg["codec"]["value_codec"])
    _, cost = resolve_target(cfg["target"], net)
    estimate = estimate_config(net.layers, config, net.input_channels, target, cost)
    outcome = TrialOutcome(config, estimate, result.metric, deployed_metric, decomposed_metric,
                           result.weight_norm_growth, sum(row.stored_bits for row in rows), blob, rows)
    logger.info("finetuned: metric %.4f, deployed %.4f, %d payload bits", result.metric, deployed_metric,
                outcome.payload_bits)
    if out_dir:
        out = Path(out_dir)
        save_checkpoint(out / "finetune.ckpt", *result.net.state_dict(), config_hash)
        atomic_write_bytes(out / "model.udc", blob)
        atomic_write_bytes(out / "size_report.csv", format_report(rows, "csv").encode("utf-8"))
        atomic_write_json(out / "summary.json", {"kind": kind, "number_format": plan.number_format,
                                                 **outcome.summary()})
    return outcome
