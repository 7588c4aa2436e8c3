import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from codec.container import compress_network
from codec.container import decompress_network
from codec.container import format_report
from codec.container import verify_container
from configreader import SEARCH_SECTIONS
from configreader import config_hash
from configreader import load_config
from configreader import save_config
from data_io import atomic_write_bytes
from data_io import atomic_write_json
from data_io import load_checkpoint
from data_io import load_dataset
from data_io import make_stream
from data_io import save_checkpoint
from dnas_search import init_search_state
from dnas_search import resolve_target
from dnas_search import run_search
from errors import UDCError
from finetune import deploy_quantize
from finetune import extract_concrete
from harness.experiments import run_ablation
from harness.experiments import regularizer_grid
from harness.pipeline import finetune_and_deploy
from harness.pipeline import make_plan
from harness.random_search import random_search
from harness.reports import merge_reports
from size_model import space_bounds
from supernet import build_supernet

logger = logging.getLogger("udc")

EXIT_OK = 0
EXIT_OUTSIDE_TOLERANCE = 1
EXIT_ERROR = 2


def setup_logging(verbose: int, quiet: bool):
    level = logging.ERROR if quiet else [logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _progress(args) -> bool:
    return not args.quiet and sys.stderr.isatty()


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def prepare(args) -> tuple[dict, Path]:
    """Resolved config (with --seed and --format applied) and the output directory."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "format", None):
        cfg["finetune"]["number_format"] = args.format
    out = Path(args.out or cfg["output"]["dir"])
    return cfg, out


def _supernet(cfg: dict, data):
    return build_supernet(cfg["space"], data.input_shape, data.num_outputs, data.task,
                          rng=make_stream(cfg["seed"], "init"))


def _searched(cfg: dict, data, checkpoint: Path, arch: Path):
    """Supernet restored from a search checkpoint, plus the stored configuration."""
    net = _supernet(cfg, data)
    target, cost = resolve_target(cfg["target"], net)
    state = init_search_state(cfg, net, data, target, cost)
    state.load_state_dict(*load_checkpoint(_require(checkpoint, "search checkpoint"), config_hash(cfg, SEARCH_SECTIONS)))
    with open(_require(arch, "architecture file"), encoding="utf-8") as f:
        config = json.load(f)["layers"]
    return net, config, target


# ----------------------------
# Subcommands
# ----------------------------

def cmd_search(args) -> int:
    cfg, out = prepare(args)
    data = load_dataset(cfg["dataset"], cfg["seed"])
    if args.dry_run:
        net = _supernet(cfg, data)
        target, cost = resolve_target(cfg["target"], net)
        bounds = space_bounds(net.layers, net.input_channels, cost)
        print(f"configurations: {bounds['count']}")
        print(f"achievable {cost}: min {bounds['min']:.1f}, max {bounds['max']:.1f}")
        print(f"target: {target:.1f} ({'feasible' if target >= bounds['min'] else 'below the achievable floor'})")
        return EXIT_OK if target >= bounds["min"] else EXIT_ERROR

    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    result = run_search(cfg, data, out, resume=args.checkpoint, config_hash=config_hash(cfg, SEARCH_SECTIONS),
                        progress=_progress(args))
    rel = result.estimate.relative_error()
    print(f"E(argmax) = {result.estimate.total:.1f}, target {result.target:.1f}, relative error {rel:+.4f}")
    for layer in result.config:
        print(f"  {layer['name']}: {layer['operator']}, width {layer['width']}, "
              f"kept {layer['sparsity']}, {layer['bitwidth']} bits")
    if abs(rel) > args.tolerance:
        print(f"outside tolerance {args.tolerance}")
        return EXIT_OUTSIDE_TOLERANCE
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, out = prepare(args)
    data = load_dataset(cfg["dataset"], cfg["seed"])
    net, config, target = _searched(cfg, data, args.checkpoint or out / "search.ckpt", args.arch or out / "arch.json")
    out.mkdir(parents=True, exist_ok=True)
    outcome = finetune_and_deploy(cfg, data, net, config, cfg["seed"], target, out, progress=_progress(args),
                                  config_hash=config_hash(cfg))
    print(f"metric {outcome.metric:.4f}, deployed {outcome.deployed_metric:.4f}, "
          f"decomposed {outcome.decomposed_metric:.4f}")
    print(f"weight norm growth {outcome.weight_norm_growth:.3f}, payload {outcome.payload_bits} bits")
    print(format_report(outcome.report, "text"))
    return EXIT_OK


def cmd_compress(args) -> int:
    cfg, out = prepare(args)
    data = load_dataset(cfg["dataset"], cfg["seed"])
    with open(_require(args.arch or out / "arch.json", "architecture file"), encoding="utf-8") as f:
        config = json.load(f)["layers"]
    concrete = extract_concrete(_supernet(cfg, data), config)
    concrete.load_state_dict(*load_checkpoint(_require(args.checkpoint or out / "finetune.ckpt",
                                                       "finetune checkpoint"), config_hash(cfg)))
    plan = make_plan(cfg, data)
    deployed = deploy_quantize(concrete, plan.deploy_bits, plan.number_format)
    blob, rows = compress_network(deployed, cfg["codec"]["mask_codec"], cfg["codec"]["value_codec"])
    container = Path(args.container or out / "model.udc")
    atomic_write_bytes(container, blob)
    print(f"wrote {container} ({len(blob)} bytes)")
    print(format_report(rows, "text"))
    return EXIT_OK


def cmd_decompress(args) -> int:
    cfg, out = prepare(args)
    container = _require(args.container or out / "model.udc", "container")
    net = decompress_network(container.read_bytes())
    tensors = {}
    for layer in net.weighted_layers():
        tensors[f"{layer.name}/weights"] = layer.weights
        tensors[f"{layer.name}/bias"] = layer.bias
        tensors[f"{layer.name}/mask"] = layer.mask.astype(np.float64)
    meta = {"kind": "deployed", "layers": [
        {"name": l.name, "op": l.op, "bits": l.bits, "grid_bits": l.grid_bits, "step": l.step_size}
        for l in net.weighted_layers()]}
    target = out / "decompressed.ckpt"
    save_checkpoint(target, tensors, meta, "")
    data = load_dataset(cfg["dataset"], cfg["seed"])
    print(f"wrote {target}; test metric {net.evaluate(data.x_test, data.y_test):.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg, out = prepare(args)
    container = _require(args.container or out / "model.udc", "container")
    data = load_dataset(cfg["dataset"], cfg["seed"])
    target, cost = resolve_target(cfg["target"], _supernet(cfg, data))
    result = verify_container(container.read_bytes(), target if cost == "compressed-bits" else None, args.tolerance)
    print(format_report(result.rows, "csv"))
    print(format_report(result.rows, "text"))
    print(f"payload {result.payload_bits} bits, container {result.container_bits} bits", end="")
    if result.target_bits is not None:
        print(f", target {result.target_bits:.1f} bits x {1 + args.tolerance:.2f}")
    else:
        print()
    if not result.fits:
        print("container exceeds the size target")
        return EXIT_OUTSIDE_TOLERANCE
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out or "runs/report")
    summary = merge_reports(args.runs, out)
    print(f"merged {len(args.runs)} runs into {out}")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_random_search(args) -> int:
    cfg, out = prepare(args)
    data = load_dataset(cfg["dataset"], cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    result = random_search(cfg, data, args.trials, args.jobs, out, progress=_progress(args))
    best = result["envelope"][-1]["mean_best"]
    print(f"{args.trials} trials; best-so-far after all trials {best:.4f}")
    return EXIT_OK


def cmd_regularizer_grid(args) -> int:
    cfg, out = prepare(args)
    data = load_dataset(cfg["dataset"], cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    rows = regularizer_grid(cfg, data, draws=args.draws, out_dir=out)
    for row in rows:
        print(f"tau {row['tau']:<5} {row['column']:<16} L_E {row['L_E']:.4f}  grad var {row['gradient_variance']:.3e}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, out = prepare(args)
    data = load_dataset(cfg["dataset"], cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    rows = run_ablation(cfg, data, seeds=range(args.seeds), tolerance=args.tolerance, out_dir=out,
                        progress=_progress(args))
    for row in rows:
        print(f"{row['variant']:<14} seed {row['seed']}: relative error {row['relative_error']:+.4f}, "
              f"metric {row['metric']:.4f}")
    atomic_write_json(out / "ablation.json", {"rows": rows})
    return EXIT_OK


# ----------------------------
# Entry point
# ----------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Path to a JSON config (default: $UDC_CONFIG or the bundled toy config)")
    common.add_argument("--seed", type=int, help="Override the config seed")
    common.add_argument("--out", help="Output directory (default: output.dir of the config)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="More logging (-vv for debug)")
    common.add_argument("--quiet", action="store_true", help="Errors only, no progress bars")

    parser = argparse.ArgumentParser(prog="udc", description="Size-constrained architecture search and compression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", parents=[common], help="Run the differentiable search")
    p.add_argument("--dry-run", action="store_true", help="Print the space size and achievable range, no training")
    p.add_argument("--tolerance", type=float, default=0.02, help="Allowed |E - e*| / e* (default 0.02)")
    p.add_argument("--checkpoint", help="Resume from this search checkpoint")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("finetune", parents=[common], help="Train, deploy and compress the searched network")
    p.add_argument("--checkpoint", help="Search checkpoint (default: <out>/search.ckpt)")
    p.add_argument("--arch", help="Searched configuration (default: <out>/arch.json)")
    p.add_argument("--format", choices=["qhat", "q"], help="Weight number format")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("compress", parents=[common], help="Write the container of a finetuned network")
    p.add_argument("--checkpoint", help="Finetune checkpoint (default: <out>/finetune.ckpt)")
    p.add_argument("--arch", help="Searched configuration (default: <out>/arch.json)")
    p.add_argument("--container", help="Output container (default: <out>/model.udc)")
    p.add_argument("--format", choices=["qhat", "q"], help="Weight number format")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", parents=[common], help="Decode a container into deployed weights")
    p.add_argument("--container", help="Container (default: <out>/model.udc)")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("verify", parents=[common], help="Predicted vs achieved size per layer")
    p.add_argument("--container", help="Container (default: <out>/model.udc)")
    p.add_argument("--tolerance", type=float, default=0.02, help="Allowed excess over the target (default 0.02)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", parents=[common], help="Merge run directories into plot-ready CSVs")
    p.add_argument("runs", nargs="+", help="Run directories")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("random-search", parents=[common], help="Random feasible configurations, trained identically")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--format", choices=["qhat", "q"], help="Weight number format")
    p.set_defaults(func=cmd_random_search)

    p = sub.add_parser("regularizer-grid", parents=[common], help="Relaxed regularizer at fixed π over τ, ξ and ϑ")
    p.add_argument("--draws", type=int, default=200)
    p.set_defaults(func=cmd_regularizer_grid)

    p = sub.add_parser("ablate", parents=[common], help="Search with components switched off")
    p.add_argument("--seeds", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=0.02)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except (UDCError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
