#!/usr/bin/env python3
"""
Layout Lab Command Line

Subcommands: gen-data, pretrain, train-layout, sample, eval, diagnose,
count-costs, layout (validate / convert) and ablate.

Every flag can also be set through a LAYOUTLAB_<FLAG> environment variable
(a .env file is honored); a --config JSON file overrides both. Each run
writes a manifest.json beside its outputs.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from . import __version__
from .ablation_graph import ablate_strategies as run_strategy_ablation
from .ablation_graph import run_ablation
from .base import (
    ENV_PREFIX, ConfigurationError, ExperimentConfig, LabError, LayoutRulesConfig, ModelConfig,
    NumericalError, OracleConfig, TrainConfig,
)
from .diagnostics import (
    CostReport, count_costs, instrumented_costs, probe_similarity, write_cost_report, write_similarity_csv,
)
from .diffusion import SamplerTrace, pretrain_base, probe_inputs, sample_image, train_layout
from .encoders import Vocabulary, encode_layout, load_layout_document, save_layout_document
from .layoutkit import COARSE_KINDS, DATASET_MODE, FORMAT_MODE, convert_document, validate
from .mmdit import VariantTag, load_checkpoint, save_checkpoint
from .scenes import benchmark, build_dataset, chance_baseline, check_disjoint, load_dataset, split_seeds
from .utils.io_utils import load_json, read_csv, save_json, save_ppm, save_tensor, write_manifest
from .utils.report_utils import save_svg, svg_line_chart
from .utils.rng import Rng

logger = logging.getLogger(__name__)

LOG_FILE = "layoutlab.log"
SAMPLE_STEPS_ENV = ENV_PREFIX + "SAMPLE_STEPS"
OVERRIDE_SECTIONS = ("model", "train", "oracle", "rules", "experiment")
TRAIN_FLAGS = ("steps", "batch_size", "learning_rate", "optimizer", "seed", "lambda_region",
               "diagnostic_interval", "log_interval", "jobs", "probe_size")
EXPERIMENT_FLAGS = {"name": "name", "out": "out_dir", "seeds": "seeds", "seed": "base_seed",
                    "train_scenes": "train_scenes", "eval_scenes": "eval_scenes",
                    "pretrain_steps": "pretrain_steps", "layout_steps": "layout_steps",
                    "sample_steps": "sample_steps", "eta": "eta", "jobs": "jobs",
                    "strategy_target": "strategy_target"}


# --- Configuration ---

def env_name(flag: str) -> str:
    return ENV_PREFIX + flag.lstrip("-").upper().replace("-", "_")


def _flag(parser: argparse.ArgumentParser, flag: str, env: Optional[str] = None, **kwargs) -> None:
    """Add an option whose default may come from LAYOUTLAB_<FLAG> (or ``env``)."""
    value = os.getenv(env or env_name(flag))
    if value is not None:
        if kwargs.get("action") == "store_true":
            kwargs["default"] = value.lower() in ("1", "true", "yes", "on")
        else:
            kwargs["default"] = value
    parser.add_argument(flag, **kwargs)


def _load_overrides(args: argparse.Namespace) -> Dict[str, Dict[str, Any]]:
    """
    Apply a --config JSON file: top-level keys override flags, sections
    (model, train, oracle, rules, experiment) override config fields.

    Raises:
        ConfigurationError: On unreadable files or unknown keys.
    """
    sections: Dict[str, Dict[str, Any]] = {name: {} for name in OVERRIDE_SECTIONS}
    if not getattr(args, "config", None):
        return sections
    try:
        payload = load_json(args.config)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read config {args.config}: {e}")
    if not isinstance(payload, dict):
        raise ConfigurationError("Config JSON must be an object")
    for key, value in payload.items():
        if key in OVERRIDE_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"Config section '{key}' must be an object")
            sections[key].update(value)
            continue
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise ConfigurationError(f"Unknown config key '{key}' for '{args.command}'")
        setattr(args, dest, value)
    return sections


def _build(config_cls, values: Dict[str, Any]):
    try:
        return config_cls(**values)
    except TypeError as e:
        raise ConfigurationError(f"Invalid {config_cls.__name__} fields: {e}")


def model_config(overrides: Dict[str, Dict[str, Any]]) -> ModelConfig:
    return _build(ModelConfig, overrides["model"])


def train_config(args: argparse.Namespace, overrides: Dict[str, Dict[str, Any]]) -> TrainConfig:
    values = {name: getattr(args, name) for name in TRAIN_FLAGS if getattr(args, name, None) is not None}
    if getattr(args, "no_bias_sampling", False):
        values["bias_sampling"] = False
    values.update(overrides["train"])
    return _build(TrainConfig, values)


def experiment_config(args: argparse.Namespace, overrides: Dict[str, Dict[str, Any]]) -> ExperimentConfig:
    values = {field_name: getattr(args, flag) for flag, field_name in EXPERIMENT_FLAGS.items()
              if getattr(args, flag, None) is not None}
    if getattr(args, "variants", None):
        values["variants"] = [v.strip() for v in args.variants.split(",") if v.strip()]
    values.update(overrides["experiment"])
    return _build(ExperimentConfig, values)


def _manifest(run_dir: Path, command: str, config: Dict[str, Any], seed: Optional[int], outputs) -> Path:
    return write_manifest(run_dir, command, config, seed, outputs, __version__)


# --- Commands ---

def cmd_gen_data(args, overrides) -> int:
    cfg = model_config(overrides)
    out = Path(args.out)
    seed = args.seed or 0
    seeds = split_seeds(args.split, args.count, seed)
    if args.train_data:
        check_disjoint(load_dataset(args.train_data, cfg).seeds, seeds)
    _, written = build_dataset(out, args.split, seeds, cfg, jobs=args.jobs or 1)
    _manifest(out, f"gen-data --split {args.split}", {"model": cfg.to_dict(), "count": args.count}, seed, written)
    return 0


def _write_training_outputs(result, out: Path, name: str, step: int, seed: int) -> List[Path]:
    outputs = [save_checkpoint(result.weights, out / name, step, seed)]
    metrics = out / "metrics.csv"
    result.metrics.write_csv(metrics)
    outputs.append(metrics)
    if result.metrics.probes:
        outputs.append(write_similarity_csv(out / "similarity.csv", result.metrics.probes))
    return outputs


def cmd_pretrain(args, overrides) -> int:
    cfg = model_config(overrides)
    train = train_config(args, overrides)
    dataset = load_dataset(args.data, cfg)
    result = pretrain_base(dataset, cfg, train)
    out = Path(args.out)
    outputs = _write_training_outputs(result, out, "base.ckpt", train.steps, train.seed)
    _manifest(out, "pretrain", {"model": cfg.to_dict(), "train": train.to_dict()}, train.seed, outputs)
    return 0


def cmd_train_layout(args, overrides) -> int:
    base, _ = load_checkpoint(args.base)
    train = train_config(args, overrides)
    variant = VariantTag.parse(args.variant, base.config.lora_rank)
    dataset = load_dataset(args.data, base.config)
    result = train_layout(base, variant, dataset, train)
    out = Path(args.out)
    outputs = _write_training_outputs(result, out, "layout.ckpt", train.steps, train.seed)
    config = {"model": base.config.to_dict(), "train": train.to_dict(), "variant": str(variant)}
    _manifest(out, f"train-layout --variant {variant}", config, train.seed, outputs)
    return 0


def cmd_sample(args, overrides) -> int:
    weights, _ = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.load(args.vocab) if args.vocab else Vocabulary.default()
    cfg = weights.config
    layout = encode_layout(load_layout_document(args.layout), vocab, cfg.caption_len, cfg.region_len,
                           cfg.max_entities)
    trace = SamplerTrace()
    image = sample_image(weights, layout, args.steps, args.eta, args.seed,
                         layout_fraction=args.layout_fraction, trace=trace)
    out = Path(args.out)
    outputs = [save_ppm(out, image)]
    if args.tensor:
        outputs.append(save_tensor(out.with_suffix(".tnsr"), image))
    if args.trace:
        outputs.append(save_json(out.with_suffix(".trace.json"), vars(trace)))
    config = {"checkpoint": str(args.checkpoint), "layout": str(args.layout), "steps": args.steps,
              "eta": args.eta, "layout_fraction": args.layout_fraction}
    _manifest(out.parent, "sample", config, args.seed, outputs)
    return 0


def cmd_eval(args, overrides) -> int:
    weights, _ = load_checkpoint(args.checkpoint)
    eval_set = load_dataset(args.data, weights.config)
    training_seeds = load_dataset(args.train_data, weights.config).seeds if args.train_data else None
    oracle = _build(OracleConfig, overrides["oracle"])
    seeds = list(range(args.seed or 0, (args.seed or 0) + args.seeds))
    table = benchmark(weights, eval_set, args.steps, seeds, args.eta, training_seeds, oracle,
                      label=args.label, jobs=args.jobs or 1)
    out = Path(args.out)
    outputs = [table.write_csv(out / "benchmark.csv")]
    if args.chance:
        base, _ = load_checkpoint(args.chance)
        chance = chance_baseline(base, eval_set, args.steps, seeds, eta=args.eta,
                                 training_seeds=training_seeds, oracle_config=oracle, jobs=args.jobs or 1)
        outputs.append(chance.write_csv(out / "chance.csv"))
    config = {"checkpoint": str(args.checkpoint), "data": str(args.data), "steps": args.steps,
              "oracle": oracle.__dict__}
    _manifest(out, "eval", config, args.seed, outputs)
    print(json.dumps(table.mean(), indent=2))
    return 0


def cmd_diagnose(args, overrides) -> int:
    weights, header = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, weights.config)
    train = train_config(args, overrides)
    inputs = probe_inputs(dataset, train, Rng(train.seed).substream("probe"))
    similarity = probe_similarity(weights, inputs)
    step = int(header.get("step", 0))
    out = Path(args.out)
    outputs = [
        write_similarity_csv(out / "similarity.csv", [(step, similarity)]),
        save_json(out / "similarity.json", {"step": step, "image_text": similarity.image_text,
                                            "image_layout": similarity.image_layout}),
    ]
    if args.trend:
        outputs.append(save_svg(out / "trend.svg", trend_chart(read_csv(args.trend))))
    _manifest(out, "diagnose", {"checkpoint": str(args.checkpoint), "train": train.to_dict()}, train.seed, outputs)
    print(json.dumps({"image_text": similarity.image_text, "image_layout": similarity.image_layout}))
    return 0


def trend_chart(rows: Sequence[Dict[str, str]]) -> str:
    """Block/head-averaged similarity per step from a similarity CSV."""
    series = {}
    for column, label in (("sim_text", "image-text"), ("sim_layout", "image-layout")):
        by_step: Dict[int, List[float]] = {}
        for row in rows:
            if row.get(column):
                by_step.setdefault(int(row["step"]), []).append(float(row[column]))
        if by_step:
            series[label] = [(s, float(np.mean(v))) for s, v in sorted(by_step.items())]
    return svg_line_chart(series, title="Attention similarity", y_label="top-1% score")


def cmd_count_costs(args, overrides) -> int:
    cfg = model_config(overrides)
    variant = VariantTag.parse(args.variant, cfg.lora_rank)
    entity_counts = [int(n) for n in str(args.entities).split(",") if n.strip()]
    reports: List[CostReport] = []
    for entities in entity_counts:
        report = count_costs(cfg, variant, entities)
        if args.instrumented:
            measured = instrumented_costs(cfg, variant, entities, args.seed or 0)
            if measured != report:
                logger.error(f"Analytic costs {report} differ from instrumented {measured}")
                raise NumericalError(f"Cost mismatch for {variant} at N={entities}")
        reports.append(report)
    print(json.dumps([r.to_dict() for r in reports], indent=2))
    if args.out:
        out = Path(args.out)
        written = write_cost_report(out, reports)
        _manifest(out.parent, "count-costs", {"model": cfg.to_dict(), "variant": str(variant),
                                              "entities": entity_counts}, args.seed, [written])
    return 0


def cmd_layout(args, overrides) -> int:
    rules = _build(LayoutRulesConfig, overrides["rules"])
    if args.layout_command == "validate":
        report = validate(load_layout_document(args.file), args.mode, rules)
        print(json.dumps(report.to_dict(), indent=2))
        return 0 if report.valid else 1

    kind = next(k for k in COARSE_KINDS if getattr(args, k))
    source = getattr(args, kind)
    try:
        payload = load_json(source)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read coarse layout {source}: {e}")
    document = convert_document(payload, kind, rules)
    report = validate(document, FORMAT_MODE, rules)
    if args.out:
        out = save_layout_document(document, args.out)
        _manifest(out.parent, f"layout convert --{kind}", {"rules": rules.__dict__, "source": str(source)},
                  None, [out])
    else:
        print(json.dumps(document.to_dict(), indent=2))
    return 0 if report.valid else 1


def ablate_strategies(config: ExperimentConfig, model: Optional[ModelConfig] = None,
                      train: Optional[TrainConfig] = None) -> Dict:
    """Train the strategy variant under {bias on/off} x {lambda values}; returns steps-to-threshold."""
    return run_strategy_ablation(config, model or ModelConfig(), train or TrainConfig())


def cmd_ablate(args, overrides) -> int:
    experiment = experiment_config(args, overrides)
    cfg = model_config(overrides)
    train = train_config(args, overrides)
    logger.info(f"Starting ablation {experiment!r}")
    if args.strategies:
        report = ablate_strategies(experiment, cfg, train)
        for row in report["summary"]:
            logger.info(f"{row['condition']}: median steps to threshold {row['median_steps']}")
    else:
        report = run_ablation(experiment, cfg, train)
        logger.info(f"Spatial ranking: {report['ranking']}")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, Dict], int]] = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-layout": cmd_train_layout,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "count-costs": cmd_count_costs,
    "layout": cmd_layout,
    "ablate": cmd_ablate,
}


# --- Parser ---

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file overriding flags and config fields")
    parser.add_argument("--verbose", action="store_true", help="Enable verbose logging")


def _training_flags(parser: argparse.ArgumentParser) -> None:
    _flag(parser, "--steps", type=int, help="Training steps")
    _flag(parser, "--batch-size", type=int, help="Samples per step")
    _flag(parser, "--learning-rate", type=float, help="Optimizer learning rate")
    _flag(parser, "--optimizer", choices=["adam", "sgd"], help="Optimizer")
    _flag(parser, "--seed", type=int, help="Run seed")
    _flag(parser, "--lambda-region", type=float, help="Weight of the region-aware loss")
    _flag(parser, "--no-bias-sampling", action="store_true", help="Uniform timestep sampling")
    _flag(parser, "--diagnostic-interval", type=int, help="Steps between attention probes (0 disables)")
    _flag(parser, "--log-interval", type=int, help="Steps between progress lines")
    _flag(parser, "--jobs", type=int, help="Worker threads for per-sample forwards")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layoutlab",
        description="Desk-scale lab comparing layout conditioning variants for MM-DiT.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate a synthetic scene dataset")
    _common(p)
    _flag(p, "--split", choices=["train", "eval"], default="train", help="Dataset split")
    _flag(p, "--count", type=int, default=2000, help="Number of scenes")
    _flag(p, "--out", required=not os.getenv(env_name("--out")), help="Dataset directory")
    _flag(p, "--seed", type=int, help="Base seed of the split")
    _flag(p, "--train-data", help="Training dataset to check seed disjointness against")
    _flag(p, "--jobs", type=int, help="Worker threads")

    p = sub.add_parser("pretrain", help="Pretrain the Base model on captions")
    _common(p)
    _flag(p, "--data", required=True, help="Training dataset directory")
    _flag(p, "--out", required=not os.getenv(env_name("--out")), help="Run directory")
    _training_flags(p)

    p = sub.add_parser("train-layout", help="Train a layout variant on frozen Base weights")
    _common(p)
    _flag(p, "--base", required=True, help="Base checkpoint")
    _flag(p, "--variant", required=True, help="adapter, m3, siam or siam_lora[:rank]")
    _flag(p, "--data", required=True, help="Training dataset directory")
    _flag(p, "--out", required=not os.getenv(env_name("--out")), help="Run directory")
    _training_flags(p)

    p = sub.add_parser("sample", help="Generate an image for a layout file")
    _common(p)
    _flag(p, "--checkpoint", required=True, help="Model checkpoint")
    _flag(p, "--layout", required=True, help="Layout JSON file")
    _flag(p, "--out", required=True, help="Output PPM path")
    _flag(p, "--vocab", help="Vocabulary JSON (default: built-in)")
    _flag(p, "--steps", env=SAMPLE_STEPS_ENV, type=int, default=50, help="Sampler steps S")
    _flag(p, "--eta", type=float, default=0.0, help="DDIM stochasticity")
    _flag(p, "--seed", type=int, default=0, help="Sampler seed")
    _flag(p, "--layout-fraction", type=float, default=0.3, help="Leading fraction of steps using the layout")
    _flag(p, "--tensor", action="store_true", help="Also write a raw tensor mirror")
    _flag(p, "--trace", action="store_true", help="Write the per-step layout trace")

    p = sub.add_parser("eval", help="Benchmark a checkpoint with the pixel oracle")
    _common(p)
    _flag(p, "--checkpoint", required=True, help="Model checkpoint")
    _flag(p, "--data", required=True, help="Evaluation dataset directory")
    _flag(p, "--train-data", help="Training dataset (checks seed disjointness)")
    _flag(p, "--chance", help="Base checkpoint for the chance baseline")
    _flag(p, "--out", required=not os.getenv(env_name("--out")), help="Output directory")
    _flag(p, "--steps", env=SAMPLE_STEPS_ENV, type=int, default=50, help="Sampler steps S")
    _flag(p, "--eta", type=float, default=0.0, help="DDIM stochasticity")
    _flag(p, "--seeds", type=int, default=1, help="Number of sampler seeds")
    _flag(p, "--seed", type=int, help="First sampler seed")
    _flag(p, "--label", help="Variant label in the CSV")
    _flag(p, "--jobs", type=int, help="Worker threads")

    p = sub.add_parser("diagnose", help="Attention-similarity probe of a checkpoint")
    _common(p)
    _flag(p, "--checkpoint", required=True, help="Model checkpoint")
    _flag(p, "--data", required=True, help="Dataset directory for the probe batch")
    _flag(p, "--out", required=not os.getenv(env_name("--out")), help="Output directory")
    _flag(p, "--probe-size", type=int, help="Probe batch size")
    _flag(p, "--seed", type=int, help="Probe seed")
    _flag(p, "--trend", help="similarity.csv from a training run to chart")

    p = sub.add_parser("count-costs", help="Extra parameters and MACs of a variant")
    _common(p)
    _flag(p, "--variant", required=True, help="base, adapter, m3, siam or siam_lora[:rank]")
    _flag(p, "--entities", default="10", help="Entity count N (comma-separated list allowed)")
    _flag(p, "--instrumented", action="store_true", help="Cross-check against a counted forward")
    _flag(p, "--seed", type=int, help="Seed of the instrumented weights")
    _flag(p, "--out", help="Cost report JSON path")

    p = sub.add_parser("layout", help="Layout validation and coarse-input conversion")
    layout_sub = p.add_subparsers(dest="layout_command", required=True)
    v = layout_sub.add_parser("validate", help="Validate a layout file")
    _common(v)
    v.add_argument("file", help="Layout JSON file")
    _flag(v, "--mode", choices=[FORMAT_MODE, DATASET_MODE], default=FORMAT_MODE, help="Rule set")
    c = layout_sub.add_parser("convert", help="Convert masks, scribbles or points to boxes")
    _common(c)
    group = c.add_mutually_exclusive_group(required=True)
    for kind in COARSE_KINDS:
        group.add_argument(f"--{kind}", metavar="FILE", help=f"Coarse layout with '{kind}' entities")
    c.add_argument("--out", help="Output layout JSON (default: stdout)")

    p = sub.add_parser("ablate", help="Run the variant or training-strategy ablation")
    _common(p)
    _flag(p, "--name", help="Experiment name")
    _flag(p, "--out", help="Output root")
    _flag(p, "--variants", help="Comma-separated variants")
    _flag(p, "--seeds", type=int, help="Number of seeds")
    _flag(p, "--train-scenes", type=int, help="Training scenes")
    _flag(p, "--eval-scenes", type=int, help="Evaluation scenes")
    _flag(p, "--pretrain-steps", type=int, help="Base pretraining steps")
    _flag(p, "--layout-steps", type=int, help="Layout training steps")
    _flag(p, "--sample-steps", type=int, help="Sampler steps S")
    _flag(p, "--eta", type=float, help="DDIM stochasticity")
    _flag(p, "--strategy-target", type=float, help="Spatial rate counted as converged")
    _flag(p, "--strategies", action="store_true", help="Run the training-strategy ablation")
    _training_flags(p)
    return parser


def _log_dir(args: argparse.Namespace) -> Optional[Path]:
    if args.command == "layout":
        return None
    if args.command == "ablate":
        return Path(args.out or os.getenv(env_name("--out"), "runs")) / (args.name or "ablation")
    out = getattr(args, "out", None)
    if not out:
        return None
    out = Path(out)
    return out.parent if args.command in ("sample", "count-costs") else out


def _configure_logging(log_dir: Optional[Path], verbose: bool) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_dir / LOG_FILE, encoding="utf-8"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 1 on a lab error (or an invalid layout), 2 on usage errors.
    """
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    _configure_logging(_log_dir(args), args.verbose)
    try:
        overrides = _load_overrides(args)
        return COMMANDS[args.command](args, overrides)
    except LabError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


def main():
    sys.exit(cli(sys.argv[1:]))


def layout_main():
    sys.exit(cli(["layout"] + sys.argv[1:]))


if __name__ == "__main__":
    main()
