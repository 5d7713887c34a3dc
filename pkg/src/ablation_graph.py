#!/usr/bin/env python3
"""
Ablation Pipeline (LangGraph Implementation)

Runs the variant and training-strategy ablations as a stateful graph:
generate data, pretrain the Base model (skipped when its checkpoint exists),
train and benchmark every (variant, seed) cell or every strategy condition,
then merge the results into tables, charts and a Markdown/HTML report.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, TypedDict

import numpy as np
from langgraph.graph import StateGraph, END

from . import __version__
from .base import ExperimentConfig, ModelConfig, TrainConfig
from .diagnostics import write_similarity_csv
from .diffusion import pretrain_base, train_layout
from .mmdit import VariantTag, load_checkpoint, save_checkpoint
from .scenes import BenchmarkTable, Dataset, benchmark, build_dataset, check_disjoint, load_dataset, split_seeds
from .utils.io_utils import config_hash, write_csv, write_manifest
from .utils.report_utils import markdown_table, save_report, save_svg, svg_line_chart
from .utils.rng import Rng

logger = logging.getLogger(__name__)

BASE_CHECKPOINT = "base.ckpt"
ORDERING_COLUMNS = ("variant", "spatial_median", "color_median", "shape_median", "spatial_mean", "seeds")
STRATEGY_COLUMNS = ("condition", "bias_sampling", "lambda_region", "seed", "steps_to_threshold",
                    "reached", "final_spatial")


# --- State Definition for the Graph ---
class AblationState(TypedDict):
    """State of one ablation run."""
    config: ExperimentConfig
    model_config: ModelConfig
    train_config: TrainConfig
    mode: str
    experiment_dir: Path
    train_set: Optional[Dataset]
    eval_set: Optional[Dataset]
    base_checkpoint: Optional[Path]
    cells: List[Dict]
    report: Optional[Dict]


def cell_seed(seed: int, name: str) -> int:
    """Training seed of one cell: a disjoint substream of the shared seed."""
    return Rng(seed).substream(f"cell/{name}").next_u64() >> 1


def _manifest(run_dir: Path, state: AblationState, command: str, seed: Optional[int], outputs) -> Path:
    config = {"experiment": state["config"].to_dict(), "model": state["model_config"].to_dict(),
              "train": state["train_config"].to_dict()}
    return write_manifest(run_dir, command, config, seed, outputs, __version__)


# --- Node Implementations ---
def generate_data(state: AblationState) -> Dict:
    """Create (or reload) the training and evaluation scene sets."""
    cfg = state["config"]
    datasets = {}
    for split, count in (("train", cfg.train_scenes), ("eval", cfg.eval_scenes)):
        data_dir = state["experiment_dir"] / "data" / split
        if (data_dir / "dataset.json").exists():
            logger.info(f"Reusing {split} dataset in {data_dir}")
            datasets[split] = load_dataset(data_dir, state["model_config"])
            continue
        dataset, written = build_dataset(data_dir, split, split_seeds(split, count, cfg.base_seed),
                                         state["model_config"], jobs=cfg.jobs)
        _manifest(data_dir, state, f"gen-data --split {split}", cfg.base_seed, written)
        datasets[split] = dataset
    check_disjoint(datasets["train"].seeds, datasets["eval"].seeds)
    return {"train_set": datasets["train"], "eval_set": datasets["eval"]}


def pretrain_base_model(state: AblationState) -> Dict:
    """Pretrain the Base model on captions and save its checkpoint."""
    cfg = state["config"]
    run_dir = state["experiment_dir"] / "base"
    train_config = replace(state["train_config"], steps=cfg.pretrain_steps, seed=cfg.base_seed, jobs=cfg.jobs)
    result = pretrain_base(state["train_set"], state["model_config"], train_config)
    checkpoint = save_checkpoint(result.weights, run_dir / BASE_CHECKPOINT, cfg.pretrain_steps, cfg.base_seed)
    metrics_path = run_dir / "metrics.csv"
    result.metrics.write_csv(metrics_path)
    _manifest(run_dir, state, "pretrain", cfg.base_seed, [checkpoint, metrics_path])
    return {"base_checkpoint": checkpoint}


def _run_variant_cell(state: AblationState, variant: str, seed: int, jobs: int) -> Dict:
    cfg = state["config"]
    run_dir = state["experiment_dir"] / variant.replace(":", "-") / str(seed)
    base, _ = load_checkpoint(state["base_checkpoint"])
    tag = VariantTag.parse(variant, base.config.lora_rank)
    train_config = replace(state["train_config"], steps=cfg.layout_steps, seed=cell_seed(seed, variant), jobs=jobs)
    result = train_layout(base, tag, state["train_set"], train_config)

    outputs = [save_checkpoint(result.weights, run_dir / "layout.ckpt", cfg.layout_steps, train_config.seed)]
    metrics_path = run_dir / "metrics.csv"
    result.metrics.write_csv(metrics_path)
    outputs.append(metrics_path)
    outputs.append(write_similarity_csv(run_dir / "similarity.csv", result.metrics.probes))
    table = benchmark(result.weights, state["eval_set"], cfg.sample_steps, [seed], cfg.eta,
                      training_seeds=state["train_set"].seeds, label=variant)
    outputs.append(table.write_csv(run_dir / "benchmark.csv"))
    _manifest(run_dir, state, f"train-layout --variant {variant}", seed, outputs)
    probes = [(step, s.image_text, s.image_layout) for step, s in result.metrics.probes]
    return {"variant": variant, "seed": seed, "rows": table.rows, "probes": probes}


def _run_chance_cell(state: AblationState, seed: int) -> Dict:
    cfg = state["config"]
    run_dir = state["experiment_dir"] / "chance" / str(seed)
    base, _ = load_checkpoint(state["base_checkpoint"])
    table = benchmark(base, state["eval_set"], cfg.sample_steps, [seed], cfg.eta,
                      training_seeds=state["train_set"].seeds, label="chance")
    path = table.write_csv(run_dir / "benchmark.csv")
    _manifest(run_dir, state, "eval --chance", seed, [path])
    return {"variant": "chance", "seed": seed, "rows": table.rows, "probes": []}


def _execute(tasks, jobs: int) -> List[Dict]:
    """Run cell closures, in parallel when jobs > 1; results keep task order."""
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            return list(executor.map(lambda task: task(), tasks))
    return [task() for task in tasks]


def run_cells(state: AblationState) -> Dict:
    """Train and benchmark every (variant, seed) cell plus the chance baseline."""
    cfg = state["config"]
    inner_jobs = 1 if cfg.jobs > 1 else state["train_config"].jobs
    tasks = [lambda v=v, s=s: _run_variant_cell(state, v, s, inner_jobs)
             for v in cfg.variants for s in cfg.seed_list]
    tasks += [lambda s=s: _run_chance_cell(state, s) for s in cfg.seed_list]
    logger.info(f"Running {len(tasks)} cells with {cfg.jobs} job(s)")
    return {"cells": _execute(tasks, cfg.jobs)}


def merge_report(state: AblationState) -> Dict:
    """Merge per-cell benchmarks into the ordering table, charts and report."""
    exp_dir = state["experiment_dir"]
    table = BenchmarkTable()
    for cell in state["cells"]:
        table.rows.extend(cell["rows"])
    variants = list(dict.fromkeys(cell["variant"] for cell in state["cells"]))
    ordering = []
    for variant in variants:
        rows = [r for r in table.rows if r["variant"] == variant]
        ordering.append({
            "variant": variant,
            "spatial_median": table.median("spatial", variant),
            "color_median": table.median("color", variant),
            "shape_median": table.median("shape", variant),
            "spatial_mean": table.mean(variant)["spatial"],
            "seeds": len(rows),
        })
    ordering.sort(key=lambda r: (-r["spatial_median"], r["variant"]))

    outputs = [table.write_csv(exp_dir / "benchmark.csv"),
               write_csv(exp_dir / "ordering.csv", ordering, ORDERING_COLUMNS)]
    chart = _similarity_chart(state["cells"])
    outputs.append(save_svg(exp_dir / "similarity.svg", chart))

    ranking = " >= ".join(r["variant"] for r in ordering)
    content = "\n\n".join([
        f"# Variant ablation: {state['config'].name}",
        f"Spatial ranking (median over seeds): {ranking}",
        "## Ordering",
        markdown_table(ordering, ORDERING_COLUMNS),
        "## Per-seed benchmark",
        markdown_table(table.rows, ("variant", "seed", "spatial", "color", "shape")),
        "## Attention similarity",
        "![similarity](similarity.svg)",
        f"Config hash: `{config_hash(state['config'].to_dict())}`",
    ]) + "\n"
    outputs.extend(save_report(content, exp_dir, "report", title=f"Ablation {state['config'].name}"))
    _manifest(exp_dir, state, "ablate", state["config"].base_seed, outputs)
    logger.info(f"Ablation ranking: {ranking}")
    return {"report": {"ordering": ordering, "ranking": ranking}}


def _similarity_chart(cells: List[Dict]) -> str:
    series: Dict[str, List[Tuple[float, float]]] = {}
    variants = list(dict.fromkeys(c["variant"] for c in cells if c["probes"]))
    for variant in variants:
        by_step: Dict[int, Dict[str, List[float]]] = {}
        for cell in cells:
            if cell["variant"] != variant:
                continue
            for step, text, layout in cell["probes"]:
                slot = by_step.setdefault(step, {"text": [], "layout": []})
                if text is not None:
                    slot["text"].append(text)
                if layout is not None:
                    slot["layout"].append(layout)
        for key, label in (("text", "image-text"), ("layout", "image-layout")):
            points = [(step, float(np.mean(v[key]))) for step, v in sorted(by_step.items()) if v[key]]
            if points:
                series[f"{variant} {label}"] = points
    return svg_line_chart(series, title="Attention similarity", x_label="step", y_label="top-1% score")


# --- Strategy ablation ---
def strategy_conditions(cfg: ExperimentConfig) -> List[Tuple[str, bool, float]]:
    """The {bias on/off} x {lambda values} grid."""
    return [(f"bias={'on' if bias else 'off'},lambda={lam:g}", bias, lam)
            for bias in (True, False) for lam in cfg.strategy_lambdas]


def _run_strategy_cell(state: AblationState, condition: str, bias: bool, lam: float, seed: int,
                       jobs: int) -> Dict:
    cfg = state["config"]
    run_dir = state["experiment_dir"] / "strategies" / condition.replace(",", "_").replace("=", "-") / str(seed)
    base, _ = load_checkpoint(state["base_checkpoint"])
    tag = VariantTag.parse(cfg.strategy_variant, base.config.lora_rank)
    train_config = replace(state["train_config"], steps=cfg.layout_steps, seed=cell_seed(seed, "strategy"),
                           bias_sampling=bias, lambda_region=lam, jobs=jobs)
    probe_set = Dataset("eval", state["eval_set"].samples[:cfg.strategy_eval_scenes], state["eval_set"].vocab)
    progress: List[Tuple[int, float]] = []

    def converged(step: int, weights, _metrics) -> bool:
        if step % cfg.strategy_eval_interval and step != cfg.layout_steps:
            return False
        spatial = benchmark(weights, probe_set, cfg.sample_steps, [seed], cfg.eta, label=condition).rows[0]["spatial"]
        progress.append((step, spatial))
        return spatial >= cfg.strategy_target

    result = train_layout(base, tag, state["train_set"], train_config, callback=converged)
    reached = bool(progress) and progress[-1][1] >= cfg.strategy_target
    metrics_path = run_dir / "metrics.csv"
    result.metrics.write_csv(metrics_path)
    progress_path = write_csv(run_dir / "progress.csv",
                              [{"step": s, "spatial": v} for s, v in progress], ("step", "spatial"))
    _manifest(run_dir, state, f"ablate --strategies {condition}", seed, [metrics_path, progress_path])
    return {
        "condition": condition, "bias_sampling": bias, "lambda_region": lam, "seed": seed,
        "steps_to_threshold": progress[-1][0] if reached else None, "reached": reached,
        "final_spatial": progress[-1][1] if progress else None,
    }


def run_strategies(state: AblationState) -> Dict:
    """Train the strategy variant under every condition with shared seeds."""
    cfg = state["config"]
    inner_jobs = 1 if cfg.jobs > 1 else state["train_config"].jobs
    tasks = [lambda c=c, b=b, lam=lam, s=s: _run_strategy_cell(state, c, b, lam, s, inner_jobs)
             for c, b, lam in strategy_conditions(cfg) for s in cfg.seed_list]
    return {"cells": _execute(tasks, cfg.jobs)}


def censored_steps(cell: Dict, cfg: ExperimentConfig) -> int:
    """Steps to threshold, with unreached runs counted one interval past the budget."""
    if cell["reached"]:
        return cell["steps_to_threshold"]
    return cfg.layout_steps + cfg.strategy_eval_interval


def merge_strategies(state: AblationState) -> Dict:
    """Summarize median steps-to-threshold per condition."""
    cfg = state["config"]
    exp_dir = state["experiment_dir"] / "strategies"
    summary = []
    for condition, bias, lam in strategy_conditions(cfg):
        cells = [c for c in state["cells"] if c["condition"] == condition]
        summary.append({
            "condition": condition,
            "median_steps": float(np.median([censored_steps(c, cfg) for c in cells])),
            "reached": sum(c["reached"] for c in cells),
            "seeds": len(cells),
        })
    columns = ("condition", "median_steps", "reached", "seeds")
    outputs = [write_csv(exp_dir / "strategies.csv", state["cells"], STRATEGY_COLUMNS),
               write_csv(exp_dir / "summary.csv", summary, columns)]
    content = "\n\n".join([
        f"# Training-strategy ablation: {cfg.name}",
        f"Variant `{cfg.strategy_variant}`, target spatial rate {cfg.strategy_target}, "
        f"evaluated every {cfg.strategy_eval_interval} steps.",
        "## Median steps to threshold",
        markdown_table(summary, columns),
        "## Runs",
        markdown_table(state["cells"], STRATEGY_COLUMNS),
    ]) + "\n"
    outputs.extend(save_report(content, exp_dir, "report", title=f"Strategies {cfg.name}"))
    _manifest(exp_dir, state, "ablate --strategies", cfg.base_seed, outputs)
    return {"report": {"summary": summary, "runs": state["cells"]}}


# --- Conditional Edge Logic ---
def route_after_data(state: AblationState) -> str:
    """Skip pretraining when the Base checkpoint already exists."""
    checkpoint = state["experiment_dir"] / "base" / BASE_CHECKPOINT
    if checkpoint.exists():
        logger.info(f"Base checkpoint found at {checkpoint}; skipping pretraining")
        return "reuse"
    return "pretrain"


def use_existing_base(state: AblationState) -> Dict:
    return {"base_checkpoint": state["experiment_dir"] / "base" / BASE_CHECKPOINT}


def route_mode(state: AblationState) -> str:
    return state["mode"]


# --- Graph Definition ---
def build_graph():
    """Builds the ablation graph."""
    workflow = StateGraph(AblationState)

    workflow.add_node("generate_data", generate_data)
    workflow.add_node("pretrain_base", pretrain_base_model)
    workflow.add_node("use_base", use_existing_base)
    workflow.add_node("run_cells", run_cells)
    workflow.add_node("merge_report", merge_report)
    workflow.add_node("run_strategies", run_strategies)
    workflow.add_node("merge_strategies", merge_strategies)

    workflow.set_entry_point("generate_data")
    workflow.add_conditional_edges(
        "generate_data",
        route_after_data,
        {"pretrain": "pretrain_base", "reuse": "use_base"},
    )
    for source in ("pretrain_base", "use_base"):
        workflow.add_conditional_edges(
            source,
            route_mode,
            {"variants": "run_cells", "strategies": "run_strategies"},
        )
    workflow.add_edge("run_cells", "merge_report")
    workflow.add_edge("merge_report", END)
    workflow.add_edge("run_strategies", "merge_strategies")
    workflow.add_edge("merge_strategies", END)

    return workflow.compile()


def initial_state(config: ExperimentConfig, model_config: ModelConfig, train_config: TrainConfig,
                  mode: str) -> AblationState:
    experiment_dir = Path(config.out_dir) / config.name
    experiment_dir.mkdir(parents=True, exist_ok=True)
    return AblationState(
        config=config,
        model_config=model_config,
        train_config=train_config,
        mode=mode,
        experiment_dir=experiment_dir,
        train_set=None,
        eval_set=None,
        base_checkpoint=None,
        cells=[],
        report=None,
    )


def run_ablation(config: ExperimentConfig, model_config: ModelConfig, train_config: TrainConfig) -> Dict:
    """Variant ablation; returns the ordering report."""
    final_state = build_graph().invoke(initial_state(config, model_config, train_config, "variants"))
    return final_state["report"]


def ablate_strategies(config: ExperimentConfig, model_config: ModelConfig, train_config: TrainConfig) -> Dict:
    """Strategy ablation; returns the steps-to-threshold report."""
    final_state = build_graph().invoke(initial_state(config, model_config, train_config, "strategies"))
    return final_state["report"]
