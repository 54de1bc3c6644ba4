#!/usr/bin/env python3
"""hierkd CLI - hierarchical VQA diagnostics and toy self-elicited distillation."""

from __future__ import annotations

import functools
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import click
import pandas as pd
from rich.console import Console
from rich.table import Table

from hierkd import __version__
from hierkd.config import (
    BackendConfig,
    BackendKind,
    DistillConfig,
    RunConfig,
    load_backend_config,
    load_distill_config,
    settings,
    setup_logging,
)
from hierkd.core.errors import ConfigError, HierKDError, InstanceError
from hierkd.core.models import DecodeConfig, MetricReport, PredictionRecord, Protocol, SamplerPolicy, VqaInstance
from hierkd.core.outputs import read_json, write_frame, write_json
from hierkd.processing.harness import load_run_log, run_protocol, save_run_log
from hierkd.processing.instances import (
    DistractorSampler,
    generate_instances,
    load_instances,
    save_instances,
    split_manifest,
)
from hierkd.processing.metrics import (
    METRIC_NAMES,
    aggregate_reports,
    build_report,
    depthwise_frame,
    report_to_frame,
    singleton_positions,
)
from hierkd.services.backends import build_backend
from hierkd.taxonomy.synthetic import synthetic_taxonomy
from hierkd.taxonomy.tree import load_taxonomy_file, save_taxonomy

console = Console()

PROTOCOL_ORDER = [Protocol.JOINT, Protocol.INDEPENDENT, Protocol.CONDITIONED]
TABLE_COLUMNS = ["hca", "leaf_acc", "tor", "por", "s_por"]


def handles_errors(fn: Callable[..., Any]) -> Callable[..., Any]:
    """Map hierkd errors to a red diagnostic and their exit code."""

    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except HierKDError as e:
            console.print(f"❌ [red]{type(e).__name__}: {e}[/red]")
            node_id = getattr(e, "node_id", None)
            if node_id:
                console.print(f"   [red]node: {node_id}[/red]")
            sys.exit(e.exit_code)

    return wrapper


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.replace(":", ",").split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got {value!r}") from e


def _pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{100 * value:.2f}"


def backend_options(fn: Callable[..., Any]) -> Callable[..., Any]:
    options = [
        click.option("--backend", "backend_file", type=click.Path(exists=True, dir_okay=False), help="Backend config JSON"),
        click.option(
            "--backend-kind",
            type=click.Choice([k.value for k in BackendKind]),
            default=BackendKind.MOCK_CONDITIONAL.value,
            show_default=True,
            help="Backend to build when no config file is given",
        ),
        click.option("--acc-with", type=float, default=0.9, show_default=True, help="mock: accuracy with a correct parent fact"),
        click.option("--acc-without", type=float, default=0.6, show_default=True, help="mock: accuracy without one"),
        click.option("--joint-collapse", type=float, default=0.0, show_default=True, help="mock: joint letter-repetition rate"),
        click.option("--workers", type=int, default=None, help="Concurrent instances (default from settings)"),
        click.option("--lenient", is_flag=True, help="Case-insensitive answer parsing"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _backend_config(backend_file: Optional[str], kind: str, acc_with: float, acc_without: float, collapse: float, seed: int) -> BackendConfig:
    if backend_file:
        return load_backend_config(backend_file)
    return BackendConfig(
        kind=BackendKind(kind), seed=seed, accuracy_with_parent=acc_with, accuracy_without=acc_without, joint_collapse=collapse
    )


def _load_split(instances_path: str, manifest: Optional[str], split: Optional[str]) -> List[VqaInstance]:
    _, instances = load_instances(instances_path)
    if split is None:
        return instances
    if manifest is None:
        raise ConfigError("--split needs --manifest")
    _, document = read_json(manifest)
    if split not in document:
        raise ConfigError(f"manifest has no split {split!r}")
    wanted = set(document[split])
    chosen = [i for i in instances if i.instance_id in wanted]
    if not chosen:
        raise InstanceError(f"split {split!r} selects no instances")
    return chosen


@click.group()
@click.version_option(version=__version__, prog_name="hierkd")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def cli(verbose: bool) -> None:
    """🌳 hierkd - hierarchical VQA diagnostics and self-elicited distillation

    Validate taxonomies, generate multiple-choice ladders, run the joint,
    independent and conditioned protocols against a model backend, score
    path consistency and train the toy distillation engine.
    """
    setup_logging("DEBUG" if verbose else None)


@cli.command()
@click.argument("taxonomy", type=click.Path(dir_okay=False))
@handles_errors
def validate(taxonomy: str) -> None:
    """✅ Validate a taxonomy file"""
    tree = load_taxonomy_file(taxonomy)
    table = Table(title=f"Taxonomy: {tree.name}")
    table.add_column("Depth", justify="right")
    table.add_column("Level")
    table.add_column("Nodes", justify="right")
    for depth in range(1, tree.max_depth + 1):
        flag = " (singleton)" if depth in tree.singleton_levels else ""
        table.add_row(str(depth), tree.level_name(depth) + flag, str(len(tree.nodes_at(depth))))
    console.print(table)
    console.print(f"✅ [green]{len(tree.nodes)} nodes, {len(tree.leaves())} leaves[/green]")


@cli.command()
@click.option("--branching", required=True, help="Children per node: one value or a comma list per level")
@click.option("--depth", type=int, default=None, help="Levels below the root when --branching is a single value")
@click.option("--name", default="synthetic", show_default=True)
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False))
@handles_errors
def synth(branching: str, depth: Optional[int], name: str, out: str) -> None:
    """🧪 Write a synthetic iNat-shaped taxonomy"""
    fanout = _int_list(branching)
    tree = synthetic_taxonomy(fanout[0] if len(fanout) == 1 else fanout, depth=depth, name=name)
    save_taxonomy(tree, out)
    console.print(f"✅ [green]Wrote {len(tree.nodes)} nodes over {tree.depth} levels to {out}[/green]")


@cli.command()
@click.option("--taxonomy", "-t", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "n", type=int, required=True, help="Number of instances")
@click.option("--sampler", type=click.Choice([p.value for p in SamplerPolicy]), default=SamplerPolicy.SIBLING.value, show_default=True)
@click.option("--sampler-data", type=click.Path(exists=True, dir_okay=False), help="Weights or released choice sets")
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--ratio", default="6:2:2", show_default=True, help="train:val:test")
@click.option("--skip-singletons", is_flag=True, help="Do not ask levels holding a single label")
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False), help="Instance JSONL")
@click.option("--manifest", type=click.Path(dir_okay=False), help="Split manifest JSON (default: <out>.split.json)")
@handles_errors
def generate(
    taxonomy: str,
    n: int,
    sampler: str,
    sampler_data: Optional[str],
    seed: int,
    ratio: str,
    skip_singletons: bool,
    out: str,
    manifest: Optional[str],
) -> None:
    """🧩 Generate multiple-choice instances and a split manifest"""
    split_ratio = _int_list(ratio)
    if len(split_ratio) != 3:
        raise ConfigError(f"--ratio needs three parts, got {ratio!r}")
    manifest = manifest or f"{out}.split.json"
    tree = load_taxonomy_file(taxonomy)
    policy = SamplerPolicy(sampler)
    sampler_obj = DistractorSampler.from_file(policy, sampler_data) if sampler_data else DistractorSampler(policy=policy)

    config = RunConfig(
        command="generate",
        parameters={"n": n, "sampler": sampler, "ratio": split_ratio, "skip_singletons": skip_singletons},
        seeds=[seed],
        paths={"taxonomy": taxonomy, "out": out, "manifest": manifest, **({"sampler_data": sampler_data} if sampler_data else {})},
    )
    instances = generate_instances(tree, n, sampler_obj, seed, skip_singleton_levels=skip_singletons)
    save_instances(out, instances, {"config": config.model_dump(mode="json")})
    splits = split_manifest([i.instance_id for i in instances], tuple(split_ratio), seed)
    write_json(manifest, splits, config)

    console.print(f"✅ [green]Wrote {len(instances)} instances to {out}[/green]")
    console.print(f"   splits: train {len(splits['train'])} / val {len(splits['val'])} / test {len(splits['test'])} → {manifest}")


@cli.command()
@click.option("--instances", "-i", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--protocol", "-p", type=click.Choice([p.value for p in Protocol]), required=True)
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--split", type=click.Choice(["train", "val", "test"]))
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--teacher-forcing", is_flag=True, help="Conditioned protocol with gold known facts (ablation)")
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False), help="Run log JSONL")
@backend_options
@handles_errors
def run(
    instances: str,
    protocol: str,
    manifest: Optional[str],
    split: Optional[str],
    seed: int,
    teacher_forcing: bool,
    out: str,
    backend_file: Optional[str],
    backend_kind: str,
    acc_with: float,
    acc_without: float,
    joint_collapse: float,
    workers: Optional[int],
    lenient: bool,
) -> None:
    """🚀 Run one protocol over an instance set"""
    chosen = _load_split(instances, manifest, split)
    backend_cfg = _backend_config(backend_file, backend_kind, acc_with, acc_without, joint_collapse, seed)
    decode = DecodeConfig()
    config = RunConfig(
        command="run",
        parameters={"protocol": protocol, "split": split, "teacher_forcing": teacher_forcing, "lenient": lenient},
        backend=backend_cfg,
        decode=decode,
        seeds=[seed],
        paths={"instances": instances, "out": out, **({"manifest": manifest} if manifest else {})},
    )
    backend = build_backend(backend_cfg)
    try:
        log = run_protocol(
            protocol, chosen, backend, decode,
            seed=seed, workers=workers, teacher_forcing=teacher_forcing, lenient=lenient,
            config=config.model_dump(mode="json"), console=console,
        )
    finally:
        backend.close()
    save_run_log(out, log)
    report = build_report(log.records)
    console.print(f"✅ [green]{protocol}: {len(log.records)} instances, {log.totals.calls} calls → {out}[/green]")
    console.print(f"   HCA {_pct(report.hca)}  LeafAcc {_pct(report.leaf_acc)}")


def _singleton_levels(taxonomy: Optional[str], records: List[PredictionRecord]) -> List[int]:
    if not taxonomy:
        return []
    return singleton_positions(records, load_taxonomy_file(taxonomy).singleton_levels)


@cli.command()
@click.argument("run_log", type=click.Path(exists=True, dir_okay=False))
@click.option("--taxonomy", "-t", type=click.Path(exists=True, dir_okay=False), help="Flag singleton levels in the depth table")
@click.option("--keep-singletons", is_flag=True, help="Keep singleton levels in the depth table")
@click.option("--prefix", is_flag=True, help="S-POR counts only the correct block starting at the root")
@click.option("--out", "-o", type=click.Path(dir_okay=False), help="Report JSON")
@click.option("--csv", "csv_out", type=click.Path(dir_okay=False), help="Metric table CSV")
@click.option("--depthwise", type=click.Path(dir_okay=False), help="Depth-wise conditional table CSV")
@handles_errors
def score(
    run_log: str,
    taxonomy: Optional[str],
    keep_singletons: bool,
    prefix: bool,
    out: Optional[str],
    csv_out: Optional[str],
    depthwise: Optional[str],
) -> None:
    """📏 Score a run log"""
    log = load_run_log(run_log)
    report = build_report(
        log.records,
        singleton_levels=_singleton_levels(taxonomy, log.records),
        exclude_singletons=not keep_singletons,
        prefix_spor=prefix,
    )
    config = RunConfig(
        command="score",
        parameters={"prefix": prefix, "keep_singletons": keep_singletons, "run_id": log.run_id, "protocol": log.protocol.value},
        seeds=[log.seed],
        paths={"run_log": run_log, **({"taxonomy": taxonomy} if taxonomy else {})},
    )
    _display_report(report, title=f"{log.protocol.value} ({log.run_id})")
    if out:
        write_json(out, {"report": report.model_dump(mode="json"), "run_id": log.run_id, "protocol": log.protocol.value}, config)
    if csv_out:
        write_frame(csv_out, report_to_frame(report), config)
    if depthwise:
        write_frame(depthwise, depthwise_frame(report), config)


def comparison_frame(reports: Dict[Protocol, MetricReport]) -> pd.DataFrame:
    """One row per protocol with each metric and its difference from Joint."""
    joint = reports[Protocol.JOINT]
    rows = []
    for protocol in PROTOCOL_ORDER:
        report = reports[protocol]
        row: Dict[str, Any] = {"protocol": protocol.value}
        for name in TABLE_COLUMNS:
            value, base = getattr(report, name), getattr(joint, name)
            row[name] = value
            row[f"delta_{name}"] = None if value is None or base is None else value - base
        rows.append(row)
    return pd.DataFrame(rows, columns=["protocol", *TABLE_COLUMNS, *[f"delta_{n}" for n in TABLE_COLUMNS]])


@cli.command()
@click.option("--instances", "-i", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--split", type=click.Choice(["train", "val", "test"]))
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False), help="Comparison CSV")
@click.option("--runs-dir", type=click.Path(file_okay=False), help="Also keep each protocol's run log here")
@backend_options
@handles_errors
def compare(
    instances: str,
    manifest: Optional[str],
    split: Optional[str],
    seed: int,
    out: str,
    runs_dir: Optional[str],
    backend_file: Optional[str],
    backend_kind: str,
    acc_with: float,
    acc_without: float,
    joint_collapse: float,
    workers: Optional[int],
    lenient: bool,
) -> None:
    """⚖️ Run all three protocols on the same instances and compare them"""
    chosen = _load_split(instances, manifest, split)
    backend_cfg = _backend_config(backend_file, backend_kind, acc_with, acc_without, joint_collapse, seed)
    decode = DecodeConfig()
    config = RunConfig(
        command="compare",
        parameters={"split": split, "lenient": lenient},
        backend=backend_cfg,
        decode=decode,
        seeds=[seed],
        paths={"instances": instances, "out": out},
    )
    reports: Dict[Protocol, MetricReport] = {}
    backend = build_backend(backend_cfg)
    try:
        for protocol in PROTOCOL_ORDER:
            log = run_protocol(
                protocol, chosen, backend, decode,
                seed=seed, workers=workers, lenient=lenient, config=config.model_dump(mode="json"), console=console,
            )
            if runs_dir:
                Path(runs_dir).mkdir(parents=True, exist_ok=True)
                save_run_log(Path(runs_dir) / f"{protocol.value}.jsonl", log)
            reports[protocol] = build_report(log.records)
    finally:
        backend.close()

    frame = comparison_frame(reports)
    write_frame(out, frame, config)
    _display_comparison(frame)
    console.print(f"✅ [green]Comparison written to {out}[/green]")


@cli.command()
@click.option("--config", "-c", "config_file", type=click.Path(exists=True, dir_okay=False), help="Distill config JSON")
@click.option("--seed", type=int, default=None, help="Overrides the config seed")
@click.option("--epochs", type=int, default=None, help="Overrides the distillation epochs")
@click.option("--n-train", type=int, default=None, help="Overrides the training set size")
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False), help="Student params file")
@click.option("--curve", type=click.Path(dir_okay=False), help="Training curve CSV")
@click.option("--teacher-out", type=click.Path(dir_okay=False), help="Also save the pretrained base/teacher")
@handles_errors
def distill(
    config_file: Optional[str],
    seed: Optional[int],
    epochs: Optional[int],
    n_train: Optional[int],
    out: str,
    curve: Optional[str],
    teacher_out: Optional[str],
) -> None:
    """🎓 Pretrain the toy base and distill it into a joint-mode student"""
    from hierkd.sekd.io import save_params
    from hierkd.sekd.trainer import run_distillation

    cfg = _distill_config(config_file, seed, epochs, n_train)
    run_config = RunConfig(
        command="distill",
        parameters={"distill": cfg.model_dump(mode="json")},
        seeds=[cfg.seed],
        paths={"out": out, **({"curve": curve} if curve else {}), **({"config": config_file} if config_file else {})},
    )
    console.print(f"[bold blue]🎓 Distilling (seed {cfg.seed}, {cfg.world.n_train} train examples)[/bold blue]")
    _, teacher, result = run_distillation(cfg, console=console)

    header = run_config.model_dump(mode="json")
    save_params(out, {**result.student.arrays(), "W": result.projector}, header)
    if teacher_out:
        save_params(teacher_out, teacher.arrays(), header)
    if curve:
        write_frame(curve, result.curve, run_config)

    table = Table(title="Distillation")
    table.add_column("Model")
    table.add_column("Mode")
    table.add_column("Val HCA", justify="right")
    table.add_row("Teacher", "conditioned", _pct(result.teacher_val_hca))
    table.add_row("Base", "joint", _pct(result.base_joint_val_hca))
    table.add_row(f"Student (epoch {result.best_epoch})", "joint", _pct(result.student_val_hca))
    console.print(table)
    console.print(f"✅ [green]Student params written to {out}[/green]")


def _distill_config(config_file: Optional[str], seed: Optional[int], epochs: Optional[int], n_train: Optional[int]) -> DistillConfig:
    cfg = load_distill_config(config_file)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    if epochs is not None:
        cfg = cfg.model_copy(update={"optimizer": cfg.optimizer.model_copy(update={"epochs": epochs})})
    if n_train is not None:
        cfg = cfg.model_copy(update={"world": cfg.world.model_copy(update={"n_train": n_train})})
    return cfg


@cli.command()
@click.option("--config", "-c", "config_file", type=click.Path(exists=True, dir_okay=False), help="Distill config JSON")
@click.option("--variant", "variants", multiple=True, help="Loss variant (repeatable; default all)")
@click.option("--seeds", default=None, help="Comma-separated seeds (default from settings)")
@click.option("--epochs", type=int, default=None, help="Overrides the distillation epochs")
@click.option("--n-train", type=int, default=None, help="Overrides the training set size")
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False), help="Per-run CSV")
@click.option("--summary", type=click.Path(dir_okay=False), help="Per-variant mean/std CSV")
@handles_errors
def ablate(
    config_file: Optional[str],
    variants: Sequence[str],
    seeds: Optional[str],
    epochs: Optional[int],
    n_train: Optional[int],
    out: str,
    summary: Optional[str],
) -> None:
    """🔬 Loss-weight ablation sweep over seeds"""
    from hierkd.sekd.trainer import run_loss_ablation, summarize_ablation

    cfg = _distill_config(config_file, None, epochs, n_train)
    seed_list = _int_list(seeds) if seeds else list(settings.seeds)
    run_config = RunConfig(
        command="ablate",
        parameters={"distill": cfg.model_dump(mode="json"), "variants": list(variants)},
        seeds=seed_list,
        paths={"out": out, **({"summary": summary} if summary else {})},
    )
    frame = run_loss_ablation(cfg, variants or None, seed_list, console=console)
    write_frame(out, frame, run_config)
    table_frame = summarize_ablation(frame)
    if summary:
        write_frame(summary, table_frame, run_config)

    table = Table(title="Loss ablation (student joint HCA, val)")
    table.add_column("Variant")
    table.add_column("λ hard/soft/feat")
    table.add_column("HCA", justify="right")
    for row in table_frame.itertuples(index=False):
        lambdas = frame.loc[frame["variant"] == row.variant, ["lambda_hard", "lambda_soft", "lambda_feat"]].iloc[0]
        table.add_row(
            row.variant,
            "/".join(f"{v:g}" for v in lambdas),
            f"{100 * row.student_hca_mean:.2f} ± {100 * row.student_hca_std:.2f}",
        )
    console.print(table)
    console.print(f"   base joint HCA {_pct(float(frame['base_joint_hca'].iloc[0]))}, teacher {_pct(float(frame['teacher_hca'].iloc[0]))}")


def _report_from(path: str) -> MetricReport:
    if path.endswith(".jsonl"):
        return build_report(load_run_log(path).records)
    _, document = read_json(path)
    if "report" not in document:
        raise ConfigError(f"{path} holds no metric report")
    return MetricReport.model_validate(document["report"])


@cli.command()
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "-o", type=click.Path(dir_okay=False), help="Aggregate CSV")
@handles_errors
def report(inputs: Tuple[str, ...], out: Optional[str]) -> None:
    """📊 Mean ± std of metrics across runs (score reports or run logs)"""
    reports = [_report_from(p) for p in inputs]
    frame = aggregate_reports(reports)
    table = Table(title=f"Across {len(reports)} run(s)")
    table.add_column("Metric")
    table.add_column("Mean ± std", justify="right")
    for row in frame.itertuples(index=False):
        table.add_row(row.metric, f"{100 * row.mean:.2f} ± {100 * row.std:.2f}")
    console.print(table)
    if out:
        write_frame(out, frame, RunConfig(command="report", parameters={"inputs": list(inputs)}, paths={"out": out}))


def _display_report(report: MetricReport, title: str) -> None:
    table = Table(title=title)
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    for name in METRIC_NAMES:
        table.add_row(name, _pct(getattr(report, name)))
    console.print(table)
    if report.depthwise:
        depth = Table(title="Depth-wise")
        for column in ("Level", "Acc", "Acc|correct", "Acc|error", "Δ"):
            depth.add_column(column, justify="right")
        for row in report.depthwise:
            depth.add_row(str(row.level), _pct(row.acc), _pct(row.acc_given_correct), _pct(row.acc_given_error), _pct(row.delta))
        console.print(depth)


def _display_comparison(frame: pd.DataFrame) -> None:
    table = Table(title="Protocol comparison")
    table.add_column("Protocol")
    for name in TABLE_COLUMNS:
        table.add_column(name.upper().replace("_", "-"), justify="right")
    for row in frame.to_dict("records"):
        cells = []
        for name in TABLE_COLUMNS:
            value, delta = row[name], row[f"delta_{name}"]
            if pd.isna(value):
                cells.append("-")
            elif row["protocol"] == Protocol.JOINT.value or pd.isna(delta):
                cells.append(_pct(value))
            else:
                cells.append(f"{_pct(value)} ({100 * delta:+.2f})")
        table.add_row(row["protocol"], *cells)
    console.print(table)


if __name__ == "__main__":
    cli()
