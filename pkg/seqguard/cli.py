#!/usr/bin/env python3
"""Main CLI module for seqguard-cli."""

import functools
import json
import sys
import time
from pathlib import Path
from typing import Optional

import click
import pandas as pd
from rich.console import Console
from rich.table import Table

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .domain import EventLogError, read_event_log
from .evalkit import (
    DetectionReport,
    embedding_similarity,
    evaluate_detection,
    export_case_trace,
    export_loss_distribution,
    read_score_records,
    run_ablation,
)
from .model import ConfigurationError
from .pipeline import (
    ABLATION_VARIANTS,
    calibration_sequences,
    generate_datasets,
    load_datasets,
    load_sequences,
    train_detector,
    write_datasets,
)
from .scoring import ABNORMAL, Detector, ScoringError
from .synthgen import GenerationError, read_labels
from .training import GradientError, TrainingDivergedError
from .utils import (
    ConfigError,
    apply_overrides,
    ensure_data_directory,
    format_duration,
    load_config,
    save_sample_config,
    setup_logging,
)

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3

KNOWN_ERRORS = (
    EventLogError,
    GenerationError,
    CheckpointError,
    ScoringError,
    TrainingDivergedError,
    GradientError,
    ValueError,
)


def _fail(message: str, code: int) -> None:
    click.echo(f"❌ {message}", err=True)
    sys.exit(code)


def handle_errors(func):
    """Map seqguard errors onto exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigError as e:
            _fail(f"Invalid configuration key {e.key}: {e}", EXIT_CONFIG)
        except ConfigurationError as e:
            _fail(f"Invalid model configuration: {e}", EXIT_CONFIG)
        except FileNotFoundError as e:
            _fail(str(e), EXIT_MISSING_FILE)
        except KNOWN_ERRORS as e:
            _fail(str(e), EXIT_ERROR)

    return wrapper


def _print_frame(frame: pd.DataFrame, title: str) -> None:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column), justify="right" if frame[column].dtype.kind in "fiu" else "left")
    for row in frame.itertuples(index=False):
        table.add_row(*[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row])
    Console().print(table)


def _output_prefix(config: dict, out_dir: Optional[str] = None) -> Path:
    root = Path(ensure_data_directory(out_dir or config["paths"]["output_dir"]))
    return root / config["paths"]["run_id"]


@click.group()
@click.option("--config", "-c", type=click.Path(), help="Path to configuration file")
@click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="SECTION.KEY=VALUE",
    help="Override a configuration value (repeatable)",
)
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging")
@click.pass_context
@handle_errors
def main(ctx, config: Optional[str], overrides: tuple, verbose: bool):
    """SeqGuard CLI - Detect anomalous smart-home behavior sequences."""
    ctx.ensure_object(dict)

    setup_logging(verbose)

    loaded = load_config(config)
    if overrides:
        loaded = apply_overrides(loaded, list(overrides))
    ctx.obj["config"] = loaded
    ctx.obj["verbose"] = verbose


@main.command()
@click.option("--out-dir", "-o", required=True, type=click.Path(), help="Directory for the generated logs")
@click.option("--days", type=int, help="Days of normal behavior to simulate")
@click.option("--noise-rate", type=float, help="Noise events per routine event")
@click.option("--per-category", type=int, help="Anomaly instances per category")
@click.option("--seed", type=int, help="Random seed")
@click.pass_context
@handle_errors
def generate(ctx, out_dir: str, days, noise_rate, per_category, seed):
    """Generate synthetic train/valid/test logs and test labels."""
    overrides = []
    for key, value in (
        ("data.days", days),
        ("data.noise_rate", noise_rate),
        ("data.anomalies_per_category", per_category),
        ("seed", seed),
    ):
        if value is not None:
            overrides.append(f"{key}={value}")
    config = apply_overrides(ctx.obj["config"], overrides)

    click.echo(f"🏠 Generating {config['data']['days']} days of smart-home behavior")
    datasets = generate_datasets(config)
    paths = write_datasets(datasets, out_dir, config["data"]["format"])

    click.echo(f"  • train: {len(datasets.train)} events")
    click.echo(f"  • valid: {len(datasets.valid)} events")
    click.echo(f"  • test: {len(datasets.test)} events, {len(datasets.labels)} anomalous sequences")
    click.echo(f"\n💾 Data written to: {Path(paths['train']).parent}")


@main.command()
@click.option("--train", "train_path", required=True, type=click.Path(), help="Training event log")
@click.option("--valid", "valid_path", required=True, type=click.Path(), help="Validation event log")
@click.option("--out", "-o", required=True, type=click.Path(), help="Checkpoint file to write")
@click.option("--epochs", type=int, help="Maximum number of epochs")
@click.option(
    "--mask-strategy",
    type=click.Choice(["ldms", "none", "random", "topk"]),
    help="Masking curriculum",
)
@click.pass_context
@handle_errors
def train(ctx, train_path: str, valid_path: str, out: str, epochs, mask_strategy):
    """Train a detector and calibrate its threshold on the validation log."""
    overrides = []
    if epochs is not None:
        overrides.append(f"train.epochs={epochs}")
    if mask_strategy is not None:
        overrides.append(f"train.mask_strategy={mask_strategy}")
    config = apply_overrides(ctx.obj["config"], overrides)

    click.echo(f"🧠 Training on {train_path}")
    log_format = config["data"]["format"]
    train_events = read_event_log(train_path, log_format)
    valid_events = read_event_log(valid_path, log_format)
    run = train_detector(train_events, valid_events, config)

    ckpt_path = save_checkpoint(run.checkpoint, out)
    log_path = ckpt_path.with_name(f"{config['paths']['run_id']}_training_log.csv")
    run.history.write_csv(log_path)

    last = run.history.records[-1]
    click.echo("\n📊 Training Results:")
    click.echo(f"  • Epochs run: {last.epoch} (best {run.history.best_epoch})")
    click.echo(f"  • Final train loss: {last.train_loss:.4f}")
    click.echo(f"  • Threshold: {run.checkpoint.threshold:.6f}")
    click.echo(f"\n💾 Checkpoint saved to: {ckpt_path}")
    click.echo(f"💾 Training log saved to: {log_path}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path(), help="Checkpoint file")
@click.option("--events", required=True, type=click.Path(), help="Normal calibration event log")
@click.option("--quantile", type=float, help="Score quantile used as threshold")
@click.pass_context
@handle_errors
def calibrate(ctx, ckpt: str, events: str, quantile: Optional[float]):
    """Recalibrate the anomaly threshold of a checkpoint."""
    checkpoint = load_checkpoint(ckpt)
    quantile = quantile if quantile is not None else float(ctx.obj["config"]["scoring"]["quantile"])
    log_format = ctx.obj["config"]["data"]["format"]
    sequences = calibration_sequences(read_event_log(events, log_format), checkpoint.settings)
    threshold = Detector(checkpoint).calibrate(sequences, quantile)
    save_checkpoint(checkpoint, ckpt)
    click.echo(f"🎯 Threshold {threshold.value:.6f} (q={quantile}, {threshold.size} sequences)")


@main.command()
@click.option("--in", "events", required=True, type=click.Path(), help="Event log to score")
@click.option("--ckpt", required=True, type=click.Path(), help="Checkpoint file")
@click.option("--out", "-o", type=click.Path(), help="JSON-lines output (default: stdout)")
@click.pass_context
@handle_errors
def score(ctx, events: str, ckpt: str, out: Optional[str]):
    """Score every sequence of an event log."""
    checkpoint = load_checkpoint(ckpt)
    detector = Detector(checkpoint)
    if not checkpoint.calibrated:
        raise ScoringError("checkpoint has no calibrated threshold; run calibrate first")
    sequences = load_sequences(events, checkpoint.settings, ctx.obj["config"]["data"]["format"])
    records = [
        result.record(i, checkpoint.threshold)
        for i, result in enumerate(detector.score_sequences(sequences))
    ]
    lines = [json.dumps(record) for record in records]

    if out:
        Path(out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        abnormal = sum(1 for record in records if record["verdict"] == ABNORMAL)
        click.echo(f"🔎 {abnormal}/{len(records)} sequences flagged")
        click.echo(f"💾 Scores saved to: {out}")
    else:
        for line in lines:
            click.echo(line)


@main.command()
@click.option("--ckpt", type=click.Path(), help="Checkpoint file")
@click.option("--events", type=click.Path(), help="Labelled test event log")
@click.option("--scores", type=click.Path(), help="Score file written by 'score' (instead of --ckpt)")
@click.option("--labels", required=True, type=click.Path(), help="Labels CSV (seq_index,kind,category)")
@click.option("--out", "-o", type=click.Path(), help="Report file (.csv or .json)")
@click.pass_context
@handle_errors
def evaluate(ctx, ckpt, events, scores, labels: str, out: Optional[str]):
    """Report recall, precision, F1, FPR and FNR per anomaly kind."""
    label_rows = read_labels(labels)
    if scores:
        report = DetectionReport.from_score_records(read_score_records(scores), label_rows)
    elif ckpt and events:
        checkpoint = load_checkpoint(ckpt)
        sequences = load_sequences(events, checkpoint.settings, ctx.obj["config"]["data"]["format"])
        report = evaluate_detection(sequences, label_rows, Detector(checkpoint))
    else:
        raise ValueError("evaluate needs --scores, or both --ckpt and --events")

    frame = report.to_frame()
    _print_frame(frame, "Detection report")
    if out:
        out_path = Path(out)
    else:
        prefix = _output_prefix(ctx.obj["config"])
        out_path = prefix.with_name(f"{prefix.name}_report.csv")
    if out_path.suffix.lower() == ".json":
        frame.to_json(out_path, orient="records", indent=2)
    else:
        frame.to_csv(out_path, index=False)
    click.echo(f"\n💾 Report saved to: {out_path}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path(), help="Checkpoint file")
@click.option("--events", type=click.Path(), help="Event log (case and loss-distribution)")
@click.option(
    "--kind",
    required=True,
    type=click.Choice(["case", "similarity", "loss-distribution"]),
    help="What to export",
)
@click.option("--seq-index", type=int, default=0, help="Sequence for the case trace")
@click.option("--times", type=click.Choice(["hours", "days", "durations"]), default="hours")
@click.option("--controls", multiple=True, help="Controls for the similarity matrix (default: all)")
@click.option("--out-dir", "-o", type=click.Path(), help="Output directory")
@click.pass_context
@handle_errors
def export(ctx, ckpt, events, kind, seq_index, times, controls, out_dir):
    """Export attention, loss and embedding data as CSV."""
    config = ctx.obj["config"]
    prefix = _output_prefix(config, out_dir)
    checkpoint = load_checkpoint(ckpt)

    if kind == "similarity":
        chosen = list(controls) or list(checkpoint.vocabulary.controls)
        frame = embedding_similarity(checkpoint, chosen, times)
        path = prefix.with_name(f"{prefix.name}_similarity_{times}.csv")
        frame.to_csv(path)
        written = [path]
    else:
        if not events:
            raise ValueError(f"--events is required for the {kind} export")
        sequences = load_sequences(events, checkpoint.settings, ctx.obj["config"]["data"]["format"])
        detector = Detector(checkpoint)
        if kind == "case":
            if not 0 <= seq_index < len(sequences):
                raise ValueError(f"--seq-index {seq_index} out of range (0..{len(sequences) - 1})")
            written = export_case_trace(sequences[seq_index], detector).write(
                prefix.with_name(f"{prefix.name}_case{seq_index}")
            )
        else:
            distribution = export_loss_distribution(detector, sequences)
            written = distribution.write(prefix)
            click.echo(f"📈 Spearman(count, mean loss) = {distribution.spearman:.4f}")

    for path in written:
        click.echo(f"💾 {path}")


@main.command()
@click.option("--data-dir", required=True, type=click.Path(), help="Directory written by 'generate'")
@click.option("--workers", type=int, help="Worker processes (default: SEQGUARD_THREADS or physical cores)")
@click.option(
    "--variants",
    multiple=True,
    type=click.Choice(list(ABLATION_VARIANTS)),
    help="Subset of C0..C4 to run",
)
@click.pass_context
@handle_errors
def ablate(ctx, data_dir: str, workers: Optional[int], variants: tuple):
    """Train and evaluate the C0-C4 component ablation grid."""
    config = ctx.obj["config"]
    data = load_datasets(data_dir, config["data"]["format"])
    click.echo(f"🧪 Running ablation grid on {data_dir}")

    started = time.time()
    options = {"variants": list(variants)} if variants else {}
    frame = run_ablation(data.train, data.valid, data.test, data.labels, config, workers=workers, **options)

    _print_frame(frame, "F1 by variant")
    prefix = _output_prefix(config)
    path = prefix.with_name(f"{prefix.name}_ablation.csv")
    frame.to_csv(path, index=False)
    click.echo(f"\n⏱️  Finished in {format_duration(time.time() - started)}")
    click.echo(f"💾 Ablation table saved to: {path}")


@main.command("init-config")
@click.option("--output", "-o", default="seqguard.yaml", help="Output file for the sample configuration")
def init_config(output: str):
    """Write a sample configuration file."""
    path = save_sample_config(output)
    click.echo(f"📝 Sample configuration written to: {path}")


if __name__ == "__main__":
    main()
