from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from collections.abc import Callable
from pathlib import Path
from typing import Annotated, Any, TypeVar

import typer
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from peft_fusion.cli import workflow
from peft_fusion.config import LabConfig
from peft_fusion.exceptions import EXIT_RUNTIME, BaseError, ConfigError
from peft_fusion.metrics import EvaluationResult
from peft_fusion.peft import ParamCount
from peft_fusion.utils import configure_logging

T = TypeVar("T")

app = typer.Typer(
    name="peft-fusion",
    help="Desk-scale laboratory for language adapters, AdapterFusion and AdvFusion",
    add_completion=False,
    rich_markup_mode="rich",
    no_args_is_help=True,
)

console = Console()
err_console = Console(stderr=True)

ConfigOpt = Annotated[
    Path | None,
    typer.Option("--config", "-c", help="TOML configuration file", dir_okay=False),
]
RunDirOpt = Annotated[
    Path | None,
    typer.Option("--run-dir", help="Output directory (default: <output.run_root>/<command>)"),
]
SeedOpt = Annotated[int | None, typer.Option("--seed", help="Override the configured seed")]
SetOpt = Annotated[
    list[str] | None,
    typer.Option("--set", help="Override a config key, e.g. --set training.batch_size=4"),
]


def parse_overrides(pairs: list[str] | None) -> dict[str, Any]:
    """``key=value`` pairs; values are read as TOML scalars, falling back to plain strings."""
    overrides: dict[str, Any] = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override '{pair}' is not of the form key=value", key="--set")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        overrides[key.strip()] = value
    return overrides


def load_config(config: Path | None, seed: int | None, pairs: list[str] | None, **extra: Any) -> LabConfig:
    overrides = parse_overrides(pairs)
    overrides["seed"] = seed
    overrides.update(extra)
    resolved = LabConfig.from_toml(config, overrides)
    configure_logging(resolved.log_level, err_console)
    return resolved


def execute(action: Callable[[], T]) -> T:
    """Run a command body, mapping library errors onto exit codes 2 and 3."""
    try:
        return action()
    except BaseError as exc:
        err_console.print(f"[bold red]error[/bold red] [{exc.error_code}] {escape(exc.message)}")
        if exc.is_usage_error():
            err_console.print("[dim]see 'peft-fusion COMMAND --help' for the options[/dim]")
        raise typer.Exit(exc.exit_code) from exc
    except OSError as exc:
        err_console.print(f"[bold red]error[/bold red] {escape(str(exc))}")
        raise typer.Exit(EXIT_RUNTIME) from exc


@app.command()
def synth(config: ConfigOpt = None, run_dir: RunDirOpt = None, seed: SeedOpt = None, set_: SetOpt = None) -> None:
    """Write a seeded multilingual toy corpus (train/valid/test JSONL)."""

    def body() -> None:
        cfg = load_config(config, seed, set_)
        with workflow.RunDir.open(cfg, run_dir, "synth") as run:
            paths = workflow.synth(cfg, run)
        for split, path in paths.items():
            console.print(f"{split}: {path}")

    execute(body)


@app.command()
def split(
    source: Annotated[Path, typer.Argument(help="Corpus JSONL without predefined splits")],
    config: ConfigOpt = None,
    run_dir: RunDirOpt = None,
    seed: SeedOpt = None,
    set_: SetOpt = None,
) -> None:
    """Seeded train/valid/test split in the ratio of data.split_counts."""

    def body() -> None:
        cfg = load_config(config, seed, set_)
        with workflow.RunDir.open(cfg, run_dir, "split") as run:
            paths = workflow.split(cfg, run, source)
        for name, path in paths.items():
            console.print(f"{name}: {path}")

    execute(body)


@app.command()
def stats(config: ConfigOpt = None, seed: SeedOpt = None, set_: SetOpt = None) -> None:
    """Per-language sample counts of the configured splits."""

    def body() -> None:
        table_data = workflow.stats(load_config(config, seed, set_))
        splits = sorted({name for row in table_data.values() for name in row}, key=["train", "valid", "test"].index)
        table = Table(title="Corpus statistics", header_style="bold magenta")
        table.add_column("language", style="cyan")
        for name in splits:
            table.add_column(name, justify="right")
        if "train" in splits:
            table.add_column("share of largest", justify="right")
        largest = max((row.get("train", 0) for row in table_data.values()), default=0)
        for language, row in table_data.items():
            cells = [language, *(str(row.get(name, 0)) for name in splits)]
            if "train" in splits:
                cells.append(f"{row.get('train', 0) / largest:.2f}" if largest else "-")
            table.add_row(*cells)
        console.print(table)

    execute(body)


@app.command()
def pretrain(config: ConfigOpt = None, run_dir: RunDirOpt = None, seed: SeedOpt = None, set_: SetOpt = None) -> None:
    """Pretrain the miniature backbone on data.train (full-sequence CLM)."""

    def body() -> None:
        cfg = load_config(config, seed, set_)
        with workflow.RunDir.open(cfg, run_dir, "pretrain") as run:
            path = workflow.pretrain(cfg, run)
        console.print(f"backbone checkpoint: {path}")

    execute(body)


@app.command("train-adapter")
def train_adapter(
    backbone: Annotated[Path, typer.Option("--backbone", help="Backbone checkpoint")],
    language: Annotated[str, typer.Option("--language", help="Language tag to train")],
    method: Annotated[str, typer.Option("--method", help="bottleneck, compacter or lora")] = "bottleneck",
    config: ConfigOpt = None,
    run_dir: RunDirOpt = None,
    seed: SeedOpt = None,
    set_: SetOpt = None,
) -> None:
    """Train one language's PEFT modules over the frozen backbone."""

    def body() -> None:
        cfg = load_config(config, seed, set_)
        with workflow.RunDir.open(cfg, run_dir, f"adapter-{method}-{language}") as run:
            path = workflow.train_adapter(cfg, run, backbone, language, method)
        console.print(f"adapter checkpoint: {path}")

    execute(body)


@app.command("train-fusion")
def train_fusion(
    adapters: Annotated[Path, typer.Option("--adapters", help="Directory of adapter checkpoints")],
    mode: Annotated[str, typer.Option("--mode", help="fusion or advfusion")] = "fusion",
    target: Annotated[str | None, typer.Option("--target", help="Target language (advfusion)")] = None,
    config: ConfigOpt = None,
    run_dir: RunDirOpt = None,
    seed: SeedOpt = None,
    set_: SetOpt = None,
) -> None:
    """Train AdapterFusion or two-phase AdvFusion over frozen adapters of one kind."""

    def body() -> None:
        cfg = load_config(config, seed, set_)
        with workflow.RunDir.open(cfg, run_dir, mode) as run:
            artifacts = workflow.train_fusion(cfg, run, adapters, mode, target)
        console.print(f"fusion checkpoint: {artifacts.checkpoint}")
        if artifacts.snapshot is not None:
            console.print(f"phase-1 snapshot: {artifacts.snapshot}")

    execute(body)


def _render_report(result: EvaluationResult) -> Table:
    names = list(result.overall)
    table = Table(title="Evaluation", header_style="bold magenta")
    table.add_column("language", style="cyan")
    for name in names:
        table.add_column(name, justify="right")
    for language, reports in result.per_language.items():
        table.add_row(language, *(f"{reports[name].headline:.4f}" for name in names))
    table.add_row("[bold]overall[/bold]", *(f"{result.overall[name].headline:.4f}" for name in names))
    return table


@app.command()
def evaluate(
    checkpoint: Annotated[Path | None, typer.Option("--checkpoint", help="Checkpoint to decode with")] = None,
    metrics: Annotated[str | None, typer.Option("--metrics", help="Comma list: bleu4,rougeL,prf")] = None,
    split_name: Annotated[str, typer.Option("--split", help="Corpus split to score")] = "test",
    language: Annotated[str | None, typer.Option("--language", help="Only this language")] = None,
    predictions: Annotated[
        Path | None, typer.Option("--predictions", help="Score a predictions file instead of decoding")
    ] = None,
    config: ConfigOpt = None,
    run_dir: RunDirOpt = None,
    seed: SeedOpt = None,
    set_: SetOpt = None,
) -> None:
    """Greedy-decode a split and write per-language and overall metric reports."""

    def body() -> None:
        cfg = load_config(config, seed, set_)
        names = [name.strip() for name in metrics.split(",") if name.strip()] if metrics else None
        with workflow.RunDir.open(cfg, run_dir, "evaluate") as run:
            result, path = workflow.evaluate(cfg, run, checkpoint, names, split_name, language, predictions)
        console.print(_render_report(result))
        console.print(f"report: {path}")

    execute(body)


@app.command()
def analyze(
    checkpoint: Annotated[Path, typer.Option("--checkpoint", help="Fusion or AdvFusion checkpoint")],
    split_name: Annotated[str, typer.Option("--split", help="Corpus split to feed")] = "test",
    out: Annotated[Path | None, typer.Option("--out", help="Trace CSV (relative to the run dir)")] = None,
    language: Annotated[str | None, typer.Option("--language", help="Only this language")] = None,
    heatmap: Annotated[str | None, typer.Option("--heatmap", help="Sample id for a per-token heatmap")] = None,
    config: ConfigOpt = None,
    run_dir: RunDirOpt = None,
    seed: SeedOpt = None,
    set_: SetOpt = None,
) -> None:
    """Export per-layer language contributions of the fusion attention."""

    def body() -> None:
        cfg = load_config(config, seed, set_)
        with workflow.RunDir.open(cfg, run_dir, "analyze") as run:
            artifacts = workflow.analyze(cfg, run, checkpoint, split_name, out, language, heatmap)
        table = Table(title="Top contributing adapter per layer", header_style="bold magenta")
        table.add_column("layer", justify="right")
        table.add_column("adapter", style="cyan")
        table.add_column("share %", justify="right")
        for entry in artifacts.trace.layers:
            top = entry.top()
            note = " (equal)" if entry.degenerate else ""
            table.add_row(str(entry.layer), top + note, f"{artifacts.trace.share(entry.layer, top):.2f}")
        console.print(table)
        console.print(f"trace: {artifacts.csv}")
        if artifacts.heatmap is not None:
            console.print(f"heatmap: {artifacts.heatmap}")

    execute(body)


def _render_counts(counts: dict[str, ParamCount]) -> Table:
    table = Table(title="Parameter efficiency", header_style="bold magenta")
    table.add_column("setup", style="cyan")
    table.add_column("trainable", justify="right")
    table.add_column("total", justify="right")
    table.add_column("ratio", justify="right")
    for name, count in counts.items():
        table.add_row(name, f"{count.trainable:,}", f"{count.total:,}", f"{count.ratio:.4f}")
    return table


@app.command()
def params(
    checkpoint: Annotated[Path | None, typer.Option("--checkpoint", help="Count a checkpoint's model")] = None,
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    set_: SetOpt = None,
) -> None:
    """Trainable versus total parameters of every PEFT setup."""

    def body() -> None:
        console.print(_render_counts(workflow.params(load_config(config, seed, set_), checkpoint)))

    execute(body)


@app.command()
def protocol(config: ConfigOpt = None, run_dir: RunDirOpt = None, seed: SeedOpt = None, set_: SetOpt = None) -> None:
    """Run the whole desk-scale comparison of the seven configurations."""

    def body() -> None:
        cfg = load_config(config, seed, set_)
        with workflow.RunDir.open(cfg, run_dir, "protocol") as run:
            result = workflow.protocol(cfg, run)
        table = Table(title=f"Target language: {result.target}", header_style="bold magenta")
        table.add_column("config", style="cyan")
        for name in workflow.PROTOCOL_METRICS:
            table.add_column(name, justify="right")
            table.add_column(f"{name} vs {workflow.PROTOCOL_BASELINE}", justify="right")
        table.add_column("trainable %", justify="right")
        for row in result.rows:
            cells = [row.name]
            for name in workflow.PROTOCOL_METRICS:
                relative = row.relative.get(name)
                cells += [f"{row.scores[name]:.2f}", "-" if relative is None else f"{relative:+.1f}%"]
            cells.append(f"{100 * row.params.ratio:.2f}")
            table.add_row(*cells)
        console.print(table)
        console.print(f"comparison: {result.comparison}")
        console.print(f"attention: {result.attention}")

    execute(body)
