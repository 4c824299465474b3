"""Run-directory workflows behind the command-line commands.

Every function takes a resolved :class:`LabConfig` and a :class:`RunDir`,
writes its artifacts inside that directory and returns what it produced; the
Typer layer only parses flags and renders results.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from peft_fusion.attnlab import (
    AttentionTrace,
    build_trace,
    export_comparison,
    export_heatmap,
    export_trace,
    token_heatmap,
)
from peft_fusion.backbone import Backbone
from peft_fusion.config import LabConfig
from peft_fusion.corpus import (
    Sample,
    Vocabulary,
    build_vocab,
    by_language,
    corpus_stats,
    encode,
    language_counts,
    load_corpus,
    save_corpus,
    split_corpus,
    synth_corpus,
)
from peft_fusion.exceptions import BaseError, UsageError, create_error_context
from peft_fusion.fusion import FusionStack
from peft_fusion.metrics import EvaluationResult, check_metric_names, evaluate_predictions, pair_predictions
from peft_fusion.peft import AdapterSet, ParamCount, build_adapter_set, param_count, parse_adapter_kind
from peft_fusion.serializers import BaseSerializer, default_serializer, get_serializer
from peft_fusion.training import (
    Checkpoint,
    EventLog,
    ModelBundle,
    TrainingHooks,
    TrainingPlan,
    generate_predictions,
    load_checkpoint,
    pretrain_backbone,
    restore_adapter_set,
    restore_backbone,
    restore_bundle,
    save_checkpoint,
    trace_attention,
    train_adapterfusion,
    train_advfusion,
    train_language_adapter,
)
from peft_fusion.typed import AdapterKind, Phase, TrainingMode

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "config.resolved.json"
EVENTS_FILE = "events.jsonl"
SNAPSHOT_SUFFIX = "phase1"
PARAMS_VOCAB_SIZE = 128

# Row set and order of the comparison table.
PROTOCOL_CONFIGS = (
    ("AdvFusion", TrainingMode.ADVFUSION, AdapterKind.BOTTLENECK),
    ("AdvFusion+Compacter", TrainingMode.ADVFUSION, AdapterKind.COMPACTER),
    ("AdapterFusion", TrainingMode.FUSION, AdapterKind.BOTTLENECK),
    ("AdapterFusion+Compacter", TrainingMode.FUSION, AdapterKind.COMPACTER),
    ("Compacter", TrainingMode.ADAPTER, AdapterKind.COMPACTER),
    ("TaskAdapter", TrainingMode.ADAPTER, AdapterKind.BOTTLENECK),
    ("LoRA", TrainingMode.ADAPTER, AdapterKind.LORA),
)
PROTOCOL_BASELINE = "AdapterFusion"
PROTOCOL_METRICS = ("bleu4", "rougeL")


@dataclass
class RunDir:
    """Output directory of one command; holds the resolved config echo and the event log."""

    path: Path
    config: LabConfig
    command: str
    serializer: BaseSerializer = field(default_factory=default_serializer)
    log: EventLog | None = field(default=None, repr=False)

    @classmethod
    def open(cls, config: LabConfig, override: Path | None, command: str) -> RunDir:
        """Create the directory, echo the resolved config and start the event log.

        Use as a context manager: leaving it writes ``run_end``, or the error
        that aborted the command, as the last line of ``events.jsonl``.
        """
        path = Path(override) if override is not None else config.output.run_root / (config.output.run_name or command)
        path.mkdir(parents=True, exist_ok=True)
        run = cls(path, config, command, get_serializer(config.output.serializer))
        (path / RESOLVED_CONFIG).write_bytes(run.serializer.dumps(config.resolved_dict()) + b"\n")
        run.log = EventLog(path / EVENTS_FILE, run.serializer)
        run.log.mark("run_start", command=command, seed=config.seed)
        logger.info("run directory %s", path)
        return run

    def child(self, *parts: str, config: LabConfig | None = None) -> RunDir:
        return RunDir.open(config or self.config, self.path.joinpath(*parts), parts[-1])

    def artifact(self, name: str | Path) -> Path:
        path = Path(name)
        return path if path.is_absolute() else self.path / path

    def events(self) -> EventLog:
        if self.log is None:
            raise UsageError(f"run directory {self.path} is closed", error_code="RUN_CLOSED")
        return self.log

    def close(self, error: BaseException | None = None) -> None:
        if self.log is None:
            return
        if isinstance(error, BaseError):
            self.log.record_error(error)
        elif error is not None:
            self.log.mark("run_end", command=self.command, status="failed", error=repr(error))
        else:
            self.log.mark("run_end", command=self.command, status="ok", steps=len(self.log.of_kind("step")))
        self.log.close()
        self.log = None

    def __enter__(self) -> RunDir:
        return self

    def __exit__(self, exc_type: object, exc: BaseException | None, tb: object) -> None:
        self.close(exc)


def split_samples(config: LabConfig, split: str) -> list[Sample]:
    key = f"data.{split}"
    if split not in ("train", "valid", "test"):
        raise UsageError(f"unknown split '{split}'", error_code="UNKNOWN_SPLIT")
    config.validate_paths((key,))
    return load_corpus(config.lookup(key))


def with_data(config: LabConfig, **paths: Path | str | None) -> LabConfig:
    update = {key: Path(value) if value is not None else None for key, value in paths.items()}
    data = config.data.model_copy(update=update)
    return config.model_copy(update={"data": data})


def _only_language(samples: Sequence[Sample], language: str | None) -> list[Sample]:
    if language is None:
        return list(samples)
    picked = [sample for sample in samples if sample.language == language]
    if not picked:
        raise UsageError(
            f"language '{language}' is absent from the corpus (present: {', '.join(language_counts(samples))})",
            error_code="LANGUAGE_ABSENT",
        )
    return picked


def synth(config: LabConfig, run: RunDir) -> dict[str, Path]:
    return synth_corpus(config.data.synth, config.seed, run.artifact("corpus"), run.serializer)


def split(config: LabConfig, run: RunDir, source: Path) -> dict[str, Path]:
    """Seeded train/valid/test split of a corpus shipped as one file."""
    samples = load_corpus(source)
    parts = split_corpus(samples, config.seed, config.data.split_counts)
    paths = {}
    for name, part in zip(("train", "valid", "test"), parts, strict=True):
        path = run.artifact(Path("corpus") / f"{name}.jsonl")
        save_corpus(path, part, run.serializer)
        paths[name] = path
    return paths


def stats(config: LabConfig) -> dict[str, dict[str, int]]:
    splits = {}
    for name in ("train", "valid", "test"):
        path = config.lookup(f"data.{name}")
        if path is not None:
            config.validate_paths((f"data.{name}",))
            splits[name] = load_corpus(path)
    if not splits:
        raise UsageError("no corpus split configured (set data.train, data.valid or data.test)", error_code="NO_CORPUS")
    return corpus_stats(splits)


def pretrain(config: LabConfig, run: RunDir) -> Path:
    samples = split_samples(config, "train")
    vocab = build_vocab(samples, config.data.vocab_max_size)
    backbone = Backbone(config.backbone.with_vocab(len(vocab)), seed=config.seed)
    plan = TrainingPlan.from_config(config, TrainingMode.PRETRAIN)
    result = pretrain_backbone(backbone, samples, vocab, plan, run.events())
    return save_checkpoint(
        run.artifact("backbone.ckpt"), result.bundle, config.resolved_dict(), result.lineage, vocab.to_list()
    )


def _backbone_from(path: Path) -> tuple[Checkpoint, Backbone, Vocabulary]:
    checkpoint = load_checkpoint(path)
    return checkpoint, restore_backbone(checkpoint), Vocabulary.from_list(checkpoint.vocab)


def adapter_checkpoint_name(method: str, language: str) -> str:
    return f"adapter-{method}-{language}.ckpt"


def train_adapter(
    config: LabConfig,
    run: RunDir,
    backbone_path: Path,
    language: str,
    method: str,
    out_dir: Path | None = None,
) -> Path:
    kind = parse_adapter_kind(method)
    samples = _only_language(split_samples(config, "train"), language)
    _, backbone, vocab = _backbone_from(backbone_path)
    adapter_set = build_adapter_set(kind, language, backbone.config, config.peft, config.seed)
    plan = TrainingPlan.from_config(config, TrainingMode.ADAPTER)
    result = train_language_adapter(backbone, adapter_set, samples, vocab, plan, run.events())
    path = (out_dir or run.path) / adapter_checkpoint_name(adapter_set.kind.value, language)
    return save_checkpoint(path, result.bundle, config.resolved_dict(), result.lineage, vocab.to_list())


def load_adapter_dir(directory: Path) -> tuple[Backbone, Vocabulary, dict[str, AdapterSet]]:
    """Restore every adapter checkpoint of a directory over their shared backbone."""
    paths = sorted(Path(directory).glob("*.ckpt"))
    backbone: Backbone | None = None
    vocab: Vocabulary | None = None
    adapter_sets: dict[str, AdapterSet] = {}
    for path in paths:
        checkpoint = load_checkpoint(path)
        if checkpoint.is_fusion or not checkpoint.adapter_groups():
            logger.warning("skipping %s: not an adapter checkpoint", path.name)
            continue
        restored = restore_backbone(checkpoint)
        if backbone is None:
            backbone, vocab = restored, Vocabulary.from_list(checkpoint.vocab)
        elif restored.content_hash() != backbone.content_hash():
            raise UsageError(
                f"{path.name} was trained over a different backbone",
                error_code="BACKBONE_MISMATCH",
                context=create_error_context(component="cli", path=str(path)),
            )
        for group in checkpoint.adapter_groups():
            adapter_set = restore_adapter_set(checkpoint, group, backbone.config)
            if adapter_set.language_tag in adapter_sets:
                raise UsageError(
                    f"two adapters for language '{adapter_set.language_tag}' in {directory}",
                    error_code="DUPLICATE_ADAPTER_TAGS",
                )
            adapter_sets[adapter_set.language_tag] = adapter_set.freeze()
    if backbone is None or vocab is None:
        raise UsageError(f"no adapter checkpoints in {directory}", error_code="NO_ADAPTERS")
    return backbone, vocab, adapter_sets


@dataclass(slots=True)
class FusionArtifacts:
    checkpoint: Path
    snapshot: Path | None = None


def fusion_checkpoint_name(mode: TrainingMode, kind: str, suffix: str | None = None) -> str:
    stem = f"{mode.value}-{kind}"
    return f"{stem}-{suffix}.ckpt" if suffix else f"{stem}.ckpt"


def train_fusion(
    config: LabConfig,
    run: RunDir,
    adapters_dir: Path,
    mode: str,
    target: str | None = None,
) -> FusionArtifacts:
    try:
        training_mode = TrainingMode(mode)
    except ValueError as exc:
        raise UsageError(f"unknown fusion mode '{mode}' (fusion or advfusion)", error_code="UNKNOWN_MODE") from exc
    if training_mode not in (TrainingMode.FUSION, TrainingMode.ADVFUSION):
        raise UsageError(f"'{mode}' is not a fusion mode", error_code="UNKNOWN_MODE")
    target = target or config.data.target_language
    samples = split_samples(config, "train")
    backbone, vocab, adapter_sets = load_adapter_dir(adapters_dir)
    tags = tuple(sorted(adapter_sets))
    plan = TrainingPlan.from_config(
        config, training_mode, tags, target if training_mode is TrainingMode.ADVFUSION else None
    )
    kinds = sorted({adapter_set.kind.value for adapter_set in adapter_sets.values()})
    fusion = FusionStack(
        backbone.config.num_layers,
        backbone.config.hidden_size,
        tags,
        seed=config.seed,
        init_std=config.peft.init_std,
        mask_mode=plan.mask_mode,
    )
    kind = kinds[0] if len(kinds) == 1 else "mixed"
    artifacts = FusionArtifacts(run.artifact(fusion_checkpoint_name(training_mode, kind)))
    events = run.events()
    if training_mode is TrainingMode.FUSION:
        result = train_adapterfusion(backbone, adapter_sets, fusion, samples, vocab, plan, events)
    else:

        def snapshot(phase: Phase, bundle: ModelBundle) -> None:
            if phase is Phase.ADVERSARIAL and config.training.snapshot_phase1:
                artifacts.snapshot = save_checkpoint(
                    run.artifact(fusion_checkpoint_name(training_mode, kind, SNAPSHOT_SUFFIX)),
                    bundle,
                    config.resolved_dict(),
                    {"mode": training_mode.value, "kind": kind, "snapshot": Phase.ADVERSARIAL.value},
                    vocab.to_list(),
                )

        result = train_advfusion(
            backbone, adapter_sets, fusion, samples, vocab, plan, events, TrainingHooks(on_phase_end=snapshot)
        )
    save_checkpoint(artifacts.checkpoint, result.bundle, config.resolved_dict(), result.lineage, vocab.to_list())
    return artifacts


def evaluate(
    config: LabConfig,
    run: RunDir,
    checkpoint_path: Path | None,
    metrics: Sequence[str] | None = None,
    split_name: str = "test",
    language: str | None = None,
    predictions_path: Path | None = None,
    report_name: str = "report.jsonl",
) -> tuple[EvaluationResult, Path]:
    names = check_metric_names(metrics if metrics is not None else config.evaluation.metrics)
    references = _only_language(split_samples(config, split_name), language)
    if predictions_path is not None:
        pairs = pair_predictions(load_corpus(predictions_path), references)
    elif checkpoint_path is not None:
        checkpoint = load_checkpoint(checkpoint_path)
        bundle = restore_bundle(checkpoint)
        vocab = Vocabulary.from_list(checkpoint.vocab)
        pairs = generate_predictions(bundle, references, vocab, config.evaluation.max_new_tokens)
    else:
        raise UsageError("evaluate needs --checkpoint or --predictions", error_code="NOTHING_TO_EVALUATE")
    result = evaluate_predictions(pairs, config.evaluation, names)
    return result, result.write(run.artifact(report_name), run.serializer)


@dataclass(slots=True)
class AnalysisArtifacts:
    trace: AttentionTrace
    csv: Path
    heatmap: Path | None = None


def analyze(
    config: LabConfig,
    run: RunDir,
    checkpoint_path: Path,
    split_name: str = "test",
    out: Path | None = None,
    language: str | None = None,
    heatmap_sample: str | None = None,
) -> AnalysisArtifacts:
    checkpoint = load_checkpoint(checkpoint_path)
    if not checkpoint.is_fusion:
        raise UsageError(
            f"{checkpoint_path} is not a fusion checkpoint", error_code="NOT_A_FUSION_CHECKPOINT"
        )
    samples = _only_language(split_samples(config, split_name), language or config.data.target_language)
    bundle = restore_bundle(checkpoint)
    vocab = Vocabulary.from_list(checkpoint.vocab)
    captured = trace_attention(bundle, samples, vocab)
    trace = build_trace(captured, config.analysis.order)
    artifacts = AnalysisArtifacts(trace, export_trace(trace, run.artifact(out or "attention.csv")))
    if heatmap_sample is not None:
        chosen = [item for item in captured if item.sample_id == heatmap_sample]
        if not chosen:
            raise UsageError(f"sample '{heatmap_sample}' is not in the analyzed split", error_code="SAMPLE_ABSENT")
        sample = next(item for item in samples if item.id == heatmap_sample)
        ids = encode(sample, vocab, bundle.backbone.config.max_seq_len).ids
        matrix = token_heatmap(chosen, config.analysis.heatmap_layer)
        artifacts.heatmap = export_heatmap(
            matrix, [vocab.itos[token] for token in ids], chosen[0].tags, run.artifact(f"heatmap-{heatmap_sample}.csv")
        )
    return artifacts


def _fresh_counts(config: LabConfig, vocab_size: int) -> dict[str, ParamCount]:
    backbone_config = config.backbone.with_vocab(vocab_size)
    languages = sorted(config.data.synth.languages)
    counts: dict[str, ParamCount] = {}
    for kind in AdapterKind:
        backbone = Backbone(backbone_config, seed=config.seed).freeze()
        adapter_set = build_adapter_set(kind, languages[0], backbone_config, config.peft, config.seed)
        counts[f"adapter ({kind.value})"] = param_count(ModelBundle(backbone, {languages[0]: adapter_set}).view())
    for mode in (TrainingMode.FUSION, TrainingMode.ADVFUSION):
        backbone = Backbone(backbone_config, seed=config.seed).freeze()
        adapter_sets = {
            tag: build_adapter_set(AdapterKind.BOTTLENECK, tag, backbone_config, config.peft, config.seed).freeze()
            for tag in languages
        }
        fusion = FusionStack(
            backbone_config.num_layers, backbone_config.hidden_size, languages, seed=config.seed
        ).unfreeze()
        counts[mode.value] = param_count(ModelBundle(backbone, adapter_sets, fusion).view())
    return counts


def params(config: LabConfig, checkpoint_path: Path | None = None) -> dict[str, ParamCount]:
    """Trainable/total counts of every setup, or of one checkpoint's model."""
    if checkpoint_path is None:
        return _fresh_counts(config, config.backbone.vocab_size or PARAMS_VOCAB_SIZE)
    checkpoint = load_checkpoint(checkpoint_path)
    return {checkpoint_path.name: checkpoint_counts(restore_bundle(checkpoint))}


def checkpoint_counts(bundle: ModelBundle) -> ParamCount:
    """Count a restored bundle with the trainability its training run had."""
    if bundle.fusion is None:
        for adapter_set in bundle.adapter_sets.values():
            adapter_set.unfreeze()
        if not bundle.adapter_sets:
            bundle.backbone.unfreeze()
    counts = param_count(bundle.view())
    bundle.freeze_all()
    return counts


@dataclass(slots=True)
class ComparisonRow:
    name: str
    mode: TrainingMode
    kind: AdapterKind
    scores: dict[str, float]
    params: ParamCount
    relative: dict[str, float | None] = field(default_factory=dict)

    def as_csv(self) -> list[Any]:
        cells: list[Any] = [self.name, self.mode.value, self.kind.value]
        cells += [format(self.scores[name], ".12g") for name in PROTOCOL_METRICS]
        cells += [self.params.trainable, self.params.total, format(self.params.ratio, ".12g")]
        for name in PROTOCOL_METRICS:
            relative = self.relative.get(name)
            cells.append("" if relative is None else format(relative, ".12g"))
        return cells


@dataclass
class ProtocolResult:
    target: str
    rows: list[ComparisonRow]
    comparison: Path
    attention: Path


def relative_improvement(score: float, baseline: float) -> float | None:
    return None if baseline == 0 else 100.0 * (score - baseline) / baseline


def write_comparison(rows: Sequence[ComparisonRow], path: Path) -> Path:
    header = ["config", "mode", "kind", *PROTOCOL_METRICS, "trainable", "total", "ratio"]
    header += [f"{name}_rel" for name in PROTOCOL_METRICS]
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row.as_csv())
    return Path(path)


def _target_language(config: LabConfig, train: Sequence[Sample]) -> str:
    if config.data.target_language is not None:
        return config.data.target_language
    counts = language_counts(train)
    return min(counts, key=lambda language: (counts[language], language))


def protocol(config: LabConfig, run: RunDir) -> ProtocolResult:
    """End-to-end desk-scale comparison of the seven configurations on the target language."""
    corpus = synth(config, run)
    config = with_data(config, **corpus)
    train = load_corpus(corpus["train"])
    languages = list(by_language(train))
    target = _target_language(config, train)
    logger.info("protocol: %d languages, target '%s'", len(languages), target)

    with run.child("pretrain", config=config) as child:
        backbone_path = pretrain(config, child)
    adapter_dirs: dict[AdapterKind, Path] = {}
    for kind in AdapterKind:
        adapter_dirs[kind] = run.artifact(Path("adapters") / kind.value)
        for language in languages:
            with run.child("adapters", kind.value, language, config=config) as child:
                train_adapter(config, child, backbone_path, language, kind.value, out_dir=adapter_dirs[kind])

    checkpoints: dict[str, Path] = {}
    for name, mode, kind in PROTOCOL_CONFIGS:
        if mode is TrainingMode.ADAPTER:
            checkpoints[name] = adapter_dirs[kind] / adapter_checkpoint_name(kind.value, target)
            continue
        with run.child("fusion", f"{mode.value}-{kind.value}", config=config) as child:
            fused = train_fusion(config, child, adapter_dirs[kind], mode.value, target)
        checkpoints[name] = fused.checkpoint

    rows = []
    for name, mode, kind in PROTOCOL_CONFIGS:
        result, _ = evaluate(
            config,
            run,
            checkpoints[name],
            PROTOCOL_METRICS,
            # a monolingual adapter is only scored on its own language
            language=target if mode is TrainingMode.ADAPTER else None,
            report_name=str(Path("reports") / f"{name}.jsonl"),
        )
        scores = {metric: result.headline(metric, target) for metric in PROTOCOL_METRICS}
        counts = checkpoint_counts(restore_bundle(load_checkpoint(checkpoints[name])))
        rows.append(ComparisonRow(name, mode, kind, scores, counts))
    baseline = next(row for row in rows if row.name == PROTOCOL_BASELINE)
    for row in rows:
        row.relative = {
            metric: relative_improvement(row.scores[metric], baseline.scores[metric]) for metric in PROTOCOL_METRICS
        }

    traces = {}
    for name in ("AdapterFusion", "AdvFusion"):
        traces[name] = analyze(
            config, run, checkpoints[name], "test", Path("attention") / f"{name}.csv", language=target
        ).trace
    attention = export_comparison(traces, run.artifact("attention-comparison.csv"))
    comparison = write_comparison(rows, run.artifact("comparison.csv"))
    return ProtocolResult(target, rows, comparison, attention)
