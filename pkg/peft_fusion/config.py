try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from peft_fusion.exceptions import ConfigError

# xCodeEval ships its PHP split as 5,106 / 615 / 613; reused as the default seeded split ratio.
DEFAULT_SPLIT_COUNTS = (5106, 615, 613)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BackboneConfig(_Section):
    """Shape of the miniature decoder-only transformer.

    Parameters
    ----------
    num_layers : int
        Number of decoder layers ``L``. Default: 4
    hidden_size : int
        Model width ``h``; must be divisible by ``num_heads``. Default: 64
    num_heads : int
        Attention heads per layer. Default: 4
    ffn_size : int
        Inner width of the feed-forward sub-layer. Default: 256
    vocab_size : int | None
        Vocabulary size ``V``. ``None`` means "take it from the corpus vocabulary".
    max_seq_len : int
        Longest token sequence the position table covers. Default: 256
    layer_norm_eps : float
        Epsilon of every layer norm. Default: 1e-5
    init_std : float
        Standard deviation of the gaussian weight initializer. Default: 0.02
    layer_norm_placement : Literal["post"]
        Fixed post-layer-norm arrangement; kept in the config so checkpoints record it.

    """

    num_layers: int = Field(default=4, ge=1)
    hidden_size: int = Field(default=64, ge=1)
    num_heads: int = Field(default=4, ge=1)
    ffn_size: int = Field(default=256, ge=1)
    vocab_size: int | None = Field(default=None, ge=1)
    max_seq_len: int = Field(default=256, ge=1)
    layer_norm_eps: float = Field(default=1e-5, gt=0.0)
    init_std: float = Field(default=0.02, gt=0.0)
    layer_norm_placement: Literal["post"] = "post"

    @model_validator(mode="after")
    def _heads_divide_hidden(self) -> "BackboneConfig":
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size ({self.hidden_size}) must be divisible by num_heads ({self.num_heads})"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def with_vocab(self, vocab_size: int) -> "BackboneConfig":
        return self.model_copy(update={"vocab_size": vocab_size})


class PeftConfig(_Section):
    kind: Literal["bottleneck", "compacter", "lora"] = "bottleneck"
    bottleneck_dim: int | None = Field(default=None, ge=1)  # None -> hidden_size // 4
    phm_dim: int = Field(default=4, ge=1)
    phm_rank: int = Field(default=1, ge=1)
    lora_rank: int = Field(default=16, ge=1)
    lora_alpha: float = Field(default=16.0, gt=0.0)
    init_std: float = Field(default=0.02, gt=0.0)

    def resolved_bottleneck_dim(self, hidden_size: int) -> int:
        return self.bottleneck_dim or max(1, hidden_size // 4)


class TrainingConfig(_Section):
    adapter_lr: float = Field(default=1e-3, ge=0.0)
    fusion_lr: float = Field(default=5e-4, ge=0.0)
    pretrain_lr: float = Field(default=1e-3, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    batch_size: int = Field(default=8, ge=1)
    pretrain_epochs: int = Field(default=3, ge=1)
    adapter_epochs: int = Field(default=3, ge=1)
    epochs_per_phase: int = Field(default=2, ge=1)
    reset_moments_phase2: bool = False
    mask_mode: Literal["exclude", "zero"] = "exclude"
    mask_policy: Literal["target", "batch_language"] = "target"
    snapshot_phase1: bool = True
    prefetch_depth: int = Field(default=4, ge=1)


class SynthConfig(_Section):
    languages: dict[str, int] = Field(
        default_factory=lambda: {"ruby": 8, "python": 80, "java": 80, "go": 80}
    )
    overlap: float = Field(default=0.5, ge=0.0, le=1.0)
    pool_size: int = Field(default=24, ge=1)
    min_len: int = Field(default=2, ge=1)
    max_len: int = Field(default=5, ge=1)
    valid_size: int = Field(default=4, ge=0)
    test_size: int = Field(default=6, ge=0)

    @model_validator(mode="after")
    def _length_bounds(self) -> "SynthConfig":
        if self.min_len > self.max_len:
            raise ValueError("min_len must not exceed max_len")
        if any(size < 1 for size in self.languages.values()):
            raise ValueError("every language needs at least one training sample")
        return self


class DataConfig(_Section):
    train: Path | None = None
    valid: Path | None = None
    test: Path | None = None
    vocab_max_size: int = Field(default=4096, ge=5)
    target_language: str | None = None
    split_counts: tuple[int, int, int] = DEFAULT_SPLIT_COUNTS
    synth: SynthConfig = Field(default_factory=SynthConfig)


class EvaluationConfig(_Section):
    metrics: tuple[str, ...] = ("bleu4", "rougeL", "prf")
    bleu_smoothing: Literal["add_one", "none"] = "add_one"
    bleu_mode: Literal["sentence", "corpus"] = "sentence"
    rouge_beta: float = Field(default=1.0, gt=0.0)
    prf_splitter: Literal["subtoken", "whitespace"] = "subtoken"
    max_new_tokens: int = Field(default=32, ge=0)


class AnalysisConfig(_Section):
    order: Literal["aggregate_then_normalize", "normalize_then_aggregate"] = (
        "aggregate_then_normalize"
    )
    heatmap_layer: int | None = None  # None -> average over layers


class OutputConfig(_Section):
    run_root: Path = Path("runs")
    run_name: str | None = None
    # encoder of corpus, event, report and manifest files; both write identical bytes
    serializer: Literal["orjson", "json"] = "orjson"


class LabConfig(BaseSettings):
    """Resolved configuration of one laboratory run.

    Sections mirror the experiment stages: ``backbone`` (miniature transformer
    shape), ``peft`` (adapter family and hyperparameters), ``training`` (plan and
    optimizer settings), ``data`` (corpus paths and synthesis), ``evaluation``,
    ``analysis`` and ``output`` (run directory).

    Parameters
    ----------
    seed : int
        Seed every random stream is derived from. Default: 0
    log_level : Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        Logging level. Default: "INFO"

    Examples
    --------
    >>> config = LabConfig.from_toml(Path("lab.toml"), overrides={"training.batch_size": 4})
    >>> config.peft.lora_rank
    16

    Notes
    -----
    Precedence is command-line overrides, then the TOML file, then environment
    variables prefixed ``PEFT_FUSION_`` (nested keys joined by ``__``), then defaults.
    Unknown keys in any section are rejected.

    """

    seed: int = 0
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = "INFO"
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    peft: PeftConfig = Field(default_factory=PeftConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    model_config = SettingsConfigDict(
        env_prefix="PEFT_FUSION_",
        env_nested_delimiter="__",
        extra="forbid",
        frozen=True,
    )

    @model_validator(mode="after")
    def _peft_fits_backbone(self) -> "LabConfig":
        h = self.backbone.hidden_size
        d = self.peft.resolved_bottleneck_dim(h)
        n = self.peft.phm_dim
        if self.peft.kind == "compacter" and (h % n or d % n):
            raise ValueError(
                f"phm_dim ({n}) must divide hidden_size ({h}) and bottleneck_dim ({d})"
            )
        if self.peft.kind == "lora" and self.peft.lora_rank > h:
            raise ValueError(f"lora_rank ({self.peft.lora_rank}) exceeds hidden_size ({h})")
        return self

    @classmethod
    def from_toml(
        cls,
        path: Path | None = None,
        overrides: dict[str, Any] | None = None,
    ) -> "LabConfig":
        data: dict[str, Any] = {}
        if path is not None:
            try:
                with Path(path).open("rb") as handle:
                    data = tomllib.load(handle)
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}", key="--config") from exc
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"config file is not valid TOML: {exc}", key="--config") from exc
        for dotted, value in (overrides or {}).items():
            if value is None:
                continue
            _assign(data, dotted.split("."), value)
        try:
            return cls(**data)
        except ValidationError as exc:
            first = exc.errors()[0]
            key = ".".join(str(part) for part in first["loc"]) or "<root>"
            raise ConfigError(f"invalid configuration at '{key}': {first['msg']}", key=key) from exc

    def lookup(self, dotted: str) -> Any:
        node: Any = self
        for part in dotted.split("."):
            node = getattr(node, part)
        return node

    def validate_paths(self, keys: tuple[str, ...]) -> None:
        """Check that every path-valued key a command needs exists, before any compute."""
        for key in keys:
            value = self.lookup(key)
            if value is None:
                raise ConfigError(f"required path '{key}' is not set", key=key)
            if not Path(value).exists():
                raise ConfigError(f"path for '{key}' does not exist: {value}", key=key)

    def resolved_dict(self) -> dict[str, Any]:
        return self.model_dump(mode="json")


def _assign(tree: dict[str, Any], parts: list[str], value: Any) -> None:
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
