"""Per-layer language contributions of fusion attention."""

from peft_fusion.attnlab.export import (
    TRACE_HEADER,
    TraceRow,
    export_comparison,
    export_heatmap,
    export_trace,
    read_trace,
)
from peft_fusion.attnlab.trace import (
    AttentionTrace,
    LayerContribution,
    ScoreTable,
    aggregate_scores,
    build_trace,
    contribution_percentages,
    token_heatmap,
)

__all__ = [
    "TRACE_HEADER",
    "AttentionTrace",
    "LayerContribution",
    "ScoreTable",
    "TraceRow",
    "aggregate_scores",
    "build_trace",
    "contribution_percentages",
    "export_comparison",
    "export_heatmap",
    "export_trace",
    "read_trace",
    "token_heatmap",
]
