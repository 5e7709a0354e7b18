from .classification import INVALID_LABEL, ClassificationScores, classification_metrics, normalize_label
from .evaluate import (
    CLASSIFICATION_METRICS,
    GENERATION_METRICS,
    EvalConfig,
    EvalSample,
    MetricReport,
    evaluate_stage,
)
from .rouge import RougeScores, rouge_scores
from .wilcoxon import PairedScores, WilcoxonResult, wilcoxon_signed_rank

__all__ = [
    "CLASSIFICATION_METRICS",
    "GENERATION_METRICS",
    "INVALID_LABEL",
    "ClassificationScores",
    "EvalConfig",
    "EvalSample",
    "MetricReport",
    "PairedScores",
    "RougeScores",
    "WilcoxonResult",
    "classification_metrics",
    "evaluate_stage",
    "normalize_label",
    "rouge_scores",
    "wilcoxon_signed_rank",
]
