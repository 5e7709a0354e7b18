"""Per-stage evaluation: greedy decoding, then ROUGE or micro-F1 per task."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import tokenizer
from ..errors import DataError
from ..model import generate_greedy_batch
from .classification import classification_metrics
from .rouge import rouge_scores

log = logging.getLogger(__name__)

GENERATION_METRICS = ("R1", "R2", "RL", "RLsum")
CLASSIFICATION_METRICS = ("Precision", "Recall", "F1-micro")


@dataclass
class EvalSample:
    prompt: str
    reference: str
    task: str  # "generation" | "classification"
    prediction: str | None = None

    def __post_init__(self):
        if not self.reference:
            raise DataError("reference must be non-empty")
        if self.task not in ("generation", "classification"):
            raise DataError(f"unknown task kind {self.task!r}")


@dataclass
class MetricReport:
    stage_label: str
    metrics: dict = field(default_factory=dict)  # task name -> {metric: value}
    counts: dict = field(default_factory=dict)  # task name -> sample count
    failures: dict = field(default_factory=dict)  # task name -> decode failures

    def to_dict(self) -> dict:
        return {"stage_label": self.stage_label, "metrics": self.metrics, "counts": self.counts, "failures": self.failures}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["stage_label"], d.get("metrics", {}), d.get("counts", {}), d.get("failures", {}))


@dataclass(frozen=True)
class EvalConfig:
    max_input: int = 320
    max_output: int = 80
    batch_size: int = 64


def predict(model, cfg, samples, ecfg: EvalConfig) -> tuple[list[str], int]:
    """Greedy predictions for each sample; a failing batch degrades to per-sample decoding."""
    preds: list[str] = []
    failures = 0
    for start in range(0, len(samples), ecfg.batch_size):
        chunk = samples[start : start + ecfg.batch_size]
        prompts = [tokenizer.encode(s.prompt) for s in chunk]
        try:
            outs = generate_greedy_batch(model, cfg, prompts, ecfg.max_output, ecfg.max_input)
            preds.extend(tokenizer.decode(o) for o in outs)
            continue
        except Exception as exc:  # noqa: BLE001 - recorded, never fatal
            log.warning("batch decode failed (%s); retrying per sample", exc)
        for p in prompts:
            try:
                out = generate_greedy_batch(model, cfg, [p], ecfg.max_output, ecfg.max_input)[0]
                preds.append(tokenizer.decode(out))
            except Exception as exc:  # noqa: BLE001
                log.warning("decode failed: %s", exc)
                preds.append("")
                failures += 1
    return preds, failures


def evaluate_stage(model, test_sets: dict, cfg, ecfg: EvalConfig = EvalConfig(), label_sets: dict | None = None) -> MetricReport:
    """Score ``model`` on every task in ``test_sets`` (task name -> list of EvalSample)."""
    if not test_sets or not any(test_sets.values()):
        raise DataError("empty test set")
    label_sets = label_sets or {}
    report = MetricReport(getattr(model, "stage_label", "SFT-16bit"))
    for task in sorted(test_sets):
        samples = test_sets[task]
        if not samples:
            continue
        preds, failures = predict(model, cfg, samples, ecfg)
        for s, p in zip(samples, preds):
            s.prediction = p
        kind = samples[0].task
        if kind == "generation":
            scores = np.array([rouge_scores(p, s.reference)[:4] for p, s in zip(preds, samples)], dtype=np.float64)
            means = scores.mean(axis=0)
            report.metrics[task] = {m: float(v) for m, v in zip(GENERATION_METRICS, means)}
        else:
            labels = label_sets.get(task) or sorted({s.reference for s in samples})
            c = classification_metrics(preds, [s.reference for s in samples], labels)
            report.metrics[task] = {"Precision": c.precision, "Recall": c.recall, "F1-micro": c.f1_micro}
        report.counts[task] = len(samples)
        report.failures[task] = failures
    return report
