"""Three-stage orchestration: SFT, post-training quantization, QLoRA recovery.

Run directory layout::

    <out>/data/<dataset>.<split>.jsonl
    <out>/checkpoints/stage1.pqlr, stage2.pqlr, stage3.pqlr
    <out>/logs/stage1.log, stage3.log
    <out>/manifest.json

The manifest is rewritten after every stage. A rerun with the same config
skips each stage whose record and checkpoint are already present.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import STAGE_SFT, __version__, tokenizer
from .adapter import QLoraModel, init_lora, train_qlora
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import CALL_PURPOSE_LABELS, encode_records, generate_synthetic, load_dataset_jsonl, records_hash
from .errors import ConfigError, DataError, PtqLoraError
from .evaluation.evaluate import EvalSample, MetricReport, evaluate_stage
from .model import DenseModel, init_params, linear_names
from .numerics import Rng
from .quant.apply import collect_calibration, quantize_model, stage_label
from .sft import train_sft

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
# Stream ids under the run seed; each consumer gets its own.
STREAM_INIT, STREAM_MIXTURE, STREAM_CALIB, STREAM_LORA = 0, 5, 2, 4


@dataclass
class StageRecord:
    label: str
    checkpoint: str
    report: MetricReport
    wall_clock_s: float
    data_hash: str | None = None
    log_path: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["report"] = self.report.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageRecord":
        d = dict(d)
        d["report"] = MetricReport.from_dict(d["report"])
        return cls(**d)


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    method: str
    tool_version: str = __version__
    run_name: str = ""
    stages: list = field(default_factory=list)
    status: str = "running"
    error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [s.to_dict() for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        try:
            d = dict(d)
            d["stages"] = [StageRecord.from_dict(s) for s in d.get("stages", [])]
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed manifest: {exc}") from None

    @property
    def stage_labels(self) -> list[str]:
        return [s.label for s in self.stages]

    def stage(self, label: str) -> StageRecord:
        for s in self.stages:
            if s.label == label:
                return s
        raise KeyError(label)

    def metric(self, label: str, task: str, metric: str) -> float:
        return self.stage(label).report.metrics[task][metric]


def write_manifest(manifest: RunManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_manifest(path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed manifest JSON ({exc.msg})") from None
    m = RunManifest.from_dict(raw)
    if not m.run_name:
        m.run_name = path.parent.name
    return m


# ---------------------------------------------------------------- data


@dataclass
class DataBundle:
    train: dict  # dataset name -> records
    test_sets: dict  # task dataset name -> [EvalSample]
    label_sets: dict  # classification dataset name -> labels
    dropped: dict  # dataset name -> samples over the token limits

    def mixture(self, cfg: ExperimentConfig) -> list[dict]:
        return build_mixture(cfg, self.train)


def build_mixture(cfg: ExperimentConfig, train: dict) -> list[dict]:
    """Training records for one epoch: each dataset repeated ``weight`` times (shuffling happens in the loop)."""
    out = []
    for i, spec in enumerate(cfg.datasets):
        recs = train.get(spec.name, [])
        if not recs:
            continue
        count = int(round(spec.weight * len(recs)))
        whole, rest = divmod(count, len(recs))
        out.extend(recs * whole)
        if rest:
            pick = Rng(cfg.seed, STREAM_MIXTURE * 1000 + i).permutation(len(recs))[:rest]
            out.extend(recs[j] for j in sorted(pick))
    if not out:
        raise DataError("training mixture is empty")
    return out


def generate_data(cfg: ExperimentConfig, data_dir) -> dict:
    """Write synthetic split files for every generator-backed dataset; returns ``{name: {split: path}}``."""
    paths = {}
    for spec in cfg.datasets:
        if spec.synthetic:
            paths[spec.name] = generate_synthetic(
                spec.kind, data_dir, spec.name, {"train": spec.train, "dev": spec.dev, "test": spec.test}, cfg.seed, spec.params
            )
        else:
            paths[spec.name] = {s: Path(p) for s, p in (("train", spec.path_train), ("dev", spec.path_dev), ("test", spec.path_test)) if p}
    return paths


def prepare_data(cfg: ExperimentConfig, data_dir) -> DataBundle:
    paths = generate_data(cfg, data_dir)
    train, tests, labels, dropped = {}, {}, {}, {}
    for spec in cfg.datasets:
        p = paths[spec.name]
        dropped[spec.name] = 0
        if "train" in p:
            train[spec.name], d = load_dataset_jsonl(p["train"], cfg.max_input, cfg.max_output)
            dropped[spec.name] += d
        if "test" in p and spec.kind != "general_instruction":
            recs, d = load_dataset_jsonl(p["test"], cfg.max_input, cfg.max_output)
            dropped[spec.name] += d
            if recs:
                tests[spec.name] = [EvalSample(r["prompt"], r["response"], r["task"]) for r in recs]
        if spec.kind == "classification_like":
            if spec.synthetic:
                labels[spec.name] = sorted(spec.params.get("labels", CALL_PURPOSE_LABELS))
            else:
                seen = {r["response"] for r in train.get(spec.name, [])}
                seen |= {s.reference for s in tests.get(spec.name, [])}
                labels[spec.name] = sorted(seen)
    if not tests:
        raise DataError("no task dataset has a non-empty test split")
    return DataBundle(train, tests, labels, dropped)


# ---------------------------------------------------------------- stages


def fp16_roundtrip(params: dict) -> dict:
    return {k: v.astype(np.float16).astype(v.dtype) for k, v in params.items()}


def run_stage1(cfg: ExperimentConfig, mixture: list[dict], log_lines=None) -> DenseModel:
    examples = encode_records(mixture, cfg.max_input)
    params = init_params(cfg.model, Rng(cfg.seed, STREAM_INIT), cfg.init_std)
    params, _ = train_sft(params, cfg.model, examples, cfg.stage1, cfg.seed, log_lines)
    if cfg.fp16_roundtrip:
        params = fp16_roundtrip(params)
    return DenseModel(params, cfg.model, STAGE_SFT)


def calibration_batches(cfg: ExperimentConfig, mixture: list[dict], batch_size: int = 32):
    """``calibration_samples`` seeded training sequences as ``(inputs, valid)`` batches."""
    n = min(cfg.quant.calibration_samples, len(mixture))
    pick = Rng(cfg.seed, STREAM_CALIB).permutation(len(mixture))[:n]
    seqs = [tokenizer.encode_example(mixture[i]["prompt"], mixture[i]["response"], cfg.max_input)[0] for i in pick]
    for start in range(0, n, batch_size):
        chunk = seqs[start : start + batch_size]
        width = max(len(s) for s in chunk)
        inputs = np.full((len(chunk), width), tokenizer.PAD, dtype=np.int64)
        valid = np.zeros((len(chunk), width), dtype=bool)
        for row, s in enumerate(chunk):
            inputs[row, : len(s)] = s
            valid[row, : len(s)] = True
        yield inputs, valid


def run_stage2(cfg: ExperimentConfig, sft: DenseModel, mixture: list[dict]):
    calib = None
    if cfg.quant.method == "gptq":
        calib = collect_calibration(sft.params, cfg.model, calibration_batches(cfg, mixture))
    return quantize_model(sft.params, cfg.model, cfg.quant, calib)


def lora_targets(cfg: ExperimentConfig) -> list[str]:
    names = linear_names(cfg.model)
    if cfg.lora.targets.strip() == "all":
        return names
    chosen = [t.strip() for t in cfg.lora.targets.split(",") if t.strip()]
    out = []
    for t in chosen:
        # bare suffixes such as "attn.q" select that projection in every layer
        matches = [n for n in names if n == t or n.endswith("." + t)]
        if not matches:
            raise ConfigError(f"unknown LoRA target {t!r}")
        out.extend(m for m in matches if m not in out)
    return out


def run_stage3(cfg: ExperimentConfig, qmodel, mixture: list[dict], log_lines=None) -> QLoraModel:
    examples = encode_records(mixture, cfg.max_input)
    adapters = init_lora(cfg.model, lora_targets(cfg), cfg.lora.rank, cfg.lora.alpha, Rng(cfg.seed, STREAM_LORA))
    model, _ = train_qlora(QLoraModel(qmodel, adapters), examples, cfg.stage3, cfg.seed, log_lines)
    return model


def evaluate_model(cfg: ExperimentConfig, model, bundle: DataBundle) -> MetricReport:
    return evaluate_stage(model, bundle.test_sets, cfg.model, cfg.eval, bundle.label_sets)


# ---------------------------------------------------------------- orchestration


def _write_log(path: Path, lines: list[str]) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return str(path)


def _resumable(manifest: RunManifest | None, idx: int, label: str) -> StageRecord | None:
    if manifest is None or len(manifest.stages) <= idx:
        return None
    rec = manifest.stages[idx]
    if rec.label != label or not Path(rec.checkpoint).exists():
        return None
    return rec


def run_pipeline(cfg: ExperimentConfig, out_dir, resume: bool = True, sft_from: StageRecord | None = None,
                 data_dir=None, run_name: str | None = None) -> RunManifest:
    """Run SFT -> PTQ -> QLoRA, evaluating and checkpointing after each stage.

    ``sft_from`` reuses a finished stage-1 record (same config apart from the
    quantization settings), which is how a suite shares SFT across methods.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man_path = out / MANIFEST_NAME
    chash = cfg.config_hash()
    previous = None
    if resume and man_path.exists():
        previous = load_manifest(man_path)
        if previous.config_hash != chash:
            log.info("config changed since the last run; starting over")
            previous = None
    manifest = RunManifest(chash, cfg.seed, cfg.quant.method, run_name=run_name or out.name)
    ckpt_dir, log_dir = out / "checkpoints", out / "logs"

    bundle = prepare_data(cfg, Path(data_dir) if data_dir else out / "data")
    mixture = bundle.mixture(cfg)
    mix_hash = records_hash(mixture)
    q_label = stage_label(cfg.quant.method)

    try:
        # stage 1
        rec = sft_from or _resumable(previous, 0, STAGE_SFT)
        if rec is not None:
            if rec.data_hash not in (None, mix_hash):
                raise DataError("stage-1 record was trained on a different mixture")
            sft = load_checkpoint(rec.checkpoint)
            manifest.stages.append(rec)
        else:
            t0 = time.perf_counter()
            lines: list[str] = []
            sft = run_stage1(cfg, mixture, lines)
            path = save_checkpoint(sft, ckpt_dir / "stage1.pqlr")
            report = evaluate_model(cfg, sft, bundle)
            manifest.stages.append(
                StageRecord(STAGE_SFT, str(path), report, time.perf_counter() - t0, mix_hash, _write_log(log_dir / "stage1.log", lines))
            )
        write_manifest(manifest, man_path)

        # stage 2
        rec = _resumable(previous, 1, q_label)
        if rec is not None:
            qmodel = load_checkpoint(rec.checkpoint)
            manifest.stages.append(rec)
        else:
            t0 = time.perf_counter()
            qmodel = run_stage2(cfg, sft, mixture)
            path = save_checkpoint(qmodel, ckpt_dir / "stage2.pqlr")
            report = evaluate_model(cfg, qmodel, bundle)
            manifest.stages.append(StageRecord(q_label, str(path), report, time.perf_counter() - t0))
        write_manifest(manifest, man_path)

        # stage 3: the same mixture as stage 1
        stage1_hash = manifest.stages[0].data_hash
        if cfg.lora.same_data and stage1_hash is not None and stage1_hash != mix_hash:
            raise DataError("stage-3 data differs from the stage-1 mixture")
        rec = _resumable(previous, 2, q_label + "+QLoRA")
        if rec is not None:
            manifest.stages.append(rec)
        else:
            t0 = time.perf_counter()
            lines = []
            qlora = run_stage3(cfg, qmodel, mixture, lines)
            path = save_checkpoint(qlora, ckpt_dir / "stage3.pqlr")
            report = evaluate_model(cfg, qlora, bundle)
            manifest.stages.append(
                StageRecord(qlora.stage_label, str(path), report, time.perf_counter() - t0, mix_hash, _write_log(log_dir / "stage3.log", lines))
            )
        manifest.status = "complete"
    except PtqLoraError as exc:
        manifest.status = "failed"
        manifest.error = f"{type(exc).__name__}: {exc}"
        write_manifest(manifest, man_path)
        raise
    write_manifest(manifest, man_path)
    return manifest


def run_suite(cfg: ExperimentConfig, out_dir, seeds, methods=("bnb-nf4", "gptq"), resume: bool = True) -> list[RunManifest]:
    """One run per (seed, method) under ``<out>/seed-<s>/<method>``; stage 1 is trained once per seed."""
    manifests = []
    for seed in seeds:
        shared = None
        for method in methods:
            run_cfg = cfg.with_seed(seed).with_method(method)
            run_dir = Path(out_dir) / f"seed-{seed}" / method
            m = run_pipeline(
                run_cfg, run_dir, resume, sft_from=shared, data_dir=Path(out_dir) / f"seed-{seed}" / "data",
                run_name=f"seed-{seed}/{method}",
            )
            shared = shared or m.stages[0]
            manifests.append(m)
    return manifests
