"""Experiment configuration from flat ``key = value`` text.

Lines look like ``stage1.lr = 0.005``; ``#`` starts a comment. Dataset
entries use ``dataset.<name>.<field>``; generator parameters go under
``dataset.<name>.param.<key>``. When no dataset keys are present the default
general/summarization/classification mixture is used.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import KINDS
from .errors import ConfigError
from .evaluation.evaluate import EvalConfig
from .model import ModelConfig
from .quant.apply import QuantSettings
from .sft import TrainConfig


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    kind: str
    train: int = 0
    dev: int = 0
    test: int = 0
    path_train: str | None = None
    path_dev: str | None = None
    path_test: str | None = None
    weight: float = 1.0  # training copies per epoch; fractional parts take a seeded subset
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"dataset {self.name}: unknown kind {self.kind!r}")
        if min(self.train, self.dev, self.test) < 0:
            raise ConfigError(f"dataset {self.name}: split sizes must be >= 0")
        if not self.weight >= 0:
            raise ConfigError(f"dataset {self.name}: mixture weight must be >= 0")
        if self.kind == "general_instruction" and (self.test or self.path_test):
            raise ConfigError(f"dataset {self.name}: general instruction data is excluded from the test split")

    @property
    def synthetic(self) -> bool:
        return not (self.path_train or self.path_dev or self.path_test)


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: str = "all"
    same_data: bool = True


def default_datasets() -> tuple[DatasetSpec, ...]:
    return (
        DatasetSpec("general", "general_instruction", 2500, 150, 0),
        DatasetSpec("summarization", "summarization_like", 300, 35, 35),
        DatasetSpec("call_purpose", "classification_like", 300, 35, 35),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = ModelConfig(d_model=48, n_layers=2, n_heads=4, d_ff=192, max_seq_len=512)
    init_std: float = 0.02
    datasets: tuple = field(default_factory=default_datasets)
    stage1: TrainConfig = TrainConfig(lr=5e-3, schedule="linear")
    fp16_roundtrip: bool = False
    quant: QuantSettings = QuantSettings()
    stage3: TrainConfig = TrainConfig(lr=5e-3, schedule="cosine")
    lora: LoraConfig = LoraConfig()
    eval: EvalConfig = EvalConfig()
    wilcoxon_mode: str = "auto"

    def __post_init__(self):
        if self.eval.max_input <= 0 or self.eval.max_output <= 0:
            raise ConfigError("token limits must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate dataset names")
        if not any(d.kind != "general_instruction" for d in self.datasets):
            raise ConfigError("at least one task dataset is required")

    @property
    def max_input(self) -> int:
        return self.eval.max_input

    @property
    def max_output(self) -> int:
        return self.eval.max_output

    def to_dict(self) -> dict:
        d = asdict(self)
        d["datasets"] = [asdict(ds) for ds in self.datasets]
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)

    def with_method(self, method: str) -> "ExperimentConfig":
        return replace(self, quant=replace(self.quant, method=method))


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    if target_type is bool or target_type == "bool":
        if raw.lower() in ("true", "yes", "on", "1"):
            return True
        if raw.lower() in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if target_type is int or target_type == "int":
            return int(raw, 0)
        if target_type is float or target_type == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {target_type}") from None
    return raw


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _field_types(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


def _apply(obj, prefix: str, kv: dict, used: set):
    types = _field_types(type(obj))
    updates = {}
    for name, typ in types.items():
        key = f"{prefix}.{name}"
        if key not in kv:
            continue
        used.add(key)
        typ_s = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
        raw = kv[key]
        if "None" in typ_s and raw.lower() in ("auto", "none", ""):
            updates[name] = None
            continue
        base = typ_s.split("|")[0].strip()
        updates[name] = _coerce(raw, base, key)
    try:
        return replace(obj, **updates) if updates else obj
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from None


def config_from_text(text: str, base_dir=None) -> ExperimentConfig:
    kv = parse_kv(text)
    used: set[str] = set()
    cfg = ExperimentConfig()
    top = {}
    for key, typ in (("seed", "int"), ("init_std", "float"), ("fp16_roundtrip", "bool"), ("wilcoxon_mode", "str")):
        if key in kv:
            used.add(key)
            top[key] = _coerce(kv[key], typ, key)
    parts = {
        "model": _apply(cfg.model, "model", kv, used),
        "stage1": _apply(cfg.stage1, "stage1", kv, used),
        "quant": _apply(cfg.quant, "quant", kv, used),
        "stage3": _apply(cfg.stage3, "stage3", kv, used),
        "lora": _apply(cfg.lora, "lora", kv, used),
        "eval": _apply(cfg.eval, "eval", kv, used),
    }
    # limits.* are aliases for the evaluation/input token caps
    for alias, name in (("limits.max_input", "max_input"), ("limits.max_output", "max_output")):
        if alias in kv:
            used.add(alias)
            parts["eval"] = replace(parts["eval"], **{name: _coerce(kv[alias], "int", alias)})

    ds_keys = sorted(k for k in kv if k.startswith("dataset."))
    if ds_keys:
        grouped: dict[str, dict] = {}
        for k in ds_keys:
            bits = k.split(".")
            if len(bits) < 3:
                raise ConfigError(f"malformed dataset key {k!r}")
            grouped.setdefault(bits[1], {})[".".join(bits[2:])] = kv[k]
            used.add(k)
        specs = []
        for name in sorted(grouped):
            g = grouped[name]
            if "kind" not in g:
                raise ConfigError(f"dataset {name}: missing kind")
            params = {k[len("param.") :]: v for k, v in g.items() if k.startswith("param.")}
            unknown = set(g) - {"kind", "train", "dev", "test", "weight", "path_train", "path_dev", "path_test"} - {f"param.{p}" for p in params}
            if unknown:
                raise ConfigError(f"dataset {name}: unknown fields {sorted(unknown)}")
            paths = {}
            for split in ("train", "dev", "test"):
                p = g.get(f"path_{split}")
                if p:
                    p = Path(p)
                    if base_dir is not None and not p.is_absolute():
                        p = Path(base_dir) / p
                    if not p.exists():
                        raise ConfigError(f"dataset {name}: file not found {p}")
                    paths[f"path_{split}"] = str(p)
            specs.append(
                DatasetSpec(
                    name,
                    g["kind"],
                    _coerce(g.get("train", "0"), "int", f"dataset.{name}.train"),
                    _coerce(g.get("dev", "0"), "int", f"dataset.{name}.dev"),
                    _coerce(g.get("test", "0"), "int", f"dataset.{name}.test"),
                    weight=_coerce(g.get("weight", "1.0"), "float", f"dataset.{name}.weight"),
                    params={k: _param_value(v) for k, v in sorted(params.items())},
                    **paths,
                )
            )
        parts["datasets"] = tuple(specs)

    unknown = set(kv) - used
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return replace(cfg, **top, **parts)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _param_value(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    if "," in v:
        return [s.strip() for s in v.split(",")]
    return v


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return config_from_text(path.read_text(encoding="utf-8"), base_dir=path.parent)
