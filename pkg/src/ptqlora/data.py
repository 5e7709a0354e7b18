"""Synthetic task generators and the JSON-lines dataset loader.

Three generators stand in for the task families:

* ``classification_like``: a short call transcript of filler words with one
  signature phrase; the response is the call-purpose category it signals.
* ``summarization_like``: key-value call facts plus a length directive
  (short/medium/long); the reference summary follows fixed rules.
* ``general_instruction``: copy / reverse / uppercase micro-tasks.

Files are JSON lines with string fields ``prompt``, ``response``, ``task``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

from . import tokenizer
from .errors import ConfigError, DataError, SchemaError
from .numerics import Rng

log = logging.getLogger(__name__)

KINDS = ("general_instruction", "summarization_like", "classification_like")
TASK_OF_KIND = {
    "general_instruction": "generation",
    "summarization_like": "generation",
    "classification_like": "classification",
}

CALL_PURPOSE_LABELS = (
    "Account Management",
    "Appointment",
    "Billing Questions",
    "Callback",
    "Cancellation",
    "Claim",
    "Complaint",
)

SIGNATURES = {
    "Account Management": ("update my account", "change my password", "new email address"),
    "Appointment": ("book a visit", "schedule a meeting", "move my slot"),
    "Billing Questions": ("charge on my bill", "invoice looks wrong", "explain this fee"),
    "Callback": ("ring me back", "return my call", "phone me later"),
    "Cancellation": ("cancel my plan", "end the service", "stop my subscription"),
    "Claim": ("file a claim", "damage report", "lost package refund"),
    "Complaint": ("very unhappy", "poor service", "want to complain"),
}

FILLER = (
    "hello", "thanks", "yes", "okay", "sure", "today", "please", "well", "right", "so",
    "um", "great", "fine", "good", "morning", "agent", "customer", "number", "moment", "again",
)

NAMES = ("ann", "bob", "cara", "dan", "eve", "finn", "gus", "hana")
TOPICS = ("refund", "bill", "visit", "order", "plan", "claim")
DAYS = ("mon", "tue", "wed", "thu", "fri")
LENGTHS = ("short", "medium", "long")
INSTRUCTIONS = ("copy", "reverse", "upper")
LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _record(prompt: str, response: str, kind: str) -> dict:
    return {"prompt": prompt, "response": response, "task": TASK_OF_KIND[kind]}


def _classification(rng: Rng, label: str, min_filler: int, max_filler: int) -> dict:
    n = min_filler + int(rng.integers(1, max_filler - min_filler + 1)[0])
    words = [FILLER[i] for i in rng.integers(n, len(FILLER))]
    sig = rng.choice(SIGNATURES[label])
    pos = int(rng.integers(1, n + 1)[0])
    words.insert(pos, sig)
    return _record("purpose? " + " ".join(words), label, "classification_like")


def summary_for(facts: dict, length: str) -> str:
    name, topic, day, amount = facts["name"], facts["topic"], facts["day"], facts["amount"]
    if length == "short":
        return f"{name}: {topic}."
    if length == "medium":
        return f"{name} asked about {topic} on {day}."
    return f"{name} asked about {topic} on {day}. amount was {amount}."


def _summarization(rng: Rng) -> dict:
    facts = {
        "name": rng.choice(NAMES),
        "topic": rng.choice(TOPICS),
        "day": rng.choice(DAYS),
        "amount": str(10 + int(rng.integers(1, 90)[0])),
    }
    length = rng.choice(LENGTHS)
    keys = [list(facts)[i] for i in rng.permutation(len(facts))]
    body = "; ".join(f"{k}={facts[k]}" for k in keys)
    return _record(f"summarize {length}: {body}", summary_for(facts, length), "summarization_like")


def _instruction(rng: Rng, min_len: int, max_len: int) -> dict:
    op = rng.choice(INSTRUCTIONS)
    n = min_len + int(rng.integers(1, max_len - min_len + 1)[0])
    word = "".join(LETTERS[i] for i in rng.integers(n, len(LETTERS)))
    out = {"copy": word, "reverse": word[::-1], "upper": word.upper()}[op]
    return _record(f"{op}: {word}", out, "general_instruction")


def synthesize(kind: str, n: int, rng: Rng, params: dict | None = None) -> list[dict]:
    """``n`` records of ``kind``. Classification labels cycle, then get shuffled, so counts differ by at most one."""
    params = dict(params or {})
    if n < 0:
        raise ConfigError("sample count must be non-negative")
    if kind == "classification_like":
        labels = tuple(params.get("labels", CALL_PURPOSE_LABELS))
        unknown = [lab for lab in labels if lab not in SIGNATURES]
        if unknown:
            raise ConfigError(f"no signature phrases for labels {unknown}")
        lo, hi = int(params.get("min_filler", 3)), int(params.get("max_filler", 7))
        if not 0 <= lo <= hi:
            raise ConfigError("need 0 <= min_filler <= max_filler")
        order = [labels[i % len(labels)] for i in range(n)]
        order = [order[i] for i in rng.permutation(n)]
        return [_classification(rng, lab, lo, hi) for lab in order]
    if kind == "summarization_like":
        return [_summarization(rng) for _ in range(n)]
    if kind == "general_instruction":
        lo, hi = int(params.get("min_len", 3)), int(params.get("max_len", 6))
        if not 1 <= lo <= hi:
            raise ConfigError("need 1 <= min_len <= max_len")
        return [_instruction(rng, lo, hi) for _ in range(n)]
    raise ConfigError(f"unknown dataset kind {kind!r}")


def write_jsonl(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, ensure_ascii=True) + "\n")
    return path


def generate_synthetic(kind: str, out_dir, name: str, splits: dict, seed: int, params: dict | None = None) -> dict:
    """Write ``<out_dir>/<name>.<split>.jsonl`` for each split with a non-zero size.

    Each split draws from its own seeded stream, so changing one split's size
    leaves the others byte-identical.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    paths = {}
    for i, split in enumerate(("train", "dev", "test")):
        n = int(splits.get(split, 0))
        if n < 0:
            raise ConfigError(f"negative size for split {split}")
        if kind == "general_instruction" and split == "test" and n:
            raise ConfigError("general_instruction data has no test split")
        if n == 0:
            continue
        stream = int(hashlib.sha256(f"{name}/{split}".encode()).hexdigest()[:15], 16)
        records = synthesize(kind, n, Rng(seed, stream), params)
        paths[split] = write_jsonl(Path(out_dir) / f"{name}.{split}.jsonl", records)
    return paths


def load_dataset_jsonl(path, max_input: int | None = None, max_output: int | None = None) -> tuple[list[dict], int]:
    """Parse a JSON-lines file; drop samples whose prompt/response exceed the token limits.

    Returns ``(samples, n_dropped)``. Blank lines are skipped.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    samples, dropped = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}: line {lineno}: expected a JSON object")
            for key in ("prompt", "response", "task"):
                if not isinstance(obj.get(key), str):
                    raise SchemaError(f"{path}: line {lineno}: missing string field {key!r}")
            if obj["task"] not in ("generation", "classification"):
                raise SchemaError(f"{path}: line {lineno}: unknown task {obj['task']!r}")
            if (max_input is not None and len(tokenizer.encode(obj["prompt"])) > max_input) or (
                max_output is not None and len(tokenizer.encode(obj["response"])) > max_output
            ):
                dropped += 1
                continue
            samples.append({k: obj[k] for k in ("prompt", "response", "task")})
    if dropped:
        log.info("%s: dropped %d samples over the token limits", path, dropped)
    return samples, dropped


def records_hash(records) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps(r, sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()


def encode_records(records, max_input: int | None = None):
    return [tokenizer.encode_example(r["prompt"], r["response"], max_input) for r in records]
