import json
from collections import Counter

import pytest

from ptqlora.data import (
    CALL_PURPOSE_LABELS,
    generate_synthetic,
    load_dataset_jsonl,
    records_hash,
    summary_for,
    synthesize,
)
from ptqlora.errors import ConfigError, DataError, SchemaError
from ptqlora.numerics import Rng


def test_default_label_set_is_the_seven_call_purposes():
    assert CALL_PURPOSE_LABELS == (
        "Account Management", "Appointment", "Billing Questions", "Callback", "Cancellation", "Claim", "Complaint",
    )


def test_label_distribution_uniform_within_one():
    recs = synthesize("classification_like", 100, Rng(0))
    counts = Counter(r["response"] for r in recs)
    assert set(counts) == set(CALL_PURPOSE_LABELS)
    assert max(counts.values()) - min(counts.values()) <= 1


def test_classification_prompt_contains_signature():
    from ptqlora.data import SIGNATURES

    for r in synthesize("classification_like", 20, Rng(1)):
        assert any(sig in r["prompt"] for sig in SIGNATURES[r["response"]])
        assert r["task"] == "classification"


def test_summary_rules():
    facts = {"name": "ann", "topic": "bill", "day": "mon", "amount": "42"}
    assert summary_for(facts, "short") == "ann: bill."
    assert summary_for(facts, "medium") == "ann asked about bill on mon."
    assert summary_for(facts, "long") == "ann asked about bill on mon. amount was 42."
    for r in synthesize("summarization_like", 10, Rng(2)):
        assert r["prompt"].startswith("summarize ") and r["task"] == "generation"


def test_general_instruction_tasks():
    for r in synthesize("general_instruction", 30, Rng(3)):
        op, word = r["prompt"].split(": ")
        assert r["response"] == {"copy": word, "reverse": word[::-1], "upper": word.upper()}[op]


def test_same_seed_byte_identical(tmp_path):
    a = generate_synthetic("classification_like", tmp_path / "a", "d", {"train": 20, "test": 5}, seed=9)
    b = generate_synthetic("classification_like", tmp_path / "b", "d", {"train": 20, "test": 5}, seed=9)
    for split in ("train", "test"):
        assert a[split].read_bytes() == b[split].read_bytes()
    c = generate_synthetic("classification_like", tmp_path / "c", "d", {"train": 20}, seed=10)
    assert c["train"].read_bytes() != a["train"].read_bytes()


def test_split_streams_independent(tmp_path):
    a = generate_synthetic("summarization_like", tmp_path / "a", "s", {"train": 10, "test": 5}, seed=0)
    b = generate_synthetic("summarization_like", tmp_path / "b", "s", {"train": 30, "test": 5}, seed=0)
    assert a["test"].read_bytes() == b["test"].read_bytes()


def test_invalid_params(tmp_path):
    with pytest.raises(ConfigError):
        generate_synthetic("general_instruction", tmp_path, "g", {"train": 5, "test": 1}, seed=0)
    with pytest.raises(ConfigError):
        synthesize("classification_like", 5, Rng(0), {"min_filler": 5, "max_filler": 2})
    with pytest.raises(ConfigError):
        synthesize("nonsense", 5, Rng(0))
    with pytest.raises(ConfigError):
        synthesize("classification_like", 5, Rng(0), {"labels": ["Unknown"]})


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _line(prompt="p", response="r", task="generation"):
    return json.dumps({"prompt": prompt, "response": response, "task": task})


def test_load_ten_lines(tmp_path):
    recs, dropped = load_dataset_jsonl(_write(tmp_path / "x.jsonl", [_line(f"p{i}") for i in range(10)]))
    assert len(recs) == 10 and dropped == 0


def test_load_drops_over_limit(tmp_path):
    lines = [_line("short"), _line("x" * 50), _line("ok", "y" * 20)]
    recs, dropped = load_dataset_jsonl(_write(tmp_path / "x.jsonl", lines), max_input=10, max_output=10)
    assert [r["prompt"] for r in recs] == ["short"] and dropped == 2


def test_malformed_line_named(tmp_path):
    lines = [_line() for _ in range(6)] + ["{not json"] + [_line()]
    with pytest.raises(DataError, match="line 7"):
        load_dataset_jsonl(_write(tmp_path / "x.jsonl", lines))


def test_missing_field_schema_error(tmp_path):
    with pytest.raises(SchemaError, match="response"):
        load_dataset_jsonl(_write(tmp_path / "x.jsonl", [json.dumps({"prompt": "a", "task": "generation"})]))
    with pytest.raises(SchemaError):
        load_dataset_jsonl(_write(tmp_path / "y.jsonl", ["[1, 2]"]))


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_dataset_jsonl(tmp_path / "absent.jsonl")


def test_records_hash_order_sensitive():
    a, b = {"prompt": "1", "response": "a", "task": "generation"}, {"prompt": "2", "response": "b", "task": "generation"}
    assert records_hash([a, b]) == records_hash([dict(a), dict(b)])
    assert records_hash([a, b]) != records_hash([b, a])
