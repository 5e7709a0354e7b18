import json
import shutil
from collections import Counter

import pytest

from ptqlora.config import ExperimentConfig, config_from_text, load_config
from ptqlora.data import records_hash
from ptqlora.errors import DataError
from ptqlora.pipeline import (
    build_mixture,
    load_manifest,
    prepare_data,
    run_pipeline,
    run_suite,
)


@pytest.fixture(scope="module")
def smoke_cfg():
    from conftest import ROOT

    return load_config(ROOT / "configs" / "smoke.conf")


@pytest.fixture(scope="module")
def smoke_run(smoke_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return out, run_pipeline(smoke_cfg, out)


def test_manifest_stage_order(smoke_run):
    _, m = smoke_run
    assert m.stage_labels == ["SFT-16bit", "PTQ-BNB-4bit", "PTQ-BNB-4bit+QLoRA"]
    assert m.status == "complete"
    assert all(s.wall_clock_s >= 0 for s in m.stages)


def test_stage3_uses_the_stage1_mixture(smoke_run):
    _, m = smoke_run
    assert m.stages[0].data_hash is not None
    assert m.stages[2].data_hash == m.stages[0].data_hash


def test_manifest_roundtrip_and_logs(smoke_run):
    out, m = smoke_run
    back = load_manifest(out)
    assert back.to_dict() == m.to_dict()
    log = (out / "logs" / "stage1.log").read_text().splitlines()
    assert log[0].startswith("step 0 lr ")


def test_rerun_is_identical(smoke_cfg, smoke_run, tmp_path):
    out, m = smoke_run
    m2 = run_pipeline(smoke_cfg, tmp_path)
    for a, b in zip(m.stages, m2.stages):
        assert a.report.to_dict() == b.report.to_dict()
        assert open(a.checkpoint, "rb").read() == open(b.checkpoint, "rb").read()


def test_resume_skips_finished_stages(smoke_cfg, smoke_run, tmp_path):
    out, m = smoke_run
    dst = tmp_path / "copy"
    shutil.copytree(out, dst)
    # point the copied manifest at the copied checkpoints
    raw = json.loads((dst / "manifest.json").read_text())
    for s in raw["stages"]:
        s["checkpoint"] = s["checkpoint"].replace(str(out), str(dst))
    raw["stages"] = raw["stages"][:2]
    raw["status"] = "failed"
    (dst / "manifest.json").write_text(json.dumps(raw))
    m2 = run_pipeline(smoke_cfg, dst)
    assert m2.stages[0].wall_clock_s == m.stages[0].wall_clock_s  # reused, not recomputed
    assert m2.stages[2].report.to_dict() == m.stages[2].report.to_dict()
    assert m2.status == "complete"


def test_failure_recorded_in_manifest(smoke_cfg, tmp_path):
    from dataclasses import replace

    bad = replace(smoke_cfg, datasets=tuple(replace(d, test=0) for d in smoke_cfg.datasets))
    with pytest.raises(DataError):
        run_pipeline(bad, tmp_path)


def test_mixture_weights_realised_exactly():
    cfg = config_from_text(
        "dataset.g.kind = general_instruction\ndataset.g.train = 50\ndataset.g.weight = 0.5\n"
        "dataset.t.kind = summarization_like\ndataset.t.train = 20\ndataset.t.test = 2\ndataset.t.weight = 2.5\n"
    )
    train = {"g": [{"prompt": f"g{i}", "response": "x", "task": "generation"} for i in range(50)],
             "t": [{"prompt": f"t{i}", "response": "y", "task": "generation"} for i in range(20)]}
    mix = build_mixture(cfg, train)
    kinds = Counter(r["prompt"][0] for r in mix)
    assert kinds == {"g": 25, "t": 50}
    assert records_hash(build_mixture(cfg, train)) == records_hash(mix)


def test_default_mixture_ratio(tmp_path):
    cfg = ExperimentConfig()
    bundle = prepare_data(cfg, tmp_path)
    mix = bundle.mixture(cfg)
    general = sum(r["task"] == "generation" and r["prompt"].split(":")[0] in ("copy", "reverse", "upper") for r in mix)
    assert abs(general / len(mix) - 2500 / 3100) < 0.02
    assert set(bundle.test_sets) == {"summarization", "call_purpose"}


def test_suite_shares_stage1(smoke_cfg, tmp_path):
    ms = run_suite(smoke_cfg, tmp_path, seeds=[3], methods=("bnb-nf4", "gptq"))
    assert [m.stage_labels[1] for m in ms] == ["PTQ-BNB-4bit", "PTQ-GPTQ-4bit"]
    assert ms[0].stages[0].checkpoint == ms[1].stages[0].checkpoint
    assert ms[1].stages[2].label == "PTQ-GPTQ-4bit+QLoRA"
