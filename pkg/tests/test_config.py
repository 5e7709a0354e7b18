import pytest

from ptqlora.config import ExperimentConfig, config_from_text, load_config, parse_kv
from ptqlora.errors import ConfigError


def test_defaults_mirror_published_proportions():
    cfg = ExperimentConfig()
    sizes = {d.kind: d.train for d in cfg.datasets}
    assert sizes["general_instruction"] == 2500
    assert sizes["summarization_like"] == sizes["classification_like"] == 300
    assert (cfg.max_input, cfg.max_output) == (320, 80)
    assert cfg.stage1.epochs == cfg.stage3.epochs == 2
    assert not any(d.test for d in cfg.datasets if d.kind == "general_instruction")


def test_parse_kv_comments_and_errors():
    assert parse_kv("a = 1  # note\n\n# full line\nb.c=x") == {"a": "1", "b.c": "x"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_kv("novalue")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_kv("a=1\na=2")


def test_sections_override_fields():
    cfg = config_from_text(
        """
        seed = 7
        model.d_model = 24
        stage1.lr = 1e-3
        stage3.schedule = linear
        quant.method = gptq
        quant.double_quant = auto
        quant.act_order = true
        lora.rank = 4
        limits.max_input = 100
        """
    )
    assert cfg.seed == 7 and cfg.model.d_model == 24
    assert cfg.stage1.lr == 1e-3 and cfg.stage3.schedule == "linear"
    assert cfg.quant.method == "gptq" and cfg.quant.double_quant is None and cfg.quant.act_order
    assert cfg.lora.rank == 4 and cfg.max_input == 100


def test_dataset_entries_replace_defaults():
    cfg = config_from_text(
        "dataset.t.kind = classification_like\ndataset.t.train = 5\ndataset.t.test = 2\n"
        "dataset.t.param.min_filler = 1\ndataset.t.weight = 1.5\n"
    )
    assert len(cfg.datasets) == 1
    d = cfg.datasets[0]
    assert (d.name, d.train, d.test, d.weight) == ("t", 5, 2, 1.5)
    assert d.params == {"min_filler": 1}


@pytest.mark.parametrize(
    "text",
    [
        "bogus = 1",
        "stage1.nope = 1",
        "quant.method = awq",
        "limits.max_input = 0",
        "seed = -1",
        "seed = abc",
        "quant.act_order = maybe",
        "dataset.g.kind = general_instruction\ndataset.g.train = 5\ndataset.g.test = 1",
        "dataset.g.kind = general_instruction\ndataset.g.train = 5",
        "dataset.x.kind = poetry",
        "dataset.x.train = 4",
        "dataset.x.kind = summarization_like\ndataset.x.train = -1",
        "dataset.x.kind = summarization_like\ndataset.x.color = red",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        config_from_text(text)


def test_referenced_files_must_exist(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("dataset.x.kind = summarization_like\ndataset.x.path_train = missing.jsonl\n")
    with pytest.raises(ConfigError, match="not found"):
        load_config(conf)
    (tmp_path / "missing.jsonl").write_text("")
    assert load_config(conf).datasets[0].path_train == str(tmp_path / "missing.jsonl")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.conf")


def test_config_hash_stable_and_sensitive():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.config_hash() == b.config_hash()
    assert a.with_seed(1).config_hash() != a.config_hash()
    assert a.with_method("gptq").config_hash() != a.config_hash()


def test_shipped_configs_parse(configs_dir):
    for path in sorted(configs_dir.glob("*.conf")):
        load_config(path)
