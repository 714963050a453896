import json

import pytest

from latexblend.config import ConfigError, RunConfig, substream


def test_root_seed_drives_section_seeds():
    a, b = RunConfig(0), RunConfig(1)
    assert a.corpus.seed == substream(0, "corpus") != b.corpus.seed
    assert a.corpus.seed != a.pretrain.seed
    assert RunConfig(0).hash() == a.hash() != b.hash()


def test_section_hash_ignores_other_sections():
    base = RunConfig.from_toml("[sampler]\ncfg_scale = 6.0\n")
    other = RunConfig.from_toml("[sampler]\ncfg_scale = 3.0\n")
    assert base.hash("corpus", "pretrain") == other.hash("corpus", "pretrain")
    assert base.hash("sampler") != other.hash("sampler")


def test_toml_overrides_and_seed_flag():
    cfg = RunConfig.from_toml("seed = 4\n[finetune]\nsteps = 7\n[backbone]\nwidths = [16, 32]\n")
    assert cfg.seed == 4 and cfg.finetune.steps == 7 and cfg.backbone.widths == (16, 32)
    assert RunConfig.from_toml("seed = 4\n", seed=9).seed == 9


@pytest.mark.parametrize("text", ["[nope]\nx = 1\n", "[finetune]\nbogus = 1\n", "seed = [\n"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.from_toml(text)


def test_dump_json_round_trip(tmp_path):
    cfg = RunConfig(3)
    cfg.dump_json(tmp_path / "c.json")
    d = json.loads((tmp_path / "c.json").read_text())
    assert d["hash"] == cfg.hash() and d["seed"] == 3
