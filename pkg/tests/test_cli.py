import json

import numpy as np
import pytest

from latexblend import checks
from latexblend.bank import ConceptBank
from latexblend.cli import main

TINY = """
[corpus]
pretrain_size = 96
prior_per_noun = 2
[backbone]
d_t = 16
d_l = 16
widths = [8, 16]
[pretrain]
max_steps = 4
batch = 8
warmup = 1
eval_every = 2
val_size = 16
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY)
    return cfg, tmp_path / "home"


def test_bank_ls_and_inspect(tmp_path, capsys):
    bank = ConceptBank(tmp_path / "bank")
    rec = checks.random_record(np.random.default_rng(0), 0)
    bank.save(rec)
    code, out, _ = run(capsys, "bank", "--bank", tmp_path / "bank", "--home", tmp_path / "h", "ls")
    assert code == 0 and json.loads(out)["concepts"] == [rec.name]
    code, out, _ = run(capsys, "bank", "--bank", tmp_path / "bank", "--home", tmp_path / "h", "inspect", rec.name)
    assert code == 0 and json.loads(out)["identifier"] == rec.identifier
    code, _, err = run(capsys, "bank", "--bank", tmp_path / "bank", "--home", tmp_path / "h", "inspect", "ghost")
    assert code != 0 and json.loads(err)["error"] == "NotFoundError"


def test_generate_unknown_concept_fails_with_record(tiny, tmp_path, capsys):
    cfg, home = tiny
    code, _, err = run(capsys, "generate", "--config", cfg, "--home", home, "--prompt", "A photo of V1* circle.",
                       "--concepts", "ghost", "--bank", tmp_path / "empty", "--out", tmp_path / "x.png")
    record = json.loads(err.strip().splitlines()[-1])
    assert code != 0 and record["error"] == "NotFoundError" and record["command"] == "generate"
    assert not (tmp_path / "x.png").exists()


def test_generate_without_concepts_writes_image(tiny, tmp_path, capsys):
    cfg, home = tiny
    code, out, _ = run(capsys, "generate", "--config", cfg, "--home", home, "--prompt", "A photo of a circle.",
                       "--steps", 3, "--out", tmp_path / "x.png", "--log", tmp_path / "x.json")
    assert code == 0, out
    assert (tmp_path / "x.png").exists()
    assert len(json.loads((tmp_path / "x.json").read_text())["steps"]) == 3


def test_synth_manifest(tiny, tmp_path, capsys):
    cfg, home = tiny
    code, out, _ = run(capsys, "synth", "--config", cfg, "--home", home, "--out", tmp_path / "s")
    res = json.loads(out)
    assert code == 0 and res["pretrain"] == 96 and res["reserved_in_pretrain"] == 0
    assert (tmp_path / "s" / "config.json").exists()


def test_bad_config_is_error_record(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[nope]\n")
    code, _, err = run(capsys, "pretrain", "--config", bad, "--home", tmp_path)
    assert code == 1 and json.loads(err)["error"] == "ConfigError"


def test_selfcheck_subset(capsys):
    code, out, err = run(capsys, "selfcheck", "--suites", "schedule", "bank")
    assert code == 0 and json.loads(out)["suites"] == {"schedule": True, "bank": True}
    assert err.count("[PASS]") == 2
