import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from latexblend import checks, container
from latexblend.bank import (ConceptBank, ConceptRecord, NotFoundError, TemplateError, extract,
                             position_similarity)
from latexblend.customization import ConceptSpec, FinetuneConfig, init_state
from latexblend.data import DEFAULT_CONCEPTS


@pytest.fixture(scope="module")
def bb():
    return checks.small_backbone(1)


@pytest.fixture(scope="module")
def state(bb):
    spec = ConceptSpec(DEFAULT_CONCEPTS[1], np.zeros((3, 3, 32, 32), np.float32))
    st_ = init_state(bb, spec, FinetuneConfig())
    with torch.no_grad():
        st_.embedding += 0.3
        st_.projections.w_v.mul_(1.5)
    return st_


def test_extraction_is_bit_identical_and_matches_slice(bb, state):
    a, b = extract(state, bb), extract(state, bb)
    assert a.equals(b)
    with torch.no_grad():
        h = bb.flow("Photo of V2* square.", state.projections, state.overrides(bb))
    # BOS photo of V2* square . -> identifier at 3, noun at 4
    for l in range(4):
        assert np.array_equal(a.rows[l, 0, 0], h.K[0, l, 3].numpy())
        assert np.array_equal(a.rows[l, 0, 1], h.K[0, l, 4].numpy())
        assert np.array_equal(a.rows[l, 1, 0], h.V[0, l, 3].numpy())
        assert np.array_equal(a.rows[l, 1, 1], h.V[0, l, 4].numpy())
    assert a.template == "Photo of {}." and a.identifier == "V2*" and a.noun == "square"


def test_extraction_template_errors(bb, state):
    with pytest.raises(TemplateError):
        extract(state, bb, "Photo of a thing.")
    with pytest.raises(TemplateError):
        extract(state, bb, "{} and {}.")


def test_degenerate_record_reproduces_plain_rows(bb):
    spec = ConceptSpec(DEFAULT_CONCEPTS[1], np.zeros((3, 3, 32, 32), np.float32))
    st_ = init_state(bb, spec, FinetuneConfig(init="a", init_noise=0.0))
    rec = extract(st_, bb, "A photo of {}.")
    with torch.no_grad():
        h = bb.flow("A photo of a square.")
    assert np.array_equal(rec.rows[:, 0], h.K[0, :, 4:6].numpy())
    assert np.array_equal(rec.rows[:, 1], h.V[0, :, 4:6].numpy())


def test_position_similarity_identical_templates(bb, state):
    rep = position_similarity(state, bb, ["Photo of {}.", "Photo of {}."])
    assert rep["mean"] == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        position_similarity(state, bb, ["{}."])


def test_thirty_concept_registry(tmp_path):
    rng = np.random.default_rng(30)
    bank = ConceptBank(tmp_path / "bank")
    recs = [checks.random_record(rng, i) for i in range(30)]
    for r in recs:
        bank.save(r)
    assert len(bank) == 30 and bank.names() == sorted(r.name for r in recs)
    for r in recs:
        assert bank.load(r.name).equals(r)
    with pytest.raises(NotFoundError):
        bank.load("concept-30")


def test_records_are_immutable_and_loading_does_not_mutate(tmp_path):
    rng = np.random.default_rng(1)
    bank = ConceptBank(tmp_path / "bank")
    r = checks.random_record(rng, 0)
    bank.save(r)
    snapshot = {p.name: p.read_bytes() for p in (tmp_path / "bank").iterdir()}
    for _ in range(3):
        bank.load(r.name)
        ConceptBank(tmp_path / "bank")
    assert snapshot == {p.name: p.read_bytes() for p in (tmp_path / "bank").iterdir()}
    with pytest.raises(FileExistsError):
        bank.save(r)


def test_tampered_file_and_missing_file_reported(tmp_path):
    rng = np.random.default_rng(2)
    bank = ConceptBank(tmp_path / "bank")
    for i in range(3):
        bank.save(checks.random_record(rng, i))
    (tmp_path / "bank" / "concept-1.ltxb").unlink()
    p = tmp_path / "bank" / "concept-2.ltxb"
    p.write_bytes(p.read_bytes()[:-1] + b"\x00")
    problems = ConceptBank(tmp_path / "bank").problems
    assert any("concept-1" in x and "missing" in x for x in problems)
    assert any("concept-2" in x and "hash" in x for x in problems)
    with pytest.raises(container.CorruptionError):
        bank.load("concept-2")


def test_version_mismatch():
    r = checks.random_record(np.random.default_rng(3), 0)
    blob = container.encode(r.meta(), {"rows": r.rows}, version=7)
    assert struct.unpack("<I", blob[4:8]) == (7,)
    with pytest.raises(container.VersionError):
        ConceptRecord.from_bytes(blob)


def test_bad_magic_is_corruption():
    with pytest.raises(container.CorruptionError):
        container.decode(b"NOPE" + bytes(100))


def test_record_shape_validation():
    with pytest.raises(ValueError):
        ConceptRecord("x", "V1*", "circle", np.zeros((4, 3, 2, 8)))


@settings(max_examples=40, deadline=None)
@given(st.text(min_size=1, max_size=20),
       arrays(np.float32, st.tuples(st.integers(1, 4), st.just(2), st.just(2), st.integers(1, 16)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_record_round_trip_property(name, rows):
    r = ConceptRecord(name, "V3*", "cross", rows, config_hash="c", backbone_hash="b")
    back = ConceptRecord.from_bytes(r.to_bytes())
    assert back.equals(r) and back.to_bytes() == r.to_bytes()


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(max_size=8), st.one_of(st.integers(-2**40, 2**40), st.text(max_size=8),
                                                      st.lists(st.integers(0, 9), max_size=4)), max_size=5),
       arrays(st.sampled_from([np.float32, np.float64, np.int64, np.uint8]),
              st.tuples(st.integers(0, 3), st.integers(1, 3))))
def test_container_round_trip_property(meta, arr):
    meta2, tensors = container.decode(container.encode(meta, {"a": arr}))
    assert meta2 == meta
    assert tensors["a"].dtype == arr.dtype and tensors["a"].tobytes() == arr.tobytes()
    assert tensors["a"].shape == arr.shape


def test_config_hash_is_order_independent():
    assert container.config_hash({"a": 1, "b": [1, 2]}) == container.config_hash({"b": [1, 2], "a": 1})
    assert container.config_hash({"a": 1}) != container.config_hash({"a": 2})


def test_bank_suite():
    rep = checks.check_bank()
    assert rep.passed, rep.summary
