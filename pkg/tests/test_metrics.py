import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from latexblend import container
from latexblend.autodiff import ContractError
from latexblend.data import DEFAULT_CONCEPTS, NOUNS, render
from latexblend.metrics import (DegenerateCorrelationError, OracleQualityError, PresenceOracle, PresenceReport,
                                TrajectoryPair, deviation_magnitude, layout_similarity, oracle_dataset,
                                presence_eval, quadrant_views, train_presence_oracle)


def traj(seed=0, steps=6, b=2):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(steps + 1, b, 3, 8, 8, generator=g)


def test_identical_trajectories_have_zero_deviation():
    r = traj()
    series, mean = deviation_magnitude(TrajectoryPair(r, r.clone()))
    assert not series.any() and not mean.any()


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 3.0))
def test_scaled_trajectory_deviation_is_epsilon(eps):
    r = traj().double()
    t = r.clone()
    t[1:] *= 1 + eps
    series, mean = deviation_magnitude(TrajectoryPair(r, t))
    np.testing.assert_allclose(series[1:], eps, rtol=1e-9)
    np.testing.assert_allclose(mean, eps, rtol=1e-9)
    assert not series[0].any()


def test_misaligned_trajectories_rejected():
    r = traj()
    with pytest.raises(ContractError):
        TrajectoryPair(r, r[:-1])
    other = r.clone()
    other[0] += 1
    with pytest.raises(ContractError):
        TrajectoryPair(r, other)


def test_layout_similarity_anchors():
    img = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, (3, 32, 32)))
    assert layout_similarity(img, img) == pytest.approx(1.0)
    assert layout_similarity(img, -img) == pytest.approx(-1.0)
    with pytest.raises(DegenerateCorrelationError):
        layout_similarity(img, torch.zeros(3, 32, 32))


def test_layout_similarity_matches_block_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-1, 1, (2, 3, 32, 32))

    def grid(x):
        g = x.mean(0)
        return np.array([[g[4 * i:4 * i + 4, 4 * j:4 * j + 4].mean() for j in range(8)] for i in range(8)]).ravel()

    assert layout_similarity(a, b) == pytest.approx(np.corrcoef(grid(a), grid(b))[0, 1], abs=1e-12)


def test_quadrant_views_shapes():
    x = torch.arange(2 * 3 * 4 * 4, dtype=torch.float32).reshape(2, 3, 4, 4)
    v = quadrant_views(x)
    assert v.shape == (5, 2, 3, 4, 4)
    assert torch.equal(v[0], x)


def test_presence_report_rates():
    rep = PresenceReport(["a", "b"], np.array([[True, True], [True, False], [False, False], [True, True]]))
    assert rep.count == 4 and rep.rates == {"a": 0.75, "b": 0.5} and rep.joint_rate == 0.5
    empty = PresenceReport(["a"], np.zeros((0, 1), bool))
    assert empty.rates == {} and empty.joint_rate == 0.0


def test_oracle_dataset_labels_and_balance():
    x, y = oracle_dataset(400, DEFAULT_CONCEPTS, seed=3)
    assert x.shape == (400, 3, 32, 32) and y.shape == (400, len(NOUNS) + len(DEFAULT_CONCEPTS))
    assert x.min() >= -1 and x.max() <= 1
    assert (y.sum(1) == 0).any()  # empty scenes are present
    # a concept label implies its class-noun label
    for j, c in enumerate(DEFAULT_CONCEPTS):
        assert np.all(y[y[:, len(NOUNS) + j] == 1][:, NOUNS.index(c.noun)] == 1)


@pytest.fixture(scope="module")
def tiny_oracle():
    return train_presence_oracle(DEFAULT_CONCEPTS, seed=1, train_size=256, test_size=64, steps=5, batch=32,
                                 min_accuracy=0.0)


def test_oracle_quality_gate_raises():
    with pytest.raises(OracleQualityError):
        train_presence_oracle(DEFAULT_CONCEPTS, seed=1, train_size=64, test_size=32, steps=1, batch=16,
                              min_accuracy=1.01)


def test_oracle_round_trip_is_hash_pinned(tiny_oracle):
    blob = tiny_oracle.to_bytes("cfg")
    back, meta = PresenceOracle.from_bytes(blob)
    assert back.digest() == tiny_oracle.digest() and meta["config_hash"] == "cfg"
    x = torch.zeros(2, 3, 32, 32)
    assert torch.equal(back.probabilities(x), tiny_oracle.probabilities(x))
    meta2, tensors = container.decode(blob)
    meta2["digest"] = "0" * 64
    with pytest.raises(container.CorruptionError):
        PresenceOracle.from_bytes(container.encode(meta2, tensors))


def test_presence_eval_empty_set(tiny_oracle):
    rep = presence_eval(torch.zeros(0, 3, 32, 32), ["circle"], tiny_oracle)
    assert rep.count == 0 and rep.rates == {}


def test_presence_eval_uses_any_view(tiny_oracle, monkeypatch):
    calls = []

    def fake(images):
        calls.append(images.shape[0])
        p = torch.zeros(images.shape[0], len(tiny_oracle.classes))
        p[-1, 0] = 0.9  # only the last view of the last image fires
        return p

    monkeypatch.setattr(tiny_oracle, "probabilities", fake)
    rep = presence_eval(torch.zeros(3, 3, 32, 32), [tiny_oracle.classes[0]], tiny_oracle)
    assert calls == [15]
    assert rep.detected[:, 0].tolist() == [False, False, True]


@pytest.mark.slow
def test_trained_oracle_on_clean_renders_and_blank(world):
    oracle = world.oracle()
    assert oracle.accuracy >= 0.95
    x, y = oracle_dataset(200, DEFAULT_CONCEPTS, seed=12345)
    single = y[:, :len(NOUNS)].sum(1) == 1
    pred = oracle.noun_prediction(torch.from_numpy(x[single]))
    truth = [NOUNS[i] for i in y[single, :len(NOUNS)].argmax(1)]
    assert np.mean([p == t for p, t in zip(pred, truth)]) >= 0.95
    blank = torch.from_numpy(render([]).transpose(2, 0, 1)[None].copy())
    assert (oracle.probabilities(blank) < 0.5).all()
    assert set(oracle.confusion) == set(oracle.classes)
