import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from latexblend import autodiff as ad
from latexblend import checks


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_identity_and_zero():
    b = ad.tensor([[1, 2], [3, 4]])
    assert torch.equal(ad.matmul(torch.eye(2), b), b)
    assert torch.equal(ad.matmul(torch.zeros(2, 3), torch.randn(3, 4)), torch.zeros(2, 4))


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    got = ad.matmul(ad.tensor(a, dtype=torch.float64), ad.tensor(b, dtype=torch.float64)).numpy()
    np.testing.assert_allclose(got, triple_loop(a, b), rtol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(ad.DimensionError):
        ad.matmul(torch.zeros(2, 3), torch.zeros(2, 3))
    with pytest.raises(ad.DimensionError):
        ad.matmul(torch.zeros(3), torch.zeros(3, 1))
    with pytest.raises(ad.DimensionError):
        ad.add(torch.zeros(2, 3), torch.zeros(3, 2))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax_rows(torch.zeros(1, 3)).numpy(), [[1 / 3] * 3], rtol=1e-6)
    x = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(ad.softmax_rows(x).numpy()[0], e / e.sum(), rtol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ad.NumericError):
        ad.softmax_rows(torch.tensor([[0.0, float("nan")]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_shift_invariant_and_normalized(x, c):
    p = ad.softmax_rows(torch.from_numpy(x))
    q = ad.softmax_rows(torch.from_numpy(x + c))
    np.testing.assert_allclose(p.numpy(), q.numpy(), atol=1e-12)
    np.testing.assert_allclose(p.sum(-1).numpy(), 1.0, atol=1e-12)


def test_backward_simple_cases():
    x = ad.tensor(np.ones((2, 2)), requires_grad=True)
    ad.backward(ad.sum(x))
    assert torch.equal(x.grad, torch.ones(2, 2))
    y = ad.tensor(np.random.default_rng(0).normal(size=(2, 2)), requires_grad=True)
    ad.backward(ad.scale(ad.sum(ad.silu(y)), 0.0))
    assert torch.equal(y.grad, torch.zeros(2, 2))


def test_backward_requires_scalar():
    x = ad.tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ad.ContractError):
        ad.backward(x * 2)
    with pytest.raises(ad.ContractError):
        ad.backward(torch.tensor(1.0))


def test_mlp_softmax_graph_matches_finite_differences():
    rng = np.random.default_rng(1)
    x, w1, w2 = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    target = rng.normal(size=(3, 3))

    def np_loss(xs):
        h = xs[0] @ xs[1]
        h = h / (1 + np.exp(-h))
        p = checks._np_softmax(h @ xs[2])
        return float((p * target).sum())

    ts = [ad.tensor(a, requires_grad=True, dtype=torch.float64) for a in (x, w1, w2)]
    h = ad.silu(ad.matmul(ts[0], ts[1]))
    loss = ad.sum(ad.mul(ad.softmax_rows(ad.matmul(h, ts[2])), torch.from_numpy(target)))
    ad.backward(loss)
    fd = ad.numerical_grad(np_loss, [a.copy() for a in (x, w1, w2)], eps=1e-3)
    for t, g in zip(ts, fd):
        assert ad.relative_error(t.grad.numpy(), g) <= 1e-4


def test_minimum_tie_sends_gradient_to_first_argument():
    a = ad.tensor([[1.0, 2.0]], requires_grad=True)
    b = ad.tensor([[1.0, 0.0]], requires_grad=True)
    ad.backward(ad.sum(ad.minimum(a, b)))
    assert a.grad.tolist() == [[1.0, 0.0]]
    assert b.grad.tolist() == [[0.0, 1.0]]


def test_reductions_accumulate_in_float64():
    x = torch.full((1_000_000,), 0.1, dtype=torch.float32)
    assert abs(float(ad.sum(x)) - 100000.0) < 0.01
    assert x.dtype == ad.sum(x).dtype


def test_scatter_rows_routes_gradient():
    x = ad.tensor(np.ones((4, 2)), requires_grad=True)
    r = ad.tensor(np.ones((2, 2)), requires_grad=True)
    ad.backward(ad.sum(ad.scatter_rows(x, [1, 3], r)))
    assert x.grad[:, 0].tolist() == [1.0, 0.0, 1.0, 0.0]
    assert torch.equal(r.grad, torch.ones(2, 2))
    with pytest.raises(ad.DimensionError):
        ad.scatter_rows(x, [1, 1], r)


def test_embedding_range_and_dtype_errors():
    table = torch.zeros(3, 2)
    with pytest.raises(ad.DimensionError):
        ad.embedding(torch.tensor([3]), table)
    with pytest.raises(ad.DimensionError):
        ad.embedding(torch.tensor([0.0]), table)


def test_gelu_matches_erf_form():
    x = np.linspace(-4, 4, 41)
    want = 0.5 * x * (1 + np.array([math.erf(v / math.sqrt(2)) for v in x]))
    np.testing.assert_allclose(ad.gelu(torch.from_numpy(x)).numpy(), want, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_graph_gradients(seed):
    assert checks.gradcheck_graph(np.random.default_rng(seed)) <= 1e-4


def test_hundred_random_graphs():
    rep = checks.check_autodiff(100)
    assert rep.passed, rep.summary
