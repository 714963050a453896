"""Closed set of differentiable tensor ops used by the rest of the package.

Tensors are plain ``torch.Tensor`` objects; reverse-mode differentiation is
torch autograd. This module pins the contracts the models rely on: a closed op
set, explicit shape checks, no broadcasting beyond a leading batch dimension,
float32 storage with float64 accumulation inside reductions, and a scalar-only
``backward``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


def tensor(data, requires_grad: bool = False, dtype=torch.float32) -> Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    return t.requires_grad_(requires_grad)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, optionally batched on axis 0."""
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner extents {a.shape[-1]} and {b.shape[-2]} differ")
    if a.dim() > 2 and b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError("matmul: batch extents differ")
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return a * b


def scale(a: Tensor, c: float) -> Tensor:
    return a * float(c)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return a.reshape(tuple(shape))


def transpose(a: Tensor, dim0: int = -2, dim1: int = -1) -> Tensor:
    return a.transpose(dim0, dim1)


def check_finite(x: Tensor, op: str = "input") -> None:
    if not bool(torch.isfinite(x.detach().sum())):
        raise NumericError(f"{op}: non-finite entries")


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax over the last axis (max-shifted internally)."""
    check_finite(x, "softmax_rows")
    return torch.softmax(x, dim=-1)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    shape = (x.shape[-1],)
    return F.layer_norm(x, shape, weight, bias, eps)


def silu(x: Tensor) -> Tensor:
    return x * torch.sigmoid(x)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def embedding(ids: Tensor, table: Tensor) -> Tensor:
    if ids.dtype not in (torch.int64, torch.int32):
        raise DimensionError("embedding: ids must be integer")
    if ids.numel() and (int(ids.max()) >= table.shape[0] or int(ids.min()) < 0):
        raise DimensionError("embedding: id out of range")
    return table[ids.long()]


def sum(x: Tensor, dim: int | None = None, keepdim: bool = False) -> Tensor:  # noqa: A001
    acc = x.double()
    out = acc.sum() if dim is None else acc.sum(dim=dim, keepdim=keepdim)
    return out.to(x.dtype)


def mean(x: Tensor, dim: int | None = None, keepdim: bool = False) -> Tensor:
    acc = x.double()
    out = acc.mean() if dim is None else acc.mean(dim=dim, keepdim=keepdim)
    return out.to(x.dtype)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the whole gradient goes to ``a``."""
    _same_shape(a, b, "minimum")
    return torch.where(a <= b, a, b)


def gather_rows(x: Tensor, index: Sequence[int] | Tensor) -> Tensor:
    idx = torch.as_tensor(index, dtype=torch.long)
    if idx.numel() and (int(idx.max()) >= x.shape[-2] or int(idx.min()) < 0):
        raise DimensionError("gather_rows: row index out of range")
    return x.index_select(-2, idx)


def scatter_rows(x: Tensor, index: Sequence[int] | Tensor, rows: Tensor) -> Tensor:
    """Copy of ``x`` with rows at ``index`` replaced by ``rows``.

    Gradient reaches ``x`` only through the rows that were kept.
    """
    idx = torch.as_tensor(index, dtype=torch.long)
    if rows.shape[-2] != idx.numel() or rows.shape[-1] != x.shape[-1]:
        raise DimensionError("scatter_rows: replacement rows do not match index")
    if idx.numel() != len(set(idx.tolist())):
        raise DimensionError("scatter_rows: duplicate row index")
    return x.index_copy(-2, idx, rows)


def backward(loss: Tensor) -> None:
    if loss.numel() != 1 or loss.dim() > 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any requires_grad leaf")
    loss.backward()


# -- finite-difference oracle -------------------------------------------------

def numerical_grad(fn: Callable[[list[np.ndarray]], float], inputs: list[np.ndarray],
                   eps: float = 1e-3) -> list[np.ndarray]:
    """Central finite differences of a scalar function of float64 arrays."""
    grads = []
    for k, x in enumerate(inputs):
        g = np.zeros_like(x, dtype=np.float64)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = fn(inputs)
            flat[i] = old - eps
            fm = fn(inputs)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    """max |got - want| scaled by the largest reference magnitude."""
    denom = max(float(np.max(np.abs(want))), 1e-6)
    return float(np.max(np.abs(got - want))) / denom
