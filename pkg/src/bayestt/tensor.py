"""Dense tensors, TT cores and the contractions between them.

Dense tensors and masks are plain ``numpy`` arrays whose shape is the list of
mode sizes ``(J_1, ..., J_D)``.  Wherever a flat view is exposed (unfoldings,
the binary file formats) the first index varies fastest.  TT cores follow the
``(L_d, L_{d+1}, J_d)`` convention so that ``core[:, :, j]`` is the frontal
slice multiplied along the train.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Sequence

import numpy as np

__all__ = [
    "TensorTrain",
    "tt_contract",
    "tt_contract_bruteforce",
    "kron",
    "unfold",
    "fold",
    "masked_residual_norm",
    "check_mask",
]


@dataclass
class TensorTrain:
    """A list of order-3 cores, core ``d`` shaped ``(L_d, L_{d+1}, J_d)``."""

    cores: list

    def __post_init__(self):
        self.cores = [np.asarray(c, dtype=np.float64) for c in self.cores]
        if not self.cores:
            raise ValueError("a tensor train needs at least one core")
        for d, core in enumerate(self.cores):
            if core.ndim != 3:
                raise ValueError(f"core {d} has order {core.ndim}, expected 3")
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[1] != 1:
            raise ValueError("boundary TT ranks must be 1")
        for d in range(len(self.cores) - 1):
            left, right = self.cores[d].shape[1], self.cores[d + 1].shape[0]
            if left != right:
                raise ValueError(
                    f"interface rank mismatch between cores {d} and {d + 1}: "
                    f"{left} != {right}"
                )

    @property
    def ranks(self) -> list[int]:
        return [c.shape[0] for c in self.cores] + [1]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(c.shape[2] for c in self.cores)

    @property
    def order(self) -> int:
        return len(self.cores)

    def full(self) -> np.ndarray:
        return tt_contract(self)


def tt_contract(tt: TensorTrain | Sequence[np.ndarray]) -> np.ndarray:
    """Contract TT cores into the dense tensor they represent.

    Element ``(j_1, ..., j_D)`` is the 1x1 product of frontal slices
    ``G1[:, :, j_1] @ ... @ GD[:, :, j_D]``.
    """
    if not isinstance(tt, TensorTrain):
        tt = TensorTrain(list(tt))
    # rows of `acc` run over the multi-index prefix, C order
    acc = np.ones((1, 1))
    for core in tt.cores:
        acc = np.einsum("pk,klj->pjl", acc, core).reshape(-1, core.shape[1])
    return acc.reshape(tt.dims)


def tt_contract_bruteforce(tt: TensorTrain | Sequence[np.ndarray]) -> np.ndarray:
    """Reference contraction by explicit nested summation over all rank paths."""
    if not isinstance(tt, TensorTrain):
        tt = TensorTrain(list(tt))
    out = np.zeros(tt.dims)
    ranks = tt.ranks
    inner = [range(r) for r in ranks[1:-1]]
    for idx in np.ndindex(*tt.dims):
        total = 0.0
        for path in np.ndindex(*[len(r) for r in inner]) if inner else [()]:
            full_path = (0,) + tuple(path) + (0,)
            term = 1.0
            for d, core in enumerate(tt.cores):
                term *= core[full_path[d], full_path[d + 1], idx[d]]
            total += term
        out[idx] = total
    return out


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product of two matrices (vectors are treated as 1 x n rows)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    m_a, n_a = a.shape
    m_b, n_b = b.shape
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(m_a * m_b, n_a * n_b)


def unfold(t: np.ndarray, d: int) -> np.ndarray:
    """Mode-``d`` unfolding ``A_[d]`` with first-index-fastest row/column maps.

    ``d`` is 1-based: rows collect modes ``1..d`` and columns modes ``d+1..D``.
    """
    t = np.asarray(t)
    if not 1 <= d <= t.ndim - 1:
        raise ValueError(f"unfolding mode {d} outside 1..{t.ndim - 1}")
    rows = prod(t.shape[:d])
    return np.reshape(t, (rows, -1), order="F")


def fold(mat: np.ndarray, dims: Sequence[int], d: int) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    dims = tuple(int(x) for x in dims)
    if not 1 <= d <= len(dims) - 1:
        raise ValueError(f"unfolding mode {d} outside 1..{len(dims) - 1}")
    if mat.shape != (prod(dims[:d]), prod(dims[d:])):
        raise ValueError(f"matrix shape {mat.shape} does not match dims {dims} at mode {d}")
    return np.reshape(mat, dims, order="F")


def check_mask(mask: np.ndarray, dims: Sequence[int] | None = None) -> np.ndarray:
    """Return ``mask`` as a boolean array, validating its shape and values."""
    mask = np.asarray(mask)
    if dims is not None and tuple(mask.shape) != tuple(dims):
        raise ValueError(f"mask shape {mask.shape} does not match tensor dims {tuple(dims)}")
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        mask = mask.astype(bool)
    return mask


def masked_residual_norm(a: np.ndarray, yhat: np.ndarray, mask: np.ndarray) -> float:
    """Frobenius norm of ``mask * (a - yhat)``."""
    a = np.asarray(a, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if a.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {yhat.shape}")
    mask = check_mask(mask, a.shape)
    return float(np.linalg.norm((a - yhat)[mask]))
