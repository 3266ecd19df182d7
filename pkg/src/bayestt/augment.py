"""Folding images into high-order tensors and back.

A plan factorises the image height and width as ``M = M_1 ... M_f`` and
``N = N_1 ... N_f``.  In basic mode, pixel ``(m, n)`` with mixed-radix digits
``m = m_1 + M_1 (m_2 + M_2 (...))`` (likewise ``n``) goes to tensor index
``(m_1 + M_1 n_1, ..., m_f + M_f n_f)``, so every mode-1 fibre is one
``M_1 x N_1`` pixel block and the higher modes walk the block grid.  Channels
are never folded; they form the last mode.

Padded mode replaces each ``M_1 x N_1`` block by the ``(M_1+1) x (N_1+1)``
window starting at the same pixel, so neighbouring windows share one row or
column.  The image is replicated by one pixel along the bottom and right edges
so that the last windows fit.  The base ``M_1 x N_1`` part of each window holds
the original pixels, which makes the inverse a plain extraction.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

BASIC = "basic"
PADDED = "padded_overlap"


@dataclass
class AugmentPlan:
    row_factors: tuple
    col_factors: tuple
    mode: str = BASIC
    channels: int = 1

    def __post_init__(self):
        self.row_factors = tuple(int(m) for m in self.row_factors)
        self.col_factors = tuple(int(n) for n in self.col_factors)
        if len(self.row_factors) != len(self.col_factors):
            raise ValueError("row and column factorisations need the same length")
        if not self.row_factors:
            raise ValueError("empty factorisation")
        if min(self.row_factors + self.col_factors) < 1:
            raise ValueError("factors must be positive")
        if self.mode not in (BASIC, PADDED):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.row_factors)

    @property
    def image_shape(self) -> tuple:
        shape = (int(np.prod(self.row_factors)), int(np.prod(self.col_factors)))
        return shape if self.channels == 1 else shape + (self.channels,)

    @property
    def tensor_shape(self) -> tuple:
        dims = [m * n for m, n in zip(self.row_factors, self.col_factors)]
        if self.mode == PADDED:
            dims[0] = (self.row_factors[0] + 1) * (self.col_factors[0] + 1)
        return tuple(dims) + ((self.channels,) if self.channels > 1 else ())

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "AugmentPlan":
        d = json.loads(text)
        return cls(d["row_factors"], d["col_factors"], d.get("mode", BASIC), d.get("channels", 1))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "AugmentPlan":
        return cls.from_json(Path(path).read_text())


def _factor_two(n: int) -> list:
    out = []
    while n % 2 == 0 and n > 1:
        out.append(2)
        n //= 2
    if n > 1:
        out.append(n)
    return out or [1]


def default_plan(shape, mode: str = PADDED) -> AugmentPlan:
    """Plan that splits both sides into factors of 2 (remainder last).

    For a 256 x 256 x 3 image this yields ``(2,)*8`` on both sides, i.e. a
    9 x 4^7 x 3 tensor in padded mode and 4^8 x 3 in basic mode.
    """
    h, w = shape[:2]
    channels = shape[2] if len(shape) == 3 else 1
    rows, cols = _factor_two(h), _factor_two(w)
    f = max(len(rows), len(cols))
    rows += [1] * (f - len(rows))
    cols += [1] * (f - len(cols))
    return AugmentPlan(tuple(rows), tuple(cols), mode, channels)


def _check_image(img: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1 and plan.channels == 1:
        img = img[:, :, 0]
    if img.shape != plan.image_shape:
        raise ValueError(f"image shape {img.shape} does not match plan {plan.image_shape}")
    return img if img.ndim == 3 else img[:, :, None]


def _fold(blocks: np.ndarray, plan: AugmentPlan, first: tuple) -> np.ndarray:
    """``blocks``: (G_M, G_N, b_M, b_N, C) over the grid of level >= 2 blocks."""
    rows, cols = plan.row_factors[1:], plan.col_factors[1:]
    f = plan.levels
    b_m, b_n = first
    c = blocks.shape[-1]
    # grid index g = m_2 + M_2 (m_3 + ...): C-order reshape needs slowest first
    x = blocks.reshape(rows[::-1] + cols[::-1] + (b_m, b_n, c))
    g = f - 1
    m_ax = [g - 1 - i for i in range(g)]  # axis of m_{i+2}
    n_ax = [2 * g - 1 - i for i in range(g)]
    order = [2 * g + 1, 2 * g]  # n_1, m_1
    for i in range(g):
        order += [n_ax[i], m_ax[i]]
    order.append(2 * g + 2)
    x = x.transpose(order)
    dims = [b_m * b_n] + [m * n for m, n in zip(rows, cols)]
    out = x.reshape(dims + [c])
    return out if plan.channels > 1 else out[..., 0]


def _unfold(t: np.ndarray, plan: AugmentPlan, first: tuple) -> np.ndarray:
    """Inverse of :func:`_fold`; returns (G_M, G_N, b_M, b_N, C)."""
    rows, cols = plan.row_factors[1:], plan.col_factors[1:]
    g = plan.levels - 1
    b_m, b_n = first
    t = np.asarray(t)
    if t.shape != plan.tensor_shape:
        raise ValueError(f"tensor shape {t.shape} does not match plan {plan.tensor_shape}")
    split = sum(((n, m) for m, n in zip(rows, cols)), (b_n, b_m))
    x = t.reshape(split + (plan.channels,))
    # axes now: n_1, m_1, n_2, m_2, ..., C
    m_ax = [3 + 2 * i for i in reversed(range(g))]
    n_ax = [2 + 2 * i for i in reversed(range(g))]
    x = x.transpose(m_ax + n_ax + [1, 0, 2 * g + 2])
    gm, gn = int(np.prod(rows)), int(np.prod(cols))
    return x.reshape(gm, gn, b_m, b_n, plan.channels)


def augment_basic(img: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    """Fold an image into an order-f tensor (plus a channel mode if present)."""
    img = _check_image(img, plan)
    m1, n1 = plan.row_factors[0], plan.col_factors[0]
    H, W, c = img.shape
    blocks = img.reshape(H // m1, m1, W // n1, n1, c).transpose(0, 2, 1, 3, 4)
    return _fold(blocks, plan, (m1, n1))


def augment_padded(img: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    """Fold overlapping ``(M_1+1) x (N_1+1)`` windows at strides ``(M_1, N_1)``."""
    img = _check_image(img, plan)
    m1, n1 = plan.row_factors[0], plan.col_factors[0]
    H, W, c = img.shape
    padded = np.pad(img, ((0, 1), (0, 1), (0, 0)), mode="edge")
    gm, gn = H // m1, W // n1
    win = np.lib.stride_tricks.sliding_window_view(padded, (m1 + 1, n1 + 1), axis=(0, 1))
    # win: (H+1-m1, W+1-n1, c, m1+1, n1+1); take every stride-th window
    blocks = win[::m1, ::n1][:gm, :gn].transpose(0, 1, 3, 4, 2)
    return _fold(np.ascontiguousarray(blocks), plan, (m1 + 1, n1 + 1))


def augment(img: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    if plan.mode == PADDED:
        return augment_padded(img, plan)
    return augment_basic(img, plan)


def deaugment(t: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    """Rebuild the image; padded windows contribute only their base block."""
    m1, n1 = plan.row_factors[0], plan.col_factors[0]
    first = (m1 + 1, n1 + 1) if plan.mode == PADDED else (m1, n1)
    blocks = _unfold(t, plan, first)[:, :, :m1, :n1, :]
    gm, gn = blocks.shape[:2]
    img = blocks.transpose(0, 2, 1, 3, 4).reshape(gm * m1, gn * n1, plan.channels)
    return img if plan.channels > 1 else img[:, :, 0]


def augment_mask(mask: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    """Fold a pixel mask exactly like the image; padded copies inherit the
    observation status of the pixel they replicate."""
    return augment(np.asarray(mask, dtype=bool), plan).astype(bool)
