"""Non-parametric tensor rearrangements used by every residual shortcut.

Layout convention: ``space_to_channel`` places the offset inside each
``p x p`` block on the minor channel index, i.e.::

    out[n, c * p * p + dy * p + dx, i, j] == x[n, c, i * p + dy, j * p + dx]

Channel grouping for averaging/duplication uses contiguous chunks, so
``channel_average(channel_duplicate(x, g), g)`` is exactly ``x``.
"""

import torch
from torch import Tensor

from .errors import ShapeError


def _check_rank4(x: Tensor) -> None:
    if x.dim() != 4:
        raise ShapeError(f"expected a rank-4 [N, C, H, W] tensor, got shape {tuple(x.shape)}")


def space_to_channel(x: Tensor, p: int) -> Tensor:
    """Move each ``p x p`` spatial block into ``p**2`` channels.

    ``[N, C, H, W] -> [N, p*p*C, H/p, W/p]``; a pure permutation of elements.
    """
    _check_rank4(x)
    if p < 1:
        raise ShapeError(f"factor must be a positive int, got {p}")
    n, c, h, w = x.shape
    if h % p:
        raise ShapeError(f"height {h} is not divisible by factor {p}")
    if w % p:
        raise ShapeError(f"width {w} is not divisible by factor {p}")
    if p == 1:
        return x
    x = x.reshape(n, c, h // p, p, w // p, p)
    x = x.permute(0, 1, 3, 5, 2, 4)
    return x.reshape(n, c * p * p, h // p, w // p)


def channel_to_space(x: Tensor, p: int) -> Tensor:
    """Exact inverse of :func:`space_to_channel` for the same ``p``."""
    _check_rank4(x)
    if p < 1:
        raise ShapeError(f"factor must be a positive int, got {p}")
    n, c, h, w = x.shape
    if c % (p * p):
        raise ShapeError(f"channel count {c} is not divisible by factor**2 = {p * p}")
    if p == 1:
        return x
    x = x.reshape(n, c // (p * p), p, p, h, w)
    x = x.permute(0, 1, 4, 2, 5, 3)
    return x.reshape(n, c // (p * p), h * p, w * p)


def channel_average(x: Tensor, g: int) -> Tensor:
    """Split channels into ``g`` contiguous chunks and return their mean."""
    _check_rank4(x)
    if g < 1:
        raise ShapeError(f"group count must be a positive int, got {g}")
    n, c, h, w = x.shape
    if c % g:
        raise ShapeError(f"channel count {c} is not divisible by group count {g}")
    if g == 1:
        return x
    chunks = x.reshape(n, g, c // g, h, w)
    # shifted mean: exact when all chunks are equal, for any g
    first = chunks[:, 0]
    return first + (chunks[:, 1:] - first.unsqueeze(1)).sum(dim=1) / g


def channel_duplicate(x: Tensor, g: int) -> Tensor:
    """Concatenate ``g`` copies of ``x`` along the channel axis."""
    _check_rank4(x)
    if g < 1:
        raise ShapeError(f"group count must be a positive int, got {g}")
    if g == 1:
        return x
    return torch.cat([x] * g, dim=1)
