"""Relative position encodings: rotary embeddings and ALiBi biases."""

from __future__ import annotations

import numpy as np

from memlab.errors import ValidationError
from memlab.tensor import NumericFormat, Tensor


def rope_angles(positions, D: int, base: float = 10000.0) -> np.ndarray:
    """``(L, D/2)`` rotation angles ``m * base**(-2t/D)``."""
    t = np.arange(D // 2, dtype=np.float64)
    theta = base ** (-2.0 * t / D)
    return np.asarray(positions, dtype=np.float64)[:, None] * theta[None, :]


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate feature pairs ``(2t, 2t+1)`` of each row by its position's angles."""
    if x.ndim != 2:
        raise ValidationError(f"rope_apply expects (L, D), got {x.shape}")
    L, D = x.shape
    if D % 2:
        raise ValidationError(f"rope_apply needs an even feature dim, got D={D}")
    positions = list(positions)
    if len(positions) != L:
        raise ValidationError(f"{len(positions)} positions for {L} rows")
    ang = rope_angles(positions, D, base)
    cos, sin = np.cos(ang), np.sin(ang)
    v = x.numpy()
    even, odd = v[:, 0::2], v[:, 1::2]
    out = np.empty_like(v)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return Tensor(out, x.fmt)


def alibi_slopes(H: int) -> np.ndarray:
    """Geometric head slopes ``2**(-8 (h+1) / H)``; ``H`` must be a power of two."""
    if H < 1 or H & (H - 1):
        raise ValidationError(f"ALiBi head count must be a power of two, got {H}")
    return 2.0 ** (-8.0 * np.arange(1, H + 1) / H)


def alibi_bias(H: int, s: int, fmt: NumericFormat = NumericFormat.F64) -> Tensor:
    """``(H, s, s)`` bias ``-slope_h * (i - j)`` on and below the diagonal, 0 above.

    Causal masking of ``j > i`` is left to the attention mask.
    """
    if s < 1:
        raise ValidationError(f"sequence length must be >= 1, got {s}")
    slopes = alibi_slopes(H)
    i = np.arange(s)[:, None]
    j = np.arange(s)[None, :]
    dist = np.where(j <= i, i - j, 0).astype(np.float64)
    return Tensor(-slopes[:, None, None] * dist[None], fmt)
