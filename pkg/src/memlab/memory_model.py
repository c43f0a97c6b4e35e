"""Closed-form byte counts for naive and tiled attention.

The naive path keeps the logits ``S`` and probabilities ``P`` (each
``H*B*L*L`` elements) live through the step, and backward adds the logit
gradient ``dS``. The tiled path keeps one workspace per concurrently active
work unit plus ``O(H*B*L)`` row statistics.

Q/K/V/O/dO are needed by both paths and are reported separately as
``baseline_io_bytes`` rather than folded into either total.
"""

from __future__ import annotations

from dataclasses import dataclass

from memlab.attention import TileConfig
from memlab.errors import ValidationError

NAIVE = "naive"
TILED = "tiled"
FORWARD = "forward"
BACKWARD = "backward"


@dataclass(frozen=True)
class AttentionDims:
    H: int
    B: int
    L: int
    D: int = 8
    bytes_per_elem: int = 2

    def __post_init__(self):
        for name in ("H", "B", "L", "D", "bytes_per_elem"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")


def tile_workspace_bytes(dims: AttentionDims, tc: TileConfig) -> int:
    """One work unit: logits tile, output accumulator, running max and denominator."""
    per_row = tc.tile_q * tc.tile_k + tc.tile_q * dims.D + 2 * tc.tile_q
    return tc.tile_b * per_row * dims.bytes_per_elem


def analytic_attention_terms(
    dims: AttentionDims,
    mode: str,
    phase: str,
    tc: TileConfig | None = None,
    workers: int = 1,
) -> dict[str, int]:
    """Named byte terms whose sum is :func:`analytic_attention_bytes`."""
    if phase not in (FORWARD, BACKWARD):
        raise ValidationError(f"phase must be 'forward' or 'backward', got {phase!r}")
    if workers < 1:
        raise ValidationError(f"workers must be >= 1, got {workers}")
    H, B, L, b = dims.H, dims.B, dims.L, dims.bytes_per_elem
    if mode == NAIVE:
        square = H * B * L * L * b
        terms = {"logits": square, "probs": square}
        if phase == BACKWARD:
            terms["dlogits"] = square
        return terms
    if mode == TILED:
        if tc is None:
            raise ValidationError("tiled mode needs a TileConfig")
        terms = {"workspace": workers * tile_workspace_bytes(dims, tc), "stats": H * B * L * b}
        if phase == BACKWARD:
            terms["delta"] = B * L * H * b
        return terms
    raise ValidationError(f"mode must be 'naive' or 'tiled', got {mode!r}")


def analytic_attention_bytes(
    dims: AttentionDims,
    mode: str,
    phase: str,
    tc: TileConfig | None = None,
    workers: int = 1,
) -> int:
    return sum(analytic_attention_terms(dims, mode, phase, tc, workers).values())


def baseline_io_bytes(dims: AttentionDims) -> int:
    return 4 * dims.B * dims.L * dims.H * dims.D * dims.bytes_per_elem


def reduction_ratio(dims: AttentionDims, tc: TileConfig, phase: str = BACKWARD, workers: int = 1) -> float:
    return analytic_attention_bytes(dims, NAIVE, phase) / analytic_attention_bytes(dims, TILED, phase, tc, workers)
