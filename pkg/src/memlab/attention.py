"""Types shared by the reference and tiled Evoformer attention paths.

Canonical layout is ``(B, L, H, D)``: ``B`` is the axis that is *not* attended
over (it is batched), ``L`` is the attended axis. The logits of one problem
have shape ``(H, B, L, L)`` and the optional bias ``(H, L, L)`` is shared by
every ``b``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from memlab.errors import NumericInputError, ValidationError
from memlab.tensor import NumericFormat, Tensor


class AttentionVariant(enum.Enum):
    MsaRowWise = "MsaRowWise"
    MsaColumnWise = "MsaColumnWise"
    TriangularStartNode = "TriangularStartNode"
    TriangularEndNode = "TriangularEndNode"

    @property
    def has_bias(self) -> bool:
        return self is not AttentionVariant.MsaColumnWise

    @classmethod
    def parse(cls, name) -> "AttentionVariant":
        if isinstance(name, cls):
            return name
        try:
            return cls(name)
        except ValueError:
            raise ValidationError(
                f"unknown attention variant {name!r}; expected one of {[v.value for v in cls]}"
            ) from None


# source axis orders accepted by layout_from_msa
MSA_RES = "msa_res"  # (N_msa, N_res, H, D)
RES_MSA = "res_msa"  # (N_res, N_msa, H, D)


def layout_permutation(variant: AttentionVariant, order: str = MSA_RES) -> tuple[int, int, int, int]:
    """Axis permutation taking a raw rank-4 tensor to canonical ``(B, L, H, D)``.

    Row-wise attention attends over residues, column-wise over MSA rows. For
    the triangular variants the raw tensor is the ``(N_res, N_res, H, D)`` pair
    representation; the ending-node variant attends over the first axis.
    """
    if order not in (MSA_RES, RES_MSA):
        raise ValidationError(f"unknown source order {order!r}")
    swap = {
        AttentionVariant.MsaRowWise: order == RES_MSA,
        AttentionVariant.MsaColumnWise: order == MSA_RES,
        AttentionVariant.TriangularStartNode: False,
        AttentionVariant.TriangularEndNode: True,
    }[variant]
    return (1, 0, 2, 3) if swap else (0, 1, 2, 3)


def layout_from_msa(variant: AttentionVariant, raw: Tensor, order: str = MSA_RES) -> tuple[Tensor, tuple]:
    """Permute ``raw`` into canonical ``(B, L, H, D)``; returns the tensor and the permutation used."""
    if raw.ndim != 4:
        raise ValidationError(f"expected a rank-4 tensor, got shape {raw.shape}")
    perm = layout_permutation(variant, order)
    return Tensor(np.ascontiguousarray(raw.data.transpose(perm)), raw.fmt), perm


def restore_layout(canonical: Tensor, perm: tuple) -> Tensor:
    """Inverse of :func:`layout_from_msa`."""
    inv = tuple(int(i) for i in np.argsort(perm))
    return Tensor(np.ascontiguousarray(canonical.data.transpose(inv)), canonical.fmt)


@dataclass(frozen=True, eq=False)
class AttentionProblem:
    variant: AttentionVariant
    Q: Tensor
    K: Tensor
    V: Tensor
    bias: Tensor | None = None
    scale: float | None = None

    def __post_init__(self):
        variant = AttentionVariant.parse(self.variant)
        object.__setattr__(self, "variant", variant)
        if self.Q.ndim != 4:
            raise ValidationError(f"Q must be (B, L, H, D), got {self.Q.shape}")
        for name in ("K", "V"):
            t = getattr(self, name)
            if t.shape != self.Q.shape:
                raise ValidationError(f"{name} shape {t.shape} does not match Q shape {self.Q.shape}")
        fmts = {self.Q.fmt, self.K.fmt, self.V.fmt}
        if self.bias is not None:
            fmts.add(self.bias.fmt)
        if len(fmts) != 1:
            raise ValidationError(f"all tensors must share one format, got {sorted(f.name for f in fmts)}")
        if variant.has_bias != (self.bias is not None):
            want = "requires" if variant.has_bias else "does not take"
            raise ValidationError(f"{variant.value} {want} a bias tensor")
        B, L, H, D = self.Q.shape
        if self.bias is not None and self.bias.shape != (H, L, L):
            raise ValidationError(f"bias must be (H, L, L) = {(H, L, L)}, got {self.bias.shape}")
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / math.sqrt(D))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.Q.shape

    @property
    def fmt(self) -> NumericFormat:
        return self.Q.fmt

    def check_finite_inputs(self):
        for name in ("Q", "K", "V", "bias"):
            t = getattr(self, name)
            if t is not None and np.isnan(t.data).any():
                raise NumericInputError(f"NaN in {name}")

    def replace(self, **changes) -> "AttentionProblem":
        kw = dict(variant=self.variant, Q=self.Q, K=self.K, V=self.V, bias=self.bias, scale=self.scale)
        kw.update(changes)
        return AttentionProblem(**kw)


@dataclass(frozen=True, eq=False)
class AttentionGrads:
    dQ: Tensor
    dK: Tensor
    dV: Tensor
    dBias: Tensor | None = None

    def items(self):
        out = [("dQ", self.dQ), ("dK", self.dK), ("dV", self.dV)]
        if self.dBias is not None:
            out.append(("dBias", self.dBias))
        return out


@dataclass(frozen=True)
class TileConfig:
    """Work-unit extents along (query, key, batch); the kernel default is (64, 64, 1)."""

    tile_q: int = 64
    tile_k: int = 64
    tile_b: int = 1

    def __post_init__(self):
        for name in ("tile_q", "tile_k", "tile_b"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")


@dataclass(frozen=True, eq=False)
class RowStats:
    """Per-row log-sum-exp of the logits, shape ``(H, B, L)``; all backward needs from forward."""

    logsumexp: Tensor


class AccumMode(enum.Enum):
    UpcastF32 = "UpcastF32"
    NativeFormat = "NativeFormat"


@dataclass(frozen=True)
class AccumPolicy:
    mode: AccumMode = AccumMode.UpcastF32
    deterministic: bool = True


def random_problem(
    variant,
    B: int,
    L: int,
    H: int,
    D: int,
    fmt: NumericFormat = NumericFormat.F64,
    rng: np.random.Generator | None = None,
    scale: float | None = None,
    bias_scale: float = 1.0,
) -> AttentionProblem:
    """Standard-normal Q/K/V (and bias when the variant has one) drawn from ``rng``."""
    variant = AttentionVariant.parse(variant)
    rng = np.random.default_rng(0) if rng is None else rng
    for name, n in (("B", B), ("L", L), ("H", H), ("D", D)):
        if n < 1:
            raise ValidationError(f"{name} must be >= 1, got {n}")
    q, k, v = (rng.standard_normal((B, L, H, D)) for _ in range(3))
    bias = Tensor(bias_scale * rng.standard_normal((H, L, L)), fmt) if variant.has_bias else None
    return AttentionProblem(variant, Tensor(q, fmt), Tensor(k, fmt), Tensor(v, fmt), bias, scale)
