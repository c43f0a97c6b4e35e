"""Central finite differences for the attention backward passes.

The scalar being differentiated is ``sum(O * dO)`` for a fixed upstream
gradient ``dO``; its gradient with respect to each input is exactly what the
backward passes return.
"""

from __future__ import annotations

import numpy as np

from memlab.attention import AttentionGrads, AttentionProblem, TileConfig
from memlab.reference import attn_backward_ref, attn_forward_ref
from memlab.tensor import NumericFormat, Tensor
from memlab.tiled import attn_backward_tiled, attn_forward_tiled

INPUT_OF = {"dQ": "Q", "dK": "K", "dV": "V", "dBias": "bias"}


def forward_output_ref(p: AttentionProblem) -> np.ndarray:
    return attn_forward_ref(p)[0].data


def forward_output_tiled(p: AttentionProblem, tc: TileConfig = TileConfig()) -> np.ndarray:
    return attn_forward_tiled(p, tc)[0].data


def numeric_grads(p: AttentionProblem, dO: Tensor, forward=forward_output_ref, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``sum(forward(p) * dO)`` for every input tensor."""
    if p.fmt is not NumericFormat.F64:
        raise ValueError("finite differences are only meaningful in F64")
    w = dO.data

    def loss(prob):
        return float(np.sum(forward(prob) * w))

    out = {}
    for gname, iname in INPUT_OF.items():
        t = getattr(p, iname)
        if t is None:
            continue
        base = t.numpy()
        g = np.empty_like(base)
        for idx in np.ndindex(base.shape):
            x0 = base[idx]
            base[idx] = x0 + h
            plus = loss(p.replace(**{iname: Tensor(base.copy(), p.fmt)}))
            base[idx] = x0 - h
            minus = loss(p.replace(**{iname: Tensor(base.copy(), p.fmt)}))
            base[idx] = x0
            g[idx] = (plus - minus) / (2 * h)
        out[gname] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative error ``max|a - n| / max|n|``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.abs(n).max()
    diff = np.abs(a - n).max()
    if scale == 0:
        return float(diff)
    return float(diff / scale)


def analytic_grads(p: AttentionProblem, dO: Tensor, path: str = "tiled", tc: TileConfig = TileConfig()) -> AttentionGrads:
    if path == "reference":
        _, _, P = attn_forward_ref(p)
        return attn_backward_ref(p, P, dO)
    if path == "tiled":
        O, stats = attn_forward_tiled(p, tc)
        return attn_backward_tiled(p, O, stats, dO, tc)
    raise ValueError(f"unknown path {path!r}")


def gradcheck(
    p: AttentionProblem,
    dO: Tensor,
    path: str = "tiled",
    tc: TileConfig = TileConfig(),
    h: float = 1e-5,
    forward=forward_output_ref,
) -> dict[str, float]:
    """Relative error per gradient tensor of ``path`` against finite differences."""
    grads = analytic_grads(p, dO, path, tc)
    fd = numeric_grads(p, dO, forward, h)
    return {name: relative_error(g.data, fd[name]) for name, g in grads.items()}
