"""Naive, fully materializing Evoformer attention (forward and backward).

This is the memory-hungry baseline and the correctness oracle for the tiled
path. The full ``(H, B, L, L)`` logits and probabilities are allocated through
the ledger and returned; the backward additionally materializes the logit
gradient ``dS``. Work is done one head at a time so host temporaries stay at
``B * L * L`` elements.
"""

from __future__ import annotations

import numpy as np

from memlab.attention import AttentionGrads, AttentionProblem
from memlab.errors import NumericInputError, ValidationError
from memlab.ledger import AllocationLedger
from memlab.tensor import Tensor, mm, rowsum, seq_sum


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    # (B, L, H, D) -> (B, L, D) for one head
    return x[:, :, h, :]


def attn_forward_ref(p: AttentionProblem, ledger: AllocationLedger | None = None):
    """Return ``(O, S, P)`` with ``S`` and ``P`` of shape ``(H, B, L, L)``.

    ``S`` and ``P`` stay live in ``ledger`` after the call; the caller frees them.
    """
    p.check_finite_inputs()
    led = AllocationLedger() if ledger is None else ledger
    fmt = p.fmt
    B, L, H, D = p.dims
    S = led.alloc("logits", (H, B, L, L), fmt)
    P = led.alloc("probs", (H, B, L, L), fmt)
    O = np.empty((B, L, H, D), dtype=fmt.storage_dtype)
    q, k, v = p.Q.data, p.K.data, p.V.data
    for h in range(H):
        s = fmt.round(mm(_heads(q, h), _heads(k, h).transpose(0, 2, 1), fmt))
        s = fmt.round(s * p.scale)
        if p.bias is not None:
            s = fmt.round(s + p.bias.data[h])  # broadcast over b
        S[h] = s
        m = s.max(axis=-1, keepdims=True)
        e = fmt.round(np.exp(fmt.round(s - m)))
        denom = rowsum(e, fmt)[..., None]
        P[h] = fmt.round(e / denom)
        # normalize after the value product, as a single-pass safe softmax does
        O[:, :, h, :] = fmt.round(fmt.round(mm(e, _heads(v, h), fmt)) / denom)
    if np.isnan(O).any():
        raise NumericInputError("NaN produced in attention output")
    return Tensor(O, fmt), Tensor(S, fmt), Tensor(P, fmt)


def _check_backward_inputs(p: AttentionProblem, P: Tensor, dO: Tensor):
    B, L, H, D = p.dims
    if P.shape != (H, B, L, L):
        raise ValidationError(f"P must be (H, B, L, L) = {(H, B, L, L)}, got {P.shape}")
    if dO.shape != (B, L, H, D):
        raise ValidationError(f"dO must be (B, L, H, D) = {(B, L, H, D)}, got {dO.shape}")
    if P.fmt is not p.fmt or dO.fmt is not p.fmt:
        raise ValidationError("P and dO must use the problem's numeric format")


def logit_grads_ref(p: AttentionProblem, P: Tensor, dO: Tensor, ledger: AllocationLedger | None = None) -> Tensor:
    """Full logit gradient ``dS = P * (dP - rowsum(P * dP))``, shape ``(H, B, L, L)``.

    The buffer stays live in ``ledger``.
    """
    led = AllocationLedger() if ledger is None else ledger
    return Tensor(_dlogits(p, P, dO, led), p.fmt)


def _dlogits(p: AttentionProblem, P: Tensor, dO: Tensor, led: AllocationLedger) -> np.ndarray:
    _check_backward_inputs(p, P, dO)
    fmt = p.fmt
    H = p.dims[2]
    dS = led.alloc("dlogits", P.shape, fmt)
    do, v = dO.data, p.V.data
    for h in range(H):
        ph = P.data[h]
        dp = fmt.round(mm(_heads(do, h), _heads(v, h).transpose(0, 2, 1), fmt))
        r = rowsum(fmt.round(ph * dp), fmt)
        dS[h] = fmt.round(ph * fmt.round(dp - r[..., None]))
    return dS


def attn_backward_ref(
    p: AttentionProblem, P: Tensor, dO: Tensor, ledger: AllocationLedger | None = None
) -> AttentionGrads:
    """Gradients of ``sum(O * dO)`` with respect to Q, K, V and the shared bias.

    ``dBias[h] = sum_b dS[h, b]`` is accumulated in ascending ``b`` in F32 or
    wider, whatever the problem format.
    """
    led = AllocationLedger() if ledger is None else ledger
    dS = _dlogits(p, P, dO, led)
    fmt = p.fmt
    B, L, H, D = p.dims
    q, k, do = p.Q.data, p.K.data, dO.data
    dQ = np.empty((B, L, H, D), dtype=fmt.storage_dtype)
    dK = np.empty_like(dQ)
    dV = np.empty_like(dQ)
    for h in range(H):
        ph = P.data[h]
        dV[:, :, h, :] = fmt.round(mm(ph.transpose(0, 2, 1), _heads(do, h), fmt))
        dQ[:, :, h, :] = fmt.round(fmt.round(mm(dS[h], _heads(k, h), fmt)) * p.scale)
        dK[:, :, h, :] = fmt.round(fmt.round(mm(dS[h].transpose(0, 2, 1), _heads(q, h), fmt)) * p.scale)
    dBias = None
    if p.bias is not None:
        acc = fmt.accum
        dBias = Tensor(seq_sum(dS, 1, acc), acc)
    led.free(dS)
    return AttentionGrads(Tensor(dQ, fmt), Tensor(dK, fmt), Tensor(dV, fmt), dBias)
