"""Tiled, memory-efficient Evoformer attention.

A work unit is one (head, batch tile, query tile). It streams over key tiles
with an online softmax, so the only per-unit buffers are one logits tile,
one output accumulator and two row vectors (running max and denominator).
The bias tile for a (head, query tile, key tile) is read straight out of the
shared ``(H, L, L)`` bias for every batch row instead of being expanded.

Backward recomputes probabilities tile by tile from the saved row
log-sum-exp and uses ``delta = rowsum(dO * O)`` for the softmax term. The
bias gradient is the logit gradient summed over the batch axis; how that sum
is accumulated is controlled by :class:`AccumPolicy`.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from memlab.attention import (
    AccumMode,
    AccumPolicy,
    AttentionGrads,
    AttentionProblem,
    RowStats,
    TileConfig,
)
from memlab.errors import NumericInputError, UsageError, ValidationError
from memlab.ledger import AllocationLedger
from memlab.tensor import Tensor, mm, rowsum

DEFAULT_TILES = TileConfig()


def broadcast_bias_tile(bias: Tensor, h: int, i0: int, j0: int, tc: TileConfig = DEFAULT_TILES) -> Tensor:
    """The ``(tile_q, tile_k)`` bias block at ``(h, i0, j0)``, clipped at the edges.

    There is no batch argument: the same block serves every batch row.
    """
    H, L, L2 = bias.shape
    if not 0 <= h < H:
        raise ValidationError(f"head {h} out of range [0, {H})")
    if not (0 <= i0 < L and 0 <= j0 < L2):
        raise ValidationError(f"tile origin ({i0}, {j0}) out of range for bias {bias.shape}")
    return Tensor._wrap(bias.data[h, i0 : i0 + tc.tile_q, j0 : j0 + tc.tile_k].copy(), bias.fmt)


def _open(ledger: AllocationLedger | None) -> AllocationLedger:
    led = AllocationLedger() if ledger is None else ledger
    if led.closed:
        raise UsageError("ledger is closed")
    return led


def _units(p: AttentionProblem, tc: TileConfig):
    B, L, H, _ = p.dims
    return [
        (h, b0, i0)
        for h in range(H)
        for b0 in range(0, B, tc.tile_b)
        for i0 in range(0, L, tc.tile_q)
    ]


def _run(units, fn, workers: int):
    if workers <= 1:
        for u in units:
            fn(*u)
        return
    with ThreadPoolExecutor(max_workers=workers) as ex:
        for fut in [ex.submit(fn, *u) for u in units]:
            fut.result()


def attn_forward_tiled(
    p: AttentionProblem,
    tc: TileConfig = DEFAULT_TILES,
    ledger: AllocationLedger | None = None,
    workers: int = 1,
):
    """Exact attention output and row statistics without materializing the logits.

    Up to ``workers`` work units run concurrently. The returned
    ``RowStats`` buffer stays live in ``ledger`` for the backward pass.
    """
    led = _open(ledger)
    p.check_finite_inputs()
    fmt = p.fmt
    B, L, H, D = p.dims
    q, k, v = p.Q.data, p.K.data, p.V.data
    bias = None if p.bias is None else p.bias.data
    scale = p.scale
    O = np.empty((B, L, H, D), dtype=fmt.storage_dtype)
    lse = led.alloc("stats", (H, B, L), fmt)
    kt = min(tc.tile_k, L)

    def unit(h, b0, i0):
        b1, i1 = min(b0 + tc.tile_b, B), min(i0 + tc.tile_q, L)
        nb, nq = b1 - b0, i1 - i0
        s = led.alloc("s_tile", (nb, nq, kt), fmt)
        acc = led.alloc("acc", (nb, nq, D), fmt, fill=0.0)
        m = led.alloc("row_max", (nb, nq), fmt, fill=-np.inf)
        l = led.alloc("row_sum", (nb, nq), fmt, fill=0.0)
        qb = q[b0:b1, i0:i1, h, :]
        for j0 in range(0, L, tc.tile_k):
            j1 = min(j0 + tc.tile_k, L)
            st = s[:, :, : j1 - j0]
            mm(qb, k[b0:b1, j0:j1, h, :].transpose(0, 2, 1), fmt, out=st)
            fmt.round_(st)
            st *= scale
            fmt.round_(st)
            if bias is not None:
                st += bias[h, i0:i1, j0:j1]
                fmt.round_(st)
            m_new = np.maximum(m, st.max(axis=-1))
            alpha = fmt.round(np.exp(fmt.round(m - m_new)))
            st -= m_new[..., None]
            fmt.round_(st)
            np.exp(st, out=st)
            fmt.round_(st)
            l *= alpha
            fmt.round_(l)
            l += rowsum(st, fmt)
            fmt.round_(l)
            acc *= alpha[..., None]
            fmt.round_(acc)
            acc += fmt.round(mm(st, v[b0:b1, j0:j1, h, :], fmt))
            fmt.round_(acc)
            m[...] = m_new
        O[b0:b1, i0:i1, h, :] = fmt.round(acc / l[..., None])
        lse[h, b0:b1, i0:i1] = fmt.round(m + fmt.round(np.log(l)))
        for buf in (s, acc, m, l):
            led.free(buf)

    _run(_units(p, tc), unit, workers)
    if np.isnan(O).any():
        raise NumericInputError("NaN produced in attention output")
    return Tensor._wrap(O, fmt), RowStats(Tensor._wrap(lse, fmt))


def attn_backward_tiled(
    p: AttentionProblem,
    O: Tensor,
    stats: RowStats,
    dO: Tensor,
    tc: TileConfig = DEFAULT_TILES,
    pol: AccumPolicy = AccumPolicy(),
    ledger: AllocationLedger | None = None,
    workers: int = 1,
    dlogits_sink=None,
    rng: np.random.Generator | None = None,
) -> AttentionGrads:
    """Gradients by recomputation.

    With ``pol.deterministic`` the work units run one at a time in ascending
    (head, batch, query) order, so every cross-unit reduction (dK, dV across
    query tiles, dBias across batch rows) happens in ascending index order and
    results are bit-reproducible; ``workers`` is ignored. Otherwise units are
    shuffled (``rng``) and may run on ``workers`` threads, with reductions
    serialized by a lock in whatever order units finish.

    ``dlogits_sink(h, b0, i0, j0, dS_tile)`` receives a copy of every
    recomputed logit-gradient tile; it exists for verification.
    """
    led = _open(ledger)
    fmt = p.fmt
    B, L, H, D = p.dims
    lse_t = stats.logsumexp
    if lse_t.shape != (H, B, L) or lse_t.fmt is not fmt:
        raise ValidationError(
            f"row stats {lse_t.shape}/{lse_t.fmt.name} do not match problem {(H, B, L)}/{fmt.name}"
        )
    for name, t in (("O", O), ("dO", dO)):
        if t.shape != (B, L, H, D) or t.fmt is not fmt:
            raise ValidationError(f"{name} must be {(B, L, H, D)} in {fmt.name}, got {t.shape}/{t.fmt.name}")

    q, k, v = p.Q.data, p.K.data, p.V.data
    bias = None if p.bias is None else p.bias.data
    lse, do, o = lse_t.data, dO.data, O.data
    scale = p.scale

    delta = led.alloc("delta", (B, L, H), fmt)
    for h in range(H):
        delta[:, :, h] = rowsum(fmt.round(do[:, :, h, :] * o[:, :, h, :]), fmt)

    dQ = np.zeros((B, L, H, D), dtype=fmt.storage_dtype)
    dK = np.zeros_like(dQ)
    dV = np.zeros_like(dQ)
    bias_fmt = fmt.accum if pol.mode is AccumMode.UpcastF32 else fmt
    dB = None if bias is None else np.zeros((H, L, L), dtype=bias_fmt.storage_dtype)
    kt = min(tc.tile_k, L)
    lock = threading.Lock()

    def unit(h, b0, i0):
        b1, i1 = min(b0 + tc.tile_b, B), min(i0 + tc.tile_q, L)
        nb, nq = b1 - b0, i1 - i0
        s = led.alloc("p_tile", (nb, nq, kt), fmt)
        dq = led.alloc("dq_acc", (nb, nq, D), fmt, fill=0.0)
        row_lse = led.alloc("row_lse", (nb, nq), fmt)
        row_delta = led.alloc("row_delta", (nb, nq), fmt)
        row_lse[...] = lse[h, b0:b1, i0:i1]
        row_delta[...] = delta[b0:b1, i0:i1, h]
        qb = q[b0:b1, i0:i1, h, :]
        dob = do[b0:b1, i0:i1, h, :]
        for j0 in range(0, L, tc.tile_k):
            j1 = min(j0 + tc.tile_k, L)
            st = s[:, :, : j1 - j0]
            kb = k[b0:b1, j0:j1, h, :]
            vb = v[b0:b1, j0:j1, h, :]
            # recompute this tile of probabilities from the saved lse
            mm(qb, kb.transpose(0, 2, 1), fmt, out=st)
            fmt.round_(st)
            st *= scale
            fmt.round_(st)
            if bias is not None:
                st += bias[h, i0:i1, j0:j1]
                fmt.round_(st)
            st -= row_lse[..., None]
            fmt.round_(st)
            np.exp(st, out=st)
            fmt.round_(st)
            dv_part = fmt.round(mm(st.transpose(0, 2, 1), dob, fmt))
            # dS = P * (dO V^T - delta), formed in place over P
            st *= fmt.round(fmt.round(mm(dob, vb.transpose(0, 2, 1), fmt)) - row_delta[..., None])
            fmt.round_(st)
            dq += fmt.round(fmt.round(mm(st, kb, fmt)) * scale)
            fmt.round_(dq)
            dk_part = fmt.round(fmt.round(mm(st.transpose(0, 2, 1), qb, fmt)) * scale)
            with lock:
                dV[b0:b1, j0:j1, h, :] = fmt.round(dV[b0:b1, j0:j1, h, :] + dv_part)
                dK[b0:b1, j0:j1, h, :] = fmt.round(dK[b0:b1, j0:j1, h, :] + dk_part)
                if dB is not None:
                    tile = dB[h, i0:i1, j0:j1]
                    for r in range(nb):
                        # NativeFormat rounds after every addition; UpcastF32 adds in F32+
                        tile[...] = bias_fmt.round(tile + st[r])
            if dlogits_sink is not None:
                dlogits_sink(h, b0, i0, j0, np.array(st))
        dQ[b0:b1, i0:i1, h, :] = dq
        for buf in (s, dq, row_lse, row_delta):
            led.free(buf)

    units = _units(p, tc)
    if pol.deterministic:
        _run(units, unit, 1)
    else:
        rng = np.random.default_rng() if rng is None else rng
        order = rng.permutation(len(units))
        _run([units[i] for i in order], unit, workers)
    led.free(delta)

    dBias = None if dB is None else Tensor._wrap(dB, bias_fmt)
    return AttentionGrads(Tensor._wrap(dQ, fmt), Tensor._wrap(dK, fmt), Tensor._wrap(dV, fmt), dBias)
