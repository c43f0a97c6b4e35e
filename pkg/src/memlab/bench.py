"""Row producers behind the CLI reports.

Random instances come from numpy's PCG64 generator seeded with
``SeedSequence([seed, case_index])`` so a case's data does not depend on which
other cases run or in what order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from memlab.attention import (
    AccumMode,
    AccumPolicy,
    AttentionProblem,
    AttentionVariant,
    TileConfig,
    random_problem,
)
from memlab.gradcheck import gradcheck
from memlab.ledger import AllocationLedger, measure_peak
from memlab.memory_model import BACKWARD, TILED, AttentionDims, analytic_attention_bytes
from memlab.reference import attn_backward_ref, attn_forward_ref
from memlab.seqplan import (
    HardwareConfig,
    ModelConfig,
    ParallelConfig,
    framework_parallel,
    max_seq,
    memory_breakdown,
)
from memlab.tensor import NumericFormat, Tensor
from memlab.tiled import attn_backward_tiled, attn_forward_tiled

DEFAULT_TOLERANCE = {
    NumericFormat.F64: 1e-10,
    NumericFormat.F32: 1e-5,
    NumericFormat.F16E: 1e-2,
    NumericFormat.BF16E: 1e-1,
}


def case_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


@dataclass(frozen=True)
class AttnCase:
    variant: AttentionVariant
    B: int
    L: int
    H: int
    D: int
    tiles: TileConfig = TileConfig()


@dataclass
class Row:
    values: dict
    ok: bool = True


ATTN_BENCH_COLUMNS = [
    "variant", "B", "L", "H", "D", "tile_q", "tile_k",
    "naive_peak_bytes", "tiled_peak_bytes", "reduction_ratio", "max_abs_diff",
]
GRADCHECK_COLUMNS = ["variant", "tensor", "max_rel_err", "pass"]
PRECISION_COLUMNS = ["B", "policy", "rel_err"]
PLAN_COLUMNS = ["num_gpus", "framework_profile", "max_seq", "limiting_term"]
BREAKDOWN_COLUMNS = [
    "num_gpus", "framework_profile", "seq_len",
    "model_state_bytes", "activation_bytes", "mask_device_bytes", "mask_host_bytes",
    "posemb_bytes", "attn_map_bytes", "offload_host_bytes", "device_total_bytes", "fits",
]


def _max_abs(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a.astype(np.float64) - b.astype(np.float64)).max())


def attn_bench_row(
    case: AttnCase,
    fmt: NumericFormat,
    seed: int,
    index: int,
    tolerance: float | None = None,
    workers: int = 1,
    ledger_dir: str | None = None,
) -> Row:
    """Naive vs tiled training step (forward + backward) on one random problem."""
    rng = case_rng(seed, index)
    p = random_problem(case.variant, case.B, case.L, case.H, case.D, fmt, rng)
    dO = Tensor(rng.standard_normal(p.Q.shape), fmt)

    naive = AllocationLedger()
    O_ref, _, P = attn_forward_ref(p, naive)
    g_ref = attn_backward_ref(p, P, dO, naive)
    naive.free_all()

    tiled = AllocationLedger()
    O_t, stats = attn_forward_tiled(p, case.tiles, tiled, workers=workers)
    g_t = attn_backward_tiled(p, O_t, stats, dO, case.tiles, ledger=tiled)
    tiled.free_all()

    if ledger_dir is not None:
        os.makedirs(ledger_dir, exist_ok=True)
        for name, led in (("naive", naive), ("tiled", tiled)):
            with open(os.path.join(ledger_dir, f"case{index:03d}-{name}.tsv"), "w") as fh:
                led.dump(fh)

    naive_peak, _ = measure_peak(naive)
    tiled_peak, _ = measure_peak(tiled)
    diff = _max_abs(O_ref.data, O_t.data)
    for (_, a), (_, b) in zip(g_ref.items(), g_t.items()):
        diff = max(diff, _max_abs(a.data, b.data))

    B, L, H, D = p.dims
    bound = analytic_attention_bytes(AttentionDims(H, B, L, D, fmt.itemsize), TILED, BACKWARD, case.tiles, workers)
    tol = DEFAULT_TOLERANCE[fmt] if tolerance is None else tolerance
    values = {
        "variant": case.variant.value,
        "B": B,
        "L": L,
        "H": H,
        "D": D,
        "tile_q": case.tiles.tile_q,
        "tile_k": case.tiles.tile_k,
        "naive_peak_bytes": naive_peak,
        "tiled_peak_bytes": tiled_peak,
        "reduction_ratio": naive_peak / tiled_peak,
        "max_abs_diff": diff,
    }
    return Row(values, ok=bool(diff <= tol and tiled_peak <= bound))


def gradcheck_rows(
    case: AttnCase,
    seed: int,
    index: int,
    path: str = "tiled",
    step: float = 1e-5,
    tolerance: float = 1e-6,
) -> list[Row]:
    rng = case_rng(seed, index)
    p = random_problem(case.variant, case.B, case.L, case.H, case.D, NumericFormat.F64, rng)
    dO = Tensor(rng.standard_normal(p.Q.shape))
    errs = gradcheck(p, dO, path, case.tiles, step)
    rows = []
    for name, err in errs.items():
        ok = bool(err <= tolerance)
        rows.append(Row({"variant": case.variant.value, "tensor": name, "max_rel_err": err, "pass": ok}, ok))
    return rows


def precision_problem(B: int, magnitude: float = 1e-3, fmt: NumericFormat = NumericFormat.BF16E):
    """Row-wise problem whose logit gradients are all +-``magnitude`` and identical over ``b``.

    With ``Q = 0`` both keys get probability 1/2, and ``V = (1, 0)`` makes
    ``dS[i] = dO[i] / 4 * (1, -1)``.
    """
    q = np.zeros((B, 2, 1, 1))
    v = np.zeros((B, 2, 1, 1))
    v[:, 0] = 1.0
    p = AttentionProblem(
        AttentionVariant.MsaRowWise,
        Tensor(q, fmt),
        Tensor(q, fmt),
        Tensor(v, fmt),
        Tensor(np.zeros((1, 2, 2)), fmt),
        scale=1.0,
    )
    dO = Tensor(np.full((B, 2, 1, 1), 4 * magnitude), fmt)
    return p, dO


def bias_grad_error(p: AttentionProblem, dO: Tensor, mode: AccumMode, tc: TileConfig = TileConfig()) -> float:
    """Relative error of the accumulated bias gradient against an F64 sum of the same logit gradients."""
    O, stats = attn_forward_tiled(p, tc)
    H, L = p.dims[2], p.dims[1]
    oracle = np.zeros((H, L, L), dtype=np.float64)

    def sink(h, b0, i0, j0, tile):
        for r in range(tile.shape[0]):
            oracle[h, i0 : i0 + tile.shape[1], j0 : j0 + tile.shape[2]] += tile[r].astype(np.float64)

    g = attn_backward_tiled(p, O, stats, dO, tc, AccumPolicy(mode), dlogits_sink=sink)
    got = g.dBias.data.astype(np.float64)
    return float(np.abs(got - oracle).max() / np.abs(oracle).max())


# A batch tile of 64 keeps the demo fast; the per-row accumulation inside a
# unit still rounds after every addition, so the hazard is unchanged.
PRECISION_TILES = TileConfig(64, 64, 64)


def precision_rows(
    B: int,
    magnitude: float = 1e-3,
    fmt: NumericFormat = NumericFormat.BF16E,
    tolerance: float = 1e-4,
    tc: TileConfig = PRECISION_TILES,
) -> list[Row]:
    """One row per accumulation policy; only the upcast policy is held to ``tolerance``."""
    p, dO = precision_problem(B, magnitude, fmt)
    rows = []
    for mode in (AccumMode.NativeFormat, AccumMode.UpcastF32):
        err = bias_grad_error(p, dO, mode, tc)
        ok = mode is AccumMode.NativeFormat or err <= tolerance
        rows.append(Row({"B": B, "policy": mode.value, "rel_err": err}, ok))
    return rows


def plan_row(mc: ModelConfig, pc: ParallelConfig, hw: HardwareConfig, label: str) -> Row:
    r = max_seq(mc, pc, hw)
    return Row({
        "num_gpus": hw.num_gpus,
        "framework_profile": label,
        "max_seq": r.max_seq,
        "limiting_term": r.limiting_term,
    })


def framework_plan_row(mc: ModelConfig, framework: str, hw: HardwareConfig, batch: int = 1) -> Row:
    return plan_row(mc, framework_parallel(framework, hw.num_gpus, batch), hw, framework)


def breakdown_row(mc: ModelConfig, pc: ParallelConfig, hw: HardwareConfig, label: str, s: int) -> Row:
    bd = memory_breakdown(mc, pc, hw, s)
    return Row({
        "num_gpus": hw.num_gpus,
        "framework_profile": label,
        "seq_len": s,
        "model_state_bytes": bd.model_state_bytes,
        "activation_bytes": bd.activation_bytes,
        "mask_device_bytes": bd.mask_device_bytes,
        "mask_host_bytes": bd.mask_host_bytes,
        "posemb_bytes": bd.posemb_bytes,
        "attn_map_bytes": bd.attn_map_bytes,
        "offload_host_bytes": bd.offload_host_bytes,
        "device_total_bytes": bd.device_total,
        "fits": bd.fits,
    })
