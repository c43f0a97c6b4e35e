"""One test per acceptance criterion, each at its stated tolerance and time budget."""

import io
import time
from dataclasses import replace

import numpy as np
import pytest

from memlab.attention import AccumMode, AttentionVariant, TileConfig, random_problem
from memlab.bench import bias_grad_error, precision_problem
from memlab.cli import COMMANDS, RunSpec, run
from memlab.gradcheck import analytic_grads, numeric_grads, relative_error
from memlab.ledger import AllocationLedger, measure_peak
from memlab.memory_model import (
    BACKWARD,
    FORWARD,
    NAIVE,
    TILED,
    AttentionDims,
    analytic_attention_bytes,
    analytic_attention_terms,
)
from memlab.positional import alibi_bias, rope_apply
from memlab.reference import attn_forward_ref
from memlab.seqplan import (
    ALL_OFF,
    ALL_ON,
    HARDWARE_PROFILES,
    HardwareConfig,
    MaskPlacement,
    ModelConfig,
    ParallelConfig,
    default_layout,
    hardware_for,
    mask_plan,
    max_seq,
    memory_breakdown,
    model_profile,
    posemb_plan,
)
from memlab.tensor import NumericFormat, Tensor
from memlab.tiled import attn_backward_tiled, attn_forward_tiled

VARIANTS = list(AttentionVariant)


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed <= self.seconds, f"took {self.elapsed:.1f}s, budget {self.seconds}s"


def _max_abs(a, b):
    return float(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).max())


@pytest.mark.criterion(1, "tiled forward == naive reference over 50 seeded problems per variant")
def test_criterion_01_oracle_equivalence():
    with Budget(60):
        for fmt, tol in ((NumericFormat.F32, 1e-5), (NumericFormat.F64, 1e-10)):
            for vi, variant in enumerate(VARIANTS):
                rng = np.random.default_rng([1, vi, fmt.itemsize])
                worst = 0.0
                ragged = 0
                for _ in range(50):
                    B, H, D = (int(x) for x in rng.integers(1, [5, 4, 9]))
                    L = int(rng.integers(2, 97))
                    tc = TileConfig(int(rng.integers(1, L + 1)), int(rng.integers(1, L + 1)), int(rng.integers(1, B + 1)))
                    ragged += (L % tc.tile_q != 0) or (L % tc.tile_k != 0)
                    p = random_problem(variant, B, L, H, D, fmt, rng)
                    O, _ = attn_forward_tiled(p, tc)
                    worst = max(worst, _max_abs(O.data, attn_forward_ref(p)[0].data))
                assert ragged > 0
                assert worst <= tol, (variant, fmt, worst)


@pytest.mark.criterion(2, "reference and tiled gradients vs central finite differences; dBias == sum_b dS")
def test_criterion_02_gradients():
    with Budget(30):
        for vi, variant in enumerate(VARIANTS):
            rng = np.random.default_rng([2, vi])
            p = random_problem(variant, 2, 16, 2, 4, NumericFormat.F64, rng)
            dO = Tensor(rng.standard_normal(p.Q.shape))
            fd = numeric_grads(p, dO, h=1e-5)
            tc = TileConfig(8, 6, 1)
            for path in ("reference", "tiled"):
                for name, g in analytic_grads(p, dO, path, tc).items():
                    assert relative_error(g.data, fd[name]) <= 1e-6, (variant, path, name)
            if variant.has_bias:
                oracle = np.zeros((2, 16, 16))

                def sink(h, b0, i0, j0, tile):
                    for r in range(tile.shape[0]):
                        oracle[h, i0 : i0 + tile.shape[1], j0 : j0 + tile.shape[2]] += tile[r]

                O, st = attn_forward_tiled(p, tc)
                g = attn_backward_tiled(p, O, st, dO, tc, dlogits_sink=sink)
                np.testing.assert_array_equal(g.dBias.data, oracle)


@pytest.mark.criterion(3, "naive logits at (H=8, B=5120, L=384, 2 B) = 12,079,595,520 bytes")
def test_criterion_03_memory_explosion():
    logits = analytic_attention_terms(AttentionDims(8, 5120, 384, 8, 2), NAIVE, FORWARD)["logits"]
    assert logits == 12_079_595_520
    assert logits >= 12 * 10**9


@pytest.mark.criterion(4, "tiled peak <= 5% of naive peak at (8,64,1024,8) F32; analytic ratio >= 10x")
def test_criterion_04_memory_reduction(tmp_path):
    H, B, L, D = 8, 64, 1024, 8
    fmt = NumericFormat.F32
    with Budget(60):
        p = random_problem(AttentionVariant.MsaRowWise, B, L, H, D, fmt, np.random.default_rng(4))
        tiled = AllocationLedger()
        O_t, _ = attn_forward_tiled(p, TileConfig(64, 64, 1), tiled, workers=1)
        tiled.free_all()
        naive = AllocationLedger(spill_dir=tmp_path)
        O_n, _, _ = attn_forward_ref(p, naive)
        naive.free_all()
        tiled_peak, naive_peak = measure_peak(tiled)[0], measure_peak(naive)[0]
        assert naive_peak == 2 * H * B * L * L * 4
        assert tiled_peak <= 0.05 * naive_peak
        assert _max_abs(O_t.data, O_n.data) <= 1e-5
    dims = AttentionDims(8, 5120, 384, 8, 2)
    ratio = analytic_attention_bytes(dims, NAIVE, BACKWARD) / analytic_attention_bytes(dims, TILED, BACKWARD, TileConfig())
    assert ratio >= 10


@pytest.mark.criterion(5, "BF16E native dBias accumulation error > 1e-2; UpcastF32 <= 1e-4 (B=4096)")
def test_criterion_05_precision_hazard():
    with Budget(10):
        p, dO = precision_problem(4096, magnitude=1e-3, fmt=NumericFormat.BF16E)
        tc = TileConfig(64, 64, 64)
        assert bias_grad_error(p, dO, AccumMode.NativeFormat, tc) > 1e-2
        assert bias_grad_error(p, dO, AccumMode.UpcastF32, tc) <= 1e-4


@pytest.mark.criterion(6, "mask: 50K final tensor = 1e10 B; flip at 16,384 on A100-40G; direct = 2x staged")
def test_criterion_06_mask_model():
    hw = HARDWARE_PROFILES["a100-40g"]
    assert mask_plan(50_000, hw, 4).device_bytes == 10**10
    assert mask_plan(16_384, hw).placement is MaskPlacement.GpuDirect
    assert mask_plan(16_385, hw).placement is MaskPlacement.CpuStaged
    for s in (2, 1000, 16_384, 50_000):
        direct = mask_plan(s, hw, staging=False).device_bytes
        staged = mask_plan(s, HardwareConfig(mask_threshold=1)).device_bytes
        assert direct == 2 * staged


@pytest.mark.criterion(7, "posemb partitioned x p == replicated; replicated(100K, 8192) = 9,830,400,000 B")
def test_criterion_07_posemb_partition():
    replicated = posemb_plan(100_000, 8192, 4, 3)
    assert replicated == 9_830_400_000
    for p in (2, 4, 8, 32):
        pc = ParallelConfig(tp=p, sp_enabled=True, posemb_partitioned=True)
        assert posemb_plan(100_000, 8192, 4, 3, pc) * p == replicated


def _toy(rng):
    tp, pp, dp = (int(x) for x in rng.choice([1, 2], 3))
    sp = bool(rng.integers(2))
    pc = ParallelConfig(
        tp=tp, pp=pp, dp=dp, sp_enabled=sp, posemb_partitioned=sp and bool(rng.integers(2)),
        flash_attention=bool(rng.integers(2)), zero_stage=int(rng.integers(4)), offload=bool(rng.integers(2)),
        mask_cpu_staging=bool(rng.integers(2)), custom_mask=bool(rng.integers(2)),
    )
    mc = ModelConfig(int(rng.integers(1, 1000)), int(rng.integers(1, 4)), int(rng.integers(1, 9)),
                     int(rng.integers(1, 4)), act_multiplier=float(rng.uniform(0.5, 3)))
    hw = HardwareConfig(gpu_mem_bytes=int(rng.integers(10_000, 200_000)), num_gpus=tp * pp * dp,
                        mask_threshold=int(rng.integers(10, 150)), reserve_frac=0.0)
    return mc, pc, hw


@pytest.mark.criterion(8, "max_seq == linear scan on 20 toys; flags monotone; genslm-25b all-on/all-off >= 10")
def test_criterion_08_planner():
    with Budget(30):
        rng = np.random.default_rng(8)
        cap = 500
        for _ in range(20):
            mc, pc, hw = _toy(rng)
            scan = max((s for s in range(1, cap + 1) if memory_breakdown(mc, pc, hw, s).fits), default=0)
            assert max_seq(mc, pc, hw, cap=cap).max_seq == scan
            base = max_seq(mc, pc, hw).max_seq
            flips = [dict(flash_attention=True), dict(sp_enabled=True), dict(mask_cpu_staging=True), dict(offload=True)]
            flips += [dict(zero_stage=z) for z in range(pc.zero_stage + 1, 4)]
            if pc.sp_enabled:
                flips.append(dict(posemb_partitioned=True))
            for flip in flips:
                assert max_seq(mc, replace(pc, **flip), hw).max_seq >= base, flip
        mc = model_profile("genslm-25b")
        tp, pp, dp = default_layout(64)
        hw = hardware_for("a100-40g", 64)
        on = max_seq(mc, ParallelConfig(tp=tp, pp=pp, dp=dp, **ALL_ON), hw).max_seq
        off = max_seq(mc, ParallelConfig(tp=tp, pp=pp, dp=dp, **ALL_OFF), hw).max_seq
        assert off > 0 and on / off >= 10


@pytest.mark.criterion(9, "RoPE identity, norm drift <= 1e-12, offset invariance <= 1e-9; ALiBi 16-in-64 exact")
def test_criterion_09_positional():
    with Budget(5):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((32, 16))
        np.testing.assert_array_equal(rope_apply(Tensor(x), [0] * 32).data, x)
        out = rope_apply(Tensor(x), rng.integers(0, 10**6, 32)).data
        drift = np.abs(np.hypot(out[:, ::2], out[:, 1::2]) - np.hypot(x[:, ::2], x[:, 1::2])).max()
        assert drift <= 1e-12
        q, k = rng.standard_normal((2, 1, 16))
        for off in (0, 1, 7, -30):
            dots = [rope_apply(Tensor(q), [m]).data[0] @ rope_apply(Tensor(k), [m - off]).data[0] for m in (0, 11, 500, 40_000)]
            assert max(dots) - min(dots) <= 1e-9
        np.testing.assert_array_equal(alibi_bias(8, 64).data[:, :16, :16], alibi_bias(8, 16).data)


@pytest.mark.criterion(10, "every CLI command with a fixed seed writes byte-identical reports")
def test_criterion_10_determinism(tmp_path):
    configs = {
        "attn-bench": "cases: [{variant: MsaRowWise, B: 4, L: 128, H: 2, D: 8, tile_q: 64, tile_k: 64, tile_b: 1}]\n",
        "precision-demo": "batches: [1024]\n",
    }
    for command in COMMANDS:
        cfg = None
        if command in configs:
            cfg = tmp_path / f"{command}.yaml"
            cfg.write_text(configs[command])
            cfg = str(cfg)
        reports = []
        for attempt, parallel in enumerate((False, False, True)):
            out = tmp_path / f"{command}-{attempt}.csv"
            assert run(RunSpec(command, cfg, str(out), "csv", 7, parallel), stderr=io.StringIO()) == 0
            reports.append(out.read_bytes())
        assert reports[0] == reports[1] == reports[2], command
