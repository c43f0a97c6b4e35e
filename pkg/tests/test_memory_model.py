import numpy as np
import pytest

from memlab.attention import AttentionVariant, TileConfig, random_problem
from memlab.errors import ValidationError
from memlab.ledger import AllocationLedger, measure_peak
from memlab.memory_model import (
    BACKWARD,
    FORWARD,
    NAIVE,
    TILED,
    AttentionDims,
    analytic_attention_bytes,
    analytic_attention_terms,
    baseline_io_bytes,
    reduction_ratio,
)
from memlab.reference import attn_backward_ref, attn_forward_ref
from memlab.tensor import NumericFormat, Tensor
from memlab.tiled import attn_backward_tiled, attn_forward_tiled


def test_naive_logits_term_exceeds_12gb():
    terms = analytic_attention_terms(AttentionDims(H=8, B=5120, L=384, bytes_per_elem=2), NAIVE, FORWARD)
    assert terms["logits"] == 8 * 5120 * 384 * 384 * 2 == 12_079_595_520
    assert terms["logits"] >= 12 * 10**9


def test_unit_case():
    assert analytic_attention_bytes(AttentionDims(1, 1, 1, 1, 4), NAIVE, FORWARD) == 8
    assert analytic_attention_bytes(AttentionDims(1, 1, 1, 1, 4), NAIVE, BACKWARD) == 12


@pytest.mark.parametrize("bad", [dict(B=0), dict(H=0), dict(L=-1), dict(bytes_per_elem=0)])
def test_zero_extent_rejected(bad):
    kw = dict(H=1, B=1, L=1, D=1, bytes_per_elem=4) | bad
    with pytest.raises(ValidationError):
        AttentionDims(**kw)


def test_tiled_forward_plug_in():
    H, B, L = 2, 3, 50
    dims = AttentionDims(H, B, L, D=8, bytes_per_elem=4)
    assert analytic_attention_bytes(dims, TILED, FORWARD, TileConfig(64, 64, 1)) == 18_944 + 4 * H * B * L
    assert analytic_attention_bytes(dims, TILED, FORWARD, TileConfig(), workers=3) == 3 * 18_944 + 4 * H * B * L
    assert analytic_attention_bytes(dims, TILED, BACKWARD, TileConfig()) == 18_944 + 8 * H * B * L


def test_argument_errors():
    dims = AttentionDims(1, 1, 1)
    with pytest.raises(ValidationError):
        analytic_attention_bytes(dims, TILED, FORWARD)
    with pytest.raises(ValidationError):
        analytic_attention_bytes(dims, "fancy", FORWARD)
    with pytest.raises(ValidationError):
        analytic_attention_bytes(dims, NAIVE, "sideways")


def test_baseline_io():
    assert baseline_io_bytes(AttentionDims(2, 3, 5, 7, 2)) == 4 * 3 * 5 * 2 * 7 * 2


def test_reduction_ratio_increases_with_length():
    tc = TileConfig()
    ratios = [reduction_ratio(AttentionDims(8, 64, L, 8, 2), tc) for L in (16, 64, 128, 256, 384, 1024, 4096)]
    assert all(b > a for a, b in zip(ratios, ratios[1:]))


def test_naive_measured_peak_equals_analytic():
    H, B, L, D = 2, 8, 256, 8
    fmt = NumericFormat.F32
    p = random_problem(AttentionVariant.MsaRowWise, B, L, H, D, fmt, np.random.default_rng(0))
    led = AllocationLedger()
    _, _, P = attn_forward_ref(p, led)
    assert measure_peak(led)[0] == analytic_attention_bytes(AttentionDims(H, B, L, D, 4), NAIVE, FORWARD)
    attn_backward_ref(p, P, Tensor(np.ones(p.Q.shape), fmt), led)
    peak, at_peak = measure_peak(led)
    assert peak == analytic_attention_bytes(AttentionDims(H, B, L, D, 4), NAIVE, BACKWARD)
    assert set(at_peak) == {"logits", "probs", "dlogits"}


@pytest.mark.parametrize("fmt", [NumericFormat.F64, NumericFormat.F32, NumericFormat.BF16E])
@pytest.mark.parametrize("tc", [TileConfig(), TileConfig(16, 8, 2), TileConfig(5, 7, 3)])
def test_tiled_measured_peak_within_analytic(fmt, tc):
    H, B, L, D = 2, 4, 70, 4
    p = random_problem(AttentionVariant.TriangularStartNode, B, L, H, D, fmt, np.random.default_rng(1))
    dims = AttentionDims(H, B, L, D, fmt.itemsize)
    led = AllocationLedger()
    O, st = attn_forward_tiled(p, tc, led)
    assert measure_peak(led)[0] <= analytic_attention_bytes(dims, TILED, FORWARD, tc)
    attn_backward_tiled(p, O, st, Tensor(np.ones(p.Q.shape), fmt), tc, ledger=led)
    assert measure_peak(led)[0] <= analytic_attention_bytes(dims, TILED, BACKWARD, tc)
