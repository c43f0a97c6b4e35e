"""Tiled Evoformer-style attention with exact gradients, allocation accounting,
and a per-device memory planner for long-sequence training."""

from memlab.attention import (
    AccumMode,
    AccumPolicy,
    AttentionGrads,
    AttentionProblem,
    AttentionVariant,
    RowStats,
    TileConfig,
    layout_from_msa,
)
from memlab.ledger import AllocationLedger, measure_peak
from memlab.memory_model import AttentionDims, analytic_attention_bytes
from memlab.reference import attn_backward_ref, attn_forward_ref
from memlab.seqplan import HardwareConfig, ModelConfig, ParallelConfig, mask_plan, max_seq, memory_breakdown, posemb_plan
from memlab.tensor import NumericFormat, Tensor, matmul, round_to_format, softmax_lastdim
from memlab.tiled import attn_backward_tiled, attn_forward_tiled

__version__ = "0.1.0"
