"""Per-device memory planner for long-sequence transformer training.

Byte terms per device, for sequence length ``s``:

* model state: ``params * (2 + 2 + 12)`` bytes (fp16 weights, fp16 grads,
  fp32 master weights + Adam moments) split over ``tp * pp``; ZeRO stages
  further split optimizer / gradients / weights over ``dp``, and offload
  moves the optimizer part to host memory.
* activations: ``act_multiplier * s * n_layer * hidden * batch * score_bytes``
  aggregate, split over ``tp * pp`` with sequence parallelism. Without it
  only the tensor-parallel regions (``1 - NON_TP_FRACTION`` of the total) are
  split over ``tp``; the rest is replicated across the TP group.
* attention map: ``(n_head / tp) * s^2 * score_bytes`` unless flash attention
  avoids materializing it.
* attention mask: ``s^2`` elements, needed when flash attention is off or a
  custom mask is requested. Generating it on the GPU transiently doubles it;
  above the hardware threshold it is built in host memory and only the final
  tensor is copied over.
* learned position embedding: weights, grads and optimizer state,
  ``3 * s * hidden * 4`` bytes, or ``[s/p, hidden]`` rows of it per device
  when partitioned over the sequence-parallel group.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

from memlab.errors import InvariantViolation, ValidationError

GB = 10**9
GIB = 2**30

# share of per-layer activations outside the tensor-parallel GEMM regions
# (layer norms, dropout, residuals); replicated over the TP group without SP
NON_TP_FRACTION = 0.5

MODEL_STATE_BYTES_PER_PARAM = (2, 2, 12)  # weights, gradients, optimizer
SEARCH_CAP = 2**24


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class ModelConfig:
    params: int
    n_layer: int
    hidden: int
    n_head: int
    act_multiplier: float = 1.0
    position: str = "learned"  # learned | rope | alibi
    name: str = "custom"

    def __post_init__(self):
        for f in ("params", "n_layer", "hidden", "n_head"):
            v = getattr(self, f)
            if int(v) != v or v < 1:
                raise ValidationError(f"model.{f} must be a positive integer, got {v!r}")
            object.__setattr__(self, f, int(v))
        if not self.act_multiplier > 0:
            raise ValidationError(f"model.act_multiplier must be > 0, got {self.act_multiplier!r}")
        if self.position not in ("learned", "rope", "alibi"):
            raise ValidationError(f"model.position must be learned, rope or alibi, got {self.position!r}")


@dataclass(frozen=True)
class ParallelConfig:
    tp: int = 1
    pp: int = 1
    dp: int = 1
    sp_enabled: bool = False
    posemb_partitioned: bool = False
    flash_attention: bool = False
    zero_stage: int = 0
    offload: bool = False
    batch: int = 1
    mask_cpu_staging: bool = False
    custom_mask: bool = False

    def __post_init__(self):
        for f in ("tp", "pp", "dp", "batch"):
            v = getattr(self, f)
            if int(v) != v or v < 1:
                raise ValidationError(f"parallel.{f} must be a positive integer, got {v!r}")
        if self.zero_stage not in (0, 1, 2, 3):
            raise ValidationError(f"parallel.zero_stage must be 0-3, got {self.zero_stage!r}")
        if self.posemb_partitioned and not self.sp_enabled:
            raise ValidationError("parallel.posemb_partitioned requires parallel.sp_enabled")

    @property
    def devices(self) -> int:
        return self.tp * self.pp * self.dp


@dataclass(frozen=True)
class HardwareConfig:
    gpu_mem_bytes: int = 40 * GIB
    num_gpus: int = 1
    mask_threshold: int = 16384
    reserve_frac: float = 0.10

    def __post_init__(self):
        if not self.gpu_mem_bytes > 0:
            raise ValidationError(f"hardware.gpu_mem_bytes must be > 0, got {self.gpu_mem_bytes!r}")
        if int(self.num_gpus) != self.num_gpus or self.num_gpus < 1:
            raise ValidationError(f"hardware.num_gpus must be a positive integer, got {self.num_gpus!r}")
        if int(self.mask_threshold) != self.mask_threshold or self.mask_threshold < 1:
            raise ValidationError(f"hardware.mask_threshold must be a positive integer, got {self.mask_threshold!r}")
        if not 0 <= self.reserve_frac < 1:
            raise ValidationError(f"hardware.reserve_frac must be in [0, 1), got {self.reserve_frac!r}")

    @property
    def usable_bytes(self) -> int:
        return math.floor(self.gpu_mem_bytes * (1 - self.reserve_frac))


class MaskPlacement(enum.Enum):
    GpuDirect = "GpuDirect"
    CpuStaged = "CpuStaged"


@dataclass(frozen=True)
class MaskPlan:
    placement: MaskPlacement
    device_bytes: int
    host_bytes: int


def mask_plan(s: int, hw: HardwareConfig, mask_bytes_per_elem: int = 4, staging: bool = True) -> MaskPlan:
    """Where the ``[s, s]`` mask is built and what it costs on each side.

    GPU generation needs twice the final tensor; CPU staging keeps only the
    final tensor on the device. ``staging=False`` always generates on the GPU.
    """
    if int(s) != s or s < 1:
        raise ValidationError(f"sequence length must be a positive integer, got {s!r}")
    final = int(s) * int(s) * mask_bytes_per_elem
    if staging and s > hw.mask_threshold:
        return MaskPlan(MaskPlacement.CpuStaged, final, final)
    return MaskPlan(MaskPlacement.GpuDirect, 2 * final, 0)


def posemb_plan(s: int, d: int, bytes_per_elem: int = 4, copies: int = 3, pc: ParallelConfig | None = None) -> int:
    """Per-device bytes of a learned ``[s, d]`` position table (with grads/optimizer copies)."""
    if int(s) != s or s < 1 or int(d) != d or d < 1:
        raise ValidationError(f"posemb needs s, d >= 1, got s={s!r}, d={d!r}")
    if pc is not None and pc.posemb_partitioned:
        if not pc.sp_enabled:
            raise ValidationError("posemb partitioning requires sequence parallelism")
        rows = _ceil_div(int(s), pc.tp)
    else:
        rows = int(s)
    return copies * rows * int(d) * bytes_per_elem


@dataclass(frozen=True)
class MemoryBreakdown:
    model_state_bytes: int
    activation_bytes: int
    mask_device_bytes: int
    mask_host_bytes: int
    posemb_bytes: int
    attn_map_bytes: int
    offload_host_bytes: int
    usable_bytes: int
    fits: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "fits", self.device_total <= self.usable_bytes)

    @property
    def device_terms(self) -> dict[str, int]:
        return {
            "model_state": self.model_state_bytes,
            "activation": self.activation_bytes,
            "mask": self.mask_device_bytes,
            "posemb": self.posemb_bytes,
            "attn_map": self.attn_map_bytes,
        }

    @property
    def device_total(self) -> int:
        return sum(self.device_terms.values())

    @property
    def host_total(self) -> int:
        return self.mask_host_bytes + self.offload_host_bytes

    @property
    def limiting_term(self) -> str:
        terms = self.device_terms
        return max(terms, key=lambda k: terms[k])  # first label wins ties


def aggregate_activation_bytes(mc: ModelConfig, s: int, batch: int = 1, score_bytes: int = 2) -> float:
    """Activation bytes for the whole model before any partitioning."""
    return mc.act_multiplier * s * mc.n_layer * mc.hidden * batch * score_bytes


def calibrate_act_multiplier(mc: ModelConfig, s: int, aggregate_bytes: float, batch: int = 1, score_bytes: int = 2) -> ModelConfig:
    """Copy of ``mc`` whose activation multiplier reproduces a measured aggregate at ``s``."""
    mult = aggregate_bytes / (s * mc.n_layer * mc.hidden * batch * score_bytes)
    return replace(mc, act_multiplier=mult)


def model_state_split(mc: ModelConfig, pc: ParallelConfig) -> tuple[int, int]:
    """(device, host) bytes of weights + gradients + optimizer state."""
    shard = pc.tp * pc.pp
    w, g, o = (mc.params * n for n in MODEL_STATE_BYTES_PER_PARAM)
    w = _ceil_div(w, shard * (pc.dp if pc.zero_stage >= 3 else 1))
    g = _ceil_div(g, shard * (pc.dp if pc.zero_stage >= 2 else 1))
    o = _ceil_div(o, shard * (pc.dp if pc.zero_stage >= 1 else 1))
    if pc.offload:
        return w + g, o
    return w + g + o, 0


def activation_bytes(mc: ModelConfig, pc: ParallelConfig, s: int, score_bytes: int = 2) -> int:
    total = aggregate_activation_bytes(mc, s, pc.batch, score_bytes) / pc.pp
    if pc.sp_enabled:
        per_dev = total / pc.tp
    else:
        per_dev = total * ((1 - NON_TP_FRACTION) / pc.tp + NON_TP_FRACTION)
    return math.ceil(per_dev)


def needs_mask(pc: ParallelConfig) -> bool:
    return pc.custom_mask or not pc.flash_attention


def memory_breakdown(
    mc: ModelConfig,
    pc: ParallelConfig,
    hw: HardwareConfig,
    s: int,
    score_bytes: int = 2,
    mask_bytes_per_elem: int = 4,
    posemb_bytes_per_elem: int = 4,
) -> MemoryBreakdown:
    if int(s) != s or s < 1:
        raise ValidationError(f"sequence length must be a positive integer, got {s!r}")
    if pc.devices != hw.num_gpus:
        raise ValidationError(
            f"tp*pp*dp = {pc.devices} does not match hardware.num_gpus = {hw.num_gpus}"
        )
    s = int(s)
    state_dev, state_host = model_state_split(mc, pc)
    if needs_mask(pc):
        mp = mask_plan(s, hw, mask_bytes_per_elem, staging=pc.mask_cpu_staging)
        mask_dev, mask_host = mp.device_bytes, mp.host_bytes
    else:
        mask_dev = mask_host = 0
    posemb = posemb_plan(s, mc.hidden, posemb_bytes_per_elem, 3, pc) if mc.position == "learned" else 0
    attn = 0 if pc.flash_attention else _ceil_div(mc.n_head * s * s * score_bytes, pc.tp)
    return MemoryBreakdown(
        model_state_bytes=state_dev,
        activation_bytes=activation_bytes(mc, pc, s, score_bytes),
        mask_device_bytes=mask_dev,
        mask_host_bytes=mask_host,
        posemb_bytes=posemb,
        attn_map_bytes=attn,
        offload_host_bytes=state_host,
        usable_bytes=hw.usable_bytes,
    )


@dataclass(frozen=True)
class PlanResult:
    max_seq: int
    breakdown_at_max: MemoryBreakdown | None
    limiting_term: str


def _regimes(pc: ParallelConfig, hw: HardwareConfig, cap: int) -> list[tuple[int, int]]:
    # Mask device bytes drop when placement switches to CPU staging, so the
    # fits predicate is only monotone within each placement regime.
    if needs_mask(pc) and pc.mask_cpu_staging and hw.mask_threshold < cap:
        return [(hw.mask_threshold + 1, cap), (1, hw.mask_threshold)]
    return [(1, cap)]


def max_seq(mc: ModelConfig, pc: ParallelConfig, hw: HardwareConfig, cap: int = SEARCH_CAP, **kw) -> PlanResult:
    """Largest ``s`` in ``[1, cap]`` whose breakdown fits, by binary search per placement regime."""

    def fits(s):
        return memory_breakdown(mc, pc, hw, s, **kw).fits

    best = 0
    for lo, hi in _regimes(pc, hw, cap):
        if not fits(lo):
            continue
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if fits(mid):
                lo = mid
            else:
                hi = mid - 1
        best = lo
        break

    if best == 0:
        return PlanResult(0, None, memory_breakdown(mc, pc, hw, 1, **kw).limiting_term)
    at_max = memory_breakdown(mc, pc, hw, best, **kw)
    if not at_max.fits:
        raise InvariantViolation(f"search returned s={best} which does not fit")
    if best < cap:
        beyond = memory_breakdown(mc, pc, hw, best + 1, **kw)
        if beyond.fits:
            raise InvariantViolation(f"s={best + 1} fits but search stopped at {best}")
        return PlanResult(best, at_max, beyond.limiting_term)
    return PlanResult(best, at_max, at_max.limiting_term)


# Shipped profiles. GenSLM layer counts and widths are placeholders chosen so
# that 12 * n_layer * hidden^2 lands near the nominal parameter count; the
# activation multiplier is calibrated so a 25B model at s=100K, batch 1 holds
# 480 GB of activations in aggregate.
_ACT_MULT = 480 * GB / (100_000 * 64 * 5760 * 1 * 2)

MODEL_PROFILES = {
    "genslm-25b": ModelConfig(25_000_000_000, 64, 5760, 48, _ACT_MULT, "learned", "genslm-25b"),
    "genslm-33b": ModelConfig(33_000_000_000, 64, 6656, 52, _ACT_MULT, "learned", "genslm-33b"),
}

HARDWARE_PROFILES = {
    "a100-40g": HardwareConfig(gpu_mem_bytes=40 * GIB, num_gpus=1, mask_threshold=16384, reserve_frac=0.10),
    "a100-80g": HardwareConfig(gpu_mem_bytes=80 * GIB, num_gpus=1, mask_threshold=32768, reserve_frac=0.10),
}

# feature sets of the compared training stacks
FRAMEWORK_FEATURES = {
    "megatron-deepspeed-old": dict(),
    "megatron-lm": dict(sp_enabled=True, flash_attention=True),
    "megatron-deepspeed-new": dict(
        sp_enabled=True,
        posemb_partitioned=True,
        flash_attention=True,
        mask_cpu_staging=True,
        zero_stage=1,
    ),
}

ALL_OFF = dict()
ALL_ON = dict(
    sp_enabled=True,
    posemb_partitioned=True,
    flash_attention=True,
    mask_cpu_staging=True,
    zero_stage=3,
    offload=True,
)


def default_layout(num_gpus: int, max_tp: int = 8, max_pp: int = 8) -> tuple[int, int, int]:
    """(tp, pp, dp): tensor parallel inside a node first, then pipeline, then data parallel."""
    if num_gpus < 1:
        raise ValidationError(f"num_gpus must be >= 1, got {num_gpus}")
    tp = math.gcd(num_gpus, max_tp)
    pp = math.gcd(num_gpus // tp, max_pp)
    return tp, pp, num_gpus // (tp * pp)


def framework_parallel(framework: str, num_gpus: int, batch: int = 1) -> ParallelConfig:
    try:
        features = FRAMEWORK_FEATURES[framework]
    except KeyError:
        raise ValidationError(
            f"unknown framework profile {framework!r}; expected one of {sorted(FRAMEWORK_FEATURES)}"
        ) from None
    tp, pp, dp = default_layout(num_gpus)
    return ParallelConfig(tp=tp, pp=pp, dp=dp, batch=batch, **features)


def hardware_for(profile: str | HardwareConfig, num_gpus: int) -> HardwareConfig:
    if isinstance(profile, str):
        try:
            profile = HARDWARE_PROFILES[profile]
        except KeyError:
            raise ValidationError(
                f"unknown hardware profile {profile!r}; expected one of {sorted(HARDWARE_PROFILES)}"
            ) from None
    return replace(profile, num_gpus=num_gpus)


def model_profile(name: str) -> ModelConfig:
    try:
        return MODEL_PROFILES[name]
    except KeyError:
        raise ValidationError(f"unknown model profile {name!r}; expected one of {sorted(MODEL_PROFILES)}") from None
