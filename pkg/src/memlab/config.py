"""Strict loading of run configuration files.

Files are YAML (plain JSON also parses). Every mapping is checked against a
fixed key set and unknown keys are rejected with their dotted path, e.g.
``cases[2].tile_z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import yaml

from memlab.attention import AttentionVariant, TileConfig
from memlab.bench import PRECISION_TILES, AttnCase
from memlab.errors import ValidationError
from memlab.seqplan import (
    FRAMEWORK_FEATURES,
    HardwareConfig,
    ModelConfig,
    ParallelConfig,
    hardware_for,
    model_profile,
)
from memlab.tensor import NumericFormat

ALL_VARIANTS = list(AttentionVariant)


def load_yaml(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path!r}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ValidationError(f"config {path!r} is not valid YAML/JSON: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(f"config root must be a mapping, got {type(data).__name__}")
    return data


def _where(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def check_keys(d, allowed, path: str = "") -> dict:
    if not isinstance(d, dict):
        raise ValidationError(f"{path or 'config'} must be a mapping, got {type(d).__name__}")
    for k in d:
        if k not in allowed:
            raise ValidationError(f"unknown key {_where(path, str(k))!r}; allowed: {sorted(allowed)}")
    return d


def _int(v, path, minimum=1):
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ValidationError(f"{path} must be an integer >= {minimum}, got {v!r}")
    return v


def _float(v, path, positive=True):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (positive and not v > 0):
        raise ValidationError(f"{path} must be a positive number, got {v!r}")
    return float(v)


def _bool(v, path):
    if not isinstance(v, bool):
        raise ValidationError(f"{path} must be true or false, got {v!r}")
    return v


def _str(v, path):
    if not isinstance(v, str):
        raise ValidationError(f"{path} must be a string, got {v!r}")
    return v


def _list(v, path):
    if not isinstance(v, list) or not v:
        raise ValidationError(f"{path} must be a non-empty list")
    return v


def _format(v, path):
    try:
        return NumericFormat.parse(_str(v, path))
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _variant(v, path):
    try:
        return AttentionVariant.parse(_str(v, path))
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _tiles(d, path, default: TileConfig) -> TileConfig:
    return TileConfig(
        _int(d.get("tile_q", default.tile_q), _where(path, "tile_q")),
        _int(d.get("tile_k", default.tile_k), _where(path, "tile_k")),
        _int(d.get("tile_b", default.tile_b), _where(path, "tile_b")),
    )


CASE_KEYS = {"variant", "B", "L", "H", "D", "tile_q", "tile_k", "tile_b"}


def _cases(raw, path, default_dims, default_tiles) -> list[AttnCase]:
    if raw is None:
        return [AttnCase(v, *default_dims, default_tiles) for v in ALL_VARIANTS]
    out = []
    for i, c in enumerate(_list(raw, path)):
        cp = f"{path}[{i}]"
        check_keys(c, CASE_KEYS, cp)
        if "variant" not in c:
            raise ValidationError(f"missing key {cp}.variant")
        dims = [_int(c.get(k, dv), f"{cp}.{k}") for k, dv in zip("BLHD", default_dims)]
        out.append(AttnCase(_variant(c["variant"], f"{cp}.variant"), *dims, _tiles(c, cp, default_tiles)))
    return out


@dataclass
class AttnBenchConfig:
    cases: list[AttnCase]
    numeric_format: NumericFormat = NumericFormat.F32
    tolerance: float | None = None
    workers: int = 1
    ledger_dir: str | None = None


def attn_bench_config(d: dict) -> AttnBenchConfig:
    check_keys(d, {"cases", "numeric_format", "tolerance", "workers", "ledger_dir"})
    return AttnBenchConfig(
        cases=_cases(d.get("cases"), "cases", (4, 128, 2, 8), TileConfig()),
        numeric_format=_format(d.get("numeric_format", "F32"), "numeric_format"),
        tolerance=_float(d["tolerance"], "tolerance") if "tolerance" in d else None,
        workers=_int(d.get("workers", 1), "workers"),
        ledger_dir=_str(d["ledger_dir"], "ledger_dir") if "ledger_dir" in d else None,
    )


@dataclass
class GradcheckConfig:
    cases: list[AttnCase]
    path: str = "tiled"
    step: float = 1e-5
    tolerance: float = 1e-6


GRADCHECK_TILES = TileConfig(8, 6, 1)


def gradcheck_config(d: dict) -> GradcheckConfig:
    check_keys(d, {"cases", "path", "step", "tolerance"})
    path = _str(d.get("path", "tiled"), "path")
    if path not in ("tiled", "reference"):
        raise ValidationError(f"path must be 'tiled' or 'reference', got {path!r}")
    return GradcheckConfig(
        cases=_cases(d.get("cases"), "cases", (2, 16, 2, 4), GRADCHECK_TILES),
        path=path,
        step=_float(d.get("step", 1e-5), "step"),
        tolerance=_float(d.get("tolerance", 1e-6), "tolerance"),
    )


@dataclass
class PrecisionConfig:
    batches: list[int] = field(default_factory=lambda: [4096])
    magnitude: float = 1e-3
    numeric_format: NumericFormat = NumericFormat.BF16E
    tolerance: float = 1e-4
    tiles: TileConfig = PRECISION_TILES


def precision_config(d: dict) -> PrecisionConfig:
    check_keys(d, {"batches", "magnitude", "numeric_format", "tolerance", "tile_q", "tile_k", "tile_b"})
    batches = d.get("batches", [4096])
    return PrecisionConfig(
        batches=[_int(b, f"batches[{i}]") for i, b in enumerate(_list(batches, "batches"))],
        magnitude=_float(d.get("magnitude", 1e-3), "magnitude"),
        numeric_format=_format(d.get("numeric_format", "BF16E"), "numeric_format"),
        tolerance=_float(d.get("tolerance", 1e-4), "tolerance"),
        tiles=_tiles(d, "", PRECISION_TILES),
    )


def _typed_fields(cls, d, path, skip=()):
    """Build ``cls`` from a mapping of its dataclass fields with strict typing."""
    names = {f.name: f for f in fields(cls) if f.init and f.name not in skip}
    check_keys(d, set(names), path)
    kw = {}
    for k, v in d.items():
        default = names[k].default
        kp = _where(path, k)
        if isinstance(default, bool):
            kw[k] = _bool(v, kp)
        elif isinstance(default, int) or k in ("params", "n_layer", "hidden", "n_head"):
            kw[k] = _int(v, kp, minimum=0)
        elif isinstance(default, float) or k == "act_multiplier":
            kw[k] = _float(v, kp, positive=False)
        else:
            kw[k] = _str(v, kp)
    return kw


def _model(v) -> ModelConfig:
    if isinstance(v, str):
        return model_profile(v)
    kw = _typed_fields(ModelConfig, v, "model")
    missing = {"params", "n_layer", "hidden", "n_head"} - set(kw)
    if missing:
        raise ValidationError(f"missing key(s) {sorted('model.' + m for m in missing)}")
    return ModelConfig(**kw)


def _hardware(v, num_gpus: int) -> HardwareConfig:
    if isinstance(v, str):
        return hardware_for(v, num_gpus)
    kw = _typed_fields(HardwareConfig, v, "hardware", skip=("num_gpus",))
    return HardwareConfig(num_gpus=num_gpus, **kw)


def _framework(v, path):
    name = _str(v, path)
    if name not in FRAMEWORK_FEATURES:
        raise ValidationError(f"{path}: unknown framework profile {name!r}; expected one of {sorted(FRAMEWORK_FEATURES)}")
    return name


@dataclass
class PlanConfig:
    """Planner inputs. Exactly one of ``framework`` and ``parallel`` is set."""

    model: ModelConfig
    hardware: HardwareConfig
    framework: str | None = None
    parallel: ParallelConfig | None = None
    label: str = ""
    batch: int = 1
    seq_lens: list[int] = field(default_factory=list)


PLAN_KEYS = {"model", "hardware", "num_gpus", "framework", "parallel", "label", "batch"}


def plan_config(d: dict, breakdown: bool = False) -> PlanConfig:
    allowed = PLAN_KEYS | ({"seq_lens"} if breakdown else set())
    check_keys(d, allowed)
    num_gpus = _int(d.get("num_gpus", 64), "num_gpus")
    batch = _int(d.get("batch", 1), "batch")
    mc = _model(d.get("model", "genslm-25b"))
    hw = _hardware(d.get("hardware", "a100-40g"), num_gpus)
    if "parallel" in d and "framework" in d:
        raise ValidationError("set either 'framework' or 'parallel', not both")
    framework = parallel = None
    if "parallel" in d:
        kw = _typed_fields(ParallelConfig, d["parallel"], "parallel")
        kw.setdefault("batch", batch)
        parallel = ParallelConfig(**kw)
        label = _str(d.get("label", "custom"), "label")
    else:
        framework = _framework(d.get("framework", "megatron-deepspeed-new"), "framework")
        label = _str(d.get("label", framework), "label")
    seq_lens = []
    if breakdown:
        raw = d.get("seq_lens", [16384, 65536, 131072])
        seq_lens = [_int(s, f"seq_lens[{i}]") for i, s in enumerate(_list(raw, "seq_lens"))]
    return PlanConfig(mc, hw, framework, parallel, label, batch, seq_lens)


@dataclass
class SweepConfig:
    model: ModelConfig
    hardware: str | dict
    num_gpus: list[int]
    frameworks: list[str]
    batch: int = 1


def sweep_config(d: dict) -> SweepConfig:
    check_keys(d, {"model", "hardware", "num_gpus", "frameworks", "batch"})
    gpus = d.get("num_gpus", [8, 16, 32, 64, 128, 256, 512])
    fws = d.get("frameworks", sorted(FRAMEWORK_FEATURES))
    hw = d.get("hardware", "a100-40g")
    _hardware(hw, 1)  # validate once up front
    return SweepConfig(
        model=_model(d.get("model", "genslm-25b")),
        hardware=hw,
        num_gpus=[_int(g, f"num_gpus[{i}]") for i, g in enumerate(_list(gpus, "num_gpus"))],
        frameworks=[_framework(f, f"frameworks[{i}]") for i, f in enumerate(_list(fws, "frameworks"))],
        batch=_int(d.get("batch", 1), "batch"),
    )


def sweep_hardware(cfg: SweepConfig, num_gpus: int) -> HardwareConfig:
    return _hardware(cfg.hardware, num_gpus)
