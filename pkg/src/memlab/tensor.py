"""Dense tensors with emulated storage precision.

Every tensor carries a :class:`NumericFormat`. F64 and F32 map onto the
native numpy dtypes. BF16E and F16E are emulated: values are held in float64
and re-rounded (round-to-nearest, ties-to-even) after every primitive
arithmetic result, so the stored numbers are always exactly representable in
the emulated format.

Reductions in the public operations (:func:`matmul`, :func:`softmax_lastdim`)
run in ascending index order, one element at a time, which makes them
bit-reproducible and lets the low-precision emulation round every partial sum.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from memlab.errors import NumericInputError, ValidationError


class NumericFormat(enum.Enum):
    F64 = ("F64", 52, 11)
    F32 = ("F32", 23, 8)
    BF16E = ("BF16E", 7, 8)
    F16E = ("F16E", 10, 5)

    def __init__(self, tag, mantissa_bits, exponent_bits):
        self.tag = tag
        self.mantissa_bits = mantissa_bits
        self.exponent_bits = exponent_bits

    @property
    def emulated(self) -> bool:
        return self in (NumericFormat.BF16E, NumericFormat.F16E)

    @property
    def itemsize(self) -> int:
        """Bytes per element of the modeled format (not of the host storage)."""
        return (1 + self.mantissa_bits + self.exponent_bits) // 8

    @property
    def storage_dtype(self):
        return np.float32 if self is NumericFormat.F32 else np.float64

    @property
    def emax(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1

    @property
    def emin(self) -> int:
        return 1 - self.emax

    @property
    def max_finite(self) -> float:
        return math.ldexp(2.0 - 2.0 ** -self.mantissa_bits, self.emax)

    @property
    def accum(self) -> "NumericFormat":
        """F32-or-wider format used when accumulating values of this format."""
        return NumericFormat.F64 if self is NumericFormat.F64 else NumericFormat.F32

    @classmethod
    def parse(cls, name: str) -> "NumericFormat":
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ValidationError(
                f"unknown numeric format {name!r}; expected one of {[f.name for f in cls]}"
            ) from None

    def round(self, x):
        """Round an array (or scalar) to this format.

        Native formats only cast to their storage dtype. Emulated formats go
        through :func:`round_array`; overflow becomes signed infinity.
        """
        if not self.emulated:
            return np.asarray(x, dtype=self.storage_dtype)
        return round_array(np.asarray(x, dtype=np.float64), self)[0]

    def round_(self, x: np.ndarray) -> np.ndarray:
        """In-place variant of :meth:`round` for arrays already in storage dtype."""
        if self.emulated:
            x[...] = round_array(x, self)[0]
        return x


def round_array(x: np.ndarray, fmt: NumericFormat) -> tuple[np.ndarray, np.ndarray]:
    """Round float64 values to ``fmt`` with ties-to-even.

    Returns ``(rounded, overflowed)`` where ``overflowed`` marks finite inputs
    that rounded past the largest finite value and were saturated to +-inf.
    Subnormals of the target format are produced by clamping the quantum at
    the minimum exponent.
    """
    x = np.asarray(x, dtype=np.float64)
    _, e = np.frexp(x)  # x = m * 2**e with 0.5 <= |m| < 1
    lead = np.maximum(e - 1, fmt.emin)
    quantum = np.ldexp(1.0, lead - fmt.mantissa_bits)
    with np.errstate(invalid="ignore"):
        r = np.rint(x / quantum) * quantum
        overflowed = np.isfinite(x) & (np.abs(r) > fmt.max_finite)
    if overflowed.any():
        r = np.where(overflowed, np.copysign(np.inf, x), r)
    return r, overflowed


def round_to_format_flagged(x: float, fmt: NumericFormat) -> tuple[float, bool]:
    """Scalar rounding that also reports whether the value overflowed to infinity."""
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        raise NumericInputError(f"round_to_format needs a finite value, got {x}")
    if fmt is NumericFormat.F64:
        return x, False
    if fmt is NumericFormat.F32:
        with np.errstate(over="ignore"):
            r = float(np.float32(x))
        return r, math.isinf(r)
    r, flag = round_array(np.array(x), fmt)
    return float(r), bool(flag)


def round_to_format(x: float, fmt: NumericFormat) -> float:
    """Nearest value representable in ``fmt`` (ties to even).

    Overflow saturates to a signed infinity; use
    :func:`round_to_format_flagged` to observe the overflow flag.
    """
    return round_to_format_flagged(x, fmt)[0]


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable dense row-major array tagged with its emulated format."""

    data: np.ndarray
    fmt: NumericFormat = NumericFormat.F64

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != self.fmt.storage_dtype:
            arr = arr.astype(self.fmt.storage_dtype)
        if self.fmt.emulated:
            arr = self.fmt.round(arr)
        if arr.ndim == 0:
            raise ValidationError("tensors need rank >= 1")
        if any(n < 1 for n in arr.shape):
            raise ValidationError(f"tensor extents must be positive, got {arr.shape}")
        view = arr.view()
        view.flags.writeable = False
        object.__setattr__(self, "data", view)

    @classmethod
    def _wrap(cls, arr: np.ndarray, fmt: NumericFormat) -> "Tensor":
        # trusted constructor: arr already holds fmt-rounded values in storage dtype
        t = object.__new__(cls)
        view = arr.view()
        view.flags.writeable = False
        object.__setattr__(t, "data", view)
        object.__setattr__(t, "fmt", fmt)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def nbytes(self) -> int:
        return int(self.data.size) * self.fmt.itemsize

    def tolist(self):
        return self.data.tolist()

    def numpy(self) -> np.ndarray:
        """Writable float64 copy of the values."""
        return np.array(self.data, dtype=np.float64)

    def astype(self, fmt: NumericFormat) -> "Tensor":
        return Tensor(fmt.round(self.data), fmt)

    @classmethod
    def zeros(cls, shape, fmt: NumericFormat = NumericFormat.F64) -> "Tensor":
        return cls(np.zeros(shape, dtype=fmt.storage_dtype), fmt)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, fmt={self.fmt.name})"


def _check_nan(x: np.ndarray, what: str):
    if np.isnan(x).any():
        raise NumericInputError(f"NaN in {what}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 product with ascending-index accumulation.

    ``C[i, j] = sum_t A[i, t] * B[t, j]``; each product and each partial sum
    is rounded to the output format (that of ``a``).
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValidationError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.fmt is not b.fmt:
        raise ValidationError(f"matmul format mismatch: {a.fmt.name} x {b.fmt.name}")
    return Tensor(seq_matmul(a.data, b.data, a.fmt), a.fmt)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-shifted softmax over the last axis."""
    _check_nan(x.data, "softmax input")
    fmt = x.fmt
    v = np.array(x.data)
    m = v.max(axis=-1, keepdims=True)
    e = fmt.round(np.exp(fmt.round(v - m)))
    total = seq_sum(e, -1, fmt)[..., None]
    return Tensor(fmt.round(e / total), fmt)


# Array-level kernels. These are shared by the attention modules and take raw
# numpy arrays already in ``fmt.storage_dtype``.


def seq_matmul(a: np.ndarray, b: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    """Batched ``a @ b`` summing over the inner axis strictly in ascending order."""
    k = a.shape[-1]
    out_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    acc = np.zeros(out_shape, dtype=fmt.storage_dtype)
    for t in range(k):
        prod = fmt.round(a[..., :, t, None] * b[..., None, t, :])
        acc = fmt.round(acc + prod)
    return acc


def seq_sum(x: np.ndarray, axis: int, fmt: NumericFormat) -> np.ndarray:
    """Sum along ``axis`` in ascending order, rounding every partial sum."""
    x = np.moveaxis(np.asarray(x), axis, 0)
    acc = np.zeros(x.shape[1:], dtype=fmt.storage_dtype)
    for t in range(x.shape[0]):
        acc = fmt.round(acc + x[t])
    return acc


def mm(a: np.ndarray, b: np.ndarray, fmt: NumericFormat, out=None) -> np.ndarray:
    """Hot-loop matmul: BLAS for native formats, rounded sequential for emulated ones."""
    if fmt.emulated:
        r = seq_matmul(a, b, fmt)
        if out is None:
            return r
        out[...] = r
        return out
    return np.matmul(a, b, out=out)


def rowsum(x: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    """Last-axis sum; numpy's fixed order for native formats, sequential if emulated."""
    if fmt.emulated:
        return seq_sum(x, -1, fmt)
    return x.sum(axis=-1)
