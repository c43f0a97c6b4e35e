import math

import numpy as np
import pytest

from memlab.errors import NumericInputError, ValidationError
from memlab.tensor import (
    NumericFormat,
    Tensor,
    matmul,
    round_array,
    round_to_format,
    round_to_format_flagged,
    seq_sum,
    softmax_lastdim,
)

F64, F32, BF16E, F16E = NumericFormat.F64, NumericFormat.F32, NumericFormat.BF16E, NumericFormat.F16E


def bf16_bits_oracle(x32: np.ndarray) -> np.ndarray:
    """Integer round-to-nearest-even on the top 16 bits of float32 patterns."""
    bits = x32.astype(np.float32).view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) >> 16) << 16
    return rounded.astype(np.uint32).view(np.float32).astype(np.float64)


def test_format_bit_widths():
    assert [(f.mantissa_bits, f.exponent_bits) for f in NumericFormat] == [(52, 11), (23, 8), (7, 8), (10, 5)]
    assert [f.itemsize for f in NumericFormat] == [8, 4, 2, 2]


@pytest.mark.parametrize(
    "x, expected",
    [(1.0, 1.0), (1.0 + 2**-9, 1.0), (3.1415927, 3.140625)],
)
def test_round_bf16_examples(x, expected):
    assert round_to_format(x, BF16E) == expected


def test_round_bf16_matches_bit_oracle():
    rng = np.random.default_rng(1)
    x = (rng.standard_normal(100_000) * np.exp(rng.uniform(-30, 30, 100_000))).astype(np.float32)
    got, _ = round_array(x.astype(np.float64), BF16E)
    np.testing.assert_array_equal(got, bf16_bits_oracle(x))


def test_round_bf16_ties_go_to_even():
    # halfway between 1 and 1 + 2**-7, and between 1 + 2**-7 and 1 + 2**-6
    assert round_to_format(1.0 + 2**-8, BF16E) == 1.0
    assert round_to_format(1.0 + 3 * 2**-8, BF16E) == 1.0 + 2**-6


def test_round_f16_matches_numpy_half():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(100_000) * np.exp(rng.uniform(-20, 11, 100_000))
    x = x[np.abs(x) < 65504]
    got, _ = round_array(x, F16E)
    np.testing.assert_array_equal(got, x.astype(np.float16).astype(np.float64))


def test_f16_subnormals():
    tiny = 2.0**-24  # smallest f16 subnormal
    assert round_to_format(tiny, F16E) == tiny
    assert round_to_format(0.4 * tiny, F16E) == 0.0
    assert round_to_format(1.5 * tiny, F16E) == 2 * tiny  # tie to even


def test_overflow_saturates_and_flags():
    v, flag = round_to_format_flagged(1e6, F16E)
    assert v == math.inf and flag
    v, flag = round_to_format_flagged(-1e39, F32)
    assert v == -math.inf and flag
    v, flag = round_to_format_flagged(65504.0, F16E)
    assert v == 65504.0 and not flag


def test_round_rejects_nan():
    with pytest.raises(NumericInputError):
        round_to_format(float("nan"), BF16E)


@pytest.mark.parametrize("fmt", list(NumericFormat))
def test_round_idempotent(fmt):
    rng = np.random.default_rng(3)
    x = rng.standard_normal(100_000) * np.exp(rng.uniform(-40, 40, 100_000))
    once = fmt.round(x).astype(np.float64)
    twice = fmt.round(once).astype(np.float64)
    np.testing.assert_array_equal(once, twice)


def test_tensor_rounds_on_construction():
    t = Tensor(np.array([3.1415927]), BF16E)
    assert t.tolist() == [3.140625]
    with pytest.raises(ValueError):
        t.data[0] = 1.0


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert matmul(eye, b).tolist() == [[3, 4], [5, 6]]
    assert matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]])).tolist() == [[19, 22], [43, 50]]
    z = matmul(Tensor.zeros((3, 2)), Tensor(np.arange(8.0).reshape(2, 4)))
    assert z.tolist() == [[0.0] * 4] * 3


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValidationError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor.zeros((2, 3)), Tensor.zeros((2, 3)))


def test_matmul_f64_equals_triple_loop():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            acc = 0.0
            for t in range(7):
                acc += a[i, t] * b[t, j]
            ref[i, j] = acc
    np.testing.assert_array_equal(matmul(Tensor(a), Tensor(b)).data, ref)


def test_matmul_bf16_rounds_every_partial():
    # 256 + 1 is not representable in bf16, so each partial sum stays 256
    a = Tensor(np.array([[256.0] + [1.0] * 8]), BF16E)
    b = Tensor(np.ones((9, 1)), BF16E)
    assert matmul(a, b).tolist() == [[256.0]]


def test_softmax_examples():
    np.testing.assert_allclose(softmax_lastdim(Tensor([0.0, 0.0, 0.0, 0.0])).data, [0.25] * 4, rtol=0, atol=1e-15)
    np.testing.assert_allclose(softmax_lastdim(Tensor([0.0, math.log(2)])).data, [1 / 3, 2 / 3], rtol=1e-15)
    base = softmax_lastdim(Tensor([0.0, 0.7, -1.3])).data
    for c in (-50.0, 3.0, 700.0):
        np.testing.assert_allclose(softmax_lastdim(Tensor([c, c + 0.7, c - 1.3])).data, base, rtol=1e-12)


@pytest.mark.parametrize("fmt, tol", [(F64, 1e-12), (F32, 1e-6)])
def test_softmax_rows_sum_to_one(fmt, tol):
    x = np.random.default_rng(5).standard_normal((50, 33)) * 10
    y = softmax_lastdim(Tensor(x, fmt)).data.astype(np.float64)
    assert np.abs(y.sum(-1) - 1).max() <= tol


def test_softmax_rejects_nan():
    with pytest.raises(NumericInputError):
        softmax_lastdim(Tensor([0.0, float("nan")]))


def test_seq_sum_is_sequential():
    x = np.array([1.0, 1e16, -1e16])
    # left to right: (1 + 1e16) - 1e16 == 0 in F64
    assert seq_sum(x, 0, F64) == 0.0
