"""Vectorized kernels against brute-force references, 20+ seeded cases each, float64."""

import numpy as np
import pytest

from oracles import conv3d_direct, matmul_direct, pearson_direct, pool_direct, resample_direct
from phinet import ops
from phinet.baseline import pearson_cc
from phinet.tensor import Tensor
from phinet.volume import Volume, resample_trilinear

CASES = range(20)
ATOL = 1e-6


def conv_case(i):
    rng = np.random.default_rng(1000 + i)
    k = int(rng.choice([1, 2, 3, 5]))
    stride = int(rng.integers(1, 4))
    pad = int(rng.integers(0, k))
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    dims = tuple(int(v) for v in rng.integers(max(k, 3), 7, 3))
    n = int(rng.integers(1, 3))
    x = rng.uniform(-1, 1, (n, cin) + dims)
    w = rng.uniform(-1, 1, (cout, cin, k, k, k))
    b = rng.uniform(-1, 1, cout) if i % 2 else None
    return x, w, b, stride, pad


@pytest.mark.parametrize("i", CASES)
def test_conv3d_equals_direct(i):
    x, w, b, stride, pad = conv_case(i)
    spec = ops.ConvSpec(x.shape[1], w.shape[0], w.shape[2], stride, pad)
    out = ops.conv3d(Tensor(x), Tensor(w), None if b is None else Tensor(b), spec).data
    np.testing.assert_allclose(out, conv3d_direct(x, w, b, stride, pad), atol=ATOL, rtol=0)


@pytest.mark.parametrize("i", CASES)
def test_conv3d_float32_within_scaled_tolerance(i):
    # float32 accumulation over C*k^3 terms: bound relative to the output scale
    x, w, b, stride, pad = conv_case(i)
    spec = ops.ConvSpec(x.shape[1], w.shape[0], w.shape[2], stride, pad)
    x32, w32 = x.astype(np.float32), w.astype(np.float32)
    b32 = None if b is None else b.astype(np.float32)
    out = ops.conv3d(Tensor(x32), Tensor(w32), None if b32 is None else Tensor(b32), spec).data
    ref = conv3d_direct(x32, w32, b32, stride, pad)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, ref, atol=ATOL * max(1.0, np.abs(ref).max()), rtol=0)


@pytest.mark.parametrize("i", CASES)
@pytest.mark.parametrize("kind", ["max", "avg"])
def test_pooling_equals_direct(i, kind):
    rng = np.random.default_rng(2000 + i)
    window = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 4))
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3))) + tuple(int(v) for v in rng.integers(window, 9, 3))
    x = rng.standard_normal(shape)
    fn = ops.max_pool3d if kind == "max" else ops.avg_pool3d
    np.testing.assert_allclose(fn(Tensor(x), window, stride).data, pool_direct(x, window, stride, kind), atol=ATOL, rtol=0)


@pytest.mark.parametrize("i", CASES)
def test_dense_equals_direct(i):
    rng = np.random.default_rng(3000 + i)
    n, f, m = (int(v) for v in rng.integers(1, 12, 3))
    x, w, b = rng.standard_normal((n, f)), rng.standard_normal((f, m)), rng.standard_normal(m)
    np.testing.assert_allclose(ops.dense(Tensor(x), Tensor(w), Tensor(b)).data, matmul_direct(x, w, b), atol=ATOL, rtol=0)


@pytest.mark.parametrize("i", CASES)
def test_resample_equals_direct(i):
    rng = np.random.default_rng(4000 + i)
    shape = tuple(int(v) for v in rng.integers(3, 9, 3))
    spacing = tuple(float(v) for v in rng.choice([0.5, 0.9, 1.0, 1.3, 2.0], 3))
    target = tuple(float(v) for v in rng.choice([0.7, 1.0, 1.5, 2.0, 3.0], 3))
    data = rng.standard_normal(shape)
    vol = Volume(data, spacing)
    out = resample_trilinear(vol, target)
    ref = resample_direct(data, spacing, target)
    assert out.shape == ref.shape
    assert out.spacing == target
    np.testing.assert_allclose(out.data, ref, atol=ATOL, rtol=0)


@pytest.mark.parametrize("i", CASES)
def test_pearson_equals_direct(i):
    rng = np.random.default_rng(5000 + i)
    shape = tuple(int(v) for v in rng.integers(2, 7, 3))
    a = rng.standard_normal(shape)
    b = 0.5 * a + rng.standard_normal(shape) * (i / 10)
    assert abs(pearson_cc(a, b) - pearson_direct(a, b)) <= 1e-9
