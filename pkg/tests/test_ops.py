"""Tensor kernels vs the straight-line oracles in _reference."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recistseg.errors import ShapeError
from recistseg.ops import (
    PadSpec,
    conv3d,
    conv3d_direct,
    instance_norm,
    l2_normalize,
    max_pool_downscale,
    pad_to_multiple,
    trilinear_resize,
)
from tests._reference import ref_conv3d, ref_instance_norm, ref_maxpool, ref_trilinear


class TestConv3d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 4, 5, 6)).astype(np.float32)
        w = np.ones((1, 1, 1, 1, 1), dtype=np.float32)
        assert np.array_equal(conv3d(x, w), x)

    def test_zero_input_gives_bias(self, rng):
        x = np.zeros((3, 4, 4, 4), dtype=np.float32)
        w = rng.normal(size=(2, 3, 3, 3, 3)).astype(np.float32)
        b = np.float32([1.5, -2.5])
        out = conv3d(x, w, b, padding=1)
        assert np.allclose(out[0], 1.5) and np.allclose(out[1], -2.5)

    def test_matches_reference_k3(self, rng):
        x = rng.normal(size=(2, 4, 5, 6)).astype(np.float32)
        w = rng.normal(size=(3, 2, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        out = conv3d(x, w, b, stride=1, padding=1)
        assert np.allclose(out, ref_conv3d(x, w, b, 1, 1), atol=1e-5)

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 1), (2, 1, 3), (1, 1, 3), (2, 0, 3)])
    def test_matches_reference_shapes(self, rng, stride, padding, k):
        x = rng.normal(size=(2, 6, 6, 7)).astype(np.float32)
        w = rng.normal(size=(4, 2, k, k, k)).astype(np.float32)
        out = conv3d(x, w, stride=stride, padding=padding)
        ref = ref_conv3d(x, w, None, stride, padding)
        assert out.shape == ref.shape
        assert np.allclose(out, ref, atol=1e-5)

    def test_fast_and_direct_routes_agree(self, rng):
        x = rng.normal(size=(3, 5, 6, 4)).astype(np.float32)
        w = rng.normal(size=(2, 3, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=2).astype(np.float32)
        for stride in (1, 2):
            fast = conv3d(x, w, b, stride=stride, padding=1)
            direct = conv3d_direct(x, w, b, stride=stride, padding=1)
            assert np.allclose(fast, direct, atol=1e-5)

    def test_linearity(self, rng):
        x = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
        y = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
        w = rng.normal(size=(3, 2, 3, 3, 3)).astype(np.float32)
        a, b = np.float32(0.7), np.float32(-1.3)
        lhs = conv3d(a * x + b * y, w, padding=1)
        rhs = a * conv3d(x, w, padding=1) + b * conv3d(y, w, padding=1)
        assert np.allclose(lhs, rhs, atol=1e-4)

    def test_channel_mismatch(self, rng):
        x = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
        w = rng.normal(size=(3, 5, 3, 3, 3)).astype(np.float32)
        with pytest.raises(ShapeError, match="channels"):
            conv3d(x, w)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ShapeError):
            conv3d(np.zeros((1, 4, 4, 4), np.float32), np.zeros((1, 1, 2, 2, 2), np.float32))


class TestInstanceNorm:
    def test_constant_channel_becomes_zero(self):
        x = np.full((2, 3, 3, 3), 7.0, dtype=np.float32)
        out = instance_norm(x)
        assert np.abs(out).max() < 1e-3

    def test_moments(self, rng):
        x = rng.normal(3.0, 2.0, size=(4, 6, 5, 4)).astype(np.float32)
        out = instance_norm(x)
        mean = out.mean(axis=(1, 2, 3))
        var = out.var(axis=(1, 2, 3))
        assert np.abs(mean).max() < 1e-5
        assert np.abs(var - 1).max() < 1e-3

    def test_standardized_input_scales_by_eps_factor(self, rng):
        x = rng.normal(size=(1, 8, 8, 8)).astype(np.float32)
        x = (x - x.mean()) / x.std()
        out = instance_norm(x, eps=1e-5)
        assert np.allclose(out, x * np.sqrt(1.0 / (1.0 + 1e-5)), atol=1e-4)

    def test_matches_reference(self, rng):
        x = rng.normal(size=(3, 4, 5, 6)).astype(np.float32)
        assert np.allclose(instance_norm(x), ref_instance_norm(x), atol=1e-5)


class TestTrilinear:
    def test_identity_when_same_shape(self, rng):
        x = rng.normal(size=(2, 4, 5, 6)).astype(np.float32)
        assert trilinear_resize(x, (4, 5, 6)) is x

    def test_constant_preserved(self, rng):
        x = np.full((1, 3, 4, 5), 2.5, dtype=np.float32)
        out = trilinear_resize(x, (7, 9, 2))
        assert np.allclose(out, 2.5, atol=1e-6)

    def test_ramp_upsample_closed_form(self):
        # 1D ramp [0,1,2,3] along one axis, doubled: src = (i+0.5)/2 - 0.5
        x = np.arange(4, dtype=np.float32).reshape(1, 4, 1, 1)
        out = trilinear_resize(x, (8, 1, 1)).reshape(-1)
        expect = np.float32([0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0])
        assert np.allclose(out, expect, atol=1e-6)

    def test_matches_reference(self, rng):
        x = rng.normal(size=(2, 3, 5, 4)).astype(np.float32)
        for target in [(6, 10, 8), (2, 3, 3), (3, 5, 4), (7, 2, 9)]:
            ours = trilinear_resize(x, target)
            ref = ref_trilinear(x, target)
            assert np.allclose(ours, ref, atol=1e-5), target

    def test_bounds_preserved(self, rng):
        x = rng.normal(size=(1, 4, 4, 4)).astype(np.float32)
        out = trilinear_resize(x, (9, 3, 11))
        assert out.min() >= x.min() - 1e-6
        assert out.max() <= x.max() + 1e-6


class TestMaxPool:
    def test_identity_factor(self, rng):
        x = rng.normal(size=(1, 4, 4, 4)).astype(np.float32)
        assert np.array_equal(max_pool_downscale(x, (1, 1, 1)), x)

    def test_single_block(self):
        x = (np.arange(8, dtype=np.float32) + 1).reshape(1, 2, 2, 2)
        out = max_pool_downscale(x, (2, 2, 2))
        assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 8.0

    def test_matches_reference(self, rng):
        x = rng.normal(size=(1, 8, 8, 8)).astype(np.float32)
        out = max_pool_downscale(x, (2, 2, 2))
        assert np.allclose(out, ref_maxpool(x, (2, 2, 2)), atol=1e-6)

    def test_uneven_dims_use_partial_blocks(self, rng):
        x = rng.normal(size=(2, 5, 7, 3)).astype(np.float32)
        out = max_pool_downscale(x, (2, 3, 2))
        ref = ref_maxpool(x, (2, 3, 2))
        assert out.shape == (2, 3, 3, 2)
        assert np.allclose(out, ref, atol=1e-6)
        assert np.isfinite(out).all(), "edge padding must not leak -inf"

    def test_commutes_with_monotone_map(self, rng):
        x = rng.normal(size=(1, 6, 4, 4)).astype(np.float32)
        f = lambda v: np.tanh(v) * 3 + v  # strictly increasing
        a = max_pool_downscale(f(x).astype(np.float32), (2, 2, 2))
        b = f(max_pool_downscale(x, (2, 2, 2))).astype(np.float32)
        assert np.allclose(a, b, atol=1e-5)


class TestPadToMultiple:
    def test_case_from_table(self):
        x = np.zeros((1, 55, 512, 512), dtype=np.float32)
        out, spec = pad_to_multiple(x, 8)
        assert out.shape == (1, 56, 512, 512)
        assert spec.d == (0, 1) and spec.h == (0, 0) and spec.w == (0, 0)

    def test_already_aligned(self, rng):
        x = rng.normal(size=(1, 16, 8, 24)).astype(np.float32)
        out, spec = pad_to_multiple(x, 8)
        assert out.shape == x.shape
        assert spec == PadSpec((0, 0), (0, 0), (0, 0))

    def test_tiny_input(self):
        out, _ = pad_to_multiple(np.ones((1, 1, 1, 1), np.float32), 8)
        assert out.shape == (1, 8, 8, 8)

    @settings(max_examples=60, deadline=None)
    @given(
        d=st.integers(1, 64),
        h=st.integers(1, 64),
        w=st.integers(1, 64),
        m=st.integers(1, 9),
    )
    def test_crop_inverts_pad(self, d, h, w, m):
        x = np.random.default_rng(d * 4096 + h * 64 + w).normal(size=(1, d, h, w))
        x = x.astype(np.float32)
        padded, spec = pad_to_multiple(x, m)
        assert all(v % m == 0 for v in padded.shape[1:])
        assert np.array_equal(spec.crop(padded), x)


class TestL2Normalize:
    def test_unit_norms(self, rng):
        v = rng.normal(size=(10, 7)).astype(np.float32)
        out = l2_normalize(v, axis=1)
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-5)

    def test_zero_vector_stays_zero(self):
        out = l2_normalize(np.zeros((2, 3), dtype=np.float32), axis=1)
        assert not out.any()
