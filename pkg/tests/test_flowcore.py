import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphalign.evalmetrics import epe, psnr
from morphalign.flowcore import (
    BadMagicError,
    BorderPolicy,
    FlowField,
    NonFiniteFlowError,
    TruncatedFloError,
    bilinear_sample,
    compose_chain,
    compose_flows,
    flo_bytes,
    parse_flo,
    read_flo,
    read_image,
    resample_flow,
    warp_image,
    write_flo,
    write_image,
)
from morphalign.synthmotion import AffineTransform, affine_flow, apply_affine, synthetic_scene


@pytest.fixture(scope="module")
def scene():
    return synthetic_scene(7, 128, 128)


def smooth_flow(w, h, seed=0, amp=3.0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    v = np.zeros((h, w, 2))
    for k in range(2):
        for _ in range(3):
            fx, fy, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
            v[:, :, k] += amp / 3 * np.sin(2 * np.pi * (fx * xs / w + fy * ys / h) + ph)
    return FlowField(v)


class TestBilinear:
    def test_integer_coordinate_is_exact(self):
        img = np.random.default_rng(0).random((8, 6, 3))
        val, ok = bilinear_sample(img, 3.0, 5.0)
        assert np.array_equal(val, img[5, 3])
        assert ok

    def test_midpoint_blend(self):
        img = np.zeros((2, 2))
        img[0, 0], img[0, 1] = 0.2, 0.6
        val, ok = bilinear_sample(img, 0.5, 0.0)
        assert val[0] == pytest.approx(0.4, abs=1e-15)
        assert ok

    def test_clamp_outside(self):
        img = np.random.default_rng(1).random((5, 5))
        val, ok = bilinear_sample(img, -10.0, -10.0, BorderPolicy.CLAMP_TO_EDGE)
        assert val[0] == img[0, 0]
        assert not ok

    def test_mark_invalid_zeroes_value(self):
        img = np.ones((4, 4))
        val, ok = bilinear_sample(img, 10.0, 1.0, BorderPolicy.MARK_INVALID)
        assert val[0] == 0.0 and not ok

    def test_grid_edge_is_in_bounds(self):
        img = np.random.default_rng(2).random((4, 7))
        val, ok = bilinear_sample(img, 6.0, 3.0)
        assert ok and val[0] == img[3, 6]


class TestWarp:
    def test_zero_flow_identity(self, scene):
        out, valid = warp_image(scene, FlowField.zeros(128, 128))
        assert np.array_equal(out, scene)
        assert valid.all()

    def test_integer_shift(self):
        w, h = 16, 4
        img = np.tile(np.arange(w) / w, (h, 1))
        out, valid = warp_image(img, FlowField.constant(1.0, 0.0, w, h))
        assert np.array_equal(out[:, :-1, 0], img[:, 1:])
        assert valid[:, :-1].all() and not valid[:, -1].any()

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            warp_image(np.zeros((4, 4)), FlowField.zeros(5, 4))

    def test_affine_restore(self, scene):
        M = AffineTransform(math.radians(5), 1.02, 0.97, 3.5, -2.25, 63.5, 63.5)
        pert = apply_affine(scene, M)
        F = affine_flow(M, 128, 128)
        out, _ = warp_image(pert, F)
        b = int(math.ceil(F.magnitude().max()))
        assert psnr(out[b:-b, b:-b], scene[b:-b, b:-b]) > 35.0


class TestCompose:
    def test_zero_then_g(self):
        G = smooth_flow(32, 32, seed=3)
        out = compose_flows(FlowField.zeros(32, 32), G)
        assert np.array_equal(out.vectors, G.vectors)
        assert out.valid.all()

    def test_f_then_zero(self):
        F = smooth_flow(32, 32, seed=4, amp=1.0)
        out = compose_flows(F, FlowField.zeros(32, 32))
        assert np.array_equal(out.vectors[out.valid], F.vectors[out.valid])

    def test_constant_additivity(self):
        out = compose_flows(FlowField.constant(2, 0, 20, 20), FlowField.constant(0, 3, 20, 20))
        assert np.array_equal(out.vectors[out.valid], np.tile([2.0, 3.0], (out.valid.sum(), 1)))
        # lookups x + 2 beyond column 17 leave the grid
        assert not out.valid[:, 18:].any() and out.valid[:, :18].all()

    def test_invalid_g_propagates(self):
        G = FlowField.zeros(10, 10)
        G.valid[5, 5] = False
        out = compose_flows(FlowField.constant(0.5, 0, 10, 10), G)
        assert not out.valid[5, 4] and not out.valid[5, 5]
        assert out.valid[5, 3]

    def test_mismatch(self):
        with pytest.raises(ValueError):
            compose_flows(FlowField.zeros(4, 4), FlowField.zeros(4, 5))

    def test_associativity_smooth(self):
        F, G, H = (smooth_flow(256, 256, seed=s) for s in (10, 11, 12))
        left = compose_flows(compose_flows(F, G), H)
        right = compose_flows(F, compose_flows(G, H))
        mask = left.valid & right.valid
        assert epe(left, right, mask) < 0.05

    def test_chain_of_fractional_affine(self):
        from morphalign.synthmotion import fractional_affine, step_transform

        M = AffineTransform(math.radians(4), 1.03, 0.96, 9.0, -7.0, 127.5, 127.5)
        steps = [affine_flow(step_transform(M, k, 5), 256, 256) for k in range(5)]
        out = compose_chain(steps)
        direct = affine_flow(M, 256, 256)
        assert epe(out, direct, out.valid) < 0.05
        assert fractional_affine(M, 1.0) == M


class TestResample:
    def test_identity_size(self):
        F = smooth_flow(16, 12)
        out = resample_flow(F, 16, 12)
        assert np.array_equal(out.vectors, F.vectors)

    def test_constant_scaling(self):
        out = resample_flow(FlowField.constant(4, 0, 64, 64), 32, 32)
        assert np.allclose(out.vectors[:, :, 0], 2.0) and np.allclose(out.vectors[:, :, 1], 0.0)

    def test_anisotropic_scaling(self):
        out = resample_flow(FlowField.constant(4, 6, 64, 32), 16, 16)
        assert np.allclose(out.vectors[:, :, 0], 1.0) and np.allclose(out.vectors[:, :, 1], 3.0)

    def test_down_up_roundtrip(self):
        F = smooth_flow(128, 128, seed=5)
        back = resample_flow(resample_flow(F, 64, 64), 128, 128)
        assert epe(back, F) < 0.2

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            resample_flow(FlowField.zeros(4, 4), 0, 4)


class TestFlo:
    def test_hand_built_fixture(self, tmp_path):
        raw = b"PIEH" + struct.pack("<ii", 1, 1) + struct.pack("<ff", 1.0, -2.0)
        assert len(raw) == 20
        p = tmp_path / "one.flo"
        p.write_bytes(raw)
        F = read_flo(p)
        assert F.shape == (1, 1)
        assert F.vectors[0, 0].tolist() == [1.0, -2.0]
        write_flo(F, tmp_path / "again.flo")
        assert (tmp_path / "again.flo").read_bytes() == raw

    def test_layout_is_row_major_interleaved(self):
        v = np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2)
        raw = flo_bytes(FlowField(v))
        assert struct.unpack("<ii", raw[4:12]) == (3, 2)
        assert list(struct.unpack("<12f", raw[12:])) == list(range(12))

    def test_bad_magic(self):
        raw = b"XXXX" + struct.pack("<ii", 1, 1) + struct.pack("<ff", 0, 0)
        with pytest.raises(BadMagicError):
            parse_flo(raw)

    def test_truncated(self):
        raw = b"PIEH" + struct.pack("<ii", 2, 2) + struct.pack("<ff", 0, 0)
        with pytest.raises(TruncatedFloError):
            parse_flo(raw)

    def test_non_finite(self):
        raw = b"PIEH" + struct.pack("<ii", 1, 1) + struct.pack("<ff", float("nan"), 0)
        with pytest.raises(NonFiniteFlowError):
            parse_flo(raw)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
    def test_roundtrip_bitexact(self, w, h, seed):
        rng = np.random.default_rng(seed)
        v = (rng.standard_normal((h, w, 2)) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
        raw = flo_bytes(FlowField(v.astype(np.float64)))
        F = parse_flo(raw)
        assert np.array_equal(F.vectors.astype(np.float32), v)
        assert flo_bytes(F) == raw


class TestImageIO:
    @pytest.mark.parametrize("suffix", [".png", ".pgm", ".ppm"])
    def test_roundtrip_8bit(self, tmp_path, suffix):
        rng = np.random.default_rng(0)
        shape = (5, 7) if suffix == ".pgm" else (5, 7, 3)
        img = rng.integers(0, 256, size=shape) / 255.0
        p = tmp_path / f"img{suffix}"
        write_image(img, p)
        back = read_image(p)
        assert np.array_equal(back.reshape(img.shape), img)
