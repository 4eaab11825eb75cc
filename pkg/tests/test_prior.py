"""Template body prior: blendshapes, skinning, parameter serialization."""

import numpy as np
import pytest

from pgpc.errors import ConfigurationError, ParameterRangeError, ParseError
from pgpc.prior import (
    N_PARAMS,
    PARAM_BYTES,
    PriorParams,
    apply_blendshapes,
    canonicalize_params,
    decode_params,
    dequantize_params,
    encode_params,
    pose_feature,
    pose_mesh,
    quantize_params,
    read_params_text,
    rodrigues,
    shape_blend,
    skin,
    write_params_text,
)


def rand_params(rng, scale=1.0):
    return PriorParams(
        pose=rng.normal(0, 0.2, 69),
        shape=rng.normal(0, 0.5, 10),
        rotation=rng.normal(0, 0.3, 3),
        translation=rng.normal(0, 5.0, 3),
        scale=scale,
    )


class TestSkinning:
    def test_zero_params_reproduce_template(self, template):
        out = pose_mesh(template, PriorParams())
        assert np.array_equal(out.vertices, template.mean_vertices)
        assert np.array_equal(out.faces, template.faces)

    def test_rigid_equivariance(self, template):
        """Posing then rotating equals rotating the root parameter."""
        rng = np.random.default_rng(0)
        base = rand_params(rng)
        from dataclasses import replace

        zero_rot = replace(base, rotation=np.zeros(3), translation=np.zeros(3))
        plain = pose_mesh(template, zero_rot).vertices
        rot = rng.normal(0, 0.7, 3)
        R = rodrigues(rot)
        rotated = pose_mesh(template, replace(zero_rot, rotation=rot)).vertices
        assert np.abs(rotated - plain @ R.T).max() < 1e-6

    def test_translation_is_additive(self, template):
        rng = np.random.default_rng(1)
        p0 = rand_params(rng)
        from dataclasses import replace

        a = pose_mesh(template, replace(p0, translation=np.zeros(3))).vertices
        b = pose_mesh(template, p0).vertices
        assert np.allclose(b, a + p0.translation, atol=1e-12)

    def test_scale_lives_outside_the_mesh(self, template):
        # pose_mesh is in model units; the codec applies scale afterwards
        rng = np.random.default_rng(2)
        p = rand_params(rng, scale=3.7)
        from dataclasses import replace

        assert np.allclose(
            pose_mesh(template, p).vertices,
            pose_mesh(template, replace(p, scale=1.0)).vertices,
        )


class TestBlendshapes:
    def test_shape_blend_dense_oracle(self, template):
        rng = np.random.default_rng(3)
        beta = rng.normal(0, 1, template.shape_basis.shape[2])
        got = shape_blend(template, beta)
        want = template.mean_vertices + np.einsum("vci,i->vc", template.shape_basis, beta)
        assert np.allclose(got, want, atol=1e-12)

    def test_pose_feature_zero_pose_is_zero(self):
        assert np.allclose(pose_feature(np.zeros(69)), 0.0)

    def test_blendshapes_reduce_to_shape_blend_at_rest(self, template):
        rng = np.random.default_rng(4)
        p = PriorParams(shape=rng.normal(0, 1, 10))
        assert np.allclose(apply_blendshapes(template, p), shape_blend(template, p.shape))


class TestRodrigues:
    def test_zero_vector_is_identity(self):
        assert np.allclose(rodrigues(np.zeros(3)), np.eye(3))

    def test_rotation_is_orthonormal(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            R = rodrigues(rng.normal(0, 2, 3))
            assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(R) == pytest.approx(1.0)

    def test_quarter_turn_about_z(self):
        R = rodrigues(np.array([0, 0, np.pi / 2]))
        assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


class TestQuantization:
    def test_roundtrip_preserves_three_decimals(self):
        rng = np.random.default_rng(6)
        p = rand_params(rng, scale=2.25)
        q = quantize_params(p)
        back = dequantize_params(q)
        # every entry lands exactly on the 0.001 grid nearest the input
        assert np.allclose(back.as_vector(), np.round(p.as_vector(), 3), atol=1e-12)

    def test_wire_size_is_1376_plus_32_bits(self):
        q = quantize_params(PriorParams())
        blob = encode_params(q)
        assert len(blob) == PARAM_BYTES == 176
        assert 8 * len(blob) == 1376 + 32

    def test_wire_roundtrip_bit_exact(self):
        rng = np.random.default_rng(7)
        q = quantize_params(rand_params(rng, scale=0.75))
        back = decode_params(encode_params(q))
        assert np.array_equal(back.values, q.values)
        assert back.scale_fixed == q.scale_fixed
        assert encode_params(back) == encode_params(q)

    def test_out_of_range_parameter_rejected(self):
        with pytest.raises(ParameterRangeError):
            quantize_params(PriorParams(pose=np.full(69, 40.0)))

    def test_negative_scale_rejected(self):
        with pytest.raises(ConfigurationError):
            PriorParams(scale=-1.0)

    def test_huge_scale_rejected(self):
        # 16.16 fixed point tops out below 2**16.
        with pytest.raises(ParameterRangeError):
            quantize_params(PriorParams(scale=70000.0))

    def test_short_payload_rejected(self):
        with pytest.raises(ParseError):
            decode_params(b"\x00" * 10)


class TestTextFiles:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        p = rand_params(rng, scale=1.5)
        path = tmp_path / "params.txt"
        write_params_text(p, path)
        back = read_params_text(path)
        assert np.allclose(back.as_vector(), p.as_vector(), atol=1e-6)
        assert back.scale == pytest.approx(p.scale, abs=1e-6)


def test_canonicalize_is_idempotent():
    rng = np.random.default_rng(9)
    p = PriorParams(rotation=rng.normal(0, 4, 3))  # possibly beyond pi
    c1 = canonicalize_params(p)
    c2 = canonicalize_params(c1)
    assert np.allclose(c1.rotation, c2.rotation, atol=1e-12)
    assert np.linalg.norm(c1.rotation) <= np.pi + 1e-12
    # same rotation matrix either way
    assert np.allclose(rodrigues(p.rotation), rodrigues(c1.rotation), atol=1e-9)
