"""Extractor / warper / propagator wiring and the PGW1 weights container."""

import warnings

import numpy as np
import pytest

from pgpc import autodiff as ad
from pgpc.errors import (
    ConfigurationError,
    ContractViolationError,
    DegenerateInputError,
    ParseError,
)
from pgpc.geometry import PointCloud
from pgpc.network import (
    NetworkConfig,
    NetworkWeights,
    add_residual,
    extract_features,
    init_weights,
    layer_shapes,
    load_weights,
    propagate,
    residual,
    save_weights,
    vrn_unit,
    warp_features,
    weights_to_bytes,
)
from pgpc.sparse import SparseTensor, downsample_coord_set, lexsorted_unique


def halved(coords, times):
    out = np.asarray(coords, dtype=np.int64)
    for _ in range(times):
        out = lexsorted_unique(out >> 1)
    return out


class TestExtract:
    def test_single_point_origin(self, full_weights):
        stack = extract_features(PointCloud(np.zeros((1, 3)), 6), full_weights)
        assert stack.counts == [1, 1, 1, 1]
        for t in stack.tensors:
            assert np.array_equal(t.coords, [[0, 0, 0]])
        assert stack.tensors[-1].feats.shape[1] == full_weights.config.latent_channels

    def test_scale_coords_are_floor_halvings(self, full_weights, body_cloud_6bit):
        cloud, _ = body_cloud_6bit
        stack = extract_features(cloud, full_weights)
        src = np.asarray(cloud.points, dtype=np.int64)
        for level, t in enumerate(stack.tensors, start=1):
            assert np.array_equal(t.coords, halved(src, level))
            assert stack.counts[level] == len(t.coords)

    def test_block_collapse(self, full_weights):
        g = np.arange(2)
        block = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
        stack = extract_features(PointCloud(block, 6), full_weights)
        assert len(stack.tensors[0].coords) == 1

    def test_counts_independent_of_weights(self, full_weights, body_cloud_6bit):
        cloud, _ = body_cloud_6bit
        other = init_weights(full_weights.config, seed=99)
        a = extract_features(cloud, full_weights)
        b = extract_features(cloud, other)
        assert a.counts == b.counts
        for ta, tb in zip(a.tensors, b.tensors):
            assert np.array_equal(ta.coords, tb.coords)

    def test_empty_rejected(self, full_weights):
        with pytest.raises(DegenerateInputError):
            extract_features(PointCloud(np.zeros((0, 3))), full_weights)


class TestVrn:
    def test_zero_weights_pure_skip(self, tiny_weights):
        w = tiny_weights.detached()
        zeroed = {
            k: (np.zeros_like(v) if k.startswith("enc.block1.vrn") else v)
            for k, v in w.arrays.items()
        }
        wz = NetworkWeights(w.config, zeroed)
        rng = np.random.default_rng(0)
        coords = lexsorted_unique(rng.integers(0, 8, size=(20, 3)).astype(np.int64))
        width = w.arrays["enc.block1.vrn.a1.w"].shape[1] * 2
        t = SparseTensor(coords, rng.normal(size=(len(coords), width)).astype(np.float32))
        out = vrn_unit(t, wz, "enc.block1.vrn")
        assert np.array_equal(out.coords, t.coords)
        assert np.allclose(np.asarray(ad.val(out.feats)), t.feats)

    def test_coordinates_preserved(self, tiny_weights):
        rng = np.random.default_rng(1)
        coords = lexsorted_unique(rng.integers(0, 8, size=(30, 3)).astype(np.int64))
        width = tiny_weights.detached().arrays["enc.block1.vrn.a1.w"].shape[1] * 2
        t = SparseTensor(coords, rng.normal(size=(len(coords), width)).astype(np.float32))
        out = vrn_unit(t, tiny_weights, "enc.block1.vrn")
        assert np.array_equal(out.coords, t.coords)


class TestWarp:
    def test_output_coords_equal_targets(self, full_weights, body_cloud_6bit):
        cloud, _ = body_cloud_6bit
        stack = extract_features(cloud, full_weights)
        src = halved(np.asarray(cloud.points), full_weights.config.levels)
        out = warp_features(stack, src, full_weights)
        assert np.array_equal(out.coords, src)
        assert out.scale == full_weights.config.levels

    def test_disjoint_support_gives_zero_features(self, full_weights):
        # an aligned cloud far from the requested coords has no taps there
        far = PointCloud(np.full((4, 3), 40.0), 6)
        stack = extract_features(far, full_weights)
        target = np.array([[0, 0, 0], [1, 1, 1]])
        out = warp_features(stack, target, full_weights)
        assert np.allclose(np.asarray(ad.val(out.feats)), 0.0)

    def test_level_mismatch_rejected(self, full_weights, body_cloud_6bit):
        stack = extract_features(body_cloud_6bit[0], full_weights)
        broken = type(stack)(stack.tensors[:2], stack.counts[:3])
        with pytest.raises(ConfigurationError):
            warp_features(broken, np.zeros((1, 3), dtype=np.int64), full_weights)


class TestResidual:
    def test_zero_and_shift(self):
        rng = np.random.default_rng(2)
        coords = lexsorted_unique(rng.integers(0, 8, size=(15, 3)).astype(np.int64))
        f = rng.normal(size=(len(coords), 4)).astype(np.float32)
        a = SparseTensor(coords, f.copy())
        b = SparseTensor(coords, f.copy())
        assert np.all(np.asarray(ad.val(residual(a, b).feats)) == 0)
        c = SparseTensor(coords, f + 1.0)
        assert np.allclose(np.asarray(ad.val(residual(c, b).feats)), 1.0)

    def test_roundtrip_one_ulp(self):
        rng = np.random.default_rng(3)
        coords = lexsorted_unique(rng.integers(0, 8, size=(25, 3)).astype(np.int64))
        fs = rng.normal(size=(len(coords), 4)).astype(np.float32)
        fw = rng.normal(size=(len(coords), 4)).astype(np.float32)
        s = SparseTensor(coords, fs)
        w = SparseTensor(coords, fw)
        back = add_residual(w, residual(s, w))
        err = np.abs(np.asarray(ad.val(back.feats)) - fs)
        # one ulp at the scale of the larger operand
        scale = np.maximum(np.abs(fs), np.abs(fw)).astype(np.float32)
        assert np.all(err <= np.spacing(scale))

    def test_mismatch_rejected(self):
        a = SparseTensor(np.array([[0, 0, 0]]), np.zeros((1, 2)))
        b = SparseTensor(np.array([[1, 0, 0]]), np.zeros((1, 2)))
        with pytest.raises(ContractViolationError):
            residual(a, b)


class TestPropagate:
    def test_counts_run_the_show(self, full_weights, body_cloud_6bit):
        stack = extract_features(body_cloud_6bit[0], full_weights)
        levels = full_weights.config.levels
        counts_fine = stack.counts[levels - 1 :: -1]
        cloud, scores = propagate(stack.tensors[-1], counts_fine, full_weights, precision=6)
        assert len(cloud) == stack.counts[0]
        assert len(scores) == levels
        for s, want in zip(scores, counts_fine):
            assert len(s.coords) >= want

    def test_single_latent_dilation(self, full_weights):
        cfg = full_weights.config
        t = SparseTensor(
            np.array([[4, 4, 4]]),
            np.ones((1, cfg.latent_channels), dtype=np.float32),
            scale=cfg.levels,
        )
        big = [10 ** 6] * cfg.levels
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            cloud, scores = propagate(t, big, full_weights, precision=6)
        assert len(scores[0].coords) <= 27
        assert len(cloud) == len(scores[-1].coords)

    def test_overrun_counts_warn_and_clamp(self, full_weights):
        cfg = full_weights.config
        t = SparseTensor(
            np.array([[2, 2, 2]]),
            np.ones((1, cfg.latent_channels), dtype=np.float32),
            scale=cfg.levels,
        )
        with pytest.warns(RuntimeWarning):
            cloud, _ = propagate(t, [5000] * cfg.levels, full_weights, precision=6)
        assert len(cloud) > 0

    def test_wrong_scale_rejected(self, full_weights):
        t = SparseTensor(np.array([[0, 0, 0]]), np.ones((1, full_weights.config.latent_channels)))
        with pytest.raises(ContractViolationError):
            propagate(t, [1] * full_weights.config.levels, full_weights)

    def test_wrong_count_length_rejected(self, full_weights):
        cfg = full_weights.config
        t = SparseTensor(
            np.array([[0, 0, 0]]), np.ones((1, cfg.latent_channels)), scale=cfg.levels
        )
        with pytest.raises(ConfigurationError):
            propagate(t, [1], full_weights)


class TestWeightsFile:
    def test_roundtrip_bit_exact(self, full_weights, tmp_path):
        # the container stores float32; the round trip is exact at that width
        path = str(tmp_path / "w.pgw")
        save_weights(full_weights, path)
        back = load_weights(path)
        w = full_weights.detached()
        assert back.config == w.config
        assert set(back.arrays) == set(w.arrays)
        for name in w.arrays:
            want = w.arrays[name]
            if want.dtype.kind == "f":
                want = want.astype(np.float32)
            assert np.array_equal(back.arrays[name], want), name
        assert weights_to_bytes(back) == weights_to_bytes(full_weights)

    def test_shapes_match_declared(self, full_weights):
        shapes = layer_shapes(full_weights.config)
        arrays = full_weights.detached().arrays
        for name, (offsets, cin, cout) in shapes.items():
            assert arrays[name + ".w"].shape == (len(offsets), cin, cout), name
            assert arrays[name + ".b"].shape == (cout,), name

    def test_init_deterministic(self):
        cfg = NetworkConfig()
        a = weights_to_bytes(init_weights(cfg, seed=5))
        b = weights_to_bytes(init_weights(cfg, seed=5))
        assert a == b
        assert a != weights_to_bytes(init_weights(cfg, seed=6))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.pgw"
        path.write_bytes(b"NOPE" + b"\x00" * 100)
        with pytest.raises(ParseError):
            load_weights(str(path))

    def test_truncation_rejected(self, full_weights, tmp_path):
        blob = weights_to_bytes(full_weights)
        path = tmp_path / "cut.pgw"
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ParseError):
            load_weights(str(path))

    def test_trainable_detached_cycle(self, tiny_weights):
        t = tiny_weights.trainable()
        for name, v in t.arrays.items():
            if name != "ent.range":
                assert isinstance(v, ad.Var)
        d = t.detached()
        for name, arr in d.arrays.items():
            assert isinstance(arr, np.ndarray), name
