"""Distortion metrics against brute force and Bjontegaard closed forms."""

import numpy as np
import pytest

from pgpc.errors import ConfigurationError, DegenerateInputError, EvaluationError
from pgpc.geometry import PointCloud
from pgpc.metrics import (
    PSNR_CAP,
    RDPoint,
    bd_psnr,
    bd_rate,
    d1_mse,
    d2_mse,
    estimate_normals,
    nearest_reference,
    psnr,
    read_rd_csv,
    symmetric_psnr,
    write_rd_csv,
)


def brute_nn(test, ref):
    """O(N*M) smallest-distance, smallest-index reference."""
    d = ((test[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
    return d.min(axis=1), d.argmin(axis=1)


class TestNearest:
    def test_matches_brute_force_float(self):
        rng = np.random.default_rng(0)
        test = rng.normal(size=(1000, 3))
        ref = rng.normal(size=(800, 3))
        d2, idx = nearest_reference(test, ref)
        bd, bidx = brute_nn(test, ref)
        assert np.allclose(d2, bd, rtol=0, atol=1e-9)
        assert np.array_equal(idx, bidx)

    def test_integer_clouds_exact(self):
        rng = np.random.default_rng(1)
        test = rng.integers(0, 1024, size=(1000, 3))
        ref = rng.integers(0, 1024, size=(700, 3))
        d2, idx = nearest_reference(test, ref)
        bd, bidx = brute_nn(test.astype(np.int64), ref.astype(np.int64))
        assert np.array_equal(d2, bd)
        assert np.array_equal(idx, bidx)

    def test_tie_break_smallest_index(self):
        # both references are equidistant from the query
        ref = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        _, idx = nearest_reference(np.zeros((1, 3)), ref)
        assert idx[0] == 0
        flipped = ref[::-1].copy()
        _, idx2 = nearest_reference(np.zeros((1, 3)), flipped)
        assert idx2[0] == 0

    def test_many_way_tie(self):
        # a whole shell of equidistant points forces the k-growing path
        g = np.array([-1.0, 1.0])
        shell = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
        _, idx = nearest_reference(np.zeros((1, 3)), shell)
        assert idx[0] == 0


class TestD1:
    def test_identical_is_zero_and_capped(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(100, 3))
        assert d1_mse(pts, pts.copy()) == 0.0
        assert psnr(0.0, 10) == PSNR_CAP

    def test_unit_offset_singleton(self):
        mse = d1_mse(np.array([[1.0, 0, 0]]), np.zeros((1, 3)))
        assert mse == 1.0
        value = psnr(mse, 10)
        assert abs(value - 64.97) < 0.01
        assert np.isclose(value, 10 * np.log10(3 * 1023 ** 2), rtol=1e-12)

    def test_brute_force_1k(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(1000, 3)) * 50
        b = rng.normal(size=(1000, 3)) * 50
        want = brute_nn(a, b)[0].mean()
        assert abs(d1_mse(a, b) - want) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(DegenerateInputError):
            d1_mse(np.zeros((0, 3)), np.zeros((5, 3)))


class TestNormals:
    def test_planar(self):
        rng = np.random.default_rng(4)
        pts = np.column_stack([rng.normal(size=(200, 2)), np.zeros(200)])
        n = estimate_normals(pts)
        assert np.allclose(np.abs(n[:, 2]), 1.0, atol=1e-9)
        assert np.all(n[:, 2] > 0)  # sign fixed to first nonzero positive

    def test_sphere_radial(self):
        rng = np.random.default_rng(5)
        raw = rng.normal(size=(2000, 3))
        pts = 100.0 * raw / np.linalg.norm(raw, axis=1, keepdims=True)
        n = estimate_normals(pts)
        radial = pts / 100.0
        cos = np.abs((n * radial).sum(axis=1))
        angles = np.degrees(np.arccos(np.clip(cos, -1, 1)))
        assert np.percentile(angles, 99) < 5.0

    def test_unit_norm(self):
        rng = np.random.default_rng(6)
        n = estimate_normals(rng.normal(size=(100, 3)))
        assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)

    def test_collinear_fallback(self):
        line = np.column_stack([np.linspace(0, 1, 30), np.zeros(30), np.zeros(30)])
        n = estimate_normals(line)
        assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)
        assert np.allclose(n[:, 0], 0.0, atol=1e-9)  # orthogonal to the line

    def test_too_small_rejected(self):
        with pytest.raises(DegenerateInputError):
            estimate_normals(np.zeros((5, 3)), k=12)


class TestD2:
    def test_tangential_displacement_free(self):
        rng = np.random.default_rng(7)
        ref = np.column_stack([rng.uniform(-5, 5, (300, 2)), np.zeros(300)])
        test = ref + np.array([0.3, 0.0, 0.0])  # slide along the plane
        normals = estimate_normals(ref)
        assert d1_mse(test, ref) > 0
        assert d2_mse(test, ref, normals) < 1e-12

    def test_normal_displacement_squared(self):
        rng = np.random.default_rng(8)
        ref = np.column_stack([rng.uniform(-5, 5, (300, 2)), np.zeros(300)])
        test = ref + np.array([0.0, 0.0, 0.25])
        normals = estimate_normals(ref)
        assert np.isclose(d2_mse(test, ref, normals), 0.25 ** 2, rtol=1e-9)

    def test_brute_force(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(400, 3)) * 10
        b = rng.normal(size=(400, 3)) * 10
        normals = estimate_normals(b)
        _, idx = brute_nn(a, b)
        want = (((a - b[idx]) * normals[idx]).sum(axis=1) ** 2).mean()
        assert abs(d2_mse(a, b, normals) - want) < 1e-9

    def test_d2_never_exceeds_d1(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(200, 3))
        b = rng.normal(size=(250, 3))
        assert d2_mse(a, b, estimate_normals(b)) <= d1_mse(a, b) + 1e-15


class TestSymmetric:
    def test_argument_order_irrelevant(self):
        rng = np.random.default_rng(11)
        a = PointCloud(rng.integers(0, 64, (300, 3)), 6)
        b = PointCloud(rng.integers(0, 64, (280, 3)), 6)
        for mode in ("max-error", "max-psnr"):
            assert symmetric_psnr(a, b, 6, mode=mode) == symmetric_psnr(b, a, 6, mode=mode)

    def test_modes_bracket(self):
        # strict subset: the two directional MSEs differ
        rng = np.random.default_rng(12)
        big = rng.normal(size=(400, 3)) * 20
        small = big[:80]
        lo = symmetric_psnr(small, big, 6, mode="max-error")
        hi = symmetric_psnr(small, big, 6, mode="max-psnr")
        d_ab = psnr(d1_mse(small, big), 6)
        d_ba = psnr(d1_mse(big, small), 6)
        assert lo == min(d_ab, d_ba)
        assert hi == max(d_ab, d_ba)

    def test_identical_caps(self):
        pts = np.arange(30).reshape(10, 3).astype(float)
        assert symmetric_psnr(pts, pts.copy(), 10) == PSNR_CAP


def curve(rates, psnrs):
    return [RDPoint(r, p) for r, p in zip(rates, psnrs)]


class TestBjontegaard:
    RATES = (0.5, 1.0, 2.0, 4.0)
    PSNRS = (60.0, 64.0, 67.0, 69.0)

    def test_identical_curves_zero(self):
        a = curve(self.RATES, self.PSNRS)
        assert abs(bd_rate(a, curve(self.RATES, self.PSNRS))) < 1e-9
        assert abs(bd_psnr(a, curve(self.RATES, self.PSNRS))) < 1e-12

    def test_doubled_rate_is_plus_100(self):
        a = curve(self.RATES, self.PSNRS)
        b = curve([2 * r for r in self.RATES], self.PSNRS)
        assert abs(bd_rate(a, b) - 100.0) < 0.1

    def test_shifted_psnr_is_plus_1(self):
        a = curve(self.RATES, self.PSNRS)
        b = curve(self.RATES, [p + 1.0 for p in self.PSNRS])
        assert abs(bd_psnr(a, b) - 1.0) < 1e-3

    def test_antisymmetric(self):
        a = curve(self.RATES, self.PSNRS)
        b = curve([r * 1.3 for r in self.RATES], [p + 0.4 for p in self.PSNRS])
        assert abs(bd_psnr(a, b) + bd_psnr(b, a)) < 1e-6

    def test_too_few_points_rejected(self):
        a = curve(self.RATES[:3], self.PSNRS[:3])
        with pytest.raises(EvaluationError):
            bd_rate(a, a)

    def test_no_overlap_rejected(self):
        a = curve(self.RATES, self.PSNRS)
        b = curve(self.RATES, [p + 40 for p in self.PSNRS])
        with pytest.raises(EvaluationError):
            bd_rate(a, b)

    def test_rdpoint_validation(self):
        with pytest.raises(ConfigurationError):
            RDPoint(0.0, 60.0)
        with pytest.raises(ConfigurationError):
            RDPoint(1.0, float("nan"))


class TestCsv:
    def test_roundtrip(self, tmp_path):
        rows = [
            ("toy0", 0.2, 2.21, 39.4, 41.0),
            ("toy1", 13.0, 1.91, 33.7, 35.2),
        ]
        path = str(tmp_path / "rd.csv")
        write_rd_csv(path, rows)
        with open(path) as fh:
            header = fh.readline().strip()
        assert header == "sequence,lambda,bpp,d1_psnr,d2_psnr"
        back = read_rd_csv(path)
        assert len(back) == 2
        assert back[0][0] == "toy0"
        assert np.isclose(back[1][2], 1.91)
