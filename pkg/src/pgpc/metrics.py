"""Geometry distortion (D1/D2), PSNR, and Bjontegaard deltas.

Nearest neighbors are kd-tree accelerated but the reported distances are
recomputed exactly (integer clouds stay in exact integer arithmetic), and
ties resolve to the smallest reference index so D2 is deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial
from scipy.spatial import cKDTree

from .errors import ConfigurationError, DegenerateInputError, EvaluationError

PSNR_CAP = 999.0


def _points(cloud):
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ConfigurationError(f"expected (N, 3) points, got shape {pts.shape}")
    if len(pts) == 0:
        raise DegenerateInputError("empty point cloud")
    return pts


def nearest_reference(test, reference):
    """Exact nearest neighbor: (squared distances, reference indices).

    The kd-tree proposes candidates; distances are recomputed in exact
    arithmetic and ties break to the smallest reference index.  k grows
    until the k-th candidate is strictly farther than the best, so the
    full tie set is always seen.
    """
    t = _points(test)
    r = _points(reference)
    exact_int = np.all(t == np.floor(t)) and np.all(r == np.floor(r))
    tree = cKDTree(r)
    n_ref = len(r)
    best_d = np.empty(len(t))
    best_i = np.empty(len(t), dtype=np.int64)
    pending = np.arange(len(t))
    k = min(8, n_ref)
    while len(pending):
        _, idx = tree.query(t[pending], k=k)
        idx = np.atleast_2d(idx.reshape(len(pending), -1))
        if exact_int:
            diff = t[pending, None, :].astype(np.int64) - r[idx].astype(np.int64)
            d2 = (diff * diff).sum(axis=2)
        else:
            diff = t[pending, None, :] - r[idx]
            d2 = (diff * diff).sum(axis=2)
        # among equal-distance candidates take the smallest reference index
        dmin = d2.min(axis=1)
        masked = np.where(d2 == dmin[:, None], idx, n_ref)
        best_d[pending] = dmin
        best_i[pending] = masked.min(axis=1)
        if k >= n_ref:
            break
        # all k candidates tied means the tie set may extend past k
        unresolved = (d2 == dmin[:, None]).all(axis=1)
        pending = pending[unresolved]
        k = min(k * 2, n_ref)
    return best_d, best_i


def d1_mse(test, reference):
    """Mean squared point-to-nearest-point distance, test against reference."""
    d2, _ = nearest_reference(test, reference)
    return float(d2.mean())


def psnr(mse, precision):
    """Peak signal-to-noise in dB for an occupancy grid of 2^p voxels."""
    if not 1 <= precision <= 16:
        raise ConfigurationError(f"precision must be in [1, 16], got {precision}")
    if mse < 0:
        raise ConfigurationError("mse cannot be negative")
    if mse == 0:
        return PSNR_CAP
    peak = 3.0 * ((1 << precision) - 1) ** 2
    return min(float(10.0 * np.log10(peak / mse)), PSNR_CAP)


def estimate_normals(cloud, k=12):
    """Unit normals from the smallest covariance eigenvector of k neighbors.

    Deterministic: the sign makes the first nonzero component positive, and
    a collinear neighborhood falls back to a fixed vector orthogonal to the
    dominant direction.
    """
    pts = _points(cloud)
    if k < 3:
        raise ConfigurationError("normal estimation needs k >= 3")
    if len(pts) < k:
        raise DegenerateInputError(f"cloud has {len(pts)} points, k = {k}")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    hoods = pts[idx]
    centered = hoods - hoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigval, eigvec = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = eigvec[:, :, 0].copy()
    # collinear neighborhoods: two vanishing eigenvalues, normal ill-defined
    span = np.maximum(eigval[:, 2], 1e-300)
    degenerate = eigval[:, 1] / span < 1e-12
    if degenerate.any():
        axis = eigvec[degenerate, :, 2]
        fallback = np.cross(axis, np.array([1.0, 0.0, 0.0]))
        weak = np.linalg.norm(fallback, axis=1) < 1e-9
        fallback[weak] = np.cross(axis[weak], np.array([0.0, 1.0, 0.0]))
        normals[degenerate] = fallback
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    # sign convention: first nonzero component positive
    flat = np.where(np.abs(normals) > 1e-12, normals, 0.0)
    first = flat[np.arange(len(flat)), np.argmax(flat != 0.0, axis=1)]
    normals[first < 0] *= -1.0
    return normals


def d2_mse(test, reference, normals=None):
    """Mean squared point-to-plane distance against the reference."""
    r = _points(reference)
    if normals is None:
        normals = estimate_normals(reference)
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != r.shape:
        raise ConfigurationError("one normal per reference point required")
    t = _points(test)
    _, idx = nearest_reference(t, r)
    proj = ((t - r[idx]) * normals[idx]).sum(axis=1)
    return float((proj * proj).mean())


def symmetric_psnr(a, b, precision, metric="d1", mode="max-error", normals_a=None, normals_b=None):
    """Two-direction PSNR; the mode picks which direction wins.

    max-error (default): PSNR of the larger MSE (the usual convention);
    max-psnr: the larger PSNR of the two directions.
    """
    if mode not in ("max-error", "max-psnr"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    if metric == "d1":
        m_ab = d1_mse(a, b)
        m_ba = d1_mse(b, a)
    elif metric == "d2":
        m_ab = d2_mse(a, b, normals_b)
        m_ba = d2_mse(b, a, normals_a)
    else:
        raise ConfigurationError(f"unknown metric {metric!r}")
    if mode == "max-error":
        return psnr(max(m_ab, m_ba), precision)
    return max(psnr(m_ab, precision), psnr(m_ba, precision))


# --- Bjontegaard deltas -----------------------------------------------------------


@dataclass(frozen=True)
class RDPoint:
    rate: float  # bits per point
    psnr: float  # dB

    def __post_init__(self):
        if self.rate <= 0:
            raise ConfigurationError("rate must be positive")
        if not np.isfinite(self.psnr):
            raise ConfigurationError("psnr must be finite (use the cap)")


def _curve(points):
    pts = sorted(points, key=lambda q: q.rate)
    if len(pts) < 4:
        raise EvaluationError("BD metrics need at least 4 rate points per curve")
    log_rate = np.log10([q.rate for q in pts])
    quality = np.array([q.psnr for q in pts])
    return log_rate, quality


def _bd_mean_diff(xa, ya, xb, yb):
    """Mean (fitB - fitA) over the shared support of the integration axis."""
    lo = max(xa.min(), xb.min())
    hi = min(xa.max(), xb.max())
    if hi <= lo:
        raise EvaluationError("curves share no overlap to integrate over")
    fit_a = Polynomial.fit(xa, ya, 3)
    fit_b = Polynomial.fit(xb, yb, 3)
    int_a = fit_a.integ()
    int_b = fit_b.integ()
    return ((int_b(hi) - int_b(lo)) - (int_a(hi) - int_a(lo))) / (hi - lo)


def bd_rate(curve_a, curve_b):
    """Average rate change of B against A in percent (negative = smaller)."""
    ra, qa = _curve(curve_a)
    rb, qb = _curve(curve_b)
    diff = _bd_mean_diff(qa, ra, qb, rb)  # integrate log-rate over PSNR
    return float((10.0**diff - 1.0) * 100.0)


def bd_psnr(curve_a, curve_b):
    """Average quality change of B against A in dB."""
    ra, qa = _curve(curve_a)
    rb, qb = _curve(curve_b)
    return float(_bd_mean_diff(ra, qa, rb, qb))  # integrate PSNR over log-rate


def write_rd_csv(path, rows):
    """rows: iterables of (sequence, lambda, bpp, d1_psnr, d2_psnr)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence", "lambda", "bpp", "d1_psnr", "d2_psnr"])
        for row in rows:
            writer.writerow(list(row))


def read_rd_csv(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            out.append(
                (rec["sequence"], float(rec["lambda"]), float(rec["bpp"]),
                 float(rec["d1_psnr"]), float(rec["d2_psnr"]))
            )
    return out
