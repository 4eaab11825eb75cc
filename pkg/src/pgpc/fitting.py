"""Fit body-prior parameters to a target point cloud.

No learned regressor here: a closed-form similarity initialization (scale
and centroid from exact surface moments of the prior mesh, rotation from
PCA-frame candidates scored by Chamfer distance) alternates with plain
finite-difference coordinate descent on the shape and pose coefficients.
Deterministic given the config seed, bounded by a fixed evaluation budget,
and always returns the best parameters seen.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError
from .prior import (
    N_POSE,
    N_SHAPE,
    PriorParams,
    apply_blendshapes,
    canonicalize_params,
    rodrigues,
    skin,
)


@dataclass(frozen=True)
class FitConfig:
    max_steps: int = 200       # coordinate-descent updates (shared by beta and alpha)
    fd_step: float = 1e-2
    sample_count: int = 1024   # fixed surface samples drawn from the prior mesh
    target_limit: int = 4000   # target points kept for Chamfer evaluation
    align_rounds: int = 4      # moment realignments interleaved with descent
    seed: int = 0


def chamfer_distance(a, b):
    """Symmetric mean squared nearest-neighbor distance between two clouds."""
    if len(a) == 0 or len(b) == 0:
        raise DegenerateInputError("chamfer distance of an empty cloud")
    d_ab = cKDTree(b).query(a, k=1)[0]
    d_ba = cKDTree(a).query(b, k=1)[0]
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def _axis_angle_from_matrix(r):
    """Inverse of rodrigues, magnitude in [0, pi]."""
    cos = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos))
    if angle < 1e-12:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # near-pi: axis from the symmetric part
        m = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diagonal(m), 0.0))
        if m[0, 1] < 0:
            axis[1] = -axis[1]
        if m[0, 2] < 0:
            axis[2] = -axis[2]
        if axis[0] == 0 and m[1, 2] < 0:
            axis[2] = -abs(axis[2])
        n = np.linalg.norm(axis)
        axis = axis / n if n > 0 else np.array([1.0, 0.0, 0.0])
        return axis * angle
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return axis / (2.0 * np.sin(angle)) * angle


def _surface_moments(vertices, faces):
    """Exact area-weighted centroid and second moment of a triangle mesh.

    Uses the edge-midpoint rule, which integrates quadratics exactly, so
    there is no sampling noise on the prior side of the alignment.
    """
    tri = vertices[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    total = areas.sum()
    if total <= 0:
        raise DegenerateInputError("prior mesh has zero surface area")
    mids = 0.5 * (tri + np.roll(tri, 1, axis=1))  # three edge midpoints per face
    w = np.repeat(areas / 3.0, 3)[:, None]
    flat = mids.reshape(-1, 3)
    centroid = (flat * w).sum(axis=0) / total
    second = float((((flat - centroid) ** 2).sum(axis=1) * w[:, 0]).sum() / total)
    return centroid, second


def _cloud_moments(pts):
    centroid = pts.mean(axis=0)
    second = float(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
    return centroid, second


def _principal_frame(pts):
    """Right-handed eigenvector frame, largest-variance axis first."""
    c = np.cov((pts - pts.mean(axis=0)).T)
    vals, vecs = np.linalg.eigh(c)
    frame = vecs[:, ::-1]
    if np.linalg.det(frame) < 0:
        frame[:, 2] = -frame[:, 2]
    return frame


def _rotation_candidates(target_pts, source_pts):
    """PCA-frame alignments modulo axis flips and quarter turns."""
    ft = _principal_frame(target_pts)
    fs = _principal_frame(source_pts)
    base = ft @ fs.T
    cands = []
    for sx, sy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        d = np.diag([sx, sy, sx * sy])  # det +1 flip combinations
        flip = ft @ d @ ft.T @ base
        axis = ft[:, 0]
        for k in range(4):
            cands.append(rodrigues(axis * (np.pi / 2.0) * k) @ flip)
    return cands


class _Sampler:
    """Frozen barycentric sampling operator over the template surface."""

    def __init__(self, template, count, rng):
        verts = template.mean_vertices
        tri = verts[template.faces]
        areas = 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
        )
        p = areas / areas.sum()
        self.face_idx = rng.choice(len(p), size=count, p=p)
        r1 = np.sqrt(rng.random(count))
        r2 = rng.random(count)
        self.bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
        self.faces = template.faces[self.face_idx]

    def __call__(self, vertices):
        tri = vertices[self.faces]
        return np.einsum("nk,nkc->nc", self.bary, tri)


def _posed_vertices(template, params, with_translation=True):
    verts = apply_blendshapes(template, params)
    p = params if with_translation else replace(params, translation=np.zeros(3))
    return skin(template, verts, p).vertices


def _sample_world(template, params, sampler):
    return sampler(_posed_vertices(template, params)) * params.scale


def fit_params(target, template, config=None):
    """Recover PriorParams (incl. scale) approximating a target cloud.

    The target may be a PointCloud or a raw (N, 3) array; coordinates are
    treated as the world/voxel frame the prior will be scaled into.
    """
    cfg = config if config is not None else FitConfig()
    pts = np.asarray(getattr(target, "points", target), dtype=np.float64).reshape(-1, 3)
    if len(pts) < 100:
        raise DegenerateInputError(f"fit target has {len(pts)} points, need >= 100")
    if np.ptp(pts, axis=0).max() <= 0:
        raise DegenerateInputError("fit target is a single repeated point")
    rng = np.random.default_rng(cfg.seed)
    mu_t, m2_t = _cloud_moments(pts)  # moments from the full target
    if len(pts) > cfg.target_limit:
        pts = pts[rng.choice(len(pts), cfg.target_limit, replace=False)]

    sampler = _Sampler(template, cfg.sample_count, rng)

    def evaluate(params):
        return chamfer_distance(_sample_world(template, params, sampler), pts)

    def align(params, loss):
        """Closed-form scale/translation refit from exact surface moments."""
        body = _posed_vertices(template, params, with_translation=False)
        mu_b, m2_b = _surface_moments(body, template.faces)
        new_scale = float(np.sqrt(m2_t / m2_b))
        new_delta = mu_t / new_scale - mu_b
        trial = replace(
            params,
            pose=params.pose.copy(),
            shape=params.shape.copy(),
            translation=new_delta,
            scale=new_scale,
        )
        trial_loss = evaluate(trial)
        return (trial, trial_loss) if trial_loss < loss else (params, loss)

    # similarity init: moment scale + best PCA-frame rotation by Chamfer
    mu_r, m2_r = _surface_moments(template.mean_vertices, template.faces)
    s0 = float(np.sqrt(m2_t / m2_r))
    rest_cloud = sampler(template.mean_vertices)
    loss = np.inf
    params = None
    for r in _rotation_candidates(pts, rest_cloud):
        cand = PriorParams(
            pose=np.zeros(N_POSE),
            shape=np.zeros(N_SHAPE),
            rotation=_axis_angle_from_matrix(r),
            translation=mu_t / s0 - r @ mu_r,
            gender=0.0,
            scale=s0,
        )
        cand_loss = evaluate(cand)
        if cand_loss < loss:
            loss, params = cand_loss, cand
    params, loss = align(params, loss)

    if cfg.max_steps <= 0:
        return canonicalize_params(params)

    steps_left = cfg.max_steps
    coords = [("shape", i) for i in range(N_SHAPE)] + [("pose", i) for i in range(N_POSE)]
    sweep_pos = 0
    chunk = max(1, cfg.max_steps // max(cfg.align_rounds, 1))
    while steps_left > 0:
        for _ in range(min(chunk, steps_left)):
            field, idx = coords[sweep_pos % len(coords)]
            sweep_pos += 1
            vec = getattr(params, field)
            base = vec[idx]
            for sign in (1.0, -1.0):
                vec[idx] = base + sign * cfg.fd_step
                trial_loss = evaluate(params)
                if trial_loss < loss:
                    loss = trial_loss
                    base = vec[idx]
            vec[idx] = base
        steps_left -= min(chunk, steps_left)
        params, loss = align(params, loss)

    return canonicalize_params(params)
