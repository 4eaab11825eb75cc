"""Body template assets: procedural toy model, binary file I/O, ingestion.

The toy template is a capsule-style humanoid (~500 vertices, 24 joints on
the standard kinematic tree) built from tapered tubes so the whole test
suite runs without third-party model data.  Real templates can be ingested
from an .npz archive via convert_template.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ParseError
from .prior import TemplateModel

TEMPLATE_MAGIC = b"PGT1"

# Joint layout: 0 pelvis, 1/2 hips, 3 spine1, 4/5 knees, 6 spine2, 7/8 ankles,
# 9 chest, 10/11 feet, 12 neck, 13/14 collars, 15 head, 16/17 shoulders,
# 18/19 elbows, 20/21 wrists, 22/23 hands.
KINEMATIC_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)

_REST_JOINTS = np.array([
    [0.00, 0.00, 0.00],    # 0 pelvis
    [0.09, 0.00, -0.06],   # 1 left hip
    [-0.09, 0.00, -0.06],  # 2 right hip
    [0.00, 0.00, 0.11],    # 3 spine1
    [0.10, 0.00, -0.50],   # 4 left knee
    [-0.10, 0.00, -0.50],  # 5 right knee
    [0.00, 0.00, 0.24],    # 6 spine2
    [0.10, 0.00, -0.92],   # 7 left ankle
    [-0.10, 0.00, -0.92],  # 8 right ankle
    [0.00, 0.00, 0.38],    # 9 chest
    [0.11, 0.12, -0.98],   # 10 left foot
    [-0.11, 0.12, -0.98],  # 11 right foot
    [0.00, 0.00, 0.55],    # 12 neck
    [0.07, 0.00, 0.47],    # 13 left collar
    [-0.07, 0.00, 0.47],   # 14 right collar
    [0.00, 0.00, 0.68],    # 15 head
    [0.18, 0.00, 0.50],    # 16 left shoulder
    [-0.18, 0.00, 0.50],   # 17 right shoulder
    [0.45, 0.00, 0.50],    # 18 left elbow
    [-0.45, 0.00, 0.50],   # 19 right elbow
    [0.70, 0.00, 0.50],    # 20 left wrist
    [-0.70, 0.00, 0.50],   # 21 right wrist
    [0.78, 0.00, 0.50],    # 22 left hand
    [-0.78, 0.00, 0.50],   # 23 right hand
])


def _frame(axis):
    """Orthonormal basis perpendicular to a bone axis."""
    axis = axis / np.linalg.norm(axis)
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


class _MeshBuilder:
    def __init__(self):
        self.verts = []
        self.faces = []
        self.weights = []  # (joint, weight) pairs per vertex

    def add_tube(self, a, b, r_a, r_b, knots, n_rings=3, n_seg=8, cap_a=True, cap_b=True):
        """Tapered tube from a to b; knots [(joint, t)] set the skin ramp."""
        a, b = np.asarray(a, float), np.asarray(b, float)
        e1, e2 = _frame(b - a)
        ring_rows = []
        ts = np.linspace(0.0, 1.0, n_rings)
        for t in ts:
            center = a + t * (b - a)
            radius = r_a + t * (r_b - r_a)
            row = []
            for s in range(n_seg):
                phi = 2.0 * np.pi * s / n_seg
                row.append(len(self.verts))
                self.verts.append(center + radius * (np.cos(phi) * e1 + np.sin(phi) * e2))
                self.weights.append(self._ramp(knots, t))
            ring_rows.append(row)
        for r0, r1 in zip(ring_rows[:-1], ring_rows[1:]):
            for s in range(n_seg):
                s2 = (s + 1) % n_seg
                self.faces.append([r0[s], r1[s], r1[s2]])
                self.faces.append([r0[s], r1[s2], r0[s2]])
        if cap_a:
            self._cap(a, ring_rows[0], self._ramp(knots, 0.0), flip=True)
        if cap_b:
            self._cap(b, ring_rows[-1], self._ramp(knots, 1.0), flip=False)

    def add_ellipsoid(self, center, radii, joint, n_lat=5, n_lon=8):
        center = np.asarray(center, float)
        radii = np.asarray(radii, float)
        top = len(self.verts)
        self.verts.append(center + radii * np.array([0, 0, 1.0]))
        self.weights.append([(joint, 1.0)])
        rows = []
        for i in range(1, n_lat):
            th = np.pi * i / n_lat
            row = []
            for s in range(n_lon):
                phi = 2.0 * np.pi * s / n_lon
                row.append(len(self.verts))
                self.verts.append(center + radii * np.array(
                    [np.sin(th) * np.cos(phi), np.sin(th) * np.sin(phi), np.cos(th)]))
                self.weights.append([(joint, 1.0)])
            rows.append(row)
        bottom = len(self.verts)
        self.verts.append(center + radii * np.array([0, 0, -1.0]))
        self.weights.append([(joint, 1.0)])
        for s in range(n_lon):
            s2 = (s + 1) % n_lon
            self.faces.append([top, rows[0][s], rows[0][s2]])
        for r0, r1 in zip(rows[:-1], rows[1:]):
            for s in range(n_lon):
                s2 = (s + 1) % n_lon
                self.faces.append([r0[s], r1[s], r1[s2]])
                self.faces.append([r0[s], r1[s2], r0[s2]])
        for s in range(n_lon):
            s2 = (s + 1) % n_lon
            self.faces.append([bottom, rows[-1][s2], rows[-1][s]])

    @staticmethod
    def _ramp(knots, t):
        if len(knots) == 1 or t <= knots[0][1]:
            return [(knots[0][0], 1.0)]
        for (j0, t0), (j1, t1) in zip(knots[:-1], knots[1:]):
            if t <= t1:
                w = (t - t0) / (t1 - t0)
                return [(j0, 1.0 - w), (j1, w)]
        return [(knots[-1][0], 1.0)]

    def _cap(self, center, ring, wts, flip):
        ci = len(self.verts)
        self.verts.append(np.asarray(center, float))
        self.weights.append(wts)
        n = len(ring)
        for s in range(n):
            s2 = (s + 1) % n
            tri = [ci, ring[s], ring[s2]] if flip else [ci, ring[s2], ring[s]]
            self.faces.append(tri)


def _shape_basis(verts: np.ndarray) -> np.ndarray:
    """Ten smooth deformation fields: global size, axis stretches, local bulges."""
    v = verts
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    zero = np.zeros_like(x)
    gauss = lambda c, s: np.exp(-(((z - c) / s) ** 2))
    fields = [
        0.10 * v,                                             # overall size
        0.10 * np.stack([zero, zero, z], 1),                  # height
        0.10 * np.stack([x, zero, zero], 1),                  # width
        0.10 * np.stack([zero, y, zero], 1),                  # depth
        0.10 * (gauss(0.2, 0.3)[:, None] * np.stack([x, y, zero], 1)),          # torso girth
        0.15 * (expit(-(z + 0.06) / 0.05)[:, None] * np.stack([zero, zero, -np.ones_like(x)], 1)),  # leg length
        0.15 * (expit((np.abs(x) - 0.22) / 0.05)[:, None] * np.stack([np.sign(x), zero, zero], 1)),  # arm length
        0.10 * (gauss(0.68, 0.1)[:, None] * (v - np.array([0, 0, 0.68]))),      # head size
        0.08 * ((expit((np.abs(x) - 0.12) / 0.04) * gauss(0.5, 0.12))[:, None]
                * np.stack([np.sign(x), zero, zero], 1)),                        # shoulder width
        0.08 * ((gauss(0.1, 0.12) * expit(y / 0.02))[:, None]
                * np.stack([zero, np.ones_like(x), zero], 1)),                   # belly
    ]
    return np.stack(fields, axis=2)


def build_toy_template() -> TemplateModel:
    """Procedural humanoid on the 24-joint tree; deterministic, no assets."""
    j = _REST_JOINTS
    mb = _MeshBuilder()
    mb.add_tube(j[0] + [0, 0, -0.08], j[9], 0.13, 0.125,
                [(0, 0.0), (3, 0.35), (6, 0.66), (9, 1.0)], n_rings=5, n_seg=10, cap_b=False)
    mb.add_tube(j[9], j[12], 0.10, 0.045, [(9, 0.0), (12, 1.0)], n_rings=3, n_seg=8, cap_a=False)
    mb.add_ellipsoid(j[15] + [0, 0, 0.04], [0.085, 0.10, 0.115], 15)
    for hip, knee, ankle, foot, collar, shoulder, elbow, wrist, hand in (
            (1, 4, 7, 10, 13, 16, 18, 20, 22), (2, 5, 8, 11, 14, 17, 19, 21, 23)):
        mb.add_tube(j[hip], j[knee], 0.075, 0.055, [(hip, 0.0), (knee, 1.0)], n_rings=4)
        mb.add_tube(j[knee], j[ankle], 0.055, 0.038, [(knee, 0.0), (ankle, 1.0)], n_rings=3)
        mb.add_tube(j[ankle], j[foot], 0.038, 0.03, [(ankle, 0.0), (foot, 1.0)], n_rings=2)
        mb.add_tube(j[collar], j[shoulder], 0.055, 0.05, [(collar, 0.0), (shoulder, 1.0)], n_rings=2)
        mb.add_tube(j[shoulder], j[elbow], 0.048, 0.04, [(shoulder, 0.0), (elbow, 1.0)], n_rings=3)
        mb.add_tube(j[elbow], j[wrist], 0.038, 0.03, [(elbow, 0.0), (wrist, 1.0)], n_rings=3)
        mb.add_tube(j[wrist], j[hand], 0.028, 0.02, [(wrist, 0.0), (hand, 1.0)], n_rings=2)

    verts = np.array(mb.verts)
    faces = np.array(mb.faces, dtype=np.int64)
    n_v = len(verts)

    weights = np.zeros((n_v, len(j)))
    for vi, pairs in enumerate(mb.weights):
        for joint, w in pairs:
            weights[vi, joint] += w
    weights /= weights.sum(axis=1, keepdims=True)

    # Inverse-distance regressor over the nearest ring of vertices per joint.
    regressor = np.zeros((len(j), n_v))
    for ji, pos in enumerate(j):
        d = np.linalg.norm(verts - pos, axis=1)
        near = np.argsort(d)[:10]
        w = 1.0 / (d[near] + 1e-3)
        regressor[ji, near] = w / w.sum()

    return TemplateModel(
        mean_vertices=verts,
        faces=faces,
        shape_basis=_shape_basis(verts),
        pose_basis=np.zeros((n_v, 3, 0)),
        joint_regressor=regressor,
        skin_weights=weights,
        parents=KINEMATIC_PARENTS.copy(),
    )


# ---------------------------------------------------------------------------
# Binary template file: magic, five u32 counts, then f32 arrays in order
# (mean vertices, faces, shape basis, pose basis, joint regressor,
# skin weights, kinematic parents).  Everything little-endian float32;
# integer tables round-trip exactly at these sizes.

def save_template(template: TemplateModel, path):
    v, f, j = template.n_vertices, len(template.faces), template.n_joints
    n_shape = template.shape_basis.shape[2]
    n_pose = template.pose_basis.shape[2] if template.pose_basis.size else 0
    with open(path, "wb") as fh:
        fh.write(TEMPLATE_MAGIC)
        fh.write(np.array([v, f, j, n_shape, n_pose], dtype="<u4").tobytes())
        for arr in (template.mean_vertices, template.faces, template.shape_basis,
                    template.pose_basis, template.joint_regressor,
                    template.skin_weights, template.parents):
            fh.write(np.asarray(arr, dtype=np.float64).astype("<f4").tobytes())


def load_template(path) -> TemplateModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TEMPLATE_MAGIC:
        raise ParseError("bad template magic", position="byte 0")
    if len(blob) < 24:
        raise ParseError("truncated template header", position=f"byte {len(blob)}")
    v, f, j, n_shape, n_pose = (int(x) for x in np.frombuffer(blob, dtype="<u4", count=5, offset=4))
    off = 24
    sizes = [v * 3, f * 3, v * 3 * n_shape, v * 3 * n_pose, j * v, v * j, j]
    arrays = []
    for size in sizes:
        need = 4 * size
        if off + need > len(blob):
            raise ParseError("truncated template payload", position=f"byte {off}")
        arrays.append(np.frombuffer(blob, dtype="<f4", count=size, offset=off).astype(np.float64))
        off += need
    mean, faces, shape_b, pose_b, regressor, weights, parents = arrays
    return TemplateModel(
        mean_vertices=mean.reshape(v, 3),
        faces=faces.reshape(f, 3).astype(np.int64),
        shape_basis=shape_b.reshape(v, 3, n_shape),
        pose_basis=pose_b.reshape(v, 3, n_pose),
        joint_regressor=regressor.reshape(j, v),
        skin_weights=weights.reshape(v, j),
        parents=parents.reshape(j).astype(np.int64),
    )


def convert_template(npz_path, out_path):
    """Ingest an externally obtained template from an .npz archive.

    Expected keys: v_template (V,3), f (F,3), shapedirs (V,3,S), posedirs
    (V,3,P) optional, J_regressor (J,V), weights (V,J), parents (J,).
    """
    data = np.load(npz_path)
    def get(*names, required=True):
        for n in names:
            if n in data:
                return np.asarray(data[n])
        if required:
            raise ParseError(f"archive lacks required array {names[0]!r}", position=npz_path)
        return None

    v_template = get("v_template", "vertices")
    pose_b = get("posedirs", required=False)
    template = TemplateModel(
        mean_vertices=v_template,
        faces=get("f", "faces"),
        shape_basis=get("shapedirs", "shape_basis"),
        pose_basis=pose_b if pose_b is not None else np.zeros((len(v_template), 3, 0)),
        joint_regressor=get("J_regressor", "joint_regressor"),
        skin_weights=get("weights", "skin_weights"),
        parents=get("parents", "kintree_parents"),
    )
    save_template(template, out_path)
    return template
