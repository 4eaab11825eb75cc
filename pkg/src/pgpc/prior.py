"""Parametric body prior: parameter set, blendshapes, skinning, quantization.

The parameter set is 86 scalars (69 pose, 10 shape, 3 root rotation, 3
translation, 1 gender) plus a similarity scale mapping model units to voxel
units.  Pose and rotation are axis-angle.  Skinning is linear blend skinning
along a fixed kinematic tree; the root rotation acts about the origin after
per-joint posing, and the translation is added last.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ParameterRangeError, ParseError
from .geometry import Mesh

N_JOINTS = 24
N_POSE_JOINTS = N_JOINTS - 1
N_POSE = 3 * N_POSE_JOINTS
N_SHAPE = 10
N_PARAMS = N_POSE + N_SHAPE + 3 + 3 + 1  # 86

PARAM_NAMES = (
    [f"pose_{i}" for i in range(N_POSE)]
    + [f"shape_{i}" for i in range(N_SHAPE)]
    + [f"rot_{i}" for i in range(3)]
    + [f"trans_{i}" for i in range(3)]
    + ["gender"]
)


@dataclass
class PriorParams:
    pose: np.ndarray = field(default_factory=lambda: np.zeros(N_POSE))
    shape: np.ndarray = field(default_factory=lambda: np.zeros(N_SHAPE))
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gender: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(N_POSE)
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(N_SHAPE)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        vec = self.as_vector()
        if not (np.isfinite(vec).all() and np.isfinite(self.scale)):
            raise ConfigurationError("non-finite prior parameter")
        if self.scale <= 0:
            raise ConfigurationError("scale must be positive")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.pose, self.shape, self.rotation, self.translation, [self.gender]])

    @classmethod
    def from_vector(cls, vec, scale: float = 1.0) -> "PriorParams":
        vec = np.asarray(vec, dtype=np.float64).reshape(N_PARAMS)
        return cls(vec[:N_POSE], vec[N_POSE:N_POSE + N_SHAPE],
                   vec[79:82], vec[82:85], float(vec[85]), scale)


@dataclass
class TemplateModel:
    mean_vertices: np.ndarray      # (V, 3)
    faces: np.ndarray              # (F, 3)
    shape_basis: np.ndarray        # (V, 3, n_shape)
    pose_basis: np.ndarray         # (V, 3, n_pose), may be empty
    joint_regressor: np.ndarray    # (J, V)
    skin_weights: np.ndarray       # (V, J)
    parents: np.ndarray            # (J,), parents[0] == -1

    def __post_init__(self):
        self.mean_vertices = np.asarray(self.mean_vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.pose_basis = np.asarray(self.pose_basis, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        v = len(self.mean_vertices)
        j = len(self.parents)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ConfigurationError("face index out of range")
        if self.joint_regressor.shape != (j, v):
            raise ConfigurationError(f"joint regressor must be ({j}, {v})")
        if self.skin_weights.shape != (v, j):
            raise ConfigurationError(f"skin weights must be ({v}, {j})")
        if self.skin_weights.min() < 0 or np.abs(self.skin_weights.sum(axis=1) - 1.0).max() > 1e-6:
            raise ConfigurationError("skin weight rows must be nonnegative and sum to 1")
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0) or np.any(self.parents[1:] >= np.arange(1, j)):
            raise ConfigurationError("kinematic parents must form a tree rooted at joint 0")

    @property
    def n_vertices(self):
        return len(self.mean_vertices)

    @property
    def n_joints(self):
        return len(self.parents)


def select_template(templates: list[TemplateModel], gender: float) -> TemplateModel:
    """Threshold the gender parameter at 0.5 over the available templates."""
    if not templates:
        raise ConfigurationError("no templates available")
    idx = 1 if gender >= 0.5 else 0
    return templates[min(idx, len(templates) - 1)]


def rodrigues(vec: np.ndarray) -> np.ndarray:
    """Axis-angle vector to rotation matrix."""
    vec = np.asarray(vec, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(vec)
    if angle < 1e-12:
        return np.eye(3)
    axis = vec / angle
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def canonicalize_axis_angle(vec: np.ndarray) -> np.ndarray:
    """Equivalent axis-angle with magnitude in [0, pi]."""
    vec = np.asarray(vec, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(vec)
    if angle <= np.pi:
        return vec.copy()
    axis = vec / angle
    reduced = np.fmod(angle, 2.0 * np.pi)
    if reduced > np.pi:
        return axis * (reduced - 2.0 * np.pi)  # flips direction, magnitude 2pi-reduced
    return axis * reduced


def canonicalize_params(params: PriorParams) -> PriorParams:
    pose = np.concatenate([canonicalize_axis_angle(v) for v in params.pose.reshape(-1, 3)])
    return replace(params, pose=pose, rotation=canonicalize_axis_angle(params.rotation))


def shape_blend(template: TemplateModel, shape: np.ndarray) -> np.ndarray:
    return template.mean_vertices + template.shape_basis @ np.asarray(shape, dtype=np.float64)


def pose_feature(pose: np.ndarray) -> np.ndarray:
    """Vectorized rotation-matrix deviations (R(alpha_j) - I) over non-root joints."""
    feats = [rodrigues(v) - np.eye(3) for v in np.asarray(pose).reshape(N_POSE_JOINTS, 3)]
    return np.concatenate([f.ravel() for f in feats])


def apply_blendshapes(template: TemplateModel, params: PriorParams) -> np.ndarray:
    """Template vertices displaced by shape and (optionally) pose blendshapes."""
    if template.shape_basis.shape[2] != len(params.shape):
        raise ConfigurationError(
            f"shape basis has {template.shape_basis.shape[2]} components, params give {len(params.shape)}"
        )
    v = shape_blend(template, params.shape)
    n_pose = template.pose_basis.shape[2] if template.pose_basis.size else 0
    if n_pose:
        pf = pose_feature(params.pose)
        if n_pose != len(pf):
            raise ConfigurationError(f"pose basis has {n_pose} components, expected {len(pf)}")
        v = v + template.pose_basis @ pf
    return v


def skin(template: TemplateModel, vertices: np.ndarray, params: PriorParams) -> Mesh:
    """Linear blend skinning of blendshaped vertices under the pose parameters.

    Joint rest positions are regressed from the shape-only vertices; each
    joint rotates about its own rest position, the root rotation acts about
    the origin, and the translation is added at the end.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.shape != template.mean_vertices.shape:
        raise ConfigurationError("vertex matrix shape does not match template")
    joints = template.joint_regressor @ shape_blend(template, params.shape)
    j = template.n_joints
    rots = [rodrigues(params.rotation)]
    rots += [rodrigues(v) for v in params.pose.reshape(N_POSE_JOINTS, 3)]

    eye = np.eye(3)
    world_rot = [None] * j
    disp = [None] * j  # world joint position minus rest position
    world_rot[0] = rots[0]
    disp[0] = (rots[0] - eye) @ joints[0]
    for idx in range(1, j):
        par = template.parents[idx]
        world_rot[idx] = world_rot[par] @ rots[idx]
        disp[idx] = disp[par] + (world_rot[par] - eye) @ (joints[idx] - joints[par])

    # Each joint's rigid map written as v + correction so the rest pose is
    # reproduced bit-exactly (all corrections vanish at identity).
    corr = np.empty((j, len(vertices), 3))
    for idx in range(j):
        corr[idx] = (vertices - joints[idx]) @ (world_rot[idx].T - eye) + disp[idx]
    out = vertices + np.einsum("vj,jvc->vc", template.skin_weights, corr) + params.translation
    return Mesh(out, template.faces)


def pose_mesh(template: TemplateModel, params: PriorParams) -> Mesh:
    """Blendshapes plus skinning in one call."""
    return skin(template, apply_blendshapes(template, params), params)


# ---------------------------------------------------------------------------
# Quantization and serialization

PARAM_QUANT_STEP = 0.001
SCALE_FIXED_ONE = 1 << 16
PARAM_BYTES = 2 * N_PARAMS + 4  # 86 int16 values plus 16.16 fixed-point scale


@dataclass
class QuantizedParams:
    values: np.ndarray  # (86,) int16
    scale_fixed: int    # uint32, 16.16 fixed point

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int16).reshape(N_PARAMS)
        self.scale_fixed = int(self.scale_fixed)
        if not 0 < self.scale_fixed <= 0xFFFFFFFF:
            raise ConfigurationError("fixed-point scale out of range")


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_params(params: PriorParams) -> QuantizedParams:
    vec = params.as_vector()
    q = _round_half_away(vec / PARAM_QUANT_STEP)
    bad = np.nonzero(np.abs(q) > 32767)[0]
    if len(bad):
        i = bad[0]
        raise ParameterRangeError(f"parameter {PARAM_NAMES[i]} = {vec[i]} exceeds +-32.767")
    s = int(np.floor(params.scale * SCALE_FIXED_ONE + 0.5))
    if not 0 < s <= 0xFFFFFFFF:
        raise ParameterRangeError(f"scale {params.scale} not representable in 16.16 fixed point")
    return QuantizedParams(q.astype(np.int16), s)


def dequantize_params(q: QuantizedParams) -> PriorParams:
    vec = q.values.astype(np.float64) * PARAM_QUANT_STEP
    return PriorParams.from_vector(vec, scale=q.scale_fixed / SCALE_FIXED_ONE)


def encode_params(q: QuantizedParams) -> bytes:
    return q.values.astype("<i2").tobytes() + np.uint32(q.scale_fixed).astype("<u4").tobytes()


def decode_params(data: bytes) -> QuantizedParams:
    if len(data) != PARAM_BYTES:
        raise ParseError(
            f"parameter payload must be {PARAM_BYTES} bytes, got {len(data)}",
            position=f"byte {min(len(data), PARAM_BYTES)}",
        )
    values = np.frombuffer(data[: 2 * N_PARAMS], dtype="<i2").astype(np.int16)
    scale_fixed = int(np.frombuffer(data[2 * N_PARAMS:], dtype="<u4")[0])
    return QuantizedParams(values, scale_fixed)


# ---------------------------------------------------------------------------
# Plain-text parameter files (fitting bypass / ingestion)

def write_params_text(params: PriorParams, path):
    vec = params.as_vector()
    with open(path, "w") as fh:
        for name, v in zip(PARAM_NAMES, vec):
            fh.write(f"{name} = {v:.6f}\n")
        fh.write(f"scale = {params.scale:.6f}\n")


def read_params_text(path) -> PriorParams:
    slots = {name: i for i, name in enumerate(PARAM_NAMES)}
    vec = np.zeros(N_PARAMS)
    scale = 1.0
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected 'name = value', got {line!r}", position=f"line {ln}")
            name, _, sval = line.partition("=")
            name = name.strip()
            try:
                value = float(sval.strip())
            except ValueError:
                raise ParseError(f"bad numeric value {sval.strip()!r}", position=f"line {ln}") from None
            if name == "scale":
                scale = value
            elif name in slots:
                vec[slots[name]] = value
            else:
                raise ParseError(f"unknown parameter {name!r}", position=f"line {ln}")
    return PriorParams.from_vector(vec, scale=scale)
