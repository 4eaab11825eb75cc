"""Point cloud and mesh I/O, voxelization, and surface sampling."""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, DegenerateInputError, ParseError
from .sparse import lexsorted_unique

VOXEL_EPS = 1e-6  # voxelize maps onto [0, 2^p - eps) so the max point lands on 2^p - 1


@dataclass
class PointCloud:
    points: np.ndarray
    precision: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ConfigurationError(f"points must be (N, 3), got {self.points.shape}")
        if self.points.size and not np.isfinite(self.points.astype(np.float64)).all():
            raise ConfigurationError("non-finite point coordinates")
        if self.precision is not None:
            hi = 1 << self.precision
            pts = self.points
            if pts.size and (pts.min() < 0 or pts.max() >= hi or np.any(pts != np.floor(pts))):
                raise ConfigurationError(f"points are not integers in [0, 2^{self.precision})")

    def __len__(self):
        return len(self.points)


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ConfigurationError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.size:
            if self.faces.ndim != 2 or self.faces.shape[1] != 3:
                raise ConfigurationError(f"faces must be (F, 3), got {self.faces.shape}")
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ConfigurationError("face index out of range")
        else:
            self.faces = self.faces.reshape(0, 3)

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_ply_header(blob: bytes):
    end = blob.find(b"end_header")
    if end < 0:
        raise ParseError("missing end_header", position="header")
    end = blob.index(b"\n", end) + 1
    lines = blob[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("not a PLY file", position="line 1")
    fmt = None
    elements = []  # (name, count, [(kind, name)]) where kind is dtype str or ("list", cdt, idt)
    for ln, raw in enumerate(lines[1:], start=2):
        tok = raw.strip().split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported format {raw.strip()!r}", position=f"line {ln}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError("malformed element line", position=f"line {ln}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", position=f"line {ln}")
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise ParseError("malformed list property", position=f"line {ln}")
                elements[-1][2].append((("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]), tok[4]))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise ParseError(f"unsupported property type {tok[1]!r}", position=f"line {ln}")
                elements[-1][2].append((_PLY_TYPES[tok[1]], tok[2]))
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", position=f"line {ln}")
    if fmt is None:
        raise ParseError("missing format line", position="header")
    return fmt, elements, end


def _read_ascii_element(tokens, pos, count, props, name):
    rows = []
    for r in range(count):
        row = []
        for kind, _ in props:
            if isinstance(kind, tuple):
                if pos >= len(tokens):
                    raise ParseError(f"short body in element {name!r}", position=f"row {r}")
                k = int(tokens[pos]); pos += 1
                if pos + k > len(tokens):
                    raise ParseError(f"short list in element {name!r}", position=f"row {r}")
                row.append([float(t) for t in tokens[pos:pos + k]])
                pos += k
            else:
                if pos >= len(tokens):
                    raise ParseError(f"short body in element {name!r}", position=f"row {r}")
                row.append(float(tokens[pos])); pos += 1
        rows.append(row)
    return rows, pos


def read_ply(path):
    """Read a PLY file into a PointCloud, or a Mesh when faces are present."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fmt, elements, body_start = _parse_ply_header(blob)
    body = blob[body_start:]
    data = {}
    if fmt == "ascii":
        tokens = body.decode("ascii", errors="replace").split()
        pos = 0
        for name, count, props in elements:
            rows, pos = _read_ascii_element(tokens, pos, count, props, name)
            data[name] = (props, rows)
    else:
        off = 0
        for name, count, props in elements:
            has_list = any(isinstance(kind, tuple) for kind, _ in props)
            if not has_list:
                dt = np.dtype([(pname, "<" + kind) for kind, pname in props])
                need = dt.itemsize * count
                if off + need > len(body):
                    raise ParseError(f"short body in element {name!r}", position=f"byte {body_start + off}")
                arr = np.frombuffer(body, dtype=dt, count=count, offset=off)
                off += need
                data[name] = (props, arr)
            else:
                rows = []
                for r in range(count):
                    row = []
                    for kind, _ in props:
                        if isinstance(kind, tuple):
                            _, cdt, idt = kind
                            csz = np.dtype(cdt).itemsize
                            if off + csz > len(body):
                                raise ParseError(f"short body in element {name!r}", position=f"byte {body_start + off}")
                            k = int(np.frombuffer(body, dtype="<" + cdt, count=1, offset=off)[0])
                            off += csz
                            isz = np.dtype(idt).itemsize * k
                            if off + isz > len(body):
                                raise ParseError(f"short list in element {name!r}", position=f"byte {body_start + off}")
                            row.append(np.frombuffer(body, dtype="<" + idt, count=k, offset=off).tolist())
                            off += isz
                        else:
                            psz = np.dtype(kind).itemsize
                            if off + psz > len(body):
                                raise ParseError(f"short body in element {name!r}", position=f"byte {body_start + off}")
                            row.append(float(np.frombuffer(body, dtype="<" + kind, count=1, offset=off)[0]))
                            off += psz
                    rows.append(row)
                data[name] = (props, rows)

    if "vertex" not in data:
        raise ParseError("no vertex element", position="header")
    props, rows = data["vertex"]
    names = [p for _, p in props]
    for ax in ("x", "y", "z"):
        if ax not in names:
            raise ParseError(f"vertex element lacks property {ax!r}", position="header")
    if isinstance(rows, np.ndarray):
        pts = np.stack([rows[ax].astype(rows[ax].dtype.newbyteorder("=")) for ax in ("x", "y", "z")], axis=1)
    else:
        ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
        pts = np.array([[r[ix], r[iy], r[iz]] for r in rows], dtype=np.float64).reshape(-1, 3)

    faces = None
    if "face" in data:
        fprops, frows = data["face"]
        fnames = [p for _, p in fprops]
        li = next((i for i, (kind, p) in enumerate(fprops)
                   if isinstance(kind, tuple) and p in ("vertex_indices", "vertex_index")), None)
        if li is not None and len(frows):
            out = []
            for r, row in enumerate(frows):
                idx = row[li]
                if len(idx) != 3:
                    raise ParseError("only triangular faces are supported", position=f"face {r}")
                out.append(idx)
            faces = np.array(out, dtype=np.int64)
        del fnames
    if faces is not None and len(faces):
        mesh = Mesh(pts.astype(np.float64), faces)
        areas = mesh.triangle_areas()
        keep = areas > 0
        if not keep.all():
            mesh = Mesh(mesh.vertices, mesh.faces[keep])
        return mesh
    return PointCloud(pts)


def _fmt_value(v, kind):
    if kind in ("f4",):
        return f"{v:.9g}"
    if kind in ("f8",):
        return f"{v:.17g}"
    return str(int(v))


def write_ply(data, path, binary: bool = True):
    """Write a PointCloud or Mesh; binary little-endian by default."""
    if isinstance(data, Mesh):
        pts, faces = data.vertices, data.faces
    else:
        pts, faces = data.points, None
    pts = np.asarray(pts)
    if np.issubdtype(pts.dtype, np.integer):
        kind = "i4"
        pts = pts.astype(np.int32)
    elif pts.dtype == np.float32:
        kind = "f4"
    else:
        kind = "f8"
        pts = pts.astype(np.float64)
    tname = {"i4": "int", "f4": "float", "f8": "double"}[kind]

    lines = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
             f"element vertex {len(pts)}"]
    lines += [f"property {tname} {ax}" for ax in ("x", "y", "z")]
    if faces is not None:
        lines.append(f"element face {len(faces)}")
        lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")

    with open(path, "wb") as fh:
        fh.write(header)
        if binary:
            fh.write(np.ascontiguousarray(pts, dtype="<" + kind).tobytes())
            if faces is not None:
                rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
                rec["n"] = 3
                rec["idx"] = faces
                fh.write(rec.tobytes())
        else:
            out = []
            for row in pts:
                out.append(" ".join(_fmt_value(v, kind) for v in row))
            if faces is not None:
                for row in faces:
                    out.append("3 " + " ".join(str(int(v)) for v in row))
            fh.write(("\n".join(out) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# Voxelization

def voxelize(cloud: PointCloud, precision: int, box=None) -> PointCloud:
    """Quantize a cloud onto the [0, 2^p)^3 lattice.

    A shared isotropic extent (the largest axis range) preserves aspect
    ratio.  `box` optionally pins (mins, extent) so different clouds can
    share one grid; coordinates falling outside are clamped into range.
    """
    if not 1 <= precision <= 16:
        raise ConfigurationError(f"precision must be in [1, 16], got {precision}")
    pts = np.asarray(cloud.points, dtype=np.float64)
    if len(pts) == 0:
        raise DegenerateInputError("empty point cloud")
    hi = 1 << precision
    if box is None:
        if np.all(pts == np.floor(pts)) and pts.min() >= 0 and pts.max() < hi:
            return PointCloud(lexsorted_unique(pts.astype(np.int64)), precision)
        mins = pts.min(axis=0)
        extent = float(np.max(pts.max(axis=0) - mins))
    else:
        mins, extent = box
        mins = np.asarray(mins, dtype=np.float64)
        extent = float(extent)
    if extent <= 0:
        raise DegenerateInputError("zero-extent bounding box")
    scaled = np.floor((pts - mins) / extent * (hi - VOXEL_EPS))
    scaled = np.clip(scaled, 0, hi - 1).astype(np.int64)
    return PointCloud(lexsorted_unique(scaled), precision)


# ---------------------------------------------------------------------------
# Poisson-disk surface sampling (greedy sample elimination)

def _sample_on_triangles(mesh: Mesh, count: int, rng: np.random.Generator) -> np.ndarray:
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not len(mesh.faces) or total <= 0:
        raise DegenerateInputError("mesh has no positive-area faces")
    tri = rng.choice(len(areas), size=count, p=areas / total)
    u = rng.random(count)
    v = rng.random(count)
    r1 = np.sqrt(u)
    a = mesh.vertices[mesh.faces[tri, 0]]
    b = mesh.vertices[mesh.faces[tri, 1]]
    c = mesh.vertices[mesh.faces[tri, 2]]
    return (1.0 - r1)[:, None] * a + (r1 * (1.0 - v))[:, None] * b + (r1 * v)[:, None] * c


def sample_surface_uniform(mesh: Mesh, count: int, seed: int = 0) -> PointCloud:
    """Plain area-weighted surface sampling (no blue-noise shaping)."""
    rng = np.random.default_rng(seed)
    return PointCloud(_sample_on_triangles(mesh, count, rng))


def sample_surface_poisson(mesh: Mesh, target_count: int, seed: int = 0,
                           candidate_factor: float = 4.0) -> PointCloud:
    """Blue-noise surface sampling with exactly target_count output points.

    Draws an area-weighted candidate pool, then greedily eliminates the
    sample with the highest crowding weight w(d) = (1 - d/(2 r_hat))^8 until
    target_count remain (Yuksel-style sample elimination).
    """
    if target_count < 1:
        raise ConfigurationError("target_count must be >= 1")
    rng = np.random.default_rng(seed)
    pool = int(np.ceil(candidate_factor * target_count))
    while pool < target_count:
        pool = max(2 * pool, target_count)
    pts = _sample_on_triangles(mesh, pool, rng)
    if pool == target_count:
        return PointCloud(pts)

    total_area = float(mesh.triangle_areas().sum())
    r_hat = np.sqrt(total_area / (2.0 * np.sqrt(3.0) * target_count))
    radius = 2.0 * r_hat

    tree = cKDTree(pts)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs):
        d = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
        w = (1.0 - d / radius) ** 8
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        ww = np.concatenate([w, w])
        order = np.argsort(src, kind="stable")
        src, dst, ww = src[order], dst[order], ww[order]
        starts = np.searchsorted(src, np.arange(pool + 1))
        weights = np.zeros(pool)
        np.add.at(weights, src, ww)
    else:
        starts = np.zeros(pool + 1, dtype=np.int64)
        dst = np.zeros(0, dtype=np.int64)
        ww = np.zeros(0)
        weights = np.zeros(pool)

    alive = np.ones(pool, dtype=bool)
    heap = [(-weights[i], i) for i in range(pool)]
    heapq.heapify(heap)
    remaining = pool
    while remaining > target_count:
        negw, i = heapq.heappop(heap)
        if not alive[i] or -negw != weights[i]:
            continue  # stale entry
        alive[i] = False
        remaining -= 1
        for e in range(starts[i], starts[i + 1]):
            j = dst[e]
            if alive[j]:
                weights[j] -= ww[e]
                heapq.heappush(heap, (-weights[j], j))
    return PointCloud(pts[alive])
