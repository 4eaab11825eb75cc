"""Learned sparse-convolution sub-networks.

Three pieces, all assembled from the sparse primitives:

* extract_features: L stride-2 blocks that shrink an occupancy cloud to a
  low-rate latent tensor while recording the per-scale occupancy counts;
* warp_features: re-expresses one cloud's multi-scale features on another
  cloud's coarse coordinates (the cross-cloud prediction step);
* propagate: count-guided upsampling from the coarse latent back to a full
  resolution coordinate set, scoring candidate voxels and keeping the top-K
  at every scale.

Every layer runs through autodiff-aware kernel application, so the same
forward code serves float32 inference and float64 training (features and
weights may be Vars or plain arrays interchangeably).
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .entropy import init_factorized_params
from .errors import (
    ConfigurationError,
    ContractViolationError,
    DegenerateInputError,
    ParseError,
)
from .geometry import PointCloud
from .sparse import (
    CONV_OFFSETS,
    DOWN_OFFSETS,
    UP_OFFSETS,
    SparseTensor,
    build_conv_map,
    build_transposed_map,
    cube_offsets,
    lexsorted_unique,
    pack_coords,
    unpack_keys,
)

_OFFSETS_1x1 = cube_offsets(0, 0)


def _offsets_for(size):
    if size == 1:
        return _OFFSETS_1x1
    if size == 3:
        return CONV_OFFSETS
    raise ConfigurationError(f"unsupported kernel size {size}")


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 3
    enc_channels: tuple = (16, 32, 64)
    dec_channels: tuple = (32, 16, 16)
    latent_channels: int = 8
    vrn_branch_a: tuple = (3, 3)
    vrn_branch_b: tuple = (1, 3, 1)

    def __post_init__(self):
        object.__setattr__(self, "enc_channels", tuple(int(c) for c in self.enc_channels))
        object.__setattr__(self, "dec_channels", tuple(int(c) for c in self.dec_channels))
        object.__setattr__(self, "vrn_branch_a", tuple(int(k) for k in self.vrn_branch_a))
        object.__setattr__(self, "vrn_branch_b", tuple(int(k) for k in self.vrn_branch_b))
        if self.levels < 1:
            raise ConfigurationError("levels must be >= 1")
        if len(self.enc_channels) != self.levels or len(self.dec_channels) != self.levels:
            raise ConfigurationError("channel lists must have one width per level")
        for c in (*self.enc_channels, *self.dec_channels):
            if c <= 0 or c % 2:
                raise ConfigurationError("widths must be positive and even")
        if self.latent_channels <= 0:
            raise ConfigurationError("latent_channels must be positive")
        for k in (*self.vrn_branch_a, *self.vrn_branch_b):
            _offsets_for(k)

    def to_json(self):
        return json.dumps(
            {
                "levels": self.levels,
                "enc_channels": list(self.enc_channels),
                "dec_channels": list(self.dec_channels),
                "latent_channels": self.latent_channels,
                "vrn_branch_a": list(self.vrn_branch_a),
                "vrn_branch_b": list(self.vrn_branch_b),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad network config block: {exc}") from exc
        if not isinstance(raw, dict):
            raise ParseError("network config block is not an object")
        try:
            return cls(
                levels=int(raw["levels"]),
                enc_channels=tuple(raw["enc_channels"]),
                dec_channels=tuple(raw["dec_channels"]),
                latent_channels=int(raw["latent_channels"]),
                vrn_branch_a=tuple(raw.get("vrn_branch_a", (3, 3))),
                vrn_branch_b=tuple(raw.get("vrn_branch_b", (1, 3, 1))),
            )
        except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
            raise ParseError(f"bad network config block: {exc}") from exc


@dataclass
class ScaleStack:
    """Per-scale feature tensors (scales 1..L) plus source occupancy counts.

    counts[l] is the occupied-voxel count of the source cloud at scale l,
    counts[0] being the full-resolution point count; length levels + 1.
    """

    tensors: list
    counts: list

    def __post_init__(self):
        scales = [t.scale for t in self.tensors]
        if scales != sorted(scales) or len(set(scales)) != len(scales):
            raise ContractViolationError(f"stack scales must increase, got {scales}")
        if len(self.counts) != len(self.tensors) + 1:
            raise ContractViolationError("need one count per scale plus the source count")
        if any(c <= 0 for c in self.counts):
            raise ContractViolationError("occupancy counts must be positive")

    @property
    def levels(self):
        return len(self.tensors)


@dataclass
class CandidateScores:
    """Pre-pruning candidates of one upsampling block: coords and logits."""

    coords: np.ndarray
    logits: object  # (N, 1), ndarray or Var
    scale: int


# --- weight container --------------------------------------------------------

WEIGHTS_MAGIC = b"PGW1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


def _vrn_layer_names(base, branch_a, branch_b):
    names = [f"{base}.a{i}" for i in range(len(branch_a))]
    names += [f"{base}.b{i}" for i in range(len(branch_b))]
    return names


def layer_shapes(config):
    """Every layer name with its (offsets, in_channels, out_channels)."""
    cfg = config
    out = {}

    def vrn(base, c):
        if c % 2:
            raise ConfigurationError(f"vrn needs an even width, got {c}")
        h = c // 2
        widths_a = [(c if i == 0 else h, h) for i in range(len(cfg.vrn_branch_a))]
        widths_b = [(c if i == 0 else h, h) for i in range(len(cfg.vrn_branch_b))]
        for i, k in enumerate(cfg.vrn_branch_a):
            out[f"{base}.a{i}"] = (_offsets_for(k), *widths_a[i])
        for i, k in enumerate(cfg.vrn_branch_b):
            out[f"{base}.b{i}"] = (_offsets_for(k), *widths_b[i])

    c_prev = 1
    for level in range(1, cfg.levels + 1):
        c = cfg.enc_channels[level - 1]
        out[f"enc.block{level}.down"] = (DOWN_OFFSETS, c_prev, c)
        vrn(f"enc.block{level}.vrn", c)
        c_out = cfg.latent_channels if level == cfg.levels else c
        out[f"enc.block{level}.out"] = (CONV_OFFSETS, c, c_out)
        c_prev = c_out
    # scale-l aligned tensors carry enc width, except the last one (latent)
    c_run = cfg.latent_channels if cfg.levels == 1 else cfg.enc_channels[0]
    for level in range(2, cfg.levels + 1):
        c = cfg.enc_channels[level - 1]
        out[f"warp.aux{level}"] = (DOWN_OFFSETS, c_run, c)
        c_run = c + (cfg.latent_channels if level == cfg.levels else c)
    out["warp.final"] = (CONV_OFFSETS, c_run, cfg.latent_channels)
    c_prev = cfg.latent_channels
    for block in range(1, cfg.levels + 1):
        c = cfg.dec_channels[block - 1]
        out[f"dec.block{block}.up"] = (UP_OFFSETS, c_prev, c)
        vrn(f"dec.block{block}.vrn", c)
        out[f"dec.block{block}.logit"] = (CONV_OFFSETS, c, 1)
        c_prev = c
    return out


@dataclass
class NetworkWeights:
    """Named parameter arrays for all three sub-networks + entropy model.

    arrays maps "<layer>.w" / "<layer>.b" to (K, Cin, Cout) / (Cout,) float
    arrays (or Vars during training), plus the ent.* factorized-model
    parameters and the (2, C) int32 "ent.range" symbol bounds.
    """

    config: NetworkConfig
    arrays: dict

    def __post_init__(self):
        expected = set(expected_array_names(self.config))
        have = set(self.arrays)
        if have != expected:
            missing = sorted(expected - have)
            extra = sorted(have - expected)
            raise ConfigurationError(
                f"weight set does not match config (missing {missing}, extra {extra})"
            )
        for name, arr in self.arrays.items():
            raw = np.asarray(ad.val(arr))
            if raw.dtype.kind == "f" and not np.isfinite(raw).all():
                raise ConfigurationError(f"non-finite values in {name}")

    def detached(self):
        """Plain-ndarray copy (drops any autodiff wrappers)."""
        return NetworkWeights(self.config, {k: np.asarray(ad.val(v)) for k, v in self.arrays.items()})

    def trainable(self):
        """Var-wrapped float64 copy sharing this config; ent.range stays fixed."""
        out = {}
        for k, v in self.arrays.items():
            raw = np.asarray(ad.val(v))
            if raw.dtype.kind == "f":
                out[k] = ad.Var(raw.astype(np.float64))
            else:
                out[k] = raw.copy()
        return NetworkWeights(self.config, out)

    def entropy_bounds(self):
        rng = np.asarray(ad.val(self.arrays["ent.range"]))
        return rng[0].astype(np.int64), rng[1].astype(np.int64)


def expected_array_names(config):
    names = []
    for layer in layer_shapes(config):
        names.append(layer + ".w")
        names.append(layer + ".b")
    from .entropy import factorized_param_names

    names.extend(factorized_param_names())
    names.append("ent.range")
    return names


def init_weights(config=None, seed=0):
    """He-initialized float64 weights (biases zero, logit layers damped)."""
    cfg = config if config is not None else NetworkConfig()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, (offsets, c_in, c_out) in layer_shapes(cfg).items():
        fan_in = len(offsets) * c_in
        std = np.sqrt(2.0 / fan_in)
        if name.endswith(".logit"):
            std = np.sqrt(1.0 / fan_in)
        arrays[name + ".w"] = rng.normal(0.0, std, (len(offsets), c_in, c_out))
        arrays[name + ".b"] = np.zeros(c_out)
    arrays.update(init_factorized_params(cfg.latent_channels, seed=seed))
    half = 24
    arrays["ent.range"] = np.stack(
        [np.full(cfg.latent_channels, -half), np.full(cfg.latent_channels, half)]
    ).astype(np.int32)
    return NetworkWeights(cfg, arrays)


# --- autodiff-aware layer application ----------------------------------------


def kernel_apply(feats, weights, bias, kmap, n_out):
    """Fused sparse kernel application with a handwritten adjoint.

    kmap lists (rows_out, rows_in) per kernel offset; rows are unique within
    an offset, so fancy-index accumulation is well defined in both passes.
    """
    f_raw = np.asarray(ad.val(feats))
    w_raw = np.asarray(ad.val(weights))
    out = np.zeros((n_out, w_raw.shape[2]), dtype=np.result_type(f_raw.dtype, w_raw.dtype))
    for k, (rows_out, rows_in) in enumerate(kmap):
        if len(rows_out):
            out[rows_out] += f_raw[rows_in] @ w_raw[k]
    if bias is not None:
        out = out + ad.val(bias)
    srcs = (feats, weights) if bias is None else (feats, weights, bias)

    def grads(g):
        g = np.asarray(g)
        g_f = np.zeros_like(f_raw)
        g_w = np.zeros_like(w_raw)
        for k, (rows_out, rows_in) in enumerate(kmap):
            if len(rows_out):
                gk = g[rows_out]
                g_f[rows_in] += gk @ w_raw[k].T
                g_w[k] = f_raw[rows_in].T @ gk
        if bias is None:
            return g_f, g_w
        return g_f, g_w, g.sum(axis=0)

    return ad.custom(out, srcs, grads)


@dataclass
class _Flow:
    """Internal (coords, keys, feats, scale) carrier; feats may be a Var."""

    coords: np.ndarray
    keys: np.ndarray
    feats: object
    scale: int


def _flow(t):
    return _Flow(t.coords, t.keys, t.feats, t.scale)


def _tensor(f):
    return SparseTensor(f.coords, f.feats, f.scale, _keys=f.keys)


def _conv(flow, w, b, offsets, stride):
    if stride == 1:
        out_coords, out_keys = flow.coords, flow.keys
        base = flow.coords
        out_scale = flow.scale
    else:
        out_keys = np.unique(pack_coords(flow.coords.astype(np.int64) >> 1))
        out_coords = unpack_keys(out_keys)
        base = out_coords.astype(np.int64) * 2
        out_scale = flow.scale + 1
    kmap = build_conv_map(flow.keys, base, offsets)
    return _Flow(out_coords, out_keys, kernel_apply(flow.feats, w, b, kmap, len(out_coords)), out_scale)


def _tconv(flow, w, b, offsets, extent=None):
    if flow.scale < 1:
        raise ContractViolationError("cannot upsample below scale 0")
    out_coords, out_keys, kmap = build_transposed_map(flow.coords, offsets, extent)
    return _Flow(out_coords, out_keys, kernel_apply(flow.feats, w, b, kmap, len(out_coords)), flow.scale - 1)


def _conv_on(flow, w, b, offsets, target_coords, target_keys):
    kmap = build_conv_map(flow.keys, target_coords, offsets)
    return _Flow(target_coords, target_keys, kernel_apply(flow.feats, w, b, kmap, len(target_coords)), flow.scale)


def _relu(flow):
    return _Flow(flow.coords, flow.keys, ad.relu(flow.feats), flow.scale)


def _concat(primary, auxiliary):
    if primary.scale != auxiliary.scale:
        raise ConfigurationError(f"scale mismatch: {primary.scale} vs {auxiliary.scale}")
    keys = np.union1d(primary.keys, auxiliary.keys)
    fa = ad.scatter_rows(primary.feats, np.searchsorted(keys, primary.keys), len(keys))
    fb = ad.scatter_rows(auxiliary.feats, np.searchsorted(keys, auxiliary.keys), len(keys))
    return _Flow(unpack_keys(keys), keys, ad.concat_cols([fa, fb]), primary.scale)


def _wb(weights, name):
    return weights.arrays[name + ".w"], weights.arrays[name + ".b"]


def _vrn(flow, weights, base):
    cfg = weights.config
    c = ad.val(flow.feats).shape[1]
    if c % 2:
        raise ConfigurationError(f"vrn needs an even channel count, got {c}")
    branch_a = flow
    for i, k in enumerate(cfg.vrn_branch_a):
        branch_a = _relu(_conv(branch_a, *_wb(weights, f"{base}.a{i}"), _offsets_for(k), 1))
    branch_b = flow
    for i, k in enumerate(cfg.vrn_branch_b):
        branch_b = _relu(_conv(branch_b, *_wb(weights, f"{base}.b{i}"), _offsets_for(k), 1))
    merged = ad.concat_cols([branch_a.feats, branch_b.feats])
    return _Flow(flow.coords, flow.keys, ad.add(merged, flow.feats), flow.scale)


def vrn_unit(tensor, weights, base):
    """Two parallel half-width conv branches, concatenated onto a skip add."""
    return _tensor(_vrn(_flow(tensor), weights, base))


# --- the three sub-networks ---------------------------------------------------


def _weights_float_dtype(weights):
    return np.asarray(ad.val(weights.arrays["enc.block1.down.w"])).dtype


def extract_features(cloud, weights):
    """Downscale an occupancy cloud through L strided blocks.

    Returns the per-scale feature tensors (scale 1..L, final one with
    latent_channels channels) and the occupancy counts N^l of the input at
    every scale, N^0 first.
    """
    cfg = weights.config
    pts = np.asarray(cloud.points)
    if len(pts) == 0:
        raise DegenerateInputError("cannot extract features from an empty cloud")
    coords = lexsorted_unique(pts.astype(np.int64))
    keys = pack_coords(coords.astype(np.int64))
    dtype = _weights_float_dtype(weights)
    flow = _Flow(coords, keys, np.ones((len(coords), 1), dtype=dtype), 0)
    tensors, counts = [], [len(coords)]
    for level in range(1, cfg.levels + 1):
        flow = _relu(_conv(flow, *_wb(weights, f"enc.block{level}.down"), DOWN_OFFSETS, 2))
        flow = _relu(_vrn(flow, weights, f"enc.block{level}.vrn"))
        flow = _conv(flow, *_wb(weights, f"enc.block{level}.out"), CONV_OFFSETS, 1)
        tensors.append(_tensor(flow))
        counts.append(len(flow.coords))
    return ScaleStack(tensors, counts)


def warp_features(aligned, source_coords_l, weights):
    """Map an aligned cloud's multi-scale features onto source coordinates.

    Walks the aligned stack coarse-ward, concatenating each scale's tensor,
    then convolves onto exactly the given scale-L coordinate set (linear
    output, latent_channels wide).
    """
    cfg = weights.config
    if aligned.levels != cfg.levels:
        raise ConfigurationError(
            f"aligned stack has {aligned.levels} levels, config wants {cfg.levels}"
        )
    x = _flow(aligned.tensors[0])
    for level in range(2, cfg.levels + 1):
        x = _relu(_conv(x, *_wb(weights, f"warp.aux{level}"), DOWN_OFFSETS, 2))
        primary = aligned.tensors[level - 1]
        if primary.scale != x.scale:
            raise ConfigurationError(
                f"aligned scale {primary.scale} does not follow auxiliary scale {x.scale}"
            )
        x = _concat(x, _flow(primary))
    target = lexsorted_unique(np.asarray(source_coords_l, dtype=np.int64).reshape(-1, 3))
    tkeys = pack_coords(target.astype(np.int64))
    out = _conv_on(x, *_wb(weights, "warp.final"), CONV_OFFSETS, target, tkeys)
    return _tensor(out)


def residual(f_source, f_warped):
    """Elementwise feature difference on an identical coordinate set."""
    if f_source.scale != f_warped.scale or not np.array_equal(f_source.keys, f_warped.keys):
        raise ContractViolationError("residual needs identical coordinate sets")
    return SparseTensor(
        f_source.coords, ad.sub(f_source.feats, f_warped.feats), f_source.scale, _keys=f_source.keys
    )


def add_residual(f_warped, delta):
    """Inverse of residual: reconstructed = warped + delta."""
    if f_warped.scale != delta.scale or not np.array_equal(f_warped.keys, delta.keys):
        raise ContractViolationError("add_residual needs identical coordinate sets")
    return SparseTensor(
        f_warped.coords, ad.add(f_warped.feats, delta.feats), f_warped.scale, _keys=f_warped.keys
    )


def propagate(latent, counts, weights, precision=None):
    """Count-guided upsampling from the scale-L latent to a decoded cloud.

    counts lists the target occupancy per emitted scale, coarse to fine:
    [N^(L-1), ..., N^0].  Returns the decoded full-resolution cloud and the
    pre-pruning candidate scores of every block (training consumes those).
    """
    cfg = weights.config
    if len(counts) != cfg.levels:
        raise ConfigurationError(f"need {cfg.levels} counts, got {len(counts)}")
    if latent.scale != cfg.levels:
        raise ContractViolationError(
            f"latent at scale {latent.scale}, config expects scale {cfg.levels}"
        )
    x = _flow(latent)
    scores = []
    for block in range(1, cfg.levels + 1):
        extent = None if precision is None else 1 << (precision - (x.scale - 1))
        x = _relu(_tconv(x, *_wb(weights, f"dec.block{block}.up"), UP_OFFSETS, extent))
        x = _vrn(x, weights, f"dec.block{block}.vrn")
        logit_flow = _conv(x, *_wb(weights, f"dec.block{block}.logit"), CONV_OFFSETS, 1)
        scores.append(CandidateScores(x.coords, logit_flow.feats, x.scale))
        want = int(counts[block - 1])
        have = len(x.coords)
        if want > have:
            warnings.warn(
                f"block {block}: requested {want} points but only {have} candidates",
                RuntimeWarning,
                stacklevel=2,
            )
            want = have
        raw_logits = np.asarray(ad.val(logit_flow.feats)).reshape(-1)
        order = np.argsort(-raw_logits, kind="stable")[:want]
        keep = np.sort(order)
        x = _Flow(x.coords[keep], x.keys[keep], ad.take_rows(x.feats, keep), x.scale)
    cloud = PointCloud(x.coords.astype(np.int64), precision)
    return cloud, scores


# --- weights file -------------------------------------------------------------


def weights_to_bytes(weights):
    """Serialize to the PGW1 container (config JSON + named LE arrays)."""
    w = weights.detached()
    blob = bytearray(WEIGHTS_MAGIC)
    cfg = w.config.to_json().encode("utf-8")
    blob += struct.pack("<I", len(cfg)) + cfg
    blob += struct.pack("<I", len(w.arrays))
    for name, arr in w.arrays.items():
        code = 1 if arr.dtype.kind in "iu" else 0
        arr = arr.astype(_DTYPE_CODES[code])
        raw_name = name.encode("utf-8")
        blob += struct.pack("<H", len(raw_name)) + raw_name
        blob += struct.pack("<BB", code, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    return bytes(blob)


def save_weights(weights, path):
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(weights))


def load_weights(path):
    """Parse a PGW1 container; raises ParseError on any malformation."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def need(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise ParseError(f"weights file truncated in {what}", position=f"byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if need(4, "magic") != WEIGHTS_MAGIC:
        raise ParseError("not a PGW1 weights file", position="byte 0")
    (cfg_len,) = struct.unpack("<I", need(4, "config length"))
    if cfg_len > 1 << 20:
        raise ParseError("implausible config block size", position="byte 4")
    config = NetworkConfig.from_json(need(cfg_len, "config block").decode("utf-8", "replace"))
    (n_arrays,) = struct.unpack("<I", need(4, "array count"))
    if n_arrays > 4096:
        raise ParseError("implausible array count")
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "array name").decode("utf-8", "replace")
        code, ndim = struct.unpack("<BB", need(2, "array header"))
        if code not in _DTYPE_CODES or ndim > 8:
            raise ParseError(f"bad array header for {name}", position=f"byte {pos - 2}")
        shape = struct.unpack(f"<{ndim}I", need(4 * ndim, "array shape"))
        n_elem = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        if n_elem > 1 << 26:
            raise ParseError(f"implausible array size for {name}")
        dtype = _DTYPE_CODES[code]
        raw = need(n_elem * dtype.itemsize, f"array data for {name}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if pos != len(data):
        raise ParseError("trailing bytes after weight arrays", position=f"byte {pos}")
    try:
        return NetworkWeights(config, arrays)
    except ConfigurationError as exc:
        raise ParseError(str(exc)) from exc


# --- adjoint checks ------------------------------------------------------------


def _tiny_weights(rng):
    cfg = NetworkConfig(
        levels=1,
        enc_channels=(4,),
        dec_channels=(4,),
        latent_channels=2,
        vrn_branch_a=(3, 3),
        vrn_branch_b=(1, 3, 1),
    )
    w = init_weights(cfg, seed=int(rng.integers(1 << 31)))
    return w.trainable()


def _tiny_cloud(rng, n=7, span=8):
    pts = np.unique(rng.integers(0, span, size=(n * 2, 3)), axis=0)[:n]
    return PointCloud(pts, precision=4)


@ad.register_check("kernel_apply")
def _check_kernel_apply(rng):
    coords = lexsorted_unique(rng.integers(0, 4, size=(9, 3)))
    keys = pack_coords(coords.astype(np.int64))
    kmap = build_conv_map(keys, coords, CONV_OFFSETS)
    feats = ad.leaf(rng, len(coords), 3)
    w = ad.leaf(rng, len(CONV_OFFSETS), 3, 2, scale=0.3)
    b = ad.leaf(rng, 2)
    return {"feats": feats, "w": w, "b": b}, lambda: ad._project(
        kernel_apply(feats, w, b, kmap, len(coords)), np.random.default_rng(31)
    )


@ad.register_check("transposed_apply")
def _check_transposed_apply(rng):
    coords = lexsorted_unique(rng.integers(0, 3, size=(5, 3)))
    out_coords, _, kmap = build_transposed_map(coords, UP_OFFSETS, extent=8)
    n_out = len(out_coords)
    feats = ad.leaf(rng, len(coords), 2)
    w = ad.leaf(rng, len(UP_OFFSETS), 2, 2, scale=0.3)
    return {"feats": feats, "w": w}, lambda: ad._project(
        kernel_apply(feats, w, None, kmap, n_out), np.random.default_rng(37)
    )


@ad.register_check("vrn_unit")
def _check_vrn(rng):
    w = _tiny_weights(rng)
    coords = lexsorted_unique(rng.integers(0, 4, size=(6, 3)))
    feats = ad.leaf(rng, len(coords), 4, offset=0.3)
    flow = _Flow(coords, pack_coords(coords.astype(np.int64)), feats, 1)
    params = {"feats": feats}
    for name, arr in w.arrays.items():
        if name.startswith("enc.block1.vrn") and isinstance(arr, ad.Var):
            # zero-init biases sit exactly on relu kinks; shove everything
            # off them so central differences see a smooth function
            arr.value = arr.value + rng.normal(0.11, 0.05, arr.value.shape)
            params[name] = arr
    return params, lambda: ad._project(
        _vrn(flow, w, "enc.block1.vrn").feats, np.random.default_rng(41)
    )


@ad.register_check("feature_concat")
def _check_concat(rng):
    ca = lexsorted_unique(rng.integers(0, 4, size=(5, 3)))
    cb = lexsorted_unique(rng.integers(0, 4, size=(4, 3)))
    fa = ad.leaf(rng, len(ca), 2)
    fb = ad.leaf(rng, len(cb), 3)
    a = _Flow(ca, pack_coords(ca.astype(np.int64)), fa, 1)
    b = _Flow(cb, pack_coords(cb.astype(np.int64)), fb, 1)
    return {"fa": fa, "fb": fb}, lambda: ad._project(
        _concat(a, b).feats, np.random.default_rng(43)
    )
