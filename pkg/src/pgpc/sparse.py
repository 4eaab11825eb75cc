"""Sparse 3D tensors on integer lattices and their convolution primitives.

A sparse tensor is a lexicographically sorted set of unique integer
coordinates plus one feature row per coordinate.  All operations here are
pure functions with a fixed accumulation order (ascending kernel offset,
then ascending coordinate), so repeated runs produce bit-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import ConfigurationError, ContractViolationError

# Coordinates are packed into a single int64 key for sorting and lookup.
# 21 bits per component with a bias keeps everything order-preserving for
# components in [-2^20, 2^20), comfortably beyond any 16-bit-precision grid.
_KEY_BIAS = 1 << 20
_KEY_SHIFT = 21
_KEY_LIMIT = 1 << 20


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Map integer (x, y, z) rows to order-preserving int64 keys."""
    c = np.asarray(coords, dtype=np.int64)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ContractViolationError(f"coords must be (N, 3), got {c.shape}")
    if c.size and (c.min() < -_KEY_LIMIT or c.max() >= _KEY_LIMIT):
        raise ContractViolationError("coordinate component out of packable range")
    return ((c[:, 0] + _KEY_BIAS) << (2 * _KEY_SHIFT)) | ((c[:, 1] + _KEY_BIAS) << _KEY_SHIFT) | (c[:, 2] + _KEY_BIAS)


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    mask = (1 << _KEY_SHIFT) - 1
    x = (keys >> (2 * _KEY_SHIFT)) - _KEY_BIAS
    y = ((keys >> _KEY_SHIFT) & mask) - _KEY_BIAS
    z = (keys & mask) - _KEY_BIAS
    return np.stack([x, y, z], axis=1).astype(np.int32)


def lexsorted_unique(coords: np.ndarray) -> np.ndarray:
    """Sort coordinate rows lexicographically and drop duplicates."""
    keys = pack_coords(coords)
    return unpack_keys(np.unique(keys))


@dataclass
class SparseTensor:
    """Unique sorted coordinates with aligned feature rows at some scale."""

    coords: np.ndarray
    feats: np.ndarray
    scale: int = 0
    _keys: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int32)
        if hasattr(self.feats, "value"):  # autodiff Var rides along untouched
            raw = self.feats.value
        else:
            self.feats = np.atleast_2d(np.asarray(self.feats))
            raw = self.feats
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ContractViolationError(f"coords must be (N, 3), got {self.coords.shape}")
        if len(self.coords) == 0 and raw.size == 0 and raw is self.feats:
            self.feats = raw.reshape(0, raw.shape[-1] if raw.ndim == 2 else 0)
            raw = self.feats
        if raw.ndim != 2 or raw.shape[0] != self.coords.shape[0]:
            raise ContractViolationError(
                f"feature rows {raw.shape} do not match {self.coords.shape[0]} coordinates"
            )
        if self._keys is None:
            self._keys = pack_coords(self.coords)
        if len(self._keys) > 1 and not np.all(np.diff(self._keys) > 0):
            raise ContractViolationError("coordinates must be sorted and unique")
        if raw.size and not np.isfinite(raw).all():
            raise ContractViolationError("non-finite feature value")

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    @property
    def channels(self) -> int:
        raw = self.feats.value if hasattr(self.feats, "value") else self.feats
        return raw.shape[1]

    def __len__(self) -> int:
        return len(self.coords)

    @classmethod
    def from_unsorted(cls, coords, feats, scale: int = 0, reduce: str = "error") -> "SparseTensor":
        """Canonicalize arbitrary coordinate/feature rows.

        reduce: what to do with duplicate coordinates; "error" rejects them,
        "sum" accumulates their feature rows in ascending coordinate order.
        """
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        feats = np.atleast_2d(np.asarray(feats))
        keys = pack_coords(coords)
        uniq, inverse = np.unique(keys, return_inverse=True)
        if len(uniq) != len(keys):
            if reduce != "sum":
                raise ContractViolationError("duplicate coordinates")
            summed = np.zeros((len(uniq), feats.shape[1]), dtype=feats.dtype)
            np.add.at(summed, inverse, feats)
            return cls(unpack_keys(uniq), summed, scale, _keys=uniq)
        order = np.argsort(keys)
        return cls(coords[order].astype(np.int32), feats[order], scale, _keys=keys[order])

    @classmethod
    def empty(cls, channels: int, scale: int = 0, dtype=np.float32) -> "SparseTensor":
        return cls(np.zeros((0, 3), np.int32), np.zeros((0, channels), dtype), scale)


def cube_offsets(lo: int, hi: int) -> np.ndarray:
    """All integer offsets in [lo, hi]^3, lexicographically sorted."""
    return np.array(list(product(range(lo, hi + 1), repeat=3)), dtype=np.int32)


CONV_OFFSETS = cube_offsets(-1, 1)   # stride-1 hypercube, 27 taps
DOWN_OFFSETS = cube_offsets(0, 1)    # stride-2 downsampling, 8-to-1 partition
UP_OFFSETS = cube_offsets(-1, 1)     # transposed upsampling with overlap


@dataclass
class ConvKernel:
    """Per-offset weight matrices for one sparse convolution layer."""

    offsets: np.ndarray
    weights: np.ndarray  # (n_offsets, in_channels, out_channels)
    stride: int = 1
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.offsets = np.ascontiguousarray(self.offsets, dtype=np.int32)
        self.weights = np.asarray(self.weights)
        if self.offsets.ndim != 2 or self.offsets.shape[1] != 3:
            raise ConfigurationError(f"offsets must be (K, 3), got {self.offsets.shape}")
        okeys = pack_coords(self.offsets)
        if len(okeys) > 1 and not np.all(np.diff(okeys) > 0):
            raise ConfigurationError("kernel offsets must be sorted and unique")
        if self.weights.ndim != 3 or self.weights.shape[0] != len(self.offsets):
            raise ConfigurationError(
                f"weights must be ({len(self.offsets)}, in, out), got {self.weights.shape}"
            )
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {self.stride}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (self.weights.shape[2],):
                raise ConfigurationError("bias length must equal out_channels")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]


def _check_channels(tensor: SparseTensor, kernel: ConvKernel):
    if tensor.channels != kernel.in_channels:
        raise ConfigurationError(
            f"kernel expects {kernel.in_channels} input channels, tensor has {tensor.channels}"
        )


def build_conv_map(in_keys: np.ndarray, base_coords: np.ndarray, offsets: np.ndarray):
    """Receptive-field lookup for convolution-style ops.

    For each kernel offset, returns (rows_out, rows_in): the output rows whose
    probe coordinate base+offset exists in the input, and the matching input
    rows.  Within one offset every output row appears at most once, which the
    accumulation step relies on.
    """
    kmap = []
    base = base_coords.astype(np.int64)
    for off in offsets:
        probe = base + off
        pkeys = pack_coords(probe)
        pos = np.searchsorted(in_keys, pkeys)
        pos_clip = np.minimum(pos, max(len(in_keys) - 1, 0))
        found = (len(in_keys) > 0) & (in_keys[pos_clip] == pkeys) if len(in_keys) else np.zeros(len(pkeys), bool)
        rows_out = np.nonzero(found)[0]
        kmap.append((rows_out, pos_clip[rows_out]))
    return kmap


def build_transposed_map(in_coords: np.ndarray, offsets: np.ndarray, extent: int | None = None):
    """Child generation for stride-2 transposed convolution.

    Children are 2c + offset, clipped to nonnegative components (and to
    `extent` when given).  Returns (out_coords, kmap) where kmap lists, per
    offset, the contributing input rows and their output rows.
    """
    n = len(in_coords)
    parents = in_coords.astype(np.int64) * 2
    per_offset = []
    all_keys = []
    for off in offsets:
        child = parents + off
        mask = (child >= 0).all(axis=1)
        if extent is not None:
            mask &= (child < extent).all(axis=1)
        rows_in = np.nonzero(mask)[0]
        ckeys = pack_coords(child[rows_in])
        per_offset.append((rows_in, ckeys))
        all_keys.append(ckeys)
    out_keys = np.unique(np.concatenate(all_keys)) if all_keys and n else np.zeros(0, np.int64)
    kmap = []
    for rows_in, ckeys in per_offset:
        rows_out = np.searchsorted(out_keys, ckeys)
        kmap.append((rows_out, rows_in))
    return unpack_keys(out_keys), out_keys, kmap


def apply_kernel_map(kmap, feats: np.ndarray, weights: np.ndarray, bias, n_out: int) -> np.ndarray:
    """Accumulate per-offset contributions in ascending offset order.

    Row indices are unique within each offset, so plain fancy-index addition
    is safe and the reduction order is fixed.
    """
    out = np.zeros((n_out, weights.shape[2]), dtype=np.result_type(feats.dtype, weights.dtype))
    for k, (rows_out, rows_in) in enumerate(kmap):
        if len(rows_out):
            out[rows_out] += feats[rows_in] @ weights[k]
    if bias is not None:
        out += bias
    return out


def sparse_conv(tensor: SparseTensor, kernel: ConvKernel) -> SparseTensor:
    """Sparse convolution; stride 1 keeps the coordinate set, stride 2 halves it."""
    _check_channels(tensor, kernel)
    if kernel.stride == 1:
        out_coords, out_keys = tensor.coords, tensor.keys
        base = tensor.coords
        out_scale = tensor.scale
    else:
        out_keys = np.unique(pack_coords(tensor.coords.astype(np.int64) >> 1))
        out_coords = unpack_keys(out_keys)
        base = out_coords.astype(np.int64) * 2
        out_scale = tensor.scale + 1
    kmap = build_conv_map(tensor.keys, base, kernel.offsets)
    feats = apply_kernel_map(kmap, tensor.feats, kernel.weights, kernel.bias, len(out_coords))
    return SparseTensor(out_coords, feats, out_scale, _keys=out_keys)


def transposed_conv(tensor: SparseTensor, kernel: ConvKernel, extent: int | None = None) -> SparseTensor:
    """Generative stride-2 upsampling; overlapping child contributions are summed."""
    _check_channels(tensor, kernel)
    if kernel.stride != 2:
        raise ConfigurationError("transposed_conv requires a stride-2 kernel")
    if tensor.scale < 1:
        raise ContractViolationError("cannot upsample below scale 0")
    out_coords, out_keys, kmap = build_transposed_map(tensor.coords, kernel.offsets, extent)
    feats = apply_kernel_map(kmap, tensor.feats, kernel.weights, kernel.bias, len(out_coords))
    return SparseTensor(out_coords, feats, tensor.scale - 1, _keys=out_keys)


def conv_on_coords(tensor: SparseTensor, kernel: ConvKernel, target: np.ndarray) -> SparseTensor:
    """Convolve input features onto an explicit target coordinate set."""
    _check_channels(tensor, kernel)
    if kernel.stride != 1:
        raise ConfigurationError("conv_on_coords requires a stride-1 kernel")
    tkeys = np.unique(pack_coords(np.asarray(target, dtype=np.int64).reshape(-1, 3)))
    tcoords = unpack_keys(tkeys)
    kmap = build_conv_map(tensor.keys, tcoords, kernel.offsets)
    feats = apply_kernel_map(kmap, tensor.feats, kernel.weights, kernel.bias, len(tcoords))
    return SparseTensor(tcoords, feats, tensor.scale, _keys=tkeys)


def prune_topk(tensor: SparseTensor, logits: np.ndarray, k: int) -> SparseTensor:
    """Keep the k highest-logit coordinates; ties favor the smaller coordinate."""
    logits = np.asarray(logits).reshape(-1)
    if len(logits) != len(tensor):
        raise ContractViolationError(f"{len(logits)} logits for {len(tensor)} coordinates")
    if k >= len(tensor):
        return tensor
    # Stable sort over coordinates already in ascending order implements the
    # smaller-coordinate-wins tie rule.
    order = np.argsort(-logits, kind="stable")[:k]
    keep = np.sort(order)
    return SparseTensor(tensor.coords[keep], tensor.feats[keep], tensor.scale, _keys=tensor.keys[keep])


def concat_features(primary: SparseTensor, auxiliary: SparseTensor) -> SparseTensor:
    """Union of coordinates with columnwise feature concatenation, zero-filled."""
    if primary.scale != auxiliary.scale:
        raise ConfigurationError(f"scale mismatch: {primary.scale} vs {auxiliary.scale}")
    keys = np.union1d(primary.keys, auxiliary.keys)
    cp, ca = primary.channels, auxiliary.channels
    dtype = np.result_type(primary.feats.dtype, auxiliary.feats.dtype)
    feats = np.zeros((len(keys), cp + ca), dtype=dtype)
    if len(primary):
        feats[np.searchsorted(keys, primary.keys), :cp] = primary.feats
    if len(auxiliary):
        feats[np.searchsorted(keys, auxiliary.keys), cp:] = auxiliary.feats
    return SparseTensor(unpack_keys(keys), feats, primary.scale, _keys=keys)


def downsample_coord_set(coords: np.ndarray) -> np.ndarray:
    """Unique floor(c/2) parent coordinates of a coordinate set."""
    if len(coords) == 0:
        return np.zeros((0, 3), np.int32)
    return unpack_keys(np.unique(pack_coords(np.asarray(coords, np.int64) >> 1)))
