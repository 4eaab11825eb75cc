"""Bitstream container and the end-to-end encode/decode pipelines.

Layout (all little endian):

    magic "PGPC" | major u8 | minor u8 | precision u8 | levels u8 | flags u8
    model_id u32 | config_digest u32 | seed u64 | scale u32 (16.16)
    sample_ratio u32 (16.16) | counts N^0..N^L as LEB128 varints
    3 x substream: LEB128 length | payload | CRC-32C u32

Substream order: prior parameters, coded coordinates, coded residual
features.  Every stochastic step on either side draws its seed from the
header seed via splitmix64, and the prior mesh is rebuilt from the
*quantized* parameters, so encoder and decoder stay bit-exactly in sync.

Parsing is total: malformed input of any kind surfaces as DecodeError.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .checksum import crc32c
from .entropy import (
    FactorizedModel,
    build_cdf_tables,
    decode_coords,
    decode_features,
    encode_coords,
    encode_features,
    quantize_features,
)
from .errors import ConfigurationError, DecodeError, DegenerateInputError
from .fitting import FitConfig, fit_params
from .geometry import VOXEL_EPS, PointCloud, voxelize
from .network import extract_features, propagate, warp_features, weights_to_bytes
from .prior import (
    PriorParams,
    decode_params,
    dequantize_params,
    encode_params,
    pose_mesh,
    quantize_params,
)
from .geometry import Mesh, sample_surface_poisson
from .sparse import SparseTensor

MAGIC = b"PGPC"
VERSION_MAJOR = 1
VERSION_MINOR = 0

_FLAG_PRIOR = 1
_FIXED_HEADER_BYTES = 4 + 1 + 1 + 1 + 1 + 1 + 4 + 4 + 8 + 4 + 4

_MAX_POINTS = 1 << 24
# Prior samples per input point. Anything above this adds only duplicate
# voxels after dedup; bounding it keeps a small bitstream from demanding
# a huge sampling allocation at decode time.
_MAX_RATIO = 32
_M64 = (1 << 64) - 1


def splitmix64(state):
    """One splitmix64 step: returns (output, next_state)."""
    state = (state + 0x9E3779B97F4A7C15) & _M64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64, state


def derive_seeds(seed):
    """Deterministic per-purpose seeds from the header seed."""
    fit_seed, state = splitmix64(seed & _M64)
    sample_seed, _ = splitmix64(state)
    return {"fit": fit_seed, "sample": sample_seed}


def write_varint(value):
    if value < 0:
        raise ConfigurationError("varints are unsigned")
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def read_varint(data, pos):
    result = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise DecodeError("truncated varint")
        b = data[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise DecodeError("varint overflows 64 bits")


@dataclass(frozen=True)
class CodecConfig:
    use_prior: bool = True
    sampling_ratio: float = 1.0
    seed: int = 0
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.sampling_ratio <= 0:
            raise ConfigurationError("sampling_ratio must be positive")
        if self.sampling_ratio > _MAX_RATIO:
            raise ConfigurationError(
                f"sampling_ratio above {_MAX_RATIO} oversamples the prior to no "
                "effect and is rejected so decoders can bound allocations")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigurationError("seed must fit in 64 bits")


@dataclass
class Header:
    precision: int
    levels: int
    prior: bool
    model_id: int
    config_digest: int
    seed: int
    scale_fixed: int
    ratio_fixed: int
    counts: list


def model_identifier(weights):
    """CRC-32C of the serialized weights; what the header pins."""
    return crc32c(weights_to_bytes(weights))


def config_digest(weights):
    return crc32c(weights.config.to_json().encode("utf-8"))


def prior_aligned_cloud(template, qparams, precision, n_samples, sample_seed):
    """The synchronized prior-side cloud, identical on encoder and decoder."""
    params = dequantize_params(qparams)
    mesh = pose_mesh(template, params)
    world = Mesh(mesh.vertices * params.scale, mesh.faces)
    sampled = sample_surface_poisson(world, n_samples, seed=sample_seed)
    box = (0.0, float((1 << precision) - VOXEL_EPS))
    return voxelize(PointCloud(sampled.points), precision, box=box)


def _entropy_model(weights):
    y_min, y_max = weights.entropy_bounds()
    params = {
        k: np.asarray(v) for k, v in weights.detached().arrays.items() if k.startswith("ent.") and k != "ent.range"
    }
    return FactorizedModel(params, y_min, y_max)


def encode(source, template, weights, config=None, params=None):
    """Compress a voxelized cloud; returns the bitstream bytes.

    params: optional pre-computed PriorParams (skips the fitter, e.g. when
    the true parameters are known from data generation).
    """
    cfg = config if config is not None else CodecConfig()
    if source.precision is None:
        raise ConfigurationError("source cloud must carry its voxel precision")
    p = int(source.precision)
    levels = weights.config.levels
    if p - levels < 1:
        raise ConfigurationError(f"precision {p} too small for {levels} scales")
    if len(source) == 0:
        raise DegenerateInputError("cannot encode an empty cloud")
    if len(source) > _MAX_POINTS:
        raise ConfigurationError(f"cloud exceeds {_MAX_POINTS} points")

    seeds = derive_seeds(cfg.seed)
    src_stack = extract_features(source, weights)
    counts = src_stack.counts
    coords_l = src_stack.tensors[-1].coords
    f_source = src_stack.tensors[-1]

    ratio_fixed = 0
    scale_fixed = 0
    params_blob = b""
    if cfg.use_prior:
        if params is None:
            fit_cfg = replace(cfg.fit, seed=seeds["fit"] & 0x7FFFFFFF)
            params = fit_params(source, template, fit_cfg)
        qparams = quantize_params(params)
        params_blob = encode_params(qparams)
        scale_fixed = qparams.scale_fixed
        ratio_fixed = int(round(cfg.sampling_ratio * 65536.0))
        if ratio_fixed <= 0:
            raise ConfigurationError("sampling_ratio too small for 16.16 fixed point")
        n_samples = max(1, int(round((ratio_fixed / 65536.0) * counts[0])))
        aligned = prior_aligned_cloud(template, qparams, p, n_samples, seeds["sample"])
        aligned_stack = extract_features(aligned, weights)
        f_warped = warp_features(aligned_stack, coords_l, weights)
        delta = np.asarray(f_source.feats) - np.asarray(f_warped.feats)
    else:
        delta = np.asarray(f_source.feats)

    symbols = quantize_features(delta, mode="infer")
    tables = build_cdf_tables(_entropy_model(weights))
    feat_blob = encode_features(symbols, tables)
    coord_blob = encode_coords(coords_l, p, levels)

    flags = _FLAG_PRIOR if cfg.use_prior else 0
    head = bytearray(MAGIC)
    head += bytes([VERSION_MAJOR, VERSION_MINOR, p, levels, flags])
    head += int(model_identifier(weights)).to_bytes(4, "little")
    head += int(config_digest(weights)).to_bytes(4, "little")
    head += int(cfg.seed).to_bytes(8, "little")
    head += int(scale_fixed).to_bytes(4, "little")
    head += int(ratio_fixed).to_bytes(4, "little")
    for c in counts:
        head += write_varint(int(c))
    out = bytearray(head)
    for blob in (params_blob, coord_blob, feat_blob):
        out += write_varint(len(blob))
        out += blob
        out += crc32c(blob).to_bytes(4, "little")
    return bytes(out)


def parse_header(data):
    """Header + substream extents; validates framing and checksums."""
    if len(data) < _FIXED_HEADER_BYTES:
        raise DecodeError("bitstream shorter than its fixed header")
    if data[:4] != MAGIC:
        raise DecodeError("bad magic, not a PGPC bitstream")
    major, minor, p, levels, flags = data[4:9]
    if major != VERSION_MAJOR:
        raise DecodeError(f"unsupported major version {major}")
    if flags & ~_FLAG_PRIOR:
        raise DecodeError(f"unknown flag bits 0x{flags:02x}")
    if not 1 <= p <= 16:
        raise DecodeError(f"precision {p} out of range")
    if not 1 <= levels <= p - 1:
        raise DecodeError(f"scale count {levels} invalid for precision {p}")
    model_id = int.from_bytes(data[9:13], "little")
    digest = int.from_bytes(data[13:17], "little")
    seed = int.from_bytes(data[17:25], "little")
    scale_fixed = int.from_bytes(data[25:29], "little")
    ratio_fixed = int.from_bytes(data[29:33], "little")
    pos = 33
    counts = []
    for _ in range(levels + 1):
        c, pos = read_varint(data, pos)
        counts.append(c)
    if counts[0] > _MAX_POINTS or counts[0] > 1 << (3 * p):
        raise DecodeError(f"implausible point count {counts[0]}")
    for a, b in zip(counts, counts[1:]):
        if b < 1 or b > a:
            raise DecodeError(f"occupancy counts must decrease, got {counts}")
    prior = bool(flags & _FLAG_PRIOR)
    if prior and scale_fixed == 0:
        raise DecodeError("prior flag set but scale is zero")
    if prior and ratio_fixed == 0:
        raise DecodeError("prior flag set but sampling ratio is zero")
    if prior and ratio_fixed > _MAX_RATIO << 16:
        raise DecodeError(f"implausible sampling ratio {ratio_fixed / 65536.0:.1f}")
    header = Header(
        precision=p,
        levels=levels,
        prior=prior,
        model_id=model_id,
        config_digest=digest,
        seed=seed,
        scale_fixed=scale_fixed,
        ratio_fixed=ratio_fixed,
        counts=counts,
    )
    spans = []
    for i in range(3):
        length, pos = read_varint(data, pos)
        if pos + length + 4 > len(data):
            raise DecodeError(f"substream {i} overruns the container")
        payload = data[pos : pos + length]
        pos += length
        stored = int.from_bytes(data[pos : pos + 4], "little")
        pos += 4
        if crc32c(payload) != stored:
            raise DecodeError(f"substream {i} checksum mismatch")
        spans.append(payload)
    if pos != len(data):
        raise DecodeError(f"{len(data) - pos} trailing bytes after last substream")
    return header, spans


def decode(data, template, weights):
    """Decompress a bitstream produced by encode; total over malformed input."""
    try:
        header, spans = parse_header(data)
        if header.model_id != model_identifier(weights):
            raise DecodeError("bitstream was produced with different weights")
        if header.config_digest != config_digest(weights):
            raise DecodeError("bitstream network config does not match weights")
        if header.levels != weights.config.levels:
            raise DecodeError("scale count differs from the weights config")
        p = header.precision
        levels = header.levels
        params_blob, coord_blob, feat_blob = spans

        coords_l = decode_coords(coord_blob)
        if coord_blob[0] != p - levels:
            raise DecodeError("coordinate substream depth mismatch")
        if len(coords_l) != header.counts[levels]:
            raise DecodeError(
                f"decoded {len(coords_l)} coarse points, header says {header.counts[levels]}"
            )
        tables = build_cdf_tables(_entropy_model(weights))
        symbols = decode_features(feat_blob, tables, len(coords_l))

        if header.prior:
            qparams = decode_params(params_blob)
            if qparams.scale_fixed != header.scale_fixed:
                raise DecodeError("parameter substream scale disagrees with header")
            seeds = derive_seeds(header.seed)
            n_samples = max(1, int(round((header.ratio_fixed / 65536.0) * header.counts[0])))
            if n_samples > _MAX_POINTS:
                raise DecodeError("implausible prior sample count")
            aligned = prior_aligned_cloud(template, qparams, p, n_samples, seeds["sample"])
            aligned_stack = extract_features(aligned, weights)
            f_warped = warp_features(aligned_stack, coords_l, weights)
            base = np.asarray(f_warped.feats)
        else:
            if len(params_blob) != 0:
                raise DecodeError("prior flag off but parameter substream not empty")
            base = np.zeros(
                (len(coords_l), weights.config.latent_channels),
                dtype=np.asarray(weights.detached().arrays["warp.final.w"]).dtype,
            )
        latent_feats = base + symbols.astype(base.dtype)
        latent = SparseTensor(coords_l, latent_feats, levels)
        counts_fine = header.counts[levels - 1 :: -1]
        cloud, _ = propagate(latent, counts_fine, weights, precision=p)
        return cloud
    except DecodeError:
        raise
    except Exception as exc:  # total parsing: nothing else may escape
        raise DecodeError(f"malformed bitstream ({type(exc).__name__}: {exc})") from exc


@dataclass
class StreamReport:
    total_bits: int
    framing_bits: int
    params_bits: int
    coords_bits: int
    features_bits: int
    params_pct: float
    coords_pct: float
    features_pct: float

    def as_dict(self):
        return dict(self.__dict__)


def bitstream_report(data):
    """Bit accounting per substream; percentages over the coded payloads."""
    header, spans = parse_header(data)
    bits = [8 * len(s) for s in spans]
    payload_bits = sum(bits)
    framing = 8 * len(data) - payload_bits
    shares = [100.0 * b / payload_bits if payload_bits else 0.0 for b in bits]
    return StreamReport(
        total_bits=8 * len(data),
        framing_bits=framing,
        params_bits=bits[0],
        coords_bits=bits[1],
        features_bits=bits[2],
        params_pct=shares[0],
        coords_pct=shares[1],
        features_pct=shares[2],
    )
