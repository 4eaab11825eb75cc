"""Learned entropy model and the two bitstream coders built on it.

Three things live here:

* a fully factorized density model over integer feature symbols, one
  independent scalar density per channel, built from four monotone stages
  so its CDF is a valid distribution function by construction;
* the feature coder: quantize, then range-code each channel against a
  frozen 16-bit cumulative frequency table derived from the model, with an
  escape symbol + raw 4-byte payload for out-of-table values;
* the coordinate coder: breadth-first octree occupancy bytes, each bit
  squeezed through an adaptive binary model.

The model evaluation routines are polymorphic over plain arrays and
autodiff variables, so training reuses the exact inference code path.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checksum import crc32c
from .errors import ContractViolationError, DecodeError
from .rangecoder import (
    PROB_TOTAL,
    AdaptiveBitModel,
    RangeDecoder,
    RangeEncoder,
)

# Stage widths of the scalar density network: 1 -> 3 -> 3 -> 3 -> 1.
FILTERS = (1, 3, 3, 3, 1)
N_STAGES = len(FILTERS) - 1

LIKELIHOOD_FLOOR = 2.0 ** -16

# Escape payload bias: symbols are carried as value + 2**31 in four bytes.
_ESCAPE_BIAS = 1 << 31


def factorized_param_names():
    names = []
    for k in range(N_STAGES):
        names.append(f"ent.w{k}")
        names.append(f"ent.b{k}")
        if k < N_STAGES - 1:
            names.append(f"ent.a{k}")
    return names


def init_factorized_params(channels, seed=0, init_scale=4.0):
    """Fresh parameter dict for a factorized model over `channels` channels.

    All matrix entries start equal (softplus inverse of a value chosen so
    the end-to-end slope at zero is 1/init_scale), biases and gates start
    at zero, so the initial density is symmetric about the origin.
    """
    del seed  # deterministic init; kept for signature uniformity
    gain = 1.0
    for k in range(N_STAGES):
        gain *= FILTERS[k]
    slope = (1.0 / (gain * init_scale)) ** (1.0 / N_STAGES)
    raw = float(np.log(np.expm1(slope)))
    params = {}
    for k in range(N_STAGES):
        d_in, d_out = FILTERS[k], FILTERS[k + 1]
        params[f"ent.w{k}"] = np.full((channels, d_in, d_out), raw)
        params[f"ent.b{k}"] = np.zeros((channels, d_out))
        if k < N_STAGES - 1:
            params[f"ent.a{k}"] = np.zeros((channels, d_out))
    return params


@dataclass
class FactorizedModel:
    """Factorized density over integer symbols, one density per channel.

    params maps the ent.* names to stacked per-channel arrays (Var during
    training, ndarray at inference).  y_min/y_max give the per-channel
    symbol range the frequency tables will cover; values outside escape.
    """

    params: dict
    y_min: np.ndarray
    y_max: np.ndarray

    @property
    def channels(self):
        return ad.val(self.params["ent.b0"]).shape[0]

    def cdf_logits(self, x):
        """Logit of the model CDF at x, shape (N, C) in, (N, C) out."""
        cols = []
        for c in range(self.channels):
            v = ad.slice_cols(x, c, c + 1)
            for k in range(N_STAGES):
                w = ad.index0(self.params[f"ent.w{k}"], c)
                b = ad.index0(self.params[f"ent.b{k}"], c)
                v = ad.add(ad.matmul(v, ad.softplus(w)), b)
                if k < N_STAGES - 1:
                    a = ad.index0(self.params[f"ent.a{k}"], c)
                    v = ad.add(v, ad.mul(ad.tanh(a), ad.tanh(v)))
            cols.append(v)
        return ad.concat_cols(cols)

    def likelihood(self, y):
        """P(symbol == y) per element, floored at 2**-16.  (N, C) -> (N, C)."""
        half = np.asarray(0.5)
        hi = ad.sigmoid(self.cdf_logits(ad.add(y, half)))
        lo = ad.sigmoid(self.cdf_logits(ad.sub(y, half)))
        return ad.maximum(ad.sub(hi, lo), np.asarray(LIKELIHOOD_FLOOR))

    def bits_per_symbol(self, y):
        """Total -log2 likelihood over a symbol block (scalar, AD-capable)."""
        p = self.likelihood(y)
        return ad.mul(ad.asum(ad.log(p)), np.asarray(-1.0 / np.log(2.0)))


def quantize_features(feats, mode="infer", rng=None):
    """Quantize feature rows to integer symbols.

    infer: round half away from zero (plain arrays only).
    train: additive uniform noise in [-0.5, 0.5); works on Vars and is the
    identity for gradients, which is exactly the straight-through rule.
    """
    if mode == "train":
        if rng is None:
            raise ContractViolationError("train-mode quantization needs an rng")
        noise = rng.uniform(-0.5, 0.5, size=ad.val(feats).shape)
        return ad.add(feats, noise)
    if mode != "infer":
        raise ContractViolationError(f"unknown quantization mode: {mode!r}")
    v = np.asarray(ad.val(feats), dtype=np.float64)
    return np.copysign(np.floor(np.abs(v) + 0.5), v).astype(np.int64)


def symbol_bounds_from_scale(sigma, margin=4.0):
    """Symmetric per-channel symbol range covering sigma * margin."""
    hw = np.maximum(np.ceil(np.abs(sigma) * margin), 1).astype(np.int64)
    return -hw, hw


@dataclass
class CdfTable:
    """Frozen 16-bit cumulative frequency table for one channel.

    cum has n_symbols + 2 entries: the regular symbols lo..hi plus a final
    escape slot; cum[-1] == 2**16 exactly.
    """

    lo: int
    hi: int
    cum: np.ndarray

    @property
    def n_regular(self):
        return self.hi - self.lo + 1

    @property
    def escape_index(self):
        return self.n_regular

    def interval(self, index):
        return int(self.cum[index]), int(self.cum[index + 1])

    def find(self, freq):
        return int(np.searchsorted(self.cum, freq, side="right") - 1)


def _freqs_from_probs(probs):
    """Scale probabilities to integer frequencies summing to exactly 2**16."""
    p = np.asarray(probs, dtype=np.float64)
    p = p / p.sum()
    f = np.maximum(np.floor(p * PROB_TOTAL).astype(np.int64), 1)
    diff = PROB_TOTAL - int(f.sum())
    while diff != 0:
        i = int(np.argmax(f))
        if diff > 0:
            f[i] += diff
            diff = 0
        else:
            take = min(f[i] - 1, -diff)
            f[i] -= take
            diff += take
            if take == 0:
                raise ContractViolationError("cannot fit frequency table in 16 bits")
    return f


def build_cdf_tables(model):
    """One CdfTable per channel covering [y_min - 1, y_max + 1] + escape."""
    tables = []
    for c in range(model.channels):
        lo = int(model.y_min[c]) - 1
        hi = int(model.y_max[c]) + 1
        ks = np.arange(lo, hi + 1, dtype=np.float64)[:, None]
        cm = FactorizedModel(
            {k: np.asarray(ad.val(v))[c : c + 1] for k, v in model.params.items()},
            model.y_min[c : c + 1],
            model.y_max[c : c + 1],
        )
        p = np.asarray(ad.val(cm.likelihood(ks)))[:, 0]
        p_escape = max(1.0 - float(p.sum()), LIKELIHOOD_FLOOR)
        freqs = _freqs_from_probs(np.append(p, p_escape))
        cum = np.concatenate([[0], np.cumsum(freqs)]).astype(np.int64)
        tables.append(CdfTable(lo=lo, hi=hi, cum=cum))
    return tables


# --- feature stream ---------------------------------------------------------

_FEATURE_HEADER_BYTES = 8


def encode_features(symbols, tables):
    """Range-code an (N, C) integer symbol block; returns the substream.

    Layout: u32le symbol count, u32le CRC-32C of the payload, payload.
    An empty block is just the 8-byte header.
    """
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.ndim != 2:
        raise ContractViolationError("symbols must be (N, C)")
    n, c = symbols.shape
    if c != len(tables):
        raise ContractViolationError("channel count does not match tables")
    enc = RangeEncoder()
    if n:
        for row in symbols:
            for ch in range(c):
                t = tables[ch]
                s = int(row[ch])
                if t.lo <= s <= t.hi:
                    lo_f, hi_f = t.interval(s - t.lo)
                    enc.encode(lo_f, hi_f, PROB_TOTAL)
                else:
                    lo_f, hi_f = t.interval(t.escape_index)
                    enc.encode(lo_f, hi_f, PROB_TOTAL)
                    raw = (s + _ESCAPE_BIAS) & 0xFFFFFFFF
                    for shift in (24, 16, 8, 0):
                        enc.encode_byte_uniform((raw >> shift) & 0xFF)
        payload = enc.finish()
    else:
        payload = b""
    return struct.pack("<II", n * c, crc32c(payload)) + payload


def decode_features(data, tables, count):
    """Inverse of encode_features; count is the expected row count."""
    if len(data) < _FEATURE_HEADER_BYTES:
        raise DecodeError("feature substream shorter than its header")
    n_sym, crc_stored = struct.unpack("<II", data[:8])
    c = len(tables)
    if n_sym != count * c:
        raise DecodeError(
            f"feature substream declares {n_sym} symbols, expected {count * c}"
        )
    payload = data[_FEATURE_HEADER_BYTES:]
    if crc32c(payload) != crc_stored:
        raise DecodeError("feature substream CRC mismatch")
    out = np.zeros((count, c), dtype=np.int64)
    if n_sym == 0:
        return out
    dec = RangeDecoder(payload)
    for i in range(count):
        for ch in range(c):
            t = tables[ch]
            idx = t.find(dec.decode_freq(PROB_TOTAL))
            lo_f, hi_f = t.interval(idx)
            dec.decode_update(lo_f, hi_f, PROB_TOTAL)
            if idx == t.escape_index:
                raw = 0
                for _ in range(4):
                    raw = (raw << 8) | dec.decode_byte_uniform()
                out[i, ch] = raw - _ESCAPE_BIAS
            else:
                out[i, ch] = t.lo + idx
    return out


# --- coordinate stream ------------------------------------------------------


def _morton_encode(coords, depth):
    m = np.zeros(len(coords), dtype=np.int64)
    x = coords[:, 0].astype(np.int64)
    y = coords[:, 1].astype(np.int64)
    z = coords[:, 2].astype(np.int64)
    for b in range(depth):
        m |= ((x >> b) & 1) << (3 * b + 2)
        m |= ((y >> b) & 1) << (3 * b + 1)
        m |= ((z >> b) & 1) << (3 * b)
    return m


def _morton_decode(m, depth):
    out = np.zeros((len(m), 3), dtype=np.int32)
    for b in range(depth):
        out[:, 0] |= (((m >> (3 * b + 2)) & 1) << b).astype(np.int32)
        out[:, 1] |= (((m >> (3 * b + 1)) & 1) << b).astype(np.int32)
        out[:, 2] |= (((m >> (3 * b)) & 1) << b).astype(np.int32)
    return out


def build_occupancy_bytes(coords, depth):
    """Breadth-first occupancy bytes for a coordinate set (bit 7 = child 0).

    This is the exact byte sequence the coordinate coder feeds through its
    bit models, exposed separately so it can be tested against hand-derived
    streams.
    """
    coords = np.asarray(coords)
    if len(coords) == 0:
        return np.zeros(0, dtype=np.uint8)
    if coords.min() < 0 or coords.max() >= (1 << depth):
        raise ContractViolationError("coordinates out of range for octree depth")
    morton = np.unique(_morton_encode(coords, depth))
    out = []
    for level in range(depth):
        children = np.unique(morton >> (3 * (depth - level - 1)))
        parents = children >> 3
        child_idx = (children & 7).astype(np.int64)
        uniq_parents, parent_pos = np.unique(parents, return_inverse=True)
        level_bytes = np.zeros(len(uniq_parents), dtype=np.uint8)
        np.bitwise_or.at(level_bytes, parent_pos, (128 >> child_idx).astype(np.uint8))
        out.append(level_bytes)
    return np.concatenate(out)


def encode_coords(coords, precision, level):
    """Octree-code integer coordinates living on the scale-`level` grid.

    Layout: u8 depth, u32le point count, range-coded occupancy bits with
    one adaptive binary model per bit position.
    """
    depth = precision - level
    if depth < 1 or depth > 21:
        raise ContractViolationError(f"octree depth {depth} out of range")
    coords = np.asarray(coords)
    head = bytes([depth]) + struct.pack("<I", len(coords))
    if len(coords) == 0:
        return head
    if coords.min() < 0 or coords.max() >= (1 << depth):
        raise ContractViolationError("coordinates out of range for octree depth")
    if len(np.unique(_morton_encode(coords, depth))) != len(coords):
        raise ContractViolationError("duplicate coordinates in octree input")
    occ = build_occupancy_bytes(coords, depth)
    enc = RangeEncoder()
    models = [AdaptiveBitModel() for _ in range(8)]
    for byte in occ:
        b = int(byte)
        for pos in range(8):
            models[pos].encode(enc, (b >> (7 - pos)) & 1)
    return head + enc.finish()


def decode_coords(data):
    """Inverse of encode_coords.  Total: corrupt input raises DecodeError."""
    if len(data) < 5:
        raise DecodeError("coordinate substream shorter than its header")
    depth = data[0]
    count = struct.unpack("<I", data[1:5])[0]
    if depth < 1 or depth > 21:
        raise DecodeError(f"octree depth {depth} out of range")
    if count > (1 << (3 * depth)) or count > 1 << 24:
        raise DecodeError(f"implausible octree point count {count}")
    if count == 0:
        return np.zeros((0, 3), dtype=np.int32)
    dec = RangeDecoder(data[5:])
    models = [AdaptiveBitModel() for _ in range(8)]
    nodes = np.array([0], dtype=np.int64)
    for level in range(depth):
        next_nodes = []
        for node in nodes:
            byte = 0
            for pos in range(8):
                byte = (byte << 1) | models[pos].decode(dec)
            if byte == 0:
                raise DecodeError("octree node with no occupied children")
            base = int(node) << 3
            for child in range(8):
                if byte & (128 >> child):
                    next_nodes.append(base | child)
        # any consistent stream has at most `count` nodes per level, and a
        # valid stream never renormalizes past its own end
        if len(next_nodes) > count:
            raise DecodeError("octree wider than its declared point count")
        if dec.overrun:
            raise DecodeError("octree payload exhausted mid-stream")
        nodes = np.asarray(next_nodes, dtype=np.int64)
    if len(nodes) != count:
        raise DecodeError(
            f"octree decoded {len(nodes)} points, header declared {count}"
        )
    coords = _morton_decode(nodes, depth)
    from .sparse import pack_coords

    order = np.argsort(pack_coords(coords.astype(np.int64)))
    return coords[order]


@ad.register_check("factorized_likelihood")
def _check_likelihood(rng):
    channels = 2
    raw = init_factorized_params(channels)
    params = {k: ad.Var(v + rng.normal(0, 0.2, v.shape)) for k, v in raw.items()}
    model = FactorizedModel(params, np.full(channels, -9), np.full(channels, 9))
    y = rng.integers(-4, 5, size=(6, channels)).astype(np.float64)
    return params, lambda: model.bits_per_symbol(y)
