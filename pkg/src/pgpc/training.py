"""Rate-distortion training: loss terms, Adam, and the toy-scale loop.

The distortion side scores the pre-pruning candidate logits of every
upsampling block against the voxelized source occupancy (natural-log BCE,
averaged per scale, summed over scales).  The rate side measures the coded
size of the noisy-quantized feature residual under the factorized density,
in bits per input point.  total = lambda * R + D.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .codec import prior_aligned_cloud, splitmix64
from .entropy import FactorizedModel, quantize_features
from .errors import ConfigurationError, ContractViolationError, DegenerateInputError
from .geometry import VOXEL_EPS, Mesh, PointCloud, sample_surface_uniform, voxelize
from .network import (
    NetworkConfig,
    extract_features,
    init_weights,
    propagate,
    residual,
    save_weights,
    warp_features,
)
from .prior import PriorParams, pose_mesh, quantize_params
from .sparse import downsample_coord_set, pack_coords

_P_LO = 1e-7
_P_HI = 1.0 - 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    rate: float  # bits per input point
    distortion: float  # summed multiscale BCE, natural log
    total: float  # lam * rate + distortion
    lam: float

    def __post_init__(self):
        if self.rate < 0 or self.distortion < 0:
            raise ContractViolationError("rate and distortion must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    lambdas: tuple = (0.2, 0.5, 1.1, 2.5, 6.0, 9.0, 13.0)
    learning_rate: float = 16e-4
    lr_decay: float = 0.9  # multiplicative, applied per epoch
    epochs: int = 4
    batch_size: int = 1
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not self.lambdas or any(l <= 0 for l in self.lambdas):
            raise ConfigurationError("every lambda must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr_decay must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be at least 1")


# --- loss terms -----------------------------------------------------------------


def occupancy_keys(source_coords, levels):
    """Packed key sets of the occupied source voxels, index = scale (0..levels).

    Scores from propagate carry their scale, so bce_multiscale can look the
    matching ground truth up directly.
    """
    coords = np.asarray(source_coords, dtype=np.int64)
    out = [np.sort(pack_coords(coords))]
    for _ in range(levels):
        coords = downsample_coord_set(coords)
        out.append(np.sort(pack_coords(coords)))
    return out


def bce_multiscale(scores, truth_keys):
    """Summed per-scale mean binary cross entropy of candidate occupancy.

    scores: CandidateScores list from propagate (pre-pruning logits).
    truth_keys: per-scale sorted packed key arrays, indexed by scale
    (occupancy_keys output).  Natural log, probabilities clamped so a
    saturated wrong answer stays finite.
    """
    if len(scores) == 0:
        raise ContractViolationError("no candidate scales to score")
    if max(s.scale for s in scores) >= len(truth_keys):
        raise ContractViolationError(
            f"ground truth covers {len(truth_keys)} scales, scores reach "
            f"scale {max(s.scale for s in scores)}"
        )
    total = None
    for s in scores:
        keys = pack_coords(np.asarray(s.coords, dtype=np.int64))
        x = np.isin(keys, truth_keys[s.scale]).astype(np.float64)[:, None]
        p = ad.clip(ad.sigmoid(s.logits), _P_LO, _P_HI)
        ll = ad.add(ad.mul(x, ad.log(p)), ad.mul(1.0 - x, ad.log(ad.sub(1.0, p))))
        term = ad.mul(ad.asum(ll), -1.0 / len(keys))
        total = term if total is None else ad.add(total, term)
    return total


def rate_term(noisy_symbols, model, n_points):
    """Coded size of the residual block in bits per input point."""
    if n_points <= 0:
        raise ContractViolationError("n_points must be positive")
    if ad.val(noisy_symbols).shape[0] == 0:
        return np.asarray(0.0)
    return ad.mul(model.bits_per_symbol(noisy_symbols), 1.0 / float(n_points))


def total_loss(rate, distortion, lam):
    """lam * R + D as a graph node; lam may itself be a Var."""
    return ad.add(ad.mul(rate, lam), distortion)


def entropy_model_from(weights):
    """FactorizedModel view of a weight set (keeps Vars live for training)."""
    y_min, y_max = weights.entropy_bounds()
    params = {
        k: v for k, v in weights.arrays.items() if k.startswith("ent.") and k != "ent.range"
    }
    return FactorizedModel(params, y_min, y_max)


# --- optimizer ------------------------------------------------------------------


class Adam:
    """Adam with coupled L2 weight decay, fixed update order."""

    def __init__(self, arrays, lr=16e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.arrays = dict(arrays)  # name -> Var, insertion order fixes reduction order
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(v.value) for k, v in self.arrays.items()}
        self._v = {k: np.zeros_like(v.value) for k, v in self.arrays.items()}

    def step(self, grads=None):
        """Apply one update from each Var's .grad (or an explicit dict)."""
        self.t += 1
        for name, var in self.arrays.items():
            g = grads[name] if grads is not None else var.grad
            if g is None:
                g = np.zeros_like(var.value)
            g = np.asarray(g, dtype=var.value.dtype) + self.wd * var.value
            m = self._m[name] = self.b1 * self._m[name] + (1 - self.b1) * g
            v = self._v[name] = self.b2 * self._v[name] + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            var.value = var.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# --- toy dataset ----------------------------------------------------------------


@dataclass
class ToySample:
    cloud: PointCloud  # voxelized source
    params: PriorParams  # exact generating parameters
    aligned: PointCloud  # prior-side cloud, codec-identical construction


def _random_params(rng):
    return PriorParams(
        pose=rng.normal(0.0, 0.18, 69),
        shape=rng.normal(0.0, 0.45, 10),
        rotation=rng.normal(0.0, 0.25, 3),
        translation=np.zeros(3),
        gender=float(rng.uniform(-1, 1)),
    )


def make_toy_sample(template, precision, seed, surface_points=4000, margin=0.8):
    """One posed sampling of the toy body, voxelized with exact parameters.

    The pose/shape draw is placed so the body spans `margin` of the voxel
    cube; the resulting scale and translation become part of the ground
    truth parameters, so the codec's prior path can reproduce the cloud.
    """
    rng = np.random.default_rng(seed)
    params = _random_params(rng)
    posed = pose_mesh(template, params)
    v = posed.vertices
    extent = float((v.max(axis=0) - v.min(axis=0)).max())
    if extent <= 0:
        raise DegenerateInputError("degenerate pose draw")
    hi = 1 << precision
    s = margin * hi / extent
    center = 0.5 * (v.max(axis=0) + v.min(axis=0))
    delta = np.full(3, hi / 2.0) / s - center
    params = replace(params, translation=delta, scale=s)

    world = Mesh((v + delta) * s, posed.faces)
    pts = sample_surface_uniform(world, surface_points, seed=int(rng.integers(1 << 31)))
    cloud = voxelize(pts, precision, box=(np.zeros(3), float(hi) - VOXEL_EPS))
    aligned = prior_aligned_cloud(
        template, quantize_params(params), precision, len(cloud), int(rng.integers(1 << 31))
    )
    return ToySample(cloud=cloud, params=params, aligned=aligned)


def make_toy_dataset(template, count=64, precision=6, seed=0, surface_points=4000):
    state = seed
    samples = []
    for _ in range(count):
        sub, state = splitmix64(state)
        samples.append(make_toy_sample(template, precision, sub, surface_points))
    return samples


# --- the loop -------------------------------------------------------------------


@dataclass
class TrainRun:
    lam: float
    weights: object  # detached NetworkWeights snapshot
    log: list  # rows of (step, lambda, R, D, total)
    diverged: bool
    final_loss: float


def loss_for_sample(sample, weights, lam, rng):
    """Forward pass for one sample; returns (total Var, LossBreakdown)."""
    levels = weights.config.levels
    src_stack = extract_features(sample.cloud, weights)
    aligned_stack = extract_features(sample.aligned, weights)
    f_src = src_stack.tensors[-1]
    f_warp = warp_features(aligned_stack, f_src.coords, weights)
    delta = residual(f_src, f_warp)
    noisy = quantize_features(delta.feats, mode="train", rng=rng)

    model = entropy_model_from(weights)
    rate = rate_term(noisy, model, src_stack.counts[0])

    latent = replace(delta, feats=ad.add(f_warp.feats, noisy))
    counts_fine = src_stack.counts[levels - 1 :: -1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, scores = propagate(latent, counts_fine, weights, precision=sample.cloud.precision)
    truth = occupancy_keys(sample.cloud.points, levels)
    dist = bce_multiscale(scores, truth)

    total = total_loss(rate, dist, lam)
    breakdown = LossBreakdown(
        rate=float(ad.val(rate)), distortion=float(ad.val(dist)),
        total=float(ad.val(total)), lam=lam,
    )
    return total, breakdown


def train_one(dataset, lam, config, init=None, log_path=None, progress=None):
    """Train a single model at one lambda; returns a TrainRun."""
    if not dataset:
        raise ConfigurationError("empty dataset")
    weights = (init if init is not None else init_weights(seed=config.seed)).trainable()
    trainable = {k: v for k, v in weights.arrays.items() if isinstance(v, ad.Var)}
    opt = Adam(trainable, lr=config.learning_rate, weight_decay=config.weight_decay)

    order_rng = np.random.default_rng((config.seed, int(lam * 1e6), 0xD5))
    log_rows = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "lambda", "R", "D", "total"])

    snapshot = weights.detached()
    last_finite = snapshot
    diverged = False
    final_loss = float("nan")
    step = 0
    try:
        for epoch in range(config.epochs):
            opt.lr = config.learning_rate * config.lr_decay**epoch
            perm = order_rng.permutation(len(dataset))
            for start in range(0, len(perm), config.batch_size):
                batch = [dataset[i] for i in perm[start : start + config.batch_size]]
                grads = {k: np.zeros_like(v.value) for k, v in trainable.items()}
                breakdown = None
                for j, sample in enumerate(batch):
                    noise_rng = np.random.default_rng((config.seed, step, 1 + j))
                    total, breakdown = loss_for_sample(sample, weights, lam, noise_rng)
                    if not np.isfinite(breakdown.total):
                        diverged = True
                        break
                    ad.backward(total)
                    for k, v in trainable.items():
                        if v.grad is not None:
                            grads[k] += np.asarray(v.grad) / len(batch)
                if diverged:
                    break
                opt.step(grads)
                final_loss = breakdown.total
                last_finite = weights.detached()
                row = (step, lam, breakdown.rate, breakdown.distortion, breakdown.total)
                log_rows.append(row)
                if writer is not None:
                    writer.writerow([step, lam, f"{breakdown.rate:.6f}",
                                     f"{breakdown.distortion:.6f}", f"{breakdown.total:.6f}"])
                if progress is not None:
                    progress(step, breakdown)
                step += 1
            if diverged:
                break
    finally:
        if fh is not None:
            fh.close()
    return TrainRun(lam=lam, weights=last_finite, log=log_rows,
                    diverged=diverged, final_loss=final_loss)


def train(dataset, config=None, out_dir=None, init=None, progress=None):
    """Full sweep: one model per lambda, optionally checkpointed to out_dir."""
    cfg = config if config is not None else TrainConfig()
    runs = {}
    for lam in cfg.lambdas:
        log_path = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            log_path = os.path.join(out_dir, f"train_lambda_{lam:g}.csv")
        run = train_one(dataset, lam, cfg, init=init, log_path=log_path, progress=progress)
        runs[lam] = run
        if out_dir is not None:
            save_weights(run.weights, os.path.join(out_dir, f"model_lambda_{lam:g}.pgw"))
        if progress is not None:
            progress(-1, run)
    return runs


# --- adjoint checks -------------------------------------------------------------


@ad.register_check("bce_multiscale")
def _check_bce(rng):
    from .network import CandidateScores

    coords = np.array([[0, 0, 0], [0, 1, 2], [1, 1, 1], [2, 0, 1]], dtype=np.int64)
    logits = ad.leaf(rng, 4, 1, scale=1.5)
    truth = [np.sort(pack_coords(np.array([[0, 0, 0], [1, 1, 1]], dtype=np.int64)))]
    scores = [CandidateScores(coords, logits, 0)]
    return {"logits": logits}, lambda: bce_multiscale(scores, truth)


@ad.register_check("rate_term_lambda")
def _check_rate_lambda(rng):
    from .entropy import init_factorized_params

    params = {
        k: ad.Var(np.asarray(v, dtype=np.float64) + rng.normal(0, 0.15, np.shape(v)))
        for k, v in init_factorized_params(2, seed=int(rng.integers(1 << 31))).items()
    }
    model = FactorizedModel(params, np.array([-8, -8]), np.array([8, 8]))
    sym = rng.uniform(-3, 3, size=(6, 2))
    lam = ad.Var(np.asarray(1.7))
    dist = ad.Var(np.asarray(0.31))
    leaves = dict(params)
    leaves["lam"] = lam
    leaves["dist"] = dist
    return leaves, lambda: total_loss(rate_term(sym, model, 6), dist, lam)
