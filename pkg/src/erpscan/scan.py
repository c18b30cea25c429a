"""Symbol grounding on top of a frozen beta-VAE.

SCAN is a small VAE over 12-slot label vectors whose posterior is pulled
towards the image posterior of the paired ERP, KL(q_image || q_symbol).  Once
trained it maps images to labels (image posterior means through the SCAN
decoder) and labels to images (symbol posterior samples through the beta-VAE
decoder).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diff
from .diff import LayerSpec, ParameterStore
from .labels import BLOCKS, FACTORS, N_SLOTS, LabelError, LabelVector, block_slices
from .vae import (KL_INFORMATIVE, LATENT_DIM, LOGVAR_RANGE, Checkpoint, LatentPosterior,
                  decode, encode)

log = logging.getLogger(__name__)

ARCH_SCAN = "scan-mlp-v1"
HIDDEN = 128

_PARAMS = [
    ("scan.enc1.w", (N_SLOTS, HIDDEN)), ("scan.enc1.b", (HIDDEN,)),
    ("scan.enc2.w", (HIDDEN, HIDDEN)), ("scan.enc2.b", (HIDDEN,)),
    ("scan.enc3.w", (HIDDEN, 2 * LATENT_DIM)), ("scan.enc3.b", (2 * LATENT_DIM,)),
    ("scan.dec1.w", (LATENT_DIM, HIDDEN)), ("scan.dec1.b", (HIDDEN,)),
    ("scan.dec2.w", (HIDDEN, HIDDEN)), ("scan.dec2.b", (HIDDEN,)),
    ("scan.dec3.w", (HIDDEN, N_SLOTS)), ("scan.dec3.b", (N_SLOTS,)),
]
_ENC = [
    LayerSpec("dense", ("scan.enc1.w", "scan.enc1.b")), LayerSpec("relu"),
    LayerSpec("dense", ("scan.enc2.w", "scan.enc2.b")), LayerSpec("relu"),
    LayerSpec("dense", ("scan.enc3.w", "scan.enc3.b")),
]
_DEC = [
    LayerSpec("dense", ("scan.dec1.w", "scan.dec1.b")), LayerSpec("relu"),
    LayerSpec("dense", ("scan.dec2.w", "scan.dec2.b")), LayerSpec("relu"),
    LayerSpec("dense", ("scan.dec3.w", "scan.dec3.b")),
]


class SpecificationError(ValueError):
    pass


@dataclass
class GroundingPair:
    y: LabelVector
    x: np.ndarray          # 6x256 image

    def __post_init__(self):
        if not self.y.is_full:
            raise LabelError("grounding pairs need every label block set")


@dataclass
class ScanConfig:
    lr: float = 1e-4
    batch: int = 16
    iterations: int = 20_000
    seed: int = 0
    # probability that a label block is hidden in a training symbol
    mask_rate: float = 0.0
    # weight each block's cross-entropy by N / (K n_c) of the true class
    balance_labels: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 <= self.mask_rate < 1.0:
            raise SpecificationError("mask_rate must lie in [0, 1)")


@dataclass
class ScanCheckpoint:
    arch: str
    config: ScanConfig
    params: ParameterStore
    step: int = 0
    trace: list = field(default_factory=list)
    grounding_arch: str = ""
    grounding_digest: str = ""

    @property
    def mode(self) -> str:
        return "SCAN"

    @property
    def seed(self) -> int:
        return self.config.seed

    def meta(self) -> dict:
        return dict(arch=self.arch, step=self.step, grounding_arch=self.grounding_arch,
                    grounding_digest=self.grounding_digest, **asdict(self.config))


def build_store(dtype=np.float64) -> ParameterStore:
    return ParameterStore(_PARAMS, dtype=dtype)


def init_scan(config: ScanConfig) -> ScanCheckpoint:
    store = build_store(np.dtype(config.dtype))
    diff.glorot_init(store, np.random.default_rng([config.seed, 10]))
    return ScanCheckpoint(ARCH_SCAN, config, store)


def parameter_count() -> int:
    return len(build_store())


def _as_symbols(y) -> np.ndarray:
    if isinstance(y, LabelVector):
        return y.encode()[None]
    if isinstance(y, (list, tuple)) and y and isinstance(y[0], LabelVector):
        return np.stack([v.encode() for v in y])
    y = np.asarray(y, dtype=float)
    y = y[None] if y.ndim == 1 else y
    if y.shape[1:] != (N_SLOTS,):
        raise LabelError(f"symbols must have {N_SLOTS} slots, got {y.shape}")
    for name, sl in block_slices().items():
        block = y[:, sl]
        if np.any((block != 0) & (block != 1)) or np.any(block.sum(axis=1) > 1):
            raise LabelError(f"block {name} is not one-hot")
    return y


def _encode_raw(store, y):
    h, tape = diff.run_forward(_ENC, store, y.astype(store.dtype))
    lo, hi = LOGVAR_RANGE
    raw = h[:, LATENT_DIM:]
    return h[:, :LATENT_DIM], np.clip(raw, lo, hi), tape, (raw > lo) & (raw < hi)


def scan_encode(scan: ScanCheckpoint, y) -> LatentPosterior:
    """q(z|y) for a LabelVector, a list of them, or raw 12-slot encodings."""
    if isinstance(y, (list, tuple)) and y and isinstance(y[0], LabelVector):
        single = False
    else:
        single = isinstance(y, LabelVector) or np.asarray(y).ndim == 1
    mean, logvar, _, _ = _encode_raw(scan.params, _as_symbols(y))
    if single:
        return LatentPosterior(mean[0], logvar[0])
    return LatentPosterior(mean, logvar)


def decode_logits(scan: ScanCheckpoint, z) -> np.ndarray:
    z = np.asarray(z, dtype=scan.params.dtype)
    out, _ = diff.run_forward(_DEC, scan.params, z[None] if z.ndim == 1 else z)
    return out[0] if z.ndim == 1 else out


def _objective(store, y, ground: LatentPosterior, noise, backward: bool, scale: float = 1.0,
               slot_weights=None) -> dict:
    mean, logvar, enc_tape, live = _encode_raw(store, y)
    std = np.exp(0.5 * logvar)
    z = mean + std * noise
    logits, dec_tape = diff.run_forward(_DEC, store, z)
    # a weighted one-hot target gives the class-weighted cross-entropy and its gradient
    target = y if slot_weights is None else y * slot_weights
    nll, d_logits = diff.block_softmax_nll(logits, target, BLOCKS)
    klp, dm_p, dl_p = diff.gaussian_kl_prior(mean, logvar)
    klg, g = diff.gaussian_kl_pair(ground.mean, ground.logvar, mean, logvar)
    out = dict(label_nll=nll * scale, kl_prior=klp * scale, kl_ground=klg * scale,
               total=(nll + klp + klg) * scale)
    if backward:
        dz = diff.run_backward(dec_tape, d_logits * scale, store)
        g_mean = dz + scale * (dm_p + g["mean_b"])
        g_logvar = (dz * noise * std * 0.5 + scale * (dl_p + g["logvar_b"])) * live
        diff.run_backward(enc_tape, np.concatenate([g_mean, g_logvar], axis=1), store, input_grad=False)
    return out


def image_posteriors(bvae: Checkpoint, images: np.ndarray, chunk: int = 256) -> LatentPosterior:
    means, logvars = [], []
    for i in range(0, len(images), chunk):
        post = encode(bvae, images[i:i + chunk])
        means.append(post.mean)
        logvars.append(post.logvar)
    return LatentPosterior(np.concatenate(means).astype(np.float64),
                           np.concatenate(logvars).astype(np.float64))


def scan_loss(scan: ScanCheckpoint, pair, frozen_bvae: Checkpoint, noise) -> dict:
    """Label NLL, KL to the prior, grounding KL(q_image || q_symbol) and their sum.

    ``pair`` is a GroundingPair or a list of them; the loss is the batch mean.
    No gradients are produced, and the beta-VAE is only read.
    """
    pairs = [pair] if isinstance(pair, GroundingPair) else list(pair)
    y = np.stack([p.y.encode() for p in pairs])
    ground = image_posteriors(frozen_bvae, np.stack([p.x for p in pairs]))
    noise = np.asarray(noise, dtype=float).reshape(len(pairs), LATENT_DIM)
    return _objective(scan.params, y, ground, noise, backward=False, scale=1.0 / len(pairs))


def scan_loss_and_grad(store: ParameterStore, y: np.ndarray, ground: LatentPosterior,
                       noise: np.ndarray, slot_weights=None) -> dict:
    dt = store.dtype
    ground = LatentPosterior(ground.mean.astype(dt), ground.logvar.astype(dt))
    if slot_weights is not None:
        slot_weights = np.asarray(slot_weights, dtype=dt)
    return _objective(store, y.astype(dt), ground, noise.astype(dt), backward=True, scale=1.0 / len(y),
                      slot_weights=slot_weights)


def label_slot_weights(y: np.ndarray) -> np.ndarray:
    """Per-slot class weight N / (K n_c) within each block, so every class of
    a factor carries the same total weight and the mean weight is 1."""
    y = np.asarray(y, dtype=float)
    counts = y.sum(axis=0)
    w = np.zeros(N_SLOTS)
    for sl in block_slices().values():
        c = counts[sl]
        k = int((c > 0).sum())
        w[sl] = np.where(c > 0, c.sum() / (k * np.maximum(c, 1)), 0.0)
    return w


def _mask_blocks(rng: np.random.Generator, y: np.ndarray, rate: float) -> np.ndarray:
    if rate <= 0:
        return y
    y = y.copy()
    slices = list(block_slices().values())
    hide = rng.random((len(y), len(slices))) < rate
    # keep at least one block visible
    full = hide.all(axis=1)
    if full.any():
        hide[full, rng.integers(len(slices), size=int(full.sum()))] = False
    for j, sl in enumerate(slices):
        y[hide[:, j], sl] = 0.0
    return y


def train_scan(pairs: Sequence[GroundingPair], frozen_bvae: Checkpoint,
               config: Optional[ScanConfig] = None) -> ScanCheckpoint:
    """Adam on the SCAN objective with the image posteriors computed once
    from the frozen beta-VAE."""
    config = config or ScanConfig()
    if not pairs:
        raise ValueError("no grounding pairs")
    digest = frozen_bvae.params.digest()
    y_all = np.stack([p.y.encode() for p in pairs])
    ground = image_posteriors(frozen_bvae, np.stack([p.x for p in pairs]))
    weights = label_slot_weights(y_all) if config.balance_labels else None
    scan = init_scan(config)
    scan.grounding_arch, scan.grounding_digest = frozen_bvae.arch, digest
    store = scan.params
    adam = diff.AdamState(lr=config.lr)
    shuffle_rng = np.random.default_rng([config.seed, 11])
    noise_rng = np.random.default_rng([config.seed, 12])
    mask_rng = np.random.default_rng([config.seed, 13])
    order = np.empty(0, dtype=np.int64)
    window = []
    for step in range(1, config.iterations + 1):
        if order.size < config.batch:
            order = np.concatenate([order, shuffle_rng.permutation(len(pairs))])
        idx, order = order[:config.batch], order[config.batch:]
        noise = noise_rng.standard_normal((len(idx), LATENT_DIM))
        y = _mask_blocks(mask_rng, y_all[idx], config.mask_rate)
        g = LatentPosterior(ground.mean[idx], ground.logvar[idx])
        losses = scan_loss_and_grad(store, y, g, noise, weights)
        diff.adam_step(store, adam)
        window.append([losses[k] for k in ("label_nll", "kl_prior", "kl_ground", "total")])
        if step % 100 == 0 or step == config.iterations:
            m = np.mean(window, axis=0)
            scan.trace.append(dict(step=step, label_nll=float(m[0]), kl_prior=float(m[1]),
                                   kl_ground=float(m[2]), total=float(m[3])))
            window = []
    scan.step = config.iterations
    if frozen_bvae.params.digest() != digest:
        raise RuntimeError("beta-VAE parameters changed during SCAN training")
    return scan


def classify_batch(images: np.ndarray, bvae: Checkpoint, scan: ScanCheckpoint):
    """Predicted class per factor (n, 5) and per-block probabilities."""
    means = image_posteriors(bvae, np.asarray(images)).mean
    probs = diff.block_softmax(decode_logits(scan, means), BLOCKS)
    pred = np.stack([p.argmax(axis=1) for p in probs], axis=1)
    return pred, probs


def classify(x: np.ndarray, bvae: Checkpoint, scan: ScanCheckpoint):
    """Label prediction for one image through the posterior means."""
    pred, probs = classify_batch(np.asarray(x)[None], bvae, scan)
    label = LabelVector(**{f: int(v) for f, v in zip(FACTORS, pred[0])})
    return label, [p[0] for p in probs]


def sample_from_symbol(y_partial: LabelVector, scan: ScanCheckpoint, bvae: Checkpoint,
                       count: int, seed: int = 0, noise: Optional[np.ndarray] = None) -> list:
    """Decode ``count`` samples of q(z|y) through the beta-VAE decoder."""
    if y_partial.is_empty:
        raise SpecificationError("symbol has no label block set")
    if count == 0:
        return []
    post = scan_encode(scan, y_partial)
    if noise is None:
        noise = np.random.default_rng([seed, 14]).standard_normal((count, LATENT_DIM))
    z = post.mean + np.exp(0.5 * post.logvar) * noise
    return list(decode(bvae, z))


def factor_association(scan: ScanCheckpoint, threshold: float = KL_INFORMATIVE):
    """Per factor and latent: max over the factor's classes of the KL of the
    one-hot symbol posterior to the prior.  Returns the 5x10 matrix and the
    fraction of cells at or below ``threshold``."""
    mat = np.zeros((len(FACTORS), LATENT_DIM))
    for i, (factor, width) in enumerate(zip(FACTORS, BLOCKS)):
        ys = [LabelVector.single(factor, c) for c in range(width)]
        post = scan_encode(scan, ys)
        kl = diff.gaussian_kl_prior_per_dim(post.mean, post.logvar)
        mat[i] = kl.max(axis=0)
    return mat, float(np.mean(mat <= threshold))
