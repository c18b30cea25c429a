"""Convolutional AE and beta-VAE over 6x256 ERP images."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diff
from .diff import LayerSpec, ParameterStore

log = logging.getLogger(__name__)

LATENT_DIM = 10
IMAGE_SHAPE = (6, 256)
LOGVAR_RANGE = (-10.0, 10.0)
KL_INFORMATIVE = 0.01
ARCH_BVAE = "conv-bvae-v1"
ARCH_AE = "conv-ae-v1"
DEFAULT_ITERATIONS = 20_000
TRACE_EVERY = 100


def _layers(mode: str):
    head = 2 * LATENT_DIM if mode == "BVAE" else LATENT_DIM
    params = [
        ("enc.conv1.w", (6, 6, 32)), ("enc.conv1.b", (32,)),
        ("enc.conv2.w", (6, 32, 32)), ("enc.conv2.b", (32,)),
        ("enc.fc.w", (2048, 128)), ("enc.fc.b", (128,)),
        ("enc.head.w", (128, head)), ("enc.head.b", (head,)),
        ("dec.fc1.w", (LATENT_DIM, 128)), ("dec.fc1.b", (128,)),
        ("dec.fc2.w", (128, 2048)), ("dec.fc2.b", (2048,)),
        ("dec.deconv1.w", (6, 32, 32)), ("dec.deconv1.b", (32,)),
        ("dec.deconv2.w", (6, 32, 6)), ("dec.deconv2.b", (6,)),
    ]
    encoder = [
        LayerSpec("conv1d", ("enc.conv1.w", "enc.conv1.b"), (("stride", 2),)),
        LayerSpec("relu"),
        LayerSpec("conv1d", ("enc.conv2.w", "enc.conv2.b"), (("stride", 2),)),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", ("enc.fc.w", "enc.fc.b")),
        LayerSpec("relu"),
        LayerSpec("dense", ("enc.head.w", "enc.head.b")),
    ]
    decoder = [
        LayerSpec("dense", ("dec.fc1.w", "dec.fc1.b")),
        LayerSpec("relu"),
        LayerSpec("dense", ("dec.fc2.w", "dec.fc2.b")),
        LayerSpec("relu"),
        LayerSpec("reshape", (), (("shape", (64, 32)),)),
        LayerSpec("conv1d_transpose", ("dec.deconv1.w", "dec.deconv1.b"), (("stride", 2), ("out_len", 128))),
        LayerSpec("relu"),
        LayerSpec("conv1d_transpose", ("dec.deconv2.w", "dec.deconv2.b"), (("stride", 2), ("out_len", 256))),
        LayerSpec("sigmoid"),
    ]
    return params, encoder, decoder


@dataclass
class TrainConfig:
    mode: str = "BVAE"
    beta: float = 1.0
    lr: float = 1e-4
    batch: int = 16
    iterations: int = DEFAULT_ITERATIONS
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in ("AE", "BVAE"):
            raise ValueError(f"mode must be AE or BVAE, got {self.mode!r}")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.mode == "AE":
            self.beta = 0.0


@dataclass
class LatentPosterior:
    mean: np.ndarray
    logvar: np.ndarray


@dataclass
class Checkpoint:
    arch: str
    config: TrainConfig
    params: ParameterStore
    step: int = 0
    trace: list[dict] = field(default_factory=list)

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def beta(self) -> float:
        return self.config.beta

    @property
    def seed(self) -> int:
        return self.config.seed

    def meta(self) -> dict:
        return dict(arch=self.arch, step=self.step, **asdict(self.config))

    def clone(self, **config_changes) -> "Checkpoint":
        """Deep copy; keyword arguments override config fields (e.g. seed)."""
        return Checkpoint(self.arch, replace(self.config, **config_changes), self.params.copy(),
                          self.step, [dict(t) for t in self.trace])


def arch_for_mode(mode: str) -> str:
    return ARCH_BVAE if mode == "BVAE" else ARCH_AE


def build_store(mode: str, dtype=np.float64) -> ParameterStore:
    params, _, _ = _layers(mode)
    return ParameterStore(params, dtype=dtype)


def init_checkpoint(config: TrainConfig, zero_head: bool = False) -> Checkpoint:
    store = build_store(config.mode, dtype=np.dtype(config.dtype))
    rng = np.random.default_rng([config.seed, 0])
    diff.glorot_init(store, rng, skip=("enc.head.w",) if zero_head else ())
    return Checkpoint(arch_for_mode(config.mode), config, store)


def parameter_count(mode: str) -> int:
    return len(build_store(mode))


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _as_batch(x: np.ndarray, dtype) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != IMAGE_SHAPE:
        raise diff.ShapeError(f"expected images of shape {IMAGE_SHAPE}, got {x.shape[1:]}")
    return x, single


def _time_major(x: np.ndarray) -> np.ndarray:
    # (B, 6, 256) image rows -> (B, 256, 6) layout used by the conv kernels
    return np.ascontiguousarray(x.transpose(0, 2, 1))


def _encode_raw(store: ParameterStore, mode: str, x: np.ndarray):
    _, enc, _ = _layers(mode)
    h, tape = diff.run_forward(enc, store, _time_major(x))
    if mode == "AE":
        return h, None, tape, None
    lo, hi = LOGVAR_RANGE
    raw = h[:, LATENT_DIM:]
    logvar = np.clip(raw, lo, hi)
    return h[:, :LATENT_DIM], logvar, tape, (raw > lo) & (raw < hi)


def encode(ckpt: Checkpoint, x: np.ndarray) -> LatentPosterior:
    """Posterior over the 10 latents for one image (6x256) or a batch.

    An AE has no variance head; its code is returned as the mean with the
    logvar pinned at the clamp floor, i.e. an (almost) point posterior.
    """
    xb, single = _as_batch(x, ckpt.params.dtype)
    mean, logvar, _, _ = _encode_raw(ckpt.params, ckpt.mode, xb)
    if logvar is None:
        logvar = np.full_like(mean, LOGVAR_RANGE[0])
    if single:
        return LatentPosterior(mean[0], logvar[0])
    return LatentPosterior(mean, logvar)


def encode_means(ckpt: Checkpoint, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = [encode(ckpt, images[i:i + chunk]).mean for i in range(0, len(images), chunk)]
    return np.concatenate(out).astype(np.float64)


def sample_latent(posterior: LatentPosterior, noise: np.ndarray) -> np.ndarray:
    logvar = np.clip(posterior.logvar, *LOGVAR_RANGE)
    return posterior.mean + np.exp(0.5 * logvar) * noise


def decode(ckpt: Checkpoint, z: np.ndarray) -> np.ndarray:
    """Bernoulli means in (0, 1) for one latent vector or a batch."""
    z = np.asarray(z, dtype=ckpt.params.dtype)
    single = z.ndim == 1
    _, _, dec = _layers(ckpt.mode)
    out, _ = diff.run_forward(dec, ckpt.params, z[None] if single else z)
    out = out.transpose(0, 2, 1)
    return out[0] if single else out


def reconstruct(ckpt: Checkpoint, x: np.ndarray) -> np.ndarray:
    return decode(ckpt, encode(ckpt, x).mean)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def vae_loss(ckpt: Checkpoint, x: np.ndarray, beta: float, noise: np.ndarray) -> dict:
    """Reconstruction NLL, KL to the unit prior and total = nll + beta*kl, summed."""
    return _vae_objective(ckpt.params, x, beta, noise, backward=False)


def ae_loss(ckpt: Checkpoint, x: np.ndarray) -> float:
    if ckpt.mode != "AE":
        raise ValueError("ae_loss needs an AE-mode checkpoint")
    return _ae_objective(ckpt.params, x, backward=False)["total"]


def _vae_objective(store: ParameterStore, x: np.ndarray, beta: float, noise: np.ndarray,
                   backward: bool, scale: float = 1.0) -> dict:
    xb, single = _as_batch(x, store.dtype)
    noise = np.asarray(noise, dtype=store.dtype).reshape(xb.shape[0], LATENT_DIM)
    mean, logvar, enc_tape, live = _encode_raw(store, "BVAE", xb)
    std = np.exp(0.5 * logvar)
    z = mean + std * noise
    _, _, dec = _layers("BVAE")
    recon, dec_tape = diff.run_forward(dec, store, z)
    nll, d_recon = diff.bernoulli_nll(recon, _time_major(xb))
    kl, d_mean, d_logvar = diff.gaussian_kl_prior(mean, logvar)
    out = dict(recon_nll=nll * scale, kl=kl * scale, total=(nll + beta * kl) * scale)
    if backward:
        dz = diff.run_backward(dec_tape, d_recon * scale, store)
        g_mean = dz + beta * scale * d_mean
        g_logvar = (dz * noise * std * 0.5 + beta * scale * d_logvar) * live
        diff.run_backward(enc_tape, np.concatenate([g_mean, g_logvar], axis=1), store,
                          input_grad=False)
    return out


def _ae_objective(store: ParameterStore, x: np.ndarray, backward: bool, scale: float = 1.0) -> dict:
    xb, _ = _as_batch(x, store.dtype)
    _, enc, dec = _layers("AE")
    xt = _time_major(xb)
    code, enc_tape = diff.run_forward(enc, store, xt)
    recon, dec_tape = diff.run_forward(dec, store, code)
    value, d_recon = diff.mse(recon, xt)
    if backward:
        dz = diff.run_backward(dec_tape, d_recon * scale, store)
        diff.run_backward(enc_tape, dz, store, input_grad=False)
    return dict(recon_nll=value * scale, kl=0.0, total=value * scale)


def loss_and_grad(store: ParameterStore, mode: str, x: np.ndarray, beta: float,
                  noise: np.ndarray | None) -> dict:
    """Batch-mean objective; accumulates its gradient into ``store``."""
    scale = 1.0 / (x.shape[0] if x.ndim == 3 else 1)
    if mode == "AE":
        return _ae_objective(store, x, backward=True, scale=scale)
    return _vae_objective(store, x, beta, noise, backward=True, scale=scale)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(dataset: np.ndarray, config: TrainConfig, zero_head: bool = False) -> Checkpoint:
    """Minibatch Adam on the AE or beta-VAE objective.

    Shuffling and reparameterization noise come from independent seeded
    streams, so identical configs give bit-identical checkpoints.
    """
    data = np.asarray(dataset, dtype=np.dtype(config.dtype))
    if len(data) == 0:
        raise ValueError("empty dataset")
    ckpt = init_checkpoint(config, zero_head=zero_head)
    store = ckpt.params
    adam = diff.AdamState(lr=config.lr)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    noise_rng = np.random.default_rng([config.seed, 2])
    order = np.empty(0, dtype=np.int64)
    window = []
    for step in range(1, config.iterations + 1):
        if order.size < config.batch:
            order = np.concatenate([order, shuffle_rng.permutation(len(data))])
        idx, order = order[:config.batch], order[config.batch:]
        noise = None
        if config.mode == "BVAE":
            noise = noise_rng.standard_normal((len(idx), LATENT_DIM)).astype(data.dtype)
        losses = loss_and_grad(store, config.mode, data[idx], config.beta, noise)
        diff.adam_step(store, adam)
        window.append((losses["recon_nll"], losses["kl"], losses["total"]))
        if step % TRACE_EVERY == 0 or step == config.iterations:
            r, k, t = np.mean(window, axis=0)
            ckpt.trace.append(dict(step=step, recon=float(r), kl=float(k), total=float(t)))
            window = []
        if step % 5000 == 0:
            log.info("%s beta=%.3f seed=%d step %d loss %.2f", config.mode, config.beta,
                     config.seed, step, ckpt.trace[-1]["total"])
    ckpt.step = config.iterations
    return ckpt


def default_beta_grid(n: int = 10, lo: float = 0.075, hi: float = 2.0) -> list[float]:
    return [float(b) for b in np.linspace(lo, hi, n)]


def sweep(dataset: np.ndarray, betas: Sequence[float], seeds_per_beta: int,
          iterations: int = DEFAULT_ITERATIONS, base_seed: int = 0, **kwargs) -> list[Checkpoint]:
    if not betas:
        raise ValueError("betas must be nonempty")
    out = []
    for bi, beta in enumerate(betas):
        for s in range(seeds_per_beta):
            seed = base_seed + 1000 * bi + s
            cfg = TrainConfig(mode="BVAE", beta=float(beta), iterations=iterations, seed=seed, **kwargs)
            out.append(train(dataset, cfg))
    return out


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------


def traverse(ckpt: Checkpoint, x: np.ndarray, dim: int, lo: float = -2.0, hi: float = 2.0,
             steps: int = 9) -> list[np.ndarray]:
    """Decode the posterior mean of ``x`` with latent ``dim`` swept over [lo, hi]."""
    if not 0 <= dim < LATENT_DIM:
        raise IndexError(f"latent dim {dim} outside 0..{LATENT_DIM - 1}")
    base = encode(ckpt, x).mean
    values = np.linspace(lo, hi, steps) if steps > 1 else np.array([lo])
    zs = np.repeat(base[None], len(values), axis=0)
    zs[:, dim] = values
    return list(decode(ckpt, zs))


def informative_latents(ckpt: Checkpoint, dataset: np.ndarray,
                        threshold: float = KL_INFORMATIVE) -> tuple[np.ndarray, np.ndarray]:
    """Dataset-mean KL per latent and the mask of latents above ``threshold``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    kls = []
    for i in range(0, len(dataset), 256):
        post = encode(ckpt, dataset[i:i + 256])
        kls.append(diff.gaussian_kl_prior_per_dim(post.mean.astype(np.float64),
                                                  post.logvar.astype(np.float64)))
    kl = np.concatenate(kls).mean(axis=0)
    return kl, kl > threshold
