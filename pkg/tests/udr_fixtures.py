"""Latent-response fixtures with known disentanglement structure."""

import numpy as np
from scipy.stats import special_ortho_group

from erpscan.udr import LatentResponseMatrix

N_INFORMATIVE = 6


def base_responses(seed, n=5000):
    """Six independent informative latents and four collapsed (constant) ones."""
    rng = np.random.default_rng(seed)
    means = np.zeros((n, 10))
    means[:, :N_INFORMATIVE] = rng.standard_normal((n, N_INFORMATIVE)) * rng.uniform(0.5, 2.0, N_INFORMATIVE)
    kl = np.zeros(10)
    kl[:N_INFORMATIVE] = 0.5 * np.mean(means[:, :N_INFORMATIVE] ** 2, axis=0)
    kl[N_INFORMATIVE:] = 0.001
    return LatentResponseMatrix(f"base{seed}", means, kl)


def permuted_clone(r, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(10)
    signs = rng.choice([-1.0, 1.0], size=10)
    return LatentResponseMatrix(r.model_id + "_perm", r.means[:, perm] * signs, r.kl[perm])


def rotated_clone(r, seed):
    """Mix the informative latents by a random rotation."""
    Q = special_ortho_group.rvs(N_INFORMATIVE, random_state=seed)
    means = r.means.copy()
    means[:, :N_INFORMATIVE] = r.means[:, :N_INFORMATIVE] @ Q
    kl = r.kl.copy()
    kl[:N_INFORMATIVE] = 0.5 * np.mean(means[:, :N_INFORMATIVE] ** 2, axis=0)
    return LatentResponseMatrix(r.model_id + "_rot", means, kl)


def fixture_set(n_pairs=5):
    """(base, permuted, rotated) triples over several seeds."""
    out = []
    for s in range(n_pairs):
        b = base_responses(100 + s)
        out.append((b, permuted_clone(b, 200 + s), rotated_clone(b, 300 + s)))
    return out
