"""Unsupervised disentanglement ranking across seeds of the same beta.

Two models trained with different seeds are compared through the absolute
Spearman correlation between their latent responses on the same data.  A
disentangled model's informative latents should each match exactly one latent
of its peer (up to permutation and sign), which the relative-strength score
rewards.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .vae import KL_INFORMATIVE, Checkpoint, encode_means, informative_latents


class UndefinedScoreError(ValueError):
    """A model has no same-beta peer to be compared with."""


@dataclass
class LatentResponseMatrix:
    model_id: str
    means: np.ndarray     # (n, 10)
    kl: np.ndarray        # (10,)

    def __post_init__(self):
        if self.means.ndim != 2 or self.means.shape[1] != len(self.kl):
            raise ValueError("latent response columns must match the KL vector")
        if np.any(self.kl < 0):
            raise ValueError("KL values must be nonnegative")


@dataclass
class UdrScore:
    model_id: str
    beta: float
    seed: int
    score: float
    n_informative: int
    pair_scores: tuple


def spearman_rho(x, y) -> float:
    """Pearson correlation of average ranks; 0 if either input is constant."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("spearman_rho needs two equal-length sequences of length >= 2")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt((rx @ rx) * (ry @ ry))
    if den == 0:
        return 0.0
    return float(np.clip((rx @ ry) / den, -1.0, 1.0))


def _rank_columns(m: np.ndarray) -> np.ndarray:
    r = rankdata(m, axis=0)
    r -= r.mean(axis=0)
    norm = np.sqrt((r * r).sum(axis=0))
    return r, norm


def similarity_matrix(a: LatentResponseMatrix, b: LatentResponseMatrix) -> np.ndarray:
    """Entry (p, q) is |rho(a[:, p], b[:, q])|; constant columns give 0."""
    if a.means.shape[0] != b.means.shape[0]:
        raise ValueError(f"row count mismatch: {a.means.shape[0]} vs {b.means.shape[0]}")
    ra, na = _rank_columns(a.means)
    rb, nb = _rank_columns(b.means)
    num = ra.T @ rb
    den = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(np.abs(r), 0.0, 1.0)


def _relative_strength(R: np.ndarray, mask: np.ndarray) -> float:
    # columns of R indexed by the masked model: max over rows squared / column sum
    total = 0.0
    for q in np.flatnonzero(mask):
        col = R[:, q]
        s = col.sum()
        if s > 0:
            total += col.max() ** 2 / s
    return total


def pair_score(R, kl_a, kl_b, threshold: float = KL_INFORMATIVE) -> float:
    R = np.asarray(R, dtype=float)
    ia = np.asarray(kl_a) > threshold
    ib = np.asarray(kl_b) > threshold
    d = ia.sum() + ib.sum()
    if d == 0:
        return 0.0
    return float((_relative_strength(R, ib) + _relative_strength(R.T, ia)) / d)


def response_matrix(ckpt: Checkpoint, dataset: np.ndarray, model_id: str = "") -> LatentResponseMatrix:
    kl, _ = informative_latents(ckpt, dataset)
    return LatentResponseMatrix(model_id, encode_means(ckpt, dataset), kl)


def model_id(ckpt: Checkpoint) -> str:
    return f"beta{ckpt.beta:.4f}_seed{ckpt.seed}"


def rank_models(checkpoints: Sequence[Checkpoint], dataset: np.ndarray) -> list[UdrScore]:
    """Median pair score of every model against its same-beta peers."""
    groups = defaultdict(list)
    for ck in checkpoints:
        groups[round(ck.beta, 12)].append(ck)
    responses = {id(ck): response_matrix(ck, dataset, model_id(ck)) for ck in checkpoints}
    out = []
    for beta in sorted(groups):
        members = groups[beta]
        if len(members) < 2:
            raise UndefinedScoreError(f"beta={beta} has a single model; UDR needs >= 2 seeds")
        for ck in members:
            ra = responses[id(ck)]
            scores = []
            for peer in members:
                if peer is ck:
                    continue
                rb = responses[id(peer)]
                scores.append(pair_score(similarity_matrix(ra, rb), ra.kl, rb.kl))
            out.append(UdrScore(ra.model_id, ck.beta, ck.seed, float(np.median(scores)),
                                int((ra.kl > KL_INFORMATIVE).sum()), tuple(scores)))
    return out


def score_responses(groups: dict) -> list[tuple[str, float]]:
    """Same as ``rank_models`` for precomputed response matrices keyed by group."""
    out = []
    for key in sorted(groups):
        members = groups[key]
        if len(members) < 2:
            raise UndefinedScoreError(f"group {key!r} has a single model")
        for i, ra in enumerate(members):
            s = [pair_score(similarity_matrix(ra, rb), ra.kl, rb.kl) for j, rb in enumerate(members) if j != i]
            out.append((ra.model_id, float(np.median(s))))
    return out
