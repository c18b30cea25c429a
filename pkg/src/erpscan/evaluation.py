"""Baseline classifiers and the balanced-accuracy evaluation harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import expit, log_expit
from sklearn.model_selection import StratifiedKFold


class SpecificationError(ValueError):
    pass


def class_weights(labels) -> np.ndarray:
    """w_i = N / n_{y_i}: every class gets the same total weight."""
    y = np.asarray(labels)
    if y.size == 0:
        raise SpecificationError("no labels")
    classes, inv, counts = np.unique(y, return_inverse=True, return_counts=True)
    return len(y) / counts[inv].astype(float)


def stratified_folds(labels, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    y = np.asarray(labels)
    _, counts = np.unique(y, return_counts=True)
    if counts.min() < k:
        raise SpecificationError(f"smallest class has {counts.min()} samples, fewer than k={k}")
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=int(seed) % 2**32)
    return [test for _, test in skf.split(np.zeros(len(y)), y)]


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------


def _standardize_stats(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


def _logistic_objective(w, b, X, t, s, lam, reg):
    # t in {-1, +1}; mean weighted log-loss plus penalty, both scaled by 1/N
    m = t * (X @ w + b)
    loss = -(s * log_expit(m)).sum() / len(t)
    pen = lam * (np.abs(w).sum() if reg == "L1" else 0.5 * (w @ w)) / len(t)
    return loss, pen


def _logistic_grad(w, b, X, t, s):
    m = t * (X @ w + b)
    r = -s * t * expit(-m) / len(t)
    return X.T @ r, r.sum()


def _fit_binary(X, t, s, reg, lam, max_iter, tol=1e-8):
    n, d = X.shape
    w, b = np.zeros(d), 0.0
    loss, pen = _logistic_objective(w, b, X, t, s, lam, reg)
    obj = loss + pen
    step = 1.0
    for _ in range(max_iter):
        gw, gb = _logistic_grad(w, b, X, t, s)
        if reg == "L2":
            gw = gw + lam * w / n
        while True:
            # backtracking on the smooth part; L1 uses the proximal step
            wn = w - step * gw
            bn = b - step * gb
            if reg == "L1":
                thr = step * lam / n
                wn = np.sign(wn) * np.maximum(np.abs(wn) - thr, 0.0)
            ln, pn = _logistic_objective(wn, bn, X, t, s, lam, reg)
            if reg == "L2":
                ok = ln + pn <= obj - 0.5 * step * (gw @ gw + gb * gb)
            else:
                dw, db = wn - w, bn - b
                smooth_ub = loss + gw @ dw + gb * db + (dw @ dw + db * db) / (2 * step)
                ok = ln <= smooth_ub + 1e-15
            if ok or step < 1e-12:
                break
            step *= 0.5
        new_obj = ln + pn
        done = obj - new_obj < tol
        w, b, loss, obj = wn, bn, ln, new_obj
        if done:
            break
        step *= 2.0
    return w, b


@dataclass
class LogRegModel:
    classes: np.ndarray
    coef: np.ndarray        # (n_models, d) in standardized space
    intercept: np.ndarray
    mu: np.ndarray
    sd: np.ndarray
    reg: str = "L2"
    strength: float = 1.0

    def decision(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=float) - self.mu) / self.sd
        return Z @ self.coef.T + self.intercept

    def predict(self, X) -> np.ndarray:
        f = self.decision(X)
        if len(self.classes) == 2:
            return self.classes[(f[:, 0] > 0).astype(int)]
        return self.classes[np.argmax(f, axis=1)]

    def score(self, X) -> np.ndarray:
        """Positive-class score for binary problems."""
        return self.decision(X)[:, 0]


def train_logreg(X, y, reg: str = "L2", strength: float = 1.0, weights=None,
                 max_iter: int = 500) -> LogRegModel:
    """Weighted, regularized logistic regression on standardized features.

    The penalty enters as ``strength * R(w)`` next to the summed weighted
    log-loss (``strength`` plays the role of 1/C).  Multiclass problems are
    fitted one-vs-rest, each with its own balanced weights.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if not np.all(np.isfinite(X)):
        raise SpecificationError("features contain non-finite values")
    if reg not in ("L1", "L2"):
        raise SpecificationError(f"unknown regularizer {reg!r}")
    mu, sd = _standardize_stats(X)
    Z = (X - mu) / sd
    classes = np.unique(y)
    if len(classes) < 2:
        raise SpecificationError("need at least two classes")
    targets = [classes[1]] if len(classes) == 2 else list(classes)
    coefs, ints = [], []
    for c in targets:
        t = np.where(y == c, 1.0, -1.0)
        s = class_weights(t) if weights is None else np.asarray(weights, dtype=float)
        w, b = _fit_binary(Z, t, s, reg, strength, max_iter)
        coefs.append(w)
        ints.append(b)
    return LogRegModel(classes, np.array(coefs), np.array(ints), mu, sd, reg, strength)


def logreg_objective(model: LogRegModel, X, y, weights=None, coef=None, intercept=None) -> float:
    """Objective of a binary model at its solution or at given parameters."""
    Z = (np.asarray(X, dtype=float) - model.mu) / model.sd
    t = np.where(np.asarray(y) == model.classes[1], 1.0, -1.0)
    s = class_weights(t) if weights is None else np.asarray(weights, dtype=float)
    w = model.coef[0] if coef is None else coef
    b = model.intercept[0] if intercept is None else intercept
    loss, pen = _logistic_objective(w, b, Z, t, s, model.strength, model.reg)
    return loss + pen


# ---------------------------------------------------------------------------
# LDA
# ---------------------------------------------------------------------------


@dataclass
class LdaModel:
    classes: np.ndarray
    coef: np.ndarray       # (k, d)
    intercept: np.ndarray  # (k,)

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coef.T + self.intercept

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.decision(X), axis=1)]

    def score(self, X) -> np.ndarray:
        f = self.decision(X)
        return f[:, 1] - f[:, 0]


def train_lda(X, y, ridge: float = 1e-6) -> LdaModel:
    """Shared-covariance Gaussian classifier with equal class priors."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise SpecificationError("LDA needs at least two classes")
    means = np.array([X[y == c].mean(axis=0) for c in classes])
    centered = X - means[np.searchsorted(classes, y)]
    cov = centered.T @ centered / max(len(X) - len(classes), 1)
    cov = np.atleast_2d(cov) + ridge * np.eye(X.shape[1])
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SpecificationError("pooled covariance is singular after ridge") from exc
    P = cho_solve((chol, True), means.T).T          # Sigma^-1 mu_k
    intercept = -0.5 * np.einsum("kd,kd->k", P, means)
    return LdaModel(classes, P, intercept)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    counts: np.ndarray           # rows = true class, cols = predicted
    classes: tuple = ()

    @classmethod
    def from_predictions(cls, y_true, y_pred, classes=None) -> "ConfusionMatrix":
        y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
        classes = np.unique(np.concatenate([y_true, y_pred])) if classes is None else np.asarray(classes)
        k = len(classes)
        ti = np.searchsorted(classes, y_true)
        pi = np.searchsorted(classes, y_pred)
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (ti, pi), 1)
        return cls(counts, tuple(classes.tolist()))

    @classmethod
    def binary(cls, tp, fn, tn, fp) -> "ConfusionMatrix":
        return cls(np.array([[tn, fp], [fn, tp]], dtype=np.int64), (0, 1))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def recalls(self) -> np.ndarray:
        support = self.counts.sum(axis=1)
        if np.any(support == 0):
            raise SpecificationError("a true class has no samples")
        return np.diag(self.counts) / support


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall; for two classes (TPR + TNR) / 2."""
    return float(cm.recalls().mean())


@dataclass
class BalancedAccuracyPosterior:
    alpha: np.ndarray
    beta: np.ndarray
    mean: float
    lower: float
    upper: float
    mc_seed: int


def ba_posterior(cm: ConfusionMatrix, mc_samples: int = 100_000, seed: int = 0) -> BalancedAccuracyPosterior:
    """Monte Carlo posterior of the mean recall under flat Beta priors."""
    correct = np.diag(cm.counts).astype(float)
    wrong = cm.counts.sum(axis=1) - correct
    a, b = correct + 1, wrong + 1
    rng = np.random.default_rng(seed)
    draws = rng.beta(a[:, None], b[:, None], size=(len(a), mc_samples)).mean(axis=0)
    lo, hi = np.percentile(draws, [2.5, 97.5])
    mean = float(draws.mean())
    return BalancedAccuracyPosterior(a, b, mean, float(min(lo, mean)), float(max(hi, mean)), seed)


def pr_curve(scores, labels) -> list[tuple[float, float]]:
    """(precision, recall) with a threshold at every distinct score, from the
    highest threshold down, so recall is non-decreasing along the list."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if len(np.unique(y)) != 2:
        raise SpecificationError("pr_curve needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    pos = y.sum()
    return [(float(tp[i] / (tp[i] + fp[i])), float(tp[i] / pos)) for i in last]


def sparsity(w, tol: float = 1e-6) -> float:
    w = np.asarray(w, dtype=float).ravel()
    if w.size == 0:
        raise SpecificationError("empty weight vector")
    return float(np.mean(np.abs(w) < tol))


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


def logreg_trainer(reg: str = "L2", strength: float = 1.0, max_iter: int = 500) -> Callable:
    return lambda X, y: train_logreg(X, y, reg=reg, strength=strength, max_iter=max_iter)


def lda_trainer(ridge: float = 1e-6) -> Callable:
    return lambda X, y: train_lda(X, y, ridge=ridge)


@dataclass
class CvResult:
    confusion: ConfusionMatrix
    posterior: BalancedAccuracyPosterior
    predictions: np.ndarray
    folds: list = field(default_factory=list)

    @property
    def balanced_accuracy(self) -> float:
        return balanced_accuracy(self.confusion)


def cv_evaluate(X, y, trainer: Callable, k: int = 5, seed: int = 0,
                folds: Optional[Sequence[np.ndarray]] = None, mc_samples: int = 100_000) -> CvResult:
    """Pooled held-out predictions over stratified folds.

    The trainer only sees training rows; any standardization it does uses
    training statistics.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    folds = stratified_folds(y, k, seed) if folds is None else folds
    pred = np.empty_like(y)
    for test in folds:
        train = np.setdiff1d(np.arange(len(y)), test)
        model = trainer(X[train], y[train])
        pred[test] = model.predict(X[test])
    cm = ConfusionMatrix.from_predictions(y, pred, np.unique(y))
    return CvResult(cm, ba_posterior(cm, mc_samples, seed), pred, list(folds))
