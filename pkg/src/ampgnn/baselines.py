"""Reference detectors: regularized linear MMSE and exact enumeration."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .amp import categorical_moments

MAX_HYPOTHESES = 2**20


class CapacityError(ValueError):
    """The enumeration would exceed :data:`MAX_HYPOTHESES`."""


class DetectorNumericalError(ArithmeticError):
    pass


def mmse_detect(H: np.ndarray, y: np.ndarray, sigma2, signal_var: float = 1.0) -> np.ndarray:
    """Solve (H^T H + sigma'^2 I) x = H^T y on the real-equivalent system.

    ``sigma'^2`` is the per-real-dimension noise-to-signal ratio,
    ``(sigma2 / 2) / (signal_var / 2)``.
    """
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    reg = np.asarray(sigma2, dtype=np.float64) / signal_var
    n = H.shape[-1]
    Ht = np.swapaxes(H, -1, -2)
    gram = Ht @ H + reg[..., None, None] * np.eye(n)
    rhs = np.einsum("...nm,...m->...n", Ht, y)
    try:
        return np.linalg.solve(gram, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise DetectorNumericalError(f"MMSE factorization failed: {exc}") from None


@dataclass(frozen=True)
class MarginalTable:
    """Exact per-dimension posteriors.

    ``probs`` is (..., 2N, L) over ``levels``; ``mean``/``var`` follow the
    moment convention of :func:`ampgnn.amp.categorical_moments`;
    ``map_idx`` is the jointly most probable level-index vector.
    """

    probs: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    map_idx: np.ndarray
    levels: np.ndarray


def _hypotheses(n: int, n_levels: int) -> np.ndarray:
    return np.array(list(itertools.product(range(n_levels), repeat=n)), dtype=np.int64)


def enumerate_posterior(
    H: np.ndarray,
    y: np.ndarray,
    sigma2,
    levels: np.ndarray,
    prior: np.ndarray | None = None,
    chunk: int = 4096,
) -> MarginalTable:
    """Brute-force posterior p(x | y, H) over every level combination.

    The log-likelihood is ``-||y - Hx||^2 / sigma2`` (noise ``sigma2/2`` per
    real dimension).
    """
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    L = len(levels)
    n = H.shape[-1]
    if n * np.log2(L) > np.log2(MAX_HYPOTHESES):
        raise CapacityError(f"{L}^{n} hypotheses exceed the limit of {MAX_HYPOTHESES}")
    if prior is None:
        prior = np.full(L, 1.0 / L)
    logp = np.log(prior)
    hyp = _hypotheses(n, L)
    batch = np.broadcast_shapes(H.shape[:-2], y.shape[:-1])
    s2 = np.asarray(sigma2, dtype=np.float64).reshape(np.shape(sigma2) + (1,))

    # per chunk: log-joint (..., K); reduce into per-dimension log-marginals
    log_marg = np.full(batch + (n, L), -np.inf)
    best = np.full(batch, -np.inf)
    best_idx = np.zeros(batch + (n,), dtype=np.int64)
    for start in range(0, len(hyp), chunk):
        h = hyp[start : start + chunk]
        X = levels[h]
        resid = y[..., None, :] - np.einsum("...mn,kn->...km", H, X)
        lj = -np.sum(resid * resid, axis=-1) / s2 + logp[h].sum(axis=-1)
        k = np.argmax(lj, axis=-1)
        top = np.take_along_axis(lj, k[..., None], axis=-1)[..., 0]
        better = top > best
        best = np.where(better, top, best)
        best_idx = np.where(better[..., None], h[k], best_idx)
        for d in range(n):
            for level in range(L):
                sel = h[:, d] == level
                if sel.any():
                    part = logsumexp(lj[..., sel], axis=-1)
                    log_marg[..., d, level] = np.logaddexp(log_marg[..., d, level], part)
    probs = np.exp(log_marg - logsumexp(log_marg, axis=-1, keepdims=True))
    mean, var = categorical_moments(probs, levels)
    return MarginalTable(probs=probs, mean=mean, var=var, map_idx=best_idx, levels=levels)


def symbol_errors(decisions: np.ndarray, truth: np.ndarray) -> int:
    decisions, truth = np.asarray(decisions), np.asarray(truth)
    if decisions.shape != truth.shape:
        raise ValueError(f"length mismatch: {decisions.shape} vs {truth.shape}")
    return int(np.count_nonzero(decisions != truth))


def ser(decisions: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of complex symbols decided wrongly."""
    truth = np.asarray(truth)
    if truth.size == 0:
        raise ValueError("empty symbol stream")
    return symbol_errors(decisions, truth) / truth.size
