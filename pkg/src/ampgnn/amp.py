"""AMP detection on the real-equivalent 2M x 2N system.

Variance quantities (``v_hat``, ``V``, ``Sigma`` and ``sigma2``) are carried in
complex-entry units: each is twice the corresponding per-real-dimension
variance. The recursion is thus the real-valued AMP written with the
complex-valued constants (``sigma2`` per complex entry, ``v_hat = N/M`` at
start), the denoiser weight is ``exp(-(r - s)^2 / Sigma)``, and the posterior
variance returned by the denoiser is twice the per-dimension variance.

Arrays may carry leading batch axes: ``H`` is (..., 2M, 2N), ``y`` (..., 2M),
and ``sigma2`` a scalar or an array broadcastable to the batch shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

VAR_FLOOR = 1e-13


class NumericalDivergence(ArithmeticError):
    """A non-finite value appeared during an iteration."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class AmpState:
    x_hat: np.ndarray
    v_hat: np.ndarray
    Z: np.ndarray
    V: np.ndarray
    t: int = 1


@dataclass(frozen=True)
class EquivObservation:
    r: np.ndarray
    Sigma: np.ndarray


@dataclass
class AmpTrajectory:
    """Per-iteration outputs of :func:`amp_detect`."""

    x_hat: list[np.ndarray] = field(default_factory=list)
    v_hat: list[np.ndarray] = field(default_factory=list)
    r: list[np.ndarray] = field(default_factory=list)
    Sigma: list[np.ndarray] = field(default_factory=list)
    diverged: bool = False
    diverged_at: int | None = None

    @property
    def final(self) -> np.ndarray:
        return self.x_hat[-1]


def _batch_scalar(sigma2, ndim_extra: int = 1) -> np.ndarray:
    s = np.asarray(sigma2, dtype=np.float64)
    return s.reshape(s.shape + (1,) * ndim_extra)


def amp_init(H: np.ndarray, y: np.ndarray, v_init: str | float = "n_over_m") -> AmpState:
    """x_hat = 0, v_hat = N/M, Z = y and V from one variance pass.

    ``v_init="prior"`` uses the unit prior variance instead of N/M; a float
    sets the value directly.
    """
    H = np.asarray(H, dtype=np.float64)
    M2, N2 = H.shape[-2:]
    batch = np.broadcast_shapes(H.shape[:-2], np.shape(y)[:-1])
    if v_init == "n_over_m":
        v0 = N2 / M2
    elif v_init == "prior":
        v0 = 1.0
    else:
        v0 = float(v_init)
    x_hat = np.zeros(batch + (N2,))
    v_hat = np.full(batch + (N2,), v0)
    V = np.einsum("...mn,...n->...m", H * H, v_hat)
    Z = np.broadcast_to(np.asarray(y, dtype=np.float64), batch + (M2,)).copy()
    return AmpState(x_hat=x_hat, v_hat=v_hat, Z=Z, V=V, t=1)


def amp_linear_step(state: AmpState, H: np.ndarray, y: np.ndarray, sigma2):
    """Variance/mean of z = Hx with the Onsager term, then the equivalent AWGN observation.

    Returns ``(EquivObservation, V, Z)`` for iteration ``state.t``.
    """
    s2 = _batch_scalar(sigma2)
    H2 = H * H
    V = np.einsum("...mn,...n->...m", H2, state.v_hat)
    prev_denom = np.maximum(s2 + state.V, VAR_FLOOR)
    # non-finite values are caught below and reported with the iteration index
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        Z = np.einsum("...mn,...n->...m", H, state.x_hat) - V * (y - state.Z) / prev_denom
        denom = np.maximum(s2 + V, VAR_FLOOR)
        Sigma = np.maximum(1.0 / np.einsum("...mn,...m->...n", H2, 1.0 / denom), VAR_FLOOR)
        r = state.x_hat + Sigma * np.einsum("...mn,...m->...n", H, (y - Z) / denom)
    for name, arr in (("V", V), ("Z", Z), ("Sigma", Sigma), ("r", r)):
        if not np.all(np.isfinite(arr)):
            raise NumericalDivergence(f"non-finite {name}", state.t)
    return EquivObservation(r=r, Sigma=Sigma), V, Z


def gaussian_categorical(obs: EquivObservation, levels: np.ndarray, prior: np.ndarray | None = None) -> np.ndarray:
    """Posterior weights over ``levels`` for r = x + w, computed in the log domain.

    Returns an array of shape ``r.shape + (len(levels),)`` whose last axis sums to 1.
    """
    levels = np.asarray(levels, dtype=np.float64)
    if prior is None:
        prior = np.full(len(levels), 1.0 / len(levels))
    r = np.asarray(obs.r)[..., None]
    Sigma = np.maximum(np.asarray(obs.Sigma), VAR_FLOOR)[..., None]
    logw = -((r - levels) ** 2) / Sigma + np.log(prior)
    return np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))


def categorical_moments(probs: np.ndarray, levels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and (complex-unit) variance of a categorical over ``levels``."""
    levels = np.asarray(levels, dtype=np.float64)
    mean = probs @ levels
    var = np.maximum(probs @ (levels * levels) - mean * mean, 0.0)
    return mean, 2.0 * var


def denoise(obs: EquivObservation, levels: np.ndarray, prior: np.ndarray | None = None):
    """Posterior mean and variance of x given r = x + w over a discrete alphabet."""
    return categorical_moments(gaussian_categorical(obs, levels, prior), levels)


def amp_detect(
    H: np.ndarray,
    y: np.ndarray,
    sigma2,
    levels: np.ndarray,
    T: int = 10,
    prior: np.ndarray | None = None,
    v_init: str | float = "n_over_m",
    on_divergence: str = "raise",
) -> AmpTrajectory:
    """Run T AMP iterations and return every iterate.

    ``on_divergence="last"`` stops at the first non-finite iteration and
    returns the iterates computed so far (flagged via ``diverged``).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    state = amp_init(H, y, v_init)
    traj = AmpTrajectory()
    for t in range(1, T + 1):
        try:
            obs, V, Z = amp_linear_step(state, H, y, sigma2)
            x_hat, v_hat = denoise(obs, levels, prior)
        except NumericalDivergence:
            if on_divergence != "last":
                raise
            traj.diverged, traj.diverged_at = True, t
            if not traj.x_hat:
                traj.x_hat.append(state.x_hat)
                traj.v_hat.append(state.v_hat)
            break
        traj.x_hat.append(x_hat)
        traj.v_hat.append(v_hat)
        traj.r.append(obs.r)
        traj.Sigma.append(obs.Sigma)
        state = replace(state, x_hat=x_hat, v_hat=v_hat, Z=Z, V=V, t=t + 1)
    return traj


def hard_decision(x_hat: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Index of the nearest level for each entry; ties go to the lower index."""
    levels = np.asarray(levels)
    return np.argmin(np.abs(np.asarray(x_hat)[..., None] - levels), axis=-1)
