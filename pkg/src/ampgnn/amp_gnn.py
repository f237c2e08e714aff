"""Unfolded AMP with a GNN posterior estimator in every layer."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import gnn as gnn_mod
from .amp import VAR_FLOOR, NumericalDivergence
from .comms import Constellation, complex_indices, complex_to_real_matrix, complex_to_real_vector, make_qam
from .gnn import GnnConfig, GnnState, GnnWeights
from .numkit import ConfigError, Tensor, clip_min, concat, container, matvec, no_grad, softmax

BUNDLE_VERSION = 1

# (r, Sigma, layer index) -> categorical over the levels, shape (..., K, n_levels)
PosteriorFn = Callable[[Tensor, Tensor, int], Tensor]


@dataclass(frozen=True)
class AmpGnnConfig:
    T: int = 10
    gnn: GnnConfig = field(default_factory=GnnConfig)
    Q: int = 4
    shared: bool = True
    v_init: str | float = "n_over_m"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        side = int(round(np.sqrt(self.Q)))
        if side * side != self.Q or side != self.gnn.n_levels:
            raise ConfigError(f"Q={self.Q} does not match {self.gnn.n_levels} readout levels")


@dataclass
class AmpGnnModel:
    config: AmpGnnConfig
    weights: list[GnnWeights]

    @classmethod
    def init(cls, config: AmpGnnConfig, rng: np.random.Generator) -> "AmpGnnModel":
        count = 1 if config.shared else config.T
        return cls(config, [GnnWeights.init(config.gnn, rng) for _ in range(count)])

    @property
    def constellation(self) -> Constellation:
        return make_qam(self.config.Q)

    def layer_weights(self, t: int) -> GnnWeights:
        return self.weights[0] if self.config.shared else self.weights[t]

    def named(self) -> dict[str, Tensor]:
        if self.config.shared:
            return self.weights[0].named()
        out = {}
        for t, w in enumerate(self.weights):
            out.update(w.named(f"layer{t:02d}."))
        return out

    def copy(self) -> "AmpGnnModel":
        tensors = {k: v.data.copy() for k, v in self.named().items()}
        return model_from_tensors(self.config, tensors)


def model_from_tensors(config: AmpGnnConfig, tensors: dict) -> AmpGnnModel:
    if config.shared:
        weights = [GnnWeights.from_named(tensors)]
    else:
        weights = [GnnWeights.from_named(tensors, f"layer{t:02d}.") for t in range(config.T)]
    return AmpGnnModel(config, weights)


@dataclass
class LayerTrace:
    r: list[np.ndarray] = field(default_factory=list)
    Sigma: list[np.ndarray] = field(default_factory=list)
    probs: list[np.ndarray] = field(default_factory=list)
    x_hat: list[np.ndarray] = field(default_factory=list)
    v_hat: list[np.ndarray] = field(default_factory=list)
    diverged_at: int | None = None


def gaussian_posterior(levels: np.ndarray, prior: np.ndarray | None = None) -> PosteriorFn:
    """Categorical of the AMP Gaussian denoiser, usable in place of the GNN."""
    levels = np.asarray(levels, dtype=np.float64)
    logp = np.log(np.full(len(levels), 1.0 / len(levels)) if prior is None else prior)

    def posterior(r: Tensor, Sigma: Tensor, t: int) -> Tensor:
        K = r.shape
        diff = r.reshape(*K, 1) - levels
        return softmax(-(diff.square()) / Sigma.reshape(*K, 1) + logp, axis=-1)

    return posterior


def _col(x: Tensor) -> Tensor:
    return x.reshape(*x.shape, 1)


def forward(
    H: np.ndarray,
    y: np.ndarray,
    sigma2,
    model: AmpGnnModel,
    posterior: PosteriorFn | None = None,
    strict: bool = True,
) -> tuple[Tensor, LayerTrace]:
    """Run the T unfolded layers on real-equivalent inputs.

    ``H`` is (..., 2M, 2N) and ``y`` (..., 2M). ``posterior`` replaces the GNN
    when given. With ``strict=False`` a non-finite layer stops the run and
    is recorded in ``trace.diverged_at`` instead of raising.
    """
    cfg = model.config
    levels = model.constellation.levels
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    M2, N2 = H.shape[-2:]
    batch = np.broadcast_shapes(H.shape[:-2], y.shape[:-1])
    s2 = np.asarray(sigma2, dtype=np.float64)
    s2 = s2.reshape(s2.shape + (1,))
    H2 = H * H
    Ht = np.swapaxes(H, -1, -2)
    H2t = np.swapaxes(H2, -1, -2)

    if cfg.v_init == "n_over_m":
        v0 = N2 / M2
    elif cfg.v_init == "prior":
        v0 = 1.0
    else:
        v0 = float(cfg.v_init)
    x_hat = Tensor(np.zeros(batch + (N2,)))
    v_hat = Tensor(np.full(batch + (N2,), v0))
    Z_prev = Tensor(np.broadcast_to(y, batch + (M2,)))
    V_prev = matvec(H2, v_hat)
    state: GnnState | None = None
    trace = LayerTrace()

    for t in range(cfg.T):
        V = matvec(H2, v_hat)
        Z = matvec(H, x_hat) - V * (y - Z_prev) / clip_min(V_prev + s2, VAR_FLOOR)
        denom = clip_min(V + s2, VAR_FLOOR)
        Sigma = clip_min(1.0 / matvec(H2t, 1.0 / denom), VAR_FLOOR)
        r = x_hat + Sigma * matvec(Ht, (y - Z) / denom)
        if posterior is None:
            attrs = concat([_col(r), _col(Sigma)], axis=-1)
            probs, state = gnn_mod.gnn_layer(
                attrs, H, y, sigma2, state, model.layer_weights(t), cfg.gnn.rounds
            )
        else:
            probs = posterior(r, Sigma, t)
        x_hat = (probs * levels).sum(axis=-1)
        v_hat = 2.0 * clip_min((probs * (levels * levels)).sum(axis=-1) - x_hat.square(), 0.0)

        trace.r.append(r.data)
        trace.Sigma.append(Sigma.data)
        trace.probs.append(probs.data)
        trace.x_hat.append(x_hat.data)
        trace.v_hat.append(v_hat.data)
        if not (np.all(np.isfinite(probs.data)) and np.all(np.isfinite(r.data))):
            if strict:
                raise NumericalDivergence("non-finite layer output", t + 1)
            trace.diverged_at = t + 1
            break
        Z_prev, V_prev = Z, V
    return x_hat, trace


def loss(x_hat: Tensor, x: np.ndarray) -> Tensor:
    """Squared error ||x - x_hat||^2 averaged over the batch axes."""
    err = (x_hat - np.asarray(x, dtype=np.float64)).square().sum(axis=-1)
    return err.mean() if err.ndim else err


def decide_levels(trace: LayerTrace) -> np.ndarray:
    """Argmax of the last finite categorical per real dimension (ties -> lower index)."""
    probs = trace.probs[-1]
    if trace.diverged_at is None:
        return np.argmax(probs, axis=-1)
    dec = np.argmax(np.nan_to_num(probs, nan=-1.0), axis=-1)
    for p in reversed(trace.probs[:-1]):
        bad = ~np.all(np.isfinite(probs), axis=-1)
        if not bad.any():
            break
        dec = np.where(bad, np.argmax(np.nan_to_num(p, nan=-1.0), axis=-1), dec)
        probs = np.where(bad[..., None], p, probs)
    return dec


def detect_real(H: np.ndarray, y: np.ndarray, sigma2, model: AmpGnnModel) -> np.ndarray:
    """Level-index decisions (..., 2N) for real-equivalent inputs."""
    with no_grad():
        _, trace = forward(H, y, sigma2, model, strict=False)
    return decide_levels(trace)


def detect(H: np.ndarray, y: np.ndarray, sigma2, model: AmpGnnModel) -> tuple[np.ndarray, np.ndarray]:
    """Complex inputs -> (symbol indices, constellation points), each (..., N)."""
    cons = model.constellation
    dec = detect_real(complex_to_real_matrix(H), complex_to_real_vector(y), sigma2, model)
    idx = complex_indices(dec, cons)
    return idx, cons.points[idx]


# -- bundles ----------------------------------------------------------------


def _config_tensors(cfg: AmpGnnConfig) -> dict[str, np.ndarray]:
    v_init = {"n_over_m": -1.0, "prior": -2.0}.get(cfg.v_init, cfg.v_init)
    vals = {
        "config.format_version": BUNDLE_VERSION,
        "config.T": cfg.T,
        "config.L": cfg.gnn.rounds,
        "config.N_u": cfg.gnn.n_u,
        "config.N_h1": cfg.gnn.n_h1,
        "config.N_h2": cfg.gnn.n_h2,
        "config.Q": cfg.Q,
        "config.shared": float(cfg.shared),
        "config.v_init": v_init,
    }
    return {k: np.array(float(v)) for k, v in vals.items()}


def _config_from_tensors(t: dict) -> AmpGnnConfig:
    version = int(t["config.format_version"])
    if version != BUNDLE_VERSION:
        raise ConfigError(f"unsupported bundle version {version}")
    Q = int(t["config.Q"])
    v = float(t["config.v_init"])
    v_init = {-1.0: "n_over_m", -2.0: "prior"}.get(v, v)
    return AmpGnnConfig(
        T=int(t["config.T"]),
        gnn=GnnConfig(
            n_u=int(t["config.N_u"]),
            n_h1=int(t["config.N_h1"]),
            n_h2=int(t["config.N_h2"]),
            rounds=int(t["config.L"]),
            n_levels=int(round(np.sqrt(Q))),
        ),
        Q=Q,
        shared=bool(t["config.shared"]),
        v_init=v_init,
    )


def bundle_tensors(model: AmpGnnModel) -> dict[str, np.ndarray]:
    out = {k: v.data for k, v in model.named().items()}
    out.update(_config_tensors(model.config))
    return out


def model_from_bundle(tensors: dict) -> AmpGnnModel:
    cfg = _config_from_tensors(tensors)
    weights = {k: v for k, v in tensors.items() if not k.startswith("config.")}
    return model_from_tensors(cfg, weights)


def save_bundle(path: str | os.PathLike, model: AmpGnnModel) -> None:
    container.save(path, bundle_tensors(model))


def load_bundle(path: str | os.PathLike) -> AmpGnnModel:
    return model_from_bundle(container.load(path))
