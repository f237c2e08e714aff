"""Message-passing GNN over the real-equivalent users.

Every real dimension of x is a node; the graph is complete. Node tensors are
shaped (..., K, features) with K = 2N, edge tensors (..., K, K, features)
with entry ``[j, n]`` holding the quantity sent from node j to node n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import (
    ConfigError,
    GruParams,
    MlpParams,
    Tensor,
    as_tensor,
    concat,
    gru_step,
    linear,
    mlp_forward,
    parameter,
    relu,
    softmax,
    uniform_init,
)


@dataclass(frozen=True)
class GnnConfig:
    n_u: int = 8
    n_h1: int = 16
    n_h2: int = 8
    rounds: int = 2
    n_levels: int = 2

    def __post_init__(self):
        for name in ("n_u", "n_h1", "n_h2", "n_levels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")


@dataclass
class GnnWeights:
    enc_W: Tensor  # (n_u, 3)
    enc_b: Tensor  # (n_u,)
    prop: MlpParams  # 2 n_u + 2 -> n_h1 -> n_h2 -> n_u
    gru: GruParams  # input n_u + 2, hidden n_h1
    agg_W: Tensor  # (n_u, n_h1)
    agg_b: Tensor  # (n_u,)
    readout: MlpParams  # n_u -> n_h1 -> n_h2 -> n_levels

    @classmethod
    def init(cls, config: GnnConfig, rng: np.random.Generator) -> "GnnWeights":
        c = config
        return cls(
            enc_W=parameter(uniform_init(rng, (c.n_u, 3), 3)),
            enc_b=parameter(uniform_init(rng, (c.n_u,), 3)),
            prop=MlpParams.init([2 * c.n_u + 2, c.n_h1, c.n_h2, c.n_u], rng),
            gru=GruParams.init(c.n_u + 2, c.n_h1, rng),
            agg_W=parameter(uniform_init(rng, (c.n_u, c.n_h1), c.n_h1)),
            agg_b=parameter(uniform_init(rng, (c.n_u,), c.n_h1)),
            readout=MlpParams.init([c.n_u, c.n_h1, c.n_h2, c.n_levels], rng),
        )

    @property
    def config(self) -> GnnConfig:
        return GnnConfig(
            n_u=self.enc_W.shape[0],
            n_h1=self.gru.hidden,
            n_h2=self.prop.weights[1].shape[0],
            n_levels=self.readout.weights[-1].shape[0],
        )

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}enc.W1": self.enc_W, f"{prefix}enc.b1": self.enc_b}
        out.update(self.prop.named(f"{prefix}prop"))
        out.update(self.gru.named(f"{prefix}gru"))
        out[f"{prefix}agg.W2"] = self.agg_W
        out[f"{prefix}agg.b2"] = self.agg_b
        out.update(self.readout.named(f"{prefix}readout"))
        return out

    @classmethod
    def from_named(cls, tensors: dict, prefix: str = "") -> "GnnWeights":
        t = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        t = {k: v if isinstance(v, Tensor) else parameter(v) for k, v in t.items()}
        w = cls(
            enc_W=t["enc.W1"],
            enc_b=t["enc.b1"],
            prop=MlpParams.from_named(t, "prop"),
            gru=GruParams.from_named(t, "gru"),
            agg_W=t["agg.W2"],
            agg_b=t["agg.b2"],
            readout=MlpParams.from_named(t, "readout"),
        )
        w.check()
        return w

    def check(self) -> None:
        n_u = self.enc_W.shape[0]
        self.prop.check()
        self.readout.check()
        expected = {
            "enc.W1": (self.enc_W.shape, (n_u, 3)),
            "enc.b1": (self.enc_b.shape, (n_u,)),
            "prop input": ((self.prop.sizes[0],), (2 * n_u + 2,)),
            "prop output": ((self.prop.sizes[-1],), (n_u,)),
            "gru input": ((self.gru.input_dim,), (n_u + 2,)),
            "agg.W2": (self.agg_W.shape, (n_u, self.gru.hidden)),
            "agg.b2": (self.agg_b.shape, (n_u,)),
            "readout input": ((self.readout.sizes[0],), (n_u,)),
        }
        for what, (got, want) in expected.items():
            if tuple(got) != tuple(want):
                raise ConfigError(f"{what}: shape {got}, expected {want}")


@dataclass
class GnnState:
    u: Tensor  # (..., K, n_u)
    g: Tensor  # (..., K, n_h1)


def _sigma2_nodes(sigma2, batch: tuple, K: int) -> np.ndarray:
    s = np.asarray(sigma2, dtype=np.float64)
    return np.broadcast_to(s.reshape(s.shape + (1,) * (len(batch) + 1 - s.ndim)), batch + (K,))


def node_features(H: np.ndarray, y: np.ndarray, sigma2) -> np.ndarray:
    """[y^T h_n, h_n^T h_n, sigma2] per node, shape (..., K, 3)."""
    yh = np.einsum("...mn,...m->...n", H, y)
    hh = np.einsum("...mn,...mn->...n", H, H)
    s2 = _sigma2_nodes(sigma2, yh.shape[:-1], yh.shape[-1])
    return np.stack([yh, hh, s2], axis=-1)


def init_state(H: np.ndarray, y: np.ndarray, sigma2, weights: GnnWeights) -> GnnState:
    feats = node_features(H, y, sigma2)
    u = linear(Tensor(feats), weights.enc_W, weights.enc_b)
    g = Tensor(np.zeros(feats.shape[:-1] + (weights.gru.hidden,)))
    return GnnState(u=u, g=g)


def edge_features(H: np.ndarray, sigma2) -> np.ndarray:
    """[h_n^T h_j, sigma2] for every ordered pair, shape (..., K, K, 2).

    The diagonal (j == n) is filled but never used as an edge.
    """
    gram = np.einsum("...mj,...mn->...jn", H, H)
    s2 = np.asarray(sigma2, dtype=np.float64)
    s2 = np.broadcast_to(s2.reshape(s2.shape + (1, 1)), gram.shape)
    return np.stack([gram, s2], axis=-1)


def _hidden_edges(state: GnnState, edges: np.ndarray, weights: GnnWeights) -> Tensor:
    """Activations of D up to (excluding) its output layer, per ordered pair.

    The first affine layer splits into a sender, a receiver and an edge term,
    so node projections are computed once and broadcast over pairs.
    """
    mlp = weights.prop
    n_u = state.u.shape[-1]
    W, b = mlp.weights[0], mlp.biases[0]
    if W.shape[1] != 2 * n_u + 2:
        raise ConfigError(f"propagation input {W.shape[1]} != 2*{n_u}+2")
    u = state.u
    K = u.shape[-2]
    batch = u.shape[:-2]
    h1 = W.shape[0]
    send = linear(u, W[:, :n_u]).reshape(*batch, K, 1, h1)
    recv = linear(u, W[:, n_u : 2 * n_u]).reshape(*batch, 1, K, h1)
    h = relu(send + recv + linear(Tensor(edges), W[:, 2 * n_u :], b))
    for k in range(1, len(mlp.weights) - 1):
        h = relu(linear(h, mlp.weights[k], mlp.biases[k]))
    return h


def propagate(state: GnnState, edges: np.ndarray, weights: GnnWeights) -> Tensor:
    """m_jn = D([u_j, u_n, f_jn]) for all ordered pairs, shape (..., K, K, n_u)."""
    h = _hidden_edges(state, edges, weights)
    return linear(h, weights.prop.weights[-1], weights.prop.biases[-1])


def _message_sums(state: GnnState, edges: np.ndarray, weights: GnnWeights) -> Tensor:
    # the output layer of D is affine, so it commutes with the sum over senders
    h = _hidden_edges(state, edges, weights)
    K = h.shape[-2]
    pooled = (h * (1.0 - np.eye(K))[..., None]).sum(axis=-3)
    W, b = weights.prop.weights[-1], weights.prop.biases[-1]
    return linear(pooled, W) + b * float(K - 1)


def _update(state: GnnState, total: Tensor, attributes, weights: GnnWeights) -> GnnState:
    m = concat([total, as_tensor(attributes)], axis=-1)
    g = gru_step(weights.gru, state.g, m)
    u = linear(g, weights.agg_W, weights.agg_b)
    return GnnState(u=u, g=g)


def aggregate(state: GnnState, messages: Tensor, attributes, weights: GnnWeights) -> GnnState:
    """Sum incoming messages, append the node attribute, GRU update, project to u."""
    K = messages.shape[-2]
    total = (messages * (1.0 - np.eye(K))[..., None]).sum(axis=-3)
    return _update(state, total, attributes, weights)


def readout_logits(state: GnnState, weights: GnnWeights) -> Tensor:
    return mlp_forward(weights.readout, state.u)


def readout(state: GnnState, weights: GnnWeights) -> Tensor:
    """Per-node categorical over the real alphabet, shape (..., K, n_levels)."""
    return softmax(readout_logits(state, weights), axis=-1)


def gnn_layer(
    attributes,
    H: np.ndarray,
    y: np.ndarray,
    sigma2,
    state: GnnState | None,
    weights: GnnWeights,
    rounds: int,
) -> tuple[Tensor, GnnState]:
    """``rounds`` propagate/aggregate rounds followed by the readout.

    ``attributes`` is (..., K, 2) holding [r, Sigma] per node. The returned
    state seeds the next call.
    """
    if state is None:
        state = init_state(H, y, sigma2, weights)
    if rounds > 0:
        edges = edge_features(H, sigma2)
        for _ in range(rounds):
            state = _update(state, _message_sums(state, edges, weights), attributes, weights)
    return readout(state, weights), state
