"""Experiment drivers behind the command line: sweeps, robustness, complexity.

Complexity convention
---------------------
Counts are multiplications for one channel use. A product involving a
complex channel entry counts as one multiplication (``convention="complex"``)
or four (``convention="real"``); divisions count as one multiplication;
additions, comparisons and nonlinearities (exp, tanh, sigmoid) are free.

The ``amp-gnn`` row follows the usual per-user accounting: one GNN node per
complex user, with the propagation MLP evaluated once per node on its
aggregated input. The ``amp-gnn-impl`` row instead counts what this package
actually executes: 2N real-valued nodes and the propagation MLP on every
ordered pair of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import amp, amp_gnn, baselines
from .amp_gnn import AmpGnnModel
from .comms import make_qam
from .numkit import ConfigError
from .trainer import Detector, SerReport, evaluate

DETECTORS = ("mmse", "amp", "ampgnn", "map")


# -- complexity ---------------------------------------------------------------


@dataclass(frozen=True)
class GnnSizes:
    T: int = 10
    rounds: int = 2
    n_u: int = 8
    n_h1: int = 16
    n_h2: int = 8


def _amp_linear(M: int, N: int, c: int) -> int:
    # |H|^2 v, H x, |H|^2^T (1/denom), H^H (resid/denom): four matrix-vector products;
    # Onsager product and division, 1/denom, residual scaling: 4M; Sigma inverse and r scaling: 2N
    return 4 * c * M * N + 4 * M + 2 * N


def _moments(levels: int) -> int:
    # mean, second moment, squared mean, factor 2 per real dimension
    return 2 * levels + 2


def amp_multiplications(M: int, N: int, Q: int = 4, T: int = 10, convention: str = "complex") -> int:
    c = _complex_cost(convention)
    L = math.isqrt(Q)
    # Gaussian categorical per real dimension: square and divide per level, normalise
    denoiser = 2 * N * (3 * L + _moments(L))
    return c * M * N + T * (_amp_linear(M, N, c) + denoiser)


def gnn_node_multiplications(levels: int, g: GnnSizes = GnnSizes()) -> int:
    """Per-node cost of one GNN call (``rounds`` message passes plus readout)."""
    prop = (2 * g.n_u + 2) * g.n_h1 + g.n_h1 * g.n_h2 + g.n_h2 * g.n_u
    gru = 3 * ((g.n_u + 2) * g.n_h1 + g.n_h1 * g.n_h1) + 3 * g.n_h1
    agg = g.n_h1 * g.n_u
    readout = g.n_u * g.n_h1 + g.n_h1 * g.n_h2 + g.n_h2 * levels
    return g.rounds * (prop + gru + agg) + readout + levels + _moments(levels)


def ampgnn_multiplications(M: int, N: int, Q: int = 4, g: GnnSizes = GnnSizes(), convention: str = "complex") -> int:
    c = _complex_cost(convention)
    L = math.isqrt(Q)
    pre = c * M * N  # |H|^2, also gives h_n^H h_n
    pre += c * M * N * (N - 1) // 2  # off-diagonal Gram entries for edge features
    pre += c * M * N  # y^H h_n
    pre += N * 3 * g.n_u  # node encoder
    return pre + g.T * (_amp_linear(M, N, c) + N * gnn_node_multiplications(L, g))


def ampgnn_implementation_multiplications(M: int, N: int, Q: int = 4, g: GnnSizes = GnnSizes()) -> int:
    """Real-valued count of the code path in :mod:`ampgnn.gnn` (2N nodes, per-pair MLP)."""
    L = math.isqrt(Q)
    M2, K = 2 * M, 2 * N
    pre = M2 * K + M2 * K * (K + 1) // 2 + M2 * K + K * 3 * g.n_u
    lin = 4 * M2 * K + 4 * M2 + 2 * K
    send_recv = 2 * g.n_u * g.n_h1 * K
    edge = 2 * g.n_h1 * K * K + g.n_h1 * g.n_h2 * K * K  # evaluated on the full K x K grid
    out = g.n_h2 * g.n_u * K + g.n_u * K  # output layer after pooling, bias times (K-1)
    gru = (3 * ((g.n_u + 2) * g.n_h1 + g.n_h1 * g.n_h1) + 3 * g.n_h1) * K
    agg = g.n_h1 * g.n_u * K
    readout = (g.n_u * g.n_h1 + g.n_h1 * g.n_h2 + g.n_h2 * L + L + _moments(L)) * K
    return pre + g.T * (lin + g.rounds * (send_recv + edge + out + gru + agg) + readout)


def mmse_multiplications(M: int, N: int, convention: str = "complex") -> int:
    c = _complex_cost(convention)
    # Gram (Hermitian half), H^H y, Cholesky N^3/6 complex, two triangular solves
    return c * (M * N * (N + 1) // 2 + M * N + N**3 // 6 + N * N)


def _complex_cost(convention: str) -> int:
    if convention == "complex":
        return 1
    if convention == "real":
        return 4
    raise ConfigError(f"unknown counting convention {convention!r}")


@dataclass
class ComplexityReport:
    rows: list[tuple[str, int, int, int]] = field(default_factory=list)  # detector, M, N, count
    notes: list[str] = field(default_factory=list)

    HEADER = ("detector", "M", "N", "Q", "multiplications")

    def count(self, detector: str, M: int, N: int) -> int:
        for d, m, n, c in self.rows:
            if (d, m, n) == (detector, M, N):
                return c
        raise KeyError((detector, M, N))

    def to_csv(self, Q: int) -> str:
        lines = [",".join(self.HEADER)]
        for d, m, n, c in self.rows:
            lines.append(f"{d},{m},{n},{Q},{c}")
        return "\n".join(lines) + "\n"


def complexity_report(
    sizes: Sequence[tuple[int, int]],
    Q: int = 4,
    g: GnnSizes = GnnSizes(),
    convention: str = "complex",
) -> ComplexityReport:
    if Q not in (4, 16, 64):
        raise ConfigError(f"unsupported QAM order {Q}")
    rep = ComplexityReport()
    for M, N in sizes:
        if M < 1 or N < 1:
            raise ConfigError(f"need positive dimensions, got {M}x{N}")
        rep.rows.append(("mmse", M, N, mmse_multiplications(M, N, convention)))
        rep.rows.append(("amp", M, N, amp_multiplications(M, N, Q, g.T, convention)))
        rep.rows.append(("amp-gnn", M, N, ampgnn_multiplications(M, N, Q, g, convention)))
        rep.rows.append(("amp-gnn-impl", M, N, ampgnn_implementation_multiplications(M, N, Q, g)))
    rep.notes = [
        f"complex products count as {_complex_cost(convention)} multiplication(s); divisions count as one",
        "amp-gnn: one node per complex user, propagation MLP once per node",
        "amp-gnn-impl: real-valued count of the executed code, 2N nodes and per-pair messages",
    ]
    return rep


# -- detectors ----------------------------------------------------------------


def amp_detector(Q: int, T: int = 10) -> Detector:
    levels = make_qam(Q).levels

    def det(H, y, sigma2):
        traj = amp.amp_detect(H, y, sigma2, levels, T, on_divergence="last")
        return amp.hard_decision(traj.final, levels)

    return det


def mmse_detector(Q: int) -> Detector:
    levels = make_qam(Q).levels

    def det(H, y, sigma2):
        return amp.hard_decision(baselines.mmse_detect(H, y, sigma2), levels)

    return det


def map_detector(Q: int) -> Detector:
    levels = make_qam(Q).levels

    def det(H, y, sigma2):
        return baselines.enumerate_posterior(H, y, sigma2, levels).map_idx

    return det


def ampgnn_detector(model: AmpGnnModel) -> Detector:
    def det(H, y, sigma2):
        return amp_gnn.detect_real(H, y, sigma2, model)

    return det


def build_detectors(
    names: Sequence[str],
    Q: int,
    N: int,
    models: dict[str, AmpGnnModel] | None = None,
    T: int = 10,
) -> dict[str, Detector]:
    """Detector callables by name; learned detectors come from ``models``.

    Names starting with ``ampgnn`` are looked up in ``models`` verbatim.
    """
    models = models or {}
    out: dict[str, Detector] = {}
    for name in names:
        if name == "mmse":
            out[name] = mmse_detector(Q)
        elif name == "amp":
            out[name] = amp_detector(Q, T)
        elif name == "map":
            L = math.isqrt(Q)
            if 2 * N * math.log2(L) > math.log2(baselines.MAX_HYPOTHESES):
                raise baselines.CapacityError(f"map detector cannot enumerate {Q}-QAM with N={N}")
            out[name] = map_detector(Q)
        elif name.startswith("ampgnn"):
            if name not in models:
                raise ConfigError(f"detector {name!r} needs a model bundle")
            if models[name].config.Q != Q:
                raise ConfigError(f"bundle for {name!r} was trained for Q={models[name].config.Q}, not {Q}")
            out[name] = ampgnn_detector(models[name])
        else:
            raise ConfigError(f"unknown detector {name!r}; choose from {', '.join(DETECTORS)}")
    return out


# -- experiments --------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    M: int
    N: int
    Q: int
    detectors: tuple[str, ...]
    snr_db: tuple[float, ...]
    samples: int
    seed: int = 0
    threads: int = 1
    T: int = 10

    def __post_init__(self):
        if not self.snr_db:
            raise ConfigError("SNR grid is empty")
        if self.samples < 0:
            raise ConfigError("sample count must be >= 0")
        if self.M < 1 or self.N < 1:
            raise ConfigError("M and N must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


def sweep(cfg: ExperimentConfig, models: dict[str, AmpGnnModel] | None = None) -> SerReport:
    dets = build_detectors(cfg.detectors, cfg.Q, cfg.N, models, cfg.T)
    return evaluate(dets, cfg.M, cfg.N, cfg.Q, cfg.snr_db, cfg.samples, cfg.seed, threads=cfg.threads)


def robustness(
    cfg: ExperimentConfig,
    mixture: AmpGnnModel,
    matched: AmpGnnModel | None = None,
    warn: Callable[[str], None] | None = None,
) -> SerReport:
    """Evaluate a model trained on other user counts at ``cfg.N``, paired with AMP.

    Rows are named ``amp``, ``ampgnn-mixture`` and, when given, ``ampgnn-matched``.
    """
    if cfg.N > cfg.M and warn is not None:
        warn(f"test N={cfg.N} exceeds M={cfg.M}; the model was not trained for overloaded systems")
    models = {"ampgnn-mixture": mixture}
    names = ["amp", "ampgnn-mixture"]
    if matched is not None:
        models["ampgnn-matched"] = matched
        names.append("ampgnn-matched")
    dets = build_detectors(names, cfg.Q, cfg.N, models, cfg.T)
    return evaluate(dets, cfg.M, cfg.N, cfg.Q, cfg.snr_db, cfg.samples, cfg.seed, threads=cfg.threads)


def grid_point_nearest(report: SerReport, detector: str, target: float) -> float:
    """SNR of the grid point where ``detector`` has SER closest to ``target`` (log scale)."""
    rows = [r for r in report.rows if r.detector == detector and r.symbols > 0]
    if not rows:
        raise ValueError(f"no rows for detector {detector!r}")
    floor = 0.5 / max(r.symbols for r in rows)
    return min(rows, key=lambda r: (abs(np.log(max(r.ser, floor) / target)), r.snr_db)).snr_db
