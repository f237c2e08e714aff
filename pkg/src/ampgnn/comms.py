"""QAM constellations, Rayleigh channels, AWGN and the real-equivalent model.

Conventions
-----------
* Channel entries are i.i.d. CN(0, 1/M) by default, so E||Hx||^2 = N for
  unit-energy symbols.
* ``sigma2`` is always the noise variance per *complex* receive entry; each
  real dimension carries ``sigma2 / 2``.
* Samples may carry any number of leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass
import os
from typing import Iterator

import numpy as np

from .numkit import ConfigError, container

SUPPORTED_ORDERS = (4, 16, 64)


def _gray(n: int) -> int:
    return n ^ (n >> 1)


@dataclass(frozen=True)
class Constellation:
    """Square Q-QAM with unit average energy and a uniform prior.

    Point ``i`` has in-phase level index ``i // sqrt(Q)`` and quadrature level
    index ``i % sqrt(Q)``; ``levels`` is the shared per-dimension PAM alphabet
    in ascending order.
    """

    order: int
    points: np.ndarray
    levels: np.ndarray
    prior: np.ndarray
    level_prior: np.ndarray
    bits: np.ndarray

    @property
    def side(self) -> int:
        return len(self.levels)

    def split_index(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Complex symbol index -> (in-phase level index, quadrature level index)."""
        idx = np.asarray(idx)
        return idx // self.side, idx % self.side

    def join_index(self, re_idx: np.ndarray, im_idx: np.ndarray) -> np.ndarray:
        return np.asarray(re_idx) * self.side + np.asarray(im_idx)

    def nearest(self, x: np.ndarray) -> np.ndarray:
        """Index of the closest point for each complex value (ties -> lower index)."""
        x = np.asarray(x)
        return np.argmin(np.abs(x[..., None] - self.points), axis=-1)


def make_qam(order: int) -> Constellation:
    if order not in SUPPORTED_ORDERS:
        raise ConfigError(f"unsupported QAM order {order}; choose one of {SUPPORTED_ORDERS}")
    side = int(round(np.sqrt(order)))
    pam = np.arange(-(side - 1), side, 2, dtype=np.float64)
    # average energy of square QAM with odd-integer levels is 2(Q-1)/3
    levels = pam / np.sqrt(2.0 * (order - 1) / 3.0)
    re_idx, im_idx = np.divmod(np.arange(order), side)
    points = levels[re_idx] + 1j * levels[im_idx]
    nb = side.bit_length() - 1
    bits = np.zeros((order, 2 * nb), dtype=np.int8)
    for i in range(order):
        word = (_gray(int(re_idx[i])) << nb) | _gray(int(im_idx[i]))
        bits[i] = [(word >> (2 * nb - 1 - k)) & 1 for k in range(2 * nb)]
    return Constellation(
        order=order,
        points=points,
        levels=levels,
        prior=np.full(order, 1.0 / order),
        level_prior=np.full(side, 1.0 / side),
        bits=bits,
    )


@dataclass(frozen=True)
class MimoScenario:
    M: int
    N: int
    sigma2: float | np.ndarray
    constellation: Constellation
    channel_variance: float | None = None

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ConfigError(f"need M, N >= 1, got M={self.M}, N={self.N}")
        if not np.all(np.asarray(self.sigma2) > 0):
            raise ConfigError(f"noise variance must be positive, got {self.sigma2}")

    @property
    def h_var(self) -> float:
        return 1.0 / self.M if self.channel_variance is None else self.channel_variance


@dataclass(frozen=True)
class MimoSample:
    """One channel use ``y = Hx + n`` (or a batch of them along leading axes)."""

    H: np.ndarray
    x: np.ndarray
    y: np.ndarray
    x_idx: np.ndarray
    noise: np.ndarray
    sigma2: float | np.ndarray


@dataclass(frozen=True)
class RealSystem:
    H: np.ndarray
    y: np.ndarray
    x: np.ndarray
    sigma2: float | np.ndarray
    levels: np.ndarray

    @property
    def noise_var(self):
        """Noise variance per real dimension."""
        return np.asarray(self.sigma2) / 2.0


def _cgauss(rng: np.random.Generator, shape: tuple, var) -> np.ndarray:
    g = rng.standard_normal(shape + (2,))
    return (g[..., 0] + 1j * g[..., 1]) * np.sqrt(np.asarray(var) / 2.0)


def sample_channel(M: int, N: int, rng: np.random.Generator, size: tuple = (), variance=None) -> np.ndarray:
    """i.i.d. circularly-symmetric complex Gaussian M x N matrix (per-entry variance 1/M)."""
    if M < 1 or N < 1:
        raise ConfigError(f"need M, N >= 1, got M={M}, N={N}")
    var = 1.0 / M if variance is None else variance
    return _cgauss(rng, tuple(size) + (M, N), var)


def snr_to_sigma2(snr_db, M: int, N: int, channel_variance=None):
    """Noise variance giving SNR = E||Hx||^2 / E||n||^2 for unit-energy symbols."""
    var = 1.0 / M if channel_variance is None else channel_variance
    signal = M * N * var
    return signal / (M * 10.0 ** (np.asarray(snr_db, dtype=np.float64) / 10.0))


def make_sample(scenario: MimoScenario, rng: np.random.Generator, size: tuple = ()) -> MimoSample:
    """Draw channel, symbols and noise (in that order) from ``rng``."""
    size = tuple(size)
    cons = scenario.constellation
    H = sample_channel(scenario.M, scenario.N, rng, size, scenario.h_var)
    idx = rng.integers(0, cons.order, size=size + (scenario.N,))
    x = cons.points[idx]
    sigma2 = scenario.sigma2
    s2 = np.asarray(sigma2)
    if s2.ndim:
        s2 = s2.reshape(s2.shape + (1,))
    noise = _cgauss(rng, size + (scenario.M,), s2)
    y = np.einsum("...mn,...n->...m", H, x) + noise
    return MimoSample(H=H, x=x, y=y, x_idx=idx, noise=noise, sigma2=sigma2)


def generate_dataset(scenario: MimoScenario, count: int, rng: np.random.Generator) -> Iterator[MimoSample]:
    for _ in range(count):
        yield make_sample(scenario, rng)


def complex_to_real_matrix(H: np.ndarray) -> np.ndarray:
    re, im = H.real, H.imag
    top = np.concatenate([re, -im], axis=-1)
    bottom = np.concatenate([im, re], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def complex_to_real_vector(v: np.ndarray) -> np.ndarray:
    return np.concatenate([v.real, v.imag], axis=-1)


def from_real(x_r: np.ndarray) -> np.ndarray:
    x_r = np.asarray(x_r)
    n = x_r.shape[-1] // 2
    return x_r[..., :n] + 1j * x_r[..., n:]


def to_real(sample: MimoSample, constellation: Constellation | None = None) -> RealSystem:
    levels = constellation.levels if constellation is not None else np.unique(sample.x.real)
    return RealSystem(
        H=complex_to_real_matrix(sample.H),
        y=complex_to_real_vector(sample.y),
        x=complex_to_real_vector(sample.x),
        sigma2=sample.sigma2,
        levels=levels,
    )


def real_level_indices(x_idx: np.ndarray, constellation: Constellation) -> np.ndarray:
    """Complex symbol indices (..., N) -> per-real-dimension level indices (..., 2N)."""
    re_idx, im_idx = constellation.split_index(x_idx)
    return np.concatenate([re_idx, im_idx], axis=-1)


def complex_indices(level_idx: np.ndarray, constellation: Constellation) -> np.ndarray:
    """Inverse of :func:`real_level_indices`."""
    n = level_idx.shape[-1] // 2
    return constellation.join_index(level_idx[..., :n], level_idx[..., n:])


# -- dataset files ------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """A stack of channel uses sharing (M, N, sigma2), as stored on disk."""

    H: np.ndarray  # (count, M, N) complex
    x_idx: np.ndarray  # (count, N)
    y: np.ndarray  # (count, M) complex
    sigma2: float
    seed: int
    order: int

    @property
    def M(self) -> int:
        return self.H.shape[-2]

    @property
    def N(self) -> int:
        return self.H.shape[-1]

    def __len__(self) -> int:
        return self.H.shape[0]


def build_dataset(scenario: MimoScenario, count: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    s = make_sample(scenario, rng, size=(count,))
    return Dataset(H=s.H, x_idx=s.x_idx, y=s.y, sigma2=float(scenario.sigma2), seed=seed, order=scenario.constellation.order)


def dataset_tensors(ds: Dataset) -> dict[str, np.ndarray]:
    return {
        "H_real": ds.H.real,
        "H_imag": ds.H.imag,
        "x_idx": ds.x_idx.astype(np.float64),
        "y_real": ds.y.real,
        "y_imag": ds.y.imag,
        "M": np.array(float(ds.M)),
        "N": np.array(float(ds.N)),
        "Q": np.array(float(ds.order)),
        "sigma2": np.array(ds.sigma2),
        "seed": np.array(float(ds.seed)),
    }


def dataset_from_tensors(t: dict) -> Dataset:
    try:
        H = t["H_real"] + 1j * t["H_imag"]
        y = t["y_real"] + 1j * t["y_imag"]
        ds = Dataset(
            H=H,
            x_idx=t["x_idx"].astype(np.int64),
            y=y,
            sigma2=float(t["sigma2"]),
            seed=int(t["seed"]),
            order=int(t["Q"]) if "Q" in t else 4,
        )
    except KeyError as exc:
        raise ConfigError(f"dataset file lacks tensor {exc}") from None
    if (ds.M, ds.N) != (int(t["M"]), int(t["N"])):
        raise ConfigError("dataset dimensions disagree with stored M, N")
    return ds


def save_dataset(path: str | os.PathLike, ds: Dataset) -> None:
    container.save(path, dataset_tensors(ds))


def load_dataset(path: str | os.PathLike) -> Dataset:
    return dataset_from_tensors(container.load(path))
