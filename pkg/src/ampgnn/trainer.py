"""Training and Monte-Carlo evaluation of the AMP-GNN detector.

Random streams are derived from the root seed with :class:`numpy.random.SeedSequence`
entropy ``[seed, tag, ...]``, so every batch is reproducible on its own:

* training batch b of epoch e: ``[seed, 1, e, b]``
* validation set:              ``[seed, 2, scenario index]``
* weight initialisation:       ``[seed, 3]``
* evaluation shard s at SNR i: ``[seed, 4, i, s]``
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import amp_gnn
from .amp_gnn import AmpGnnConfig, AmpGnnModel
from .comms import MimoScenario, complex_indices, make_qam, make_sample, snr_to_sigma2, to_real
from .gnn import GnnConfig
from .numkit import AdamState, TrainingError, adam_step, backward, container, no_grad

log = logging.getLogger(__name__)

TRAIN_TAG, VAL_TAG, INIT_TAG, EVAL_TAG = 1, 2, 3, 4
Z95 = 1.959963984540054


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; :meth:`paper` returns the published protocol."""

    M: int = 16
    users: tuple[int, ...] = (16,)
    Q: int = 4
    snr_db: tuple[float, float] = (6.0, 14.0)
    epochs: int = 20
    samples_per_epoch: int = 2000
    val_samples: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    T: int = 10
    rounds: int = 2
    n_u: int = 8
    n_h1: int = 16
    n_h2: int = 8
    shared: bool = True
    max_bad_batches: int = 10

    def __post_init__(self):
        for name in ("M", "Q", "epochs", "samples_per_epoch", "val_samples", "batch_size", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.users or min(self.users) < 1:
            raise ValueError("users must be a non-empty list of positive counts")
        if self.batch_size > self.samples_per_epoch:
            raise ValueError("batch_size exceeds samples_per_epoch")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.snr_db[0] > self.snr_db[1]:
            raise ValueError("snr_db must be (low, high)")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        base = dict(M=64, users=(64,), epochs=100, samples_per_epoch=100_000, val_samples=5000)
        base.update(overrides)
        return cls(**base)

    def model_config(self) -> AmpGnnConfig:
        side = int(round(math.sqrt(self.Q)))
        gnn = GnnConfig(n_u=self.n_u, n_h1=self.n_h1, n_h2=self.n_h2, rounds=self.rounds, n_levels=side)
        return AmpGnnConfig(T=self.T, gnn=gnn, Q=self.Q, shared=self.shared)


@dataclass
class Batch:
    H: np.ndarray  # (B, 2M, 2N)
    y: np.ndarray  # (B, 2M)
    x: np.ndarray  # (B, 2N)
    sigma2: np.ndarray  # (B,)
    x_idx: np.ndarray  # (B, N) complex symbol indices


def make_batch(M: int, N: int, Q: int, snr_db, size: int, rng: np.random.Generator) -> Batch:
    """``size`` channel uses; ``snr_db`` may be a scalar or one value per use."""
    cons = make_qam(Q)
    sigma2 = np.broadcast_to(np.asarray(snr_to_sigma2(snr_db, M, N), dtype=np.float64), (size,)).copy()
    scen = MimoScenario(M, N, float(sigma2[0]), cons)
    sample = make_sample(replace(scen, sigma2=sigma2), rng, size=(size,))
    rs = to_real(sample, cons)
    return Batch(H=rs.H, y=rs.y, x=rs.x, sigma2=sigma2, x_idx=sample.x_idx)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    FIELDS = ("epoch", "train_loss", "val_loss", "val_ser", "wall_seconds")

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.FIELDS)
            for row in self.rows:
                w.writerow([row["epoch"]] + [_fmt(row[k]) for k in self.FIELDS[1:]])


def _fmt(v: float) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return np.format_float_positional(float(v), precision=6, unique=False, fractional=False, trim="-")


@dataclass
class TrainResult:
    model: AmpGnnModel
    history: History
    best_epoch: int
    best_val_loss: float


@dataclass
class ValidationSet:
    batches: list[Batch]

    @classmethod
    def build(cls, cfg: TrainConfig, chunk: int = 256) -> "ValidationSet":
        batches = []
        per = _split(cfg.val_samples, len(cfg.users))
        for k, (N, count) in enumerate(zip(cfg.users, per)):
            rng = stream(cfg.seed, VAL_TAG, k)
            snrs = rng.uniform(*cfg.snr_db, size=count)
            for start in range(0, count, chunk):
                stop = min(count, start + chunk)
                batches.append(make_batch(cfg.M, N, cfg.Q, snrs[start:stop], stop - start, rng))
        return cls(batches)

    def evaluate(self, model: AmpGnnModel) -> tuple[float, float]:
        """Mean L2 loss per sample and SER over the set."""
        total_loss, count, errors, symbols = 0.0, 0, 0, 0
        cons = model.constellation
        with no_grad():
            for b in self.batches:
                x_hat, trace = amp_gnn.forward(b.H, b.y, b.sigma2, model, strict=False)
                err = np.sum((x_hat.data - b.x) ** 2, axis=-1)
                total_loss += float(np.sum(np.where(np.isfinite(err), err, 0.0)))
                count += len(err)
                dec = amp_gnn.decide_levels(trace)
                errors += int(np.count_nonzero(complex_indices(dec, cons) != b.x_idx))
                symbols += b.x_idx.size
        return total_loss / count, errors / symbols


def _split(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


def _batch_sizes(cfg: TrainConfig) -> list[int]:
    full, rest = divmod(cfg.samples_per_epoch, cfg.batch_size)
    return [cfg.batch_size] * full + ([rest] if rest else [])


def train_batch(cfg: TrainConfig, epoch: int, index: int, size: int) -> Batch:
    rng = stream(cfg.seed, TRAIN_TAG, epoch, index)
    N = cfg.users[int(rng.integers(len(cfg.users)))]
    snr = rng.uniform(*cfg.snr_db)
    return make_batch(cfg.M, N, cfg.Q, snr, size, rng)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(
    path, model: AmpGnnModel, best: AmpGnnModel, opt: AdamState, epoch: int, best_val: float, best_epoch: int,
    cfg: TrainConfig, history: History | None = None,
):
    tensors = amp_gnn.bundle_tensors(model)
    if history is not None:
        tensors["train.history"] = np.array([[r[k] for k in History.FIELDS] for r in history.rows], dtype=np.float64).reshape(-1, len(History.FIELDS))
    for k, v in best.named().items():
        tensors[f"best.{k}"] = v.data
    for k in opt.m:
        tensors[f"adam.m.{k}"] = opt.m[k]
        tensors[f"adam.v.{k}"] = opt.v[k]
    tensors["adam.step"] = np.array(float(opt.step))
    tensors["train.epoch"] = np.array(float(epoch))
    tensors["train.best_val_loss"] = np.array(best_val)
    tensors["train.best_epoch"] = np.array(float(best_epoch))
    tensors["train.seed"] = np.array(float(cfg.seed))
    container.save(path, tensors)


def load_checkpoint(path, cfg: TrainConfig):
    t = container.load(path)
    model = amp_gnn.model_from_bundle({k: v for k, v in t.items() if not k.startswith(("best.", "adam.", "train."))})
    best = amp_gnn.model_from_tensors(model.config, {k[5:]: v for k, v in t.items() if k.startswith("best.")})
    opt = AdamState(lr=cfg.lr, step=int(t["adam.step"]))
    for k in model.named():
        opt.m[k] = t[f"adam.m.{k}"].copy()
        opt.v[k] = t[f"adam.v.{k}"].copy()
    if int(t["train.seed"]) != cfg.seed:
        raise ValueError("checkpoint was written with a different seed")
    history = History()
    for row in t.get("train.history", np.zeros((0, len(History.FIELDS)))):
        rec = dict(zip(History.FIELDS, map(float, row)))
        rec["epoch"] = int(rec["epoch"])
        history.rows.append(rec)
    return model, best, opt, int(t["train.epoch"]), float(t["train.best_val_loss"]), int(t["train.best_epoch"]), history


# -- training loop ----------------------------------------------------------


def train(
    cfg: TrainConfig,
    checkpoint_path: str | os.PathLike | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam on the L2 loss with fresh data every epoch; returns the best-validation model.

    ``stop_after`` ends the run after that many epochs (used to test resuming).
    """
    val = ValidationSet.build(cfg)
    history = History()
    if resume and checkpoint_path is not None and os.path.exists(checkpoint_path):
        model, best, opt, start_epoch, best_val, best_epoch, history = load_checkpoint(checkpoint_path, cfg)
    else:
        model = AmpGnnModel.init(cfg.model_config(), stream(cfg.seed, INIT_TAG))
        opt = AdamState.for_params(model.named(), lr=cfg.lr)
        t0 = time.perf_counter()
        best_val, val_ser = val.evaluate(model)
        best, best_epoch, start_epoch = model.copy(), 0, 0
        history.rows.append(dict(epoch=0, train_loss=float("nan"), val_loss=best_val, val_ser=val_ser, wall_seconds=time.perf_counter() - t0))

    params = model.named()
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        if stop_after is not None and epoch > stop_after:
            break
        t0 = time.perf_counter()
        losses, bad = [], 0
        for b, size in enumerate(_batch_sizes(cfg)):
            batch = train_batch(cfg, epoch, b, size)
            try:
                x_hat, _ = amp_gnn.forward(batch.H, batch.y, batch.sigma2, model)
                loss = amp_gnn.loss(x_hat, batch.x)
                if not np.isfinite(loss.data):
                    raise TrainingError("non-finite loss")
                grads = backward(loss, params)
                adam_step(opt, params, grads)
            except (TrainingError, ArithmeticError) as exc:
                bad += 1
                log.warning("epoch %d batch %d skipped: %s", epoch, b, exc)
                if bad >= cfg.max_bad_batches:
                    raise TrainingError(f"training diverged: {bad} bad batches in epoch {epoch}") from exc
                continue
            losses.append(float(loss.data))
        val_loss, val_ser = val.evaluate(model)
        if val_loss < best_val:
            best_val, best, best_epoch = val_loss, model.copy(), epoch
        row = dict(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            val_loss=val_loss,
            val_ser=val_ser,
            wall_seconds=time.perf_counter() - t0,
        )
        history.rows.append(row)
        log.info("epoch %d train %.5f val %.5f ser %.5f", epoch, row["train_loss"], val_loss, val_ser)
        if progress is not None:
            progress(row)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, best, opt, epoch, best_val, best_epoch, cfg, history)
            history.write_csv(_history_path(checkpoint_path))
    return TrainResult(model=best, history=history, best_epoch=best_epoch, best_val_loss=best_val)


def _history_path(checkpoint_path) -> str:
    return os.fspath(checkpoint_path) + ".history.csv"


# -- evaluation -------------------------------------------------------------

# maps (H_real, y_real, sigma2) for a batch to level-index decisions (B, 2N)
Detector = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def wilson_interval(errors: int, trials: int, z: float = Z95) -> tuple[float, float]:
    if trials == 0:
        return (0.0, 1.0)
    p = errors / trials
    denom = 1.0 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    # the closed form cancels only approximately at the boundaries
    lo = 0.0 if errors == 0 else max(0.0, centre - half)
    hi = 1.0 if errors == trials else min(1.0, centre + half)
    return lo, hi


@dataclass(frozen=True)
class SerRow:
    detector: str
    snr_db: float
    symbols: int
    errors: int
    digest: str = ""

    @property
    def ser(self) -> float:
        return self.errors / self.symbols if self.symbols else float("nan")

    @property
    def interval(self) -> tuple[float, float]:
        return wilson_interval(self.errors, self.symbols)


@dataclass
class SerReport:
    rows: list[SerRow] = field(default_factory=list)

    HEADER = ("detector", "snr_db", "symbols", "errors", "ser", "ci_low", "ci_high", "realization_digest")

    def get(self, detector: str, snr_db: float) -> SerRow:
        for r in self.rows:
            if r.detector == detector and r.snr_db == snr_db:
                return r
        raise KeyError((detector, snr_db))

    def to_csv(self) -> str:
        lines = [",".join(self.HEADER)]
        for r in self.rows:
            lo, hi = r.interval
            lines.append(
                ",".join(
                    [
                        r.detector,
                        _fmt_snr(r.snr_db),
                        str(r.symbols),
                        str(r.errors),
                        format_rate(r.ser),
                        format_rate(lo),
                        format_rate(hi),
                        r.digest,
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _fmt_snr(v: float) -> str:
    return np.format_float_positional(float(v), precision=3, trim="-")


def format_rate(v: float) -> str:
    """Fixed decimal notation with 6 significant digits."""
    if math.isnan(v):
        return "nan"
    if v == 0:
        return "0.00000"
    # round in scientific form first so the exponent reflects any carry
    exponent = int(f"{v:.5e}".split("e")[1])
    return f"{v:.{max(5 - exponent, 0)}f}"


def evaluate(
    detectors: dict[str, Detector],
    M: int,
    N: int,
    Q: int,
    snr_grid: Sequence[float],
    samples: int,
    seed: int = 0,
    shard_size: int = 500,
    threads: int = 1,
) -> SerReport:
    """Paired Monte-Carlo SER: every detector sees the same channel uses.

    Work is cut into fixed-size shards with their own streams, so results do
    not depend on ``threads``.
    """
    cons = make_qam(Q)
    report = SerReport()
    if samples <= 0:
        return report
    jobs = []
    for i, snr in enumerate(snr_grid):
        for s, start in enumerate(range(0, samples, shard_size)):
            jobs.append((i, s, float(snr), min(shard_size, samples - start)))

    def run(job):
        i, s, snr, size = job
        rng = stream(seed, EVAL_TAG, i, s)
        b = make_batch(M, N, Q, snr, size, rng)
        digest = hashlib.sha256(b.H.tobytes() + b.y.tobytes() + b.x.tobytes()).digest()
        counts = {}
        for name, det in detectors.items():
            dec = det(b.H, b.y, b.sigma2)
            counts[name] = int(np.count_nonzero(complex_indices(dec, cons) != b.x_idx))
        return i, counts, size * N, digest

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    for i, snr in enumerate(snr_grid):
        mine = [r for r in results if r[0] == i]
        h = hashlib.sha256()
        for r in mine:
            h.update(r[3])
        digest = h.hexdigest()[:16] if mine else ""
        symbols = sum(r[2] for r in mine)
        for name in detectors:
            errors = sum(r[1][name] for r in mine)
            report.rows.append(SerRow(name, float(snr), symbols, errors, digest))
    return report
