"""Command-line entry point: ``ampgnn {gen,train,sweep,complexity,robustness}``.

Settings come from, in decreasing priority, command-line flags, a flat
``key = value`` file given by ``--config`` (keys are the long flag names,
dashes or underscores), and built-in defaults. Output goes to ``--out``,
else ``$AMPGNN_OUT_DIR``, else ``./ampgnn-out``.

Seeds: ``gen`` draws SNR point i from ``default_rng(seed + i)``; ``train`` passes the seed to
the trainer; ``sweep`` evaluates with the seed; ``robustness`` trains the
mixture model with ``seed``, the matched model with ``seed + 1`` and
evaluates with ``seed``.

Exit codes: 0 success, 2 usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import os
import sys
from typing import Any, Sequence

from . import amp_gnn, bench, comms, trainer
from .amp import NumericalDivergence
from .baselines import CapacityError, DetectorNumericalError
from .numkit import ConfigError, ContainerError, TrainingError, UsageError

log = logging.getLogger("ampgnn")

OUT_ENV = "AMPGNN_OUT_DIR"
DEFAULT_OUT = "ampgnn-out"
EXIT_USAGE, EXIT_NUMERICAL = 2, 3

# every tunable with its default; flags and config keys share these names
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "M": 16,
    "N": 16,
    "Q": 4,
    "snr": "0:12:2",
    "count": 1000,
    "samples": 6250,
    "detectors": "mmse,amp",
    "bundle": None,
    "users": "16",
    "snr_range": "6,14",
    "epochs": 20,
    "samples_per_epoch": 2000,
    "val_samples": 1000,
    "batch_size": 64,
    "lr": 1e-3,
    "T": 10,
    "rounds": 2,
    "n_u": 8,
    "n_h1": 16,
    "n_h2": 8,
    "shared": True,
    "resume": False,
    "sizes": "64x64,256x256,1024x1024",
    "convention": "complex",
    "train_users": "8,16",
    "test_users": 12,
    "mixture_bundle": None,
    "matched_bundle": None,
    "matched": True,
}


class CliUsageError(Exception):
    pass


# -- parsing helpers ----------------------------------------------------------


def parse_grid(text: str) -> tuple[float, ...]:
    """``"0:12:2"`` (inclusive range) or ``"4,8,12"``."""
    text = str(text).strip()
    try:
        if ":" in text:
            lo, hi, step = (float(p) for p in text.split(":"))
            if step <= 0:
                raise ValueError
            n = int(math.floor((hi - lo) / step + 1e-9)) + 1
            return tuple(round(lo + k * step, 10) for k in range(n))
        return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise CliUsageError(f"bad SNR grid {text!r}") from None


def parse_ints(text) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in str(text).split(",") if p.strip())
    except ValueError:
        raise CliUsageError(f"expected comma-separated integers, got {text!r}") from None


def parse_sizes(text: str) -> list[tuple[int, int]]:
    out = []
    for part in str(text).split(","):
        try:
            m, n = part.lower().split("x")
            out.append((int(m), int(n)))
        except ValueError:
            raise CliUsageError(f"bad size {part!r}; use MxN") from None
    return out


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise CliUsageError(f"expected a boolean, got {v!r}")


def read_config(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise CliUsageError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str
    with open(path) as fh:
        cp.read_string("[ampgnn]\n" + fh.read())
    out = {}
    for key, value in cp["ampgnn"].items():
        name = key.strip().replace("-", "_")
        if name not in DEFAULTS and name != "out":
            raise CliUsageError(f"unknown config key {key!r}")
        out[name] = value
    return out


def _coerce(name: str, value):
    default = DEFAULTS.get(name)
    if value is None:
        return None
    if isinstance(default, bool):
        return _bool(value)
    if isinstance(default, int):
        try:
            return int(value)
        except ValueError:
            raise CliUsageError(f"{name} must be an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except ValueError:
            raise CliUsageError(f"{name} must be a number, got {value!r}") from None
    return value


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Merge flags over config over defaults."""
    settings = dict(DEFAULTS)
    settings["out"] = os.environ.get(OUT_ENV) or DEFAULT_OUT
    if args.config:
        settings.update(read_config(args.config))
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command"):
            settings[k] = v
    return {k: _coerce(k, v) if k in DEFAULTS else v for k, v in settings.items()}


# -- subcommands --------------------------------------------------------------


def _out_path(s: dict, name: str) -> str:
    os.makedirs(s["out"], exist_ok=True)
    return os.path.join(s["out"], name)


def _train_config(s: dict, users: Sequence[int], seed: int) -> trainer.TrainConfig:
    lo_hi = tuple(float(v) for v in str(s["snr_range"]).split(","))
    if len(lo_hi) != 2:
        raise CliUsageError("snr-range needs two values, low,high")
    try:
        return trainer.TrainConfig(
            M=s["M"], users=tuple(users), Q=s["Q"], snr_db=lo_hi, epochs=s["epochs"],
            samples_per_epoch=s["samples_per_epoch"], val_samples=s["val_samples"],
            batch_size=s["batch_size"], lr=s["lr"], seed=seed, T=s["T"], rounds=s["rounds"],
            n_u=s["n_u"], n_h1=s["n_h1"], n_h2=s["n_h2"], shared=s["shared"],
        )
    except ValueError as exc:
        raise CliUsageError(str(exc)) from None


def _progress(row: dict) -> None:
    log.info("epoch %d val_loss %.6g val_ser %.6g", row["epoch"], row["val_loss"], row["val_ser"])


def run_train(s: dict, users: Sequence[int], seed: int, stem: str) -> amp_gnn.AmpGnnModel:
    cfg = _train_config(s, users, seed)
    ckpt = _out_path(s, f"{stem}.ckpt")
    res = trainer.train(cfg, checkpoint_path=ckpt, resume=s["resume"], progress=_progress)
    amp_gnn.save_bundle(_out_path(s, f"{stem}.agnn"), res.model)
    res.history.write_csv(_out_path(s, f"{stem}.history.csv"))
    log.info("best epoch %d, validation loss %.6g", res.best_epoch, res.best_val_loss)
    return res.model


def _load_model(path: str | None, what: str) -> amp_gnn.AmpGnnModel:
    if not path:
        raise CliUsageError(f"{what} requires a model bundle")
    if not os.path.exists(path):
        raise CliUsageError(f"model bundle {path} not found")
    return amp_gnn.load_bundle(path)


def cmd_gen(s: dict) -> int:
    cons = comms.make_qam(s["Q"])
    out = []
    for i, snr in enumerate(parse_grid(s["snr"])):
        scen = comms.MimoScenario(s["M"], s["N"], float(comms.snr_to_sigma2(snr, s["M"], s["N"])), cons)
        ds = comms.build_dataset(scen, s["count"], s["seed"] + i)
        path = _out_path(s, f"dataset_{s['M']}x{s['N']}_q{s['Q']}_snr{snr:g}.agnn")
        comms.save_dataset(path, ds)
        out.append(path)
    print("\n".join(out))
    return 0


def cmd_train(s: dict) -> int:
    run_train(s, parse_ints(s["users"]), s["seed"], "model")
    print(_out_path(s, "model.agnn"))
    return 0


def cmd_sweep(s: dict) -> int:
    names = tuple(d.strip() for d in str(s["detectors"]).split(",") if d.strip())
    models = {}
    if any(n.startswith("ampgnn") for n in names):
        model = _load_model(s["bundle"], "detector ampgnn")
        models = {n: model for n in names if n.startswith("ampgnn")}
    cfg = bench.ExperimentConfig(
        M=s["M"], N=s["N"], Q=s["Q"], detectors=names, snr_db=parse_grid(s["snr"]),
        samples=s["samples"], seed=s["seed"], threads=s["threads"], T=s["T"],
    )
    report = bench.sweep(cfg, models)
    path = _out_path(s, "sweep.csv")
    report.write_csv(path)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_complexity(s: dict) -> int:
    g = bench.GnnSizes(T=s["T"], rounds=s["rounds"], n_u=s["n_u"], n_h1=s["n_h1"], n_h2=s["n_h2"])
    rep = bench.complexity_report(parse_sizes(s["sizes"]), s["Q"], g, s["convention"])
    text = rep.to_csv(s["Q"])
    with open(_out_path(s, "complexity.csv"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    for note in rep.notes:
        log.info("%s", note)
    return 0


def cmd_robustness(s: dict) -> int:
    train_users = parse_ints(s["train_users"])
    test_n = s["test_users"]
    if s["mixture_bundle"]:
        mixture = _load_model(s["mixture_bundle"], "robustness")
    else:
        mixture = run_train(s, train_users, s["seed"], "mixture")
    matched = None
    if s["matched"]:
        if s["matched_bundle"]:
            matched = _load_model(s["matched_bundle"], "robustness")
        else:
            matched = run_train(s, (test_n,), s["seed"] + 1, "matched")
    cfg = bench.ExperimentConfig(
        M=s["M"], N=test_n, Q=s["Q"], detectors=(), snr_db=parse_grid(s["snr"]),
        samples=s["samples"], seed=s["seed"], threads=s["threads"], T=s["T"],
    )
    report = bench.robustness(cfg, mixture, matched, warn=log.warning)
    report.write_csv(_out_path(s, "robustness.csv"))
    sys.stdout.write(report.to_csv())
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "complexity": cmd_complexity,
    "robustness": cmd_robustness,
}


# -- argument parser ----------------------------------------------------------


def _add(p: argparse.ArgumentParser, *names: str, **kw) -> None:
    # defaults stay None so that config values can fill the gaps
    p.add_argument(*names, default=None, **kw)


def _common_flags(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--seed", type=int, default=default, help="root seed (default 0)")
    p.add_argument("--config", default=default, help="flat key = value settings file")
    p.add_argument("--out", default=default, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--threads", type=int, default=default, help="worker threads for sweeps (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    # accepted before or after the subcommand; SUPPRESS keeps the subcommand
    # copy from clobbering a value given up front
    common = argparse.ArgumentParser(add_help=False)
    _common_flags(common, argparse.SUPPRESS)

    system = argparse.ArgumentParser(add_help=False)
    _add(system, "--M", "-M", type=int, help="receive antennas")
    _add(system, "--Q", "-Q", type=int, help="QAM order: 4, 16 or 64")
    _add(system, "--T", type=int, help="AMP layers")

    model = argparse.ArgumentParser(add_help=False)
    _add(model, "--snr-range", dest="snr_range", help="training SNR range low,high in dB")
    _add(model, "--epochs", type=int)
    _add(model, "--samples-per-epoch", dest="samples_per_epoch", type=int)
    _add(model, "--val-samples", dest="val_samples", type=int)
    _add(model, "--batch-size", dest="batch_size", type=int)
    _add(model, "--lr", type=float)
    _add(model, "--rounds", type=int, help="GNN message-passing rounds per layer")
    _add(model, "--n-u", dest="n_u", type=int)
    _add(model, "--n-h1", dest="n_h1", type=int)
    _add(model, "--n-h2", dest="n_h2", type=int)
    model.add_argument("--unshared", dest="shared", action="store_false", default=None, help="separate GNN weights per layer")
    model.add_argument("--resume", action="store_true", default=None, help="continue from the checkpoint in the output directory")

    parser = argparse.ArgumentParser(prog="ampgnn", description=__doc__.split("\n\n")[0])
    _common_flags(parser, None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common, system], help="write dataset files")
    _add(p, "--N", "-N", type=int, help="users")
    _add(p, "--snr", help="SNR grid, e.g. 0:12:2 or 4,8")
    _add(p, "--count", type=int, help="channel uses per SNR")

    p = sub.add_parser("train", parents=[common, system, model], help="train an AMP-GNN bundle")
    _add(p, "--users", help="comma-separated training user counts")

    p = sub.add_parser("sweep", parents=[common, system], help="paired SER sweep")
    _add(p, "--N", "-N", type=int, help="users")
    _add(p, "--snr", help="SNR grid, e.g. 0:12:2 or 4,8")
    _add(p, "--samples", type=int, help="channel uses per SNR point")
    _add(p, "--detectors", help=f"comma list from {', '.join(bench.DETECTORS)}")
    _add(p, "--bundle", help="model bundle for the ampgnn detector")

    p = sub.add_parser("complexity", parents=[common], help="multiplication counts")
    _add(p, "--sizes", help="comma list of MxN")
    _add(p, "--Q", "-Q", type=int)
    _add(p, "--T", type=int)
    _add(p, "--rounds", type=int)
    _add(p, "--n-u", dest="n_u", type=int)
    _add(p, "--n-h1", dest="n_h1", type=int)
    _add(p, "--n-h2", dest="n_h2", type=int)
    _add(p, "--convention", choices=("complex", "real"))

    p = sub.add_parser("robustness", parents=[common, system, model], help="evaluate at an unseen user count")
    _add(p, "--train-users", dest="train_users", help="user counts of the mixture model")
    _add(p, "--test-users", dest="test_users", type=int)
    _add(p, "--snr", help="SNR grid")
    _add(p, "--samples", type=int, help="channel uses per SNR point")
    _add(p, "--mixture-bundle", dest="mixture_bundle", help="skip training the mixture model")
    _add(p, "--matched-bundle", dest="matched_bundle", help="skip training the matched model")
    p.add_argument("--no-matched", dest="matched", action="store_false", default=None, help="omit the matched-N model")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    verbose = bool(args.verbose)
    del args.verbose
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        settings = resolve(args)
        return COMMANDS[args.command](settings)
    except (CliUsageError, ConfigError, CapacityError, ContainerError, UsageError) as exc:
        print(f"ampgnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalDivergence, DetectorNumericalError, TrainingError, FloatingPointError) as exc:
        print(f"ampgnn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
