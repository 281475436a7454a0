"""Command-line entry point: ``lagvid {gen-data,train,eval,selftest}``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__, io, selftest
from .dynamics import InertiaFactorizationError, RolloutDivergedError
from .simulators import ObservationDataset, SystemSpec, TrajectoryDataset, render_frames
from .simulators import SYSTEMS, generate_observations, generate_trajectories
from .training import (
    ABLATIONS,
    LAT_NORMS,
    REGIMES,
    TrainConfig,
    TrainingDivergedError,
    evaluate_rollout,
    predict_observations,
    predict_states,
    train,
    train_test_split,
)

log = logging.getLogger("lagvid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "LAGVID_OUTPUT_ROOT"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _resolve_out(path: str | None, default_name: str) -> Path:
    return Path(path) if path else output_root() / default_name


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config_file(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in sorted(values.items())))


_CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}
_FLOAT_KEYS = {"lr", "weight_decay", "gamma", "train_fraction"}
_INT_KEYS = {"batch_size", "epochs", "seed", "hidden", "checkpoint_every"}


def _coerce_config(values: dict[str, str]) -> dict:
    out = {}
    for key, value in values.items():
        if key not in _CONFIG_FIELDS:
            raise UsageError(f"unknown config key {key!r}")
        try:
            if key in _FLOAT_KEYS:
                out[key] = float(value)
            elif key in _INT_KEYS:
                out[key] = int(value)
            else:
                out[key] = value
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {value!r}") from exc
    return out


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    spec = SystemSpec(args.system, dt=args.dt)
    out = _resolve_out(args.out, f"{args.system}_n{args.n}_t{args.t}_s{args.seed}.lvd")
    if args.no_render:
        ds = generate_trajectories(spec, args.n, args.t + 1, seed=args.seed)
    else:
        ds = generate_observations(spec, args.n, args.t, seed=args.seed)
    try:
        io.save_dataset(out, ds, seed=args.seed, store_observations=args.store_observations)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    print(f"wrote {out} ({len(ds)} trajectories, sha256 {io.file_checksum(out)[:16]})")
    return EXIT_OK


# ------------------------------------------------------------------- train


def _load_dataset(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset {path} does not exist")
    try:
        return io.load_dataset(path)
    except io.FormatError as exc:
        raise DataError(str(exc)) from exc


def _subset(ds, index):
    if isinstance(ds, ObservationDataset):
        return ds.subset(index)
    return TrajectoryDataset(ds.states[index], ds.spec, ds.seed)


def cmd_train(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    overrides = {
        "regime": args.regime, "ablation": args.ablation, "lr": args.lr,
        "weight_decay": args.weight_decay, "gamma": args.gamma, "batch_size": args.batch_size,
        "epochs": args.epochs, "seed": args.seed, "lat_norm": args.lat_norm,
        "hidden": args.hidden, "dtype": args.dtype, "train_fraction": args.train_fraction,
        "checkpoint_every": args.checkpoint_every,
    }
    config_values = _coerce_config(values)
    config_values.update({k: v for k, v in overrides.items() if v is not None})
    if "regime" not in config_values:
        raise UsageError("--regime is required (flag or config file)")

    ds = _load_dataset(args.data)
    config_values["system"] = ds.spec.kind
    try:
        config = TrainConfig(**config_values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if config.regime == "video" and not isinstance(ds, ObservationDataset):
        raise DataError(f"regime 'video' needs a rendered dataset; {args.data} holds states only")
    if config.regime == "state_space" and isinstance(ds, ObservationDataset) and ds.T < 1:
        raise DataError("state_space regime needs at least one target step")

    out = _resolve_out(args.out, f"train_{config.regime}_{config.ablation}_s{config.seed}")
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": "train",
        "argv": sys.argv[1:],
        "config": config.to_dict(),
        "seed": config.seed,
        "dataset": str(args.data),
        "dataset_sha256": io.file_checksum(args.data),
        "code_version": __version__,
        "torch_version": torch.__version__,
        "started_at": _now(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    write_config_file(out / "config.txt", config.to_dict())

    train_idx, test_idx = train_test_split(len(ds), config.train_fraction, config.seed)
    train_ds = _subset(ds, train_idx)
    t_train = ds.T if isinstance(ds, ObservationDataset) else ds.states.shape[1] - 1
    if config.regime == "state_space":
        train_ds = train_ds.trajectories() if isinstance(train_ds, ObservationDataset) else train_ds
    extra = {
        "regime": config.regime, "system": ds.spec.kind, "dt": ds.spec.dt, "T": t_train,
        "train_fraction": config.train_fraction, "split_seed": config.seed,
        "dataset_sha256": manifest["dataset_sha256"], "config": config.to_dict(),
    }
    history_path = out / "history.csv"
    history_path.write_text("epoch,l_ae,l_dyn,l_lat,total\n")
    ckpt_dir = out / "checkpoints"

    def on_epoch(epoch, record, result):
        with history_path.open("a") as f:
            f.write(",".join(repr(record[k]) if k != "epoch" else str(epoch)
                             for k in ("epoch", "l_ae", "l_dyn", "l_lat", "total")) + "\n")
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            io.save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.lvc", result.model, result.autoencoder,
                               {**extra, "epoch": epoch})
        if args.verbose:
            print(f"epoch {epoch:4d}  " + "  ".join(f"{k} {record[k]:.5g}" for k in ("l_ae", "l_dyn", "l_lat", "total")))

    start = time.perf_counter()
    result = train(config, train_ds, on_epoch=on_epoch)
    final = out / "model.lvc"
    io.save_checkpoint(final, result.model, result.autoencoder, {**extra, "epoch": config.epochs})
    summary = {"finished_at": _now(), "seconds": time.perf_counter() - start,
               "final": result.history[-1] if result.history else None,
               "checkpoint_sha256": io.file_checksum(final), "n_train": len(train_idx),
               "n_test": len(test_idx)}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(f"trained {config.regime}/{config.ablation} for {config.epochs} epochs -> {final}")
    return EXIT_OK


# -------------------------------------------------------------------- eval


def _middle_frame(obs: np.ndarray) -> np.ndarray:
    return obs[obs.shape[0] // 2]


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} does not exist")
    try:
        model, autoencoder, meta = io.load_checkpoint(ckpt)
    except io.FormatError as exc:
        raise DataError(str(exc)) from exc
    ds = _load_dataset(args.data)
    regime = meta.get("regime", "video" if autoencoder is not None else "state_space")
    dtype = next(model.parameters()).dtype

    if regime == "video":
        if not isinstance(ds, ObservationDataset):
            raise DataError(f"video checkpoint needs a rendered dataset; {args.data} holds states only")
        h = ds.frames.shape[-1]
        if h != autoencoder.encoder.image_size:
            raise DataError(
                f"incompatible image size: checkpoint expects {autoencoder.encoder.image_size}, dataset has {h}"
            )
        if ds.spec.kind != meta.get("system", ds.spec.kind):
            raise DataError(
                f"incompatible latent dimensions: checkpoint latent {autoencoder.latent_dim} "
                f"({meta.get('system')}), dataset system {ds.spec.kind}"
            )
    elif 2 * model.m != 2 * ds.spec.m:
        raise DataError(
            f"incompatible latent dimensions: checkpoint state {2 * model.m}, dataset state {2 * ds.spec.m}"
        )

    if args.split == "test":
        _, index = train_test_split(len(ds), meta.get("train_fraction", 0.8), meta.get("split_seed", 0))
    else:
        index = np.arange(len(ds))
    if len(index) == 0:
        raise DataError("evaluation split is empty")
    ds = _subset(ds, index)
    dt = meta.get("dt", ds.spec.dt)
    t_train = meta.get("T", 1)
    out = _resolve_out(args.out, f"eval_{ckpt.parent.name}_{ckpt.stem}")
    out.mkdir(parents=True, exist_ok=True)

    if regime == "video":
        truth = torch.as_tensor(ds.observations, dtype=dtype)
        in_range = args.in_range if args.in_range is not None else t_train
        report = evaluate_rollout(model, truth, args.horizon, dt, in_range, autoencoder=autoencoder)
    else:
        states = ds.states
        truth = torch.as_tensor(states, dtype=dtype)
        in_range = args.in_range if args.in_range is not None else t_train + 1
        report = evaluate_rollout(model, truth, args.horizon, dt, in_range)

    rng = np.random.default_rng(args.seed)
    chosen = np.sort(rng.choice(len(ds), size=min(args.count, len(ds)), replace=False))
    for rank, i in enumerate(chosen):
        if regime == "video":
            obs = ds.observations[i]
            _, pred = predict_observations(model, autoencoder, truth[i : i + 1, 0], args.horizon, dt)
            pred = pred[0].numpy()
            gt_row = [_middle_frame(obs[s]) if s < obs.shape[0] else None for s in report.steps]
            pred_row = [_middle_frame(pred[k]) for k in range(len(report.steps))]
        else:
            zhat = predict_states(model, truth[i : i + 1, 0], args.horizon, dt)[0].numpy()
            m = ds.spec.m
            gt_frames = render_frames(ds.spec, ds.states[i, :, :m])
            gt_row = [gt_frames[s] if s < len(gt_frames) else None for s in report.steps]
            pred_row = list(render_frames(ds.spec, zhat[:, :m]))
        io.write_pgm(out / f"strip_{rank:03d}_traj{int(index[i]):05d}.pgm", io.image_strip([gt_row, pred_row]))

    (out / "metrics.csv").write_text(report.to_csv())
    summary = {**report.summary(), "checkpoint": str(ckpt), "dataset": str(args.data),
               "horizon": args.horizon, "in_range": in_range,
               "selected": [int(index[i]) for i in chosen]}
    (out / "metrics.json").write_text(json.dumps(summary, indent=1))
    s = report.summary()
    print(f"{report.metric}: in-range {s['mean_in_range']}, extrapolation {s['mean_extrapolation']} "
          f"({s['n_in_range']}+{s['n_extrapolation']} steps, {s['n_trajectories']} trajectories) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- selftest


def cmd_selftest(args) -> int:
    results = selftest.run_all()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lagvid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="simulate and render a dataset")
    g.add_argument("--system", choices=SYSTEMS, required=True)
    g.add_argument("--n", type=int, required=True, help="number of trajectories")
    g.add_argument("--t", type=int, required=True, help="observations (or target steps) per trajectory")
    g.add_argument("--dt", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help=f"output file (default under ${OUTPUT_ROOT_ENV})")
    g.add_argument("--no-render", action="store_true", help="states only, no frames")
    g.add_argument("--store-observations", action="store_true",
                   help="also store stacked observations (3x the frame storage)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit a model to a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--regime", choices=REGIMES)
    t.add_argument("--ablation", choices=ABLATIONS)
    t.add_argument("--config", help="flat key=value file; flags take precedence")
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lat-norm", choices=LAT_NORMS)
    t.add_argument("--hidden", type=int)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--train-fraction", type=float)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--out", help=f"run directory (default under ${OUTPUT_ROOT_ENV})")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpoint and write strips and metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--horizon", type=int, default=20)
    e.add_argument("--count", type=int, default=3)
    e.add_argument("--in-range", type=int, help="steps counted as in range (default: training length)")
    e.add_argument("--split", choices=("test", "all"), default="test")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="run the analytic-oracle checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "horizon", 1) < 1 or getattr(args, "count", 1) < 1:
        parser.error("horizon and count must be >= 1")
    if args.command == "gen-data" and (args.n < 1 or args.t < 1 or args.dt <= 0):
        parser.error("n and t must be >= 1 and dt > 0")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lagvid: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"lagvid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, RolloutDivergedError, InertiaFactorizationError) as exc:
        print(f"lagvid: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
