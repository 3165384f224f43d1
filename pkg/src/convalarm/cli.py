"""Command-line driver for reproducible train / experiment / score runs.

All commands are driven by a single JSON config file (see README for the
schema); selected fields can be overridden by flags.  Exit codes: 0 success,
2 config or input error, 3 numeric failure (training divergence).

Relative dataset paths resolve against ``$CONVALARM_DATA_ROOT`` (default:
current directory).  Commands write only into the configured output
directory; ``score`` and ``gradcheck`` write to stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DataError,
    Dataset,
    NormalizationRecord,
    dedup,
    load_csv,
    load_idx,
    load_idx_images,
    normalize,
    synth_digit_images,
    synth_two_gaussian,
)
from .evaluation import ExperimentSpec, render_reports, run_experiment
from .gradcheck import format_table, run_gradcheck
from .networks import (
    AlarmConfig,
    BuildError,
    TargetConfig,
    build_model,
)
from .tensor import ShapeError
from .training import (
    DivergenceError,
    TrainConfig,
    fit,
    make_one_vs_all,
    stratified_split,
    stratified_subset,
    training_log_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

DATA_ROOT_ENV = "CONVALARM_DATA_ROOT"


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


# ---------------------------------------------------------------------------
# config handling


def _data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "."))


def _resolve_path(field: str, value) -> Path:
    p = Path(value)
    if not p.is_absolute():
        p = _data_root() / p
    if not p.exists():
        raise ConfigError(f"{field}: no such file: {p}")
    return p


def load_run_config(path) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    if "dataset" not in cfg:
        raise ConfigError("dataset: section is required")
    return cfg


def _dataset_from_config(dcfg: dict) -> Dataset:
    kind = dcfg.get("kind")
    if kind == "synth_two_gaussian":
        return synth_two_gaussian(
            n_typical=int(dcfg.get("n_typical", 1000)),
            n_anomalous=int(dcfg.get("n_anomalous", 100)),
            d=int(dcfg.get("dim", 10)),
            separation=float(dcfg.get("separation", 6.0)),
            seed=int(dcfg.get("seed", 0)))
    if kind == "synth_digits":
        return synth_digit_images(n_per_class=int(dcfg.get("n_per_class", 100)),
                                  seed=int(dcfg.get("seed", 0)))
    if kind == "idx":
        for key in ("images", "labels"):
            if key not in dcfg:
                raise ConfigError(f"dataset.{key}: required for kind 'idx'")
        return load_idx(_resolve_path("dataset.images", dcfg["images"]),
                        _resolve_path("dataset.labels", dcfg["labels"]))
    if kind == "csv":
        if "path" not in dcfg:
            raise ConfigError("dataset.path: required for kind 'csv'")
        ds = load_csv(_resolve_path("dataset.path", dcfg["path"]),
                      label_column=dcfg.get("label_column"),
                      positive_values=dcfg.get("positive_values", ()),
                      delimiter=dcfg.get("delimiter", ","))
        if dcfg.get("dedup", True):
            ds = dedup(ds)
        return ds
    raise ConfigError(f"dataset.kind: unknown kind {kind!r}; expected "
                      f"synth_two_gaussian, synth_digits, idx, or csv")


def _default_normalize(dcfg: dict) -> str | None:
    if "normalize" in dcfg:
        method = dcfg["normalize"]
        if method in (None, "none"):
            return None
        if method not in ("zscore", "minmax"):
            raise ConfigError(f"dataset.normalize: unknown method {method!r}")
        return method
    return "zscore" if dcfg.get("kind") == "csv" else None


def _target_config(cfg: dict, features: np.ndarray) -> TargetConfig:
    tcfg = dict(cfg.get("target", {}))
    tcfg.pop("input_kind", None)  # always derived from the data
    if "encoder_channels" in tcfg:
        tcfg["encoder_channels"] = tuple(tcfg["encoder_channels"])
    try:
        if features.ndim == 4:
            _, c, h, w = features.shape
            return TargetConfig.for_image(c, h, w, **tcfg)
        return TargetConfig.for_tabular(features.shape[1], **tcfg)
    except (BuildError, TypeError) as e:
        raise ConfigError(f"target: {e}") from e


def _alarm_config(cfg: dict) -> AlarmConfig:
    acfg = dict(cfg.get("alarm", {}))
    for key in ("conv_channels", "hidden_dense"):
        if key in acfg:
            acfg[key] = tuple(acfg[key])
    try:
        return AlarmConfig(**acfg)
    except (BuildError, TypeError) as e:
        raise ConfigError(f"alarm: {e}") from e


def _train_config(cfg: dict, seed_override=None, gamma_override=None) -> TrainConfig:
    tcfg = dict(cfg.get("train", {}))
    if seed_override is not None:
        tcfg["seed"] = seed_override
    if gamma_override is not None:
        tcfg["gamma"] = gamma_override
    try:
        return TrainConfig(**tcfg)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"train: {e}") from e


def _out_dir(cfg: dict, override) -> Path:
    out = Path(override) if override else Path(cfg.get("output_dir", "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    dcfg = cfg["dataset"]
    train_cfg = _train_config(cfg, seed_override=args.seed,
                              gamma_override=args.gamma)
    ds = _dataset_from_config(dcfg)
    if dcfg.get("normal_class") is not None:
        ds = make_one_vs_all(ds, int(dcfg["normal_class"]))
    if dcfg.get("subset_size"):
        ds = stratified_subset(ds, int(dcfg["subset_size"]),
                               seed=train_cfg.seed)
    ratios = tuple((cfg.get("experiment") or {}).get("ratios", (8, 1, 1)))
    split = stratified_split(ds, ratios, seed=train_cfg.seed)
    record = None
    method = _default_normalize(dcfg)
    if method:
        normalized, record = normalize(ds, method, split.train_idx)
        split = replace(split, dataset=normalized)

    feats = split.dataset.features
    target_cfg = _target_config(cfg, feats)
    alarm_cfg = _alarm_config(cfg)
    bundle = build_model(target_cfg, alarm_cfg, seed=train_cfg.seed)
    result = fit(bundle, split, train_cfg)

    out = _out_dir(cfg, args.out)
    extras = {
        "dataset_name": split.dataset.name,
        "train_cfg": train_cfg.to_dict(),
        "normalization": record.to_dict() if record else None,
        "csv_schema": split.dataset.schema,
        "best_epoch": result.best_epoch,
    }
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, bundle, extras=extras)
    (out / "training_log.csv").write_text(training_log_csv(result.history))
    print(f"trained {split.dataset.name}: {len(result.history)} epochs, "
          f"best epoch {result.best_epoch}, checkpoint {ckpt}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = load_run_config(args.config)
    ecfg = cfg.get("experiment")
    if not isinstance(ecfg, dict):
        raise ConfigError("experiment: section is required for this command")
    gammas = [args.gamma] if args.gamma is not None else ecfg.get("gammas")
    if not gammas:
        raise ConfigError("experiment.gammas: must be a non-empty list")
    iterations = int(ecfg.get("iterations", 10))
    modes = tuple(ecfg.get("modes", ("alarm", "recon", "combined")))

    dcfg = cfg["dataset"]
    ds = _dataset_from_config(dcfg)
    raw_nc = dcfg.get("normal_class")
    if raw_nc == "all":
        if ds.labels is None:
            raise ConfigError("dataset.normal_class: 'all' needs a labeled dataset")
        normal_classes = [int(c) for c in np.unique(ds.labels)]
    elif isinstance(raw_nc, list):
        normal_classes = [int(c) for c in raw_nc]
    else:
        normal_classes = [None if raw_nc is None else int(raw_nc)]

    reports = []
    for normal_class in normal_classes:
        for gamma in gammas:
            train_cfg = _train_config(cfg, seed_override=args.seed,
                                      gamma_override=float(gamma))
            spec = ExperimentSpec(
                dataset=ds,
                target_cfg=_target_config(cfg, ds.features),
                alarm_cfg=_alarm_config(cfg),
                train_cfg=train_cfg,
                iterations=iterations,
                normal_class=normal_class,
                normalize_method=_default_normalize(dcfg),
                modes=modes,
                combined_lambda=float(ecfg.get("combined_lambda", 1.0)),
                ratios=tuple(ecfg.get("ratios", (8, 1, 1))),
                subset_size=dcfg.get("subset_size"))
            reports.append(run_experiment(spec, threads=args.threads))

    out = _out_dir(cfg, args.out)
    gtag = "-".join(f"{float(g):g}" for g in gammas)
    stem = f"report_{ds.name}_gamma{gtag}"
    if args.timestamp:
        stem += time.strftime("_%Y%m%dT%H%M%SZ", time.gmtime())
    csv_path = out / f"{stem}.csv"
    md_path = out / f"{stem}.md"
    csv_path.write_text(render_reports(reports, "csv"))
    md_path.write_text(render_reports(reports, "markdown"))
    print(render_reports(reports, "markdown"))
    print(f"wrote {csv_path} and {md_path}")
    return EXIT_OK


def _load_score_input(path: Path, extras: dict) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(4)
    if head == b"\x00\x00\x08\x03":
        return load_idx_images(path)
    if path.suffix == ".npy":
        feats = np.load(path).astype(np.float32)
    else:
        ds = load_csv(path, label_column=None, schema=extras.get("csv_schema"))
        feats = ds.features
    record = extras.get("normalization")
    if record and feats.ndim == 2:
        feats = NormalizationRecord.from_dict(record).apply(feats)
    return feats


def cmd_score(args) -> int:
    try:
        bundle, extras = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {args.checkpoint}") from None
    path = Path(args.input)
    if not path.exists():
        raise ConfigError(f"input not found: {path}")
    feats = _load_score_input(path, extras)
    from .evaluation import score_batched

    scores = score_batched(bundle, feats, args.mode, lam=args.lam)
    print("index,score")
    for i, s in enumerate(scores):
        print(f"{i},{s:.8g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(base_seed=args.seed, seeds=args.seeds_per_op,
                            corrupt_op=args.corrupt)
    print(format_table(results))
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convalarm",
        description="Joint autoencoder + activation-alarm anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="fit one model from a config file")
    train.add_argument("--config", required=True)
    train.add_argument("--out", help="output directory (overrides config)")
    train.add_argument("--seed", type=int, help="override train.seed")
    train.add_argument("--gamma", type=float, help="override train.gamma")
    train.set_defaults(func=cmd_train)

    exp = sub.add_parser("experiment",
                         help="repeated-run evaluation over a gamma list")
    exp.add_argument("--config", required=True)
    exp.add_argument("--out", help="output directory (overrides config)")
    exp.add_argument("--seed", type=int, help="override base seed")
    exp.add_argument("--gamma", type=float,
                     help="run a single gamma instead of the config list")
    exp.add_argument("--threads", type=int, default=1,
                     help="parallel iterations (default 1)")
    exp.add_argument("--timestamp", action="store_true",
                     help="append a UTC timestamp to report filenames")
    exp.set_defaults(func=cmd_experiment)

    sc = sub.add_parser("score", help="score samples with a checkpoint")
    sc.add_argument("--checkpoint", required=True)
    sc.add_argument("--input", required=True,
                    help="IDX images, .npy matrix, or CSV")
    sc.add_argument("--mode", default="alarm",
                    choices=("alarm", "recon", "combined"))
    sc.add_argument("--lam", type=float, default=1.0,
                    help="reconstruction weight for combined mode")
    sc.set_defaults(func=cmd_score)

    gc = sub.add_parser("gradcheck",
                        help="finite-difference check of every op")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--seeds-per-op", type=int, default=20)
    gc.add_argument("--corrupt", help="testing hook: corrupt one op's gradients")
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def _exit_code_for(exc: BaseException) -> int | None:
    # walk the cause chain: experiment failures wrap the real error
    seen: BaseException | None = exc
    while seen is not None:
        if isinstance(seen, DivergenceError):
            return EXIT_NUMERIC
        if isinstance(seen, (ConfigError, DataError, BuildError,
                             CheckpointError, ShapeError, ValueError)):
            return EXIT_CONFIG
        seen = seen.__cause__
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:
        code = _exit_code_for(e)
        if code is None:
            raise
        kind = "numeric failure" if code == EXIT_NUMERIC else "error"
        print(f"{kind}: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
