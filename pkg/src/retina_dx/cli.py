"""``retina-dx`` command line: preprocess, train, eval, predict, gradcheck.

Exit codes: 0 success, 1 check or accuracy failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data_pipeline import (
    LABELS,
    DatasetManifest,
    load_manifest,
    read_split,
    split_80_20,
    write_split,
)
from .image_prep import ClaheParams, ImageFormatError, preprocess, read_image
from .nn import CheckpointError, ConfigError, build_network, load_checkpoint, preset, save_checkpoint
from .nn.checkpoint import save_tensor
from .nn.network import PRESETS
from .tensor_core import STREAM_INIT, Rng
from .train_engine import TrainingConfig, best_epoch, evaluate, grad_check, train

log = logging.getLogger("retina_dx")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    manifest: str | None = None
    dataset_root: str | None = None
    clahe: ClaheParams = field(default_factory=ClaheParams)
    input_size: int = 64
    preset: str = "table1"
    training: TrainingConfig = field(default_factory=TrainingConfig)
    out: str = "out"
    seed: int = 0

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise UsageError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.input_size < 8:
            raise UsageError("input_size must be at least 8")
        if not 0 <= self.seed < 2 ** 64:
            raise UsageError("seed must be a 64-bit unsigned integer")
        try:
            preset(self.preset, self.input_size)
            build_network(preset(self.preset, self.input_size))
        except ConfigError as exc:
            raise UsageError(f"input size {self.input_size} does not fit preset {self.preset}: {exc}")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            blob = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(blob, dict):
        raise UsageError("config file must hold a JSON object")
    return blob


def _sub(cls, blob, what):
    names = {f.name for f in fields(cls)}
    unknown = set(blob) - names
    if unknown:
        raise UsageError(f"unknown {what} keys {sorted(unknown)}")
    try:
        return cls(**blob)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what}: {exc}")


def resolve_config(args) -> RunConfig:
    """Config file first, command-line flags on top; validated before anything is written."""
    blob = _load_config_file(getattr(args, "config", None))
    top = {f.name for f in fields(RunConfig)}
    unknown = set(blob) - top
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    clahe = dict(blob.get("clahe", {}))
    training = dict(blob.get("training", {}))
    cfg = {k: v for k, v in blob.items() if k not in ("clahe", "training")}

    for flag, key in (("manifest", "manifest"), ("root", "dataset_root"), ("out", "out"),
                      ("preset", "preset"), ("input_size", "input_size"), ("seed", "seed")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    for flag, key in (("epochs", "max_epochs"), ("lr", "initial_lr"), ("batch_size", "batch_size"),
                      ("momentum", "momentum"), ("drop_factor", "lr_drop_factor"),
                      ("drop_period", "lr_drop_period_epochs")):
        val = getattr(args, flag, None)
        if val is not None:
            training[key] = val
    for flag, key in (("clip_limit", "clip_limit"), ("tiles", "tiles_x")):
        val = getattr(args, flag, None)
        if val is not None:
            clahe[key] = val
            if key == "tiles_x":
                clahe["tiles_y"] = val
    if "seed" in cfg:
        training["seed"] = cfg["seed"]
    elif "seed" in training:
        cfg["seed"] = training["seed"]

    run = RunConfig(**{k: v for k, v in cfg.items()})
    run.clahe = _sub(ClaheParams, clahe, "clahe")
    run.training = _sub(TrainingConfig, training, "training")
    run.validate()
    return run


def _require_manifest(run: RunConfig) -> DatasetManifest:
    if not run.manifest:
        raise UsageError("--manifest is required")
    try:
        manifest = load_manifest(run.manifest)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc))
    if run.dataset_root:
        manifest.root = run.dataset_root
    missing = [s.path for s in manifest.entries if not manifest.resolve(s).is_file()]
    if missing:
        raise UsageError(f"{len(missing)} manifest images missing, first: {missing[0]}")
    return manifest


def _load_arrays(manifest: DatasetManifest, run: RunConfig):
    x = np.stack([preprocess(read_image(manifest.resolve(s)), run.clahe, run.input_size)
                  for s in manifest.entries]) if manifest.entries else None
    return x, manifest.labels()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_metrics(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc"])
        for r in history:
            w.writerow([r.epoch, _fmt(r.lr), _fmt(r.train_loss), _fmt(r.train_accuracy), _fmt(r.val_accuracy)])


# -- commands ----------------------------------------------------------------

def cmd_preprocess(args) -> int:
    run = resolve_config(args)
    manifest = _require_manifest(run)
    out = Path(run.out)
    os.makedirs(out, exist_ok=True)
    rows, failures = [], 0
    for i, s in enumerate(manifest.entries):
        name = f"{i:05d}.rdxt"
        try:
            tensor = preprocess(read_image(manifest.resolve(s)), run.clahe, run.input_size)
        except (OSError, ImageFormatError, ValueError) as exc:
            log.error("%s: %s", s.path, exc)
            rows.append([s.path, s.label, "", f"error: {exc}"])
            failures += 1
            continue
        save_tensor(out / name, tensor)
        rows.append([s.path, s.label, name, "ok"])
    with open(out / "index.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "label", "tensor", "status"])
        w.writerows(rows)
    print(f"preprocessed {len(rows) - failures}/{len(rows)} images into {out}")
    return EXIT_USAGE if failures else EXIT_OK


def cmd_train(args) -> int:
    run = resolve_config(args)
    manifest = _require_manifest(run)
    if len(manifest) < 2:
        raise UsageError("training needs at least 2 images")
    split = split_80_20(manifest, run.seed)
    x, y = _load_arrays(manifest, run)

    config = preset(run.preset, run.input_size)
    config.preprocess = {"clahe": asdict(run.clahe), "input_size": run.input_size}
    net = build_network(config, None, Rng(run.seed, STREAM_INIT))

    out = Path(run.out)
    os.makedirs(out, exist_ok=True)
    write_split(split, out / "split.csv")
    best = {"acc": None, "state": None}

    def keep_best(record, net_now):
        acc = record.val_accuracy
        if acc is not None and (best["acc"] is None or acc > best["acc"]):
            best["acc"] = acc
            best["state"] = copy.deepcopy(net_now.state_dict())

    train_set = (x[split.train], y[split.train])
    val_set = (x[split.test], y[split.test])
    net, history = train(net, train_set, val_set, run.training, keep_best)
    save_checkpoint(net, out / "model.rdxc")
    if best["state"] is not None:
        best_net = build_network(net.config)
        best_net.load_state(best["state"])
        save_checkpoint(best_net, out / "model.best.rdxc")
    else:
        save_checkpoint(net, out / "model.best.rdxc")
    write_metrics(history, out / "metrics.csv")

    final = history[-1]
    top = best_epoch(history)
    print(f"final epoch {final.epoch}: train_acc {final.train_accuracy:.4f} "
          f"val_acc {final.val_accuracy if final.val_accuracy is not None else float('nan'):.4f}")
    if top is not None:
        print(f"best epoch {top.epoch}: val_acc {top.val_accuracy:.4f}")
    return EXIT_OK


def _open_checkpoint(path):
    if not path:
        raise UsageError("--checkpoint is required")
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (CheckpointError, OSError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}")


def _prep_from_net(net):
    meta = net.config.preprocess or {}
    clahe = ClaheParams(**meta["clahe"]) if "clahe" in meta else ClaheParams()
    return clahe, int(meta.get("input_size", net.config.input_shape[1]))


def cmd_eval(args) -> int:
    net = _open_checkpoint(args.checkpoint)
    run = resolve_config(args)
    manifest = _require_manifest(run)
    indices = list(range(len(manifest)))
    if args.split:
        try:
            split = read_split(args.split)
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc))
        indices = sorted(split.train if args.partition == "train" else split.test)
        if any(i >= len(manifest) for i in indices):
            raise UsageError("split references indices beyond the manifest")
    if not indices:
        raise UsageError("nothing to evaluate")
    clahe, size = _prep_from_net(net)
    samples = [manifest.entries[i] for i in indices]
    x = np.stack([preprocess(read_image(manifest.resolve(s)), clahe, size) for s in samples])
    y = np.array([s.label_index for s in samples])
    probs = net.predict(x)
    acc, confusion = evaluate(net, x, y)
    pred = np.argmax(probs, axis=1)

    out = Path(args.out or run.out)
    os.makedirs(out, exist_ok=True)
    with open(out / "eval.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "predicted", "p_healthy", "p_dr_signs"])
        for s, p, pr in zip(samples, pred, probs):
            w.writerow([s.path, s.label, LABELS[p], _fmt(pr[0]), _fmt(pr[1])])
    print(f"accuracy: {acc:.4f}")
    print("confusion (rows true, cols predicted; healthy, dr_signs):")
    for row in confusion:
        print(" ".join(f"{v:6d}" for v in row))
    if args.min_accuracy is not None and acc < args.min_accuracy:
        return EXIT_CHECK
    return EXIT_OK


def cmd_predict(args) -> int:
    net = _open_checkpoint(args.checkpoint)
    if not args.image:
        raise UsageError("--image is required")
    try:
        img = read_image(args.image)
    except (OSError, ImageFormatError) as exc:
        raise UsageError(f"cannot read image {args.image}: {exc}")
    clahe, size = _prep_from_net(net)
    probs = net.forward(preprocess(img, clahe, size)[None], "inference")[0]
    label = LABELS[int(np.argmax(probs))]
    print(f"{label} healthy={probs[0]:.6f} dr_signs={probs[1]:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}")
    config = preset(args.preset, args.input_size)
    report = grad_check(config, tolerance=args.tolerance, seed=args.seed or 0)
    width = max(len(k) for k in report.max_rel_error)
    for key, err in report.max_rel_error.items():
        status = "ok" if err < report.tolerance else "FAIL"
        print(f"{key:<{width}}  rel {err:.3e}  abs {report.max_abs_error[key]:.3e}  {status}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: worst relative error {report.worst:.3e} (tolerance {report.tolerance:g})")
    return EXIT_OK if report.passed else EXIT_CHECK


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retina-dx", description="Retina crop, CLAHE enhancement and CNN classification of fundus images.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--manifest")
        p.add_argument("--root", help="directory manifest paths are relative to")
        p.add_argument("--preset", choices=PRESETS)
        p.add_argument("--input-size", type=int, dest="input_size")
        p.add_argument("--clip-limit", type=float, dest="clip_limit")
        p.add_argument("--tiles", type=int)

    p = sub.add_parser("preprocess", help="crop, enhance and resize every manifest image")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="split, train, write checkpoints and metrics.csv")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--momentum", type=float)
    p.add_argument("--drop-factor", type=float, dest="drop_factor")
    p.add_argument("--drop-period", type=int, dest="drop_period")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", help="split.csv written by train")
    p.add_argument("--partition", choices=("train", "test"), default="test")
    p.add_argument("--min-accuracy", type=float, dest="min_accuracy")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of full-network gradients")
    p.add_argument("--preset", choices=PRESETS, default="table1")
    p.add_argument("--input-size", type=int, dest="input_size", default=10)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ImageFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
