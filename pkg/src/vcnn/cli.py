"""Command-line entry point: ``vcnn {inspect,gen-phantoms,train,eval,predict}``.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numeric
failure (non-finite loss). Every output file is written to a temporary name
and renamed into place, so a failing command leaves no partial files behind.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import _accel
from . import layers as L
from . import metrics as MT
from . import model as M
from . import train as T
from ._fs import atomic_write_bytes
from .errors import ArgumentError, NumericError
from .niftio import (AGE_CLASSES, DATATYPE_CODES, ManifestError, ManifestRow, NiftiError,
                     gen_phantom, load_manifest, preprocess, read_nifti,
                     resolve, write_manifest, write_nifti)

log = logging.getLogger("vcnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MAX_PER_CLASS = 100000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route those through our codes
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _count(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _yes_no(text):
    t = str(text).strip().lower()
    if t in ("1", "yes", "true", "on"):
        return True
    if t in ("0", "no", "false", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected yes or no, got {text!r}")


# ---------------------------------------------------------------- parser


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value file supplying defaults for this command")
    common.add_argument("--threads", type=_positive_int, help="cap on numba worker threads")
    common.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])

    p = _Parser(prog="vcnn", description="Age-cohort classification of pediatric brain MRI.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("inspect", parents=[common], help="print a model's layer table")
    s.add_argument("model", choices=sorted(M.BUILDERS))
    s.add_argument("--input-size", type=_positive_int)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("gen-phantoms", parents=[common], help="write synthetic NIfTI phantoms and a manifest")
    s.add_argument("--out")
    s.add_argument("--count", type=_count, default=10, help="phantoms per age class")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=_positive_int, default=80)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--datatype", choices=sorted(DATATYPE_CODES), default="float32")
    s.add_argument("--gzip", type=_yes_no, default=False)
    s.set_defaults(func=cmd_gen_phantoms)

    s = sub.add_parser("train", parents=[common], help="train a model from a manifest")
    s.add_argument("--manifest")
    s.add_argument("--out")
    _model_flags(s, default="cnn3d")
    d = T.TrainConfig()
    s.add_argument("--epochs", type=int, default=d.epochs)
    s.add_argument("--batch-size", type=int, default=d.batch_size)
    s.add_argument("--learning-rate", type=float, default=d.learning_rate)
    s.add_argument("--rho", type=float, default=d.rmsprop_rho)
    s.add_argument("--epsilon", type=float, default=d.rmsprop_epsilon)
    s.add_argument("--seed", type=int, default=d.seed)
    s.add_argument("--split-fraction", type=float, default=d.split_fraction)
    s.add_argument("--split-mode", choices=("auto",) + T.SPLIT_MODES, default="auto",
                   help="auto: the manifest's split column when present, else scan")
    s.add_argument("--bn-recalibrate", type=_yes_no, default=d.bn_recalibrate)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on a manifest")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--out", help="directory for metrics.csv and confusion.txt")
    s.add_argument("--batch-size", type=_positive_int, default=8)
    _model_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", parents=[common], help="classify one NIfTI volume")
    s.add_argument("--checkpoint")
    s.add_argument("--input")
    s.add_argument("--modality", default="T1")
    _model_flags(s)
    s.set_defaults(func=cmd_predict)
    return p


def _model_flags(s, default=None):
    s.add_argument("--model", choices=sorted(M.BUILDERS), default=default)
    s.add_argument("--input-size", type=_positive_int)


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def read_config(path):
    """Flat ``key = value`` lines; ``#`` starts a comment, dashes and
    underscores in keys are interchangeable."""
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sub = _subparsers(parser)[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in read_config(args.config).items():
        action = actions.get(key)
        if action is None or not action.option_strings:
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        try:
            v = action.type(value) if action.type else value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{args.config}: bad value for {key}: {exc}") from None
        if action.choices is not None and v not in action.choices:
            raise UsageError(f"{args.config}: {key} must be one of {', '.join(map(str, action.choices))}")
        defaults[key] = v
    # explicit flags still win: they are parsed on top of the new defaults
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _need(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"missing required {flags}")


# ---------------------------------------------------------------- commands


def _build(name, input_size):
    m = M.build_model(name, input_size)
    try:
        M.infer_shapes(m)
    except ValueError as exc:
        raise UsageError(f"--input-size {input_size} does not fit {name}: {exc}") from None
    return m


def cmd_inspect(args):
    m = _build(args.model, args.input_size)
    per_layer, trainable, non_trainable = M.count_params(m)
    shapes = dict(M.infer_shapes(m))
    rows = [(spec.name, spec.kind, "(None, " + ", ".join(map(str, shapes[spec.name])) + ")", n)
            for spec, (_, n) in zip(m.layers, per_layer)]
    w0 = max(len("Layer"), *(len(r[0]) for r in rows)) + 2
    w1 = max(len("Type"), *(len(r[1]) for r in rows)) + 2
    w2 = max(len("Output shape"), *(len(r[2]) for r in rows)) + 2
    print(f"Model: {m.model_id}  input {tuple(m.input_shape)}")
    print(f"{'Layer':<{w0}}{'Type':<{w1}}{'Output shape':<{w2}}{'Param #':>12}")
    for name, kind, shape, n in rows:
        print(f"{name:<{w0}}{kind:<{w1}}{shape:<{w2}}{n:>12,}")
    print(f"Total params: {trainable + non_trainable:,}")
    print(f"Trainable params: {trainable:,}")
    print(f"Non-trainable params: {non_trainable:,}")
    return EXIT_OK


def _write_phantom(path, v, datatype):
    if datatype == "float32":
        write_nifti(path, v.voxels, v.voxel_dims_mm, datatype)
        return
    # integer types store a rescaled copy and let scl_slope/scl_inter map it back
    info = np.iinfo(np.dtype(datatype))
    lo, hi = float(v.voxels.min()), float(v.voxels.max())
    slope = (hi - lo) / (int(info.max) - int(info.min)) if hi > lo else 1.0
    q = np.clip(np.round((v.voxels - lo) / slope) + info.min, info.min, info.max)
    write_nifti(path, q, v.voxel_dims_mm, datatype, scl_slope=slope, scl_inter=lo - info.min * slope)


def cmd_gen_phantoms(args):
    _need(args, "out")
    if args.count >= MAX_PER_CLASS:
        raise UsageError(f"--count must be below {MAX_PER_CLASS}")
    os.makedirs(args.out, exist_ok=True)
    ext = ".nii.gz" if args.gzip else ".nii"
    rows = []
    for cls in AGE_CLASSES:
        for i in range(args.count):
            v = gen_phantom(cls, args.seed * MAX_PER_CLASS + i, size=args.size, noise=args.noise)
            name = f"{cls}_{i:03d}{ext}"
            _write_phantom(os.path.join(args.out, name), v, args.datatype)
            rows.append(ManifestRow(name, v.subject_id, v.modality, cls))
    write_manifest(rows, os.path.join(args.out, "manifest.csv"))
    log.info("wrote %d phantoms to %s", len(rows), args.out)
    return EXIT_OK


def _preflight(rows, manifest):
    """Parse every referenced header before any work starts."""
    for r in rows:
        path = resolve(r, manifest)
        if path.endswith(".hdr"):
            path = path[:-4] + ".img"
        if not os.path.isfile(path):
            raise FileNotFoundError(f"{r.path}: no such file (listed in {manifest})")
        read_nifti(resolve(r, manifest), r.modality, r.subject_id, r.age_class)


def _write_reports(out, cm):
    mets = MT.per_class(cm)
    report = MT.text_report(cm, mets)
    atomic_write_bytes(os.path.join(out, "metrics.csv"), MT.metrics_csv(mets).encode())
    atomic_write_bytes(os.path.join(out, "confusion.txt"), report.encode())
    return report


def cmd_train(args):
    _need(args, "manifest", "out")
    auto = args.split_mode == "auto"
    cfg = T.TrainConfig(
        learning_rate=args.learning_rate, rmsprop_rho=args.rho, rmsprop_epsilon=args.epsilon,
        batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
        split_fraction=args.split_fraction, split_mode="scan" if auto else args.split_mode,
        bn_recalibrate=args.bn_recalibrate,
    )
    m = _build(args.model, args.input_size)

    rows = load_manifest(args.manifest)
    if auto and any(r.split for r in rows):
        cfg = replace(cfg, split_mode="manifest")
    _preflight(rows, args.manifest)

    train_rows, val_rows = T.split_dataset(rows, cfg)
    log.info("%d training / %d validation scans", len(train_rows), len(val_rows))
    train_set = T.dataset_from_rows(train_rows, m, args.manifest)
    val_set = T.dataset_from_rows(val_rows, m, args.manifest) if val_rows else None
    m = M.init_params(m, cfg.seed)
    trained, records = T.train(m, train_set, val_set, cfg)

    # reports describe validation when there is one, the training set otherwise
    scored = val_set if val_set is not None else train_set
    _, _, preds = T.evaluate(trained, scored, cfg.batch_size)
    cm = MT.confusion(scored.y, preds, class_names=trained.class_names)

    os.makedirs(args.out, exist_ok=True)
    M.save_checkpoint(trained, os.path.join(args.out, "model.vcnn"), epoch=cfg.epochs, seed=cfg.seed)
    atomic_write_bytes(os.path.join(args.out, "epochs.csv"), T.epochs_csv(records).encode())
    print(_write_reports(args.out, cm), end="")
    return EXIT_OK


def _load(args):
    expected = None
    if args.model is not None:
        expected = _build(args.model, args.input_size)
    elif args.input_size is not None:
        raise UsageError("--input-size needs --model")
    return M.load_checkpoint(args.checkpoint, expected)


def cmd_eval(args):
    _need(args, "checkpoint", "manifest")
    m = _load(args)
    rows = load_manifest(args.manifest)
    _preflight(rows, args.manifest)
    data = T.dataset_from_rows(rows, m, args.manifest)
    _, _, preds = T.evaluate(m, data, args.batch_size)
    cm = MT.confusion(data.y, preds, class_names=m.class_names)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report = _write_reports(args.out, cm)
    else:
        report = MT.text_report(cm)
    print(report, end="")
    return EXIT_OK


def cmd_predict(args):
    _need(args, "checkpoint", "input")
    m = _load(args)
    v = preprocess(read_nifti(args.input, args.modality), m.input_shape[0])
    logits, _ = M.forward(m, M.volume_to_input(m, v.voxels)[None], mode="eval")
    probs = L.softmax(logits.astype(np.float64))[0]
    if not np.all(np.isfinite(probs)):
        raise NumericError(f"non-finite class probabilities for {args.input}")
    best = m.class_names[int(np.argmax(probs))]
    print(best + "\t" + " ".join(f"{n}={p:.6f}" for n, p in zip(m.class_names, probs)))
    return EXIT_OK


# ---------------------------------------------------------------- main


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s")
    _accel.set_threads(args.threads)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except (UsageError, ArgumentError) as exc:
        print(f"vcnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"vcnn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NiftiError, ManifestError, M.CheckpointError, OSError, ValueError) as exc:
        print(f"vcnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
