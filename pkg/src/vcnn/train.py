"""RMSprop, dataset splitting, the epoch loop and evaluation."""

import csv
import io
import logging
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import layers as L
from . import model as M
from .errors import ArgumentError, ContractError, NumericError
from .niftio import AGE_CLASSES, ManifestRow, preprocess, read_nifti, resolve

log = logging.getLogger(__name__)


SPLIT_MODES = ("scan", "subject", "manifest", "none")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    rmsprop_rho: float = 0.9
    rmsprop_epsilon: float = 1e-7
    batch_size: int = 4
    epochs: int = 14
    seed: int = 0
    split_fraction: float = 0.8
    split_mode: str = "scan"
    bn_recalibrate: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ArgumentError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 < self.rmsprop_rho < 1:
            raise ArgumentError(f"rmsprop_rho must be in (0, 1), got {self.rmsprop_rho}")
        if not 0 < self.split_fraction < 1:
            raise ArgumentError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ArgumentError("batch_size and epochs must be positive")
        if self.split_mode not in SPLIT_MODES:
            raise ArgumentError(f"split_mode must be one of {', '.join(SPLIT_MODES)}, got {self.split_mode!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    batch_loss: float = float("nan")
    batch_accuracy: float = float("nan")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    ids: Optional[List[str]] = None

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        ids = None if self.ids is None else [self.ids[i] for i in idx]
        return Dataset(self.x[idx], self.y[idx], ids)


# ---------------------------------------------------------------- optimizer


def rmsprop_init(params: Dict) -> Dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def rmsprop_step(params: Dict, grads: Dict, state: Dict, cfg: TrainConfig):
    """One in-place RMSprop update over matching ``{key: array}`` mappings:

    ``s <- rho * s + (1 - rho) * g**2`` then ``p <- p - lr * g / (sqrt(s) + eps)``.
    """
    if params.keys() != grads.keys() or params.keys() != state.keys():
        raise ContractError("params, grads and optimizer state cover different keys")
    rho, lr, eps = cfg.rmsprop_rho, cfg.learning_rate, cfg.rmsprop_epsilon
    for k, p in params.items():
        g, s = grads[k], state[k]
        if p.shape != g.shape or p.shape != s.shape:
            raise ContractError(f"{k}: param {p.shape}, grad {np.shape(g)}, state {s.shape}")
        s *= rho
        s += (1 - rho) * np.square(g)
        p -= lr * g / (np.sqrt(s) + eps)
    return params, state


# ---------------------------------------------------------------- splitting


def split_dataset(rows: Sequence[ManifestRow], cfg: TrainConfig):
    """Seeded train/validation split of manifest rows.

    Scan mode shuffles rows; subject mode shuffles subjects so every scan of a
    subject lands on the same side. The training side gets
    ``floor(split_fraction * n)`` scans (subject mode: the first subjects whose
    scans reach that count). ``manifest`` follows each row's ``split`` column
    and ``none`` trains on every row with an empty validation side.
    """
    rows = list(rows)
    if not rows:
        raise ArgumentError("cannot split an empty manifest")
    if cfg.split_mode == "none":
        return rows, []
    if cfg.split_mode == "manifest":
        unset = [r.path for r in rows if r.split is None]
        if unset:
            raise ArgumentError(f"{len(unset)} manifest row(s) lack a split, first {unset[0]!r}")
        train = [r for r in rows if r.split == "train"]
        val = [r for r in rows if r.split == "val"]
    else:
        train, val = _random_split(rows, cfg)
    for side, part in (("training", train), ("validation", val)):
        absent = [c for c in AGE_CLASSES if not any(r.age_class == c for r in part)]
        if absent:
            warnings.warn(f"{side} split has no scans of class(es) {', '.join(absent)}", stacklevel=2)
    return train, val


def _random_split(rows, cfg):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFFFFFFFFFF, 1]))
    target = int(np.floor(cfg.split_fraction * len(rows)))
    if cfg.split_mode == "scan":
        if len(rows) < 2:
            raise ArgumentError("need at least two scans to split")
        target = min(max(target, 1), len(rows) - 1)
        perm = rng.permutation(len(rows))
        train_idx = sorted(perm[:target])
        val_idx = sorted(perm[target:])
    else:
        subjects = sorted({r.subject_id for r in rows})
        if len(subjects) < 2:
            raise ArgumentError("need at least two subjects for a subject-level split")
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        chosen, count = set(), 0
        for s in order[:-1]:
            if count >= max(target, 1):
                break
            chosen.add(s)
            count += sum(r.subject_id == s for r in rows)
        train_idx = [i for i, r in enumerate(rows) if r.subject_id in chosen]
        val_idx = [i for i, r in enumerate(rows) if r.subject_id not in chosen]
    return [rows[i] for i in train_idx], [rows[i] for i in val_idx]


def dataset_from_rows(rows: Sequence[ManifestRow], m: M.ModelSpec, manifest_path=None) -> Dataset:
    """Read, normalise and resize every scan to the model's input size."""
    size = m.input_shape[0]
    xs, ys, ids = [], [], []
    for r in rows:
        path = r.path if manifest_path is None else resolve(r, manifest_path)
        v = preprocess(read_nifti(path, r.modality, r.subject_id, r.age_class), size)
        xs.append(M.volume_to_input(m, v.voxels))
        ys.append(r.label)
        ids.append(r.path)
    return Dataset(np.stack(xs), np.asarray(ys, dtype=np.int64), ids)


# ---------------------------------------------------------------- training


def _flat_params(m: M.ModelSpec):
    return {(ln, pn): m.params[ln][pn] for ln, pn in M.trainable_items(m)}


def recalibrate_batchnorm(m: M.ModelSpec, data: Dataset, batch_size=8):
    """Replace every batch-norm layer's moving statistics with the mean and
    variance of its eval-mode input over ``data``.

    Layers are done in order, each with everything upstream already
    recalibrated, so the statistics match what eval mode actually feeds them.
    """
    for spec in m.layers:
        if spec.kind != "batchnorm":
            continue
        count, s1, s2 = 0, 0.0, 0.0
        for start in range(0, len(data), batch_size):
            x, _ = M.forward(m, data.x[start:start + batch_size], mode="eval", stop_before=spec.name)
            x = x.reshape(-1, x.shape[-1]).astype(np.float64)
            count += x.shape[0]
            s1 = s1 + x.sum(axis=0)
            s2 = s2 + np.square(x).sum(axis=0)
        mean = s1 / count
        p = m.params[spec.name]
        p["moving_mean"][...] = mean
        p["moving_var"][...] = np.maximum(s2 / count - mean ** 2, 0.0)


def evaluate(m: M.ModelSpec, data: Dataset, batch_size=8) -> Tuple[float, float, np.ndarray]:
    """Eval-mode loss, accuracy and predicted classes (in dataset order)."""
    if len(data) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    preds = []
    for start in range(0, len(data), batch_size):
        xb = data.x[start:start + batch_size]
        yb = data.y[start:start + batch_size]
        logits, _ = M.forward(m, xb, mode="eval")
        loss, _ = L.softmax_cross_entropy(logits.astype(np.float64), yb)
        total_loss += loss * len(yb)
        preds.append(np.argmax(logits, axis=1))
    preds = np.concatenate(preds)
    return total_loss / len(data), float(np.mean(preds == data.y)), preds


def train(m: M.ModelSpec, train_set: Dataset, val_set: Optional[Dataset], cfg: TrainConfig,
          callbacks: Sequence[Callable] = ()):
    """Train a copy of ``m``; returns ``(trained_model, [EpochRecord, ...])``.

    ``train_loss``/``train_accuracy`` and the validation figures come from
    eval-mode passes after the epoch's updates; ``batch_loss``/``batch_accuracy``
    average the train-mode batches (dropout on, before each update). With
    ``cfg.bn_recalibrate`` the batch-norm moving statistics are re-estimated
    over the training set first. Each callback is called as ``cb(record, model)``.
    """
    if len(train_set) == 0:
        raise ArgumentError("empty training set")
    if not m.params:
        raise ArgumentError("model has no parameters; call init_params first")
    m = replace(m, params=M.clone_params(m.params))
    params = _flat_params(m)
    state = rmsprop_init(params)
    seeds = np.random.SeedSequence([cfg.seed & 0xFFFFFFFFFFFFFFFF, 2]).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])

    n = len(train_set)
    records = []
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = train_set.x[idx], train_set.y[idx]
            logits, caches = M.forward(m, xb, mode="train", rng=dropout_rng)
            loss, grad = L.softmax_cross_entropy(logits.astype(np.float64), yb)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            grads = M.backward(m, grad.astype(logits.dtype), caches)
            flat = {(ln, pn): grads[ln][pn] for ln, pn in params}
            rmsprop_step(params, flat, state, cfg)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        if cfg.bn_recalibrate:
            recalibrate_batchnorm(m, train_set, cfg.batch_size)
        train_loss, train_acc, _ = evaluate(m, train_set, cfg.batch_size)
        if val_set is not None and len(val_set):
            val_loss, val_acc, _ = evaluate(m, val_set, cfg.batch_size)
        else:
            val_loss = val_acc = float("nan")
        if not np.isfinite(train_loss):
            raise NumericError(f"non-finite training-set loss after epoch {epoch}")
        rec = EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc, loss_sum / n, correct / n)
        log.info("epoch %d: loss %.4f acc %.3f val_loss %.4f val_acc %.3f (batch loss %.4f)",
                 epoch, rec.train_loss, rec.train_accuracy, rec.val_loss, rec.val_accuracy, rec.batch_loss)
        records.append(rec)
        for cb in callbacks:
            cb(rec, m)
    return m, records


def epochs_csv(records: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "batch_loss", "batch_acc"])
    for r in records:
        w.writerow([r.epoch] + [repr(float(v)) for v in (r.train_loss, r.train_accuracy, r.val_loss,
                                                          r.val_accuracy, r.batch_loss, r.batch_accuracy)])
    return buf.getvalue()


def smoothed(values, window=5):
    """Trailing moving average over ``window`` points (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")
