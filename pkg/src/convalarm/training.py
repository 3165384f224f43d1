"""Joint end-to-end training of target and alarm networks.

The loss is ``mean_i[(1 - y_i) * per_sample_mse_i] + gamma * bce(y, yhat)``:
anomalous samples (y = 1) contribute nothing to the reconstruction term (the
mean still divides by the full batch size, so gamma's meaning does not drift
with batch composition), while the classification term backpropagates through
the stacked activations into the encoder.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .data import DataError, Dataset
from .networks import ModelBundle, alarm_forward, stack_activations
from .tensor import Tape, Tensor, backward

__all__ = [
    "TrainConfig",
    "SplitDataset",
    "EpochLog",
    "FitResult",
    "DivergenceError",
    "Adam",
    "combined_loss",
    "fit",
    "stratified_split",
    "stratified_subset",
    "make_one_vs_all",
    "training_log_csv",
]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    early_stop_patience: int = 10
    pos_weight: float = 1.0   # optional BCE weight for the anomaly class
    kl_weight: float = 0.001  # only used by variational targets

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "learning_rate": self.learning_rate,
                "batch_size": self.batch_size, "epochs": self.epochs,
                "seed": self.seed,
                "early_stop_patience": self.early_stop_patience,
                "pos_weight": self.pos_weight, "kl_weight": self.kl_weight}

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass
class SplitDataset:
    """Disjoint train/validation/test index lists over one dataset."""

    dataset: Dataset
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    ratios: tuple[float, float, float]
    seed: int


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float  # nan when the validation split is single-class
    wall_ms: float


@dataclass
class FitResult:
    history: list[EpochLog]
    best_epoch: int
    best_val_loss: float


# ---------------------------------------------------------------------------
# loss


def _check_labels(y: np.ndarray):
    bad = ~np.isin(y, (0, 1))
    if bad.any():
        raise ValueError(f"labels must be 0 or 1; found "
                         f"{np.unique(np.asarray(y)[bad])}")


def combined_loss(x: Tensor, xhat: Tensor, y, yhat: Tensor, gamma: float,
                  pos_weight: float = 1.0) -> Tensor:
    """Anomaly-masked reconstruction error plus weighted classification error.

    ``y`` is a constant 0/1 vector (1 = anomaly).  The reconstruction term of
    every anomalous sample is exactly zero, including its gradient.
    """
    yd = np.asarray(y.data if isinstance(y, Tensor) else y)
    _check_labels(yd)
    if yhat.shape != yd.shape:
        raise T.ShapeError(f"labels {yd.shape} and predictions {yhat.shape} differ")
    mask = Tensor((1.0 - yd).astype(xhat.dtype))
    recon = T.mean_all(T.mul(T.per_sample_mse(x, xhat), mask))
    if pos_weight == 1.0:
        clf = T.bce(Tensor(yd.astype(yhat.dtype)), yhat)
    else:
        p = T.clamp(yhat, T.BCE_EPS, 1.0 - T.BCE_EPS)
        yt = Tensor(yd.astype(yhat.dtype))
        one = Tensor(np.asarray(1.0, dtype=yhat.dtype))
        w = Tensor(np.where(yd == 1, pos_weight, 1.0).astype(yhat.dtype))
        term = T.add(T.mul(yt, T.log(p)), T.mul(T.sub(one, yt), T.log(T.sub(one, p))))
        clf = T.neg(T.mean_all(T.mul(w, term)))
    return T.add(recon, T.mul(clf, gamma))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment optimizer with bias correction.

    Defaults beta1 = 0.9, beta2 = 0.999, eps = 1e-8.  ``step`` consumes the
    gradients currently stored on the parameters; every parameter must have
    one.
    """

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient; "
                                 f"run backward before step")
            g = p.grad
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# splits and relabeling


def _normalize_ratios(ratios) -> tuple[float, float, float]:
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or (r < 0).any() or r.sum() <= 0:
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    r = r / r.sum()
    return float(r[0]), float(r[1]), float(r[2])


def stratified_split(dataset: Dataset, ratios=(8, 1, 1), seed: int = 0) -> SplitDataset:
    """Per-class shuffled partition into train/validation/test.

    Class proportions are preserved within rounding (at most one sample per
    class per split); one-class datasets are allowed.
    """
    if len(dataset) == 0:
        raise DataError(f"{dataset.name}: cannot split an empty dataset")
    if dataset.labels is None:
        raise DataError(f"{dataset.name}: stratified split needs labels")
    r_train, r_val, r_test = _normalize_ratios(ratios)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for cls in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == cls)
        perm = rng.permutation(idx)
        n = len(perm)
        n_val = int(np.round(n * r_val))
        n_test = int(np.round(n * r_test))
        n_train = n - n_val - n_test
        if n_train < 0:
            n_train, n_val, n_test = n, 0, 0
        train.append(perm[:n_train])
        val.append(perm[n_train:n_train + n_val])
        test.append(perm[n_train + n_val:])
    return SplitDataset(
        dataset=dataset,
        train_idx=np.sort(np.concatenate(train)).astype(np.int64),
        val_idx=np.sort(np.concatenate(val)).astype(np.int64),
        test_idx=np.sort(np.concatenate(test)).astype(np.int64),
        ratios=(r_train, r_val, r_test), seed=seed)


def stratified_subset(dataset: Dataset, size: int, seed: int = 0) -> Dataset:
    """Class-proportional random subset of ``size`` rows (for desk-scale runs)."""
    if dataset.labels is None:
        raise DataError(f"{dataset.name}: stratified subset needs labels")
    if size >= len(dataset):
        return dataset
    rng = np.random.default_rng(seed)
    classes = np.unique(dataset.labels)
    counts = {c: int(np.round(size * np.mean(dataset.labels == c)))
              for c in classes}
    drift = size - sum(counts.values())
    counts[classes[np.argmax([np.sum(dataset.labels == c) for c in classes])]] += drift
    picked = []
    for cls in classes:
        idx = np.flatnonzero(dataset.labels == cls)
        take = min(max(counts[cls], 0), len(idx))
        picked.append(rng.permutation(idx)[:take])
    keep = np.sort(np.concatenate(picked))
    return replace(dataset, features=dataset.features[keep],
                   labels=dataset.labels[keep])


def make_one_vs_all(dataset: Dataset, normal_class: int) -> Dataset:
    """Binary relabel: 0 iff the original label equals ``normal_class``."""
    if dataset.labels is None:
        raise DataError(f"{dataset.name}: one-vs-all needs labels")
    if normal_class not in dataset.labels:
        raise DataError(f"{dataset.name}: class {normal_class} not present")
    labels = (dataset.labels != normal_class).astype(np.int64)
    return replace(dataset, labels=labels,
                   name=f"{dataset.name}[normal={normal_class}]")


# ---------------------------------------------------------------------------
# training loop


def _batch_loss(bundle: ModelBundle, x: np.ndarray, y: np.ndarray,
                cfg: TrainConfig, rng=None) -> Tensor:
    xt = Tensor(x)
    xhat, acts = bundle.forward_with_taps(xt, rng=rng)
    yhat = T.reshape(alarm_forward(bundle.alarm, stack_activations(acts)),
                     (len(x),))
    loss = combined_loss(xt, xhat, y, yhat, cfg.gamma, pos_weight=cfg.pos_weight)
    if bundle.last_kl is not None:
        loss = T.add(loss, T.mul(bundle.last_kl, cfg.kl_weight))
    return loss


def _dataset_loss(bundle: ModelBundle, feats, labels, cfg, batch: int = 256) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(feats), batch):
        xb = feats[lo:lo + batch]
        lb = labels[lo:lo + batch]
        total += _batch_loss(bundle, xb, lb, cfg).item() * len(xb)
        count += len(xb)
    return total / max(count, 1)


def _alarm_scores(bundle: ModelBundle, feats, batch: int = 256) -> np.ndarray:
    from .networks import score

    out = []
    for lo in range(0, len(feats), batch):
        out.append(score(bundle, Tensor(feats[lo:lo + batch]), "alarm").data)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def fit(bundle: ModelBundle, data: SplitDataset, cfg: TrainConfig) -> FitResult:
    """Mini-batch training of the combined loss with early stopping.

    Batches are reshuffled each epoch by a generator seeded from
    ``cfg.seed``, so runs are bit-reproducible.  The parameters of the best
    validation epoch are restored before returning.  A non-finite loss
    aborts with the offending epoch and batch.
    """
    from .evaluation import roc_auc, ScoreSet

    ds = data.dataset
    if len(data.train_idx) == 0:
        raise DataError(f"{ds.name}: empty train split")
    if ds.labels is None:
        raise DataError(f"{ds.name}: training needs binary labels")
    _check_labels(ds.labels)

    rng = np.random.default_rng(cfg.seed)
    adam = Adam(bundle.parameters(), lr=cfg.learning_rate)
    feats, labels = ds.features, ds.labels
    val_x, val_y = feats[data.val_idx], labels[data.val_idx]
    sample_rng = rng if bundle.target_cfg.variational else None

    history: list[EpochLog] = []
    best_val = np.inf
    best_epoch = 0
    best_params: dict[str, np.ndarray] = {}
    patience = cfg.early_stop_patience
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(data.train_idx)
        total, seen = 0.0, 0
        for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            adam.zero_grad()
            with Tape() as tape:
                loss = _batch_loss(bundle, feats[idx], labels[idx], cfg,
                                   rng=sample_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            backward(loss, tape)
            adam.step()
            total += value * len(idx)
            seen += len(idx)

        val_loss = (_dataset_loss(bundle, val_x, val_y, cfg)
                    if len(val_x) else float("nan"))
        val_auc = float("nan")
        if len(val_x) and len(np.unique(val_y)) == 2:
            s = _alarm_scores(bundle, val_x)
            val_auc = roc_auc(ScoreSet(scores=s, labels=val_y))
        history.append(EpochLog(
            epoch=epoch, train_loss=total / max(seen, 1), val_loss=val_loss,
            val_auc=val_auc, wall_ms=(time.perf_counter() - t0) * 1000.0))

        if len(val_x) and val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {n: p.data.copy() for n, p in bundle.params.items()}
            patience = cfg.early_stop_patience
        elif len(val_x):
            patience -= 1
            if patience <= 0:
                break

    if best_params:
        for name, arr in best_params.items():
            bundle.params[name].data = arr
    else:
        best_epoch = len(history)
        best_val = history[-1].val_loss if history else float("nan")
    return FitResult(history=history, best_epoch=best_epoch,
                     best_val_loss=best_val)


def training_log_csv(history: list[EpochLog]) -> str:
    """Render the per-epoch log as CSV: epoch, losses, val AUC, wall time."""
    lines = ["epoch,train_loss,val_loss,val_auc,wall_ms"]
    for row in history:
        lines.append(f"{row.epoch},{row.train_loss:.8g},{row.val_loss:.8g},"
                     f"{row.val_auc:.6f},{row.wall_ms:.1f}")
    return "\n".join(lines) + "\n"
