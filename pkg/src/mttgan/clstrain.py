"""VGG-19 / AlexNet screening classifiers trained from scratch."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ._rng import derive_rng, derive_torch_generator
from .dataset import DatasetError, DatasetManifest, ImageRecord, Label, check_leakage
from .nets import NetworkSpec, ShapeError, WeightSet, classifier_spec, forward, init_weights, load_weights, save_weights
from .stats import ConfusionMatrix

log = logging.getLogger(__name__)

CLASS_ORDERS = {
    2: (Label.COVID, Label.NORMAL),
    4: (Label.COVID, Label.NORMAL, Label.BACTERIAL, Label.VIRAL),
}


@dataclass(frozen=True)
class ClassifierConfig:
    arch: str = "vgg19"
    num_classes: int = 2
    epochs: int = 50
    lr: float = 1e-5
    val_fraction: float = 0.3
    batch_size: int = 32
    seed: int = 0
    resolution: int = 128

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie strictly between 0 and 1")
        if self.num_classes not in CLASS_ORDERS:
            raise ValueError("num_classes must be 2 or 4")

    @property
    def class_order(self) -> tuple[Label, ...]:
        return CLASS_ORDERS[self.num_classes]


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainedClassifier:
    weights: WeightSet
    spec: NetworkSpec
    class_order: tuple[Label, ...]
    train_history: list[EpochStats] = field(default_factory=list)
    train_ids: tuple[str, ...] = ()
    val_ids: tuple[str, ...] = ()


def stratified_split(manifest: DatasetManifest, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Per-class validation split; indices refer to manifest order."""
    train_idx, val_idx = [], []
    for label in Label:
        idx = [i for i, r in enumerate(manifest.records) if r.label is label]
        if not idx:
            continue
        n_val = int(round(val_fraction * len(idx)))
        perm = derive_rng(seed, "val-split", label.value).permutation(len(idx))
        chosen = {idx[j] for j in perm[:n_val]}
        val_idx.extend(i for i in idx if i in chosen)
        train_idx.extend(i for i in idx if i not in chosen)
    return sorted(train_idx), sorted(val_idx)


def _tensors(records: Sequence[ImageRecord], resolution: int) -> torch.Tensor:
    pixels = np.stack([r.pixels for r in records]).astype(np.float32)
    if pixels.shape[1:] != (resolution, resolution):
        raise ShapeError(f"classifier expects {resolution}x{resolution} images, got {pixels.shape[1:]}")
    return torch.from_numpy(pixels).unsqueeze(-1)


def _evaluate_loss(weights, spec, x, y, batch_size) -> tuple[float, float]:
    total, correct = 0.0, 0
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            logits = forward(weights, spec, x[i:i + batch_size], "infer", logits=True)
            total += float(F.cross_entropy(logits, y[i:i + batch_size], reduction="sum"))
            correct += int((logits.argmax(dim=1) == y[i:i + batch_size]).sum())
    n = max(x.shape[0], 1)
    return total / n, correct / n


def train_classifier(train_set: DatasetManifest, cfg: ClassifierConfig,
                     exclude: DatasetManifest | Iterable[str] | None = None) -> TrainedClassifier:
    """Crossentropy training for exactly ``cfg.epochs`` epochs; last-epoch weights are kept.

    ``exclude`` (the test split) is checked for leakage before training.
    """
    order = cfg.class_order
    present = set(train_set.counts_by_label)
    if present != set(order):
        raise DatasetError(f"training labels {sorted(l.value for l in present)} do not match "
                           f"{[l.value for l in order]}")
    if exclude is not None:
        check_leakage(train_set, exclude)
    spec = classifier_spec(cfg.arch, cfg.num_classes, cfg.resolution)
    weights = init_weights(spec, cfg.seed)
    tr_idx, va_idx = stratified_split(train_set, cfg.val_fraction, cfg.seed)
    records = train_set.records
    index = {lab: i for i, lab in enumerate(order)}
    x_tr = _tensors([records[i] for i in tr_idx], cfg.resolution)
    y_tr = torch.tensor([index[records[i].label] for i in tr_idx])
    x_va = _tensors([records[i] for i in va_idx], cfg.resolution) if va_idx else x_tr[:0]
    y_va = torch.tensor([index[records[i].label] for i in va_idx], dtype=torch.long)

    opt = torch.optim.Adam(weights.trainable(), lr=cfg.lr)
    shuffle = derive_rng(cfg.seed, "classifier", "shuffle")
    dropout = derive_torch_generator(cfg.seed, "classifier", "dropout")
    history = []
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.from_numpy(shuffle.permutation(x_tr.shape[0]))
        running, seen = 0.0, 0
        for i in range(0, len(perm), cfg.batch_size):
            b = perm[i:i + cfg.batch_size]
            logits = forward(weights, spec, x_tr[b], "train", rng=dropout, logits=True)
            loss = F.cross_entropy(logits, y_tr[b])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running += float(loss.detach()) * len(b)
            seen += len(b)
        val_loss, val_acc = _evaluate_loss(weights, spec, x_va, y_va, cfg.batch_size)
        history.append(EpochStats(epoch, running / max(seen, 1), val_loss, val_acc))
        log.info("%s epoch %d/%d loss=%.4f val_loss=%.4f val_acc=%.3f", spec.name, epoch, cfg.epochs,
                 history[-1].train_loss, val_loss, val_acc)
    return TrainedClassifier(weights, spec, order, history,
                             tuple(records[i].id for i in tr_idx), tuple(records[i].id for i in va_idx))


def predict(clf: TrainedClassifier, records: Sequence[ImageRecord], batch_size: int = 64) -> list[tuple[Label, np.ndarray]]:
    """Argmax label and softmax probabilities per record (inference mode)."""
    if not records:
        return []
    x = _tensors(records, clf.spec.input_shape[0])
    out = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            logits = forward(clf.weights, clf.spec, x[i:i + batch_size], "infer", logits=True)
            probs = torch.softmax(logits.double(), dim=1).numpy()
            out.extend((clf.class_order[int(np.argmax(p))], p) for p in probs)
    return out


def evaluate(clf: TrainedClassifier, test_set: DatasetManifest) -> ConfusionMatrix:
    unknown = {r.label for r in test_set} - set(clf.class_order)
    if unknown:
        raise DatasetError(f"test labels {sorted(l.value for l in unknown)} unknown to the classifier")
    preds = predict(clf, test_set.records)
    return ConfusionMatrix.from_predictions(
        [l.value for l in clf.class_order], [r.label.value for r in test_set], [p.value for p, _ in preds])


def save_classifier(clf: TrainedClassifier, directory: str | Path) -> Path:
    """Checkpoint, class-order sidecar and history table in ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_weights(clf.weights, directory / "classifier.safetensors")
    sidecar = {"spec_name": clf.spec.name, "class_order": [l.value for l in clf.class_order],
               "input_shape": list(clf.spec.input_shape)}
    (directory / "class_order.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    with open(directory / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for h in clf.train_history:
            writer.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.val_accuracy)])
    return directory


def load_classifier(directory: str | Path) -> TrainedClassifier:
    directory = Path(directory)
    sidecar = json.loads((directory / "class_order.json").read_text())
    arch, k, res = sidecar["spec_name"].rsplit("_", 2)
    spec = classifier_spec(arch, int(k), int(res))
    weights = load_weights(directory / "classifier.safetensors", spec)
    history = []
    hist = directory / "history.csv"
    if hist.exists():
        with open(hist, newline="") as fh:
            for row in csv.DictReader(fh):
                history.append(EpochStats(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]),
                                          float(row["val_accuracy"])))
    return TrainedClassifier(weights, spec, tuple(Label(c) for c in sidecar["class_order"]), history)
