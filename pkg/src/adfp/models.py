"""Residual classifiers: the attack victim, the binary detector and the attack identifier."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from . import grad as G
from .data import LabeledImageSet
from .grad import nn

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = (16, 32, 64)


class TrainingError(RuntimeError):
    pass


@dataclasses.dataclass
class Classifier:
    params: G.ParameterSet
    arch: dict

    @classmethod
    def init(cls, classes: int, input_shape=(3, 32, 32), widths=DEFAULT_WIDTHS, seed: int = 0) -> "Classifier":
        """Stem (stride 2) + three residual stages + global average pool + linear head.

        ``classes == 1`` builds a single-logit binary head.
        """
        rng = np.random.default_rng([seed, 0xC1A5])
        p = G.ParameterSet()
        w1, w2, w3 = widths
        nn.init_conv(p, rng, "stem", input_shape[0], w1)
        for i, (c_in, c) in enumerate([(w1, w1), (w1, w2), (w2, w3)], start=1):
            if i > 1:
                nn.init_conv(p, rng, f"down{i}", c_in, c)
            nn.init_conv(p, rng, f"block{i}.a", c, c)
            # zero-initialised residual branch: every block starts as the identity
            nn.init_conv(p, rng, f"block{i}.b", c, c, scale=0.0)
        nn.init_linear(p, rng, "head", w3, classes)
        arch = {"kind": "resnet3", "classes": int(classes), "input_size": list(input_shape), "widths": list(widths)}
        return cls(p, arch)

    @property
    def classes(self) -> int:
        return self.arch["classes"]

    @property
    def input_shape(self) -> tuple:
        return tuple(self.arch["input_size"])

    def __call__(self, x: G.Tensor) -> G.Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise G.ShapeError(f"classifier expects input {self.input_shape}, got batch of {tuple(x.shape[1:])}")
        p = self.params
        h = G.relu(nn.conv(p, "stem", x - 0.5, stride=2))
        for i in range(1, 4):
            if i > 1:
                h = G.relu(nn.conv(p, f"down{i}", h, stride=2))
            r = G.relu(nn.conv(p, f"block{i}.a", h))
            h = G.relu(h + nn.conv(p, f"block{i}.b", r))
        feat = G.mean(h, axis=(2, 3))
        return nn.linear(p, "head", feat)

    def save(self, path) -> None:
        path = Path(path)
        G.serialize_checkpoint(self.params, path)
        path.with_suffix(".json").write_text(json.dumps(self.arch, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Classifier":
        path = Path(path)
        arch = json.loads(path.with_suffix(".json").read_text())
        return cls(G.parse_checkpoint(path), arch)


def predict_logits(model: Classifier, batch, batch_size: int = 256) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != model.input_shape:
        raise G.ShapeError(f"classifier expects input {model.input_shape}, got array of shape {batch.shape}")
    out = []
    with G.no_grad():
        for i in range(0, len(batch), batch_size):
            out.append(model(G.Tensor(batch[i:i + batch_size])).data)
    if not out:
        return np.zeros((0, model.classes), np.float32)
    return np.concatenate(out).astype(np.float32, copy=False)


def predict(model: Classifier, batch) -> np.ndarray:
    return predict_logits(model, batch).argmax(axis=1)


def accuracy(model: Classifier, data: LabeledImageSet) -> float:
    if not len(data):
        return float("nan")
    return float((predict(model, data.images) == data.labels).mean())


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Reflect-pad, random crop back to size, horizontal flip with p = 0.5."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def _fit(model: Classifier, images, targets, *, loss: str, epochs: int, lr: float, seed: int,
         batch_size: int = 64, augment_inputs: bool = False, val=None, tag: str = "train"):
    """Mini-batch Adam loop with cosine learning-rate decay; returns one log record per epoch."""
    history = []
    n = len(images)
    steps_per_epoch = -(-n // batch_size)
    total_steps = max(epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 0xF17, epoch])
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            xb = images[idx]
            if augment_inputs:
                xb = augment(xb, rng)
            out = model(G.Tensor(xb))
            if loss == "ce":
                objective = nn.cross_entropy(out, targets[idx])
            else:
                objective = G.mean(G.bce_with_logits(G.reshape(out, (-1,)), targets[idx].astype(np.float32)))
            value = float(objective.data)
            if not np.isfinite(value):
                raise TrainingError(f"{tag}: non-finite loss at epoch {epoch}, batch {b}")
            G.backward(objective, params=model.params)
            G.adam_step(model.params, lr=lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps)))
            step += 1
            total += value * len(idx)
            count += len(idx)
        record = {"epoch": epoch + 1, "loss": total / max(count, 1)}
        if val is not None:
            record["val_accuracy"] = val(model)
        log.info("%s epoch %d: %s", tag, epoch + 1, record)
        history.append(record)
    return history


def train_victim(train: LabeledImageSet, val: LabeledImageSet, epochs: int = 30, lr: float = 2e-3,
                 seed: int = 0, batch_size: int = 64, widths=DEFAULT_WIDTHS, augment_inputs: bool = True):
    """Cross-entropy training of the attack target; returns (model, per-epoch log)."""
    classes = int(max(train.labels.max(), val.labels.max() if len(val) else 0)) + 1
    if classes < 2:
        raise TrainingError("victim training needs at least two classes")
    if train.labels.min() < 0:
        raise TrainingError("negative class label in training set")
    model = Classifier.init(classes, train.image_shape, widths, seed)
    history = _fit(model, train.images, train.labels, loss="ce", epochs=epochs, lr=lr, seed=seed,
                   batch_size=batch_size, augment_inputs=augment_inputs, val=lambda m: accuracy(m, val),
                   tag="victim")
    if epochs == 0:
        history.append({"epoch": 0, "loss": float("nan"), "val_accuracy": accuracy(model, val)})
    return model, history


def _require_transformed(data: LabeledImageSet, what: str):
    if not data.provenance.is_transformed:
        raise TrainingError(f"{what} must be diffusion-transformed images (provenance {data.provenance.to_dict()})")


def detection_arrays(benign: LabeledImageSet, adversarial: LabeledImageSet):
    """Stack benign (label 0) and adversarial (label 1) images."""
    x = np.concatenate([benign.images, adversarial.images])
    y = np.concatenate([np.zeros(len(benign), np.int64), np.ones(len(adversarial), np.int64)])
    return x, y


def train_detector(benign_tf: LabeledImageSet, adv_tf: LabeledImageSet, epochs: int = 40, lr: float = 3e-3,
                   seed: int = 0, batch_size: int = 64, widths=DEFAULT_WIDTHS, augment_inputs: bool = False):
    """Binary BCE classifier separating transformed benign (0) from transformed adversarial (1) images.

    Crops are off by default: perturbations carry a stride-2 pixel-grid pattern that odd shifts and flips
    misalign, and with them the detector stays near chance.
    """
    _require_transformed(benign_tf, "benign set")
    _require_transformed(adv_tf, "adversarial set")
    shared = np.intersect1d(benign_tf.ids, adv_tf.ids)
    if shared.size:
        raise TrainingError(f"benign and adversarial sets share {shared.size} source images (e.g. id {shared[0]})")
    x, y = detection_arrays(benign_tf, adv_tf)
    model = Classifier.init(1, benign_tf.image_shape, widths, seed)
    model.arch["task"] = "detector"
    history = _fit(model, x, y, loss="bce", epochs=epochs, lr=lr, seed=seed, batch_size=batch_size,
                   augment_inputs=augment_inputs, tag="detector")
    return model, history


def detector_scores(model: Classifier, images) -> np.ndarray:
    """Probability of 'adversarial' per image; evaluation uses the un-augmented (centre) view."""
    z = predict_logits(model, images)[:, 0].astype(np.float64)
    return 1.0 / (1.0 + np.exp(-z))


def train_identifier(sets, epochs: int = 40, lr: float = 3e-3, seed: int = 0, batch_size: int = 64,
                     widths=DEFAULT_WIDTHS, augment_inputs: bool = False):
    """(K+1)-way classifier over named transformed sets; classes ordered by name."""
    pairs = list(sets.items()) if isinstance(sets, dict) else list(sets)
    names = [name for name, _ in pairs]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise TrainingError(f"duplicate set names: {dup}")
    if len(pairs) < 2:
        raise TrainingError("identification needs at least two named sets")
    pairs.sort(key=lambda kv: kv[0])
    for name, s in pairs:
        _require_transformed(s, f"set {name!r}")
    x = np.concatenate([s.images for _, s in pairs])
    y = np.concatenate([np.full(len(s), i, np.int64) for i, (_, s) in enumerate(pairs)])
    model = Classifier.init(len(pairs), pairs[0][1].image_shape, widths, seed)
    model.arch["task"] = "identifier"
    model.arch["class_names"] = [name for name, _ in pairs]
    history = _fit(model, x, y, loss="ce", epochs=epochs, lr=lr, seed=seed, batch_size=batch_size,
                   augment_inputs=augment_inputs, tag="identifier")
    return model, history
