"""Image sets: procedural toy data, CIFAR-10 binary ingestion, splits, containers."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import warnings
from pathlib import Path

import numpy as np

from .grad.checkpoint import decode_tensors, encode_tensors

SHAPES = ("disk", "square", "cross", "stripe", "ring")
TEXTURES = ("smooth", "noisy")
CIFAR_RECORD = 3073
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
FORMAT = "adfp-dataset/1"


class DatasetError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class Provenance:
    kind: str = "benign"  # benign | attack | transformed
    family: str | None = None
    epsilon: float | None = None
    of: "Provenance | None" = None
    steps: int | None = None

    @classmethod
    def attack(cls, family: str, epsilon: float | None) -> "Provenance":
        return cls("attack", family=family, epsilon=None if epsilon is None else float(epsilon))

    def transformed(self, steps: int | None = None) -> "Provenance":
        return Provenance("transformed", of=self, steps=steps)

    @property
    def root(self) -> "Provenance":
        p = self
        while p.of is not None:
            p = p.of
        return p

    @property
    def is_transformed(self) -> bool:
        return self.kind == "transformed"

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.family is not None:
            d["family"] = self.family
        if self.epsilon is not None:
            d["epsilon"] = self.epsilon
        if self.steps is not None:
            d["steps"] = self.steps
        if self.of is not None:
            d["of"] = self.of.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        of = cls.from_dict(d["of"]) if "of" in d else None
        return cls(d["kind"], d.get("family"), d.get("epsilon"), of, d.get("steps"))


@dataclasses.dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    provenance: Provenance = dataclasses.field(default_factory=Provenance)
    split: str = "unsplit"
    seed: int | None = None
    ids: np.ndarray | None = None  # identity of the source image, survives attacks/transforms

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixel values outside [0, 1]")
        self.ids = np.arange(len(self.labels), dtype=np.int64) if self.ids is None else np.asarray(self.ids, np.int64)
        if len(self.ids) != len(self.labels):
            raise DatasetError(f"{len(self.ids)} ids for {len(self.labels)} images")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, index, split: str | None = None) -> "LabeledImageSet":
        index = np.asarray(index, dtype=np.int64)
        return dataclasses.replace(self, images=self.images[index], labels=self.labels[index],
                                   ids=self.ids[index], split=self.split if split is None else split)

    def replace(self, **changes) -> "LabeledImageSet":
        return dataclasses.replace(self, **changes)

    def class_histogram(self, classes: int | None = None) -> list[int]:
        k = classes if classes is not None else (int(self.labels.max()) + 1 if len(self) else 0)
        return np.bincount(self.labels, minlength=k).tolist()


# -- toy generator -------------------------------------------------------------

def toy_class_names(classes: int = 10) -> list[str]:
    return [f"{s}-{t}" for s in SHAPES for t in TEXTURES][:classes]


def _shape_sdf(kind, dx, dy, r, rng):
    """Signed inside-distance (pixels) of the requested shape."""
    d = np.hypot(dx, dy)
    if kind == "disk":
        return r - d
    if kind == "square":
        return 0.8 * r - np.maximum(np.abs(dx), np.abs(dy))
    if kind == "cross":
        arm = 0.3 * r
        bar1 = np.minimum(arm - np.abs(dx), r - np.abs(dy))
        bar2 = np.minimum(arm - np.abs(dy), r - np.abs(dx))
        return np.maximum(bar1, bar2)
    if kind == "stripe":
        along = dy if rng.random() < 0.5 else dx
        period = r / 1.2
        band = period / 4 - np.abs(np.mod(along, period) - period / 2)
        return np.minimum(band, 0.9 * r - np.maximum(np.abs(dx), np.abs(dy)))
    if kind == "ring":
        return np.minimum(r - d, d - 0.45 * r)
    raise ValueError(kind)


def render_toy_image(label: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    shape = SHAPES[label // len(TEXTURES)]
    texture = TEXTURES[label % len(TEXTURES)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = size / 2 + rng.uniform(-0.15, 0.15, size=2) * size
    r = rng.uniform(0.22, 0.34) * size
    # moderate contrast keeps the victim's margins small enough for 8/255 attacks to bite
    bg = rng.uniform(0.3, 0.7, size=3)
    fg = np.clip(bg + rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.4, size=3), 0.0, 1.0)
    tilt = rng.uniform(-1, 1, size=2) / size
    ramp = 0.1 * ((yy - size / 2) * tilt[0] + (xx - size / 2) * tilt[1])
    cell = -(-size // 4)
    clutter = np.repeat(np.repeat(rng.uniform(-0.06, 0.06, size=(3, 4, 4)), cell, 1), cell, 2)[:, :size, :size]
    background = np.clip(bg[:, None, None] + ramp[None] + clutter, 0, 1)
    mask = np.clip(0.5 + _shape_sdf(shape, xx - cx, yy - cy, r, rng), 0.0, 1.0)
    if texture == "smooth":
        fill = fg[:, None, None] * (1.0 + 0.5 * ramp[None])
    else:
        fill = fg[:, None, None] + rng.normal(0.0, 0.2, size=(3, size, size))
    img = background * (1.0 - mask) + np.clip(fill, 0, 1) * mask
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_toy_dataset(seed: int, n: int, classes: int = 10, size: int = 32) -> LabeledImageSet:
    """Class-balanced procedural images; image ``i`` depends only on ``(seed, i)``."""
    if not 2 <= classes <= len(SHAPES) * len(TEXTURES):
        raise DatasetError(f"classes must be in [2, {len(SHAPES) * len(TEXTURES)}], got {classes}")
    if n < classes:
        raise DatasetError(f"need n >= classes, got n={n}, classes={classes}")
    if n % classes:
        balanced = max(classes, int(round(n / classes)) * classes)
        warnings.warn(f"n={n} is not divisible by {classes} classes; generating {balanced} images instead")
        n = balanced
    labels = np.arange(n) % classes
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        images[i] = render_toy_image(int(labels[i]), np.random.default_rng([seed, i]), size)
    return LabeledImageSet(images, labels, Provenance(), "unsplit", seed, np.arange(n))


# -- CIFAR-10 ------------------------------------------------------------------

def read_cifar10_binary(path) -> LabeledImageSet:
    """Parse the CIFAR-10 binary layout: 1 label byte + 3072 channel-major pixel bytes per record."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        offset = len(raw) - len(raw) % CIFAR_RECORD
        raise DatasetError(f"{path}: truncated record at byte offset {offset} "
                           f"(file length {len(raw)} is not a multiple of {CIFAR_RECORD})")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetError(f"{path}: record {bad[0]} has label {labels[bad[0]]} > 9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return LabeledImageSet(images, labels)


# -- splits ---------------------------------------------------------------------

def split_dataset(data: LabeledImageSet, seed: int):
    """Stratified 80/10/10 split into (train, val, test)."""
    if len(data) < 10:
        raise DatasetError(f"need at least 10 samples to split, got {len(data)}")
    rng = np.random.default_rng([seed, 0x5B1])
    parts = ([], [], [])
    for cls in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == cls)
        if len(idx) < 3:
            raise DatasetError(f"class {cls} has {len(idx)} samples; each class needs at least 3")
        idx = rng.permutation(idx)
        n_val = max(1, int(round(SPLIT_FRACTIONS[1] * len(idx))))
        n_test = max(1, int(round(SPLIT_FRACTIONS[2] * len(idx))))
        n_train = len(idx) - n_val - n_test
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    names = ("train", "val", "test")
    return tuple(data.subset(np.sort(np.concatenate(p)), split=s) for p, s in zip(parts, names))


def partition(data: LabeledImageSet, sizes, seed: int) -> list[LabeledImageSet]:
    """Disjoint random subsets of the requested sizes, fixed before anything else runs."""
    if sum(sizes) > len(data):
        raise DatasetError(f"cannot draw {sum(sizes)} disjoint samples from {len(data)}")
    order = np.random.default_rng([seed, 0xD15]).permutation(len(data))
    out, start = [], 0
    for n in sizes:
        out.append(data.subset(np.sort(order[start:start + n])))
        start += n
    return out


# -- container ------------------------------------------------------------------

def dataset_manifest(data: LabeledImageSet, digest: str) -> dict:
    return {
        "format": FORMAT,
        "count": len(data),
        "image_shape": list(data.image_shape),
        "split_counts": {data.split: len(data)},
        "class_histogram": data.class_histogram(),
        "provenance": data.provenance.to_dict(),
        "split": data.split,
        "seed": data.seed,
        "digest": digest,
        "ids": data.ids.tolist(),
    }


def save_dataset(data: LabeledImageSet, path) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = encode_tensors([
        ("images", data.images.astype(np.float32)),
        ("labels", data.labels.astype(np.float64)),
        ("ids", data.ids.astype(np.float64)),
    ])
    digest = hashlib.sha256(payload).hexdigest()
    manifest = dataset_manifest(data, digest)
    _atomic_write(path / "data.bin", payload)
    _atomic_write(path / "manifest.json", (json.dumps(manifest, indent=1) + "\n").encode())
    return manifest


def load_dataset(path) -> LabeledImageSet:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"{path}: unknown container format {manifest.get('format')!r}")
    payload = (path / "data.bin").read_bytes()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["digest"]:
        raise DatasetError(f"{path}: digest mismatch (manifest {manifest['digest'][:12]}..., data {digest[:12]}...)")
    tensors = dict(decode_tensors(payload))
    images = tensors["images"]
    if images.shape[0] != manifest["count"] or list(images.shape[1:]) != manifest["image_shape"]:
        raise DatasetError(f"{path}: manifest counts disagree with tensor dims {images.shape}")
    return LabeledImageSet(images, tensors["labels"].astype(np.int64), Provenance.from_dict(manifest["provenance"]),
                           manifest["split"], manifest["seed"], tensors["ids"].astype(np.int64))


def read_manifest(path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
