from __future__ import annotations

import dataclasses
import json

import numpy as np

FAMILIES = ("fgsm", "pgd", "masked_pgd", "apgd_ce", "apgd_dlr", "autoattack", "deepfool", "cw",
            "square", "nes", "bandits")
BLACK_BOX = ("square", "nes", "bandits")
NORM_MINIMIZING = ("deepfool", "cw")


class AttackError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class AttackSpec:
    family: str
    epsilon: float | None = 8 / 255
    alpha: float | None = None  # step size; None picks a family default
    iters: int = 10
    patch: tuple | None = None  # (row, col, height, width)
    query_budget: int = 1000
    seed: int = 0
    random_start: bool = True
    # NES / Bandits
    sigma: float = 1e-3
    samples: int = 20
    prior_lr: float = 0.1
    exploration: float = 0.1
    fd_eta: float = 0.1
    tile: int = 8
    # CW
    c: float = 1.0
    kappa: float = 0.0
    lr: float = 0.01
    # DeepFool
    overshoot: float = 0.02

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise AttackError(f"unknown attack family {self.family!r}; expected one of {FAMILIES}")
        if self.epsilon is not None and not 0.0 <= self.epsilon <= 1.0:
            raise AttackError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.epsilon is None and self.family not in NORM_MINIMIZING:
            raise AttackError(f"{self.family} needs an epsilon budget")
        if self.alpha is not None and self.alpha <= 0:
            raise AttackError(f"step size alpha must be > 0, got {self.alpha}")
        if self.iters < 1:
            raise AttackError(f"iters must be >= 1, got {self.iters}")
        if self.query_budget < 1:
            raise AttackError(f"query budget must be >= 1, got {self.query_budget}")
        if self.patch is not None:
            patch = tuple(int(v) for v in self.patch)
            if len(patch) != 4 or min(patch) < 0:
                raise AttackError(f"patch must be four non-negative integers (row, col, height, width), got {self.patch}")
            object.__setattr__(self, "patch", patch)

    @property
    def step(self) -> float:
        """Step size, defaulting to a quarter of the budget."""
        return self.alpha if self.alpha is not None else self.epsilon / 4

    @property
    def label(self) -> str:
        return self.family if self.epsilon is None else f"{self.family}@{self.epsilon:.6g}"

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])

    def replace(self, **changes) -> "AttackSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["patch"] is not None:
            d["patch"] = list(d["patch"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise AttackError(f"unknown attack spec fields: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "AttackSpec":
        return cls.from_dict(json.loads(text))


def default_grid(seed: int = 0) -> list[AttackSpec]:
    """FGSM/PGD/AutoAttack at 1, 2, 4, 8 /255; Square at 2, 4, 8 /255; NES and Bandits at 0.05."""
    grid = []
    for family in ("fgsm", "pgd", "autoattack"):
        for k in (1, 2, 4, 8):
            grid.append(AttackSpec(family, k / 255, seed=seed))
    for k in (2, 4, 8):
        grid.append(AttackSpec("square", k / 255, seed=seed))
    grid.append(AttackSpec("nes", 0.05, alpha=0.01, iters=20, seed=seed))
    grid.append(AttackSpec("bandits", 0.05, alpha=0.01, seed=seed))
    return grid


@dataclasses.dataclass
class AdversarialBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    pred_before: np.ndarray
    pred_after: np.ndarray
    queries: np.ndarray | None = None
    attribution: list | None = None  # ensemble member that broke each sample, "" if none

    @property
    def success(self) -> np.ndarray:
        return self.pred_after != self.labels

    @property
    def success_rate(self) -> float:
        return float(self.success.mean()) if len(self.labels) else 0.0

    def linf(self) -> np.ndarray:
        d = np.abs(self.adversarials.astype(np.float64) - self.originals)
        return d.reshape(len(d), -1).max(axis=1) if len(d) else np.zeros(0)

    def l2(self) -> np.ndarray:
        d = self.adversarials.astype(np.float64) - self.originals
        return np.sqrt((d.reshape(len(d), -1) ** 2).sum(axis=1))


def project(adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Project into the L-infinity ball around ``x``, then clamp to the pixel range."""
    return np.clip(np.clip(adv, x - epsilon, x + epsilon), 0.0, 1.0).astype(x.dtype, copy=False)


def check_inputs(x, y):
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 4 or len(x) != len(y):
        raise AttackError(f"expected N x C x H x W images with N labels, got {x.shape} and {y.shape}")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise AttackError("input pixels must lie in [0, 1]")
    return x, y


def margin(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """True-class logit minus the best other logit; negative means misclassified."""
    z = np.asarray(logits, dtype=np.float64)
    rows = np.arange(len(z))
    other = z.copy()
    other[rows, y] = -np.inf
    return z[rows, y] - other.max(axis=1)
