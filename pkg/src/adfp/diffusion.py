"""Noise schedule, a small U-shaped noise predictor, and deterministic DDIM inversion/reversion.

Images enter and leave every public function in [0, 1]; the noise predictor works on [-1, 1].
"""

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

DEFAULT_T = 200
DEFAULT_BETA = (1e-4, 0.02)
DEFAULT_S = 50
DEFAULT_WIDTHS = (24, 48, 64)


class ScheduleError(ValueError):
    pass


class DiffusionTrainingError(RuntimeError):
    pass


# -- schedule --------------------------------------------------------------------

@dataclasses.dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """``alpha[t - 1]`` is the cumulative signal retention at step ``t``; step 0 has retention 1."""

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    tau: np.ndarray

    @property
    def S(self) -> int:
        return len(self.tau)

    def alpha_at(self, t: int) -> float:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ScheduleError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha[t - 1])

    def with_steps(self, S: int) -> "NoiseSchedule":
        return dataclasses.replace(self, tau=subsample_steps(self.T, S))

    def describe(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "S": self.S}


def subsample_steps(T: int, S: int) -> np.ndarray:
    """``S`` uniformly strided steps in ``1..T`` ending at ``T``."""
    if not 1 <= S <= T:
        raise ScheduleError(f"subsample count must satisfy 1 <= S <= T={T}, got {S}")
    return np.round(np.arange(1, S + 1) * (T / S)).astype(np.int64)


def build_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA[0], beta_end: float = DEFAULT_BETA[1],
                   S: int | None = None) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = np.cumprod(1.0 - beta)
    tau = subsample_steps(T, min(DEFAULT_S, T) if S is None else S)
    return NoiseSchedule(int(T), float(beta_start), float(beta_end), beta, alpha, tau)


def forward_noising(x0, t: int, noise, sched: NoiseSchedule) -> np.ndarray:
    x0, noise = np.asarray(x0), np.asarray(noise)
    if x0.shape != noise.shape:
        raise G.ShapeError(f"noise shape {noise.shape} does not match image shape {x0.shape}")
    a = sched.alpha_at(t)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * noise


# -- noise predictor -------------------------------------------------------------

def _to_model_range(images):
    return 2.0 * np.asarray(images) - 1.0


def _from_model_range(x):
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


@dataclasses.dataclass
class Denoiser:
    """Three-level conv encoder/decoder with skips, group normalisation and a per-level timestep bias.

    The image is folded 2x2 into channels first, so the top level runs at half resolution.
    """

    params: G.ParameterSet
    arch: dict

    @classmethod
    def init(cls, image_size: int = 32, channels: int = 3, widths=DEFAULT_WIDTHS, emb_dim: int = 64,
             seed: int = 0, sched: NoiseSchedule | None = None, groups: int = 8) -> "Denoiser":
        if any(c % groups for c in widths):
            raise G.ShapeError(f"widths {tuple(widths)} must be divisible by {groups} normalisation groups")
        if image_size % 8:
            raise G.ShapeError(f"image size must be a multiple of 8, got {image_size}")
        sched = sched or build_schedule()
        rng = np.random.default_rng([seed, 0xD1FF])
        p = G.ParameterSet()
        w1, w2, w3 = widths
        folded = 4 * channels
        nn.init_linear(p, rng, "temb", emb_dim, emb_dim)
        nn.init_conv(p, rng, "in", folded, w1)
        for name, c in [("enc1", w1), ("enc2", w2), ("mid", w3), ("dec2", w2), ("dec1", w1)]:
            nn.init_group_norm(p, f"{name}.na", c)
            nn.init_group_norm(p, f"{name}.nb", c)
            nn.init_conv(p, rng, f"{name}.a", c, c)
            nn.init_conv(p, rng, f"{name}.b", c, c, scale=0.5)
            nn.init_linear(p, rng, f"{name}.t", emb_dim, c)
        nn.init_conv(p, rng, "down1", w1, w2)
        nn.init_conv(p, rng, "down2", w2, w3)
        nn.init_conv(p, rng, "up2", w3 + w2, w2)
        nn.init_conv(p, rng, "up1", w2 + w1, w1)
        nn.init_group_norm(p, "out.n", w1)
        nn.init_conv(p, rng, "out", w1, folded, scale=0.5)
        arch = {"kind": "unet3", "image_size": int(image_size), "channels": int(channels),
                "widths": list(widths), "emb_dim": int(emb_dim), "groups": int(groups), **sched.describe()}
        return cls(p, arch)

    @property
    def image_shape(self) -> tuple:
        return (self.arch["channels"], self.arch["image_size"], self.arch["image_size"])

    def schedule(self) -> NoiseSchedule:
        a = self.arch
        return build_schedule(a["T"], a["beta_start"], a["beta_end"], a["S"])

    def _norm(self, name, h):
        return G.silu(nn.group_norm(self.params, name, h, self.arch["groups"]))

    def _block(self, name, h, emb):
        p = self.params
        r = nn.conv(p, f"{name}.a", self._norm(f"{name}.na", h))
        r = r + G.reshape(nn.linear(p, f"{name}.t", emb), (emb.shape[0], -1, 1, 1))
        return h + nn.conv(p, f"{name}.b", self._norm(f"{name}.nb", r))

    def __call__(self, x: G.Tensor, t) -> G.Tensor:
        if tuple(x.shape[1:]) != self.image_shape:
            raise G.ShapeError(f"denoiser expects images {self.image_shape}, got batch of {tuple(x.shape[1:])}")
        p = self.params
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        emb = G.silu(nn.linear(p, "temb", G.Tensor(nn.timestep_embedding(t, self.arch["emb_dim"]))))
        h = nn.conv(p, "in", G.space_to_depth(x, 2))
        skip1 = h = self._block("enc1", h, emb)
        h = nn.conv(p, "down1", G.silu(h), stride=2)
        skip2 = h = self._block("enc2", h, emb)
        h = nn.conv(p, "down2", G.silu(h), stride=2)
        h = self._block("mid", h, emb)
        h = nn.conv(p, "up2", G.concat([G.upsample_nearest(h, 2), skip2], axis=1))
        h = self._block("dec2", h, emb)
        h = nn.conv(p, "up1", G.concat([G.upsample_nearest(h, 2), skip1], axis=1))
        h = self._block("dec1", h, emb)
        return G.depth_to_space(nn.conv(p, "out", self._norm("out.n", h)), 2)

    def predict_noise(self, x: np.ndarray, t) -> np.ndarray:
        with G.no_grad():
            return self(G.Tensor(np.asarray(x, dtype=np.float32)), t).data

    def save(self, path) -> None:
        path = Path(path)
        G.serialize_checkpoint(self.params, path)
        path.with_suffix(".json").write_text(json.dumps(self.arch, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Denoiser":
        path = Path(path)
        arch = json.loads(path.with_suffix(".json").read_text())
        return cls(G.parse_checkpoint(path), arch)


@dataclasses.dataclass
class ConstantDenoiser:
    """Predicts the same noise value everywhere; makes inversion followed by reversion exact."""

    value: float = 0.0
    image_shape: tuple | None = None

    def predict_noise(self, x: np.ndarray, t) -> np.ndarray:
        return np.full(np.shape(x), self.value, dtype=np.float32)


def train_denoiser(dataset: LabeledImageSet, sched: NoiseSchedule, epochs: int = 30, batch: int = 64,
                   lr: float = 2e-3, seed: int = 0, widths=DEFAULT_WIDTHS, probe=None,
                   probe_every: int = 0, checkpoint_dir=None):
    """Fit the noise predictor with the simple noise-regression loss.

    ``probe`` images (in [0, 1]) are transformed every ``probe_every`` epochs and the mean per-pixel
    reconstruction error is appended to the log. Returns ``(model, log)``.
    """
    if not len(dataset):
        raise DiffusionTrainingError("denoiser training needs a nonempty dataset")
    c, h, w = dataset.image_shape
    if h != w:
        raise G.ShapeError(f"denoiser expects square images, got {h}x{w}")
    model = Denoiser.init(h, c, widths, seed=seed, sched=sched)
    images = _to_model_range(dataset.images).astype(np.float32)
    n = len(images)
    steps_per_epoch = -(-n // batch)
    total_steps = max(epochs * steps_per_epoch, 1)
    sqrt_a = np.sqrt(sched.alpha).astype(np.float32)
    sqrt_1ma = np.sqrt(1.0 - sched.alpha).astype(np.float32)
    history = []
    step = 0

    def record_probe(epoch):
        err = reconstruction_error(probe, transform(probe, model, sched))
        history.append({"epoch": epoch, "probe_error": err})
        log.info("denoiser epoch %d: probe reconstruction error %.5f", epoch, err)

    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 0xD1F, epoch])
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, batch)):
            idx = order[start:start + batch]
            x0 = images[idx]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            noise = rng.standard_normal(x0.shape, dtype=np.float32)
            xt = sqrt_a[t - 1, None, None, None] * x0 + sqrt_1ma[t - 1, None, None, None] * noise
            diff = model(G.Tensor(xt), t) - noise
            loss = G.mean(diff * diff)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DiffusionTrainingError(f"non-finite denoiser loss at epoch {epoch}, batch {b}")
            G.backward(loss, params=model.params)
            G.adam_step(model.params, lr=lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps)))
            step += 1
            total += value * len(idx)
        history.append({"epoch": epoch + 1, "loss": total / n})
        log.info("denoiser epoch %d: loss %.5f", epoch + 1, total / n)
        if checkpoint_dir is not None:
            model.save(Path(checkpoint_dir) / f"denoiser-epoch{epoch + 1:03d}.adf")
        if probe is not None and probe_every and (epoch + 1) % probe_every == 0:
            record_probe(epoch + 1)
    return model, history


# -- DDIM ------------------------------------------------------------------------------

def _model_t(t: int) -> int:
    # the predictor is trained on t >= 1; the t = 0 endpoint reuses the first step
    return max(int(t), 1)


def ddim_reverse_step(x_t, t_from: int, t_to: int, model, sched: NoiseSchedule) -> np.ndarray:
    """One deterministic step towards less noise, operating in the predictor's [-1, 1] range."""
    if t_from <= t_to:
        raise ScheduleError(f"reverse step needs t_from > t_to, got {t_from} -> {t_to}")
    a_from, a_to = sched.alpha_at(t_from), sched.alpha_at(t_to)
    x = np.asarray(x_t, dtype=np.float64)
    eps = model.predict_noise(x, _model_t(t_from)).astype(np.float64)
    x0_hat = (x - np.sqrt(1.0 - a_from) * eps) / np.sqrt(a_from)
    return np.sqrt(a_to) * x0_hat + np.sqrt(1.0 - a_to) * eps


def ddim_invert_step(x_t, t_from: int, t_to: int, model, sched: NoiseSchedule) -> np.ndarray:
    """One deterministic step towards more noise; the noise estimate is taken at the current state."""
    if t_to <= t_from:
        raise ScheduleError(f"inversion step needs t_to > t_from, got {t_from} -> {t_to}")
    a_from, a_to = sched.alpha_at(t_from), sched.alpha_at(t_to)
    x = np.asarray(x_t, dtype=np.float64)
    eps = model.predict_noise(x, _model_t(t_from)).astype(np.float64)
    ratio_from = np.sqrt((1.0 - a_from) / a_from)
    ratio_to = np.sqrt((1.0 - a_to) / a_to)
    return np.sqrt(a_to) * (x / np.sqrt(a_from) + (ratio_to - ratio_from) * eps)


def _check_images(x0, model):
    x0 = np.asarray(x0)
    if x0.ndim != 4:
        raise G.ShapeError(f"expected an N x C x H x W batch, got shape {x0.shape}")
    expected = getattr(model, "image_shape", None)
    if expected is not None and tuple(x0.shape[1:]) != tuple(expected):
        raise G.ShapeError(f"images of shape {tuple(x0.shape[1:])} do not match the denoiser's {tuple(expected)}")
    return x0


def _round_trip(x0: np.ndarray, model, sched: NoiseSchedule, path) -> np.ndarray:
    x = _to_model_range(x0.astype(np.float64))
    for t_from, t_to in zip(path[:-1], path[1:]):
        x = ddim_invert_step(x, t_from, t_to, model, sched)
    for t_from, t_to in zip(path[:0:-1], path[-2::-1]):
        x = ddim_reverse_step(x, t_from, t_to, model, sched)
    return _from_model_range(x).astype(np.float32)


def transform(x0, model, sched: NoiseSchedule, S: int | None = None, batch_size: int = 100) -> np.ndarray:
    """Invert images to the final step along the subsampled chain, then run the chain back.

    Output is clamped to [0, 1] and is a pure function of the inputs.
    """
    x0 = _check_images(x0, model)
    tau = sched.tau if S is None else subsample_steps(sched.T, S)
    path = np.concatenate([[0], tau])
    out = np.empty(x0.shape, dtype=np.float32)
    for i in range(0, len(x0), batch_size):
        out[i:i + batch_size] = _round_trip(x0[i:i + batch_size], model, sched, path)
    return out


def recursive_transform(x0, model, sched: NoiseSchedule, S: int | None = None, n: int = 1) -> list:
    if n < 1:
        raise ValueError(f"recursion depth must be >= 1, got {n}")
    outs, x = [], x0
    for _ in range(n):
        x = transform(x, model, sched, S)
        outs.append(x)
    return outs


def reconstruction_error(x, x_prime) -> float:
    """Mean over images and pixels of the channel-wise L2 distance."""
    d = np.asarray(x_prime, np.float64) - np.asarray(x, np.float64)
    return float(np.sqrt((d * d).sum(axis=1)).mean())


def transform_set(data: LabeledImageSet, model, sched: NoiseSchedule, S: int | None = None) -> LabeledImageSet:
    """Transformed copy of ``data`` whose provenance records the source and step count."""
    steps = sched.S if S is None else S
    return data.replace(images=transform(data.images, model, sched, steps),
                        provenance=data.provenance.transformed(steps))
