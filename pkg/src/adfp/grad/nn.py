"""Layer helpers shared by the denoiser and the classifiers."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .optim import ParameterSet


def init_conv(params: ParameterSet, rng, name: str, c_in: int, c_out: int, k: int = 3, scale: float = 1.0):
    fan_in = c_in * k * k
    w = rng.normal(0.0, scale * math.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)).astype(np.float32)
    params.add(f"{name}.w", w)
    params.add(f"{name}.b", np.zeros(c_out, np.float32))


def init_linear(params: ParameterSet, rng, name: str, d_in: int, d_out: int, scale: float = 1.0):
    w = rng.normal(0.0, scale * math.sqrt(1.0 / d_in), size=(d_in, d_out)).astype(np.float32)
    params.add(f"{name}.w", w)
    params.add(f"{name}.b", np.zeros(d_out, np.float32))


def conv(params: ParameterSet, name: str, x, stride: int = 1):
    w = params[f"{name}.w"]
    return T.conv2d(x, w, params[f"{name}.b"], stride=stride, padding=w.shape[-1] // 2)


def linear(params: ParameterSet, name: str, x):
    return T.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def cross_entropy(logits, labels) -> T.Tensor:
    """Mean negative log-likelihood of integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = T.log_softmax(logits, axis=1)
    picked = logp[np.arange(len(labels)), labels]
    return -T.mean(picked)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of (possibly fractional) timesteps, shape (len(t), dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)


def init_group_norm(params: ParameterSet, name: str, channels: int):
    params.add(f"{name}.gamma", np.ones(channels, np.float32))
    params.add(f"{name}.beta", np.zeros(channels, np.float32))


def group_norm(params: ParameterSet, name: str, x, groups: int, eps: float = 1e-5):
    """Normalise each group of channels per sample, then apply a per-channel affine map."""
    n, c, h, w = x.shape
    if c % groups:
        raise T.ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = T.reshape(x, (n, groups, -1))
    centred = xg - T.mean(xg, axis=2, keepdims=True)
    var = T.mean(centred * centred, axis=2, keepdims=True)
    xn = T.reshape(centred / T.sqrt(var + eps), (n, c, h, w))
    gamma = T.reshape(params[f"{name}.gamma"], (1, c, 1, 1))
    beta = T.reshape(params[f"{name}.beta"], (1, c, 1, 1))
    return xn * gamma + beta
