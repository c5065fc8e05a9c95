"""Gradient-based attacks against a differentiable classifier (``model(Tensor) -> logits Tensor``)."""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .. import grad as G
from .blackbox import LogitsOracle, square_attack
from .spec import AdversarialBatch, AttackError, AttackSpec, check_inputs, margin, project

APGD_CHECKPOINTS = (0.22, 0.42, 0.58, 0.70, 0.79, 0.86, 0.92, 0.97)
APGD_RHO = 0.75
APGD_MOMENTUM = 0.75


def _frozen(model):
    params = getattr(model, "params", None)
    return params.frozen() if params is not None else contextlib.nullcontext()


def logits(model, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    with G.no_grad():
        out = [model(G.Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 0), np.float32)


def _batch(model, x, adv, y, **extra) -> AdversarialBatch:
    before = logits(model, x).argmax(axis=1)
    after = logits(model, adv).argmax(axis=1)
    return AdversarialBatch(x, adv.astype(np.float32, copy=False), y, before, after, **extra)


def _rows(n):
    return np.arange(n)


def dlr_loss(z, y) -> np.ndarray:
    """Per-sample ``(z_y - max_{i != y} z_i) / (z_(1) - z_(3))`` with ``z_(k)`` the k-th largest logit."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if z.ndim != 2 or z.shape[1] < 3:
        raise AttackError(f"DLR needs at least three classes, got logits of shape {z.shape}")
    top = np.sort(z, axis=1)[:, ::-1]
    denom = top[:, 0] - top[:, 2]
    if np.any(denom == 0):
        bad = int(np.flatnonzero(denom == 0)[0])
        raise AttackError(f"DLR undefined for sample {bad}: largest and third-largest logits are equal")
    return margin(z, y) / denom


def _dlr_tensor(z: G.Tensor, y) -> G.Tensor:
    zd = z.data.astype(np.float64)
    rows = _rows(len(zd))
    order = np.argsort(-zd, axis=1, kind="stable")
    other = zd.copy()
    other[rows, y] = -np.inf
    runner_up = other.argmax(axis=1)
    denom_np = zd[rows, order[:, 0]] - zd[rows, order[:, 2]]
    if np.any(denom_np == 0):
        bad = int(np.flatnonzero(denom_np == 0)[0])
        raise AttackError(f"DLR undefined for sample {bad}: largest and third-largest logits are equal")
    num = z[rows, y] - z[rows, runner_up]
    return num / (z[rows, order[:, 0]] - z[rows, order[:, 2]])


def _objective(z: G.Tensor, y, kind: str) -> G.Tensor:
    """Per-sample quantity the attack ascends."""
    if kind == "ce":
        return -G.log_softmax(z, axis=1)[_rows(len(y)), y]
    if kind == "dlr":
        # the displayed quotient is large when the true class wins, so ascend its negation
        return -_dlr_tensor(z, y)
    raise AttackError(f"unknown attack loss {kind!r}")


def loss_and_gradient(model, x, y, kind: str = "ce"):
    """Per-sample objective, its gradient w.r.t. the input, and the logits."""
    with _frozen(model):
        xt = G.Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
        z = model(xt)
        per = _objective(z, y, kind)
        G.backward(G.tsum(per))
    return per.data.astype(np.float64), xt.grad, z.data


def fgsm(model, x, y, epsilon: float) -> AdversarialBatch:
    if epsilon < 0:
        raise AttackError(f"epsilon must be >= 0, got {epsilon}")
    x, y = check_inputs(x, y)
    _, g, _ = loss_and_gradient(model, x, y)
    adv = np.clip(x + epsilon * np.sign(g), 0.0, 1.0).astype(np.float32)
    return _batch(model, x, adv, y)


def _patch_mask(patch, shape):
    if patch is None:
        raise AttackError("masked PGD needs a patch (row, col, height, width)")
    r, c, h, w = patch
    if r + h > shape[-2] or c + w > shape[-1]:
        raise AttackError(f"patch {patch} exceeds the {shape[-2]}x{shape[-1]} image")
    mask = np.zeros((1, 1) + tuple(shape[-2:]), dtype=bool)
    mask[..., r:r + h, c:c + w] = True
    return mask


def _pgd(model, x, y, spec: AttackSpec, stream: int, mask=None) -> AdversarialBatch:
    x, y = check_inputs(x, y)
    eps, step = spec.epsilon, spec.step
    rng = spec.rng(stream)
    adv = x
    if spec.random_start:
        start = rng.uniform(-eps, eps, size=x.shape)
        if mask is not None:
            start = start * mask
        adv = project(x + start, x, eps)
    for _ in range(spec.iters):
        _, g, _ = loss_and_gradient(model, adv, y)
        delta = step * np.sign(g)
        if mask is not None:
            delta = delta * mask
        adv = project(adv + delta, x, eps)
    if mask is not None:
        adv = np.where(mask, adv, x)
    return _batch(model, x, adv, y)


def pgd(model, x, y, spec: AttackSpec, stream: int = 0) -> AdversarialBatch:
    """Iterated signed-gradient ascent on cross-entropy, projected onto the epsilon ball each step."""
    return _pgd(model, x, y, spec, stream)


def masked_pgd(model, x, y, spec: AttackSpec, stream: int = 0) -> AdversarialBatch:
    """PGD restricted to ``spec.patch``; pixels outside it are returned untouched."""
    return _pgd(model, x, y, spec, stream, _patch_mask(spec.patch, np.shape(x)))


def apgd_stalled(improved, span: int, eta, eta_at_checkpoint, best, best_at_checkpoint) -> np.ndarray:
    """Per-sample halving decision at a checkpoint ``span`` iterations after the previous one."""
    stalled = np.asarray(improved) < APGD_RHO * span
    return stalled | ((eta == eta_at_checkpoint) & (best == best_at_checkpoint))


def apgd(model, x, y, spec: AttackSpec, loss: str = "ce", stream: int = 0,
         trace: list | None = None) -> AdversarialBatch:
    """Momentum PGD with per-sample step halving at fixed checkpoints.

    At each checkpoint the step is halved, and the iterate reset to the best point, when fewer than
    ``rho`` of the steps since the previous checkpoint improved the objective, or when neither the
    step nor the best objective changed. Returns the best adversarial iterate if any, else the best one.
    """
    if spec.iters < 2:
        raise AttackError(f"APGD needs iters >= 2, got {spec.iters}")
    x, y = check_inputs(x, y)
    n, eps = len(x), spec.epsilon
    rng = spec.rng(stream)
    checkpoints = {math.ceil(p * spec.iters) for p in APGD_CHECKPOINTS}
    cur = project(x + rng.uniform(-eps, eps, size=x.shape), x, eps) if spec.random_start else x.copy()
    f, g, z = loss_and_gradient(model, cur, y, loss)
    if trace is not None:
        trace.append((cur.copy(), np.full(n, 2.0 * eps)))
    best_x, best_f, best_g = cur.copy(), f.copy(), g.copy()
    adv_x, adv_f = x.copy(), np.full(n, -np.inf)
    hit = margin(z, y) < 0
    adv_x[hit], adv_f[hit] = cur[hit], f[hit]
    eta = np.full(n, 2.0 * eps)
    shape = (-1, 1, 1, 1)
    prev = cur
    cur = project(cur + eta.reshape(shape) * np.sign(g), x, eps)
    f_prev = f
    improved = np.zeros(n, dtype=np.int64)
    last_ck, eta_ck, best_ck = 0, eta.copy(), best_f.copy()
    for k in range(1, spec.iters + 1):
        f, g, z = loss_and_gradient(model, cur, y, loss)
        if trace is not None:
            trace.append((cur.copy(), eta.copy()))
        improved += f > f_prev
        better = f > best_f
        best_x[better], best_f[better], best_g[better] = cur[better], f[better], g[better]
        hit = (margin(z, y) < 0) & (f > adv_f)
        adv_x[hit], adv_f[hit] = cur[hit], f[hit]
        if k == spec.iters:
            break
        if k in checkpoints:
            stalled = apgd_stalled(improved, k - last_ck, eta, eta_ck, best_f, best_ck)
            eta[stalled] /= 2
            cur = cur.copy()
            cur[stalled], g[stalled], f[stalled] = best_x[stalled], best_g[stalled], best_f[stalled]
            prev = prev.copy()
            prev[stalled] = cur[stalled]
            improved[:] = 0
            last_ck, eta_ck, best_ck = k, eta.copy(), best_f.copy()
        target = project(cur + eta.reshape(shape) * np.sign(g), x, eps)
        nxt = project(cur + APGD_MOMENTUM * (target - cur) + (1 - APGD_MOMENTUM) * (cur - prev), x, eps)
        prev, cur, f_prev = cur, nxt, f
    found = adv_f > -np.inf
    final = np.where(found.reshape(shape), adv_x, best_x)
    return _batch(model, x, final, y)


def autoattack_ensemble(model, x, y, spec: AttackSpec, stream: int = 0) -> AdversarialBatch:
    """APGD-CE, then APGD-DLR, then Square, each run only on samples its predecessors left unbroken."""
    x, y = check_inputs(x, y)
    n = len(x)
    adv = x.copy()
    who = np.array([""] * n, dtype=object)
    queries = np.zeros(n, dtype=np.int64)
    remaining = np.arange(n)
    members = [("apgd_ce", "ce"), ("apgd_dlr", "dlr"), ("square", None)]
    for name, loss in members:
        if not remaining.size:
            break
        if loss == "dlr" and logits(model, x[:1]).shape[1] < 3:
            continue
        member = spec.replace(family=name)
        if loss is None:
            oracle = LogitsOracle(lambda a: logits(model, a), len(remaining), member.query_budget)
            out = square_attack(oracle, x[remaining], y[remaining], member, stream)
            queries[remaining] = out.queries
        else:
            out = apgd(model, x[remaining], y[remaining], member, loss, stream)
        adv[remaining] = out.adversarials
        broke = out.success
        who[remaining[broke]] = name
        remaining = remaining[~broke]
    return _batch(model, x, adv, y, queries=queries, attribution=who.tolist())


def _class_gradients(model, x):
    """Logits and the gradient of every logit w.r.t. the input: shapes (n, K) and (K, n, ...)."""
    with _frozen(model):
        xt = G.Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
        z = model(xt)
        grads = []
        for k in range(z.shape[1]):
            G.backward(G.tsum(z[:, k]))
            grads.append(xt.grad.astype(np.float64))
    return z.data.astype(np.float64), np.stack(grads)


def deepfool(model, x, y=None, overshoot: float = 0.02, max_iter: int = 50) -> AdversarialBatch:
    """Repeated steps onto the nearest linearised decision boundary (L2).

    Stops per sample once the prediction leaves its initial class; the accumulated step is
    scaled by ``1 + overshoot``. Samples that never flip keep their perturbation.
    """
    x = np.asarray(x, dtype=np.float32)
    start = logits(model, x).argmax(axis=1)
    y = start if y is None else y
    x, y = check_inputs(x, y)
    adv = x.copy()
    total = np.zeros(x.shape, dtype=np.float64)
    active = np.ones(len(x), dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        z, jac = _class_gradients(model, adv[idx])
        if z.shape[1] < 2:
            raise AttackError("DeepFool needs at least two classes")
        orig = start[idx]
        flipped = z.argmax(axis=1) != orig
        active[idx[flipped]] = False
        keep = ~flipped
        idx, z, jac, orig = idx[keep], z[keep], jac[:, keep], orig[keep]
        if not idx.size:
            break
        rows = _rows(len(idx))
        f = z - z[rows, orig][:, None]
        w = jac - jac[orig, rows][None]
        norms = np.sqrt((w.reshape(w.shape[0], w.shape[1], -1) ** 2).sum(axis=2)).T
        ratio = np.abs(f) / np.maximum(norms, 1e-12)
        ratio[rows, orig] = np.inf
        nearest = ratio.argmin(axis=1)
        w_l = w[nearest, rows]
        scale = np.abs(f[rows, nearest]) / np.maximum(norms[rows, nearest] ** 2, 1e-24)
        total[idx] += scale.reshape(-1, 1, 1, 1) * w_l
        adv[idx] = np.clip(x[idx] + (1 + overshoot) * total[idx], 0.0, 1.0)
    return _batch(model, x, adv, y)


def cw_l2(model, x, y, c: float = 1.0, kappa: float = 0.0, iters: int = 100, lr: float = 0.01) -> AdversarialBatch:
    """Adam on ``||x' - x||^2 + c * max(z_y - max_{i != y} z_i, -kappa)`` with ``x' = (tanh(w) + 1) / 2``.

    Returns the least-distorted misclassified iterate per sample, or the input where none was found.
    """
    if iters < 1:
        raise AttackError(f"CW needs iters >= 1, got {iters}")
    x, y = check_inputs(x, y)
    n = len(x)
    rows = _rows(n)
    w0 = np.arctanh(np.clip(2.0 * x.astype(np.float64) - 1.0, -1 + 1e-6, 1 - 1e-6)).astype(np.float32)
    var = G.ParameterSet({"w": G.Tensor(w0, requires_grad=True)})
    best = x.copy()
    best_dist = np.full(n, np.inf)
    with _frozen(model):
        for it in range(iters + 1):
            xp = (G.tanh(var["w"]) + 1.0) * 0.5
            z = model(xp)
            diff = xp - x
            dist = G.tsum(G.reshape(diff * diff, (n, -1)), axis=1)
            other = z.data.astype(np.float64).copy()
            other[rows, y] = -np.inf
            gap = z[rows, y] - z[rows, other.argmax(axis=1)]
            objective = G.tsum(dist + c * G.maximum(gap, -kappa))
            if not np.isfinite(objective.data):
                raise AttackError(f"CW objective became non-finite at iteration {it}")
            ok = (z.data.argmax(axis=1) != y) & (dist.data < best_dist)
            best[ok], best_dist[ok] = xp.data[ok], dist.data[ok]
            if it == iters:
                break
            G.backward(objective, params=var)
            G.adam_step(var, lr=lr)
    return _batch(model, x, np.clip(best, 0.0, 1.0), y)
