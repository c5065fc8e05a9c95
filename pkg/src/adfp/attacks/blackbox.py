"""Score-based black-box attacks. They see the victim only through ``LogitsOracle``."""

from __future__ import annotations

import math

import numpy as np

from .spec import AdversarialBatch, AttackError, AttackSpec, check_inputs, margin, project

SQUARE_P_INIT = 0.05
# (fraction of budget x 10000, divisor of the initial square fraction)
SQUARE_SCHEDULE = ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32), (4000, 64),
                   (6000, 128), (8000, 256))


class QueryBudgetError(RuntimeError):
    pass


class LogitsOracle:
    """Logits-only access to a classifier with exact per-sample query accounting."""

    def __init__(self, logits_fn, n: int, budget: int | None = None):
        self._logits_fn = logits_fn
        self.queries = np.zeros(n, dtype=np.int64)
        self.budget = budget

    def query(self, images: np.ndarray, index) -> np.ndarray:
        """Logits for ``images``; row ``k`` is charged to sample ``index[k]``."""
        index = np.broadcast_to(np.asarray(index, dtype=np.int64), (len(images),))
        charge = np.bincount(index, minlength=len(self.queries))
        if self.budget is not None and np.any(self.queries + charge > self.budget):
            worst = int(np.argmax(self.queries + charge))
            raise QueryBudgetError(f"sample {worst} would exceed the query budget of {self.budget}")
        self.queries += charge
        return np.asarray(self._logits_fn(np.asarray(images, dtype=np.float32)), dtype=np.float64)

    def evaluate(self, images: np.ndarray) -> np.ndarray:
        """Uncharged predictions, used only to report before/after labels."""
        return np.asarray(self._logits_fn(np.asarray(images, dtype=np.float32))).argmax(axis=1)


def _require_oracle(oracle):
    if not isinstance(oracle, LogitsOracle):
        raise TypeError(f"black-box attacks take a LogitsOracle, got {type(oracle).__name__}")


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(z)), y]


def _finish(oracle, x, adv, y) -> AdversarialBatch:
    return AdversarialBatch(x, adv, y, oracle.evaluate(x), oracle.evaluate(adv), queries=oracle.queries.copy())


# -- Square ------------------------------------------------------------------------

def square_fraction(iteration: int, budget: int, p_init: float = SQUARE_P_INIT) -> float:
    """Fraction of the image covered by the square at ``iteration`` out of ``budget``."""
    progress = int(iteration / budget * 10000)
    divisor = 512
    for bound, d in SQUARE_SCHEDULE:
        if progress <= bound:
            divisor = d
            break
    return p_init / divisor


def square_attack(oracle: LogitsOracle, x, y, spec: AttackSpec, stream: int = 0, trace: list | None = None):
    """Random search over square windows set to +-epsilon per channel.

    One query initialises vertical stripes, then one query per iteration per unbroken sample;
    a candidate is kept only if it strictly lowers the margin.
    """
    _require_oracle(oracle)
    x, y = check_inputs(x, y)
    rng = spec.rng(stream)
    eps = spec.epsilon
    n, c, h, w = x.shape
    budget = spec.query_budget
    best = project(x + eps * rng.choice([-1.0, 1.0], size=(n, c, 1, w)), x, eps)
    loss = margin(oracle.query(best, np.arange(n)), y)
    if trace is not None:
        trace.append(loss.copy())
    rows = np.arange(h)[None, :, None]
    cols = np.arange(w)[None, None, :]
    for it in range(1, budget):
        active = np.flatnonzero(loss > 0)
        if not active.size:
            break
        side = max(int(round(math.sqrt(square_fraction(it, budget) * h * w))), 1)
        side = min(side, h - 1, w - 1) if min(h, w) > 1 else 1
        k = len(active)
        top = rng.integers(0, h - side + 1, size=k)[:, None, None]
        left = rng.integers(0, w - side + 1, size=k)[:, None, None]
        window = ((rows >= top) & (rows < top + side) & (cols >= left) & (cols < left + side))[:, None]
        xa, cur = x[active], best[active]
        signs = rng.choice([-1.0, 1.0], size=(k, c, 1, 1))
        cand = project(np.where(window, xa + eps * signs, cur), xa, eps)
        # redraw windows that would not change the current iterate (bounded retries)
        for _ in range(10):
            stale = np.flatnonzero(np.all(np.abs(cand - cur) < 1e-7, axis=(1, 2, 3)))
            if not stale.size:
                break
            signs = rng.choice([-1.0, 1.0], size=(len(stale), c, 1, 1))
            cand[stale] = project(np.where(window[stale], xa[stale] + eps * signs, cur[stale]), xa[stale], eps)
        new_loss = margin(oracle.query(cand, active), y[active])
        better = new_loss < loss[active]
        best[active[better]] = cand[better]
        loss[active[better]] = new_loss[better]
        if trace is not None:
            trace.append(loss.copy())
    return _finish(oracle, x, best, y)


# -- NES ---------------------------------------------------------------------------

def nes_gradient(loss_fn, x: np.ndarray, sigma: float, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Antithetic Gaussian estimate of the gradient of ``loss_fn`` at ``x`` from ``2 * samples`` evaluations.

    ``loss_fn`` maps a stack of points to one loss each.
    """
    if sigma <= 0:
        raise AttackError(f"smoothing sigma must be > 0, got {sigma}")
    if samples < 2 or samples % 2:
        raise AttackError(f"NES needs an even number of directions >= 2, got {samples}")
    u = rng.standard_normal((samples,) + x.shape)
    losses = np.asarray(loss_fn(np.concatenate([x + sigma * u, x - sigma * u])), dtype=np.float64)
    diff = losses[:samples] - losses[samples:]
    return np.tensordot(diff, u, axes=1) / (2 * sigma * samples)


def nes_attack(oracle: LogitsOracle, x, y, spec: AttackSpec, stream: int = 0):
    """Sign steps along the NES gradient estimate of the cross-entropy.

    Each iteration costs ``2 * samples`` estimation queries plus one query to check the new iterate.
    """
    _require_oracle(oracle)
    x, y = check_inputs(x, y)
    if spec.sigma <= 0:
        raise AttackError(f"smoothing sigma must be > 0, got {spec.sigma}")
    rng = spec.rng(stream)
    adv = x.copy()
    broken = np.zeros(len(x), dtype=bool)
    per_iter = 2 * spec.samples + 1
    for _ in range(spec.iters):
        active = np.flatnonzero(~broken & (oracle.queries + per_iter <= spec.query_budget))
        if not active.size:
            break
        for i in active:
            g = nes_gradient(lambda pts: _cross_entropy(oracle.query(pts, i), np.full(len(pts), y[i])),
                             adv[i].astype(np.float64), spec.sigma, spec.samples, rng)
            adv[i] = project(adv[i] + spec.step * np.sign(g), x[i], spec.epsilon)
        broken[active] = margin(oracle.query(adv[active], active), y[active]) < 0
    return _finish(oracle, x, adv, y)


# -- Bandits -----------------------------------------------------------------------

def _upsample(v: np.ndarray, tile: int) -> np.ndarray:
    return np.repeat(np.repeat(v, tile, axis=-2), tile, axis=-1)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.sqrt((v.reshape(len(v), -1) ** 2).sum(axis=1)).reshape((-1,) + (1,) * (v.ndim - 1))
    return v / np.maximum(norm, 1e-12)


def bandit_prior_step(loss_fn, x: np.ndarray, prior: np.ndarray, rng: np.random.Generator, exploration: float,
                      fd_eta: float, prior_lr: float, tile: int) -> np.ndarray:
    """One round of prior refinement from two antithetic finite-difference evaluations.

    The loss is probed at ``x + fd_eta * (prior_unit +- exploration * u)``; the resulting slope along
    ``u`` times ``u`` is an unbiased gradient estimate, folded into the prior as an exponential
    moving average with weight ``prior_lr``. ``prior`` lives at tile resolution.
    """
    u = rng.standard_normal(prior.shape)
    centre = _unit(prior)
    l1 = np.asarray(loss_fn(x + fd_eta * _upsample(centre + exploration * u, tile)), dtype=np.float64)
    l2 = np.asarray(loss_fn(x + fd_eta * _upsample(centre - exploration * u, tile)), dtype=np.float64)
    slope = (l1 - l2) / (2 * fd_eta * exploration)
    return (1 - prior_lr) * prior + prior_lr * slope.reshape((-1,) + (1,) * (prior.ndim - 1)) * u


def bandits_attack(oracle: LogitsOracle, x, y, spec: AttackSpec, stream: int = 0):
    """Sign steps along an upsampled, online-updated gradient prior. Three queries per round."""
    _require_oracle(oracle)
    x, y = check_inputs(x, y)
    if spec.exploration <= 0 or spec.fd_eta <= 0:
        raise AttackError("bandits needs exploration > 0 and fd_eta > 0")
    n, c, h, w = x.shape
    td = spec.tile
    if h % td or w % td:
        raise AttackError(f"tile size {td} must divide the image size {h}x{w}")
    rng = spec.rng(stream)
    adv = x.copy()
    prior = np.zeros((n, c, h // td, w // td))
    broken = np.zeros(n, dtype=bool)
    while True:
        active = np.flatnonzero(~broken & (oracle.queries + 3 <= spec.query_budget))
        if not active.size:
            break

        def loss_fn(images, idx=active):
            return _cross_entropy(oracle.query(np.clip(images, 0.0, 1.0), idx), y[idx])

        prior[active] = bandit_prior_step(loss_fn, adv[active].astype(np.float64), prior[active], rng,
                                          spec.exploration, spec.fd_eta, spec.prior_lr, td)
        adv[active] = project(adv[active] + spec.step * np.sign(_upsample(prior[active], td)),
                              x[active], spec.epsilon)
        broken[active] = margin(oracle.query(adv[active], active), y[active]) < 0
    return _finish(oracle, x, adv, y)
