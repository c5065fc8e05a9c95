import ast
import inspect
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adfp import attacks as A
from adfp import grad as G
from adfp.attacks import blackbox
from adfp.data import LabeledImageSet


class Affine:
    """logits = flatten(x) @ W + b; a differentiable stand-in victim."""

    def __init__(self, W, b=None):
        self.W = np.asarray(W, dtype=np.float32)
        self.b = np.zeros(self.W.shape[1], np.float32) if b is None else np.asarray(b, np.float32)

    def __call__(self, x):
        return G.reshape(x, (x.shape[0], -1)) @ self.W + self.b


def random_affine(seed, shape=(3, 8, 8), classes=10, scale=1.0):
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    return Affine(rng.standard_normal((d, classes)) * scale / np.sqrt(d), rng.standard_normal(classes) * 0.1)


def images(seed, n=6, shape=(3, 8, 8)):
    return np.random.default_rng(seed).random((n,) + shape, dtype=np.float32)


def oracle_for(model, n, budget=None):
    return A.LogitsOracle(lambda a: A.logits(model, a), n, budget)


def assert_in_ball(adv, x, eps):
    assert np.abs(adv.astype(np.float64) - x).max() <= eps + 1e-6
    assert adv.min() >= 0 and adv.max() <= 1


# -- spec ---------------------------------------------------------------------------

def test_spec_json_roundtrip():
    spec = A.AttackSpec("masked_pgd", 4 / 255, alpha=1 / 255, iters=7, patch=(1, 2, 3, 4), seed=9)
    again = A.AttackSpec.from_json(spec.to_json())
    assert again == spec and again.patch == (1, 2, 3, 4)


@pytest.mark.parametrize("kwargs", [
    {"family": "nope"}, {"family": "pgd", "epsilon": 1.5}, {"family": "pgd", "epsilon": -0.1},
    {"family": "pgd", "alpha": 0.0}, {"family": "pgd", "iters": 0}, {"family": "square", "query_budget": 0},
    {"family": "masked_pgd", "patch": (0, 0, -1, 2)}, {"family": "fgsm", "epsilon": None},
])
def test_spec_validation(kwargs):
    with pytest.raises(A.AttackError):
        A.AttackSpec(**kwargs)


def test_unknown_spec_field_rejected():
    with pytest.raises(A.AttackError, match="bogus"):
        A.AttackSpec.from_dict({"family": "fgsm", "bogus": 1})


def test_default_grid_budgets():
    grid = A.default_grid()
    eps = {(s.family, round(s.epsilon * 255, 6)) for s in grid if s.family in ("fgsm", "pgd", "autoattack", "square")}
    assert eps == {(f, k) for f in ("fgsm", "pgd", "autoattack") for k in (1, 2, 4, 8)} | {("square", k) for k in (2, 4, 8)}
    assert {s.epsilon for s in grid if s.family in ("nes", "bandits")} == {0.05}


# -- FGSM / PGD ------------------------------------------------------------------------

def test_fgsm_zero_epsilon_is_identity():
    x = images(0)
    y = np.arange(len(x)) % 10
    out = A.fgsm(random_affine(0), x, y, 0.0)
    assert out.adversarials.tobytes() == x.tobytes()


def test_fgsm_one_pixel_logistic_direction():
    # logits (0, w x): cross-entropy of class 0 is log(1 + exp(w x)), increasing in x for w > 0
    model = Affine([[0.0, 2.0]])
    x = np.full((1, 1, 1, 1), 0.5, np.float32)
    out = A.fgsm(model, x, np.array([0]), 0.1)
    assert out.adversarials.item() - 0.5 == pytest.approx(0.1, abs=1e-7)


def test_fgsm_interior_step_is_exactly_epsilon():
    eps = 4 / 255
    x = (np.random.default_rng(1).random((4, 3, 8, 8)) * 0.8 + 0.1).astype(np.float32)
    model = random_affine(1)
    out = A.fgsm(model, x, np.arange(4), eps)
    _, g, _ = A.loss_and_gradient(model, x, np.arange(4))
    moved = np.abs(out.adversarials.astype(np.float64) - x)[g != 0]
    np.testing.assert_allclose(moved, eps, atol=1e-6)


def test_fgsm_rejects_negative_epsilon():
    with pytest.raises(A.AttackError):
        A.fgsm(random_affine(0), images(0), np.zeros(6, int), -0.1)


def test_pgd_single_step_without_start_equals_fgsm():
    x, y, model = images(2), np.arange(6) % 10, random_affine(2)
    eps = 8 / 255
    a = A.pgd(model, x, y, A.AttackSpec("pgd", eps, alpha=eps, iters=1, random_start=False))
    b = A.fgsm(model, x, y, eps)
    assert a.adversarials.tobytes() == b.adversarials.tobytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.sampled_from([0.0, 1 / 255, 8 / 255, 0.1, 0.5]),
       iters=st.integers(1, 5), family=st.sampled_from(["pgd", "masked_pgd", "apgd_ce", "apgd_dlr"]))
def test_white_box_outputs_stay_in_ball(seed, eps, iters, family):
    x, model = images(seed), random_affine(seed, scale=5.0)
    y = np.arange(6) % 10
    spec = A.AttackSpec(family, eps, alpha=eps / 2 or None, iters=max(iters, 2), patch=(2, 1, 4, 5), seed=seed)
    out = A.run_attack(model, x, y, spec)
    assert_in_ball(out.adversarials, x, eps)


def test_pgd_seeded():
    x, y, model = images(3), np.arange(6) % 10, random_affine(3)
    spec = A.AttackSpec("pgd", 8 / 255, iters=3, seed=4)
    assert A.pgd(model, x, y, spec).adversarials.tobytes() == A.pgd(model, x, y, spec).adversarials.tobytes()
    other = A.pgd(model, x, y, spec.replace(seed=5))
    assert other.adversarials.tobytes() != A.pgd(model, x, y, spec).adversarials.tobytes()


# -- masked PGD ------------------------------------------------------------------------

def test_masked_pgd_full_patch_equals_pgd():
    x, y, model = images(4), np.arange(6) % 10, random_affine(4)
    spec = A.AttackSpec("masked_pgd", 8 / 255, iters=3, patch=(0, 0, 8, 8), seed=2)
    a = A.masked_pgd(model, x, y, spec)
    b = A.pgd(model, x, y, spec.replace(family="pgd", patch=None))
    assert a.adversarials.tobytes() == b.adversarials.tobytes()


def test_masked_pgd_zero_area_patch_is_identity():
    x = images(5)
    out = A.masked_pgd(random_affine(5), x, np.zeros(6, int), A.AttackSpec("masked_pgd", 0.1, patch=(3, 3, 0, 0)))
    assert out.adversarials.tobytes() == x.tobytes()


def test_masked_pgd_touches_only_patch():
    x = images(6, n=4, shape=(3, 32, 32))
    model = random_affine(6, shape=(3, 32, 32), scale=5.0)
    out = A.masked_pgd(model, x, np.arange(4), A.AttackSpec("masked_pgd", 8 / 255, iters=5, patch=(10, 4, 8, 8)))
    diff = out.adversarials != x
    assert diff.reshape(4, -1).sum(axis=1).max() <= 192
    outside = np.ones((32, 32), bool)
    outside[10:18, 4:12] = False
    assert not diff[:, :, outside].any()


def test_masked_pgd_patch_errors():
    x = images(0)
    with pytest.raises(A.AttackError, match="patch"):
        A.masked_pgd(random_affine(0), x, np.zeros(6, int), A.AttackSpec("masked_pgd", 0.1))
    with pytest.raises(A.AttackError, match="exceeds"):
        A.masked_pgd(random_affine(0), x, np.zeros(6, int), A.AttackSpec("masked_pgd", 0.1, patch=(4, 4, 5, 2)))


# -- DLR / APGD ------------------------------------------------------------------------------

def test_dlr_hand_values():
    z = np.array([[4.0, 3.0, 2.0, 1.0]] * 2)
    np.testing.assert_allclose(A.dlr_loss(z, np.array([0, 1])), [0.5, -0.5], rtol=0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-100, 100))
def test_dlr_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((5, 6))
    y = rng.integers(0, 6, 5)
    np.testing.assert_allclose(A.dlr_loss(z + shift, y), A.dlr_loss(z, y), rtol=1e-9, atol=1e-9)


def test_dlr_degenerate_and_too_few_classes():
    with pytest.raises(A.AttackError, match="third-largest"):
        A.dlr_loss(np.array([[1.0, 1.0, 1.0, 0.0]]), np.array([0]))
    with pytest.raises(A.AttackError, match="three classes"):
        A.dlr_loss(np.array([[1.0, 0.0]]), np.array([0]))


def test_dlr_gradient_matches_finite_differences():
    model = random_affine(7, shape=(1, 2, 2), classes=5, scale=3.0)
    x = images(7, n=3, shape=(1, 2, 2)).astype(np.float64)
    y = np.array([0, 2, 4])
    _, g, _ = A.loss_and_gradient(model, x, y, "dlr")
    h = 1e-3
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        zp, zm = A.logits(model, xp).astype(np.float64), A.logits(model, xm).astype(np.float64)
        num[idx] = (-A.dlr_loss(zp, y)[idx[0]] + A.dlr_loss(zm, y)[idx[0]]) / (2 * h)
    np.testing.assert_allclose(g, num, atol=2e-3)


def test_apgd_no_halving_when_every_step_improves():
    span = 9
    stalled = A.apgd_stalled(np.full(4, span), span, np.full(4, 0.1), np.full(4, 0.1),
                             np.array([2.0, 3.0, 4.0, 5.0]), np.array([1.0, 1.0, 1.0, 1.0]))
    assert not stalled.any()


def test_apgd_halving_rules():
    eta = np.full(3, 0.1)
    stalled = A.apgd_stalled(np.array([1, 9, 9]), 10, eta, np.array([0.1, 0.1, 0.2]),
                             np.array([2.0, 1.0, 1.0]), np.array([1.0, 1.0, 1.0]))
    assert stalled.tolist() == [True, True, False]


def test_apgd_every_iterate_in_ball():
    x, y, model = images(8), np.arange(6) % 10, random_affine(8, scale=4.0)
    trace = []
    eps = 4 / 255
    A.apgd(model, x, y, A.AttackSpec("apgd_ce", eps, iters=20, seed=1), trace=trace)
    assert len(trace) == 21
    for iterate, eta in trace:
        assert_in_ball(iterate, x, eps)
        assert np.all(eta <= 2 * eps)


def test_apgd_needs_two_iterations():
    with pytest.raises(A.AttackError):
        A.apgd(random_affine(0), images(0), np.zeros(6, int), A.AttackSpec("apgd_ce", 0.1, iters=1))


def test_autoattack_hand_over():
    x, model = images(9, n=12), random_affine(9, scale=3.0)
    y = A.logits(model, x).argmax(axis=1)
    spec = A.AttackSpec("autoattack", 2 / 255, iters=10, query_budget=50, seed=3)
    ens = A.autoattack_ensemble(model, x, y, spec)
    ce = A.apgd(model, x, y, spec.replace(family="apgd_ce"), "ce")
    assert set(np.flatnonzero(ce.success)) <= set(np.flatnonzero(ens.success))
    for i in np.flatnonzero(ce.success):
        assert ens.attribution[i] == "apgd_ce"
        assert ens.adversarials[i].tobytes() == ce.adversarials[i].tobytes()
        assert ens.queries[i] == 0
    for i in range(len(x)):
        assert (ens.attribution[i] != "") == bool(ens.success[i])
    assert_in_ball(ens.adversarials, x, spec.epsilon)


# -- DeepFool / CW ---------------------------------------------------------------------

def test_deepfool_affine_binary_closed_form():
    rng = np.random.default_rng(10)
    w = rng.standard_normal(12) * 0.5
    b = 0.4
    model = Affine(np.stack([np.zeros(12), w], axis=1), [0.0, b])
    x = (0.4 + 0.2 * rng.random((1, 3, 2, 2))).astype(np.float32)
    f = float(x.reshape(-1).astype(np.float64) @ w + b)
    out = A.deepfool(model, x)
    expected = -(1 + 0.02) * (f / (w @ w)) * w
    np.testing.assert_allclose(out.adversarials.reshape(-1) - x.reshape(-1), expected, atol=1e-5)
    assert out.pred_after[0] != out.pred_before[0]


def test_deepfool_on_boundary_barely_moves():
    w = np.array([1.0, -1.0, 0.5, 0.5])
    model = Affine(np.stack([np.zeros(4), w], axis=1))
    x = np.full((1, 1, 2, 2), 0.5, np.float32)
    x[0, 0, 1, :] = [0.3, 0.3]  # w . x = 0.5 - 0.5 + 0.15 + 0.15 - 0.3 ... shifted below
    x[0, 0, 0, :] = [0.5, 0.8]  # w . x = 0.5 - 0.8 + 0.15 + 0.15 = 0
    out = A.deepfool(model, x, max_iter=3)
    assert np.abs(out.adversarials - x).max() < 1e-6


def test_deepfool_output_clamped():
    x, model = images(11), random_affine(11, scale=20.0)
    out = A.deepfool(model, x)
    assert out.adversarials.min() >= 0 and out.adversarials.max() <= 1


def test_cw_already_misclassified_has_zero_distortion():
    x, model = images(12), random_affine(12)
    wrong = (A.logits(model, x).argmax(axis=1) + 1) % 10
    out = A.cw_l2(model, x, wrong, c=1.0, kappa=0.0, iters=5)
    assert out.success.all()
    assert out.l2().max() < 1e-4


def test_cw_outputs_in_range_and_successes_flip():
    x, model = images(13), random_affine(13, scale=5.0)
    y = A.logits(model, x).argmax(axis=1)
    out = A.cw_l2(model, x, y, c=5.0, iters=30, lr=0.05)
    assert out.adversarials.min() >= 0 and out.adversarials.max() <= 1
    assert out.success.any()
    kept = ~out.success
    assert out.adversarials[kept].tobytes() == x[kept].tobytes()


# -- black box -------------------------------------------------------------------------

def test_black_box_module_has_no_gradient_path():
    tree = ast.parse(inspect.getsource(blackbox))
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            imported.add((node.module or "") + ":" + ",".join(a.name for a in node.names))
        elif isinstance(node, ast.Import):
            imported.update(a.name for a in node.names)
    assert all("grad" not in m and "models" not in m and "whitebox" not in m for m in imported), imported
    names = {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}
    names |= {n.attr for n in ast.walk(tree) if isinstance(n, ast.Attribute)}
    assert not names & {"backward", "Tensor", "loss_and_gradient", "grad"}


@pytest.mark.parametrize("attack", [blackbox.square_attack, blackbox.nes_attack, blackbox.bandits_attack])
def test_black_box_attacks_require_oracle(attack):
    with pytest.raises(TypeError, match="LogitsOracle"):
        attack(random_affine(0), images(0), np.zeros(6, int), A.AttackSpec("square", 0.1))


def test_oracle_counts_every_row():
    oracle = oracle_for(random_affine(0), 3)
    oracle.query(images(0, n=3), [0, 1, 2])
    oracle.query(images(0, n=2), [2, 2])
    assert oracle.queries.tolist() == [1, 1, 3]
    oracle.evaluate(images(0, n=3))
    assert oracle.queries.tolist() == [1, 1, 3]


def test_oracle_budget_enforced():
    oracle = oracle_for(random_affine(0), 2, budget=2)
    oracle.query(images(0, n=2), [0, 0])
    with pytest.raises(A.QueryBudgetError):
        oracle.query(images(0, n=1), [0])
    assert oracle.queries.tolist() == [2, 0]


@pytest.mark.parametrize("family,budget", [("square", 37), ("nes", 200), ("bandits", 40)])
def test_black_box_query_accounting_and_ball(family, budget):
    x, model = images(14, n=5), random_affine(14, scale=2.0)
    y = A.logits(model, x).argmax(axis=1)
    spec = A.AttackSpec(family, 0.05, alpha=0.01, iters=3, samples=4, query_budget=budget, seed=1)
    oracle = oracle_for(model, len(x), budget)
    out = {"square": A.square_attack, "nes": A.nes_attack, "bandits": A.bandits_attack}[family](oracle, x, y, spec)
    assert np.all(out.queries <= budget) and out.queries.tolist() == oracle.queries.tolist()
    assert_in_ball(out.adversarials, x, spec.epsilon)
    unbroken = ~out.success
    if family == "square":
        assert np.all(out.queries[unbroken] == budget)
    if family == "bandits":
        assert np.all(out.queries[unbroken] == budget - budget % 3)
    if family == "nes":
        assert np.all(out.queries[unbroken] == 3 * (2 * 4 + 1))


def test_square_margin_never_increases():
    x, model = images(15, n=4), random_affine(15, scale=2.0)
    y = A.logits(model, x).argmax(axis=1)
    trace = []
    A.square_attack(oracle_for(model, 4), x, y, A.AttackSpec("square", 0.03, query_budget=200), trace=trace)
    steps = np.stack(trace)
    assert np.all(np.diff(steps, axis=0) <= 0)


def test_square_fraction_schedule():
    assert A.square_fraction(0, 10_000) == pytest.approx(0.05)
    assert A.square_fraction(11, 10_000) == pytest.approx(0.025)
    assert A.square_fraction(9_000, 10_000) == pytest.approx(0.05 / 512)
    assert A.square_fraction(500, 1000) == pytest.approx(0.05 / 128)


def test_nes_gradient_unbiased_on_quadratic():
    x = np.array([0.3, -1.2, 0.8, 2.0, -0.5])
    rng = np.random.default_rng(16)
    est = np.mean([A.nes_gradient(lambda p: (p ** 2).sum(axis=1), x, 0.01, 2, rng) for _ in range(10_000)], axis=0)
    assert np.linalg.norm(est - 2 * x) <= 0.05 * np.linalg.norm(2 * x)


def test_nes_constant_loss_does_not_move():
    x = images(17, n=2)
    oracle = A.LogitsOracle(lambda a: np.zeros((len(a), 10)), 2)
    out = A.nes_attack(oracle, x, np.array([0, 1]), A.AttackSpec("nes", 0.05, alpha=0.01, iters=2, samples=4))
    assert out.adversarials.tobytes() == x.tobytes()


def test_nes_argument_checks():
    rng = np.random.default_rng(0)
    with pytest.raises(A.AttackError):
        A.nes_gradient(lambda p: p.sum(axis=1), np.zeros(3), 0.0, 2, rng)
    with pytest.raises(A.AttackError):
        A.nes_gradient(lambda p: p.sum(axis=1), np.zeros(3), 0.1, 3, rng)


def test_bandit_prior_aligns_with_gradient():
    tile = 4
    rng = np.random.default_rng(18)
    coarse = rng.standard_normal((1, 3, 2, 2))
    w = np.repeat(np.repeat(coarse, tile, axis=-2), tile, axis=-1)
    x = np.full((1, 3, 8, 8), 0.5)
    prior = np.zeros((1, 3, 2, 2))
    for _ in range(100):
        prior = A.bandit_prior_step(lambda imgs: (imgs * w).reshape(len(imgs), -1).sum(axis=1), x, prior, rng,
                                    exploration=1e-3, fd_eta=0.1, prior_lr=0.1, tile=tile)
    cos = float((prior * coarse).sum() / (np.linalg.norm(prior) * np.linalg.norm(coarse)))
    assert cos > 0.5


def test_bandits_tile_must_divide_image():
    with pytest.raises(A.AttackError, match="tile"):
        A.bandits_attack(oracle_for(random_affine(0), 6), images(0), np.zeros(6, int),
                         A.AttackSpec("bandits", 0.05, tile=3))


# -- attack datasets ---------------------------------------------------------------------

def _benign(model, n=120, seed=19):
    x = images(seed, n=n)
    y = A.logits(model, x).argmax(axis=1)
    y[:5] = (y[:5] + 1) % 10  # a few clean errors
    return LabeledImageSet(x, y, ids=np.arange(1000, 1000 + n), split="test")


def test_attack_dataset_filters_successes():
    model = random_affine(19, scale=3.0)
    benign = _benign(model)
    adv, manifest = A.build_attack_dataset(model, benign, A.AttackSpec("fgsm", 8 / 255))
    assert manifest["clean_correct"] == 115 and manifest["attempted"] == 115
    assert len(adv) == manifest["kept"] > 0
    assert not set(adv.ids.tolist()) & set(range(1000, 1005))
    assert np.all(A.logits(model, adv.images).argmax(axis=1) != adv.labels)
    assert adv.provenance.family == "fgsm" and adv.provenance.epsilon == pytest.approx(8 / 255)
    src = benign.images[np.searchsorted(benign.ids, adv.ids)]
    assert_in_ball(adv.images, src, 8 / 255)


def test_attack_dataset_zero_epsilon_is_empty():
    model = random_affine(20)
    adv, manifest = A.build_attack_dataset(model, _benign(model, seed=20), A.AttackSpec("fgsm", 0.0))
    assert len(adv) == 0 and manifest["kept"] == 0


def test_attack_dataset_deterministic_and_limited(caplog):
    model = random_affine(21, scale=3.0)
    benign = _benign(model, seed=21)
    spec = A.AttackSpec("pgd", 4 / 255, iters=3, seed=5)
    a, _ = A.build_attack_dataset(model, benign, spec)
    b, _ = A.build_attack_dataset(model, benign, spec)
    assert a.images.tobytes() == b.images.tobytes() and a.ids.tolist() == b.ids.tolist()
    c, manifest = A.build_attack_dataset(model, benign, spec, limit=10_000)
    assert manifest["shortfall"] == 10_000 - len(c)
    assert "requested" in caplog.text


def test_attack_manifest_written(tmp_path):
    model = random_affine(22, scale=3.0)
    adv, manifest = A.build_attack_dataset(model, _benign(model, seed=22), A.AttackSpec("square", 8 / 255, query_budget=20))
    A.save_attack_dataset(adv, manifest, tmp_path / "sq")
    saved = json.loads((tmp_path / "sq" / "attack.json").read_text())
    assert {"family", "epsilon", "success_rate", "mean_queries"} <= set(saved)
    assert saved["mean_queries"] > 0
