"""Comparative and trend oracles that need the trained smoke victim, denoiser and reports."""

import json

import numpy as np
import pytest

from adfp import attacks as A
from adfp.data import load_dataset, split_dataset
from adfp.models import Classifier


@pytest.fixture(scope="module")
def victim(smoke_run):
    return Classifier.load(smoke_run.root / "checkpoints" / "victim.adf")


@pytest.fixture(scope="module")
def benign(smoke_run):
    return load_dataset(smoke_run.root / "data" / "benign")


@pytest.fixture(scope="module")
def held_out(smoke_run, benign, victim):
    """Correctly classified images from the victim's test split."""
    _, _, test = split_dataset(benign, smoke_run.config.seed)
    keep = np.flatnonzero(A.logits(victim, test.images).argmax(axis=1) == test.labels)
    return test.subset(keep)


def _history(smoke_run, name):
    return json.loads((smoke_run.root / "checkpoints" / name).read_text())


def test_victim_reaches_ninety_percent_within_thirty_epochs(smoke_run):
    history = _history(smoke_run, "victim_history.json")
    assert len(history) <= 30
    assert max(r["val_accuracy"] for r in history) >= 0.90


def test_denoiser_loss_halves(smoke_run):
    losses = [r["loss"] for r in _history(smoke_run, "dm_history.json") if "loss" in r]
    assert losses[-1] <= 0.5 * losses[0]


@pytest.mark.xfail(strict=True, reason="DDIM roundtrip error is smallest for a near-constant noise predictor and "
                                       "does not fall monotonically with training at this scale")
def test_denoiser_norm_contract(smoke_run):
    errors = [r["probe_error"] for r in _history(smoke_run, "dm_history.json") if "probe_error" in r]
    assert len(errors) >= 3
    rises = sum(b >= a for a, b in zip(errors, errors[1:]))
    assert rises <= 1, errors


def test_pgd_at_least_fgsm(victim, held_out):
    x, y = held_out.images[:200], held_out.labels[:200]
    fgsm = A.run_attack(victim, x, y, A.AttackSpec("fgsm", 8 / 255))
    pgd = A.run_attack(victim, x, y, A.AttackSpec("pgd", 8 / 255, alpha=2 / 255, iters=10))
    assert pgd.success_rate >= fgsm.success_rate


def test_apgd_at_least_pgd(victim, held_out):
    x, y = held_out.images[:200], held_out.labels[:200]
    pgd = A.run_attack(victim, x, y, A.AttackSpec("pgd", 2 / 255, alpha=0.5 / 255, iters=10))
    apgd = A.run_attack(victim, x, y, A.AttackSpec("apgd_ce", 2 / 255, iters=10))
    assert apgd.success_rate >= pgd.success_rate


def test_cw_distortion_below_pgd(victim, held_out):
    x, y = held_out.images[:100], held_out.labels[:100]
    pgd = A.run_attack(victim, x, y, A.AttackSpec("pgd", 8 / 255, alpha=2 / 255, iters=10))
    cw = A.run_attack(victim, x, y, A.AttackSpec("cw", None))

    def mean_l2(batch):
        d = (batch.adversarials.astype(np.float64) - batch.originals).reshape(len(batch.labels), -1)
        return float(np.linalg.norm(d[batch.success], axis=1).mean())

    assert cw.success.any() and pgd.success.any()
    assert mean_l2(cw) < mean_l2(pgd)


def test_square_two_thousand_queries(victim, held_out):
    x, y = held_out.images[:64], held_out.labels[:64]
    out = A.run_attack(victim, x, y, A.AttackSpec("square", 8 / 255, query_budget=2000))
    assert out.success_rate >= 0.5
    assert out.queries.max() <= 2000


def test_fgsm_yield_over_two_thousand_sources(victim, benign):
    adv, manifest = A.build_attack_dataset(victim, benign, A.AttackSpec("fgsm", 8 / 255))
    assert manifest["sources"] == 2000
    assert len(adv) >= 1400


def test_detector_beats_chance_on_fgsm(smoke_run):
    row = next(r for r in smoke_run.csv_rows("table3.csv") if r["Attack"] == "fgsm_8-255")
    assert float(row["AUC"]) > 0.5


def test_benign_identified_best(smoke_run):
    ident = smoke_run.report("identification.json")
    cm = np.asarray(ident["confusion"], dtype=np.float64)
    recall = np.diag(cm) / np.maximum(cm.sum(axis=1), 1)
    assert ident["classes"][int(np.argmax(recall))] == "benign", dict(zip(ident["classes"], recall.round(3)))


def test_spectra_converge_with_depth(smoke_run):
    spectrum = smoke_run.report("spectrum.json")
    distance = spectrum["mean_distance"]
    assert distance["5"] <= distance["1"]
