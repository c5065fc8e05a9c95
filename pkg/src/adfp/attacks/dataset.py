from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from ..data import LabeledImageSet, Provenance, save_dataset
from . import blackbox, whitebox
from .spec import BLACK_BOX, AdversarialBatch, AttackSpec

log = logging.getLogger(__name__)

BATCH_SIZE = 50


def run_attack(model, x, y, spec: AttackSpec, stream: int = 0) -> AdversarialBatch:
    """Dispatch ``spec.family``; black-box families only ever receive a logits oracle."""
    f = spec.family
    if f in BLACK_BOX:
        oracle = blackbox.LogitsOracle(lambda a: whitebox.logits(model, a), len(x), spec.query_budget)
        attack = {"square": blackbox.square_attack, "nes": blackbox.nes_attack, "bandits": blackbox.bandits_attack}[f]
        return attack(oracle, x, y, spec, stream)
    if f == "fgsm":
        return whitebox.fgsm(model, x, y, spec.epsilon)
    if f == "pgd":
        return whitebox.pgd(model, x, y, spec, stream)
    if f == "masked_pgd":
        return whitebox.masked_pgd(model, x, y, spec, stream)
    if f in ("apgd_ce", "apgd_dlr"):
        return whitebox.apgd(model, x, y, spec, f.split("_")[1], stream)
    if f == "autoattack":
        return whitebox.autoattack_ensemble(model, x, y, spec, stream)
    if f == "deepfool":
        return whitebox.deepfool(model, x, y, spec.overshoot, max_iter=max(spec.iters, 50))
    return whitebox.cw_l2(model, x, y, spec.c, spec.kappa, spec.iters, spec.lr)


def build_attack_dataset(model, benign: LabeledImageSet, spec: AttackSpec, limit: int | None = None):
    """Attack the correctly classified images of ``benign`` in batches and keep the successes.

    Batch ``b`` draws its randomness from ``(spec.seed, b)``. Stops once ``limit`` successes exist.
    Returns ``(adversarial set, manifest dict)``.
    """
    clean = whitebox.logits(model, benign.images).argmax(axis=1) if len(benign) else np.zeros(0, np.int64)
    sources = np.flatnonzero(clean == benign.labels)
    kept, attempted, queries = [], 0, []
    for b, start in enumerate(range(0, len(sources), BATCH_SIZE)):
        if limit is not None and sum(len(k) for k, _ in kept) >= limit:
            break
        idx = sources[start:start + BATCH_SIZE]
        out = run_attack(model, benign.images[idx], benign.labels[idx], spec, stream=b)
        attempted += len(idx)
        if out.queries is not None:
            queries.append(out.queries)
        ok = out.success
        kept.append((idx[ok], out.adversarials[ok]))
    idx = np.concatenate([k for k, _ in kept]) if kept else np.zeros(0, np.int64)
    images = (np.concatenate([a for _, a in kept]) if kept
              else np.zeros((0,) + benign.image_shape, np.float32))
    if limit is not None:
        idx, images = idx[:limit], images[:limit]
        if len(idx) < limit:
            log.warning("%s: only %d of %d requested adversarial examples", spec.label, len(idx), limit)
    adv = LabeledImageSet(images, benign.labels[idx], Provenance.attack(spec.family, spec.epsilon),
                          benign.split, benign.seed, benign.ids[idx])
    manifest = {
        "family": spec.family,
        "epsilon": spec.epsilon,
        "spec": spec.to_dict(),
        "sources": int(len(benign)),
        "clean_correct": int(len(sources)),
        "attempted": int(attempted),
        "kept": int(len(idx)),
        "success_rate": float(sum(len(k) for k, _ in kept) / attempted) if attempted else 0.0,
        "mean_queries": float(np.concatenate(queries).mean()) if queries else None,
        "shortfall": int(max(limit - len(idx), 0)) if limit is not None else 0,
    }
    return adv, manifest


def save_attack_dataset(adv: LabeledImageSet, manifest: dict, directory) -> None:
    directory = Path(directory)
    save_dataset(adv, directory)
    (directory / "attack.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
