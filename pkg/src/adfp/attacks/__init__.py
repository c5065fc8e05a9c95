"""White-box and black-box L-infinity / L2 attacks and success-filtered attack datasets."""

from .blackbox import (
    LogitsOracle,
    QueryBudgetError,
    bandit_prior_step,
    bandits_attack,
    nes_attack,
    nes_gradient,
    square_attack,
    square_fraction,
)
from .dataset import build_attack_dataset, run_attack, save_attack_dataset
from .spec import (
    BLACK_BOX,
    FAMILIES,
    AdversarialBatch,
    AttackError,
    AttackSpec,
    default_grid,
    margin,
    project,
)
from .whitebox import (
    apgd,
    apgd_stalled,
    autoattack_ensemble,
    cw_l2,
    deepfool,
    dlr_loss,
    fgsm,
    logits,
    loss_and_gradient,
    masked_pgd,
    pgd,
)

__all__ = [name for name in dir() if not name.startswith("_")]
