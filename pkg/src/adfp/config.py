"""Run configuration: TOML file + flag overrides, serialized to config.json in the run directory."""

from __future__ import annotations

import dataclasses
import json
from fractions import Fraction
from pathlib import Path

import tomli

from .attacks.spec import AttackError, AttackSpec, default_grid
from .eval import format_epsilon


class ConfigError(ValueError):
    pass


def parse_epsilon(value) -> float | None:
    """Accepts numbers, ``"k/255"`` style fractions and ``None``/``"none"``."""
    if value is None or (isinstance(value, str) and value.strip().lower() in ("none", "-", "")):
        return None
    if isinstance(value, bool):
        raise ConfigError(f"invalid epsilon {value!r}")
    try:
        return float(Fraction(value.strip()) if isinstance(value, str) else value)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"invalid epsilon {value!r}") from exc


def attack_name(spec: AttackSpec) -> str:
    """Filesystem- and CSV-friendly name, e.g. ``pgd_8-255``."""
    if spec.epsilon is None:
        return spec.family
    return f"{spec.family}_{format_epsilon(spec.epsilon).replace('/', '-')}"


@dataclasses.dataclass
class VictimConfig:
    epochs: int = 30
    lr: float = 2e-3
    widths: tuple = (16, 32, 64)


@dataclasses.dataclass
class DiffusionConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    S: int = 50
    epochs: int = 30
    lr: float = 2e-3
    batch: int = 64
    widths: tuple = (24, 48, 64)
    probe: int = 32
    probe_every: int = 5


@dataclasses.dataclass
class DetectorConfig:
    epochs: int = 40
    lr: float = 3e-3
    widths: tuple = (16, 32, 64)


@dataclasses.dataclass
class PoolConfig:
    benign: int = 400  # transformed benign images (label 0)
    attack: int = 400  # disjoint source images handed to every attack
    test_fraction: float = 0.2
    max_adversarial: int = 0  # stop attacking once this many successes exist; 0 means no cap
    balance: bool = True  # equal benign and adversarial counts in every detection split


@dataclasses.dataclass
class AblationConfig:
    steps: list = dataclasses.field(default_factory=list)
    attacks: list = dataclasses.field(default_factory=list)  # empty: every attack


@dataclasses.dataclass
class SpectrumConfig:
    depth: int = 5
    samples: int = 32
    sets: list = dataclasses.field(default_factory=lambda: ["benign", "fgsm_8-255"])


@dataclasses.dataclass
class ReportConfig:
    transfer: bool = True
    identification: bool = True
    spectrum: bool = True
    plots: bool = True


_SECTIONS = {"victim": VictimConfig, "diffusion": DiffusionConfig, "detector": DetectorConfig,
             "pools": PoolConfig, "ablation": AblationConfig, "spectrum": SpectrumConfig, "reports": ReportConfig}


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    data: str = "toy"  # "toy" or "cifar10:PATH"
    n_benign: int = 2000
    classes: int = 10
    victim: VictimConfig = dataclasses.field(default_factory=VictimConfig)
    diffusion: DiffusionConfig = dataclasses.field(default_factory=DiffusionConfig)
    detector: DetectorConfig = dataclasses.field(default_factory=DetectorConfig)
    pools: PoolConfig = dataclasses.field(default_factory=PoolConfig)
    ablation: AblationConfig = dataclasses.field(default_factory=AblationConfig)
    spectrum: SpectrumConfig = dataclasses.field(default_factory=SpectrumConfig)
    reports: ReportConfig = dataclasses.field(default_factory=ReportConfig)
    attacks: list = None  # list[AttackSpec]; None means the default grid

    def __post_init__(self):
        if self.attacks is None:
            self.attacks = default_grid(self.seed)
        self.validate()

    def validate(self) -> None:
        if self.data != "toy" and not self.data.startswith("cifar10:"):
            raise ConfigError(f"data must be 'toy' or 'cifar10:PATH', got {self.data!r}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")
        d = self.diffusion
        if not 1 <= d.S <= d.T:
            raise ConfigError(f"diffusion.S must be in [1, T={d.T}], got {d.S}")
        for s in self.ablation.steps:
            if not 1 <= s <= d.T:
                raise ConfigError(f"ablation step count {s} outside [1, T={d.T}]")
        if not 0.0 < self.pools.test_fraction < 1.0:
            raise ConfigError(f"pools.test_fraction must be in (0, 1), got {self.pools.test_fraction}")
        if self.pools.max_adversarial < 0:
            raise ConfigError(f"pools.max_adversarial must be >= 0, got {self.pools.max_adversarial}")
        if self.pools.benign + self.pools.attack > self.n_benign:
            raise ConfigError(f"pools need {self.pools.benign + self.pools.attack} images "
                              f"but the dataset has {self.n_benign}")
        names = self.attack_names
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate attacks in grid: {names}")
        for name in self.ablation.attacks:
            if name not in names:
                raise ConfigError(f"ablation attack {name!r} is not in the attack grid {names}")

    @property
    def attack_names(self) -> list[str]:
        return [attack_name(s) for s in self.attacks]

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "attacks"}
        out = {k: dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v for k, v in out.items()}
        for section in _SECTIONS:
            for k, v in out[section].items():
                if isinstance(v, tuple):
                    out[section][k] = list(v)
        out["attacks"] = [s.to_dict() for s in self.attacks]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        kwargs = {}
        for name, section in _SECTIONS.items():
            kwargs[name] = _section(section, raw.pop(name, {}), name)
        if "attacks" in raw:
            kwargs["attacks"] = _attacks(raw.pop("attacks"), raw.get("seed", 0))
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - top)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**raw, **kwargs)

    @classmethod
    def from_toml(cls, path) -> "RunConfig":
        try:
            raw = tomli.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def _section(kind, values, name):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in dataclasses.fields(kind)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {unknown}")
    fixed = {k: tuple(v) if isinstance(known[k].default, tuple) else v for k, v in values.items()}
    return kind(**fixed)


def _attacks(entries, seed) -> list[AttackSpec]:
    """Each entry is a table of attack fields; ``epsilon`` may be a list, expanding to one attack per value."""
    out = []
    for i, entry in enumerate(entries):
        entry = dict(entry)
        eps = entry.pop("epsilon", entry.pop("eps", None))
        for e in eps if isinstance(eps, list) else [eps]:
            fields = dict(entry, epsilon=parse_epsilon(e))
            fields.setdefault("seed", seed)
            if "alpha" in fields:
                fields["alpha"] = parse_epsilon(fields["alpha"])
            if isinstance(fields.get("patch"), list):
                fields["patch"] = tuple(fields["patch"])
            try:
                out.append(AttackSpec.from_dict(fields))
            except (AttackError, TypeError) as exc:
                raise ConfigError(f"attack entry {i}: {exc}") from exc
    return out


def grid_from_flags(families: list[str], eps_list: list, seed: int, base: list[AttackSpec] | None = None):
    """Cartesian product of families and budgets; norm-minimizing families appear once without a budget.

    Per-family settings (budgets, step sizes) are carried over from ``base`` when it has that family.
    """
    template = {s.family: s for s in base or []}
    grid, seen = [], set()
    for family in families:
        budgets = [None] if family in ("deepfool", "cw") else [parse_epsilon(e) for e in eps_list]
        for eps in budgets:
            try:
                spec = (template[family].replace(epsilon=eps, seed=seed) if family in template
                        else AttackSpec(family, eps, seed=seed))
            except AttackError as exc:
                raise ConfigError(str(exc)) from exc
            if attack_name(spec) not in seen:
                seen.add(attack_name(spec))
                grid.append(spec)
    return grid
