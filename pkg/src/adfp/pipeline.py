"""Run-directory orchestration. Every stage writes its artifact under the run directory and reuses it
when it already exists, so an interrupted run continues where it stopped."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from . import plot
from .attacks import build_attack_dataset, save_attack_dataset
from .config import ConfigError, RunConfig, attack_name
from .data import (
    DatasetError,
    LabeledImageSet,
    generate_toy_dataset,
    load_dataset,
    partition,
    read_cifar10_binary,
    save_dataset,
    split_dataset,
)
from .diffusion import Denoiser, build_schedule, reconstruction_error, train_denoiser, transform, transform_set
from .eval import (
    DetectionSplit,
    ablation_csv,
    confusion_csv,
    confusion_matrix,
    detection_test_report,
    format_epsilon,
    table3_csv,
    transfer_csv,
    transfer_matrix,
    write_json,
)
from .models import Classifier, accuracy, detector_scores, predict, train_detector, train_identifier, train_victim
from .spectrum import spectrum_report

log = logging.getLogger("adfp.run")

BENIGN = "benign"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


class RunLockedError(RuntimeError):
    pass


def _score(detector, images):
    return detector_scores(detector, images)


class Run:
    """One run directory owned by one process.

    ``refresh`` names artifact kinds to recompute even if present: data, victim, dm, attack, transform,
    detector, identifier.
    """

    def __init__(self, config: RunConfig, root, refresh=()):
        self.config = config
        self.root = Path(root)
        self.refresh = set(refresh)
        self._memo = {}
        self._lock = self.root / "run.lock"
        self._handler = None

    # -- lifecycle --------------------------------------------------------------

    def __enter__(self) -> "Run":
        self.root.mkdir(parents=True, exist_ok=True)
        self._acquire_lock()
        self._handler = logging.FileHandler(self.root / "run.log")
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root_logger = logging.getLogger("adfp")
        root_logger.addHandler(self._handler)
        root_logger.setLevel(logging.INFO)
        saved = self.root / "config.json"
        text = self.config.to_json()
        if saved.exists() and saved.read_text() != text:
            self.__exit__(None, None, None)
            raise ConfigError(f"{saved} holds a different configuration; use a fresh --out directory")
        saved.write_text(text)
        return self

    def __exit__(self, *exc):
        if self._handler is not None:
            logging.getLogger("adfp").removeHandler(self._handler)
            self._handler.close()
            self._handler = None
        with contextlib.suppress(FileNotFoundError):
            self._lock.unlink()

    def _acquire_lock(self) -> None:
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            try:
                pid = int(self._lock.read_text().strip() or "0")
                os.kill(pid, 0)
            except (ValueError, ProcessLookupError):
                log.warning("removing stale lock %s", self._lock)
                self._lock.unlink()
                return self._acquire_lock()
            except PermissionError:
                pass
            raise RunLockedError(f"{self.root} is in use by process {pid} (lock file {self._lock})")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))

    @contextlib.contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        log.info("stage %s: start", name)
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            log.error("stage %s failed: %s: %s", name, type(exc).__name__, exc)
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        log.info("stage %s: done in %.1fs", name, time.perf_counter() - start)

    def _reuse(self, kind: str, marker: Path) -> bool:
        return marker.exists() and kind not in self.refresh

    def _memoized(self, key, build):
        if key not in self._memo:
            self._memo[key] = build()
        return self._memo[key]

    # -- paths ------------------------------------------------------------------

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def _transformed_dir(self, name: str, steps: int) -> Path:
        return self.root / "transformed" / f"S{steps}" / name

    def _detector_path(self, name: str, steps: int) -> Path:
        return self.root / "detectors" / f"S{steps}" / f"{name}.adf"

    # -- data -------------------------------------------------------------------

    def benign(self) -> LabeledImageSet:
        return self._memoized("benign", self._benign)

    def _benign(self):
        path = self.root / "data" / "benign"
        if self._reuse("data", path / "manifest.json"):
            return load_dataset(path)
        with self.stage("data"):
            cfg = self.config
            if cfg.data == "toy":
                data = generate_toy_dataset(cfg.seed, cfg.n_benign, cfg.classes)
            else:
                data = _read_cifar(cfg.data.split(":", 1)[1], cfg.n_benign)
            data = data.replace(seed=cfg.seed)
            save_dataset(data, path)
        return data

    def splits(self):
        """Victim / denoiser (train, val, test) split of the benign data."""
        return self._memoized("splits", lambda: split_dataset(self.benign(), self.config.seed))

    def pools(self):
        """Disjoint benign detection pool and attack-source pool, fixed before any attack runs."""
        def build():
            p = self.config.pools
            benign_pool, attack_pool = partition(self.benign(), [p.benign, p.attack], self.config.seed)
            rng = np.random.default_rng([self.config.seed, 0x7E57])
            test_ids = set()
            for pool in (benign_pool, attack_pool):
                n_test = int(round(p.test_fraction * len(pool)))
                test_ids.update(rng.permutation(pool.ids)[:n_test].tolist())
            path = self.root / "data" / "pools.json"
            write_json({"benign": benign_pool.ids.tolist(), "attack": attack_pool.ids.tolist(),
                        "test": sorted(test_ids)}, path)
            return benign_pool, attack_pool, np.array(sorted(test_ids), dtype=np.int64)
        return self._memoized("pools", build)

    def _holdout(self, data: LabeledImageSet):
        test = np.isin(data.ids, self.pools()[2])
        return data.subset(np.flatnonzero(~test), split="train"), data.subset(np.flatnonzero(test), split="test")

    # -- models -----------------------------------------------------------------

    def schedule(self, steps: int | None = None):
        d = self.config.diffusion
        return build_schedule(d.T, d.beta_start, d.beta_end, d.S if steps is None else steps)

    def victim(self) -> Classifier:
        return self._memoized("victim", self._victim)

    def _victim(self):
        path = self.root / "checkpoints" / "victim.adf"
        if self._reuse("victim", path.with_suffix(".json")):
            return Classifier.load(path)
        with self.stage("train-victim"):
            train, val, _ = self.splits()
            v = self.config.victim
            model, history = train_victim(train, val, epochs=v.epochs, lr=v.lr, seed=self.config.seed,
                                          widths=tuple(v.widths))
            path.parent.mkdir(parents=True, exist_ok=True)
            write_json(history, self.root / "checkpoints" / "victim_history.json")
            model.save(path)
        return model

    def denoiser(self) -> Denoiser:
        return self._memoized("dm", self._denoiser)

    def _denoiser(self):
        path = self.root / "checkpoints" / "dm.adf"
        if self._reuse("dm", path.with_suffix(".json")):
            return Denoiser.load(path)
        with self.stage("train-dm"):
            train, _, test = self.splits()
            d = self.config.diffusion
            probe = test.images[:d.probe] if d.probe else None
            model, history = train_denoiser(train, self.schedule(), epochs=d.epochs, batch=d.batch, lr=d.lr,
                                            seed=self.config.seed, widths=tuple(d.widths), probe=probe,
                                            probe_every=d.probe_every if d.probe else 0)
            path.parent.mkdir(parents=True, exist_ok=True)
            write_json(history, self.root / "checkpoints" / "dm_history.json")
            model.save(path)
        return model

    # -- attacks and transforms --------------------------------------------------

    def spec(self, name: str):
        for s in self.config.attacks:
            if attack_name(s) == name:
                return s
        raise KeyError(f"attack {name!r} is not in the configured grid {self.config.attack_names}")

    def attack_set(self, name: str):
        return self._memoized(("attack", name), lambda: self._attack_set(name))

    def _attack_set(self, name):
        path = self.root / "attacks" / name
        if self._reuse("attack", path / "attack.json"):
            return load_dataset(path), json.loads((path / "attack.json").read_text())
        with self.stage(f"attack {name}"):
            cap = self.config.pools.max_adversarial or None
            adv, manifest = build_attack_dataset(self.victim(), self.pools()[1], self.spec(name), limit=cap)
            save_attack_dataset(adv, manifest, path)
            log.info("attack %s: kept %d of %d clean-correct sources (success rate %.3f)", name,
                     manifest["kept"], manifest["clean_correct"], manifest["success_rate"])
        return adv, manifest

    def source(self, name: str) -> LabeledImageSet:
        return self.pools()[0] if name == BENIGN else self.attack_set(name)[0]

    def transformed(self, name: str, steps: int | None = None) -> LabeledImageSet:
        steps = self.config.diffusion.S if steps is None else steps
        return self._memoized(("tf", name, steps), lambda: self._transformed(name, steps))

    def _transformed(self, name, steps):
        path = self._transformed_dir(name, steps)
        if self._reuse("transform", path / "manifest.json"):
            return load_dataset(path)
        with self.stage(f"transform {name} S={steps}"):
            data = self.source(name)
            out = (transform_set(data, self.denoiser(), self.schedule(steps), steps) if len(data)
                   else data.replace(provenance=data.provenance.transformed(steps)))
            save_dataset(out, path)
        return out

    # -- detection --------------------------------------------------------------

    def detection_split(self, name: str, steps: int | None = None) -> DetectionSplit:
        benign_train, benign_test = self._holdout(self.transformed(BENIGN, steps))
        adv_train, adv_test = self._holdout(self.transformed(name, steps))
        if self.config.pools.balance:
            benign_train, adv_train = self._balance(benign_train, adv_train)
            benign_test, adv_test = self._balance(benign_test, adv_test)
        return DetectionSplit(name, benign_train, adv_train, benign_test, adv_test)

    def _balance(self, a: LabeledImageSet, b: LabeledImageSet):
        """Trim the larger set to the smaller one's size, keeping a fixed seeded selection of source ids."""
        n = min(len(a), len(b))

        def trim(s):
            if len(s) == n:
                return s
            rank = np.random.default_rng([self.config.seed, 0xBA1]).permutation(self.config.n_benign)
            keep = np.sort(np.argsort(rank[s.ids], kind="stable")[:n])
            return s.subset(keep, split=s.split)
        return trim(a), trim(b)

    def detector(self, name: str, steps: int | None = None):
        steps = self.config.diffusion.S if steps is None else steps
        return self._memoized(("det", name, steps), lambda: self._detector(name, steps))

    def _detector(self, name, steps):
        path = self._detector_path(name, steps)
        if self._reuse("detector", path.with_suffix(".json")):
            return Classifier.load(path)
        split = self.detection_split(name, steps)
        with self.stage(f"train-detector {name} S={steps}"):
            if not len(split.adv_train):
                raise ValueError(f"attack {name} produced no training examples")
            d = self.config.detector
            model, history = train_detector(split.benign_train, split.adv_train, epochs=d.epochs, lr=d.lr,
                                            seed=self.config.seed, widths=tuple(d.widths))
            path.parent.mkdir(parents=True, exist_ok=True)
            model.save(path)
            write_json(history, path.with_name(f"{name}_history.json"))
        return model

    def detection_report(self, name: str, steps: int | None = None):
        steps = self.config.diffusion.S if steps is None else steps
        return self._memoized(("report", name, steps), lambda: self._detection_report(name, steps))

    def _detection_report(self, name, steps):
        split = self.detection_split(name, steps)
        if not len(split.adv_train) or not len(split.adv_test):
            log.warning("attack %s: too few successful examples to train and test a detector", name)
            return None
        return detection_test_report(self.detector(name, steps), split, _score)

    # -- reports ----------------------------------------------------------------

    def _report_path(self, filename: str) -> Path:
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        return self.reports_dir / filename

    def report_victim(self):
        with self.stage("report victim"):
            _, val, test = self.splits()
            model = self.victim()
            write_json({"val_accuracy": accuracy(model, val), "test_accuracy": accuracy(model, test)},
                       self._report_path("victim.json"))

    def report_attacks(self):
        with self.stage("report attacks"):
            rows = []
            for name in self.config.attack_names:
                m = self.attack_set(name)[1]
                rows.append([name, m["family"], format_epsilon(m["epsilon"]), m["clean_correct"], m["attempted"],
                             m["kept"], f"{m['success_rate']:.6f}",
                             "-" if m["mean_queries"] is None else f"{m['mean_queries']:.2f}"])
            _write_rows(self._report_path("attacks.csv"),
                        ["attack", "family", "epsilon", "clean_correct", "attempted", "kept", "success_rate",
                         "mean_queries"], rows)

    def report_dm(self):
        with self.stage("report dm"):
            names = [BENIGN] + self.config.attack_names
            errors = {n: reconstruction_error(self.source(n).images, self.transformed(n).images)
                      for n in names if len(self.source(n))}
            history = json.loads((self.root / "checkpoints" / "dm_history.json").read_text()) \
                if (self.root / "checkpoints" / "dm_history.json").exists() else []
            write_json({"schedule": self.schedule().describe(), "reconstruction_error": errors,
                        "history": history}, self._report_path("dm.json"))

    def report_table3(self):
        with self.stage("evaluate"):
            entries, payload = [], {}
            for name in self.config.attack_names:
                rep = self.detection_report(name)
                entries.append((name, self.spec(name).epsilon, rep))
                payload[name] = None if rep is None else rep.to_dict()
            table3_csv(entries, self._report_path("table3.csv"))
            write_json(payload, self._report_path("table3.json"))

    def report_identification(self):
        names = [n for n in self.config.attack_names if len(self.transformed(n))]
        if not names:
            log.warning("identification report is empty: no attack produced examples")
            confusion_csv(np.zeros((0, 0), np.int64), [], self._report_path("identification.csv"))
            write_json({"classes": [], "confusion": [], "accuracy": None}, self._report_path("identification.json"))
            return
        with self.stage("identification"):
            parts = {n: self._holdout(self.transformed(n)) for n in [BENIGN] + names}
            path = self.root / "checkpoints" / "identifier.adf"
            if self._reuse("identifier", path.with_suffix(".json")):
                model = Classifier.load(path)
            else:
                d = self.config.detector
                model, _ = train_identifier({n: tr for n, (tr, _) in parts.items()}, epochs=d.epochs, lr=d.lr,
                                            seed=self.config.seed, widths=tuple(d.widths))
                model.save(path)
            classes = model.arch["class_names"]
            tests = [(classes.index(n), parts[n][1]) for n in classes]
            pred = np.concatenate([predict(model, t.images) for _, t in tests if len(t)])
            true = np.concatenate([np.full(len(t), k, np.int64) for k, t in tests if len(t)])
            cm = confusion_matrix(pred, true, len(classes))
            confusion_csv(cm, classes, self._report_path("identification.csv"))
            write_json({"classes": classes, "confusion": cm.tolist(),
                        "accuracy": float(np.trace(cm) / max(cm.sum(), 1))},
                       self._report_path("identification.json"))

    def report_transfer(self):
        names = [n for n in self.config.attack_names if self.detection_report(n) is not None]
        if not names:
            log.warning("transfer matrix is empty: no attack has a detector")
        with self.stage("transfer"):
            splits = [self.detection_split(n) for n in names]
            tm = transfer_matrix(splits, splits, None, _score, detectors={n: self.detector(n) for n in names})
            transfer_csv(tm, self._report_path("transfer.csv"))
            write_json(tm.to_dict(), self._report_path("transfer.json"))

    def report_spectrum(self):
        cfg = self.config.spectrum
        available = [BENIGN] + self.config.attack_names
        names = [n for n in cfg.sets if n in available]
        for n in sorted(set(cfg.sets) - set(available)):
            log.warning("spectrum set %s is not part of this run; skipped", n)
        sets = {n: self.source(n).subset(np.arange(min(cfg.samples, len(self.source(n))))) for n in names}
        sets = {n: s for n, s in sets.items() if len(s)}
        if not sets:
            return
        with self.stage("spectrum"):
            dm, sched = self.denoiser(), self.schedule()
            rep = spectrum_report(sets, lambda x: transform(x, dm, sched), cfg.depth)
            rep.to_csv(self._report_path("spectrum.csv"))
            write_json(rep.to_dict(), self._report_path("spectrum.json"))

    def report_ablation(self, steps_list=None, attacks=None):
        steps_list = list(self.config.ablation.steps if steps_list is None else steps_list)
        T = self.config.diffusion.T
        bad = [s for s in steps_list if not 1 <= s <= T]
        if bad:
            raise ConfigError(f"step counts {bad} outside [1, T={T}]")
        names = list(attacks or self.config.ablation.attacks or self.config.attack_names)
        entries = []
        with self.stage("ablate-steps"):
            for steps in steps_list:
                for name in names:
                    entries.append((name, steps, self.spec(name).epsilon, self.detection_report(name, steps)))
            ablation_csv(entries, self._report_path("ablation.csv"))

    def plots(self):
        with self.stage("plot"):
            render_plots(self.root)

    # -- whole pipeline ---------------------------------------------------------

    def pipeline(self):
        cfg = self.config
        self.benign()
        self.pools()
        names = cfg.attack_names
        if names:
            self.victim()
            self.report_victim()
        self.denoiser()
        for name in names:
            self.attack_set(name)
        if names:
            self.report_attacks()
        for name in [BENIGN] + names:
            self.transformed(name)
        self.report_dm()
        if names:
            for name in names:
                self.detection_report(name)
            self.report_table3()
            if cfg.reports.identification:
                self.report_identification()
            if cfg.reports.transfer:
                self.report_transfer()
            if cfg.ablation.steps:
                self.report_ablation()
        if cfg.reports.spectrum:
            self.report_spectrum()
        if cfg.reports.plots:
            self.plots()

    def expected_artifacts(self) -> list[Path]:
        cfg, r = self.config, self.root
        names = cfg.attack_names
        paths = [r / "config.json", r / "data" / "benign" / "manifest.json", r / "checkpoints" / "dm.json",
                 r / "reports" / "dm.json", self._transformed_dir(BENIGN, cfg.diffusion.S) / "manifest.json"]
        if names:
            paths += [r / "checkpoints" / "victim.json", r / "reports" / "victim.json",
                      r / "reports" / "attacks.csv", r / "reports" / "table3.csv"]
            if cfg.reports.identification:
                paths.append(r / "reports" / "identification.csv")
            if cfg.reports.transfer:
                paths.append(r / "reports" / "transfer.csv")
            if cfg.ablation.steps:
                paths.append(r / "reports" / "ablation.csv")
        for name in names:
            paths += [r / "attacks" / name / "manifest.json", r / "attacks" / name / "attack.json",
                      self._transformed_dir(name, cfg.diffusion.S) / "manifest.json"]
        if cfg.reports.spectrum and [n for n in cfg.spectrum.sets if n in [BENIGN] + names]:
            paths.append(r / "reports" / "spectrum.csv")
        return paths


def audit(root) -> list[str]:
    """Problems found in a run directory; empty when every expected artifact exists and verifies."""
    root = Path(root)
    cfg_path = root / "config.json"
    if not cfg_path.exists():
        return [f"missing {cfg_path}"]
    cfg = RunConfig.from_json(cfg_path.read_text())
    run = Run(cfg, root)
    problems = [f"missing {p}" for p in run.expected_artifacts() if not p.exists()]
    for manifest in sorted(root.glob("**/manifest.json")):
        try:
            load_dataset(manifest.parent)
        except (DatasetError, OSError, ValueError) as exc:
            problems.append(f"{manifest.parent}: {exc}")
    for ckpt in sorted(root.glob("**/*.adf")):
        if not ckpt.with_suffix(".json").exists():
            problems.append(f"checkpoint {ckpt} has no architecture sidecar")
    return problems


def render_plots(root) -> list[Path]:
    """SVGs for whichever matrix and spectrum reports the run's configuration promises."""
    root = Path(root)
    reports, out_dir = root / "reports", root / "plots"
    cfg_path = root / "config.json"
    cfg = RunConfig.from_json(cfg_path.read_text()) if cfg_path.exists() else None
    wanted = []
    if cfg is None or (cfg.attack_names and cfg.reports.identification):
        wanted.append("identification.json")
    if cfg is None or (cfg.attack_names and cfg.reports.transfer):
        wanted.append("transfer.json")
    if cfg is None or cfg.reports.spectrum:
        wanted.append("spectrum.csv")
    missing = [name for name in wanted if not (reports / name).exists()]
    if missing:
        raise FileNotFoundError(f"cannot plot: missing report {reports / missing[0]}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "identification.json" in wanted:
        d = json.loads((reports / "identification.json").read_text())
        written.append(_write(out_dir / "identification.svg",
                              plot.heatmap_svg(d["confusion"], d["classes"], d["classes"],
                                               "Identification (rows: true set)", fmt="{:.0f}")))
    if "transfer.json" in wanted:
        d = json.loads((reports / "transfer.json").read_text())
        written.append(_write(out_dir / "transfer.svg",
                              plot.heatmap_svg(d["accuracy"], d["rows"], d["cols"],
                                               "Detector accuracy (rows: training attack)")))
    if "spectrum.csv" in wanted:
        curves = read_spectrum_csv(reports / "spectrum.csv")
        for depth, series in curves.items():
            written.append(_write(out_dir / f"spectrum_depth{depth}.svg",
                                  plot.line_plot_svg(series, f"Power spectrum after {depth} transform(s)",
                                                     "radius", "mean power", log_y=True)))
    return written


def read_spectrum_csv(path) -> dict:
    """depth -> set name -> (radii, powers), in file order."""
    curves = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            series = curves.setdefault(int(row["depth"]), {}).setdefault(row["set"], ([], []))
            series[0].append(int(row["radius"]))
            series[1].append(float(row["power"]))
    return curves


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _read_cifar(path: str, n: int) -> LabeledImageSet:
    p = Path(path)
    files = sorted(p.glob("*.bin")) if p.is_dir() else [p]
    if not files:
        raise DatasetError(f"no CIFAR-10 .bin files under {p}")
    parts = [read_cifar10_binary(f) for f in files]
    images = np.concatenate([s.images for s in parts])
    labels = np.concatenate([s.labels for s in parts])
    if len(labels) < n:
        raise DatasetError(f"{p}: {len(labels)} records, fewer than the {n} requested")
    return LabeledImageSet(images[:n], labels[:n])
