"""Ownership verification pipeline: negatives, calibration, verdicts, experiments."""

from __future__ import annotations

import csv
import json
import logging
import math
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .baselines import BaselineSpec, make_baseline
from .errors import CheckpointError, ConfigurationError, MetricInapplicableError, TrainingError
from .metrics import (DISTANCE, SIMILARITY, ActivationProfile, DistanceReport, ddv_similarity, lad, lod,
                      matching_rate, rob_and_robd, zest_distance)
from .nnkit import (DatasetBundle, LabeledSet, LayeredModel, TrainConfig, build_model, evaluate_accuracy,
                    is_checkpoint, load_checkpoint, save_checkpoint, train)
from .probes import AdvConfig, FingerprintSet, boundary_fingerprints, pgd, random_probes, zest_reference_set
from .removal import RemovalConfig, RemovalTrace, run_removal

logger = logging.getLogger(__name__)

COPY, NOT_COPY = "copy", "not-copy"


# ------------------------------------------------------------------ negatives


def train_negatives(victim_spec: dict, data: DatasetBundle, k: int, seed: int,
                    cfg: Optional[TrainConfig] = None, jitter: float = 0.1) -> list[LayeredModel]:
    """``k`` independently initialized models trained like the victim.

    Learning rate and training length are each scaled by a seeded uniform
    factor in ``[1 - jitter, 1 + jitter]``.
    """
    if k < 2:
        raise ConfigurationError("calibration needs at least two negatives")
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(seed)
    steps_full = cfg.epochs * math.ceil(len(data.train) / cfg.batch_size)
    models = []
    for i in range(k):
        lr_scale, step_scale = rng.uniform(1 - jitter, 1 + jitter, size=2)
        model_seed = seed + 1000 + i
        model = build_model(victim_spec, model_seed, num_classes=data.class_count, input_shape=data.input_shape)
        run_cfg = TrainConfig(epochs=cfg.epochs + 1, learning_rate=cfg.learning_rate * lr_scale,
                              momentum=cfg.momentum, batch_size=cfg.batch_size, seed=model_seed,
                              max_steps=max(1, round(steps_full * step_scale)))
        try:
            train(model, data, run_cfg)
        except TrainingError as exc:
            raise TrainingError(f"negative {i}: {exc}", iteration=exc.iteration) from exc
        model.info = {"role": "negative", "seed": model_seed, "index": i,
                      "learning_rate": run_cfg.learning_rate, "steps": run_cfg.max_steps}
        models.append(model)
    return models


# --------------------------------------------------------------------- probes


@dataclass
class TrialProbes:
    """Probe sets for one verification trial."""

    fingerprints: FingerprintSet
    random: FingerprintSet
    reference: LabeledSet
    seed: int

    @property
    def latent_probes(self) -> FingerprintSet:
        return FingerprintSet(torch.cat([self.fingerprints.samples, self.random.samples]),
                              torch.cat([self.fingerprints.victim_labels, self.random.victim_labels]), "boundary")

    def save(self, path) -> Path:
        path = Path(path)
        self.fingerprints.save(path / "boundary")
        self.random.save(path / "random")
        FingerprintSet(self.reference.x, self.reference.y, "random-probe", {"seed": self.seed}).save(path / "reference")
        (path / "seed").write_text(f"{self.seed}\n")
        return path

    @classmethod
    def load(cls, path) -> "TrialProbes":
        path = Path(path)
        try:
            seed = int((path / "seed").read_text())
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"no probe set at {path}") from exc
        ref = FingerprintSet.load(path / "reference")
        return cls(FingerprintSet.load(path / "boundary"), FingerprintSet.load(path / "random"),
                   LabeledSet(ref.samples, ref.victim_labels), seed)


@dataclass
class ProbeSpec:
    n_boundary: int = 100
    n_random: int = 100
    n_seeds: int = 200
    n_reference: int = 32


def make_trial_probes(victim: LayeredModel, data: DatasetBundle, spec: ProbeSpec, seed: int) -> TrialProbes:
    """Boundary fingerprints, random probes and a ZEST reference set drawn with ``seed``.

    Every draw comes from the defender's held-out split.
    """
    rng = np.random.default_rng(seed)
    seed_idx = rng.choice(len(data.test), size=min(spec.n_seeds, len(data.test)), replace=False)
    fps = boundary_fingerprints(victim, data.test.subset(np.sort(seed_idx)), spec.n_boundary,
                                AdvConfig(epsilon=0.3, step_size=0.01, steps=100, seed=seed))
    rnd = random_probes(victim, data.test, spec.n_random, seed)
    ref = zest_reference_set(data, spec.n_reference, seed)
    return TrialProbes(fps, rnd, ref, seed)


def make_probe_trials(victim, data, spec: ProbeSpec, trials: int, seed: int) -> list[TrialProbes]:
    return [make_trial_probes(victim, data, spec, seed + t) for t in range(trials)]


# -------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricSpec:
    name: str
    direction: str
    evaluate: Callable[[LayeredModel, LayeredModel, TrialProbes, Optional[int]], DistanceReport]


METRICS = {
    "lod": MetricSpec("lod", DISTANCE, lambda v, s, p, l: lod(v, s, p.latent_probes, l=l)),
    "lad": MetricSpec("lad", DISTANCE, lambda v, s, p, l: lad(v, s, p.latent_probes, ActivationProfile(l))),
    "zest_l2": MetricSpec("zest_l2", DISTANCE, lambda v, s, p, l: zest_distance(v, s, p.reference, "l2", seed=p.seed)),
    "zest_cosine": MetricSpec("zest_cosine", DISTANCE,
                              lambda v, s, p, l: zest_distance(v, s, p.reference, "cosine", seed=p.seed)),
    "ddv": MetricSpec("ddv", SIMILARITY, lambda v, s, p, l: ddv_similarity(v, s, p.fingerprints)),
    "mr": MetricSpec("mr", SIMILARITY, lambda v, s, p, l: matching_rate(v, s, p.fingerprints)),
}


def metric_spec(name: str) -> MetricSpec:
    try:
        return METRICS[name]
    except KeyError:
        raise ConfigurationError(f"unknown metric {name!r}; known: {sorted(METRICS)}") from None


def evaluate_trials(victim, suspect, trials: Sequence[TrialProbes], metrics: Sequence[str],
                    layer: Optional[int] = None) -> dict[str, list[float]]:
    """Per-metric values over all trials. Inapplicable metrics are left out."""
    out = {}
    for name in metrics:
        spec = metric_spec(name)
        try:
            out[name] = [spec.evaluate(victim, suspect, p, layer).value for p in trials]
        except MetricInapplicableError as exc:
            logger.warning("skipping %s: %s", name, exc)
    return out


# ---------------------------------------------------------------- calibration


@dataclass
class ThresholdTable:
    tau: dict
    modes: dict
    n_negatives: int
    seeds: list = field(default_factory=list)

    def flag(self, metric: str, value: float) -> str:
        if self.modes[metric] == "min-distance-of-negatives":
            return COPY if value < self.tau[metric] else NOT_COPY
        return COPY if value > self.tau[metric] else NOT_COPY

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ThresholdTable":
        try:
            raw = json.loads(Path(path).read_text())
            return cls(raw["tau"], raw["modes"], int(raw["n_negatives"]), list(raw.get("seeds", [])))
        except (OSError, ValueError, KeyError) as exc:
            raise CheckpointError(f"cannot read threshold table {path}: {exc}") from exc


def calibrate_thresholds(victim: LayeredModel, negatives: Sequence[LayeredModel], trials: Sequence[TrialProbes],
                         metrics: Sequence[str], layer: Optional[int] = None) -> ThresholdTable:
    """tau = min distance (max similarity) over every negative and every trial probe set."""
    if len(negatives) < 2:
        raise ConfigurationError("calibration needs at least two negatives")
    tau, modes = {}, {}
    for name in metrics:
        spec = metric_spec(name)
        try:
            values = [v for neg in negatives for v in evaluate_trials(victim, neg, trials, [name], layer)[name]]
        except KeyError:
            continue
        if spec.direction == DISTANCE:
            tau[name], modes[name] = float(min(values)), "min-distance-of-negatives"
        else:
            tau[name], modes[name] = float(max(values)), "max-similarity-of-negatives"
    seeds = [int(n.info.get("seed", -1)) for n in negatives]
    return ThresholdTable(tau, modes, len(negatives), seeds)


# ------------------------------------------------------------------- verdicts


@dataclass
class MetricVerdict:
    metric: str
    values: list
    flags: list
    tally: int
    flag: str

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else 0.0

    @property
    def tally_text(self) -> str:
        return f"{self.tally}/{len(self.values)}"


@dataclass
class Verdict:
    per_metric: dict
    aggregate: str
    rule: str = "or"

    @property
    def is_copy(self) -> bool:
        return self.aggregate == "Yes"

    def summary(self) -> str:
        copies = max((m.tally for m in self.per_metric.values()), default=0)
        trials = max((len(m.values) for m in self.per_metric.values()), default=0)
        return f"{self.aggregate} ({copies}/{trials})"


def verdict_from_values(values: dict[str, list[float]], table: ThresholdTable, rule: str = "or") -> Verdict:
    if rule not in ("or", "and"):
        raise ConfigurationError("aggregate rule must be 'or' or 'and'")
    per = {}
    for name, vals in values.items():
        if name not in table.tau:
            continue
        flags = [table.flag(name, v) for v in vals]
        tally = flags.count(COPY)
        per[name] = MetricVerdict(name, list(vals), flags, tally, COPY if tally > len(vals) / 2 else NOT_COPY)
    votes = [m.flag == COPY for m in per.values()]
    hit = any(votes) if rule == "or" else (bool(votes) and all(votes))
    return Verdict(per, "Yes" if hit else "No", rule)


def verify_ownership(victim, suspect, trials: Sequence[TrialProbes], table: ThresholdTable,
                     metrics: Optional[Sequence[str]] = None, layer: Optional[int] = None,
                     rule: str = "or") -> Verdict:
    """Flag ``suspect`` per metric over the probe trials, then aggregate.

    A metric votes copy when it flags copy in a strict majority of trials.
    """
    if not trials:
        raise ConfigurationError("verification needs at least one trial")
    metrics = list(metrics or table.tau)
    return verdict_from_values(evaluate_trials(victim, suspect, trials, metrics, layer), table, rule)


# ----------------------------------------------------------------------- plan


DEFAULT_ATTACKS = (
    {"kind": "finetune", "fraction": 0.5},
    {"kind": "prune", "fraction": 0.5},
    {"kind": "distill", "finetune_iters": 1000},
    {"kind": "removal"},
)


@dataclass
class ExperimentPlan:
    dataset: str = "mnist"
    scenario: str = "ltd"
    arch: str = "smallcnn"
    seed: int = 0
    victim: dict = field(default_factory=dict)
    negatives: int = 5
    trials: int = 10
    metrics: list = field(default_factory=lambda: list(METRICS))
    layer: Optional[int] = None
    probes: dict = field(default_factory=dict)
    substitute_ratio: float = 0.1
    attacks: list = field(default_factory=lambda: [dict(a) for a in DEFAULT_ATTACKS])
    removal: dict = field(default_factory=dict)
    sweep_ratios: list = field(default_factory=list)
    aggregate: str = "or"
    holdout_negative: bool = True
    out: str = "runs/desk"

    def __post_init__(self):
        if self.dataset != "mnist":
            raise ConfigurationError(f"dataset {self.dataset!r} is not available; use 'mnist'")
        if self.scenario not in ("ltd", "lsd"):
            raise ConfigurationError("scenario must be 'ltd' or 'lsd'")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if self.negatives < 2:
            raise ConfigurationError("negatives must be >= 2")
        for r in [self.substitute_ratio, *self.sweep_ratios]:
            if not 0 < r <= 1:
                raise ConfigurationError(f"substitute ratio {r} outside (0, 1]")
        if self.aggregate not in ("or", "and"):
            raise ConfigurationError("aggregate must be 'or' or 'and'")
        for m in self.metrics:
            metric_spec(m)
        for a in self.attacks:
            if a.get("kind") not in ("removal", "finetune", "prune", "distill"):
                raise ConfigurationError(f"unknown attack {a!r}")
        try:
            self.train_config()
            self.probe_spec()
            self.removal_config()
            for a in self.attacks:
                if a["kind"] != "removal":
                    self.baseline_spec(a)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentPlan":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "ExperimentPlan":
        import yaml

        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot read plan {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("plan file must hold a mapping")
        return cls.from_mapping(raw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.victim})

    def probe_spec(self) -> ProbeSpec:
        return ProbeSpec(**self.probes)

    def removal_config(self, overrides: Optional[dict] = None) -> RemovalConfig:
        merged = {"seed": self.seed, **self.removal, **(overrides or {})}
        merged.pop("kind", None)
        merged.pop("scenario", None)
        merged.pop("substitute_ratio", None)
        return RemovalConfig(**merged)

    def baseline_spec(self, attack: dict) -> BaselineSpec:
        return BaselineSpec(**{"seed": self.seed, **attack})

    def bundle(self, scenario: Optional[str] = None, ratio: Optional[float] = None) -> DatasetBundle:
        from .data import mnist_bundle

        return mnist_bundle(scenario=scenario or self.scenario,
                            substitute_ratio=self.substitute_ratio if ratio is None else ratio, seed=self.seed)


def attack_label(attack: dict, plan: ExperimentPlan) -> str:
    if attack["kind"] == "removal":
        scenario = attack.get("scenario", plan.scenario).upper()
        ratio = attack.get("substitute_ratio")
        same = ratio is None or ratio == plan.substitute_ratio
        return f"Removal({scenario})" if same else f"Removal({scenario},{ratio:g})"
    return plan.baseline_spec(attack).label


# ----------------------------------------------------------------- experiment


@dataclass
class ReportBundle:
    out: Path
    rows: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    fidelity: dict = field(default_factory=dict)
    victim_accuracy: float = float("nan")
    failures: list = field(default_factory=list)

    @property
    def report_csv(self) -> Path:
        return self.out / "report.csv"


class Experiment:
    """Stage runner over a plan; every stage caches its artifacts under ``plan.out``."""

    def __init__(self, plan: ExperimentPlan):
        self.plan = plan
        self.out = Path(plan.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self._bundles = {}
        self._log = logging.getLogger("fpkit.run")
        if not any(getattr(h, "baseFilename", None) == str((self.out / "run.log").resolve())
                   for h in self._log.handlers):
            handler = logging.FileHandler(self.out / "run.log")
            handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
            self._log.addHandler(handler)
            self._log.setLevel(logging.INFO)

    # data and models

    def bundle(self, scenario=None, ratio=None) -> DatasetBundle:
        key = (scenario or self.plan.scenario, self.plan.substitute_ratio if ratio is None else ratio)
        if key not in self._bundles:
            self._bundles[key] = self.plan.bundle(*key)
        return self._bundles[key]

    def _cached_model(self, path: Path, build: Callable[[], LayeredModel], **meta) -> LayeredModel:
        if is_checkpoint(path):
            return load_checkpoint(path)
        model = build()
        save_checkpoint(model, path, **meta)
        return model

    def victim(self) -> LayeredModel:
        data = self.bundle()

        def build():
            model = build_model(self.plan.arch, self.plan.seed, num_classes=data.class_count,
                                input_shape=data.input_shape)
            cfg = self.plan.train_config()
            train(model, data, cfg)
            model.info = {"role": "victim", "seed": self.plan.seed, "epochs": cfg.epochs, "dataset": data.name,
                          "accuracy": evaluate_accuracy(model, data.test)}
            return model

        return self._cached_model(self.out / "victim", build)

    def negatives(self) -> list[LayeredModel]:
        paths = [self.out / "negatives" / f"neg_{i}" for i in range(self.plan.negatives)]
        if all(is_checkpoint(p) for p in paths):
            return [load_checkpoint(p) for p in paths]
        models = train_negatives(self.plan.arch, self.bundle(), self.plan.negatives, self.plan.seed,
                                 self.plan.train_config())
        for p, m in zip(paths, models):
            save_checkpoint(m, p)
        return models

    def holdout_negative(self) -> LayeredModel:
        """One more negative, trained like the others but left out of calibration."""
        def build():
            return train_negatives(self.plan.arch, self.bundle(), 2, self.plan.seed + 5000,
                                   self.plan.train_config())[0]

        return self._cached_model(self.out / "negatives" / "holdout", build)

    def trials(self) -> list[TrialProbes]:
        root = self.out / "probes"
        paths = [root / f"trial_{t}" for t in range(self.plan.trials)]
        if all((p / "seed").is_file() for p in paths):
            return [TrialProbes.load(p) for p in paths]
        sets = make_probe_trials(self.victim(), self.bundle(), self.plan.probe_spec(), self.plan.trials,
                                 self.plan.seed + 100)
        for p, s in zip(paths, sets):
            s.save(p)
        return sets

    def thresholds(self) -> ThresholdTable:
        path = self.out / "thresholds.json"
        if path.is_file():
            return ThresholdTable.load(path)
        table = calibrate_thresholds(self.victim(), self.negatives(), self.trials(), self.plan.metrics,
                                     self.plan.layer)
        table.save(path)
        return table

    def attack(self, attack: dict) -> LayeredModel:
        label = attack_label(attack, self.plan)
        path = self.out / "attacks" / _slug(label)
        if is_checkpoint(path / "model"):
            return load_checkpoint(path / "model")
        victim = self.victim()
        if attack["kind"] == "removal":
            data = self.bundle(attack.get("scenario"), attack.get("substitute_ratio"))
            cfg = self.plan.removal_config(attack)
            model, trace = run_removal(victim, data.substitute, cfg, eval_set=data.test, run_dir=path / "run")
            curves = self.out / "curves"
            curves.mkdir(exist_ok=True)
            trace.to_csv(curves / f"trace_{_slug(label)}.csv")
        else:
            model = make_baseline(victim, self.bundle().substitute, self.plan.baseline_spec(attack))
        save_checkpoint(model, path / "model", attack=label)
        return model

    def evaluate(self, label: str, suspect: LayeredModel) -> dict:
        """Per-trial metric values plus fidelity, cached as JSON."""
        path = self.out / "evals" / f"{_slug(label)}.json"
        if path.is_file():
            return json.loads(path.read_text())
        values = evaluate_trials(self.victim(), suspect, self.trials(), self.plan.metrics, self.plan.layer)
        result = {"label": label, "values": values, "fidelity": evaluate_accuracy(suspect, self.bundle().test)}
        path.parent.mkdir(exist_ok=True)
        path.write_text(json.dumps(result, indent=1) + "\n")
        return result

    # the full plan

    def run(self) -> ReportBundle:
        bundle = ReportBundle(self.out)
        table = None
        try:
            victim = self.victim()
            bundle.victim_accuracy = evaluate_accuracy(victim, self.bundle().test)
            table = self.thresholds()
        except Exception as exc:  # noqa: BLE001 - the run log records every stage failure
            self._fail(bundle, "calibration", exc)
            self.write_report(bundle, table)
            return bundle

        suspects = [("Victim", lambda: victim)]
        suspects += [(attack_label(a, self.plan), lambda a=a: self.attack(a)) for a in self.plan.attacks]
        if self.plan.holdout_negative:
            suspects.append(("Negative", self.holdout_negative))
        for label, make in suspects:
            try:
                result = self.evaluate(label, make())
            except Exception as exc:  # noqa: BLE001
                self._fail(bundle, label, exc)
                continue
            bundle.verdicts[label] = verdict_from_values(result["values"], table, self.plan.aggregate)
            bundle.fidelity[label] = result["fidelity"]
            self._log.info("%s: fidelity %.4f verdict %s", label, result["fidelity"], bundle.verdicts[label].summary())
        if self.plan.sweep_ratios:
            try:
                self.sweep()
            except Exception as exc:  # noqa: BLE001
                self._fail(bundle, "sweep", exc)
        self.write_report(bundle, table)
        return bundle

    def sweep(self) -> list[dict]:
        """Removal at each substitute ratio; one fidelity curve and one metric row per ratio."""
        rows = []
        for ratio in self.plan.sweep_ratios:
            attack = {"kind": "removal", "substitute_ratio": ratio}
            label = attack_label(attack, self.plan)
            result = self.evaluate(label, self.attack(attack))
            row = {"ratio": ratio, "fidelity": result["fidelity"]}
            row.update({m: float(np.mean(v)) for m, v in result["values"].items()})
            rows.append(row)
        curves = self.out / "curves"
        curves.mkdir(exist_ok=True)
        _write_csv(curves / "ratio_sweep.csv", rows)
        _plot_ratio_sweep(rows, self.out / "distance_vs_ratio.png")
        return rows

    def _fail(self, bundle: ReportBundle, stage: str, exc: Exception) -> None:
        bundle.failures.append((stage, f"{type(exc).__name__}: {exc}"))
        self._log.error("stage %s failed: %s\n%s", stage, exc, traceback.format_exc())

    def write_report(self, bundle: ReportBundle, table: Optional[ThresholdTable]) -> None:
        rows = []
        if table is not None:
            for m in self.plan.metrics:
                if m in table.tau:
                    rows.append({"attack": "calibration", "metric": m, "mean": table.tau[m], "std": "",
                                 "flag": table.modes[m]})
        for label, verdict in bundle.verdicts.items():
            for m, mv in verdict.per_metric.items():
                rows.append({"attack": label, "metric": m, "mean": mv.mean, "std": mv.std, "flag": mv.flag})
        bundle.rows = rows
        _write_csv(self.out / "report.csv", rows, ["attack", "metric", "mean", "std", "flag"])
        vrows = []
        for label, verdict in bundle.verdicts.items():
            row = {"attack": label, "fidelity": bundle.fidelity.get(label),
                   "drop": bundle.victim_accuracy - bundle.fidelity.get(label, float("nan")),
                   "ownership": verdict.summary()}
            row.update({m: mv.tally_text for m, mv in verdict.per_metric.items()})
            vrows.append(row)
        _write_csv(self.out / "verdicts.csv", vrows,
                   ["attack", "fidelity", "drop", "ownership", *self.plan.metrics])
        traces = sorted((self.out / "curves").glob("trace_*.csv")) if (self.out / "curves").is_dir() else []
        if traces:
            _plot_fidelity(traces, self.out / "fidelity.png")
        with open(self.out / "failures.txt", "w") as fh:
            for stage, msg in bundle.failures:
                fh.write(f"{stage}\t{msg}\n")


def run_experiment(plan: ExperimentPlan) -> ReportBundle:
    return Experiment(plan).run()


def robustness(victim: LayeredModel, suspect: LayeredModel, clean: LabeledSet,
               cfg: Optional[AdvConfig] = None) -> dict:
    """Clean and PGD accuracies of both models plus RobD, on PGD examples crafted against the victim."""
    cfg = cfg or AdvConfig(epsilon=0.1, step_size=0.01, steps=20)
    adv = pgd(victim, clean, cfg)
    rob_v, rob_s, robd = rob_and_robd(victim, suspect, adv)
    return {"clean_victim": evaluate_accuracy(victim, clean), "clean_suspect": evaluate_accuracy(suspect, clean),
            "rob_victim": rob_v, "rob_suspect": rob_s, "robd": robd}


# -------------------------------------------------------------------- helpers


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in label).strip("_")


def _write_csv(path: Path, rows: list[dict], header: Optional[list] = None) -> None:
    header = header or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def _plot_fidelity(traces: list[Path], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for t in traces:
        curve = RemovalTrace.from_csv(t).fidelity_curve()
        if curve:
            ax.plot(*zip(*curve), marker=".", label=t.stem.removeprefix("trace_"))
    ax.set_xlabel("iteration")
    ax.set_ylabel("test accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_ratio_sweep(rows: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ratios = [r["ratio"] for r in rows]
    metrics = [k for k in rows[0] if k not in ("ratio", "fidelity")] if rows else []
    fig, axes = plt.subplots(1, max(1, len(metrics)), figsize=(3 * max(1, len(metrics)), 3))
    for ax, m in zip(np.atleast_1d(axes), metrics):
        ax.plot(ratios, [r[m] for r in rows], marker="o")
        ax.set_title(m)
        ax.set_xlabel("substitute ratio")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
