"""Declarative experiment configs and the (backbone x loss x seed) sweep."""
from __future__ import annotations

import copy
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .backbones import BACKBONES
from .data import DataProvider, generate_synthetic_classes, load_modelnet40
from .exceptions import ConfigError, InvalidArgumentError
from .harness import AccuracyMatrix, aggregate_and_emit, forgetting_measure, run_scenario
from .losses import LOSS_KINDS, DistillConfig
from .sampler import SamplerConfig, build_scenario, fixed_scenario
from .trainer import TrainConfig, desk_config

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "POINTCLIMB_DATA_ROOT"
PROFILES = ("desk", "full")
# keys that do not influence results and are left out of results.json
_NON_SEMANTIC = ("output_dir", "workers")


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    scenario: dict = field(default_factory=lambda: {"kind": "fixed", "sizes": [4, 2, 2, 2]})
    backbones: list = field(default_factory=lambda: ["pointnet_lite"])
    losses: list = field(default_factory=lambda: ["ft"])
    seeds: list = field(default_factory=lambda: [0])
    profile: str = "desk"
    train: dict = field(default_factory=dict)
    output_dir: str = "results"
    workers: int = 1
    sample_std: bool = False

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(doc))
        cfg.canonicalize()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def canonicalize(self):
        ds = dict(self.dataset)
        kind = ds.get("kind", "synthetic")
        if kind == "synthetic":
            ds = {"kind": "synthetic", "num_classes": int(ds.get("num_classes", 10)),
                  "samples_per_class": int(ds.get("samples_per_class", 40)),
                  "seed": int(ds.get("seed", 0))}
        elif kind == "modelnet40":
            ds = {"kind": "modelnet40", "path": ds.get("path")}
        else:
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'modelnet40', got {kind!r}")
        self.dataset = ds

        sc = dict(self.scenario)
        skind = sc.get("kind", "fixed")
        if skind == "fixed":
            sizes = sc.get("sizes")
            if not sizes or not all(isinstance(s, int) and s > 0 for s in sizes):
                raise ConfigError("scenario.sizes must be a non-empty list of positive integers")
            sc = {"kind": "fixed", "sizes": list(sizes)}
        elif skind == "veristic":
            try:
                sc = {"kind": "veristic", "tc": int(sc["tc"]), "low": int(sc["low"]),
                      "high": int(sc["high"]), "seed": int(sc.get("seed", 0))}
            except KeyError as exc:
                raise ConfigError(f"veristic scenario needs {exc.args[0]!r}") from None
            try:
                SamplerConfig(sc["tc"], sc["low"], sc["high"], sc["seed"]).validate()
            except InvalidArgumentError as exc:
                raise ConfigError(f"scenario: {exc}") from None
        else:
            raise ConfigError(f"scenario.kind must be 'fixed' or 'veristic', got {skind!r}")
        self.scenario = sc

        for name, allowed in (("backbones", BACKBONES), ("losses", LOSS_KINDS)):
            values = list(getattr(self, name))
            if not values:
                raise ConfigError(f"{name} must be non-empty")
            bad = [v for v in values if v not in allowed]
            if bad:
                raise ConfigError(f"{name} contains unknown entries {bad}; allowed {list(allowed)}")
            setattr(self, name, values)
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        self.seeds = list(self.seeds)
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}")
        if int(self.workers) < 1:
            raise ConfigError("workers must be >= 1")
        self.workers = int(self.workers)
        self.sample_std = bool(self.sample_std)
        self.train = dict(self.train)
        allowed = set(TrainConfig.__dataclass_fields__) - {"backbone", "seed"}
        unknown = set(self.train) - allowed
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        loss_keys = set(self.train.get("loss", {})) - set(DistillConfig.__dataclass_fields__)
        if loss_keys:
            raise ConfigError(f"unknown train.loss keys: {sorted(loss_keys)}")
        if "loss_kind" in self.train.get("loss", {}):
            raise ConfigError("train.loss.loss_kind is set per run from 'losses'")
        for b in self.backbones:
            try:
                self.train_config(b, "ft", self.seeds[0])
            except (InvalidArgumentError, TypeError) as exc:
                raise ConfigError(f"train: {exc}") from None
        return self

    def to_dict(self):
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def semantic_dict(self):
        d = self.to_dict()
        for k in _NON_SEMANTIC:
            d.pop(k)
        return d

    def train_config(self, backbone, loss, seed):
        overrides = copy.deepcopy(self.train)
        loss_cfg = DistillConfig(**{**overrides.pop("loss", {}), "loss_kind": loss})
        if self.profile == "desk":
            cfg = desk_config(backbone=backbone, seed=seed, loss=loss_cfg, **overrides)
        else:
            cfg = TrainConfig(backbone=backbone, seed=seed, loss=loss_cfg, **overrides)
        return cfg.validate()

    def dataset_path(self):
        return os.environ.get(DATA_ROOT_ENV) or self.dataset.get("path")

    def num_classes(self):
        return self.dataset["num_classes"] if self.dataset["kind"] == "synthetic" else 40

    def scenario_for(self, seed):
        sc = self.scenario
        if sc["kind"] == "fixed":
            return fixed_scenario(sc["sizes"], seed, num_classes=self.num_classes())
        return build_scenario(SamplerConfig(sc["tc"], sc["low"], sc["high"], sc["seed"]))

    def check_ready(self):
        """Fail-fast checks that need no training."""
        if self.dataset["kind"] == "modelnet40":
            path = self.dataset_path()
            if not path or not os.path.isdir(path):
                raise ConfigError(f"ModelNet40 path {path!r} does not exist "
                                  f"(set dataset.path or ${DATA_ROOT_ENV})")
        sc = self.scenario
        total = sum(sc["sizes"]) if sc["kind"] == "fixed" else sc["tc"]
        if total > self.num_classes():
            raise ConfigError(f"scenario needs {total} classes, dataset has {self.num_classes()}")
        return self


def load_data(config, n_points):
    ds = config.dataset
    if ds["kind"] == "synthetic":
        return generate_synthetic_classes(ds["num_classes"], ds["samples_per_class"], n_points,
                                          seed=ds["seed"])
    return load_modelnet40(config.dataset_path(), n_points=n_points)


def run_one(config, backbone, loss, seed, run_dir=None, data=None):
    """Train and evaluate one (backbone, loss, seed) combination."""
    tcfg = config.train_config(backbone, loss, seed)
    scenario = config.scenario_for(seed)
    train, test = data if data is not None else load_data(config, tcfg.n_points)
    provider = DataProvider.from_scenario(train, test, scenario)
    ckpt_dir = os.path.join(run_dir, "checkpoints") if run_dir else None
    _, matrix = run_scenario(provider, tcfg, checkpoint_dir=ckpt_dir)
    manifest = {
        "backbone": backbone, "loss": loss, "seed": seed,
        "experiment": config.semantic_dict(),
        "train_config": tcfg.to_dict(),
        "scenario": scenario.to_dict(),
        "accuracy": matrix.to_dict(),
        "forgetting": forgetting_measure(matrix),
        "checkpoints": [f"checkpoints/task{t}.json" for t in range(len(matrix))] if run_dir else [],
    }
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        tmp = os.path.join(run_dir, "manifest.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, os.path.join(run_dir, "manifest.json"))
    return manifest


def run_name(backbone, loss, seed):
    return f"{backbone}-{loss}-seed{seed}"


def _job(args, cache=None):
    config_doc, backbone, loss, seed, run_dir = args
    config = ExperimentConfig.from_dict(config_doc)
    try:
        data = None
        if cache is not None:
            n_points = config.train_config(backbone, loss, seed).n_points
            if n_points not in cache:
                cache[n_points] = load_data(config, n_points)
            data = cache[n_points]
        return run_one(config, backbone, loss, seed, run_dir, data), None
    except Exception as exc:  # reported per run; the sweep continues
        logger.exception("run %s failed", run_name(backbone, loss, seed))
        return None, f"{type(exc).__name__}: {exc}"


def run_benchmark(config, out_dir=None):
    """Execute every run and emit the aggregated report.

    Returns ``(manifests, failures)``; ``failures`` maps run names to errors.
    """
    config.check_ready()
    out_dir = out_dir or config.output_dir
    jobs = [(config.to_dict(), b, l, s, os.path.join(out_dir, "runs", run_name(b, l, s)))
            for b in config.backbones for l in config.losses for s in config.seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_job, jobs))
    else:
        cache = {}
        outcomes = [_job(j, cache) for j in jobs]
    manifests, failures = [], {}
    for (_, b, l, s, _), (manifest, err) in zip(jobs, outcomes):
        if err is None:
            manifests.append(manifest)
        else:
            failures[run_name(b, l, s)] = err
    if manifests:
        emit_report(manifests, out_dir, config.semantic_dict(), config.sample_std)
    return manifests, failures


def emit_report(manifests, out_dir, config_doc=None, sample_std=False):
    runs, scenarios, seeds = {}, {}, set()
    sizes = None
    for m in manifests:
        runs.setdefault((m["backbone"], m["loss"]), []).append(
            (m["seed"], AccuracyMatrix.from_dict(m["accuracy"])))
        scenarios[m["seed"]] = m["scenario"]
        seeds.add(m["seed"])
        if sizes is None:
            sizes = m["scenario"]["sizes"]
        elif sizes != m["scenario"]["sizes"]:
            raise InvalidArgumentError("runs use different scenario shapes")
    ordered = {k: [mat for _, mat in sorted(v, key=lambda p: p[0])] for k, v in runs.items()}
    if config_doc is None:
        config_doc = manifests[0].get("experiment")
    return aggregate_and_emit(ordered, out_dir, sizes, scenarios=scenarios, seeds=sorted(seeds),
                              config=config_doc, sample_std=sample_std)


def load_manifests(run_root):
    runs_dir = os.path.join(run_root, "runs")
    if not os.path.isdir(runs_dir):
        raise InvalidArgumentError(f"{runs_dir} does not exist")
    out = []
    for name in sorted(os.listdir(runs_dir)):
        path = os.path.join(runs_dir, name, "manifest.json")
        if os.path.exists(path):
            with open(path) as fh:
                out.append(json.load(fh))
    if not out:
        raise InvalidArgumentError(f"no run manifests under {runs_dir}")
    return out


def verify_bundle(out_dir):
    """Re-check a results bundle; returns a list of problems (empty when sound)."""
    path = os.path.join(out_dir, "results.json")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        return [f"cannot read {path}: {exc}"]
    problems = []
    for key in ("scenario", "seeds", "runs"):
        if key not in doc:
            problems.append(f"results.json lacks {key!r}")
    if problems:
        return problems
    sizes = doc["scenario"].get("sizes", [])
    for seed, sc in doc["scenario"].get("per_seed", {}).items():
        flat = [c for t in sc["tasks"] for c in t]
        if len(flat) != len(set(flat)):
            problems.append(f"seed {seed}: scenario tasks overlap")
        if [len(t) for t in sc["tasks"]] != sizes:
            problems.append(f"seed {seed}: scenario shape differs from {sizes}")
    raw = {(r["backbone"], r["loss"]): r["matrices"] for r in doc.get("raw", [])}
    for run in doc["runs"]:
        tag = f"{run['backbone']}/{run['loss']}"
        if len(run["columns"]) != len(sizes):
            problems.append(f"{tag}: {len(run['columns'])} columns for {len(sizes)} tasks")
        for col in run["columns"]:
            if not 0.0 <= col["mean"] <= 1.0:
                problems.append(f"{tag} task {col['task']}: mean {col['mean']} outside [0, 1]")
            if col["std"] < 0:
                problems.append(f"{tag} task {col['task']}: negative std")
        mats = raw.get((run["backbone"], run["loss"]))
        if mats is None:
            problems.append(f"{tag}: no raw matrices")
            continue
        if len(mats) != len(doc["seeds"]):
            problems.append(f"{tag}: {len(mats)} seeds recorded, expected {len(doc['seeds'])}")
        for i, m in enumerate(mats):
            for t, (u, b, c) in enumerate(zip(m["union"], m["breakdown"], m["counts"])):
                if len(b) != t + 1:
                    problems.append(f"{tag} seed #{i} task {t}: breakdown has {len(b)} entries")
                if sum(c) and abs(sum(x * n for x, n in zip(b, c)) / sum(c) - u) > 1e-9:
                    problems.append(f"{tag} seed #{i} task {t}: union is not the weighted breakdown")
        for col in run["columns"]:
            vals = [m["union"][col["task"]] for m in mats]
            if abs(sum(vals) / len(vals) - col["mean"]) > 1e-12:
                problems.append(f"{tag} task {col['task']}: mean disagrees with raw runs")
    return problems
