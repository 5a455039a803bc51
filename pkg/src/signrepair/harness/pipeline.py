"""Stage orchestration: prepare -> classifier -> generator -> attacks -> reconstructor -> evaluate."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..light_attacks import AttackSpec, apply_light_patch, make_attack_suite, suite_from_json, suite_to_json
from ..mask_lab import BinaryMask, mask_suite
from ..patch_forge import Generator, mean_pattern_diversity, train_generator
from ..reconstructor import (
    GeneratorThreat,
    Reconstructor,
    build_view_sets,
    repair_batch,
    train_reconstructor,
)
from ..sign_data import Dataset, augment_dataset, load_manifest, write_manifest
from ..tsr_classifier import Classifier, Metrics, evaluate, feature_similarity, train_classifier
from .config import ExperimentConfig
from .toy import make_toy_dataset

log = logging.getLogger(__name__)

STAGES = ("prepare", "classifier", "generator", "attacks", "reconstructor", "evaluate")
# upstream stages each stage's artifacts depend on
DEPENDS = {
    "prepare": (),
    "classifier": ("prepare",),
    "generator": ("classifier",),
    "attacks": (),
    "reconstructor": ("generator",),
    "evaluate": ("reconstructor", "attacks"),
}
STAGE_SECTIONS = {
    "prepare": ("seed", "data"),
    "classifier": ("classifier",),
    "generator": ("generator", "masks"),
    "attacks": ("seed", "attacks"),
    "reconstructor": ("reconstructor",),
    "evaluate": ("evaluation",),
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


# ---------------------------------------------------------------- report bundle

@dataclass
class ReportBundle:
    name: str
    variant: str
    config: dict
    fingerprint: str
    classifier_hash: str | None = None
    conditions: dict[str, dict] = field(default_factory=dict)
    loss_curves: dict[str, list] = field(default_factory=dict)
    similarity: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    completed: list[str] = field(default_factory=list)
    failed_stage: str | None = None
    error: str | None = None

    @property
    def partial(self) -> bool:
        return self.failed_stage is not None or "evaluate" not in self.completed

    @property
    def missing_stages(self) -> list[str]:
        return [s for s in STAGES if s not in self.completed]

    def accuracy(self, condition: str) -> float:
        """Accuracy recomputed from the stored confusion matrix."""
        cm = np.asarray(self.conditions[condition]["confusion"])
        return float(np.trace(cm) / cm.sum())

    def repaired_accuracies(self) -> dict[str, float]:
        return {k.split("/")[0]: self.accuracy(k) for k in self.conditions
                if k.endswith("/repaired") and not k.startswith("clean")}

    @property
    def repair_score(self) -> float:
        """Mean repaired accuracy over every contaminated condition."""
        vals = list(self.repaired_accuracies().values())
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["partial"] = self.partial
        d["missing_stages"] = self.missing_stages
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReportBundle":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ReportBundle":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- workspace

class Workspace:
    """On-disk layout of one pipeline run."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def state_file(self) -> Path:
        return self.root / "stages.json"

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.pt"

    def attack_file(self, kind: str) -> Path:
        return self.root / "attacks" / f"{kind}.json"

    def state(self) -> dict:
        return json.loads(self.state_file.read_text()) if self.state_file.exists() else {}

    def mark(self, stage: str, fingerprint: str, **meta) -> None:
        st = self.state()
        st[stage] = {"fingerprint": fingerprint, **meta}
        self.state_file.write_text(json.dumps(st, indent=1))

    def done(self, stage: str, fingerprint: str) -> bool:
        return self.state().get(stage, {}).get("fingerprint") == fingerprint


def stage_fingerprints(cfg: ExperimentConfig) -> dict[str, str]:
    """Chained fingerprints: a stage is stale whenever a section it depends on changed."""
    out: dict[str, str] = {}
    for stage in STAGES:
        parts = [out[d] for d in DEPENDS[stage]] + [cfg.fingerprint(*STAGE_SECTIONS[stage])]
        out[stage] = hashlib.sha256("".join(parts).encode()).hexdigest()
    return out


def save_checkpoint(obj: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(obj, path)


def load_checkpoint(path: Path) -> dict:
    return torch.load(path, weights_only=False)


# ---------------------------------------------------------------- data helpers

def training_data(d: Dataset, cfg: ExperimentConfig) -> Dataset:
    return augment_dataset(d, seed=cfg.seed) if cfg.data.augment else d


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data.manifest:
        return load_manifest(cfg.data.manifest, seed=cfg.seed, test_fraction=cfg.data.test_fraction)
    return make_toy_dataset(cfg.data.toy_classes, cfg.data.toy_per_class, cfg.seed, cfg.data.test_fraction)


def masks_for(cfg: ExperimentConfig) -> list[BinaryMask]:
    return mask_suite(cfg.masks.levels, cfg.masks.policy)


def reconstructor_config(cfg: ExperimentConfig):
    # without augmentation the reconstructor also sees unjittered training views
    return dataclasses.replace(cfg.reconstructor, view_jitter=cfg.reconstructor.view_jitter and cfg.data.augment)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalInputs:
    """Fixed test inputs shared by every model variant so comparisons are paired."""

    x: np.ndarray
    y: np.ndarray
    views: int
    clean_sets: np.ndarray
    contaminated: dict[str, np.ndarray]  # condition -> (N, R, 64, 64, 3)


def test_arrays(d: Dataset, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    x, y = d.arrays("test")
    if cfg.evaluation.max_test is not None and cfg.evaluation.max_test < len(x):
        keep = np.sort(np.random.default_rng([cfg.seed, 11]).choice(len(x), cfg.evaluation.max_test, replace=False))
        x, y = x[keep], y[keep]
    return x, y


def light_view_sets(sets: np.ndarray, suite: list[AttackSpec], rng: np.random.Generator) -> np.ndarray:
    """Every view gets its own spec drawn from the suite."""
    out = np.empty_like(sets)
    picks = rng.integers(0, len(suite), size=sets.shape[:2])
    for i in range(sets.shape[0]):
        for r in range(sets.shape[1]):
            out[i, r] = apply_light_patch(sets[i, r], suite[picks[i, r]])
    return out


def build_eval_inputs(d: Dataset, cfg: ExperimentConfig, threat: GeneratorThreat,
                      suites: dict[str, list[AttackSpec]], views: int | None = None) -> EvalInputs:
    views = views or cfg.evaluation.views
    x, y = test_arrays(d, cfg)
    clean = build_view_sets(x, views, np.random.default_rng([cfg.seed, 1, views]), jitter=True)
    contaminated = {}
    flat = clean.reshape(-1, *clean.shape[2:])
    contaminated["generator"] = threat.contaminate_views(flat, np.random.default_rng([cfg.seed, 2, views])
                                                         ).reshape(clean.shape)
    for k, kind in enumerate(sorted(suites)):
        contaminated[kind] = light_view_sets(clean, suites[kind], np.random.default_rng([cfg.seed, 3, k, views]))
    return EvalInputs(x, y, views, clean, contaminated)


def evaluate_reconstructor(c: Classifier, s: Reconstructor | None, inputs: EvalInputs,
                           similarity_samples: int = 0) -> tuple[dict, dict]:
    """Per-condition metrics and (optionally) feature-similarity statistics."""
    y = inputs.y
    r = inputs.views
    conds: dict[str, Metrics] = {"clean": evaluate(c, inputs.x, y)}
    repaired = {}
    if s is not None:
        repaired["clean"] = repair_batch(s, inputs.clean_sets)
        conds["clean/repaired"] = evaluate(c, repaired["clean"], y)
    for name, sets in inputs.contaminated.items():
        conds[f"{name}/contaminated"] = evaluate(c, sets.reshape(-1, *sets.shape[2:]), np.repeat(y, r))
        if s is not None:
            repaired[name] = repair_batch(s, sets)
            conds[f"{name}/repaired"] = evaluate(c, repaired[name], y)
    sim = {}
    if similarity_samples and s is not None:
        sim = similarity_stats(c, inputs, repaired["generator"], similarity_samples)
    return {k: m.to_dict() for k, m in conds.items()}, sim


def similarity_stats(c: Classifier, inputs: EvalInputs, repaired: np.ndarray, n: int) -> dict:
    """Per-layer cosine similarity to the authentic image.

    AA compares against a clean synthesised view, CA against a contaminated
    view and RA against the repaired output.
    """
    idx = np.arange(min(n, len(inputs.x)))
    pairs = {"AA": inputs.clean_sets[idx, 0], "CA": inputs.contaminated["generator"][idx, 0], "RA": repaired[idx]}
    out = {}
    for key, other in pairs.items():
        per_layer: dict[str, list[float]] = {}
        per_sample = []
        for i in idx:
            sims = feature_similarity(c, inputs.x[i], other[i])
            vals = [v for v in sims.values() if v is not None]
            per_sample.append(float(np.mean(vals)) if vals else float("nan"))
            for layer, v in sims.items():
                if v is not None:
                    per_layer.setdefault(layer, []).append(v)
        out[key] = {"mean": float(np.nanmean(per_sample)), "per_sample": per_sample,
                    "per_layer": {k: float(np.mean(v)) for k, v in per_layer.items()}}
    return out


# ---------------------------------------------------------------- pipeline

class Pipeline:
    """Runs or resumes the staged pipeline inside one workspace."""

    def __init__(self, cfg: ExperimentConfig, out: str | Path, resume: bool = True):
        self.cfg = cfg
        self.ws = Workspace(out)
        self.resume = resume
        self.fp = stage_fingerprints(cfg)
        self.dataset: Dataset | None = None
        self.classifier: Classifier | None = None
        self.generator: Generator | None = None
        self.suites: dict[str, list[AttackSpec]] = {}
        self.reconstructor: Reconstructor | None = None
        self.curves: dict[str, list] = {}
        self.bundle = ReportBundle(cfg.name, cfg.variant, cfg.to_dict(), cfg.fingerprint())

    def _cached(self, stage: str) -> bool:
        return self.resume and self.ws.done(stage, self.fp[stage])

    def stage_prepare(self) -> None:
        if not self._cached("prepare"):
            write_manifest(build_dataset(self.cfg), self.ws.data_dir)
            self.ws.mark("prepare", self.fp["prepare"])
        # always reload from disk so fresh and resumed runs see identical pixels
        self.dataset = load_manifest(self.ws.data_dir)

    def stage_classifier(self) -> None:
        path = self.ws.checkpoint("classifier")
        if self._cached("classifier") and path.exists():
            self.classifier = Classifier.from_checkpoint(load_checkpoint(path))
        else:
            c = train_classifier(training_data(self.dataset, self.cfg), self.cfg.classifier,
                                 self.cfg.fingerprint("data", "classifier"))
            save_checkpoint(c.to_checkpoint(), path)
            self.ws.mark("classifier", self.fp["classifier"])
            self.classifier = c
        self.curves["classifier"] = list(self.classifier.loss_curve)

    def stage_generator(self) -> None:
        path = self.ws.checkpoint("generator")
        if self._cached("generator") and path.exists():
            ckpt = load_checkpoint(path)
            self.generator = Generator.from_checkpoint(ckpt)
            self.curves["generator"] = ckpt.get("loss_curve", [])
            return
        run = train_generator(self.classifier, training_data(self.dataset, self.cfg), masks_for(self.cfg),
                              self.cfg.generator)
        save_checkpoint({**run.generator.to_checkpoint(), "loss_curve": run.loss_curve}, path)
        self.ws.mark("generator", self.fp["generator"])
        self.generator, self.curves["generator"] = run.generator, run.loss_curve

    def stage_attacks(self) -> None:
        kinds = self.cfg.attacks.kinds
        if self._cached("attacks") and all(self.ws.attack_file(k).exists() for k in kinds):
            self.suites = {k: suite_from_json(self.ws.attack_file(k).read_text()) for k in kinds}
            return
        self.suites = {k: make_attack_suite(k, self.cfg.attacks.count, self.cfg.seed,
                                            self.cfg.attacks.ranges.get(k)) for k in kinds}
        for k, suite in self.suites.items():
            self.ws.attack_file(k).parent.mkdir(parents=True, exist_ok=True)
            self.ws.attack_file(k).write_text(suite_to_json(suite))
        self.ws.mark("attacks", self.fp["attacks"])

    def stage_reconstructor(self) -> None:
        path = self.ws.checkpoint("reconstructor")
        if self._cached("reconstructor") and path.exists():
            ckpt = load_checkpoint(path)
            self.reconstructor = Reconstructor.from_checkpoint(ckpt)
            self.curves["reconstructor"] = ckpt.get("loss_curve", [])
            return
        threat = GeneratorThreat(self.generator, masks_for(self.cfg))
        run = train_reconstructor(self.classifier, training_data(self.dataset, self.cfg), threat,
                                  reconstructor_config(self.cfg))
        save_checkpoint({**run.reconstructor.to_checkpoint(), "loss_curve": run.loss_curve}, path)
        self.ws.mark("reconstructor", self.fp["reconstructor"])
        self.reconstructor, self.curves["reconstructor"] = run.reconstructor, run.loss_curve

    def stage_evaluate(self) -> None:
        threat = GeneratorThreat(self.generator, masks_for(self.cfg))
        inputs = build_eval_inputs(self.dataset, self.cfg, threat, self.suites)
        conds, sim = evaluate_reconstructor(self.classifier, self.reconstructor, inputs,
                                            self.cfg.evaluation.similarity_samples)
        self.bundle.conditions, self.bundle.similarity = conds, sim
        x, _ = test_arrays(self.dataset, self.cfg)
        self.bundle.extras["pattern_diversity"] = mean_pattern_diversity(self.generator, x[:64])
        self.bundle.extras["views"] = inputs.views
        self.ws.mark("evaluate", self.fp["evaluate"])

    def run(self, until: str = "evaluate") -> ReportBundle:
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}; expected one of {STAGES}")
        (self.ws.root / "config.lock").write_text(self.cfg.to_yaml())
        timings = {}
        for stage in STAGES[:STAGES.index(until) + 1]:
            was_cached = self._cached(stage)
            t0 = time.perf_counter()
            try:
                getattr(self, f"stage_{stage}")()
            except Exception as exc:  # noqa: BLE001 - recorded in the bundle
                log.error("stage %s failed: %s", stage, exc)
                self.bundle.failed_stage = stage
                self.bundle.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
                break
            recorded = self.ws.state().get(stage, {})
            if was_cached and "seconds" in recorded:
                # a resumed stage reports the compute time of its stored artifact
                timings[stage] = recorded["seconds"]
            else:
                timings[stage] = time.perf_counter() - t0
                self.ws.mark(stage, self.fp[stage], seconds=timings[stage])
            self.bundle.completed.append(stage)
            log.info("stage %s done in %.1fs", stage, timings[stage])
        if self.classifier is not None:
            self.bundle.classifier_hash = self.classifier.param_hash()
        self.bundle.loss_curves = dict(self.curves)
        self.bundle.extras["seconds"] = timings
        self.bundle.save(self.ws.root / "bundle.json")
        return self.bundle


def run_pipeline(cfg: ExperimentConfig, out: str | Path, until: str = "evaluate",
                 resume: bool = True) -> ReportBundle:
    """Run the stages up to ``until``; a failure yields a partial bundle naming the stage."""
    return Pipeline(cfg, out, resume).run(until)


def load_pipeline(cfg: ExperimentConfig, out: str | Path) -> Pipeline:
    """Reload every trained artifact of a completed run without retraining."""
    p = Pipeline(cfg, out, resume=True)
    missing = [s for s in STAGES[:-1] if not p.ws.done(s, p.fp[s])]
    if missing:
        raise StageError(missing[0], f"base artifacts missing or stale in {out} (stages {missing})")
    for stage in STAGES[:-1]:
        getattr(p, f"stage_{stage}")()
    return p


# ---------------------------------------------------------------- ablations

def _variant_dir(out: Path, variant: str) -> Path:
    return out / variant.replace("=", "_").replace(",", "-")


def _cached_model(path: Path, key: str, train, to_ckpt, from_ckpt):
    """Load ``path`` when its stored key matches, otherwise train and store."""
    meta = path.with_suffix(".json")
    if path.exists() and meta.exists() and json.loads(meta.read_text()).get("key") == key:
        ckpt = load_checkpoint(path)
        return from_ckpt(ckpt), ckpt.get("loss_curve", [])
    model, curve = train()
    save_checkpoint({**to_ckpt(model), "loss_curve": curve}, path)
    meta.write_text(json.dumps({"key": key}))
    return model, curve


def run_ablations(base_cfg: ExperimentConfig, base_out: str | Path,
                  out: str | Path | None = None) -> list[ReportBundle]:
    """Paired ablations on the frozen base classifier.

    Every variant is scored on the same test inputs, contaminated by the base
    generator over the full mask suite plus the held-out light suites.
    Returns the base bundle followed by one bundle per variant; each bundle's
    ``extras["axis"]`` names its ablation axis.
    """
    base = load_pipeline(base_cfg, base_out)
    out = Path(out) if out is not None else Path(base_out) / "ablations"
    out.mkdir(parents=True, exist_ok=True)
    cfg, ab = base_cfg, base_cfg.ablations
    c = base.classifier
    chash = c.param_hash()
    train_set = training_data(base.dataset, cfg)
    inputs = build_eval_inputs(base.dataset, cfg, GeneratorThreat(base.generator, masks_for(cfg)), base.suites)
    x_test, _ = test_arrays(base.dataset, cfg)
    probe = x_test[:64]
    bundles: list[ReportBundle] = []

    def record(variant: str, vcfg: ExperimentConfig, s: Reconstructor, axis: str,
               ev: EvalInputs = inputs, curves: dict | None = None, **extras) -> ReportBundle:
        conds, _ = evaluate_reconstructor(c, s, ev)
        b = ReportBundle(cfg.name, variant, vcfg.to_dict(), vcfg.fingerprint(), chash, conds,
                         curves or {}, {}, {"axis": axis, "views": ev.views, **extras}, list(STAGES))
        bundles.append(b)
        log.info("ablation %s repair score %.4f", variant, b.repair_score)
        return b

    def reconstructor_for(variant: str, vcfg: ExperimentConfig, gen: Generator, data: Dataset) -> tuple:
        key = hashlib.sha256((vcfg.fingerprint("data", "generator", "masks", "reconstructor") + chash).encode()
                             ).hexdigest()
        threat = GeneratorThreat(gen, masks_for(vcfg))

        def train():
            run = train_reconstructor(c, data, threat, reconstructor_config(vcfg))
            return run.reconstructor, run.loss_curve

        return _cached_model(_variant_dir(out, variant) / "reconstructor.pt", key, train,
                             lambda m: m.to_checkpoint(), Reconstructor.from_checkpoint)

    def generator_for(variant: str, vcfg: ExperimentConfig, data: Dataset) -> tuple:
        key = hashlib.sha256((vcfg.fingerprint("data", "generator", "masks") + chash).encode()).hexdigest()

        def train():
            run = train_generator(c, data, masks_for(vcfg), vcfg.generator)
            return run.generator, run.loss_curve

        return _cached_model(_variant_dir(out, variant) / "generator.pt", key, train,
                             lambda m: m.to_checkpoint(), Generator.from_checkpoint)

    base_div = mean_pattern_diversity(base.generator, probe)
    record("base", cfg, base.reconstructor, "base", curves=base.curves, pattern_diversity=base_div)

    if ab.attention:
        v = cfg.replace(variant="attention=off", **{"reconstructor.attention": False})
        s, curve = reconstructor_for(v.variant, v, base.generator, train_set)
        record(v.variant, v, s, "attention", curves={"reconstructor": curve})

    if ab.diversity:
        v = cfg.replace(variant="diversity=off", **{"generator.beta": 0.0})
        g, gcurve = generator_for(v.variant, v, train_set)
        s, curve = reconstructor_for(v.variant, v, g, train_set)
        record(v.variant, v, s, "diversity", curves={"generator": gcurve, "reconstructor": curve},
               pattern_diversity=mean_pattern_diversity(g, probe))

    if ab.augmentation:
        v = cfg.replace(variant="augmentation=off", **{"data.augment": False})
        plain = training_data(base.dataset, v)
        g, gcurve = generator_for(v.variant, v, plain)
        s, curve = reconstructor_for(v.variant, v, g, plain)
        record(v.variant, v, s, "augmentation", curves={"generator": gcurve, "reconstructor": curve})

    if ab.mask_levels:
        levels = tuple(cfg.masks.levels)
        for n in range(1, len(levels) + 1):
            subset = levels[:n]
            name = "masks=" + ",".join(map(str, subset))
            if n == len(levels):
                record(name, cfg.replace(variant=name), base.reconstructor, "mask_levels", levels=list(subset))
                continue
            v = cfg.replace(variant=name, **{"masks.levels": subset})
            s, curve = reconstructor_for(name, v, base.generator, train_set)
            record(name, v, s, "mask_levels", curves={"reconstructor": curve}, levels=list(subset))

    if ab.view_counts:
        if not cfg.reconstructor.shared_weights:
            raise ValueError("the view-count sweep needs a shared-weights reconstructor")
        for r in ab.view_counts:
            name = f"views={r}"
            ev = inputs if r == inputs.views else build_eval_inputs(base.dataset, cfg, GeneratorThreat(
                base.generator, masks_for(cfg)), base.suites, views=r)
            record(name, cfg.replace(variant=name, **{"evaluation.views": r}), base.reconstructor, "views", ev)
            del ev
    return bundles
