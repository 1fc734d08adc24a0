"""End-to-end experiment orchestration.

:func:`run_experiment` executes the staged pipeline — dataset, denoiser,
encoder pair, classifiers, semantic attributes, phase-marker calibration,
attack, evaluation — writing every artifact into a run directory. Each stage's
output lives in a content-addressed store keyed by a signature of its own
settings plus its upstream signatures, so reruns (and sweep variants that
share upstream settings) load finished stages instead of recomputing them.
Every persisted artifact is hashed and listed in the run report; every
reported number traces back to a per-sample record on disk.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .attack import run_attack
from .calibrate import ClassifierPerceptualDistance, calibrate_markers
from .classifiers import load_classifier, save_classifier, train_classifiers
from .config import ExperimentConfig, config_to_dict, save_config
from .data import CaptionedDataset, generate_dataset
from .defenses import (
    FeatureSqueezeDefense,
    calibrate_fs_threshold,
    identity_defense,
    jpeg_defense,
    evaluate_under_defense,
)
from .encoders import build_vocab, load_encoder_pair, save_encoder_pair, train_encoder_pair
from .imaging import pair_grid, save_png
from .losses import prepare_classifier_input
from .metrics import ClassifierFeatureExtractor, asr, fid, kid
from .sampler import TimestepPlan, three_phase_generate, uniform_plan
from .schedule import build_linear_schedule
from .semantic import AttributeSet, AttributeSpec, SemanticFunction, load_registry, save_registry
from .trainer import precompute_latents, sample_training_images, train_attribute
from .unet import load_checkpoint, save_checkpoint, train_denoiser

__all__ = [
    "StageFailure",
    "StageRecord",
    "RunReport",
    "STAGE_ORDER",
    "run_experiment",
    "run_sweep",
    "write_report",
    "load_report",
]

STAGE_ORDER = (
    "data",
    "denoiser",
    "encoders",
    "classifiers",
    "attributes",
    "calibration",
    "attack",
    "evaluation",
)


class StageFailure(RuntimeError):
    """A pipeline stage could not complete; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class StageRecord:
    """Bookkeeping for one executed (or skipped) stage."""

    name: str
    signature: str
    path: str
    skipped: bool
    seconds: float
    artifacts: Dict[str, str] = field(default_factory=dict)  # relpath -> sha256


@dataclass
class RunReport:
    """Everything one run produced: stage records, metrics, table paths."""

    run_dir: str
    seed: int
    stages: Dict[str, StageRecord] = field(default_factory=dict)
    metrics: Dict[str, float] = field(default_factory=dict)
    tables: Dict[str, str] = field(default_factory=dict)
    failed_stage: Optional[str] = None
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "run_dir": self.run_dir,
            "seed": self.seed,
            "stages": {k: dataclasses.asdict(v) for k, v in self.stages.items()},
            "metrics": self.metrics,
            "tables": self.tables,
            "failed_stage": self.failed_stage,
            "wall_seconds": self.wall_seconds,
        }


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _signature(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _manifest(stage_dir: Path) -> Dict[str, str]:
    out = {}
    for path in sorted(stage_dir.rglob("*")):
        if path.is_file() and path.name != "DONE.json":
            out[str(path.relative_to(stage_dir))] = _sha256_file(path)
    return out


class _Store:
    """Content-addressed stage store inside a run directory."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)

    def run(self, report: RunReport, name: str, signature: str, build: Callable[[Path], None]) -> Path:
        stage_dir = self.root / f"{name}-{signature}"
        done = stage_dir / "DONE.json"
        started = time.perf_counter()
        if done.exists():
            meta = json.loads(done.read_text())
            if meta.get("signature") == signature:
                report.stages[name] = StageRecord(
                    name=name,
                    signature=signature,
                    path=str(stage_dir),
                    skipped=True,
                    seconds=0.0,
                    artifacts=meta.get("artifacts", {}),
                )
                return stage_dir
        stage_dir.mkdir(parents=True, exist_ok=True)
        try:
            build(stage_dir)
        except StageFailure:
            raise
        except Exception as exc:  # noqa: BLE001 - stage boundary
            raise StageFailure(name, str(exc)) from exc
        artifacts = _manifest(stage_dir)
        done.write_text(json.dumps({"signature": signature, "artifacts": artifacts}, indent=1))
        report.stages[name] = StageRecord(
            name=name,
            signature=signature,
            path=str(stage_dir),
            skipped=False,
            seconds=time.perf_counter() - started,
            artifacts=artifacts,
        )
        return stage_dir


# --- dataset persistence -----------------------------------------------------


def _save_dataset(path: Path, dataset: CaptionedDataset) -> None:
    torch.save(
        {
            "images": dataset.images,
            "labels": dataset.labels,
            "captions": list(dataset.captions),
            "class_names": list(dataset.class_names),
            "params": {k: np.asarray(v) for k, v in dataset.params.items()},
        },
        path,
    )


def _load_dataset(path: Path) -> CaptionedDataset:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    return CaptionedDataset(
        images=blob["images"],
        labels=blob["labels"],
        captions=tuple(blob["captions"]),
        class_names=tuple(blob["class_names"]),
        params=blob["params"],
    )


def _biased_variant(cfg: ExperimentConfig) -> Optional[CaptionedDataset]:
    """Per-class range overrides for the attacked classifier's training set."""
    biases = cfg.classifiers.target_bias
    if not biases:
        return None
    by_name = {c.name: c for c in cfg.dataset.classes}
    images, labels, captions, params = [], [], [], []
    for bias in biases:
        shape = by_name[bias.class_name]
        shifted = dataclasses.replace(shape, background_range=bias.background_range)
        classes = tuple(
            shifted if c.name == bias.class_name else c for c in cfg.dataset.classes
        )
        draw_cfg = dataclasses.replace(
            cfg.dataset, classes=classes, fill_range=bias.fill_range, seed=bias.seed
        )
        draw = generate_dataset(draw_cfg)
        keep = (draw.labels == shape.label).numpy()
        images.append(draw.images[draw.labels == shape.label])
        labels.append(draw.labels[draw.labels == shape.label])
        captions.extend(c for c, k in zip(draw.captions, keep) if k)
        params.append({k: np.asarray(v)[keep] for k, v in draw.params.items()})
    merged_params = {
        k: np.concatenate([p[k] for p in params]) for k in params[0]
    }
    class_names = tuple(c.name for c in sorted(cfg.dataset.classes, key=lambda c: c.label))
    return CaptionedDataset(
        images=torch.cat(images),
        labels=torch.cat(labels),
        captions=tuple(captions),
        class_names=class_names,
        params=merged_params,
    )


# --- the pipeline ------------------------------------------------------------


def _base_plan(cfg: ExperimentConfig) -> TimestepPlan:
    return uniform_plan(cfg.schedule.steps, cfg.plan.steps)


def _marked_plan(cfg: ExperimentConfig) -> TimestepPlan:
    return _base_plan(cfg).with_markers(t_edit=cfg.plan.t_edit, t_boost=cfg.plan.t_boost)


def _attribute_seed(global_seed: int, name: str) -> int:
    digest = hashlib.sha256(name.encode()).digest()
    return (int.from_bytes(digest[:4], "big") ^ global_seed) % 2**31


def _specs(cfg: ExperimentConfig) -> List[AttributeSpec]:
    return [AttributeSpec(a.name, a.source_text, a.target_text) for a in cfg.attributes]


def _source_noise(cfg: ExperimentConfig, candidate: int, shape) -> torch.Tensor:
    gen = torch.Generator().manual_seed(cfg.attack.seed_offset + candidate)
    return torch.randn(shape, generator=gen)


def run_experiment(
    cfg: ExperimentConfig,
    run_dir: str | Path,
    *,
    until: Optional[str] = None,
    workers: int = 1,
    store_dir: Optional[str | Path] = None,
) -> RunReport:
    """Execute the pipeline into ``run_dir``; return the run report.

    ``until`` stops after the named stage (inclusive). Finished stages found
    in the stage store (``run_dir/store`` unless ``store_dir`` points several
    runs at a shared one) are loaded, not recomputed. On a stage failure the
    partial report is written with ``failed_stage`` set, then the
    :class:`StageFailure` propagates.
    """
    if until is not None and until not in STAGE_ORDER:
        raise ValueError(f"unknown stage {until!r}; stages: {STAGE_ORDER}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")
    store = _Store(Path(store_dir) if store_dir is not None else run_dir / "store")
    report = RunReport(run_dir=str(run_dir), seed=cfg.seed)
    started = time.perf_counter()

    cfg_dict = config_to_dict(cfg)
    state: Dict[str, object] = {}

    try:
        _run_stages(cfg, cfg_dict, store, report, state, until, workers)
    except StageFailure as failure:
        report.failed_stage = failure.stage
        report.wall_seconds = time.perf_counter() - started
        write_report(report, run_dir)
        raise
    report.wall_seconds = time.perf_counter() - started
    write_report(report, run_dir)
    return report


def _run_stages(cfg, cfg_dict, store, report, state, until, workers):
    sigs: Dict[str, str] = {}

    # -- data
    sigs["data"] = _signature({"dataset": cfg_dict["dataset"]})

    def build_data(stage_dir: Path) -> None:
        _save_dataset(stage_dir / "dataset.pt", generate_dataset(cfg.dataset))

    data_dir = store.run(report, "data", sigs["data"], build_data)
    state["dataset"] = _load_dataset(data_dir / "dataset.pt")
    if until == "data":
        return

    # -- denoiser
    sigs["denoiser"] = _signature(
        {
            "schedule": cfg_dict["schedule"],
            "denoiser": cfg_dict["denoiser"],
            "data": sigs["data"],
            "seed": cfg.seed,
        }
    )

    def build_denoiser(stage_dir: Path) -> None:
        schedule = build_linear_schedule(
            cfg.schedule.steps, cfg.schedule.beta_min, cfg.schedule.beta_max
        )
        model = train_denoiser(
            state["dataset"].images,
            schedule,
            epochs=cfg.denoiser.epochs,
            seed=cfg.seed,
            batch_size=cfg.denoiser.batch_size,
            lr=cfg.denoiser.lr,
            val_fraction=cfg.denoiser.val_fraction,
            arch=cfg.denoiser.arch,
        )
        save_checkpoint(stage_dir / "denoiser.pt", model, schedule, seed=cfg.seed)

    den_dir = store.run(report, "denoiser", sigs["denoiser"], build_denoiser)
    model, schedule, _ = load_checkpoint(den_dir / "denoiser.pt")
    for p in model.parameters():
        p.requires_grad_(False)
    state["model"], state["schedule"] = model, schedule
    if until == "denoiser":
        return

    # -- encoders
    sigs["encoders"] = _signature(
        {"encoders": cfg_dict["encoders"], "data": sigs["data"], "seed": cfg.seed}
    )

    def build_encoders(stage_dir: Path) -> None:
        dataset = state["dataset"]
        pair, enc_report = train_encoder_pair(
            dataset.images,
            list(dataset.captions),
            vocab=build_vocab(dataset.captions),
            embed_dim=cfg.encoders.embed_dim,
            epochs=cfg.encoders.epochs,
            batch_size=cfg.encoders.batch_size,
            lr=cfg.encoders.lr,
            seed=cfg.seed,
            val_fraction=cfg.encoders.val_fraction,
            arch=cfg.encoders.arch,
        )
        save_encoder_pair(
            stage_dir / "encoders.pt",
            pair,
            seed=cfg.seed,
            extra={"retrieval_accuracy": enc_report.get("val_accuracy")},
        )

    enc_dir = store.run(report, "encoders", sigs["encoders"], build_encoders)
    pair, _ = load_encoder_pair(enc_dir / "encoders.pt")
    for p in pair.parameters():
        p.requires_grad_(False)
    state["pair"] = pair
    if until == "encoders":
        return

    # -- classifiers
    sigs["classifiers"] = _signature(
        {"classifiers": cfg_dict["classifiers"], "data": sigs["data"], "seed": cfg.seed}
    )

    def build_classifiers(stage_dir: Path) -> None:
        biased = _biased_variant(cfg)
        if biased is not None:
            _save_dataset(stage_dir / "target_train_set.pt", biased)
        f, g, clf_report = train_classifiers(
            state["dataset"],
            seed=cfg.seed,
            epochs=cfg.classifiers.epochs,
            lr=cfg.classifiers.lr,
            batch_size=cfg.classifiers.batch_size,
            val_fraction=cfg.classifiers.val_fraction,
            accuracy_floor=cfg.classifiers.accuracy_floor,
            conv_arch=cfg.classifiers.conv_arch,
            aux_arch=cfg.classifiers.aux_arch,
            target_dataset=biased,
        )
        save_classifier(stage_dir / "attacked.pt", f, seed=cfg.seed, extra=clf_report)
        save_classifier(stage_dir / "auxiliary.pt", g, seed=cfg.seed, extra=clf_report)
        (stage_dir / "training.json").write_text(json.dumps(clf_report, indent=1, sort_keys=True))

    clf_dir = store.run(report, "classifiers", sigs["classifiers"], build_classifiers)
    f, _ = load_classifier(clf_dir / "attacked.pt")
    g, _ = load_classifier(clf_dir / "auxiliary.pt")
    state["f"], state["g"] = f, g
    if until == "classifiers":
        return

    # -- attributes
    sigs["attributes"] = _signature(
        {
            "attributes": cfg_dict["attributes"],
            "training": cfg_dict["attribute_training"],
            "plan": cfg_dict["plan"],
            "denoiser": sigs["denoiser"],
            "encoders": sigs["encoders"],
            "classifiers": sigs["classifiers"],
            "seed": cfg.seed,
        }
    )

    def build_attributes(stage_dir: Path) -> None:
        if not cfg.attributes:
            raise StageFailure("attributes", "no attributes configured")
        trainer_cfg = cfg.attribute_training
        images = sample_training_images(
            state["model"],
            state["schedule"],
            trainer_cfg.n_samples,
            _base_plan(cfg),
            seed=cfg.seed + 5,
        )
        latents = precompute_latents(
            state["model"],
            state["schedule"],
            images,
            trainer_cfg.s_inv,
            cache_dir=stage_dir / "latents",
        )
        plan = _marked_plan(cfg)
        items = []
        curves = {}
        for spec in _specs(cfg):
            torch.manual_seed(_attribute_seed(cfg.seed, spec.name))
            fn = SemanticFunction(
                state["model"].bottleneck_shape, max_timestep=state["schedule"].T
            )
            per_attr = dataclasses.replace(
                trainer_cfg, seed=_attribute_seed(cfg.seed, spec.name)
            )
            fn, train_report = train_attribute(
                state["model"],
                state["schedule"],
                fn,
                latents,
                spec,
                state["pair"],
                plan,
                per_attr,
                f=state["f"],
                y_target=cfg.attack.y_target,
            )
            fn.eval()
            for p in fn.parameters():
                p.requires_grad_(False)
            items.append((spec, fn))
            curves[spec.name] = train_report["loss_curve"]
        save_registry(stage_dir, AttributeSet(items))
        (stage_dir / "loss_curves.json").write_text(json.dumps(curves, indent=1))

    attr_dir = store.run(report, "attributes", sigs["attributes"], build_attributes)
    attrs = load_registry(attr_dir / "registry.json")
    for _, fn in attrs.items():
        fn.eval()
        for p in fn.parameters():
            p.requires_grad_(False)
    state["attrs"] = attrs
    if until == "attributes":
        return

    # -- calibration
    sigs["calibration"] = _signature(
        {
            "calibration": cfg_dict["calibration"],
            "plan": cfg_dict["plan"],
            "attributes": cfg_dict["attributes"],
            "denoiser": sigs["denoiser"],
            "encoders": sigs["encoders"],
            "classifiers": sigs["classifiers"],
        }
    )

    def build_calibration(stage_dir: Path) -> None:
        probes = state["dataset"].images[: cfg.calibration.probe_count]
        cal = calibrate_markers(
            state["model"],
            state["schedule"],
            probes,
            _specs(cfg),
            state["pair"],
            ClassifierPerceptualDistance(state["f"]),
            _base_plan(cfg),
            edit_threshold=cfg.calibration.edit_threshold,
            boost_threshold=cfg.calibration.boost_threshold,
            mode=cfg.calibration.mode,
        )
        payload = {
            "per_attribute_t_edit": cal.t_edit,
            "joint_t_edit": cal.joint_t_edit,
            "t_boost": cal.t_boost,
            "edit_thresholds": cal.edit_thresholds,
            "boost_threshold": cal.boost_threshold,
            "configured_t_edit": cfg.plan.t_edit,
            "configured_t_boost": cfg.plan.t_boost,
            "markers_in_use": "calibrated" if cfg.plan.use_calibrated_markers else "configured",
        }
        (stage_dir / "calibration.json").write_text(json.dumps(payload, indent=1, sort_keys=True))

    cal_dir = store.run(report, "calibration", sigs["calibration"], build_calibration)
    calibration = json.loads((cal_dir / "calibration.json").read_text())
    state["calibration"] = calibration
    if until == "calibration":
        return

    if cfg.plan.use_calibrated_markers:
        attack_plan = _base_plan(cfg).with_markers(
            t_edit=calibration["joint_t_edit"], t_boost=calibration["t_boost"]
        )
    else:
        attack_plan = _marked_plan(cfg)

    # -- attack
    sigs["attack"] = _signature(
        {
            "attack": cfg_dict["attack"],
            "plan": cfg_dict["plan"],
            "attributes": sigs["attributes"],
            "classifiers": sigs["classifiers"],
            "denoiser": sigs["denoiser"],
            "grid_samples": cfg.evaluation.grid_samples,
        }
    )

    def build_attack(stage_dir: Path) -> None:
        if len(cfg.attributes) == 0:
            raise StageFailure("attack", "no attributes configured")
        if cfg.attack.engine.iterations < 2:
            raise StageFailure(
                "attack",
                f"iteration budget {cfg.attack.engine.iterations} cannot optimize weights",
            )
        _attack_stage(cfg, state, attack_plan, stage_dir, workers)

    atk_dir = store.run(report, "attack", sigs["attack"], build_attack)
    state["attack_dir"] = atk_dir
    if until == "attack":
        return

    # -- evaluation
    sigs["evaluation"] = _signature(
        {"evaluation": cfg_dict["evaluation"], "attack": sigs["attack"]}
    )

    def build_evaluation(stage_dir: Path) -> None:
        _evaluation_stage(cfg, state, stage_dir)

    eval_dir = store.run(report, "evaluation", sigs["evaluation"], build_evaluation)
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    report.metrics.update(metrics)
    report.tables.update(
        {
            "metrics": str(eval_dir / "metrics.csv"),
            "defenses": str(eval_dir / "defenses.csv"),
            "samples": str(state["attack_dir"] / "samples.csv"),
        }
    )


# --- attack stage ------------------------------------------------------------


def _screen_sources(cfg: ExperimentConfig, state: dict, plan: TimestepPlan) -> List[int]:
    """Candidate noise indices whose clean rollouts both classifiers call source."""
    model, schedule, f, g = state["model"], state["schedule"], state["f"], state["g"]
    shape = (1, model.in_channels, model.image_size, model.image_size)
    zero = lambda h, t: torch.zeros_like(h)  # noqa: E731
    kept: List[int] = []
    budget = cfg.attack.n_seeds * 20
    for candidate in range(budget):
        if len(kept) >= cfg.attack.n_seeds:
            break
        if not cfg.attack.screen_sources:
            kept.append(candidate)
            continue
        x_T = _source_noise(cfg, candidate, shape)
        traj = three_phase_generate(
            model, schedule, x_T, plan, zero,
            rng=torch.Generator().manual_seed(candidate + 1),
        )
        with torch.no_grad():
            batch = prepare_classifier_input(traj.x0)
            f_pred = int(f(batch).argmax(1))
            g_pred = int(g(batch).argmax(1))
        if f_pred == cfg.attack.y_source and g_pred == cfg.attack.y_source:
            kept.append(candidate)
    if len(kept) < cfg.attack.n_seeds:
        raise StageFailure(
            "attack",
            f"screening found only {len(kept)}/{cfg.attack.n_seeds} source-class "
            f"rollouts in {budget} candidates",
        )
    return kept


def _attack_one(cfg: ExperimentConfig, state: dict, plan: TimestepPlan, candidate: int):
    model, schedule = state["model"], state["schedule"]
    shape = (1, model.in_channels, model.image_size, model.image_size)
    x_T = _source_noise(cfg, candidate, shape)
    engine = dataclasses.replace(cfg.attack.engine, seed=candidate)
    started = time.perf_counter()
    result = run_attack(
        model,
        schedule,
        state["attrs"],
        state["f"],
        state["g"],
        cfg.attack.y_target,
        cfg.attack.y_source,
        x_T,
        plan,
        engine,
    )
    seconds = time.perf_counter() - started
    with torch.no_grad():
        g_pred = int(
            state["g"](prepare_classifier_input(result.x_0.unsqueeze(0))).argmax(1)
        )
    zero = lambda h, t: torch.zeros_like(h)  # noqa: E731
    clean = three_phase_generate(
        model, schedule, x_T, plan, zero,
        rng=torch.Generator().manual_seed(candidate + 1),
    ).x0.squeeze(0)
    return candidate, result, g_pred, clean, seconds


def _attack_stage(cfg, state, plan: TimestepPlan, stage_dir: Path, workers: int) -> None:
    candidates = _screen_sources(cfg, state, plan)
    samples_dir = stage_dir / "samples"
    samples_dir.mkdir(exist_ok=True)

    attack_one = partial(_attack_one, cfg, state, plan)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(attack_one, candidates))
    else:
        outcomes = [attack_one(c) for c in candidates]

    rows = []
    adv_images, clean_images = [], []
    grid_pairs: List[int] = []
    for candidate, result, g_pred, clean, seconds in outcomes:
        record = {
            "candidate": candidate,
            "success": bool(result.success),
            "iterations_used": int(result.iterations_used),
            "mean_abs_weight": float(result.mean_abs_weight),
            "g_prediction": g_pred,
            "g_holds_source": bool(g_pred == cfg.attack.y_source),
            "y_target": int(result.y_target),
            "y_source": int(cfg.attack.y_source),
            "seconds": round(seconds, 3),
            "weights": result.weights.as_matrix().tolist(),
        }
        name = f"sample_{candidate:05d}"
        (samples_dir / f"{name}.json").write_text(json.dumps(record, indent=1))
        save_png(clean, samples_dir / f"{name}_clean.png")
        save_png(result.x_0, samples_dir / f"{name}_adv.png")
        rows.append(record)
        adv_images.append(result.x_0)
        clean_images.append(clean)
        if result.success and len(grid_pairs) < cfg.evaluation.grid_samples:
            grid_pairs.append(len(adv_images) - 1)

    torch.save(
        {
            "candidates": [r["candidate"] for r in rows],
            "adv": torch.stack(adv_images),
            "clean": torch.stack(clean_images),
            "success": [r["success"] for r in rows],
            "g_holds_source": [r["g_holds_source"] for r in rows],
            "mean_abs_weight": [r["mean_abs_weight"] for r in rows],
            "iterations_used": [r["iterations_used"] for r in rows],
        },
        stage_dir / "batch.pt",
    )
    if grid_pairs:
        pair_grid(
            torch.stack([clean_images[i] for i in grid_pairs]),
            torch.stack([adv_images[i] for i in grid_pairs]),
            stage_dir / "success_grid.png",
        )

    n_success = sum(r["success"] for r in rows)
    summary = {
        "n_samples": len(rows),
        "n_success": n_success,
        "asr": n_success / len(rows),
        "g_source_rate_on_success": (
            sum(r["g_holds_source"] for r in rows if r["success"]) / n_success
            if n_success
            else float("nan")
        ),
        "mean_abs_weight_on_success": (
            float(np.mean([r["mean_abs_weight"] for r in rows if r["success"]]))
            if n_success
            else float("nan")
        ),
        "median_iterations_on_success": (
            float(np.median([r["iterations_used"] for r in rows if r["success"]]))
            if n_success
            else float("nan")
        ),
        "seconds_total": float(sum(r["seconds"] for r in rows)),
    }
    (stage_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))

    with open(stage_dir / "samples.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=[
                "candidate",
                "success",
                "iterations_used",
                "mean_abs_weight",
                "g_prediction",
                "g_holds_source",
                "seconds",
            ],
        )
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in writer.fieldnames})


# --- evaluation stage ---------------------------------------------------------


@dataclass
class _EvalSample:
    """Minimal record shape the defense harness consumes."""

    x_0: torch.Tensor
    y_target: int
    success: bool


def _evaluation_stage(cfg: ExperimentConfig, state: dict, stage_dir: Path) -> None:
    batch = torch.load(state["attack_dir"] / "batch.pt", weights_only=False)
    summary = json.loads((state["attack_dir"] / "summary.json").read_text())
    dataset, f = state["dataset"], state["f"]

    results = [
        _EvalSample(x_0=img, y_target=cfg.attack.y_target, success=ok)
        for img, ok in zip(batch["adv"], batch["success"])
    ]
    successes = [r for r in results if r.success]

    metrics: Dict[str, float] = {
        "asr": summary["asr"],
        "g_source_rate_on_success": summary["g_source_rate_on_success"],
        "mean_abs_weight_on_success": summary["mean_abs_weight_on_success"],
        "n_samples": summary["n_samples"],
        "n_success": summary["n_success"],
    }

    extractor = ClassifierFeatureExtractor(f)
    reference = dataset.images[: cfg.evaluation.n_reference]
    ref_feats = extractor.extract(prepare_classifier_input(reference))
    clean_feats = extractor.extract(prepare_classifier_input(batch["clean"]))
    metrics["fid_clean_generations"] = fid(clean_feats, ref_feats)
    metrics["kid_clean_generations"] = kid(clean_feats, ref_feats).value
    if len(successes) >= 2:
        adv_feats = extractor.extract(
            prepare_classifier_input(torch.stack([r.x_0 for r in successes]))
        )
        metrics["fid_adversarial"] = fid(adv_feats, ref_feats)
        metrics["kid_adversarial"] = kid(adv_feats, ref_feats).value
    else:
        metrics["fid_adversarial"] = float("nan")
        metrics["kid_adversarial"] = float("nan")

    defense_rows = []
    if successes:
        base_asr = asr(results)
        for name in cfg.evaluation.defenses:
            if name == "identity":
                defended_asr = evaluate_under_defense(successes, identity_defense, f)
                extra = ""
            elif name == "jpeg":
                defended_asr = evaluate_under_defense(
                    successes,
                    partial(jpeg_defense, quality=cfg.evaluation.jpeg_quality),
                    f,
                )
                extra = f"quality={cfg.evaluation.jpeg_quality}"
            elif name == "feature_squeeze":
                threshold = calibrate_fs_threshold(
                    prepare_classifier_input(reference),
                    f,
                    quantile=1.0 - cfg.evaluation.fs_false_positive_target,
                )
                defense = FeatureSqueezeDefense(threshold=threshold)
                defended_asr = evaluate_under_defense(successes, defense, f)
                decision, _ = defense.detect(prepare_classifier_input(reference), f)
                extra = (
                    f"threshold={threshold:.6g} "
                    f"clean_fp_rate={float(decision.float().mean()):.4f}"
                )
            else:  # pragma: no cover - config validation rejects unknowns
                raise StageFailure("evaluation", f"unknown defense {name!r}")
            survival = defended_asr * len(successes) / len(results)
            defense_rows.append(
                {
                    "defense": name,
                    "asr_without_defense": round(base_asr, 6),
                    "asr_with_defense": round(survival, 6),
                    "success_survival_rate": round(defended_asr, 6),
                    "notes": extra,
                }
            )
            metrics[f"asr_under_{name}"] = survival

    (stage_dir / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    with open(stage_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key in sorted(metrics):
            writer.writerow([key, f"{metrics[key]:.6g}"])
    with open(stage_dir / "defenses.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=[
                "defense",
                "asr_without_defense",
                "asr_with_defense",
                "success_survival_rate",
                "notes",
            ],
        )
        writer.writeheader()
        writer.writerows(defense_rows)


# --- reports -------------------------------------------------------------------


def write_report(report: RunReport, run_dir: str | Path) -> Path:
    """Persist the report as JSON plus a diff-friendly text rendering."""
    run_dir = Path(run_dir)
    (run_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    lines = [f"run_dir: {report.run_dir}", f"seed: {report.seed}"]
    if report.failed_stage:
        lines.append(f"failed_stage: {report.failed_stage}")
    lines.append("")
    lines.append("[stages]")
    for name in STAGE_ORDER:
        if name in report.stages:
            rec = report.stages[name]
            status = "cached" if rec.skipped else f"{rec.seconds:.1f}s"
            lines.append(f"{name}: {status} sig={rec.signature} files={len(rec.artifacts)}")
    if report.metrics:
        lines.append("")
        lines.append("[metrics]")
        for key in sorted(report.metrics):
            lines.append(f"{key}: {report.metrics[key]:.6g}")
    if report.tables:
        lines.append("")
        lines.append("[tables]")
        for key in sorted(report.tables):
            lines.append(f"{key}: {report.tables[key]}")
    lines.append("")
    path = run_dir / "report.txt"
    path.write_text("\n".join(lines))
    return path


def load_report(run_dir: str | Path) -> RunReport:
    """Rebuild a :class:`RunReport` from a run directory's report.json."""
    data = json.loads((Path(run_dir) / "report.json").read_text())
    report = RunReport(
        run_dir=data["run_dir"],
        seed=data["seed"],
        metrics=data.get("metrics", {}),
        tables=data.get("tables", {}),
        failed_stage=data.get("failed_stage"),
        wall_seconds=data.get("wall_seconds", 0.0),
    )
    for name, rec in data.get("stages", {}).items():
        report.stages[name] = StageRecord(**rec)
    return report


# --- sweeps ---------------------------------------------------------------------

_SWEEP_AXES = ("lambda_1", "lambda_2", "lambda_adv", "gradient_source")


def _sweep_variant(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis in ("lambda_1", "lambda_2"):
        weights = dataclasses.replace(cfg.attack.engine.loss_weights, **{axis: float(value)})
        engine = dataclasses.replace(cfg.attack.engine, loss_weights=weights)
        return dataclasses.replace(cfg, attack=dataclasses.replace(cfg.attack, engine=engine))
    if axis == "lambda_adv":
        base = cfg.attribute_training.weights
        if base is None:
            raise ValueError("lambda_adv sweep needs explicit attribute-training weights")
        weights = dataclasses.replace(base, lambda_adv=float(value))
        training = dataclasses.replace(cfg.attribute_training, weights=weights)
        return dataclasses.replace(cfg, attribute_training=training)
    if axis == "gradient_source":
        engine = dataclasses.replace(cfg.attack.engine, gradient_source=str(value))
        return dataclasses.replace(cfg, attack=dataclasses.replace(cfg.attack, engine=engine))
    raise ValueError(f"unknown sweep axis {axis!r}; axes: {_SWEEP_AXES}")


def run_sweep(
    cfg: ExperimentConfig,
    axis: str,
    values: Sequence,
    run_dir: str | Path,
    *,
    workers: int = 1,
) -> List[dict]:
    """Run the full pipeline once per value; emit a plot-ready table.

    Variants share the run directory's stage store, so stages whose settings
    are unchanged by the axis (dataset, denoiser, encoders, ...) execute once.
    """
    if axis not in _SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; axes: {_SWEEP_AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    run_dir = Path(run_dir)
    rows = []
    for value in values:
        variant = _sweep_variant(cfg, axis, value)
        sub_report = run_experiment(
            variant,
            run_dir / f"{axis}={value}",
            workers=workers,
            store_dir=run_dir / "store",
        )
        rows.append(
            {
                axis: value,
                "asr": sub_report.metrics.get("asr", float("nan")),
                "mean_abs_weight": sub_report.metrics.get(
                    "mean_abs_weight_on_success", float("nan")
                ),
                "fid": sub_report.metrics.get("fid_adversarial", float("nan")),
                "g_source_rate": sub_report.metrics.get(
                    "g_source_rate_on_success", float("nan")
                ),
            }
        )
    with open(run_dir / f"sweep_{axis}.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return rows
