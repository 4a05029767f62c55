"""Open-world lifecycle: per-task training, exemplar replay, benchmarks.

A benchmark run walks the task schedule: train on the newly introduced
classes, select exemplars by objectness score, finetune on the balanced
exemplar memory at a tenth of the learning rate, evaluate, and carry the
states forward. Ablation flags switch off objectness maximization,
objectness scoring, active exemplar selection, or replay entirely. Every
run is a pure function of (config, seed).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import model, objectness
from .data import Dataset, DatasetSpec, LabeledScene, TaskView, generate_dataset, task_view
from .matching import detr_match
from .metrics import (
    A_OSE_CONF_THRESHOLD,
    WI_RECALL_LEVEL,
    Detection,
    EvalReport,
    GroundTruth,
    a_ose,
    owod_map,
    precision_recall_curve,
    u_recall,
    wilderness_impact,
)
from .model import AdamState, DetectorParams, TrainConfig
from .objectness import GaussianState

logger = logging.getLogger(__name__)

DEFAULT_TAU_LIST = (0.5, 0.8, 1.0, 1.3, 1.6, 2.0)

SUMMARY_COLUMNS = (
    "task",
    "map_prev",
    "map_current",
    "map_both",
    "u_recall",
    "a_ose",
    "wi",
    "tau",
    "seed",
)


@dataclass(frozen=True)
class AblationFlags:
    disable_objectness_loss: bool = False  # alpha = 0 during training
    disable_objectness_scoring: bool = False  # score with f_obj pinned to 1
    random_exemplars: bool = False  # replace active selection
    disable_replay: bool = False  # skip the finetuning stage

    def to_dict(self) -> dict[str, bool]:
        return {
            "disable_objectness_loss": self.disable_objectness_loss,
            "disable_objectness_scoring": self.disable_objectness_scoring,
            "random_exemplars": self.random_exemplars,
            "disable_replay": self.disable_replay,
        }


@dataclass(frozen=True)
class BenchmarkConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    hidden_dim: int = 32
    embed_dim: int = 16
    exemplars_per_class: int = 5  # E: top and bottom E instances per class
    exemplar_budget: int = 40  # max distinct scenes kept in memory
    finetune_epochs: int = 8
    tau_list: tuple[float, ...] = DEFAULT_TAU_LIST
    seeds: tuple[int, ...] = (0,)
    # Detections are ranked set-prediction style: no confidence floor,
    # the top_k best-scored slots per scene are kept.
    conf_threshold: float = 0.0
    top_k: "int | None" = 10
    a_ose_threshold: float = A_OSE_CONF_THRESHOLD
    wi_recall_level: float = WI_RECALL_LEVEL

    def __post_init__(self) -> None:
        if self.exemplars_per_class < 1:
            raise ValueError("exemplars_per_class must be at least 1")
        if any(t <= 0 for t in self.tau_list):
            raise ValueError("temperatures must be positive")
        if len(self.seeds) == 0:
            raise ValueError("at least one seed is required")


@dataclass(frozen=True)
class ExemplarEntry:
    scene_id: str
    annotation_index: int
    class_id: int
    score: float  # objectness probability recorded at selection time


@dataclass(frozen=True)
class ExemplarSet:
    entries: tuple[ExemplarEntry, ...] = ()
    budget: int = 40
    skipped_classes: tuple[int, ...] = ()

    def scene_ids(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.scene_id, None)
        return tuple(sorted(seen))

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.class_id] = counts.get(e.class_id, 0) + 1
        return counts


@dataclass(frozen=True)
class TaskState:
    params: DetectorParams
    gaussian: GaussianState
    exemplars: ExemplarSet
    task: int
    step_count: int = 0


def _apply_budget(entries: list[ExemplarEntry], budget: int, rng: np.random.Generator) -> list[ExemplarEntry]:
    scene_ids = sorted({e.scene_id for e in entries})
    if len(scene_ids) <= budget:
        return entries
    kept = set(rng.choice(scene_ids, size=budget, replace=False))
    return [e for e in entries if e.scene_id in kept]


def select_exemplars(
    params: DetectorParams,
    gaussian: GaussianState,
    view: TaskView,
    per_class: int,
    budget: int,
    rng: np.random.Generator,
    tau: float = 1.3,
    random_mode: bool = False,
) -> ExemplarSet:
    """Top/bottom objectness-scored instances per class, budgeted by scene.

    Every labeled instance is scored through its matched query embedding.
    Ranking uses the raw squared distance; the exponential map is
    monotone, so the selected set is temperature-invariant while the
    recorded score is the probability at ``tau``.
    """
    by_class: dict[int, list[tuple[float, str, int]]] = {}
    for ls in view.scenes:
        if not ls.targets:
            continue
        queries, probs, boxes = model.forward(params, ls.scene)
        match = detr_match(probs, boxes, [(t.class_id, t.box) for t in ls.targets])
        d2 = objectness.mahalanobis_sq_batch(gaussian, queries)
        for i, j in match.pairs:
            cls = ls.targets[j].class_id
            by_class.setdefault(cls, []).append(
                (float(d2[i]), ls.scene.scene_id, ls.target_indices[j])
            )

    skipped = tuple(
        c for c in view.dataset.spec.task_schedule[view.task] if c not in by_class
    )
    for cls in skipped:
        logger.warning("class %d has no labeled instances at task %d; skipped", cls, view.task)

    entries: list[ExemplarEntry] = []
    for cls in sorted(by_class):
        instances = sorted(by_class[cls], key=lambda t: (t[0], t[1], t[2]))
        if random_mode:
            take = min(2 * per_class, len(instances))
            idx = rng.choice(len(instances), size=take, replace=False)
            chosen = [instances[i] for i in sorted(idx)]
        elif len(instances) <= 2 * per_class:
            chosen = instances
        else:
            chosen = instances[:per_class] + instances[-per_class:]
        for d2_val, scene_id, ann_idx in chosen:
            entries.append(
                ExemplarEntry(
                    scene_id=scene_id,
                    annotation_index=ann_idx,
                    class_id=cls,
                    score=float(np.exp(-tau * d2_val)),
                )
            )
    entries = _apply_budget(entries, budget, rng)
    return ExemplarSet(entries=tuple(entries), budget=budget, skipped_classes=skipped)


def merge_exemplars(
    old: ExemplarSet, new: ExemplarSet, budget: int, rng: np.random.Generator
) -> ExemplarSet:
    entries = list(old.entries) + list(new.entries)
    entries = _apply_budget(entries, budget, rng)
    return ExemplarSet(
        entries=tuple(entries),
        budget=budget,
        skipped_classes=tuple(old.skipped_classes) + tuple(new.skipped_classes),
    )


def exemplar_scenes(exemplars: ExemplarSet, dataset: Dataset) -> list[LabeledScene]:
    """Materialize the replay set: stored scenes with exemplar labels only."""
    by_scene: dict[str, list[int]] = {}
    for e in exemplars.entries:
        by_scene.setdefault(e.scene_id, []).append(e.annotation_index)
    out: list[LabeledScene] = []
    for scene_id in sorted(by_scene):
        scene = dataset.scene_by_id(scene_id)
        indices = tuple(sorted(set(by_scene[scene_id])))
        targets = tuple(scene.annotations[i] for i in indices)
        out.append(LabeledScene(scene=scene, targets=targets, target_indices=indices))
    return out


def _train_epochs(
    params: DetectorParams,
    gaussian: GaussianState,
    scenes: list[LabeledScene],
    cfg: TrainConfig,
    epochs: int,
    base_lr: float,
    lr_drop_epoch: "int | None",
    rng_tag: tuple[int, ...],
    alpha: float,
    alpha_warmup: int = 0,
) -> tuple[DetectorParams, GaussianState, int]:
    """Shuffled minibatch epochs; returns states and the step count.

    During ``alpha_warmup`` leading epochs the objectness loss weight is
    zero: the density keeps being estimated, but likelihood maximization
    waits until the detector heads carry signal, mirroring how the
    full-scale pipeline starts from a pretrained backbone.
    """
    adam = AdamState.initial(params)
    steps = 0
    for epoch in range(epochs):
        lr = base_lr / 10.0 if lr_drop_epoch is not None and epoch >= lr_drop_epoch else base_lr
        step_cfg = replace(cfg, alpha=0.0 if epoch < alpha_warmup else alpha)
        order = np.random.default_rng([*rng_tag, epoch]).permutation(len(scenes))
        for start in range(0, len(scenes), cfg.batch_size):
            batch = [scenes[i] for i in order[start : start + cfg.batch_size]]
            params, gaussian, adam, _ = model.train_step(
                params, gaussian, adam, batch, step_cfg, lr=lr
            )
            steps += 1
    return params, gaussian, steps


def evaluate(
    params: DetectorParams,
    gaussian: GaussianState,
    view: TaskView,
    cfg: BenchmarkConfig,
    tau: "float | None" = None,
    seed: int = 0,
) -> EvalReport:
    """Full OWOD report on a test view at one temperature."""
    spec = view.dataset.spec
    tau = cfg.train.tau if tau is None else tau
    dets: list[Detection] = []
    gts: list[GroundTruth] = []
    for ls in view.scenes:
        preds = model.predict(
            params,
            gaussian,
            ls.scene,
            tau=tau,
            conf_threshold=cfg.conf_threshold,
            top_k=cfg.top_k,
            use_objectness=not cfg.flags.disable_objectness_scoring,
        )
        dets.extend(
            Detection(scene_id=ls.scene.scene_id, label=p.label, score=p.score, box=p.box)
            for p in preds
        )
        gts.extend(
            GroundTruth(scene_id=ls.scene.scene_id, label=t.class_id, box=t.box)
            for t in ls.targets
        )

    prev_classes = spec.known_classes(view.task - 1) if view.task > 0 else ()
    current_classes = spec.task_schedule[view.task]
    map_prev, map_current, map_both, per_class = owod_map(dets, gts, prev_classes, current_classes)
    per_class_pr = {}
    for cls in list(prev_classes) + list(current_classes):
        recall, precision = precision_recall_curve(
            [d for d in dets if d.label == cls], [g for g in gts if g.label == cls]
        )
        per_class_pr[cls] = {"recall": recall, "precision": precision}
    return EvalReport(
        task=view.task,
        seed=seed,
        tau=tau,
        conf_threshold=cfg.conf_threshold,
        top_k=cfg.top_k,
        map_prev=map_prev,
        map_current=map_current,
        map_both=map_both,
        u_recall=u_recall(dets, gts),
        a_ose=a_ose(dets, gts, cfg.a_ose_threshold),
        wi=wilderness_impact(dets, gts, cfg.wi_recall_level),
        per_class_ap=per_class,
        per_class_pr=per_class_pr,
        flags=cfg.flags.to_dict(),
    )


def run_task(
    state: "TaskState | None",
    dataset: Dataset,
    task: int,
    cfg: BenchmarkConfig,
    seed: int,
) -> tuple[TaskState, ExemplarSet, EvalReport]:
    """Train, select exemplars, finetune on replay memory, evaluate.

    Task 0 starts from fresh parameters and runs no finetuning stage;
    later tasks require the previous task's state and finetune on the
    merged exemplar memory at a tenth of the learning rate.
    """
    spec = dataset.spec
    n_known = len(spec.known_classes(task))
    if task == 0:
        if state is not None:
            raise ValueError("task 0 must start from fresh states")
        params = model.init_params(
            np.random.default_rng([seed, 10, 0]),
            feature_dim=spec.feature_dim,
            hidden_dim=cfg.hidden_dim,
            embed_dim=cfg.embed_dim,
            num_classes=n_known,
        )
        gaussian = GaussianState.initial(cfg.embed_dim, momentum=cfg.train.momentum)
        memory = ExemplarSet(budget=cfg.exemplar_budget)
    else:
        if state is None:
            raise ValueError(f"task {task} requires the states of task {task - 1}")
        if state.task != task - 1:
            raise ValueError(f"expected states from task {task - 1}, got task {state.task}")
        params = model.expand_classes(
            state.params, n_known, np.random.default_rng([seed, 11, task])
        )
        gaussian = state.gaussian
        memory = state.exemplars

    alpha = 0.0 if cfg.flags.disable_objectness_loss else cfg.train.alpha
    train_scenes = list(task_view(dataset, task, "train").scenes)
    params, gaussian, steps = _train_epochs(
        params,
        gaussian,
        train_scenes,
        cfg.train,
        epochs=cfg.train.epochs,
        base_lr=cfg.train.lr,
        lr_drop_epoch=cfg.train.lr_drop_epoch,
        rng_tag=(seed, 12, task),
        alpha=alpha,
        alpha_warmup=cfg.train.alpha_warmup_epochs if task == 0 else 0,
    )

    new_exemplars = select_exemplars(
        params,
        gaussian,
        task_view(dataset, task, "train"),
        per_class=cfg.exemplars_per_class,
        budget=cfg.exemplar_budget,
        rng=np.random.default_rng([seed, 13, task]),
        tau=cfg.train.tau,
        random_mode=cfg.flags.random_exemplars,
    )
    memory = merge_exemplars(
        memory, new_exemplars, cfg.exemplar_budget, np.random.default_rng([seed, 15, task])
    )

    if task > 0 and not cfg.flags.disable_replay and memory.entries:
        replay = exemplar_scenes(memory, dataset)
        params, gaussian, ft_steps = _train_epochs(
            params,
            gaussian,
            replay,
            cfg.train,
            epochs=cfg.finetune_epochs,
            base_lr=cfg.train.lr / 10.0,
            lr_drop_epoch=None,
            rng_tag=(seed, 14, task),
            alpha=alpha,
        )
        steps += ft_steps

    new_state = TaskState(
        params=params, gaussian=gaussian, exemplars=memory, task=task, step_count=steps
    )
    report = evaluate(params, gaussian, task_view(dataset, task, "test"), cfg, seed=seed)
    return new_state, memory, report


@dataclass(frozen=True)
class BenchmarkResult:
    reports: tuple[EvalReport, ...]  # ordered by (seed, task)
    states: tuple[TaskState, ...]  # final per-seed states, seed order
    summary_rows: tuple[dict, ...]
    aggregate_rows: tuple[dict, ...]  # empty unless multiple seeds


def _summary_row(report: EvalReport) -> dict:
    return {
        "task": report.task,
        "map_prev": report.map_prev,
        "map_current": report.map_current,
        "map_both": report.map_both,
        "u_recall": report.u_recall,
        "a_ose": report.a_ose,
        "wi": report.wi,
        "tau": report.tau,
        "seed": report.seed,
    }


def _aggregate(reports: list[EvalReport], num_tasks: int) -> tuple[dict, ...]:
    rows = []
    metrics = ("map_prev", "map_current", "map_both", "u_recall", "a_ose", "wi")
    for task in range(num_tasks):
        row: dict = {"task": task}
        group = [r for r in reports if r.task == task]
        for name in metrics:
            vals = [getattr(r, name) for r in group if getattr(r, name) is not None]
            row[f"{name}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{name}_std"] = (
                float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None)
            )
        rows.append(row)
    return tuple(rows)


def run_benchmark(cfg: BenchmarkConfig, dataset: "Dataset | None" = None) -> BenchmarkResult:
    """Execute the full schedule for every configured seed.

    Each seed reseeds both the generator and the trainer, so seeds are
    independent end-to-end replicas. A dataset passed explicitly is used
    as-is for every seed (single-seed determinism checks rely on this).
    """
    reports: list[EvalReport] = []
    states: list[TaskState] = []
    for seed in cfg.seeds:
        if dataset is None:
            ds = generate_dataset(replace(cfg.dataset, seed=seed))
        else:
            ds = dataset
        state: "TaskState | None" = None
        for task in range(ds.spec.num_tasks):
            run_cfg = replace(cfg, train=replace(cfg.train, seed=seed))
            state, _, report = run_task(state, ds, task, run_cfg, seed=seed)
            reports.append(report)
        states.append(state)
    summary = tuple(_summary_row(r) for r in reports)
    aggregate = (
        _aggregate(reports, cfg.dataset.num_tasks) if len(cfg.seeds) > 1 else ()
    )
    return BenchmarkResult(
        reports=tuple(reports),
        states=tuple(states),
        summary_rows=summary,
        aggregate_rows=aggregate,
    )


def temperature_sweep(
    params: DetectorParams,
    gaussian: GaussianState,
    view: TaskView,
    tau_list: tuple[float, ...],
    cfg: BenchmarkConfig,
    seed: int = 0,
) -> list[EvalReport]:
    """Re-run inference and metrics per temperature; no retraining."""
    if any(t <= 0 for t in tau_list):
        raise ValueError("temperatures must be positive")
    return [evaluate(params, gaussian, view, cfg, tau=t, seed=seed) for t in tau_list]
