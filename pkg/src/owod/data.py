"""Deterministic synthetic open-world scenes with task schedules.

Each scene carries ``n_query`` candidates (feature vector + proposal box).
Object candidates sit near a unit-norm class prototype; background
candidates live in a shell well outside the unit sphere, so every object
class, including classes never introduced, shares a compact manifold the
class-agnostic objectness density can discover. Generation is a pure
function of the spec: every scene draws from its own generator seeded by
(seed, task, split, scene index), so any worker split reproduces the
identical dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry

SCHEMA_VERSION = 1

# Label used in test views for objects whose class is not yet introduced
# (later-task classes and forever-unknown classes alike).
UNKNOWN_CLASS = -1

# Class prototypes live inside a narrow cone around a shared anchor
# direction: every object class sits on one compact manifold (that shared
# structure is what class-agnostic objectness generalizes from), while a
# minimum pairwise angle keeps the classes themselves learnable.
_PROTOTYPE_CONE_SPREAD = 0.55
_MIN_PROTOTYPE_ANGLE = np.pi / 10

# Proposal jitter half-width per center-size coordinate.
_PROPOSAL_JITTER = 0.03

# Maximum pairwise IoU between ground-truth boxes in one scene, and the
# ceiling any candidate box may reach against a non-corresponding ground
# truth; together they keep every annotation matched by exactly one
# candidate proposal.
_MAX_GT_OVERLAP = 0.2
_FOREIGN_IOU_CEILING = 0.45


class DatasetLoadError(ValueError):
    """Raised when a serialized dataset cannot be read back."""


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    task_schedule: tuple[tuple[int, ...], ...] = ((0, 1, 2, 3), (4, 5))
    forever_unknown: tuple[int, ...] = (6, 7)
    train_scenes_per_task: int = 500
    test_scenes_per_task: int = 200
    n_query: int = 16
    feature_dim: int = 12
    noise_sigma: float = 0.1
    background_radius: float = 2.0
    min_objects: int = 1
    max_objects: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        groups = [set(g) for g in self.task_schedule]
        seen: set[int] = set()
        for g in groups:
            if g & seen:
                raise ValueError("task schedule groups must be disjoint")
            seen |= g
        if seen & set(self.forever_unknown):
            raise ValueError("forever_unknown classes cannot appear in the schedule")
        if seen | set(self.forever_unknown) != set(range(self.num_classes)):
            raise ValueError(
                "every class must appear in exactly one schedule group or forever_unknown"
            )
        if self.background_radius <= 1.0 + 3.0 * self.noise_sigma:
            raise ValueError("background shell must clear the object manifold")
        if not 1 <= self.min_objects <= self.max_objects <= self.n_query:
            raise ValueError("need 1 <= min_objects <= max_objects <= n_query")

    @property
    def num_tasks(self) -> int:
        return len(self.task_schedule)

    def known_classes(self, task: int) -> tuple[int, ...]:
        """Classes introduced at tasks <= task, in introduction order."""
        out: list[int] = []
        for g in self.task_schedule[: task + 1]:
            out.extend(g)
        return tuple(out)


@dataclass(frozen=True)
class Annotation:
    class_id: int
    box: np.ndarray  # center-size (4,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "box", np.asarray(self.box, dtype=np.float64))


@dataclass(frozen=True)
class Scene:
    scene_id: str
    task: int
    split: str  # "train" | "test"
    features: np.ndarray  # (n_query, feature_dim)
    proposal_boxes: np.ndarray  # (n_query, 4) center-size
    annotations: tuple[Annotation, ...]

    def equal_to(self, other: "Scene") -> bool:
        return (
            self.scene_id == other.scene_id
            and self.task == other.task
            and self.split == other.split
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.proposal_boxes, other.proposal_boxes)
            and len(self.annotations) == len(other.annotations)
            and all(
                a.class_id == b.class_id and np.array_equal(a.box, b.box)
                for a, b in zip(self.annotations, other.annotations)
            )
        )


@dataclass(frozen=True)
class Dataset:
    spec: DatasetSpec
    prototypes: np.ndarray  # (num_classes, feature_dim)
    scenes: tuple[Scene, ...]

    def split(self, task: int, split: str) -> tuple[Scene, ...]:
        return tuple(s for s in self.scenes if s.task == task and s.split == split)

    def scene_by_id(self, scene_id: str) -> Scene:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise KeyError(scene_id)

    def equal_to(self, other: "Dataset") -> bool:
        return (
            self.spec == other.spec
            and np.array_equal(self.prototypes, other.prototypes)
            and len(self.scenes) == len(other.scenes)
            and all(a.equal_to(b) for a, b in zip(self.scenes, other.scenes))
        )


@dataclass(frozen=True)
class LabeledScene:
    """A scene plus the annotations visible under some task view.

    ``target_indices[j]`` is the position of ``targets[j]`` within the
    scene's full annotation list, so exemplar bookkeeping can reference
    source annotations stably.
    """

    scene: Scene
    targets: tuple[Annotation, ...]
    target_indices: tuple[int, ...] = ()


@dataclass(frozen=True)
class TaskView:
    dataset: Dataset
    task: int
    split: str
    scenes: tuple[LabeledScene, ...] = field(compare=False)


def _draw_prototypes(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    anchor = rng.standard_normal(spec.feature_dim)
    anchor /= np.linalg.norm(anchor)
    for _ in range(1000):
        offsets = rng.standard_normal((spec.num_classes, spec.feature_dim))
        offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
        p = anchor + _PROTOTYPE_CONE_SPREAD * offsets
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        cos = np.clip(p @ p.T, -1.0, 1.0)
        np.fill_diagonal(cos, -1.0)
        if np.arccos(cos.max()) >= _MIN_PROTOTYPE_ANGLE:
            return p
    raise ValueError("could not draw sufficiently separated class prototypes")


def _sample_box(rng: np.random.Generator) -> np.ndarray:
    cx, cy = rng.uniform(0.1, 0.9, size=2)
    w, h = rng.uniform(0.1, 0.4, size=2)
    return np.array([cx, cy, w, h])


def _iou_scalar(a: np.ndarray, b: np.ndarray) -> float:
    # Plain-float IoU for the generator's rejection loops; equivalent to
    # geometry.box_iou on single non-degenerate boxes but much cheaper.
    acx, acy, aw, ah = a
    bcx, bcy, bw, bh = b
    iw = min(acx + aw / 2, bcx + bw / 2) - max(acx - aw / 2, bcx - bw / 2)
    ih = min(acy + ah / 2, bcy + bh / 2) - max(acy - ah / 2, bcy - bh / 2)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _sample_object_boxes(rng: np.random.Generator, n: int) -> list[np.ndarray]:
    boxes: list[np.ndarray] = []
    while len(boxes) < n:
        for _ in range(200):
            cand = _sample_box(rng)
            if all(_iou_scalar(cand, b) <= _MAX_GT_OVERLAP for b in boxes):
                boxes.append(cand)
                break
        else:  # crowded scene; settle for fewer objects
            break
    return boxes


def _jitter_proposal(
    rng: np.random.Generator, box: np.ndarray, others: list[np.ndarray]
) -> np.ndarray:
    # A zero jitter always satisfies both constraints, so this terminates.
    while True:
        prop = box + rng.uniform(-_PROPOSAL_JITTER, _PROPOSAL_JITTER, size=4)
        if prop[2] <= 0 or prop[3] <= 0 or _iou_scalar(prop, box) < 0.5:
            continue
        if all(_iou_scalar(prop, o) < _FOREIGN_IOU_CEILING for o in others):
            return prop


def _background_box(rng: np.random.Generator, gt_boxes: list[np.ndarray]) -> np.ndarray:
    # Background proposals tile far beyond the object-box law, like the
    # proposal spread of a real detector; their wide spread is part of
    # what makes object boxes statistically recognizable.
    while True:
        cx, cy = rng.uniform(-0.5, 1.5, size=2)
        w, h = rng.uniform(0.05, 1.5, size=2)
        box = np.array([cx, cy, w, h])
        if all(_iou_scalar(box, gt) < _FOREIGN_IOU_CEILING for gt in gt_boxes):
            return box


def _generate_scene(spec: DatasetSpec, prototypes: np.ndarray, task: int, split: str, index: int) -> Scene:
    rng = np.random.default_rng([spec.seed, 2, task, 0 if split == "train" else 1, index])
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes = _sample_object_boxes(rng, n_obj)
    n_obj = len(boxes)

    classes = rng.integers(0, spec.num_classes, size=n_obj)
    if split == "train" and n_obj > 0:
        # Every train scene contains at least one object of its task's
        # newly introduced classes, mirroring how benchmark images are
        # bucketed by task.
        group = spec.task_schedule[task]
        classes[0] = group[int(rng.integers(0, len(group)))]

    features = np.empty((spec.n_query, spec.feature_dim))
    proposals = np.empty((spec.n_query, 4))
    annotations: list[Annotation] = []
    for i, (c, box) in enumerate(zip(classes, boxes)):
        features[i] = prototypes[c] + spec.noise_sigma * rng.standard_normal(spec.feature_dim)
        proposals[i] = _jitter_proposal(rng, box, [b for b in boxes if b is not box])
        annotations.append(Annotation(class_id=int(c), box=box))
    for i in range(n_obj, spec.n_query):
        direction = rng.standard_normal(spec.feature_dim)
        direction /= np.linalg.norm(direction)
        radius = rng.uniform(spec.background_radius, spec.background_radius + 1.0)
        features[i] = radius * direction
        proposals[i] = _background_box(rng, boxes)

    return Scene(
        scene_id=f"t{task}-{split}-{index:05d}",
        task=task,
        split=split,
        features=features,
        proposal_boxes=proposals,
        annotations=tuple(annotations),
    )


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Generate the full multi-task dataset deterministically from the spec."""
    prototypes = _draw_prototypes(spec, np.random.default_rng([spec.seed, 1]))
    scenes: list[Scene] = []
    for task in range(spec.num_tasks):
        for split, count in (("train", spec.train_scenes_per_task), ("test", spec.test_scenes_per_task)):
            for index in range(count):
                scenes.append(_generate_scene(spec, prototypes, task, split, index))
    return Dataset(spec=spec, prototypes=prototypes, scenes=tuple(scenes))


def task_view(source: "Dataset | TaskView", task: int, split: str) -> TaskView:
    """Label visibility for one task and split.

    Train views keep only annotations of classes introduced at exactly
    this task. Test views keep all classes introduced so far with their
    labels and relabel every other annotated object as unknown. Applying
    a view to a view is idempotent.
    """
    dataset = source.dataset if isinstance(source, TaskView) else source
    spec = dataset.spec
    if not 0 <= task < spec.num_tasks:
        raise ValueError(f"task {task} outside schedule of {spec.num_tasks} tasks")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")

    current = set(spec.task_schedule[task])
    introduced = set(spec.known_classes(task))
    labeled: list[LabeledScene] = []
    for scene in dataset.split(task, split):
        targets: list[Annotation] = []
        indices: list[int] = []
        for idx, ann in enumerate(scene.annotations):
            if split == "train":
                if ann.class_id in current:
                    targets.append(ann)
                    indices.append(idx)
            else:
                indices.append(idx)
                if ann.class_id in introduced:
                    targets.append(ann)
                else:
                    targets.append(replace(ann, class_id=UNKNOWN_CLASS))
        labeled.append(
            LabeledScene(scene=scene, targets=tuple(targets), target_indices=tuple(indices))
        )
    return TaskView(dataset=dataset, task=task, split=split, scenes=tuple(labeled))


def _scene_record(scene: Scene) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": scene.scene_id,
        "task": scene.task,
        "split": scene.split,
        "candidates": [
            {"feature": list(f), "box": list(b)}
            for f, b in zip(scene.features, scene.proposal_boxes)
        ],
        "annotations": [{"class": a.class_id, "box": list(a.box)} for a in scene.annotations],
    }


def save_dataset(dataset: Dataset, path: str) -> None:
    """Write one scene per line; floats use shortest exact decimals."""
    with open(path, "w", encoding="utf-8") as fh:
        for scene in dataset.scenes:
            fh.write(json.dumps(_scene_record(scene)) + "\n")


def load_dataset(path: str, spec: DatasetSpec) -> Dataset:
    """Read a scene-per-line file written by :func:`save_dataset`.

    The spec is supplied by the caller (it travels in the run config);
    prototypes are regenerated from its seed, and basic shape checks
    guard against mixing files and configs.
    """
    scenes: list[Scene] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetLoadError(f"line {lineno}: malformed record ({exc.msg})") from exc
            version = rec.get("schema_version")
            if version != SCHEMA_VERSION:
                raise DatasetLoadError(
                    f"line {lineno}: unsupported schema_version {version!r}, expected {SCHEMA_VERSION}"
                )
            try:
                features = np.array([c["feature"] for c in rec["candidates"]], dtype=np.float64)
                proposals = np.array([c["box"] for c in rec["candidates"]], dtype=np.float64)
                annotations = tuple(
                    Annotation(class_id=int(a["class"]), box=np.asarray(a["box"], dtype=np.float64))
                    for a in rec["annotations"]
                )
                scene = Scene(
                    scene_id=rec["scene_id"],
                    task=int(rec["task"]),
                    split=rec["split"],
                    features=features,
                    proposal_boxes=proposals,
                    annotations=annotations,
                )
            except (KeyError, TypeError, IndexError) as exc:
                raise DatasetLoadError(f"line {lineno}: malformed record ({exc})") from exc
            if features.shape != (spec.n_query, spec.feature_dim):
                raise DatasetLoadError(
                    f"line {lineno}: candidate shape {features.shape} does not match the spec"
                )
            scenes.append(scene)
    prototypes = _draw_prototypes(spec, np.random.default_rng([spec.seed, 1]))
    return Dataset(spec=spec, prototypes=prototypes, scenes=tuple(scenes))
