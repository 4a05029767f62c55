"""Toy set-prediction detector with analytic gradients.

Each candidate (feature vector plus its proposal box, concatenated) runs
through a two-layer tanh encoder to a query embedding. Affine heads emit
per-class sigmoid probabilities and a logistic-squashed center-size box.
Final class scores multiply the classification probabilities by the
objectness likelihood; the unknown score is objectness times one minus
the best known-class probability.

Training is the alternating step: estimate the objectness Gaussian from
all query embeddings of the batch, then descend the joint loss
L = Lc + Lb + alpha * Lo on the frozen post-update Gaussian, where Lc is
a sigmoid focal loss over all slots, Lb the L1 + gIoU loss of matched
slots, and Lo the squared Mahalanobis distance of matched slots. All
gradients are hand-derived and checked against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import matching, objectness
from .data import UNKNOWN_CLASS, LabeledScene, Scene
from .matching import DEFAULT_MATCH_WEIGHTS, MatchResult
from .objectness import GaussianState

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
PROB_CLAMP = 1e-8
ADAM_EPS = 1e-8

# Box-loss weights reuse the matching-cost convention (L1, gIoU).
BOX_L1_WEIGHT = DEFAULT_MATCH_WEIGHTS[1]
BOX_GIOU_WEIGHT = DEFAULT_MATCH_WEIGHTS[2]

_PARAM_FIELDS = ("w1", "b1", "w2", "b2", "w_cls", "b_cls", "w_box", "b_box")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    batch_size: int = 5
    momentum: float = 0.1
    tau: float = 1.3
    alpha: float = 0.006
    epochs: int = 150
    lr_drop_epoch: int = 90
    alpha_warmup_epochs: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass(frozen=True)
class DetectorParams:
    """Encoder and head weights. Input width is feature_dim + 4."""

    w1: np.ndarray  # (hidden, feature_dim + 4)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (embed, hidden)
    b2: np.ndarray  # (embed,)
    w_cls: np.ndarray  # (num_classes, embed)
    b_cls: np.ndarray  # (num_classes,)
    w_box: np.ndarray  # (4, embed)
    b_box: np.ndarray  # (4,)

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1] - 4

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[0]

    def astuple(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, f) for f in _PARAM_FIELDS)


# Initial slope of the box readout; sigmoid(5 * (x - 0.5)) tracks the
# identity within ~0.03 over the box-coordinate range.
_BOX_READOUT_GAIN = 5.4

# Classification bias prior: heads start predicting p ~ 0.01 so the
# focal loss is driven by the sparse positives instead of hundreds of
# background cells.
_CLS_PRIOR = 0.01
_CLS_BIAS_INIT = -math.log((1.0 - _CLS_PRIOR) / _CLS_PRIOR)


def init_params(
    rng: np.random.Generator,
    feature_dim: int = 12,
    hidden_dim: int = 16,
    embed_dim: int = 8,
    num_classes: int = 4,
) -> DetectorParams:
    """Random init with a proposal pass-through.

    The first four hidden and query dimensions start as a centered copy
    of the slot's proposal-box coordinates and the box head starts
    reading them back, so initial box predictions approximate the
    proposals. Bipartite matching is then aligned from the first step;
    with fully random heads every slot predicts the same box, matching
    is arbitrary, and training settles on predicting the marginals.
    """
    if hidden_dim < 5 or embed_dim < 5:
        raise ValueError("need hidden_dim >= 5 and embed_dim >= 5")
    f_in = feature_dim + 4
    w1 = rng.normal(0.0, 1.0 / math.sqrt(f_in), size=(hidden_dim, f_in))
    w1[:4, :] = 0.0
    w1[np.arange(4), feature_dim + np.arange(4)] = 1.0
    b1 = np.zeros(hidden_dim)
    b1[:4] = -0.5
    w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden_dim), size=(embed_dim, hidden_dim))
    w2[:4, :] = 0.0
    w2[np.arange(4), np.arange(4)] = 1.0
    w_box = rng.normal(0.0, 0.1 / math.sqrt(embed_dim), size=(4, embed_dim))
    w_box[np.arange(4), np.arange(4)] = _BOX_READOUT_GAIN
    return DetectorParams(
        w1=w1,
        b1=b1,
        w2=w2,
        b2=np.zeros(embed_dim),
        w_cls=rng.normal(0.0, 0.1 / math.sqrt(embed_dim), size=(num_classes, embed_dim)),
        b_cls=np.full(num_classes, _CLS_BIAS_INIT),
        w_box=w_box,
        b_box=np.zeros(4),
    )


def expand_classes(params: DetectorParams, num_classes: int, rng: np.random.Generator) -> DetectorParams:
    """Grow the classification head for newly introduced classes."""
    old = params.num_classes
    if num_classes < old:
        raise ValueError("cannot shrink the classification head")
    if num_classes == old:
        return params
    extra_w = rng.normal(0.0, 0.1 / math.sqrt(params.embed_dim), size=(num_classes - old, params.embed_dim))
    return replace(
        params,
        w_cls=np.vstack([params.w_cls, extra_w]),
        b_cls=np.concatenate([params.b_cls, np.full(num_classes - old, _CLS_BIAS_INIT)]),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class ForwardCache:
    inputs: np.ndarray  # (B*N, feature_dim + 4)
    hidden: np.ndarray  # (B*N, hidden)
    queries: np.ndarray  # (B*N, embed)
    cls_probs: np.ndarray  # (B*N, K)
    boxes: np.ndarray  # (B*N, 4) center-size in (0, 1)
    n_query: int
    n_scenes: int


def _candidate_inputs(params: DetectorParams, scene: Scene) -> np.ndarray:
    if scene.features.shape[1] != params.feature_dim:
        raise ValueError(
            f"scene feature dim {scene.features.shape[1]} != model feature dim {params.feature_dim}"
        )
    return np.concatenate([scene.features, scene.proposal_boxes], axis=1)


def _forward_stack(params: DetectorParams, scenes: list[Scene]) -> ForwardCache:
    inputs = np.concatenate([_candidate_inputs(params, s) for s in scenes], axis=0)
    hidden = np.tanh(inputs @ params.w1.T + params.b1)
    queries = hidden @ params.w2.T + params.b2
    cls_probs = _sigmoid(queries @ params.w_cls.T + params.b_cls)
    boxes = _sigmoid(queries @ params.w_box.T + params.b_box)
    return ForwardCache(
        inputs=inputs,
        hidden=hidden,
        queries=queries,
        cls_probs=cls_probs,
        boxes=boxes,
        n_query=scenes[0].features.shape[0],
        n_scenes=len(scenes),
    )


def forward(params: DetectorParams, scene: Scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-slot (queries, class probabilities, boxes) for one scene."""
    cache = _forward_stack(params, [scene])
    return cache.queries, cache.cls_probs, cache.boxes


def sigmoid_focal_loss(
    p: "float | np.ndarray",
    y: "int | np.ndarray",
    alpha_f: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> "float | np.ndarray":
    """Elementwise focal term; probabilities are clamped away from 0 and 1."""
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(p_arr < 0) or np.any(p_arr > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    pc = np.clip(p_arr, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y_arr = np.asarray(y)
    pos = -alpha_f * (1.0 - pc) ** gamma * np.log(pc)
    neg = -(1.0 - alpha_f) * pc**gamma * np.log(1.0 - pc)
    out = np.where(y_arr == 1, pos, neg)
    return float(out) if out.ndim == 0 else out


def _focal_grad_logit(p: np.ndarray, y: np.ndarray, alpha_f: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> np.ndarray:
    """d focal / d logit, zero wherever the probability clamp is active."""
    active = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g_pos = alpha_f * (1.0 - pc) ** gamma * (gamma * pc * np.log(pc) - (1.0 - pc))
    g_neg = (1.0 - alpha_f) * pc**gamma * (pc - gamma * (1.0 - pc) * np.log(1.0 - pc))
    return np.where(active, np.where(y == 1, g_pos, g_neg), 0.0)


def _giou_with_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """gIoU and its gradient w.r.t. the predicted center-size box.

    Derivatives use strict comparisons at the overlap boundaries, which
    makes the gradient vanish when the boxes coincide (the true
    two-sided limit there).
    """
    cx, cy, w, h = pred
    x1, y1, x2, y2 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    tx1, ty1, tx2, ty2 = (
        target[0] - target[2] / 2,
        target[1] - target[3] / 2,
        target[0] + target[2] / 2,
        target[1] + target[3] / 2,
    )
    area_p = w * h
    area_t = target[2] * target[3]

    iw = min(x2, tx2) - max(x1, tx1)
    ih = min(y2, ty2) - max(y1, ty1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = area_p + area_t - inter
    hw = max(x2, tx2) - min(x1, tx1)
    hh = max(y2, ty2) - min(y1, ty1)
    hull = hw * hh
    if hull <= 0:
        raise ValueError("enclosing box has zero area")
    giou = inter / union - (hull - union) / hull

    # Corner-order gradients: (x1, y1, x2, y2).
    d_area = np.array([-h, -w, h, w])
    d_inter = np.zeros(4)
    if iw > 0 and ih > 0:
        d_inter[0] = -ih if x1 > tx1 else 0.0
        d_inter[2] = ih if x2 < tx2 else 0.0
        d_inter[1] = -iw if y1 > ty1 else 0.0
        d_inter[3] = iw if y2 < ty2 else 0.0
    d_union = d_area - d_inter
    d_hull = np.array(
        [
            -hh if x1 < tx1 else 0.0,
            -hw if y1 < ty1 else 0.0,
            hh if x2 > tx2 else 0.0,
            hw if y2 > ty2 else 0.0,
        ]
    )
    d_giou_corner = (
        d_inter / union
        - inter * d_union / union**2
        + d_union / hull
        - union * d_hull / hull**2
    )
    # Chain corners back to (cx, cy, w, h).
    d_giou = np.array(
        [
            d_giou_corner[0] + d_giou_corner[2],
            d_giou_corner[1] + d_giou_corner[3],
            (d_giou_corner[2] - d_giou_corner[0]) / 2,
            (d_giou_corner[3] - d_giou_corner[1]) / 2,
        ]
    )
    return float(giou), d_giou


def box_regression_loss(
    pred: np.ndarray,
    target: np.ndarray,
    w_l1: float = BOX_L1_WEIGHT,
    w_giou: float = BOX_GIOU_WEIGHT,
) -> float:
    """w_l1 * L1 in center-size coordinates + w_giou * (1 - gIoU)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if np.any(pred[2:] < 0) or np.any(target[2:] < 0):
        raise ValueError("box width/height must be non-negative")
    giou, _ = _giou_with_grad(pred, target)
    return float(w_l1 * np.abs(pred - target).sum() + w_giou * (1.0 - giou))


def joint_loss(lc: float, lb: float, lo: float, alpha: float) -> float:
    return lc + lb + alpha * lo


@dataclass(frozen=True)
class LossBreakdown:
    cls_loss: float
    box_loss: float
    obj_loss: float
    total: float


@dataclass(frozen=True)
class ParamGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_box: np.ndarray
    b_box: np.ndarray


def batch_losses_and_grads(
    params: DetectorParams,
    gaussian: GaussianState,
    batch: list[LabeledScene],
    alpha: float,
    match_weights: tuple[float, float, float] = DEFAULT_MATCH_WEIGHTS,
    matches: "list[MatchResult] | None" = None,
    cache: "ForwardCache | None" = None,
) -> tuple[LossBreakdown, ParamGrads, list[MatchResult]]:
    """Joint loss (averaged over scenes) and analytic parameter gradients.

    The Gaussian is frozen: its parameters receive no gradient. When
    ``matches`` is given the assignment is reused instead of recomputed,
    which is what finite-difference checking needs (the match is
    piecewise constant in the parameters).
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    scenes = [ls.scene for ls in batch]
    if cache is None:
        cache = _forward_stack(params, scenes)
    n, b = cache.n_query, cache.n_scenes
    k = params.num_classes

    if matches is None:
        matches = []
        for s_idx, ls in enumerate(batch):
            probs = cache.cls_probs[s_idx * n : (s_idx + 1) * n]
            boxes = cache.boxes[s_idx * n : (s_idx + 1) * n]
            targets = [(t.class_id, t.box) for t in ls.targets]
            matches.append(matching.detr_match(probs, boxes, targets, match_weights))

    targets_y = np.zeros((b * n, k))
    matched_rows: list[int] = []
    matched_boxes: list[np.ndarray] = []
    for s_idx, (ls, match) in enumerate(zip(batch, matches)):
        for i, j in match.pairs:
            row = s_idx * n + i
            targets_y[row, ls.targets[j].class_id] = 1.0
            matched_rows.append(row)
            matched_boxes.append(ls.targets[j].box)

    # Classification: focal over every slot and class.
    lc = float(np.sum(sigmoid_focal_loss(cache.cls_probs, targets_y))) / b
    g_cls = _focal_grad_logit(cache.cls_probs, targets_y) / b

    # Box regression: matched slots only.
    lb = 0.0
    g_box = np.zeros((b * n, 4))
    for row, tbox in zip(matched_rows, matched_boxes):
        pred = cache.boxes[row]
        giou, d_giou = _giou_with_grad(pred, tbox)
        lb += BOX_L1_WEIGHT * np.abs(pred - tbox).sum() + BOX_GIOU_WEIGHT * (1.0 - giou)
        d_pred = BOX_L1_WEIGHT * np.sign(pred - tbox) - BOX_GIOU_WEIGHT * d_giou
        g_box[row] = d_pred * pred * (1.0 - pred)
    lb /= b
    g_box /= b

    # Objectness: squared Mahalanobis distance of matched slots on the
    # frozen Gaussian.
    lo, g_obj = objectness.objectness_loss_and_grad(gaussian, cache.queries, matched_rows)
    lo /= b

    d_queries = g_cls @ params.w_cls + g_box @ params.w_box + (alpha / b) * g_obj
    g_hidden = (d_queries @ params.w2) * (1.0 - cache.hidden**2)

    grads = ParamGrads(
        w1=g_hidden.T @ cache.inputs,
        b1=g_hidden.sum(axis=0),
        w2=d_queries.T @ cache.hidden,
        b2=d_queries.sum(axis=0),
        w_cls=g_cls.T @ cache.queries,
        b_cls=g_cls.sum(axis=0),
        w_box=g_box.T @ cache.queries,
        b_box=g_box.sum(axis=0),
    )
    breakdown = LossBreakdown(cls_loss=lc, box_loss=lb, obj_loss=lo, total=joint_loss(lc, lb, lo, alpha))
    return breakdown, grads, matches


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int = 0

    @classmethod
    def initial(cls, params: DetectorParams) -> "AdamState":
        return cls(
            m=tuple(np.zeros_like(p) for p in params.astuple()),
            v=tuple(np.zeros_like(p) for p in params.astuple()),
        )

    def expanded_like(self, params: DetectorParams) -> "AdamState":
        """Zero-pad moments after a classification-head expansion."""
        m, v = [], []
        for p, mi, vi in zip(params.astuple(), self.m, self.v):
            if p.shape == mi.shape:
                m.append(mi)
                v.append(vi)
            else:
                grown_m = np.zeros_like(p)
                grown_v = np.zeros_like(p)
                grown_m[tuple(slice(0, s) for s in mi.shape)] = mi
                grown_v[tuple(slice(0, s) for s in vi.shape)] = vi
                m.append(grown_m)
                v.append(grown_v)
        return AdamState(m=tuple(m), v=tuple(v), step=self.step)


def adam_step(
    params: DetectorParams,
    grads: ParamGrads,
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    weight_decay: float,
) -> tuple[DetectorParams, AdamState]:
    """One decoupled-weight-decay Adam update; inputs are not mutated."""
    t = state.step + 1
    grad_arrays = tuple(getattr(grads, f) for f in _PARAM_FIELDS)
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.astuple(), grad_arrays, state.m, state.v):
        m2 = beta1 * m + (1.0 - beta1) * g
        v2 = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m2 / (1.0 - beta1**t)
        v_hat = v2 / (1.0 - beta2**t)
        p2 = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS) - lr * weight_decay * p
        new_p.append(p2)
        new_m.append(m2)
        new_v.append(v2)
    return (
        DetectorParams(*new_p),
        AdamState(m=tuple(new_m), v=tuple(new_v), step=t),
    )


def train_step(
    params: DetectorParams,
    gaussian: GaussianState,
    adam: AdamState,
    batch: list[LabeledScene],
    cfg: TrainConfig,
    lr: "float | None" = None,
) -> tuple[DetectorParams, GaussianState, AdamState, LossBreakdown]:
    """One alternating training step.

    Order: forward all scenes, EMA-update the Gaussian from every query
    embedding of the batch, match predictions to targets, evaluate the
    joint loss on the frozen post-update Gaussian, then apply Adam. The
    Gaussian parameters are never touched by the optimizer.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    scenes = [ls.scene for ls in batch]
    cache = _forward_stack(params, scenes)
    new_gaussian = objectness.ema_update(gaussian, cache.queries)
    breakdown, grads, _ = batch_losses_and_grads(
        params, new_gaussian, batch, alpha=cfg.alpha, cache=cache
    )
    new_params, new_adam = adam_step(
        params,
        grads,
        adam,
        lr=cfg.lr if lr is None else lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        weight_decay=cfg.weight_decay,
    )
    return new_params, new_gaussian, new_adam, breakdown


def gradient_check(
    params: DetectorParams,
    gaussian: GaussianState,
    batch: list[LabeledScene],
    alpha: float = 0.1,
    step: float = 1e-6,
) -> float:
    """Max relative error of analytic vs central-finite-difference grads.

    The match computed at the base point is held fixed during probing:
    the assignment is piecewise constant in the parameters, so this is
    the derivative of the same function the analytic path differentiates.
    """
    base_breakdown, grads, matches = batch_losses_and_grads(params, gaussian, batch, alpha=alpha)

    def loss_at(arrays: list[np.ndarray]) -> float:
        p = DetectorParams(*arrays)
        bd, _, _ = batch_losses_and_grads(p, gaussian, batch, alpha=alpha, matches=matches)
        return bd.total

    arrays = [p.copy() for p in params.astuple()]
    analytic = [getattr(grads, f) for f in _PARAM_FIELDS]
    worst = 0.0
    for a_idx, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        g_flat = analytic[a_idx].reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_at(arrays)
            flat[i] = orig - step
            down = loss_at(arrays)
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            denom = max(abs(fd), abs(g_flat[i]), 1e-8)
            worst = max(worst, abs(fd - g_flat[i]) / denom)
    return worst


@dataclass(frozen=True)
class Prediction:
    """One emitted detection: the slot's best label and its score."""

    slot: int
    label: int  # known class index, or UNKNOWN_CLASS
    score: float
    box: np.ndarray
    objectness: float
    class_scores: np.ndarray  # objectness-scaled known-class scores
    unknown_score: float


def predict(
    params: DetectorParams,
    gaussian: GaussianState,
    scene: Scene,
    tau: float,
    conf_threshold: float = 0.2,
    top_k: "int | None" = None,
    use_objectness: bool = True,
) -> list[Prediction]:
    """Score every slot, keep those above threshold, best first.

    Known-class score is cls_prob * objectness; the unknown score is
    objectness * (1 - best known cls_prob). Each slot emits whichever
    label scores higher. ``use_objectness=False`` scores with the
    objectness factor pinned to 1 (ablation baseline).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    queries, cls_probs, boxes = forward(params, scene)
    if use_objectness:
        f_obj = objectness.objectness_prob_batch(gaussian, queries, tau)
    else:
        f_obj = np.ones(queries.shape[0])
    known_scores = cls_probs * f_obj[:, None]
    unknown_scores = f_obj * (1.0 - cls_probs.max(axis=1))

    out: list[Prediction] = []
    for slot in range(queries.shape[0]):
        best_k = int(np.argmax(known_scores[slot]))
        s_known = float(known_scores[slot, best_k])
        s_unknown = float(unknown_scores[slot])
        if s_known >= s_unknown:
            label, score = best_k, s_known
        else:
            label, score = UNKNOWN_CLASS, s_unknown
        if score >= conf_threshold:
            out.append(
                Prediction(
                    slot=slot,
                    label=label,
                    score=score,
                    box=boxes[slot],
                    objectness=float(f_obj[slot]),
                    class_scores=known_scores[slot],
                    unknown_score=s_unknown,
                )
            )
    out.sort(key=lambda p: (-p.score, p.slot))
    if top_k is not None:
        out = out[:top_k]
    return out
