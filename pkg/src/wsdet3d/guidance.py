"""Feature- and output-level guidance.

Foreground-map construction, point-to-pixel objectness scatter, the
focal / KL / L2 losses over the valid pixel region, the score-weighted
GIoU loss on projected boxes, loss composition for the two training
modes, and a small logistic classifier pair that demonstrates the
losses drive learning on synthetic scenes.

All losses return plain floats plus gradients w.r.t. logits so they can
be checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry3d as g3d
from .types import Box2D, Box3D, Calibration, SyntheticScene

PROB_CLAMP = 1e-7
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


class MaskShapeMismatch(ValueError):
    """A per-box mask does not match its box footprint."""


class ChannelMismatch(ValueError):
    """Feature maps disagree on channel count."""


class ZeroScoreSum(ValueError):
    """Score normalisation impossible: all confidences are zero."""


class MissingTerm(KeyError):
    """A loss term required by the composition mode is absent."""


class DivergenceDetected(RuntimeError):
    """Training loss went non-finite; carries the partial curve."""

    def __init__(self, message: str, curve: list):
        super().__init__(message)
        self.curve = curve


# -------------------------------------------------------------------- maps

@dataclass
class ObjectnessMap:
    """Per-pixel foreground probability with a validity support."""

    values: np.ndarray   # (H, W) float64 in [0, 1]
    support: np.ndarray  # (H, W) bool

    @classmethod
    def dense(cls, values: np.ndarray) -> "ObjectnessMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @classmethod
    def from_sparse(cls, extent: tuple[int, int], rows: np.ndarray,
                    cols: np.ndarray, vals: np.ndarray) -> "ObjectnessMap":
        values = np.zeros(extent, dtype=np.float64)
        support = np.zeros(extent, dtype=bool)
        values[rows, cols] = vals
        support[rows, cols] = True
        return cls(values, support)

    @property
    def extent(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class PixelFeatureMap:
    """Dense or sparse H x W x C features."""

    values: np.ndarray   # (H, W, C)
    support: np.ndarray | None = None  # (H, W) bool; None means dense

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def _footprint(box: Box2D, extent) -> tuple[int, int, int, int]:
    h, w = extent
    x0 = max(int(math.floor(box.x1)), 0)
    y0 = max(int(math.floor(box.y1)), 0)
    x1 = min(int(math.ceil(box.x2)), w)
    y1 = min(int(math.ceil(box.y2)), h)
    return y0, max(y1, y0), x0, max(x1, x0)


def merge_foreground_maps(per_box_masks, boxes2d, extent) -> ObjectnessMap:
    """Pixelwise max of per-box masks placed at their box footprints;
    everything outside all boxes is zero."""
    values = np.zeros(extent, dtype=np.float64)
    for mask, box in zip(per_box_masks, boxes2d):
        mask = np.asarray(mask, dtype=np.float64)
        y0, y1, x0, x1 = _footprint(box, extent)
        if mask.shape != (y1 - y0, x1 - x0):
            raise MaskShapeMismatch(
                f"mask {mask.shape} vs footprint {(y1 - y0, x1 - x0)}")
        region = values[y0:y1, x0:x1]
        np.maximum(region, mask, out=region)
    return ObjectnessMap.dense(values)


def boxes_as_foreground(boxes2d, extent) -> ObjectnessMap:
    """Fallback foreground map when no masks exist: filled 2D boxes."""
    masks = []
    for box in boxes2d:
        y0, y1, x0, x1 = _footprint(box, extent)
        masks.append(np.ones((y1 - y0, x1 - x0)))
    return merge_foreground_maps(masks, boxes2d, extent)


@dataclass
class ScatterResult:
    map: ObjectnessMap
    winner: np.ndarray  # (H, W) int64 point index, -1 where empty
    depth: np.ndarray   # (H, W) winning depth, inf where empty

    @property
    def region(self) -> np.ndarray:
        return self.map.support


def _scatter_winner_grid(positions, calib: Calibration, extent):
    """Per-pixel index of the nearest-depth point landing there."""
    h, w = extent
    winner = np.full((h, w), -1, dtype=np.int64)
    depth_grid = np.full((h, w), np.inf)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        return winner, depth_grid
    uv, valid, depth = g3d.project_points(positions, calib)
    cols = np.floor(uv[:, 0]).astype(np.int64)
    rows = np.floor(uv[:, 1]).astype(np.int64)
    ok = valid & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    idx = np.flatnonzero(ok)
    # write farthest first so the nearest depth lands last; exact depth
    # ties resolve to the lowest point index
    order = idx[np.lexsort((-idx, -depth[idx]))]
    winner[rows[order], cols[order]] = order
    depth_grid[rows[order], cols[order]] = depth[order]
    return winner, depth_grid


def scatter_points(point_values, positions, calib: Calibration,
                   extent) -> ScatterResult:
    """Project per-point probabilities into a sparse pixel map; pixel
    collisions keep the nearest-depth point."""
    point_values = np.asarray(point_values, dtype=np.float64)
    winner, depth_grid = _scatter_winner_grid(positions, calib, extent)
    rows, cols = np.nonzero(winner >= 0)
    vals = point_values[winner[rows, cols]]
    return ScatterResult(
        map=ObjectnessMap.from_sparse(extent, rows, cols, vals),
        winner=winner, depth=depth_grid)


def scatter_features(features, positions, calib: Calibration,
                     extent) -> PixelFeatureMap:
    """Same collision rule as :func:`scatter_points`, for feature vectors."""
    features = np.asarray(features, dtype=np.float64)
    winner, _ = _scatter_winner_grid(positions, calib, extent)
    rows, cols = np.nonzero(winner >= 0)
    values = np.zeros((*extent, features.shape[1]), dtype=np.float64)
    values[rows, cols] = features[winner[rows, cols]]
    support = winner >= 0
    return PixelFeatureMap(values, support)


# ------------------------------------------------------------------ losses

def _effective_region(pred: ObjectnessMap, target: ObjectnessMap,
                      region: np.ndarray | None) -> np.ndarray:
    eff = pred.support & target.support
    if region is not None:
        eff = eff & region
    return eff


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _focal_terms(p: np.ndarray, t: np.ndarray, gamma: float, alpha: float):
    """Per-element focal loss and derivative w.r.t. probability."""
    log_p = np.log(p)
    log_q = np.log(1.0 - p)
    pos = -alpha * (1.0 - p) ** gamma * log_p
    neg = -(1.0 - alpha) * p ** gamma * log_q
    loss = np.where(t, pos, neg)
    dpos = -alpha * (-gamma * (1.0 - p) ** (gamma - 1.0) * log_p + (1.0 - p) ** gamma / p)
    dneg = -(1.0 - alpha) * (gamma * p ** (gamma - 1.0) * log_q - p ** gamma / (1.0 - p))
    return loss, np.where(t, dpos, dneg)


def focal_loss(pred: ObjectnessMap, target: ObjectnessMap,
               region: np.ndarray | None = None,
               gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA):
    """Mean alpha-balanced focal loss over the region; returns the loss
    and its gradient w.r.t. the prediction logits (zero off-region).
    Target values binarise at 0.5. An empty region yields (0, zeros)."""
    eff = _effective_region(pred, target, region)
    grad = np.zeros(pred.values.shape)
    n = int(eff.sum())
    if n == 0:
        return 0.0, grad
    p = _clamp(pred.values[eff])
    t = target.values[eff] >= 0.5
    loss, dldp = _focal_terms(p, t, gamma, alpha)
    grad[eff] = dldp * p * (1.0 - p) / n
    return float(loss.mean()), grad


def kl_guidance(c_image: ObjectnessMap, c_points: ObjectnessMap,
                region: np.ndarray | None = None):
    """Mean Bernoulli KL(image || points) over the region. The image
    branch is the fixed reference: the gradient flows only to the point
    logits (and collapses to q - p)."""
    eff = _effective_region(c_points, c_image, region)
    grad = np.zeros(c_points.values.shape)
    n = int(eff.sum())
    if n == 0:
        return 0.0, grad
    p = _clamp(c_image.values[eff])
    q = _clamp(c_points.values[eff])
    kl = p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))
    grad[eff] = (q - p) / n
    return float(kl.mean()), grad


def l2_feature_loss(f_image: PixelFeatureMap, f_points: PixelFeatureMap,
                    region: np.ndarray | None = None) -> float:
    """Mean L2 distance between feature vectors over the region."""
    if f_image.channels != f_points.channels:
        raise ChannelMismatch(f"{f_image.channels} vs {f_points.channels}")
    eff = np.ones(f_image.values.shape[:2], dtype=bool)
    for fmap in (f_image, f_points):
        if fmap.support is not None:
            eff &= fmap.support
    if region is not None:
        eff &= region
    if not eff.any():
        return 0.0
    diff = f_image.values[eff] - f_points.values[eff]
    return float(np.sqrt((diff ** 2).sum(axis=1)).mean())


def match_boxes_by_iou(pred_boxes3d, gt_boxes2d, calib: Calibration,
                       floor: float = 0.5,
                       clip: tuple[int, int] | None = None) -> list[tuple[int, int]]:
    """Greedy highest-IoU one-to-one pairing of projected 3D boxes with
    2D boxes, keeping pairs strictly above the floor."""
    proj = []
    for i, box in enumerate(pred_boxes3d):
        try:
            proj.append((i, g3d.projected_aabb(box, calib, clip=clip)))
        except g3d.AllCornersBehindCamera:
            continue
    if not proj or not gt_boxes2d:
        return []
    iou = g3d.iou_matrix_2d([p for _, p in proj], list(gt_boxes2d))
    pairs = []
    used_p, used_g = set(), set()
    flat = [(-iou[a, b], a, b) for a in range(iou.shape[0]) for b in range(iou.shape[1])]
    for neg, a, b in sorted(flat):
        if -neg <= floor:
            break
        if a in used_p or b in used_g:
            continue
        used_p.add(a)
        used_g.add(b)
        pairs.append((proj[a][0], b))
    return pairs


@dataclass
class OutputLevelLoss:
    loss: float
    weights: dict        # gt index -> normalised score
    giou: dict           # pred index -> giou value
    grads: dict          # pred index -> (7,) gradient of the loss
    nondifferentiable: bool


def output_level_loss(pred_boxes3d, gt_boxes2d, calib: Calibration,
                      match) -> OutputLevelLoss:
    """Score-weighted GIoU loss over matched (pred, gt) pairs.

    Scores normalise over the matched ground-truth set; each pair
    contributes sigma_hat * (1 - giou) and its gradient w.r.t. the
    pred box parameters."""
    match = list(match)
    score_sum = sum(gt_boxes2d[g].score for _, g in match) if match else 0.0
    if match and score_sum <= 0.0:
        raise ZeroScoreSum("matched 2D scores sum to zero")
    total = 0.0
    weights, gious, grads = {}, {}, {}
    tied = False
    for p_idx, g_idx in match:
        gt = gt_boxes2d[g_idx]
        sig = gt.score / score_sum
        res = g3d.giou_gradient(pred_boxes3d[p_idx], gt, calib)
        total += sig * (1.0 - res.giou)
        weights[g_idx] = sig
        gious[p_idx] = res.giou
        grads[p_idx] = -sig * res.grad
        tied = tied or res.nondifferentiable
    return OutputLevelLoss(loss=float(total), weights=weights, giou=gious,
                           grads=grads, nondifferentiable=tied)


# ------------------------------------------------------------- composition

MODE_TERMS = {
    "pseudo_label": ("external_rpn", "external_rcnn", "seg_P", "kl"),
    "weak_only": ("seg_P", "kl", "box"),
}


@dataclass
class LossBreakdown:
    terms: dict
    weights: dict
    total: float


def compose_losses(terms: dict, mode: str, weights: dict | None = None) -> LossBreakdown:
    """Sum the mode's required terms (unit weights unless given)."""
    if mode not in MODE_TERMS:
        raise ValueError(f"unknown mode {mode!r}")
    required = MODE_TERMS[mode]
    weights = dict(weights or {})
    total = 0.0
    used_weights = {}
    for name in required:
        if name not in terms:
            raise MissingTerm(name)
        w = weights.get(name, 1.0)
        used_weights[name] = w
        total += w * terms[name]
    return LossBreakdown(terms=dict(terms), weights=used_weights, total=float(total))


# ------------------------------------------------- toy objectness training

@dataclass
class ToyClassifier:
    """Logistic model mapping a feature vector to objectness."""

    weights: np.ndarray
    bias: float

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits(x)))


@dataclass
class SceneTensors:
    """Flattened per-pixel training data for one scene."""

    x_image: np.ndarray   # (n, C_img) image features at region pixels
    x_point: np.ndarray   # (n, C_pt) winner-point features at region pixels
    target: np.ndarray    # (n,) bool foreground label from the merged mask
    n_pixels: int


def scene_point_features(scene: SyntheticScene) -> np.ndarray:
    """Per-point features: height above ground, local BEV density,
    reflectance, and two seeded noise channels."""
    cam = scene.calib.lidar_to_rect(scene.cloud.xyz)
    height = scene.ground_y - cam[:, 1]
    cell = 0.5
    ij = np.floor(cam[:, [0, 2]] / cell).astype(np.int64)
    keys = ij[:, 0] * 10_000_019 + ij[:, 1]
    _, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    density = np.log1p(counts[inverse].astype(np.float64))
    rng = np.random.default_rng(np.random.SeedSequence((int(scene.frame_id), 0xFEA)))
    noise = rng.normal(0.0, 1.0, size=(len(cam), 2))
    return np.column_stack([
        height, density, scene.cloud.reflectance.astype(np.float64),
        noise[:, 0], noise[:, 1],
    ])


def scene_image_features(scene: SyntheticScene, foreground: np.ndarray) -> np.ndarray:
    """Per-pixel image features: blurred foreground plus noise, a noise
    channel, and normalised row position."""
    h, w = scene.extent
    fg = foreground.astype(np.float64)
    padded = np.pad(fg, 1)
    blur = sum(padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
               for dr in (-1, 0, 1) for dc in (-1, 0, 1)) / 9.0
    rng = np.random.default_rng(np.random.SeedSequence((int(scene.frame_id), 0x1A6)))
    c0 = blur + rng.normal(0.0, 0.25, size=(h, w))
    c1 = rng.normal(0.0, 1.0, size=(h, w))
    rows = np.repeat(np.linspace(0.0, 1.0, h)[:, None], w, axis=1)
    return np.stack([c0, c1, rows], axis=2)


def prepare_scene_tensors(scene: SyntheticScene) -> SceneTensors:
    """Scatter point features, build the merged foreground target, and
    flatten everything over the valid region."""
    fg = merge_foreground_maps(scene.masks, [o.box2d for o in scene.gt.objects],
                               scene.extent)
    cam = scene.calib.lidar_to_rect(scene.cloud.xyz)
    winner, _ = _scatter_winner_grid(cam, scene.calib, scene.extent)
    region = winner >= 0
    rows, cols = np.nonzero(region)
    pt_feats = scene_point_features(scene)
    img_feats = scene_image_features(scene, fg.values)
    return SceneTensors(
        x_image=img_feats[rows, cols],
        x_point=pt_feats[winner[rows, cols]],
        target=fg.values[rows, cols] >= 0.5,
        n_pixels=len(rows),
    )


@dataclass
class ToyTrainingResult:
    image_clf: ToyClassifier
    point_clf: ToyClassifier
    curve: list
    train_scenes: list
    holdout_scenes: list


def _train_logistic(xs, ts, epochs, lr, rng, gamma, alpha,
                    ref_probs=None, kl_weight=0.0, curve_key="loss"):
    """Full-batch gradient descent with the focal objective, optionally
    plus a KL pull toward fixed reference probabilities."""
    dim = xs[0].shape[1]
    clf = ToyClassifier(weights=rng.normal(0.0, 0.01, dim), bias=0.0)
    x_all = np.vstack(xs)
    t_all = np.concatenate(ts)
    ref_all = np.concatenate(ref_probs) if ref_probs is not None else None
    n = len(t_all)
    curve = []
    for epoch in range(epochs):
        p = _clamp(clf.predict_proba(x_all))
        loss_vec, dldp = _focal_terms(p, t_all, gamma, alpha)
        focal = float(loss_vec.mean())
        grad_z = dldp * p * (1.0 - p) / n
        kl_val = 0.0
        if ref_all is not None and kl_weight > 0.0:
            pr = _clamp(ref_all)
            kl_val = float((pr * np.log(pr / p)
                            + (1.0 - pr) * np.log((1.0 - pr) / (1.0 - p))).mean())
            grad_z = grad_z + kl_weight * (p - pr) / n
        total = focal + kl_weight * kl_val
        if not math.isfinite(total):
            raise DivergenceDetected(f"loss became {total} at epoch {epoch}", curve)
        curve.append({"epoch": epoch, curve_key: focal, "kl": kl_val, "total": total})
        gw = x_all.T @ grad_z
        gb = float(grad_z.sum())
        clf.weights = clf.weights - lr * gw
        clf.bias = clf.bias - lr * gb
    return clf, curve


def train_toy_objectness(scenes, epochs: int, lr: float, seed: int = 0,
                         use_kl: bool = True, kl_weight: float = 1.0,
                         holdout_fraction: float = 0.25,
                         gamma: float = FOCAL_GAMMA,
                         alpha: float = FOCAL_ALPHA) -> ToyTrainingResult:
    """Train the image-side classifier on the foreground map, then the
    point-side classifier on the same map plus (optionally) a KL pull
    toward the trained image-side predictions."""
    rng = np.random.default_rng(seed)
    n_hold = max(1, int(round(holdout_fraction * len(scenes)))) if len(scenes) > 1 else 0
    train_scenes = list(range(len(scenes) - n_hold))
    holdout_scenes = list(range(len(scenes) - n_hold, len(scenes)))
    tensors = [prepare_scene_tensors(s) for s in scenes]

    xs_img = [tensors[i].x_image for i in train_scenes]
    xs_pt = [tensors[i].x_point for i in train_scenes]
    ts = [tensors[i].target for i in train_scenes]

    image_clf, img_curve = _train_logistic(
        xs_img, ts, epochs, lr, rng, gamma, alpha, curve_key="seg_I")
    refs = [image_clf.predict_proba(x) for x in xs_img] if use_kl else None
    point_clf, pt_curve = _train_logistic(
        xs_pt, ts, epochs, lr, rng, gamma, alpha,
        ref_probs=refs, kl_weight=kl_weight if use_kl else 0.0, curve_key="seg_P")

    curve = []
    for e in range(epochs):
        curve.append({
            "epoch": e,
            "seg_I": img_curve[e]["seg_I"],
            "seg_P": pt_curve[e]["seg_P"],
            "kl": pt_curve[e]["kl"],
            "total": img_curve[e]["seg_I"] + pt_curve[e]["total"],
        })
    return ToyTrainingResult(image_clf=image_clf, point_clf=point_clf, curve=curve,
                             train_scenes=train_scenes, holdout_scenes=holdout_scenes)


def point_accuracy(clf: ToyClassifier, tensors: SceneTensors) -> float:
    """Foreground classification accuracy of point-side predictions."""
    p = clf.predict_proba(tensors.x_point)
    return float(((p >= 0.5) == tensors.target).mean())


def point_image_kl(point_clf: ToyClassifier, image_clf: ToyClassifier,
                   tensors: SceneTensors) -> float:
    """Bernoulli KL of the point-side map from the image-side map."""
    p = _clamp(image_clf.predict_proba(tensors.x_image))
    q = _clamp(point_clf.predict_proba(tensors.x_point))
    kl = p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))
    return float(kl.mean())
