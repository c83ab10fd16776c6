"""Synthetic desk-scale detection benchmark with controllable partial annotation.

Scenes come in two classes: abnormal (AP, contains objects with partially
annotated boxes) and normal (NP, guaranteed empty).  Anchors on a regular grid
are labeled by IoU against the *annotated* boxes, while an ideal label against
all boxes is kept for diagnostics.  Dropping annotations at rate eta therefore
flips some positive anchors to (noisy) negatives, never the reverse.

Features are deliberately synthetic: a signal channel monotone in the anchor's
best IoU with any true box, attenuated for a controllable fraction of "hard"
anchors, plus independent noise channels.  Everything is deterministic given
the corpus seed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

AP = "AP"
NP_CLASS = "NP"

IOU_POSITIVE = 0.5  # anchor is positive iff best IoU >= this


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("box sides must be positive")

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU, shape (len(a), len(b))."""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    ax1 = np.array([b.x1 for b in boxes_a])[:, None]
    ay1 = np.array([b.y1 for b in boxes_a])[:, None]
    ax2 = np.array([b.x2 for b in boxes_a])[:, None]
    ay2 = np.array([b.y2 for b in boxes_a])[:, None]
    bx1 = np.array([b.x1 for b in boxes_b])[None, :]
    by1 = np.array([b.y1 for b in boxes_b])[None, :]
    bx2 = np.array([b.x2 for b in boxes_b])[None, :]
    by2 = np.array([b.y2 for b in boxes_b])[None, :]
    ix = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0, None)
    iy = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0, None)
    inter = ix * iy
    area_a = np.array([b.area for b in boxes_a])[:, None]
    area_b = np.array([b.area for b in boxes_b])[None, :]
    return inter / (area_a + area_b - inter)


@dataclass
class Scene:
    scene_id: int
    image_class: str  # AP or NP
    gt_boxes: list
    annotated: np.ndarray  # boolean mask over gt_boxes
    extent: tuple

    def __post_init__(self):
        self.annotated = np.asarray(self.annotated, dtype=bool)
        if self.image_class == NP_CLASS and self.gt_boxes:
            raise ValueError("NP scenes must have no ground-truth boxes")
        if len(self.annotated) != len(self.gt_boxes):
            raise ValueError("annotated mask length must match gt_boxes")

    @property
    def is_abnormal(self) -> bool:
        return self.image_class == AP

    def annotated_boxes(self):
        return [b for b, keep in zip(self.gt_boxes, self.annotated) if keep]


@dataclass(frozen=True)
class SceneSpec:
    """Geometry and feature parameters of the synthetic corpus."""

    extent: tuple = (64.0, 64.0)
    objects_per_ap_scene: tuple = (2, 6)  # inclusive range
    object_size: tuple = (10.0, 14.0)
    anchor_stride: float = 4.0
    anchor_sizes: tuple = (12.0,)
    feature_dim: int = 16
    noise_level: float = 0.44
    hard_fraction: float = 0.5
    hard_attenuation: tuple = (0.1, 0.4)  # hard-anchor signal multiplier range
    signal_gain: float = 1.31
    secondary_gain: float = 0.7  # secondary-channel strength relative to signal_gain
    signal_background: float = 0.0

    def __post_init__(self):
        if self.objects_per_ap_scene[0] > self.objects_per_ap_scene[1]:
            raise ValueError("empty objects_per_ap_scene range")
        if self.object_size[0] > self.object_size[1] or self.object_size[0] <= 0:
            raise ValueError("invalid object size range")
        if self.anchor_stride <= 0:
            raise ValueError("anchor stride must be positive")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ValueError("hard_fraction must be in [0, 1]")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")


@dataclass(frozen=True)
class CorruptionSpec:
    eta: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")


@dataclass
class LabeledAnchor:
    anchor_box: Box
    features: np.ndarray
    p_star: int
    a: int
    ideal_p_star: int
    scene_id: int
    anchor_index: int
    target: np.ndarray | None = None  # (dx, dy, dw, dh) for positives


def generate_scene(spec: SceneSpec, image_class: str, rng) -> Scene:
    """Sample one scene; deterministic given the rng state."""
    width, height = spec.extent
    if spec.object_size[1] > min(width, height):
        raise ValueError("objects cannot exceed the scene extent")
    boxes = []
    if image_class == AP:
        lo, hi = spec.objects_per_ap_scene
        n = int(rng.integers(lo, hi + 1))
        for _ in range(n):
            w = float(rng.uniform(*spec.object_size))
            h = float(rng.uniform(*spec.object_size))
            cx = float(rng.uniform(w / 2, width - w / 2))
            cy = float(rng.uniform(h / 2, height - h / 2))
            boxes.append(Box(cx, cy, w, h))
    elif image_class != NP_CLASS:
        raise ValueError(f"unknown image class {image_class!r}")
    return Scene(scene_id=-1, image_class=image_class, gt_boxes=boxes,
                 annotated=np.ones(len(boxes), dtype=bool), extent=(width, height))


def generate_corpus(spec: SceneSpec, n_ap: int, n_np: int, seed: int):
    """AP scenes first, then NP scenes; per-scene rng streams from (seed, scene_id)."""
    scenes = []
    for sid in range(n_ap + n_np):
        rng = np.random.default_rng([seed, sid])
        cls = AP if sid < n_ap else NP_CLASS
        scene = generate_scene(spec, cls, rng)
        scene.scene_id = sid
        scenes.append(scene)
    return scenes


def corrupt_annotations(scenes, spec: CorruptionSpec):
    """Drop round(eta * total) annotations uniformly at random across scenes.

    Returns (new scene list, removed list of (scene_id, box_index)).  Input
    scenes are not mutated.
    """
    slots = [(s.scene_id, j) for s in scenes for j in range(len(s.gt_boxes))]
    k = int(round(spec.eta * len(slots)))
    rng = np.random.default_rng(spec.seed)
    removed_idx = rng.choice(len(slots), size=k, replace=False) if k else np.array([], dtype=int)
    removed = sorted(slots[i] for i in removed_idx)
    removed_set = set(removed)
    out = []
    for s in scenes:
        mask = s.annotated.copy()
        for j in range(len(s.gt_boxes)):
            if (s.scene_id, j) in removed_set:
                mask[j] = False
        out.append(dataclasses.replace(s, annotated=mask))
    return out, removed


def build_anchor_grid(scene: Scene, spec: SceneSpec):
    """Regular grid of square anchors covering the extent, one per size entry."""
    width, height = scene.extent
    stride = spec.anchor_stride
    nx = max(int(np.ceil(width / stride)), 1)
    ny = max(int(np.ceil(height / stride)), 1)
    anchors = []
    for size in spec.anchor_sizes:
        for iy in range(ny):
            for ix in range(nx):
                anchors.append(Box((ix + 0.5) * stride, (iy + 0.5) * stride, size, size))
    return anchors


def extract_features(scene: Scene, anchor_index: int, best_iou: float,
                     spec: SceneSpec, rng) -> np.ndarray:
    """Feature vector: attenuated IoU signal on channels 0-1 plus noise.

    A fraction of anchors is "hard": their signal is multiplied by a factor
    drawn from spec.hard_attenuation, pushing positives toward the background
    distribution.  Deterministic per rng stream.
    """
    noise = rng.standard_normal(spec.feature_dim) * spec.noise_level
    is_hard = rng.uniform() < spec.hard_fraction
    attenuation = float(rng.uniform(*spec.hard_attenuation)) if is_hard else 1.0
    feats = noise
    q = best_iou * attenuation
    feats[0] += spec.signal_background + spec.signal_gain * q
    feats[1] += spec.secondary_gain * spec.signal_gain * q
    return feats


def regression_target(anchor: Box, gt: Box) -> np.ndarray:
    """Center offsets normalized by anchor size plus log size ratios."""
    return np.array([
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        np.log(gt.w / anchor.w),
        np.log(gt.h / anchor.h),
    ])


def assign_labels(anchors, scene: Scene, spec: SceneSpec, corpus_seed: int = 0):
    """Label every anchor against the scene's annotated and full box sets."""
    full = scene.gt_boxes
    kept = scene.annotated_boxes()
    iou_full = iou_matrix(anchors, full)
    iou_kept = iou_matrix(anchors, kept)
    a = 1 if scene.is_abnormal else 0
    out = []
    for idx, anchor in enumerate(anchors):
        best_full = float(iou_full[idx].max()) if full else 0.0
        best_kept = float(iou_kept[idx].max()) if kept else 0.0
        p_star = int(best_kept >= IOU_POSITIVE)
        ideal = int(best_full >= IOU_POSITIVE)
        rng = np.random.default_rng([corpus_seed, scene.scene_id, idx])
        feats = extract_features(scene, idx, best_full, spec, rng)
        target = None
        if p_star:
            target = regression_target(anchor, kept[int(iou_kept[idx].argmax())])
        out.append(LabeledAnchor(anchor_box=anchor, features=feats, p_star=p_star,
                                 a=a, ideal_p_star=ideal, scene_id=scene.scene_id,
                                 anchor_index=idx, target=target))
    return out


@dataclass
class AnchorPool:
    """Structure-of-arrays view over a list of labeled anchors."""

    features: np.ndarray  # (n, d)
    p_star: np.ndarray  # (n,)
    a: np.ndarray  # (n,)
    ideal_p_star: np.ndarray  # (n,)
    scene_id: np.ndarray  # (n,)
    anchor_index: np.ndarray  # (n,)
    targets: np.ndarray  # (n, 4), zeros where absent
    boxes: np.ndarray  # (n, 4) as (cx, cy, w, h)

    @classmethod
    def from_anchors(cls, labeled) -> "AnchorPool":
        n = len(labeled)
        d = labeled[0].features.size if n else 0
        feats = np.zeros((n, d))
        targets = np.zeros((n, 4))
        boxes = np.zeros((n, 4))
        p_star = np.zeros(n, dtype=np.int64)
        a = np.zeros(n, dtype=np.int64)
        ideal = np.zeros(n, dtype=np.int64)
        sid = np.zeros(n, dtype=np.int64)
        aidx = np.zeros(n, dtype=np.int64)
        for i, la in enumerate(labeled):
            feats[i] = la.features
            p_star[i] = la.p_star
            a[i] = la.a
            ideal[i] = la.ideal_p_star
            sid[i] = la.scene_id
            aidx[i] = la.anchor_index
            boxes[i] = (la.anchor_box.cx, la.anchor_box.cy, la.anchor_box.w, la.anchor_box.h)
            if la.target is not None:
                targets[i] = la.target
        return cls(features=feats, p_star=p_star, a=a, ideal_p_star=ideal,
                   scene_id=sid, anchor_index=aidx, targets=targets, boxes=boxes)

    @property
    def size(self) -> int:
        return self.p_star.size


def build_pool(scenes, spec: SceneSpec, corpus_seed: int) -> AnchorPool:
    labeled = []
    for scene in scenes:
        anchors = build_anchor_grid(scene, spec)
        labeled.extend(assign_labels(anchors, scene, spec, corpus_seed))
    return AnchorPool.from_anchors(labeled)


_warned_quotas: set = set()


def _warn_once(key, msg, *args):
    if key not in _warned_quotas:
        _warned_quotas.add(key)
        log.warning(msg, *args)


def sample_minibatch(pool: AnchorPool, batch_size: int, rng):
    """Indices of a 1:3 positive:negative batch drawn from the pool.

    Falls back to all available positives (with three negatives each) when the
    pool cannot fill the positive quota, logging a warning (once per shortfall).
    """
    pos_idx = np.flatnonzero(pool.p_star == 1)
    neg_idx = np.flatnonzero(pool.p_star == 0)
    n_pos = max(int(round(batch_size / 4)), 1) if pos_idx.size else 0
    if pos_idx.size == 0:
        _warn_once(("none", batch_size), "minibatch has no positives: pool contains none")
        chosen_pos = np.array([], dtype=np.int64)
        n_neg = batch_size
    elif pos_idx.size < n_pos:
        _warn_once((pos_idx.size, n_pos),
                   "only %d positives available for quota %d; using all",
                   pos_idx.size, n_pos)
        chosen_pos = pos_idx
        n_neg = 3 * pos_idx.size
    else:
        chosen_pos = rng.choice(pos_idx, size=n_pos, replace=False)
        n_neg = batch_size - n_pos
    n_neg = min(n_neg, neg_idx.size)
    chosen_neg = rng.choice(neg_idx, size=n_neg, replace=False)
    return np.concatenate([chosen_pos, chosen_neg])


# ---------------------------------------------------------------------------
# Corpus serialization: line-delimited records plus a JSON manifest.
# ---------------------------------------------------------------------------


def save_corpus(path, scenes, spec: SceneSpec, seed: int, manifest_path=None):
    """Write scenes as line records; field order is fixed so files are diffable.

    Format:  scene <id> <class> <width> <height>
             box <cx> <cy> <w> <h> <annotated 0|1>
    """
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(f"scene {s.scene_id} {s.image_class} {s.extent[0]!r} {s.extent[1]!r}\n")
            for box, keep in zip(s.gt_boxes, s.annotated):
                fh.write(f"box {box.cx!r} {box.cy!r} {box.w!r} {box.h!r} {int(keep)}\n")
    if manifest_path is not None:
        manifest = {
            "seed": seed,
            "n_scenes": len(scenes),
            "n_ap": sum(1 for s in scenes if s.is_abnormal),
            "n_np": sum(1 for s in scenes if not s.is_abnormal),
            "spec": scene_spec_to_dict(spec),
        }
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_corpus(path):
    scenes = []
    current = None
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "scene":
                if current is not None:
                    scenes.append(_finish_scene(current))
                current = {
                    "scene_id": int(parts[1]),
                    "image_class": parts[2],
                    "extent": (float(parts[3]), float(parts[4])),
                    "boxes": [],
                    "annotated": [],
                }
            elif parts[0] == "box":
                current["boxes"].append(Box(*(float(v) for v in parts[1:5])))
                current["annotated"].append(bool(int(parts[5])))
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
    if current is not None:
        scenes.append(_finish_scene(current))
    return scenes


def _finish_scene(rec) -> Scene:
    return Scene(scene_id=rec["scene_id"], image_class=rec["image_class"],
                 gt_boxes=rec["boxes"], annotated=np.array(rec["annotated"], dtype=bool),
                 extent=rec["extent"])


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    d = dataclasses.asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def scene_spec_from_dict(d: dict) -> SceneSpec:
    kwargs = {}
    for f in dataclasses.fields(SceneSpec):
        if f.name in d:
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return SceneSpec(**kwargs)
