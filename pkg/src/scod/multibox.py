"""Default boxes, matching, offset coding, NMS and the multibox loss.

Boxes are stored as float64 arrays. Center form is ``(cx, cy, w, h)`` and
corner form ``(xmin, ymin, xmax, ymax)``, both as fractions of the image.
"""

from dataclasses import dataclass
import csv
import io
import math
from typing import NamedTuple

import numpy as np

from . import _accel
from .tensor import log_softmax, softmax

DEFAULT_VARIANCES = (0.1, 0.2)
REFERENCE_LAYOUT = [
    (38, (1.0, 2.0, 0.5)),
    (19, (1.0, 2.0, 0.5, 3.0, 1.0 / 3.0)),
    (10, (1.0, 2.0, 0.5, 3.0, 1.0 / 3.0)),
    (5, (1.0, 2.0, 0.5, 3.0, 1.0 / 3.0)),
    (3, (1.0, 2.0, 0.5)),
    (1, (1.0, 2.0, 0.5)),
]


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, xmin, ymin, xmax, ymax):
        return cls((xmin + xmax) / 2, (ymin + ymax) / 2, xmax - xmin, ymax - ymin)

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h])


def to_corners(center):
    c = np.asarray(center, dtype=np.float64)
    half = c[..., 2:] / 2
    return np.concatenate([c[..., :2] - half, c[..., :2] + half], axis=-1)


def to_center(corners):
    c = np.asarray(corners, dtype=np.float64)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2, c[..., 2:] - c[..., :2]], axis=-1)


def iou_matrix(a, b):
    """Pairwise IoU between corner-form arrays (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    iw = np.maximum(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0)
    ih = np.maximum(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def iou_corners(a, b):
    return float(iou_matrix([a], [b])[0, 0])


def iou(a, b):
    """Intersection over union of two :class:`Box` objects."""
    return iou_corners(a.corners(), b.corners())


# ---------------------------------------------------------------------------
# default boxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DefaultBoxBank:
    boxes: np.ndarray                 # (A, 4) center form
    layout: tuple                     # ((f_k, b_k), ...) in network order

    def __len__(self):
        return self.boxes.shape[0]

    @property
    def corners(self):
        return to_corners(self.boxes)


def layer_scales(n_maps, s_min, s_max):
    """Scale per map plus the one-past-the-end scale used by the extra box."""
    if n_maps == 1:
        return [s_min, s_max]
    step = (s_max - s_min) / (n_maps - 1)
    return [s_min + step * k for k in range(n_maps + 1)]


def generate_default_boxes(layout, s_min=0.2, s_max=0.9):
    """Tile default boxes over each ``(f_k, aspect_ratios)`` map.

    Each cell gets one box per aspect ratio at scale ``s_k`` followed by one
    square box at ``sqrt(s_k * s_{k+1})``. Cells are visited row-major and the
    maps in the given order.
    """
    layout = list(layout)
    if not layout:
        raise ValueError("default box layout is empty")
    if not (0 < s_min < s_max <= 1):
        raise ValueError(f"scales must satisfy 0 < s_min < s_max <= 1, got {s_min}, {s_max}")
    scales = layer_scales(len(layout), s_min, s_max)
    banks, shape = [], []
    for k, (f, ratios) in enumerate(layout):
        if f < 1:
            raise ValueError(f"feature map size must be >= 1, got {f}")
        s = scales[k]
        whs = [(s * math.sqrt(r), s / math.sqrt(r)) for r in ratios]
        extra = math.sqrt(s * scales[k + 1])
        whs.append((extra, extra))
        wh = np.array(whs)
        centers = (np.arange(f) + 0.5) / f
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        grid = np.stack([cx.ravel(), cy.ravel()], axis=1)
        cells = np.concatenate([np.repeat(grid, len(wh), axis=0), np.tile(wh, (f * f, 1))], axis=1)
        banks.append(cells)
        shape.append((f, len(wh)))
    return DefaultBoxBank(np.concatenate(banks), tuple(shape))


# ---------------------------------------------------------------------------
# matching and offset coding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatchResult:
    labels: np.ndarray      # (A,) 0 = background, c + 1 for class c
    gt_index: np.ndarray    # (A,) matched ground truth, -1 for background
    offsets: np.ndarray     # (A, 4) encoded targets, zero for background
    forced: np.ndarray      # (A,) True where the best-anchor-per-GT rule assigned it

    @property
    def positives(self):
        return self.labels > 0

    @property
    def num_matched(self):
        return int(np.count_nonzero(self.labels))


def encode(anchors, gt, variances=DEFAULT_VARIANCES):
    """Center-form ground truth -> offsets relative to center-form anchors."""
    vc, vs = variances
    a = np.asarray(anchors, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    txy = (g[..., :2] - a[..., :2]) / (a[..., 2:] * vc)
    twh = np.log(g[..., 2:] / a[..., 2:]) / vs
    return np.concatenate([txy, twh], axis=-1)


def decode(anchors, offsets, variances=DEFAULT_VARIANCES):
    vc, vs = variances
    a = np.asarray(anchors, dtype=np.float64)
    t = np.asarray(offsets, dtype=np.float64)
    cxy = a[..., :2] + t[..., :2] * vc * a[..., 2:]
    wh = a[..., 2:] * np.exp(t[..., 2:] * vs)
    return np.concatenate([cxy, wh], axis=-1)


def decode_boxes(bank, offsets, variances=DEFAULT_VARIANCES):
    """Apply per-anchor offsets; returns center-form (A, 4)."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != bank.boxes.shape:
        raise ValueError(f"expected offsets of shape {bank.boxes.shape}, got {offsets.shape}")
    if not np.all(np.isfinite(offsets)):
        raise ValueError("offsets must be finite")
    return decode(bank.boxes, offsets, variances)


def match_and_encode(bank, gts, iou_threshold=0.5, variances=DEFAULT_VARIANCES, num_classes=None):
    """Assign ground truths to anchors and encode regression targets.

    ``gts`` is a sequence of ``(Box, class_id)`` with zero-based class ids.
    An anchor takes the ground truth it overlaps most if that IoU reaches the
    threshold; then every ground truth, in order, claims its best anchor not
    already claimed by an earlier ground truth. Ties go to the lowest index.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    n = len(bank)
    labels = np.zeros(n, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    forced = np.zeros(n, dtype=bool)
    offsets = np.zeros((n, 4))
    if not gts:
        return MatchResult(labels, gt_index, offsets, forced)
    if len(gts) > n:
        raise ValueError(f"{len(gts)} ground truths cannot each claim one of {n} anchors")
    classes = np.array([int(c) for _, c in gts])
    if num_classes is not None and (classes.min() < 0 or classes.max() >= num_classes):
        bad = classes[(classes < 0) | (classes >= num_classes)][0]
        raise ValueError(f"class id {bad} outside the configured {num_classes} classes")
    gt_boxes = np.array([b.as_array() for b, _ in gts])
    ious = iou_matrix(bank.corners, to_corners(gt_boxes))
    best = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(n), best]
    hit = best_iou >= iou_threshold
    gt_index[hit] = best[hit]
    for g in range(len(gts)):
        col = np.where(forced, -np.inf, ious[:, g])
        a = int(np.argmax(col))
        gt_index[a] = g
        forced[a] = True
    pos = gt_index >= 0
    labels[pos] = classes[gt_index[pos]] + 1
    offsets[pos] = encode(bank.boxes[pos], gt_boxes[gt_index[pos]], variances)
    return MatchResult(labels, gt_index, offsets, forced)


# ---------------------------------------------------------------------------
# non-maximum suppression
# ---------------------------------------------------------------------------

def score_order(scores):
    """Indices by descending score, lower index first on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def nms_arrays(corners, classes, scores, iou_threshold=0.5, top_k=200):
    """Per-class greedy NMS. Returns surviving indices, best score first."""
    corners = np.ascontiguousarray(corners, dtype=np.float64)
    classes = np.asarray(classes)
    scores = np.asarray(scores, dtype=np.float64)
    if top_k <= 0 or scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    kept = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        order = idx[score_order(scores[idx])]
        kept.append(_accel.nms_greedy(corners, order, float(iou_threshold)))
    kept = np.concatenate(kept)
    kept = kept[np.lexsort((kept, -scores[kept]))]
    return kept[:top_k]


def nms(detections, iou_threshold=0.5, top_k=200):
    """``detections``: list of ``(Box, class, score)``; returns the survivors."""
    if not detections:
        return []
    corners = np.array([d[0].corners() for d in detections])
    classes = np.array([d[1] for d in detections])
    scores = np.array([d[2] for d in detections], dtype=np.float64)
    return [detections[i] for i in nms_arrays(corners, classes, scores, iou_threshold, top_k)]


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

class LossOutput(NamedTuple):
    loss: float
    grad_conf: np.ndarray
    grad_loc: np.ndarray
    conf_loss: float
    loc_loss: float
    n_pos: int
    n_neg: int
    neg_mask: np.ndarray


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.clip(x, -1.0, 1.0)


def hard_negatives(conf, labels, neg_ratio):
    """Boolean mask of the background anchors with the highest confidence loss.

    ``floor(neg_ratio * max(1, positives))`` are kept, so a batch without
    positives still trains the background class.
    """
    neg = labels == 0
    n_pos = int(np.count_nonzero(~neg))
    bg_loss = -log_softmax(conf, axis=-1)[:, 0]
    n_neg = min(int(np.count_nonzero(neg)), int(math.floor(neg_ratio * max(1, n_pos))))
    masked = np.where(neg, bg_loss, -np.inf)
    order = score_order(masked)[:n_neg]
    mask = np.zeros(labels.shape, dtype=bool)
    mask[order] = True
    return mask


def multibox_loss(conf, loc, match, neg_ratio=3.0):
    """Softmax cross-entropy over positives and mined negatives plus smooth-L1
    on positive offsets, both divided by ``max(1, positives)``."""
    conf = np.asarray(conf, dtype=np.float64)
    loc = np.asarray(loc, dtype=np.float64)
    labels = match.labels
    if conf.shape[0] == 0:
        raise ValueError("multibox loss needs at least one anchor")
    if conf.shape[0] != loc.shape[0] or conf.shape[0] != labels.shape[0]:
        raise ValueError(f"anchor counts disagree: conf {conf.shape[0]}, loc {loc.shape[0]}, "
                         f"match {labels.shape[0]}")
    if conf.shape[1] < 2:
        raise ValueError("confidence needs background plus at least one class")
    pos = labels > 0
    n_pos = int(np.count_nonzero(pos))
    negs = hard_negatives(conf, labels, neg_ratio)
    sel = pos | negs
    denom = max(1, n_pos)

    logp = log_softmax(conf, axis=-1)
    picked = logp[np.arange(labels.size), labels]
    conf_loss = -float(np.sum(picked[sel]))
    diff = loc - match.offsets
    loc_loss = float(np.sum(smooth_l1(diff[pos])))

    grad_conf = softmax(conf, axis=-1)
    grad_conf[np.arange(labels.size), labels] -= 1.0
    grad_conf[~sel] = 0.0
    grad_conf /= denom
    grad_loc = np.zeros_like(loc)
    grad_loc[pos] = smooth_l1_grad(diff[pos]) / denom
    return LossOutput((conf_loss + loc_loss) / denom, grad_conf, grad_loc,
                      conf_loss / denom, loc_loss / denom, n_pos, int(np.count_nonzero(negs)), negs)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

DETECTION_COLUMNS = ("image_id", "class_name", "score", "xmin", "ymin", "xmax", "ymax")


def detections_to_csv(rows, class_names, image_size):
    """``rows``: iterable of ``(image_id, Detection)``. Corners are clamped to the
    image and scaled to pixels. ``image_size`` is ``(width, height)``."""
    width, height = image_size
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DETECTION_COLUMNS)
    for image_id, det in rows:
        x0, y0, x1, y1 = np.clip(det.box.corners(), 0.0, 1.0)
        writer.writerow([image_id, class_names[det.class_id], f"{det.score:.6f}",
                         f"{x0 * width:.2f}", f"{y0 * height:.2f}",
                         f"{x1 * width:.2f}", f"{y1 * height:.2f}"])
    return buf.getvalue()
