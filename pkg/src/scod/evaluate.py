"""Per-class average precision and mAP in the VOC style.

Boxes are corner-form ``(xmin, ymin, xmax, ymax)`` in any consistent unit.
Overlap is the continuous IoU (no +1 pixel convention).
"""

from dataclasses import dataclass, field, asdict
import csv
import io
import json

import numpy as np

from .multibox import iou_matrix

PROTOCOLS = ("allpoint", "11point")


@dataclass(frozen=True)
class ClassResult:
    name: str
    ap: float | None        # None when the class has no ground truth
    tp: int
    fp: int
    n_gt: int


@dataclass
class EvalReport:
    classes: list
    map: float
    protocol: str
    iou_threshold: float
    excluded: list = field(default_factory=list)

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "iou_threshold": self.iou_threshold,
            "map": self.map,
            "classes": [asdict(c) for c in self.classes],
            "excluded": list(self.excluded),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self):
        width = max([len("Overall")] + [len(c.name) for c in self.classes])
        lines = [f"{'Class':<{width}}  {'AP (%)':>7}", "-" * (width + 9)]
        for c in self.classes:
            ap = "excl." if c.ap is None else f"{100 * c.ap:.2f}"
            lines.append(f"{c.name:<{width}}  {ap:>7}")
        lines.append("-" * (width + 9))
        lines.append(f"{'Overall':<{width}}  {100 * self.map:>7.2f}")
        if self.excluded:
            lines.append(f"excluded (no ground truth): {', '.join(self.excluded)}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "ap", "tp", "fp", "n_gt"])
        for c in self.classes:
            w.writerow([c.name, "" if c.ap is None else repr(c.ap), c.tp, c.fp, c.n_gt])
        w.writerow(["Overall", repr(self.map), "", "", ""])
        return buf.getvalue()


def _integrate(recall, precision, protocol):
    if protocol == "allpoint":
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
        return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    if protocol == "11point":
        total = 0.0
        # k / 10 keeps thresholds such as 0.3 exact, so a recall of 3/10 reaches them
        for t in np.arange(11) / 10.0:
            above = precision[recall >= t]
            total += above.max() if above.size else 0.0
        return float(total / 11.0)
    raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")


def evaluate_class(detections, gts, iou_threshold=0.5, protocol="allpoint", difficult=None, name=""):
    """Match one class's detections against its ground truth.

    ``detections`` is a sequence of ``(image_id, score, box)``; ``gts`` maps
    image_id to an (n, 4) array of boxes and ``difficult`` optionally to a
    boolean array of the same length. A detection whose best unmatched ground
    truth is difficult counts neither as TP nor FP.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    difficult = difficult or {}
    gt_boxes = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in gts.items()}
    hard = {k: np.asarray(difficult.get(k, np.zeros(len(v), bool)), dtype=bool) for k, v in gt_boxes.items()}
    n_gt = int(sum(np.count_nonzero(~h) for h in hard.values()))
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_boxes.items()}

    scores = np.array([float(d[1]) for d in detections])
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    counted = np.ones(len(order), dtype=bool)
    for rank, i in enumerate(order):
        image_id, _, box = detections[i]
        cand = gt_boxes.get(image_id)
        if cand is None or len(cand) == 0:
            fp[rank] = 1
            continue
        ious = iou_matrix(np.asarray(box, dtype=np.float64)[None], cand)[0]
        ious[used[image_id]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            if hard[image_id][j]:
                counted[rank] = False
            else:
                used[image_id][j] = True
                tp[rank] = 1
        else:
            fp[rank] = 1
    tp, fp = tp[counted], fp[counted]
    if n_gt == 0:
        return ClassResult(name, None, int(tp.sum()), int(fp.sum()), 0)
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    ap = _integrate(recall, precision, protocol) if len(tp) else 0.0
    return ClassResult(name, ap, int(tp.sum()), int(fp.sum()), n_gt)


def average_precision(detections, gts, iou_threshold=0.5, protocol="allpoint", difficult=None):
    """AP for one class, or None when there is no ground truth (undefined)."""
    return evaluate_class(detections, gts, iou_threshold, protocol, difficult).ap


def mean_average_precision(per_class_detections, per_class_gts, iou_threshold=0.5, protocol="allpoint",
                           per_class_difficult=None):
    """Evaluate every class and average the defined APs.

    Both mappings are keyed by class name; rows are ordered by class name.
    """
    names = sorted(set(per_class_gts) | set(per_class_detections))
    difficult = per_class_difficult or {}
    rows = [evaluate_class(per_class_detections.get(n, []), per_class_gts.get(n, {}), iou_threshold, protocol,
                           difficult.get(n), n) for n in names]
    defined = [r.ap for r in rows if r.ap is not None]
    if not defined:
        raise ValueError("no class has any ground truth; mAP is undefined")
    excluded = [r.name for r in rows if r.ap is None]
    return EvalReport(rows, float(np.mean(defined)), protocol, iou_threshold, excluded)


def group_by_class(annotations, detections, class_names, keep_difficult=False):
    """Arrange ground truth and detections for :func:`mean_average_precision`.

    ``annotations`` are pixel-space records; ``detections[i]`` is the list of
    ``Detection`` (normalised boxes) for ``annotations[i]``. Everything is
    compared in normalised coordinates. Difficult objects are ignored unless
    ``keep_difficult``.
    """
    gts = {n: {} for n in class_names}
    hard = {n: {} for n in class_names}
    dets = {n: [] for n in class_names}
    for ann, found in zip(annotations, detections):
        w, h = ann.width, ann.height
        for n in class_names:
            gts[n][ann.image_id] = []
            hard[n][ann.image_id] = []
        for obj in ann.objects:
            x0, y0, x1, y1 = obj.box
            gts[obj.class_name][ann.image_id].append((x0 / w, y0 / h, x1 / w, y1 / h))
            hard[obj.class_name][ann.image_id].append(obj.difficult and not keep_difficult)
        for d in found:
            dets[class_names[d.class_id]].append((ann.image_id, d.score, d.box.corners()))
    gts = {n: {k: np.array(v, dtype=np.float64).reshape(-1, 4) for k, v in g.items()} for n, g in gts.items()}
    hard = {n: {k: np.array(v, dtype=bool) for k, v in g.items()} for n, g in hard.items()}
    return dets, gts, hard


def evaluate_model(model, samples, annotations, iou_threshold=0.5, protocol="allpoint", conf_threshold=0.01,
                   nms_threshold=0.45, top_k=200, keep_difficult=False):
    detections = [model.detect(s.image, conf_threshold, nms_threshold, top_k) for s in samples]
    dets, gts, hard = group_by_class(annotations, detections, list(model.config.classes), keep_difficult)
    return mean_average_precision(dets, gts, iou_threshold, protocol, hard)
