"""Single-stage detection head, its loss, decoding and a COCO-style evaluator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .backbone import HRFuser, ModelConfig, component_rng
from .layers import Conv2d, Module
from .sensing import Box2D, iou
from .tensor import ShapeError, Tensor

PRIOR_PROB = 0.01
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
MAX_LOG_DISTANCE = 8.0
MEDIUM_AREA = (32.0**2, 96.0**2)
LARGE_AREA = (96.0**2, math.inf)
COCO_THRESHOLDS = tuple(np.round(0.5 + 0.05 * np.arange(10), 2))
RECALL_LEVELS = np.arange(101) / 100.0

__all__ = [
    "Box2D", "iou", "Head", "HeadOutput", "Detector", "assign_targets", "compute_loss", "decode",
    "nms", "average_precision", "EvalResult", "write_boxes", "read_boxes",
]


@dataclass
class HeadOutput:
    cls: Tensor  # (B, C, H, W) logits
    box: Tensor  # (B, 4, H, W) left/top/right/bottom distances in pixels
    ctr: Tensor  # (B, 1, H, W) centerness logits
    stride: int

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.cls.shape[2:]
        ys = (np.arange(h) + 0.5) * self.stride
        xs = (np.arange(w) + 0.5) * self.stride
        return np.meshgrid(xs, ys)


class Head(Module):
    """Two conv towers (class, box) of two 3x3 conv + ReLU layers each.

    Centerness is predicted from the box tower.  Distances are
    ``stride * exp(raw)``, so they are always positive.
    """

    _scope_name = "@head"

    def __init__(self, rng, cin: int, num_classes: int, width: int | None = None, stride: int = 4):
        super().__init__()
        width = width or cin
        self.cin, self.stride = cin, stride
        self.cls_tower = [Conv2d(rng, cin, width, 3), Conv2d(rng, width, width, 3)]
        self.box_tower = [Conv2d(rng, cin, width, 3), Conv2d(rng, width, width, 3)]
        self.cls_out = Conv2d(rng, width, num_classes, 3)
        self.box_out = Conv2d(rng, width, 4, 3)
        self.ctr_out = Conv2d(rng, width, 1, 3)
        for conv in (*self.cls_tower, *self.box_tower, self.cls_out, self.box_out, self.ctr_out):
            conv.weight.data[...] *= 0.1
        self.cls_out.bias.data[...] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)

    def forward(self, x: Tensor) -> HeadOutput:
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ShapeError(f"head expects (B, {self.cin}, H, W), got {x.shape}")
        c = x
        for conv in self.cls_tower:
            c = T.relu(conv(c))
        b = x
        for conv in self.box_tower:
            b = T.relu(conv(b))
        raw = T.clip(self.box_out(b), -MAX_LOG_DISTANCE, MAX_LOG_DISTANCE)
        return HeadOutput(self.cls_out(c), T.exp(raw) * float(self.stride), self.ctr_out(b), self.stride)


class Detector(Module):
    """Backbone, neck and head; ``forward`` maps modality inputs to a :class:`HeadOutput`."""

    _scope_name = "Detector"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = HRFuser(cfg)
        self.head = Head(component_rng(cfg.seed, "head"), cfg.neck_channels, cfg.num_classes)

    def forward(self, inputs: Mapping[str, Tensor]) -> HeadOutput:
        return self.head(self.backbone(inputs))


# -- targets and loss ------------------------------------------------------------

@dataclass
class Targets:
    labels: np.ndarray  # (B, C, H, W) one-hot
    positive: np.ndarray  # (B, H, W) bool
    distances: np.ndarray  # (B, 4, H, W) l, t, r, b (positives only)
    centerness: np.ndarray  # (B, H, W)


def assign_targets(boxes: Sequence[Sequence[Box2D]], shape: tuple[int, int], stride: int, num_classes: int) -> Targets:
    """A pixel is positive for the boxes containing its center; the smallest such box wins (ties: first box)."""
    b, (h, w) = len(boxes), shape
    labels = np.zeros((b, num_classes, h, w))
    positive = np.zeros((b, h, w), dtype=bool)
    dist = np.zeros((b, 4, h, w))
    ctr = np.zeros((b, h, w))
    xs = (np.arange(w) + 0.5) * stride
    ys = (np.arange(h) + 0.5) * stride
    cx, cy = np.meshgrid(xs, ys)
    for i, image_boxes in enumerate(boxes):
        best_area = np.full((h, w), np.inf)
        for box in image_boxes:
            inside = (cx > box.x_min) & (cx < box.x_max) & (cy > box.y_min) & (cy < box.y_max)
            take = inside & (box.area < best_area)
            if not take.any():
                continue
            best_area[take] = box.area
            positive[i][take] = True
            labels[i][:, take] = 0.0
            labels[i, box.label][take] = 1.0
            dist[i, 0][take] = cx[take] - box.x_min
            dist[i, 1][take] = cy[take] - box.y_min
            dist[i, 2][take] = box.x_max - cx[take]
            dist[i, 3][take] = box.y_max - cy[take]
        l, t, r, bt = dist[i]
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.sqrt((np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, bt) / np.maximum(t, bt)))
        ctr[i] = np.where(positive[i], c, 0.0)
    return Targets(labels, positive, dist, ctr)


def _softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for either sign."""
    absx = T.maximum(x, -x)
    return T.relu(x) + T.log(T.exp(-absx) + 1.0)


def focal_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Summed sigmoid focal loss."""
    t = Tensor(labels)
    p = T.sigmoid(logits)
    log_p = -_softplus(-logits)
    log_q = -_softplus(logits)
    pos = (1.0 - p) ** FOCAL_GAMMA * log_p * t * FOCAL_ALPHA
    neg = p**FOCAL_GAMMA * log_q * (1.0 - t) * (1.0 - FOCAL_ALPHA)
    return -(pos + neg).sum()


def giou_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Summed 1 - GIoU between (N, 4) l/t/r/b distance sets sharing a center."""
    cols = [T.getitem(pred, (slice(None), k)) for k in range(4)]
    l, t, r, b = cols
    lg, tg, rg, bg = (Tensor(target[:, k]) for k in range(4))
    area_p = (l + r) * (t + b)
    area_g = Tensor((target[:, 0] + target[:, 2]) * (target[:, 1] + target[:, 3]))
    inter = (T.minimum(l, lg) + T.minimum(r, rg)) * (T.minimum(t, tg) + T.minimum(b, bg))
    union = area_p + area_g - inter
    enclose = (T.maximum(l, lg) + T.maximum(r, rg)) * (T.maximum(t, tg) + T.maximum(b, bg))
    giou = inter / union - (enclose - union) / enclose
    return (1.0 - giou).sum()


def centerness_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Binary cross-entropy minus the target's own entropy (zero at a perfect prediction)."""
    t = Tensor(target)
    bce = _softplus(logits) - logits * t
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = -(np.where(target > 0, target * np.log(target), 0.0)
                    + np.where(target < 1, (1 - target) * np.log1p(-target), 0.0))
    return (bce - Tensor(entropy)).sum()


def compute_loss(out: HeadOutput, boxes: Sequence[Sequence[Box2D]]) -> Tensor:
    """Focal + GIoU + centerness, summed and divided by the positive count (at least 1)."""
    bsz, c, h, w = out.cls.shape
    if len(boxes) != bsz:
        raise ShapeError(f"{len(boxes)} target lists for a batch of {bsz}")
    tg = assign_targets(boxes, (h, w), out.stride, c)
    num_pos = max(int(tg.positive.sum()), 1)
    loss = focal_loss(out.cls, tg.labels)
    idx = np.flatnonzero(tg.positive)
    if len(idx):
        box_flat = T.transpose(out.box, (0, 2, 3, 1)).reshape(bsz * h * w, 4)
        pred = T.take(box_flat, idx, axis=0)
        target = tg.distances.transpose(0, 2, 3, 1).reshape(-1, 4)[idx]
        ctr_logits = T.take(out.ctr.reshape(bsz * h * w), idx, axis=0)
        loss = loss + giou_loss(pred, target) + centerness_loss(ctr_logits, tg.centerness.reshape(-1)[idx])
    return loss * (1.0 / num_pos)


# -- decoding ---------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) corner arrays."""
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy suppression; candidates are visited by descending score, ties by lower index.

    A box is suppressed when its IoU with a kept box exceeds ``iou_threshold``.
    """
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = _iou_matrix(boxes[order], boxes[order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(int(order[i]))
        alive &= ~(ious[i] > iou_threshold)
    return keep


def decode(out: HeadOutput, score_thresh: float = 0.05, nms_iou: float = 0.5, max_dets: int = 100) -> list[list[Box2D]]:
    """Per-image detections: score = class prob x centerness, per-class NMS."""
    if not (0 <= score_thresh <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    cls = _sigmoid(out.cls.data)
    ctr = _sigmoid(out.ctr.data[:, 0])
    dist = out.box.data
    cx, cy = out.centers()
    results = []
    for i in range(cls.shape[0]):
        corners = np.stack([cx - dist[i, 0], cy - dist[i, 1], cx + dist[i, 2], cy + dist[i, 3]], axis=-1).reshape(-1, 4)
        dets = []
        for c in range(cls.shape[1]):
            scores = (cls[i, c] * ctr[i]).reshape(-1)
            cand = np.flatnonzero(scores > score_thresh)
            if len(cand) == 0:
                continue
            for k in nms(corners[cand], scores[cand], nms_iou):
                p = cand[k]
                dets.append((scores[p], p, c))
        dets.sort(key=lambda d: (-d[0], d[1], d[2]))
        results.append([Box2D(*map(float, corners[p]), label=c, score=float(s)) for s, p, c in dets[:max_dets]])
    return results


# -- evaluation ----------------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    ap_m: float
    ap_l: float
    ar: float

    def to_dict(self) -> dict:
        return asdict(self)


def _match_image(dets: list[Box2D], gts: list[Box2D], ious: list[list[float]], thr: float, area: tuple[float, float]):
    """COCO-style greedy matching for one image and class.

    ``ious[d][g]`` is the precomputed overlap.  A detection takes the
    unmatched in-range ground truth of highest IoU (earliest on ties), and
    only falls back to an out-of-range one when no in-range candidate
    exists.  Returns per-detection (matched, ignored) flags in score order
    and the number of in-range ground truths.
    """
    gt_ignore = [not (area[0] <= g.area < area[1]) for g in gts]
    free = list(range(len(gts)))
    matched, ignored = [], []
    for d, row in zip(dets, ious):
        best = -1
        if free:
            best_iou, best_ig = thr, True
            for g in free:
                o = row[g]
                if o < thr:
                    continue
                ig = gt_ignore[g]
                if best == -1 or (best_ig and not ig) or (ig == best_ig and o > best_iou):
                    best, best_iou, best_ig = g, o, ig
        if best > -1:
            free.remove(best)
            matched.append(True)
            ignored.append(gt_ignore[best])
        else:
            matched.append(False)
            ignored.append(not (area[0] <= d.area < area[1]))
    return matched, ignored, gt_ignore.count(False)


def interpolated_precision(tp: np.ndarray, fp: np.ndarray, num_gt: int) -> tuple[float, float]:
    """101-point interpolated AP and final recall of a ranked tp/fp list."""
    tp_sum, fp_sum = np.cumsum(tp), np.cumsum(fp)
    recall = tp_sum / num_gt
    precision = tp_sum / np.maximum(tp_sum + fp_sum, np.finfo(np.float64).eps)
    # make precision non-increasing from the right, then sample at the recall levels
    if len(precision) == 0:
        return 0.0, 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_LEVELS, side="left")
    sampled = np.zeros(len(RECALL_LEVELS))
    hit = idx < len(envelope)
    sampled[hit] = envelope[idx[hit]]
    return float(np.mean(sampled)), float(recall[-1])


def _prepare(dets, gts, classes, max_dets):
    """Per class, per image: top-scoring detections, ground truths and their IoU table."""
    prepared = {}
    for c in classes:
        rows = []
        for image_dets, image_gts in zip(dets, gts):
            d = sorted((b for b in image_dets if b.label == c), key=lambda b: -b.score)[:max_dets]
            g = [b for b in image_gts if b.label == c]
            if d and g:
                table = _iou_matrix(np.array([b.as_array()[:4] for b in d]), np.array([b.as_array()[:4] for b in g]))
                ious = table.tolist()
            else:
                ious = [[] for _ in d]
            rows.append((d, g, ious))
        prepared[c] = rows
    return prepared


def _evaluate(prepared, thr, area):
    aps, recalls = [], []
    for rows in prepared.values():
        scores, tps = [], []
        num_gt = 0
        for d, g, ious in rows:
            matched, ignored, n = _match_image(d, g, ious, thr, area)
            num_gt += n
            for box, m, ig in zip(d, matched, ignored):
                if not ig:
                    scores.append(box.score)
                    tps.append(m)
        if num_gt == 0:
            continue
        order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
        tp = np.asarray(tps, dtype=np.float64)[order]
        ap, rec = interpolated_precision(tp, 1.0 - tp, num_gt)
        aps.append(ap)
        recalls.append(rec)
    return aps, recalls


def average_precision(
    detections: Sequence[Sequence[Box2D]],
    ground_truths: Sequence[Sequence[Box2D]],
    iou_thresholds: Iterable[float] = COCO_THRESHOLDS,
    max_dets: int = 100,
) -> EvalResult:
    """COCO-style metrics over a set of images (lists are aligned per image).

    AP is averaged over classes with ground truth and over thresholds.
    AP_m / AP_l restrict ground truth (and unmatched detections) to the
    medium / large area ranges.  AR is the mean best recall with up to
    ``max_dets`` detections per image and class.
    """
    if len(detections) != len(ground_truths):
        raise ValueError("detections and ground truths must cover the same images")
    thresholds = [float(t) for t in iou_thresholds]
    classes = sorted({b.label for image in ground_truths for b in image})
    prepared = _prepare(detections, ground_truths, classes, max_dets)
    everything = (0.0, math.inf)

    def mean_ap(thrs, area):
        vals = []
        for t in thrs:
            aps, _ = _evaluate(prepared, t, area)
            vals += aps
        return float(np.mean(vals)) if vals else 0.0

    recall_vals = []
    for t in thresholds:
        _, recs = _evaluate(prepared, t, everything)
        recall_vals += recs
    return EvalResult(
        ap=mean_ap(thresholds, everything),
        ap50=mean_ap([0.5], everything),
        ap75=mean_ap([0.75], everything),
        ap_m=mean_ap(thresholds, MEDIUM_AREA),
        ap_l=mean_ap(thresholds, LARGE_AREA),
        ar=float(np.mean(recall_vals)) if recall_vals else 0.0,
    )


# -- text format -------------------------------------------------------------------------

def write_boxes(path, boxes_per_image: Sequence[Sequence[Box2D]], image_ids: Sequence | None = None) -> None:
    """One box per line: ``image_id class score x_min y_min x_max y_max``; ground truth has score ``-``."""
    ids = list(image_ids) if image_ids is not None else list(range(len(boxes_per_image)))
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, boxes in zip(ids, boxes_per_image):
            for b in boxes:
                score = "-" if b.score is None else repr(float(b.score))
                fh.write(f"{image_id} {b.label} {score} {b.x_min!r} {b.y_min!r} {b.x_max!r} {b.y_max!r}\n")


def read_boxes(path) -> dict[str, list[Box2D]]:
    out: dict[str, list[Box2D]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            image_id, label, score = parts[0], int(parts[1]), parts[2]
            coords = [float(v) for v in parts[3:]]
            out.setdefault(image_id, []).append(
                Box2D(*coords, label=label, score=None if score == "-" else float(score))
            )
    return out
