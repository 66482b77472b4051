"""Detection evaluation: IoU, greedy NMS, all-points AP and subset mAP."""

from __future__ import annotations

import csv
import enum
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import EmptySubsetError, InvariantError
from .model import Box, CategoryRegistry, Detection, GroundTruthSet

log = logging.getLogger(__name__)


class Subset(str, enum.Enum):
    STRONG = "strong"
    WEAK = "weak"
    ALL = "all"


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    nms_iou: float = 0.3
    ap_mode: str = "all-points"

    def __post_init__(self):
        if not (0 < self.iou_threshold < 1 and 0 < self.nms_iou < 1):
            raise InvariantError("IoU thresholds must lie in (0, 1)")
        if self.ap_mode != "all-points":
            raise InvariantError(f"unsupported AP mode {self.ap_mode!r}")


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def to_corners(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = b[:, 2:] / 2.0
    return np.hstack([b[:, :2] - half, b[:, :2] + half])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of center-format box arrays (n, 4) and (m, 4)."""
    A, B = to_corners(a), to_corners(b)
    iw = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    ih = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> np.ndarray:
    """Greedy NMS on one group; returns kept indices in processing order.

    Equal scores are processed in input order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    ov = iou_matrix(boxes, boxes)
    suppressed = np.zeros(scores.size, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ov[i] > thresh
    return np.array(keep, dtype=int)


def nms(dets: Sequence[Detection], nms_iou: float = 0.3) -> list[Detection]:
    """Per-image, per-category greedy suppression; survivors keep their input order."""
    groups: dict[tuple[str, int], list[int]] = {}
    for n, d in enumerate(dets):
        groups.setdefault((d.image_id, d.category), []).append(n)
    kept = []
    for idx in groups.values():
        boxes = np.array([dets[i].box.as_array() for i in idx])
        scores = np.array([dets[i].score for i in idx])
        kept.extend(idx[k] for k in nms_indices(boxes, scores, nms_iou))
    return [dets[i] for i in sorted(kept)]


def match_detections(
    image_ids: Sequence[str],
    scores: np.ndarray,
    boxes: np.ndarray,
    gt_boxes: Mapping[str, np.ndarray],
    iou_threshold: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching in descending score order.

    Returns (order, is_tp) where ``is_tp[n]`` belongs to detection
    ``order[n]``.  A detection takes the highest-IoU ground truth that is
    still unmatched; it is a false positive when that IoU is below the
    threshold or nothing is left to match.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gt_boxes.items()}
    is_tp = np.zeros(scores.size, dtype=bool)
    for n, i in enumerate(order):
        g = gt_boxes.get(image_ids[i])
        if g is None or len(g) == 0:
            continue
        ov = iou_matrix(boxes[i : i + 1], g)[0]
        ov[taken[image_ids[i]]] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= iou_threshold:
            taken[image_ids[i]][j] = True
            is_tp[n] = True
    return order, is_tp


def ap_from_flags(is_tp: np.ndarray, n_gt: int) -> float:
    """Area under the monotone precision envelope for a ranked TP/FP sequence."""
    if n_gt == 0:
        return 0.0
    if is_tp.size == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


@dataclass(frozen=True)
class ClassAP:
    category: int
    ap: float
    n_gt: int
    n_det: int

    @property
    def empty(self) -> bool:
        """No ground truth and no detections: AP is 0 by convention and excluded from means."""
        return self.n_gt == 0 and self.n_det == 0


def _category_inputs(dets: Sequence[Detection], gts: GroundTruthSet, category: int):
    mine = [d for d in dets if d.category == category]
    g = {k: np.array([b.as_array() for b in v]) for k, v in gts.for_category(category).items()}
    return mine, g


def class_ap(
    dets: Sequence[Detection], gts: GroundTruthSet, category: int, iou_threshold: float = 0.5
) -> ClassAP:
    mine, g = _category_inputs(dets, gts, category)
    n_gt = sum(len(v) for v in g.values())
    if not mine:
        return ClassAP(category, 0.0, n_gt, 0)
    order, is_tp = match_detections(
        [d.image_id for d in mine],
        np.array([d.score for d in mine]),
        np.array([d.box.as_array() for d in mine]),
        g,
        iou_threshold,
    )
    return ClassAP(category, ap_from_flags(is_tp, n_gt), n_gt, len(mine))


def average_precision(
    dets: Sequence[Detection], gts: GroundTruthSet, category: int, iou_threshold: float = 0.5
) -> float:
    """All-points AP of ``category`` (detections of other categories are ignored)."""
    return class_ap(dets, gts, category, iou_threshold).ap


def subset_ids(registry: CategoryRegistry, subset: Subset | str) -> tuple[int, ...]:
    subset = Subset(subset)
    if subset is Subset.STRONG:
        return registry.strong_ids
    if subset is Subset.WEAK:
        return registry.weak_ids
    return tuple(range(registry.K))


def mean_ap(aps: Mapping[int, float | ClassAP], registry: CategoryRegistry, subset: Subset | str) -> float:
    """Unweighted mean AP over the subset; empty-evaluation categories are skipped."""
    vals = []
    for cid in subset_ids(registry, subset):
        if cid not in aps:
            continue
        a = aps[cid]
        if isinstance(a, ClassAP):
            if a.empty:
                log.info("category %d has neither detections nor ground truth; skipped", cid)
                continue
            a = a.ap
        vals.append(float(a))
    if not vals:
        raise EmptySubsetError(f"no evaluable categories in subset {Subset(subset).value!r}")
    return float(np.mean(vals))


@dataclass(frozen=True)
class EvalReport:
    per_class: dict[int, ClassAP]
    map_strong: float | None
    map_weak: float | None
    map_all: float | None


def evaluate(
    dets: Sequence[Detection], gts: GroundTruthSet, registry: CategoryRegistry, cfg: EvalConfig | None = None
) -> EvalReport:
    cfg = cfg or EvalConfig()
    per_class = {cid: class_ap(dets, gts, cid, cfg.iou_threshold) for cid in range(registry.K)}

    def safe(subset):
        try:
            return mean_ap(per_class, registry, subset)
        except EmptySubsetError:
            return None

    return EvalReport(per_class, safe(Subset.STRONG), safe(Subset.WEAK), safe(Subset.ALL))


def report_rows(report: EvalReport, registry: CategoryRegistry) -> list[list[str]]:
    from .io import fmt

    rows = [["category_id", "subset", "AP"]]
    for cid in sorted(report.per_class):
        split = registry[cid].split.value
        rows.append([str(cid), split, fmt(report.per_class[cid].ap)])
    for name, val in (("strong", report.map_strong), ("weak", report.map_weak), ("all", report.map_all)):
        rows.append([f"mAP_{name}", name, "nan" if val is None else fmt(val)])
    return rows


def write_report(report: EvalReport, registry: CategoryRegistry, path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(report_rows(report, registry))
