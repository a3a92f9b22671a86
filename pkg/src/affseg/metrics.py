"""Evaluation: panoptic quality, instance AP, semantic mIoU, and
patch-pool quality diagnostics.

Accumulators are filled scene by scene in a fixed order and reduced once at
the end, so results are independent of how scenes were distributed across
workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .masks import BinaryMask, iop_mask, iou_mask, union
from .scenes import GtInstance, Scene
from .inference import InferenceResult, PanopticMap

AP_IOU_THRESHOLDS = tuple(t / 100 for t in range(50, 100, 5))


def gt_panoptic_segments(gt: list[GtInstance]) -> list[tuple[BinaryMask, int, bool]]:
    """Ground-truth panoptic view: things stay individual, stuff regions of
    one class merge into a single segment."""
    out: list[tuple[BinaryMask, int, bool]] = []
    stuff: dict[int, list[BinaryMask]] = {}
    for g in gt:
        if g.is_thing:
            out.append((g.mask, g.class_id, True))
        else:
            stuff.setdefault(g.class_id, []).append(g.mask)
    for c in sorted(stuff):
        out.append((union(stuff[c]), c, False))
    return out


def gt_semantic_label(scene: Scene) -> np.ndarray:
    label = np.full((scene.height, scene.width), -1, dtype=np.int32)
    for g in scene.gt:
        label[g.mask.to_dense()] = g.class_id
    return label


# --- panoptic quality --------------------------------------------------------

@dataclass
class _ClassPQ:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def denom(self) -> float:
        return self.tp + 0.5 * self.fp + 0.5 * self.fn


class PQAccumulator:
    """Micro-averaged panoptic quality: counts pool over classes and scenes,
    so PQ = SQ * RQ holds exactly for the aggregate as well as per class.
    Segments match when same-class IoU exceeds 0.5 (at most one such pair
    can exist per segment)."""

    def __init__(self) -> None:
        self.per_class: dict[int, _ClassPQ] = {}

    def _cls(self, c: int) -> _ClassPQ:
        return self.per_class.setdefault(c, _ClassPQ())

    def add_scene(
        self,
        pred: PanopticMap,
        gt_segments: list[tuple[BinaryMask, int, bool]],
    ) -> None:
        pred_by_class: dict[int, list[np.ndarray]] = {}
        for seg in pred.segments:
            dense = pred.label == seg.segment_id
            pred_by_class.setdefault(seg.class_id, []).append(dense)
        gt_by_class: dict[int, list[np.ndarray]] = {}
        for mask, c, _ in gt_segments:
            gt_by_class.setdefault(c, []).append(mask.to_dense())

        for c in set(pred_by_class) | set(gt_by_class):
            preds = pred_by_class.get(c, [])
            gts = gt_by_class.get(c, [])
            stat = self._cls(c)
            matched_pred = set()
            matched_gt = set()
            for gi, gd in enumerate(gts):
                g_area = gd.sum()
                for pi, pd in enumerate(preds):
                    if pi in matched_pred:
                        continue
                    inter = np.logical_and(gd, pd).sum()
                    iou = inter / (g_area + pd.sum() - inter)
                    if iou > 0.5:
                        stat.tp += 1
                        stat.iou_sum += float(iou)
                        matched_pred.add(pi)
                        matched_gt.add(gi)
                        break
            stat.fp += len(preds) - len(matched_pred)
            stat.fn += len(gts) - len(matched_gt)

    def result(self) -> dict:
        total = _ClassPQ()
        per_class = {}
        for c in sorted(self.per_class):
            s = self.per_class[c]
            total.iou_sum += s.iou_sum
            total.tp += s.tp
            total.fp += s.fp
            total.fn += s.fn
            d = s.denom()
            per_class[c] = {
                "pq": 100.0 * s.iou_sum / d if d else 0.0,
                "sq": 100.0 * s.iou_sum / s.tp if s.tp else 0.0,
                "rq": 100.0 * s.tp / d if d else 0.0,
                "tp": s.tp, "fp": s.fp, "fn": s.fn,
            }
        d = total.denom()
        return {
            "pq": 100.0 * total.iou_sum / d if d else 0.0,
            "sq": 100.0 * total.iou_sum / total.tp if total.tp else 0.0,
            "rq": 100.0 * total.tp / d if d else 0.0,
            "per_class": per_class,
        }


# --- instance AP -----------------------------------------------------------------

class APAccumulator:
    """COCO-style mask AP: greedy score-ordered matching per IoU threshold,
    101-point interpolated precision, averaged over thresholds and over thing
    classes that have ground truth."""

    def __init__(self) -> None:
        # class -> list of (score, scene, order, ious-vector-to-gts)
        self._preds: dict[int, list[tuple[float, int, int, np.ndarray]]] = {}
        self._gt_count: dict[int, int] = {}
        self._scene = 0

    def add_scene(
        self,
        preds: list[tuple[BinaryMask, int, float]],
        gts: list[tuple[BinaryMask, int]],
    ) -> None:
        gt_by_class: dict[int, list[BinaryMask]] = {}
        for mask, c in gts:
            gt_by_class.setdefault(c, []).append(mask)
            self._gt_count[c] = self._gt_count.get(c, 0) + 1
        for order, (mask, c, score) in enumerate(preds):
            gt_masks = gt_by_class.get(c, [])
            ious = np.array([iou_mask(mask, g) for g in gt_masks])
            self._preds.setdefault(c, []).append((score, self._scene, order, ious))
        self._scene += 1

    @staticmethod
    def _ap_101(tp_flags: np.ndarray, n_gt: int) -> float:
        if n_gt == 0:
            return 0.0
        tp = np.cumsum(tp_flags)
        fp = np.cumsum(~tp_flags)
        recall = tp / n_gt
        precision = tp / np.maximum(tp + fp, 1)
        # precision envelope, then sample at 101 evenly spaced recalls
        for i in range(len(precision) - 2, -1, -1):
            precision[i] = max(precision[i], precision[i + 1])
        out = 0.0
        for r in np.arange(0, 101) / 100:
            idx = np.searchsorted(recall, r, side="left")
            out += precision[idx] if idx < len(precision) else 0.0
        return out / 101

    def result(self, thresholds: tuple[float, ...] = AP_IOU_THRESHOLDS) -> dict:
        classes = sorted(c for c, n in self._gt_count.items() if n > 0)
        if not classes:
            return {"ap": 0.0, "per_class": {}, "thresholds": list(thresholds)}
        per_class = {}
        for c in classes:
            entries = sorted(
                self._preds.get(c, []), key=lambda e: (-e[0], e[1], e[2])
            )
            n_gt = self._gt_count[c]
            ap_t = []
            for t in thresholds:
                # per-scene set of taken gts; preds processed in global order
                taken: dict[int, set] = {}
                flags = np.zeros(len(entries), dtype=bool)
                for i, (score, scene, order, ious) in enumerate(entries):
                    used = taken.setdefault(scene, set())
                    best, best_iou = -1, 0.0
                    for gi, iou in enumerate(ious):
                        if gi in used or iou < t:
                            continue
                        if iou > best_iou:
                            best, best_iou = gi, iou
                    if best >= 0:
                        used.add(best)
                        flags[i] = True
                ap_t.append(self._ap_101(flags, n_gt))
            per_class[c] = 100.0 * float(np.mean(ap_t))
        return {
            "ap": float(np.mean([per_class[c] for c in classes])),
            "per_class": per_class,
            "thresholds": list(thresholds),
        }


# --- semantic mIoU ----------------------------------------------------------------

class MIoUAccumulator:
    """Dataset-level mIoU: pixel intersections and unions pool over scenes;
    classes count if they appear in the ground truth or the prediction."""

    def __init__(self) -> None:
        self.inter: dict[int, int] = {}
        self.uni: dict[int, int] = {}

    def add_scene(self, pred_label: np.ndarray, gt_label: np.ndarray) -> None:
        classes = set(np.unique(gt_label).tolist()) | set(np.unique(pred_label).tolist())
        classes.discard(-1)
        for c in classes:
            p = pred_label == c
            g = gt_label == c
            self.inter[c] = self.inter.get(c, 0) + int(np.logical_and(p, g).sum())
            self.uni[c] = self.uni.get(c, 0) + int(np.logical_or(p, g).sum())

    def result(self) -> dict:
        per_class = {
            c: 100.0 * self.inter[c] / self.uni[c]
            for c in sorted(self.uni) if self.uni[c] > 0
        }
        miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
        return {"miou": miou, "per_class": per_class}


# --- proposal pool diagnostics ------------------------------------------------------

@dataclass
class DiagnosticsReport:
    miou: float
    miou_over_half: float
    miss_rate: dict[str, float]
    n_gt: int

    def as_dict(self) -> dict:
        return {
            "miou": self.miou,
            "miou_over_half": self.miou_over_half,
            "miss_rate": dict(self.miss_rate),
            "n_gt": self.n_gt,
        }


def proposal_diagnostics(
    scenes: list[Scene],
    tau: float = 0.8,
    merge_oracle: bool = False,
    levels: tuple[float, ...] = (0.25, 0.5, 0.75),
) -> DiagnosticsReport:
    """How well the raw patch pool could cover the ground truth.

    Per region: the best single-patch IoU; with merge_oracle also the union
    of patches mostly inside the region (mask IoP above tau). MR_x is the
    fraction of regions whose best candidate stays at IoU <= x.
    """
    best: list[float] = []
    for sc in scenes:
        for g in sc.gt:
            b = 0.0
            inside: list[BinaryMask] = []
            for p in sc.patches:
                b = max(b, iou_mask(p, g.mask))
                if merge_oracle and iop_mask(p, g.mask) > tau:
                    inside.append(p)
            if merge_oracle and inside:
                b = max(b, iou_mask(union(inside), g.mask))
            best.append(b)
    arr = np.array(best)
    over = arr[arr > 0.5]
    return DiagnosticsReport(
        miou=100.0 * float(arr.mean()) if len(arr) else 0.0,
        miou_over_half=100.0 * float(over.mean()) if len(over) else 0.0,
        miss_rate={str(x): 100.0 * float((arr <= x).mean()) if len(arr) else 0.0
                   for x in levels},
        n_gt=len(arr),
    )


# --- per-scene contribution ---------------------------------------------------------

def add_scene_to_accumulators(
    result: InferenceResult,
    scene: Scene,
    pq: PQAccumulator,
    ap: APAccumulator,
    miou: MIoUAccumulator,
) -> None:
    """One evaluated scene feeds all three metrics. Class ids in `result`
    must already be table class ids (evaluation runs with the full
    vocabulary)."""
    pq.add_scene(result.panoptic, gt_panoptic_segments(scene.gt))
    ap.add_scene(
        [(p.mask, p.class_id, p.score) for p in result.instances],
        [(g.mask, g.class_id) for g in scene.gt if g.is_thing],
    )
    miou.add_scene(result.semantic_label, gt_semantic_label(scene))
