"""Training targets: patch-to-ground-truth matching, assignment, losses.

A binary match matrix G marks which patches belong to which ground-truth
region: entry (k, n) is set when both the box and mask intersection-over-patch
ratios clear a threshold; regions that end up with no patch fall back to any
patch overlapping them at IoU >= 0.5. Semantic queries are supervised against
the per-class union region, instance queries through Hungarian assignment
under a five-term cost, and optional denoising queries bypass assignment and
are supervised directly against their source region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .masks import BBox, BinaryMask, bbox_of, giou_box, iop_box, iop_mask, iou_mask, merge_bboxes, union
from .scenes import GtInstance

LOG_FLOOR = 1e-12  # probability clamp inside focal logs


# --- patch-to-region match matrix -------------------------------------------

def region_match_row(
    region_mask: BinaryMask,
    region_box: BBox,
    patches: list[BinaryMask],
    patch_boxes: list[BBox],
    tau: float = 0.8,
) -> np.ndarray:
    """One row of the match matrix for an arbitrary target region.

    A patch belongs to the region when min(box IoP, mask IoP) > tau, both
    ratios over the patch. If nothing qualifies, patches overlapping the
    region at IoU >= 0.5 are taken instead, so low-quality proposals still
    receive supervision.
    """
    n = len(patches)
    row = np.zeros(n)
    for i in range(n):
        if iop_box(patch_boxes[i], region_box) > tau and iop_mask(patches[i], region_mask) > tau:
            row[i] = 1.0
    if not row.any():
        for i in range(n):
            if iou_mask(patches[i], region_mask) >= 0.5:
                row[i] = 1.0
    return row


def build_match_matrix(
    gt: list[GtInstance],
    patches: list[BinaryMask],
    patch_boxes: list[BBox] | None = None,
    tau: float = 0.8,
) -> np.ndarray:
    """(K, N) binary matrix: ground-truth region k owns patch n. Rows are
    independent; one patch may be claimed by several regions."""
    if patch_boxes is None:
        patch_boxes = [bbox_of(p) for p in patches]
    rows = []
    for inst in gt:
        rows.append(region_match_row(inst.mask, bbox_of(inst.mask), patches, patch_boxes, tau))
    return np.stack(rows) if rows else np.zeros((0, len(patches)))


def semantic_union_rows(
    gt: list[GtInstance],
    patches: list[BinaryMask],
    n_classes: int,
    patch_boxes: list[BBox] | None = None,
    tau: float = 0.8,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class supervision rows against the union of that class's regions.

    Returns (rows, present): rows is (C, N); present marks classes with at
    least one ground-truth region in the scene. Absent classes keep zero rows.
    """
    if patch_boxes is None:
        patch_boxes = [bbox_of(p) for p in patches]
    rows = np.zeros((n_classes, len(patches)))
    present = np.zeros(n_classes, dtype=bool)
    for c in range(n_classes):
        masks = [g.mask for g in gt if g.class_id == c]
        if not masks:
            continue
        present[c] = True
        region = union(masks)
        rows[c] = region_match_row(region, bbox_of(region), patches, patch_boxes, tau)
    return rows, present


# --- assignment ---------------------------------------------------------------

def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment of min(R, S) row-column pairs.

    Ties between optimal assignments break deterministically: the assignment
    whose (row, column) pair list is lexicographically smallest wins, so lower
    rows are matched first and each takes the lowest workable column. Found by
    fixing rows in order and keeping the first column that preserves the
    optimal total (verified by re-solving the remainder).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    r_n, s_n = cost.shape
    if r_n == 0 or s_n == 0:
        return []
    ri, ci = linear_sum_assignment(cost)
    vstar = float(cost[ri, ci].sum())
    tol = 1e-9 * max(1.0, abs(vstar))

    pairs: list[tuple[int, int]] = []
    avail = list(range(s_n))
    fixed = 0.0
    want = min(r_n, s_n)
    row_min = cost.min(axis=1)
    for r in range(r_n):
        if len(pairs) == want:
            break
        rest_rows = list(range(r + 1, r_n))
        k_rest = want - len(pairs) - 1
        # lower bound for the unmatched remainder: sum of the smallest
        # k_rest unconstrained row minima among later rows
        lb_rest = float(np.sort(row_min[rest_rows])[:k_rest].sum()) if k_rest else 0.0
        chosen = -1
        for c in avail:
            if fixed + cost[r, c] + lb_rest > vstar + tol:
                continue
            cols = [x for x in avail if x != c]
            if k_rest:
                sub = cost[np.ix_(rest_rows, cols)]
                sri, sci = linear_sum_assignment(sub)
                rest = float(sub[sri, sci].sum())
            else:
                rest = 0.0
            if fixed + cost[r, c] + rest <= vstar + tol:
                chosen = c
                break
        if chosen < 0:
            # row r stays unmatched; only possible with more rows than columns
            if r_n <= s_n:
                raise RuntimeError("assignment refinement lost the optimum")
            continue
        pairs.append((r, chosen))
        avail.remove(chosen)
        fixed += cost[r, chosen]
    return pairs


# --- focal pieces (plain numpy, used by the matching cost) --------------------

def _focal_pos_np(p: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    return alpha * (1.0 - p) ** gamma * -np.log(np.maximum(p, LOG_FLOOR))


def _focal_neg_np(p: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    return (1.0 - alpha) * p**gamma * -np.log(np.maximum(1.0 - p, LOG_FLOOR))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    from scipy.special import expit

    return expit(x)


@dataclass
class MatchWeights:
    cls: float = 2.0
    mask_focal: float = 1.0
    dice: float = 1.0
    bbox: float = 1.0
    giou: float = 1.0


# worst-possible box terms, used when a query claims no patch at all
_EMPTY_BOX_L1 = 4.0
_EMPTY_BOX_GIOU = -1.0


def query_boxes_from_affinity(
    affinity: np.ndarray,
    patch_boxes: list[BBox],
    threshold: float = 0.5,
) -> list[BBox | None]:
    """Merged box of each query's claimed patches; None when none qualify."""
    out: list[BBox | None] = []
    for row in affinity:
        picked = [patch_boxes[i] for i in np.flatnonzero(row >= threshold)]
        out.append(merge_bboxes(picked) if picked else None)
    return out


def _query_box_arrays(
    affinity: np.ndarray,
    box_arr: np.ndarray,  # (N, 4) x0 y0 x1 y1
    threshold: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized merged boxes: (M, 4) array plus a validity flag per query."""
    claimed = affinity >= threshold  # (M, N)
    valid = claimed.any(axis=1)
    big = 1e18
    x0 = np.where(claimed, box_arr[None, :, 0], big).min(axis=1)
    y0 = np.where(claimed, box_arr[None, :, 1], big).min(axis=1)
    x1 = np.where(claimed, box_arr[None, :, 2], -big).max(axis=1)
    y1 = np.where(claimed, box_arr[None, :, 3], -big).max(axis=1)
    return np.stack([x0, y0, x1, y1], axis=1), valid


def _giou_pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(K, M) generalized IoU between box arrays (K, 4) and (M, 4)."""
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    uni = area_a[:, None] + area_b[None, :] - inter
    hx0 = np.minimum(a[:, None, 0], b[None, :, 0])
    hy0 = np.minimum(a[:, None, 1], b[None, :, 1])
    hx1 = np.maximum(a[:, None, 2], b[None, :, 2])
    hy1 = np.maximum(a[:, None, 3], b[None, :, 3])
    hull = (hx1 - hx0) * (hy1 - hy0)
    return inter / uni - (hull - uni) / hull


def matching_cost(
    cls_scores: np.ndarray,   # (Mq, C) raw class logits of instance queries
    affinity: np.ndarray,     # (Mq, N) affinity rows of instance queries
    gt: list[GtInstance],
    match_matrix: np.ndarray,  # (K, N)
    patch_boxes: list[BBox],
    image_hw: tuple[int, int],
    weights: MatchWeights,
    alpha: float = 0.25,
    gamma: float = 2.0,
    affinity_threshold: float = 0.5,
) -> np.ndarray:
    """(K, Mq) assignment cost: weighted classification focal loss, mask focal
    loss, dice, box L1 in normalized center form, and 1 - gIoU."""
    k_n = len(gt)
    m_n, n_cls = cls_scores.shape
    G = match_matrix
    h, w = image_hw

    p_cls = _sigmoid_np(cls_scores)
    pos_c = _focal_pos_np(p_cls, alpha, gamma)
    neg_c = _focal_neg_np(p_cls, alpha, gamma)
    neg_sum = neg_c.sum(axis=1)  # (Mq,)
    gt_cls = np.array([g.class_id for g in gt], dtype=np.int64)
    # swap the target column from its negative term to its positive term
    cost_cls = neg_sum[None, :] - neg_c[:, gt_cls].T + pos_c[:, gt_cls].T

    pos_a = _focal_pos_np(affinity, alpha, gamma)
    neg_a = _focal_neg_np(affinity, alpha, gamma)
    norm = np.maximum(G.sum(axis=1), 1.0)
    cost_mfl = (G @ (pos_a - neg_a).T + neg_a.sum(axis=1)[None, :]) / norm[:, None]

    inter = G @ affinity.T  # (K, Mq)
    denom = affinity.sum(axis=1)[None, :] + G.sum(axis=1)[:, None]
    cost_dice = 1.0 - 2.0 * inter / np.maximum(denom, LOG_FLOOR)

    box_arr = np.array([[b.x0, b.y0, b.x1, b.y1] for b in patch_boxes], dtype=np.float64)
    qb, valid = _query_box_arrays(affinity, box_arr, affinity_threshold)
    qb[~valid] = np.array([0.0, 0.0, 1.0, 1.0])  # placeholder, overwritten below
    gb = np.array([[b.x0, b.y0, b.x1, b.y1] for b in (bbox_of(g.mask) for g in gt)],
                  dtype=np.float64)

    def cxcywh(arr: np.ndarray) -> np.ndarray:
        scale = np.array([w, h, w, h], dtype=np.float64)
        cx = (arr[:, 0] + arr[:, 2]) / 2
        cy = (arr[:, 1] + arr[:, 3]) / 2
        return np.stack([cx, cy, arr[:, 2] - arr[:, 0], arr[:, 3] - arr[:, 1]], axis=1) / scale

    cost_l1 = np.abs(cxcywh(gb)[:, None, :] - cxcywh(qb)[None, :, :]).sum(axis=2)
    cost_giou = 1.0 - _giou_pairwise(gb, qb)
    cost_l1[:, ~valid] = _EMPTY_BOX_L1
    cost_giou[:, ~valid] = 1.0 - _EMPTY_BOX_GIOU

    return (
        weights.cls * cost_cls
        + weights.mask_focal * cost_mfl
        + weights.dice * cost_dice
        + weights.bbox * cost_l1
        + weights.giou * cost_giou
    )


# --- targets -------------------------------------------------------------------

@dataclass
class Targets:
    affinity_target: np.ndarray  # (M, N) binary
    eps: np.ndarray              # (M,) 0/1 mask-loss gate
    cls_target: np.ndarray       # (M,) class id or -1 for negative
    n_positive: int              # M*: positive real queries
    assignment: dict[int, int] = field(default_factory=dict)  # gt index -> query row


def build_targets(
    gt: list[GtInstance],
    n_classes: int,
    n_patches: int,
    match_matrix: np.ndarray,
    semantic_rows: np.ndarray,
    present: np.ndarray,
    cost: np.ndarray | None,
    self_affinity_negatives: bool = True,
) -> Targets:
    """Targets for the C semantic rows followed by N instance rows.

    `cost` is the (K, N) matching cost for this stage; None skips instance
    assignment (then every instance query is negative). Unmatched instance
    queries keep a one-hot target on their own seed patch when
    `self_affinity_negatives` is on, preserving the segment-anything behavior
    of unclaimed patch queries; their class target stays negative either way.
    """
    m_total = n_classes + n_patches
    B = np.zeros((m_total, n_patches))
    eps = np.zeros(m_total)
    cls_t = np.full(m_total, -1, dtype=np.int64)

    for c in range(n_classes):
        if present[c]:
            B[c] = semantic_rows[c]
            eps[c] = 1.0
            cls_t[c] = c

    assignment: dict[int, int] = {}
    matched_queries = set()
    if cost is not None and len(gt) and n_patches:
        for k, q in hungarian(cost):
            assignment[k] = q
            matched_queries.add(q)
            row = n_classes + q
            B[row] = match_matrix[k]
            eps[row] = 1.0
            cls_t[row] = gt[k].class_id

    if self_affinity_negatives:
        for q in range(n_patches):
            if q in matched_queries:
                continue
            row = n_classes + q
            B[row, q] = 1.0
            eps[row] = 1.0

    return Targets(
        affinity_target=B,
        eps=eps,
        cls_target=cls_t,
        n_positive=int(eps.sum()),
        assignment=assignment,
    )


# --- denoising ------------------------------------------------------------------

@dataclass
class DenoisePlan:
    boxes: list[BBox]            # jittered ground-truth boxes
    query_classes: np.ndarray    # possibly flipped class ids fed to the model
    true_classes: np.ndarray     # supervision targets
    affinity_rows: np.ndarray    # (K, N) rows copied from the match matrix


def denoising_plan(
    gt: list[GtInstance],
    match_matrix: np.ndarray,
    n_classes: int,
    rng: np.random.Generator,
    image_hw: tuple[int, int],
    box_jitter: float = 0.2,
    label_flip: float = 0.2,
) -> DenoisePlan:
    """One noised query per ground-truth region: shaken box, sometimes a wrong
    class. Supervised directly (no assignment) with the true class and the
    region's match row."""
    h, w = image_hw
    boxes: list[BBox] = []
    q_cls = []
    t_cls = []
    for g in gt:
        b = bbox_of(g.mask)
        bw, bh = b.width, b.height
        dx = rng.uniform(-box_jitter, box_jitter) * bw
        dy = rng.uniform(-box_jitter, box_jitter) * bh
        sx = 1.0 + rng.uniform(-box_jitter, box_jitter)
        sy = 1.0 + rng.uniform(-box_jitter, box_jitter)
        cx, cy = (b.x0 + b.x1) / 2 + dx, (b.y0 + b.y1) / 2 + dy
        nw, nh = max(1.0, bw * sx), max(1.0, bh * sy)
        x0 = int(np.clip(round(cx - nw / 2), 0, w - 1))
        y0 = int(np.clip(round(cy - nh / 2), 0, h - 1))
        x1 = int(np.clip(round(cx + nw / 2), x0 + 1, w))
        y1 = int(np.clip(round(cy + nh / 2), y0 + 1, h))
        boxes.append(BBox(x0, y0, x1, y1))
        true_c = g.class_id
        fed_c = true_c
        if n_classes > 1 and rng.random() < label_flip:
            others = [c for c in range(n_classes) if c != true_c]
            fed_c = int(rng.choice(others))
        q_cls.append(fed_c)
        t_cls.append(true_c)
    return DenoisePlan(
        boxes=boxes,
        query_classes=np.array(q_cls, dtype=np.int64),
        true_classes=np.array(t_cls, dtype=np.int64),
        affinity_rows=match_matrix.copy(),
    )


def visibility_mask(n_real: int, n_extra: int) -> np.ndarray | None:
    """Self-attention mask hiding denoising queries from the real ones."""
    if n_extra == 0:
        return None
    m = n_real + n_extra
    mask = np.zeros((m, m), dtype=bool)
    mask[:n_real, n_real:] = True
    return mask


def extend_targets(base: Targets, plan: DenoisePlan) -> Targets:
    """Append denoising rows. They gate into the mask losses (eps = 1) but do
    not count toward the positive-query normalizer."""
    k = len(plan.boxes)
    if k == 0:
        return base
    B = np.concatenate([base.affinity_target, plan.affinity_rows], axis=0)
    eps = np.concatenate([base.eps, np.ones(k)])
    cls_t = np.concatenate([base.cls_target, plan.true_classes])
    return Targets(
        affinity_target=B,
        eps=eps,
        cls_target=cls_t,
        n_positive=base.n_positive,
        assignment=base.assignment,
    )


# --- losses -----------------------------------------------------------------

def _focal_pos(p: Tensor, alpha: float, gamma: float) -> Tensor:
    logp = ad.log(ad.maximum_const(p, LOG_FLOOR))
    return ad.mul(ad.pow_(ad.sub(1.0, p), gamma), ad.mul(logp, -alpha))


def _focal_neg(p: Tensor, alpha: float, gamma: float) -> Tensor:
    log1p = ad.log(ad.maximum_const(ad.sub(1.0, p), LOG_FLOOR))
    return ad.mul(ad.pow_(p, gamma), ad.mul(log1p, -(1.0 - alpha)))


def loss_cls(
    cls_scores: Tensor,
    cls_target: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> Tensor:
    """Focal classification loss over every query-class pair, averaged over
    queries. Targets of -1 mean no positive class for that query."""
    m_n, c_n = cls_scores.values.shape
    y = np.zeros((m_n, c_n))
    valid = cls_target >= 0
    y[np.arange(m_n)[valid], cls_target[valid]] = 1.0
    p = ad.sigmoid(cls_scores)
    terms = ad.add(
        ad.mul(_focal_pos(p, alpha, gamma), Tensor(y)),
        ad.mul(_focal_neg(p, alpha, gamma), Tensor(1.0 - y)),
    )
    return ad.mul(ad.sum_(terms), 1.0 / m_n)


def loss_masks(
    affinity: Tensor,
    targets: Targets,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> tuple[Tensor, Tensor]:
    """Mask focal loss and soft dice over affinity rows.

    Both normalize by the positive real-query count M*; rows gate through
    eps. The focal term additionally normalizes each row by its target size.
    With M* = 0 both losses are zero.
    """
    if targets.n_positive == 0:
        zero = Tensor(np.zeros(()))
        return zero, zero
    B = targets.affinity_target
    eps = targets.eps
    mstar = targets.n_positive

    row_w = eps / np.maximum(B.sum(axis=1), 1.0)  # (M,)
    terms = ad.add(
        ad.mul(_focal_pos(affinity, alpha, gamma), Tensor(B)),
        ad.mul(_focal_neg(affinity, alpha, gamma), Tensor(1.0 - B)),
    )
    mfl = ad.mul(ad.sum_(ad.mul(ad.sum_(terms, axis=1), Tensor(row_w))), 1.0 / mstar)

    num = ad.mul(ad.sum_(ad.mul(affinity, Tensor(B)), axis=1), 2.0)
    den = ad.add(ad.sum_(affinity, axis=1), B.sum(axis=1))
    degenerate = (den.values == 0.0)
    if degenerate.any():  # empty target against an exactly-zero row: define 0
        den = ad.add(den, Tensor(degenerate.astype(np.float64)))
    dice_rows = ad.sub(1.0, ad.div(num, den))
    if degenerate.any():
        dice_rows = ad.masked_fill(dice_rows, degenerate, 0.0)
    dice = ad.mul(ad.sum_(ad.mul(dice_rows, Tensor(eps))), 1.0 / mstar)
    return mfl, dice


@dataclass
class LossReport:
    cls: float
    mask_focal: float
    dice: float
    total: float
    per_stage: list[dict[str, float]]

    def check_identity(self, w_cls: float, w_mfl: float, w_dice: float) -> bool:
        return abs(self.total - (w_cls * self.cls + w_mfl * self.mask_focal + w_dice * self.dice)) < 1e-9


def total_loss(
    stage_cls: list[Tensor],
    stage_affinity: list[Tensor],
    stage_targets: list[Targets],
    w_cls: float = 2.0,
    w_mfl: float = 1.0,
    w_dice: float = 1.0,
    use_mfl: bool = True,
    use_dice: bool = True,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> tuple[Tensor, LossReport]:
    """Deep supervision: the weighted loss of every stage, averaged."""
    n_stages = len(stage_cls)
    per_stage = []
    acc = None
    sums = np.zeros(3)
    for s_cls, s_aff, tgt in zip(stage_cls, stage_affinity, stage_targets):
        lc = loss_cls(s_cls, tgt.cls_target, alpha, gamma)
        lm, ld = loss_masks(s_aff, tgt, alpha, gamma)
        if not use_mfl:
            lm = Tensor(np.zeros(()))
        if not use_dice:
            ld = Tensor(np.zeros(()))
        stage_total = ad.add(ad.mul(lc, w_cls), ad.add(ad.mul(lm, w_mfl), ad.mul(ld, w_dice)))
        acc = stage_total if acc is None else ad.add(acc, stage_total)
        vals = (float(lc.values), float(lm.values), float(ld.values))
        sums += vals
        per_stage.append({"cls": vals[0], "mask_focal": vals[1], "dice": vals[2]})
    total = ad.mul(acc, 1.0 / n_stages)
    report = LossReport(
        cls=sums[0] / n_stages,
        mask_focal=sums[1] / n_stages,
        dice=sums[2] / n_stages,
        total=float(total.values),
        per_stage=per_stage,
    )
    return total, report
