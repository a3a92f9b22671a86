"""Metric correctness against hand-computed values and identities."""

import numpy as np

from affseg.inference import (
    InferenceResult,
    PanopticMap,
    PanopticSegment,
    SegmentPrediction,
)
from affseg.masks import BinaryMask
from affseg.metrics import (
    AP_IOU_THRESHOLDS,
    APAccumulator,
    MIoUAccumulator,
    PQAccumulator,
    add_scene_to_accumulators,
    gt_panoptic_segments,
    gt_semantic_label,
    proposal_diagnostics,
)
from affseg.scenes import GtInstance, Scene


def rect(w, h, x0, y0, x1, y1):
    dense = np.zeros((h, w), dtype=bool)
    dense[y0:y1, x0:x1] = True
    return BinaryMask.from_dense(dense, w, h)


def pan_map(h, w, segs):
    """segs: list of (mask, class_id, is_thing, score); ids assigned 1.."""
    label = np.zeros((h, w), dtype=np.int32)
    class_of = np.full((h, w), -1, dtype=np.int32)
    out = []
    for i, (m, c, thing, score) in enumerate(segs, start=1):
        d = m.to_dense()
        label[d] = i
        class_of[d] = c
        out.append(PanopticSegment(i, c, thing, score))
    return PanopticMap(label, class_of, out)


def test_pq_hand_case():
    # class 0: one TP at IoU 0.75; class 1: lone prediction; class 2: lone gt
    gt = [(rect(8, 8, 0, 0, 8, 4), 0, True), (rect(8, 8, 0, 6, 4, 8), 2, True)]
    pred = pan_map(8, 8, [
        (rect(8, 8, 0, 0, 8, 3), 0, True, 0.9),
        (rect(8, 8, 4, 6, 8, 8), 1, True, 0.8),
    ])
    acc = PQAccumulator()
    acc.add_scene(pred, gt)
    r = acc.result()
    assert r["per_class"][0] == {"pq": 75.0, "sq": 75.0, "rq": 100.0,
                                 "tp": 1, "fp": 0, "fn": 0}
    assert r["per_class"][1]["pq"] == 0.0 and r["per_class"][1]["fp"] == 1
    assert r["per_class"][2]["pq"] == 0.0 and r["per_class"][2]["fn"] == 1
    # pooled: iou_sum 0.75 over denom 1 + 0.5 + 0.5
    assert r["pq"] == 37.5 and r["sq"] == 75.0 and r["rq"] == 50.0


def test_pq_match_needs_strictly_more_than_half():
    gt = [(rect(8, 8, 0, 0, 8, 4), 0, True)]
    pred = pan_map(8, 8, [(rect(8, 8, 0, 0, 8, 2), 0, True, 0.9)])  # IoU = 0.5
    acc = PQAccumulator()
    acc.add_scene(pred, gt)
    r = acc.result()
    s = r["per_class"][0]
    assert (s["tp"], s["fp"], s["fn"]) == (0, 1, 1)
    assert r["pq"] == 0.0


def test_pq_equals_sq_times_rq_on_random_scenes():
    rng = np.random.default_rng(5)
    acc = PQAccumulator()
    for _ in range(30):
        gt, preds = [], []
        for _ in range(rng.integers(1, 5)):
            x0, y0 = rng.integers(0, 10, 2)
            gt.append((rect(16, 16, x0, y0, x0 + rng.integers(2, 6),
                            y0 + rng.integers(2, 6)), int(rng.integers(0, 3)), True))
        for _ in range(rng.integers(0, 5)):
            x0, y0 = rng.integers(0, 10, 2)
            m = rect(16, 16, x0, y0, x0 + rng.integers(2, 6), y0 + rng.integers(2, 6))
            preds.append((m, int(rng.integers(0, 3)), True, float(rng.random())))
        acc.add_scene(pan_map(16, 16, preds), gt)
    r = acc.result()
    assert np.isclose(r["pq"], r["sq"] * r["rq"] / 100.0, rtol=1e-12, atol=1e-12)
    for s in r["per_class"].values():
        assert np.isclose(s["pq"], s["sq"] * s["rq"] / 100.0, rtol=1e-12, atol=1e-12)


def test_ap_single_prediction_at_iou_point_six():
    # IoU exactly 6/10: passes thresholds 0.50, 0.55, 0.60 of the ten
    acc = APAccumulator()
    acc.add_scene(
        preds=[(rect(16, 1, 0, 0, 8, 1), 0, 0.9)],
        gts=[(rect(16, 1, 2, 0, 10, 1), 0)],
    )
    r = acc.result()
    assert len(AP_IOU_THRESHOLDS) == 10
    assert abs(r["ap"] - 30.0) < 1e-9


def test_ap_false_positive_ranked_above_the_hit():
    # high-score miss then perfect hit: precision at full recall is 1/2
    acc = APAccumulator()
    gt = rect(16, 16, 0, 0, 4, 4)
    acc.add_scene(
        preds=[(rect(16, 16, 10, 10, 14, 14), 0, 0.9), (gt, 0, 0.8)],
        gts=[(gt, 0)],
    )
    r = acc.result()
    assert abs(r["ap"] - 50.0) < 1e-9


def test_ap_trailing_false_positive_costs_nothing():
    acc = APAccumulator()
    gt = rect(16, 16, 0, 0, 4, 4)
    acc.add_scene(
        preds=[(gt, 0, 0.9), (rect(16, 16, 10, 10, 14, 14), 0, 0.8)],
        gts=[(gt, 0)],
    )
    assert abs(acc.result()["ap"] - 100.0) < 1e-9


def test_ap_ignores_classes_without_gt():
    acc = APAccumulator()
    gt = rect(8, 8, 0, 0, 4, 4)
    acc.add_scene(preds=[(gt, 0, 0.9), (gt, 1, 0.9)], gts=[(gt, 0)])
    r = acc.result()
    assert list(r["per_class"]) == [0]
    assert abs(r["ap"] - 100.0) < 1e-9


def test_miou_hand_case():
    # class 0: pred half-covers gt (8 of 16 px, union 16+8... inter 8, union 16)
    gt = np.full((4, 8), -1, dtype=np.int32)
    gt[:2, :] = 0            # 16 px
    pred = np.full((4, 8), -1, dtype=np.int32)
    pred[0, :] = 0           # 8 px inside gt
    pred[3, :] = 1           # 8 px of a class absent from gt
    acc = MIoUAccumulator()
    acc.add_scene(pred, gt)
    r = acc.result()
    assert r["per_class"][0] == 50.0
    assert r["per_class"][1] == 0.0  # present in pred only
    assert r["miou"] == 25.0


def test_gt_panoptic_segments_merges_stuff():
    gt = [
        GtInstance(rect(8, 8, 0, 0, 2, 2), 0, True),
        GtInstance(rect(8, 8, 4, 0, 6, 2), 0, True),
        GtInstance(rect(8, 8, 0, 4, 2, 6), 5, False),
        GtInstance(rect(8, 8, 4, 4, 6, 6), 5, False),
    ]
    segs = gt_panoptic_segments(gt)
    things = [s for s in segs if s[2]]
    stuff = [s for s in segs if not s[2]]
    assert len(things) == 2 and len(stuff) == 1
    assert stuff[0][0].area == 8 and stuff[0][1] == 5


def _perfect_result(scene: Scene) -> InferenceResult:
    sem = gt_semantic_label(scene)
    segs = gt_panoptic_segments(scene.gt)
    pan = pan_map(scene.height, scene.width,
                  [(m, c, t, 0.9) for m, c, t in segs])
    instances = [
        SegmentPrediction(g.mask, g.class_id, 0.9, "instance")
        for g in scene.gt if g.is_thing
    ]
    return InferenceResult(sem, [], instances, pan)


def _tiny_scene() -> Scene:
    h = w = 16
    gt = [
        GtInstance(rect(w, h, 1, 1, 6, 6), 0, True),
        GtInstance(rect(w, h, 8, 2, 13, 7), 1, True),
        GtInstance(rect(w, h, 2, 9, 9, 14), 4, False),
    ]
    return Scene(
        image=np.zeros((h, w, 3), dtype=np.float32),
        patches=[g.mask for g in gt],
        gt=gt,
        embed_field=np.zeros((h, w, 4), dtype=np.float32),
        seed=0,
    )


def test_perfect_predictions_score_hundred_everywhere():
    scene = _tiny_scene()
    pq, ap, miou = PQAccumulator(), APAccumulator(), MIoUAccumulator()
    add_scene_to_accumulators(_perfect_result(scene), scene, pq, ap, miou)
    assert pq.result()["pq"] == 100.0
    assert ap.result()["ap"] == 100.0
    assert miou.result()["miou"] == 100.0


def test_proposal_diagnostics_merge_oracle():
    h = w = 8
    g = GtInstance(rect(w, h, 2, 2, 6, 6), 0, True)
    halves = [rect(w, h, 2, 2, 6, 4), rect(w, h, 2, 4, 6, 6)]
    outside = rect(w, h, 0, 6, 8, 8)
    scene = Scene(
        image=np.zeros((h, w, 3), dtype=np.float32),
        patches=halves + [outside],
        gt=[g],
        embed_field=np.zeros((h, w, 2), dtype=np.float32),
        seed=0,
    )
    direct = proposal_diagnostics([scene])
    assert abs(direct.miou - 50.0) < 1e-9
    assert direct.miss_rate["0.5"] == 100.0  # best single patch sits at 0.5
    merged = proposal_diagnostics([scene], merge_oracle=True)
    assert merged.miou == 100.0
    assert merged.miss_rate["0.5"] == 0.0
    assert merged.n_gt == 1
