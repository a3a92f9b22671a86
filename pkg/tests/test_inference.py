"""Assembly rules: claiming, scoring, dedup, conflicts, panoptic painting."""

import numpy as np
import pytest
from scipy.special import expit

from affseg.inference import (
    clip_logits,
    fuse_scores,
    infer,
    open_keeps,
    overlay_panoptic,
    overlay_patches,
    overlay_semantic,
    write_ppm,
)
from affseg.masks import BinaryMask


def rect(w, h, x0, y0, x1, y1):
    dense = np.zeros((h, w), dtype=bool)
    dense[y0:y1, x0:x1] = True
    return BinaryMask.from_dense(dense, w, h)


H = W = 8
P0 = rect(W, H, 0, 0, 2, 2)
P1 = rect(W, H, 4, 0, 6, 2)
P2 = rect(W, H, 0, 4, 2, 6)


def logits_for(sigma):
    return np.log(sigma / (1 - sigma))


def run_infer(inst_aff, inst_sig, sem_aff=None, is_thing=(True,), **kw):
    """inst_aff: (N, N) affinity of the patch queries; inst_sig: (N, C)
    desired post-sigmoid class scores."""
    n = inst_aff.shape[1]
    c = len(is_thing)
    sem = np.zeros((c, n)) if sem_aff is None else np.asarray(sem_aff, dtype=float)
    aff = np.vstack([sem, inst_aff])
    cls = np.vstack([np.full((c, c), -9.0), logits_for(np.asarray(inst_sig, dtype=float))])
    return infer(aff, cls, [P0, P1, P2][:n], np.array(is_thing), (H, W), **kw)


def test_patch_conflicts_go_to_strongest_row():
    # claims overlap pairwise; every contested patch goes to its strongest row
    aff = np.array([
        [0.9, 0.7, 0.0],
        [0.0, 0.8, 0.6],
        [0.0, 0.0, 0.9],
    ])
    sig = np.array([[0.9], [0.9], [0.9]])
    res = run_infer(aff, sig)
    assert len(res.instances) == 3
    areas = sorted(p.mask.area for p in res.instances)
    assert areas == [4, 4, 4]  # each query ends up with exactly its own patch
    masks = {tuple(p.mask.indices().tolist()) for p in res.instances}
    assert masks == {tuple(m.indices().tolist()) for m in (P0, P1, P2)}


def test_conflict_tie_prefers_earliest_row():
    aff = np.array([
        [0.8, 0.0, 0.0],
        [0.8, 0.0, 0.0],
        [0.0, 0.0, 0.0],
    ])
    sig = np.array([[0.9], [0.8], [0.9]])
    res = run_infer(aff, sig)
    # both rows claim only patch 0; identical claim sets deduplicate first,
    # keeping the higher-scoring row, so one instance survives
    assert len(res.instances) == 1
    assert res.instances[0].score == pytest.approx(0.9)


def test_duplicate_claims_keep_higher_score():
    aff = np.array([
        [0.7, 0.7, 0.0],
        [0.9, 0.9, 0.0],
        [0.0, 0.0, 0.0],
    ])
    sig = np.array([[0.6], [0.95], [0.9]])
    res = run_infer(aff, sig)
    assert len(res.instances) == 1
    inst = res.instances[0]
    assert inst.score == pytest.approx(0.95)
    assert inst.mask.area == P0.area + P1.area


def test_existence_threshold_drops_low_scores():
    aff = np.array([
        [0.9, 0.0, 0.0],
        [0.0, 0.9, 0.0],
        [0.0, 0.0, 0.0],
    ])
    sig = np.array([[0.9], [0.2], [0.9]])  # row 1 sits under the default 0.25 cut
    res = run_infer(aff, sig)
    assert len(res.instances) == 1
    assert res.instances[0].mask.area == P0.area


def test_row_claiming_nothing_disappears():
    aff = np.array([
        [0.9, 0.0, 0.0],
        [0.4, 0.4, 0.4],  # everything below theta_aff
        [0.0, 0.0, 0.9],
    ])
    sig = np.array([[0.9], [0.99], [0.9]])
    res = run_infer(aff, sig)
    assert len(res.instances) == 2


def test_instance_with_stuff_argmax_is_not_an_instance():
    aff = np.array([
        [0.9, 0.0, 0.0],
        [0.0, 0.9, 0.0],
        [0.0, 0.0, 0.0],
    ])
    # class 0 = thing, class 1 = stuff; row 1 prefers the stuff class
    sig = np.array([[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]])
    res = run_infer(aff, sig, is_thing=(True, False))
    assert len(res.instances) == 1
    assert res.instances[0].class_id == 0


def test_semantic_and_panoptic_assembly():
    sem_aff = np.array([
        [0.9, 0.0, 0.0],   # class 0 (thing) claims patch 0
        [0.0, 0.8, 0.9],   # class 1 (stuff) claims patches 1, 2
    ])
    inst_aff = np.array([
        [0.9, 0.0, 0.0],
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0],
    ])
    sig = np.array([[0.9, 0.05], [0.1, 0.1], [0.1, 0.1]])
    res = run_infer(inst_aff, sig, sem_aff=sem_aff, is_thing=(True, False))

    sem = res.semantic_label
    assert (sem[P0.to_dense()] == 0).all()
    assert (sem[P1.to_dense()] == 1).all() and (sem[P2.to_dense()] == 1).all()
    assert (sem[3, 3] == -1)

    pan = res.panoptic
    assert len(pan.segments) == 2
    thing = [s for s in pan.segments if s.is_thing][0]
    stuff = [s for s in pan.segments if not s.is_thing][0]
    assert thing.class_id == 0 and stuff.class_id == 1
    assert ((pan.label[P0.to_dense()]) == thing.segment_id).all()
    assert ((pan.label[P1.to_dense()]) == stuff.segment_id).all()
    # ids partition the assigned pixels
    assert set(np.unique(pan.label).tolist()) == {0, thing.segment_id, stuff.segment_id}
    assert ((pan.class_of == -1) == (pan.label == 0)).all()


def test_panoptic_higher_score_paints_first_and_covered_things_drop():
    big = rect(W, H, 0, 0, 4, 4)
    small = rect(W, H, 1, 1, 3, 3)  # strictly inside big
    aff = np.array([
        [0.9, 0.0],
        [0.0, 0.9],
    ])
    sig = np.array([[0.8], [0.9]])
    res = infer(
        np.vstack([np.zeros((1, 2)), aff]),
        np.vstack([[[-9.0]], logits_for(sig)]),
        [big, small], np.array([True]), (H, W),
    )
    assert len(res.instances) == 2
    pan = res.panoptic
    # the small high-score instance paints first; big covers the rest
    assert len(pan.segments) == 2
    inner = pan.label[2, 2]
    outer = pan.label[0, 0]
    assert inner != outer
    assert pan.segments[0].score >= pan.segments[1].score


def test_open_mode_kappa_zero_keeps_closed_ranking():
    # kappa 0 pins the blend's argmax to the trained head; existence may only
    # grow (the pooled source can vouch for rows the head dropped), and every
    # closed instance reappears with the same class and mask
    rng = np.random.default_rng(3)
    field = rng.normal(size=(H, W, 6))
    embs = rng.normal(size=(4, 6))
    embs /= np.linalg.norm(embs, axis=1, keepdims=True)
    aff = np.vstack([np.zeros((4, 3)), rng.uniform(0, 1, size=(3, 3))])
    cls = rng.normal(size=(7, 4))
    args = ([P0, P1, P2], np.array([True, True, False, False]), (H, W))
    closed = infer(aff, cls, *args, mode="closed")
    opened = infer(aff, cls, *args, mode="open", field=field, class_embs=embs, kappa=0.0)
    assert len(opened.instances) >= len(closed.instances)
    open_by_runs = {tuple(map(tuple, p.mask.runs)): p.class_id for p in opened.instances}
    for p in closed.instances:
        assert open_by_runs.get(tuple(map(tuple, p.mask.runs))) == p.class_id


def test_open_mode_requires_field_and_table():
    aff = np.zeros((4, 3))
    cls = np.zeros((4, 1))
    with pytest.raises(ValueError):
        infer(aff, cls, [P0, P1, P2], np.array([True]), (H, W), mode="open")


def test_clip_logits_match_manual_pooling():
    rng = np.random.default_rng(0)
    field = rng.normal(size=(H, W, 5))
    embs = rng.normal(size=(3, 5))
    masks = [P0, rect(W, H, 2, 2, 7, 7)]
    got = clip_logits(masks, field, embs, temperature=0.07)
    flat = field.reshape(-1, 5)
    for i, m in enumerate(masks):
        pooled = flat[m.indices()].mean(axis=0)
        pooled /= np.linalg.norm(pooled)
        for c in range(3):
            e = embs[c] / np.linalg.norm(embs[c])
            assert got[i, c] == pytest.approx(float(e @ pooled) / 0.07, abs=1e-12)


def test_clip_logits_reject_empty_mask():
    empty = BinaryMask(W, H, [])
    with pytest.raises(ValueError):
        clip_logits([empty], np.ones((H, W, 3)), np.ones((2, 3)))


def test_fuse_scores_endpoints():
    rng = np.random.default_rng(1)
    s_cls = rng.normal(size=(5, 4))
    s_clip = rng.normal(size=(5, 4))
    z = np.exp(s_clip - s_clip.max(axis=1, keepdims=True))
    sm = z / z.sum(axis=1, keepdims=True)
    assert np.allclose(fuse_scores(s_cls, s_clip, 0.0), expit(s_cls) + 1.0)
    assert np.allclose(fuse_scores(s_cls, s_clip, 1.0), 1.0 + sm)
    with pytest.raises(ValueError):
        fuse_scores(s_cls, s_clip, 1.5)


def test_existence_accepts_either_confident_source():
    # rows: head-only confidence, pooled-only confidence, both weak
    theta = 0.25
    sig = np.array([[0.70, 0.05], [0.01, 0.02], [0.10, 0.05]])
    sm = np.array([[0.20, 0.10], [0.05, 0.90], [0.15, 0.22]])
    picks = np.array([0, 1, 1])
    got = open_keeps(sig, sm, picks, theta)
    assert got.tolist() == [True, True, False]


def test_existence_judges_only_the_picked_class():
    # confidence on a class the blend did not pick cannot carry a row
    theta = 0.25
    sig = np.array([[0.90, 0.01]])
    sm = np.array([[0.05, 0.10]])
    assert open_keeps(sig, sm, np.array([1]), theta).tolist() == [False]
    assert open_keeps(sig, sm, np.array([0]), theta).tolist() == [True]


def test_ppm_roundtrip(tmp_path):
    rgb = (np.arange(H * W * 3).reshape(H, W, 3) % 256).astype(np.uint8)
    path = tmp_path / "img.ppm"
    write_ppm(str(path), rgb)
    raw = path.read_bytes()
    header = f"P6\n{W} {H}\n255\n".encode()
    assert raw[:len(header)] == header
    assert raw[len(header):] == rgb.tobytes()


def test_overlays_shapes_and_colors():
    img = np.zeros((H, W, 3), dtype=np.float32)
    out = overlay_patches(img, [P0])
    assert out.shape == (H, W, 3) and out.dtype == np.uint8
    # image edges count as interior, so the corner pixel of this corner patch
    # stays unpainted while its inward-facing neighbors turn white
    assert out[0, 0].tolist() == [0, 0, 0]
    assert out[0, 1].tolist() == [255, 255, 255]
    assert out[1, 0].tolist() == [255, 255, 255]

    colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    sem = np.full((H, W), -1, dtype=np.int32)
    sem[0, 0] = 1
    rgb = overlay_semantic(sem, colors)
    assert rgb[0, 0].tolist() == [0, 255, 0]
    assert rgb[5, 5].tolist() == [40, 40, 40]

    from affseg.inference import PanopticMap, PanopticSegment
    label = np.zeros((H, W), dtype=np.int32)
    label[P0.to_dense()] = 1
    pan = PanopticMap(label, np.where(label > 0, 0, -1).astype(np.int32),
                      [PanopticSegment(1, 0, True, 0.9)])
    rgbp = overlay_panoptic(pan, colors)
    assert rgbp.shape == (H, W, 3)
    assert rgbp[5, 5].tolist() == [40, 40, 40]
    assert rgbp[0, 0].tolist() != [40, 40, 40]
