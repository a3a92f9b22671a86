"""Turning a decoded affinity matrix into segmentation outputs.

Closed mode trusts the trained classification head. Open mode additionally
pools the scene's embedding field over each candidate region, scores it
against the class-embedding table, and fuses both scores, which lets the
model name classes it never trained on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .masks import BinaryMask, union
from .scenes import Scene

CLIP_TEMPERATURE = 0.07


@dataclass
class SegmentPrediction:
    mask: BinaryMask
    class_id: int      # vocabulary index
    score: float
    kind: str          # "semantic" or "instance"


@dataclass
class PanopticSegment:
    segment_id: int
    class_id: int
    is_thing: bool
    score: float


@dataclass
class PanopticMap:
    label: np.ndarray     # (H, W) int32 segment id, 0 = unassigned
    class_of: np.ndarray  # (H, W) int32 vocabulary index, -1 = unassigned
    segments: list[PanopticSegment]


@dataclass
class InferenceResult:
    semantic_label: np.ndarray          # (H, W) int32, -1 = unassigned
    semantic: list[SegmentPrediction]
    instances: list[SegmentPrediction]  # thing-class instances only
    panoptic: PanopticMap


# --- scoring -------------------------------------------------------------------

def clip_logits(
    masks: list[BinaryMask],
    field: np.ndarray,
    class_embs: np.ndarray,
    temperature: float = CLIP_TEMPERATURE,
) -> np.ndarray:
    """Cosine between the mask-pooled field vector and each class embedding,
    sharpened by the temperature. (len(masks), C)."""
    h, w, d = field.shape
    flat = field.reshape(h * w, d).astype(np.float64)
    unit_embs = class_embs / np.linalg.norm(class_embs, axis=1, keepdims=True)
    out = np.zeros((len(masks), class_embs.shape[0]))
    for i, m in enumerate(masks):
        if m.area == 0:
            raise ValueError("cannot pool over an empty mask")
        pooled = flat[m.indices()].mean(axis=0)
        norm = np.linalg.norm(pooled)
        if norm == 0:
            raise ValueError("pooled feature has zero norm")
        out[i] = unit_embs @ (pooled / norm) / temperature
    return out


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fuse_scores(s_cls: np.ndarray, s_clip: np.ndarray, kappa: float = 0.4) -> np.ndarray:
    """Blend trained and pooled-embedding class scores.

    Each term is brought to [0, 1] (sigmoid / per-row softmax) and tempered by
    the balance exponent; the result lives in [0, 2]. kappa = 0 keeps the
    trained ranking, kappa = 1 the pooled one.
    """
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    return expit(s_cls) ** (1.0 - kappa) + _softmax_rows(s_clip) ** kappa


def open_keeps(sig: np.ndarray, sm: np.ndarray, picks: np.ndarray, theta_s: float) -> np.ndarray:
    """Existence rule for fused candidates: keep a row when either scoring
    source clears theta_s for the class the blend picked. The trained head
    can only vouch for classes it was fit on, so demanding its confidence on
    never-trained classes would erase exactly the segments open mode exists
    to recover; the pooled term alone decides those."""
    rows = np.arange(len(picks))
    return (sig[rows, picks] >= theta_s) | (sm[rows, picks] >= theta_s)


# --- region assembly -------------------------------------------------------------

def _resolve_patch_conflicts(affinity: np.ndarray, claims: list[np.ndarray]) -> list[np.ndarray]:
    """Each patch goes to the claiming row with the largest affinity entry
    (ties: earliest row). `claims` holds each row's claimed patch indices."""
    owner: dict[int, int] = {}
    for r, idx in enumerate(claims):
        for n in idx:
            cur = owner.get(n)
            if cur is None or affinity[r, n] > affinity[cur, n]:
                owner[n] = r
    return [np.array([n for n in idx if owner[n] == r], dtype=np.int64)
            for r, idx in enumerate(claims)]


def _merged_mask(patches: list[BinaryMask], idx: np.ndarray) -> BinaryMask | None:
    if len(idx) == 0:
        return None
    return union([patches[n] for n in idx])


def infer(
    affinity: np.ndarray,        # (M, N) final-stage affinity
    cls_scores: np.ndarray,      # (M, C) final-stage class logits
    patches: list[BinaryMask],
    is_thing: np.ndarray,        # (C,) bool per vocabulary index
    image_hw: tuple[int, int],
    mode: str = "closed",
    field: np.ndarray | None = None,
    class_embs: np.ndarray | None = None,
    kappa: float = 0.4,
    theta_aff: float = 0.5,
    theta_score: float = 0.25,
    temperature: float = CLIP_TEMPERATURE,
) -> InferenceResult:
    """Assemble semantic, instance, and panoptic outputs from the last stage.

    Open mode needs the scene embedding `field` and the class-embedding
    table. Instance steps: claim patches by affinity, score each candidate
    (fused scores in open mode, pooled over its claimed region), drop rows
    whose picked class no scoring source vouches for at theta_score,
    deduplicate identical claims, then settle per-patch conflicts by
    affinity.
    """
    if mode not in ("closed", "open"):
        raise ValueError(f"unknown inference mode {mode!r}")
    n_classes = is_thing.shape[0]
    n_patches = len(patches)
    inst_aff = affinity[n_classes:n_classes + n_patches]
    inst_cls = cls_scores[n_classes:n_classes + n_patches]

    claims = [np.flatnonzero(row >= theta_aff) for row in inst_aff]
    live = [q for q in range(n_patches) if len(claims[q])]

    keep = np.zeros(n_patches, dtype=bool)
    if mode == "open":
        if field is None or class_embs is None:
            raise ValueError("open mode requires the embedding field and class table")
        scores = np.zeros((n_patches, n_classes))
        if live:
            masks = [_merged_mask(patches, claims[q]) for q in live]
            s_clip = clip_logits(masks, field, class_embs, temperature)
            fused = fuse_scores(inst_cls[live], s_clip, kappa)
            scores[live] = fused / 2.0  # score range back to [0, 1]
            keep[live] = open_keeps(
                expit(inst_cls[live]), _softmax_rows(s_clip),
                fused.argmax(axis=1), theta_score,
            )
    else:
        scores = expit(inst_cls)
        if live:
            keep[live] = scores[live].max(axis=1) >= theta_score

    return _assemble(
        affinity, patches, is_thing, image_hw, claims, live, scores, keep, theta_aff,
        n_classes,
    )


def _assemble(
    affinity, patches, is_thing, image_hw, claims, live, scores, keep, theta_aff,
    n_classes,
) -> InferenceResult:
    h, w = image_hw
    inst_aff = affinity[n_classes:n_classes + len(patches)]

    best_cls = scores.argmax(axis=1)
    best_val = scores.max(axis=1) if scores.size else np.zeros(0)

    kept = [q for q in live if keep[q]]

    # exact-duplicate claims: keep the higher score (earlier row on ties)
    by_set: dict[tuple, int] = {}
    for q in kept:
        key = tuple(claims[q])
        cur = by_set.get(key)
        if cur is None or best_val[q] > best_val[cur]:
            by_set[key] = q
    deduped = sorted(by_set.values())

    resolved = _resolve_patch_conflicts(
        inst_aff, [claims[q] if q in deduped else np.array([], dtype=np.int64)
                   for q in range(len(claims))]
    )

    instances: list[SegmentPrediction] = []
    for q in deduped:
        m = _merged_mask(patches, resolved[q])
        if m is None:
            continue
        instances.append(SegmentPrediction(
            mask=m, class_id=int(best_cls[q]), score=float(best_val[q]), kind="instance",
        ))

    # semantic rows: per-class claims, conflicts by affinity, lowest class wins ties
    sem_aff = affinity[:n_classes]
    sem_claims = [np.flatnonzero(row >= theta_aff) for row in sem_aff]
    sem_resolved = _resolve_patch_conflicts(sem_aff, sem_claims)
    semantic: list[SegmentPrediction] = []
    sem_label = np.full((h, w), -1, dtype=np.int32)
    for c in range(n_classes):
        m = _merged_mask(patches, sem_resolved[c])
        if m is None:
            continue
        semantic.append(SegmentPrediction(mask=m, class_id=c, score=1.0, kind="semantic"))
        dense = m.to_dense()
        sem_label[dense] = c

    # panoptic: things by descending score, stuff fills what remains
    label = np.zeros((h, w), dtype=np.int32)
    class_of = np.full((h, w), -1, dtype=np.int32)
    segments: list[PanopticSegment] = []
    next_id = 1
    things = [p for p in instances if is_thing[p.class_id]]
    for p in sorted(things, key=lambda p: -p.score):
        dense = p.mask.to_dense() & (label == 0)
        if not dense.any():
            continue
        label[dense] = next_id
        class_of[dense] = p.class_id
        segments.append(PanopticSegment(next_id, p.class_id, True, p.score))
        next_id += 1
    for p in semantic:
        if is_thing[p.class_id]:
            continue
        dense = p.mask.to_dense() & (label == 0)
        if not dense.any():
            continue
        label[dense] = next_id
        class_of[dense] = p.class_id
        segments.append(PanopticSegment(next_id, p.class_id, False, p.score))
        next_id += 1

    things_only = [p for p in instances if is_thing[p.class_id]]
    return InferenceResult(
        semantic_label=sem_label,
        semantic=semantic,
        instances=things_only,
        panoptic=PanopticMap(label=label, class_of=class_of, segments=segments),
    )


# --- overlay rendering ------------------------------------------------------

def write_ppm(path: str, rgb: np.ndarray) -> None:
    """Binary PPM (P6). rgb is (H, W, 3) uint8."""
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.astype(np.uint8).tobytes())


def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(image * 255.0, 0, 255).astype(np.uint8)


def overlay_patches(image: np.ndarray, patches: list[BinaryMask]) -> np.ndarray:
    """Scene image with every patch boundary drawn in white."""
    rgb = _to_u8(image).copy()
    for p in patches:
        d = p.to_dense()
        inner = d.copy()
        inner[1:] &= d[:-1]
        inner[:-1] &= d[1:]
        inner[:, 1:] &= d[:, :-1]
        inner[:, :-1] &= d[:, 1:]
        rgb[d & ~inner] = 255
    return rgb


def overlay_semantic(sem_label: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """Class-colored semantic map. `colors` is (C, 3) in [0, 1]; unassigned
    pixels are dark gray."""
    h, w = sem_label.shape
    rgb = np.full((h, w, 3), 40, dtype=np.uint8)
    for c in range(colors.shape[0]):
        rgb[sem_label == c] = _to_u8(colors[c][None, :])[0]
    return rgb


def overlay_panoptic(pan: PanopticMap, colors: np.ndarray) -> np.ndarray:
    """Panoptic map: stuff in class colors, things in per-segment variations."""
    h, w = pan.label.shape
    rgb = np.full((h, w, 3), 40, dtype=np.uint8)
    for seg in pan.segments:
        base = colors[seg.class_id].copy()
        if seg.is_thing:
            # deterministic per-segment tint so adjacent instances separate
            t = (seg.segment_id * 0.37) % 1.0
            base = np.clip(base * (0.6 + 0.6 * t), 0, 1)
        rgb[pan.label == seg.segment_id] = _to_u8(base[None, :])[0]
    return rgb
