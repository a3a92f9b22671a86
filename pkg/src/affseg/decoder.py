"""Affinity decoder: joint semantic/instance queries over patch keys.

Queries are one vector per class (projected class embedding) plus one vector
per patch (patch feature + box embedding). Each stage: queries self-attend,
cross-attend to patch features under a mask derived from the current affinity
matrix (entries below threshold are blocked; stage 0 starts from an all-ones
affinity so nothing is blocked), pass an FFN, then a similarity head scores
every query against every patch. Similarity logits stack residually across
stages; the sigmoid of the running logits is the affinity matrix. Queries are
then optionally enhanced with RoI features of the box merged from their
claimed patches, and classified against the class-embedding table by scaled
cosine similarity. Every stage emits its outputs for deep supervision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import (
    _add_attention_params,
    _add_ln_params,
    _attention,
    _ffn,
    position_embedding,
    roi_align,
    xavier,
)
from .masks import BBox, merge_bboxes

SCORE_INIT = 0.01  # initial affinity/class probability, below any mask threshold


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass
class StageOutput:
    queries: Tensor   # (M, D) post-enhancement
    logits: Tensor    # (M, N) stacked similarity logits
    affinity: Tensor  # (M, N) sigmoid of logits
    cls: Tensor       # (M, C) class scores


def init_decoder_params(
    store,
    dim: int,
    embed_dim: int,
    stages: int,
    heads: int,
    qe_feat_dim: int,
    rng: np.random.Generator,
) -> None:
    store.add("dec.sem.w", xavier(rng, embed_dim, dim))
    store.add("dec.sem.b", np.zeros(dim))
    hidden = 2 * dim
    for t in range(stages):
        p = f"dec.s{t}"
        _add_ln_params(store, f"{p}.ln1", dim)
        _add_attention_params(store, f"{p}.self", dim, rng)
        _add_ln_params(store, f"{p}.ln2", dim)
        _add_attention_params(store, f"{p}.cross", dim, rng)
        _add_ln_params(store, f"{p}.ln3", dim)
        store.add(f"{p}.ffn.w1", xavier(rng, dim, hidden))
        store.add(f"{p}.ffn.b1", np.zeros(hidden))
        store.add(f"{p}.ffn.w2", xavier(rng, hidden, dim))
        store.add(f"{p}.ffn.b2", np.zeros(dim))
        # similarity head: query/key projections, head-mix MLP, scale and bias
        store.add(f"{p}.aff.wq", xavier(rng, dim, dim))
        store.add(f"{p}.aff.bq", np.zeros(dim))
        store.add(f"{p}.aff.wk", xavier(rng, dim, dim))
        store.add(f"{p}.aff.bk", np.zeros(dim))
        store.add(f"{p}.aff.mix_w1", np.eye(heads))          # identity-friendly
        store.add(f"{p}.aff.mix_b1", np.zeros(heads))
        store.add(f"{p}.aff.mix_w2", np.full((heads, 1), 1.0 / heads))
        store.add(f"{p}.aff.mix_b2", np.zeros(1))
        store.add(f"{p}.aff.scale", np.array(1.0))
        store.add(f"{p}.aff.bias0", np.array(logit(SCORE_INIT)))
        store.add(f"{p}.aff.bias1", np.zeros(dim))
        # query enhancement MLP over RoI features of the merged box
        store.add(f"{p}.qe.w1", xavier(rng, qe_feat_dim, dim))
        store.add(f"{p}.qe.b1", np.zeros(dim))
        store.add(f"{p}.qe.w2", xavier(rng, dim, dim))
        store.add(f"{p}.qe.b2", np.zeros(dim))
    # classification head shared across stages
    store.add("dec.cls.w", xavier(rng, dim, embed_dim))
    store.add("dec.cls.b", np.zeros(embed_dim))
    store.add("dec.cls.scale", np.array(0.07))
    store.add("dec.cls.bias", np.array(logit(SCORE_INIT)))


def affinity_similarity(
    store,
    stage: int,
    queries: Tensor,
    keys: Tensor,
    heads: int,
    prev_logits: Tensor | None,
    stack_logits: bool = True,
) -> Tensor:
    """Similarity logits (M, N): per-head scaled dot products mixed to one
    channel, scaled and key-biased, plus the previous stage's logits."""
    p = f"dec.s{stage}.aff"
    m_len = queries.values.shape[0]
    n_len = keys.values.shape[0]
    dim = queries.values.shape[1]
    dh = dim // heads

    qp = ad.add(ad.matmul(queries, store[f"{p}.wq"]), store[f"{p}.bq"])
    kp = ad.add(ad.matmul(keys, store[f"{p}.wk"]), store[f"{p}.bk"])
    qh = ad.transpose(ad.reshape(qp, (m_len, heads, dh)), (1, 0, 2))
    kh = ad.transpose(ad.reshape(kp, (n_len, heads, dh)), (1, 0, 2))
    sim = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))

    # mix the head channel down to 1 with a small MLP
    flat = ad.reshape(ad.transpose(sim, (1, 2, 0)), (m_len * n_len, heads))
    h = ad.relu(ad.add(ad.matmul(flat, store[f"{p}.mix_w1"]), store[f"{p}.mix_b1"]))
    mixed = ad.add(ad.matmul(h, store[f"{p}.mix_w2"]), store[f"{p}.mix_b2"])
    mixed = ad.reshape(mixed, (m_len, n_len))

    # per-key bias plus learned offset; scale steers the logit range
    key_bias = ad.reshape(ad.matmul(kp, ad.reshape(store[f"{p}.bias1"], (dim, 1))), (1, n_len))
    logits = ad.add(ad.add(ad.div(mixed, store[f"{p}.scale"]), key_bias), store[f"{p}.bias0"])
    if prev_logits is not None and stack_logits:
        logits = ad.add(logits, prev_logits)
    return logits


def dca(
    store,
    stage: int,
    queries: Tensor,
    keys: Tensor,
    affinity: np.ndarray,
    heads: int,
    threshold: float = 0.5,
    enabled: bool = True,
) -> Tensor:
    """Cross-attention where keys with affinity below threshold are blocked.

    With an all-ones affinity (stage 0) nothing is blocked, so this equals
    plain cross-attention. A fully blocked row falls back to uniform
    attention inside the attention op.
    """
    mask = (affinity < threshold) if enabled else None
    return _attention(store, f"dec.s{stage}.cross", queries, keys, keys, heads, mask=mask)


def query_enhance(
    store,
    stage: int,
    queries: Tensor,
    affinity: np.ndarray,
    image: np.ndarray,
    patch_boxes: list[BBox],
    out_size: int,
    threshold: float = 0.5,
    enabled: bool = True,
    roi_cache: dict | None = None,
) -> Tensor:
    """Average each query with an RoI descriptor of its claimed region.

    The region is the minimum box over patches whose affinity entry reaches
    the threshold; queries claiming nothing pass through unchanged.
    `roi_cache` memoizes RoI extraction per box; valid while `image` and
    `out_size` stay fixed (one forward pass), where stages mostly re-request
    the same merged boxes.
    """
    if not enabled:
        return queries
    m_len = queries.values.shape[0]
    feat_dim = store[f"dec.s{stage}.qe.w1"].values.shape[0]
    roi_feats = np.zeros((m_len, feat_dim))
    sel = np.zeros((m_len, 1))
    for m in range(m_len):
        picked = [patch_boxes[n] for n in np.flatnonzero(affinity[m] >= threshold)]
        if not picked:
            continue
        sel[m, 0] = 1.0
        box = merge_bboxes(picked)
        if roi_cache is None:
            roi_feats[m] = roi_align(image, box, out_size).reshape(-1)
        else:
            hit = roi_cache.get(box)
            if hit is None:
                hit = roi_align(image, box, out_size).reshape(-1)
                roi_cache[box] = hit
            roi_feats[m] = hit
    if not sel.any():
        return queries
    p = f"dec.s{stage}.qe"
    h = ad.relu(ad.add(ad.matmul(Tensor(roi_feats), store[f"{p}.w1"]), store[f"{p}.b1"]))
    region = ad.add(ad.matmul(h, store[f"{p}.w2"]), store[f"{p}.b2"])
    half = Tensor(0.5 * sel)
    keep = Tensor(1.0 - 0.5 * sel)
    return ad.add(ad.mul(queries, keep), ad.mul(region, half))


def classify(store, queries: Tensor, class_embs: np.ndarray) -> Tensor:
    """Scaled cosine scores (M, C) between projected queries and class embeddings."""
    proj = ad.add(ad.matmul(queries, store["dec.cls.w"]), store["dec.cls.b"])
    sq = ad.sum_(ad.mul(proj, proj), axis=1, keepdims=True)
    if np.any(sq.values <= 0.0):
        raise ValueError("zero-norm query embedding cannot be cosine-scored")
    unit = ad.div(proj, ad.pow_(sq, 0.5))
    embs = np.asarray(class_embs, dtype=np.float64)
    norms = np.linalg.norm(embs, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm class embedding")
    cos = ad.matmul(unit, Tensor((embs / norms).T))
    return ad.add(ad.div(cos, store["dec.cls.scale"]), store["dec.cls.bias"])


def project_class_queries(store, class_embs: np.ndarray) -> Tensor:
    """Semantic query vectors: learned projection of the class embeddings."""
    return ad.add(ad.matmul(Tensor(class_embs), store["dec.sem.w"]), store["dec.sem.b"])


def decode(
    store,
    patch_feats: Tensor,
    patch_boxes: list[BBox],
    image: np.ndarray,
    class_embs: np.ndarray,
    stages: int,
    heads: int,
    qe_out_size: int,
    extra_queries: Tensor | None = None,
    self_attn_mask: np.ndarray | None = None,
    use_dca: bool = True,
    use_stacking: bool = True,
    use_qe: bool = True,
    dca_threshold: float = 0.5,
    qe_threshold: float = 0.5,
) -> list[StageOutput]:
    """Run all decoder stages. Returns one output record per stage.

    `extra_queries` (for denoising training) are appended after the semantic
    and patch-initialized instance queries; `self_attn_mask` (M, M) blocks
    query-to-query attention where True.
    """
    n_patches = len(patch_boxes)
    dim = patch_feats.values.shape[1]
    sem = project_class_queries(store, class_embs)
    pos = np.stack(
        [position_embedding(b, image.shape[1], image.shape[0], dim) for b in patch_boxes]
    )
    inst = ad.add(patch_feats, Tensor(pos))
    parts = [sem, inst]
    if extra_queries is not None:
        parts.append(extra_queries)
    x = ad.concat(parts, axis=0)
    m_len = x.values.shape[0]

    affinity_prev = np.ones((m_len, n_patches))
    logits_prev: Tensor | None = None
    outputs: list[StageOutput] = []
    roi_cache: dict = {}
    for t in range(stages):
        p = f"dec.s{t}"
        h = ad.layer_norm(x, store[f"{p}.ln1.g"], store[f"{p}.ln1.b"])
        x = ad.add(x, _attention(store, f"{p}.self", h, h, h, heads, mask=self_attn_mask))
        h = ad.layer_norm(x, store[f"{p}.ln2.g"], store[f"{p}.ln2.b"])
        x = ad.add(x, dca(store, t, h, patch_feats, affinity_prev, heads,
                          threshold=dca_threshold, enabled=use_dca))
        h = ad.layer_norm(x, store[f"{p}.ln3.g"], store[f"{p}.ln3.b"])
        x = ad.add(x, _ffn(store, f"{p}.ffn", h))

        logits = affinity_similarity(store, t, x, patch_feats, heads, logits_prev, use_stacking)
        affinity = ad.sigmoid(logits)
        x = query_enhance(store, t, x, affinity.values, image, patch_boxes,
                          qe_out_size, threshold=qe_threshold, enabled=use_qe,
                          roi_cache=roi_cache)
        cls = classify(store, x, class_embs)

        outputs.append(StageOutput(queries=x, logits=logits, affinity=affinity, cls=cls))
        affinity_prev = affinity.values
        logits_prev = logits
    return outputs
