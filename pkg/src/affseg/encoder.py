"""Patch feature extraction and the self-attention patch encoder.

Each patch proposal is turned into a fixed-size descriptor by bilinear RoI
sampling over its bounding box, gated by the patch mask (background pixels
inside the box are zeroed), flattened, projected to the model width, summed
with a sinusoidal embedding of the normalized box, and refined by a pre-norm
self-attention stack so patch features can exchange scene context.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masks import BBox, BinaryMask, bbox_of


def roi_align(grid: np.ndarray, box: BBox, out_size: int) -> np.ndarray:
    """Bilinear resample of a (H, W, C) grid over a box to (S, S, C).

    Sample points sit at the centers of an S x S lattice inside the box;
    pixel centers are at half-integer coordinates. A box equal to the full
    grid with out_size == grid size reproduces the grid exactly.
    """
    if box.area == 0:
        raise ValueError("RoI over a zero-area box")
    h, w = grid.shape[:2]
    s = out_size
    xs = box.x0 + (np.arange(s) + 0.5) * box.width / s
    ys = box.y0 + (np.arange(s) + 0.5) * box.height / s
    u = xs - 0.5  # continuous coords in pixel-center space
    v = ys - 0.5

    u0 = np.clip(np.floor(u), 0, w - 1).astype(np.int64)
    v0 = np.clip(np.floor(v), 0, h - 1).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = np.clip(u - u0, 0.0, 1.0)
    fv = np.clip(v - v0, 0.0, 1.0)

    g = grid.astype(np.float64)
    top = g[v0[:, None], u0[None, :]] * (1 - fu)[None, :, None] + g[v0[:, None], u1[None, :]] * fu[None, :, None]
    bot = g[v1[:, None], u0[None, :]] * (1 - fu)[None, :, None] + g[v1[:, None], u1[None, :]] * fu[None, :, None]
    return top * (1 - fv)[:, None, None] + bot * fv[:, None, None]


def mask_roi(grid: np.ndarray, mask: BinaryMask, box: BBox, out_size: int) -> np.ndarray:
    """RoI features with off-mask cells zeroed.

    The mask is resampled nearest-neighbor onto the same S x S lattice and
    multiplied in, so the descriptor carries the patch shape, not just its box.
    """
    roi = roi_align(grid, box, out_size)
    s = out_size
    px = np.clip(np.floor(box.x0 + (np.arange(s) + 0.5) * box.width / s), 0, mask.width - 1).astype(np.int64)
    py = np.clip(np.floor(box.y0 + (np.arange(s) + 0.5) * box.height / s), 0, mask.height - 1).astype(np.int64)
    dense = mask.to_dense()
    gate = dense[py[:, None], px[None, :]]
    return roi * gate[:, :, None]


def position_embedding(box: BBox, width: int, height: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of the normalized (cx, cy, w, h) box, length dim."""
    if dim % 4:
        raise ValueError("embedding dim must be divisible by 4")
    per = dim // 4
    coords = np.array(box.as_cxcywh(width, height), dtype=np.float64)
    idx = np.arange(per)
    dim_t = temperature ** (2.0 * (idx // 2) / per)
    args = coords[:, None] * (2.0 * np.pi) / dim_t[None, :]
    emb = np.where(idx % 2 == 0, np.sin(args), np.cos(args))
    return emb.reshape(-1)


def patch_descriptors(
    image: np.ndarray,
    patches: list[BinaryMask],
    out_size: int,
    dim: int,
    use_mask_gate: bool = True,
) -> tuple[np.ndarray, np.ndarray, list[BBox]]:
    """Constant per-patch inputs: flat RoI features, position embeddings, boxes."""
    feats, pos, boxes = [], [], []
    h, w = image.shape[:2]
    for p in patches:
        box = bbox_of(p)
        if use_mask_gate:
            roi = mask_roi(image, p, box, out_size)
        else:
            roi = roi_align(image, box, out_size)
        feats.append(roi.reshape(-1))
        pos.append(position_embedding(box, w, h, dim))
        boxes.append(box)
    return np.stack(feats), np.stack(pos), boxes


# --- trainable encoder -------------------------------------------------------

def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _add_attention_params(store, prefix: str, dim: int, rng) -> None:
    for n in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{n}", xavier(rng, dim, dim))
    for n in ("bq", "bk", "bv", "bo"):
        store.add(f"{prefix}.{n}", np.zeros(dim))


def _add_ln_params(store, prefix: str, dim: int) -> None:
    store.add(f"{prefix}.g", np.ones(dim))
    store.add(f"{prefix}.b", np.zeros(dim))


def init_encoder_params(store, feat_dim: int, dim: int, layers: int, rng) -> None:
    store.add("enc.in.w1", xavier(rng, feat_dim, dim))
    store.add("enc.in.b1", np.zeros(dim))
    store.add("enc.in.w2", xavier(rng, dim, dim))
    store.add("enc.in.b2", np.zeros(dim))
    hidden = 2 * dim
    for i in range(layers):
        p = f"enc.l{i}"
        _add_ln_params(store, f"{p}.ln1", dim)
        _add_attention_params(store, f"{p}.attn", dim, rng)
        _add_ln_params(store, f"{p}.ln2", dim)
        store.add(f"{p}.ffn.w1", xavier(rng, dim, hidden))
        store.add(f"{p}.ffn.b1", np.zeros(hidden))
        store.add(f"{p}.ffn.w2", xavier(rng, hidden, dim))
        store.add(f"{p}.ffn.b2", np.zeros(dim))


def _attention(store, prefix: str, q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None) -> Tensor:
    return ad.multi_head_attention(
        q, k, v, heads,
        store[f"{prefix}.wq"], store[f"{prefix}.bq"],
        store[f"{prefix}.wk"], store[f"{prefix}.bk"],
        store[f"{prefix}.wv"], store[f"{prefix}.bv"],
        store[f"{prefix}.wo"], store[f"{prefix}.bo"],
        attn_mask=mask,
    )


def _ffn(store, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, store[f"{prefix}.w1"]), store[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, store[f"{prefix}.w2"]), store[f"{prefix}.b2"])


def encode_patches(
    store,
    feats: np.ndarray,
    pos: np.ndarray,
    layers: int,
    heads: int,
) -> Tensor:
    """(N, F) constant descriptors -> (N, D) contextual patch features."""
    x = Tensor(feats)
    w1, b1 = store["enc.in.w1"], store["enc.in.b1"]
    w2, b2 = store["enc.in.w2"], store["enc.in.b2"]
    x = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(x, w1), b1)), w2), b2)
    x = ad.add(x, Tensor(pos))
    for i in range(layers):
        p = f"enc.l{i}"
        h = ad.layer_norm(x, store[f"{p}.ln1.g"], store[f"{p}.ln1.b"])
        x = ad.add(x, _attention(store, f"{p}.attn", h, h, h, heads))
        h = ad.layer_norm(x, store[f"{p}.ln2.g"], store[f"{p}.ln2.b"])
        x = ad.add(x, _ffn(store, f"{p}.ffn", h))
    return x
