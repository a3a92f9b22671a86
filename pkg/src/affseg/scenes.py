"""Synthetic scene corpus: images, ground truth, patch proposals.

Scenes are small RGB grids fully tiled by ground-truth regions: thing
instances (rectangles, ellipses, L-shapes) painted over stuff bands that fill
the background. Patch proposals come from Voronoi over-segmentation of each
ground-truth region, optionally corrupted (drops, cross-region merges,
boundary jitter) to mimic an imperfect upstream mask proposer. A per-pixel
embedding field stands in for a text-image embedding model: each pixel holds
its class embedding plus Gaussian noise.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .masks import BinaryMask

_MAX_PLACE_TRIES = 200
_MAX_SCENE_TRIES = 64


class LayoutError(RuntimeError):
    """Scene constraints cannot be satisfied within bounded retries."""


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    name: str
    is_thing: bool
    embedding: np.ndarray  # unit-norm, shape (embed_dim,)
    color: tuple[float, float, float]


@dataclass(frozen=True)
class ClassTable:
    entries: tuple[ClassEntry, ...]

    def __post_init__(self) -> None:
        for i, e in enumerate(self.entries):
            if e.class_id != i:
                raise ValueError("class ids must be dense and ordered")
            n = float(np.linalg.norm(e.embedding))
            if abs(n - 1.0) > 1e-6:
                raise ValueError(f"class {i} embedding is not unit norm")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def thing_ids(self) -> tuple[int, ...]:
        return tuple(e.class_id for e in self.entries if e.is_thing)

    @property
    def stuff_ids(self) -> tuple[int, ...]:
        return tuple(e.class_id for e in self.entries if not e.is_thing)

    def embedding_matrix(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries]).astype(np.float64)

    def is_thing(self, class_id: int) -> bool:
        return self.entries[class_id].is_thing


@dataclass(frozen=True)
class GtInstance:
    mask: BinaryMask
    class_id: int
    is_thing: bool


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    patches: list[BinaryMask]
    gt: list[GtInstance]
    embed_field: np.ndarray  # (H, W, embed_dim) float32
    seed: int

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class CorpusConfig:
    height: int = 64
    width: int = 64
    n_thing: int = 4
    n_stuff: int = 2
    embed_dim: int = 32
    n_train: int = 500
    n_eval: int = 100
    held_out: tuple[int, ...] = ()
    min_instances: int = 2
    max_instances: int = 4
    min_extent: int = 12
    max_extent: int = 24
    min_overseg: int = 1
    max_overseg: int = 3
    color_noise: float = 0.02
    tint_scale: float = 0.12
    embed_noise: float = 0.35
    embed_offset: float = 0.0  # per-region constant shift; survives mask pooling
    drop_rate: float = 0.0
    drop_rate_per_class: dict[int, float] = field(default_factory=dict)
    merge_rate: float = 0.0
    jitter_rate: float = 0.0
    jitter_px: int = 2

    def validate(self) -> None:
        if self.n_thing < 1 or self.n_stuff < 1:
            raise ValueError("need at least one thing and one stuff class")
        n = self.n_thing + self.n_stuff
        for c in self.held_out:
            if not 0 <= c < n:
                raise ValueError(f"held-out id {c} outside class table")
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ValueError("bad instance count range")
        if self.min_overseg < 1 or self.max_overseg < self.min_overseg:
            raise ValueError("bad over-segmentation range")
        if self.max_extent > min(self.height, self.width):
            raise ValueError("max extent exceeds the grid")
        if self.min_extent < 4:
            raise ValueError("instances below 4 px are degenerate")


def make_class_table(cfg: CorpusConfig, seed: int) -> ClassTable:
    """Deterministic class table: spaced hues, random unit embeddings."""
    cfg.validate()
    n = cfg.n_thing + cfg.n_stuff
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A55]))
    emb = rng.normal(size=(n, cfg.embed_dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    entries = []
    for i in range(n):
        is_thing = i < cfg.n_thing
        hue = i / n
        sat, val = (0.70, 0.85) if is_thing else (0.45, 0.55)
        color = colorsys.hsv_to_rgb(hue, sat, val)
        name = f"thing{i}" if is_thing else f"stuff{i - cfg.n_thing}"
        entries.append(ClassEntry(i, name, is_thing, emb[i].copy(), color))
    return ClassTable(tuple(entries))


# --- shape placement --------------------------------------------------------

def _draw_shape(rng: np.random.Generator, h: int, w: int, min_ext: int, max_ext: int) -> np.ndarray:
    """One random thing silhouette as a dense bool grid."""
    kind = rng.integers(0, 3)
    sh = int(rng.integers(min_ext, max_ext + 1))
    sw = int(rng.integers(min_ext, max_ext + 1))
    y0 = int(rng.integers(0, h - sh + 1))
    x0 = int(rng.integers(0, w - sw + 1))
    dense = np.zeros((h, w), dtype=bool)
    if kind == 0:  # rectangle
        dense[y0 : y0 + sh, x0 : x0 + sw] = True
    elif kind == 1:  # ellipse
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = y0 + sh / 2, x0 + sw / 2
        dense[((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0] = True
    else:  # L-shape: rectangle minus one corner quadrant
        dense[y0 : y0 + sh, x0 : x0 + sw] = True
        corner = rng.integers(0, 4)
        hy, hx = sh // 2, sw // 2
        if corner == 0:
            dense[y0 : y0 + hy, x0 : x0 + hx] = False
        elif corner == 1:
            dense[y0 : y0 + hy, x0 + hx : x0 + sw] = False
        elif corner == 2:
            dense[y0 + hy : y0 + sh, x0 : x0 + hx] = False
        else:
            dense[y0 + hy : y0 + sh, x0 + hx : x0 + sw] = False
    return dense


def oversegment(mask: BinaryMask, k: int, seed) -> list[BinaryMask]:
    """Split a mask into k non-empty parts by Voronoi cells of k seed pixels.

    `seed` is an int or a numpy Generator. k = 1 returns the mask itself.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if k == 1:
        return [mask]
    if k > mask.area:
        raise ValueError("more parts than pixels")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = mask.indices()
    ys, xs = idx // mask.width, idx % mask.width
    pick = rng.choice(idx.size, size=k, replace=False)
    sy, sx = ys[pick], xs[pick]
    d2 = (ys[:, None] - sy[None, :]) ** 2 + (xs[:, None] - sx[None, :]) ** 2
    owner = np.argmin(d2, axis=1)  # ties go to the lowest seed index
    parts = []
    for j in range(k):
        parts.append(BinaryMask.from_indices(mask.width, mask.height, idx[owner == j]))
    return parts


def _shift_mask(mask: BinaryMask, dy: int, dx: int) -> BinaryMask:
    dense = mask.to_dense()
    out = np.zeros_like(dense)
    h, w = dense.shape
    ys0, ys1 = max(0, dy), min(h, h + dy)
    xs0, xs1 = max(0, dx), min(w, w + dx)
    out[ys0:ys1, xs0:xs1] = dense[ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx]
    return BinaryMask.from_dense(out)


def _patch_owner(patch: BinaryMask, gt: list[GtInstance]) -> int:
    """Index of the gt region with the largest pixel overlap."""
    from .masks import intersect_area

    best, best_i = -1, 0
    for i, g in enumerate(gt):
        ov = intersect_area(patch, g.mask)
        if ov > best:
            best, best_i = ov, i
    return best_i


def corrupt_patches(
    patches: list[BinaryMask],
    gt: list[GtInstance],
    cfg: CorpusConfig,
    rng: np.random.Generator,
) -> list[BinaryMask]:
    """Degrade a patch set: class-targeted drops, cross-region merges, jitter."""
    owners = [_patch_owner(p, gt) for p in patches]

    kept: list[BinaryMask] = []
    kept_owner: list[int] = []
    for p, o in zip(patches, owners):
        rate = cfg.drop_rate_per_class.get(gt[o].class_id, cfg.drop_rate)
        if rng.random() < rate:
            continue
        kept.append(p)
        kept_owner.append(o)

    if cfg.merge_rate > 0 and len(kept) > 1:
        from .masks import bbox_of, union

        consumed = [False] * len(kept)
        merged: list[BinaryMask] = []
        merged_owner: list[int] = []
        for i in range(len(kept)):
            if consumed[i]:
                continue
            partner = -1
            if rng.random() < cfg.merge_rate:
                bi = bbox_of(kept[i])
                for j in range(i + 1, len(kept)):
                    if consumed[j] or kept_owner[j] == kept_owner[i]:
                        continue
                    bj = bbox_of(kept[j])
                    gap_x = max(bi.x0, bj.x0) - min(bi.x1, bj.x1)
                    gap_y = max(bi.y0, bj.y0) - min(bi.y1, bj.y1)
                    if gap_x <= 2 and gap_y <= 2:  # near-adjacent boxes only
                        partner = j
                        break
            consumed[i] = True
            if partner >= 0:
                consumed[partner] = True
                merged.append(union([kept[i], kept[partner]]))
            else:
                merged.append(kept[i])
            merged_owner.append(kept_owner[i])
        kept, kept_owner = merged, merged_owner

    if cfg.jitter_rate > 0:
        out = []
        for p in kept:
            if rng.random() < cfg.jitter_rate:
                dy = int(rng.integers(-cfg.jitter_px, cfg.jitter_px + 1))
                dx = int(rng.integers(-cfg.jitter_px, cfg.jitter_px + 1))
                shifted = _shift_mask(p, dy, dx)
                p = shifted if shifted.area > 0 else p
            out.append(p)
        kept = out

    return kept


def scene_seed_for(corpus_seed: int, split: str, index: int, attempt: int = 0) -> int:
    """Seed for one scene slot. `attempt` > 0 re-keys the slot when a layout
    draw fails; attempt 0 keeps the original derivation so existing corpora
    reproduce byte-for-byte."""
    tag = {"train": 0, "eval": 1}[split]
    words = [corpus_seed, tag, index] if attempt == 0 else [corpus_seed, tag, index, attempt]
    ss = np.random.SeedSequence(words)
    return int(ss.generate_state(1, np.uint64)[0])


def generate_scene(
    cfg: CorpusConfig,
    table: ClassTable,
    scene_seed: int,
    allowed: tuple[int, ...] | None = None,
) -> Scene:
    """One scene from its seed. `allowed` restricts the sampled class pool."""
    rng = np.random.default_rng(scene_seed)
    h, w = cfg.height, cfg.width
    allowed = tuple(range(len(table))) if allowed is None else allowed
    things = [c for c in table.thing_ids if c in allowed]
    stuffs = [c for c in table.stuff_ids if c in allowed]
    if not things or not stuffs:
        raise LayoutError("class pool lacks a thing or a stuff class")

    # place non-overlapping thing silhouettes
    n_inst = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    occupied = np.zeros((h, w), dtype=bool)
    thing_masks: list[np.ndarray] = []
    thing_classes: list[int] = []
    for _ in range(n_inst):
        placed = False
        for _try in range(_MAX_PLACE_TRIES):
            dense = _draw_shape(rng, h, w, cfg.min_extent, cfg.max_extent)
            if not (dense & occupied).any():
                occupied |= dense
                thing_masks.append(dense)
                thing_classes.append(int(rng.choice(things)))
                placed = True
                break
        if not placed:
            raise LayoutError("could not place a thing instance")

    # stuff bands fill whatever the things left uncovered
    n_bands = 1 if len(stuffs) == 1 else int(rng.integers(1, 3))
    band_classes = [int(c) for c in rng.choice(stuffs, size=n_bands, replace=False)]
    bands = []
    if n_bands == 1:
        bands.append(~occupied)
    else:
        split_row = int(rng.integers(h // 4, 3 * h // 4))
        top = np.zeros((h, w), dtype=bool)
        top[:split_row] = True
        bands.append(top & ~occupied)
        bands.append(~top & ~occupied)
    stuff_masks, stuff_classes = [], []
    for dense, c in zip(bands, band_classes):
        if dense.any():  # a band fully covered by things just vanishes
            stuff_masks.append(dense)
            stuff_classes.append(c)
    if not stuff_masks:
        raise LayoutError("things covered the whole scene")

    gt: list[GtInstance] = []
    for dense, c in zip(thing_masks, thing_classes):
        gt.append(GtInstance(BinaryMask.from_dense(dense), c, True))
    for dense, c in zip(stuff_masks, stuff_classes):
        gt.append(GtInstance(BinaryMask.from_dense(dense), c, False))

    # paint: class base color + per-instance tint + pixel noise
    image = np.zeros((h, w, 3), dtype=np.float64)
    for inst in gt:
        base = np.array(table.entries[inst.class_id].color)
        tint = rng.uniform(-cfg.tint_scale, cfg.tint_scale, size=3)
        dense = inst.mask.to_dense()
        image[dense] = base + tint
    if cfg.color_noise > 0:
        image += rng.normal(0.0, cfg.color_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    # per-pixel class embedding plus noise; the optional per-region offset is
    # constant over each instance so it does not average away under pooling
    field = np.zeros((h, w, cfg.embed_dim), dtype=np.float64)
    for inst in gt:
        dense = inst.mask.to_dense()
        vec = np.asarray(table.entries[inst.class_id].embedding, dtype=np.float64)
        if cfg.embed_offset > 0:
            vec = vec + rng.normal(0.0, cfg.embed_offset, size=cfg.embed_dim)
        field[dense] = vec
    if cfg.embed_noise > 0:
        field += rng.normal(0.0, cfg.embed_noise, size=field.shape)
    field = field.astype(np.float32)

    patches: list[BinaryMask] = []
    for inst in gt:
        k = int(rng.integers(cfg.min_overseg, cfg.max_overseg + 1))
        k = min(k, inst.mask.area)
        patches.extend(oversegment(inst.mask, k, rng))

    if cfg.drop_rate or cfg.drop_rate_per_class or cfg.merge_rate or cfg.jitter_rate:
        patches = corrupt_patches(patches, gt, cfg, rng)
    if not patches:
        raise LayoutError("corruption removed every patch")

    return Scene(image=image, patches=patches, gt=gt, embed_field=field, seed=scene_seed)


def generate_corpus(cfg: CorpusConfig, table: ClassTable, seed: int, split: str) -> list[Scene]:
    """All scenes of one split. Train scenes never contain held-out classes."""
    cfg.validate()
    n = cfg.n_train if split == "train" else cfg.n_eval
    if split == "train":
        allowed = tuple(c for c in range(len(table)) if c not in cfg.held_out)
    else:
        allowed = tuple(range(len(table)))
    scenes = []
    for i in range(n):
        last: LayoutError | None = None
        for attempt in range(_MAX_SCENE_TRIES):
            try:
                scenes.append(
                    generate_scene(cfg, table, scene_seed_for(seed, split, i, attempt), allowed)
                )
                break
            except LayoutError as err:
                last = err
        else:
            raise LayoutError(f"scene {i} of split {split!r} failed {_MAX_SCENE_TRIES} layouts: {last}")
    return scenes
