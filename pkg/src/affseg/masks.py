"""Run-length encoded binary masks and box geometry.

Masks live in row-major pixel index space (index = y * width + x). Runs are
kept sorted, non-overlapping and maximally merged, so equality of mask objects
is equality of pixel sets. Boxes are half-open integer rectangles.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate geometry (empty mask where pixels are required)."""


@dataclass(frozen=True)
class BBox:
    """Half-open pixel rectangle: x in [x0, x1), y in [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise GeometryError(f"inverted box {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def as_cxcywh(self, width: int, height: int) -> tuple[float, float, float, float]:
        """Center/size form, normalized by the image extent to [0, 1]."""
        cx = 0.5 * (self.x0 + self.x1) / width
        cy = 0.5 * (self.y0 + self.y1) / height
        return (cx, cy, self.width / width, self.height / height)


class BinaryMask:
    """Immutable RLE mask over a width x height pixel grid."""

    __slots__ = ("width", "height", "runs", "_area")

    def __init__(self, width: int, height: int, runs: np.ndarray | list | tuple):
        if width <= 0 or height <= 0:
            raise GeometryError(f"bad grid {width}x{height}")
        arr = np.asarray(runs, dtype=np.int64).reshape(-1, 2)
        if arr.size:
            starts, lengths = arr[:, 0], arr[:, 1]
            if np.any(lengths <= 0):
                raise GeometryError("non-positive run length")
            if starts[0] < 0 or starts[-1] + lengths[-1] > width * height:
                raise GeometryError("run outside grid")
            # sorted, disjoint and non-adjacent: end of run i < start of run i+1
            if arr.shape[0] > 1:
                ends = starts[:-1] + lengths[:-1]
                if np.any(ends >= starts[1:]):
                    raise GeometryError("runs overlap, touch or are unsorted")
        arr.setflags(write=False)
        object.__setattr__(self, "width", int(width))
        object.__setattr__(self, "height", int(height))
        object.__setattr__(self, "runs", arr)
        object.__setattr__(self, "_area", int(arr[:, 1].sum()) if arr.size else 0)

    def __setattr__(self, name, value):  # pragma: no cover - guard only
        raise AttributeError("BinaryMask is immutable")

    @property
    def area(self) -> int:
        return self._area

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.runs.shape == other.runs.shape
            and bool(np.all(self.runs == other.runs))
        )

    def __hash__(self) -> int:
        return hash((self.width, self.height, self.runs.tobytes()))

    def __repr__(self) -> str:
        return f"BinaryMask({self.width}x{self.height}, {len(self.runs)} runs, area={self.area})"

    @classmethod
    def from_dense(cls, dense: np.ndarray, width: int | None = None, height: int | None = None) -> "BinaryMask":
        """Build from an H x W (or flat) boolean array."""
        dense = np.asarray(dense)
        if dense.ndim == 2:
            height, width = dense.shape
            flat = dense.reshape(-1).astype(bool)
        else:
            if width is None or height is None:
                raise GeometryError("flat input needs explicit width and height")
            flat = dense.astype(bool)
            if flat.size != width * height:
                raise GeometryError("flat size does not match grid")
        idx = np.flatnonzero(flat)
        if idx.size == 0:
            return cls(width, height, np.empty((0, 2), dtype=np.int64))
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = idx[np.concatenate(([0], breaks + 1))]
        ends = idx[np.concatenate((breaks, [idx.size - 1]))]
        runs = np.stack([starts, ends - starts + 1], axis=1)
        return cls(width, height, runs)

    @classmethod
    def from_indices(cls, width: int, height: int, indices: np.ndarray) -> "BinaryMask":
        flat = np.zeros(width * height, dtype=bool)
        flat[np.asarray(indices, dtype=np.int64)] = True
        return cls.from_dense(flat, width, height)

    def to_dense(self) -> np.ndarray:
        """Decode to an H x W boolean array."""
        flat = np.zeros(self.width * self.height, dtype=bool)
        for s, n in self.runs:
            flat[s : s + n] = True
        return flat.reshape(self.height, self.width)

    def indices(self) -> np.ndarray:
        """Sorted flat pixel indices."""
        if not len(self.runs):
            return np.empty(0, dtype=np.int64)
        parts = [np.arange(s, s + n, dtype=np.int64) for s, n in self.runs]
        return np.concatenate(parts)


def _check_same_grid(a: BinaryMask, b: BinaryMask) -> None:
    if a.width != b.width or a.height != b.height:
        raise GeometryError("masks live on different grids")


def intersect_area(a: BinaryMask, b: BinaryMask) -> int:
    """Intersection pixel count via a two-pointer sweep over sorted runs."""
    _check_same_grid(a, b)
    ra, rb = a.runs, b.runs
    i = j = 0
    total = 0
    na, nb = len(ra), len(rb)
    while i < na and j < nb:
        s1, n1 = ra[i]
        s2, n2 = rb[j]
        e1, e2 = s1 + n1, s2 + n2
        lo = s1 if s1 > s2 else s2
        hi = e1 if e1 < e2 else e2
        if hi > lo:
            total += hi - lo
        # advance the run that ends first
        if e1 <= e2:
            i += 1
        else:
            j += 1
    return int(total)


def union(masks: list[BinaryMask] | tuple[BinaryMask, ...]) -> BinaryMask:
    """Pixel-set union. Requires at least one mask."""
    if not masks:
        raise GeometryError("union of zero masks")
    first = masks[0]
    for m in masks[1:]:
        _check_same_grid(first, m)
    all_runs = np.concatenate([m.runs for m in masks], axis=0)
    if all_runs.size == 0:
        return BinaryMask(first.width, first.height, all_runs)
    order = np.argsort(all_runs[:, 0], kind="stable")
    all_runs = all_runs[order]
    merged: list[list[int]] = []
    for s, n in all_runs:
        e = s + n
        if merged and s <= merged[-1][1]:
            if e > merged[-1][1]:
                merged[-1][1] = e
        else:
            merged.append([s, e])
    runs = np.array([[s, e - s] for s, e in merged], dtype=np.int64)
    return BinaryMask(first.width, first.height, runs)


def iou_mask(a: BinaryMask, b: BinaryMask) -> float:
    _check_same_grid(a, b)
    inter = intersect_area(a, b)
    denom = a.area + b.area - inter
    if denom == 0:
        return 0.0
    return inter / denom


def iop_mask(patch: BinaryMask, target: BinaryMask) -> float:
    """Intersection over patch area. The patch must be non-empty."""
    if patch.area == 0:
        raise GeometryError("IoP with a zero-area patch")
    return intersect_area(patch, target) / patch.area


def bbox_of(mask: BinaryMask) -> BBox:
    """Tight half-open box around a non-empty mask."""
    if mask.area == 0:
        raise GeometryError("bbox of an empty mask")
    w = mask.width
    x_min, x_max = w, -1
    y_min, y_max = mask.height, -1
    for s, n in mask.runs:
        e = s + n - 1  # inclusive end index
        ys, ye = s // w, e // w
        y_min = min(y_min, int(ys))
        y_max = max(y_max, int(ye))
        if ys == ye:
            xs, xe = s % w, e % w
        else:
            # a run crossing a row boundary spans the full x extent
            xs, xe = 0, w - 1
        x_min = min(x_min, int(xs))
        x_max = max(x_max, int(xe))
    return BBox(x_min, y_min, x_max + 1, y_max + 1)


def merge_bboxes(boxes: list[BBox] | tuple[BBox, ...]) -> BBox:
    """Minimum box enclosing all inputs. Requires at least one box."""
    if not boxes:
        raise GeometryError("merge of zero boxes")
    return BBox(
        min(b.x0 for b in boxes),
        min(b.y0 for b in boxes),
        max(b.x1 for b in boxes),
        max(b.y1 for b in boxes),
    )


def _box_inter_area(a: BBox, b: BBox) -> int:
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    if w <= 0 or h <= 0:
        return 0
    return w * h


def iou_box(a: BBox, b: BBox) -> float:
    inter = _box_inter_area(a, b)
    denom = a.area + b.area - inter
    if denom == 0:
        raise GeometryError("IoU of two zero-area boxes")
    return inter / denom


def iop_box(patch: BBox, target: BBox) -> float:
    """Intersection over patch-box area. The patch box must be non-degenerate."""
    if patch.area == 0:
        raise GeometryError("IoP with a zero-area patch box")
    return _box_inter_area(patch, target) / patch.area


def giou_box(a: BBox, b: BBox) -> float:
    """Generalized IoU: IoU minus (hull minus union) over hull. Range [-1, 1]."""
    inter = _box_inter_area(a, b)
    union_area = a.area + b.area - inter
    if union_area == 0:
        raise GeometryError("gIoU of two zero-area boxes")
    hull = BBox(
        min(a.x0, b.x0), min(a.y0, b.y0), max(a.x1, b.x1), max(a.y1, b.y1)
    )
    iou = inter / union_area
    return iou - (hull.area - union_area) / hull.area


# --- binary serialization -------------------------------------------------
# Layout: width u32, height u32, run count u32, then (start u32, length u32)
# per run. Everything little-endian.

def pack_mask(mask: BinaryMask) -> bytes:
    head = struct.pack("<III", mask.width, mask.height, len(mask.runs))
    body = mask.runs.astype("<u4").tobytes()
    return head + body


def unpack_mask(buf: bytes, offset: int = 0) -> tuple[BinaryMask, int]:
    width, height, count = struct.unpack_from("<III", buf, offset)
    offset += 12
    runs = np.frombuffer(buf, dtype="<u4", count=2 * count, offset=offset)
    offset += 8 * count
    mask = BinaryMask(width, height, runs.reshape(-1, 2).astype(np.int64))
    return mask, offset
