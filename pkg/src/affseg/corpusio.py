"""On-disk formats: corpus files, checkpoints, metric reports, loss logs.

Both binary formats open with a magic string and a version byte; readers
reject anything unknown. All multi-byte fields are little-endian, all float
payloads are raw IEEE bytes, so identical inputs produce identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import ParameterStore
from .masks import BinaryMask, pack_mask, unpack_mask
from .model import ModelDims
from .scenes import ClassEntry, ClassTable, CorpusConfig, GtInstance, Scene

CORPUS_MAGIC = b"AFSC"
CHECKPOINT_MAGIC = b"AFCK"
FORMAT_VERSION = 1


class DataFormatError(RuntimeError):
    pass


def _write_block(f, payload: bytes) -> None:
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataFormatError("file truncated")
    return data


def _read_block(f) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n)


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


# --- corpus ----------------------------------------------------------------------

def _table_to_dict(table: ClassTable) -> dict:
    return {
        "entries": [
            {
                "class_id": e.class_id,
                "name": e.name,
                "is_thing": e.is_thing,
                "embedding": [float(x) for x in e.embedding],
                "color": [float(x) for x in e.color],
            }
            for e in table.entries
        ]
    }


def _table_from_dict(data: dict) -> ClassTable:
    entries = [
        ClassEntry(
            class_id=int(e["class_id"]),
            name=str(e["name"]),
            is_thing=bool(e["is_thing"]),
            embedding=np.array(e["embedding"], dtype=np.float64),
            color=tuple(float(x) for x in e["color"]),
        )
        for e in data["entries"]
    ]
    return ClassTable(entries=entries)


def _mask_block(f):
    buf = _read_block(f)
    mask, end = unpack_mask(buf)
    if end != len(buf):
        raise DataFormatError("mask block has trailing bytes")
    return mask


def _write_scene(f, scene: Scene) -> None:
    h, w = scene.height, scene.width
    d = scene.embed_field.shape[2]
    f.write(struct.pack("<QHHH", scene.seed, h, w, d))
    f.write(np.ascontiguousarray(scene.image, dtype="<f4").tobytes())
    f.write(np.ascontiguousarray(scene.embed_field, dtype="<f4").tobytes())
    f.write(struct.pack("<H", len(scene.gt)))
    for g in scene.gt:
        f.write(struct.pack("<HB", g.class_id, 1 if g.is_thing else 0))
        _write_block(f, pack_mask(g.mask))
    f.write(struct.pack("<H", len(scene.patches)))
    for p in scene.patches:
        _write_block(f, pack_mask(p))


def _read_scene(f) -> Scene:
    seed, h, w, d = struct.unpack("<QHHH", _read_exact(f, 14))
    image = np.frombuffer(_read_exact(f, h * w * 3 * 4), dtype="<f4").reshape(h, w, 3)
    field = np.frombuffer(_read_exact(f, h * w * d * 4), dtype="<f4").reshape(h, w, d)
    (n_gt,) = struct.unpack("<H", _read_exact(f, 2))
    gt = []
    for _ in range(n_gt):
        class_id, thing = struct.unpack("<HB", _read_exact(f, 3))
        gt.append(GtInstance(_mask_block(f), class_id, bool(thing)))
    (n_p,) = struct.unpack("<H", _read_exact(f, 2))
    patches = [_mask_block(f) for _ in range(n_p)]
    return Scene(image=image.copy(), patches=patches, gt=gt,
                 embed_field=field.copy(), seed=seed)


def write_corpus(
    path: str,
    table: ClassTable,
    train: list[Scene],
    eval_: list[Scene],
    corpus_cfg_json: dict,
    seed: int,
) -> None:
    with open(path, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(struct.pack("<B", FORMAT_VERSION))
        header = {
            "table": _table_to_dict(table),
            "corpus_config": corpus_cfg_json,
            "seed": seed,
            "n_train": len(train),
            "n_eval": len(eval_),
        }
        _write_block(f, _json_bytes(header))
        for scene in train:
            _write_scene(f, scene)
        for scene in eval_:
            _write_scene(f, scene)


def read_corpus(path: str) -> tuple[ClassTable, list[Scene], list[Scene], dict]:
    """Returns (table, train scenes, eval scenes, header)."""
    try:
        f = open(path, "rb")
    except OSError as e:
        raise DataFormatError(f"cannot open corpus: {e}") from e
    with f:
        if _read_exact(f, 4) != CORPUS_MAGIC:
            raise DataFormatError("not a corpus file")
        (version,) = struct.unpack("<B", _read_exact(f, 1))
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported corpus version {version}")
        try:
            header = json.loads(_read_block(f).decode("utf-8"))
            table = _table_from_dict(header["table"])
            train = [_read_scene(f) for _ in range(header["n_train"])]
            eval_ = [_read_scene(f) for _ in range(header["n_eval"])]
        except (KeyError, ValueError, struct.error) as e:
            raise DataFormatError(f"corrupt corpus file: {e}") from e
        if f.read(1):
            raise DataFormatError("trailing bytes after corpus payload")
    return table, train, eval_, header


# --- checkpoint ---------------------------------------------------------------------

def write_checkpoint(
    path: str,
    store: ParameterStore,
    dims: ModelDims,
    meta: dict,
) -> None:
    state = store.state_dict()
    names = sorted(state)
    header = {
        "dims": {
            "dim": dims.dim, "heads": dims.heads, "stages": dims.stages,
            "roi_size": dims.roi_size, "embed_dim": dims.embed_dim,
        },
        "params": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "meta": meta,
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", FORMAT_VERSION))
        _write_block(f, _json_bytes(header))
        for n in names:
            f.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())


def read_checkpoint(path: str) -> tuple[dict, ModelDims, dict]:
    """Returns (state_dict, dims, meta)."""
    try:
        f = open(path, "rb")
    except OSError as e:
        raise DataFormatError(f"cannot open checkpoint: {e}") from e
    with f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise DataFormatError("not a checkpoint file")
        (version,) = struct.unpack("<B", _read_exact(f, 1))
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(_read_block(f).decode("utf-8"))
            d = header["dims"]
            dims = ModelDims(dim=d["dim"], heads=d["heads"], stages=d["stages"],
                             roi_size=d["roi_size"], embed_dim=d["embed_dim"])
            state = {}
            for rec in header["params"]:
                shape = tuple(rec["shape"])
                n_vals = int(np.prod(shape)) if shape else 1
                raw = _read_exact(f, 8 * n_vals)
                state[rec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        except (KeyError, ValueError, struct.error) as e:
            raise DataFormatError(f"corrupt checkpoint file: {e}") from e
        if f.read(1):
            raise DataFormatError("trailing bytes after checkpoint payload")
    return state, dims, header.get("meta", {})


# --- reports and logs ------------------------------------------------------------------

def write_report(path: str, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(report_text(report))


def report_text(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


class LossLog:
    """Append-only JSONL, one record per epoch."""

    def __init__(self, path: str) -> None:
        self.path = path
        self._f = open(path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "LossLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
