"""Single-file checkpoints: a json header followed by little-endian float64 arrays.

Layout: 8-byte magic, 8-byte little-endian header length, utf-8 json header,
then every array's raw bytes in header order. The header stores names, shapes
and whatever metadata is needed to rebuild the model.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADARECK1"


def save_arrays(path, arrays: dict, meta: dict) -> None:
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_arrays(path) -> tuple:
    """Return ``(arrays, meta)``; raises ValueError on a malformed file."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    offset = 16 + n
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, header["meta"]


def save_teacher(path, model) -> None:
    meta = {"kind": "teacher", "config": model.config.to_json(), "n_items": model.n_items,
            "max_len": model.max_len}
    save_arrays(path, model.state(), meta)


def load_teacher(path):
    from .teacher import TeacherConfig, TeacherModel

    arrays, meta = load_arrays(path)
    if meta.get("kind") != "teacher":
        raise ValueError(f"{path}: not a teacher checkpoint")
    model = TeacherModel(TeacherConfig(**meta["config"]), meta["n_items"], meta["max_len"])
    model.load_state(arrays)
    model.freeze()
    return model


def save_student(path, model, projection=None) -> None:
    meta = {"kind": "student", "n_items": model.n_items, "d": model.d, "k_blocks": model.k_blocks,
            "cell": model.cell.to_json() if model.cell is not None else None, "m": model.m}
    arrays = dict(model.state())
    if projection is not None:
        arrays["proj.w_e"] = projection.w_e.data
        arrays["proj.w_h"] = projection.w_h.data
    save_arrays(path, arrays, meta)


def load_student(path):
    """Return the frozen student; projection matrices, if stored, are dropped."""
    from .search_space import DiscreteCell, StudentModel

    arrays, meta = load_arrays(path)
    if meta.get("kind") != "student":
        raise ValueError(f"{path}: not a student checkpoint")
    cell = DiscreteCell.from_json(meta["cell"]) if meta["cell"] is not None else None
    model = StudentModel(meta["n_items"], meta["d"], meta["k_blocks"], meta["m"], cell=cell)
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("proj.")})
    model.freeze()
    return model
