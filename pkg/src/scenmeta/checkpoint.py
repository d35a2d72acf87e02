"""Binary checkpoint container for meta-parameters and adapted recommenders.

Layout: 6-byte magic ``S2META``, a 1-byte format version, a 4-byte
little-endian length followed by a UTF-8 JSON descriptor, then each array
as an 8-byte little-endian payload length followed by raw little-endian
float64 bytes.  The descriptor lists every array's key path and shape in
the exact order the payloads appear, so round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import controllers as ctrl
from .metatrain import MetaParams
from .recnet import RecommenderParams

MAGIC = b"S2META"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _flatten_meta(meta):
    entries = []
    for name, arr in meta.init.items():
        entries.append((f"init/{name}", arr))
    for name, upd in meta.update.items():
        for key in ctrl.UPDATE_KEYS:
            entries.append((f"update/{name}/{key}", upd.arrays[key]))
    for key in ctrl.STOP_KEYS:
        entries.append((f"stop/{key}", meta.stop.arrays[key]))
    return entries


def _flatten_recommender(params):
    return [(f"groups/{name}", arr) for name, arr in params.groups.items()]


def _write(path, kind, header_extra, entries):
    descriptor = {
        "kind": kind,
        "arrays": [{"key": k, "shape": list(a.shape)} for k, a in entries],
    }
    descriptor.update(header_extra)
    desc_bytes = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(desc_bytes)))
        fh.write(desc_bytes)
        for _, arr in entries:
            payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def _read(path, expected_kind):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (dlen,) = struct.unpack("<I", fh.read(4))
        descriptor = json.loads(fh.read(dlen).decode("utf-8"))
        if descriptor.get("kind") != expected_kind:
            raise CheckpointError(
                f"{path}: expected {expected_kind} checkpoint, got {descriptor.get('kind')!r}"
            )
        arrays = {}
        for spec in descriptor["arrays"]:
            (plen,) = struct.unpack("<Q", fh.read(8))
            raw = fh.read(plen)
            if len(raw) != plen:
                raise CheckpointError(f"{path}: truncated payload for {spec['key']}")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(spec["shape"])
            arrays[spec["key"]] = arr
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last payload")
    return descriptor, arrays


def save_meta(path, meta):
    _write(
        path,
        "meta",
        {"architecture": meta.architecture, "dimension": meta.dimension,
         "groups": list(meta.init)},
        _flatten_meta(meta),
    )


def load_meta(path):
    descriptor, arrays = _read(path, "meta")
    names = descriptor["groups"]
    init = {name: arrays[f"init/{name}"] for name in names}
    update = {
        name: ctrl.UpdateControllerParams(
            {key: arrays[f"update/{name}/{key}"] for key in ctrl.UPDATE_KEYS}
        )
        for name in names
    }
    stop = ctrl.StopControllerParams({key: arrays[f"stop/{key}"] for key in ctrl.STOP_KEYS})
    return MetaParams(descriptor["architecture"], descriptor["dimension"], init, update, stop)


def save_recommender(path, params):
    _write(path, "recommender", {"architecture": params.architecture},
           _flatten_recommender(params))


def load_recommender(path):
    descriptor, arrays = _read(path, "recommender")
    groups = {k.split("/", 1)[1]: v for k, v in arrays.items()}
    return RecommenderParams(descriptor["architecture"], groups)
