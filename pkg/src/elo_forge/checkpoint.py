"""
Binary checkpoint format (little-endian)::

    0   4 bytes   magic b"ELOF"
    4   u32       format version
    8   u64       metadata length M
    16  M bytes   UTF-8 JSON metadata
    ..  zero padding up to a multiple of 64
    P   payload   tensors at 64-byte aligned offsets relative to P

Metadata carries ``kind`` (full | elo_sub | delta), the model config, the
content fingerprint and a tensor index ``name -> {dtype, shape, offset,
length}``. Loading validates the header and the whole index against the file
size before any tensor is materialised, then re-checks the fingerprint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, FormatError
from .model import DecoderModel, ModelConfig, fingerprint_params
from .surgery import EloSubModel, LayerSelection, ParamDelta
from .tensor import Tensor

MAGIC = b"ELOF"
VERSION = 1
ALIGN = 64
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise FormatError(f"unsupported dtype {arr.dtype}")


def _pad(n: int) -> int:
    return (-n) % ALIGN


def _tensors_of(obj) -> tuple[str, dict[str, np.ndarray], dict]:
    if isinstance(obj, EloSubModel):
        meta = {
            "config": obj.model.config.to_dict(),
            "selection": list(obj.selection.indices),
            "source_fingerprint": obj.source_fingerprint,
            "lineage": obj.lineage,
            "train_emb_head": obj.train_emb_head,
        }
        return "elo_sub", {k: v.data for k, v in obj.model.params.items()}, meta
    if isinstance(obj, DecoderModel):
        return "full", {k: v.data for k, v in obj.params.items()}, {
            "config": obj.config.to_dict(), "lineage": obj.lineage}
    if isinstance(obj, ParamDelta):
        return "delta", dict(obj.entries), {
            "minuend_fingerprint": obj.minuend_fingerprint,
            "subtrahend_fingerprint": obj.subtrahend_fingerprint,
            "delta_meta": obj.meta,
        }
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def encode_checkpoint(obj, extra: dict | None = None) -> bytes:
    kind, tensors, meta = _tensors_of(obj)
    index, offset = {}, 0
    for name, arr in tensors.items():
        length = arr.size * arr.itemsize
        index[name] = {"dtype": _dtype_tag(arr), "shape": list(arr.shape), "offset": offset, "length": length}
        offset += length + _pad(length)
    meta.update({
        "kind": kind,
        "format_version": VERSION,
        "alignment": ALIGN,
        "fingerprint": fingerprint_params({k: Tensor(v) for k, v in tensors.items()}),
        "payload_length": offset,
        "tensors": index,
        "extra": extra or {},
    })
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    head = _HEADER.pack(MAGIC, VERSION, len(blob)) + blob
    parts = [head, b"\0" * _pad(len(head))]
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[index[name]["dtype"]]).tobytes()
        parts += [raw, b"\0" * _pad(len(raw))]
    return b"".join(parts)


def save_checkpoint(path: str | Path, obj, extra: dict | None = None) -> None:
    """Write atomically: temp file in the same directory, fsync, rename."""
    path = Path(path)
    data = encode_checkpoint(obj, extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc


def read_metadata(buf: bytes, path: str = "<bytes>") -> tuple[dict, int]:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a checkpoint header")
    magic, version, meta_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    end = _HEADER.size + meta_len
    if end > len(buf):
        raise CorruptCheckpoint(f"{path}: metadata extends past end of file")
    try:
        meta = json.loads(buf[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable metadata ({exc})") from None
    return meta, end + _pad(end)


def _validate_index(meta: dict, payload_start: int, file_len: int, path: str) -> list[tuple[str, dict]]:
    try:
        index = meta["tensors"]
        payload_len = int(meta["payload_length"])
        kind = meta["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: metadata missing field {exc}") from None
    if kind not in ("full", "elo_sub", "delta"):
        raise FormatError(f"{path}: unknown checkpoint kind {kind!r}")
    if payload_start + payload_len != file_len:
        raise CorruptCheckpoint(
            f"{path}: payload is {file_len - payload_start} bytes, index says {payload_len} (truncated?)")
    entries = sorted(index.items(), key=lambda kv: kv[1]["offset"])
    prev_end = 0
    for name, e in entries:
        dt = _DTYPES.get(e.get("dtype"))
        if dt is None:
            raise CorruptCheckpoint(f"{path}: {name}: bad dtype {e.get('dtype')!r}")
        shape = e["shape"]
        if not shape or any((not isinstance(s, int)) or s < 1 for s in shape):
            raise CorruptCheckpoint(f"{path}: {name}: bad shape {shape}")
        off, length = e["offset"], e["length"]
        if length != int(np.prod(shape)) * dt.itemsize:
            raise CorruptCheckpoint(f"{path}: {name}: length {length} does not match shape {shape}")
        if off % ALIGN or off < prev_end or off + length > payload_len:
            raise CorruptCheckpoint(f"{path}: {name}: offset {off} overlaps or leaves payload")
        prev_end = off + length
    return entries


def decode_checkpoint(buf: bytes, path: str = "<bytes>"):
    meta, start = read_metadata(buf, path)
    entries = _validate_index(meta, start, len(buf), path)
    arrays = {}
    for name, e in entries:
        dt = _DTYPES[e["dtype"]]
        raw = np.frombuffer(buf, dtype=dt, count=int(np.prod(e["shape"])), offset=start + e["offset"])
        arrays[name] = raw.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
    fp = fingerprint_params({k: Tensor(v) for k, v in arrays.items()})
    if fp != meta.get("fingerprint"):
        raise CorruptCheckpoint(f"{path}: content fingerprint mismatch")
    kind = meta["kind"]
    if kind == "delta":
        return ParamDelta(arrays, meta["minuend_fingerprint"], meta["subtrahend_fingerprint"],
                          meta.get("delta_meta", {}))
    config = ModelConfig(**meta["config"])
    params = {k: Tensor(v, name=k) for k, v in arrays.items()}
    model = DecoderModel(config, params, lineage=meta.get("lineage"))
    if kind == "full":
        return model
    return EloSubModel(model, LayerSelection(meta["selection"]), meta["source_fingerprint"],
                       meta["lineage"], bool(meta.get("train_emb_head", False)))


def load_checkpoint(path: str | Path):
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def load_extra(path: str | Path) -> dict:
    meta, _ = read_metadata(Path(path).read_bytes(), str(path))
    return meta.get("extra", {})
