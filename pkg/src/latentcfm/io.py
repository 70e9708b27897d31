"""On-disk formats: a tagged binary array container, atomic writes and CSV.

Container layout::

    b"LCFM" | uint32 format version | uint64 header length | JSON header | payload

The JSON header carries free-form metadata plus an ``arrays`` table of
``{name, dtype, shape, offset}`` entries pointing into the payload.  All
numbers in the payload are little-endian (``<f8`` or ``<i8``).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"LCFM"
FORMAT_VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)!r}")


def encode_container(meta: dict, arrays: dict) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"version": FORMAT_VERSION, "meta": meta, "arrays": table}
    hbytes = json.dumps(header, sort_keys=True, default=_json_default).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for c in chunks:
        buf.write(c)
    return buf.getvalue()


def decode_container(data: bytes):
    if data[:4] != MAGIC:
        raise FormatError("not an LCFM container (bad magic)")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        dt = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype=dt, count=count, offset=start).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return header["meta"], arrays


def save_container(path, meta: dict, arrays: dict):
    atomic_write_bytes(path, encode_container(meta, arrays))


def load_container(path):
    with open(path, "rb") as fh:
        return decode_container(fh.read())


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def write_csv(path, rows, fieldnames):
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, out.getvalue())


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
