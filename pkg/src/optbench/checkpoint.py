"""OWB1 checkpoint container.

Layout::

    bytes 0-3   magic b"OWB1"
    bytes 4-7   header length, little-endian u32
    header      UTF-8 JSON {"tensors": [{name, shape, dtype, offset}], "meta": {...}}
    payload     raw little-endian f64 values; offsets are relative to payload start
"""
import json
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"OWB1"
META_KEYS = ("model", "optimizer", "lr", "wd", "seed", "epoch")


class CheckpointError(ValueError):
    pass


def encode(tensors, meta):
    index = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(data.shape), "dtype": "f64", "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"tensors": index, "meta": meta}, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def decode(blob):
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("not an OWB1 checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if 8 + hlen > len(blob):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
        entries = header["tensors"]
        meta = header.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    payload = memoryview(blob)[8 + hlen :]
    tensors = OrderedDict()
    for entry in entries:
        try:
            name, shape, offset = entry["name"], [int(s) for s in entry["shape"]], int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed tensor entry {entry!r}") from exc
        if entry.get("dtype", "f64") != "f64":
            raise CheckpointError(f"unsupported dtype {entry.get('dtype')!r}")
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if offset < 0 or end > len(payload):
            raise CheckpointError(f"tensor {name!r} exceeds payload")
        arr = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = arr
    return tensors, meta


def write_checkpoint(path, tensors, meta):
    with open(path, "wb") as fh:
        fh.write(encode(tensors, meta))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
