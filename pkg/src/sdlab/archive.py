"""Tensor archive I/O in the safetensors layout.

File = 8-byte little-endian u64 header length, a JSON header mapping each
tensor name to {"dtype", "shape", "data_offsets": [begin, end]} (offsets
relative to the payload start), an optional "__metadata__" string map, then
the raw row-major little-endian payload.
"""
import json
import struct
from dataclasses import dataclass, field

import numpy as np

_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "U8": np.dtype("u1"),
}
_BF16 = "BF16"


class ArchiveError(IOError):
    pass


class MalformedHeaderError(ArchiveError):
    pass


class OverlappingRangesError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


@dataclass
class Entry:
    dtype: str
    shape: tuple
    data_offsets: tuple


@dataclass
class TensorArchive:
    tensors: dict
    entries: dict
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)


_KIND = {("f", 8): "F64", ("f", 4): "F32", ("f", 2): "F16",
         ("i", 8): "I64", ("i", 4): "I32", ("u", 1): "U8"}


def _dtype_name(arr):
    try:
        return _KIND[(arr.dtype.kind, arr.dtype.itemsize)]
    except KeyError:
        raise ArchiveError(f"unsupported dtype {arr.dtype}") from None


def write_archive(path, tensors, metadata=None):
    header = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dname = _dtype_name(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dname]).tobytes()
        header[name] = {"dtype": dname, "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        blobs.append(raw)
        offset += len(raw)
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    hbytes = json.dumps(header, separators=(",", ":"), sort_keys=False).encode("utf-8")
    hbytes += b" " * (-len(hbytes) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def _bf16_to_f32(raw):
    u16 = np.frombuffer(raw, dtype="<u2").astype(np.uint32)
    return (u16 << 16).view(np.float32)


def read_archive(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise TruncatedArchiveError(f"{path}: file shorter than the 8-byte header length")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if hlen > len(blob) - 8:
        raise TruncatedArchiveError(f"{path}: header length {hlen} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")
    payload = memoryview(blob)[8 + hlen:]
    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict):
        raise MalformedHeaderError(f"{path}: __metadata__ must be an object")

    entries = {}
    for name, info in header.items():
        try:
            dname = info["dtype"]
            shape = tuple(int(s) for s in info["shape"])
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise MalformedHeaderError(f"{path}: bad header entry for {name!r}") from None
        if dname not in _DTYPES and dname != _BF16:
            raise MalformedHeaderError(f"{path}: unsupported dtype {dname!r} for {name!r}")
        itemsize = 2 if dname == _BF16 else _DTYPES[dname].itemsize
        if any(s < 0 for s in shape) or begin < 0 or end < begin:
            raise MalformedHeaderError(f"{path}: bad shape/offsets for {name!r}")
        if (end - begin) != int(np.prod(shape, dtype=np.int64)) * itemsize:
            raise MalformedHeaderError(f"{path}: byte range of {name!r} does not match its shape and dtype")
        if end > len(payload):
            raise TruncatedArchiveError(f"{path}: payload ends at {len(payload)} but {name!r} needs {end}")
        entries[name] = Entry(dname, shape, (begin, end))

    spans = sorted((e.data_offsets, n) for n, e in entries.items() if e.data_offsets[1] > e.data_offsets[0])
    for ((b0, e0), n0), ((b1, e1), n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise OverlappingRangesError(f"{path}: byte ranges of {n0!r} and {n1!r} overlap")

    tensors = {}
    for name, e in entries.items():
        raw = payload[e.data_offsets[0]:e.data_offsets[1]]
        if e.dtype == _BF16:
            arr = _bf16_to_f32(raw)
        elif e.dtype == "F16":
            arr = np.frombuffer(raw, dtype=_DTYPES["F16"]).astype(np.float32)
        else:
            arr = np.frombuffer(raw, dtype=_DTYPES[e.dtype]).copy()
        tensors[name] = arr.reshape(e.shape)
    return TensorArchive(tensors=tensors, entries=entries, metadata=metadata)
