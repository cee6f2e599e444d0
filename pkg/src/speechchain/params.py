"""Named parameter collections and the binary checkpoint container.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"SCCKPT\\x00\\x01"
    version    u32       format version, currently 1
    tag_len    u32       length of the UTF-8 model tag
    tag        bytes     model tag, e.g. "asr/1"
    count      u32       number of entries
    entries    count times:
        name_len  u16, name  UTF-8 bytes
        dtype     u8         0 = float64, 1 = float32
        ndim      u8
        shape     ndim x u32
        values    row-major little-endian floats

Entries are written in the collection's insertion order, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .autograd import Tensor

MAGIC = b"SCCKPT\x00\x01"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    pass


class ModelParameters:
    """Ordered name -> :class:`Tensor` mapping for one model."""

    def __init__(self, tag: str = "model/1"):
        self.tag = tag
        self._entries: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list:
        return list(self._entries)

    def num_values(self) -> int:
        return int(sum(t.size for t in self._entries.values()))

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def snapshot(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._entries.items())

    def restore(self, values: dict, exclude: Iterable[str] = (), strict: bool = True,
                grow: bool = False) -> list:
        """Copy arrays into matching parameters; returns the names loaded.

        Names starting with any prefix in ``exclude`` are skipped.  With
        ``grow`` a checkpoint array with fewer leading rows than the model
        fills only those rows (the rest keep their initialization); this is
        how a single-speaker model seeds one whose layer inputs gained
        speaker features at the end.
        """
        exclude = tuple(exclude)
        loaded = []
        for name, t in self._entries.items():
            if exclude and name.startswith(exclude):
                continue
            if name not in values:
                if strict:
                    raise CheckpointError(f"checkpoint lacks parameter {name!r}")
                continue
            arr = np.asarray(values[name])
            if grow and arr.ndim == t.ndim and arr.ndim >= 1 and arr.shape[1:] == t.shape[1:] \
                    and arr.shape[0] < t.shape[0]:
                data = t.data.copy()
                data[:arr.shape[0]] = arr
                t.data = data
                loaded.append(name)
                continue
            if arr.shape != t.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)
            loaded.append(name)
        if strict:
            extra = set(values) - set(self._entries)
            extra = {n for n in extra if not (exclude and n.startswith(exclude))}
            if extra:
                raise CheckpointError(f"checkpoint has unknown parameters {sorted(extra)}")
        return loaded

    def astype(self, dtype) -> None:
        for t in self._entries.values():
            t.data = t.data.astype(dtype)

    # -- serialization -------------------------------------------------------
    def to_bytes(self) -> bytes:
        return dumps(self.tag, self.snapshot())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def load(self, path, exclude: Iterable[str] = (), strict: bool = True,
             grow: bool = False) -> list:
        tag, values = loads(Path(path).read_bytes())
        if tag.split("/")[0] != self.tag.split("/")[0]:
            raise CheckpointError(f"checkpoint tag {tag!r} does not match model {self.tag!r}")
        return self.restore(values, exclude=exclude, strict=strict, grow=grow)


def dumps(tag: str, values: "OrderedDict[str, np.ndarray]") -> bytes:
    buf = io.BytesIO()
    tag_b = tag.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(tag_b)))
    buf.write(tag_b)
    buf.write(struct.pack("<I", len(values)))
    for name, arr in values.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(blob: bytes):
    """Parse a checkpoint; returns ``(tag, OrderedDict name -> array)``."""
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, tag_len = struct.unpack_from("<II", view, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    tag = bytes(view[pos:pos + tag_len]).decode("utf-8")
    pos += tag_len
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    values = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", view, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=pos).reshape(shape)
        pos += n * dtype.itemsize
        values[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return tag, values
