"""Plain binary dump of QTT cores (debugging and the ``ranks`` subcommand).

Layout, all little-endian: 4-byte tag ``QTTV`` or ``QTTM``; int64 ``L``;
``L + 1`` int64 ranks; then every core's entries, row-major, as float64.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .tensor import QttMatrix, QttVector

_TAGS = {QttVector: b"QTTV", QttMatrix: b"QTTM"}


def dumps(x: QttVector | QttMatrix) -> bytes:
    buf = io.BytesIO()
    buf.write(_TAGS[type(x)])
    buf.write(struct.pack("<q", x.level))
    buf.write(np.asarray(x.ranks, dtype="<i8").tobytes())
    for c in x.cores:
        buf.write(np.ascontiguousarray(c, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> QttVector | QttMatrix:
    tag = data[:4]
    kinds = {v: k for k, v in _TAGS.items()}
    if tag not in kinds:
        raise ValueError(f"unknown tag {tag!r}")
    cls = kinds[tag]
    (L,) = struct.unpack_from("<q", data, 4)
    off = 12
    ranks = np.frombuffer(data, dtype="<i8", count=L + 1, offset=off)
    off += 8 * (L + 1)
    modes = (2,) if cls is QttVector else (2, 2)
    cores = []
    for k in range(L):
        shape = (int(ranks[k]),) + modes + (int(ranks[k + 1]),)
        n = int(np.prod(shape))
        cores.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).copy())
        off += 8 * n
    if off != len(data):
        raise ValueError("trailing bytes in QTT dump")
    return cls(cores)


def save(path, x) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(x))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
