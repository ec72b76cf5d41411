"""Binary container for observed frequency-domain data.

Layout (little endian)::

    b"WIPD"  u32 version=1  u32 n_freq  u32 n_src  u32 n_rec
    complex values as interleaved (re, im) f64, ordered (freq, src, rec)

Frequencies are not stored; they come from the experiment configuration and
are matched against ``n_freq`` when reading.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grid import ModelFormatError
from .inversion import Dataset

DATA_MAGIC = b"WIPD"
DATA_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def write_data(path, data: Dataset) -> None:
    nf, ns, nr = data.values.shape
    payload = np.ascontiguousarray(data.values, dtype="<c16").tobytes()
    Path(path).write_bytes(_HEADER.pack(DATA_MAGIC, DATA_VERSION, nf, ns, nr) + payload)


def read_data(path, frequencies) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ModelFormatError(f"{path}: truncated header")
    magic, version, nf, ns, nr = _HEADER.unpack_from(raw)
    if magic != DATA_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}, expected {DATA_MAGIC!r}")
    if version != DATA_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    expected = nf * ns * nr * 16
    if len(raw) - _HEADER.size != expected:
        raise ModelFormatError(
            f"{path}: payload has {len(raw) - _HEADER.size} bytes, header implies {expected}")
    freqs = np.asarray(frequencies, dtype=float).ravel()
    if freqs.size != nf:
        raise ModelFormatError(
            f"{path}: file holds {nf} frequencies, configuration lists {freqs.size}")
    values = np.frombuffer(raw, dtype="<c16", offset=_HEADER.size).reshape(nf, ns, nr)
    if not np.all(np.isfinite(values)):
        raise ModelFormatError(f"{path}: non-finite data values")
    return Dataset(freqs, values.astype(complex))
