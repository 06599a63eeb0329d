"""Bit-exact matrix serialization helpers.

Complex matrices are stored row-major as ``[re, im]`` pairs of C99 hex
float strings (``float.hex()``), which round-trip doubles exactly and
stay readable in a diff.
"""

from __future__ import annotations

import numpy as np


def encode_matrix(matrix: np.ndarray) -> dict:
    m = np.asarray(matrix, dtype=complex)
    entries = [[float(z.real).hex(), float(z.imag).hex()] for z in m.ravel(order="C")]
    return {"shape": list(m.shape), "entries": entries}


def decode_matrix(doc: dict) -> np.ndarray:
    shape = tuple(int(s) for s in doc["shape"])
    flat = [complex(float.fromhex(re), float.fromhex(im)) for re, im in doc["entries"]]
    if len(flat) != int(np.prod(shape)):
        raise ValueError(f"matrix document has {len(flat)} entries, expected {np.prod(shape)}")
    return np.array(flat, dtype=complex).reshape(shape, order="C")
