"""Writer for the two-file tensor bundle format (format_version 1.0).

Deliberately independent of the engine package: the bundle directory
(manifest.json + tensors.bin, 64-byte aligned little-endian payloads) is
the public contract between the extractor and everything downstream, and
this module implements that contract from its published description alone.
"""

import json
import os
import tempfile

import numpy as np

FORMAT_VERSION = "1.0"
_ALIGN = 64
_DTYPE_CODES = {np.dtype("<f4"): "f32", np.dtype("<f8"): "f64"}


def _atomic_write(path, data):
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bundle(path, tensors, activation, roles, sample_sets):
    """Write a model bundle directory.

    tensors: name -> float32/float64 ndarray
    roles: {"W": name, "b": name, "W_c": name, "b_c": name}
    sample_sets: set name -> {"ids": [...], "labels": [...], "embeddings": tensor name}
    """
    os.makedirs(path, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise ValueError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = arr.astype(dtype, copy=False).tobytes(order="C")
        pad = (-offset) % _ALIGN
        if pad:
            chunks.append(b"\x00" * pad)
            offset += pad
        entries.append(
            {
                "name": name,
                "dtype": _DTYPE_CODES[dtype],
                "shape": list(arr.shape),
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "model": {"activation": activation, "roles": dict(roles)},
        "sample_sets": {
            name: {
                "ids": [str(i) for i in table["ids"]],
                "labels": [int(x) for x in table["labels"]],
                "embeddings": table["embeddings"],
            }
            for name, table in sorted(sample_sets.items())
        },
    }
    _atomic_write(os.path.join(path, "tensors.bin"), b"".join(chunks))
    _atomic_write(
        os.path.join(path, "manifest.json"),
        (json.dumps(manifest, indent=2) + "\n").encode("utf-8"),
    )
