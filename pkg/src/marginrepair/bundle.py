"""Bit-exact serialization: tensor bundles and JSON reports.

A bundle is a directory holding exactly two files:

    manifest.json   UTF-8 JSON: format version, tensor directory (name,
                    dtype, shape, byte offset/length), optional model
                    metadata (activation, tensor roles) and sample-set
                    tables (ids, labels, embedding tensor name).
    tensors.bin     raw little-endian tensor payloads, each starting on a
                    64-byte boundary, in manifest order.

Payload dtypes are preserved exactly (f32 stays f32 on disk); the engine
widens to float64 only in memory. Reports are JSON with insertion-ordered
keys and floats rendered at 17 significant digits, so re-parsing is
lossless and repeated runs are byte-identical. All writes go through a
temp-file rename.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .model import ACTIVATIONS, HeadModel, Sample

__all__ = [
    "FORMAT_VERSION",
    "BundleFormatError",
    "SampleTable",
    "TensorBundle",
    "save",
    "load",
    "write_report",
    "load_report",
]

FORMAT_VERSION = "1.0"
_ALIGN = 64
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_ROLES = ("W", "b", "W_c", "b_c")


class BundleFormatError(ValueError):
    """Structured bundle/report format violation, naming the offending entry."""


@dataclass
class SampleTable:
    ids: list
    labels: list
    embeddings: str  # tensor name, shape (len(ids), d_in)


@dataclass
class TensorBundle:
    tensors: dict = field(default_factory=dict)  # name -> ndarray (f32 or f64)
    model_meta: dict | None = None  # {"activation": ..., "roles": {role: tensor}}
    sample_sets: dict = field(default_factory=dict)  # name -> SampleTable
    format_version: str = FORMAT_VERSION

    @classmethod
    def from_model_and_sets(cls, m, sets):
        tensors = {
            "model/W": np.asarray(m.W, dtype=np.float64),
            "model/b": np.asarray(m.b, dtype=np.float64),
            "model/W_c": np.asarray(m.W_c, dtype=np.float64),
            "model/b_c": np.asarray(m.b_c, dtype=np.float64),
        }
        meta = {
            "activation": m.activation,
            "roles": {"W": "model/W", "b": "model/b", "W_c": "model/W_c", "b_c": "model/b_c"},
        }
        tables = {}
        for name, samples in sets.items():
            tensor_name = f"samples/{name}"
            if samples:
                tensors[tensor_name] = np.stack([s.v for s in samples]).astype(np.float64)
            else:
                tensors[tensor_name] = np.zeros((0, m.d_in), dtype=np.float64)
            tables[name] = SampleTable(
                ids=[s.id for s in samples],
                labels=[int(s.label) for s in samples],
                embeddings=tensor_name,
            )
        return cls(tensors=tensors, model_meta=meta, sample_sets=tables)

    def role_tensor(self, role):
        if self.model_meta is None:
            raise BundleFormatError("bundle carries no model section")
        return self.tensors[self.model_meta["roles"][role]]

    def to_model(self):
        if self.model_meta is None:
            raise BundleFormatError("bundle carries no model section")
        return HeadModel(
            W=np.asarray(self.role_tensor("W"), dtype=np.float64),
            b=np.asarray(self.role_tensor("b"), dtype=np.float64),
            W_c=np.asarray(self.role_tensor("W_c"), dtype=np.float64),
            b_c=np.asarray(self.role_tensor("b_c"), dtype=np.float64),
            activation=self.model_meta["activation"],
        )

    def samples(self, set_name):
        table = self.sample_sets.get(set_name)
        if table is None:
            raise BundleFormatError(f"bundle has no sample set {set_name!r}")
        embeddings = self.tensors[table.embeddings]
        return [
            Sample(v=np.asarray(embeddings[i], dtype=np.float64), label=table.labels[i], id=table.ids[i])
            for i in range(len(table.ids))
        ]

    def with_tensors(self, replacements):
        """Copy of this bundle with some tensors replaced (same metadata)."""
        tensors = dict(self.tensors)
        tensors.update(replacements)
        return TensorBundle(
            tensors=tensors,
            model_meta=None if self.model_meta is None else json.loads(json.dumps(self.model_meta)),
            sample_sets={
                k: SampleTable(ids=list(t.ids), labels=list(t.labels), embeddings=t.embeddings)
                for k, t in self.sample_sets.items()
            },
            format_version=self.format_version,
        )

    def with_labels(self, set_name, labels):
        """Copy with one sample table's labels replaced."""
        out = self.with_tensors({})
        table = out.sample_sets.get(set_name)
        if table is None:
            raise BundleFormatError(f"bundle has no sample set {set_name!r}")
        if len(labels) != len(table.ids):
            raise BundleFormatError(f"label count mismatch for sample set {set_name!r}")
        table.labels = [int(x) for x in labels]
        return out


def _dtype_code(arr):
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise BundleFormatError(f"unsupported tensor dtype {arr.dtype}")


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


def save(bundle, path):
    """Write manifest.json + tensors.bin under ``path`` (a directory)."""
    os.makedirs(path, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(bundle.tensors):
        arr = np.ascontiguousarray(bundle.tensors[name])
        code = _dtype_code(arr)
        raw = arr.astype(_DTYPES[code], copy=False).tobytes(order="C")
        pad = (-offset) % _ALIGN
        if pad:
            chunks.append(b"\x00" * pad)
            offset += pad
        entries.append(
            {
                "name": name,
                "dtype": code,
                "shape": list(arr.shape),
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)

    manifest = {"format_version": bundle.format_version, "tensors": entries}
    if bundle.model_meta is not None:
        manifest["model"] = {
            "activation": bundle.model_meta["activation"],
            "roles": dict(bundle.model_meta["roles"]),
        }
    manifest["sample_sets"] = {
        name: {"ids": list(t.ids), "labels": [int(x) for x in t.labels], "embeddings": t.embeddings}
        for name, t in sorted(bundle.sample_sets.items())
    }

    try:
        _atomic_write(os.path.join(path, "tensors.bin"), b"".join(chunks))
        _atomic_write(
            os.path.join(path, "manifest.json"), (_dumps(manifest) + "\n").encode("utf-8")
        )
    except OSError as err:
        raise OSError(f"failed to write bundle under {path!r}: {err}") from err


def _require(condition, message):
    if not condition:
        raise BundleFormatError(message)


def load(path):
    """Read and validate a bundle directory."""
    manifest_path = os.path.join(path, "manifest.json")
    blob_path = os.path.join(path, "tensors.bin")
    _require(os.path.exists(manifest_path), f"missing manifest: {manifest_path}")
    _require(os.path.exists(blob_path), f"missing tensor blob: {blob_path}")
    try:
        with open(manifest_path, "rb") as handle:
            manifest = json.loads(handle.read().decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as err:
        raise BundleFormatError(f"unreadable manifest {manifest_path}: {err}") from err
    with open(blob_path, "rb") as handle:
        blob = handle.read()

    version = manifest.get("format_version")
    _require(isinstance(version, str) and "." in version, "manifest lacks a format_version")
    major = version.split(".", 1)[0]
    _require(
        major == FORMAT_VERSION.split(".", 1)[0],
        f"unsupported bundle major version {version!r} (reader supports {FORMAT_VERSION})",
    )

    tensors = {}
    spans = []
    for entry in manifest.get("tensors", []):
        name = entry.get("name")
        _require(isinstance(name, str) and name, f"tensor entry without a name: {entry}")
        _require(name not in tensors, f"duplicate tensor {name!r}")
        code = entry.get("dtype")
        _require(code in _DTYPES, f"tensor {name!r}: unknown dtype {code!r}")
        shape = tuple(int(x) for x in entry.get("shape", []))
        offset = int(entry.get("byte_offset", -1))
        length = int(entry.get("byte_length", -1))
        dtype = _DTYPES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        _require(
            length == expected,
            f"tensor {name!r}: byte_length {length} does not match shape {shape} ({expected})",
        )
        _require(offset >= 0 and offset % _ALIGN == 0, f"tensor {name!r}: misaligned offset {offset}")
        _require(
            offset + length <= len(blob),
            f"tensor {name!r}: extends past the end of the blob "
            f"({offset}+{length} > {len(blob)})",
        )
        spans.append((offset, offset + length, name))
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset)
        arr = arr.reshape(shape).copy()
        _require(np.all(np.isfinite(arr)), f"tensor {name!r} contains non-finite values")
        tensors[name] = arr

    spans.sort()
    for (a_start, a_end, a_name), (b_start, b_end, b_name) in zip(spans, spans[1:]):
        _require(
            a_end <= b_start,
            f"tensors {a_name!r} and {b_name!r} overlap in the blob",
        )

    model_meta = None
    if "model" in manifest:
        section = manifest["model"]
        activation = section.get("activation")
        _require(activation in ACTIVATIONS, f"model: unknown activation {activation!r}")
        roles = section.get("roles", {})
        _require(
            sorted(roles) == sorted(_ROLES),
            f"model: roles must be exactly {_ROLES}, got {sorted(roles)}",
        )
        for role, tensor_name in roles.items():
            _require(tensor_name in tensors, f"model role {role!r} references missing tensor {tensor_name!r}")
        W = tensors[roles["W"]]
        b = tensors[roles["b"]]
        W_c = tensors[roles["W_c"]]
        b_c = tensors[roles["b_c"]]
        _require(W.ndim == 2, "model role W must be a matrix")
        _require(W_c.ndim == 2, "model role W_c must be a matrix")
        _require(b.shape == (W.shape[0],), f"model role b has shape {b.shape}, expected ({W.shape[0]},)")
        _require(
            W_c.shape[1] == W.shape[0],
            f"model role W_c has {W_c.shape[1]} columns, expected {W.shape[0]}",
        )
        _require(
            b_c.shape == (W_c.shape[0],),
            f"model role b_c has shape {b_c.shape}, expected ({W_c.shape[0]},)",
        )
        _require(W_c.shape[0] >= 2, "model must have at least 2 classes")
        model_meta = {"activation": activation, "roles": dict(roles)}

    sample_sets = {}
    for name, table in manifest.get("sample_sets", {}).items():
        ids = table.get("ids", [])
        labels = table.get("labels", [])
        tensor_name = table.get("embeddings")
        _require(tensor_name in tensors, f"sample set {name!r} references missing tensor {tensor_name!r}")
        emb = tensors[tensor_name]
        _require(emb.ndim == 2, f"sample set {name!r}: embeddings must be 2-D")
        _require(
            len(ids) == len(labels) == emb.shape[0],
            f"sample set {name!r}: ids/labels/rows disagree "
            f"({len(ids)}/{len(labels)}/{emb.shape[0]})",
        )
        _require(len(set(ids)) == len(ids), f"sample set {name!r} has duplicate ids")
        if model_meta is not None:
            n_classes = tensors[model_meta["roles"]["W_c"]].shape[0]
            d_in = tensors[model_meta["roles"]["W"]].shape[1]
            _require(
                emb.shape[1] == d_in,
                f"sample set {name!r}: embedding width {emb.shape[1]} != model d_in {d_in}",
            )
            bad = [x for x in labels if not 0 <= int(x) < n_classes]
            _require(not bad, f"sample set {name!r}: labels out of range: {bad[:5]}")
        sample_sets[name] = SampleTable(
            ids=[str(x) for x in ids], labels=[int(x) for x in labels], embeddings=tensor_name
        )

    return TensorBundle(
        tensors=tensors,
        model_meta=model_meta,
        sample_sets=sample_sets,
        format_version=version,
    )


# --- JSON reports -----------------------------------------------------------


def _format_number(x):
    if isinstance(x, bool):  # bool is an int subclass; keep it out of here
        raise TypeError("bool passed to number formatter")
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    value = float(x)
    if not np.isfinite(value):
        raise ValueError(f"non-finite number in report: {value}")
    return format(value, ".17g")


def _dumps(obj, indent=0):
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, float, np.integer, np.floating)):
        return _format_number(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        parts = [inner + _dumps(item, indent + 1) for item in obj]
        return "[\n" + ",\n".join(parts) + "\n" + pad + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        parts = [
            inner + json.dumps(str(key), ensure_ascii=False) + ": " + _dumps(value, indent + 1)
            for key, value in obj.items()
        ]
        return "{\n" + ",\n".join(parts) + "\n" + pad + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__} into a report")


def write_report(report, path):
    """Serialize a report (anything with ``to_jsonable``, or a plain dict).

    Keys keep insertion order; floats are rendered with 17 significant
    digits so the file re-parses to exactly the in-memory values.
    """
    obj = report.to_jsonable() if hasattr(report, "to_jsonable") else report
    text = _dumps(obj) + "\n"
    try:
        _atomic_write(path, text.encode("utf-8"))
    except OSError as err:
        raise OSError(f"failed to write report {path!r}: {err}") from err


def load_report(path):
    try:
        with open(path, "rb") as handle:
            return json.loads(handle.read().decode("utf-8"))
    except FileNotFoundError:
        raise
    except (ValueError, UnicodeDecodeError) as err:
        raise BundleFormatError(f"unreadable report {path!r}: {err}") from err
