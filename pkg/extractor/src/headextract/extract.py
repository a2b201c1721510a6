"""Checkpoint-to-bundle extraction.

Loads a sequence-classification checkpoint, resolves the repair layer and
classifier head by module name, captures the repair layer's inputs with a
forward pre-hook while running the texts through the full encoder, and
writes the four head tensors plus one embedding row per input into a
tensor bundle. A logit-parity gate recomputes the logits from the
extracted tensors and rejects the whole extraction if any sample drifts
past tolerance, so a bundle that fails parity is never written.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .bundling import write_bundle

__all__ = ["ExtractionSpec", "ExtractionResult", "LayerResolutionError", "extract"]

PARITY_TOLERANCE = 1e-4
_BATCH = 16


class LayerResolutionError(ValueError):
    """A named layer does not resolve to a usable linear module."""


@dataclass
class ExtractionSpec:
    checkpoint: str
    repair_layer: str
    head: str
    inputs: str  # text file: label<TAB>text[<TAB>second text]
    out: str
    set_name: str = "samples"
    activation: str | None = None  # None = infer from the architecture
    max_length: int = 128


@dataclass
class ExtractionResult:
    n_samples: int
    n_failed_lines: int
    line_errors: list = field(default_factory=list)  # (line number, message)
    activation: str = ""
    max_parity_drift: float = 0.0
    weight_spectral_norm: float = 0.0


def _resolve_linear(model, name):
    modules = dict(model.named_modules())
    module = modules.get(name)
    if module is None or not isinstance(module, torch.nn.Linear):
        candidates = [n for n, m in modules.items() if isinstance(m, torch.nn.Linear)]
        raise LayerResolutionError(
            f"{name!r} does not name a linear layer; linear candidates: {candidates}"
        )
    if module.bias is None:
        raise LayerResolutionError(f"{name!r} has no bias tensor")
    return module


def _infer_activation(repair_layer_name):
    # pooler-style heads (dense followed by tanh) vs pre-classifier heads
    # (dense followed by relu)
    return "tanh" if "pooler" in repair_layer_name else "relu"


def _apply_activation(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    raise ValueError(f"unsupported extracted activation {kind!r}")


def parse_input_file(path):
    """Yield (line_number, label, texts) triples; texts has 1 or 2 entries."""
    with open(path, "r", encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            yield number, parts


def extract(spec):
    """Run the extraction; returns an ExtractionResult and writes the bundle."""
    from transformers import AutoModelForSequenceClassification, AutoTokenizer

    model = AutoModelForSequenceClassification.from_pretrained(spec.checkpoint)
    model.eval()
    tokenizer = AutoTokenizer.from_pretrained(spec.checkpoint)

    repair = _resolve_linear(model, spec.repair_layer)
    head = _resolve_linear(model, spec.head)
    d_out, d_in = repair.weight.shape
    n_classes, head_in = head.weight.shape
    if head_in != d_out:
        raise LayerResolutionError(
            f"head {spec.head!r} consumes {head_in} features but repair layer "
            f"{spec.repair_layer!r} emits {d_out}"
        )
    if n_classes < 2:
        raise LayerResolutionError(f"head {spec.head!r} has {n_classes} output, need >= 2")
    activation = spec.activation or _infer_activation(spec.repair_layer)

    # parse + tokenize, keeping per-line failures as a report instead of dying
    ids, labels, batches = [], [], []
    errors = []
    for number, parts in parse_input_file(spec.inputs):
        try:
            if len(parts) < 2:
                raise ValueError("expected label<TAB>text")
            label = int(parts[0])
            if label < 0 or label >= n_classes:
                raise ValueError(f"label {label} out of range [0, {n_classes})")
            texts = parts[1:3]
            encoded = tokenizer(
                *texts,
                return_tensors="pt",
                truncation=True,
                max_length=spec.max_length,
            )
        except Exception as err:  # per-line failure: record and continue
            errors.append((number, str(err)))
            continue
        ids.append(f"line-{number:05d}")
        labels.append(label)
        batches.append(encoded)
    if not ids:
        raise ValueError(f"no usable input lines in {spec.inputs!r}")

    captured = []

    def grab_input(module, args, kwargs=None):
        captured.append(args[0].detach().to(torch.float32).cpu())

    handle = repair.register_forward_pre_hook(grab_input)
    logits_rows = []
    try:
        with torch.no_grad():
            for encoded in batches:
                out = model(**encoded)
                logits_rows.append(out.logits.detach().to(torch.float32).cpu())
    finally:
        handle.remove()

    for chunk in captured:
        if chunk.ndim != 2:
            raise LayerResolutionError(
                f"{spec.repair_layer!r} receives inputs of shape {tuple(chunk.shape)}; "
                "a repair layer must consume one pooled vector per sample"
            )
    embeddings = torch.cat(captured)
    logits = torch.cat(logits_rows)
    if embeddings.shape[0] != len(ids):
        raise RuntimeError(
            f"captured {embeddings.shape[0]} embeddings for {len(ids)} inputs; "
            "the repair layer appears to run more than once per forward pass"
        )

    W = repair.weight.detach().to(torch.float32).cpu().numpy()
    b = repair.bias.detach().to(torch.float32).cpu().numpy()
    W_c = head.weight.detach().to(torch.float32).cpu().numpy()
    b_c = head.bias.detach().to(torch.float32).cpu().numpy()
    V = embeddings.numpy()

    # parity gate: the extracted slice must reproduce the checkpoint's own
    # logits; otherwise the captured embeddings or layers are wrong
    z = V.astype(np.float64) @ W.T.astype(np.float64) + b.astype(np.float64)
    s = _apply_activation(activation, z) @ W_c.T.astype(np.float64) + b_c.astype(np.float64)
    drift = float(np.max(np.abs(s - logits.numpy().astype(np.float64))))
    if drift > PARITY_TOLERANCE:
        raise RuntimeError(
            f"logit parity failed: max drift {drift:.3e} exceeds {PARITY_TOLERANCE}; "
            "bundle rejected"
        )

    write_bundle(
        spec.out,
        tensors={
            "model/W": W,
            "model/b": b,
            "model/W_c": W_c,
            "model/b_c": b_c,
            f"samples/{spec.set_name}": V,
        },
        activation=activation,
        roles={"W": "model/W", "b": "model/b", "W_c": "model/W_c", "b_c": "model/b_c"},
        sample_sets={
            spec.set_name: {
                "ids": ids,
                "labels": labels,
                "embeddings": f"samples/{spec.set_name}",
            }
        },
    )
    spectral = float(np.linalg.svd(W.astype(np.float64), compute_uv=False)[0])
    return ExtractionResult(
        n_samples=len(ids),
        n_failed_lines=len(errors),
        line_errors=errors,
        activation=activation,
        max_parity_drift=drift,
        weight_spectral_norm=spectral,
    )
