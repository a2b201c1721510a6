"""Head-model slice of a classifier.

One dense repair layer (the only weights ever modified), an element-wise
activation, and a frozen linear classification head:

    z = W v + b,   h = sigma(z),   s = W_c h + b_c

All decision quantities (gap, competitor, prediction) are derived from the
logit vector ``s``. Argmax ties always break toward the lowest class index.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "ACTIVATIONS",
    "ACTIVATION_LIPSCHITZ",
    "HeadModel",
    "Sample",
    "activate",
    "activation_derivative",
    "forward",
    "logits",
    "logits_batch",
    "gap",
    "competitor",
    "predict",
]

ACTIVATIONS = ("relu", "tanh", "sigmoid", "softplus")

# Every supported activation is 1-Lipschitz.
ACTIVATION_LIPSCHITZ = 1.0


def activate(kind, z):
    z = np.asarray(z, dtype=np.float64)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return expit(z)
    if kind == "softplus":
        return np.logaddexp(0.0, z)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def _derivative_unchecked(kind, z):
    if kind == "relu":
        return np.where(z > 0.0, 1.0, 0.0)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if kind == "sigmoid":
        p = expit(z)
        return p * (1.0 - p)
    if kind == "softplus":
        return expit(z)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_derivative(kind, z):
    """Element-wise derivative; this vector is the diagonal of the Jacobian.

    The relu subgradient at 0 is fixed to 0 so the Jacobian stays sparse and
    deterministic.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("pre-activation vector contains non-finite entries")
    return _derivative_unchecked(kind, z)


def _frozen_array(a, name, ndim):
    out = np.array(a, dtype=np.float64)
    if out.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class HeadModel:
    """Immutable model slice. Repair produces a new instance with W replaced."""

    W: np.ndarray
    b: np.ndarray
    W_c: np.ndarray
    b_c: np.ndarray
    activation: str

    def __post_init__(self):
        object.__setattr__(self, "W", _frozen_array(self.W, "W", 2))
        object.__setattr__(self, "b", _frozen_array(self.b, "b", 1))
        object.__setattr__(self, "W_c", _frozen_array(self.W_c, "W_c", 2))
        object.__setattr__(self, "b_c", _frozen_array(self.b_c, "b_c", 1))
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}"
            )
        d_out, _ = self.W.shape
        n_classes, head_in = self.W_c.shape
        if self.b.shape[0] != d_out:
            raise ValueError(f"b has length {self.b.shape[0]}, expected {d_out}")
        if head_in != d_out:
            raise ValueError(
                f"W_c has {head_in} columns but the repair layer emits {d_out} features"
            )
        if self.b_c.shape[0] != n_classes:
            raise ValueError(f"b_c has length {self.b_c.shape[0]}, expected {n_classes}")
        if n_classes < 2:
            raise ValueError("a classifier needs at least 2 classes")

    @property
    def d_in(self):
        return self.W.shape[1]

    @property
    def d_out(self):
        return self.W.shape[0]

    @property
    def num_classes(self):
        return self.W_c.shape[0]


@dataclass(frozen=True, eq=False)
class Sample:
    """Embedding with a class label.

    For repair samples the label is the target class; for remain samples it
    is the prediction recorded under the reference weights.
    """

    v: np.ndarray
    label: int
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "v", _frozen_array(self.v, "v", 1))
        object.__setattr__(self, "label", int(self.label))
        if self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")


def _check_input(m, v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != m.d_in:
        raise ValueError(f"input has shape {v.shape}, expected ({m.d_in},)")
    return v


def _check_class(m, y):
    y = int(y)
    if not 0 <= y < m.num_classes:
        raise ValueError(f"class {y} out of range [0, {m.num_classes})")
    return y


def forward(m, v):
    """Full forward pass; returns (z, h, s)."""
    v = _check_input(m, v)
    z = m.W @ v + m.b
    h = activate(m.activation, z)
    s = m.W_c @ h + m.b_c
    return z, h, s


def logits(m, v):
    return forward(m, v)[2]


def logits_batch(m, V):
    """Logits for a batch of embeddings, one per row of ``V``."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] != m.d_in:
        raise ValueError(f"batch has shape {V.shape}, expected (n, {m.d_in})")
    Z = V @ m.W.T + m.b
    H = activate(m.activation, Z)
    return H @ m.W_c.T + m.b_c


def _competitor_from_scores(s, y):
    masked = s.copy()
    masked[y] = -np.inf
    return int(np.argmax(masked))


def gap(m, v, y):
    """Decision gap s_y - max_{c != y} s_c. Positive iff class y wins outright."""
    y = _check_class(m, y)
    s = logits(m, v)
    c = _competitor_from_scores(s, y)
    return float(s[y] - s[c])


def competitor(m, v, y):
    """Strongest competing class; ties break toward the lowest index."""
    y = _check_class(m, y)
    s = logits(m, v)
    return _competitor_from_scores(s, y)


def predict(m, v):
    """Predicted class; ties break toward the lowest index."""
    s = logits(m, v)
    return int(np.argmax(s))
