"""Gap-sensitivity diagnostics and the pre-repair fine-tuning pass.

The sensitivity norm measures how strongly updates inside the rank-r
subspace of the current repair-layer weight can move the decision gap of a
sample. When it is near zero (saturated activations, untrained layers) the
repair constraints are hard to satisfy; a short fine-tune of the repair
layer and head, keeping the checkpoint with maximal sensitivity, fixes the
landscape before any repair is attempted.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericFailureError
from .linalg import spectral_norm, truncated_svd
from .model import HeadModel, _derivative_unchecked, activate, activation_derivative
from .util import Xoshiro256StarStar

__all__ = [
    "GsnFtConfig",
    "GsnFtStep",
    "GsnFtTrace",
    "sensitivity_coefficients",
    "gap_sensitivity_norm",
    "mean_sensitivity",
    "cross_entropy_loss_and_grads",
    "gsn_ft",
]


def sensitivity_coefficients(m, v, y, U):
    """Directional gap coefficients, one row per competing class.

    Row k (for class k != y, in class order) holds (w_y - w_k)^T J(v) U[:, j]
    for every basis column j, so the result has shape (C - 1, r).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (m.d_in,):
        raise ValueError(f"input has shape {v.shape}, expected ({m.d_in},)")
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] != m.d_out:
        raise ValueError(f"basis has shape {U.shape}, expected ({m.d_out}, r)")
    y = int(y)
    if not 0 <= y < m.num_classes:
        raise ValueError(f"class {y} out of range [0, {m.num_classes})")
    z = m.W @ v + m.b
    jac_diag = activation_derivative(m.activation, z)
    others = [k for k in range(m.num_classes) if k != y]
    diffs = m.W_c[y][None, :] - m.W_c[others]  # (C-1, d_out)
    return diffs @ (jac_diag[:, None] * U)


def gap_sensitivity_norm(m, v, y, r):
    """Frobenius norm of the rank-r directional gap coefficients."""
    basis = truncated_svd(m.W, r).U
    return float(np.linalg.norm(sensitivity_coefficients(m, v, y, basis)))


def mean_sensitivity(m, samples, r):
    """Mean per-sample sensitivity norm using each sample's own label."""
    if not samples:
        raise ValueError("sample list is empty")
    basis = truncated_svd(m.W, r).U
    total = 0.0
    for s in samples:
        total += float(np.linalg.norm(sensitivity_coefficients(m, s.v, s.label, basis)))
    return total / len(samples)


def cross_entropy_loss_and_grads(m, X, ys):
    """Mean softmax cross-entropy over a batch plus gradients for all four
    trainable tensors (W, b, W_c, b_c). Closed-form backprop, no autodiff.
    """
    X = np.asarray(X, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.intp)
    n = X.shape[0]
    # overflow shows up as a non-finite loss, which callers turn into a
    # NumericFailureError; keep numpy quiet about the intermediate values
    with np.errstate(over="ignore", invalid="ignore"):
        Z = X @ m.W.T + m.b
        H = activate(m.activation, Z)
        S = H @ m.W_c.T + m.b_c
        shifted = S - S.max(axis=1, keepdims=True)
        expS = np.exp(shifted)
        P = expS / expS.sum(axis=1, keepdims=True)
        log_probs = shifted - np.log(expS.sum(axis=1, keepdims=True))
        loss = float(-log_probs[np.arange(n), ys].mean())
        if not np.isfinite(loss) or not np.all(np.isfinite(Z)):
            # gradients would be garbage; callers raise on the loss value
            zeros = (np.zeros_like(m.W), np.zeros_like(m.b),
                     np.zeros_like(m.W_c), np.zeros_like(m.b_c))
            return float("nan"), *zeros

        dS = P.copy()
        dS[np.arange(n), ys] -= 1.0
        dS /= n
        g_Wc = dS.T @ H
        g_bc = dS.sum(axis=0)
        dH = dS @ m.W_c
        dZ = dH * _derivative_unchecked(m.activation, Z)
        g_W = dZ.T @ X
        g_b = dZ.sum(axis=0)
    return loss, g_W, g_b, g_Wc, g_bc


@dataclass(frozen=True)
class GsnFtConfig:
    max_steps: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 32
    aux_size: int = 8
    rank: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.aux_size < 1 or self.rank < 1:
            raise ValueError("batch_size, aux_size and rank must be >= 1")


@dataclass(frozen=True)
class GsnFtStep:
    step: int
    kappa: float
    loss: float
    w_spectral: float


@dataclass
class GsnFtTrace:
    steps: list = field(default_factory=list)
    selected_step: int = 0

    def to_jsonable(self):
        return {
            "report_kind": "gsn_ft_trace",
            "format_version": "1.0",
            "selected_step": int(self.selected_step),
            "steps": [
                {
                    "step": int(s.step),
                    "kappa": float(s.kappa),
                    "loss": float(s.loss),
                    "w_spectral": float(s.w_spectral),
                }
                for s in self.steps
            ],
        }


def gsn_ft(m, aux, cfg):
    """Mini-batch gradient descent on the task loss, keeping the checkpoint
    with the highest mean sensitivity norm.

    Only the four head tensors are updated. Step 0 (the untouched input
    model) is always a candidate; when it wins, the returned model is the
    input object itself, bit-exact. Ties pick the earliest step.
    """
    if not aux:
        raise ValueError("auxiliary sample set is empty")
    samples = list(aux[: cfg.aux_size])
    n = len(samples)
    X = np.stack([s.v for s in samples])
    ys = np.array([s.label for s in samples], dtype=np.intp)
    if ys.max() >= m.num_classes:
        raise ValueError("auxiliary label out of range for this model")
    batch = min(cfg.batch_size, n)

    kappa0 = mean_sensitivity(m, samples, cfg.rank)
    loss0 = cross_entropy_loss_and_grads(m, X, ys)[0]
    trace = GsnFtTrace(steps=[GsnFtStep(0, kappa0, loss0, spectral_norm(m.W))])
    best_kappa, best_step, best_model = kappa0, 0, m

    rng = Xoshiro256StarStar(cfg.seed)
    order = list(range(n))
    cursor = n  # force a shuffle before the first batch
    current = m
    for t in range(1, cfg.max_steps + 1):
        if cursor + batch > n:
            rng.shuffle(order)
            cursor = 0
        idx = order[cursor : cursor + batch]
        cursor += batch

        loss_b, g_W, g_b, g_Wc, g_bc = cross_entropy_loss_and_grads(current, X[idx], ys[idx])
        if not np.isfinite(loss_b):
            raise NumericFailureError(f"non-finite loss at fine-tune step {t}", step=t)
        lr = cfg.learning_rate
        updated = (
            current.W - lr * g_W,
            current.b - lr * g_b,
            current.W_c - lr * g_Wc,
            current.b_c - lr * g_bc,
        )
        if not all(np.all(np.isfinite(tensor)) for tensor in updated):
            raise NumericFailureError(f"non-finite weights at fine-tune step {t}", step=t)
        current = HeadModel(
            W=updated[0], b=updated[1], W_c=updated[2], b_c=updated[3],
            activation=current.activation,
        )
        kappa_t = mean_sensitivity(current, samples, cfg.rank)
        loss_t = cross_entropy_loss_and_grads(current, X, ys)[0]
        if not np.isfinite(loss_t):
            raise NumericFailureError(f"non-finite loss at fine-tune step {t}", step=t)
        trace.steps.append(GsnFtStep(t, kappa_t, loss_t, spectral_norm(current.W)))
        if kappa_t > best_kappa:
            best_kappa, best_step, best_model = kappa_t, t, current

    trace.selected_step = best_step
    return best_model, trace
