"""Dense float64 kernels: deterministic truncated SVD and spectral norm.

Everything here is a pure function of its inputs, so results can be shared
across threads freely. All arithmetic is done in float64 regardless of how
the caller stored the data on disk.
"""

from dataclasses import dataclass

import numpy as np

__all__ = ["SvdResult", "truncated_svd", "spectral_norm"]

# Power iteration stopping rule: successive Rayleigh quotients within this
# relative tolerance, capped at a fixed iteration budget.
_POWER_TOL = 1e-12
_POWER_MAX_ITERS = 10_000


def _as_matrix(W, name="W"):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] == 0 or W.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError(f"{name} contains non-finite entries")
    return W


@dataclass(frozen=True, eq=False)
class SvdResult:
    """Top-r singular triplets of a dense matrix.

    ``U`` (d_out x r) and ``V`` (d_in x r) have orthonormal columns and
    ``singular_values`` is non-increasing. Column signs are pinned so that
    the largest-magnitude entry of each U column is positive, which removes
    the usual SVD sign ambiguity and makes repeated calls bit-identical.
    """

    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray


def truncated_svd(W, r):
    """Top-``r`` singular triplets of ``W`` under the deterministic sign rule.

    Raises ValueError unless 1 <= r <= min(W.shape).
    """
    W = _as_matrix(W)
    max_rank = min(W.shape)
    r = int(r)
    if not 1 <= r <= max_rank:
        raise ValueError(f"rank {r} out of range [1, {max_rank}] for shape {W.shape}")

    U, s, Vh = np.linalg.svd(W, full_matrices=False)
    U = U[:, :r].copy()
    s = s[:r].copy()
    V = Vh[:r].T.copy()
    for j in range(r):
        pivot = np.argmax(np.abs(U[:, j]))
        if U[pivot, j] < 0.0:
            U[:, j] = -U[:, j]
            V[:, j] = -V[:, j]
    return SvdResult(U=U, singular_values=s, V=V)


def spectral_norm(W):
    """Largest singular value of ``W`` by power iteration on WᵀW.

    Starts from the normalized all-ones vector and stops once successive
    Rayleigh quotients agree to ~1e-12 (relative). Returns 0.0 for the
    all-zero matrix. If the start vector happens to lie in the null space,
    the iteration restarts from canonical basis vectors.
    """
    W = _as_matrix(W)
    if not W.any():
        return 0.0
    n = W.shape[1]
    x = np.full(n, 1.0 / np.sqrt(n))
    lam_prev = -np.inf
    lam = 0.0
    restart = 0
    for _ in range(_POWER_MAX_ITERS):
        z = W @ x
        lam = float(z @ z)
        y = W.T @ z
        norm_y = float(np.linalg.norm(y))
        if norm_y < 1e-300:
            # numerically in the null space; try basis vectors in order
            if restart >= n:
                return 0.0
            x = np.zeros(n)
            x[restart] = 1.0
            restart += 1
            lam_prev = -np.inf
            continue
        x = y / norm_y
        if abs(lam - lam_prev) <= _POWER_TOL * max(1.0, abs(lam)):
            break
        lam_prev = lam
    return float(np.sqrt(max(lam, 0.0)))
