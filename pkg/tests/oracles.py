"""Independent oracles used by the test suite.

Everything here is deliberately written without touching the package's own
numerics: a one-sided Jacobi SVD, a dense grid minimizer with local
refinement, and central finite differences. Slow and simple on purpose.
"""

import numpy as np


def jacobi_svd(A, tol=1e-14, max_sweeps=100):
    """One-sided Jacobi SVD. Returns (U, s, V) with s non-increasing."""
    A = np.array(A, dtype=np.float64)
    m, n = A.shape
    transposed = False
    if m < n:
        A = A.T
        m, n = n, m
        transposed = True
    cols = A.copy()
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                app = cols[:, p] @ cols[:, p]
                aqq = cols[:, q] @ cols[:, q]
                apq = cols[:, p] @ cols[:, q]
                denom = np.sqrt(app * aqq) + 1e-300
                off = max(off, abs(apq) / denom)
                if abs(apq) <= tol * np.sqrt(app * aqq):
                    continue
                zeta = (aqq - app) / (2.0 * apq)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * cols[:, p] - s * cols[:, q]
                new_q = s * cols[:, p] + c * cols[:, q]
                cols[:, p], cols[:, q] = new_p, new_q
                new_vp = c * V[:, p] - s * V[:, q]
                new_vq = s * V[:, p] + c * V[:, q]
                V[:, p], V[:, q] = new_vp, new_vq
        if off < tol:
            break
    sv = np.linalg.norm(cols, axis=0)
    order = np.argsort(-sv)
    sv = sv[order]
    U = np.zeros_like(cols)
    for j, idx in enumerate(order):
        if sv[j] > 1e-300:
            U[:, j] = cols[:, idx] / sv[j]
    V = V[:, order]
    if transposed:
        return V, sv, U
    return U, sv, V


def grid_minimize(f, k, span=4.0, max_rounds=120, points=9, shrink=0.5, resolution=1e-10,
                  kink_normals=None):
    """Dense grid search with local refinement around the incumbent.

    The box only shrinks when the incumbent stops moving; a large move means
    the minimizer is at or beyond the box boundary (convexity), so the box
    re-centers at the same size instead of shrinking past it.

    ``kink_normals`` (rows of the hinge terms, if the objective has any)
    lets the refinement stage walk along ridges: near a kink the descent
    cone collapses to the null space of the active normals and blind
    sampling cannot find it.
    """
    center = np.zeros(k)
    best = f(center)
    initial_span = span
    for _ in range(max_rounds):
        axes = [np.linspace(c - span, c + span, points) for c in center]
        mesh = np.meshgrid(*axes, indexing="ij")
        candidates = np.stack([g.ravel() for g in mesh], axis=1)
        values = np.array([f(c) for c in candidates])
        idx = int(np.argmin(values))
        improved = values[idx] < best
        on_boundary = bool(
            np.any(np.abs(candidates[idx] - center) >= span * (1.0 - 1e-9))
        )
        if improved:
            best = float(values[idx])
            center = candidates[idx]
        if improved and on_boundary:
            # the minimizer escaped the box; chase it at a growing stride
            span = min(span * 2.0, initial_span)
        else:
            span *= shrink
            if span < resolution:
                break
    return _refine_locally(f, center, best, kink_normals)


def _line_minimize(f, x, d, radius):
    """Golden-section minimum of the convex slice t -> f(x + t d)."""
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    lo, hi = -radius, radius
    # expand the bracket while the minimum sits on its boundary
    for _ in range(60):
        if f(x + lo * d) > f(x + (lo + 1e-12) * d) and f(x + hi * d) > f(x + (hi - 1e-12) * d):
            break
        lo *= 2.0
        hi *= 2.0
        if hi > 1e6:
            break
    a, b = lo, hi
    c1 = b - phi * (b - a)
    c2 = a + phi * (b - a)
    f1, f2 = f(x + c1 * d), f(x + c2 * d)
    for _ in range(200):
        if b - a < 1e-13 * max(1.0, abs(a) + abs(b)):
            break
        if f1 <= f2:
            b, c2, f2 = c2, c1, f1
            c1 = b - phi * (b - a)
            f1 = f(x + c1 * d)
        else:
            a, c1, f1 = c1, c2, f2
            c2 = a + phi * (b - a)
            f2 = f(x + c2 * d)
    t = 0.5 * (a + b)
    return (x + t * d, f(x + t * d))


def _ridge_directions(x, kink_normals, radius):
    """Null-space bases of every near-active subset of hinge normals."""
    if kink_normals is None or not len(kink_normals):
        return []
    rows = np.asarray(kink_normals, dtype=np.float64)
    out = []
    # treat each hinge plane, and the joint active set, as a candidate ridge
    for subset in range(1, 2 ** len(rows)):
        chosen = rows[[i for i in range(len(rows)) if subset >> i & 1]]
        _, sv, Vt = np.linalg.svd(chosen, full_matrices=True)
        rank = int(np.sum(sv > 1e-12))
        for j in range(rank, Vt.shape[0]):
            out.append(Vt[j])
    return out


def _refine_locally(f, x, best, kink_normals=None, rounds=80, directions=32, seed=20240901):
    """Line searches along random directions plus hinge-ridge directions."""
    rng = np.random.default_rng(seed)
    k = x.size
    radius = 0.25
    for _ in range(rounds):
        dirs = list(rng.standard_normal((directions, k)))
        dirs += _ridge_directions(x, kink_normals, radius)
        moved = False
        for d in dirs:
            norm = np.linalg.norm(d)
            if norm < 1e-12:
                continue
            candidate, value = _line_minimize(f, x, d / norm, radius)
            if value < best - 1e-15:
                x, best = candidate, value
                moved = True
        if not moved:
            radius *= 0.5
            if radius < 1e-10:
                break
    return x, best


def hinge_objective(beta, rows, deficits, rho, lam):
    """Slack-eliminated repair objective: quadratic plus hinge penalties."""
    beta = np.asarray(beta, dtype=np.float64)
    margins = deficits - rows @ beta
    return 0.5 * rho * float(beta @ beta) + lam * float(np.clip(margins, 0.0, None).sum())


def central_difference(f, x, step=1e-5):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        up = x.copy()
        down = x.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (f(up) - f(down)) / (2.0 * step)
    return grad
