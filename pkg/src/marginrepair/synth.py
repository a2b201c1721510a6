"""Deterministic generator of desk-scale repair problems.

Builds Gaussian class clusters in embedding space, fits a head model on
clean cluster samples with a short gradient-descent run, and then derives
the four sample roles from the fitted model: repair samples are perturbed
points the model misclassifies (kept with their true labels), remain
samples are clean points it classifies correctly (labeled with its own
prediction), the evaluation set mixes held-out clean and perturbed points
with true labels, and a small auxiliary set feeds the sensitivity
fine-tuning stage.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GenerationError
from .gsn import cross_entropy_loss_and_grads, gap_sensitivity_norm
from .model import ACTIVATIONS, HeadModel, Sample
from .model import gap as exact_gap
from .model import predict

__all__ = ["SynthConfig", "SynthProblem", "generate"]

_FIT_PER_CLASS = 50
_FIT_STEPS = 400
_FIT_LR = 1.0
_MAX_ATTEMPTS = 100
# repair candidates below this rank-2 sensitivity are unrepairable by a
# low-rank update (dead activation patterns); skipped unless the config
# asks for a saturated model on purpose
_KAPPA_FLOOR = 0.3


@dataclass(frozen=True)
class SynthConfig:
    seed: int
    d_in: int = 16
    d_out: int = 16
    n_classes: int = 2
    activation: str = "tanh"
    n_repair: int = 5
    n_remain: int = 20
    n_eval: int = 50
    n_aux: int = 8
    cluster_separation: float = 4.0
    saturation_bias: float = 0.0

    def __post_init__(self):
        if self.n_repair < 1:
            raise ValueError("n_repair must be >= 1")
        if self.d_in < 2 or self.d_out < 2:
            raise ValueError("d_in and d_out must be >= 2")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_remain < 0 or self.n_eval < 0 or self.n_aux < 0:
            raise ValueError("set sizes must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.cluster_separation <= 0:
            raise ValueError("cluster_separation must be > 0")
        if self.saturation_bias < 0:
            raise ValueError("saturation_bias must be >= 0")


@dataclass(frozen=True)
class SynthProblem:
    model: HeadModel
    repair_set: list
    remain_set: list
    eval_set: list
    aux_set: list


def _cluster_means(rng, cfg):
    directions = rng.standard_normal((cfg.n_classes, cfg.d_in))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * cfg.cluster_separation


def _draw_clean(rng, cfg, means, count):
    labels = np.arange(count) % cfg.n_classes
    points = means[labels] + rng.standard_normal((count, cfg.d_in))
    return points, labels


def _perturb(rng, cfg, m, means, points, labels):
    """Minimal boundary-crossing push toward a random other cluster.

    Walks each point along the inter-cluster direction (with a bit of noise
    mixed in) and keeps the first position the model misclassifies, so the
    resulting gaps sit mildly below zero instead of deep inside the wrong
    class. Points that never flip within the scan are returned unperturbed
    and get filtered out by the caller's misclassification check.
    """
    n = points.shape[0]
    offsets = rng.integers(1, cfg.n_classes, size=n)
    targets = (labels + offsets) % cfg.n_classes
    towards = means[targets] - means[labels]
    towards /= np.linalg.norm(towards, axis=1, keepdims=True)
    noise = rng.standard_normal((n, cfg.d_in))
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    directions = towards + 0.3 * noise
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    out = points.copy()
    steps = np.linspace(0.05, 1.8, 36) * cfg.cluster_separation
    for i in range(n):
        for step in steps:
            candidate = points[i] + step * directions[i]
            if exact_gap(m, candidate, int(labels[i])) < 0.0:
                out[i] = candidate
                break
    return out


def _fit_head(rng, cfg, means):
    X, ys = _draw_clean(rng, cfg, means, _FIT_PER_CLASS * cfg.n_classes)
    m = HeadModel(
        W=rng.normal(scale=1.0 / np.sqrt(cfg.d_in), size=(cfg.d_out, cfg.d_in)),
        b=np.zeros(cfg.d_out),
        W_c=rng.normal(scale=1.0 / np.sqrt(cfg.d_out), size=(cfg.n_classes, cfg.d_out)),
        b_c=np.zeros(cfg.n_classes),
        activation=cfg.activation,
    )
    for _ in range(_FIT_STEPS):
        _, g_W, g_b, g_Wc, g_bc = cross_entropy_loss_and_grads(m, X, ys)
        m = HeadModel(
            W=m.W - _FIT_LR * g_W,
            b=m.b - _FIT_LR * g_b,
            W_c=m.W_c - _FIT_LR * g_Wc,
            b_c=m.b_c - _FIT_LR * g_bc,
            activation=cfg.activation,
        )
    if cfg.saturation_bias > 0:
        # push every unit's pre-activation at least saturation_bias deep into
        # the saturated regime over the fit data, so the activation Jacobian
        # (and with it the gap sensitivity) collapses
        reach = np.max(np.abs(X @ m.W.T + m.b), axis=0)
        m = HeadModel(
            W=m.W,
            b=m.b + cfg.saturation_bias + reach,
            W_c=m.W_c,
            b_c=m.b_c,
            activation=cfg.activation,
        )
    return m


def _take_samples(pool_points, pool_labels, keep_mask, count, prefix):
    if count == 0:
        return []
    out = []
    for point, label, keep in zip(pool_points, pool_labels, keep_mask):
        if not keep:
            continue
        out.append(Sample(v=point, label=int(label), id=f"{prefix}-{len(out):04d}"))
        if len(out) == count:
            return out
    return None


def generate(cfg):
    """Generate a repair problem; retries with an incremented sub-seed until
    the requested set sizes are met, then gives up with GenerationError."""
    for attempt in range(_MAX_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), attempt]))
        means = _cluster_means(rng, cfg)
        m = _fit_head(rng, cfg, means)

        pool = max(4 * max(cfg.n_remain, 1), 40)
        clean_pts, clean_lbl = _draw_clean(rng, cfg, means, pool)
        correct = np.array(
            [exact_gap(m, v, int(y)) > 0.0 for v, y in zip(clean_pts, clean_lbl)]
        )
        remain = _take_samples(clean_pts, clean_lbl, correct, cfg.n_remain, "rem")

        pool = max(4 * cfg.n_repair, 20)
        base_pts, base_lbl = _draw_clean(rng, cfg, means, pool)
        pert_pts = _perturb(rng, cfg, m, means, base_pts, base_lbl)
        missed = np.array(
            [exact_gap(m, v, int(y)) < 0.0 for v, y in zip(pert_pts, base_lbl)]
        )
        if cfg.saturation_bias == 0:
            sensitive = np.array(
                [
                    gap_sensitivity_norm(m, v, int(y), min(2, min(cfg.d_in, cfg.d_out)))
                    >= _KAPPA_FLOOR
                    for v, y in zip(pert_pts, base_lbl)
                ]
            )
            missed &= sensitive
        repair = _take_samples(pert_pts, base_lbl, missed, cfg.n_repair, "rep")

        n_eval_clean = (cfg.n_eval + 1) // 2
        eval_clean_pts, eval_clean_lbl = _draw_clean(rng, cfg, means, n_eval_clean)
        eval_base_pts, eval_base_lbl = _draw_clean(rng, cfg, means, cfg.n_eval - n_eval_clean)
        eval_pert_pts = (
            _perturb(rng, cfg, m, means, eval_base_pts, eval_base_lbl)
            if len(eval_base_lbl)
            else eval_base_pts
        )
        eval_pts = np.concatenate([eval_clean_pts, eval_pert_pts]) if cfg.n_eval else eval_clean_pts
        eval_lbl = np.concatenate([eval_clean_lbl, eval_base_lbl]) if cfg.n_eval else eval_clean_lbl
        eval_set = [
            Sample(v=v, label=int(y), id=f"ev-{i:04d}")
            for i, (v, y) in enumerate(zip(eval_pts, eval_lbl))
        ]

        aux_pts, aux_lbl = _draw_clean(rng, cfg, means, cfg.n_aux)
        aux_set = [
            Sample(v=v, label=int(y), id=f"aux-{i:04d}")
            for i, (v, y) in enumerate(zip(aux_pts, aux_lbl))
        ]

        if remain is None or repair is None:
            continue
        # remain labels are the model's own predictions (identical to the true
        # labels here, by the correctness filter); record them explicitly
        remain = [
            Sample(v=s.v, label=predict(m, s.v), id=s.id) for s in remain
        ]
        return SynthProblem(
            model=m,
            repair_set=repair,
            remain_set=remain,
            eval_set=eval_set,
            aux_set=aux_set,
        )
    raise GenerationError(
        f"could not find {cfg.n_repair} misclassified and {cfg.n_remain} correctly "
        f"classified samples after {_MAX_ATTEMPTS} attempts; a larger "
        "cluster_separation (stronger perturbations) usually helps"
    )
