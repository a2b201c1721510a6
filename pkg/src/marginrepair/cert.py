"""Certificate layer: Lipschitz bound, per-sample robustness radii,
certificate reports, Monte Carlo stress testing, and proximity bands.

The certified radius of a repaired sample is gap / (2L) where L bounds the
Lipschitz constant of the gap as a function of the embedding. Any
perturbation inside that radius provably cannot flip the prediction, which
the stress test probes empirically with expanding-radius sampling.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InternalInvariantError, UnconvergedTraceError
from .linalg import spectral_norm
from .model import ACTIVATION_LIPSCHITZ, gap as exact_gap
from .model import logits_batch, predict
from .util import parallel_map

__all__ = [
    "RepairCertEntry",
    "RemainCertEntry",
    "CertificateReport",
    "StressReport",
    "ProximityReport",
    "lipschitz_bound",
    "gap_lipschitz_bound",
    "robustness_radius",
    "certify",
    "uniform_ball",
    "stress_test",
    "proximity_bands",
]


def lipschitz_bound(m):
    """Spectral-norm product bound ||W||_2 * ||W_c||_2 (times the activation
    constant, 1 for every supported kind).

    This is the composition bound on the logit *vector*. It is NOT a sound
    Lipschitz constant for the decision gap itself: the gap moves with the
    difference of two classifier rows, and ||w_y - w_c|| can exceed
    ||W_c||_2 by up to sqrt(2) (exactly sqrt(2) for an antipodal binary
    head). Certificates therefore use :func:`gap_lipschitz_bound`.
    """
    return spectral_norm(m.W) * spectral_norm(m.W_c) * ACTIVATION_LIPSCHITZ


def gap_lipschitz_bound(m):
    """Sound Lipschitz constant for the decision gap.

    |gap(v + d) - gap(v)| <= L ||d||_2 with
    L = max_{y != c} ||w_y - w_c||_2 * ||W||_2 * L_sigma: every logit
    difference s_y - s_c is (||w_y - w_c|| * ||W||)-Lipschitz, and the gap
    is a minimum of such differences. Often tighter than the spectral
    product when classifier rows point in similar directions.
    """
    n = m.num_classes
    worst = 0.0
    for y in range(n - 1):
        diffs = m.W_c[y + 1 :] - m.W_c[y][None, :]
        worst = max(worst, float(np.max(np.linalg.norm(diffs, axis=1))))
    return worst * spectral_norm(m.W) * ACTIVATION_LIPSCHITZ


def robustness_radius(gap_value, L):
    """Certified radius gap / (2L). Negative gaps give negative values,
    which callers must treat as "no certificate"."""
    L = float(L)
    if L <= 0.0:
        raise ValueError(f"Lipschitz bound must be > 0, got {L}")
    return float(gap_value) / (2.0 * L)


@dataclass(frozen=True)
class RepairCertEntry:
    id: str
    gap: float
    epsilon_star: float
    meets_gamma_s: bool


@dataclass(frozen=True)
class RemainCertEntry:
    id: str
    gap: float
    meets_gamma_h: bool


@dataclass
class CertificateReport:
    gamma_s: float
    gamma_h: float
    lipschitz: float
    repair_entries: list = field(default_factory=list)
    remain_entries: list = field(default_factory=list)

    def summary(self):
        gaps = np.array([e.gap for e in self.repair_entries])
        radii = np.array([e.epsilon_star for e in self.repair_entries])
        remain_gaps = np.array([e.gap for e in self.remain_entries])
        return {
            "n_repair": len(self.repair_entries),
            "n_remain": len(self.remain_entries),
            "gap_min": float(gaps.min()) if gaps.size else None,
            "gap_mean": float(gaps.mean()) if gaps.size else None,
            "gap_max": float(gaps.max()) if gaps.size else None,
            "epsilon_star_min": float(radii.min()) if radii.size else None,
            "epsilon_star_median": float(np.median(radii)) if radii.size else None,
            "epsilon_star_mean": float(radii.mean()) if radii.size else None,
            "epsilon_star_max": float(radii.max()) if radii.size else None,
            "repair_meeting_gamma_s": int(sum(e.meets_gamma_s for e in self.repair_entries)),
            "remain_meeting_gamma_h": int(sum(e.meets_gamma_h for e in self.remain_entries)),
            "remain_gap_min": float(remain_gaps.min()) if remain_gaps.size else None,
            "remain_gap_mean": float(remain_gaps.mean()) if remain_gaps.size else None,
        }

    def to_jsonable(self):
        return {
            "report_kind": "certificate",
            "format_version": "1.0",
            "gamma_s": float(self.gamma_s),
            "gamma_h": float(self.gamma_h),
            "lipschitz_bound": float(self.lipschitz),
            "repair_samples": [
                {
                    "id": e.id,
                    "gap": float(e.gap),
                    "epsilon_star": float(e.epsilon_star),
                    "meets_gamma_s": bool(e.meets_gamma_s),
                }
                for e in self.repair_entries
            ],
            "remain_samples": [
                {"id": e.id, "gap": float(e.gap), "meets_gamma_h": bool(e.meets_gamma_h)}
                for e in self.remain_entries
            ],
            "summary": self.summary(),
        }

    @classmethod
    def from_jsonable(cls, data):
        if data.get("report_kind") != "certificate":
            raise ValueError("not a certificate report")
        report = cls(
            gamma_s=float(data["gamma_s"]),
            gamma_h=float(data["gamma_h"]),
            lipschitz=float(data["lipschitz_bound"]),
        )
        for e in data["repair_samples"]:
            report.repair_entries.append(
                RepairCertEntry(
                    id=str(e["id"]),
                    gap=float(e["gap"]),
                    epsilon_star=float(e["epsilon_star"]),
                    meets_gamma_s=bool(e["meets_gamma_s"]),
                )
            )
        for e in data["remain_samples"]:
            report.remain_entries.append(
                RemainCertEntry(
                    id=str(e["id"]), gap=float(e["gap"]), meets_gamma_h=bool(e["meets_gamma_h"])
                )
            )
        return report


def certify(m, repair_set, remain_set, hyper, trace):
    """Exact certificate pass after a converged repair.

    Refuses unconverged traces (the margin guarantee has no premise without
    convergence). A repair sample failing its margin here means the engine
    broke its own construction, so that raises InternalInvariantError rather
    than producing a degraded report.
    """
    if not trace.converged:
        raise UnconvergedTraceError(
            "repair did not converge; no certificate can be issued"
        )
    L = gap_lipschitz_bound(m)
    report = CertificateReport(gamma_s=hyper.gamma_s, gamma_h=hyper.gamma_h, lipschitz=L)
    for s in repair_set:
        g = exact_gap(m, s.v, s.label)
        meets = g >= hyper.gamma_s
        if not meets:
            raise InternalInvariantError(
                f"repair sample {s.id!r} has gap {g} below gamma_s {hyper.gamma_s} "
                "despite a converged trace"
            )
        report.repair_entries.append(
            RepairCertEntry(id=s.id, gap=g, epsilon_star=robustness_radius(g, L), meets_gamma_s=True)
        )
    for s in remain_set:
        g = exact_gap(m, s.v, s.label)
        report.remain_entries.append(
            RemainCertEntry(id=s.id, gap=g, meets_gamma_h=g >= hyper.gamma_h)
        )
    return report


def uniform_ball(rng, center, radius, count):
    """Points uniform in the L2 ball: Gaussian direction normalized to the
    sphere, radius scaled by u^(1/d)."""
    center = np.asarray(center, dtype=np.float64)
    d = center.shape[0]
    directions = rng.standard_normal((count, d))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    directions /= norms
    radii = radius * rng.random(count) ** (1.0 / d)
    return center[None, :] + directions * radii[:, None]


@dataclass
class StressReport:
    multipliers: list
    n_mc: int
    seed: int
    sample_ids: list = field(default_factory=list)
    epsilon_stars: list = field(default_factory=list)
    first_flip: list = field(default_factory=list)  # multiplier or None, per sample

    def cumulative(self):
        rows = []
        n = len(self.sample_ids)
        for k in self.multipliers:
            flipped = sum(1 for f in self.first_flip if f is not None and f <= k)
            rows.append(
                {
                    "multiplier": float(k),
                    "flipped": flipped,
                    "fraction": (flipped / n) if n else 0.0,
                }
            )
        return rows

    def median_tightness(self):
        if not self.first_flip:
            return None
        values = [np.inf if f is None else f for f in self.first_flip]
        med = float(np.median(values))
        return None if np.isinf(med) else med

    def to_jsonable(self):
        return {
            "report_kind": "stress",
            "format_version": "1.0",
            "multipliers": [float(k) for k in self.multipliers],
            "n_mc": int(self.n_mc),
            "seed": int(self.seed),
            "samples": [
                {
                    "id": sid,
                    "epsilon_star": float(eps),
                    "first_flip_multiplier": None if flip is None else float(flip),
                }
                for sid, eps, flip in zip(self.sample_ids, self.epsilon_stars, self.first_flip)
            ],
            "cumulative_flips": self.cumulative(),
            "median_tightness": self.median_tightness(),
        }


def stress_test(m, repair_set, certified, multipliers, n_mc=1000, seed=0, threads=1):
    """Expanding-radius Monte Carlo probe of the certified radii.

    For each certified sample and each multiplier k (ascending), draws
    ``n_mc`` fresh points uniformly from the ball of radius k * eps* around
    the embedding and records the first k at which any draw flips the
    prediction. Per-sample RNG streams are derived from (seed, sample index)
    so a parallel schedule cannot change the result.
    """
    multipliers = [float(k) for k in multipliers]
    if not multipliers or any(k <= 0 for k in multipliers):
        raise ValueError("multipliers must be positive")
    if sorted(multipliers) != multipliers:
        raise ValueError("multipliers must be ascending")
    by_id = {s.id: s for s in repair_set}

    def probe(item):
        index, entry = item
        sample = by_id.get(entry.id)
        if sample is None:
            raise ValueError(f"certified sample {entry.id!r} not present in the repair set")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
        for k in multipliers:
            points = uniform_ball(rng, sample.v, k * entry.epsilon_star, n_mc)
            preds = np.argmax(logits_batch(m, points), axis=1)
            if np.any(preds != sample.label):
                return k
        return None

    flips = parallel_map(probe, list(enumerate(certified.repair_entries)), threads)
    return StressReport(
        multipliers=multipliers,
        n_mc=int(n_mc),
        seed=int(seed),
        sample_ids=[e.id for e in certified.repair_entries],
        epsilon_stars=[e.epsilon_star for e in certified.repair_entries],
        first_flip=flips,
    )


@dataclass
class ProximityReport:
    band_edges: list
    counts: list
    correct: list
    overall_count: int = 0
    overall_correct: int = 0

    def to_jsonable(self):
        bands = []
        lowers = [0.0] + [float(e) for e in self.band_edges]
        uppers = [float(e) for e in self.band_edges] + [None]
        for lo, up, n, c in zip(lowers, uppers, self.counts, self.correct):
            bands.append(
                {
                    "lower": lo,
                    "upper": up,
                    "count": int(n),
                    "correct": int(c),
                    "accuracy": (c / n) if n else None,
                }
            )
        return {
            "report_kind": "proximity",
            "format_version": "1.0",
            "band_edges": [float(e) for e in self.band_edges],
            "bands": bands,
            "overall": {
                "count": int(self.overall_count),
                "correct": int(self.overall_correct),
                "accuracy": (self.overall_correct / self.overall_count)
                if self.overall_count
                else None,
            },
        }


def proximity_bands(m, eval_set, repaired_set, report, band_edges):
    """Accuracy of the model on evaluation samples grouped by distance to
    the nearest repaired embedding, in units of that embedding's certified
    radius. Band k covers (edge_{k-1}, edge_k]; one overflow band catches
    everything beyond the last edge.
    """
    band_edges = [float(e) for e in band_edges]
    if not band_edges:
        raise ValueError("band_edges is empty")
    if sorted(band_edges) != band_edges or any(e <= 0 for e in band_edges):
        raise ValueError("band_edges must be positive and ascending")
    if not eval_set or not repaired_set:
        raise ValueError("eval and repaired sets must be non-empty")
    radii = {e.id: e.epsilon_star for e in report.repair_entries}
    anchors = []
    for s in repaired_set:
        if s.id not in radii:
            raise ValueError(f"repaired sample {s.id!r} has no certificate entry")
        anchors.append((s.v, radii[s.id]))

    n_bands = len(band_edges) + 1
    counts = [0] * n_bands
    correct = [0] * n_bands
    total_correct = 0
    for s in eval_set:
        ratio = min(
            float(np.linalg.norm(s.v - v_rep)) / eps for v_rep, eps in anchors
        )
        band = int(np.searchsorted(band_edges, ratio, side="left"))
        counts[band] += 1
        hit = predict(m, s.v) == s.label
        if hit:
            correct[band] += 1
            total_correct += 1
    return ProximityReport(
        band_edges=band_edges,
        counts=counts,
        correct=correct,
        overall_count=len(eval_set),
        overall_correct=total_correct,
    )
