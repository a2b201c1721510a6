import numpy as np
import pytest

from marginrepair import RepairHyper
from marginrepair.cert import (
    certify,
    gap_lipschitz_bound,
    lipschitz_bound,
    proximity_bands,
    robustness_radius,
    stress_test,
    uniform_ball,
)
from marginrepair.errors import InternalInvariantError, UnconvergedTraceError
from marginrepair.linalg import spectral_norm
from marginrepair.model import HeadModel, Sample, gap, logits_batch, predict
from marginrepair.repair import RepairTrace

from helpers import random_model


def test_lipschitz_identity():
    m = HeadModel(W=np.eye(3), b=np.zeros(3), W_c=np.eye(3)[:2], b_c=np.zeros(2), activation="relu")
    # ||W||=1 and the two-row identity slice also has norm 1
    assert lipschitz_bound(m) == pytest.approx(1.0, rel=1e-9)


def test_lipschitz_diagonal_product():
    m = HeadModel(
        W=np.diag([2.0, 2.0]), b=np.zeros(2), W_c=np.diag([3.0, 3.0]), b_c=np.zeros(2),
        activation="tanh",
    )
    assert lipschitz_bound(m) == pytest.approx(6.0, rel=1e-9)


def test_gap_lipschitz_bound_empirically_sound():
    rng = np.random.default_rng(13)
    for _ in range(3):
        m = random_model(int(rng.integers(2**31)), d_in=6, d_out=5, n_classes=3)
        L = gap_lipschitz_bound(m)
        count = 100_000
        V = rng.standard_normal((count, 6)) * 2.0
        D = rng.standard_normal((count, 6)) * rng.uniform(0.0, 1.0, (count, 1))
        ys = rng.integers(0, 3, count)
        s_base = logits_batch(m, V)
        s_pert = logits_batch(m, V + D)

        def gaps(S):
            picked = S[np.arange(count), ys]
            masked = S.copy()
            masked[np.arange(count), ys] = -np.inf
            return picked - masked.max(axis=1)

        delta_gap = np.abs(gaps(s_pert) - gaps(s_base))
        norms = np.linalg.norm(D, axis=1)
        assert np.all(delta_gap <= L * norms + 1e-9)


def test_spectral_product_is_unsound_for_the_gap():
    # antipodal binary head: the gap slope reaches sqrt(2) times the
    # spectral product, which is why certificates use the pairwise constant
    w = np.array([[1.0, 0.0]])
    m = HeadModel(
        W=np.eye(2), b=np.zeros(2),
        W_c=np.vstack([w, -w]), b_c=np.zeros(2), activation="tanh",
    )
    product = lipschitz_bound(m)
    pairwise = gap_lipschitz_bound(m)
    assert pairwise == pytest.approx(np.sqrt(2.0) * product, rel=1e-9)
    v = np.zeros(2)
    delta = np.array([1e-4, 0.0])
    slope = abs(gap(m, v + delta, 0) - gap(m, v, 0)) / np.linalg.norm(delta)
    assert slope > product  # the product bound really is violated
    assert slope <= pairwise + 1e-9


def test_radius_trivials():
    assert robustness_radius(0.0, 6.0) == 0.0
    assert robustness_radius(1.0, 6.0) == pytest.approx(1.0 / 12.0)
    assert robustness_radius(-0.5, 2.0) < 0.0
    with pytest.raises(ValueError):
        robustness_radius(1.0, 0.0)


def test_certify_refuses_unconverged(seed33_problem):
    prob = seed33_problem
    hyper = RepairHyper()
    trace = RepairTrace(hyper=hyper, converged=False, total_iterations=5)
    with pytest.raises(UnconvergedTraceError):
        certify(prob.model, prob.repair_set, prob.remain_set, hyper, trace)


def test_certify_detects_broken_margin(seed33_problem):
    # a converged trace paired with the *unrepaired* model must trip the
    # internal invariant: these repair samples have negative gaps
    prob = seed33_problem
    hyper = RepairHyper()
    fake = RepairTrace(hyper=hyper, converged=True, total_iterations=1)
    with pytest.raises(InternalInvariantError):
        certify(prob.model, prob.repair_set, prob.remain_set, hyper, fake)


def test_certify_seed33(seed33_problem, seed33_outcome):
    prob, outcome = seed33_problem, seed33_outcome
    hyper = RepairHyper()
    report = certify(outcome.model, prob.repair_set, prob.remain_set, hyper, outcome.trace)
    assert all(e.meets_gamma_s for e in report.repair_entries)
    L = report.lipschitz
    assert L == pytest.approx(gap_lipschitz_bound(outcome.model), rel=1e-12)
    # the pairwise constant stays within sqrt(2) of the spectral product
    product = spectral_norm(outcome.model.W) * spectral_norm(outcome.model.W_c)
    assert L <= np.sqrt(2.0) * product + 1e-12
    for e in report.repair_entries:
        assert e.epsilon_star == e.gap / (2.0 * L)  # exact identity
        assert e.epsilon_star >= hyper.gamma_s / (2.0 * L)
    summary = report.summary()
    assert summary["n_repair"] == len(prob.repair_set)
    assert summary["epsilon_star_min"] >= hyper.gamma_s / (2.0 * L)


def test_remain_boundary_is_inclusive():
    m = HeadModel(
        W=np.zeros((2, 2)), b=np.zeros(2),
        W_c=np.zeros((2, 2)), b_c=np.array([0.3, 0.0]), activation="relu",
    )
    # every input scores exactly (0.3, 0): remain gap == gamma_h
    hyper = RepairHyper()
    remain = [Sample(v=np.zeros(2), label=0, id="p0")]
    repair_set = [Sample(v=np.ones(2), label=0, id="r0")]
    assert gap(m, remain[0].v, 0) == hyper.gamma_h
    trace = RepairTrace(hyper=hyper, converged=True, total_iterations=1)
    with pytest.raises(InternalInvariantError):
        # gap 0.3 < gamma_s, so certification refuses the repair sample...
        certify(m, repair_set, remain, hyper, trace)
    # ...but with no repair samples the remain flag logic is observable
    report = certify(m, [], remain, hyper, trace)
    assert report.remain_entries[0].meets_gamma_h is True


def certified(seed33_problem, seed33_outcome):
    return certify(
        seed33_outcome.model,
        seed33_problem.repair_set,
        seed33_problem.remain_set,
        RepairHyper(),
        seed33_outcome.trace,
    )


def test_stress_no_flips_inside_certified_radius(seed33_problem, seed33_outcome):
    report = certified(seed33_problem, seed33_outcome)
    stress = stress_test(
        seed33_outcome.model, seed33_problem.repair_set, report, [1.0], n_mc=1000, seed=5
    )
    assert all(f is None or f > 1.0 for f in stress.first_flip)
    assert stress.cumulative()[0]["flipped"] == 0


def test_stress_first_flips_finite_on_wide_grid(seed33_problem, seed33_outcome):
    report = certified(seed33_problem, seed33_outcome)
    grid = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 1000.0]
    stress = stress_test(
        seed33_outcome.model, seed33_problem.repair_set, report, grid, n_mc=500, seed=6
    )
    assert all(f is None or f >= 1.0 for f in stress.first_flip)
    assert any(f is not None for f in stress.first_flip)
    counts = [row["flipped"] for row in stress.cumulative()]
    assert counts == sorted(counts)  # cumulative counts non-decreasing


def test_stress_deterministic(seed33_problem, seed33_outcome):
    report = certified(seed33_problem, seed33_outcome)
    a = stress_test(seed33_outcome.model, seed33_problem.repair_set, report, [1.0, 5.0], n_mc=200, seed=9)
    b = stress_test(seed33_outcome.model, seed33_problem.repair_set, report, [1.0, 5.0], n_mc=200, seed=9)
    assert a.to_jsonable() == b.to_jsonable()
    # and threads cannot change the outcome
    c = stress_test(
        seed33_outcome.model, seed33_problem.repair_set, report, [1.0, 5.0], n_mc=200, seed=9, threads=4
    )
    assert a.to_jsonable() == c.to_jsonable()


def test_stress_validates_multipliers(seed33_problem, seed33_outcome):
    report = certified(seed33_problem, seed33_outcome)
    with pytest.raises(ValueError):
        stress_test(seed33_outcome.model, seed33_problem.repair_set, report, [5.0, 1.0])
    with pytest.raises(ValueError):
        stress_test(seed33_outcome.model, seed33_problem.repair_set, report, [])


def test_gap_halving_inside_certified_radius(seed33_problem, seed33_outcome):
    # inside the certified radius the gap can lose at most half its value
    prob, outcome = seed33_problem, seed33_outcome
    report = certified(prob, outcome)
    for index, entry in enumerate(report.repair_entries):
        sample = next(s for s in prob.repair_set if s.id == entry.id)
        rng = np.random.default_rng([17, index])
        points = uniform_ball(rng, sample.v, entry.epsilon_star, 500)
        base = entry.gap
        for point in points:
            g = gap(outcome.model, point, sample.label)
            assert g >= base / 2.0 - 1e-9
            assert predict(outcome.model, point) == sample.label


def test_uniform_ball_respects_radius():
    rng = np.random.default_rng(3)
    center = np.array([1.0, -2.0, 0.5])
    points = uniform_ball(rng, center, 0.7, 4000)
    dists = np.linalg.norm(points - center, axis=1)
    assert np.all(dists <= 0.7 + 1e-12)
    # u^(1/d) scaling concentrates mass near the boundary, not the center
    assert np.median(dists) > 0.5


def test_proximity_zero_distance_lands_in_first_band(seed33_problem, seed33_outcome):
    prob, outcome = seed33_problem, seed33_outcome
    report = certified(prob, outcome)
    anchor = prob.repair_set[0]
    eval_set = [Sample(v=anchor.v, label=anchor.label, id="e0")]
    prox = proximity_bands(outcome.model, eval_set, prob.repair_set, report, [20.0, 50.0])
    data = prox.to_jsonable()
    assert data["bands"][0]["count"] == 1
    assert data["bands"][0]["correct"] == 1  # repaired point predicts its label


def test_proximity_recount_oracle(seed33_problem, seed33_outcome):
    prob, outcome = seed33_problem, seed33_outcome
    report = certified(prob, outcome)
    edges = [5.0, 15.0, 40.0]
    prox = proximity_bands(outcome.model, prob.eval_set, prob.repair_set, report, edges)
    # independent two-pass recount
    radii = {e.id: e.epsilon_star for e in report.repair_entries}
    ratios = []
    for s in prob.eval_set:
        best = min(
            float(np.linalg.norm(s.v - r.v)) / radii[r.id] for r in prob.repair_set
        )
        ratios.append((best, predict(outcome.model, s.v) == s.label))
    bounds = [(0, edges[0]), (edges[0], edges[1]), (edges[1], edges[2]), (edges[2], np.inf)]
    for band, (lo, hi) in enumerate(bounds):
        members = [ok for ratio, ok in ratios if lo < ratio <= hi or (band == 0 and ratio == 0.0)]
        assert prox.counts[band] == len(members)
        assert prox.correct[band] == sum(members)
    assert sum(prox.counts) == len(prob.eval_set)


def test_proximity_validates_inputs(seed33_problem, seed33_outcome):
    prob, outcome = seed33_problem, seed33_outcome
    report = certified(prob, outcome)
    with pytest.raises(ValueError):
        proximity_bands(outcome.model, prob.eval_set, prob.repair_set, report, [])
    with pytest.raises(ValueError):
        proximity_bands(outcome.model, [], prob.repair_set, report, [10.0])
