"""Iterative rank-r QP repair loop with exact-gap convergence checking.

Each outer iteration recomputes the rank-r basis of the current weight,
assembles the linearized QP around the exact current gaps, applies the
solved low-rank update, and stops as soon as every repair sample's exact
gap clears the target margin. The convergence check uses true forward
passes, never the linearization, so a converged run carries its margin
guarantee by construction.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InfeasibleRepairError, InternalInvariantError, NumericFailureError
from .linalg import spectral_norm, truncated_svd
from .model import gap as exact_gap
from .model import predict
from .qp import RepairHyper, assemble, kkt_residuals, solve

__all__ = ["IterationRecord", "RepairTrace", "RepairOutcome", "repair"]

# The convergence test is exact (gap >= gamma_s, no tolerance), while the QP
# only satisfies its linearized rows up to solver tolerance, so the loop asks
# the subproblem for a whisker more margin than it checks for. Without this
# the final iterate can sit a few ulps below the margin forever.
_MARGIN_PAD = 1e-5


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    repair_gap_min: float
    repair_gap_mean: float
    remain_gap_min: float | None
    delta_w_fro: float
    w_spectral: float
    qp_status: str
    qp_iterations: int
    repair_meeting_gamma_s: int
    max_remain_violation: float | None
    # independent KKT re-check of the solved QP (None unless solved)
    kkt_stationarity: float | None = None
    kkt_primal: float | None = None
    kkt_complementarity: float | None = None


@dataclass
class RepairTrace:
    hyper: RepairHyper
    records: list = field(default_factory=list)
    converged: bool = False
    total_iterations: int = 0
    remain_violations: list = field(default_factory=list)

    def to_jsonable(self):
        return {
            "report_kind": "repair_trace",
            "format_version": "1.0",
            "hyper": {
                "rank": int(self.hyper.rank),
                "gamma_s": float(self.hyper.gamma_s),
                "gamma_h": float(self.hyper.gamma_h),
                "lam": float(self.hyper.lam),
                "rho": float(self.hyper.rho),
                "max_iters": int(self.hyper.max_iters),
            },
            "converged": bool(self.converged),
            "total_iterations": int(self.total_iterations),
            "remain_violations": [str(i) for i in self.remain_violations],
            "iterations": [
                {
                    "iteration": int(r.iteration),
                    "repair_gap_min": float(r.repair_gap_min),
                    "repair_gap_mean": float(r.repair_gap_mean),
                    "remain_gap_min": None if r.remain_gap_min is None else float(r.remain_gap_min),
                    "delta_w_fro": float(r.delta_w_fro),
                    "w_spectral": float(r.w_spectral),
                    "qp_status": str(r.qp_status),
                    "qp_iterations": int(r.qp_iterations),
                    "repair_meeting_gamma_s": int(r.repair_meeting_gamma_s),
                    "max_remain_violation": None
                    if r.max_remain_violation is None
                    else float(r.max_remain_violation),
                    "kkt_stationarity": None
                    if r.kkt_stationarity is None
                    else float(r.kkt_stationarity),
                    "kkt_primal": None if r.kkt_primal is None else float(r.kkt_primal),
                    "kkt_complementarity": None
                    if r.kkt_complementarity is None
                    else float(r.kkt_complementarity),
                }
                for r in self.records
            ],
        }

    @classmethod
    def from_jsonable(cls, data):
        if data.get("report_kind") != "repair_trace":
            raise ValueError("not a repair trace report")
        hyper = RepairHyper(
            rank=int(data["hyper"]["rank"]),
            gamma_s=float(data["hyper"]["gamma_s"]),
            gamma_h=float(data["hyper"]["gamma_h"]),
            lam=float(data["hyper"]["lam"]),
            rho=float(data["hyper"]["rho"]),
            max_iters=int(data["hyper"]["max_iters"]),
        )
        trace = cls(
            hyper=hyper,
            converged=bool(data["converged"]),
            total_iterations=int(data["total_iterations"]),
            remain_violations=[str(i) for i in data.get("remain_violations", [])],
        )
        for r in data.get("iterations", []):
            trace.records.append(
                IterationRecord(
                    iteration=int(r["iteration"]),
                    repair_gap_min=float(r["repair_gap_min"]),
                    repair_gap_mean=float(r["repair_gap_mean"]),
                    remain_gap_min=None if r["remain_gap_min"] is None else float(r["remain_gap_min"]),
                    delta_w_fro=float(r["delta_w_fro"]),
                    w_spectral=float(r["w_spectral"]),
                    qp_status=str(r["qp_status"]),
                    qp_iterations=int(r["qp_iterations"]),
                    repair_meeting_gamma_s=int(r["repair_meeting_gamma_s"]),
                    max_remain_violation=None
                    if r["max_remain_violation"] is None
                    else float(r["max_remain_violation"]),
                    kkt_stationarity=None
                    if r.get("kkt_stationarity") is None
                    else float(r["kkt_stationarity"]),
                    kkt_primal=None if r.get("kkt_primal") is None else float(r["kkt_primal"]),
                    kkt_complementarity=None
                    if r.get("kkt_complementarity") is None
                    else float(r["kkt_complementarity"]),
                )
            )
        return trace


@dataclass(frozen=True, eq=False)
class RepairOutcome:
    model: object
    trace: RepairTrace


def _gaps(m, samples):
    return np.array([exact_gap(m, s.v, s.label) for s in samples])


def repair(m, repair_set, remain_set, hyper, threads=1, promote_remain_violations=False):
    """Run the iterative repair loop.

    Preconditions checked here: the repair set is non-empty and every remain
    sample's recorded label matches the model's current prediction (remain
    labels are only meaningful relative to the weights being repaired).

    A primal-infeasible QP aborts with :class:`InfeasibleRepairError`
    carrying the trace so far. Hitting the iteration cap is not an error:
    the outcome is returned with ``converged=False`` and downstream
    certification refuses it. With ``promote_remain_violations`` set, remain
    samples whose exact gap ends below gamma_h after convergence are moved
    into soft (slack) treatment at margin gamma_h and the loop re-enters;
    by default violations are only reported in the trace.
    """
    repair_set = list(repair_set)
    remain_set = list(remain_set)
    if not repair_set:
        raise ValueError("repair set is empty")
    for s in remain_set:
        predicted = predict(m, s.v)
        if predicted != s.label:
            raise ValueError(
                f"remain sample {s.id!r} is labeled {s.label} but the model predicts "
                f"{predicted}; remain labels must be recorded under the input weights"
            )

    trace = RepairTrace(hyper=hyper)
    current = m
    # soft rows: (sample, margin); starts as the repair set at gamma_s
    soft = [(s, hyper.gamma_s) for s in repair_set]
    hard = list(remain_set)

    t = 0
    while t < hyper.max_iters:
        t += 1
        basis = truncated_svd(current.W, hyper.rank).U
        problem = assemble(
            current,
            basis,
            [s for s, _ in soft],
            hard,
            hyper,
            repair_margins=np.array([margin + _MARGIN_PAD for _, margin in soft]),
            threads=threads,
        )
        solution = solve(problem)
        if solution.status in ("primal-infeasible", "dual-infeasible"):
            # record the state at the abort so the trace shows where it died
            pre_gaps = _gaps(current, [s for s, _ in soft])[: len(repair_set)]
            pre_remain = _gaps(current, hard) if hard else None
            trace.records.append(
                IterationRecord(
                    iteration=t,
                    repair_gap_min=float(pre_gaps.min()),
                    repair_gap_mean=float(pre_gaps.mean()),
                    remain_gap_min=None if pre_remain is None else float(pre_remain.min()),
                    delta_w_fro=0.0,
                    w_spectral=spectral_norm(current.W),
                    qp_status=solution.status,
                    qp_iterations=solution.iterations,
                    repair_meeting_gamma_s=int(np.sum(pre_gaps >= hyper.gamma_s)),
                    max_remain_violation=None,
                )
            )
            trace.total_iterations = t
            raise InfeasibleRepairError(
                f"repair QP {solution.status} at iteration {t}",
                iteration=t,
                trace=trace,
            )

        kkt = kkt_residuals(problem, solution) if solution.status == "solved" else None

        B = solution.beta.reshape(hyper.rank, current.d_in)
        delta_w = basis @ B
        new_W = current.W + delta_w
        if not np.all(np.isfinite(new_W)):
            raise NumericFailureError(f"non-finite weights at iteration {t}", step=t)
        current = replace(current, W=new_W)

        soft_gaps = _gaps(current, [s for s, _ in soft])
        repair_gaps = soft_gaps[: len(repair_set)]
        remain_gaps = _gaps(current, hard) if hard else None
        rows = problem.remain_rows
        if problem.groups[1] and solution.status == "solved":
            remain_viol = float(
                np.max(np.clip(problem.l[rows] - problem.A[rows] @ solution.x, 0.0, None))
            )
        elif problem.groups[1]:
            remain_viol = float("nan")
        else:
            remain_viol = None
        trace.records.append(
            IterationRecord(
                iteration=t,
                repair_gap_min=float(repair_gaps.min()),
                repair_gap_mean=float(repair_gaps.mean()),
                remain_gap_min=None if remain_gaps is None else float(remain_gaps.min()),
                delta_w_fro=float(np.linalg.norm(delta_w)),
                w_spectral=spectral_norm(current.W),
                qp_status=solution.status,
                qp_iterations=solution.iterations,
                repair_meeting_gamma_s=int(np.sum(repair_gaps >= hyper.gamma_s)),
                max_remain_violation=remain_viol,
                kkt_stationarity=None if kkt is None else kkt[0],
                kkt_primal=None if kkt is None else kkt[1],
                kkt_complementarity=None if kkt is None else kkt[2],
            )
        )

        margins = np.array([margin for _, margin in soft])
        if not bool(np.all(soft_gaps >= margins)):
            continue

        # converged for the current soft set; surface any exact remain
        # violations, optionally promoting them and re-entering the loop
        violated = []
        if hard:
            final_remain = _gaps(current, hard)
            violated = [s for s, g in zip(hard, final_remain) if g < hyper.gamma_h]
        if violated and promote_remain_violations:
            violated_ids = {s.id for s in violated}
            soft = soft + [(s, hyper.gamma_h) for s in violated]
            hard = [s for s in hard if s.id not in violated_ids]
            continue
        trace.converged = True
        trace.total_iterations = t
        trace.remain_violations = [s.id for s in violated]
        break
    else:
        trace.converged = False
        trace.total_iterations = hyper.max_iters
        if hard:
            final_remain = _gaps(current, hard)
            trace.remain_violations = [
                s.id for s, g in zip(hard, final_remain) if g < hyper.gamma_h
            ]

    if trace.converged:
        # re-verify the margin guarantee with exact forward passes
        final_gaps = _gaps(current, repair_set)
        if not bool(np.all(final_gaps >= hyper.gamma_s)):
            raise InternalInvariantError(
                "converged run fails the exact margin re-check; this is a bug"
            )
    return RepairOutcome(model=current, trace=trace)
