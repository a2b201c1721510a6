"""Report rendering for the CLI: delimited tables and matplotlib figures.

Every report the pipeline writes lands in three forms side by side: the
canonical JSON (see :mod:`marginrepair.bundle`), a flat CSV for spreadsheet
work, and a PNG chart. Rendering dispatches on the report's ``report_kind``.
"""

import csv
import io
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .bundle import write_report

__all__ = ["write_csv", "write_figure", "render_report"]


def _rows_for(report):
    kind = report["report_kind"]
    if kind == "certificate":
        header = ["set", "id", "gap", "epsilon_star", "meets_threshold"]
        rows = [
            ["repair", e["id"], e["gap"], e["epsilon_star"], e["meets_gamma_s"]]
            for e in report["repair_samples"]
        ] + [
            ["remain", e["id"], e["gap"], "", e["meets_gamma_h"]]
            for e in report["remain_samples"]
        ]
        return header, rows
    if kind == "stress":
        header = ["multiplier", "flipped", "fraction"]
        return header, [
            [r["multiplier"], r["flipped"], r["fraction"]] for r in report["cumulative_flips"]
        ]
    if kind == "proximity":
        header = ["lower", "upper", "count", "correct", "accuracy"]
        return header, [
            [b["lower"], "" if b["upper"] is None else b["upper"], b["count"], b["correct"],
             "" if b["accuracy"] is None else b["accuracy"]]
            for b in report["bands"]
        ]
    if kind == "repair_trace":
        header = [
            "iteration", "repair_gap_min", "repair_gap_mean", "remain_gap_min",
            "delta_w_fro", "w_spectral", "qp_status", "qp_iterations",
            "repair_meeting_gamma_s", "max_remain_violation",
            "kkt_stationarity", "kkt_primal", "kkt_complementarity",
        ]
        blank = lambda value: "" if value is None else value
        return header, [
            [
                r["iteration"], r["repair_gap_min"], r["repair_gap_mean"],
                blank(r["remain_gap_min"]),
                r["delta_w_fro"], r["w_spectral"], r["qp_status"], r["qp_iterations"],
                r["repair_meeting_gamma_s"],
                blank(r["max_remain_violation"]),
                blank(r.get("kkt_stationarity")),
                blank(r.get("kkt_primal")),
                blank(r.get("kkt_complementarity")),
            ]
            for r in report["iterations"]
        ]
    if kind == "gsn_ft_trace":
        header = ["step", "kappa", "loss", "w_spectral"]
        return header, [
            [s["step"], s["kappa"], s["loss"], s["w_spectral"]] for s in report["steps"]
        ]
    if kind == "sweep":
        header = [
            "value", "status", "iterations", "repair_gap_min",
            "remain_retained_fraction", "eval_accuracy", "epsilon_star_median",
        ]
        return header, [
            [
                r["value"], r["status"],
                "" if r["iterations"] is None else r["iterations"],
                "" if r["repair_gap_min"] is None else r["repair_gap_min"],
                "" if r["remain_retained_fraction"] is None else r["remain_retained_fraction"],
                "" if r["eval_accuracy"] is None else r["eval_accuracy"],
                "" if r["epsilon_star_median"] is None else r["epsilon_star_median"],
            ]
            for r in report["rows"]
        ]
    raise ValueError(f"no table layout for report kind {kind!r}")


def write_csv(report, path):
    header, rows = _rows_for(report)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(buffer.getvalue())


def _figure_certificate(report, ax_pair):
    ax1, ax2 = ax_pair
    gaps = [e["gap"] for e in report["repair_samples"]]
    radii = [e["epsilon_star"] for e in report["repair_samples"]]
    ax1.hist(gaps, bins=min(20, max(5, len(gaps))), color="steelblue")
    ax1.axvline(report["gamma_s"], color="crimson", linestyle="--", label="gamma_s")
    ax1.set_xlabel("repair gap")
    ax1.set_ylabel("samples")
    ax1.legend()
    ax2.hist(radii, bins=min(20, max(5, len(radii))), color="seagreen")
    ax2.set_xlabel("certified radius")
    ax2.set_ylabel("samples")


def _figure_stress(report, ax):
    ks = [r["multiplier"] for r in report["cumulative_flips"]]
    fr = [100.0 * r["fraction"] for r in report["cumulative_flips"]]
    ax.step(ks, fr, where="post", marker="o", color="darkorange")
    ax.set_xscale("log")
    ax.set_xlabel("radius multiplier")
    ax.set_ylabel("cumulative flips [%]")
    ax.set_ylim(-2, 102)
    ax.axvline(1.0, color="crimson", linestyle="--", label="certified radius")
    ax.legend()


def _figure_proximity(report, ax):
    labels = []
    values = []
    for band in report["bands"]:
        upper = "inf" if band["upper"] is None else f"{band['upper']:g}"
        labels.append(f"{band['lower']:g}-{upper}")
        values.append(0.0 if band["accuracy"] is None else 100.0 * band["accuracy"])
    ax.bar(range(len(values)), values, color="slateblue")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_xlabel("distance band (x certified radius)")
    ax.set_ylabel("accuracy [%]")
    ax.set_ylim(0, 105)


def _figure_repair_trace(report, ax_pair):
    ax1, ax2 = ax_pair
    its = [r["iteration"] for r in report["iterations"]]
    ax1.plot(its, [r["repair_gap_min"] for r in report["iterations"]], marker="o", label="min repair gap")
    ax1.plot(its, [r["repair_gap_mean"] for r in report["iterations"]], marker="s", label="mean repair gap")
    ax1.axhline(report["hyper"]["gamma_s"], color="crimson", linestyle="--", label="gamma_s")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("gap")
    ax1.legend()
    ax2.semilogy(
        its,
        [max(r["delta_w_fro"], 1e-16) for r in report["iterations"]],
        marker="o",
        color="dimgray",
    )
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("update Frobenius norm")


def _figure_gsn_ft(report, ax_pair):
    ax1, ax2 = ax_pair
    steps = [s["step"] for s in report["steps"]]
    ax1.plot(steps, [s["kappa"] for s in report["steps"]], marker="o", color="steelblue")
    ax1.axvline(report["selected_step"], color="crimson", linestyle="--", label="selected step")
    ax1.set_xlabel("step")
    ax1.set_ylabel("sensitivity norm")
    ax1.legend()
    ax2.plot(steps, [s["loss"] for s in report["steps"]], marker="o", color="seagreen")
    ax2.set_xlabel("step")
    ax2.set_ylabel("cross-entropy loss")


def _figure_sweep(report, ax):
    rows = [r for r in report["rows"] if r["eval_accuracy"] is not None]
    if rows:
        ax.plot(
            [r["value"] for r in rows],
            [100.0 * r["eval_accuracy"] for r in rows],
            marker="o",
            color="steelblue",
            label="eval accuracy",
        )
    dead = [r for r in report["rows"] if r["eval_accuracy"] is None]
    for r in dead:
        ax.axvline(r["value"], color="crimson", linestyle=":", alpha=0.6)
    ax.set_xlabel(report["parameter"])
    ax.set_ylabel("accuracy [%]")
    if rows:
        ax.legend()


def write_figure(report, path):
    kind = report["report_kind"]
    if kind in ("certificate", "repair_trace", "gsn_ft_trace"):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    else:
        fig, axes = plt.subplots(figsize=(6, 4))
    try:
        if kind == "certificate":
            _figure_certificate(report, axes)
        elif kind == "stress":
            _figure_stress(report, axes)
        elif kind == "proximity":
            _figure_proximity(report, axes)
        elif kind == "repair_trace":
            _figure_repair_trace(report, axes)
        elif kind == "gsn_ft_trace":
            _figure_gsn_ft(report, axes)
        elif kind == "sweep":
            _figure_sweep(report, axes)
        else:
            raise ValueError(f"no figure layout for report kind {kind!r}")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
    finally:
        plt.close(fig)


def render_report(report, out_dir, stem):
    """Write <stem>.json, <stem>.csv and <stem>.png under ``out_dir``.

    Accepts a report object with ``to_jsonable`` or an already-converted
    dict; returns the JSON path.
    """
    data = report.to_jsonable() if hasattr(report, "to_jsonable") else report
    json_path = os.path.join(out_dir, f"{stem}.json")
    write_report(data, json_path)
    write_csv(data, os.path.join(out_dir, f"{stem}.csv"))
    write_figure(data, os.path.join(out_dir, f"{stem}.png"))
    return json_path
