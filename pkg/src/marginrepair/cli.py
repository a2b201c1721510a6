"""Operator-facing command line for the repair pipeline.

The documented happy path is five commands in sequence:

    marginrepair synth   --seed 33 --out run/synth
    marginrepair gsn-ft  --bundle run/synth/bundle    --out run/tuned
    marginrepair repair  --bundle run/tuned/bundle    --out run/repaired
    marginrepair certify --bundle run/repaired/bundle \
                         --trace run/repaired/repair_trace.json --out run/cert
    marginrepair stress  --bundle run/repaired/bundle \
                         --report run/cert/certificate.json --out run/stress

Every command validates its inputs before writing anything, records its
flags as run_config.json under --out, and renders each report as JSON plus
a CSV table and a PNG figure side by side.

Exit codes: 0 success (repair: converged); 2 invalid input; 3 QP
infeasible; 4 non-convergence or certificate refusal; 5 numeric failure or
broken internal invariant. Engine errors print one machine-parsable line on
stderr: ``error: kind=<kind> exit=<code> msg=<json string>``.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .bundle import BundleFormatError, TensorBundle, load, load_report, save, write_report
from .cert import CertificateReport, certify, proximity_bands, stress_test
from .errors import (
    GenerationError,
    InfeasibleRepairError,
    InternalInvariantError,
    NumericFailureError,
    UnconvergedTraceError,
)
from .gsn import GsnFtConfig, gap_sensitivity_norm, gsn_ft
from .model import gap as exact_gap
from .model import predict
from .qp import RepairHyper
from .repair import RepairTrace, repair
from .reporting import render_report
from .synth import SynthConfig, generate
from .util import default_threads

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3
EXIT_UNCONVERGED = 4
EXIT_NUMERIC = 5

DEFAULT_MULTIPLIERS = (1, 5, 10, 15, 20, 25, 30, 35, 40, 90, 150, 250, 400, 600, 700)
DEFAULT_BAND_EDGES = (20, 25, 30, 35, 40, 50)


def _error_line(kind, code, message):
    sys.stderr.write(f"error: kind={kind} exit={code} msg={json.dumps(str(message))}\n")


def _write_run_config(args, out_dir):
    flags = {
        key: value
        for key, value in sorted(vars(args).items())
        if key not in ("func",) and value is not None
    }
    write_report(
        {"report_kind": "run_config", "command": args.command, "arguments": flags},
        os.path.join(out_dir, "run_config.json"),
    )


def _float_list(text):
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {err}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one number")
    return values


def _int_list(text):
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {err}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _hyper_from(args):
    return RepairHyper(
        rank=args.rank,
        gamma_s=args.gamma_s,
        gamma_h=args.gamma_h,
        lam=args.lam,
        rho=args.rho,
        max_iters=args.max_iters,
    )


def _add_hyper_flags(parser):
    parser.add_argument("--rank", type=int, default=2, help="rank of the weight update")
    parser.add_argument("--gamma-s", type=float, default=1.0, help="repair margin target")
    parser.add_argument("--gamma-h", type=float, default=0.3, help="remain margin lower bound")
    parser.add_argument("--lambda", dest="lam", type=float, default=50.0, help="slack penalty")
    parser.add_argument("--rho", type=float, default=2.0, help="update regularization")
    parser.add_argument("--max-iters", type=int, default=300, help="outer iteration cap")


def cmd_synth(args):
    cfg = SynthConfig(
        seed=args.seed,
        d_in=args.d_in,
        d_out=args.d_out,
        n_classes=args.classes,
        activation=args.activation,
        n_repair=args.n_repair,
        n_remain=args.n_remain,
        n_eval=args.n_eval,
        n_aux=args.n_aux,
        cluster_separation=args.cluster_separation,
        saturation_bias=args.saturation_bias,
    )
    problem = generate(cfg)
    bundle = TensorBundle.from_model_and_sets(
        problem.model,
        {
            "repair": problem.repair_set,
            "remain": problem.remain_set,
            "eval": problem.eval_set,
            "aux": problem.aux_set,
        },
    )
    os.makedirs(args.out, exist_ok=True)
    save(bundle, os.path.join(args.out, "bundle"))
    _write_run_config(args, args.out)
    print(
        f"bundle written to {os.path.join(args.out, 'bundle')} "
        f"(repair {len(problem.repair_set)}, remain {len(problem.remain_set)}, "
        f"eval {len(problem.eval_set)}, aux {len(problem.aux_set)})"
    )
    return EXIT_OK


def cmd_gsn(args):
    bundle = load(args.bundle)
    m = bundle.to_model()
    samples = bundle.samples(args.set)
    if not samples:
        raise ValueError(f"sample set {args.set!r} is empty")
    values = []
    for s in samples:
        kappa = gap_sensitivity_norm(m, s.v, s.label, args.rank)
        values.append(kappa)
        print(f"{s.id}\t{kappa:.6f}")
    print(f"mean\t{np.mean(values):.6f}")
    return EXIT_OK


def cmd_gsn_ft(args):
    bundle = load(args.bundle)
    m = bundle.to_model()
    if args.aux_bundle:
        aux_bundle = load(args.aux_bundle)
        aux = aux_bundle.samples(args.aux_set)
    else:
        aux = bundle.samples(args.aux_set)
    aux_ids = {s.id for s in aux}
    for set_name in ("repair", "remain", "eval"):
        if set_name in bundle.sample_sets:
            overlap = aux_ids & set(bundle.sample_sets[set_name].ids)
            if overlap:
                raise ValueError(
                    f"auxiliary set overlaps {set_name!r} on ids {sorted(overlap)[:5]}"
                )
    cfg = GsnFtConfig(
        max_steps=args.max_steps,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        aux_size=args.aux_size,
        rank=args.rank,
        seed=args.seed,
    )
    tuned, trace = gsn_ft(m, aux, cfg)

    roles = bundle.model_meta["roles"]
    out_bundle = bundle.with_tensors(
        {
            roles["W"]: np.asarray(tuned.W),
            roles["b"]: np.asarray(tuned.b),
            roles["W_c"]: np.asarray(tuned.W_c),
            roles["b_c"]: np.asarray(tuned.b_c),
        }
    )
    if "remain" in out_bundle.sample_sets:
        remain = bundle.samples("remain")
        out_bundle = out_bundle.with_labels(
            "remain", [predict(tuned, s.v) for s in remain]
        )
    os.makedirs(args.out, exist_ok=True)
    save(out_bundle, os.path.join(args.out, "bundle"))
    render_report(trace, args.out, "gsn_ft_trace")
    _write_run_config(args, args.out)
    print(
        f"selected step {trace.selected_step} "
        f"(kappa {trace.steps[trace.selected_step].kappa:.4f}, "
        f"step-0 kappa {trace.steps[0].kappa:.4f}); bundle written to "
        f"{os.path.join(args.out, 'bundle')}"
    )
    return EXIT_OK


def cmd_repair(args):
    bundle = load(args.bundle)
    m = bundle.to_model()
    repair_set = bundle.samples("repair")
    remain_set = bundle.samples("remain") if "remain" in bundle.sample_sets else []
    hyper = _hyper_from(args)
    os.makedirs(args.out, exist_ok=True)
    try:
        outcome = repair(
            m,
            repair_set,
            remain_set,
            hyper,
            threads=args.threads,
            promote_remain_violations=args.promote_remain_violations,
        )
    except InfeasibleRepairError as err:
        if err.trace is not None:
            render_report(err.trace, args.out, "repair_trace")
        _write_run_config(args, args.out)
        raise

    roles = bundle.model_meta["roles"]
    out_bundle = bundle.with_tensors({roles["W"]: np.asarray(outcome.model.W)})
    save(out_bundle, os.path.join(args.out, "bundle"))
    render_report(outcome.trace, args.out, "repair_trace")
    _write_run_config(args, args.out)
    status = "converged" if outcome.trace.converged else "did NOT converge"
    print(
        f"repair {status} after {outcome.trace.total_iterations} iterations; "
        f"bundle written to {os.path.join(args.out, 'bundle')}"
    )
    return EXIT_OK if outcome.trace.converged else EXIT_UNCONVERGED


def cmd_certify(args):
    bundle = load(args.bundle)
    m = bundle.to_model()
    repair_set = bundle.samples("repair")
    remain_set = bundle.samples("remain") if "remain" in bundle.sample_sets else []
    trace = RepairTrace.from_jsonable(load_report(args.trace))
    report = certify(m, repair_set, remain_set, trace.hyper, trace)
    os.makedirs(args.out, exist_ok=True)
    render_report(report, args.out, "certificate")
    _write_run_config(args, args.out)
    summary = report.summary()
    print(
        f"certified {summary['repair_meeting_gamma_s']}/{summary['n_repair']} repair "
        f"samples (gap min {summary['gap_min']:.4f}, radius min "
        f"{summary['epsilon_star_min']:.6f}); remain meeting margin "
        f"{summary['remain_meeting_gamma_h']}/{summary['n_remain']}"
    )
    return EXIT_OK


def cmd_stress(args):
    bundle = load(args.bundle)
    m = bundle.to_model()
    repair_set = bundle.samples("repair")
    certificate = CertificateReport.from_jsonable(load_report(args.report))
    report = stress_test(
        m,
        repair_set,
        certificate,
        multipliers=args.multipliers,
        n_mc=args.n_mc,
        seed=args.seed,
        threads=args.threads,
    )
    os.makedirs(args.out, exist_ok=True)
    render_report(report, args.out, "stress")
    _write_run_config(args, args.out)
    flips_at_1 = next(
        (row["flipped"] for row in report.cumulative() if row["multiplier"] == 1.0), None
    )
    tightness = report.median_tightness()
    print(
        f"stress complete: flips at 1x = {flips_at_1}, median tightness = "
        f"{'n/a' if tightness is None else f'{tightness:g}x'}"
    )
    return EXIT_OK


def cmd_proximity(args):
    bundle = load(args.bundle)
    m = bundle.to_model()
    repair_set = bundle.samples("repair")
    eval_set = bundle.samples(args.eval_set)
    certificate = CertificateReport.from_jsonable(load_report(args.report))
    report = proximity_bands(m, eval_set, repair_set, certificate, args.band_edges)
    os.makedirs(args.out, exist_ok=True)
    render_report(report, args.out, "proximity")
    _write_run_config(args, args.out)
    data = report.to_jsonable()
    print(
        f"proximity bands over {data['overall']['count']} samples, overall accuracy "
        f"{100.0 * data['overall']['accuracy']:.1f}%"
    )
    return EXIT_OK


def _sweep_cell(m, repair_set, remain_set, eval_set, hyper, threads):
    row = {
        "value": 0,
        "status": "converged",
        "iterations": None,
        "repair_gap_min": None,
        "remain_retained_fraction": None,
        "eval_accuracy": None,
        "epsilon_star_median": None,
    }
    try:
        outcome = repair(m, repair_set, remain_set, hyper, threads=threads)
    except InfeasibleRepairError:
        row["status"] = "infeasible"
        return row
    row["iterations"] = outcome.trace.total_iterations
    if not outcome.trace.converged:
        row["status"] = "max-iter"
        return row
    repaired = outcome.model
    gaps = [exact_gap(repaired, s.v, s.label) for s in repair_set]
    row["repair_gap_min"] = float(min(gaps))
    if remain_set:
        kept = sum(predict(repaired, s.v) == s.label for s in remain_set)
        row["remain_retained_fraction"] = kept / len(remain_set)
    if eval_set:
        hits = sum(predict(repaired, s.v) == s.label for s in eval_set)
        row["eval_accuracy"] = hits / len(eval_set)
    certificate = certify(repaired, repair_set, remain_set, hyper, outcome.trace)
    row["epsilon_star_median"] = certificate.summary()["epsilon_star_median"]
    return row


def cmd_sweep(args):
    chosen = [
        name
        for name, flag in (
            ("rank", args.ranks),
            ("repair_size", args.repair_sizes),
            ("remain_size", args.remain_sizes),
        )
        if flag is not None
    ]
    if len(chosen) != 1:
        raise ValueError("pass exactly one of --ranks, --repair-sizes, --remain-sizes")
    parameter = chosen[0]
    values = args.ranks or args.repair_sizes or args.remain_sizes

    bundle = load(args.bundle)
    m = bundle.to_model()
    repair_set = bundle.samples("repair")
    remain_set = bundle.samples("remain") if "remain" in bundle.sample_sets else []
    eval_set = bundle.samples("eval") if "eval" in bundle.sample_sets else []
    base = _hyper_from(args)

    rows = []
    for value in values:
        hyper = base
        rep, rem = repair_set, remain_set
        if parameter == "rank":
            if not 1 <= value <= min(m.d_out, m.d_in):
                raise ValueError(f"rank {value} out of range for this model")
            hyper = replace(base, rank=value)
        elif parameter == "repair_size":
            if not 1 <= value <= len(repair_set):
                raise ValueError(f"repair size {value} out of range (1..{len(repair_set)})")
            rep = repair_set[:value]
        else:
            if not 0 <= value <= len(remain_set):
                raise ValueError(f"remain size {value} out of range (0..{len(remain_set)})")
            rem = remain_set[:value]
        row = _sweep_cell(m, rep, rem, eval_set, hyper, args.threads)
        row["value"] = int(value)
        rows.append(row)
        print(
            f"{parameter}={value}: {row['status']}"
            + ("" if row["iterations"] is None else f" in {row['iterations']} iterations")
        )

    report = {
        "report_kind": "sweep",
        "format_version": "1.0",
        "parameter": parameter,
        "rows": rows,
    }
    os.makedirs(args.out, exist_ok=True)
    render_report(report, args.out, "sweep")
    _write_run_config(args, args.out)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="marginrepair",
        description="margin-constrained QP repair of linear-head classifiers",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic repair problem bundle")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--d-in", type=int, default=16)
    p.add_argument("--d-out", type=int, default=16)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--activation", choices=["relu", "tanh", "sigmoid", "softplus"], default="tanh")
    p.add_argument("--n-repair", type=int, default=5)
    p.add_argument("--n-remain", type=int, default=20)
    p.add_argument("--n-eval", type=int, default=50)
    p.add_argument("--n-aux", type=int, default=8)
    p.add_argument("--cluster-separation", type=float, default=4.0)
    p.add_argument("--saturation-bias", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gsn", help="print per-sample and mean gap sensitivity")
    p.add_argument("--bundle", required=True)
    p.add_argument("--set", default="repair", help="sample set to evaluate")
    p.add_argument("--rank", type=int, default=2)
    p.set_defaults(func=cmd_gsn)

    p = sub.add_parser("gsn-ft", help="sensitivity fine-tuning with checkpoint selection")
    p.add_argument("--bundle", required=True)
    p.add_argument("--aux-bundle", help="bundle holding the auxiliary set (default: --bundle)")
    p.add_argument("--aux-set", default="aux", help="sample set name for the auxiliary data")
    p.add_argument("--max-steps", type=int, default=30)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--aux-size", type=int, default=8)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gsn_ft)

    p = sub.add_parser("repair", help="iterative low-rank QP repair")
    p.add_argument("--bundle", required=True)
    _add_hyper_flags(p)
    p.add_argument("--promote-remain-violations", action="store_true")
    p.add_argument("--threads", type=int, default=default_threads())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_repair)

    p = sub.add_parser("certify", help="emit per-sample certificates for a converged repair")
    p.add_argument("--bundle", required=True, help="repaired bundle")
    p.add_argument("--trace", required=True, help="repair_trace.json from the repair run")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("stress", help="expanding-radius Monte Carlo stress test")
    p.add_argument("--bundle", required=True, help="repaired bundle")
    p.add_argument("--report", required=True, help="certificate.json")
    p.add_argument("--multipliers", type=_float_list, default=list(map(float, DEFAULT_MULTIPLIERS)))
    p.add_argument("--n-mc", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=default_threads())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stress)

    p = sub.add_parser("proximity", help="accuracy by distance to the nearest repaired sample")
    p.add_argument("--bundle", required=True, help="repaired bundle")
    p.add_argument("--report", required=True, help="certificate.json")
    p.add_argument("--eval-set", default="eval")
    p.add_argument("--band-edges", type=_float_list, default=list(map(float, DEFAULT_BAND_EDGES)))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_proximity)

    p = sub.add_parser("sweep", help="rank / set-size ablation sweeps")
    p.add_argument("--bundle", required=True)
    p.add_argument("--ranks", type=_int_list)
    p.add_argument("--repair-sizes", type=_int_list)
    p.add_argument("--remain-sizes", type=_int_list)
    _add_hyper_flags(p)
    p.add_argument("--threads", type=int, default=default_threads())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (BundleFormatError, GenerationError) as err:
        _error_line(type(err).__name__, EXIT_INVALID, err)
        return EXIT_INVALID
    except (ValueError, FileNotFoundError) as err:
        _error_line(type(err).__name__, EXIT_INVALID, err)
        return EXIT_INVALID
    except InfeasibleRepairError as err:
        _error_line("InfeasibleRepairError", EXIT_INFEASIBLE, err)
        return EXIT_INFEASIBLE
    except UnconvergedTraceError as err:
        _error_line("UnconvergedTraceError", EXIT_UNCONVERGED, err)
        return EXIT_UNCONVERGED
    except (NumericFailureError, InternalInvariantError) as err:
        _error_line(type(err).__name__, EXIT_NUMERIC, err)
        return EXIT_NUMERIC
    except OSError as err:
        _error_line("OSError", EXIT_INVALID, err)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
