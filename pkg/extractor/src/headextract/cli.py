"""Command line for checkpoint extraction.

    headextract extract --checkpoint <id-or-path> --repair-layer <name> \
        --head <name> --inputs <file> --out <dir>

The inputs file holds one example per line: ``label<TAB>text`` or
``label<TAB>text_a<TAB>text_b`` for sentence pairs. Lines that fail to
parse or tokenize are reported on stderr and skipped; the run continues.
Exit codes: 0 success, 2 invalid input/arguments, 5 parity failure.
"""

import argparse
import sys

from .extract import ExtractionSpec, LayerResolutionError, extract


def build_parser():
    parser = argparse.ArgumentParser(prog="headextract")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="extract a head slice and embeddings into a bundle")
    p.add_argument("--checkpoint", required=True, help="model id or local checkpoint path")
    p.add_argument("--repair-layer", required=True, help="module name of the repair layer")
    p.add_argument("--head", required=True, help="module name of the classifier head")
    p.add_argument("--inputs", required=True, help="text file, label<TAB>text per line")
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--set-name", default="samples", help="sample table name in the bundle")
    p.add_argument(
        "--activation",
        choices=["relu", "tanh"],
        help="override the architecture-derived activation kind",
    )
    p.add_argument("--max-length", type=int, default=128)
    p.set_defaults(func=run_extract)
    return parser


def run_extract(args):
    spec = ExtractionSpec(
        checkpoint=args.checkpoint,
        repair_layer=args.repair_layer,
        head=args.head,
        inputs=args.inputs,
        out=args.out,
        set_name=args.set_name,
        activation=args.activation,
        max_length=args.max_length,
    )
    result = extract(spec)
    for number, message in result.line_errors:
        sys.stderr.write(f"line {number}: skipped ({message})\n")
    print(
        f"wrote {result.n_samples} samples to {args.out} "
        f"(activation {result.activation}, parity drift {result.max_parity_drift:.2e}, "
        f"||W||_2 {result.weight_spectral_norm:.4f}, "
        f"{result.n_failed_lines} lines skipped)"
    )
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (LayerResolutionError, ValueError, FileNotFoundError, OSError) as err:
        sys.stderr.write(f"error: {err}\n")
        return 2
    except RuntimeError as err:
        sys.stderr.write(f"error: {err}\n")
        return 5


if __name__ == "__main__":
    sys.exit(main())
