"""Command line for the figure scripts."""

from __future__ import annotations

import argparse
import sys

from .io import SchemaError
from .render import FigureJob, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qcollide-figs",
        description="Render figures from qcollide CSV/NDJSON outputs",
    )
    sub = parser.add_subparsers(dest="kind", required=True)

    p_hist = sub.add_parser("hist", help="overlaid counting histograms")
    p_hist.add_argument("inputs", nargs="+", help="histogram CSV files")
    p_hist.add_argument("--labels", nargs="*", default=[])
    p_hist.add_argument("--output", required=True)
    p_hist.add_argument("--title", default="")

    p_traj = sub.add_parser("trajectories", help="sample bundle + ensemble mean")
    p_traj.add_argument("inputs", nargs="+", help="per-trajectory NDJSON files")
    p_traj.add_argument("--ensemble", required=True, help="ensemble CSV")
    p_traj.add_argument("--observable", default="n")
    p_traj.add_argument("--alpha", type=float, default=0.25)
    p_traj.add_argument("--output", required=True)
    p_traj.add_argument("--title", default="")

    p_cmp = sub.add_parser("compare", help="collision vs oracle comparison")
    p_cmp.add_argument("inputs", nargs="+", help="compare CSV files")
    p_cmp.add_argument("--labels", nargs="*", default=[])
    p_cmp.add_argument("--output", required=True)
    p_cmp.add_argument("--title", default="")

    args = parser.parse_args(argv)
    kwargs = dict(kind=args.kind, inputs=args.inputs, output=args.output,
                  title=args.title)
    if args.kind == "hist" or args.kind == "compare":
        kwargs["labels"] = args.labels
    if args.kind == "trajectories":
        kwargs["ensemble"] = args.ensemble
        kwargs["observable"] = args.observable
        kwargs["bundle_alpha"] = args.alpha
    try:
        job = FigureJob(**kwargs)
        render(job)
    except (SchemaError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
