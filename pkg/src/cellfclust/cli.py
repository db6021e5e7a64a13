"""Command-line front end.

Subcommands::

    cellfclust fit DATA --out DIR [tuning flags]
    cellfclust tune DATA --mode {curves,knee,ha_wa,delta} --k-list ... --alpha-list ...
    cellfclust datagen (--preset NAME | --spec FILE) --out DIR
    cellfclust rerun MANIFEST

Exit codes: 0 success, 1 usage error, 2 data error, 3 fit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .core import (CellFclustError, ConfigError, DataError, DegenerateFitError,
                   FitConfig, NumericalDomainError)
from .dataio import ingest, preprocess, preprocess_transform, write_dataset, write_table
from .datagen import PRESETS, SyntheticSpec, generate, preset
from .estimation import fit
from .tuning import (assignment_stats, delta_plot_data, knee_points, objective_curves,
                     outlier_summary)

logger = logging.getLogger("cellfclust")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FIT = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    """Everything needed to reproduce an output bundle."""

    command: str
    inputs: list
    config: dict
    out: str
    robust_standardize: bool = False
    scale: float = 1.0
    na_token: str = "NA"
    delimiter: str = ","
    threads: int = 1
    grid: dict = field(default_factory=dict)
    version: str = __version__
    timestamp: Optional[str] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, "%s: error: %s\n" % (self.prog, message))


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers: %r" % text)


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers: %r" % text)


def _add_fit_flags(p, grid=False):
    p.add_argument("data", help="delimited table with a header row")
    if grid:
        p.add_argument("--mode", choices=["curves", "knee", "ha_wa", "delta"],
                       default="curves")
        p.add_argument("--k-list", type=_int_list, default=[1, 2, 3, 4])
        p.add_argument("--alpha-list", type=_float_list,
                       default=[0.01, 0.05, 0.10, 0.20])
        p.add_argument("--k", type=int, default=2,
                       help="number of clusters for knee and delta modes")
    else:
        p.add_argument("--k", type=int, required=True)
        p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--c", type=float, default=50.0)
    p.add_argument("--m", type=float, default=1.5)
    p.add_argument("--scale", type=float, default=1.0,
                   help="divide every (standardized) variable by this factor")
    p.add_argument("--equal-weights", action="store_true")
    p.add_argument("--robust-standardize", action="store_true")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--starts", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--na-token", default="NA")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)


def build_parser():
    parser = _Parser(prog="cellfclust", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_fit_flags(sub.add_parser("fit", help="fit one configuration"))
    _add_fit_flags(sub.add_parser("tune", help="run a tuning grid"), grid=True)
    g = sub.add_parser("datagen", help="write a synthetic data set")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=PRESETS)
    src.add_argument("--spec", help="JSON file with a synthetic spec")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    r = sub.add_parser("rerun", help="repeat the run recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out", default=None, help="override the output directory")
    return parser


def _manifest_from_args(args) -> RunManifest:
    config = {"K": args.k, "alpha": getattr(args, "alpha", 0.05), "c": args.c,
              "m": args.m, "equal_weights": args.equal_weights, "tol": args.tol,
              "max_iter": args.max_iter, "n_starts": args.starts, "seed": args.seed}
    grid = {}
    if args.command == "tune":
        grid = {"mode": args.mode, "K_list": args.k_list, "alpha_list": args.alpha_list}
    return RunManifest(command=args.command, inputs=[str(args.data)], config=config,
                       out=str(args.out), robust_standardize=args.robust_standardize,
                       scale=args.scale, na_token=args.na_token,
                       delimiter=args.delimiter, threads=args.threads, grid=grid)


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError("cannot write to output directory %s: %s" % (out, exc))
    return out


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load(manifest: RunManifest):
    raw = ingest(manifest.inputs[0], manifest.na_token, manifest.delimiter)
    data = preprocess(raw, manifest.robust_standardize, manifest.scale)
    return raw, data


def run_fit(manifest: RunManifest):
    """Fit one configuration and write the result bundle."""
    out = _prepare_out(manifest.out)
    config = FitConfig(**manifest.config)
    raw, data = _load(manifest)
    result = fit(data, config, threads=manifest.threads)
    shift, divisor = preprocess_transform(raw, manifest.robust_standardize,
                                          manifest.scale)
    names = data.variable_names
    K = config.K
    clusters = ["cluster_%d" % (k + 1) for k in range(K)]

    p = result.params
    summary = {
        "objective": result.objective,
        "objective_trace": list(result.objective_trace),
        "iterations": result.iterations,
        "converged": result.converged,
        "start_index": result.start_index,
        "start_objectives": result.start_objectives,
        "config": config.to_dict(),
        "preprocessing": {"robust_standardize": manifest.robust_standardize,
                          "scale": manifest.scale, "shift": shift.tolist(),
                          "divisor": divisor.tolist()},
        "variables": names,
        "weights": p.weights.tolist(),
        "means": p.means.tolist(),
        "covariances": p.covariances.tolist(),
        "n": data.n,
        "J": data.J,
    }
    _dump_json(out / "result.json", summary)

    u = result.membership
    write_table(out / "membership.csv", clusters, u.tolist())
    write_table(out / "indicator.csv", names, result.indicator.astype(int).tolist())
    # completed data go back to the original measurement units
    completed = result.completed * divisor + shift
    write_table(out / "completed.csv", names, completed.tolist())

    osum = outlier_summary(result, data)
    rows = []
    for j, name in enumerate(names):
        d = osum.direction[:, j]
        rows.append([name] + osum.proportions[j].tolist()
                    + [float(osum.proportions[j].sum()), int(np.sum(d > 0)),
                       int(np.sum(d < 0)), int(osum.missing[:, j].sum())])
    write_table(out / "outlier_summary.csv",
                ["variable"] + clusters + ["total", "imputed_above", "imputed_below",
                                           "missing"], rows)
    flagged = np.argwhere(data.observed & ~result.indicator)
    labels = result.labels
    write_table(out / "flagged_cells.csv",
                ["row", "variable", "cluster", "original", "imputed", "direction"],
                [[int(i) + 1, names[j], int(labels[i]) + 1, raw.values[i, j],
                  completed[i, j], int(osum.direction[i, j])] for i, j in flagged])

    _, _, weak = assignment_stats(u)
    write_table(out / "weak_assignments.csv", ["row", "max_membership"] + clusters,
                [[i + 1, float(row.max())] + row.tolist() for i, row in weak])
    return result


def run_tune(manifest: RunManifest):
    """Run a (K, alpha) grid in one of the diagnostic modes."""
    out = _prepare_out(manifest.out)
    base = FitConfig(**manifest.config)
    _, data = _load(manifest)
    mode = manifest.grid["mode"]
    K_list = manifest.grid["K_list"]
    alpha_list = manifest.grid["alpha_list"]
    threads = manifest.threads
    if mode in ("curves", "ha_wa"):
        grid = objective_curves(data, K_list, alpha_list, base, threads=threads)
        if mode == "curves":
            write_table(out / "curves.csv", ["K", "alpha", "objective"],
                        [[r["K"], float(r["alpha"]), r["objective"]] for r in grid.rows])
        else:
            rows = []
            for r in grid.rows:
                hard, weak, _ = assignment_stats(r["result"].membership)
                rows.append([r["K"], float(r["alpha"]), hard, weak])
            write_table(out / "stats.csv", ["K", "alpha", "pct_hard", "pct_weak"], rows)
        if not grid.rows:
            raise DegenerateFitError("every grid cell failed")
    elif mode == "knee":
        ks = knee_points(data, alpha_list, base.K, base, threads=threads)
        names = data.variable_names
        write_table(out / "knee.csv",
                    ["alpha", "median_diff", "mad_diff"] + ["knee_%s" % v for v in names],
                    [[float(a), ks.median_diff[i], ks.mad_diff[i]] + ks.knees[i].tolist()
                     for i, a in enumerate(alpha_list)])
    else:
        rows = []
        for alpha in alpha_list:
            cfg = FitConfig(**{**base.to_dict(), "alpha": alpha})
            res = fit(data, cfg, threads=threads)
            for name, (x, d) in zip(data.variable_names, delta_plot_data(res, data)):
                rows += [[base.K, float(alpha), name, float(xi), float(di)]
                         for xi, di in zip(x, d)]
        write_table(out / "delta.csv", ["K", "alpha", "variable", "rank", "delta"], rows)


def run_datagen(spec: SyntheticSpec, out):
    out = _prepare_out(out)
    sd = generate(spec)
    write_dataset(out / "data.csv", sd.data)
    write_table(out / "labels.csv", ["label"], [[int(v) + 1] for v in sd.true_labels])
    names = sd.data.variable_names
    write_table(out / "outlier_mask.csv", names, sd.true_outlier_mask.astype(int).tolist())
    write_table(out / "clean.csv", names, sd.clean_values.tolist())
    with open(out / "spec.json", "w") as fh:
        fh.write(spec.to_json() + "\n")
    return sd


def execute(manifest: RunManifest):
    FitConfig(**manifest.config)
    out = _prepare_out(manifest.out)
    stamped = RunManifest.from_dict(manifest.to_dict())
    stamped.timestamp = datetime.now(timezone.utc).isoformat()
    if manifest.command == "fit":
        run_fit(manifest)
    elif manifest.command == "tune":
        run_tune(manifest)
    else:
        raise UsageError("unknown command %r in manifest" % manifest.command)
    _dump_json(out / "manifest.json", stamped.to_dict())


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "datagen":
            if args.preset:
                spec = preset(args.preset, seed=args.seed or 0)
            else:
                with open(args.spec) as fh:
                    spec = SyntheticSpec.from_dict(json.load(fh))
                if args.seed is not None:
                    spec.seed = args.seed
            run_datagen(spec, args.out)
            return EXIT_OK
        if args.command == "rerun":
            with open(args.manifest) as fh:
                manifest = RunManifest.from_dict(json.load(fh))
            manifest.timestamp = None
            if args.out:
                manifest.out = args.out
        else:
            manifest = _manifest_from_args(args)
        execute(manifest)
        return EXIT_OK
    except (UsageError, ConfigError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print("data error: %s" % exc, file=sys.stderr)
        return EXIT_DATA
    except (DegenerateFitError, NumericalDomainError, CellFclustError) as exc:
        print("fit failed: %s" % exc, file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
