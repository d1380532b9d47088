"""Command-line entry point: ``membrane-lab <subcommand> [flags]``.

Exit codes: 0 success, 1 a verification check failed, 2 configuration
error, 3 linear solver failure.  JSON output prints every float with 17
significant digits.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .lattice import DomainError
from .solvers import SolverError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

DEFAULTS = {
    "dim": 4, "lambda": 0.5, "replicas": 100, "seed": 0, "depth_m": 1, "format": "json",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns the exit code."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _sizes(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty size list")
    return out


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"{text!r} is not a positive number")
    return v


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--dim", type=int, default=DEFAULTS["dim"], help="lattice dimension (default 4)")
    p.add_argument("--size", type=_sizes, default=None, help="resolution N or a comma list")
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULTS["lambda"],
                   help="level fraction in (0, 1) (default 0.5)")
    p.add_argument("--replicas", type=int, default=DEFAULTS["replicas"])
    p.add_argument("--seed", type=int, default=DEFAULTS["seed"], help="master seed (default 0)")
    p.add_argument("--tol", type=_positive_float, default=None, help="solver residual tolerance")
    p.add_argument("--truncation-M", dest="M", type=_positive_float, default=None,
                   help="band constant of the truncation event (off by default)")
    p.add_argument("--depth-m", dest="depth_m", type=int, default=DEFAULTS["depth_m"])
    p.add_argument("--modes", type=int, default=None, help="spectral mode count (default: all)")
    p.add_argument("--out", default=None, help="output file (default: standard output)")
    p.add_argument("--format", choices=("csv", "json"), default=DEFAULTS["format"])
    p.add_argument("--max-dense", dest="max_dense", type=int, default=None,
                   help="largest system solved by dense Cholesky")
    p.add_argument("--margin", type=float, default=None,
                   help="ignore sites within margin*N of the boundary")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="membrane-lab", description="Membrane model experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "stencil": "print the bilaplacian stencil coefficients",
        "green": "Green function columns on box(dim, N)",
        "gamma-fit": "slope of the centre Green diagonal against ln N",
        "sample": "draw fields and write a snapshot or summary",
        "gm-verify": "Gibbs-Markov, conditional-mean and basis-sampler checks",
        "levelset-census": "level-set sizes across resolutions",
        "tail-fit": "overshoot distribution above a_N",
        "gmc-ym": "total masses of the dyadic martingale Y_m",
        "gmc-spectral": "total masses of the spectral chaos",
        "gmc-compare": "Y_1 against the reweighted spectral chaos",
        "verify": "run the verification suites",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "verify":
            sp.add_argument("--tier", choices=("exact", "statistical", "all"), default="exact")
        if name == "green":
            sp.add_argument("--sources", type=int, default=3, help="number of random columns")
    return parser


# ---------------------------------------------------------------------------
# output


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([("%.17g" % v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _emit_result(rs: harness.ResultSet, args, columns=None) -> None:
    """JSON: the full result set.  CSV: one row per record, summary JSON after.

    With ``--out`` and CSV the summary goes to a ``.meta.json`` sidecar and to
    standard output.
    """
    if args.format == "json":
        _emit(harness.dumps(rs.to_json()), args.out)
        return
    if args.out:
        harness.persist(rs, args.out, "csv")
        _emit(harness.dumps(rs.summaries), None)
        return
    cols = columns or (list(rs.records[0]) if rs.records else [])
    rows = [[r.get(c) if not isinstance(r.get(c), (list, dict)) else harness.dumps(r.get(c))
             for c in cols] for r in rs.records]
    _emit(_csv_text(cols, rows) + harness.dumps(rs.summaries), None)


def _config(args, kind: str, default_sizes) -> harness.ExperimentConfig:
    return harness.ExperimentConfig(
        kind=kind, dim=args.dim, lam=args.lam, sizes=tuple(args.size or default_sizes),
        replicas=args.replicas, M=args.M, master_seed=args.seed, tol=args.tol,
        format=args.format, depth_m=args.depth_m, modes=args.modes, margin=args.margin,
        max_dense=args.max_dense,
    ).validate()


# ---------------------------------------------------------------------------
# subcommands


def cmd_stencil(args) -> int:
    from .lattice import bilaplacian_stencil

    st = bilaplacian_stencil(args.dim)
    rows = [[",".join(map(str, o)), str(st.entries[o]), float(st.entries[o])]
            for o in sorted(st.entries)]
    if args.format == "csv":
        _emit(_csv_text(["offset", "exact", "value"], rows), args.out)
    else:
        payload = {"dim": args.dim, "terms": len(rows),
                   "sum": float(sum(st.entries.values())),
                   "coefficients": [{"offset": r[0], "exact": r[1], "value": r[2]} for r in rows]}
        _emit(harness.dumps(payload), args.out)
    return EXIT_OK


def cmd_green(args) -> int:
    from .green import green_columns, symmetry_defect
    from .lattice import PrecisionOperator, make_box
    from .rng import RngStream

    rows = []
    defects = {}
    for N in args.size or [8]:
        dom = make_box(args.dim, N)
        rng = RngStream(args.seed, ("green", N)).generator()
        pick = rng.choice(dom.size, size=min(args.sources, dom.size), replace=False)
        sources = [tuple(int(c) for c in dom.points[i]) for i in np.sort(pick)]
        cols = green_columns(PrecisionOperator(dom), sources, tol=args.tol)
        defects[str(N)] = symmetry_defect(cols)
        for c in cols:
            for x, g in zip(dom.points, c.values):
                rows.append([N, " ".join(map(str, x)), " ".join(map(str, c.source)),
                             float(g), c.residual])
    header = ["N", "x", "y", "G", "residual"]
    if args.format == "csv":
        _emit(_csv_text(header, rows), args.out)
    else:
        recs = [dict(zip(header, r)) for r in rows]
        _emit(harness.dumps({"records": recs, "symmetry_defect": defects}), args.out)
    return EXIT_OK


def _run_kind(args, kind: str, default_sizes) -> int:
    cfg = _config(args, kind, default_sizes)
    rs = harness.run(cfg)
    _emit_result(rs, args)
    return EXIT_OK


def cmd_gamma_fit(args) -> int:
    return _run_kind(args, "gamma-fit", (8, 12, 16, 24, 32))


def cmd_levelset_census(args) -> int:
    return _run_kind(args, "census", (8, 12, 16))


def cmd_tail_fit(args) -> int:
    return _run_kind(args, "tail", (16,))


def cmd_gmc_ym(args) -> int:
    cfg = _config(args, "gmc-ym", (16,))
    rs = harness.run(cfg)
    _emit_result(rs, args)
    if args.out:
        _save_example_measure(args, "ym", cfg)
    return EXIT_OK


def cmd_gmc_spectral(args) -> int:
    cfg = _config(args, "gmc-spectral", (10,))
    rs = harness.run(cfg)
    _emit_result(rs, args)
    if args.out:
        _save_example_measure(args, "spectral", cfg)
    return EXIT_OK


def _save_example_measure(args, which: str, cfg) -> None:
    """Replica 0 as a cell measure next to ``--out``."""
    from .gmc import dyadic_tree, save_measure, spectral_gmc, ym_measure
    from .lattice import make_box
    from .rng import RngStream

    N = int(cfg.sizes[0])
    path = Path(args.out)
    target = path.with_name(path.stem + ".measure.csv")
    if which == "ym":
        stream = RngStream(cfg.master_seed, ("gmc-ym", N)).child(0)
        m = ym_measure(dyadic_tree(0, cfg.depth_m), N, cfg.lam, stream, tol=cfg.tol)
    else:
        dom = make_box(4, N)
        modes = dom.size if cfg.modes is None else cfg.modes
        stream = RngStream(cfg.master_seed, ("gmc-spectral", N, modes)).child(0)
        m = spectral_gmc(dom, math.pi * cfg.lam, modes, stream, N)
    save_measure(m, target)


def cmd_gmc_compare(args) -> int:
    return _run_kind(args, "compare", (12,))


def cmd_sample(args) -> int:
    from .field import prepare_sampler, sample, save_snapshot
    from .lattice import PrecisionOperator, make_box
    from .rng import RngStream

    N = (args.size or [8])[0]
    if args.dim < 1 or N < 2:
        raise harness.ConfigError("need dim >= 1 and size >= 2")
    if args.replicas < 1:
        raise harness.ConfigError("replicas must be >= 1")
    sampler = prepare_sampler(PrecisionOperator(make_box(args.dim, N)), tol=args.tol,
                              max_dense=args.max_dense)
    root = RngStream(args.seed, ("sample", N))
    records = []
    for i in range(args.replicas):
        h = sample(sampler, root.child(i))
        if args.out and args.format == "json" and args.replicas == 1:
            save_snapshot(h, args.out)
        records.append({"replica": i, "min": float(h.values.min()), "max": float(h.values.max()),
                        "mean": float(h.values.mean()), "var": float(h.values.var())})
    payload = {"N": N, "dim": args.dim, "points": sampler.domain.size,
               "method": sampler.method, "records": records}
    if args.out and args.format == "json" and args.replicas == 1:
        _emit(harness.dumps(payload), None)
    elif args.format == "csv":
        cols = ["replica", "min", "max", "mean", "var"]
        _emit(_csv_text(cols, [[r[c] for c in cols] for r in records]), args.out)
    else:
        _emit(harness.dumps(payload), args.out)
    return EXIT_OK


def _report_checks(checks, args) -> int:
    records = [c.to_record() for c in checks]
    ok = all(r["passed"] for r in records)
    if args.format == "csv":
        rows = [[r["check"], "PASS" if r["passed"] else "FAIL", harness.dumps(r["value"]),
                 harness.dumps(r["threshold"])] for r in records]
        _emit(_csv_text(["check", "status", "value", "threshold"], rows), args.out)
    else:
        _emit(harness.dumps({"passed": ok, "checks": records}), args.out)
    for r in records:
        if not r["passed"]:
            print(f"check failed: {r['check']} (value {harness.dumps(r['value'])}, "
                  f"threshold {harness.dumps(r['threshold'])})", file=sys.stderr)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_gm_verify(args) -> int:
    from .verify import gibbs_markov_suite

    return _report_checks(gibbs_markov_suite(args.seed), args)


def cmd_verify(args) -> int:
    from .verify import exact_checks, statistical_checks

    checks = []
    if args.tier in ("exact", "all"):
        checks += exact_checks(args.seed)
    if args.tier in ("statistical", "all"):
        checks += statistical_checks(args.seed)
    return _report_checks(checks, args)


COMMANDS = {
    "stencil": cmd_stencil, "green": cmd_green, "gamma-fit": cmd_gamma_fit,
    "sample": cmd_sample, "gm-verify": cmd_gm_verify, "levelset-census": cmd_levelset_census,
    "tail-fit": cmd_tail_fit, "gmc-ym": cmd_gmc_ym, "gmc-spectral": cmd_gmc_spectral,
    "gmc-compare": cmd_gmc_compare, "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (harness.ConfigError, DomainError, ValueError) as exc:
        print(f"membrane-lab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"membrane-lab: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())
