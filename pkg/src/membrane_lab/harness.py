"""Experiment orchestration: configs, replica-parallel runs, persistence.

Replicas are processed in fixed chunks keyed by replica id and merged in id
order, so a run is bitwise reproducible for any worker count.  Summaries are
always recomputed from the stored records.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .rng import RngStream
from .stats import fit_loglog, summarize

SCHEMA_VERSION = 1
KINDS = ("gamma-fit", "gm-verify", "census", "tail", "gmc-ym", "gmc-spectral", "compare")
CHUNK = 16


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class SchemaVersionError(ValueError):
    """Persisted result uses a different schema version."""


@dataclass
class ExperimentConfig:
    kind: str
    dim: int = 4
    lam: float = 0.5
    sizes: tuple = (8,)
    replicas: int = 100
    M: float | None = None
    master_seed: int = 0
    tol: float | None = None
    output: str | None = None
    format: str = "json"
    depth_m: int = 1
    modes: int | None = None
    margin: float | None = None
    b_list: tuple = (0.0, 0.5)
    max_dense: int | None = None

    def validate(self) -> "ExperimentConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if self.dim < 1:
            raise ConfigError("dimension must be >= 1")
        if not self.sizes or any(int(n) < 2 for n in self.sizes):
            raise ConfigError("sizes must be integers >= 2")
        if self.kind in ("census", "tail", "gmc-ym", "compare") and not 0 < self.lam < 1:
            raise ConfigError("lambda must lie in (0, 1)")
        if self.kind in ("gamma-fit", "census") and len(self.sizes) < 3:
            raise ConfigError(f"{self.kind} needs at least 3 sizes")
        if self.tol is not None and self.tol <= 0:
            raise ConfigError("tolerance must be positive")
        if self.format not in ("json", "csv"):
            raise ConfigError("format must be json or csv")
        if self.M is not None and self.M <= 0:
            raise ConfigError("truncation M must be positive")
        if self.modes is not None and self.modes < 0:
            raise ConfigError("mode count must be >= 0")
        if self.depth_m < 0:
            raise ConfigError("depth must be >= 0")
        if self.margin is not None and not 0 <= self.margin < 0.5:
            raise ConfigError("margin must lie in [0, 0.5)")
        if self.kind in ("gmc-ym", "gmc-spectral", "compare") and self.dim != 4:
            raise ConfigError("chaos constructions are four-dimensional")
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["sizes"] = [int(n) for n in self.sizes]
        d["b_list"] = [float(b) for b in self.b_list]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        kw["sizes"] = tuple(int(n) for n in kw.get("sizes", (8,)))
        kw["b_list"] = tuple(float(b) for b in kw.get("b_list", (0.0, 0.5)))
        return cls(**kw)


@dataclass
class ResultSet:
    config: dict
    records: list
    summaries: dict
    version: str = __version__
    schema: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {"schema": self.schema, "version": self.version, "config": self.config,
                "records": self.records, "summaries": self.summaries}

    def __eq__(self, other) -> bool:
        return isinstance(other, ResultSet) and dumps(self.to_json()) == dumps(other.to_json())


# ---------------------------------------------------------------------------
# JSON with 17 significant digits


def _encode(obj) -> str:
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return "%.17g" % v if math.isfinite(v) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    if hasattr(obj, "to_json"):
        return _encode(obj.to_json())
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps(obj) -> str:
    """JSON text; every float printed with 17 significant digits."""
    return _encode(obj)


# ---------------------------------------------------------------------------
# parallel map over replica chunks


def worker_count(requested: int | None = None) -> int:
    if requested:
        return max(1, int(requested))
    env = os.environ.get("MEMBRANE_LAB_THREADS")
    if env:
        return max(1, int(env))
    return 1


def map_chunks(fn, n: int, chunk: int = CHUNK, workers: int | None = None) -> list:
    """fn(list of replica ids) -> list of records, concatenated in id order."""
    chunks = [list(range(s, min(s + chunk, n))) for s in range(0, n, chunk)]
    w = worker_count(workers)
    if w == 1 or len(chunks) <= 1:
        parts = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=w) as pool:
            parts = list(pool.map(fn, chunks))
    return [r for p in parts for r in p]


# ---------------------------------------------------------------------------
# experiments: records, then summaries derived from records


def _records_gamma_fit(cfg: ExperimentConfig, workers):
    from .green import center_point, green_diagonal
    from .lattice import make_box

    out = []
    for N in sorted(int(n) for n in cfg.sizes):
        g = green_diagonal(make_box(cfg.dim, N), [center_point(N, cfg.dim)], tol=cfg.tol)
        out.append({"N": N, "G_center": float(g[0])})
    return out


def _summ_gamma_fit(cfg, records):
    fit = fit_loglog([r["N"] for r in records], [r["G_center"] for r in records], mode="semilog")
    return {"slope": fit.slope, "stderr": fit.stderr, "intercept": fit.intercept,
            "gamma": 8 / math.pi**2}


def _records_gm_verify(cfg: ExperimentConfig, workers):
    from .verify import gibbs_markov_suite

    return [c.to_record() for c in gibbs_markov_suite(cfg.master_seed)]


def _summ_gm_verify(cfg, records):
    return {"all_passed": all(r["passed"] for r in records), "n_checks": len(records)}


def _box_sampler(cfg, N):
    from .field import prepare_sampler
    from .lattice import PrecisionOperator, make_box

    return prepare_sampler(PrecisionOperator(make_box(cfg.dim, N)), tol=cfg.tol,
                           max_dense=cfg.max_dense)


def _records_census(cfg: ExperimentConfig, workers):
    from .field import FieldSample
    from .levelset import build_eta, scaling_params

    root = RngStream(cfg.master_seed, ("census",))
    out = []
    for N in sorted(int(n) for n in cfg.sizes):
        sampler = _box_sampler(cfg, N)
        params = scaling_params(cfg.lam, N)
        pts = sampler.domain.points
        mask = None
        if cfg.margin:
            mask = np.all((pts >= cfg.margin * N) & (pts <= (1 - cfg.margin) * N), axis=1)

        def work(ids, N=N, sampler=sampler, params=params, mask=mask):
            rows = sampler.sample_values([root.child(N, i) for i in ids])
            recs = []
            for i, r in zip(ids, rows):
                kept = r if mask is None else r[mask]
                rec = {"lambda": cfg.lam, "N": N, "replica": i,
                       "count": int(np.count_nonzero(kept >= params.a_N))}
                rec["eta_mass"] = rec["count"] / params.K_N
                if cfg.M is not None:
                    eta = build_eta(FieldSample(sampler.domain, r), params, M=cfg.M,
                                    min_height=0.0, tol=cfg.tol)
                    if mask is not None:
                        eta_idx = mask[eta.indices]
                        rec["count_truncated"] = int(np.count_nonzero(eta_idx))
                    else:
                        rec["count_truncated"] = eta.n_atoms
                recs.append(rec)
            return recs

        out.extend(map_chunks(work, cfg.replicas, workers=workers))
    return out


def _summ_census(cfg, records):
    sizes = sorted({r["N"] for r in records})
    per = {}
    for N in sizes:
        s = summarize([r["count"] for r in records if r["N"] == N])
        per[str(N)] = s.to_json()
    means = [per[str(N)]["mean"] for N in sizes]
    out = {"per_size": per, "predicted_slope": 4 * (1 - cfg.lam**2)}
    if len(sizes) >= 3 and min(means) > 0:
        fit = fit_loglog(sizes, means)
        out.update(slope=fit.slope, slope_stderr=fit.stderr)
    else:
        out.update(slope=None, slope_stderr=None)
    return out


def _records_tail(cfg: ExperimentConfig, workers):
    from .levelset import scaling_params

    N = int(cfg.sizes[0])
    sampler = _box_sampler(cfg, N)
    params = scaling_params(cfg.lam, N)
    root = RngStream(cfg.master_seed, ("tail", N))
    bl = sorted({0.0, *[float(b) for b in cfg.b_list]})

    def work(ids):
        rows = sampler.sample_values([root.child(i) for i in ids])
        recs = []
        for i, r in zip(ids, rows):
            over = r[r >= params.a_N] - params.a_N
            recs.append({"lambda": cfg.lam, "N": N, "replica": i,
                         "counts": [int(np.count_nonzero(r >= params.a_N + b)) for b in bl],
                         "n_over": int(over.size), "sum_over": float(over.sum())})
        return recs

    return map_chunks(work, cfg.replicas, workers=workers)


def _summ_tail(cfg, records):
    from .levelset import CountTally, scaling_params, tail_report

    bl = sorted({0.0, *[float(b) for b in cfg.b_list]})
    tally = CountTally(scaling_params(cfg.lam, int(cfg.sizes[0])), bl)
    tally.counts = [list(r["counts"]) for r in records]
    tally.over_n = sum(r["n_over"] for r in records)
    tally.over_sum = math.fsum(r["sum_over"] for r in records)
    return tail_report(tally).to_json()


def _records_gmc_ym(cfg: ExperimentConfig, workers):
    from .gmc import dyadic_tree, ym_masses

    N = int(cfg.sizes[0])
    tree = dyadic_tree(0, cfg.depth_m)
    depths = list(range(cfg.depth_m + 1))
    root = RngStream(cfg.master_seed, ("gmc-ym", N))

    def work(ids):
        m = ym_masses(tree, N, cfg.lam, [root.child(i) for i in ids], tol=cfg.tol, depths=depths)
        return [{"replica": i, "masses": list(map(float, row))} for i, row in zip(ids, m)]

    return map_chunks(work, cfg.replicas, workers=workers)


def _zlambda(cfg, N):
    from .gmc import DyadicCube, zlambda_mean
    from .green import lattice_sD
    from .lattice import make_box

    dom = make_box(4, N)
    return zlambda_mean(DyadicCube(0, (0,) * 4), cfg.lam, lattice_sD(dom, N, tol=cfg.tol), dom, N)


def _summ_gmc_ym(cfg, records):
    masses = np.array([r["masses"] for r in records])
    per = {f"m={j}": summarize(masses[:, j]).to_json() for j in range(masses.shape[1])}
    return {"per_depth": per, "zlambda_mean": _zlambda(cfg, int(cfg.sizes[0]))}


def _records_gmc_spectral(cfg: ExperimentConfig, workers):
    from .gmc import SpectralBasis, spectral_masses, MAX_EIGEN_POINTS
    from .lattice import PrecisionOperator, make_box

    N = int(cfg.sizes[0])
    dom = make_box(4, N)
    modes = dom.size if cfg.modes is None else int(cfg.modes)
    basis = None
    if 0 < modes and dom.size <= MAX_EIGEN_POINTS:
        basis = SpectralBasis(PrecisionOperator(dom))
    beta = math.pi * cfg.lam
    root = RngStream(cfg.master_seed, ("gmc-spectral", N, modes))

    def work(ids):
        m = spectral_masses(dom, beta, modes, [root.child(i) for i in ids], N, basis=basis,
                            tol=cfg.tol)
        return [{"replica": i, "mass": float(v)} for i, v in zip(ids, m)]

    return map_chunks(work, cfg.replicas, workers=workers)


def _summ_gmc_spectral(cfg, records):
    s = summarize([r["mass"] for r in records])
    return {"mass": s.to_json(), "volume": 1.0}


def _records_compare(cfg: ExperimentConfig, workers):
    from .gmc import SQRT_PI_4, dyadic_tree, spectral_masses, ym_masses
    from .green import GAMMA, lattice_sD
    from .lattice import make_box

    N = int(cfg.sizes[0])
    tree = dyadic_tree(0, cfg.depth_m)
    dom = make_box(4, N)
    weight = SQRT_PI_4 * np.exp(4 * cfg.lam**2 / GAMMA * lattice_sD(dom, N, tol=cfg.tol))
    root = RngStream(cfg.master_seed, ("compare", N))

    def work(ids):
        ym = ym_masses(tree, N, cfg.lam, [root.child("ym", i) for i in ids], tol=cfg.tol)[:, 0]
        sp = spectral_masses(dom, math.pi * cfg.lam, dom.size,
                             [root.child("spectral", i) for i in ids], N, weight=weight,
                             tol=cfg.tol)
        return [{"replica": i, "ym": float(a), "spectral": float(b)} for i, a, b in zip(ids, ym, sp)]

    return map_chunks(work, cfg.replicas, workers=workers)


def _summ_compare(cfg, records):
    from .gmc import compare_constructions

    c = compare_constructions([r["ym"] for r in records], [r["spectral"] for r in records], cfg.lam)
    return c.to_json()


_KINDS = {
    "gamma-fit": (_records_gamma_fit, _summ_gamma_fit),
    "gm-verify": (_records_gm_verify, _summ_gm_verify),
    "census": (_records_census, _summ_census),
    "tail": (_records_tail, _summ_tail),
    "gmc-ym": (_records_gmc_ym, _summ_gmc_ym),
    "gmc-spectral": (_records_gmc_spectral, _summ_gmc_spectral),
    "compare": (_records_compare, _summ_compare),
}


def summarize_records(cfg: ExperimentConfig, records: list) -> dict:
    return _KINDS[cfg.kind][1](cfg, records)


def run(config: ExperimentConfig, workers: int | None = None) -> ResultSet:
    cfg = config.validate()
    produce, _ = _KINDS[cfg.kind]
    try:
        records = produce(cfg, workers)
    except Exception as exc:  # add context, keep the type
        exc.args = (f"[{cfg.kind}] {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        raise
    rs = ResultSet(cfg.to_json(), records, summarize_records(cfg, records))
    if cfg.output:
        persist(rs, cfg.output, cfg.format)
    return rs


# ---------------------------------------------------------------------------
# persistence


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def persist(rs: ResultSet, path, format: str | None = None) -> Path:
    path = Path(path)
    fmt = format or ("csv" if path.suffix == ".csv" else "json")
    if fmt == "json":
        path.write_text(dumps(rs.to_json()) + "\n")
    elif fmt == "csv":
        cols = []
        for r in rs.records:
            for k in r:
                if k not in cols:
                    cols.append(k)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for r in rs.records:
                w.writerow([_encode(r.get(c)) for c in cols])
        meta = {"schema": rs.schema, "version": rs.version, "config": rs.config,
                "summaries": rs.summaries, "columns": cols}
        _sidecar(path).write_text(dumps(meta) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def _check_schema(schema) -> None:
    if schema != SCHEMA_VERSION:
        raise SchemaVersionError(f"schema version {schema!r}, expected {SCHEMA_VERSION}")


def load(path) -> ResultSet:
    path = Path(path)
    if path.suffix == ".csv":
        meta = json.loads(_sidecar(path).read_text())
        _check_schema(meta.get("schema"))
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        cols = rows[0]
        records = []
        for row in rows[1:]:
            rec = {}
            for c, cell in zip(cols, row):
                v = json.loads(cell)
                if v is not None or c in meta.get("columns", cols):
                    rec[c] = v
            records.append(rec)
        return ResultSet(meta["config"], records, meta["summaries"], meta["version"], meta["schema"])
    d = json.loads(path.read_text())
    _check_schema(d.get("schema"))
    return ResultSet(d["config"], d["records"], d["summaries"], d["version"], d["schema"])


def recompute_summaries(rs: ResultSet) -> dict:
    return summarize_records(ExperimentConfig.from_json(rs.config), rs.records)
