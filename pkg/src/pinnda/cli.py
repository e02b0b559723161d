"""Command-line front end: ``run``, ``reproduce``, ``dump-points`` and ``eval``.

Outputs are deterministic for a given configuration and seed; the only
varying CSV column is ``wall_s``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from . import metrics, network, training
from .problems import CATALOG_IDS, get_spec, make_training_sets
from .training import Hyperparameters

log = logging.getLogger("pinnda")

CSV_COLUMNS = (
    "problem", "N", "N_int", "N_sb", "N_d", "depth", "width", "lambda", "lambda_reg",
    "seed", "restarts", "E_dT", "E_pT", "E_T", "L2_pct", "H1_pct", "supL2_pct", "p_L2_pct", "wall_s",
)
TABLES = ("p1", "p2", "h1", "h2", "hn", "w1", "w2", "st")
DEFAULT_DIMS = (1, 5, 10)


class ConfigError(ValueError):
    pass


class UnknownProblemError(ConfigError):
    pass


def reference_tables() -> dict:
    """Published numbers keyed by table id (display only)."""
    text = resources.files("pinnda").joinpath("data/reference_tables.json").read_text()
    return json.loads(text)


# -- configuration ------------------------------------------------------------

CONFIG_KEYS = {
    "problem", "n", "counts", "restarts", "seed", "noise", "out", "grid", "max_iter",
    "depth", "width", "lambda", "lambda_reg", "optimizer", "select", "dims",
}


def load_config(path) -> dict:
    """A flat JSON document; unknown keys are rejected."""
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return cfg


def resolve(args: argparse.Namespace) -> dict:
    """Merge config file values with command-line flags (flags win)."""
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg.setdefault("restarts", 1)
    cfg.setdefault("seed", 0)
    cfg.setdefault("select", "best")
    if int(cfg["restarts"]) < 1:
        raise ConfigError("restarts must be >= 1")
    if cfg.get("n") is not None and int(cfg["n"]) < 1:
        raise ConfigError("n must be positive")
    if cfg.get("counts") is not None:
        counts = cfg["counts"]
        if isinstance(counts, str):
            counts = [int(c) for c in counts.split(",")]
        if len(counts) != 3 or min(counts) < 0:
            raise ConfigError("counts must be N_int,N_sb,N_d")
        cfg["counts"] = tuple(int(c) for c in counts)
    if cfg["select"] not in ("best", "mean"):
        raise ConfigError("select must be 'best' or 'mean'")
    return cfg


def resolve_spec(cfg: dict):
    if "problem" not in cfg:
        raise ConfigError("no problem given")
    spec = _lookup(cfg["problem"])
    if cfg.get("noise") is not None:
        spec = spec.with_noise(float(cfg["noise"]))
    return spec


def _lookup(problem: str):
    try:
        return get_spec(problem)
    except KeyError:
        raise UnknownProblemError(problem) from None


def resolve_grid(cfg: dict, spec) -> list[Hyperparameters]:
    common = {}
    if cfg.get("max_iter") is not None:
        common["max_iterations"] = int(cfg["max_iter"])
    if cfg.get("optimizer"):
        common["optimizer"] = cfg["optimizer"]
    grid = cfg.get("grid")
    if grid is None:
        single = {k2: cfg[k1] for k1, k2 in (("depth", "depth"), ("width", "width"),
                                               ("lambda", "lam"), ("lambda_reg", "lambda_reg")) if cfg.get(k1) is not None}
        return [Hyperparameters.for_problem(spec, **common, **single)]
    if grid == "standard":
        return training.standard_grid(**common)
    try:
        entries = json.loads(Path(grid).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid {grid}: {exc}") from None
    out = []
    for e in entries:
        e = dict(e)
        if "lambda" in e:
            e["lam"] = e.pop("lambda")
        try:
            out.append(Hyperparameters(**{**common, **e}))
        except TypeError as exc:
            raise ConfigError(f"bad grid entry {e}: {exc}") from None
    if not out:
        raise ConfigError("grid is empty")
    return out


# -- rows ---------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def result_row(spec, cres: training.ConfigResult, n_requested, seed: int, select: str) -> dict:
    h = cres.hyper
    best = cres.best
    row = {
        "problem": spec.id, "N": n_requested, "depth": h.depth, "width": h.width,
        "lambda": h.lam, "lambda_reg": h.lambda_reg, "seed": seed, "restarts": h.restarts,
        "wall_s": round(sum(r.wall_time for r in cres.runs), 3),
    }
    counts = next((r.counts for r in cres.runs if r.counts), {})
    row.update({k: counts.get(k) for k in ("N_int", "N_sb", "N_d")})
    if best is None:
        row.update({k: math.nan for k in ("E_dT", "E_pT", "E_T", "L2_pct")})
        return row
    if select == "best":
        src = {**(best.metrics or {}), "E_dT": best.E_dT, "E_pT": best.E_pT, "E_T": best.E_T}
    else:
        good = [r for r in cres.runs if r.ok]
        src = cres.mean_metrics()
        src.update({k: float(np.mean([getattr(r, k) for r in good])) for k in ("E_dT", "E_pT", "E_T")})
    for k in ("E_dT", "E_pT", "E_T", "L2_pct", "H1_pct", "supL2_pct", "p_L2_pct"):
        row[k] = src.get(k)
    return row


def header_lines(cfg: dict, extra: dict | None = None) -> list[str]:
    lines = ["# pinnda results"]
    for k in sorted(cfg):
        if k == "out":  # where results go does not change them
            continue
        lines.append(f"# config.{k} = {json.dumps(cfg[k], sort_keys=True, default=str)}")
    for k, v in (extra or {}).items():
        lines.append(f"# {k} = {v}")
    lines.append("# H1_pct uses the full H1 norm (value + spatial gradient) of the exact solution as denominator")
    lines.append("# rows report the " + ("lowest-E_T restart" if cfg.get("select", "best") == "best" else "mean over restarts"))
    return lines


def write_csv(path: Path | None, comments: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(c + "\n")
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in CSV_COLUMNS})
    text = buf.getvalue()
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return text


def _run_configs(spec, grid, cfg, n, counts):
    return training.ensemble(
        spec, grid, int(cfg["restarts"]), base_seed=int(cfg["seed"]), n=n, counts=counts,
        evaluator=metrics.evaluate_record,
    )


# -- commands -----------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = resolve(args)
    spec = resolve_spec(cfg)
    grid = resolve_grid(cfg, spec)
    out = Path(cfg.get("out") or ".")
    n = cfg.get("n")
    counts = cfg.get("counts")
    res = _run_configs(spec, grid, cfg, n, counts)
    n_req = n if n is not None else (sum(counts) if counts else spec.default_n)
    rows = [result_row(spec, c, n_req, int(cfg["seed"]), cfg["select"]) for c in res.ranked]
    stem = f"{spec.id.replace(':', '')}_N{n_req}_seed{cfg['seed']}"
    text = write_csv(out / f"{stem}.csv", header_lines(cfg, {"problem.description": spec.description}), rows)
    record = {
        "config": cfg,
        "configs": [
            {"hyper": asdict(c.hyper), "mean_E_T": c.mean_E_T, "failures": c.failures,
             "mean_metrics": c.mean_metrics(), "runs": [r.summary() for r in c.runs]}
            for c in res.ranked
        ],
    }
    (out / f"{stem}.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
    if res.best_record is not None:
        b = res.best_record
        network.save_checkpoint(out / f"{stem}.npz", b.arch, b.theta,
                                {"problem": spec.id, "noise_level": spec.noise_level, "seed": b.seed,
                                 "hyper": asdict(b.hyper)})
    sys.stdout.write(text)
    for c in res.ranked:
        for r in c.runs:
            if r.status not in ("gtol", "ftol", "max_iterations"):
                log.warning("run seed=%d finished with status %s", r.seed, r.status)
    return 0


def _table_jobs(table: str, ref: dict, dims) -> list[tuple[str, dict]]:
    rows = ref["rows"]
    if table == "hn":
        rows = [r for r in rows if r["n"] in dims]
        missing = set(dims) - {r["n"] for r in rows}
        rows += [{"label": f"n={d}", "n": d} for d in sorted(missing)]
        return [(f"heatnd:{r['n']}", r) for r in rows]
    return [(ref["problem"], r) for r in rows]


def cmd_reproduce(args) -> int:
    cfg = resolve(args)
    table = args.table
    ref = reference_tables()[table]
    dims = tuple(int(d) for d in str(cfg.get("dims") or ",".join(map(str, DEFAULT_DIMS))).split(","))
    cfg["table"] = table
    if table == "hn":
        cfg["dims"] = ",".join(map(str, dims))
    out = Path(cfg.get("out") or ".")
    comments = header_lines(cfg, {"table": ref["title"]})
    cols = ref["columns"]
    comments.append("# reference: label," + ",".join(cols))
    rows = []
    for problem, r in _table_jobs(table, ref, dims):
        comments.append("# reference: " + ",".join([r["label"]] + [_fmt(r.get(c)) for c in cols]))
    for problem, r in _table_jobs(table, ref, dims):
        spec = get_spec(problem)
        if cfg.get("noise") is not None:
            spec = spec.with_noise(float(cfg["noise"]))
        over = {"depth": r.get("depth"), "width": r.get("width"), "lam": r.get("lambda"),
                "lambda_reg": r.get("lambda_reg")}
        over = {k: v for k, v in over.items() if v is not None}
        if cfg.get("max_iter") is not None:
            over["max_iterations"] = int(cfg["max_iter"])
        hyper = Hyperparameters.for_problem(spec, **over)
        n = None if spec.fixed_counts else r.get("N")
        try:
            res = _run_configs(spec, [hyper], cfg, n, None)
            row = result_row(spec, res.ranked[0], r.get("N", spec.default_n), int(cfg["seed"]), cfg["select"])
        except Exception as exc:  # keep sweeping
            log.error("row %s failed: %s", r["label"], exc)
            comments.append(f"# row {r['label']} failed: {type(exc).__name__}: {exc}")
            row = {"problem": spec.id, "N": r.get("N"), "E_T": math.nan}
        rows.append(row)
    text = write_csv(out / f"{table}.csv", comments, rows)
    sys.stdout.write(text)
    return 0


def cmd_dump_points(args) -> int:
    cfg = resolve(args)
    spec = resolve_spec(cfg)
    sets = make_training_sets(spec, cfg.get("n"), seed=int(cfg["seed"]), counts=cfg.get("counts"))
    d = spec.input_dim
    buf = io.StringIO()
    buf.write(f"# problem = {spec.id}\n# seed = {cfg['seed']}\n# counts = {json.dumps(sets.counts)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["set"] + [f"x{i + 1}" for i in range(d)] + ["w"])
    for label, q in sets.labelled_points():
        for p, wt in zip(q.points, q.weights):
            w.writerow([label] + [repr(float(v)) for v in p] + [repr(float(wt))])
    text = buf.getvalue()
    if cfg.get("out"):
        path = Path(cfg["out"])
        if path.suffix != ".csv":
            path = path / f"{spec.id.replace(':', '')}_points.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    arch, theta, extra = network.load_checkpoint(args.checkpoint)
    problem = args.problem or extra.get("problem")
    if problem is None:
        raise ConfigError("checkpoint has no problem id; pass --problem")
    spec = _lookup(problem)
    if (arch.input_dim, arch.output_dim) != (spec.input_dim, spec.output_dim):
        raise ConfigError(f"checkpoint network does not fit problem {problem!r}")
    rep = metrics.evaluate(spec, theta, arch)
    sys.stdout.write(json.dumps({"problem": spec.id, **rep.as_dict()}, indent=2, sort_keys=True) + "\n")
    return 0


# -- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, problem=True):
    if problem:
        p.add_argument("--problem", help="catalog id, e.g. poisson or heatnd:5")
    p.add_argument("--n", type=int, help="total number of training points")
    p.add_argument("--counts", help="explicit N_int,N_sb,N_d")
    p.add_argument("--restarts", type=int, help="random initialisations per configuration")
    p.add_argument("--seed", type=int, help="base seed; restart r uses seed + r")
    p.add_argument("--noise", type=float, help="relative measurement noise level")
    p.add_argument("--out", help="output directory")
    p.add_argument("--grid", help="JSON list of hyperparameter dicts, or 'standard'")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--max-iter", dest="max_iter", type=int, help="optimizer iteration budget")
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--lambda-reg", dest="lambda_reg", type=float)
    p.add_argument("--optimizer", choices=("lbfgs", "adam"))
    p.add_argument("--select", choices=("best", "mean"), help="report the best restart or the mean")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pinnda",
        description="PINNs for data assimilation problems. "
        f"Parallel width comes from ${training.WORKERS_ENV} (default 1).",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one problem and write CSV/JSON/checkpoint")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("reproduce", help="rerun one of the result tables")
    p.add_argument("table", choices=TABLES)
    _common(p, problem=False)
    p.add_argument("--dims", help="comma-separated dimensions for the hn table")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("dump-points", help="write the generated training sets as CSV")
    _common(p)
    p.set_defaults(func=cmd_dump_points)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint against the exact solution")
    p.add_argument("checkpoint")
    p.add_argument("--problem")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UnknownProblemError as exc:
        print(f"unknown problem {exc.args[0]!r}; available: {', '.join(CATALOG_IDS)}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
