"""Command-line surface, CSV ingestion, configuration and serialization.

Commands: fit, rrs, test, hajek, simulate, check.  Options can come from a
YAML config file (--config); explicit flags override file values.  Every
structured output embeds the full effective configuration so a run can be
reproduced from its own output.  Numeric output carries 12 significant
digits.  Exit codes: 0 success, 1 computation error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np
import yaml

from .errors import DomainError, NlrrsError
from .models import Dataset, ModelSpec, box_center, check_gradient, check_regularity, make_model
from .quantile import SolverOptions, fit_quantile
from .ranktests import (
    ScoreFunction,
    median_score,
    statistic_Tn,
    statistic_Tn_star,
    validate_z,
    wilcoxon_score,
)
from .scores import format_grid, hajek_score, rank_score_grid
from .simulate import ErrorLaw, ScenarioConfig, generate_dataset, monte_carlo_size


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _expect_columns(names):
    """Validate the header y, x1..xq, z1..zr and return (q, r, name->index)."""
    index = {name: i for i, name in enumerate(names)}
    if len(index) != len(names):
        raise DomainError("duplicate column names in header")
    if "y" not in index:
        raise DomainError("schema error: missing required column 'y'")
    xs = sorted(n for n in names if n.startswith("x"))
    zs = sorted(n for n in names if n.startswith("z"))
    extra = [n for n in names if n != "y" and n not in xs and n not in zs]
    if extra:
        raise DomainError(f"schema error: unknown columns {extra}")
    q, r = len(xs), len(zs)
    missing = [f"x{i}" for i in range(1, q + 1) if f"x{i}" not in index]
    missing += [f"z{i}" for i in range(1, r + 1) if f"z{i}" not in index]
    if missing:
        raise DomainError(f"schema error: missing columns {missing}")
    return q, r, index


def load_csv(path) -> Dataset:
    """Read a dataset with header columns y, x1..xq and optional z1..zr."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DomainError(f"{path}: empty file") from None
        names = [h.strip() for h in header]
        q, r, index = _expect_columns(names)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(names):
                raise DomainError(
                    f"{path}:{lineno}: expected {len(names)} cells, got {len(row)}"
                )
            parsed = []
            for name in names:
                cell = row[index[name]].strip()
                if cell == "":
                    raise DomainError(
                        f"{path}:{lineno}: missing value in column '{name}'"
                    )
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DomainError(
                        f"{path}:{lineno}: non-numeric value {cell!r} "
                        f"in column '{name}'"
                    ) from None
            rows.append(parsed)
    data = np.asarray(rows, dtype=float)
    if data.size == 0:
        raise DomainError(f"{path}: no data rows")
    ordered = ["y"] + [f"x{i}" for i in range(1, q + 1)] + [f"z{i}" for i in range(1, r + 1)]
    cols = {name: data[:, k] for k, name in enumerate(names)}
    mat = np.column_stack([cols[name] for name in ordered])
    y = mat[:, 0]
    X = mat[:, 1 : 1 + q]
    Z = mat[:, 1 + q :] if r else None
    return Dataset(y=y, X=X, Z=Z)


def save_csv(dataset: Dataset, path) -> None:
    """Write a dataset in the load_csv schema with full float precision."""
    names = (
        ["y"]
        + [f"x{i}" for i in range(1, dataset.q + 1)]
        + [f"z{i}" for i in range(1, dataset.r + 1)]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for i in range(dataset.n):
            row = [repr(float(dataset.y[i]))]
            row += [repr(float(v)) for v in dataset.X[i]]
            if dataset.Z is not None:
                row += [repr(float(v)) for v in dataset.Z[i]]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Serialization helpers
# ---------------------------------------------------------------------------


def _round12(x: float) -> float:
    return float(f"{x:.12g}")


def to_jsonable(obj):
    """Recursively convert results to JSON-serializable structures with
    12-significant-digit floats."""
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _round12(float(obj))
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return to_jsonable(dataclasses.asdict(obj))
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def _emit(payload: dict, output: Optional[str]) -> None:
    text = json.dumps(to_jsonable(payload), indent=2, allow_nan=True)
    if output and output != "-":
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Fully-resolved invocation of one CLI command."""

    command: str
    data_path: Optional[str] = None
    model: Optional[dict] = None
    alpha: float = 0.5
    epsilon: float = 0.05
    grid_m: Optional[int] = None
    score: str = "wilcoxon"
    tau: float = 0.05
    residualized_sn: bool = False
    one_sided: bool = False
    solver: Optional[dict] = None
    scenario: Optional[dict] = None
    n: Optional[int] = None
    ranks: Optional[list] = None
    alphas: Optional[list] = None
    theta: Optional[list] = None
    fd_step: float = 1e-5
    samples: int = 64
    seed: int = 0
    replications: Optional[int] = None
    n_jobs: int = 1
    dump_stats: Optional[str] = None
    output: Optional[str] = None


def _parse_param_box(text: str):
    box = []
    for part in text.split(","):
        lo, _, hi = part.partition(":")
        box.append([float(lo), float(hi)])
    return box


def _build_model(spec: Optional[dict]) -> ModelSpec:
    if not spec or "family" not in spec or "param_box" not in spec:
        raise DomainError("a model needs 'family' and 'param_box'")
    return make_model(spec["family"], spec["param_box"], p=spec.get("p"))


def _build_solver(spec: Optional[dict]) -> SolverOptions:
    return SolverOptions(**(spec or {}))


def _build_score(kind: str, epsilon: float) -> ScoreFunction:
    if kind == "wilcoxon":
        return wilcoxon_score(epsilon)
    if kind == "median":
        return median_score(epsilon)
    raise DomainError(f"unknown score kind {kind!r} (use wilcoxon or median)")


def _build_scenario(spec: dict) -> ScenarioConfig:
    spec = dict(spec)
    model = _build_model(spec.pop("model", None))
    error = spec.pop("error", {"kind": "normal", "scale": 1.0})
    score_spec = spec.pop("score", {"kind": "wilcoxon", "epsilon": 0.05})
    solver_spec = spec.pop("solver", None)
    statistic = spec.pop("statistic", "tn")
    z_design = spec.pop("z_design", None)
    if isinstance(z_design, dict):
        z_design = (z_design,)
    elif z_design is not None:
        z_design = tuple(z_design)
    return ScenarioConfig(
        model=model,
        theta_true=np.asarray(spec.pop("theta_true"), dtype=float),
        n=int(spec.pop("n")),
        error=ErrorLaw(**error),
        replications=int(spec.pop("replications")),
        seed=int(spec.pop("seed", 0)),
        beta_true=spec.pop("beta_true", None),
        z_design=z_design,
        x_design=spec.pop("x_design", None),
        score=_build_score(
            score_spec.get("kind", "wilcoxon"), float(score_spec.get("epsilon", 0.05))
        ),
        nominal_level=float(spec.pop("nominal_level", 0.05)),
        grid_m=int(spec.pop("grid_m", 51)),
        solver=_build_solver(solver_spec),
        statistic_kind=statistic,
        residualized_sn=bool(spec.pop("residualized_sn", False)),
    )


def _effective(config: RunConfig) -> dict:
    out = dataclasses.asdict(config)
    out["solver"] = dataclasses.asdict(_build_solver(config.solver))
    return out


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------


def _cmd_fit(config: RunConfig) -> int:
    dataset = load_csv(config.data_path)
    model = _build_model(config.model)
    opts = _build_solver(config.solver)
    fit = fit_quantile(dataset, model, config.alpha, opts)
    _emit(
        {
            "command": "fit",
            "config": _effective(config),
            "alpha": fit.alpha,
            "theta_hat": fit.theta_hat,
            "objective": fit.objective,
            "residuals": fit.residuals,
            "active_set": fit.active_set,
            "iterations": fit.iterations,
            "converged": fit.converged,
            "restarts_used": fit.restarts_used,
            "multistart_disagreement": fit.multistart_disagreement,
        },
        config.output,
    )
    return 0


def _cmd_rrs(config: RunConfig) -> int:
    dataset = load_csv(config.data_path)
    model = _build_model(config.model)
    opts = _build_solver(config.solver)
    m = config.grid_m or max(51, dataset.n)
    grid = rank_score_grid(dataset, model, config.epsilon, m, opts=opts)
    text = format_grid(grid)
    if config.output and config.output != "-":
        with open(config.output, "w", encoding="utf-8") as fh:
            fh.write(text)
        _emit(
            {
                "command": "rrs",
                "config": _effective(config),
                "grid_size": len(grid.alphas),
                "epsilon": grid.epsilon,
                "scores_path": config.output,
            },
            None,
        )
    else:
        sys.stdout.write(text)
    return 0


def _cmd_test(config: RunConfig) -> int:
    dataset = load_csv(config.data_path)
    model = _build_model(config.model)
    opts = _build_solver(config.solver)
    score = _build_score(config.score, config.epsilon)
    fn = statistic_Tn_star if config.one_sided else statistic_Tn
    res = fn(
        dataset,
        model,
        score,
        opts,
        grid_m=config.grid_m,
        residualized_sn=config.residualized_sn,
    )
    _emit(
        {
            "command": "test",
            "config": _effective(config),
            "statistic": res.statistic,
            "kind": res.kind,
            "df": res.df,
            "p_value": res.p_value,
            "reject_at_tau": bool(res.p_value <= config.tau),
            "tau": config.tau,
            "S_n": res.S_n,
            "D_n": res.D_n,
            "A2": res.A2,
            "epsilon": res.epsilon,
            "score": res.score_kind,
            "grid_size": res.grid_size,
            "residualized_sn": res.residualized_sn,
            "theta_half": res.theta_half,
            "solver_diagnostics": {
                "converged": res.fit.converged,
                "iterations": res.fit.iterations,
                "restarts_used": res.fit.restarts_used,
                "multistart_disagreement": res.fit.multistart_disagreement,
            },
        },
        config.output,
    )
    return 0


def _cmd_hajek(config: RunConfig) -> int:
    if not config.n:
        raise DomainError("hajek requires --n")
    n = int(config.n)
    ranks = config.ranks or list(range(1, n + 1))
    if config.alphas:
        alphas = np.asarray(config.alphas, dtype=float)
    else:
        m = config.grid_m or 51
        alphas = np.linspace(config.epsilon, 1.0 - config.epsilon, m)
    scores = np.array([[hajek_score(R, n, a) for a in alphas] for R in ranks])
    _emit(
        {
            "command": "hajek",
            "config": _effective(config),
            "n": n,
            "ranks": list(ranks),
            "alphas": alphas,
            "scores": scores,
        },
        config.output,
    )
    return 0


def _cmd_simulate(config: RunConfig) -> int:
    if not config.scenario:
        raise DomainError("simulate requires a scenario (config file key 'scenario')")
    scenario = _build_scenario(config.scenario)
    if config.replications:
        scenario = dataclasses.replace(scenario, replications=config.replications)
    report = monte_carlo_size(scenario, n_jobs=config.n_jobs)
    if config.dump_stats:
        np.savetxt(config.dump_stats, report.statistics, fmt="%.12g")
    _emit(
        {
            "command": "simulate",
            "config": _effective(config),
            "rejection_rate": report.rejection_rate,
            "ks_distance": report.ks_distance,
            "failures": report.failures,
            "replications": report.replications,
            "nominal_level": report.nominal_level,
            "threshold": report.threshold,
            "statistic_kind": report.statistic_kind,
            "wall_time": report.wall_time,
            "statistics": report.statistics,
        },
        config.output,
    )
    return 0


def _cmd_check(config: RunConfig) -> int:
    dataset = load_csv(config.data_path)
    model = _build_model(config.model)
    theta = (
        np.asarray(config.theta, dtype=float)
        if config.theta is not None
        else box_center(model)
    )
    grad_err = check_gradient(model, dataset, theta, config.fd_step)
    reg = check_regularity(model, dataset, config.samples, config.seed)
    payload = {
        "command": "check",
        "config": _effective(config),
        "gradient_max_rel_error": grad_err,
        "gradient_ok": bool(grad_err <= 1e-6),
        "regularity": reg,
    }
    if dataset.Z is not None:
        payload["z_diagnostics"] = validate_z(dataset.Z)
    _emit(payload, config.output)
    return 0


_COMMANDS = {
    "fit": _cmd_fit,
    "rrs": _cmd_rrs,
    "test": _cmd_test,
    "hajek": _cmd_hajek,
    "simulate": _cmd_simulate,
    "check": _cmd_check,
}


def run(config: RunConfig) -> int:
    """Execute one resolved command; returns the process exit status."""
    if config.command not in _COMMANDS:
        raise DomainError(f"unknown command {config.command!r}")
    return _COMMANDS[config.command](config)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _csv_floats(text):
    return [float(v) for v in text.split(",")]


def _csv_ints(text):
    return [int(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nlrrs",
        description=(
            "Regression quantiles, rank scores and rank-score tests for "
            "nonlinear models with an intercept."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="YAML config file; flags override it")
        p.add_argument("--output", help="output path ('-' for stdout)")
        if data:
            p.add_argument("--data", dest="data_path", help="CSV data file")
            p.add_argument("--model", dest="family", help="model family name")
            p.add_argument(
                "--param-box",
                dest="param_box",
                help="per-parameter bounds lo:hi, comma separated",
            )
        for name, typ in [
            ("tol-obj", float),
            ("tol-step", float),
            ("max-iter", int),
            ("multistart", int),
            ("trust-radius-init", float),
            ("tol-active", float),
            ("seed", int),
        ]:
            p.add_argument(f"--{name}", type=typ, dest=name.replace("-", "_"))

    p = sub.add_parser("fit", help="fit a regression quantile")
    common(p)
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("rrs", help="rank scores over a level grid")
    common(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--grid-m", dest="grid_m", type=int)

    p = sub.add_parser("test", help="rank-score test of the z regressors")
    common(p)
    p.add_argument("--score", choices=["wilcoxon", "median"])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--grid-m", dest="grid_m", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--one-sided", dest="one_sided", action="store_true", default=None)
    p.add_argument(
        "--residualized-sn",
        dest="residualized_sn",
        action="store_true",
        default=None,
    )

    p = sub.add_parser("hajek", help="location-model rank scores")
    common(p, data=False)
    p.add_argument("--n", type=int)
    p.add_argument("--ranks", type=_csv_ints)
    p.add_argument("--alphas", type=_csv_floats)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--grid-m", dest="grid_m", type=int)

    p = sub.add_parser("simulate", help="Monte Carlo size experiment")
    common(p, data=False)
    p.add_argument("--replications", type=int)
    p.add_argument("--n-jobs", dest="n_jobs", type=int)
    p.add_argument("--dump-stats", dest="dump_stats")

    p = sub.add_parser("check", help="gradient/regularity/z diagnostics")
    common(p)
    p.add_argument("--theta", type=_csv_floats)
    p.add_argument("--fd-step", dest="fd_step", type=float)
    p.add_argument("--samples", type=int)

    return parser


_SOLVER_KEYS = (
    "tol_obj",
    "tol_step",
    "max_iter",
    "multistart",
    "trust_radius_init",
    "tol_active",
    "seed",
)


def _merge_config(args: argparse.Namespace) -> RunConfig:
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = yaml.safe_load(fh) or {}
    cfg = RunConfig(command=args.command)
    cfg.scenario = file_cfg.get("scenario")
    model = file_cfg.get("model")
    solver = dict(file_cfg.get("solver") or {})

    for key in (
        "data_path",
        "alpha",
        "epsilon",
        "grid_m",
        "score",
        "tau",
        "residualized_sn",
        "one_sided",
        "n",
        "ranks",
        "alphas",
        "theta",
        "fd_step",
        "samples",
        "replications",
        "n_jobs",
        "dump_stats",
        "output",
    ):
        if key in file_cfg and file_cfg[key] is not None:
            setattr(cfg, key, file_cfg[key])
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)

    family = getattr(args, "family", None)
    box = getattr(args, "param_box", None)
    if family or box:
        model = dict(model or {})
        if family:
            model["family"] = family
        if box:
            model["param_box"] = _parse_param_box(box)
    cfg.model = model

    for key in _SOLVER_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            solver[key] = val
    cfg.solver = solver or None
    if "seed" in solver:
        cfg.seed = solver["seed"]
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        config = _merge_config(args)
        return run(config)
    except NlrrsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
