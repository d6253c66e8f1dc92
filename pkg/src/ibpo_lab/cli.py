"""Command-line entry point: ``ibpo-lab {train,variance,ablate,report}``.

Configuration files are YAML (JSON is accepted too) whose keys mirror the
``RunConfig`` fields. Scalar keys can be overridden from the environment with
the ``IBPO__`` prefix and ``__`` as the section separator::

    IBPO__policy__lr=0.5 IBPO__iterations=50 ibpo-lab train --config run.yaml --out runs/a

Exit codes: 0 success, 1 runtime or check failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import analysis
from .trainer import ConfigError, Method, RunConfig, read_metrics, train, units_to_threshold

log = logging.getLogger("ibpo_lab")

ENV_PREFIX = "IBPO__"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_VARIANTS = ("GSPO", "IBPO_BASE", "K1", "SHAPING_ONLY", "PROMPT_ONLY", "BEST_OF_N")
DEFAULT_LAMBDAS = (0.4, 0.6, 0.8, 1.0, 1.2)
FINAL_WINDOW = 10
CURVE_POINTS = 60


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


# -- configuration -----------------------------------------------------------------------

def load_config_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise UsageError(f"cannot parse {p}: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"{p}: top level must be a mapping")
    return data


def apply_env_overrides(data: dict, environ: dict | None = None) -> dict:
    """Fold ``IBPO__a__b=value`` variables into a nested config mapping."""
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(data))
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [k for k in key[len(ENV_PREFIX):].split("__") if k]
        if not path:
            raise UsageError(f"empty override key {key!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        if isinstance(value, (dict, list)):
            raise UsageError(f"{key}: only scalar overrides are supported")
        node = out
        for k in path[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise UsageError(f"{key}: {k!r} is not a section")
        node[path[-1]] = value
    return out


def build_run_config(data: dict, seed: int | None = None) -> RunConfig:
    d = dict(data)
    if seed is not None:
        d["seed"] = seed
    try:
        return RunConfig.from_dict(d)
    except ConfigError as e:
        raise UsageError(str(e)) from None


# -- atomic output ---------------------------------------------------------------------

def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# -- train -----------------------------------------------------------------------------

def cmd_train(config_path, out_dir, seed: int | None = None) -> int:
    config = build_run_config(apply_env_overrides(load_config_file(config_path)), seed)
    path = train(config, out_dir)
    print(f"wrote {path}")
    return EXIT_OK


# -- variance --------------------------------------------------------------------------

@dataclass
class VarianceConfig:
    model: analysis.ExchangeableModel
    G_values: tuple[int, ...]
    n_groups: int
    lambda_factors: tuple[float, ...] | None
    lambdas: tuple[float, ...] | None
    lemma_p: tuple[float, ...]
    lemma_m: tuple[float, ...]
    lemma_G: int
    lemma_min_pass: int
    seed: int


def _float_list(value, name) -> tuple[float, ...]:
    if not isinstance(value, (list, tuple)) or not value:
        raise UsageError(f"{name} must be a non-empty list")
    try:
        out = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise UsageError(f"{name} must hold numbers") from None
    if not all(np.isfinite(out)) or min(out) < 0:
        raise UsageError(f"{name} must hold finite numbers >= 0")
    return out


def parse_variance_config(data: dict, seed: int | None = None) -> VarianceConfig:
    d = dict(data)
    model_d = dict(d.pop("model", {}))
    model_d.setdefault("p", 0.3)
    model_d.setdefault("m", 0.6)
    model_d.setdefault("shape", "beta")
    model_d.setdefault("coupling", "shared_reference")
    try:
        model = analysis.ExchangeableModel(**model_d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"model: {e}") from None
    lemma = dict(d.pop("lemma", {}))
    G_values = tuple(int(g) for g in d.pop("G_values", (2, 4, 8)))
    if not G_values or min(G_values) < 2:
        raise UsageError("G_values must be integers >= 2")
    n_groups = int(d.pop("n_groups", 100_000))
    if n_groups < 100:
        raise UsageError("n_groups must be >= 100")
    lambdas = d.pop("lambdas", None)
    factors = d.pop("lambda_factors", None if lambdas is not None else [0.25, 0.5, 0.75, 2.0])
    cfg = VarianceConfig(
        model=model,
        G_values=G_values,
        n_groups=n_groups,
        lambda_factors=None if factors is None else _float_list(factors, "lambda_factors"),
        lambdas=None if lambdas is None else _float_list(lambdas, "lambdas"),
        lemma_p=_float_list(lemma.pop("p", [0.2, 0.5, 0.8]), "lemma.p"),
        lemma_m=_float_list(lemma.pop("m", [0.1, 0.5, 0.9]), "lemma.m"),
        lemma_G=int(lemma.pop("G", 4)),
        lemma_min_pass=int(lemma.pop("min_pass", 8)),
        seed=int(d.pop("seed", 0) if seed is None else seed),
    )
    leftover = set(d) | set(lemma)
    if leftover:
        raise UsageError(f"unknown variance config keys: {sorted(leftover)}")
    return cfg


def run_variance(cfg: VarianceConfig, out_dir: str | Path) -> tuple[bool, dict]:
    """Lemma grid, identity sweep per G and the covariance-factor check."""
    root = np.random.SeedSequence(cfg.seed)
    s_lemma, s_sweep, s_factor = root.spawn(3)
    rng = np.random.default_rng(s_lemma)
    lemma_rows, lemma_pass = [], 0
    for p in cfg.lemma_p:
        for m in cfg.lemma_m:
            model = analysis.ExchangeableModel(p, m, cfg.model.shape, "independent")
            est = analysis.estimate_moments(model, cfg.lemma_G, cfg.n_groups, rng)
            target = analysis.lemma_cov_closed_form(p, m)
            ok = abs(est.C_in - target) <= 3 * est.se_C_in
            lemma_pass += ok
            lemma_rows.append([p, m, est.C_in, est.se_C_in, target, str(ok).lower()])
    lemma_ok = lemma_pass >= min(cfg.lemma_min_pass, len(lemma_rows))

    sweep_rows, all_pass = [], True
    for G, seq in zip(cfg.G_values, s_sweep.spawn(len(cfg.G_values))):
        rng = np.random.default_rng(seq)
        if cfg.lambdas is not None:
            grid = list(cfg.lambdas)
        else:
            try:
                lam_hat = analysis.lambda_max_from_moments(
                    analysis.estimate_moments(cfg.model, G, cfg.n_groups, rng))
            except analysis.ConditionViolated as e:
                log.error("G=%d: %s", G, e)
                all_pass = False
                continue
            grid = [f * lam_hat for f in cfg.lambda_factors]
        for r in analysis.variance_sweep_report(cfg.model, G, grid, cfg.n_groups, rng):
            all_pass &= r.passed
            sweep_rows.append([G] + r.values())

    factor_rows, factor_ok = [], True
    for G, seq in zip(cfg.G_values, s_factor.spawn(len(cfg.G_values))):
        fc = analysis.covariance_factor_check(cfg.model, G, cfg.n_groups, np.random.default_rng(seq))
        factor_ok &= fc.passed
        factor_rows.append([G, fc.ratio, fc.se, fc.expected, str(fc.passed).lower()])

    out = Path(out_dir)
    fmt = [[str(v).lower() if isinstance(v, bool) else v for v in row] for row in sweep_rows]
    atomic_write_text(out / "variance_report.csv", _csv_text(("G",) + analysis.REPORT_COLUMNS, fmt))
    atomic_write_text(out / "lemma_grid.csv",
                      _csv_text(("p", "m", "C_in", "se", "closed_form", "pass"), lemma_rows))
    atomic_write_text(out / "covariance_factor.csv",
                      _csv_text(("G", "ratio", "se", "expected", "pass"), factor_rows))
    status = {"lemma": lemma_ok, "identity": bool(all_pass), "factor": bool(factor_ok)}
    return all(status.values()), status


def cmd_variance(config_path, out_dir, seed: int | None = None) -> int:
    cfg = parse_variance_config(apply_env_overrides(load_config_file(config_path)), seed)
    ok, status = run_variance(cfg, out_dir)
    for name, passed in status.items():
        print(f"{name}: {'pass' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# -- ablate ----------------------------------------------------------------------------

SUMMARY_COLUMNS = ("variant", "seed", "final_mean_reward", "eval_reward", "units_to_threshold",
                   "iterations", "compute_units", "status")


def final_mean_reward(rows: Sequence[dict], window: int = FINAL_WINDOW) -> float:
    tail = [float(r["mean_reward"]) for r in rows[-window:]]
    return float(np.mean(tail)) if tail else float("nan")


def _parse_variants(text: str | None, fallback: Sequence[str]) -> list[str]:
    names = list(fallback) if text is None else [v.strip() for v in text.split(",") if v.strip()]
    if not names:
        raise UsageError("variant list is empty")
    for n in names:
        try:
            Method(n)
        except ValueError:
            raise UsageError(f"unknown variant {n!r}") from None
    return names


def cmd_ablate(config_path, out_dir, seed: int | None = None, variants: str | None = None,
               threshold: float = 0.75, lambdas: str | None = None) -> int:
    data = apply_env_overrides(load_config_file(config_path))
    abl = dict(data.pop("ablation", {}) or {})
    seeds = abl.pop("seeds", None)
    if seed is not None:
        seeds = [seed]
    seeds = [int(s) for s in (seeds if seeds is not None else [data.get("seed", 0)])]
    if not seeds:
        raise UsageError("ablation.seeds is empty")
    jobs: list[tuple[str, RunConfig]] = []
    base = build_run_config(data)
    if lambdas is not None or abl.get("lambda_sweep"):
        grid = _float_list([float(x) for x in lambdas.split(",")] if lambdas else
                           abl.get("lambdas", list(DEFAULT_LAMBDAS)), "lambdas")
        for lam in grid:
            for s in seeds:
                d = base.to_dict()
                d["objective"]["lam"], d["seed"] = lam, s
                jobs.append((f"{base.method.value}_lambda_{lam:g}", build_run_config(d)))
    else:
        for name in _parse_variants(variants, abl.get("variants", DEFAULT_VARIANTS)):
            for s in seeds:
                d = base.to_dict()
                d["method"], d["seed"] = name, s
                jobs.append((name, build_run_config(d)))
    leftover = set(abl) - {"variants", "lambdas", "lambda_sweep"}
    if leftover:
        raise UsageError(f"unknown ablation keys: {sorted(leftover)}")

    out = Path(out_dir)
    summary, failures = [], 0
    for label, cfg in jobs:
        run_dir = out / label / f"seed_{cfg.seed}"
        try:
            rows = read_metrics(train(cfg, run_dir))
            ev = json.loads((run_dir / "eval.json").read_text())
            reached = units_to_threshold(rows, threshold, cfg.threshold_window)
            summary.append([label, cfg.seed, final_mean_reward(rows), float(ev["eval_reward"]),
                            "not reached" if reached is None else reached,
                            ev["iterations"], ev["compute_units"], "ok"])
        except Exception as e:  # isolate per-variant failures
            failures += 1
            log.error("%s seed %d failed: %s", label, cfg.seed, e)
            summary.append([label, cfg.seed, "", "", "", "", "", f"error: {e}"])
    atomic_write_text(out / "summary.csv", _csv_text(SUMMARY_COLUMNS, summary))
    print(f"wrote {out / 'summary.csv'} ({len(summary)} rows, {failures} failed)")
    return EXIT_FAIL if failures else EXIT_OK


# -- report ----------------------------------------------------------------------------

def discover_runs(run_dir: str | Path) -> dict[str, list[dict]]:
    root = Path(run_dir)
    runs = {}
    for path in sorted(root.rglob("metrics.csv")):
        label = path.parent.relative_to(root).as_posix() or root.name
        runs[label] = read_metrics(path)
    return runs


def smoothed_curve(rows: Sequence[dict], window: int = 5) -> tuple[np.ndarray, np.ndarray]:
    units = np.array([float(r["compute_units"]) for r in rows])
    reward = np.array([float(r["mean_reward"]) for r in rows])
    c = np.concatenate([[0.0], np.cumsum(reward)])
    k = np.arange(1, len(reward) + 1)
    lo = np.maximum(0, k - window)
    return units, (c[k] - c[lo]) / (k - lo)


def aligned_curves(runs: dict[str, list[dict]], points: int = CURVE_POINTS, window: int = 5):
    """Smoothed reward of every run interpolated on a shared units grid.

    The grid spans the units range that every run covers.
    """
    curves = {k: smoothed_curve(v, window) for k, v in runs.items() if v}
    if not curves:
        return np.zeros(0), {}
    lo = max(u[0] for u, _ in curves.values())
    hi = min(u[-1] for u, _ in curves.values())
    grid = np.linspace(lo, hi, points) if hi > lo else np.array([hi])
    return grid, {k: np.interp(grid, u, r) for k, (u, r) in curves.items()}


def pick_baseline(labels: Sequence[str], baseline: str | None) -> str:
    if baseline is not None:
        if baseline not in labels:
            raise UsageError(f"baseline {baseline!r} not among runs {list(labels)}")
        return baseline
    for lab in labels:
        if lab.split("/")[0] == Method.GSPO.value:
            return lab
    return labels[0]


def cmd_report(run_dir, out_dir=None, threshold: float = 0.75, baseline: str | None = None,
               window: int = 5) -> int:
    root = Path(run_dir)
    if not root.is_dir():
        print(f"no such run directory: {root}", file=sys.stderr)
        return EXIT_FAIL
    runs = {k: v for k, v in discover_runs(root).items()}
    if not runs:
        print(f"no metrics.csv under {root}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(out_dir) if out_dir is not None else root
    labels = list(runs)
    grid, curves = aligned_curves(runs, window=window)
    atomic_write_text(out / "aligned_compute.csv",
                      _csv_text(["compute_units"] + list(curves),
                                [[float(u)] + [float(curves[k][i]) for k in curves] for i, u in enumerate(grid)]))
    base = pick_baseline(labels, baseline)
    base_units = units_to_threshold(runs[base], threshold, window)
    table = []
    for lab in labels:
        u = units_to_threshold(runs[lab], threshold, window)
        if u is None:
            table.append([lab, "not reached", "not reached"])
        elif base_units is None:
            table.append([lab, u, "not reached"])
        else:
            table.append([lab, u, u / base_units])
    atomic_write_text(out / "units_at_threshold.csv",
                      _csv_text(("run", f"units_at_{threshold:g}", f"ratio_vs_{base}"), table))
    for row in table:
        print(*row, sep="\t")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ibpo-lab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("variance", help="Monte Carlo checks of the variance identities")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("ablate", help="run several methods (or a lambda grid) at one budget")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--variants", help="comma-separated method names")
    p.add_argument("--lambdas", help="comma-separated lambda grid; switches to sweep mode")
    p.add_argument("--threshold", type=float, default=0.75)

    p = sub.add_parser("report", help="aligned-compute curves and units-at-threshold table")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.add_argument("--threshold", type=float, default=0.75)
    p.add_argument("--baseline", help="run label used for the ratio column")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out, args.seed)
        if args.command == "variance":
            return cmd_variance(args.config, args.out, args.seed)
        if args.command == "ablate":
            return cmd_ablate(args.config, args.out, args.seed, args.variants, args.threshold, args.lambdas)
        return cmd_report(args.run_dir, args.out, args.threshold, args.baseline)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
