"""Experiment runner: ``mfparticles sweep | validate | rate``.

Exit codes: 0 success, 1 usage or configuration error, 2 failed acceptance
check (only with ``--check``).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import lq
from .analysis import fit_rate, pathwise_errors, weak_and_chaos_errors
from .bsde import BasisSpec, correction_term, evaluate_analytic, solve_lsmc, write_bsde_csv
from .errors import MfParticlesError, NoFitError
from .model import LqParams, validate_assumptions
from .sim import simulate_limit, simulate_particles, write_paths_csv

HEADER = ["experiment", "model", "N", "seed", "K", "P", "method", "err_y_sup", "err_z_int", "err_y_weak",
          "err_z_weak", "chaos_y", "chaos_z", "corr_term_int", "runtime_ms"]
ERROR_COLUMNS = HEADER[7:14]
GATE_TOL = 1e-6
GATE_MEASURES = 20
GATE_ATOMS = 16
GATE_TIMES = tuple(round(0.1 * j, 1) for j in range(1, 10))


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


def _schema() -> dict:
    return json.loads(resources.files("mfparticles").joinpath("config_schema.json").read_text())


def _power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass
class ExperimentConfig:
    model: str
    params: dict
    N: list
    seeds: list
    K: int
    P: int
    method: str
    experiment: str = "sweep"
    out: Optional[str] = None
    threads: int = 1
    chaos: bool = False
    timing: bool = False
    riccati_grid: int = 1024
    dump: dict = field(default_factory=dict)
    lsmc: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    debug: dict = field(default_factory=dict)

    @property
    def methods(self) -> list:
        return ["analytic", "lsmc"] if self.method == "both" else [self.method]

    def basis(self) -> BasisSpec:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.lsmc.items()}
        return BasisSpec(**kw)

    def lq_params(self) -> LqParams:
        return LqParams(**self.params)


def parse_config(raw: dict) -> ExperimentConfig:
    """jsonschema validation plus the cross-field rules; errors carry a JSON pointer."""
    validator = jsonschema.Draft202012Validator(_schema())
    errs = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errs:
        err = errs[0]
        pointer = "".join(f"/{p}" for p in err.absolute_path)
        raise ConfigError(pointer, err.message)
    Ns = raw["N"]
    for j in range(1, len(Ns)):
        if Ns[j] <= Ns[j - 1]:
            raise ConfigError(f"/N/{j}", "N list must be strictly increasing")
    for key in ("K", "P"):
        if not _power_of_two(raw[key]):
            raise ConfigError(f"/{key}", f"{key} must be a power of two")
    cfg = ExperimentConfig(
        model=raw["model"]["name"], params=dict(raw["model"].get("params", {})),
        N=list(Ns), seeds=list(raw["seeds"]), K=raw["K"], P=raw["P"], method=raw["method"],
        experiment=raw.get("experiment", "sweep"), out=raw.get("out"), threads=raw.get("threads", 1),
        chaos=raw.get("chaos", False), timing=raw.get("timing", False),
        riccati_grid=raw.get("riccati_grid", 1024), dump=dict(raw.get("dump", {})),
        lsmc=dict(raw.get("lsmc", {})), checks=list(raw.get("checks", [])), debug=dict(raw.get("debug", {})),
    )
    try:
        cfg.lq_params()
    except ValueError as exc:
        raise ConfigError("/model/params", str(exc))
    try:
        basis = cfg.basis()
    except ValueError as exc:
        raise ConfigError("/lsmc", str(exc))
    if "lsmc" in cfg.methods and cfg.P < 10 * basis.size(1, 1):
        raise ConfigError("/P", f"lsmc needs P >= 10 x basis size ({10 * basis.size(1, 1)})")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("", f"cannot read config: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}")
    return parse_config(raw)


# ---------------------------------------------------------------- Riccati gate


def riccati_gate(sol: lq.RiccatiSolution, seed: int = 0) -> dict:
    """Measure-PDE residual on random clouds x interior times, and the N = 8 finite-dim residual."""
    rng = np.random.default_rng(seed)
    worst_pde = 0.0
    for _ in range(GATE_MEASURES):
        pts = 0.5 + rng.standard_normal((GATE_ATOMS, 1))
        for t in GATE_TIMES:
            worst_pde = max(worst_pde, lq.pde_residual(sol, t, pts))
    worst_vn = 0.0
    for _ in range(5):
        t = float(rng.uniform(0.1, 0.9))
        worst_vn = max(worst_vn, lq.vN_residual(sol, t, 0.5 + rng.standard_normal((8, 1))))
    return {"pde_residual": worst_pde, "vN_residual": worst_vn, "tolerance": GATE_TOL,
            "passed": bool(worst_pde <= GATE_TOL and worst_vn <= GATE_TOL)}


# ---------------------------------------------------------------------- sweep


def _problem(cfg: ExperimentConfig):
    flip = bool(cfg.debug.get("flip_riccati_q", False))
    return lq.lq_problem(cfg.lq_params(), cfg.riccati_grid, corrupt_q_sign=flip)


def _fmt(value) -> str:
    if value is None:
        return ""
    value = float(value)
    return "" if math.isnan(value) else repr(value)


def run_cell(cfg: ExperimentConfig, problem, N: int, seed: int, out_dir: Optional[Path] = None,
             dump_paths: bool = False) -> list:
    spec, sol, an = problem
    paths = simulate_particles(spec, N, cfg.K, seed, cfg.P)
    limit = simulate_limit(spec, paths) if cfg.chaos else None
    corr = float(np.mean(correction_term(spec, an, paths).idio_int))
    if dump_paths and out_dir is not None:
        write_paths_csv(paths, out_dir / f"paths_N{N}_seed{seed}.csv")
    rows = []
    for method in cfg.methods:
        start = time.perf_counter()
        back = evaluate_analytic(an, paths, spec) if method == "analytic" else solve_lsmc(spec, paths, cfg.basis())
        ey, ez = pathwise_errors(back, an, paths)
        weak = weak_and_chaos_errors(back, an, paths, limit) if limit is not None else None
        elapsed = (time.perf_counter() - start) * 1e3
        if (dump_paths or cfg.dump.get("bsde")) and out_dir is not None:
            write_bsde_csv(back, out_dir / f"bsde_N{N}_seed{seed}_{method}.csv", max_paths=4)
        rows.append({
            "experiment": cfg.experiment, "model": cfg.model, "N": N, "seed": seed, "K": cfg.K, "P": cfg.P,
            "method": method, "err_y_sup": float(ey.mean()), "err_z_int": float(ez.mean()),
            "err_y_weak": weak.err_y_weak if weak else None, "err_z_weak": weak.err_z_weak if weak else None,
            "chaos_y": weak.chaos_y if weak else None, "chaos_z": weak.chaos_z if weak else None,
            "corr_term_int": corr, "runtime_ms": elapsed if cfg.timing else None,
        })
    return rows


def write_results(rows: list, path: Path) -> None:
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    with open(path, "w", newline="") as fh:
        fh.write(f"# mfparticles results, generated {stamp}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in rows:
            w.writerow([r[h] if h in ("experiment", "model", "N", "seed", "K", "P", "method") else _fmt(r[h])
                        for h in HEADER])


def read_results(path) -> list:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _median_points(rows: list, method: str, column: str) -> list:
    by_n = {}
    for r in rows:
        if r["method"] != method:
            continue
        v = r[column]
        v = float("nan") if v in ("", None) else float(v)
        if not math.isnan(v):
            by_n.setdefault(int(r["N"]), []).append(v)
    return [(n, float(np.median(vals))) for n, vals in sorted(by_n.items())]


def compute_rates(rows: list) -> dict:
    """Per method and column: log-log fit of the per-N seed medians."""
    out = {}
    for method in sorted({r["method"] for r in rows}):
        out[method] = {}
        for col in ERROR_COLUMNS:
            pts = _median_points(rows, method, col)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                try:
                    out[method][col] = fit_rate(pts).to_dict()
                except NoFitError:
                    out[method][col] = {"status": "insufficient points", "n_points": len(pts)}
    return out


def evaluate_checks(cfg: ExperimentConfig, rows: list, rates: dict, gate: dict) -> list:
    results = [{"name": "riccati_gate", "passed": gate["passed"], "value": max(gate["pde_residual"], gate["vN_residual"]),
                "detail": gate}]
    for j, chk in enumerate(cfg.checks):
        method = chk.get("method", cfg.methods[0])
        col = chk["column"]
        name = f"{chk['type']}:{method}:{col}"
        if chk["type"] == "slope":
            fit = rates.get(method, {}).get(col, {})
            slope = fit.get("slope")
            ok = slope is not None and chk.get("min", -math.inf) <= slope <= chk.get("max", math.inf)
            ok = ok and fit.get("r2", -math.inf) >= chk.get("r2_min", -math.inf)
            results.append({"name": name, "passed": bool(ok), "value": slope, "detail": fit})
        else:
            vals = [(int(r["N"]), float(r[col])) for r in rows if r["method"] == method and r[col] not in ("", None)]
            if chk["type"] == "max":
                value = max((v for _, v in vals), default=math.nan)
            else:
                scaled = np.array([n * v for n, v in vals])
                value = float(np.ptp(scaled) / np.mean(np.abs(scaled))) if scaled.size else math.nan
            ok = not math.isnan(value) and value <= chk.get("max", math.inf) and value >= chk.get("min", -math.inf)
            results.append({"name": name, "passed": bool(ok), "value": value, "detail": {"n_values": len(vals)}})
    return results


def run_sweep(cfg: ExperimentConfig, out_dir, threads: Optional[int] = None, dump_paths: bool = False,
              check: bool = False) -> int:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    problem = _problem(cfg)
    gate = riccati_gate(problem[1])
    if cfg.dump.get("riccati"):
        lq.write_riccati_csv(problem[1], out_dir / "riccati.csv", cfg.N)
    dump_paths = dump_paths or bool(cfg.dump.get("paths"))
    cells = [(N, seed) for N in cfg.N for seed in cfg.seeds]
    workers = threads or cfg.threads
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_cell, cfg, problem, N, seed, out_dir, dump_paths) for N, seed in cells]
        rows = [r for fut in futures for r in fut.result()]
    rows.sort(key=lambda r: (r["N"], r["seed"], r["method"]))
    write_results(rows, out_dir / "results.csv")
    str_rows = [{k: ("" if v is None else str(v)) for k, v in r.items()} for r in rows]
    rates = compute_rates(str_rows)
    (out_dir / "rates.json").write_text(json.dumps(rates, indent=2, sort_keys=True) + "\n")
    checks = evaluate_checks(cfg, str_rows, rates, gate)
    (out_dir / "checks.json").write_text(json.dumps(checks, indent=2, default=float) + "\n")
    failed = [c["name"] for c in checks if not c["passed"]]
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} value={c['value']}")
    if check and failed:
        return 2
    return 0


def run_validate(cfg: ExperimentConfig, out_dir, check: bool = False) -> int:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec, sol, an = _problem(cfg)
    report = validate_assumptions(spec, raise_on_singular=False)
    rng = np.random.default_rng(1)
    clouds = [0.5 + rng.standard_normal((16, 1)) for _ in range(8)]
    gate = riccati_gate(sol)
    payload = {
        "model": cfg.model,
        "params": cfg.lq_params().to_dict(),
        "assumptions": report.to_dict(),
        "growth_constant": an.growth_constant(np.linspace(0.0, sol.T, 11), clouds),
        "riccati_gate": gate,
    }
    (out_dir / "assumptions.json").write_text(json.dumps(payload, indent=2, default=float) + "\n")
    ok = gate["passed"] and not report.violations
    print(f"{'PASS' if ok else 'FAIL'} validate violations={len(report.violations)} "
          f"pde_residual={gate['pde_residual']:.3g} vN_residual={gate['vN_residual']:.3g}")
    return 2 if (check and not ok) else 0


def run_rate(path, column: str, method: Optional[str] = None) -> int:
    rows = read_results(path)
    if rows and column not in rows[0]:
        raise ConfigError("/column", f"unknown column {column!r}")
    methods = [method] if method else sorted({r["method"] for r in rows})
    out = {}
    for m in methods:
        pts = _median_points(rows, m, column)
        try:
            out[m] = fit_rate(pts).to_dict()
        except NoFitError:
            out[m] = {"status": "insufficient points", "n_points": len(pts)}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfparticles", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sw = sub.add_parser("sweep", help="run an (N, seed) sweep")
    sw.add_argument("--config", required=True)
    sw.add_argument("--out")
    sw.add_argument("--check", action="store_true")
    sw.add_argument("--threads", type=int)
    sw.add_argument("--dump-paths", action="store_true")
    va = sub.add_parser("validate", help="assumption report and Riccati gates")
    va.add_argument("--config", required=True)
    va.add_argument("--out")
    va.add_argument("--check", action="store_true")
    ra = sub.add_parser("rate", help="fit a log-log rate to a results column")
    ra.add_argument("--in", dest="inp", required=True)
    ra.add_argument("--column", required=True)
    ra.add_argument("--method")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "rate":
            return run_rate(args.inp, args.column, args.method)
        cfg = load_config(args.config)
        out = args.out or cfg.out or "."
        if args.command == "sweep":
            if args.threads is not None and args.threads < 1:
                raise ConfigError("/threads", "thread count must be >= 1")
            return run_sweep(cfg, out, args.threads, args.dump_paths, args.check)
        return run_validate(cfg, out, args.check)
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return 1
    except (MfParticlesError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
