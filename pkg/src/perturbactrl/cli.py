"""Batch runner: scenario configs in, CSV tables and text reports out.

    perturbactrl run <config> [--out DIR] [--seed N] [--jobs K]
    perturbactrl verify <suite>
    perturbactrl fattorini <system-file>

PERTURBACTRL_OUT, when set, overrides --out.  Output files contain no
timings, so a rerun with the same config and seed is byte-identical; wall
times go to stdout.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .config import ConfigError, Scaled, ScenarioConfig, parse_config, resolve_path
from .discretization import Grid1D
from .lti_core import fattorini_test, kalman_rank, observability_constant, read_system

LAB_COLUMNS = {
    "transport": ["T", "N", "observability_constant", "control_norm", "final_residual"],
    "wave": ["n", "N", "T", "T*", "fictitious_residual", "reduction_residual", "final_residual",
             "control_norm"],
    "heat": ["T", "N", "n_modes", "S", "moment_residual", "final_relative", "control_norm",
             "oracle_final_relative"],
    "lti": ["T", "n", "m", "kalman_rank", "verdict", "margin", "observability_constant"],
}

# what each reported quantity measures, printed next to it in the text report
QUANTITY_TAGS = {
    "observability_constant": "smallest eigenvalue of the controllability gramian, observability inequality "
                              "constant (transport: restricted to the first Legendre modes)",
    "control_norm": "L2 norm of the computed control over (0, T)",
    "final_residual": "relative distance of the re-simulated final state to the target",
    "fictitious_residual": "least-squares misfit of the n-control smooth control",
    "reduction_residual": "residual of the algebraic elimination of the extra controls",
    "moment_residual": "largest residual of the heat moment problem for the Dirac datum",
    "final_relative": "final state norm over initial state norm, transmuted control",
    "oracle_final_relative": "final state norm over initial state norm, penalized gramian control",
    "S": "total horizon of the staged wave controls",
    "T*": "geometric control time of the interval",
    "kalman_rank": "rank of the Kalman matrix [B, AB, ...]",
    "verdict": "Hautus test at the eigenvalues of A*",
    "margin": "smallest scaled singular value of [lambda - A*; B*]",
}

SCENARIO_DIR = "scenarios"
SUITES = {
    "quick": ["lti_double_integrator", "lti_uncontrollable", "transport_TgeL", "heat_diagonal"],
    "acceptance": ["lti_double_integrator", "lti_uncontrollable", "transport_TgeL", "transport_perturbed",
                   "wave_cascade_n2", "wave_cascade_flipped", "wave_double_integrator", "heat_jordan",
                   "heat_diagonal"],
}


@dataclass
class PointRecord:
    index: int
    inputs: dict
    values: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    error: str | None = None
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return self.error is None and not self.failures


@dataclass
class RunReport:
    scenario_id: str
    lab: str
    seed: int
    records: list
    files: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1


# ---------------------------------------------------------------------------
# per-lab point evaluation; each returns (inputs, values, gates)
# gates are (name, value, bound, kind) with kind "max" (value <= bound),
# "min" (value >= bound) or "eq" (value == bound)


def _resolve(v, units):
    return v.resolve(units) if isinstance(v, Scaled) else v


def _transport_point(cfg: ScenarioConfig, point: dict, seed: int):
    from .transport_lab import (bundled_kernels, build_transport_system, filtered_observability_constant,
                                read_kernel, transport_hum_control)

    p = dict(cfg.problem, **point)
    L, N = p["L"], p["N"]
    T = _resolve(p["T"], {"L": L})
    grid = Grid1D(L, N)
    name = p["kernel"]
    if name.startswith("file:"):
        kernel, kgrid = read_kernel(resolve_path(cfg, name))
        if kernel.size not in (None, N):
            raise ValueError(f"kernel file has N = {kgrid.N}, scenario point has N = {N}")
    else:
        kernels = bundled_kernels(grid)
        if name not in kernels:
            raise ValueError(f"unknown kernel {name!r}; bundled: {', '.join(kernels)}")
        kernel = kernels[name]
    sysd = build_transport_system(grid, kernel)
    x = grid.centers / L
    y0 = np.exp(-40.0 * (x - 0.3) ** 2)
    y1 = 0.5 * np.sin(np.pi * x)
    _, rep = transport_hum_control(sysd, T, y0, y1, penalty=p["penalty"])
    obs = filtered_observability_constant(sysd, T, p["obs_modes"])
    values = {"T": T, "N": N, "observability_constant": obs, "control_norm": rep.control_norm,
              "final_residual": rep.final_residual}
    tol = cfg.tolerances
    gates = [("final_residual", rep.final_residual, tol["final_residual"], "max"),
             ("observability_constant", obs, tol["min_observability"], "min")]
    return {"T": T, "N": N, "kernel": name}, values, gates


def _flipped(x):
    return np.cos(np.pi * (x - 0.5) / 0.6)


def _wave_point(cfg: ScenarioConfig, point: dict, seed: int):
    from .wave_lab import (CascadeCoupling, SmoothAnsatz, build_wave_system, constant_matrix_route,
                           gcc_time_1d, low_mode_state, one_control_synthesis, read_coupling)

    p = dict(cfg.problem, **point)
    N, ell, omega = p["N"], p["ell"], p["omega"]
    T_star = gcc_time_1d(ell, omega)
    T = _resolve(p["T"], {"T*": T_star, "L": ell})
    grid = Grid1D(ell, N)
    ansatz = SmoothAnsatz(n_time=p["n_time"], n_space=p["n_space"], steps_per_knot=p["steps_per_knot"])
    rng = np.random.default_rng(seed)
    route, name = p["route"], p["coupling"]
    if route == "double_integrator":
        n = 2
        y0, y1 = low_mode_state(grid, n, rng), low_mode_state(grid, n, rng)
        out = constant_matrix_route([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], grid, omega, T, y0, y1, ansatz)
        res, final = out.result, out.final_residual
    elif route == "cascade":
        if name.startswith("file:"):
            coupling, cgrid = read_coupling(resolve_path(cfg, name))
            if cgrid.N != N:
                raise ValueError(f"coupling file has N = {cgrid.N}, scenario point has N = {N}")
        elif name in ("unit", "flipped"):
            n = p["n"]
            sub = (lambda x: 1.0 + 0.0 * x) if name == "unit" else _flipped
            table = [[sub if i == j + 1 else None for j in range(n)] for i in range(n)]
            coupling = CascadeCoupling.from_functions(grid, table)
        else:
            raise ValueError(f"unknown coupling {name!r}; expected unit, flipped or file:<path>")
        n = coupling.n
        y0, y1 = low_mode_state(grid, n, rng), low_mode_state(grid, n, rng)
        sysd = build_wave_system(grid, coupling, omega, 1)
        res = one_control_synthesis(sysd, T, y0, y1, ansatz)
        final = res.final_residual
    else:
        raise ValueError(f"unknown route {route!r}; expected cascade or double_integrator")
    values = {"n": n, "N": N, "T": T, "T*": T_star, "fictitious_residual": res.fictitious_residual,
              "reduction_residual": res.reduction_residual, "final_residual": final,
              "control_norm": res.control_norm}
    tol = cfg.tolerances
    gates = [("final_residual", final, tol["final_residual"], "max"),
             ("reduction_residual", res.reduction_residual, tol["reduction_residual"], "max")]
    return {"n": n, "N": N, "T": T, "route": route, "coupling": name}, values, gates


def _heat_point(cfg: ScenarioConfig, point: dict, seed: int):
    from .heat_lab import DiffusionMatrix, parabolic_null_control, penalized_parabolic_control

    p = dict(cfg.problem, **point)
    N, ell, omega, T = p["N"], p["ell"], p["omega"], p["T"]
    D = np.array(p["D"])
    n = D.shape[0]
    A = None if p["A"] is None else np.array(p["A"])
    B = np.eye(n) if p["B"] is None else np.array(p["B"])
    grid = Grid1D(ell, N)
    x = grid.interior_nodes / ell
    rng = np.random.default_rng(seed)
    k = np.arange(1, 4)
    y0 = np.stack([np.sin(np.pi * np.outer(x, k)) @ (rng.standard_normal(3) / k**2) for _ in range(n)])
    ctrl = parabolic_null_control(DiffusionMatrix(D), A, B, grid, omega, T, y0, n_modes=p["n_modes"])
    rep = ctrl.report
    oracle = np.nan
    if p["oracle"] == "yes":
        oracle = penalized_parabolic_control(D, A, B, grid, omega, T, y0)[2]
    values = {"T": T, "N": N, "n_modes": p["n_modes"], "S": rep.S, "moment_residual": rep.moment_residual,
              "final_relative": rep.final_relative, "control_norm": rep.control_norm,
              "oracle_final_relative": oracle}
    tol = cfg.tolerances
    gates = [("final_relative", rep.final_relative, tol["final_relative"], "max"),
             ("moment_residual", rep.moment_residual, tol["moment_residual"], "max")]
    if p["oracle"] == "yes":
        gates.append(("oracle_final_relative", oracle, tol["final_relative"], "max"))
    return {"T": T, "N": N, "D": D.tolist()}, values, gates


def _lti_point(cfg: ScenarioConfig, point: dict, seed: int):
    p = dict(cfg.problem, **point)
    sys_ = read_system(resolve_path(cfg, p["system"]))
    T = p["T"]
    rank = kalman_rank(sys_, cfg.tolerances["rank"])
    verdict = fattorini_test(sys_, cfg.tolerances["rank"])
    obs = observability_constant(sys_, T, p["n_quad"])
    values = {"T": T, "n": sys_.n, "m": sys_.m, "kalman_rank": rank, "verdict": verdict.tag,
              "margin": verdict.margin, "observability_constant": obs}
    gates = [("hautus_matches_kalman", verdict.holds, rank == sys_.n, "eq")]
    if cfg.tolerances["expect"] != "any":
        gates.append(("verdict", verdict.tag, cfg.tolerances["expect"], "eq"))
    return {"T": T, "system": p["system"]}, values, gates


RUNNERS = {"transport": _transport_point, "wave": _wave_point, "heat": _heat_point, "lti": _lti_point}


def _gate_failures(gates) -> list[str]:
    out = []
    for name, value, bound, kind in gates:
        if kind == "eq":
            ok = value == bound
        elif isinstance(value, float) and not np.isfinite(value):
            ok = False
        else:
            ok = value <= bound if kind == "max" else value >= bound
        if not ok:
            rel = {"max": "<=", "min": ">=", "eq": "=="}[kind]
            out.append(f"{name} = {_fmt(value)} violates {rel} {_fmt(bound)}")
    return out


def run_point(cfg: ScenarioConfig, index: int, point: dict, seed: int) -> PointRecord:
    """Evaluate one sweep point; lab errors are captured in the record."""
    start = time.perf_counter()
    rec = PointRecord(index, {k: _resolve_label(v) for k, v in point.items()})
    try:
        inputs, values, gates = RUNNERS[cfg.lab](cfg, point, seed)
        rec.inputs = inputs
        rec.values = values
        rec.failures = _gate_failures(gates)
    except Exception as exc:  # noqa: BLE001 - recorded per point, the run continues
        rec.error = f"{type(exc).__name__}: {exc}"
    rec.wall_time = time.perf_counter() - start
    return rec


def _resolve_label(v):
    return str(v) if isinstance(v, Scaled) else v


def _run_point_args(args):
    return run_point(*args)


def run_scenario(cfg: ScenarioConfig, out_dir=None, seed: int | None = None, jobs: int = 1) -> RunReport:
    """Execute every sweep point, merged in sweep order, and write the outputs.

    With ``jobs`` > 1 points run in worker processes; results are collected
    in sweep order, so the files do not depend on the parallelism.
    """
    seed = cfg.seed if seed is None else seed
    tasks = [(cfg, i, pt, seed) for i, pt in enumerate(cfg.points())]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_point_args, tasks))
    else:
        records = [run_point(*t) for t in tasks]
    report = RunReport(cfg.id, cfg.lab, seed, records)
    if out_dir is not None:
        report.files = emit_report(report, out_dir, ("csv", "text"))
    return report


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else f"{float(v):.6e}"
    return str(v)


def emit_report(report: RunReport, out_dir, formats=("csv", "text")) -> list[Path]:
    """Write <id>.csv and/or <id>.txt into ``out_dir`` and return the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    files = []
    if "csv" in formats:
        path = out / f"{report.scenario_id}.csv"
        cols = LAB_COLUMNS[report.lab]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for rec in report.records:
                w.writerow([_fmt(rec.values.get(c, rec.inputs.get(c, float("nan")))) for c in cols])
        files.append(path)
    if "text" in formats:
        path = out / f"{report.scenario_id}.txt"
        path.write_text(format_text_report(report))
        files.append(path)
    return files


def format_text_report(report: RunReport) -> str:
    lines = [f"scenario {report.scenario_id}", f"lab {report.lab}", f"seed {report.seed}",
             f"points {len(report.records)}", f"status {'PASS' if report.passed else 'FAIL'}", ""]
    for rec in report.records:
        lines.append(f"[point {rec.index}] {'PASS' if rec.passed else 'FAIL'}")
        lines.append("  inputs: " + ", ".join(f"{k} = {_fmt(v)}" for k, v in rec.inputs.items()))
        for k, v in rec.values.items():
            tag = QUANTITY_TAGS.get(k)
            lines.append(f"  {k} = {_fmt(v)}" + (f"    # {tag}" if tag else ""))
        for f in rec.failures:
            lines.append(f"  gate failed: {f}")
        if rec.error:
            lines.append(f"  error: {rec.error}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# command line


def bundled_scenario(name: str) -> Path:
    path = Path(str(resources.files("perturbactrl") / SCENARIO_DIR / f"{name}.cfg"))
    if not path.exists():
        raise FileNotFoundError(f"no bundled scenario named {name!r}")
    return path


def bundled_scenarios() -> list[str]:
    root = Path(str(resources.files("perturbactrl") / SCENARIO_DIR))
    return sorted(p.stem for p in root.glob("*.cfg"))


def _out_dir(arg):
    return os.environ.get("PERTURBACTRL_OUT") or arg


def _print_report(report: RunReport, stream=sys.stdout):
    for rec in report.records:
        status = "PASS" if rec.passed else "FAIL"
        detail = rec.error or "; ".join(rec.failures)
        print(f"  point {rec.index} {status} ({rec.wall_time:.1f} s)" + (f": {detail}" if detail else ""),
              file=stream)
    print(f"{report.scenario_id}: {'PASS' if report.passed else 'FAIL'}", file=stream)


def _cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"{args.config}: {e}", file=sys.stderr)
        return 2
    out = _out_dir(args.out)
    report = run_scenario(cfg, out, args.seed, args.jobs)
    _print_report(report)
    for f in report.files:
        print(f"wrote {f}")
    return report.exit_code


def _cmd_verify(args) -> int:
    names = SUITES.get(args.suite)
    if names is None:
        if args.suite in bundled_scenarios():
            names = [args.suite]
        else:
            print(f"unknown suite {args.suite!r}; suites: {', '.join(SUITES)}; "
                  f"scenarios: {', '.join(bundled_scenarios())}", file=sys.stderr)
            return 2
    out = _out_dir(args.out)
    with tempfile.TemporaryDirectory() as tmp:
        target = out or tmp
        ok = True
        for name in names:
            report = run_scenario(parse_config(bundled_scenario(name)), target, jobs=args.jobs)
            _print_report(report)
            ok &= report.passed
    print(f"suite {args.suite}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _cmd_fattorini(args) -> int:
    try:
        sys_ = read_system(args.system)
    except (OSError, ValueError) as exc:
        print(f"{args.system}: {exc}", file=sys.stderr)
        return 2
    rank = kalman_rank(sys_, args.tol)
    verdict = fattorini_test(sys_, args.tol, relative=not args.absolute)
    print(f"n = {sys_.n}, m = {sys_.m}")
    print(f"kalman_rank = {rank}")
    print(f"verdict = {verdict.tag}")
    print(f"margin = {verdict.margin:.6e}")
    if verdict.witness is not None:
        lam, v = verdict.witness
        print(f"witness eigenvalue = {complex(lam):.6g}")
        print("witness vector = " + " ".join(f"{complex(c):.6g}" for c in np.ravel(v)))
    if verdict.diagnostic:
        print(f"note: {verdict.diagnostic}")
    return 0 if verdict.holds else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perturbactrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario config")
    run.add_argument("config")
    run.add_argument("--out", default="perturbactrl_out", help="output directory (PERTURBACTRL_OUT overrides)")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--jobs", type=int, default=1, help="worker processes for sweep points")
    run.set_defaults(func=_cmd_run)
    ver = sub.add_parser("verify", help="run a bundled suite (quick, acceptance) or one bundled scenario")
    ver.add_argument("suite")
    ver.add_argument("--out", default=None, help="keep outputs here (default: discarded)")
    ver.add_argument("--jobs", type=int, default=1)
    ver.set_defaults(func=_cmd_verify)
    fat = sub.add_parser("fattorini", help="Kalman rank and Hautus test of a system file (A then B)")
    fat.add_argument("system")
    fat.add_argument("--tol", type=float, default=1e-8)
    fat.add_argument("--absolute", action="store_true", help="absolute instead of relative tolerance")
    fat.set_defaults(func=_cmd_fattorini)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
