"""Command-line front end and result files.

``voltdiag solve``  one diagnosis; writes ``result.json``, ``buses.csv`` and
                    plot-ready tables, prints a one-line summary.
``voltdiag sweep``  one diagnosis per load factor; writes ``sweep.csv``.

Exit codes: 0 converged, 2 not converged, 1 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from voltdiag.case_io import CaseError, NetworkCase, load_case, scale_load, with_voltage_bounds
from voltdiag.diagnosis import MODES, DiagnosisResult, SubproblemRecord, diagnose
from voltdiag.network_model import PLACEMENTS, build_model
from voltdiag.nlp_core import SolverOptions

logger = logging.getLogger(__name__)

HIST_BIN = 0.01


class UsageError(Exception):
    pass


def fmt(x) -> str:
    """12 significant digits, blank for missing values."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.12g}"


# --------------------------------------------------------------------------
# Result serialization
# --------------------------------------------------------------------------


def _violations(items) -> list[list]:
    return [[int(b), float(m)] for b, m in items]


def result_to_dict(result: DiagnosisResult) -> dict:
    return {
        "status": result.status,
        "mode": result.mode,
        "bus_ids": result.bus_ids.tolist(),
        "v_real": result.v_real.tolist(),
        "v_imag": result.v_imag.tolist(),
        "n_real": result.n_real.tolist(),
        "n_imag": result.n_imag.tolist(),
        "support": list(result.support),
        "v_min": np.asarray(result.v_min).tolist(),
        "v_max": np.asarray(result.v_max).tolist(),
        "violations_before": _violations(result.violations_before),
        "violations_after": _violations(result.violations_after),
        "objective": result.objective,
        "kcl_residual_norm": result.kcl_residual_norm,
        "baseline_status": result.baseline_status,
        "v_baseline": None
        if result.v_baseline is None
        else {"real": result.v_baseline.real.tolist(), "imag": result.v_baseline.imag.tolist()},
        "subproblem_history": [asdict(h) for h in result.subproblem_history],
        "wall_time": dict(result.wall_time),
        "inner_iterations": result.inner_iterations,
    }


def result_from_dict(data: dict) -> DiagnosisResult:
    vb = data.get("v_baseline")
    return DiagnosisResult(
        status=data["status"],
        mode=data["mode"],
        bus_ids=np.array(data["bus_ids"], dtype=np.int64),
        v_real=np.array(data["v_real"], dtype=float),
        v_imag=np.array(data["v_imag"], dtype=float),
        n_real=np.array(data["n_real"], dtype=float),
        n_imag=np.array(data["n_imag"], dtype=float),
        support=list(data["support"]),
        v_min=np.array(data["v_min"], dtype=float),
        v_max=np.array(data["v_max"], dtype=float),
        violations_before=[(int(b), float(m)) for b, m in data["violations_before"]],
        violations_after=[(int(b), float(m)) for b, m in data["violations_after"]],
        objective=data["objective"],
        kcl_residual_norm=data["kcl_residual_norm"],
        baseline_status=data["baseline_status"],
        v_baseline=None if vb is None else np.array(vb["real"]) + 1j * np.array(vb["imag"]),
        subproblem_history=[SubproblemRecord(**h) for h in data["subproblem_history"]],
        wall_time=dict(data["wall_time"]),
        inner_iterations=data["inner_iterations"],
    )


def write_result_json(result: DiagnosisResult, path: Path) -> None:
    # full float precision so the file reloads exactly
    path.write_text(json.dumps(result_to_dict(result)))


def read_result_json(path: Path) -> DiagnosisResult:
    return result_from_dict(json.loads(Path(path).read_text()))


def write_bus_csv(result: DiagnosisResult, path: Path) -> None:
    before = {b for b, _ in result.violations_before}
    v = result.v
    n = result.n
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "v_mag", "v_ang_deg", "n_mag", "n_real", "n_imag", "violated_before"])
        for k, bus in enumerate(result.bus_ids):
            w.writerow(
                [
                    int(bus),
                    fmt(abs(v[k])),
                    fmt(math.degrees(np.angle(v[k]))),
                    fmt(abs(n[k])),
                    fmt(n.real[k]),
                    fmt(n.imag[k]),
                    int(int(bus) in before),
                ]
            )


def compensation_histogram(result: DiagnosisResult, width: float = HIST_BIN) -> list[tuple[float, float, int]]:
    """``(lo, hi, count)`` bins of ``|n|`` over the support buses."""
    index = {int(b): k for k, b in enumerate(result.bus_ids)}
    mags = np.array([abs(result.n[index[b]]) for b in result.support])
    if len(mags) == 0:
        return []
    bins = np.floor(mags / width).astype(int)
    counts = np.bincount(bins)
    return [(k * width, (k + 1) * width, int(c)) for k, c in enumerate(counts)]


def emit_plot_data(result: DiagnosisResult, out_dir: str | Path, case: NetworkCase | None = None) -> list[Path]:
    """Write ``voltages.csv``, ``compensation_hist.csv``, ``nodes.csv`` and ``graph.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    vmag = result.v_mag
    vbase = None if result.v_baseline is None else np.abs(result.v_baseline)
    lo = np.broadcast_to(result.v_min, vmag.shape)
    hi = np.broadcast_to(result.v_max, vmag.shape)

    path = out / "voltages.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "v_baseline", "v_result", "v_min", "v_max"])
        for k, bus in enumerate(result.bus_ids):
            w.writerow([int(bus), fmt(None if vbase is None else vbase[k]), fmt(vmag[k]), fmt(lo[k]), fmt(hi[k])])
    written.append(path)

    path = out / "compensation_hist.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for a, b, c in compensation_histogram(result):
            w.writerow([fmt(a), fmt(b), c])
    written.append(path)

    before = {b for b, _ in result.violations_before}
    after = {b for b, _ in result.violations_after}
    path = out / "nodes.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "x", "y", "n_mag", "violated_before", "violated_after"])
        for k, bus in enumerate(result.bus_ids):
            b = int(bus)
            w.writerow([b, "", "", fmt(abs(result.n[k])), int(b in before), int(b in after)])
    written.append(path)

    path = out / "graph.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from_bus", "to_bus"])
        if case is not None:
            for br in case.branches:
                w.writerow([br.from_bus, br.to_bus])
    written.append(path)
    return written


def summary_line(result: DiagnosisResult, elapsed: float) -> str:
    return (
        f"status={result.status} mode={result.mode} support={len(result.support)} "
        f"violations_before={len(result.violations_before)} "
        f"violations_after={len(result.violations_after)} wall={elapsed:.3f}s"
    )


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    case_path: str
    fmt: str | None = None
    mode: str = "vreg"
    load_factor: float = 1.0
    load_factors: list[float] = field(default_factory=list)
    v_min: float | None = None
    v_max: float | None = None
    placement: str = "all_non_slack"
    reactive_only: bool = False
    out_dir: str = "."
    tol_feas: float | None = None
    max_iters: int | None = None
    jobs: int = 1
    seed: int | None = None  # reserved; the solvers are deterministic

    def solver_options(self) -> SolverOptions:
        kw = {}
        if self.tol_feas is not None:
            kw["tol_feas"] = self.tol_feas
        if self.max_iters is not None:
            kw["max_newton_iters"] = self.max_iters
        return SolverOptions(**kw)


def parse_range(text: str) -> list[float]:
    """``start:stop:step`` with ``stop`` included."""
    try:
        start, stop, step = (float(p) for p in text.split(":"))
    except ValueError:
        raise UsageError(f"load factor range must look like start:stop:step, got {text!r}") from None
    if not step > 0:
        raise UsageError("sweep step must be positive")
    if stop < start:
        raise UsageError("sweep stop must not be below start")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 12) for k in range(count)]


def _load(config: RunConfig) -> NetworkCase:
    case = load_case(config.case_path, config.fmt)
    return with_voltage_bounds(case, config.v_min, config.v_max)


def run_once(config: RunConfig, case: NetworkCase, factor: float) -> tuple[DiagnosisResult, float, NetworkCase]:
    scaled = scale_load(case, factor)
    model = build_model(scaled, config.placement, config.reactive_only)
    t0 = time.perf_counter()
    result = diagnose(model, config.mode, config.solver_options())
    return result, time.perf_counter() - t0, scaled


def cmd_solve(config: RunConfig) -> int:
    case = _load(config)
    result, elapsed, scaled = run_once(config, case, config.load_factor)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_result_json(result, out / "result.json")
    write_bus_csv(result, out / "buses.csv")
    emit_plot_data(result, out, scaled)
    print(summary_line(result, elapsed))
    return 0 if result.converged else 2


SWEEP_COLUMNS = [
    "load_factor",
    "mode",
    "status",
    "support_size",
    "violations_before",
    "violations_after",
    "inner_iterations",
    "subproblems",
    "wall_seconds",
]


def _sweep_row(args) -> list:
    config, case, factor = args
    try:
        result, elapsed, _ = run_once(config, case, factor)
    except Exception as exc:  # one bad factor must not end the sweep
        logger.warning("load factor %s failed: %s", factor, exc)
        return [fmt(factor), config.mode, f"error: {exc}", "", "", "", "", "", ""]
    return [
        fmt(factor),
        config.mode,
        result.status,
        len(result.support),
        len(result.violations_before),
        len(result.violations_after),
        result.inner_iterations,
        sum(h.kind == "sparse" for h in result.subproblem_history),
        fmt(elapsed),
    ]


def cmd_sweep(config: RunConfig) -> int:
    if not config.load_factors:
        raise UsageError("sweep needs --load-factors start:stop:step")
    case = _load(config)
    jobs = [(config, case, f) for f in sorted(config.load_factors)]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            rows = list(pool.map(_sweep_row, jobs))
    else:
        rows = [_sweep_row(j) for j in jobs]
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        w.writerows(rows)
    for row in rows:
        print(",".join(str(c) for c in row))
    return 0 if all(row[2] == "converged" for row in rows) else 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voltdiag", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("solve", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--case", required=True, help="case file, or a stock name such as case30")
        p.add_argument("--format", choices=("matpower", "json"), default=None)
        p.add_argument("--mode", choices=MODES, default="vreg")
        if name == "solve":
            p.add_argument("--load-factor", type=float, default=1.0)
        else:
            p.add_argument("--load-factors", required=True, metavar="START:STOP:STEP")
            p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--vmin", type=float, default=None)
        p.add_argument("--vmax", type=float, default=None)
        p.add_argument("--placement", choices=PLACEMENTS, default="all_non_slack")
        p.add_argument("--reactive-only", action="store_true")
        p.add_argument("--out-dir", default=".")
        p.add_argument("--tol-feas", type=float, default=None)
        p.add_argument("--max-iters", type=int, default=None)
        p.add_argument("--seed", type=int, default=None, help="reserved; results are deterministic")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    config = RunConfig(
        case_path=args.case,
        fmt=args.format,
        mode=args.mode,
        v_min=args.vmin,
        v_max=args.vmax,
        placement=args.placement,
        reactive_only=args.reactive_only,
        out_dir=args.out_dir,
        tol_feas=args.tol_feas,
        max_iters=args.max_iters,
        seed=args.seed,
    )
    if args.command == "solve":
        if not (math.isfinite(args.load_factor) and args.load_factor >= 0):
            raise UsageError("load factor must be finite and non-negative")
        config.load_factor = args.load_factor
    else:
        config.load_factors = parse_range(args.load_factors)
        config.jobs = args.jobs
    if config.v_min is not None and config.v_max is not None and config.v_min > config.v_max:
        raise UsageError("--vmin must not exceed --vmax")
    return config


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        if args.command == "solve":
            return cmd_solve(config)
        return cmd_sweep(config)
    except UsageError as exc:
        print(f"voltdiag: {exc}", file=sys.stderr)
        return 1
    except (OSError, CaseError, ValueError) as exc:
        print(f"voltdiag: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
