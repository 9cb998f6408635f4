"""Dense, sparse and voltage-regulated compensation problems.

``solve_dense``
    minimize 0.5*||n||^2 subject to KCL.
``solve_sparse``
    minimize 0.5*||n||^2 + sum(c*|n|) subject to KCL, solved as a series
    of subproblems in which the weights ``c`` are toggled between a high
    and a low value according to the latest ``n``.
``solve_vreg``
    the sparse series with squared voltage magnitudes pinned by equality
    rows and boxed by ``v_min^2 <= v_sq <= v_max^2``.

The absolute values are handled through per-component slacks ``t`` with
``-t <= n <= t``, which keeps every problem smooth.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from voltdiag.network_model import (
    CircuitModel,
    StateVector,
    VariableLayout,
    constraint_hessian,
    jacobian,
    kcl_residual,
)
from voltdiag.nlp_core import NlpProblem, NlpResult, SolverOptions, solve_nlp, with_options
from voltdiag.reference_oracles import PowerFlowOptions, newton_power_flow

logger = logging.getLogger(__name__)

C_HIGH = 10.0
C_LOW = 0.1
SUPPORT_THRESHOLD = 1e-4
VIOLATION_TOL = 1e-6
MAX_SUBPROBLEMS = 20
# warm-started sparse subproblems begin closer to the end of the barrier schedule
WARM_BARRIER = 1e-3
# initial gap between t and |n| in a warm start
T_MARGIN = 1e-2


@dataclass(frozen=True)
class SparsityCoefficients:
    c: np.ndarray
    c_high: float = C_HIGH
    c_low: float = C_LOW
    support_threshold: float = SUPPORT_THRESHOLD

    @classmethod
    def uniform(cls, size: int, value: float | None = None, **kw) -> SparsityCoefficients:
        hi = kw.get("c_high", C_HIGH)
        return cls(np.full(size, hi if value is None else value), **kw)


def update_coefficients(n: np.ndarray, coeffs: SparsityCoefficients) -> SparsityCoefficients:
    """Cheap weight where the compensation is significant, expensive elsewhere."""
    big = np.abs(np.asarray(n)) >= coeffs.support_threshold
    c = np.where(big, coeffs.c_low, coeffs.c_high)
    return SparsityCoefficients(c, coeffs.c_high, coeffs.c_low, coeffs.support_threshold)


# --------------------------------------------------------------------------
# NLP formulation
# --------------------------------------------------------------------------


class CompensationProblem(NlpProblem):
    """One subproblem on a circuit model.

    ``coeffs=None`` gives the dense objective; otherwise ``t`` slacks are
    added. ``bounds`` (per-bus ``v_min``, ``v_max`` arrays) adds the squared
    magnitude variables and their box.
    """

    def __init__(
        self,
        model: CircuitModel,
        coeffs: np.ndarray | None = None,
        bounds: tuple[np.ndarray, np.ndarray] | None = None,
    ):
        self.model = model
        self.coeffs = None if coeffs is None else np.asarray(coeffs, dtype=float)
        self.bounds = bounds
        self.layout: VariableLayout = model.layout(sparse=coeffs is not None, vreg=bounds is not None)
        lay = self.layout
        self.n_x = lay.size
        self.n_eq = lay.n_eq
        self.n_ineq = 2 * lay.n_t + 2 * lay.n_vsq
        self.voltage_index = np.arange(lay.voltages.start, lay.voltages.stop)
        if self.coeffs is not None and len(self.coeffs) != lay.n_comp:
            raise ValueError("one coefficient per compensation component is required")
        self._ineq_jac = self._build_ineq_jacobian()
        if bounds is not None:
            k = model.bounded_bus
            shape = (model.n_bus,)
            self.vsq_lo = np.broadcast_to(np.asarray(bounds[0], dtype=float), shape)[k] ** 2
            self.vsq_hi = np.broadcast_to(np.asarray(bounds[1], dtype=float), shape)[k] ** 2
        obj_diag = np.zeros(self.n_x)
        obj_diag[lay.n] = 1.0
        self._obj_hess = sp.diags(obj_diag, format="csr")
        self._cache_x: np.ndarray | None = None
        self._cache_jac = None

    def state(self, x: np.ndarray) -> StateVector:
        return StateVector(self.layout, x)

    def _build_ineq_jacobian(self) -> sp.csr_matrix:
        lay = self.layout
        rows, cols, vals = [], [], []
        m = lay.n_t
        if m:
            r = np.arange(m)
            n_cols = np.arange(lay.n.start, lay.n.stop)
            t_cols = np.arange(lay.t.start, lay.t.stop)
            # n - t <= 0 ; -n - t <= 0
            rows += [r, r, m + r, m + r]
            cols += [n_cols, t_cols, n_cols, t_cols]
            vals += [np.ones(m), -np.ones(m), -np.ones(m), -np.ones(m)]
        q = lay.n_vsq
        if q:
            r = 2 * m + np.arange(q)
            v_cols = np.arange(lay.v_sq.start, lay.v_sq.stop)
            # v_min^2 - v_sq <= 0 ; v_sq - v_max^2 <= 0
            rows += [r, q + r]
            cols += [v_cols, v_cols]
            vals += [-np.ones(q), np.ones(q)]
        if not rows:
            return sp.csr_matrix((0, self.n_x))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_ineq, self.n_x),
        )

    def objective(self, x):
        n = x[self.layout.n]
        val = 0.5 * float(n @ n)
        if self.coeffs is not None:
            val += float(self.coeffs @ x[self.layout.t])
        return val

    def gradient(self, x):
        g = np.zeros(self.n_x)
        g[self.layout.n] = x[self.layout.n]
        if self.coeffs is not None:
            g[self.layout.t] = self.coeffs
        return g

    def equalities(self, x):
        return kcl_residual(self.model, self.state(x))

    def eq_jacobian(self, x):
        if self._cache_x is None or not np.array_equal(x, self._cache_x):
            self._cache_jac = jacobian(self.model, self.state(x))
            self._cache_x = x.copy()
        return self._cache_jac

    def inequalities(self, x):
        lay = self.layout
        parts = []
        if lay.n_t:
            n, t = x[lay.n], x[lay.t]
            parts += [n - t, -n - t]
        if lay.n_vsq:
            v = x[lay.v_sq]
            parts += [self.vsq_lo - v, v - self.vsq_hi]
        return np.concatenate(parts) if parts else np.zeros(0)

    def ineq_jacobian(self, x):
        return self._ineq_jac

    def lagrangian_hessian(self, x, lam, mu):
        return self._obj_hess + constraint_hessian(self.model, self.state(x), lam)


# --------------------------------------------------------------------------
# Results
# --------------------------------------------------------------------------


@dataclass
class SubproblemRecord:
    kind: str
    coefficients: list[float] | None
    support_size: int
    inner_iterations: int
    status: str
    objective: float


@dataclass
class DiagnosisResult:
    status: str
    mode: str
    bus_ids: np.ndarray
    v_real: np.ndarray
    v_imag: np.ndarray
    n_real: np.ndarray
    n_imag: np.ndarray
    support: list[int]
    v_min: np.ndarray
    v_max: np.ndarray
    violations_before: list[tuple[int, float]] = field(default_factory=list)
    violations_after: list[tuple[int, float]] = field(default_factory=list)
    objective: float = 0.0
    kcl_residual_norm: float = np.inf
    baseline_status: str = ""
    v_baseline: np.ndarray | None = None
    subproblem_history: list[SubproblemRecord] = field(default_factory=list)
    wall_time: dict[str, float] = field(default_factory=dict)
    inner_iterations: int = 0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def v(self) -> np.ndarray:
        return self.v_real + 1j * self.v_imag

    @property
    def v_mag(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def n(self) -> np.ndarray:
        return self.n_real + 1j * self.n_imag

    @property
    def n_inf(self) -> float:
        return float(max(np.max(np.abs(self.n_real)), np.max(np.abs(self.n_imag))))


def bus_support(model: CircuitModel, n: np.ndarray, threshold: float = SUPPORT_THRESHOLD) -> list[int]:
    """Bus ids where any compensation component exceeds ``threshold``."""
    big = np.abs(n) > threshold
    return sorted({int(model.bus_ids[k]) for k in model.comp_bus[big]})


def per_bus_compensation(model: CircuitModel, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nb = model.n_bus
    re = np.zeros(nb)
    im = np.zeros(nb)
    real = model.comp_part == 0
    re[model.comp_bus[real]] = n[real]
    im[model.comp_bus[~real]] = n[~real]
    return re, im


def find_violations(
    model: CircuitModel,
    v: np.ndarray,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
    tol: float = VIOLATION_TOL,
) -> list[tuple[int, float]]:
    """``(bus id, |V|)`` for every bounded bus outside its voltage band.

    Only buses whose magnitude is free are checked; PV and slack magnitudes
    are fixed by setpoints.
    """
    lo, hi = bounds if bounds is not None else (model.v_min, model.v_max)
    lo = np.broadcast_to(lo, (model.n_bus,))
    hi = np.broadcast_to(hi, (model.n_bus,))
    k = model.bounded_bus
    mag = np.abs(v[k])
    bad = (mag < lo[k] - tol) | (mag > hi[k] + tol)
    return [(int(model.bus_ids[j]), float(m)) for j, m in zip(k[bad], mag[bad])]


def _resolve_bounds(model: CircuitModel, bounds) -> tuple[np.ndarray, np.ndarray]:
    if bounds is None:
        return model.v_min.copy(), model.v_max.copy()
    lo, hi = bounds
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (model.n_bus,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (model.n_bus,)).copy()
    if np.any(lo <= 0) or np.any(lo > hi):
        raise ValueError("voltage bounds must satisfy 0 < v_min <= v_max")
    return lo, hi


# --------------------------------------------------------------------------
# Baseline
# --------------------------------------------------------------------------


@dataclass
class BaselineResult:
    v: np.ndarray
    status: str
    violations: list[tuple[int, float]]
    iterations: int


def run_baseline_powerflow(
    model: CircuitModel,
    opts: PowerFlowOptions | None = None,
    bounds=None,
) -> BaselineResult:
    """Plain Newton power flow with no compensation, plus its bound violations."""
    pf = newton_power_flow(model, opts)
    bounds = _resolve_bounds(model, bounds)
    violations = find_violations(model, pf.v, bounds) if pf.converged else []
    return BaselineResult(pf.v, pf.status, violations, pf.iterations)


# --------------------------------------------------------------------------
# Solvers
# --------------------------------------------------------------------------


def _interior_vsq(v: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    return np.clip(np.abs(v) ** 2, lo + 0.05 * span, hi - 0.05 * span)


def _start_vector(
    problem: CompensationProblem,
    prev: StateVector | None,
    absorb: bool = False,
) -> np.ndarray:
    """Map a previous solution (any layout) onto ``problem``'s layout, strictly interior."""
    model, lay = problem.model, problem.layout
    st = model.initial_state(lay)
    if prev is not None:
        pl = prev.layout
        st.x[: lay.n.stop] = prev.x[: pl.n.stop]
    elif absorb:
        # compensation and slack sources absorb the starting mismatch
        r = kcl_residual(model, StateVector(model.layout(), st.x[: lay.n.stop].copy()))
        n_bus = model.n_bus
        st.x[lay.n] = -r[model.comp_part * n_bus + model.comp_bus]
        st.x[lay.i_slack] -= r[[model.slack_bus, n_bus + model.slack_bus]]
    if lay.n_t:
        st.x[lay.t] = np.abs(st.n) + T_MARGIN
    if lay.n_vsq:
        k = model.bounded_bus
        st.x[lay.v_sq] = _interior_vsq(st.v[k], problem.vsq_lo, problem.vsq_hi)
    return st.x


def _run(problem: CompensationProblem, x0: np.ndarray, opts: SolverOptions, lam0=None, warm=False) -> NlpResult:
    if warm:
        opts = with_options(opts, barrier_init=min(opts.barrier_init, WARM_BARRIER))
    return solve_nlp(problem, x0, opts, lambda0=lam0)


def _lambda_for(problem: CompensationProblem, prev: NlpResult | None) -> np.ndarray | None:
    if prev is None or len(prev.kkt.lambda_eq) != problem.n_eq:
        return None
    return prev.kkt.lambda_eq


def _cold_lambda(problem: CompensationProblem, x0: np.ndarray) -> np.ndarray:
    """Multipliers making the ``n`` block of stationarity hold at ``x0``."""
    model, lay = problem.model, problem.layout
    lam = np.zeros(problem.n_eq)
    lam[model.comp_part * model.n_bus + model.comp_bus] = -x0[lay.n]
    return lam


def _cold_run(problem: CompensationProblem, opts: SolverOptions, init_state: StateVector | None = None) -> NlpResult:
    """Start with no compensation; if that stalls, let the sources absorb the mismatch first.

    From ``n = 0, lambda = 0`` the Newton direction is a plain power-flow step,
    which crawls when the grid is far past its loadability limit.
    """
    x0 = _start_vector(problem, init_state)
    res = _run(problem, x0, opts)
    if res.converged or init_state is not None:
        return res
    logger.info("cold start ended with %s; retrying from the absorbed mismatch", res.status)
    x1 = _start_vector(problem, None, absorb=True)
    retry = _run(problem, x1, opts, _cold_lambda(problem, x1))
    retry.iterations += res.iterations
    return retry


def _finish(
    model: CircuitModel,
    mode: str,
    status: str,
    state: StateVector,
    objective: float,
    bounds: tuple[np.ndarray, np.ndarray],
    history: list[SubproblemRecord],
    timings: dict[str, float],
    baseline: BaselineResult | None,
    baseline_v: np.ndarray | None,
    baseline_source: str,
    inner: int,
) -> DiagnosisResult:
    base_lay = model.layout()
    plain = StateVector(base_lay, state.x[: base_lay.size].copy())
    kcl = float(np.max(np.abs(kcl_residual(model, plain)[base_lay.eq_kcl])))
    n_re, n_im = per_bus_compensation(model, plain.n)
    before = find_violations(model, baseline_v, bounds) if baseline_v is not None else []
    return DiagnosisResult(
        status=status,
        mode=mode,
        bus_ids=model.bus_ids.copy(),
        v_real=plain.v_real.copy(),
        v_imag=plain.v_imag.copy(),
        n_real=n_re,
        n_imag=n_im,
        support=bus_support(model, plain.n),
        v_min=bounds[0],
        v_max=bounds[1],
        violations_before=before,
        violations_after=find_violations(model, plain.v, bounds),
        objective=objective,
        kcl_residual_norm=kcl,
        baseline_status=baseline.status if baseline else baseline_source,
        v_baseline=baseline_v,
        subproblem_history=history,
        wall_time=timings,
        inner_iterations=inner,
    )


def _baseline(model, bounds, baseline, timings):
    if baseline is None:
        t0 = time.perf_counter()
        baseline = run_baseline_powerflow(model, bounds=bounds)
        timings["baseline"] = time.perf_counter() - t0
    return baseline


def _dense_phase(model, opts, bounds_arr, with_bounds, init_state=None):
    """Dense subproblem; with bounds, falls back to a bound-relaxation continuation."""
    problem = CompensationProblem(model, None, bounds_arr if with_bounds else None)
    res = _cold_run(problem, opts, init_state)
    if res.converged or not with_bounds:
        return problem, res
    logger.info("bounded dense start stalled (%s); using bound continuation", res.status)
    plain = CompensationProblem(model)
    prev = _cold_run(plain, opts, init_state)
    prev_state = plain.state(prev.x)
    lo, hi = bounds_arr
    for delta in (0.05, 0.04, 0.03, 0.02, 0.01, 0.0):
        relaxed = (np.maximum(lo - delta, 1e-3), hi + delta)
        problem = CompensationProblem(model, None, relaxed)
        res = _run(problem, _start_vector(problem, prev_state), opts, _lambda_for(problem, prev))
        if not res.converged:
            break
        prev, prev_state = res, problem.state(res.x)
    problem = CompensationProblem(model, None, bounds_arr)
    return problem, res


def _sparse_series(
    model: CircuitModel,
    mode: str,
    opts: SolverOptions | None,
    bounds=None,
    baseline: BaselineResult | None = None,
    max_subproblems: int = MAX_SUBPROBLEMS,
    c_high: float = C_HIGH,
    c_low: float = C_LOW,
    support_threshold: float = SUPPORT_THRESHOLD,
) -> DiagnosisResult:
    opts = opts or SolverOptions()
    timings: dict[str, float] = {}
    bounds_arr = _resolve_bounds(model, bounds)
    with_bounds = mode == "vreg"
    baseline = _baseline(model, bounds_arr, baseline, timings)
    history: list[SubproblemRecord] = []
    inner = 0

    t0 = time.perf_counter()
    problem, res = _dense_phase(model, opts, bounds_arr, with_bounds)
    timings["dense"] = time.perf_counter() - t0
    inner += res.iterations
    state = problem.state(res.x)
    history.append(
        SubproblemRecord("dense", None, len(bus_support(model, state.n, support_threshold)), res.iterations, res.status, problem.objective(res.x))
    )
    baseline_v = baseline.v if baseline.status == "converged" else None
    baseline_source = "powerflow"
    if baseline_v is None:
        baseline_source = "dense"
        if with_bounds:
            plain = CompensationProblem(model)
            pres = _cold_run(plain, opts)
            baseline_v = plain.state(pres.x).v
        else:
            baseline_v = state.v

    status = res.status
    objective = problem.objective(res.x)
    if mode == "dense" or not res.converged:
        if not res.converged and with_bounds:
            status = "bounds_infeasible" if find_violations(model, state.v, bounds_arr) else res.status
        return _finish(model, mode, status, state, objective, bounds_arr, history, timings, baseline, baseline_v, baseline_source, inner)

    # every location starts expensive; the dense solution only supplies the warm start
    coeffs = SparsityCoefficients.uniform(len(model.comp_bus), c_high=c_high, c_low=c_low, support_threshold=support_threshold)
    support = bus_support(model, state.n, support_threshold)
    prev_res = res
    t0 = time.perf_counter()
    for _ in range(max_subproblems):
        problem = CompensationProblem(model, coeffs.c, bounds_arr if with_bounds else None)
        x0 = _start_vector(problem, state)
        res = _run(problem, x0, opts, _lambda_for(problem, prev_res), warm=True)
        inner += res.iterations
        if not res.converged:
            logger.info("sparse subproblem ended with %s; retrying from a cold barrier", res.status)
            res = _run(problem, x0, opts, _lambda_for(problem, prev_res))
            inner += res.iterations
        new_state = problem.state(res.x)
        new_support = bus_support(model, new_state.n, support_threshold)
        history.append(
            SubproblemRecord("sparse", coeffs.c.tolist(), len(new_support), res.iterations, res.status, problem.objective(res.x))
        )
        if not res.converged:
            status = res.status
            break
        state, prev_res, objective, status = new_state, res, problem.objective(res.x), res.status
        coeffs = update_coefficients(state.n, coeffs)
        if new_support == support:
            break
        support = new_support
    timings["sparse"] = time.perf_counter() - t0
    if status != "converged" and with_bounds and find_violations(model, state.v, bounds_arr):
        status = "bounds_infeasible"
    return _finish(model, mode, status, state, objective, bounds_arr, history, timings, baseline, baseline_v, baseline_source, inner)


def solve_dense(model: CircuitModel, opts: SolverOptions | None = None, baseline: BaselineResult | None = None) -> DiagnosisResult:
    """Least-squares compensation restoring KCL everywhere (no sparsity, no bounds)."""
    return _sparse_series(model, "dense", opts, baseline=baseline)


def solve_sparse(model: CircuitModel, opts: SolverOptions | None = None, baseline: BaselineResult | None = None, **kw) -> DiagnosisResult:
    """Sparse compensation restoring KCL, via coefficient-toggled subproblems."""
    return _sparse_series(model, "sparse", opts, baseline=baseline, **kw)


def solve_vreg(
    model: CircuitModel,
    bounds=None,
    opts: SolverOptions | None = None,
    baseline: BaselineResult | None = None,
    **kw,
) -> DiagnosisResult:
    """Sparse compensation restoring KCL and keeping every free bus inside its voltage band.

    ``bounds`` is ``(v_min, v_max)`` as scalars or per-bus arrays; ``None``
    uses the case's bounds.
    """
    return _sparse_series(model, "vreg", opts, bounds=bounds, baseline=baseline, **kw)


MODES = ("powerflow", "dense", "sparse", "vreg")


def diagnose(model: CircuitModel, mode: str, opts: SolverOptions | None = None, bounds=None, **kw) -> DiagnosisResult:
    """Dispatch on ``mode``; ``powerflow`` wraps the baseline in a result."""
    if mode == "dense":
        return solve_dense(model, opts)
    if mode == "sparse":
        return solve_sparse(model, opts, **kw)
    if mode == "vreg":
        return solve_vreg(model, bounds, opts, **kw)
    if mode != "powerflow":
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    bounds_arr = _resolve_bounds(model, bounds)
    t0 = time.perf_counter()
    pf = newton_power_flow(model)
    elapsed = time.perf_counter() - t0
    status = "converged" if pf.converged else "diverged"
    return _finish(
        model, "powerflow", status, pf.state, 0.0, bounds_arr, [], {"baseline": elapsed},
        BaselineResult(pf.v, pf.status, [], pf.iterations),
        pf.v if pf.converged else None, "powerflow", pf.iterations,
    )
