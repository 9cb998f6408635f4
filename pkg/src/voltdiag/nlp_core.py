"""Primal-dual interior-point engine for equality and inequality constrained NLPs.

Problems have the form::

    min f(x)   s.t.   h(x) = 0,   c(x) <= 0

Inequalities are carried in slack form ``c(x) + s = 0`` with ``s > 0``. The
perturbed KKT conditions at barrier ``beta`` are::

    grad f + Jh^T lam + Jc^T mu = 0
    h(x) = 0
    c(x) + s = 0
    mu * s - beta = 0

and are solved by Newton's method with fraction-to-boundary, voltage step
limiting and residual-based damping. ``beta`` follows a monotone schedule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)


class NotInteriorError(ValueError):
    """Raised when an iterate has a non-positive slack or inequality dual."""


class StepFailure(RuntimeError):
    """The Newton system could not be factorized even after regularization."""


@dataclass(frozen=True)
class SolverOptions:
    tol_feas: float = 1e-6
    tol_opt: float = 1e-6
    max_newton_iters: int = 200
    barrier_init: float = 1e-1
    barrier_shrink: float = 0.2
    barrier_floor: float = 1e-9
    step_fraction_to_boundary: float = 0.995
    v_step_cap: float = 0.1
    damping_factor: float = 0.7
    max_damping_retries: int = 8

    def __post_init__(self):
        for name in (
            "tol_feas",
            "tol_opt",
            "max_newton_iters",
            "barrier_init",
            "barrier_floor",
            "v_step_cap",
            "damping_factor",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_damping_retries < 0:
            raise ValueError("max_damping_retries must be non-negative")
        if not 0 < self.barrier_shrink < 1:
            raise ValueError("barrier_shrink must lie in (0, 1)")
        if not 0 < self.step_fraction_to_boundary < 1:
            raise ValueError("step_fraction_to_boundary must lie in (0, 1)")
        if not 0 < self.damping_factor < 1:
            raise ValueError("damping_factor must lie in (0, 1)")


class NlpProblem:
    """Interface consumed by :func:`solve_nlp`.

    Subclasses provide sizes, the objective with its gradient, constraint
    values and sparse Jacobians, and the Hessian of the Lagrangian
    ``f + lam.h + mu.c``. ``voltage_index`` lists the variables subject to
    the voltage step cap.
    """

    n_x: int
    n_eq: int
    n_ineq: int
    voltage_index: np.ndarray = np.zeros(0, dtype=np.int64)

    def objective(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def equalities(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def eq_jacobian(self, x: np.ndarray) -> sp.spmatrix:
        raise NotImplementedError

    def inequalities(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(0)

    def ineq_jacobian(self, x: np.ndarray) -> sp.spmatrix:
        return sp.csr_matrix((0, self.n_x))

    def lagrangian_hessian(self, x: np.ndarray, lam: np.ndarray, mu: np.ndarray) -> sp.spmatrix:
        raise NotImplementedError


@dataclass
class FunctionProblem(NlpProblem):
    """An :class:`NlpProblem` assembled from plain callables (handy for small tests)."""

    n_x: int
    f: Callable
    grad: Callable
    hess: Callable
    h: Callable | None = None
    h_jac: Callable | None = None
    h_hess: Callable | None = None
    c: Callable | None = None
    c_jac: Callable | None = None
    c_hess: Callable | None = None
    n_eq: int = 0
    n_ineq: int = 0
    voltage_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def objective(self, x):
        return float(self.f(x))

    def gradient(self, x):
        return np.asarray(self.grad(x), dtype=float)

    def equalities(self, x):
        return np.asarray(self.h(x), dtype=float) if self.h else np.zeros(0)

    def eq_jacobian(self, x):
        return sp.csr_matrix(self.h_jac(x)) if self.h_jac else sp.csr_matrix((0, self.n_x))

    def inequalities(self, x):
        return np.asarray(self.c(x), dtype=float) if self.c else np.zeros(0)

    def ineq_jacobian(self, x):
        return sp.csr_matrix(self.c_jac(x)) if self.c_jac else sp.csr_matrix((0, self.n_x))

    def lagrangian_hessian(self, x, lam, mu):
        hess = sp.csr_matrix(self.hess(x))
        if self.h_hess is not None and len(lam):
            hess = hess + sp.csr_matrix(self.h_hess(x, lam))
        if self.c_hess is not None and len(mu):
            hess = hess + sp.csr_matrix(self.c_hess(x, mu))
        return hess


@dataclass
class KktSystem:
    """Primal-dual iterate."""

    primal: np.ndarray
    lambda_eq: np.ndarray
    mu_ineq: np.ndarray
    s_ineq: np.ndarray
    barrier: float

    def copy(self) -> KktSystem:
        return KktSystem(
            self.primal.copy(),
            self.lambda_eq.copy(),
            self.mu_ineq.copy(),
            self.s_ineq.copy(),
            self.barrier,
        )

    def check_interior(self) -> None:
        if np.any(self.s_ineq <= 0) or np.any(self.mu_ineq <= 0):
            raise NotInteriorError("inequality slacks and duals must be strictly positive")

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.primal, self.lambda_eq, self.s_ineq, self.mu_ineq])


@dataclass
class KktResidual:
    stationarity: np.ndarray
    equality: np.ndarray
    inequality: np.ndarray
    complementarity: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.stationarity, self.equality, self.inequality, self.complementarity])

    @property
    def primal(self) -> float:
        return _infnorm(self.equality, self.inequality)

    @property
    def dual(self) -> float:
        return _infnorm(self.stationarity)

    @property
    def comp(self) -> float:
        return _infnorm(self.complementarity)

    @property
    def merit(self) -> float:
        return float(np.linalg.norm(self.vector))


def _infnorm(*arrays) -> float:
    return max((float(np.max(np.abs(a))) for a in arrays if len(a)), default=0.0)


@dataclass
class IterationRecord:
    primal: float
    dual: float
    comp: float
    merit: float
    step_norm: float
    barrier: float
    alpha: float
    damping_retries: int
    damping_failed: bool = False
    regularization: float = 0.0


@dataclass
class IterationLog:
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, rec: IterationRecord) -> None:
        self.records.append(rec)


# --------------------------------------------------------------------------
# KKT assembly and Newton step
# --------------------------------------------------------------------------


def kkt_residual(problem: NlpProblem, it: KktSystem) -> KktResidual:
    x = it.primal
    grad = problem.gradient(x)
    if problem.n_eq:
        grad = grad + problem.eq_jacobian(x).T @ it.lambda_eq
    if problem.n_ineq:
        grad = grad + problem.ineq_jacobian(x).T @ it.mu_ineq
    return KktResidual(
        stationarity=grad,
        equality=problem.equalities(x),
        inequality=problem.inequalities(x) + it.s_ineq,
        complementarity=it.mu_ineq * it.s_ineq - it.barrier,
    )


def assemble_kkt(problem: NlpProblem, it: KktSystem) -> tuple[np.ndarray, sp.csc_matrix]:
    """Residual and exact Newton matrix of the perturbed KKT conditions.

    Unknown order is ``(x, lam, s, mu)``; the residual rows follow the same
    blocks (stationarity, equality, slacked inequality, complementarity).
    """
    it.check_interior()
    x = it.primal
    n_x, n_eq, n_in = problem.n_x, problem.n_eq, problem.n_ineq
    res = kkt_residual(problem, it)
    hess = problem.lagrangian_hessian(x, it.lambda_eq, it.mu_ineq)
    a_eq = problem.eq_jacobian(x) if n_eq else sp.csr_matrix((0, n_x))
    a_in = problem.ineq_jacobian(x) if n_in else sp.csr_matrix((0, n_x))
    eye = sp.identity(n_in, format="csr")
    mat = sp.bmat(
        [
            [hess, a_eq.T, None, a_in.T],
            [a_eq, sp.csr_matrix((n_eq, n_eq)), None, None],
            [a_in, None, eye, None],
            [None, None, sp.diags(it.mu_ineq), sp.diags(it.s_ineq)],
        ],
        format="csc",
    )
    return res.vector, mat


def _regularize(mat: sp.csc_matrix, n_x: int, n_eq: int, delta: float) -> sp.csc_matrix:
    n = mat.shape[0]
    diag = np.zeros(n)
    diag[:n_x] = delta
    diag[n_x : n_x + n_eq] = -delta
    return (mat + sp.diags(diag)).tocsc()


def _factor_solve(mat: sp.csc_matrix, rhs: np.ndarray, n_x: int, n_eq: int, permc_spec: str,
                  reg_start: float, reg_max: float) -> tuple[np.ndarray, float]:
    delta = 0.0
    while True:
        try:
            trial = mat if delta == 0 else _regularize(mat, n_x, n_eq, delta)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                d = spla.splu(trial, permc_spec=permc_spec).solve(rhs)
            if np.all(np.isfinite(d)):
                return d, delta
        except RuntimeError:
            pass
        delta = reg_start if delta == 0 else 2 * delta
        if delta > reg_max:
            raise StepFailure("KKT matrix singular beyond regularization limit")


def newton_step(
    residual: np.ndarray,
    matrix: sp.spmatrix,
    n_x: int | None = None,
    n_eq: int = 0,
    reg_start: float = 1e-8,
    reg_max: float = 1e-2,
) -> tuple[np.ndarray, float]:
    """Solve ``matrix @ d = -residual``; returns ``(d, regularization_used)``.

    On a singular factorization a ``+delta`` shift is added to the first
    ``n_x`` diagonal entries and ``-delta`` to the next ``n_eq``, doubling
    ``delta`` up to ``reg_max``.
    """
    mat = sp.csc_matrix(matrix)
    n_x = mat.shape[0] if n_x is None else n_x
    return _factor_solve(mat, -residual, n_x, n_eq, "COLAMD", reg_start, reg_max)


def reduced_newton_step(
    problem: NlpProblem,
    it: KktSystem,
    res: KktResidual,
    reg_start: float = 1e-8,
    reg_max: float = 1e-2,
) -> tuple[np.ndarray, float]:
    """Same direction as :func:`newton_step` on :func:`assemble_kkt`, computed
    by eliminating the slack and inequality-dual blocks first.

    The factorized ``(x, lam)`` system is a third smaller than the full one
    once the ``t`` and ``v_sq`` bounds are present.
    """
    it.check_interior()
    x = it.primal
    s, mu = it.s_ineq, it.mu_ineq
    r1, r2, r3, r4 = res.stationarity, res.equality, res.inequality, res.complementarity
    hess = problem.lagrangian_hessian(x, it.lambda_eq, mu)
    a_eq = problem.eq_jacobian(x)
    rhs_x = -r1
    if problem.n_ineq:
        a_in = sp.csr_matrix(problem.ineq_jacobian(x))
        hess = hess + a_in.T @ sp.diags(mu / s) @ a_in
        rhs_x = rhs_x - a_in.T @ ((mu * r3 - r4) / s)
    mat = sp.bmat([[hess, a_eq.T], [a_eq, None]], format="csc")
    d, reg = _factor_solve(
        mat, np.concatenate([rhs_x, -r2]), problem.n_x, problem.n_eq, "COLAMD", reg_start, reg_max
    )
    dx = d[: problem.n_x]
    if problem.n_ineq:
        cdx = a_in @ dx
        ds = -r3 - cdx
        dmu = (mu * (r3 + cdx) - r4) / s
    else:
        ds = dmu = np.zeros(0)
    return np.concatenate([d, ds, dmu]), reg


def _split(d: np.ndarray, problem: NlpProblem):
    n_x, n_eq, n_in = problem.n_x, problem.n_eq, problem.n_ineq
    i = n_x
    dx = d[:i]
    dlam = d[i : i + n_eq]
    i += n_eq
    ds = d[i : i + n_in]
    dmu = d[i + n_in : i + 2 * n_in]
    return dx, dlam, ds, dmu


def fraction_to_boundary(values: np.ndarray, delta: np.ndarray, tau: float) -> float:
    """Largest ``alpha <= 1`` keeping ``values + alpha*delta >= (1 - tau) * values``."""
    neg = delta < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * values[neg] / delta[neg])))


def apply_limits(direction: np.ndarray, iterate: KktSystem, opts: SolverOptions, problem: NlpProblem) -> float:
    """Scale factor for ``direction`` from fraction-to-boundary and voltage limiting.

    Damping on residual increase is applied afterwards by :func:`solve_nlp`.
    """
    dx, _, ds, dmu = _split(direction, problem)
    tau = opts.step_fraction_to_boundary
    alpha = min(
        fraction_to_boundary(iterate.s_ineq, ds, tau),
        fraction_to_boundary(iterate.mu_ineq, dmu, tau),
    )
    vidx = problem.voltage_index
    if len(vidx):
        biggest = float(np.max(np.abs(dx[vidx])))
        if biggest * alpha > opts.v_step_cap:
            alpha = opts.v_step_cap / biggest
    return alpha


def _take(it: KktSystem, direction: np.ndarray, alpha: float, problem: NlpProblem) -> KktSystem:
    dx, dlam, ds, dmu = _split(direction, problem)
    return KktSystem(
        it.primal + alpha * dx,
        it.lambda_eq + alpha * dlam,
        it.mu_ineq + alpha * dmu,
        it.s_ineq + alpha * ds,
        it.barrier,
    )


# --------------------------------------------------------------------------
# Driver
# --------------------------------------------------------------------------


@dataclass
class NlpResult:
    kkt: KktSystem
    log: IterationLog
    status: str
    iterations: int

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def x(self) -> np.ndarray:
        return self.kkt.primal


def initial_iterate(
    problem: NlpProblem,
    x0: np.ndarray,
    opts: SolverOptions,
    lambda0: np.ndarray | None = None,
) -> KktSystem:
    """Build a strictly interior iterate around ``x0``.

    Slacks take ``-c(x0)`` where that is positive, so linear inequalities
    start (and stay) satisfied; elsewhere they fall back to
    ``sqrt(barrier_init)``. Duals start centred, ``mu = barrier / s``,
    clipped to ``[1e-4, 1e4]``.
    """
    x0 = np.asarray(x0, dtype=float).copy()
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial point must be finite")
    beta = opts.barrier_init
    c = problem.inequalities(x0)
    s = np.where(-c > 1e-10, -c, np.sqrt(beta))
    mu = np.clip(beta / s, 1e-4, 1e4)
    lam = np.zeros(problem.n_eq) if lambda0 is None else np.asarray(lambda0, dtype=float).copy()
    return KktSystem(x0, lam, mu, s, beta)


def _stage_done(res: KktResidual, beta: float, opts: SolverOptions) -> bool:
    return max(res.primal, res.dual, res.comp) <= 10 * beta


def _final_done(res: KktResidual, it: KktSystem, opts: SolverOptions, has_ineq: bool) -> bool:
    if res.primal > opts.tol_feas or res.dual > opts.tol_opt:
        return False
    if not has_ineq:
        return True
    return it.barrier <= opts.barrier_floor and float(np.max(it.mu_ineq * it.s_ineq)) <= 10 * opts.barrier_floor


def solve_nlp(
    problem: NlpProblem,
    init: np.ndarray | KktSystem,
    opts: SolverOptions | None = None,
    lambda0: np.ndarray | None = None,
    callback: Callable[[KktSystem], None] | None = None,
) -> NlpResult:
    """Run the barrier schedule with damped Newton steps.

    Returns the final iterate, the per-iteration log and a status out of
    ``converged``, ``max_iter`` (best iterate returned) and
    ``numerical_failure``. ``callback`` sees every accepted iterate.
    """
    opts = opts or SolverOptions()
    it = init.copy() if isinstance(init, KktSystem) else initial_iterate(problem, init, opts, lambda0)
    it.check_interior()
    has_ineq = problem.n_ineq > 0
    if not has_ineq:
        it.barrier = 0.0
    log = IterationLog()
    res = kkt_residual(problem, it)
    best, best_score = it.copy(), max(res.primal, res.dual)
    status = "max_iter"

    for k in range(opts.max_newton_iters + 1):
        # advance the barrier while the current stage is solved
        while has_ineq and it.barrier > opts.barrier_floor and _stage_done(res, it.barrier, opts):
            it.barrier = max(opts.barrier_floor, it.barrier * opts.barrier_shrink)
            res = kkt_residual(problem, it)
        if _final_done(res, it, opts, has_ineq):
            status = "converged"
            break
        if k == opts.max_newton_iters:
            break

        try:
            direction, reg = reduced_newton_step(problem, it, res)
        except StepFailure:
            logger.debug("Newton step failed at iteration %d", k)
            status = "numerical_failure"
            break

        alpha = apply_limits(direction, it, opts, problem)
        merit0 = res.merit
        retries = 0
        failed = False
        while True:
            trial = _take(it, direction, alpha, problem)
            try:
                with np.errstate(all="ignore"):
                    trial_res = kkt_residual(problem, trial)
                finite = bool(np.isfinite(trial_res.merit))
            except ArithmeticError:
                trial_res, finite = None, False
            if finite and trial_res.merit <= merit0:
                break
            if retries == opts.max_damping_retries:
                failed = True
                break
            alpha *= opts.damping_factor
            retries += 1
        if not finite:
            status = "numerical_failure"
            break

        trial.check_interior()
        it, res = trial, trial_res
        if callback is not None:
            callback(it)
        log.append(
            IterationRecord(
                primal=res.primal,
                dual=res.dual,
                comp=res.comp,
                merit=res.merit,
                step_norm=float(alpha * np.linalg.norm(direction)),
                barrier=it.barrier,
                alpha=alpha,
                damping_retries=retries,
                damping_failed=failed,
                regularization=reg,
            )
        )
        score = max(res.primal, res.dual)
        if score < best_score:
            best, best_score = it.copy(), score

    if status == "max_iter":
        it = best
    return NlpResult(it, log, status, len(log))


def with_options(opts: SolverOptions | None, **changes) -> SolverOptions:
    return replace(opts or SolverOptions(), **changes)
