"""Independent verification engines.

These share the case parser and the circuit model with the solvers but never
touch the interior-point engine, so a defect there cannot certify itself.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.sparse.linalg as spla

from voltdiag.network_model import (
    CircuitModel,
    SingularVoltageError,
    StateVector,
    jacobian,
    kcl_residual,
)

logger = logging.getLogger(__name__)

MAX_ENUM_BUSES = 6


@dataclass
class PowerFlowOptions:
    tol: float = 1e-10
    max_iter: int = 30
    # |V| outside this band is treated as divergence
    v_blowup: tuple[float, float] = (1e-3, 10.0)


@dataclass
class PowerFlowResult:
    state: StateVector
    status: str
    iterations: int
    residual_norm: float
    history: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def v(self) -> np.ndarray:
        return self.state.v


@dataclass
class OracleReport:
    kind: str
    verdict: bool
    details: dict = field(default_factory=dict)


def newton_power_flow(
    model: CircuitModel,
    opts: PowerFlowOptions | None = None,
    init: StateVector | None = None,
) -> PowerFlowResult:
    """Plain full-step Newton-Raphson on ``g(v) = 0`` with every ``n`` held at zero."""
    opts = opts or PowerFlowOptions()
    lay = model.layout()
    state = init.copy() if init is not None else model.initial_state(lay)
    state.x[lay.n] = 0.0
    free = np.r_[0 : lay.n.start]
    history = []
    status = "max_iter"
    it = 0
    for it in range(opts.max_iter + 1):
        try:
            res = kcl_residual(model, state)
        except SingularVoltageError:
            status = "diverged"
            break
        norm = float(np.max(np.abs(res)))
        history.append(norm)
        if not np.isfinite(norm):
            status = "diverged"
            break
        if norm < opts.tol:
            status = "converged"
            break
        if it == opts.max_iter:
            break
        jac = jacobian(model, state)[:, free].tocsc()
        try:
            with np.errstate(divide="raise", invalid="raise"):
                dx = spla.spsolve(jac, -res)
        except (RuntimeError, FloatingPointError):
            status = "diverged"
            break
        if not np.all(np.isfinite(dx)):
            status = "diverged"
            break
        state.x[free] += dx
        vmag = np.abs(state.v)
        if vmag.min() < opts.v_blowup[0] or vmag.max() > opts.v_blowup[1]:
            status = "diverged"
            break
    if status == "max_iter":
        status = "diverged"
    return PowerFlowResult(state, status, it, history[-1] if history else np.inf, history)


def finite_diff_jacobian(model: CircuitModel, state: StateVector, step: float = 1e-7) -> np.ndarray:
    """Central-difference Jacobian of :func:`kcl_residual`; dense, for tests only."""
    x0 = state.x
    cols = []
    for j in range(len(x0)):
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += step
        xm[j] -= step
        rp = kcl_residual(model, StateVector(state.layout, xp))
        rm = kcl_residual(model, StateVector(state.layout, xm))
        cols.append((rp - rm) / (2 * step))
    return np.column_stack(cols)


def jacobian_check(model: CircuitModel, state: StateVector, step: float = 1e-7, rtol: float = 1e-5) -> OracleReport:
    analytic = jacobian(model, state).toarray()
    fd = finite_diff_jacobian(model, state, step)
    scale = np.maximum(np.abs(analytic), 1.0)
    err = float(np.max(np.abs(analytic - fd) / scale))
    return OracleReport("jacobian_fd", err < rtol, {"max_rel_error": err, "step": step})


# --------------------------------------------------------------------------
# Support enumeration
# --------------------------------------------------------------------------


@dataclass
class SupportSolution:
    support: tuple[int, ...]
    feasible: bool
    objective: float
    n: np.ndarray | None = None


def restricted_dense_solve(
    model: CircuitModel,
    support: tuple[int, ...],
    bounds: bool = False,
    init: StateVector | None = None,
    tol: float = 1e-8,
) -> SupportSolution:
    """Minimize ``0.5*||n||^2`` with compensation allowed only on ``support``.

    ``support`` holds compensation component indices. Solved with SciPy's
    SLSQP on the same residual, so it is independent of the interior-point
    engine. With ``bounds`` the squared magnitude of every bounded bus is
    kept inside ``[v_min^2, v_max^2]``.
    """
    lay = model.layout()
    base = init.copy() if init is not None else model.initial_state(lay)
    base.x[lay.n] = 0.0
    support = tuple(support)
    n_idx = np.array([lay.n.start + c for c in support], dtype=np.int64)
    free = np.concatenate([np.arange(lay.n.start), n_idx])

    def unpack(z):
        st = base.copy()
        st.x[free] = z
        return st

    def eq(z):
        return kcl_residual(model, unpack(z))

    def eq_jac(z):
        return jacobian(model, unpack(z))[:, free].toarray()

    def obj(z):
        nz = z[lay.n.start :]
        return 0.5 * float(nz @ nz)

    def obj_grad(z):
        g = np.zeros_like(z)
        g[lay.n.start :] = z[lay.n.start :]
        return g

    constraints = [{"type": "eq", "fun": eq, "jac": eq_jac}]
    if bounds:
        k = model.bounded_bus
        lo, hi = model.v_min[k] ** 2, model.v_max[k] ** 2
        vr, vi = k, k + model.n_bus

        def ineq(z):
            m = z[vr] ** 2 + z[vi] ** 2
            return np.concatenate([m - lo, hi - m])

        def ineq_jac(z):
            jac = np.zeros((2 * len(k), len(z)))
            rows = np.arange(len(k))
            jac[rows, vr] = 2 * z[vr]
            jac[rows, vi] = 2 * z[vi]
            jac[len(k) + rows, vr] = -2 * z[vr]
            jac[len(k) + rows, vi] = -2 * z[vi]
            return jac

        constraints.append({"type": "ineq", "fun": ineq, "jac": ineq_jac})

    z0 = base.x[free]
    sol = scipy.optimize.minimize(
        obj,
        z0,
        jac=obj_grad,
        constraints=constraints,
        method="SLSQP",
        options={"maxiter": 200, "ftol": 1e-14},
    )
    st = unpack(sol.x)
    feas = float(np.max(np.abs(kcl_residual(model, st))))
    ok = feas < tol
    if bounds and ok:
        k = model.bounded_bus
        mag = np.abs(st.v[k])
        ok = bool(np.all(mag >= model.v_min[k] - 1e-6) and np.all(mag <= model.v_max[k] + 1e-6))
    return SupportSolution(support, bool(ok), obj(sol.x) if ok else np.inf, st.n.copy())


def enumerate_supports(
    model: CircuitModel,
    max_card: int,
    bounds: bool = False,
) -> dict[int, SupportSolution]:
    """Best restricted dense solution for each support cardinality ``0..max_card``.

    Supports range over compensation components. The frontier is made
    monotone by carrying forward the best smaller support: a support of size
    ``k`` may leave components at zero, so it can never be worse.
    """
    if model.n_bus > MAX_ENUM_BUSES:
        raise ValueError(
            f"support enumeration is limited to {MAX_ENUM_BUSES} buses, model has {model.n_bus}"
        )
    n_comp = len(model.comp_bus)
    frontier: dict[int, SupportSolution] = {}
    best: SupportSolution | None = None
    for card in range(0, min(max_card, n_comp) + 1):
        for support in itertools.combinations(range(n_comp), card):
            sol = restricted_dense_solve(model, support, bounds=bounds)
            if sol.feasible and (best is None or sol.objective < best.objective - 1e-12):
                best = sol
        if best is not None:
            frontier[card] = best
    return frontier
