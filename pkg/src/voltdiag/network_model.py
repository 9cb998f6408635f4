"""Current-injection network model in Cartesian voltage coordinates.

Every bus contributes two KCL rows (real and imaginary current balance)::

    g_k(v) = I_gen,k + I_slack,k - (Y v)_k - I_load,k
    residual_k = g_k(v) + n_k

Sign convention: generator, slack and compensation currents are injections
(positive into the bus); line, shunt and load currents leave the bus. A
compensation ``n_k`` therefore acts like a small generator current source.

Beyond KCL the equality system carries one magnitude row per PV generator
(``|V|^2 - v_set^2``), two rows pinning the slack voltage and, when squared
magnitudes are part of the layout, one row ``|V|^2 - v_sq`` per bounded bus.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from voltdiag import stamps
from voltdiag.case_io import BusType, NetworkCase

PLACEMENTS = ("all_non_slack", "pq_only")


class SingularVoltageError(ArithmeticError):
    """A device saw a zero bus voltage."""


def pq_injection_current(p, q, v_real, v_imag):
    """Current drawn by a constant-power load ``p + jq`` at voltage ``v``.

    Works on scalars or arrays. ``V * conj(I) == p + jq`` holds exactly in
    exact arithmetic.
    """
    a = np.asarray(v_real, dtype=float)
    b = np.asarray(v_imag, dtype=float)
    if np.any(a * a + b * b == 0):
        raise SingularVoltageError("zero voltage magnitude at a constant-power device")
    ir, ii = stamps.currents(
        np.asarray(p, dtype=float), np.asarray(q, dtype=float), a, b
    )
    if ir.ndim == 0:
        return float(ir), float(ii)
    return ir, ii


@dataclass(frozen=True)
class VariableLayout:
    """Flat index map of the unknowns.

    Order: ``v_real | v_imag | q_gen | i_slack(2) | n | t | v_sq``.
    ``t`` and ``v_sq`` are empty unless the problem uses them.
    """

    n_bus: int
    n_pv: int
    n_comp: int
    with_t: bool = False
    n_vsq: int = 0

    @property
    def n_t(self) -> int:
        return self.n_comp if self.with_t else 0

    def _span(self, start: int, length: int) -> slice:
        return slice(start, start + length)

    @property
    def v_real(self) -> slice:
        return self._span(0, self.n_bus)

    @property
    def v_imag(self) -> slice:
        return self._span(self.n_bus, self.n_bus)

    @property
    def voltages(self) -> slice:
        return self._span(0, 2 * self.n_bus)

    @property
    def q_gen(self) -> slice:
        return self._span(2 * self.n_bus, self.n_pv)

    @property
    def i_slack(self) -> slice:
        return self._span(2 * self.n_bus + self.n_pv, 2)

    @property
    def n(self) -> slice:
        return self._span(2 * self.n_bus + self.n_pv + 2, self.n_comp)

    @property
    def t(self) -> slice:
        return self._span(self.n.stop, self.n_t)

    @property
    def v_sq(self) -> slice:
        return self._span(self.t.stop, self.n_vsq)

    @property
    def size(self) -> int:
        return self.v_sq.stop

    # equality rows
    @property
    def n_eq(self) -> int:
        return 2 * self.n_bus + self.n_pv + 2 + self.n_vsq

    @property
    def eq_kcl(self) -> slice:
        return self._span(0, 2 * self.n_bus)

    @property
    def eq_pv(self) -> slice:
        return self._span(2 * self.n_bus, self.n_pv)

    @property
    def eq_slack(self) -> slice:
        return self._span(2 * self.n_bus + self.n_pv, 2)

    @property
    def eq_vsq(self) -> slice:
        return self._span(2 * self.n_bus + self.n_pv + 2, self.n_vsq)


class StateVector:
    """Primal unknowns as one flat array with named views into it."""

    __slots__ = ("layout", "x")

    def __init__(self, layout: VariableLayout, x: np.ndarray | None = None):
        self.layout = layout
        if x is None:
            x = np.zeros(layout.size)
        x = np.asarray(x, dtype=float)
        if x.shape != (layout.size,):
            raise ValueError(f"state has shape {x.shape}, layout needs ({layout.size},)")
        self.x = x

    def copy(self) -> StateVector:
        return StateVector(self.layout, self.x.copy())

    def __getattr__(self, name):
        # v_real, v_imag, q_gen, i_slack, n, t, v_sq
        if name in ("v_real", "v_imag", "q_gen", "i_slack", "n", "t", "v_sq"):
            return self.x[getattr(self.layout, name)]
        raise AttributeError(name)

    @property
    def v(self) -> np.ndarray:
        return self.v_real + 1j * self.v_imag


class _Pattern:
    """Fixed sparsity pattern; duplicate (row, col) entries are summed."""

    def __init__(self, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]):
        self.shape = shape
        key = rows.astype(np.int64) * shape[1] + cols
        uniq, self.slot = np.unique(key, return_inverse=True)
        self.indices = (uniq % shape[1]).astype(np.int32)
        counts = np.bincount(uniq // shape[1], minlength=shape[0])
        self.indptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int32)
        self.n_entries = len(rows)

    def assemble(self, values: np.ndarray) -> sp.csr_matrix:
        if len(values) != self.n_entries:
            raise ValueError("entry count does not match the cached pattern")
        data = stamps.scatter_add(self.slot, values, len(self.indices))
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


@dataclass(eq=False)
class CircuitModel:
    """Indexed stamps of a :class:`NetworkCase`; read-only after construction."""

    case: NetworkCase
    bus_ids: np.ndarray
    y_lin: sp.csr_matrix
    pq_bus: np.ndarray
    pq_p: np.ndarray
    pq_q: np.ndarray
    pv_bus: np.ndarray
    pv_p: np.ndarray
    pv_vset: np.ndarray
    slack_bus: int
    slack_v: complex
    comp_bus: np.ndarray
    comp_part: np.ndarray
    bounded_bus: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    placement: str = "all_non_slack"
    _patterns: dict = field(default_factory=dict, repr=False)

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {int(b): k for k, b in enumerate(self.bus_ids)}

    @cached_property
    def y_real(self) -> sp.csr_matrix:
        g, b = self.y_lin.real, self.y_lin.imag
        return sp.bmat([[g, -b], [b, g]], format="csr")

    @property
    def pq_devices(self) -> list[tuple[int, float, float]]:
        return [
            (int(self.bus_ids[k]), float(p), float(q))
            for k, p, q in zip(self.pq_bus, self.pq_p, self.pq_q)
        ]

    @property
    def pv_devices(self) -> list[tuple[int, float, float]]:
        return [
            (int(self.bus_ids[k]), float(p), float(v))
            for k, p, v in zip(self.pv_bus, self.pv_p, self.pv_vset)
        ]

    @property
    def slack(self) -> tuple[int, float, float]:
        return int(self.bus_ids[self.slack_bus]), self.slack_v.real, self.slack_v.imag

    @property
    def comp_buses(self) -> np.ndarray:
        """Bus indices that carry at least one compensation component."""
        return np.unique(self.comp_bus)

    def layout(self, sparse: bool = False, vreg: bool = False) -> VariableLayout:
        return VariableLayout(
            n_bus=self.n_bus,
            n_pv=len(self.pv_bus),
            n_comp=len(self.comp_bus),
            with_t=sparse,
            n_vsq=len(self.bounded_bus) if vreg else 0,
        )

    def initial_state(self, layout: VariableLayout, flat: bool = False) -> StateVector:
        """Starting point with no compensation.

        By default buses start at the case's stored voltages (as MATPOWER
        does); ``flat`` puts PQ buses at 1 pu instead. PV buses always start
        at their setpoint magnitude and the slack bus at its pinned value.
        """
        st = StateVector(layout)
        if flat:
            mag = np.ones(self.n_bus)
            ang = np.full(self.n_bus, np.angle(self.slack_v))
        else:
            mag = np.array([b.v_mag_init for b in self.case.buses])
            ang = np.array([b.v_ang_init for b in self.case.buses])
        mag[self.pv_bus] = self.pv_vset
        v = mag * np.exp(1j * ang)
        v[self.slack_bus] = self.slack_v
        st.x[layout.v_real] = v.real
        st.x[layout.v_imag] = v.imag
        if layout.n_vsq:
            st.x[layout.v_sq] = np.abs(v[self.bounded_bus]) ** 2
        return st

    def pattern(self, key, builder) -> _Pattern:
        if key not in self._patterns:
            self._patterns[key] = builder()
        return self._patterns[key]


def _branch_admittance(case: NetworkCase, index: dict[int, int]) -> sp.csr_matrix:
    n = len(case.buses)
    rows, cols, vals = [], [], []
    for br in case.branches:
        f, t = index[br.from_bus], index[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        ytt = ys + 0.5j * br.b_charging
        tap = br.tap * np.exp(1j * br.shift)
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [ytt / (tap * tap.conjugate()), -ys / tap.conjugate(), -ys / tap, ytt]
    for k, bus in enumerate(case.buses):
        if bus.g_shunt or bus.b_shunt:
            rows.append(k)
            cols.append(k)
            vals.append(complex(bus.g_shunt, bus.b_shunt))
    return sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()


def build_model(
    case: NetworkCase,
    compensation_placement: str = "all_non_slack",
    reactive_only: bool = False,
) -> CircuitModel:
    """Stamp lines, shunts and devices of ``case`` into a :class:`CircuitModel`.

    A PV-type bus without an in-service generator is treated as PQ; a
    generator on a PQ-type bus enters as a negative constant-power load.
    ``reactive_only`` drops the real part of every compensation current.
    """
    if compensation_placement not in PLACEMENTS:
        raise ValueError(f"placement must be one of {PLACEMENTS}, got {compensation_placement!r}")
    index = {b.id: k for k, b in enumerate(case.buses)}
    n = len(case.buses)
    gens = {g.bus: g for g in case.gens}

    slack = case.slack_bus
    slack_k = index[slack.id]
    slack_mag = gens[slack.id].v_set if slack.id in gens else slack.v_mag_init
    slack_v = complex(slack_mag * np.exp(1j * slack.v_ang_init))

    p_load = np.array([b.p_demand for b in case.buses])
    q_load = np.array([b.q_demand for b in case.buses])
    pv_bus, pv_p, pv_vset = [], [], []
    for b in case.buses:
        g = gens.get(b.id)
        if b.btype is BusType.PV and g is not None:
            pv_bus.append(index[b.id])
            pv_p.append(g.p_set)
            pv_vset.append(g.v_set)
        elif b.btype is BusType.PQ and g is not None:
            p_load[index[b.id]] -= g.p_set
            q_load[index[b.id]] -= g.q_init
    pv_bus = np.array(pv_bus, dtype=np.int64)
    pq_bus = np.flatnonzero((p_load != 0) | (q_load != 0))

    free = np.ones(n, dtype=bool)
    free[slack_k] = False
    free[pv_bus] = False
    bounded = np.flatnonzero(free)
    if compensation_placement == "all_non_slack":
        comp_at = np.flatnonzero(np.arange(n) != slack_k)
    else:
        comp_at = bounded
    parts = (1,) if reactive_only else (0, 1)
    comp_bus = np.repeat(comp_at, len(parts))
    comp_part = np.tile(np.array(parts, dtype=np.int64), len(comp_at))

    return CircuitModel(
        case=case,
        bus_ids=np.array([b.id for b in case.buses], dtype=np.int64),
        y_lin=_branch_admittance(case, index),
        pq_bus=pq_bus,
        pq_p=p_load[pq_bus],
        pq_q=q_load[pq_bus],
        pv_bus=pv_bus,
        pv_p=np.array(pv_p, dtype=float),
        pv_vset=np.array(pv_vset, dtype=float),
        slack_bus=slack_k,
        slack_v=slack_v,
        comp_bus=comp_bus,
        comp_part=comp_part,
        bounded_bus=bounded,
        v_min=np.array([b.v_min for b in case.buses]),
        v_max=np.array([b.v_max for b in case.buses]),
        placement=compensation_placement,
    )


def _check_devices(a, b, buses):
    if len(buses) and np.any(a[buses] ** 2 + b[buses] ** 2 == 0):
        raise SingularVoltageError("zero voltage magnitude at a constant-power device")


def kcl_residual(model: CircuitModel, state: StateVector) -> np.ndarray:
    """Equality residual: KCL (real rows, then imaginary), PV, slack, v_sq rows."""
    lay = state.layout
    n = model.n_bus
    a, b = state.v_real, state.v_imag
    _check_devices(a, b, model.pq_bus)
    _check_devices(a, b, model.pv_bus)
    res = np.empty(lay.n_eq)
    kcl = -(model.y_real @ state.x[lay.voltages])
    ir, ii = stamps.currents(model.pq_p, model.pq_q, a[model.pq_bus], b[model.pq_bus])
    kcl[model.pq_bus] -= ir
    kcl[n + model.pq_bus] -= ii
    ir, ii = stamps.currents(model.pv_p, state.q_gen, a[model.pv_bus], b[model.pv_bus])
    kcl[model.pv_bus] += ir
    kcl[n + model.pv_bus] += ii
    kcl[model.slack_bus] += state.i_slack[0]
    kcl[n + model.slack_bus] += state.i_slack[1]
    kcl += stamps.scatter_add(model.comp_part * n + model.comp_bus, state.n, 2 * n)
    res[lay.eq_kcl] = kcl
    res[lay.eq_pv] = a[model.pv_bus] ** 2 + b[model.pv_bus] ** 2 - model.pv_vset**2
    res[lay.eq_slack] = (a[model.slack_bus] - model.slack_v.real, b[model.slack_bus] - model.slack_v.imag)
    if lay.n_vsq:
        k = model.bounded_bus
        res[lay.eq_vsq] = a[k] ** 2 + b[k] ** 2 - state.v_sq
    return res


def _jacobian_entries(model: CircuitModel, state: StateVector):
    lay = state.layout
    n = model.n_bus
    a, b = state.v_real, state.v_imag
    vr, vi = lay.v_real.start, lay.v_imag.start
    rows, cols, vals = [], [], []

    lin = model.y_real.tocoo()
    rows.append(lin.row)
    cols.append(lin.col)
    vals.append(-lin.data)

    k = model.pq_bus
    d = stamps.current_partials(model.pq_p, model.pq_q, a[k], b[k])
    rows += [k, k, n + k, n + k]
    cols += [vr + k, vi + k, vr + k, vi + k]
    vals += [-d[0], -d[1], -d[2], -d[3]]

    k = model.pv_bus
    j = np.arange(len(k)) + lay.q_gen.start
    d = stamps.current_partials(model.pv_p, state.q_gen, a[k], b[k])
    rows += [k, k, n + k, n + k, k, n + k]
    cols += [vr + k, vi + k, vr + k, vi + k, j, j]
    vals += list(d)

    s = model.slack_bus
    rows += [np.array([s, n + s])]
    cols += [np.array([lay.i_slack.start, lay.i_slack.start + 1])]
    vals += [np.ones(2)]

    rows.append(model.comp_part * n + model.comp_bus)
    cols.append(np.arange(lay.n_comp) + lay.n.start)
    vals.append(np.ones(lay.n_comp))

    r = np.arange(len(k)) + lay.eq_pv.start
    rows += [r, r]
    cols += [vr + k, vi + k]
    vals += [2 * a[k], 2 * b[k]]

    r0 = lay.eq_slack.start
    rows.append(np.array([r0, r0 + 1]))
    cols.append(np.array([vr + s, vi + s]))
    vals.append(np.ones(2))

    if lay.n_vsq:
        k = model.bounded_bus
        r = np.arange(len(k)) + lay.eq_vsq.start
        rows += [r, r, r]
        cols += [vr + k, vi + k, np.arange(len(k)) + lay.v_sq.start]
        vals += [2 * a[k], 2 * b[k], -np.ones(len(k))]

    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def jacobian(model: CircuitModel, state: StateVector) -> sp.csr_matrix:
    """Analytic Jacobian of :func:`kcl_residual` with a state-independent pattern."""
    a, b = state.v_real, state.v_imag
    _check_devices(a, b, model.pq_bus)
    _check_devices(a, b, model.pv_bus)
    rows, cols, vals = _jacobian_entries(model, state)
    lay = state.layout
    pat = model.pattern(("jac", lay), lambda: _Pattern(rows, cols, (lay.n_eq, lay.size)))
    return pat.assemble(vals)


def constraint_hessian(model: CircuitModel, state: StateVector, weights: np.ndarray) -> sp.csr_matrix:
    """Hessian of ``weights @ kcl_residual(model, state)`` with respect to the state."""
    lay = state.layout
    n = model.n_bus
    a, b = state.v_real, state.v_imag
    vr, vi = lay.v_real.start, lay.v_imag.start
    w_r, w_i = weights[:n], weights[n : 2 * n]
    rows, cols, vals = [], [], []

    def vblock(k, haa, hab, hbb):
        rows.extend([vr + k, vr + k, vi + k, vi + k])
        cols.extend([vr + k, vi + k, vr + k, vi + k])
        vals.extend([haa, hab, hab, hbb])

    k = model.pq_bus
    haa, hab, hbb, _, _ = stamps.weighted_hessian(
        model.pq_p, model.pq_q, a[k], b[k], -w_r[k], -w_i[k]
    )
    vblock(k, haa, hab, hbb)

    k = model.pv_bus
    haa, hab, hbb, hqa, hqb = stamps.weighted_hessian(
        model.pv_p, state.q_gen, a[k], b[k], w_r[k], w_i[k]
    )
    w_pv = weights[lay.eq_pv]
    vblock(k, haa + 2 * w_pv, hab, hbb + 2 * w_pv)
    j = np.arange(len(k)) + lay.q_gen.start
    rows.extend([j, j, vr + k, vi + k])
    cols.extend([vr + k, vi + k, j, j])
    vals.extend([hqa, hqb, hqa, hqb])

    if lay.n_vsq:
        k = model.bounded_bus
        w = 2 * weights[lay.eq_vsq]
        vblock(k, w, np.zeros(len(k)), w)

    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    pat = model.pattern(("hess", lay), lambda: _Pattern(rows, cols, (lay.size, lay.size)))
    return pat.assemble(vals)
