import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voltdiag.case_io import load_case, scale_load
from voltdiag.network_model import (
    SingularVoltageError,
    StateVector,
    build_model,
    jacobian,
    kcl_residual,
    pq_injection_current,
)
from voltdiag.reference_oracles import finite_diff_jacobian, jacobian_check, newton_power_flow
from conftest import TWO_BUS, _case_text, bus, fixture_case, gen, line


def random_state(model, layout, rng):
    """Interior-looking random point: |V| in [0.8, 1.2], modest angles."""
    st_ = StateVector(layout)
    mag = rng.uniform(0.8, 1.2, model.n_bus)
    ang = rng.uniform(-0.5, 0.5, model.n_bus)
    st_.x[layout.v_real] = mag * np.cos(ang)
    st_.x[layout.v_imag] = mag * np.sin(ang)
    st_.x[layout.q_gen] = rng.normal(0, 0.5, layout.n_pv)
    st_.x[layout.i_slack] = rng.normal(0, 1, 2)
    st_.x[layout.n] = rng.normal(0, 0.1, layout.n_comp)
    st_.x[layout.t] = rng.uniform(0.1, 1, layout.n_t)
    st_.x[layout.v_sq] = rng.uniform(0.81, 1.21, layout.n_vsq)
    return st_


class TestInjectionCurrent:
    def test_unit(self):
        assert pq_injection_current(1, 0, 1, 0) == pytest.approx((1, 0))

    def test_no_demand(self):
        assert pq_injection_current(0, 0, 0.7, -0.3) == (0, 0)

    def test_hand_value(self):
        ir, ii = pq_injection_current(0.5, 0.2, 0.95, -0.05)
        expected = np.conj((0.5 + 0.2j) / (0.95 - 0.05j))
        assert (ir, ii) == pytest.approx((expected.real, expected.imag), abs=1e-14)
        assert ir == pytest.approx(0.51381, abs=1e-5)
        assert ii == pytest.approx(-0.23757, abs=1e-5)

    def test_zero_voltage(self):
        with pytest.raises(SingularVoltageError):
            pq_injection_current(1, 0, 0, 0)

    @settings(max_examples=1000, deadline=None)
    @given(
        st.floats(-5, 5),
        st.floats(-5, 5),
        st.floats(0.3, 1.5),
        st.floats(-np.pi, np.pi),
    )
    def test_power_identity(self, p, q, mag, ang):
        v = mag * np.exp(1j * ang)
        ir, ii = pq_injection_current(p, q, v.real, v.imag)
        s = v * np.conj(ir + 1j * ii)
        assert abs(s - (p + 1j * q)) <= 1e-12 * max(1.0, abs(p + 1j * q))

    def test_vectorized(self, rng):
        p, q = rng.normal(size=(2, 50))
        v = rng.uniform(0.3, 1.5, 50) * np.exp(1j * rng.uniform(-3, 3, 50))
        ir, ii = pq_injection_current(p, q, v.real, v.imag)
        np.testing.assert_allclose(v * np.conj(ir + 1j * ii), p + 1j * q, atol=1e-12)


class TestBuild:
    def test_two_bus_admittance(self, two_bus_model):
        y = two_bus_model.y_lin.toarray()
        ys = 1 / (0.01 + 0.1j)
        np.testing.assert_allclose(y, [[ys, -ys], [-ys, ys]], rtol=1e-14)

    def test_two_bus_devices(self, two_bus_model):
        assert two_bus_model.pq_devices == [(2, 0.5, 0.2)]
        assert two_bus_model.pv_devices == []
        assert two_bus_model.slack == (1, 1.0, 0.0)
        assert list(two_bus_model.comp_bus) == [1, 1]

    def test_tap_and_shift_stamp(self):
        br = line(1, 2, 0.02, 0.2, 0.1)
        br[8], br[9] = 0.95, 10.0
        case = fixture_case(_case_text("x", [bus(1, 3, 0, 0), bus(2, 1, 10, 0, bs=5)], [gen(1)], [br]))
        y = build_model(case).y_lin.toarray()
        ys = 1 / (0.02 + 0.2j)
        tap = 0.95 * np.exp(1j * np.deg2rad(10))
        ytt = ys + 0.05j
        assert y[0, 0] == pytest.approx(ytt / abs(tap) ** 2)
        assert y[0, 1] == pytest.approx(-ys / np.conj(tap))
        assert y[1, 0] == pytest.approx(-ys / tap)
        assert y[1, 1] == pytest.approx(ytt + 0.05j)  # plus the 5 MVAr bus shunt

    def test_out_of_service_branch_absent(self):
        off = line(2, 3)
        off[10] = 0
        case = fixture_case(
            _case_text("x", [bus(1, 3, 0, 0), bus(2, 1, 10, 0), bus(3, 1, 5, 0)], [gen(1)], [line(1, 2), line(1, 3), off])
        )
        y = build_model(case).y_lin.toarray()
        assert y[1, 2] == 0 and y[2, 1] == 0

    def test_case30_structure(self, case30_model):
        assert case30_model.n_bus == 30
        y = case30_model.y_lin
        pattern = (y != 0).astype(int)
        assert (pattern != pattern.T).nnz == 0
        pv = {b for b, _, _ in case30_model.pv_devices}
        assert pv and case30_model.slack[0] not in pv
        assert len(case30_model.comp_bus) == 2 * 29

    def test_placements(self, case30):
        pq_only = build_model(case30, "pq_only")
        assert set(pq_only.comp_bus) == set(pq_only.bounded_bus)
        reactive = build_model(case30, reactive_only=True)
        assert set(reactive.comp_part) == {1}
        with pytest.raises(ValueError):
            build_model(case30, "everywhere")


class TestResidual:
    def test_flat_start_two_bus(self, two_bus_model):
        lay = two_bus_model.layout()
        st_ = two_bus_model.initial_state(lay, flat=True)
        res = kcl_residual(two_bus_model, st_)
        # at equal voltages no line current flows; bus 2 only sees its 0.5 - 0.2j load
        np.testing.assert_allclose(res[lay.eq_kcl], [0, -0.5, 0, 0.2], atol=1e-15)
        np.testing.assert_allclose(res[lay.eq_slack], 0, atol=1e-15)

    def test_lossless_unloaded_fixture(self):
        case = fixture_case(_case_text("x", [bus(1, 3, 0, 0), bus(2, 1, 0, 0)], [gen(1)], [line(1, 2, 0.0, 0.1)]))
        model = build_model(case)
        st_ = model.initial_state(model.layout(), flat=True)
        assert np.max(np.abs(kcl_residual(model, st_))) == 0

    def test_compensation_entry(self, case30_model, rng):
        lay = case30_model.layout()
        st_ = random_state(case30_model, lay, rng)
        base = kcl_residual(case30_model, st_)
        k = 7
        st_.x[lay.n.start + k] += 1e-3
        diff = kcl_residual(case30_model, st_) - base
        row = case30_model.comp_part[k] * case30_model.n_bus + case30_model.comp_bus[k]
        expected = np.zeros_like(diff)
        expected[row] = 1e-3
        np.testing.assert_allclose(diff, expected, atol=1e-15)

    def test_solved_power_flow(self, case30_model):
        pf = newton_power_flow(case30_model)
        assert pf.converged
        assert np.max(np.abs(kcl_residual(case30_model, pf.state))) < 1e-8

    def test_zero_voltage_raises(self, two_bus_model):
        st_ = two_bus_model.initial_state(two_bus_model.layout(), flat=True)
        st_.x[:] = 0
        with pytest.raises(SingularVoltageError):
            kcl_residual(two_bus_model, st_)


@pytest.fixture(scope="module")
def models():
    return {
        "two_bus": build_model(fixture_case(TWO_BUS)),
        "case30": build_model(load_case("case30")),
        "case118": build_model(scale_load(load_case("case118"), 1.2)),
    }


class TestJacobian:
    @pytest.mark.parametrize("name", ["two_bus", "case30", "case118"])
    def test_finite_differences(self, models, name):
        model = models[name]
        rng = np.random.default_rng(7)
        lay = model.layout(sparse=True, vreg=True)
        worst = 0.0
        for _ in range(20):
            rep = jacobian_check(model, random_state(model, lay, rng), step=1e-7, rtol=1e-5)
            worst = max(worst, rep.details["max_rel_error"])
        assert worst < 1e-5, worst

    def test_two_bus_tight(self, two_bus_model, rng):
        lay = two_bus_model.layout()
        st_ = random_state(two_bus_model, lay, rng)
        rep = jacobian_check(two_bus_model, st_, rtol=1e-6)
        assert rep.verdict, rep.details
        fd = finite_diff_jacobian(two_bus_model, st_)
        np.testing.assert_allclose(fd, jacobian(two_bus_model, st_).toarray(), atol=1e-6)

    def test_vsq_row(self, case30_model, rng):
        lay = case30_model.layout(vreg=True)
        st_ = random_state(case30_model, lay, rng)
        jac = jacobian(case30_model, st_).toarray()
        for j, k in enumerate(case30_model.bounded_bus):
            row = jac[lay.eq_vsq.start + j]
            assert row[lay.v_real.start + k] == pytest.approx(2 * st_.v_real[k])
            assert row[lay.v_imag.start + k] == pytest.approx(2 * st_.v_imag[k])
            assert row[lay.v_sq.start + j] == -1

    def test_zero_perturbation(self, two_bus_model, rng):
        st_ = random_state(two_bus_model, two_bus_model.layout(), rng)
        base = kcl_residual(two_bus_model, st_)
        again = kcl_residual(two_bus_model, StateVector(st_.layout, st_.x.copy()))
        assert np.array_equal(base, again)

    def test_pattern_constant(self, case30_model, rng):
        lay = case30_model.layout(sparse=True, vreg=True)
        first = jacobian(case30_model, random_state(case30_model, lay, rng))
        for _ in range(10):
            jac = jacobian(case30_model, random_state(case30_model, lay, rng))
            assert np.array_equal(jac.indptr, first.indptr)
            assert np.array_equal(jac.indices, first.indices)


def _relabel(case, perm_order, new_ids):
    """Reorder the bus list and rename every bus id."""
    rename = dict(zip([b.id for b in case.buses], new_ids))
    buses = [dataclasses.replace(case.buses[k], id=rename[case.buses[k].id]) for k in perm_order]
    branches = [dataclasses.replace(b, from_bus=rename[b.from_bus], to_bus=rename[b.to_bus]) for b in case.branches]
    gens = [dataclasses.replace(g, bus=rename[g.bus]) for g in case.gens]
    return dataclasses.replace(case, buses=buses, branches=branches, gens=gens), rename


def test_bus_relabeling(case30, rng):
    model = build_model(case30)
    order = rng.permutation(len(case30.buses))
    new_ids = rng.choice(np.arange(100, 1000), size=len(case30.buses), replace=False).tolist()
    other_case, rename = _relabel(case30, order, new_ids)
    other = build_model(other_case)

    lay, olay = model.layout(), other.layout()
    st_ = random_state(model, lay, rng)
    nb = model.n_bus
    # old internal bus index -> new internal bus index
    pos = {int(b): k for k, b in enumerate(other.bus_ids)}
    bmap = np.array([pos[rename[int(b)]] for b in model.bus_ids])
    pv_pos = {int(b): k for k, b in enumerate(other.pv_bus)}
    pv_map = np.array([pv_pos[int(bmap[b])] for b in model.pv_bus])
    comp_pos = {(int(b), int(p)): k for k, (b, p) in enumerate(zip(other.comp_bus, other.comp_part))}
    comp_map = np.array([comp_pos[(int(bmap[b]), int(p))] for b, p in zip(model.comp_bus, model.comp_part)])

    col = np.empty(lay.size, dtype=int)
    col[lay.v_real] = olay.v_real.start + bmap
    col[lay.v_imag] = olay.v_imag.start + bmap
    col[lay.q_gen] = olay.q_gen.start + pv_map
    col[lay.i_slack] = np.arange(olay.i_slack.start, olay.i_slack.stop)
    col[lay.n] = olay.n.start + comp_map
    row = np.empty(lay.n_eq, dtype=int)
    row[:nb] = bmap
    row[nb : 2 * nb] = nb + bmap
    row[lay.eq_pv] = olay.eq_pv.start + pv_map
    row[lay.eq_slack] = np.arange(olay.eq_slack.start, olay.eq_slack.stop)

    ost = StateVector(olay)
    ost.x[col] = st_.x
    res, ores = kcl_residual(model, st_), kcl_residual(other, ost)
    np.testing.assert_allclose(ores[row], res, atol=1e-12)
    jac, ojac = jacobian(model, st_).toarray(), jacobian(other, ost).toarray()
    np.testing.assert_allclose(ojac[np.ix_(row, col)], jac, atol=1e-12)
