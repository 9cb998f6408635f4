import numpy as np
import pytest

from voltdiag.case_io import load_case, parse_matpower, to_per_unit
from voltdiag.network_model import build_model

TWO_BUS = """
function mpc = two_bus
mpc.version = '2';
mpc.baseMVA = 100;
%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
    1 3 0  0  0 0 1 1.0 0 230 1 1.1 0.9;
    2 1 50 20 0 0 1 1.0 0 230 1 1.1 0.9;
];
%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin
mpc.gen = [
    1 0 0 300 -300 1.0 100 1 250 10;
];
%% fbus tbus r x b rateA rateB rateC ratio angle status
mpc.branch = [
    1 2 0.01 0.1 0 250 250 250 0 0 1;
];
"""


def _case_text(name, buses, gens, branches):
    rows = lambda rs: "\n".join("    " + " ".join(str(v) for v in r) + ";" for r in rs)
    return (
        f"function mpc = {name}\nmpc.baseMVA = 100;\n"
        f"mpc.bus = [\n{rows(buses)}\n];\nmpc.gen = [\n{rows(gens)}\n];\n"
        f"mpc.branch = [\n{rows(branches)}\n];\n"
    )


def bus(i, t, pd, qd, vmin=0.9, vmax=1.1, bs=0):
    return [i, t, pd, qd, 0, bs, 1, 1.0, 0, 230, 1, vmax, vmin]


def gen(i, vg=1.0, pg=0):
    return [i, pg, 0, 300, -300, vg, 100, 1, 300, 0]


def line(f, t, r=0.01, x=0.1, b=0):
    return [f, t, r, x, b, 250, 250, 250, 0, 0, 1]


# radial feeder; the end load cannot be delivered
THREE_BUS = _case_text(
    "three_bus",
    [bus(1, 3, 0, 0), bus(2, 1, 40, 10), bus(3, 1, 350, 100)],
    [gen(1)],
    [line(1, 2), line(2, 3)],
)

# meshed, one PV bus, overload on the far bus
FOUR_BUS = _case_text(
    "four_bus",
    [bus(1, 3, 0, 0), bus(2, 2, 20, 5), bus(3, 1, 60, 20), bus(4, 1, 420, 150)],
    [gen(1, 1.02), gen(2, 1.0, 80)],
    [line(1, 2), line(2, 3, 0.02, 0.15), line(1, 3, 0.02, 0.2), line(3, 4, 0.01, 0.12)],
)

# two stressed feeders off one slack
FIVE_BUS = _case_text(
    "five_bus",
    [bus(1, 3, 0, 0), bus(2, 1, 50, 10), bus(3, 1, 480, 120), bus(4, 1, 30, 10), bus(5, 1, 60, 20)],
    [gen(1)],
    [line(1, 2), line(2, 3, 0.01, 0.1), line(1, 4, 0.02, 0.2), line(4, 5, 0.02, 0.2)],
)

INFEASIBLE_FIXTURES = {"three_bus": THREE_BUS, "four_bus": FOUR_BUS, "five_bus": FIVE_BUS}


def fixture_case(text):
    return to_per_unit(parse_matpower(text))


@pytest.fixture
def two_bus_text():
    return TWO_BUS


@pytest.fixture
def two_bus_case():
    return fixture_case(TWO_BUS)


@pytest.fixture
def two_bus_model(two_bus_case):
    return build_model(two_bus_case)


@pytest.fixture(scope="session")
def case30():
    return load_case("case30")


@pytest.fixture(scope="session")
def case30_model(case30):
    return build_model(case30)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def independent_ybus(case):
    """Dense complex bus admittance built straight from the case records."""
    index = {b.id: k for k, b in enumerate(case.buses)}
    y = np.zeros((len(case.buses), len(case.buses)), dtype=complex)
    for br in case.branches:
        f, t = index[br.from_bus], index[br.to_bus]
        ys = 1 / complex(br.r, br.x)
        tap = br.tap * np.exp(1j * br.shift)
        half = 0.5j * br.b_charging
        y[f, f] += (ys + half) / abs(tap) ** 2
        y[f, t] -= ys / np.conj(tap)
        y[t, f] -= ys / tap
        y[t, t] += ys + half
    for k, b in enumerate(case.buses):
        y[k, k] += complex(b.g_shunt, b.b_shunt)
    return y


def balance_mismatch(case, model, v, n):
    """Worst KCL violation of ``(v, n)`` outside the slack bus.

    Loads and bus-level generator totals come from the case; PV buses only
    balance real power (their reactive output is free) and must hold their
    setpoint magnitude.
    """
    y = independent_ybus(case)
    leaving = y @ v - n
    s_net = np.array([complex(b.p_demand, b.q_demand) for b in case.buses])
    gen_at = {}
    for g in case.gens:
        gen_at.setdefault(g.bus, []).append(g)
    pv = set(int(k) for k in model.pv_bus)
    worst = 0.0
    for k, b in enumerate(case.buses):
        if k == model.slack_bus:
            continue
        gens = gen_at.get(b.id, [])
        if k in pv:
            p = sum(g.p_set for g in gens) - b.p_demand
            worst = max(worst, abs((v[k] * np.conj(leaving[k])).real - p))
            worst = max(worst, abs(abs(v[k]) - gens[0].v_set))
        else:
            s = s_net[k] - sum(complex(g.p_set, g.q_init) for g in gens)
            worst = max(worst, abs(leaving[k] + np.conj(s / v[k])))
    return worst


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
