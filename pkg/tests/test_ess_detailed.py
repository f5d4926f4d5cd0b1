import math

import numpy as np
import pytest

from gridess import numerics
from gridess.ess_detailed import (
    BesModel, CaesModel, DeviceDae, EcesModel, NonPhysical, SmesModel,
    SocOutOfRange, UnknownTechnology, bes_equations, bes_polarization,
    caes_energy, caes_machine_equations, caes_pressure_derivative,
    detailed_equilibrium, device_model, eces_derivatives, eces_energy,
    smes_energy, smes_equations)
from gridess.network import load_case
from gridess.scenarios import default_case_path

V_DC = 20.0e3


@pytest.fixture(scope="module")
def tech_params():
    case = load_case(default_case_path())
    return case.extra


def make(tech, tech_params, **over):
    p = dict(tech_params[tech])
    p.update(over)
    return device_model(tech, p, V_DC)


def run_device(model, u, v_dc, t_end, dt, xz0=None, u0=None):
    dae = DeviceDae(model)
    if xz0 is None:
        xz0, u0, _ = detailed_equilibrium(model, v_dc)
    sched = lambda t: [u if callable(u) is False else u(t), v_dc]
    if callable(u):
        sched = lambda t: [u(t), v_dc]
    times, states = numerics.integrate(dae, dae.pack(xz0), sched, t_end, dt)
    return times, np.array([dae.unpack(s) for s in states])


# --- eces ---------------------------------------------------------------------

def test_eces_derivative_formulas(tech_params):
    m = make("eces", tech_params)
    m.set_state([4200.0, -35.0])
    dv, di, i_dc = eces_derivatives(m, 0.2, V_DC)
    assert dv == -(-35.0 + 1e-5 * 4200.0) / 8.0
    assert di == (4200.0 - 0.01 * -35.0 - V_DC * 0.2) / 1e-3
    assert i_dc == 0.2 * -35.0
    assert eces_energy(m) == pytest.approx(
        0.5 * 8.0 * 4200.0 ** 2 + 0.5 * 1e-3 * 35.0 ** 2, rel=1e-14)


def test_eces_lossless_lc_period(tech_params):
    m = make("eces", tech_params, r_sc=0.0, g_sc=0.0)
    dae = DeviceDae(m)
    v0 = 5000.0
    dt = 2e-4
    t_end = 0.25
    times, states = numerics.integrate(
        dae, dae.pack([v0, 0.0]), lambda t: [0.0, V_DC], t_end, dt)
    v = states[:, 0] * dae.scales[0]
    # first downward zero crossing sits at a quarter period
    k = int(np.argmax(v < 0.0))
    assert 0 < k < len(v)
    t_cross = times[k - 1] + dt * v[k - 1] / (v[k - 1] - v[k])
    period = 2.0 * math.pi * math.sqrt(1e-3 * 8.0)
    assert abs(4.0 * t_cross - period) <= 0.005 * period
    # lossless oscillator: trapezoidal holds the quadratic energy exactly
    xz = np.array([dae.unpack(s) for s in states])
    e = 0.5 * 8.0 * xz[:, 0] ** 2 + 0.5 * 1e-3 * xz[:, 1] ** 2
    assert np.max(np.abs(e - e[0])) <= 1e-9 * e[0]


def test_eces_equilibrium_zero_derivatives(tech_params):
    m = make("eces", tech_params)
    xz0, u0, i_dc0 = detailed_equilibrium(m, V_DC)
    dv, di, _ = eces_derivatives(m, u0, V_DC)
    assert abs(dv) < 1e-9 and abs(di) < 1e-6
    assert xz0[0] == pytest.approx(5000.0, rel=1e-12)
    assert xz0[1] == pytest.approx(-1e-5 * 5000.0, rel=1e-9)
    assert u0 == pytest.approx((5000.0 - 0.01 * xz0[1]) / V_DC, rel=1e-9)


def test_eces_duty_polarity(tech_params):
    # raising the duty forces current into the capacitor bank: it charges
    m = make("eces", tech_params)
    xz0, u0, _ = detailed_equilibrium(m, V_DC)
    e0 = m.energy(xz0)
    for sign in (+1.0, -1.0):
        _, xz = run_device(make("eces", tech_params), u0 + sign * 1e-3, V_DC,
                           0.05, 1e-4)
        e_end = m.energy(xz[-1])
        i_dc_end = m.i_dc(xz[-1], u0 + sign * 1e-3, V_DC)
        if sign > 0:
            assert e_end > e0 and i_dc_end < 0.0
        else:
            assert e_end < e0 and i_dc_end > 0.0


# --- smes ---------------------------------------------------------------------

def test_smes_chopper_and_energy(tech_params):
    m = make("smes", tech_params)
    m.set_state([3000.0, 0.0])
    assert smes_energy(m) == pytest.approx(60.0e6, rel=1e-12)
    m.set_state([1500.0, 0.0])
    assert smes_energy(m) == pytest.approx(15.0e6, rel=1e-12)  # quarter at half current
    # null duty: no chopper voltage, no exchange
    di, alg, i_dc = smes_equations(m, 0.5, V_DC)
    assert alg == -m.v_c and i_dc == 0.0
    # full-off duty: coil sees the whole bus and ramps down
    m.set_state([1500.0, V_DC])
    di, alg, i_dc = smes_equations(m, 0.0, V_DC)
    assert alg == 0.0
    assert di == pytest.approx(-V_DC / m.l_c, rel=1e-12)
    assert i_dc == pytest.approx(1500.0, rel=1e-12)


def test_smes_idle_equilibrium(tech_params):
    m = make("smes", tech_params)
    xz0, u0, i_dc0 = detailed_equilibrium(m, V_DC)
    assert u0 == pytest.approx(0.5, abs=1e-10)
    assert xz0[1] == pytest.approx(0.0, abs=1e-6)
    assert i_dc0 == pytest.approx(0.0, abs=1e-6)
    # fixture coil holds half its 60 MJ rating at the stored set-point
    assert m.energy(xz0) == pytest.approx(30.0e6, rel=1e-9)


def test_smes_constant_energy_at_null_duty(tech_params):
    m = make("smes", tech_params)
    _, xz = run_device(m, 0.5, V_DC, 10.0, 1e-2)
    e = 0.5 * m.l_c * xz[:, 0] ** 2
    assert np.max(np.abs(e - e[0])) <= 1e-9 * e[0]


def test_smes_duty_step_signs(tech_params):
    m = make("smes", tech_params)
    xz0, u0, _ = detailed_equilibrium(m, V_DC)
    e0 = m.energy(xz0)
    for du, charges in ((+0.01, True), (-0.01, False)):
        _, xz = run_device(make("smes", tech_params), 0.5 + du, V_DC, 0.2, 1e-3)
        e_end = m.energy(xz[-1])
        i_dc_end = m.i_dc(xz[-1], 0.5 + du, V_DC)
        if charges:
            assert e_end > e0 and i_dc_end < 0.0
        else:
            assert e_end < e0 and i_dc_end > 0.0


def test_smes_ramp_closed_form(tech_params):
    # at S=0 the coil current is an exact linear ramp
    m = make("smes", tech_params)
    xz0 = [2000.0, V_DC]
    _, xz = run_device(m, 0.0, V_DC, 0.1, 1e-3, xz0=xz0, u0=0.0)
    expect = 2000.0 - V_DC / m.l_c * 0.1
    assert xz[-1, 0] == pytest.approx(expect, rel=1e-9)


# --- caes ---------------------------------------------------------------------

def test_caes_pressure_rate(tech_params):
    m = make("caes", tech_params)
    coeff = m.rho * m.r_gas * m.theta2 / m.pi_m
    assert caes_pressure_derivative(m, 0.0) == 0.0
    assert caes_pressure_derivative(m, 5.0) == pytest.approx(
        coeff * 5.0 / m.vol, rel=1e-12)
    m2 = make("caes", tech_params, vol=2e4)
    assert caes_pressure_derivative(m2, 5.0) == pytest.approx(
        0.5 * caes_pressure_derivative(m, 5.0), rel=1e-12)
    m.set_state([0.5e5] + m.get_state()[1:])
    with pytest.raises(NonPhysical):
        caes_pressure_derivative(m, 1.0)


def test_caes_zero_head_at_ambient(tech_params):
    m = make("caes", tech_params)
    assert m.head_power(m.pi1, 17.0) == 0.0
    assert m.head_power(m.pi1, -4.0) == 0.0


def test_caes_idle_equilibrium(tech_params):
    m = make("caes", tech_params)
    xz0, u0, i_dc0 = detailed_equilibrium(m, V_DC)
    names = list(m.x_names) + list(m.z_names)
    st = dict(zip(names, xz0))
    assert abs(u0) < 1e-9
    assert st["omega"] == pytest.approx(m.omega_nom, rel=1e-9)
    assert abs(st["slip"]) < 1e-9
    assert abs(st["t_el"]) < 1e-6 * m.t_base
    # idle draw is just stator loss, well under a percent of rating
    assert 0.0 < -i_dc0 * V_DC < 2e-3 * m.s_m
    rows, domega, i_dc = caes_machine_equations(m, u0, V_DC)
    assert abs(domega) < 1e-9
    assert max(abs(r) for r in rows) < 1e-4  # raw SI rows, worst is in watts


def test_caes_compression_settles_and_draws(tech_params):
    m = make("caes", tech_params)
    q = 5.0
    times, xz = run_device(m, q, V_DC, 2.0, 1e-3)
    names = list(m.x_names) + list(m.z_names)
    end = dict(zip(names, xz[-1]))
    coeff = m.rho * m.r_gas * m.theta2 / m.pi_m
    # pressure integration of a constant flow is exact for trapezoidal
    d_pi2 = xz[-1, 0] - xz[0, 0]
    assert d_pi2 == pytest.approx(coeff * q / m.vol * 2.0, rel=1e-6)
    # motoring below synchronous speed, drawing from the bus
    assert end["slip"] > 0.0
    assert end["omega"] < m.omega_nom
    assert end["p_el"] > 0.0
    assert m.i_dc(xz[-1], q, V_DC) < 0.0
    assert m.energy(xz[-1]) > m.energy(xz[0])
    # settled: shaft torque balances load torque
    assert abs(end["t_el"] - end["t_m"]) < 1e-3 * m.t_base
    # power chain: head -> shaft -> air gap -> stator terminals
    p_ag = end["p_m"] / (1.0 - end["slip"])
    cu_s = m.r_s * (end["i_ds"] ** 2 + end["i_qs"] ** 2) * m.s_m
    assert end["p_el"] == pytest.approx(p_ag + cu_s, rel=1e-3)
    assert end["p_ef"] == pytest.approx(m.eta_m * end["p_m"], rel=1e-9)


def test_caes_generation_feeds_bus(tech_params):
    m = make("caes", tech_params)
    times, xz = run_device(m, -5.0, V_DC, 2.0, 1e-3)
    names = list(m.x_names) + list(m.z_names)
    end = dict(zip(names, xz[-1]))
    assert end["slip"] < 0.0
    assert end["omega"] > m.omega_nom
    assert m.i_dc(xz[-1], -5.0, V_DC) > 0.0
    assert m.energy(xz[-1]) < m.energy(xz[0]) - 1e4


def test_caes_energy_terms(tech_params):
    m = make("caes", tech_params)
    m.set_state([m.pi1] + [0.0] * 26)
    assert caes_energy(m) == 0.0
    xz0, _, _ = detailed_equilibrium(m, V_DC)
    # pressure term dominates the kinetic term at the rated point
    kinetic = m.h * xz0[1] ** 2
    assert caes_energy(m) > 50.0 * kinetic


# --- bes ----------------------------------------------------------------------

def test_bes_polarization_branches(tech_params):
    m = make("bes", tech_params)
    q_e = 25.0  # soc one half
    v_dis = (m.r_p * 1.0 + m.k_p * q_e) / 0.5
    assert bes_polarization(m, 1.0, q_e) == pytest.approx(v_dis, rel=1e-12)
    # branches agree at the mode boundary
    lo = bes_polarization(m, -1e-9, q_e)
    hi = bes_polarization(m, +1e-9, q_e)
    assert abs(hi - lo) < 1e-9
    with pytest.raises(SocOutOfRange):
        bes_polarization(m, 0.0, m.q_n)
    with pytest.raises(SocOutOfRange):
        bes_polarization(m, 0.0, -1.0)


def test_bes_polarization_branch_override(tech_params):
    # override pins the branch formula regardless of the current's sign so a
    # differencing probe never straddles the kink at i_m = 0
    m = make("bes", tech_params)
    q_e = 25.0
    i_m = -2.0
    free = bes_polarization(m, i_m, q_e)
    try:
        m.branch_override = "charge"
        assert bes_polarization(m, i_m, q_e) == free
        m.branch_override = "discharge"
        forced = bes_polarization(m, i_m, q_e)
    finally:
        m.branch_override = None
    assert forced == pytest.approx((m.r_p * i_m + m.k_p * q_e) / 0.5, rel=1e-12)
    assert forced != free
    assert bes_polarization(m, i_m, q_e) == free


def test_bes_open_circuit_rows(tech_params):
    m = make("bes", tech_params)
    xz0, u0, i_dc0 = detailed_equilibrium(m, V_DC)
    assert i_dc0 == pytest.approx(0.0, abs=1e-9)
    dq, dim, res_vb, res_ib, res_vp, i_dc_printed = bes_equations(m, u0, V_DC)
    assert dq == 0.0 and dim == 0.0
    assert abs(res_vb) < 1e-6 and abs(res_ib) < 1e-9 and abs(res_vp) < 1e-12
    # open circuit pins the cell voltage to its emf chain
    assert m.v_b == pytest.approx(
        m.v_oc - m.v_p + m.v_e * math.exp(-m.beta_e * m.q_e), rel=1e-12)
    assert m.energy(xz0) == pytest.approx(0.85, abs=1e-12)
    assert 0.1 < u0 < 0.4


def test_bes_full_charge_is_soc_one(tech_params):
    m = make("bes", tech_params)
    m.set_state([0.0, 2.1, 0.0, 0.0, 0.0])
    assert m.energy(m.get_state()) == 1.0


def test_bes_duty_polarity_and_soc_lock(tech_params):
    m = make("bes", tech_params)
    xz0, u0, _ = detailed_equilibrium(m, V_DC)
    for du, discharging in ((+0.005, True), (-0.005, False)):
        mm = make("bes", tech_params)
        times, xz = run_device(mm, u0 + du, V_DC, 0.5, 1e-3, xz0=xz0, u0=u0)
        soc = 1.0 - xz[:, 0] / mm.q_n
        i_dc_end = mm.i_dc(xz[-1], u0 + du, V_DC)
        if discharging:
            assert soc[-1] < soc[0] and i_dc_end > 0.0
            assert xz[-1, 3] > 0.0  # i_m settled in the discharge branch
        else:
            assert soc[-1] > soc[0] and i_dc_end < 0.0
        # soc and extracted charge stay affinely locked along the run
        assert np.allclose(soc, 1.0 - xz[:, 0] / mm.q_n, atol=0.0)
        mm.set_state(xz[-1])
        assert mm.mode == ("discharge" if discharging else "charge")


# --- shared block properties ----------------------------------------------------

ALL_TECHS = ("smes", "eces", "caes", "bes")


def test_device_factory(tech_params):
    assert isinstance(make("smes", tech_params), SmesModel)
    assert isinstance(make("eces", tech_params), EcesModel)
    assert isinstance(make("caes", tech_params), CaesModel)
    assert isinstance(make("bes", tech_params), BesModel)
    with pytest.raises(UnknownTechnology):
        device_model("flywheel", {}, V_DC)


def test_equilibrium_holds_flat(tech_params):
    for tech in ALL_TECHS:
        m = make(tech, tech_params)
        xz0, u0, _ = detailed_equilibrium(m, V_DC)
        dae = DeviceDae(m)
        _, states = numerics.integrate(
            dae, dae.pack(xz0), lambda t: [u0, V_DC], 0.5, 1e-3)
        drift = np.max(np.abs(states[-1] - states[0]))
        assert drift < 1e-8, tech


def test_energy_params_reproduce_energy(tech_params):
    rng = np.random.default_rng(7)
    for tech in ALL_TECHS:
        m = make(tech, tech_params)
        rho, beta, chi = m.energy_params()
        for _ in range(5):
            xz, _, _ = detailed_equilibrium(make(tech, tech_params), V_DC)
            xz = list(xz)
            xz[0] *= rng.uniform(0.5, 1.1)
            xz[1] *= rng.uniform(0.5, 1.1)
            e_direct = m.energy(xz)
            e_sum = sum(r * (xz[i] ** b - c ** b)
                        for i, (r, b, c) in enumerate(zip(rho, beta, chi)))
            assert e_sum == pytest.approx(e_direct, rel=1e-12, abs=1e-9), tech


def test_port_power_consistent_along_trajectory(tech_params):
    # v_dc*i_dc must match the power expressed purely in device terms
    steps = {"smes": 0.51, "eces": None, "caes": 3.0, "bes": None}
    for tech in ALL_TECHS:
        m = make(tech, tech_params)
        xz0, u0, _ = detailed_equilibrium(m, V_DC)
        u1 = steps[tech]
        if u1 is None:
            u1 = u0 + 0.004
        dae = DeviceDae(m)
        _, states = numerics.integrate(
            dae, dae.pack(xz0), lambda t: [u1, V_DC], 0.3, 1e-3)
        worst = 0.0
        # skip t=0: its algebraic rows belong to the pre-step command
        for s in states[1:]:
            xz = dae.unpack(s)
            lhs = V_DC * m.i_dc(xz, u1, V_DC)
            rhs = m.port_power_internal(xz, u1, V_DC)
            worst = max(worst, abs(lhs - rhs) / max(abs(rhs), 1.0))
        assert worst < 1e-8, tech


def test_algebraic_rows_hold_along_trajectory(tech_params):
    for tech in ALL_TECHS:
        m = make(tech, tech_params)
        xz0, u0, _ = detailed_equilibrium(m, V_DC)
        dae = DeviceDae(m)
        alg = np.where(dae.gamma < 0.5)[0]
        if alg.size == 0:
            continue
        u1 = 0.52 if tech == "smes" else (4.0 if tech == "caes" else u0 + 0.003)
        _, states = numerics.integrate(
            dae, dae.pack(xz0), lambda t: [u1, V_DC], 0.3, 1e-3)
        for s in states[1:]:
            rows = dae.psi(np.asarray(s), [u1, V_DC])
            assert np.max(np.abs(rows[alg])) < 1e-8, tech


def test_equilibrium_unknown_target_raises(tech_params):
    m = make("smes", tech_params)
    with pytest.raises(ValueError):
        detailed_equilibrium(m, V_DC, {"banana": 1.0})
