"""Grid-interface voltage-source converter and the storage command path.

Internals are SI on the converter's own bases: amplitude-invariant peak dq
quantities, so rated phase-peak voltage is sqrt(2/3) * V_LL and active power
is 1.5 (v_d i_d + v_q i_q). The network port converts to system per-unit at
the boundary. Converter ac current is measured grid-to-converter, dc device
current positive into the dc bus, so a discharging storage device raises
v_dc and the dc regulator exports the surplus.

Block diagram per axis: a synchronous-frame PLL supplies the angle; outer
loops shape i_dq references (dc-voltage PI on d, ac-voltage lead-lag on q);
the inner loop is a decoupling PI whose closed loop is exactly
1/(1 + s T_I) when parameters match the plant.
"""

import math
from dataclasses import dataclass

import numpy as np

from .numerics import DaeSystem


@dataclass
class PllParams:
    k_pd: float = 1.0
    k_vco: float = 1.0
    t1_lf: float = 0.045
    t2_lf: float = 0.001


@dataclass
class VscParams:
    s_rated: float
    v_dc_nom: float
    v_ac_ll: float
    c_dc: float
    r_ac: float
    l_ac: float
    g_0: float
    i_dc_nom: float
    t_i: float
    m_max: float
    i_ref_max: float
    pll: PllParams
    k_mdc: float
    t_mdc: float
    k_p_dc: float
    k_i_dc: float
    k_q: float
    k_dq: float
    t1_ac: float
    t2_ac: float
    omega_s: float = 2.0 * math.pi * 60.0

    @property
    def v_base_pk(self):
        return math.sqrt(2.0 / 3.0) * self.v_ac_ll

    @property
    def i_base_pk(self):
        return (2.0 / 3.0) * self.s_rated / self.v_base_pk


def vsc_params_from_dict(d, overrides=None):
    d = dict(d)
    if overrides:
        for k, v in overrides.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
    pll = PllParams(**d.get("pll", {}))
    dc = d.get("dc_loop", {})
    ac = d.get("ac_loop", {})
    return VscParams(
        s_rated=float(d["s_rated"]), v_dc_nom=float(d["v_dc_nom"]),
        v_ac_ll=float(d["v_ac_ll"]), c_dc=float(d["c_dc"]),
        r_ac=float(d["r_ac"]), l_ac=float(d["l_ac"]), g_0=float(d["g_0"]),
        i_dc_nom=float(d["i_dc_nom"]), t_i=float(d["t_i"]),
        m_max=float(d["m_max"]), i_ref_max=float(d["i_ref_max"]), pll=pll,
        k_mdc=float(dc.get("k_mdc", 1.0)), t_mdc=float(dc.get("t_mdc", 0.001)),
        k_p_dc=float(dc.get("k_p", 0.5)), k_i_dc=float(dc.get("k_i", 10.0)),
        k_q=float(ac.get("k_q", 0.5)), k_dq=float(ac.get("k_dq", 1.0)),
        t1_ac=float(ac.get("t1", 0.1)), t2_ac=float(ac.get("t2", 0.02)))


def dq_project(re, im, theta):
    """Rotate a stationary-frame pair into the dq frame at angle theta."""
    c = math.cos(theta)
    s = math.sin(theta)
    return re * c + im * s, im * c - re * s


def dq_back(d, q, theta):
    c = math.cos(theta)
    s = math.sin(theta)
    return d * c - q * s, q * c + d * s


def dead_band(e, db):
    """Offset dead band: zero inside, shifted by the threshold outside.

    Continuous at the edges so the command has no jump as the error leaves
    the band.
    """
    if e > db:
        return e - db
    if e < -db:
        return e + db
    return 0.0


def switching_loss(g_0, i_dc, i_dc_nom, v_dc):
    """Loss conductance scales with the square of dc loading."""
    ratio = i_dc / i_dc_nom
    return g_0 * ratio * ratio * v_dc * v_dc


def pll_derivatives(p, x_pll, theta_dq, v_re, v_im):
    """Second-order PLL tracking the angle of the bus phasor.

    Phase detector is normalized by voltage magnitude (floored at 1e-6) so
    lock stiffness does not collapse with depressed voltage. Returns
    (dx_pll, dtheta_dq, omega_hat, pd).
    """
    pll = p.pll
    mag = math.hypot(v_re, v_im)
    if mag < 1e-6:
        mag = 1e-6
    c = math.cos(theta_dq)
    s = math.sin(theta_dq)
    pd = pll.k_pd * (v_im * c - v_re * s) / mag
    dx = pd / pll.t2_lf
    lf = x_pll + (pll.t1_lf / pll.t2_lf) * pd
    dtheta = pll.k_vco * lf
    omega_hat = p.omega_s + pll.k_vco * lf
    return dx, dtheta, omega_hat, pd


def ac_side_derivatives(p, i_d, i_q, v_ac_d, v_ac_q, v_t_d, v_t_q, omega_hat):
    """Series R-L dynamics of the converter coupling in the dq frame."""
    wl = omega_hat * p.l_ac
    did = (-p.r_ac * i_d + wl * i_q + v_ac_d - v_t_d) / p.l_ac
    diq = (-p.r_ac * i_q - wl * i_d + v_ac_q - v_t_q) / p.l_ac
    return did, diq


def inner_current_control(p, x_id, x_iq, i_d, i_q, id_ref, iq_ref,
                          v_ac_d, v_ac_q, omega_hat, v_dc):
    """Decoupling PI; plant-matched so the closed loop is 1/(1 + s T_I).

    Returns (dx_id, dx_iq, m_d, m_q, v_t_d, v_t_q). Modulation magnitude is
    clamped at m_max, freezing both integrators while saturated.
    """
    e_d = id_ref - i_d
    e_q = iq_ref - i_q
    u_d = (p.r_ac * x_id + p.l_ac * e_d) / p.t_i
    u_q = (p.r_ac * x_iq + p.l_ac * e_q) / p.t_i
    wl = omega_hat * p.l_ac
    v_t_d = wl * i_q + v_ac_d - u_d
    v_t_q = -wl * i_d + v_ac_q - u_q
    m_d = 2.0 * v_t_d / v_dc
    m_q = 2.0 * v_t_q / v_dc
    m_mag = math.hypot(m_d, m_q)
    if m_mag > p.m_max:
        k = p.m_max / m_mag
        m_d *= k
        m_q *= k
        v_t_d = 0.5 * m_d * v_dc
        v_t_q = 0.5 * m_q * v_dc
        dx_id = 0.0
        dx_iq = 0.0
    else:
        dx_id = e_d
        dx_iq = e_q
    return dx_id, dx_iq, m_d, m_q, v_t_d, v_t_q


def dc_balance_derivative(p, v_dc, p_ac_conv, i_dc_dev):
    """dc-link capacitor balance.

    p_ac_conv is ac power entering the converter bridge at its terminals
    (series-impedance loss already removed by the ac-side equations), i_dc_dev
    the storage-side current into the bus. Switching loss drains the link.
    """
    p_sw = switching_loss(p.g_0, i_dc_dev, p.i_dc_nom, v_dc)
    return (p_ac_conv + v_dc * i_dc_dev - p_sw) / (p.c_dc * v_dc)


def outer_dc_control(p, x_mdc, x_idc, v_dc, v_dc_ref):
    """dc-voltage regulator: measurement lag plus clamped PI to i_d_ref."""
    dx_mdc = (p.k_mdc * v_dc - x_mdc) / p.t_mdc
    e = p.k_mdc * v_dc_ref - x_mdc
    raw = p.k_p_dc * e + x_idc
    if raw > p.i_ref_max:
        id_ref = p.i_ref_max
        dx_idc = p.k_i_dc * e if e < 0.0 else 0.0
    elif raw < -p.i_ref_max:
        id_ref = -p.i_ref_max
        dx_idc = p.k_i_dc * e if e > 0.0 else 0.0
    else:
        id_ref = raw
        dx_idc = p.k_i_dc * e
    return dx_mdc, dx_idc, id_ref


def outer_ac_control(p, x_ac, v_mag_pk, v_ref_pk):
    """ac-voltage support: lead-lag from voltage error to i_q_ref.

    Realized with dc gain k_q * k_dq; the state carries the lag portion.
    """
    e = v_ref_pk - v_mag_pk
    c_direct = p.k_q * p.t2_ac / p.t1_ac
    dx_ac = (-x_ac + (p.k_q * p.k_dq - c_direct) * e) / p.t1_ac
    iq_ref = x_ac + c_direct * e
    if iq_ref > p.i_ref_max:
        iq_ref = p.i_ref_max
    elif iq_ref < -p.i_ref_max:
        iq_ref = -p.i_ref_max
    return dx_ac, iq_ref


# --- storage command path ----------------------------------------------------

@dataclass
class StorageControlConfig:
    sigma: int                  # +1: command above reference discharges
    e_sign: float
    k_pu: float
    k_iu: float
    t_f: float
    dead_band: float
    u_min: float
    u_max: float
    e_min: float
    e_min_thr: float
    e_max: float
    e_max_thr: float
    u_ref: float = 0.0


def storage_control_from_dict(d, u_ref=0.0):
    return StorageControlConfig(
        sigma=int(d["sigma"]), e_sign=float(d.get("e_sign", 1.0)),
        k_pu=float(d["k_pu"]), k_iu=float(d["k_iu"]), t_f=float(d["t_f"]),
        dead_band=float(d.get("dead_band", 0.0)),
        u_min=float(d["u_min"]), u_max=float(d["u_max"]),
        e_min=float(d["e_min"]), e_min_thr=float(d["e_min_thr"]),
        e_max=float(d["e_max"]), e_max_thr=float(d["e_max_thr"]),
        u_ref=float(u_ref))


def storage_limiter(cfg, u_hat, energy, sigma=None):
    """Scale the command toward its reference near the energy bounds.

    The scaling ramps linearly from 1 at the threshold to 0 at the bound, so
    the command is continuous in both energy and u_hat. sigma states which
    side of the reference discharges (+1: above). Only the depleting
    direction is blocked near empty and only the filling direction near full;
    the opposite command passes through untouched.
    """
    if sigma is None:
        sigma = cfg.sigma
    du = u_hat - cfg.u_ref
    d = sigma * du
    if d > 0.0:  # discharging
        if energy <= cfg.e_min:
            scale = 0.0
        elif energy >= cfg.e_min_thr:
            scale = 1.0
        else:
            scale = (energy - cfg.e_min) / (cfg.e_min_thr - cfg.e_min)
    elif d < 0.0:  # charging
        if energy >= cfg.e_max:
            scale = 0.0
        elif energy <= cfg.e_max_thr:
            scale = 1.0
        else:
            scale = (cfg.e_max - energy) / (cfg.e_max - cfg.e_max_thr)
    else:
        scale = 1.0
    return cfg.u_ref + scale * du


def storage_control(cfg, x_f, x_u, w, w_ref, energy):
    """Feedback channel -> dead band -> washout -> PI -> energy limiter.

    Returns (dx_f, dx_u, u). x_u carries the command bias (initialize at the
    equilibrium command); the washout kills dc error so steady state returns
    toward that bias. The PI output is clamped with integrator freeze before
    the energy limiter is applied.
    """
    e = dead_band(cfg.e_sign * (w - w_ref), cfg.dead_band)
    dx_f = (e - x_f) / cfg.t_f
    y_w = dx_f
    raw = cfg.k_pu * y_w + x_u
    dx_u = cfg.k_iu * y_w
    if raw > cfg.u_max:
        u_hat = cfg.u_max
        if dx_u > 0.0:
            dx_u = 0.0
    elif raw < cfg.u_min:
        u_hat = cfg.u_min
        if dx_u < 0.0:
            dx_u = 0.0
    else:
        u_hat = raw
    return dx_f, dx_u, storage_limiter(cfg, u_hat, energy)


# --- assembled converter block ----------------------------------------------

# State slots of the grid-side converter.
VSC_STATES = ("i_d", "i_q", "x_id", "x_iq", "x_pll", "theta_dq",
              "v_dc", "x_mdc", "x_idc", "x_ac")
N_VSC_STATES = len(VSC_STATES)


def vsc_state_scales(p):
    return [p.i_base_pk, p.i_base_pk, p.i_base_pk * p.t_i, p.i_base_pk * p.t_i,
            1.0, 1.0, p.v_dc_nom, p.k_mdc * p.v_dc_nom, p.i_base_pk, p.i_base_pk]


def vsc_derivatives(p, st, v_re_pu, v_im_pu, i_dc_dev, v_dc_ref, v_ac_ref_pu):
    """All ten converter state derivatives plus the network-side injection.

    st indexes VSC_STATES; bus voltage arrives in network per-unit, the
    injection is returned in SI amperes (stationary frame, peak convention)
    and the caller converts it onto whatever network base it carries.
    Returns (derivs, inj_re_si, inj_im_si, aux) with aux carrying terminal
    quantities for observers: (p_ac_bus, q_ac_bus, v_t_d, v_t_q, id_ref,
    iq_ref, m_d, m_q).
    """
    i_d = st[0]
    i_q = st[1]
    x_id = st[2]
    x_iq = st[3]
    x_pll = st[4]
    theta = st[5]
    v_dc = st[6]
    x_mdc = st[7]
    x_idc = st[8]
    x_ac = st[9]
    vb = p.v_base_pk
    v_re = v_re_pu * vb
    v_im = v_im_pu * vb
    dx_pll, dtheta, omega_hat, _ = pll_derivatives(p, x_pll, theta, v_re, v_im)
    v_ac_d, v_ac_q = dq_project(v_re, v_im, theta)
    dx_mdc, dx_idc, id_ref = outer_dc_control(p, x_mdc, x_idc, v_dc, v_dc_ref)
    v_mag = math.hypot(v_re, v_im)
    dx_ac, iq_ref = outer_ac_control(p, x_ac, v_mag, v_ac_ref_pu * vb)
    dx_id, dx_iq, m_d, m_q, v_t_d, v_t_q = inner_current_control(
        p, x_id, x_iq, i_d, i_q, id_ref, iq_ref, v_ac_d, v_ac_q, omega_hat, v_dc)
    did, diq = ac_side_derivatives(p, i_d, i_q, v_ac_d, v_ac_q, v_t_d, v_t_q, omega_hat)
    p_conv = 1.5 * (v_t_d * i_d + v_t_q * i_q)
    dv_dc = dc_balance_derivative(p, v_dc, p_conv, i_dc_dev)
    # Current drawn from the grid, returned as an injection (sign flipped).
    inj_re, inj_im = dq_back(-i_d, -i_q, theta)
    p_ac = 1.5 * (v_ac_d * i_d + v_ac_q * i_q)
    q_ac = 1.5 * (v_ac_q * i_d - v_ac_d * i_q)
    derivs = [did, diq, dx_id, dx_iq, dx_pll, dtheta, dv_dc, dx_mdc, dx_idc, dx_ac]
    aux = (p_ac, q_ac, v_t_d, v_t_q, id_ref, iq_ref, m_d, m_q)
    return derivs, inj_re, inj_im, aux


def vsc_initial_state(p, v_re_pu, v_im_pu, i_dc_dev0, v_dc0):
    """Equilibrium converter state for a given bus phasor and device draw.

    Start values only; the composed-system equilibrium refines them.
    """
    theta = math.atan2(v_im_pu, v_re_pu)
    v_mag_pk = math.hypot(v_re_pu, v_im_pu) * p.v_base_pk
    # dc power balance at zero i_q: p_conv = -v_dc i_dc + switching loss.
    p_sw = switching_loss(p.g_0, i_dc_dev0, p.i_dc_nom, v_dc0)
    p_need = -v_dc0 * i_dc_dev0 + p_sw
    i_d = p_need / (1.5 * v_mag_pk)
    st = [0.0] * N_VSC_STATES
    st[0] = i_d
    st[2] = p.t_i * i_d  # integrator carries R x / T_I = R i_d
    st[5] = theta
    st[6] = v_dc0
    st[7] = p.k_mdc * v_dc0
    st[8] = i_d
    return st


class VscBlockDae(DaeSystem):
    """Standalone converter for bench tests: inputs are the port quantities.

    nu = [v_re_pu, v_im_pu, i_dc_dev, v_dc_ref, v_ac_ref_pu]. States are
    scaled by vsc_state_scales so mixed SI magnitudes condition well.
    """

    def __init__(self, p):
        self.p = p
        self.scales = np.array(vsc_state_scales(p))
        self.gamma = np.ones(N_VSC_STATES)

    def pack(self, st_phys):
        return np.asarray(st_phys, dtype=float) / self.scales

    def unpack(self, x):
        return np.asarray(x, dtype=float) * self.scales

    def psi(self, x, nu):
        st = x * self.scales
        derivs, _, _, _ = vsc_derivatives(self.p, st, nu[0], nu[1], nu[2], nu[3], nu[4])
        return np.asarray(derivs) / self.scales

    def output(self, x, nu):
        st = x * self.scales
        derivs, inj_re, inj_im, aux = vsc_derivatives(
            self.p, st, nu[0], nu[1], nu[2], nu[3], nu[4])
        return {"inj_re_si": inj_re, "inj_im_si": inj_im,
                "p_ac": aux[0], "q_ac": aux[1], "v_t_d": aux[2], "v_t_q": aux[3],
                "id_ref": aux[4], "iq_ref": aux[5], "m_d": aux[6], "m_q": aux[7]}


def vsc_assemble(params_dict, overrides=None):
    """Build the standalone converter block from a case-file section."""
    return VscBlockDae(vsc_params_from_dict(params_dict, overrides))
