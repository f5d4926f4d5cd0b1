"""Detailed storage-device models behind the converter dc bus.

Four technologies share one block interface: a state vector split into
retained coordinates x (the ones a reduced model keeps) and internal
coordinates z, a 0/1 mask per row, equations psi(xz, u, v_dc), the dc-port
current into the bus, a stored-energy expression, and an equilibrium
constructor. Internals are SI; per-state scales are provided so composed
systems condition well. Each model also carries a current operating state
as plain attributes, which is what the flat equation functions read.

Port convention: i_dc > 0 means the device feeds the dc bus (discharging).
The battery equations are commonly written with the opposite orientation;
bes_equations returns that form and the block's i_dc() flips it.

  superconducting coil (smes): chopper duty u; u above 0.5 charges.
  supercapacitor (eces):       chopper duty u; raising u charges (the duty
                               raises the counter-voltage on the capacitor).
  compressed air (caes):       commanded inlet-volume flow u (m^3/s); u > 0
                               pumps air in; the motor-compressor train hangs
                               off the dc bus through its own converter.
  battery (bes):               chopper duty u; raising u lowers the imposed
                               stack voltage, raising discharge current.
"""

import math

import numpy as np

from . import numerics


class NonPhysical(Exception):
    """Operating point outside the model's physical domain."""


class SocOutOfRange(Exception):
    """Battery charge state left (0, 1]."""


class UnknownTechnology(Exception):
    pass


# --- equation-level functions -------------------------------------------------

def eces_derivatives(m, s, v_dc):
    """Supercapacitor bank behind a buck-boost stage.

    Returns (dv_sc/dt, di_sc/dt, i_dc).
    """
    dv = -(m.i_sc + m.g_sc * m.v_sc) / m.c_sc
    di = (m.v_sc - m.r_sc * m.i_sc - v_dc * s) / m.l_sc
    return dv, di, s * m.i_sc


def eces_energy(m):
    return 0.5 * m.c_sc * m.v_sc * m.v_sc + 0.5 * m.l_sc * m.i_sc * m.i_sc


def smes_equations(m, s, v_dc):
    """Coil + two-quadrant chopper.

    Returns (di_c/dt, chopper voltage residual, i_dc).
    """
    di = -m.v_c / m.l_c
    alg = (1.0 - 2.0 * s) * v_dc - m.v_c
    return di, alg, (1.0 - 2.0 * s) * m.i_c


def smes_energy(m):
    return 0.5 * m.l_c * m.i_c * m.i_c


def caes_pressure_derivative(m, q):
    """Tank pressure rate for commanded inlet-condition volume flow q.

    Ideal gas at held tank temperature: the rate is flow times the ambient
    density term rho*R*theta2/pi_m over the tank volume.
    """
    if m.pi2 < m.pi1:
        raise NonPhysical("tank pressure below ambient")
    return m.density_term * q / m.vol


def caes_machine_equations(m, q, v_dc):
    """Power train + induction machine + converter equation set.

    Returns (z-block residuals, domega/dt, i_dc) at the model's current
    state. The same rows back the block's psi; this is the named entry
    point for working a single evaluation by hand.
    """
    rows = m.psi(m.get_state(), q, v_dc)
    return rows[2:], rows[1], m.i_dc(m.get_state(), q, v_dc)


def caes_energy(m):
    g = m.gamma_air
    ex = (g - 1.0) / g
    return ((g / (g - 1.0)) * m.pi1 * m.vol * ((m.pi2 / m.pi1) ** ex - 1.0)
            + m.h * m.omega * m.omega)


def bes_polarization(m, i_m, q_e):
    """Shepherd-style polarization voltage; separate discharge/charge branches.

    The branches agree exactly at i_m = 0, so crossing the mode boundary
    leaves every algebraic quantity continuous. m.branch_override, when set
    to "discharge" or "charge", forces that branch formula regardless of the
    sign of i_m; linearization probes use it to expand one branch at a time.
    """
    soc = 1.0 - q_e / m.q_n
    if soc <= 0.0 or soc > 1.0:
        raise SocOutOfRange("soc %.4f" % soc)
    branch = getattr(m, "branch_override", None)
    if branch is None:
        branch = "discharge" if i_m > 0.0 else "charge"
    if branch == "discharge":
        return (m.r_p * i_m + m.k_p * q_e) / soc
    return m.r_p * i_m / (q_e / m.q_n + 0.1) + m.k_p * q_e / soc


def bes_equations(m, s, v_dc):
    """Battery stack equation set at the model's current state.

    Returns (dq_e/dt, di_m/dt, stack-voltage residual, cell-voltage residual,
    polarization residual, i_dc) with i_dc in the bus-to-stack orientation
    the stack equations are written in (positive while charging).
    """
    dq = m.i_b / 3600.0
    dim = (m.i_b - m.i_m) / m.t_m
    res_vb = (1.0 - 2.0 * s) * v_dc - m.n_s * m.v_b
    res_ib = (m.v_oc - m.v_p + m.v_e * math.exp(-m.beta_e * m.q_e)
              - m.r_i * m.i_b - m.v_b)
    res_vp = m.v_p - bes_polarization(m, m.i_m, m.q_e)
    i_dc = -(1.0 - 2.0 * s) * m.n_p * m.i_b
    return dq, dim, res_vb, res_ib, res_vp, i_dc


# --- device blocks ------------------------------------------------------------

class SmesModel:
    name = "smes"
    x_names = ("i_c", "v_c")
    z_names = ()
    nx = 2
    nz = 0

    def __init__(self, p, v_dc_nom):
        self.l_c = float(p["l_c"])
        self.i_rated = float(p["i_rated"])
        self.i_c0 = float(p.get("i_c0", self.i_rated * math.sqrt(0.5)))
        self.v_dc_nom = v_dc_nom
        self.gamma = np.array([1.0, 0.0])
        self.u_scale = 1.0
        self.x_scales = [self.i_rated, v_dc_nom]
        self.z_scales = []
        self.row_scales = [self.i_rated, v_dc_nom]
        self.i_c = self.i_c0
        self.v_c = 0.0

    def get_state(self):
        return [self.i_c, self.v_c]

    def set_state(self, xz):
        self.i_c, self.v_c = float(xz[0]), float(xz[1])

    def psi(self, xz, u, v_dc):
        i_c, v_c = xz
        return [-v_c / self.l_c, (1.0 - 2.0 * u) * v_dc - v_c]

    def i_dc(self, xz, u, v_dc):
        return (1.0 - 2.0 * u) * xz[0]

    def port_power_internal(self, xz, u, v_dc):
        return xz[1] * xz[0]  # coil terminal power v_c*i_c

    def energy(self, xz):
        return 0.5 * self.l_c * xz[0] * xz[0]

    def energy_params(self):
        return [0.5 * self.l_c, 0.0], [2.0, 1.0], [0.0, 0.0]

    def default_target(self):
        return {"i_c": self.i_c0}

    def equilibrium_guess(self, v_dc0, target=None):
        target = target or self.default_target()
        if "i_c" in target:
            i_c = float(target["i_c"])
        elif "energy" in target:
            i_c = math.sqrt(2.0 * float(target["energy"]) / self.l_c)
        else:
            i_c = self.i_c0
        # idle coil: zero chopper voltage, duty exactly one half
        return [i_c, 0.0], 0.5


class EcesModel:
    name = "eces"
    x_names = ("v_sc", "i_sc")
    z_names = ()
    nx = 2
    nz = 0

    def __init__(self, p, v_dc_nom):
        self.c_sc = float(p["c_sc"])
        self.l_sc = float(p["l_sc"])
        self.r_sc = float(p["r_sc"])
        self.g_sc = float(p["g_sc"])
        self.v_sc0 = float(p.get("v_sc0", 5000.0))
        self.v_dc_nom = v_dc_nom
        self.gamma = np.array([1.0, 1.0])
        self.u_scale = 1.0
        i_rate = float(p.get("i_rate", 3000.0))
        self.x_scales = [self.v_sc0, i_rate]
        self.z_scales = []
        self.row_scales = list(self.x_scales)
        self.v_sc = self.v_sc0
        self.i_sc = -self.g_sc * self.v_sc0

    def get_state(self):
        return [self.v_sc, self.i_sc]

    def set_state(self, xz):
        self.v_sc, self.i_sc = float(xz[0]), float(xz[1])

    def psi(self, xz, u, v_dc):
        v_sc, i_sc = xz
        return [-(i_sc + self.g_sc * v_sc) / self.c_sc,
                (v_sc - self.r_sc * i_sc - v_dc * u) / self.l_sc]

    def i_dc(self, xz, u, v_dc):
        return u * xz[1]

    def port_power_internal(self, xz, u, v_dc):
        # chopper device-side terminal: capacitor voltage minus drops
        v_sc, i_sc = xz
        di = (v_sc - self.r_sc * i_sc - v_dc * u) / self.l_sc
        return (v_sc - self.r_sc * i_sc - self.l_sc * di) * i_sc

    def energy(self, xz):
        return 0.5 * self.c_sc * xz[0] * xz[0] + 0.5 * self.l_sc * xz[1] * xz[1]

    def energy_params(self):
        return [0.5 * self.c_sc, 0.5 * self.l_sc], [2.0, 2.0], [0.0, 0.0]

    def default_target(self):
        return {"v_sc": self.v_sc0}

    def equilibrium_guess(self, v_dc0, target=None):
        target = target or self.default_target()
        if "v_sc" in target:
            v_sc = float(target["v_sc"])
        elif "energy" in target:
            v_sc = math.sqrt(2.0 * float(target["energy"]) / self.c_sc)
        else:
            v_sc = self.v_sc0
        i_sc = -self.g_sc * v_sc  # leakage supplied through the chopper
        s = (v_sc - self.r_sc * i_sc) / v_dc0
        return [v_sc, i_sc], s


CAES_Z = ("p_ef", "p_m", "t_m", "t_el", "p_el", "slip", "omega_r",
          "psi_ds", "psi_qs", "psi_dr", "psi_qr",
          "i_ds", "i_qs", "i_dr", "i_qr",
          "v_ds", "v_qs", "v_mds", "v_mqs", "x_md", "x_mq",
          "mhat_d", "mhat_q", "p_s", "i_dc_m")


class CaesModel:
    """Tank + induction motor-compressor train on its own dc-fed converter.

    One equivalent machine works as compressor for u > 0 and turbine for
    u < 0. The machine runs per-unit on its own base at fixed stator
    frequency; a voltage PI holds stator magnitude against dc-bus swings.
    Commanded flow sets the adiabatic head power, mapped to shaft torque at
    the solved speed. The field h is half the train moment of inertia
    (kg m^2), so the shaft equation reads domega = (t_el - t_m)/(2h) and the
    kinetic term of the stored energy is h*omega^2.
    """

    name = "caes"
    x_names = ("pi2", "omega")
    z_names = CAES_Z
    nx = 2
    nz = 25

    def __init__(self, p, v_dc_nom):
        self.vol = float(p["vol"])
        self.pi1 = float(p["pi1"])
        self.pi2_0 = float(p.get("pi2_0", 30.0e5))
        self.gamma_air = float(p["gamma_air"])
        self.theta2 = float(p["theta2"])
        self.rho = float(p["rho"])
        self.r_gas = float(p["r_gas"])
        self.pi_m = float(p["pi_m"])
        self.density_term = self.rho * self.r_gas * self.theta2 / self.pi_m
        self.eta_m = float(p["eta_m"])
        self.u_scale = float(p.get("q_rated", 26.0))
        self.v_dc_nom = v_dc_nom
        m = p["machine"]
        self.s_m = float(m["s_rated"])
        self.n_pp = float(m["n_p"])
        self.omega_1n = 2.0 * math.pi * float(m["f_n"])
        self.omega_nom = self.omega_1n / self.n_pp
        self.v_base_pk = math.sqrt(2.0 / 3.0) * float(m["v_ll"])
        self.t_base = self.s_m / self.omega_nom
        self.h = float(m["h"])
        self.x_mach = float(m["x_m"])
        self.x_s = float(m["x_ls"]) + self.x_mach
        self.x_r = float(m["x_lr"]) + self.x_mach
        self.r_s = float(m["r_s"])
        self.r_r = float(m["r_r"])
        self.k_p_v = float(m["k_p_v"])
        self.k_i_v = float(m["k_i_v"])
        self.t_m_v = float(m["t_m_v"])
        self.v_set = float(m.get("v_set", 1.0))
        self.gamma = np.array(
            [1.0, 1.0]
            + [0.0] * 7 + [1.0] * 4 + [0.0] * 4 + [0.0] * 2
            + [1.0] * 2 + [1.0] * 2 + [0.0] * 2 + [0.0, 0.0])
        s_m = self.s_m
        tb = self.t_base
        self.x_scales = [self.pi2_0, self.omega_nom]
        self.z_scales = [s_m, s_m, tb, tb, s_m, 1.0, 1.0,
                         1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0,
                         1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0,
                         s_m, s_m / v_dc_nom]
        self.row_scales = ([self.pi2_0, self.omega_nom]
                           + [s_m, s_m, tb, tb, s_m, 1.0, 1.0]
                           + [self.omega_1n] * 4 + [1.0] * 4 + [1.0] * 2
                           + [1.0] * 2 + [1.0] * 2 + [1.0] * 2
                           + [s_m, s_m / v_dc_nom])
        xz0, _ = self.equilibrium_guess(v_dc_nom)
        self.set_state(xz0)

    @property
    def pi2(self):
        return self._xz[0]

    @property
    def omega(self):
        return self._xz[1]

    def get_state(self):
        return list(self._xz)

    def set_state(self, xz):
        self._xz = [float(v) for v in xz]

    def head_power(self, pi2, q):
        """Adiabatic head power for flow q against tank pressure pi2."""
        if pi2 < self.pi1:
            raise NonPhysical("tank pressure below ambient")
        g = self.gamma_air
        ex = (g - 1.0) / g
        return (g / (g - 1.0)) * self.pi1 * q * ((pi2 / self.pi1) ** ex - 1.0)

    def psi(self, xz, u, v_dc):
        pi2 = xz[0]
        omega = xz[1]
        (p_ef, p_m, t_m, t_el, p_el, slip, omega_r,
         psi_ds, psi_qs, psi_dr, psi_qr,
         i_ds, i_qs, i_dr, i_qr,
         v_ds, v_qs, v_mds, v_mqs, x_md, x_mq,
         mhat_d, mhat_q, p_s, i_dc_m) = xz[2:]
        if pi2 < self.pi1:
            raise NonPhysical("tank pressure below ambient")
        w1 = self.omega_1n
        r_s = self.r_s
        r_r = self.r_r
        half_ratio = v_dc / (2.0 * self.v_base_pk)
        return [
            self.density_term * u / self.vol,
            (t_el - t_m) / (2.0 * self.h),
            p_ef - self.eta_m * p_m,
            self.head_power(pi2, u) - p_ef,
            t_m * omega - p_m,
            t_el - self.t_base * (psi_ds * i_qs - psi_qs * i_ds),
            p_el - self.s_m * (v_ds * i_ds + v_qs * i_qs),
            slip - (1.0 - omega_r),
            omega_r - self.n_pp * omega / w1,
            w1 * (v_ds - r_s * i_ds + psi_qs),
            w1 * (v_qs - r_s * i_qs - psi_ds),
            w1 * (slip * psi_qr - r_r * i_dr),
            w1 * (-slip * psi_dr - r_r * i_qr),
            psi_ds - self.x_s * i_ds - self.x_mach * i_dr,
            psi_qs - self.x_s * i_qs - self.x_mach * i_qr,
            psi_dr - self.x_r * i_dr - self.x_mach * i_ds,
            psi_qr - self.x_r * i_qr - self.x_mach * i_qs,
            v_ds - mhat_d * half_ratio,
            v_qs - mhat_q * half_ratio,
            (v_ds - v_mds) / self.t_m_v,
            (v_qs - v_mqs) / self.t_m_v,
            self.k_i_v * (self.v_set - v_mds),
            self.k_i_v * (0.0 - v_mqs),
            mhat_d - (self.k_p_v * (self.v_set - v_mds) + x_md),
            mhat_q - (self.k_p_v * (0.0 - v_mqs) + x_mq),
            p_s - p_el,
            i_dc_m * v_dc + p_s,
        ]

    def i_dc(self, xz, u, v_dc):
        return xz[2 + 24]  # i_dc_m slot

    def port_power_internal(self, xz, u, v_dc):
        return -xz[2 + 23]  # -p_s: electrical power leaving the machine

    def energy(self, xz):
        g = self.gamma_air
        ex = (g - 1.0) / g
        return ((g / (g - 1.0)) * self.pi1 * self.vol
                * ((xz[0] / self.pi1) ** ex - 1.0) + self.h * xz[1] * xz[1])

    def energy_params(self):
        g = self.gamma_air
        ex = (g - 1.0) / g
        rho1 = (g / (g - 1.0)) * self.vol * self.pi1 ** (1.0 - ex)
        return [rho1, self.h], [ex, 2.0], [self.pi1, 0.0]

    def default_target(self):
        return {"pi2": self.pi2_0}

    def equilibrium_guess(self, v_dc0, target=None):
        target = target or self.default_target()
        pi2 = float(target.get("pi2", self.pi2_0))
        den = self.x_s ** 2 + self.r_s ** 2
        i_ds = self.v_set * self.r_s / den
        i_qs = -self.v_set * self.x_s / den
        psi_ds = self.x_s * i_ds
        psi_qs = self.x_s * i_qs
        p_el = self.s_m * self.v_set * i_ds
        mhat_d = 2.0 * self.v_base_pk * self.v_set / v_dc0
        z = [0.0, 0.0, 0.0, 0.0, p_el, 0.0, 1.0,
             psi_ds, psi_qs, self.x_mach * i_ds, self.x_mach * i_qs,
             i_ds, i_qs, 0.0, 0.0,
             self.v_set, 0.0, self.v_set, 0.0, mhat_d, 0.0,
             mhat_d, 0.0, p_el, -p_el / v_dc0]
        return [pi2, self.omega_nom] + z, 0.0


class BesModel:
    name = "bes"
    x_names = ("q_e", "v_b")
    z_names = ("i_b", "i_m", "v_p")
    nx = 2
    nz = 3
    branch_override = None

    def __init__(self, p, v_dc_nom):
        self.n_s = float(p["n_s"])
        self.n_p = float(p["n_p"])
        self.q_n = float(p["q_n"])
        self.v_oc = float(p["v_oc"])
        self.v_e = float(p["v_e"])
        self.beta_e = float(p["beta_e"])
        self.r_i = float(p["r_i"])
        self.r_p = float(p["r_p"])
        self.k_p = float(p["k_p"])
        self.t_m = float(p["t_m"])
        self.soc0 = float(p.get("soc0", 0.85))
        self.v_dc_nom = v_dc_nom
        self.u_scale = 1.0
        self.gamma = np.array([1.0, 0.0, 0.0, 1.0, 0.0])
        i_cell = float(p.get("i_cell_rate",
                             55e6 / (self.n_s * self.n_p * self.v_oc)))
        self.x_scales = [self.q_n, self.v_oc]
        self.z_scales = [i_cell, i_cell, 1.0]
        self.row_scales = [i_cell / 3600.0, v_dc_nom, self.v_oc, i_cell, 1.0]
        xz0, _ = self.equilibrium_guess(v_dc_nom)
        self.set_state(xz0)

    @property
    def mode(self):
        return "discharge" if self.i_m > 0.0 else "charge"

    def get_state(self):
        return [self.q_e, self.v_b, self.i_b, self.i_m, self.v_p]

    def set_state(self, xz):
        self.q_e, self.v_b, self.i_b, self.i_m, self.v_p = (float(v) for v in xz)

    def psi(self, xz, u, v_dc):
        q_e, v_b, i_b, i_m, v_p = xz
        return [
            i_b / 3600.0,
            (1.0 - 2.0 * u) * v_dc - self.n_s * v_b,
            (self.v_oc - v_p + self.v_e * math.exp(-self.beta_e * q_e)
             - self.r_i * i_b - v_b),
            (i_b - i_m) / self.t_m,
            v_p - bes_polarization(self, i_m, q_e),
        ]

    def i_dc(self, xz, u, v_dc):
        # stack equations orient dc current bus-to-stack; the port wants
        # stack-to-bus
        return (1.0 - 2.0 * u) * self.n_p * xz[2]

    def port_power_internal(self, xz, u, v_dc):
        return self.n_s * xz[1] * self.n_p * xz[2]  # stack terminal power

    def energy(self, xz):
        """Charge state, dimensionless; the limiter window is in soc units."""
        return 1.0 - xz[0] / self.q_n

    def energy_params(self):
        return [-1.0 / self.q_n, 0.0], [1.0, 1.0], [self.q_n, 0.0]

    def default_target(self):
        return {"soc": self.soc0}

    def equilibrium_guess(self, v_dc0, target=None):
        target = target or self.default_target()
        soc = float(target.get("soc", self.soc0))
        q_e = (1.0 - soc) * self.q_n
        v_p = (0.0 + self.k_p * q_e) / soc
        v_b = self.v_oc - v_p + self.v_e * math.exp(-self.beta_e * q_e)
        s = 0.5 * (1.0 - self.n_s * v_b / v_dc0)
        return [q_e, v_b, 0.0, 0.0, v_p], s


TECHNOLOGIES = {"smes": SmesModel, "eces": EcesModel, "caes": CaesModel, "bes": BesModel}


def device_model(tech, params, v_dc_nom):
    """Instantiate a device block by technology name."""
    if tech not in TECHNOLOGIES:
        raise UnknownTechnology("no device model %r" % tech)
    return TECHNOLOGIES[tech](params, v_dc_nom)


class DeviceDae(numerics.DaeSystem):
    """Standalone device integration at externally imposed (u, v_dc).

    States are the device's xz scaled per entry; nu = [u, v_dc]. Differential
    rows divide by the state scale so the scaled residual is the scaled
    state's rate; algebraic rows divide by their natural magnitude.
    """

    def __init__(self, model):
        self.model = model
        self.gamma = np.asarray(model.gamma, dtype=float)
        sc = list(model.x_scales) + list(model.z_scales)
        self.scales = np.asarray(sc, dtype=float)
        rs = np.asarray(model.row_scales, dtype=float)
        self.row_div = np.where(self.gamma > 0.0, self.scales, rs)

    def pack(self, xz):
        return np.asarray(xz, dtype=float) / self.scales

    def unpack(self, state):
        return np.asarray(state, dtype=float) * self.scales

    def psi(self, state, nu):
        xz = (state * self.scales).tolist()
        rows = self.model.psi(xz, nu[0], nu[1])
        return np.asarray(rows, dtype=float) / self.row_div

    def output(self, state, nu):
        xz = (state * self.scales).tolist()
        return {"i_dc": self.model.i_dc(xz, nu[0], nu[1]),
                "energy": self.model.energy(xz)}


def _target_row(model, xz, u, v_dc0, key, value):
    if key == "soc" or key == "energy":
        e = model.energy(xz)
        return (e - value) / max(abs(value), 1.0)
    if key == "i_dc":
        return model.i_dc(xz, u, v_dc0) - value
    names = list(model.x_names) + list(model.z_names)
    if key in names:
        k = names.index(key)
        scales = list(model.x_scales) + list(model.z_scales)
        return (xz[k] - value) / scales[k]
    raise ValueError("unknown equilibrium target %r" % key)


def detailed_equilibrium(model, v_dc0, target=None):
    """Solve the device's operating point at a given dc voltage.

    target pins one quantity (a state by name, "energy"/"soc", or "i_dc");
    the command u is free, making the system square. Newton-polishes the
    model's analytic guess and returns (xz0, u0, i_dc0), updating the
    model's state attributes. Raises NoConvergence if the solve fails.
    """
    target = target or model.default_target()
    if len(target) != 1:
        raise ValueError("exactly one target quantity expected")
    (key, value), = target.items()
    guess_xz, guess_u = model.equilibrium_guess(v_dc0, target)
    scales = np.asarray(list(model.x_scales) + list(model.z_scales), dtype=float)
    rows_div = np.asarray(model.row_scales, dtype=float)

    def f(vec):
        xz = (vec[:-1] * scales).tolist()
        u = vec[-1]
        rows = np.asarray(model.psi(xz, u, v_dc0), dtype=float) / rows_div
        extra = _target_row(model, xz, u, v_dc0, key, float(value))
        return np.concatenate([rows, [extra]])

    vec0 = np.concatenate([np.asarray(guess_xz) / scales, [guess_u]])
    # polish to machine precision so integrations start exactly at rest
    sol = numerics.newton_solve(f, vec0, tol=1e-12)
    xz0 = (sol[:-1] * scales).tolist()
    u0 = float(sol[-1])
    model.set_state(xz0)
    return xz0, u0, model.i_dc(xz0, u0, v_dc0)
