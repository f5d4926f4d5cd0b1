"""Composed transient model: machines, network, and one storage block.

The scaled state vector concatenates

    machine blocks, nine states each          differential
    bus voltages, real parts then imaginary   algebraic
    storage chunk, layout set by the variant  mixed

Variant chunks:
    detailed     converter (10) + command path (x_f, x_u) + device x and z
    generalized  converter (10) + command path (x_f, x_u) + reduced x
    simplified   seven control-block states, P + jQ injected at the bus
    none         empty

Algebraic rows are the rectangular current balance at every bus: admittance
and load currents minus machine and storage injections. Loads are constant
admittance, each scaled by one entry of the input vector nu (aligned with
tables.load_bus_idx), so stochastic load noise enters as an input instead of
a table rewrite. Discrete events mutate `tables` between steps; afterwards
re-solve the algebraic rows and invalidate any cached step Jacobian.

Sign conventions at the storage bus: reported p_ess / q_ess are injections
into the grid (positive while discharging). The simplified block keeps its
own load notation internally; measurement flips the sign once, here.
"""

import math

import numpy as np

from . import numerics
from .ess_detailed import (NonPhysical, SocOutOfRange, detailed_equilibrium,
                           device_model)
from .ess_generalized import (build_generalized, default_build_target,
                              gen_derivatives, gen_energy)
from .ess_simplified import EnergyWindow, SimplifiedEss, simplified_derivatives
from .network import (MACHINE_STATES, NetworkTables, branch_flows,
                      coi_frequency, init_machines, machine_derivatives,
                      solve_power_flow)
from .vsc import (N_VSC_STATES, storage_control, storage_control_from_dict,
                  switching_loss, vsc_derivatives, vsc_initial_state,
                  vsc_params_from_dict, vsc_state_scales)

N_MACHINE_STATES = len(MACHINE_STATES)

VARIANTS = ("none", "detailed", "generalized", "simplified")


def _injection_scale(vsc_p, base_mva):
    # S = 1.5 v_pk conj(i_pk); converts SI peak amperes to network pu current
    return 1.5 * vsc_p.v_base_pk / (base_mva * 1e6)


class _ConverterChunk:
    """Storage behind the converter: detailed device or compiled reduction.

    Owns the command path (washout + PI of vsc.storage_control) and the
    port bookkeeping. v_dc_ref / v_ac_ref are set by the equilibrium solve.
    """

    def __init__(self, kind, vsc_p, cfg, base_mva, model=None, gen=None):
        self.kind = kind
        self.p = vsc_p
        self.cfg = cfg
        self.model = model
        self.gen = gen
        self.k_inj = _injection_scale(vsc_p, base_mva)
        self.s_base = base_mva * 1e6
        self.v_dc_ref = vsc_p.v_dc_nom
        self.v_ac_ref = 1.0
        vsc_sc = list(vsc_state_scales(vsc_p))
        if kind == "detailed":
            dev_gamma = np.asarray(model.gamma, dtype=float)
            dev_sc = list(model.x_scales) + list(model.z_scales)
            dev_row = list(np.where(dev_gamma > 0.0, dev_sc, model.row_scales))
            u_scale = model.u_scale
        else:
            dev_gamma = np.asarray(gen.gamma, dtype=float)
            dev_sc = list(gen.x_scales)
            dev_row = list(np.where(dev_gamma > 0.0, gen.x_scales, gen.row_scales))
            u_scale = model.u_scale if model is not None else 1.0
        self.n = N_VSC_STATES + 2 + len(dev_sc)
        self.gamma = np.concatenate([np.ones(N_VSC_STATES + 2), dev_gamma])
        self.scales = np.asarray(vsc_sc + [1.0, u_scale] + dev_sc, dtype=float)
        self.row_div = np.asarray(vsc_sc + [1.0, u_scale] + dev_row, dtype=float)

    def initial(self, v_re_pu, v_im_pu):
        """Physical chunk start values at a solved bus phasor."""
        if self.kind == "detailed":
            dev0 = list(self.model.get_state())
            u0 = self.cfg.u_ref
            i_dc0 = self.model.i_dc(dev0, u0, self.p.v_dc_nom)
        else:
            dev0 = list(self.gen.x0)
            u0 = self.gen.u0
            i_dc0 = self.gen.i_dc0
        vsc0 = vsc_initial_state(self.p, v_re_pu, v_im_pu, i_dc0, self.p.v_dc_nom)
        return vsc0 + [0.0, u0] + dev0

    def _command(self, st, w, w_ref):
        xz = st[N_VSC_STATES + 2:]
        if self.kind == "detailed":
            energy = self.model.energy(xz)
        else:
            energy = gen_energy(self.gen, xz)
        dx_f, dx_u, u = storage_control(
            self.cfg, st[N_VSC_STATES], st[N_VSC_STATES + 1], w, w_ref, energy)
        return xz, energy, dx_f, dx_u, u

    def rows(self, st, v_re_pu, v_im_pu, w, w_ref):
        """Chunk row values plus the complex network-pu injection."""
        xz, _, dx_f, dx_u, u = self._command(st, w, w_ref)
        v_dc = st[6]
        if self.kind == "detailed":
            dev_rows = self.model.psi(xz, u, v_dc)
            i_dc = self.model.i_dc(xz, u, v_dc)
        else:
            dev_rows, i_dc = gen_derivatives(self.gen, xz, u, v_dc)
        derivs, inj_re, inj_im, _ = vsc_derivatives(
            self.p, st, v_re_pu, v_im_pu, i_dc, self.v_dc_ref, self.v_ac_ref)
        out = np.empty(self.n)
        out[:N_VSC_STATES] = derivs
        out[N_VSC_STATES] = dx_f
        out[N_VSC_STATES + 1] = dx_u
        out[N_VSC_STATES + 2:] = dev_rows
        return out, self.k_inj * complex(inj_re, inj_im)

    def measure(self, st, v_re_pu, v_im_pu, w, w_ref):
        xz, energy, _, _, u = self._command(st, w, w_ref)
        v_dc = st[6]
        if self.kind == "detailed":
            i_dc = self.model.i_dc(xz, u, v_dc)
        else:
            i_dc = gen_derivatives(self.gen, xz, u, v_dc)[1]
        _, _, _, aux = vsc_derivatives(
            self.p, st, v_re_pu, v_im_pu, i_dc, self.v_dc_ref, self.v_ac_ref)
        p_ac, q_ac = aux[0], aux[1]
        return {"p_ess": -p_ac / self.s_base, "q_ess": -q_ac / self.s_base,
                "v_dc": v_dc, "u_cmd": u, "energy": energy}


class _SimplifiedChunk:
    """Direct P + jQ injection; no converter, no dc link.

    The block works in network per-unit throughout, so the chunk scales are
    all one. p_bias carries the stand-in technology's equilibrium draw so a
    variant swap leaves the network operating point untouched.
    """

    kind = "simplified"
    n = 7

    def __init__(self, block, p_bias=0.0):
        self.block = block
        self.p_bias = p_bias
        self.v_ac_ref = 1.0
        self.gamma = np.ones(self.n)
        self.scales = np.ones(self.n)
        self.row_div = np.ones(self.n)

    def initial(self, v_re_pu, v_im_pu):
        # PI integrator holds the loss bias; every other block starts at rest
        return [0.0, self.p_bias, self.p_bias, 0.0, 0.0, 0.0, 0.0]

    def _eval(self, st, v_mag, w, w_ref):
        self.block.set_state(st)
        return simplified_derivatives(self.block, w, w_ref, v_mag, self.v_ac_ref)

    def rows(self, st, v_re_pu, v_im_pu, w, w_ref):
        v = complex(v_re_pu, v_im_pu)
        derivs, p_out, q_out = self._eval(st, abs(v), w, w_ref)
        # S = v conj(i); the block absorbs (p_out + j q_out)
        inj = -((p_out + 1j * q_out) / v).conjugate()
        return np.asarray(derivs, dtype=float), inj

    def measure(self, st, v_re_pu, v_im_pu, w, w_ref):
        v_mag = math.hypot(v_re_pu, v_im_pu)
        _, p_out, q_out = self._eval(st, v_mag, w, w_ref)
        return {"p_ess": -p_out, "q_ess": -q_out, "energy": self.block.e_ess}


class GridDae(numerics.DaeSystem):
    """The composed DAE. nu holds one multiplier per load bus."""

    def __init__(self, case, tables, machines, ess=None, ess_bus=None,
                 w_signal=("coi",)):
        self.case = case
        self.tables = tables
        self.machines = machines
        self.ess = ess
        self.ess_bus = ess_bus
        self.n_bus = len(case.buses)
        nm = len(machines)
        self.iv0 = N_MACHINE_STATES * nm
        self.ie0 = self.iv0 + 2 * self.n_bus
        n = self.ie0 + (ess.n if ess is not None else 0)
        self.n = n
        self.gamma = np.zeros(n)
        self.scales = np.ones(n)
        self.row_div = np.ones(n)
        self.gamma[:self.iv0] = 1.0
        if ess is not None:
            self.gamma[self.ie0:] = ess.gamma
            self.scales[self.ie0:] = ess.scales
            self.row_div[self.ie0:] = ess.row_div
        self._h = [mb.h for mb in machines]
        self._s = [mb.s_base for mb in machines]
        self.w_ref = 1.0
        self.w_kind = w_signal[0]
        if self.w_kind == "branch_p":
            f, t = w_signal[1], w_signal[2]
            hit = [k for k, br in enumerate(case.branches)
                   if (br.from_bus, br.to_bus) in ((f, t), (t, f))]
            if not hit:
                raise ValueError("no branch %r-%r for the w signal" % (f, t))
            self._wb_k = hit[0]
            br = case.branches[self._wb_k]
            self._wb_ij = (case.bus_index(f), case.bus_index(t))
            self._wb_ys = 1.0 / complex(br.r, br.x)
            self._wb_ysh = complex(0.0, br.b / 2.0)
        elif self.w_kind != "coi":
            raise ValueError("unknown w signal %r" % (self.w_kind,))

    def nu0(self):
        return np.ones(len(self.tables.load_bus_idx))

    def _w(self, st, vc):
        if self.w_kind == "coi":
            omegas = [st[N_MACHINE_STATES * i + 1] for i in range(len(self.machines))]
            return coi_frequency(omegas, self._h, self._s)
        if not self.tables.in_service[self._wb_k]:
            return 0.0
        i, j = self._wb_ij
        s = vc[i] * ((vc[i] - vc[j]) * self._wb_ys + vc[i] * self._wb_ysh).conjugate()
        return s.real

    def psi(self, x, nu):
        st = x * self.scales
        tb = self.tables
        nb = self.n_bus
        vre = st[self.iv0:self.iv0 + nb]
        vim = st[self.iv0 + nb:self.iv0 + 2 * nb]
        vc = vre + 1j * vim
        cur = tb.ybus @ vc
        if tb.fault_bus is not None:
            cur[tb.fault_bus] += tb.fault_y * vc[tb.fault_bus]
        for j, k in enumerate(tb.load_bus_idx):
            mult = nu[j] if j < len(nu) else 1.0
            cur[k] += tb.load_y[k] * mult * vc[k]
        rows = np.empty(self.n)
        for i, mb in enumerate(self.machines):
            b = N_MACHINE_STATES * i
            derivs, i_re, i_im = machine_derivatives(
                mb, st[b:b + N_MACHINE_STATES], vre[mb.bus_idx], vim[mb.bus_idx])
            rows[b:b + N_MACHINE_STATES] = derivs
            cur[mb.bus_idx] -= complex(i_re, i_im)
        if self.ess is not None:
            k = self.ess_bus
            erows, inj = self.ess.rows(
                st[self.ie0:], vre[k], vim[k], self._w(st, vc), self.w_ref)
            rows[self.ie0:] = erows
            cur[k] -= inj
        rows[self.iv0:self.iv0 + nb] = cur.real
        rows[self.iv0 + nb:self.iv0 + 2 * nb] = cur.imag
        return rows / self.row_div

    def output(self, x, nu):
        st = x * self.scales
        nb = self.n_bus
        vre = st[self.iv0:self.iv0 + nb]
        vim = st[self.iv0 + nb:self.iv0 + 2 * nb]
        vc = vre + 1j * vim
        out = {}
        omegas = [st[N_MACHINE_STATES * i + 1] for i in range(len(self.machines))]
        out["omega_coi"] = coi_frequency(omegas, self._h, self._s)
        for i, w in enumerate(omegas):
            out["omega_g%d" % (i + 1)] = w
        for k, bus in enumerate(self.case.buses):
            out["v%d" % bus.id] = abs(vc[k])
        for key, s in branch_flows(self.case, self.tables, vc).items():
            out["p_%s" % key.replace("-", "_")] = s.real
        out["w"] = self._w(st, vc)
        if self.ess is not None:
            k = self.ess_bus
            out["p_ess"] = 0.0
            out["q_ess"] = 0.0
            out.update(self.ess.measure(
                st[self.ie0:], vre[k], vim[k], out["w"], self.w_ref))
        else:
            out["p_ess"] = 0.0
            out["q_ess"] = 0.0
        return out

    def channel_names(self, nu=None):
        x0 = getattr(self, "x0", None)
        if x0 is None:
            raise RuntimeError("system not equilibrated yet")
        return list(self.output(x0, self.nu0()).keys())


def _merged(base, overrides):
    out = dict(base or {})
    for key, val in (overrides or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merged(out[key], val)
        else:
            out[key] = val
    return out


def _port_bias_pu(vsc_p, i_dc0, v_mag_pu, base_mva):
    """Equilibrium active power a converter draws at its bus, network pu.

    Positive means absorbing (load notation, matching the simplified block).
    Covers the device draw, switching loss, and the series-resistance loss
    of the coupling impedance; two fixed-point sweeps settle it far below
    the 1e-8 swap-conservation budget.
    """
    v_mag_pk = v_mag_pu * vsc_p.v_base_pk
    p_sw = switching_loss(vsc_p.g_0, i_dc0, vsc_p.i_dc_nom, vsc_p.v_dc_nom)
    p_need = -vsc_p.v_dc_nom * i_dc0 + p_sw
    p_bus = p_need
    for _ in range(3):
        i_d = p_bus / (1.5 * v_mag_pk)
        p_bus = p_need + 1.5 * vsc_p.r_ac * i_d * i_d
    return p_bus / (base_mva * 1e6)


def _simplified_params(case, overrides, gain_scale):
    base = dict(case.extra.get("simplified") or {})
    base = _merged(base, overrides)
    # the case section reuses the storage-control key names
    params = {"t_fp": base.get("t_f", 0.0),
              "k_pp": base.get("k_pu", 0.0),
              "k_ip": base.get("k_iu", 0.0),
              "k_q": base.get("k_q", 0.0)}
    for key in ("t_p", "t_mq", "t1_q", "t2_q", "t_q"):
        if key in base:
            params[key] = base[key]
    if "p_max" in base:
        params["p_max"] = base["p_max"]
        params["p_min"] = base.get("p_min", -base["p_max"])
    if "q_max" in base:
        params["q_max"] = base["q_max"]
        params["q_min"] = base.get("q_min", -base["q_max"])
    params["gain_scale"] = gain_scale * float(base.get("gain_scale", 1.0))
    window = None
    if base.get("track_energy"):
        window = EnergyWindow(base["e_min"], base["e_min_thr"],
                              base["e_max_thr"], base["e_max"])
    return params, window


def _lstsq_newton(fun, x0, tol=1e-10, max_iter=30, rcond=1e-10):
    """Damped least-squares Newton on an overdetermined residual.

    Callers append gauge rows that pin the model's equilibrium freedoms
    (global angle shift; the storage energy family, along which the command
    integrator can hold any duty while the washout absorbs the matching
    steady error). With those pinned the stacked Jacobian has full column
    rank and the iteration converges quadratically. Steps are halved while
    they make the max-abs residual worse.
    """
    x = np.array(x0, dtype=float)
    r = np.asarray(fun(x), dtype=float)
    norm = float(np.abs(r).max())
    for _ in range(max_iter):
        if norm <= tol:
            return x
        jac = numerics.fd_jacobian(fun, x)
        step, _, _, _ = np.linalg.lstsq(jac, -r, rcond=rcond)
        alpha = 1.0
        while True:
            # a trial step may cross a model's hard domain wall (tank below
            # ambient, charge exhausted); treat that like a worse residual
            try:
                r_try = np.asarray(fun(x + alpha * step), dtype=float)
                n_try = float(np.abs(r_try).max())
            except (NonPhysical, SocOutOfRange):
                n_try = math.inf
            if not math.isfinite(n_try):
                n_try = math.inf
            if n_try < norm or alpha < 1e-4:
                break
            alpha *= 0.5
        if n_try >= norm:
            raise numerics.NoConvergence("equilibrium stalled at %.3e" % norm,
                                         residual_norm=norm)
        x = x + alpha * step
        r, norm = r_try, n_try
    if norm <= tol:
        return x
    raise numerics.NoConvergence("equilibrium stalled at %.3e" % norm,
                                 residual_norm=norm)


def build_system(case, variant="none", tech=None, bus_id=8, w_signal=("coi",),
                 target=None, control_overrides=None, simplified_overrides=None,
                 gain_scale=1.0):
    """Assemble the composed model and solve its equilibrium.

    Returns a GridDae carrying `x0` (scaled equilibrium state) plus frozen
    references (w_ref, and per-chunk v_dc_ref / v_ac_ref). `target` pins the
    device operating point exactly as in detailed_equilibrium; for the
    simplified variant `tech` only sets the equilibrium port bias.
    """
    if variant not in VARIANTS:
        raise ValueError("unknown variant %r" % (variant,))
    if variant != "none" and variant != "simplified" and tech is None:
        raise ValueError("variant %r needs a technology" % (variant,))
    pf = solve_power_flow(case)
    machines, mstates = init_machines(case, pf)
    tables = NetworkTables(case, pf.v)
    bus_k = case.bus_index(bus_id)
    v0 = pf.v[bus_k]

    ess = None
    if variant in ("detailed", "generalized"):
        params = _merged(case.extra[tech], None)
        if control_overrides:
            params["storage_control"] = _merged(
                params.get("storage_control"), control_overrides)
        vsc_p = vsc_params_from_dict(case.extra["vsc"], params.get("vsc"))
        model = device_model(tech, params, vsc_p.v_dc_nom)
        # both variants expand/initialize at the same operating point, or a
        # swap would shift the network equilibrium; the shared default also
        # keeps the stored energy inside the limiter window, away from its
        # taper kinks where the Jacobian is one-sided
        target = dict(target or default_build_target(model))
        if variant == "detailed":
            xz0, u0, _ = detailed_equilibrium(model, vsc_p.v_dc_nom, target)
            cfg = storage_control_from_dict(params["storage_control"], u_ref=u0)
            ess = _ConverterChunk("detailed", vsc_p, cfg, case.base_mva, model=model)
        else:
            op = dict(target)
            op["v_dc"] = vsc_p.v_dc_nom
            gen = build_generalized(tech, model, op)
            u0 = gen.u0
            cfg = storage_control_from_dict(params["storage_control"], u_ref=u0)
            ess = _ConverterChunk("generalized", vsc_p, cfg, case.base_mva,
                                  model=model, gen=gen)
        # a command range that cannot hold its own equilibrium duty would be
        # clamped from t=0 and the solve would drift to some other operating
        # point; fail loudly instead
        if not (cfg.u_min < u0 < cfg.u_max):
            raise ValueError(
                "equilibrium duty %.6g outside the command range (%g, %g) "
                "for %s at %r" % (u0, cfg.u_min, cfg.u_max, tech, target))
    elif variant == "simplified":
        params, window = _simplified_params(case, simplified_overrides, gain_scale)
        block = SimplifiedEss(params, window)
        p_bias = 0.0
        if tech is not None:
            dev_params = dict(case.extra[tech])
            vsc_p = vsc_params_from_dict(case.extra["vsc"], dev_params.get("vsc"))
            model = device_model(tech, dev_params, vsc_p.v_dc_nom)
            _, u0, i_dc0 = detailed_equilibrium(
                model, vsc_p.v_dc_nom, target or default_build_target(model))
            p_bias = _port_bias_pu(vsc_p, i_dc0, abs(v0), case.base_mva)
        ess = _SimplifiedChunk(block, p_bias)

    sys = GridDae(case, tables, machines, ess=ess,
                  ess_bus=bus_k if ess is not None else None,
                  w_signal=w_signal)

    phys = np.zeros(sys.n)
    for i, row in enumerate(mstates):
        phys[N_MACHINE_STATES * i:N_MACHINE_STATES * (i + 1)] = row
    phys[sys.iv0:sys.iv0 + sys.n_bus] = pf.v.real
    phys[sys.iv0 + sys.n_bus:sys.ie0] = pf.v.imag
    if ess is not None:
        phys[sys.ie0:] = ess.initial(v0.real, v0.imag)
    x = phys / sys.scales
    nu = sys.nu0()

    # gauge pins: the global angle, and the energy-family freedom of the
    # storage chunk (duty bias for converter chunks, the PI integrator for
    # the simplified one, whose stored-energy state is also a pure null
    # column and needs its own pin)
    pins = [(0, x[0])]
    e_drift_row = None
    if ess is not None and isinstance(ess, _ConverterChunk):
        k_u = sys.ie0 + N_VSC_STATES + 1
        pins.append((k_u, x[k_u]))
    elif ess is not None:
        k_p = sys.ie0 + 1
        pins.append((k_p, x[k_p]))
        pins.append((sys.ie0 + 6, 0.0))
        e_drift_row = sys.ie0 + 6

    # The storage's standing draw is picked up through governor droop, so
    # the solved speed sits a hair off synchronous and every angle drifts
    # at a common rate: a relative equilibrium. The first extra unknown is
    # that slip; the rotor-angle rows solve omega_b (omega - 1 - slip) = 0
    # and every channel is exactly constant along the drift. The simplified
    # block's stored-energy integrator has no feedback, so holding the bias
    # makes it ramp the same way; its drift is the second extra unknown.
    delta_rows = [N_MACHINE_STATES * i for i in range(len(machines))]
    omega_b = machines[0].omega_b
    n_sys = sys.n

    def stacked(y_ext):
        y = y_ext[:n_sys]
        r = np.asarray(sys.psi(y, nu), dtype=float)
        for k in delta_rows:
            r[k] -= omega_b * y_ext[n_sys]
        if e_drift_row is not None:
            r[e_drift_row] -= y_ext[n_sys + 1]
        return np.concatenate([r, [y[k] - v for k, v in pins]])

    # references first from the power flow, then from the solved composed
    # state; the loop ends when re-deriving them moves nothing. Seeding
    # w_ref before the first solve matters for branch-power signals, whose
    # standing value is nowhere near 1; starting from w_ref = 1 the
    # controller would see a huge false error and drive the device models
    # through their domain walls.
    if ess is not None:
        ess.v_ac_ref = abs(v0)
    st0 = x * sys.scales
    sys.w_ref = sys._w(st0, st0[sys.iv0:sys.iv0 + sys.n_bus]
                       + 1j * st0[sys.iv0 + sys.n_bus:sys.ie0])
    x_ext = np.append(x, np.zeros(1 if e_drift_row is None else 2))
    for _ in range(6):
        x_ext = _lstsq_newton(stacked, x_ext)
        x = x_ext[:n_sys]
        st = x * sys.scales
        vre = st[sys.iv0:sys.iv0 + sys.n_bus]
        vim = st[sys.iv0 + sys.n_bus:sys.ie0]
        w_now = sys._w(st, vre + 1j * vim)
        drift = abs(w_now - sys.w_ref)
        sys.w_ref = w_now
        if ess is not None:
            v_now = math.hypot(vre[bus_k], vim[bus_k])
            drift = max(drift, abs(v_now - ess.v_ac_ref))
            ess.v_ac_ref = v_now
        if drift < 1e-12:
            break
    sys.x0 = x
    sys.slip0 = float(x_ext[n_sys])
    return sys
