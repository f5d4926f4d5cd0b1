"""Transmission network, synchronous machines, and discrete grid events.

Network quantities are per-unit on the case MVA base. Loads are constant
power in the power flow and constant impedance during dynamics, converted at
the solved operating voltage. Machines are two-axis models with an
exponential-saturation excitation system and a speed-droop governor; the
stator is resolved algebraically inside the derivative evaluation, so each
machine contributes nine differential states and no algebraic rows of its
own.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .numerics import fd_jacobian, lu_solve


class DisconnectedIsland(Exception):
    """The in-service branch set does not connect every bus."""


class CaseError(Exception):
    """Malformed or internally inconsistent case data."""


@dataclass
class Bus:
    id: int
    type: str = "pq"            # slack | pv | pq
    v_set: float = 1.0
    angle_deg: float = 0.0
    base_kv: float = 1.0


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    in_service: bool = True


@dataclass
class Machine:
    bus: int
    h: float
    d: float = 0.0
    r_s: float = 0.0
    x_d: float = 1.0
    x_q: float = 1.0
    xp_d: float = 0.3
    xp_q: float = 0.3
    tp_d0: float = 6.0
    tp_q0: float = 0.5
    s_base: float = 100.0
    p_set: float = 0.0          # MW, scheduled output (ignored for slack)


@dataclass
class Avr:
    machine: int
    k_a: float = 20.0
    t_a: float = 0.2
    k_e: float = 1.0
    t_e: float = 0.314
    k_f: float = 0.063
    t_f: float = 0.35
    a_e: float = 0.0039
    b_e: float = 1.555
    vr_max: float = 5.0
    vr_min: float = -5.0


@dataclass
class Governor:
    machine: int
    r_d: float = 0.05
    t_sv: float = 0.05
    t_ch: float = 0.5
    p_sv_max: float = 3.0
    p_sv_min: float = 0.0


@dataclass
class Load:
    bus: int
    p: float                    # MW
    q: float                    # MVAr


@dataclass
class Case:
    name: str
    base_mva: float
    f_hz: float
    buses: list
    branches: list
    machines: list
    avrs: list
    governors: list
    loads: list
    extra: dict = field(default_factory=dict)

    def bus_index(self, bus_id):
        for k, b in enumerate(self.buses):
            if b.id == bus_id:
                return k
        raise CaseError("no bus %r" % bus_id)


_CASE_SECTIONS = ("vsc", "storage_control", "eces", "smes", "caes", "bes", "simplified")


def case_from_dict(d):
    if d.get("format_version") != 1:
        raise CaseError("unsupported case format_version %r" % d.get("format_version"))
    buses = [Bus(**b) for b in d["buses"]]
    branches = [Branch(from_bus=br.pop("from"), to_bus=br.pop("to"), **br)
                for br in [dict(x) for x in d["branches"]]]
    machines = [Machine(**m) for m in d.get("machines", [])]
    avrs = [Avr(**a) for a in d.get("avrs", [])]
    governors = [Governor(**g) for g in d.get("governors", [])]
    loads = [Load(**ld) for ld in d.get("loads", [])]
    extra = {k: d[k] for k in _CASE_SECTIONS if k in d}
    case = Case(name=d.get("name", "case"), base_mva=float(d["base_mva"]),
                f_hz=float(d.get("f_hz", 60.0)), buses=buses, branches=branches,
                machines=machines, avrs=avrs, governors=governors, loads=loads,
                extra=extra)
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        raise CaseError("duplicate bus ids")
    if sum(1 for b in buses if b.type == "slack") != 1:
        raise CaseError("exactly one slack bus required")
    for br in branches:
        case.bus_index(br.from_bus)
        case.bus_index(br.to_bus)
    return case


def load_case(path):
    with open(path) as f:
        return case_from_dict(yaml.safe_load(f))


def build_admittance(case, in_service=None):
    """Dense bus admittance matrix from in-service branches.

    `in_service`, when given, overrides each branch's own flag (list of
    bools, aligned with case.branches). Raises DisconnectedIsland if the
    retained branches leave any bus unreachable from the first.
    """
    n = len(case.buses)
    y = np.zeros((n, n), dtype=complex)
    adj = [[] for _ in range(n)]
    for k, br in enumerate(case.branches):
        live = br.in_service if in_service is None else in_service[k]
        if not live:
            continue
        i = case.bus_index(br.from_bus)
        j = case.bus_index(br.to_bus)
        ys = 1.0 / complex(br.r, br.x)
        ysh = complex(0.0, br.b / 2.0)
        y[i, i] += ys + ysh
        y[j, j] += ys + ysh
        y[i, j] -= ys
        y[j, i] -= ys
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    if len(seen) != n:
        missing = sorted(case.buses[k].id for k in range(n) if k not in seen)
        raise DisconnectedIsland("buses unreachable: %s" % missing)
    return y


@dataclass
class PowerFlowResult:
    v: np.ndarray               # complex bus voltages
    s_inj: np.ndarray           # complex net injections (gen - load), pu
    iterations: int
    mismatch: float


PF_TOL = 1e-8


def solve_power_flow(case, tol=PF_TOL, max_iter=30):
    """Newton power flow in polar coordinates, flat start.

    PV buses hold machine voltage setpoints; the slack absorbs the balance.
    Converged when the largest P/Q mismatch is at or below `tol` (pu).
    """
    n = len(case.buses)
    y = build_admittance(case)
    base = case.base_mva
    types = [b.type for b in case.buses]
    slack = types.index("slack")
    p_spec = np.zeros(n)
    q_spec = np.zeros(n)
    for m in case.machines:
        p_spec[case.bus_index(m.bus)] += m.p_set / base
    for ld in case.loads:
        k = case.bus_index(ld.bus)
        p_spec[k] -= ld.p / base
        q_spec[k] -= ld.q / base
    vm = np.array([b.v_set if b.type in ("slack", "pv") else 1.0 for b in case.buses])
    va = np.array([math.radians(b.angle_deg) if b.type == "slack" else 0.0
                   for b in case.buses])
    ang_idx = [k for k in range(n) if k != slack]
    mag_idx = [k for k in range(n) if types[k] == "pq"]

    def mismatch(u):
        a = va.copy()
        m_ = vm.copy()
        a[ang_idx] = u[: len(ang_idx)]
        m_[mag_idx] = u[len(ang_idx):]
        v = m_ * np.exp(1j * a)
        s = v * np.conj(y @ v)
        return np.concatenate([(s.real - p_spec)[ang_idx], (s.imag - q_spec)[mag_idx]])

    u = np.concatenate([va[ang_idx], vm[mag_idx]])
    it = 0
    norm = np.abs(mismatch(u)).max()
    while norm > tol:
        if it >= max_iter:
            raise RuntimeError("power flow stalled at mismatch %.3e" % norm)
        jac = fd_jacobian(mismatch, u, 1e-7)
        u = u - lu_solve(jac, mismatch(u))
        it += 1
        norm = np.abs(mismatch(u)).max()
    va[ang_idx] = u[: len(ang_idx)]
    vm[mag_idx] = u[len(ang_idx):]
    v = vm * np.exp(1j * va)
    s = v * np.conj(y @ v)
    return PowerFlowResult(v=v, s_inj=s, iterations=it, mismatch=float(norm))


# --- machines ---------------------------------------------------------------

# State slot order for one machine.
MACHINE_STATES = ("delta", "omega", "eq_p", "ed_p", "efd", "vr", "rf", "psv", "tm")
N_MACHINE_STATES = len(MACHINE_STATES)


@dataclass
class MachineBlock:
    """Machine + excitation + governor parameters flattened for the hot loop.

    v_ref and p_c are equilibrium-dependent and filled in by init_machines.
    """
    bus_idx: int
    omega_b: float
    h: float
    d: float
    r_s: float
    x_d: float
    x_q: float
    xp_d: float
    xp_q: float
    tp_d0: float
    tp_q0: float
    k_a: float
    t_a: float
    k_e: float
    t_e: float
    k_f: float
    t_f: float
    a_e: float
    b_e: float
    vr_max: float
    vr_min: float
    r_d: float
    t_sv: float
    t_ch: float
    p_sv_max: float
    p_sv_min: float
    s_base: float
    v_ref: float = 0.0
    p_c: float = 0.0


def machine_derivatives(mb, st, v_re, v_im):
    """Time derivatives of one machine's nine states plus its current injection.

    st is indexable in MACHINE_STATES order; returns (derivs list, i_re, i_im)
    with the injection in network per-unit (generator convention, into the
    bus).
    """
    delta = st[0]
    omega = st[1]
    eq_p = st[2]
    ed_p = st[3]
    efd = st[4]
    vr = st[5]
    rf = st[6]
    psv = st[7]
    tm = st[8]
    sd = math.sin(delta)
    cd = math.cos(delta)
    v_d = v_re * sd - v_im * cd
    v_q = v_re * cd + v_im * sd
    det = mb.r_s * mb.r_s + mb.xp_d * mb.xp_q
    ad = ed_p - v_d
    aq = eq_p - v_q
    i_d = (mb.r_s * ad + mb.xp_q * aq) / det
    i_q = (-mb.xp_d * ad + mb.r_s * aq) / det
    t_e = ed_p * i_d + eq_p * i_q + (mb.xp_q - mb.xp_d) * i_d * i_q
    d_delta = mb.omega_b * (omega - 1.0)
    d_omega = (tm - t_e - mb.d * (omega - 1.0)) / (2.0 * mb.h)
    d_eqp = (-eq_p - (mb.x_d - mb.xp_d) * i_d + efd) / mb.tp_d0
    d_edp = (-ed_p + (mb.x_q - mb.xp_q) * i_q) / mb.tp_q0
    v_mag = math.hypot(v_re, v_im)
    s_e = mb.a_e * math.exp(mb.b_e * efd)
    d_efd = (vr - (mb.k_e + s_e) * efd) / mb.t_e
    d_vr = (-vr + mb.k_a * rf - (mb.k_a * mb.k_f / mb.t_f) * efd
            + mb.k_a * (mb.v_ref - v_mag)) / mb.t_a
    if (vr >= mb.vr_max and d_vr > 0.0) or (vr <= mb.vr_min and d_vr < 0.0):
        d_vr = 0.0
    d_rf = (-rf + (mb.k_f / mb.t_f) * efd) / mb.t_f
    d_psv = (-psv + mb.p_c - (omega - 1.0) / mb.r_d) / mb.t_sv
    if (psv >= mb.p_sv_max and d_psv > 0.0) or (psv <= mb.p_sv_min and d_psv < 0.0):
        d_psv = 0.0
    d_tm = (-tm + psv) / mb.t_ch
    i_re = i_d * sd + i_q * cd
    i_im = i_q * sd - i_d * cd
    return ([d_delta, d_omega, d_eqp, d_edp, d_efd, d_vr, d_rf, d_psv, d_tm],
            i_re, i_im)


def init_machines(case, pf):
    """Build MachineBlocks and their steady-state initial conditions.

    Sets v_ref and p_c so every derivative is zero at the power-flow point.
    Returns (blocks, states) with states a list of 9-entry lists.
    """
    omega_b = 2.0 * math.pi * case.f_hz
    avr_by = {a.machine: a for a in case.avrs}
    gov_by = {g.machine: g for g in case.governors}
    blocks = []
    states = []
    for m in case.machines:
        k = case.bus_index(m.bus)
        a = avr_by.get(m.bus)
        g = gov_by.get(m.bus)
        if a is None or g is None:
            raise CaseError("machine at bus %r needs avr and governor" % m.bus)
        v = pf.v[k]
        s = pf.s_inj[k]
        for ld in case.loads:
            if ld.bus == m.bus:
                s += complex(ld.p, ld.q) / case.base_mva
        i = np.conj(s / v)
        e_th = v + complex(m.r_s, m.x_q) * i
        delta = math.atan2(e_th.imag, e_th.real)
        rot = np.exp(-1j * (delta - math.pi / 2.0))
        vdq = v * rot
        idq = i * rot
        v_d, v_q = vdq.real, vdq.imag
        i_d, i_q = idq.real, idq.imag
        eq_p = v_q + m.r_s * i_q + m.xp_d * i_d
        ed_p = v_d + m.r_s * i_d - m.xp_q * i_q
        efd = eq_p + (m.x_d - m.xp_d) * i_d
        t_e = ed_p * i_d + eq_p * i_q + (m.xp_q - m.xp_d) * i_d * i_q
        s_e = a.a_e * math.exp(a.b_e * efd)
        vr = (a.k_e + s_e) * efd
        rf = (a.k_f / a.t_f) * efd
        v_ref = abs(v) + vr / a.k_a
        mb = MachineBlock(
            bus_idx=k, omega_b=omega_b, h=m.h, d=m.d, r_s=m.r_s,
            x_d=m.x_d, x_q=m.x_q, xp_d=m.xp_d, xp_q=m.xp_q,
            tp_d0=m.tp_d0, tp_q0=m.tp_q0,
            k_a=a.k_a, t_a=a.t_a, k_e=a.k_e, t_e=a.t_e, k_f=a.k_f, t_f=a.t_f,
            a_e=a.a_e, b_e=a.b_e, vr_max=a.vr_max, vr_min=a.vr_min,
            r_d=g.r_d, t_sv=g.t_sv, t_ch=g.t_ch,
            p_sv_max=g.p_sv_max, p_sv_min=g.p_sv_min,
            s_base=m.s_base, v_ref=v_ref, p_c=t_e)
        blocks.append(mb)
        states.append([delta, 1.0, eq_p, ed_p, efd, vr, rf, t_e, t_e])
    return blocks, states


def coi_frequency(omegas, h_list, s_list):
    """Inertia-weighted mean speed (center of inertia), pu."""
    num = 0.0
    den = 0.0
    for w, h, s in zip(omegas, h_list, s_list):
        num += h * s * w
        den += h * s
    return num / den


# --- event tables ------------------------------------------------------------

class NetworkTables:
    """Per-simulation mutable view of the network.

    Holds the admittance matrix (rebuilt from branch service flags so that
    trip followed by restore is bit-exact), the constant-impedance load
    admittances, per-bus load multipliers driven by noise inputs, and an
    optional fault shunt.
    """

    def __init__(self, case, pf_v):
        self.case = case
        self.in_service = [br.in_service for br in case.branches]
        self.ybus = build_admittance(case, self.in_service)
        n = len(case.buses)
        self.load_y = np.zeros(n, dtype=complex)
        self.load_bus_idx = []
        for ld in case.loads:
            k = case.bus_index(ld.bus)
            s = complex(ld.p, ld.q) / case.base_mva
            self.load_y[k] += np.conj(s) / (abs(pf_v[k]) ** 2)
            if k not in self.load_bus_idx:
                self.load_bus_idx.append(k)
        self.pf_vmag = np.abs(np.asarray(pf_v))
        self.fault_bus = None
        self.fault_y = 0j

    def copy(self):
        import copy
        return copy.deepcopy(self)


def apply_event(tables, event):
    """Apply a discrete event tuple to the mutable network tables.

    Supported events:
      ("three_phase_fault", bus_id, y_shunt_pu)
      ("clear_fault",)
      ("trip_branch", from_bus, to_bus)
      ("restore_branch", from_bus, to_bus)
      ("set_load", bus_id, p_mw, q_mvar)
    """
    kind = event[0]
    case = tables.case
    if kind == "three_phase_fault":
        tables.fault_bus = case.bus_index(event[1])
        tables.fault_y = complex(event[2])
    elif kind == "clear_fault":
        tables.fault_bus = None
        tables.fault_y = 0j
    elif kind in ("trip_branch", "restore_branch"):
        f, t = event[1], event[2]
        hit = [k for k, br in enumerate(case.branches)
               if (br.from_bus, br.to_bus) in ((f, t), (t, f))]
        if not hit:
            raise CaseError("no branch %r-%r" % (f, t))
        for k in hit:
            tables.in_service[k] = (kind == "restore_branch")
        tables.ybus = build_admittance(case, tables.in_service)
    elif kind == "set_load":
        k = case.bus_index(event[1])
        s = complex(event[2], event[3]) / case.base_mva
        tables.load_y[k] = np.conj(s) / (tables.pf_vmag[k] ** 2)
        if k not in tables.load_bus_idx:
            tables.load_bus_idx.append(k)
    else:
        raise CaseError("unknown event kind %r" % kind)
    return tables


def branch_flows(case, tables, v):
    """Sending-end complex power per in-service branch, pu. Keyed "f-t"."""
    out = {}
    for k, br in enumerate(case.branches):
        key = "%d-%d" % (br.from_bus, br.to_bus)
        if not tables.in_service[k]:
            out[key] = 0j
            continue
        i = case.bus_index(br.from_bus)
        j = case.bus_index(br.to_bus)
        ys = 1.0 / complex(br.r, br.x)
        ish = v[i] * complex(0.0, br.b / 2.0)
        out[key] = v[i] * np.conj((v[i] - v[j]) * ys + ish)
    return out
