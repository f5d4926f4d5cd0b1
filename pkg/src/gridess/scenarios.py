"""Scenario catalog, stochastic inputs, metrics, and the simulation driver.

A Scenario names a case, a storage technology and model variant, a list of
timed network events, and optionally a stochastic load configuration. The
driver integrates between event boundaries, applies each event to the
network tables, re-solves the algebraic rows, and keeps going, so event
times are honored exactly and the recorded grid stays uniform. The row at
an event instant holds the post-event consistent state: differential
states never jump there, algebraic ones may.

Stochastic runs draw one Ornstein-Uhlenbeck multiplier per load, advanced
with the inner Euler-Maruyama step h and delivered once per integration
step. The whole multiplier table is generated up front from the scenario
seed, so the same seed feeds identical load profiles to every model
variant, and reruns are bit-identical.
"""

import copy
import dataclasses
import importlib.resources
import math
import os

import numpy as np
import yaml

from ._system import N_MACHINE_STATES, build_system
from .network import apply_event, load_case, solve_power_flow
from .numerics import integrate, solve_algebraic


def default_case_path():
    """Filesystem path of the packaged nine-bus case."""
    return str(importlib.resources.files("gridess").joinpath("data/wscc9.case"))


# --- stochastic load input -----------------------------------------------------

@dataclasses.dataclass
class OuProcess:
    """Mean-reverting load multiplier, advanced by Euler-Maruyama steps."""
    mu: float = 1.0
    alpha: float = 0.5          # 1/s
    sigma: float = 0.02         # pu/sqrt(s)
    h: float = 0.01             # inner step, s
    x: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")


def ou_step(p, rng, dt):
    """Advance one integration step of dt = n*h and return the multiplier."""
    n = int(round(dt / p.h))
    if n < 1 or abs(n * p.h - dt) > 1e-9 * max(1.0, dt):
        raise ValueError("dt must be a whole number of inner steps")
    sq = p.sigma * math.sqrt(p.h)
    for _ in range(n):
        p.x += p.alpha * (p.mu - p.x) * p.h + sq * rng.standard_normal()
    return p.x


def randomize_initial_conditions(case, seed=None, width=0.05, rng=None):
    """Scale every load and scheduled generation by independent U[1-w, 1+w].

    Returns a new case; the slack machine is left alone and picks up the
    imbalance when the power flow is re-solved. Draw order is loads then
    machines, in case order.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    out = copy.deepcopy(case)
    for ld in out.loads:
        f = rng.uniform(1.0 - width, 1.0 + width)
        ld.p *= f
        ld.q *= f
    slack_bus = next(b.id for b in out.buses if b.type == "slack")
    for m in out.machines:
        f = rng.uniform(1.0 - width, 1.0 + width)
        if m.bus != slack_bus:
            m.p_set *= f
    solve_power_flow(out)
    return out


# --- scenario definitions ------------------------------------------------------

@dataclasses.dataclass
class Scenario:
    name: str
    tech: str = None
    variant: str = "detailed"
    bus: int = 8
    w: tuple = ("coi",)
    events: list = dataclasses.field(default_factory=list)  # (time, event)
    t_end: float = 10.0
    dt: float = 0.01
    stochastic: dict = None
    seed: int = 0
    case_path: str = None
    target: dict = None
    control_overrides: dict = None
    gain_scale: float = 1.0

    def __post_init__(self):
        if self.t_end <= 0.0:
            raise ValueError("t_end must be positive")
        times = [t for t, _ in self.events]
        if times != sorted(times):
            raise ValueError("events must be time-ordered")
        for t in times:
            k = int(round(t / self.dt))
            if not (0.0 < t < self.t_end) or abs(k * self.dt - t) > 1e-9:
                raise ValueError("event time %g must be a step multiple inside"
                                 " (0, t_end)" % t)


def scenario_from_dict(d):
    ev = []
    for row in d.get("events", []):
        t, kind = float(row[0]), str(row[1])
        ev.append((t, tuple([kind] + list(row[2:]))))
    return Scenario(
        name=d["name"], tech=d.get("tech"), variant=d.get("variant", "detailed"),
        bus=int(d.get("bus", 8)), w=tuple(d.get("w", ["coi"])), events=ev,
        t_end=float(d["t_end"]), dt=float(d["dt"]),
        stochastic=d.get("stochastic"), seed=int(d.get("seed", 0)),
        case_path=d.get("case_path"), target=d.get("target"),
        control_overrides=d.get("control_overrides"),
        gain_scale=float(d.get("gain_scale", 1.0)))


def load_scenario(path):
    """Read a scenario file (same structured-text dialect as the case)."""
    with open(path) as f:
        return scenario_from_dict(yaml.safe_load(f))


def scenario_catalog():
    """The shipped experiment set, keyed by name."""
    cat = {}
    cat["smes_fault"] = Scenario(
        name="smes_fault", tech="smes", t_end=40.0, dt=2e-3,
        events=[(1.0, ("three_phase_fault", 7, 1.0e4)),
                (1.07, ("clear_fault",)),
                (1.07, ("trip_branch", 7, 5))])
    # tighter energy window so the charge excursion runs into the cap
    cat["smes_saturation"] = Scenario(
        name="smes_saturation", tech="smes", t_end=30.0, dt=1e-3,
        events=[(1.0, ("set_load", 5, 100.0, 50.0))],
        control_overrides={"e_max": 40.0e6, "e_max_thr": 36.0e6})
    for pct in (20, 50, 80):
        cat["smes_stochastic_%d" % pct] = Scenario(
            name="smes_stochastic_%d" % pct, tech="smes",
            t_end=300.0, dt=0.1, target={"energy": pct * 1e-2 * 60.0e6},
            stochastic={"randomize_ic": True})
    cat["caes_loadloss"] = Scenario(
        name="caes_loadloss", tech="caes", w=("branch_p", 2, 7),
        t_end=100.0, dt=0.01,
        events=[(10.0, ("set_load", 5, 110.0, 50.0)),
                (80.0, ("set_load", 5, 125.0, 50.0))])
    cat["caes_stochastic"] = Scenario(
        name="caes_stochastic", tech="caes", w=("branch_p", 2, 7),
        t_end=300.0, dt=0.1, stochastic={"randomize_ic": True})
    # same experiment with the simplified model's frequency gains backed
    # off to a third, the retune that keeps it stable on this signal
    cat["caes_stochastic_retuned"] = dataclasses.replace(
        cat["caes_stochastic"], name="caes_stochastic_retuned",
        gain_scale=1.0 / 3.0)
    cat["bes_loadloss"] = Scenario(
        name="bes_loadloss", tech="bes", t_end=150.0, dt=0.01,
        events=[(10.0, ("set_load", 5, 85.0, 50.0)),
                (100.0, ("set_load", 5, 125.0, 50.0))])
    return cat


# --- trajectory ------------------------------------------------------------------

@dataclasses.dataclass
class Trajectory:
    times: np.ndarray
    channels: dict
    meta: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        n = len(self.times)
        for k, v in self.channels.items():
            if len(v) != n:
                raise ValueError("channel %r length mismatch" % k)


def _segment_channels(sys, states):
    """Channel block for one inter-event segment (tables held fixed)."""
    st = states * sys.scales
    nb = sys.n_bus
    vre = st[:, sys.iv0:sys.iv0 + nb]
    vim = st[:, sys.iv0 + nb:sys.iv0 + 2 * nb]
    vc = vre + 1j * vim
    out = {}
    wts = np.array([h * s for h, s in zip(sys._h, sys._s)])
    omegas = st[:, [N_MACHINE_STATES * i + 1 for i in range(len(sys.machines))]]
    out["omega_coi"] = omegas @ (wts / wts.sum())
    for i in range(omegas.shape[1]):
        out["omega_g%d" % (i + 1)] = omegas[:, i]
    for k, bus in enumerate(sys.case.buses):
        out["v%d" % bus.id] = np.abs(vc[:, k])
    for k, br in enumerate(sys.case.branches):
        key = "p_%d_%d" % (br.from_bus, br.to_bus)
        if not sys.tables.in_service[k]:
            out[key] = np.zeros(len(st))
            continue
        i = sys.case.bus_index(br.from_bus)
        j = sys.case.bus_index(br.to_bus)
        ys = 1.0 / complex(br.r, br.x)
        ysh = 1j * br.b / 2.0
        out[key] = (vc[:, i] * np.conj((vc[:, i] - vc[:, j]) * ys
                                       + vc[:, i] * ysh)).real
    if sys.w_kind == "coi":
        out["w"] = out["omega_coi"].copy()
    elif not sys.tables.in_service[sys._wb_k]:
        out["w"] = np.zeros(len(st))
    else:
        i, j = sys._wb_ij
        out["w"] = (vc[:, i] * np.conj((vc[:, i] - vc[:, j]) * sys._wb_ys
                                       + vc[:, i] * sys._wb_ysh)).real
    out["p_ess"] = np.zeros(len(st))
    out["q_ess"] = np.zeros(len(st))
    if sys.ess is not None:
        kb = sys.ess_bus
        extra = None
        for r in range(len(st)):
            m = sys.ess.measure(st[r, sys.ie0:], vre[r, kb], vim[r, kb],
                                out["w"][r], sys.w_ref)
            if extra is None:
                extra = {k: np.empty(len(st)) for k in m}
            for k, v in m.items():
                extra[k][r] = v
        for k, v in extra.items():
            out[k] = v
    return out


def run_scenario(sc, variant=None, case=None):
    """Integrate a scenario and return its Trajectory.

    `variant` overrides the scenario's model variant, which is how the same
    experiment is run across representations for comparison. Deterministic
    for a given (scenario, seed): the load-noise table and the randomized
    initial conditions are both derived from sc.seed alone.
    """
    variant = variant or sc.variant
    if case is None:
        case = load_case(sc.case_path or default_case_path())
    stoch = sc.stochastic
    if stoch and stoch.get("randomize_ic", True):
        case = randomize_initial_conditions(
            case, rng=np.random.default_rng([sc.seed, 17]))

    sys = build_system(case, variant=variant, tech=sc.tech, bus_id=sc.bus,
                       w_signal=tuple(sc.w), target=sc.target,
                       control_overrides=sc.control_overrides,
                       gain_scale=sc.gain_scale)

    n_steps = int(round(sc.t_end / sc.dt))
    if abs(n_steps * sc.dt - sc.t_end) > 1e-9:
        raise ValueError("t_end must be a whole number of steps")
    n_loads = len(sys.tables.load_bus_idx)
    if stoch:
        rng = np.random.default_rng([sc.seed, 29])
        procs = [OuProcess(mu=stoch.get("mu", 1.0),
                           alpha=stoch.get("alpha", 0.5),
                           sigma=stoch.get("sigma", 0.02),
                           h=stoch.get("h", 0.01)) for _ in range(n_loads)]
        table = np.ones((n_steps, n_loads))
        for k in range(n_steps):
            for j, p in enumerate(procs):
                table[k, j] = ou_step(p, rng, sc.dt)
    else:
        table = None
    ones = np.ones(n_loads)

    def schedule(t0):
        if table is None:
            return lambda t: ones
        return lambda t: table[min(int(round((t0 + t) / sc.dt)), n_steps - 1)]

    bounds = [0.0] + sorted({t for t, _ in sc.events}) + [sc.t_end]
    x = sys.x0.copy()
    rows = [x]
    seg_slices = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        here = [e for t, e in sc.events if t == a]
        if here:
            for e in here:
                apply_event(sys.tables, e)
            x = solve_algebraic(sys, x, schedule(a)(0.0))
            rows[-1] = x
        _, ss = integrate(sys, x, schedule(a), b - a, sc.dt)
        start = len(rows) - 1
        rows.extend(ss[1:])
        x = rows[-1]
        # segment includes its first row so the post-event channels at the
        # boundary are computed with the post-event tables
        seg_slices.append((start, len(rows)))

    states = np.asarray(rows)
    times = np.arange(len(rows)) * sc.dt
    channels = None
    for start, stop in seg_slices:
        blk = _segment_channels(sys, states[start:stop])
        if channels is None:
            channels = {k: np.empty(len(rows)) for k in blk}
        for k, v in blk.items():
            channels[k][start:stop] = v

    meta = {"scenario": sc.name, "variant": variant, "seed": sc.seed,
            "tech": sc.tech, "dt": sc.dt, "slip0": sys.slip0,
            "events": [(t, e[0]) for t, e in sc.events]}
    return Trajectory(times=times, channels=channels, meta=meta)


# --- metrics ---------------------------------------------------------------------

@dataclasses.dataclass
class ComparisonMetrics:
    overshoot: float
    settling_time: float
    steady_state_offset: float
    rms_deviation: float = None


def compute_metrics(traj, ref=None, channel="omega_coi", t_event=0.0,
                    window=None):
    """Summary metrics of one channel, optionally against a reference run.

    overshoot: peak |value - pre-event value| after the event.
    settling_time: measured from the event, until the channel last leaves a
    band around its final value; the band is 2% of the peak post-event
    deviation from that final value.
    rms_deviation: RMS difference against the reference over the common
    (optionally windowed) part of the grid; grids must be aligned.
    """
    t = np.asarray(traj.times)
    y = np.asarray(traj.channels[channel])
    pre = y[t <= t_event][-1] if t_event > 0.0 else y[0]
    post = t >= t_event
    yp = y[post]
    tp = t[post]
    overshoot = float(np.abs(yp - pre).max())
    final = float(yp[-1])
    dev = np.abs(yp - final)
    band = 0.02 * float(dev.max())
    outside = np.nonzero(dev > band)[0]
    settling = 0.0 if len(outside) == 0 else float(
        tp[min(outside[-1] + 1, len(tp) - 1)] - t_event)
    rms = None
    if ref is not None:
        t2 = np.asarray(ref.times)
        y2 = np.asarray(ref.channels[channel])
        n = min(len(t), len(t2))
        if not np.allclose(t[:n], t2[:n], rtol=0.0, atol=1e-9):
            raise ValueError("trajectories are not on aligned grids")
        sel = np.ones(n, dtype=bool)
        if window is not None:
            sel = (t[:n] >= window[0]) & (t[:n] <= window[1])
        d = y[:n][sel] - y2[:n][sel]
        rms = float(np.sqrt(np.mean(d * d)))
    return ComparisonMetrics(overshoot=overshoot, settling_time=settling,
                             steady_state_offset=final - float(pre),
                             rms_deviation=rms)


def format_metrics(m, label=""):
    lines = []
    if label:
        lines.append("metrics: %s" % label)
    lines.append("overshoot: %.6g" % m.overshoot)
    lines.append("settling_time_s: %.6g" % m.settling_time)
    lines.append("steady_state_offset: %.6g" % m.steady_state_offset)
    if m.rms_deviation is not None:
        lines.append("rms_deviation: %.6g" % m.rms_deviation)
    return "\n".join(lines) + "\n"


# --- trajectory files --------------------------------------------------------------

def write_trajectory(traj, path):
    """CSV with a time_s column first; 12 significant digits; atomic."""
    names = list(traj.channels)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="\n") as f:
        f.write(",".join(["time_s"] + names) + "\n")
        cols = [traj.times] + [traj.channels[k] for k in names]
        for row in zip(*cols):
            f.write(",".join("%.12g" % v for v in row) + "\n")
    os.replace(tmp, path)
