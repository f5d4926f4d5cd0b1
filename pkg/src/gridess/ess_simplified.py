"""Bus-injection storage model built from a handful of control blocks.

No dc link, no converter, no device physics: the model shapes two scalar
commands and injects P + jQ straight at its bus. The active channel is
washout -> PI -> first-order lag with hard power limits; the reactive
channel is measurement low-pass -> lead-lag -> lag, regulating the local
bus voltage. Positive P means the device absorbs (load notation), so the
optional energy integrator rises while charging and the shared storage
limiter can emulate capacity limits without any internal states.
"""

import math
from dataclasses import dataclass

from .vsc import storage_limiter


@dataclass
class EnergyWindow:
    """Capacity-limit window for the emulated energy integrator."""

    e_min: float
    e_min_thr: float
    e_max_thr: float
    e_max: float
    # positive power charges here, so commands above zero fill the store
    sigma: int = -1
    u_ref: float = 0.0


STATES = ("x_fp", "x_p", "p_ess", "x_fq", "x_ll", "q_ess", "e_ess")


class SimplifiedEss:
    """Two-channel injection model with clamped outputs.

    t_fp = 0 bypasses the washout, turning the active channel into a pure
    PI on the raw error (the integrator then ramps without bound until the
    output pins). gain_scale multiplies every channel gain; the retuning
    experiments run the same model at a fraction of the reference gains.
    """

    def __init__(self, params=None, window=None):
        p = dict(params or {})
        scale = float(p.get("gain_scale", 1.0))
        self.t_fp = float(p.get("t_fp", 0.0))
        self.k_pp = scale * float(p.get("k_pp", 0.0))
        self.k_ip = scale * float(p.get("k_ip", 0.0))
        self.t_p = float(p.get("t_p", 0.05))
        self.p_max = float(p.get("p_max", math.inf))
        self.p_min = float(p.get("p_min", -math.inf))
        self.t_fq = float(p.get("t_mq", 0.02))
        self.k_q = scale * float(p.get("k_q", 0.0))
        self.t_q1 = float(p.get("t1_q", 0.1))
        self.t_q2 = float(p.get("t2_q", 0.02))
        self.t_q = float(p.get("t_q", 0.05))
        self.q_max = float(p.get("q_max", math.inf))
        self.q_min = float(p.get("q_min", -math.inf))
        self.window = window
        self.x_fp = 0.0
        self.x_p = 0.0
        self.p_ess = 0.0
        self.x_fq = 0.0
        self.x_ll = 0.0
        self.q_ess = 0.0
        self.e_ess = 0.0

    def get_state(self):
        return [getattr(self, n) for n in STATES]

    def set_state(self, values):
        for n, v in zip(STATES, values):
            setattr(self, n, float(v))


def _clamped_lag(value, cmd, tau, lo, hi):
    # pinned output with a frozen derivative while the drive pushes outward
    d = (cmd - value) / tau
    if value >= hi and d > 0.0:
        return hi, 0.0, True
    if value <= lo and d < 0.0:
        return lo, 0.0, True
    return min(max(value, lo), hi), d, False


def simplified_derivatives(s, w, w_ref, v_ac, v_ac_ref):
    """Block-diagram derivatives plus the injected (P_ESS, Q_ESS).

    Returns (derivatives for STATES, p_out, q_out). p_out is the power the
    bus actually sees: the clamped lag state, further scaled by the energy
    limiter when a capacity window is attached.
    """
    e_p = w - w_ref
    if s.t_fp > 0.0:
        y = (e_p - s.x_fp) / s.t_fp
        dx_fp = y
    else:
        y = e_p
        dx_fp = 0.0
    raw = s.k_pp * y + s.x_p
    dx_p = s.k_ip * y
    p_val, dp, pinned = _clamped_lag(s.p_ess, raw, s.t_p, s.p_min, s.p_max)
    if pinned:
        dx_p = 0.0
    e_q = v_ac - v_ac_ref
    dx_fq = (e_q - s.x_fq) / s.t_fq if s.t_fq > 0.0 else 0.0
    f = s.x_fq if s.t_fq > 0.0 else e_q
    c_direct = s.k_q * s.t_q2 / s.t_q1
    dx_ll = ((s.k_q - c_direct) * f - s.x_ll) / s.t_q1
    q_cmd = s.x_ll + c_direct * f
    q_val, dq, _ = _clamped_lag(s.q_ess, q_cmd, s.t_q, s.q_min, s.q_max)
    p_out = p_val
    if s.window is not None:
        p_out = simplified_energy_limit(s, s.e_ess, s.window, p_val)
    de = p_out
    return [dx_fp, dx_p, dp, dx_fq, dx_ll, dq, de], p_out, q_val


def simplified_energy_limit(s, energy, window, power=None):
    """Power command after the capacity-window scaling at the given energy."""
    p = s.p_ess if power is None else power
    return storage_limiter(window, p, energy)
