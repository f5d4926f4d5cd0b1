"""Reduction of detailed storage blocks to a fixed-shape affine port model.

Any storage block exposing rows psi(xz, u, v_dc), a 0/1 row mask, and a
dc-port current collapses to the same small form: linearize around a solved
operating point, split the variables into the retained pair x (the
coordinates the stored energy lives in) and the internal block z, then drop
the z dynamics and eliminate z through the algebraic solve of its rows.
What remains is

    gamma_i * xdot_i picked from   A x + B_u u + B_v v_dc + K_x
    i_dc            =              C x + D_u u + D_v v_dc + K_i

written in actual variables, not deviations: the affine constants absorb
the operating point, so evaluating there returns zero rates and the
operating-point current. An energy law

    E = sum_i rho_i * (x_i**beta_i - chi_i**beta_i)

rides along so charge limits can be enforced without the internal states.
Batteries carry two matrix sets, one per polarization branch; a sign test on
the recovered filter current picks the active one. Compiled models are
immutable, shareable across concurrent simulations, and serializable to a
versioned text file so compilation and simulation can run as separate steps.
"""

import numpy as np
import yaml

from . import numerics
from .ess_detailed import TECHNOLOGIES, UnknownTechnology, detailed_equilibrium


class InconsistentEquilibrium(Exception):
    """linearize() was handed a point that does not satisfy the block rows."""


class SingularZBlock(Exception):
    """Internal block cannot be eliminated; its matrix is effectively singular."""


class NonRealPower(Exception):
    """Energy law evaluated outside its real domain (negative base, fractional exponent)."""


# Five-point probes tolerate the larger step; together they keep every
# Jacobian entry honest even on rows mixing kV-scale and mA-scale terms.
FD_H_REL = 1e-4
FD_ORDER = 4
ZBLOCK_COND_LIMIT = 1e10
EQUILIBRIUM_TOL = 1e-8
FORMAT_VERSION = 1


class LinearizedDae:
    """Affine replica of a storage block around one operating point.

    Rows are masked exactly like the source block (gamma 1 differential,
    0 algebraic). Written in actual variables: the constant vectors make the
    replica reproduce zero rates and the operating-point output at the
    expansion point itself.
    """

    def __init__(self, gamma, a, b, c, d, k_xi, k_phi, xi0, nu0, phi0):
        self.gamma = np.asarray(gamma, dtype=float)
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.c = np.atleast_2d(np.asarray(c, dtype=float))
        self.d = np.atleast_2d(np.asarray(d, dtype=float))
        self.k_xi = np.asarray(k_xi, dtype=float)
        self.k_phi = np.atleast_1d(np.asarray(k_phi, dtype=float))
        self.xi0 = np.asarray(xi0, dtype=float)
        self.nu0 = np.asarray(nu0, dtype=float)
        self.phi0 = np.atleast_1d(np.asarray(phi0, dtype=float))
        n = self.xi0.size
        m = self.nu0.size
        p = self.phi0.size
        if self.a.shape != (n, n) or self.b.shape != (n, m):
            raise ValueError("state/input matrix shape mismatch")
        if self.c.shape != (p, n) or self.d.shape != (p, m):
            raise ValueError("output matrix shape mismatch")
        if self.gamma.shape != (n,) or self.k_xi.shape != (n,) or self.k_phi.shape != (p,):
            raise ValueError("vector length mismatch")

    def rows(self, xi, nu):
        return self.a @ xi + self.b @ nu + self.k_xi

    def output(self, xi, nu):
        return self.c @ xi + self.d @ nu + self.k_phi


def _block_scales(model, n):
    """Per-variable magnitudes and row divisors; identity when absent."""
    if getattr(model, "x_scales", None) is None:
        return np.ones(n), np.ones(n)
    s = np.asarray(list(model.x_scales) + list(model.z_scales), dtype=float)
    rows = np.asarray(model.row_scales, dtype=float)
    gamma = np.asarray(model.gamma, dtype=float)
    return s, np.where(gamma > 0.0, s, rows)


def linearize(model, equilibrium, h_rel=FD_H_REL, order=FD_ORDER):
    """Affine model of a storage block at a solved operating point.

    equilibrium is (xz0, (u0, v_dc0)). Probes run in the block's scaled
    coordinates, so each variable is stepped proportionally to its natural
    magnitude instead of its (possibly zero) current value. Raises
    InconsistentEquilibrium when the rows are not already zero there.
    """
    xz0, nu0 = equilibrium
    xz0 = np.asarray(xz0, dtype=float)
    u0, v0 = float(nu0[0]), float(nu0[1])
    n = xz0.size
    s, row_div = _block_scales(model, n)
    rows0 = np.asarray(model.psi(xz0.tolist(), u0, v0), dtype=float)
    worst = float(np.abs(rows0 / row_div).max())
    if worst > EQUILIBRIUM_TOL:
        raise InconsistentEquilibrium("scaled residual %.3e at expansion point" % worst)
    u_s = float(getattr(model, "u_scale", 0.0)) or max(1.0, abs(u0))
    v_s = float(getattr(model, "v_dc_nom", 0.0)) or max(1.0, abs(v0))
    nu_s = np.array([u_s, v_s])
    nu_vec = np.array([u0, v0])

    def rows_x(xh):
        return np.asarray(model.psi((xh * s).tolist(), u0, v0), dtype=float) / row_div

    def rows_nu(nh):
        return np.asarray(model.psi(xz0.tolist(), nh[0] * u_s, nh[1] * v_s),
                          dtype=float) / row_div

    def out_x(xh):
        return np.array([model.i_dc((xh * s).tolist(), u0, v0)])

    def out_nu(nh):
        return np.array([model.i_dc(xz0.tolist(), nh[0] * u_s, nh[1] * v_s)])

    a_h = numerics.fd_jacobian(rows_x, xz0 / s, h_rel, order=order)
    b_h = numerics.fd_jacobian(rows_nu, nu_vec / nu_s, h_rel, order=order)
    c_h = numerics.fd_jacobian(out_x, xz0 / s, h_rel, order=order)
    d_h = numerics.fd_jacobian(out_nu, nu_vec / nu_s, h_rel, order=order)
    a = (row_div[:, None] * a_h) / s[None, :]
    b = (row_div[:, None] * b_h) / nu_s[None, :]
    c = c_h / s[None, :]
    d = d_h / nu_s[None, :]
    phi0 = float(model.i_dc(xz0.tolist(), u0, v0))
    k_xi = rows0 - a @ xz0 - b @ nu_vec
    k_phi = np.array([phi0]) - c @ xz0 - d @ nu_vec
    return LinearizedDae(model.gamma, a, b, c, d, k_xi, k_phi, xz0, nu_vec, [phi0])


class Partition:
    """Index split of a block's variables into retained x and internal z."""

    def __init__(self, x_indices, z_indices):
        self.x_indices = [int(i) for i in x_indices]
        self.z_indices = [int(i) for i in z_indices]
        if set(self.x_indices) & set(self.z_indices):
            raise ValueError("x and z indices overlap")

    def check_covers(self, n):
        if sorted(self.x_indices + self.z_indices) != list(range(n)):
            raise ValueError("partition does not cover all %d variables" % n)


def partition_states(tech):
    """Variable split for a named technology (or a block carrying .name).

    Retained coordinates always come first in the blocks shipped here, so
    the split is positional; the registry pins how many of each there are.
    """
    tag = getattr(tech, "name", tech)
    cls = TECHNOLOGIES.get(tag)
    if cls is None:
        raise UnknownTechnology("no partition for %r" % (tag,))
    return Partition(range(cls.nx), range(cls.nx, cls.nx + cls.nz))


class MatrixSet:
    """One affine realization: retained-block matrices plus z recovery maps.

    recover_z() rebuilds the eliminated internal variables from (x, u, v_dc);
    diagnostics and the battery mode predicate read them.
    """

    def __init__(self, a, b_u, b_v, k_x, c, d_u, d_v, k_i,
                 z_x=None, z_u=None, z_v=None, z_k=None):
        self.a = np.asarray(a, dtype=float)
        self.b_u = np.asarray(b_u, dtype=float).reshape(-1)
        self.b_v = np.asarray(b_v, dtype=float).reshape(-1)
        self.k_x = np.asarray(k_x, dtype=float).reshape(-1)
        self.c = np.asarray(c, dtype=float).reshape(-1)
        self.d_u = float(d_u)
        self.d_v = float(d_v)
        self.k_i = float(k_i)
        nx = self.k_x.size
        self.z_x = np.zeros((0, nx)) if z_x is None else np.asarray(z_x, dtype=float)
        self.z_u = np.zeros(0) if z_u is None else np.asarray(z_u, dtype=float).reshape(-1)
        self.z_v = np.zeros(0) if z_v is None else np.asarray(z_v, dtype=float).reshape(-1)
        self.z_k = np.zeros(0) if z_k is None else np.asarray(z_k, dtype=float).reshape(-1)

    def rows(self, x, u, v_dc):
        return self.a @ x + self.b_u * u + self.b_v * v_dc + self.k_x

    def current(self, x, u, v_dc):
        return float(self.c @ x + self.d_u * u + self.d_v * v_dc + self.k_i)

    def recover_z(self, x, u, v_dc):
        return self.z_x @ x + self.z_u * u + self.z_v * v_dc + self.z_k


def _equilibrated_solve(a, rhs):
    """Solve a @ x = rhs after max-abs row/column equilibration.

    The internal block mixes physical units, so its raw condition number
    conflates scaling with singularity; equilibration exposes the real one.
    Raises SingularZBlock on an empty row/column or an equilibrated
    condition past ZBLOCK_COND_LIMIT.
    """
    r = np.abs(a).max(axis=1)
    if np.any(r == 0.0):
        raise SingularZBlock("internal block has an all-zero row")
    r = 1.0 / r
    c = np.abs(a * r[:, None]).max(axis=0)
    if np.any(c == 0.0):
        raise SingularZBlock("internal block has an all-zero column")
    c = 1.0 / c
    a_eq = a * r[:, None] * c[None, :]
    cond = float(np.linalg.cond(a_eq))
    if not np.isfinite(cond) or cond > ZBLOCK_COND_LIMIT:
        raise SingularZBlock("internal block condition %.3e" % cond)
    y = np.linalg.solve(a_eq, rhs * r[:, None])
    return c[:, None] * y


def _eliminate(lin, part):
    """Schur-complement removal of the z block from an affine model."""
    ix = np.asarray(part.x_indices, dtype=int)
    iz = np.asarray(part.z_indices, dtype=int)
    a_xx = lin.a[np.ix_(ix, ix)]
    b_xu = lin.b[ix, 0]
    b_xv = lin.b[ix, 1]
    k_x = lin.k_xi[ix]
    c_x = lin.c[0, ix]
    d_u = lin.d[0, 0]
    d_v = lin.d[0, 1]
    k_i = lin.k_phi[0]
    if iz.size == 0:
        return MatrixSet(a_xx, b_xu, b_xv, k_x, c_x, d_u, d_v, k_i)
    a_zz = lin.a[np.ix_(iz, iz)]
    a_xz = lin.a[np.ix_(ix, iz)]
    a_zx = lin.a[np.ix_(iz, ix)]
    rhs = np.column_stack([a_zx, lin.b[iz, 0], lin.b[iz, 1], lin.k_xi[iz]])
    sol = -_equilibrated_solve(a_zz, rhs)
    z_x = sol[:, :ix.size]
    z_u = sol[:, ix.size]
    z_v = sol[:, ix.size + 1]
    z_k = sol[:, ix.size + 2]
    c_z = lin.c[0, iz]
    return MatrixSet(a_xx + a_xz @ z_x, b_xu + a_xz @ z_u, b_xv + a_xz @ z_v,
                     k_x + a_xz @ z_k,
                     c_x + c_z @ z_x, d_u + c_z @ z_u, d_v + c_z @ z_v,
                     k_i + c_z @ z_k,
                     z_x, z_u, z_v, z_k)


class GeneralizedEss:
    """Compiled affine port model with its energy law and operating point.

    sets maps a branch name to a MatrixSet; single-branch models use
    "default". Mode-switched models carry `mode_rule`, a predicate
    descriptor {"z_index": j, "positive": name, "otherwise": name}: the set
    named `positive` is active while the z variable it recovers at index j
    is positive. The single-set attribute views (a, b_u, ...) expose the
    branch named by `primary`. Instances are immutable once built and can be
    shared across concurrent simulations.
    """

    def __init__(self, technology, x_names, gamma, sets, rho, beta, chi,
                 x0, z0, u0, v_dc0, i_dc0, mode_rule=None,
                 x_scales=None, row_scales=None, z_names=(), meta=None):
        self.technology = technology
        self.x_names = tuple(x_names)
        self.z_names = tuple(z_names)
        self.gamma = np.asarray(gamma, dtype=float)
        self.sets = dict(sets)
        self.mode_rule = dict(mode_rule) if mode_rule else None
        self.primary = self.mode_rule["positive"] if self.mode_rule else "default"
        self.rho = tuple(float(v) for v in rho)
        self.beta = tuple(float(v) for v in beta)
        self.chi = tuple(float(v) for v in chi)
        self.x0 = np.asarray(x0, dtype=float)
        self.z0 = np.asarray(z0, dtype=float)
        self.u0 = float(u0)
        self.v_dc0 = float(v_dc0)
        self.i_dc0 = float(i_dc0)
        nx = self.x0.size
        self.x_scales = np.ones(nx) if x_scales is None else np.asarray(x_scales, dtype=float)
        self.row_scales = np.ones(nx) if row_scales is None else np.asarray(row_scales, dtype=float)
        self.meta = dict(meta or {})

    def active_name(self, x, u, v_dc):
        if self.mode_rule is None:
            return self.primary
        probe = self.sets[self.mode_rule["positive"]]
        zj = probe.recover_z(np.asarray(x, dtype=float), u, v_dc)[self.mode_rule["z_index"]]
        return self.mode_rule["positive"] if zj > 0.0 else self.mode_rule["otherwise"]

    def active_set(self, x, u, v_dc):
        return self.sets[self.active_name(x, u, v_dc)]

    @property
    def a(self):
        return self.sets[self.primary].a

    @property
    def b_u(self):
        return self.sets[self.primary].b_u

    @property
    def b_v(self):
        return self.sets[self.primary].b_v

    @property
    def k_x(self):
        return self.sets[self.primary].k_x

    @property
    def c(self):
        return self.sets[self.primary].c

    @property
    def d_u(self):
        return self.sets[self.primary].d_u

    @property
    def d_v(self):
        return self.sets[self.primary].d_v

    @property
    def k_i(self):
        return self.sets[self.primary].k_i


def reduce(lin, part):
    """Collapse the internal block of an affine model.

    The retained rows keep their original masks; internal rows are treated
    as instantaneous regardless of how they were masked, which is exactly
    the approximation that makes the small model cheap. Raises
    SingularZBlock when the internal matrix cannot support an honest solve.
    """
    part.check_covers(lin.xi0.size)
    ms = _eliminate(lin, part)
    ix = np.asarray(part.x_indices, dtype=int)
    iz = np.asarray(part.z_indices, dtype=int)
    return GeneralizedEss(
        technology="custom",
        x_names=tuple("x%d" % i for i in part.x_indices),
        gamma=lin.gamma[ix],
        sets={"default": ms},
        rho=(), beta=(), chi=(),
        x0=lin.xi0[ix], z0=lin.xi0[iz],
        u0=lin.nu0[0], v_dc0=lin.nu0[1], i_dc0=lin.phi0[0])


def gen_derivatives(g, x, u, v_dc):
    """Row values and port current of a compiled model at (x, u, v_dc).

    Rows follow the block convention: entries with gamma 1 are state rates,
    entries with gamma 0 are constraint residuals an integrator must hold at
    zero. Mode-switched models pick their branch here.
    """
    x = np.asarray(x, dtype=float)
    ms = g.active_set(x, u, v_dc)
    return ms.rows(x, u, v_dc), ms.current(x, u, v_dc)


def gen_energy(g, x):
    """Stored energy of the reduced model at retained state x."""
    total = 0.0
    for xi, rho, beta, chi in zip(np.asarray(x, dtype=float), g.rho, g.beta, g.chi):
        if xi < 0.0 and beta != round(beta):
            raise NonRealPower("state %.6g under fractional exponent %.6g" % (xi, beta))
        if rho == 0.0:
            continue
        total += rho * (xi ** beta - chi ** beta)
    return total


_BUILD_TARGETS = {
    "smes": lambda m: {"energy": 0.25 * m.l_c * m.i_rated ** 2},
    "eces": lambda m: {"energy": 0.25 * m.c_sc * m.v_sc0 ** 2},
    "caes": lambda m: {"pi2": m.pi2_0},
    # mid-charge is no good here: the polarization term k_p q_e / soc blows
    # up as charge is drawn, so expand at the declared operating soc
    "bes": lambda m: {"soc": m.soc0},
}


def default_build_target(model):
    """Half-charge expansion point; the air tank instead pins its nominal
    pressure, whose usable window is not centered on half energy."""
    fn = _BUILD_TARGETS.get(getattr(model, "name", None))
    if fn is None:
        raise UnknownTechnology("no default expansion point for %r" % (model,))
    return fn(model)


def build_generalized(technology, model, operating_point=None):
    """Compile one device block end to end.

    operating_point may carry "v_dc" plus at most one pinned quantity for
    the equilibrium solve; omitted pieces fall back to the nominal dc
    voltage and the technology's default expansion point. Batteries are
    expanded once per polarization branch, sharing the operating point.
    """
    if getattr(model, "name", None) != technology:
        raise UnknownTechnology("model %r does not implement %r"
                                % (getattr(model, "name", None), technology))
    op = dict(operating_point or {})
    v_dc0 = float(op.pop("v_dc", model.v_dc_nom))
    target = op or default_build_target(model)
    xz0, u0, i_dc0 = detailed_equilibrium(model, v_dc0, target)
    part = partition_states(technology)
    nx = len(part.x_indices)
    eq = (xz0, (u0, v_dc0))
    if technology == "bes":
        sets = {}
        try:
            for branch in ("discharge", "charge"):
                model.branch_override = branch
                sets[branch] = _eliminate(linearize(model, eq), part)
        finally:
            model.branch_override = None
        mode_rule = {"z_index": 1, "positive": "discharge", "otherwise": "charge"}
    else:
        sets = {"default": _eliminate(linearize(model, eq), part)}
        mode_rule = None
    rho, beta, chi = model.energy_params()
    return GeneralizedEss(
        technology=technology,
        x_names=model.x_names,
        gamma=np.asarray(model.gamma, dtype=float)[:nx],
        sets=sets,
        rho=rho, beta=beta, chi=chi,
        x0=xz0[:nx], z0=xz0[nx:],
        u0=u0, v_dc0=v_dc0, i_dc0=i_dc0,
        mode_rule=mode_rule,
        x_scales=model.x_scales,
        row_scales=list(model.row_scales)[:nx],
        z_names=model.z_names,
        meta={"fd_h_rel": FD_H_REL, "fd_order": FD_ORDER,
              "zblock_cond_limit": ZBLOCK_COND_LIMIT})


def variable_counts(g):
    """Bookkeeping for the compile report.

    The detailed side counts its state and algebraic variables plus the two
    port quantities driving it (u, v_dc); the reduced side counts the
    retained states plus (u, v_dc, i_dc), the port current having become an
    explicit output instead of an internal unknown.
    """
    nx = int(g.x0.size)
    nz = int(g.z0.size)
    return {"detailed": nx + nz + 2, "generalized": nx + 3}


class GeneralizedDae(numerics.DaeSystem):
    """Standalone integration of a compiled model at imposed (u, v_dc).

    States are the retained x scaled per entry; nu = [u, v_dc]. Same row
    conditioning convention as the detailed blocks.
    """

    def __init__(self, gen):
        self.gen = gen
        self.gamma = np.asarray(gen.gamma, dtype=float)
        self.scales = np.asarray(gen.x_scales, dtype=float)
        rs = np.asarray(gen.row_scales, dtype=float)
        self.row_div = np.where(self.gamma > 0.0, self.scales, rs)

    def pack(self, x):
        return np.asarray(x, dtype=float) / self.scales

    def unpack(self, state):
        return np.asarray(state, dtype=float) * self.scales

    def psi(self, state, nu):
        x = state * self.scales
        rows, _ = gen_derivatives(self.gen, x, nu[0], nu[1])
        return rows / self.row_div

    def output(self, state, nu):
        x = state * self.scales
        _, i_dc = gen_derivatives(self.gen, x, nu[0], nu[1])
        out = {"i_dc": i_dc, "mode": self.gen.active_name(x, nu[0], nu[1])}
        if self.gen.rho:
            out["energy"] = gen_energy(self.gen, x)
        return out


# --- on-disk form ---------------------------------------------------------------

def _floats(v):
    return [float(x) for x in np.asarray(v, dtype=float).reshape(-1)]


def _matrix(m):
    return [[float(x) for x in row] for row in np.asarray(m, dtype=float)]


def _set_doc(ms):
    return {"a": _matrix(ms.a), "b_u": _floats(ms.b_u), "b_v": _floats(ms.b_v),
            "k_x": _floats(ms.k_x), "c": _floats(ms.c),
            "d_u": float(ms.d_u), "d_v": float(ms.d_v), "k_i": float(ms.k_i),
            "z_x": _matrix(ms.z_x), "z_u": _floats(ms.z_u),
            "z_v": _floats(ms.z_v), "z_k": _floats(ms.z_k)}


def _set_from_doc(doc):
    return MatrixSet(np.asarray(doc["a"], dtype=float), doc["b_u"], doc["b_v"],
                     doc["k_x"], doc["c"], doc["d_u"], doc["d_v"], doc["k_i"],
                     np.asarray(doc["z_x"], dtype=float).reshape(len(doc["z_u"]), -1),
                     doc["z_u"], doc["z_v"], doc["z_k"])


def save_generalized(g, path):
    """Write a compiled model to a versioned structured-text file."""
    doc = {
        "kind": "gridess-generalized-model",
        "format_version": FORMAT_VERSION,
        "technology": g.technology,
        "x_names": list(g.x_names),
        "z_names": list(g.z_names),
        "gamma": _floats(g.gamma),
        "rho": list(g.rho), "beta": list(g.beta), "chi": list(g.chi),
        "equilibrium": {"x0": _floats(g.x0), "z0": _floats(g.z0),
                        "u0": g.u0, "v_dc0": g.v_dc0, "i_dc0": g.i_dc0},
        "scales": {"x": _floats(g.x_scales), "rows": _floats(g.row_scales)},
        "mode_rule": g.mode_rule,
        "sets": {name: _set_doc(ms) for name, ms in g.sets.items()},
        "meta": g.meta,
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)


def load_generalized(path):
    """Read back a file written by save_generalized."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or doc.get("kind") != "gridess-generalized-model":
        raise ValueError("not a generalized-model file: %s" % path)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported format_version %r" % doc.get("format_version"))
    eq = doc["equilibrium"]
    return GeneralizedEss(
        technology=doc["technology"],
        x_names=doc["x_names"],
        gamma=doc["gamma"],
        sets={name: _set_from_doc(sd) for name, sd in doc["sets"].items()},
        rho=doc["rho"], beta=doc["beta"], chi=doc["chi"],
        x0=eq["x0"], z0=eq["z0"], u0=eq["u0"], v_dc0=eq["v_dc0"], i_dc0=eq["i_dc0"],
        mode_rule=doc["mode_rule"],
        x_scales=doc["scales"]["x"], row_scales=doc["scales"]["rows"],
        z_names=doc["z_names"],
        meta=doc["meta"])
