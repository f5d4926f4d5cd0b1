"""Dense linear algebra, Newton solvers, and an implicit-trapezoidal DAE integrator.

All systems are posed in semi-explicit residual form

    residual(x, nu, x_dot) = psi(x, nu) - gamma * x_dot

where gamma is a 0/1 mask: rows with gamma=1 are differential (x_dot_i =
psi_i), rows with gamma=0 are algebraic constraints (psi_i = 0) whose residual
never references x_dot. The integrator enforces algebraic rows at every
accepted step.
"""

import warnings

import numpy as np
from scipy.linalg import lu_factor, lu_solve as _scipy_lu_solve


class SingularMatrix(Exception):
    """Matrix factor produced a pivot too small to trust, or the solve residual failed its bound."""


class NoConvergence(Exception):
    """Newton iteration exhausted its budget.

    Carries `iterations` and `residual_norm` so callers can decide whether to
    retry with a smaller step.
    """

    def __init__(self, message, iterations=0, residual_norm=float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual_norm = residual_norm


class NonFiniteEvaluation(Exception):
    """A model function returned NaN or Inf."""


PIVOT_REL_TOL = 1e-12
RESIDUAL_REL_TOL = 1e-10


def lu_solve(a, b):
    """Solve a x = b by LU factorization with partial pivoting.

    Raises SingularMatrix when any pivot is below PIVOT_REL_TOL relative to
    the infinity norm of the corresponding original row, or when the solution
    fails the backward-error bound
    ||a x - b||_inf <= RESIDUAL_REL_TOL (||a||_inf ||x||_inf + ||b||_inf).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("a must be square")
    row_norms = np.abs(a).sum(axis=1)
    try:
        with warnings.catch_warnings():
            # Exact-zero pivots warn inside scipy; our own check below raises.
            warnings.simplefilter("ignore")
            fac = lu_factor(a, check_finite=False)
    except Exception as exc:
        raise SingularMatrix(str(exc)) from exc
    u_diag = np.abs(np.diag(fac[0]))
    # Pivot magnitudes are compared against the scale of the matrix itself,
    # not machine zero, so badly scaled near-singular systems are caught.
    ref = np.maximum(row_norms.max(), 1e-300)
    if np.any(u_diag <= PIVOT_REL_TOL * ref):
        raise SingularMatrix("pivot below relative tolerance")
    x = _scipy_lu_solve(fac, b, check_finite=False)
    resid = np.abs(a @ x - b).max() if b.size else 0.0
    bound = RESIDUAL_REL_TOL * (np.abs(a).max() * max(np.abs(x).max(), 0.0) * a.shape[0] + np.abs(b).max() + 1.0e-300)
    if not np.isfinite(x).all() or resid > max(bound, RESIDUAL_REL_TOL):
        raise SingularMatrix("solution failed backward-error bound")
    return x


def fd_jacobian(f, x, h_rel=1e-6, order=2):
    """Central-difference Jacobian of f at x.

    Step per component: h_i = h_rel * max(1, |x_i|). order=2 is the two-point
    stencil; order=4 uses five points, which stays accurate with a much larger
    h_rel and so keeps subtractive-cancellation noise down when f mixes terms
    of very different magnitude. Raises NonFiniteEvaluation if any probe
    returns a non-finite value.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    x = np.asarray(x, dtype=float)
    n = x.size
    f0 = np.asarray(f(x), dtype=float)
    if not np.isfinite(f0).all():
        raise NonFiniteEvaluation("f(x) not finite at expansion point")
    m = f0.size
    jac = np.empty((m, n))
    xp = x.copy()
    for i in range(n):
        h = h_rel * max(1.0, abs(x[i]))
        xi = x[i]
        xp[i] = xi + h
        fp = np.asarray(f(xp), dtype=float)
        xp[i] = xi - h
        fm = np.asarray(f(xp), dtype=float)
        if order == 2:
            col = (fp - fm) / (2.0 * h)
        else:
            xp[i] = xi + 2.0 * h
            fp2 = np.asarray(f(xp), dtype=float)
            xp[i] = xi - 2.0 * h
            fm2 = np.asarray(f(xp), dtype=float)
            col = (-fp2 + 8.0 * fp - 8.0 * fm + fm2) / (12.0 * h)
        xp[i] = xi
        if not np.isfinite(col).all():
            raise NonFiniteEvaluation("non-finite probe in column %d" % i)
        jac[:, i] = col
    return jac


def newton_solve(f, x0, tol=1e-8, max_iter=50, h_rel=1e-6):
    """Damped-free Newton iteration: full finite-difference Jacobian per step.

    Converged when ||f(x)||_inf <= tol. Raises NoConvergence past max_iter,
    SingularMatrix if a Jacobian cannot be solved, NonFiniteEvaluation on
    NaN/Inf from f.
    """
    x = np.array(x0, dtype=float)
    for it in range(max_iter):
        fx = np.asarray(f(x), dtype=float)
        if not np.isfinite(fx).all():
            raise NonFiniteEvaluation("residual not finite at iteration %d" % it)
        norm = np.abs(fx).max() if fx.size else 0.0
        if norm <= tol:
            return x
        jac = fd_jacobian(f, x, h_rel)
        x = x - lu_solve(jac, fx)
    fx = np.asarray(f(x), dtype=float)
    norm = np.abs(fx).max() if fx.size else 0.0
    if norm <= tol:
        return x
    raise NoConvergence("no convergence in %d iterations" % max_iter,
                        iterations=max_iter, residual_norm=float(norm))


class DaeSystem:
    """Base class for semi-explicit DAE blocks.

    Subclasses set `gamma` (0/1 array, one entry per row) and implement
    psi(x, nu). residual() and the integrator are derived from psi. Instances
    are treated as immutable during integration except for explicitly
    documented event tables.
    """

    gamma = None

    def psi(self, x, nu):
        raise NotImplementedError

    def residual(self, x, nu, x_dot):
        r = np.asarray(self.psi(x, nu), dtype=float).copy()
        g = self.gamma
        r -= g * np.asarray(x_dot, dtype=float)
        return r

    def output(self, x, nu):
        """Observable quantities at a state; default none."""
        return {}


class SimpleDae(DaeSystem):
    """Wrap plain callables as a DaeSystem; used by tests and small experiments."""

    def __init__(self, gamma, psi_fn, output_fn=None):
        self.gamma = np.asarray(gamma, dtype=float)
        self._psi = psi_fn
        self._out = output_fn

    def psi(self, x, nu):
        return self._psi(x, nu)

    def output(self, x, nu):
        if self._out is None:
            return {}
        return self._out(x, nu)


NEWTON_TOL = 1e-8


class _TrapStepper:
    """One implicit-trapezoidal step with a reused Jacobian factorization.

    The iteration matrix diag(gamma) - S * J_psi (S_i = dt/2 on differential
    rows, -1 on algebraic rows) is refactored only when the chord iteration
    stalls, the step size changes, or the caller invalidates it after an
    event. Chord steps keep the per-step cost at a couple of psi evaluations.
    """

    def __init__(self, system, dt, tol=NEWTON_TOL, max_iter=15):
        self.system = system
        self.dt = dt
        self.tol = tol
        self.max_iter = max_iter
        self.gamma = np.asarray(system.gamma, dtype=float)
        self._fac = None
        self.jac_evals = 0

    def invalidate(self):
        self._fac = None

    def set_dt(self, dt):
        if dt != self.dt:
            self.dt = dt
            self._fac = None

    def _refactor(self, x, nu):
        sys = self.system
        jac = fd_jacobian(lambda y: sys.psi(y, nu), x)
        self.jac_evals += 1
        s = np.where(self.gamma > 0.5, 0.5 * self.dt, -1.0)
        a = np.diag(self.gamma) - s[:, None] * jac
        try:
            self._fac = lu_factor(a, check_finite=False)
        except Exception as exc:
            raise SingularMatrix(str(exc)) from exc

    def step(self, x, nu, psi_x):
        """Advance one step of self.dt; returns (y, psi_y)."""
        sys = self.system
        g = self.gamma
        dt2 = 0.5 * self.dt
        # Explicit-Euler predictor on differential rows only.
        y = x + self.dt * g * psi_x
        refreshed = False
        if self._fac is None:
            self._refactor(x, nu)
            refreshed = True
        base = x + dt2 * g * psi_x
        it = 0
        while True:
            psi_y = np.asarray(sys.psi(y, nu), dtype=float)
            if not np.isfinite(psi_y).all():
                # Usually a predictor overshoot; let the caller subdivide.
                raise NoConvergence("non-finite iterate", iterations=it,
                                    residual_norm=float("inf"))
            r = np.where(g > 0.5, y - base - dt2 * psi_y, psi_y)
            norm = np.abs(r).max()
            # Require one chord correction even when the predictor already
            # meets the tolerance: otherwise algebraic rows are never
            # re-coupled during quiescent stretches and tolerance-band errors
            # can compound instead of contracting.
            if norm <= self.tol and it >= 1:
                return y, psi_y
            it += 1
            if it > self.max_iter:
                if not refreshed:
                    # Stale Jacobian is the usual culprit; rebuild once and
                    # keep iterating before declaring failure.
                    self._refactor(y, nu)
                    refreshed = True
                    it = 0
                    continue
                raise NoConvergence("trapezoidal step stalled", iterations=it,
                                    residual_norm=float(norm))
            y = y - _scipy_lu_solve(self._fac, r, check_finite=False)


def trapezoidal_step(system, x, nu, dt, tol=NEWTON_TOL):
    """Single implicit-trapezoidal step, fresh Jacobian. Reference path.

    Differential rows solve y - x - dt/2 (psi(y) + psi(x)) = 0; algebraic rows
    solve psi(y) = 0.
    """
    stepper = _TrapStepper(system, dt, tol=tol)
    psi_x = np.asarray(system.psi(x, nu), dtype=float)
    y, _ = stepper.step(np.asarray(x, dtype=float), nu, psi_x)
    return y


MAX_HALVINGS = 4


def integrate(system, state0, input_schedule, t_end, dt, observer=None, tol=NEWTON_TOL):
    """March a DaeSystem from t=0 to t_end on a fixed grid.

    input_schedule(t) returns the input vector, held constant across each
    step interval [t_k, t_k + dt). observer(t, x), when given, is called at
    t=0 and after every accepted grid step. On a convergence failure the
    offending interval is subdivided (up to 2**MAX_HALVINGS substeps); the
    nominal grid is restored afterwards, so recorded times never change.

    Returns (times, states) with states[k] the row at times[k].
    """
    x = np.array(state0, dtype=float)
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, abs(t_end)):
        raise ValueError("t_end must be an integer number of steps")
    times = np.empty(n_steps + 1)
    states = np.empty((n_steps + 1, x.size))
    times[0] = 0.0
    states[0] = x
    stepper = _TrapStepper(system, dt, tol=tol)
    nu = np.asarray(input_schedule(0.0), dtype=float)
    psi_x = np.asarray(system.psi(x, nu), dtype=float)
    if observer is not None:
        observer(0.0, x)
    for k in range(n_steps):
        t = k * dt
        nu_new = np.asarray(input_schedule(t), dtype=float)
        if not np.array_equal(nu_new, nu):
            nu = nu_new
            psi_x = np.asarray(system.psi(x, nu), dtype=float)
        try:
            x, psi_x = stepper.step(x, nu, psi_x)
        except NoConvergence:
            x, psi_x = _subdivided(stepper, system, x, nu, dt, tol)
            stepper.set_dt(dt)
            stepper.invalidate()
        t_next = (k + 1) * dt
        times[k + 1] = t_next
        states[k + 1] = x
        if observer is not None:
            observer(t_next, x)
    return times, states


def _subdivided(stepper, system, x, nu, dt, tol):
    """Retry one interval with 2, 4, ... 2**MAX_HALVINGS substeps."""
    for level in range(1, MAX_HALVINGS + 1):
        m = 2 ** level
        sub = dt / m
        stepper.set_dt(sub)
        stepper.invalidate()
        y = x.copy()
        psi_y = np.asarray(system.psi(y, nu), dtype=float)
        try:
            for _ in range(m):
                y, psi_y = stepper.step(y, nu, psi_y)
            return y, psi_y
        except (NoConvergence, NonFiniteEvaluation):
            continue
    raise NoConvergence("step failed after %d halvings" % MAX_HALVINGS)


def solve_algebraic(system, x, nu, tol=NEWTON_TOL, max_iter=30):
    """Re-solve the algebraic rows holding differential states fixed.

    Used after discrete events so the next step starts from a consistent
    point. Returns the corrected state.
    """
    g = np.asarray(system.gamma, dtype=float)
    alg = np.where(g < 0.5)[0]
    if alg.size == 0:
        return np.array(x, dtype=float)
    x = np.array(x, dtype=float)

    def f(z):
        xf = x.copy()
        xf[alg] = z
        return np.asarray(system.psi(xf, nu), dtype=float)[alg]

    z = newton_solve(f, x[alg], tol=tol, max_iter=max_iter)
    out = x.copy()
    out[alg] = z
    return out
