"""Parametrized PDE problems and their high-fidelity ("truth") solvers.

Three operator families are implemented on uniform grids:

* ``burgers`` (1-D): conservative viscous Burgers, ``(u^2/2)_x - mu u_xx``,
  discretized as ``(u_{i+1}^2 - u_{i-1}^2)/(4h) - mu (u_{i-1} - 2u_i + u_{i+1})/h^2``.
* ``cubic-rd`` (2-D): cubic reaction-diffusion ``-mu2 Lap(u) + u (u - mu1)^2``
  on the five-point stencil with zero Dirichlet data.
* ``heat`` (1-D, linear): ``-u_xx + mu u``; used as the linear reference
  operator for interpolation and estimator tests.

Steady problems are solved by damped Newton iteration (Burgers, heat) or by
the fixed-point linearization

    -mu2 Lap(u_next) + g'(u) u_next = g'(u) u - g(u) + f,   g(u) = u (u - mu1)^2

(cubic reaction-diffusion).  Transient problems march with backward Euler,
re-using the steady spatial solver at every level with the extra ``u/dt``
diagonal term, warm-started from the previous level.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from .errors import ConvergenceError
from .grids import Grid1D, Grid2D, apply_dx_central, apply_dxx, apply_laplacian_5pt

KINDS = (
    "steady-burgers",
    "steady-cubic-rd",
    "steady-heat",
    "transient-burgers",
    "transient-cubic-rd",
)

FORCINGS = ("zero", "constant", "sinpi", "ramp", "sincos")


@dataclass(frozen=True)
class ProblemSpec:
    """Which PDE to solve, on what domain, with what data.

    ``param_box`` is a tuple of per-component ``(lo, hi)`` bounds; its length
    fixes the parameter dimension (1 for Burgers/heat, 2 for cubic RD).
    ``bc`` is the 1-D Dirichlet pair ``(left, right)``; 2-D problems use
    homogeneous Dirichlet data.  Transient problems additionally carry the
    time step, final time and an initial-condition descriptor.
    """

    kind: str
    param_box: tuple
    domain: tuple
    forcing: str = "zero"
    forcing_amplitude: float = 0.0
    bc: tuple = (0.0, 0.0)
    t_final: float = None
    dt: float = None
    initial_condition: str = "zero"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.forcing not in FORCINGS:
            raise ValueError(f"unknown forcing {self.forcing!r}")
        box = tuple((float(lo), float(hi)) for lo, hi in self.param_box)
        object.__setattr__(self, "param_box", box)
        for lo, hi in box:
            if not lo <= hi:
                raise ValueError(f"empty parameter box {box}")
        if len(box) != self.num_params:
            raise ValueError(f"{self.kind} needs {self.num_params} parameter(s), box has {len(box)}")
        dom = tuple((float(a), float(b)) for a, b in self.domain)
        object.__setattr__(self, "domain", dom)
        if len(dom) != self.ndim:
            raise ValueError(f"{self.kind} is {self.ndim}-D, domain has {len(dom)} axes")
        if self.is_transient:
            if self.t_final is None or self.dt is None:
                raise ValueError("transient problems need t_final and dt")
            num_time_levels(self.t_final, self.dt)

    @property
    def family(self):
        return self.kind.split("-", 1)[1]

    @property
    def is_transient(self):
        return self.kind.startswith("transient")

    @property
    def ndim(self):
        return 2 if self.family == "cubic-rd" else 1

    @property
    def num_params(self):
        return 2 if self.family == "cubic-rd" else 1


@dataclass(frozen=True)
class NewtonConfig:
    """Stopping and step-control settings for the nonlinear truth solvers."""

    tol: float = 1e-10
    max_iter: int = 100
    damping: float = 0.5

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("need at least one iteration")
        if not 0 < self.damping <= 1:
            raise ValueError("damping factor must lie in (0, 1]")


@dataclass
class Trajectory:
    """Backward-Euler time history: one state column per time level."""

    times: np.ndarray
    states: np.ndarray
    dt: float

    def __post_init__(self):
        if self.states.shape[1] != self.times.size:
            raise ValueError("one state column per time level required")

    @property
    def num_levels(self):
        return self.times.size - 1


def num_time_levels(t_final, dt):
    """Number of steps ``T / dt``, validated to be integral."""
    if dt <= 0 or t_final <= 0:
        raise ValueError("need positive dt and t_final")
    n = round(t_final / dt)
    if n < 1 or abs(n * dt - t_final) > 1e-8 * max(t_final, dt):
        raise ValueError(f"t_final/dt = {t_final / dt} is not an integer level count")
    return n


# Standard experiment setups -------------------------------------------------

def steady_burgers_spec(param_box=((0.05, 1.0),)):
    return ProblemSpec("steady-burgers", param_box, ((-1.0, 1.0),), bc=(1.0, -1.0))


def steady_cubic_rd_spec(param_box=((0.2, 5.0), (0.2, 2.0))):
    return ProblemSpec(
        "steady-cubic-rd", param_box, ((-1.0, 1.0), (-1.0, 1.0)),
        forcing="sincos", forcing_amplitude=100.0,
    )


def steady_heat_spec(param_box=((0.0, 10.0),)):
    # ramp forcing excites every diffusion eigenmode, so the solution
    # manifold over the reaction coefficient has full numerical rank
    return ProblemSpec("steady-heat", param_box, ((0.0, 1.0),), forcing="ramp", forcing_amplitude=1.0)


def transient_burgers_spec(param_box, forcing_amplitude, bc, t_final, dt):
    forcing = "zero" if forcing_amplitude == 0 else "constant"
    return ProblemSpec(
        "transient-burgers", param_box, ((0.0, 1.0),),
        forcing=forcing, forcing_amplitude=forcing_amplitude, bc=bc,
        t_final=t_final, dt=dt,
    )


def transient_cubic_rd_spec(param_box=((1.0, 5.0), (0.2, 1.0)), t_final=0.5, dt=5e-3):
    return ProblemSpec(
        "transient-cubic-rd", param_box, ((-1.0, 1.0), (-1.0, 1.0)),
        forcing="sincos", forcing_amplitude=100.0, t_final=t_final, dt=dt,
    )


def make_grid(problem, k):
    """Build the truth grid with ``k`` interior nodes per direction."""
    if problem.ndim == 1:
        (a, b), = problem.domain
        return Grid1D(a, b, k)
    (a1, b1), (a2, b2) = problem.domain
    return Grid2D((a1, b1), (a2, b2), k, k)


def forcing_field(problem, grid):
    """Forcing sampled on the full grid; boundary entries are zero."""
    out = np.zeros(grid.num_nodes)
    amp = problem.forcing_amplitude
    if problem.forcing == "zero":
        return out
    if problem.forcing == "constant":
        out[grid.interior] = amp
        return out
    if problem.forcing == "sinpi":
        out[grid.interior] = amp * np.sin(np.pi * grid.nodes[grid.interior])
        return out
    if problem.forcing == "ramp":
        out[grid.interior] = amp * (1.0 + grid.nodes[grid.interior])
        return out
    x1, x2 = grid.coords()
    out[grid.interior] = amp * np.sin(2 * np.pi * x1[grid.interior]) * np.cos(2 * np.pi * x2[grid.interior])
    return out


def boundary_values(problem, grid):
    """Full-length vector that is zero on the interior and holds the
    Dirichlet data on the boundary nodes."""
    out = np.zeros(grid.num_nodes)
    if problem.ndim == 1:
        out[0], out[-1] = problem.bc
    return out


def initial_state(problem, grid):
    """Initial condition with the Dirichlet data written onto the boundary."""
    if problem.initial_condition != "zero":
        raise ValueError(f"unknown initial condition {problem.initial_condition!r}")
    return boundary_values(problem, grid)


def _as_mu(problem, mu):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if mu.size != problem.num_params:
        raise ValueError(f"{problem.kind} expects {problem.num_params} parameter(s), got {mu.size}")
    return mu


def mu_in_box(problem, mu):
    mu = _as_mu(problem, mu)
    return all(lo <= v <= hi for v, (lo, hi) in zip(mu, problem.param_box))


# Spatial operators ----------------------------------------------------------

class BurgersOperator:
    """Conservative viscous Burgers operator on a 1-D grid."""

    linear = False

    def __init__(self, grid):
        self.grid = grid

    def apply(self, v, mu):
        mu = float(np.atleast_1d(mu)[0])
        return apply_dx_central(0.5 * np.asarray(v, dtype=float) ** 2, self.grid) - mu * apply_dxx(v, self.grid)

    def jvp(self, v, w, mu):
        mu = float(np.atleast_1d(mu)[0])
        return apply_dx_central(np.asarray(v, dtype=float) * np.asarray(w, dtype=float), self.grid) - mu * apply_dxx(
            w, self.grid
        )

    def apply_at(self, v, mu, idx):
        """Operator rows at selected interior nodes only."""
        mu = float(np.atleast_1d(mu)[0])
        v = np.asarray(v, dtype=float)
        h = self.grid.h
        return (v[idx + 1] ** 2 - v[idx - 1] ** 2) / (4.0 * h) - mu * (
            v[idx - 1] - 2.0 * v[idx] + v[idx + 1]
        ) / (h * h)

    def jvp_at(self, v, w, mu, idx):
        mu = float(np.atleast_1d(mu)[0])
        v = np.asarray(v, dtype=float)
        w = np.asarray(w, dtype=float)
        h = self.grid.h
        return (v[idx + 1] * w[idx + 1] - v[idx - 1] * w[idx - 1]) / (2.0 * h) - mu * (
            w[idx - 1] - 2.0 * w[idx] + w[idx + 1]
        ) / (h * h)

    def banded_jacobian(self, u, mu, dt=None):
        """Interior Jacobian in ``solve_banded`` layout (1 sub/superdiagonal)."""
        mu = float(np.atleast_1d(mu)[0])
        g = self.grid
        h = g.h
        k = g.num_interior
        ab = np.zeros((3, k))
        ab[1, :] = 2.0 * mu / (h * h)
        if dt is not None:
            ab[1, :] += 1.0 / dt
        # unknown j sits at node j+1; coupling to unknowns j-1 and j+1
        ab[2, :-1] = -u[1:k] / (2.0 * h) - mu / (h * h)
        ab[0, 1:] = u[2 : k + 1] / (2.0 * h) - mu / (h * h)
        return ab

    def jacobian_dense(self, u, mu, dt=None):
        ab = self.banded_jacobian(u, mu, dt=dt)
        k = self.grid.num_interior
        J = np.zeros((k, k))
        J[np.arange(k), np.arange(k)] = ab[1]
        J[np.arange(1, k), np.arange(k - 1)] = ab[2, :-1]
        J[np.arange(k - 1), np.arange(1, k)] = ab[0, 1:]
        return J


class HeatReactionOperator:
    """Linear operator ``-u_xx + mu u`` on a 1-D grid."""

    linear = True

    def __init__(self, grid):
        self.grid = grid

    def apply(self, v, mu):
        mu = float(np.atleast_1d(mu)[0])
        out = -apply_dxx(v, self.grid)
        out[self.grid.interior] += mu * np.asarray(v, dtype=float)[self.grid.interior]
        return out

    def jvp(self, v, w, mu):
        return self.apply(w, mu)

    def apply_at(self, v, mu, idx):
        mu = float(np.atleast_1d(mu)[0])
        v = np.asarray(v, dtype=float)
        h = self.grid.h
        return -(v[idx - 1] - 2.0 * v[idx] + v[idx + 1]) / (h * h) + mu * v[idx]

    def jvp_at(self, v, w, mu, idx):
        return self.apply_at(w, mu, idx)

    def banded_jacobian(self, u, mu, dt=None):
        mu = float(np.atleast_1d(mu)[0])
        g = self.grid
        k = g.num_interior
        ab = np.zeros((3, k))
        ab[1, :] = 2.0 / (g.h * g.h) + mu
        if dt is not None:
            ab[1, :] += 1.0 / dt
        ab[2, :-1] = -1.0 / (g.h * g.h)
        ab[0, 1:] = -1.0 / (g.h * g.h)
        return ab

    def jacobian_dense(self, u, mu, dt=None):
        ab = self.banded_jacobian(u, mu, dt=dt)
        k = self.grid.num_interior
        J = np.zeros((k, k))
        J[np.arange(k), np.arange(k)] = ab[1]
        J[np.arange(1, k), np.arange(k - 1)] = ab[2, :-1]
        J[np.arange(k - 1), np.arange(1, k)] = ab[0, 1:]
        return J


def _cubic_g(u, mu1):
    return u * (u - mu1) ** 2


def _cubic_gprime(u, mu1):
    return (u - mu1) * (3.0 * u - mu1)


class CubicReactionDiffusionOperator:
    """Cubic reaction-diffusion operator ``-mu2 Lap(u) + u (u - mu1)^2`` (2-D)."""

    linear = False

    def __init__(self, grid):
        self.grid = grid
        self._lap_int = None

    def laplacian_interior(self):
        """Sparse interior five-point Laplacian with zero Dirichlet closure."""
        if self._lap_int is None:
            g = self.grid
            t1 = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(g.k1, g.k1)) / (g.h1 * g.h1)
            t2 = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(g.k2, g.k2)) / (g.h2 * g.h2)
            self._lap_int = (sp.kron(t1, sp.eye(g.k2)) + sp.kron(sp.eye(g.k1), t2)).tocsr()
        return self._lap_int

    def apply(self, v, mu):
        mu1, mu2 = np.asarray(mu, dtype=float)
        out = -mu2 * apply_laplacian_5pt(v, self.grid)
        idx = self.grid.interior
        vi = np.asarray(v, dtype=float)[idx]
        out[idx] += _cubic_g(vi, mu1)
        return out

    def jvp(self, v, w, mu):
        mu1, mu2 = np.asarray(mu, dtype=float)
        out = -mu2 * apply_laplacian_5pt(w, self.grid)
        idx = self.grid.interior
        out[idx] += _cubic_gprime(np.asarray(v, dtype=float)[idx], mu1) * np.asarray(w, dtype=float)[idx]
        return out

    def _lap_at(self, v, idx):
        g = self.grid
        stride = g.k2 + 2
        return (v[idx - stride] - 2.0 * v[idx] + v[idx + stride]) / (g.h1 * g.h1) + (
            v[idx - 1] - 2.0 * v[idx] + v[idx + 1]
        ) / (g.h2 * g.h2)

    def apply_at(self, v, mu, idx):
        mu1, mu2 = np.asarray(mu, dtype=float)
        v = np.asarray(v, dtype=float)
        return -mu2 * self._lap_at(v, idx) + _cubic_g(v[idx], mu1)

    def jvp_at(self, v, w, mu, idx):
        mu1, mu2 = np.asarray(mu, dtype=float)
        v = np.asarray(v, dtype=float)
        w = np.asarray(w, dtype=float)
        return -mu2 * self._lap_at(w, idx) + _cubic_gprime(v[idx], mu1) * w[idx]

    def jacobian_sparse(self, u, mu, dt=None):
        mu1, mu2 = np.asarray(mu, dtype=float)
        diag = _cubic_gprime(u[self.grid.interior], mu1)
        if dt is not None:
            diag = diag + 1.0 / dt
        return (-mu2 * self.laplacian_interior() + sp.diags(diag)).tocsc()

    def jacobian_dense(self, u, mu, dt=None):
        return self.jacobian_sparse(u, mu, dt=dt).toarray()


_OPERATORS = {
    "burgers": BurgersOperator,
    "heat": HeatReactionOperator,
    "cubic-rd": CubicReactionDiffusionOperator,
}


def make_operator(problem, grid):
    return _OPERATORS[problem.family](grid)


# Residual evaluation --------------------------------------------------------

def residual_steady(problem, grid, mu, field, op=None, forcing=None):
    """Steady residual ``P(field; mu) - f`` on the full grid (boundary rows zero)."""
    mu = _as_mu(problem, mu)
    field = np.asarray(field, dtype=float)
    if not np.all(np.isfinite(field)):
        raise ValueError("field contains non-finite entries")
    if not mu_in_box(problem, mu):
        warnings.warn(f"parameter {mu} outside the declared box {problem.param_box}", stacklevel=2)
    op = op or make_operator(problem, grid)
    f = forcing_field(problem, grid) if forcing is None else forcing
    return op.apply(field, mu) - f


def residual_transient(problem, grid, mu, u_now, u_prev, dt, op=None, forcing=None):
    """Backward-difference transient residual on the full grid."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    u_now = np.asarray(u_now, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    if u_now.shape != u_prev.shape:
        raise ValueError("state shapes differ")
    r = residual_steady(problem, grid, mu, u_now, op=op, forcing=forcing)
    r[grid.interior] += (u_now[grid.interior] - u_prev[grid.interior]) / dt
    return r


# Nonlinear solves -----------------------------------------------------------

def _sup(r):
    return float(np.max(np.abs(r)))


def _backtrack(u, du, interior, resid_fn, r_norm, damping):
    """Shrink the step until the residual sup-norm decreases."""
    lam = 1.0
    while True:
        u_new = u.copy()
        u_new[interior] += lam * du
        r_new = resid_fn(u_new)
        n_new = _sup(r_new)
        if n_new < r_norm or lam < 2.0**-30:
            return u_new, r_new, n_new
        lam *= damping


def _solve_newton_1d(op, grid, mu, forcing, u0, cfg, dt=None, u_prev=None):
    idx = grid.interior

    def resid(u):
        r = op.apply(u, mu) - forcing
        if dt is not None:
            r[idx] += (u[idx] - u_prev[idx]) / dt
        return r

    u = u0.copy()
    r = resid(u)
    r_norm = _sup(r)
    for it in range(cfg.max_iter):
        if r_norm <= cfg.tol:
            return u, it, r_norm
        ab = op.banded_jacobian(u, mu, dt=dt)
        du = solve_banded((1, 1), ab, -r[idx])
        u, r, r_norm = _backtrack(u, du, idx, resid, r_norm, cfg.damping)
    if r_norm <= cfg.tol:
        return u, cfg.max_iter, r_norm
    raise ConvergenceError(
        f"Newton stalled after {cfg.max_iter} iterations, residual {r_norm:.3e}",
        residual=r_norm, iterations=cfg.max_iter,
    )


def _solve_fixedpoint_2d(op, grid, mu, forcing, u0, cfg, dt=None, u_prev=None):
    mu1, mu2 = np.asarray(mu, dtype=float)
    idx = grid.interior
    lap = op.laplacian_interior()
    f_int = forcing[idx]

    def resid(u):
        r = op.apply(u, mu) - forcing
        if dt is not None:
            r[idx] += (u[idx] - u_prev[idx]) / dt
        return r

    u = u0.copy()
    r = resid(u)
    r_norm = _sup(r)
    for it in range(cfg.max_iter):
        if r_norm <= cfg.tol:
            return u, it, r_norm
        ui = u[idx]
        gp = _cubic_gprime(ui, mu1)
        rhs = gp * ui - _cubic_g(ui, mu1) + f_int
        diag = gp
        if dt is not None:
            rhs = rhs + u_prev[idx] / dt
            diag = gp + 1.0 / dt
        A = (-mu2 * lap + sp.diags(diag)).tocsc()
        try:
            u_next_int = spla.splu(A).solve(rhs)
        except RuntimeError as exc:
            raise ConvergenceError(
                f"linearized solve failed at iteration {it}: {exc}", iterations=it
            ) from exc
        du = u_next_int - ui
        u, r, r_norm = _backtrack(u, du, idx, resid, r_norm, cfg.damping)
    if r_norm <= cfg.tol:
        return u, cfg.max_iter, r_norm
    raise ConvergenceError(
        f"fixed-point iteration stalled after {cfg.max_iter} iterations, residual {r_norm:.3e}",
        residual=r_norm, iterations=cfg.max_iter,
    )


def _steady_start(problem, grid):
    """Default initial guess: interpolant of the boundary data (1-D), zero (2-D)."""
    if problem.ndim == 1:
        a, b = problem.bc
        s = (grid.nodes - grid.x_left) / (grid.x_right - grid.x_left)
        return a + (b - a) * s
    return np.zeros(grid.num_nodes)


def solve_steady(problem, grid, mu, cfg=None, initial_guess=None, op=None):
    """Solve the steady problem to the Newton tolerance; returns the full state.

    ``initial_guess`` (full grid, boundary entries ignored) overrides the
    default start; the converged result does not depend on it beyond the
    tolerance.
    """
    cfg = cfg or NewtonConfig()
    mu = _as_mu(problem, mu)
    if problem.family == "burgers" and mu[0] <= 0:
        raise ValueError("Burgers viscosity must be positive")
    if problem.family == "cubic-rd" and mu[1] <= 0:
        raise ValueError("cubic reaction-diffusion needs mu2 > 0")
    op = op or make_operator(problem, grid)
    f = forcing_field(problem, grid)
    u0 = _steady_start(problem, grid)
    if initial_guess is not None:
        u0 = u0.copy()
        u0[grid.interior] = np.asarray(initial_guess, dtype=float)[grid.interior]
    if problem.ndim == 1:
        u, _, _ = _solve_newton_1d(op, grid, mu, f, u0, cfg)
    else:
        u, _, _ = _solve_fixedpoint_2d(op, grid, mu, f, u0, cfg)
    return u


def solve_steady_burgers(grid, mu, cfg=None, problem=None, initial_guess=None):
    problem = problem or steady_burgers_spec()
    return solve_steady(problem, grid, mu, cfg=cfg, initial_guess=initial_guess)


def solve_steady_cubic_rd(grid, mu, cfg=None, problem=None, initial_guess=None):
    problem = problem or steady_cubic_rd_spec()
    return solve_steady(problem, grid, mu, cfg=cfg, initial_guess=initial_guess)


def solve_transient(problem, grid, mu, cfg=None, up_to_level=None, resume=None, op=None):
    """March the transient problem with backward Euler.

    Returns a :class:`Trajectory` with levels ``0 .. up_to_level`` (all
    ``T/dt`` levels by default).  Pass a previously computed trajectory as
    ``resume`` to extend it to a later level without recomputing.
    """
    if not problem.is_transient:
        raise ValueError(f"{problem.kind} is not transient")
    cfg = cfg or NewtonConfig()
    mu = _as_mu(problem, mu)
    op = op or make_operator(problem, grid)
    dt = problem.dt
    n_levels = num_time_levels(problem.t_final, dt)
    last = n_levels if up_to_level is None else int(up_to_level)
    if not 0 <= last <= n_levels:
        raise ValueError(f"level {last} outside 0..{n_levels}")
    f = forcing_field(problem, grid)

    states = np.empty((grid.num_nodes, last + 1))
    start = 0
    if resume is not None:
        have = min(resume.num_levels, last)
        states[:, : have + 1] = resume.states[:, : have + 1]
        start = have
    else:
        states[:, 0] = initial_state(problem, grid)

    for k in range(start, last):
        u_prev = states[:, k]
        guess = u_prev.copy()
        try:
            if problem.ndim == 1:
                u, _, _ = _solve_newton_1d(op, grid, mu, f, guess, cfg, dt=dt, u_prev=u_prev)
            else:
                u, _, _ = _solve_fixedpoint_2d(op, grid, mu, f, guess, cfg, dt=dt, u_prev=u_prev)
        except ConvergenceError as exc:
            exc.level = k + 1
            raise ConvergenceError(
                f"time level {k + 1}: {exc}", residual=exc.residual, iterations=exc.iterations, level=k + 1
            ) from exc
        states[:, k + 1] = u
    times = dt * np.arange(last + 1)
    return Trajectory(times=times, states=states, dt=dt)
