"""Online reduced solver: least-squares collocation on the reduced point set.

A trained :class:`ReducedModel` holds the processed snapshot basis ``W``
(one column per greedy round), the over-collocation points (2n-1 of them
for an n-column basis: n from the snapshot side, n-1 from the residual
side, in selection order), and the restricted operator blocks

    value = P W,   dx = P (Dx W),   dxx = P (Dxx W)   (1-D)
    value = P W,   lap = P (Lap W)                    (2-D)

where ``P`` selects the collocation rows.  Full-grid differentiation
happens once, offline; afterwards every residual and Jacobian evaluation
touches only ``(2n-1) x n`` data, so the online cost does not grow with
the truth dimension.

The reduced coefficients minimize the Euclidean norm of the collocated
residual (Gauss-Newton with step halving); the sup-norm of that same
residual vector is the hyper-reduced error estimator.  For transient
problems the solver marches backward Euler in coefficient space, and the
per-level estimator values sum to the trajectory estimator.

Solves are warm-started from the stored coefficients of the nearest
trained snapshot.  This matters: for zero-forcing problems the reduced
least-squares system also has a spurious root at zero coefficients (a
zero field solves the homogeneous interior equations), and a cold start
from zero would converge to it.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geim import CollocationFunctional, GeimState, ResidualEimState, TimeContext
from .grids import Grid1D, Grid2D, RestrictionMap, apply_dx_central, apply_dxx, apply_laplacian_5pt, restrict
from .problems import ProblemSpec, boundary_values, forcing_field, initial_state, num_time_levels

FORMAT_VERSION = 1


@dataclass(frozen=True)
class GaussNewtonConfig:
    """Stopping and step control for the reduced least-squares solves."""

    tol: float = 1e-10
    max_iter: int = 50
    damping: float = 0.5
    ridge_rel: float = 1e-12

    def __post_init__(self):
        if not self.tol > 0 or self.max_iter < 1 or not 0 < self.damping < 1:
            raise ValueError("invalid Gauss-Newton configuration")


@dataclass
class ReducedSolveReport:
    coefficients: np.ndarray
    iterations: int
    residual_sup: float
    wall_time: float
    converged: bool
    ridged: bool = False
    spurious: bool = False  # collapsed onto the zero branch of a homogeneous problem


@dataclass
class ReducedTrajectory:
    """Coefficient history of a reduced backward-Euler march."""

    times: np.ndarray
    coeffs: np.ndarray          # (n, levels + 1)
    residual_sups: np.ndarray   # per level; level 0 entry is zero
    iterations: np.ndarray
    converged: bool
    wall_time: float


@dataclass
class EstimateRecord:
    """Error-estimator value; transient records carry the per-level series."""

    value: float
    series: np.ndarray = None

    def __post_init__(self):
        if self.series is not None:
            total = float(np.sum(self.series))
            if total != self.value:
                raise ValueError("estimator total must equal the series sum exactly")


@dataclass
class ReducedModel:
    problem: ProblemSpec
    grid: object
    W: np.ndarray
    restriction: RestrictionMap
    blocks: dict
    f_points: np.ndarray
    trained_mus: np.ndarray          # (n, p)
    snapshot_coeffs: np.ndarray      # (n, n); column j reproduces truth snapshot j
    geim: GeimState
    residual_eim: ResidualEimState
    trained_t_levels: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.W.shape[1]

    @property
    def num_points(self):
        return len(self.restriction)

    def system(self):
        return _ReducedSystem(self)


def assemble_reduced_blocks(W, rmap, grid, problem):
    """Differentiate the basis on the full grid, then restrict the rows.

    The reduced field carries the problem's Dirichlet data on the boundary
    no matter what the coefficients are (exactly like the truth solver, the
    boundary holds data, not unknowns).  The blocks therefore split into the
    homogeneous part from the boundary-zeroed basis and constant
    contributions from the boundary field; rows away from the boundary see
    no difference.  Without this split, problems with zero forcing admit
    whole families of collocated solutions with rescaled boundary values.
    """
    W = np.asarray(W, dtype=float)
    if W.shape[0] != grid.num_nodes:
        raise ValueError("basis rows must match the grid")
    if W.shape[1] == 0:
        raise ValueError("empty basis")
    idx = rmap.indices
    W0 = W.copy()
    bfield = boundary_values(problem, grid)
    if problem.ndim == 1:
        W0[0, :] = 0.0
        W0[-1, :] = 0.0
    else:
        mask = np.ones(grid.num_nodes, dtype=bool)
        mask[grid.interior] = False
        W0[mask, :] = 0.0
    blocks = {"value": W0[idx, :].copy()}
    if problem.ndim == 1:
        blocks["dx"] = np.column_stack([apply_dx_central(W0[:, j], grid)[idx] for j in range(W.shape[1])])
        blocks["dxx"] = np.column_stack([apply_dxx(W0[:, j], grid)[idx] for j in range(W.shape[1])])
        blocks["dx_bc"] = apply_dx_central(bfield, grid)[idx]
        blocks["dxx_bc"] = apply_dxx(bfield, grid)[idx]
    else:
        blocks["lap"] = np.column_stack([apply_laplacian_5pt(W0[:, j], grid)[idx] for j in range(W.shape[1])])
        blocks["lap_bc"] = apply_laplacian_5pt(bfield, grid)[idx]
    return blocks


def build_reduced_model(problem, grid, W, restriction_indices, geim_state, residual_state,
                        trained_mus, snapshot_coeffs, trained_t_levels=None, provenance=None):
    rmap = RestrictionMap(np.asarray(restriction_indices, dtype=np.intp), num_nodes=grid.num_nodes)
    blocks = assemble_reduced_blocks(W, rmap, grid, problem)
    f = forcing_field(problem, grid)
    return ReducedModel(
        problem=problem,
        grid=grid,
        W=np.asarray(W, dtype=float),
        restriction=rmap,
        blocks=blocks,
        f_points=f[rmap.indices],
        trained_mus=np.atleast_2d(np.asarray(trained_mus, dtype=float)),
        snapshot_coeffs=np.asarray(snapshot_coeffs, dtype=float),
        geim=geim_state,
        residual_eim=residual_state,
        trained_t_levels=None if trained_t_levels is None else np.asarray(trained_t_levels, dtype=np.intp),
        provenance=dict(provenance or {}),
    )


def truncate(model, n):
    """Restrict a trained model to its first ``n`` greedy rounds.

    Point sets, blocks and bookkeeping grow by prefix, so the truncation is
    a consistent model with ``2n - 1`` collocation points.
    """
    if not 1 <= n <= model.n:
        raise ValueError(f"cannot truncate a size-{model.n} model to {n}")
    if n == model.n:
        return model
    m = 2 * n - 1
    geim = model.geim
    reim = model.residual_eim
    new_geim = GeimState(
        functionals=geim.functionals[:n],
        points=geim.points[:n].copy(),
        basis=geim.basis[:, :n].copy(),
        B=geim.B[:n, :n].copy(),
        mus=geim.mus[:n].copy(),
    )
    new_reim = ResidualEimState(
        points=reim.points[: n - 1].copy(),
        basis=reim.basis[:, : n - 1].copy(),
        values=reim.values[: n - 1, : n - 1].copy(),
    )
    return ReducedModel(
        problem=model.problem,
        grid=model.grid,
        W=model.W[:, :n].copy(),
        restriction=RestrictionMap(model.restriction.indices[:m].copy(), num_nodes=model.grid.num_nodes),
        blocks={k: (v[:m].copy() if v.ndim == 1 else v[:m, :n].copy()) for k, v in model.blocks.items()},
        f_points=model.f_points[:m].copy(),
        trained_mus=model.trained_mus[:n].copy(),
        snapshot_coeffs=model.snapshot_coeffs[:n, :n].copy(),
        geim=new_geim,
        residual_eim=new_reim,
        trained_t_levels=None if model.trained_t_levels is None else model.trained_t_levels[:n].copy(),
        provenance=dict(model.provenance),
    )


class _ReducedSystem:
    """Residual and Jacobian of the collocated equations from the blocks.

    All evaluations are on the reduced field ``W0 c + b`` (homogeneous basis
    plus the boundary field), so the rows next to the boundary read the
    problem's Dirichlet data.  The value rows are interior points, where the
    boundary field vanishes.
    """

    def __init__(self, model):
        self.family = model.problem.family
        self.S = model.blocks["value"]
        self.f = model.f_points
        if self.family in ("burgers", "heat"):
            self.D = model.blocks.get("dx")
            self.L = model.blocks["dxx"]
            self.db = model.blocks["dx_bc"]
            self.lb = model.blocks["dxx_bc"]
            self.h = model.grid.h
        else:
            self.L = model.blocks["lap"]
            self.lb = model.blocks["lap_bc"]

    def residual(self, c, mu, dt=None, s_prev=None):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        s = self.S @ c
        l = self.L @ c + self.lb
        if self.family == "burgers":
            d = self.D @ c + self.db
            rho = (s + 0.5 * self.h * self.h * l) * d - mu[0] * l - self.f
        elif self.family == "heat":
            rho = -l + mu[0] * s - self.f
        else:
            rho = -mu[1] * l + s * (s - mu[0]) ** 2 - self.f
        if dt is not None:
            rho = rho + (s - s_prev) / dt
        return rho

    def jacobian(self, c, mu, dt=None):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        s = self.S @ c
        if self.family == "burgers":
            d = self.D @ c + self.db
            l = self.L @ c + self.lb
            a = s + 0.5 * self.h * self.h * l
            J = (self.S + 0.5 * self.h * self.h * self.L) * d[:, None] + self.D * a[:, None] - mu[0] * self.L
        elif self.family == "heat":
            J = -self.L + mu[0] * self.S
        else:
            gp = (s - mu[0]) * (3.0 * s - mu[0])
            J = -mu[1] * self.L + self.S * gp[:, None]
        if dt is not None:
            J = J + self.S / dt
        return J


def nearest_trained_coefficients(model, mu):
    """Stored coefficients of the trained snapshot closest to ``mu``.

    Distances are normalized by the parameter-box widths; ties break to the
    earliest trained snapshot so warm starts are deterministic.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    widths = np.array([hi - lo if hi > lo else 1.0 for lo, hi in model.problem.param_box])
    d = np.linalg.norm((model.trained_mus - mu) / widths, axis=1)
    return model.snapshot_coeffs[:, int(np.argmin(d))].copy()


def _gauss_newton(system, mu, c0, cfg, dt=None, s_prev=None):
    c = np.array(c0, dtype=float)
    rho = system.residual(c, mu, dt=dt, s_prev=s_prev)
    obj = float(rho @ rho)
    sup = float(np.max(np.abs(rho)))
    iterations = 0
    ridged = False
    for iterations in range(cfg.max_iter):
        if sup <= cfg.tol:
            return c, iterations, sup, True, ridged
        J = system.jacobian(c, mu, dt=dt)
        JtJ = J.T @ J
        rhs = -(J.T @ rho)
        try:
            delta = scipy.linalg.cho_solve(scipy.linalg.cho_factor(JtJ), rhs)
        except scipy.linalg.LinAlgError:
            ridge = cfg.ridge_rel * float(np.max(np.diag(JtJ)))
            delta = np.linalg.solve(JtJ + ridge * np.eye(len(c)), rhs)
            ridged = True
        lam = 1.0
        while True:
            c_new = c + lam * delta
            rho_new = system.residual(c_new, mu, dt=dt, s_prev=s_prev)
            obj_new = float(rho_new @ rho_new)
            if obj_new < obj or lam < 2.0**-30:
                break
            lam *= cfg.damping
        step = lam * float(np.max(np.abs(delta)))
        c, rho, obj = c_new, rho_new, obj_new
        sup = float(np.max(np.abs(rho)))
        if step <= 1e-15 * (1.0 + float(np.max(np.abs(c)))):
            break  # stagnated at a stationary point
    return c, iterations + 1, sup, sup <= cfg.tol, ridged


def _collocated_scale(model):
    """Largest collocated snapshot magnitude; the scale of physical states."""
    vals = model.blocks["value"] @ model.snapshot_coeffs
    return float(np.max(np.abs(vals)))


def _is_spurious_zero(model, system, c):
    """Zero-forcing problems admit the zero field as an exact root of the
    collocated equations; a solve that collapses onto it is not a solution
    of the boundary-value problem."""
    if model.problem.forcing != "zero":
        return False
    return float(np.max(np.abs(system.S @ c))) < 1e-6 * _collocated_scale(model)


def _continuation_path(model, mu):
    """Parameter steps from the nearest trained snapshot to the target.

    Geometric steps (ratio <= 1.25) for positive components, linear
    otherwise; deterministic, so retries do not depend on sweep order or
    worker count.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    widths = np.array([hi - lo if hi > lo else 1.0 for lo, hi in model.problem.param_box])
    d = np.linalg.norm((model.trained_mus - mu) / widths, axis=1)
    j = int(np.argmin(d))
    mu_from = model.trained_mus[j]
    steps = 1
    for a, b in zip(mu_from, mu):
        if a > 0 and b > 0:
            steps = max(steps, int(np.ceil(abs(np.log(b / a)) / np.log(1.25))))
        else:
            steps = max(steps, int(np.ceil(4.0 * abs(b - a) / widths[0])))
    steps = min(steps, 64)
    path = []
    for k in range(1, steps + 1):
        frac = k / steps
        point = np.array([
            a * (b / a) ** frac if a > 0 and b > 0 else a + frac * (b - a)
            for a, b in zip(mu_from, mu)
        ])
        path.append(point)
    return j, path


def solve_reduced_steady(model, mu, cfg=None, c0=None):
    """Minimize the collocated steady residual in the Euclidean norm.

    Solves warm-start from the nearest trained snapshot's coefficients.  If
    a zero-forcing solve collapses onto the spurious zero branch, it is
    retried by marching the parameter from that snapshot to the target in
    small steps, which tracks the physical branch.  Non-convergence is
    reported via the flag, not raised, so sweeps can treat it as a sentinel.
    """
    if model.problem.is_transient:
        raise ValueError("transient model: use solve_reduced_transient")
    cfg = cfg or GaussNewtonConfig()
    system = model.system()
    start = nearest_trained_coefficients(model, mu) if c0 is None else np.asarray(c0, dtype=float)
    t0 = time.perf_counter()
    c, iters, sup, ok, ridged = _gauss_newton(system, mu, start, cfg)
    if c0 is None and _is_spurious_zero(model, system, c):
        j, path = _continuation_path(model, mu)
        c = model.snapshot_coeffs[:, j].copy()
        iters = 0
        for mu_k in path:
            c, it_k, sup, ok, ridged_k = _gauss_newton(system, mu_k, c, cfg)
            iters += it_k
            ridged = ridged or ridged_k
        spurious = _is_spurious_zero(model, system, c)
        ok = ok and not spurious
    else:
        spurious = False
    wall = time.perf_counter() - t0
    return ReducedSolveReport(coefficients=c, iterations=iters, residual_sup=sup,
                              wall_time=wall, converged=ok, ridged=ridged, spurious=spurious)


def solve_reduced_step(model, mu, s_prev, c_guess, cfg=None):
    """One backward-Euler level given the previous state on the collocation
    points (``s_prev``) and a warm-start coefficient vector."""
    cfg = cfg or GaussNewtonConfig()
    system = model.system()
    dt = model.problem.dt
    t0 = time.perf_counter()
    c, iters, sup, ok, ridged = _gauss_newton(system, mu, c_guess, cfg, dt=dt, s_prev=s_prev)
    wall = time.perf_counter() - t0
    return ReducedSolveReport(coefficients=c, iterations=iters, residual_sup=sup,
                              wall_time=wall, converged=ok, ridged=ridged)


def initial_coefficients(model):
    """Least-squares fit of the initial condition on the collocation points."""
    u0 = initial_state(model.problem, model.grid)
    rhs = u0[model.restriction.indices]
    c0, *_ = np.linalg.lstsq(model.blocks["value"], rhs, rcond=None)
    return c0


def solve_reduced_transient(model, mu, cfg=None, up_to_level=None):
    """March the reduced problem over the full time grid.

    The per-level reduced-residual sup-norms double as the transient error
    estimator series.
    """
    if not model.problem.is_transient:
        raise ValueError("steady model: use solve_reduced_steady")
    cfg = cfg or GaussNewtonConfig()
    problem = model.problem
    system = model.system()
    n_levels = num_time_levels(problem.t_final, problem.dt)
    last = n_levels if up_to_level is None else int(up_to_level)
    coeffs = np.zeros((model.n, last + 1))
    sups = np.zeros(last + 1)
    iters = np.zeros(last + 1, dtype=int)
    coeffs[:, 0] = initial_coefficients(model)
    ok_all = True
    t0 = time.perf_counter()
    c = coeffs[:, 0].copy()
    for k in range(last):
        s_prev = system.S @ coeffs[:, k]
        c, it, sup, ok, _ = _gauss_newton(system, mu, c, cfg, dt=problem.dt, s_prev=s_prev)
        coeffs[:, k + 1] = c
        sups[k + 1] = sup
        iters[k + 1] = it
        ok_all = ok_all and ok
    wall = time.perf_counter() - t0
    times = problem.dt * np.arange(last + 1)
    return ReducedTrajectory(times=times, coeffs=coeffs, residual_sups=sups,
                             iterations=iters, converged=ok_all, wall_time=wall)


def estimate_rr(model, mu, c):
    """Sup-norm of the collocated steady residual at the given coefficients."""
    rho = model.system().residual(np.asarray(c, dtype=float), mu)
    return EstimateRecord(value=float(np.max(np.abs(rho))))


def estimate_rr_t(model, mu, coeffs):
    """Per-level collocated residual sup-norms and their sum.

    Level zero carries the initial condition, not an equation; its entry is
    zero.  The time derivative is the same backward difference the reduced
    march uses.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    system = model.system()
    dt = model.problem.dt
    levels = coeffs.shape[1]
    series = np.zeros(levels)
    for k in range(1, levels):
        s_prev = system.S @ coeffs[:, k - 1]
        rho = system.residual(coeffs[:, k], mu, dt=dt, s_prev=s_prev)
        series[k] = float(np.max(np.abs(rho)))
    return EstimateRecord(value=float(np.sum(series)), series=series)


def reconstruct(model, c):
    """Full-grid field from reduced coefficients (offline/diagnostic cost).

    The boundary entries carry the problem's Dirichlet data, matching the
    field the collocated equations are evaluated on.
    """
    c = np.asarray(c, dtype=float)
    if c.shape != (model.n,):
        raise ValueError(f"expected {model.n} coefficients, got {c.shape}")
    out = model.W @ c
    grid = model.grid
    if model.problem.ndim == 1:
        out[0], out[-1] = model.problem.bc
    else:
        mask = np.ones(grid.num_nodes, dtype=bool)
        mask[grid.interior] = False
        out[mask] = 0.0
    return out


def restricted_residual_norm(model, mu, c):
    """Reference estimator path: full-grid residual, then row restriction.

    Exists to cross-check :func:`estimate_rr` against the unreduced
    computation; it costs O(truth dimension) and is for tests/diagnostics.
    """
    from .problems import residual_steady

    u = reconstruct(model, c)
    r = residual_steady(model.problem, model.grid, mu, u)
    return float(np.max(np.abs(restrict(r, model.restriction))))


# Serialization --------------------------------------------------------------

def _grid_meta(grid):
    if isinstance(grid, Grid1D):
        return {"ndim": 1, "x_left": grid.x_left, "x_right": grid.x_right, "k": grid.num_interior}
    return {"ndim": 2, "bounds1": grid.bounds1, "bounds2": grid.bounds2, "k1": grid.k1, "k2": grid.k2}


def _grid_from_meta(meta):
    if meta["ndim"] == 1:
        return Grid1D(meta["x_left"], meta["x_right"], meta["k"])
    return Grid2D(tuple(meta["bounds1"]), tuple(meta["bounds2"]), meta["k1"], meta["k2"])


def save_model(model, path):
    """Write the model to a single self-describing ``.npz`` container.

    The ``header`` entry is a JSON document with the format version, the
    problem descriptor, grid geometry and provenance; all numerical
    payloads are 64-bit float (or integer index) arrays.
    """
    p = model.problem
    header = {
        "format_version": FORMAT_VERSION,
        "problem": {
            "kind": p.kind,
            "param_box": [list(b) for b in p.param_box],
            "domain": [list(b) for b in p.domain],
            "forcing": p.forcing,
            "forcing_amplitude": p.forcing_amplitude,
            "bc": list(p.bc),
            "t_final": p.t_final,
            "dt": p.dt,
            "initial_condition": p.initial_condition,
        },
        "grid": _grid_meta(model.grid),
        "provenance": model.provenance,
        "transient": p.is_transient,
    }
    arrays = {
        "W": model.W,
        "restriction": model.restriction.indices.astype(np.int64),
        "f_points": model.f_points,
        "trained_mus": model.trained_mus,
        "snapshot_coeffs": model.snapshot_coeffs,
        "geim_points": model.geim.points.astype(np.int64),
        "geim_B": model.geim.B,
        "geim_mus": model.geim.mus,
        "reim_points": model.residual_eim.points.astype(np.int64),
        "reim_basis": model.residual_eim.basis,
        "reim_values": model.residual_eim.values,
    }
    for key, block in model.blocks.items():
        arrays[f"block_{key}"] = block
    if p.is_transient:
        arrays["trained_t_levels"] = model.trained_t_levels.astype(np.int64)
        prev = np.column_stack([
            f.time_ctx.prev_state if f.time_ctx is not None else np.zeros(model.grid.num_nodes)
            for f in model.geim.functionals
        ])
        arrays["ctx_prev_states"] = prev
        arrays["ctx_times"] = np.array([
            f.time_ctx.t if f.time_ctx is not None else np.nan for f in model.geim.functionals
        ])
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_model(path):
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {header['format_version']}")
        pm = header["problem"]
        problem = ProblemSpec(
            kind=pm["kind"],
            param_box=tuple(tuple(b) for b in pm["param_box"]),
            domain=tuple(tuple(b) for b in pm["domain"]),
            forcing=pm["forcing"],
            forcing_amplitude=pm["forcing_amplitude"],
            bc=tuple(pm["bc"]),
            t_final=pm["t_final"],
            dt=pm["dt"],
            initial_condition=pm["initial_condition"],
        )
        grid = _grid_from_meta(header["grid"])
        W = data["W"]
        geim_mus = data["geim_mus"]
        geim_points = data["geim_points"].astype(np.intp)
        if header["transient"]:
            prev = data["ctx_prev_states"]
            t_vals = data["ctx_times"]
            functionals = tuple(
                CollocationFunctional(
                    node=int(geim_points[i]), mu=geim_mus[i],
                    time_ctx=TimeContext(dt=problem.dt, prev_state=prev[:, i], t=float(t_vals[i])),
                )
                for i in range(len(geim_points))
            )
        else:
            functionals = tuple(
                CollocationFunctional(node=int(geim_points[i]), mu=geim_mus[i])
                for i in range(len(geim_points))
            )
        geim = GeimState(functionals=functionals, points=geim_points, basis=W, B=data["geim_B"], mus=geim_mus)
        reim = ResidualEimState(
            points=data["reim_points"].astype(np.intp),
            basis=data["reim_basis"],
            values=data["reim_values"],
        )
        blocks = {key[6:]: data[key] for key in data.files if key.startswith("block_")}
        model = ReducedModel(
            problem=problem,
            grid=grid,
            W=W,
            restriction=RestrictionMap(data["restriction"].astype(np.intp), num_nodes=grid.num_nodes),
            blocks=blocks,
            f_points=data["f_points"],
            trained_mus=data["trained_mus"],
            snapshot_coeffs=data["snapshot_coeffs"],
            geim=geim,
            residual_eim=reim,
            trained_t_levels=data["trained_t_levels"].astype(np.intp) if header["transient"] else None,
            provenance=header["provenance"],
        )
    return model
