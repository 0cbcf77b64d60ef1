"""Generalized empirical interpolation driven by PDE collocation functionals.

The interpolating functional attached to a point ``x`` and parameter ``mu``
evaluates the discrete PDE operator there:  ``sigma(v) = P(v; mu)(x)``.
Greedy extension keeps, for each new snapshot, only the part that all
established functionals annihilate, then collocates it where its operator
image peaks.  For a linear operator this reproduces classical GEIM: the
functional matrix ``B`` with ``B[i, j] = sigma_i(q_j)`` is lower triangular
with unit diagonal, and interpolation of span members is exact.

A plain EIM on residual vectors (point evaluation instead of operator
evaluation) lives alongside; it supplies the second half of the
over-collocation point set.

Both state types grow *functionally*: extension returns a new state and
never mutates its input, so a failed enrichment can simply be discarded.

For transient problems the snapshot functionals may carry a time context
(step size and the previous-level state); :func:`apply_functional` then adds
the backward-difference time derivative.  Basis processing itself uses the
spatial operator only, matching the greedy construction for steady problems.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBasisError

logger = logging.getLogger(__name__)

# A residualized vector smaller than this (relative to its source) is
# treated as linearly dependent and rejected.
DROP_TOL = 1e-12

ALPHA_TOL = 1e-12
ALPHA_MAX_ITER = 50


@dataclass(frozen=True)
class TimeContext:
    """Data needed to evaluate the backward-difference time derivative."""

    dt: float
    prev_state: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class CollocationFunctional:
    """Operator evaluation at one grid node with a frozen parameter."""

    node: int
    mu: np.ndarray
    time_ctx: TimeContext = None

    def __post_init__(self):
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, dtype=float)))


def apply_functional(func, v, op, with_time=False):
    """Evaluate ``sigma(v)``: the operator image of ``v`` at the functional's
    node.  With ``with_time=True`` the backward-difference time derivative is
    added from the functional's stored context (transient functionals only).
    """
    v = np.asarray(v, dtype=float)
    idx = np.array([func.node])
    val = float(op.apply_at(v, func.mu, idx)[0])
    if with_time:
        if func.time_ctx is None:
            raise ValueError("functional has no time context")
        ctx = func.time_ctx
        val += (v[func.node] - ctx.prev_state[func.node]) / ctx.dt
    return val


@dataclass(frozen=True)
class GeimState:
    """Snapshot-side interpolation system: basis columns ``q_i``, their
    functionals, the selected points, and the matrix ``B[i,j] = sigma_i(q_j)``."""

    functionals: tuple
    points: np.ndarray
    basis: np.ndarray          # (num_nodes, n), column i is q_{i+1}
    B: np.ndarray              # (n, n)
    mus: np.ndarray            # (n, p)

    @property
    def n(self):
        return self.basis.shape[1]


@dataclass(frozen=True)
class ResidualEimState:
    """Residual-side EIM system: basis columns normalized to one at their own
    point and vanishing at all earlier points."""

    points: np.ndarray
    basis: np.ndarray          # (num_nodes, p)
    values: np.ndarray         # (p, p), values[k, j] = r_j(x_k), unit lower triangular

    @property
    def n(self):
        return self.basis.shape[1]


def empty_residual_state(num_nodes):
    return ResidualEimState(
        points=np.empty(0, dtype=np.intp),
        basis=np.empty((num_nodes, 0)),
        values=np.empty((0, 0)),
    )


def _candidate_argmax(vals, interior, taken):
    """Index of the largest |value| over interior nodes not yet taken.

    Ties break to the lowest grid index (first maximizer in index order).
    """
    score = np.full(vals.shape, -1.0)
    score[interior] = np.abs(vals[interior])
    if len(taken):
        score[np.fromiter(taken, dtype=np.intp)] = -1.0
    best = int(np.argmax(score))
    if score[best] < 0:
        raise DegenerateBasisError("no admissible collocation candidates left")
    return best, score[best]


def _sigma_vector(state, v, op):
    return np.array([apply_functional(f, v, op) for f in state.functionals])


def _sigma_basis_matrix(state, v, op):
    """Rows i: derivative of sigma_i at ``v`` applied to each basis column."""
    n = state.n
    out = np.empty((n, n))
    for i, f in enumerate(state.functionals):
        idx = np.array([f.node])
        for j in range(n):
            out[i, j] = op.jvp_at(v, state.basis[:, j], f.mu, idx)[0]
    return out


def _remove_in_span(state, u_new, op):
    """Coefficients ``alpha`` with ``sigma_i(u_new - Q alpha) = 0`` for all i.

    A nonlinear operator turns this into a small nonlinear system; it is
    solved by Newton iteration started from the linear-system guess.  For a
    linear operator the same loop acts as iterative refinement, which drives
    the functional values of the remainder to the round-off floor even when
    ``B`` is badly conditioned.  The best iterate found is always kept; a
    stall above the target tolerance is logged.
    """
    sig_u = _sigma_vector(state, u_new, op)
    scale = max(1.0, float(np.max(np.abs(sig_u))))

    def residual(a):
        v = u_new - state.basis @ a
        return _sigma_vector(state, v, op), v

    alpha = np.linalg.solve(state.B, sig_u)
    F, v = residual(alpha)
    best = (alpha, v, float(np.max(np.abs(F))))
    for _ in range(ALPHA_MAX_ITER):
        if best[2] == 0.0:
            break
        J = -_sigma_basis_matrix(state, best[1], op)
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        alpha = best[0] + step
        F, v = residual(alpha)
        norm = float(np.max(np.abs(F)))
        if norm < best[2]:
            best = (alpha, v, norm)
        else:
            break
    if best[2] > ALPHA_TOL * scale:
        logger.warning("span removal stalled at |F| = %.3e (target %.1e)", best[2], ALPHA_TOL * scale)
    return best[0], best[1]


def _build_B(functionals, basis, op):
    n = basis.shape[1]
    B = np.empty((n, n))
    for i, f in enumerate(functionals):
        idx = np.array([f.node])
        for j in range(n):
            B[i, j] = op.apply_at(basis[:, j], f.mu, idx)[0]
    return B


def geim_init(u1, mu1, op, exclude=(), time_ctx=None):
    """Start the interpolation system from the first snapshot.

    The first point maximizes the operator image of the snapshot; the basis
    is scaled so the (signed) value there is one.

    A snapshot that solves the homogeneous equation (zero forcing) has an
    operator image that cancels to solver noise, which makes the stated rule
    ill-posed.  In that case the linearized action ``P'(u1)[u1]`` is used for
    the point choice and the scaling instead; for a linear operator the two
    coincide, so the linear-case analysis is unaffected.
    """
    grid = op.grid
    u1 = np.asarray(u1, dtype=float)
    image = op.apply(u1, mu1)
    lin_image = op.jvp(u1, u1, mu1)
    lin_scale = float(np.max(np.abs(lin_image[grid.interior])))
    if float(np.max(np.abs(image[grid.interior]))) <= 1e-6 * lin_scale:
        image = lin_image
    if float(np.max(np.abs(image[grid.interior]))) == 0.0:
        raise DegenerateBasisError("operator image of the first snapshot vanishes on the interior")
    point, _ = _candidate_argmax(image, grid.interior, set(exclude))
    s = image[point]
    q1 = u1 / s
    func = CollocationFunctional(node=point, mu=np.atleast_1d(mu1), time_ctx=time_ctx)
    basis = q1[:, None].copy()
    B = _build_B((func,), basis, op)
    return GeimState(
        functionals=(func,),
        points=np.array([point], dtype=np.intp),
        basis=basis,
        B=B,
        mus=np.atleast_2d(np.asarray(mu1, dtype=float)),
    )


def geim_extend(state, u_new, mu_new, op, exclude=(), time_ctx=None):
    """Add one processed snapshot and its collocation point; returns a new state.

    Raises :class:`DegenerateBasisError` when the snapshot is numerically in
    the span of the current system (drop tolerance) or no usable point is
    left.
    """
    grid = op.grid
    u_new = np.asarray(u_new, dtype=float)
    _, xi = _remove_in_span(state, u_new, op)
    src_norm = float(np.max(np.abs(u_new)))
    if float(np.max(np.abs(xi))) < DROP_TOL * max(src_norm, 1e-300):
        raise DegenerateBasisError("residualized snapshot below the drop tolerance")

    image = op.apply(xi, mu_new)
    taken = set(int(p) for p in state.points) | set(int(p) for p in exclude)
    point, peak = _candidate_argmax(image, grid.interior, taken)
    if peak == 0.0:
        raise DegenerateBasisError("operator image of the residualized snapshot vanishes")
    s = image[point]
    q_new = xi / s
    func = CollocationFunctional(node=point, mu=np.atleast_1d(mu_new), time_ctx=time_ctx)

    functionals = state.functionals + (func,)
    basis = np.column_stack([state.basis, q_new])
    points = np.append(state.points, point)
    mus = np.vstack([state.mus, np.atleast_1d(np.asarray(mu_new, dtype=float))])
    B = _build_B(functionals, basis, op)
    return GeimState(functionals=functionals, points=points, basis=basis, B=B, mus=mus)


def geim_interpolate(state, v, op):
    """Interpolate ``v``: coefficients ``c`` with ``sigma_i(Q c) = sigma_i(v)``.

    Exact solve for linear operators; Newton iteration (started from the
    linear solve) otherwise.  Returns ``(c, interpolant)``.
    """
    v = np.asarray(v, dtype=float)
    sig_v = _sigma_vector(state, v, op)
    c = np.linalg.solve(state.B, sig_v)
    if op.linear:
        return c, state.basis @ c

    scale = max(1.0, float(np.max(np.abs(sig_v))))
    for _ in range(ALPHA_MAX_ITER):
        w = state.basis @ c
        F = _sigma_vector(state, w, op) - sig_v
        if np.max(np.abs(F)) <= ALPHA_TOL * scale:
            break
        J = _sigma_basis_matrix(state, w, op)
        c = c + np.linalg.solve(J, -F)
    return c, state.basis @ c


def lebesgue_constant(state, op=None, verify=False):
    """Sup over grid nodes of the absolute row sums of the Lagrangian basis.

    The Lagrangian columns ``h_i`` solve ``(h_1 ... h_N) B = (q_1 ... q_N)``.
    With ``verify=True`` (linear operators) the biorthogonality
    ``sigma_i(h_j) = delta_ij`` is checked as a sanity assertion.
    """
    H = np.linalg.solve(state.B.T, state.basis.T).T
    if verify:
        if op is None:
            raise ValueError("verification needs the operator")
        n = state.n
        chk = np.empty((n, n))
        for i, f in enumerate(state.functionals):
            idx = np.array([f.node])
            for j in range(n):
                chk[i, j] = op.apply_at(H[:, j], f.mu, idx)[0]
        if not np.allclose(chk, np.eye(n), atol=1e-10):
            raise AssertionError("Lagrangian basis is not biorthogonal to the functionals")
    return float(np.max(np.sum(np.abs(H), axis=1)))


def interpolation_operator_norm(state, op):
    """Sup-norm operator norm of the interpolation map ``v -> I[v]``.

    For linear operators the map is the matrix ``H S`` (Lagrangian columns
    times the functional rows), and its infinity-norm is the exact
    inflation factor of the interpolation procedure.  The classical row-sum
    quantity of :func:`lebesgue_constant` coincides with it only when the
    functionals have unit dual norm; differential functionals do not, which
    is why the rigorous error bound uses this norm.
    """
    if not op.linear:
        raise ValueError("operator norm is only defined for linear operators")
    grid = op.grid
    n_nodes = grid.num_nodes
    S = np.zeros((state.n, n_nodes))
    e = np.zeros(n_nodes)
    for i, f in enumerate(state.functionals):
        idx = np.array([f.node])
        for k in range(n_nodes):
            e[k] = 1.0
            S[i, k] = op.apply_at(e, f.mu, idx)[0]
            e[k] = 0.0
    H = np.linalg.solve(state.B.T, state.basis.T).T
    M = H @ S
    return float(np.max(np.sum(np.abs(M), axis=1)))


def residual_eim_extend(state, r_new, op, exclude=()):
    """Extend the residual-side EIM with one residual vector; returns a new state.

    The vector is first reduced against the current basis so that it vanishes
    at all established points, then normalized to one at its new point.
    ``exclude`` lists grid indices that may not be selected (typically the
    snapshot-side points).
    """
    grid = op.grid
    r_new = np.asarray(r_new, dtype=float)
    p = state.n
    if p:
        alpha = np.linalg.solve(state.values, r_new[state.points])
        xi = r_new - state.basis @ alpha
        xi[state.points] = 0.0  # exact by construction; pin against round-off
    else:
        xi = r_new.copy()
    src_norm = float(np.max(np.abs(r_new)))
    if float(np.max(np.abs(xi))) < DROP_TOL * max(src_norm, 1e-300):
        raise DegenerateBasisError("residual vector below the drop tolerance")

    taken = set(int(i) for i in state.points) | set(int(i) for i in exclude)
    point, peak = _candidate_argmax(xi, grid.interior, taken)
    if peak == 0.0:
        raise DegenerateBasisError("residualized vector vanishes on the admissible points")
    xi = xi / xi[point]

    points = np.append(state.points, point)
    basis = np.column_stack([state.basis, xi])
    values = np.zeros((p + 1, p + 1))
    values[:p, :p] = state.values
    values[p, :p] = state.basis[point, :]
    values[p, p] = 1.0
    return ResidualEimState(points=points, basis=basis, values=values)
