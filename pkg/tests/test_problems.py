import numpy as np
import pytest

from r2roc.errors import ConvergenceError
from r2roc.grids import build_grid_1d
from r2roc.problems import (
    NewtonConfig,
    ProblemSpec,
    make_grid,
    make_operator,
    num_time_levels,
    residual_steady,
    residual_transient,
    solve_steady,
    solve_steady_burgers,
    solve_steady_cubic_rd,
    solve_transient,
    steady_burgers_spec,
    steady_cubic_rd_spec,
    steady_heat_spec,
    transient_burgers_spec,
)


def burgers_shock_root(mu, tol=1e-12):
    """Root of a*tanh(a/(2 mu)) = 1 by bisection; the steady shock amplitude."""
    f = lambda a: a * np.tanh(a / (2.0 * mu)) - 1.0
    lo, hi = 1.0, 2.0 + 2.0 * mu
    assert f(lo) < 0 < f(hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def burgers_shock_profile(x, mu):
    a = burgers_shock_root(mu)
    return -a * np.tanh(a * x / (2.0 * mu))


# --- residual evaluation -----------------------------------------------------

def test_burgers_residual_hand_stencil():
    # u = -x on the 5-node grid over [-1, 1]: the conservative flux of
    # u^2 = x^2 differentiates to x_i and the second difference of a linear
    # function vanishes, so the residual is exactly x_i at interior nodes.
    p = steady_burgers_spec()
    g = build_grid_1d(-1.0, 1.0, 3)
    u = -g.nodes
    r = residual_steady(p, g, 0.37, u)
    h = 0.5
    for i in (1, 2, 3):
        expected = (u[i + 1] ** 2 - u[i - 1] ** 2) / (4 * h) - 0.37 * (u[i - 1] - 2 * u[i] + u[i + 1]) / h**2
        assert r[i] == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(g.nodes[i], abs=1e-14)
    assert r[0] == r[-1] == 0.0


def test_burgers_residual_of_solution_is_small():
    p = steady_burgers_spec()
    g = make_grid(p, 64)
    u = solve_steady(p, g, 0.3)
    r = residual_steady(p, g, 0.3, u)
    assert np.max(np.abs(r)) <= 1e-10


def test_cubic_rd_residual_at_zero_is_minus_forcing():
    from r2roc.problems import forcing_field

    p = steady_cubic_rd_spec()
    g = make_grid(p, 12)
    r = residual_steady(p, g, (0.2, 2.0), np.zeros(g.num_nodes))
    np.testing.assert_array_equal(r, -forcing_field(p, g))


def test_residual_warns_outside_box():
    p = steady_burgers_spec()
    g = make_grid(p, 8)
    with pytest.warns(UserWarning):
        residual_steady(p, g, 7.0, -g.nodes)


def test_residual_rejects_nan():
    p = steady_burgers_spec()
    g = make_grid(p, 8)
    bad = -g.nodes
    bad[3] = np.nan
    with pytest.raises(ValueError):
        residual_steady(p, g, 0.5, bad)


# --- steady Burgers ----------------------------------------------------------

def test_burgers_matches_analytic_profile_at_order_two():
    p = steady_burgers_spec()
    errs = []
    for k in (50, 100, 200):
        g = make_grid(p, k)
        u = solve_steady(p, g, 1.0)
        errs.append(np.max(np.abs(u - burgers_shock_profile(g.nodes, 1.0))))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 2.0) < 0.3)


def test_burgers_solution_is_odd():
    p = steady_burgers_spec()
    g = make_grid(p, 80)
    for mu in (0.08, 0.5, 1.0):
        u = solve_steady(p, g, mu)
        assert np.max(np.abs(u + u[::-1])) < 1e-9


def test_burgers_large_viscosity_limit():
    p = steady_burgers_spec(param_box=((0.05, 50.0),))
    g = make_grid(p, 100)
    u = solve_steady(p, g, 50.0)
    # nested fine grid (intervals double for 2K+1 interior nodes); the fine
    # solve needs a slightly relaxed tolerance: the diffusion term's rounding
    # noise exceeds 1e-10 at this stiffness
    g_fine = make_grid(p, 201)
    u_fine = solve_steady(p, g_fine, 50.0, cfg=NewtonConfig(tol=2e-9))
    assert np.max(np.abs(u - u_fine[::2])) < 1e-4
    assert np.max(np.abs(u - (-g.nodes))) <= 1e-2


def test_burgers_monotone_shock_profiles():
    p = steady_burgers_spec()
    g = make_grid(p, 100)
    for mu in (0.05, 0.2, 1.0):
        u = solve_steady(p, g, mu)
        assert np.all(np.diff(u) < 0)


def test_burgers_rejects_nonpositive_viscosity():
    p = steady_burgers_spec()
    g = make_grid(p, 16)
    with pytest.raises(ValueError):
        solve_steady(p, g, -0.1)


def test_solver_reports_nonconvergence():
    p = steady_burgers_spec()
    g = make_grid(p, 64)
    with pytest.raises(ConvergenceError) as err:
        solve_steady(p, g, 0.05, cfg=NewtonConfig(tol=1e-10, max_iter=2))
    assert err.value.residual is not None


# --- steady cubic reaction-diffusion -----------------------------------------

def test_cubic_rd_zero_forcing_gives_zero():
    p = ProblemSpec("steady-cubic-rd", ((0.2, 5.0), (0.2, 2.0)), ((-1.0, 1.0), (-1.0, 1.0)))
    g = make_grid(p, 10)
    u = solve_steady(p, g, (1.0, 0.5))
    np.testing.assert_array_equal(u, np.zeros(g.num_nodes))


def test_cubic_rd_converges_and_matches_forcing_symmetry():
    p = steady_cubic_rd_spec()
    g = make_grid(p, 32)
    u = solve_steady(p, g, (0.2, 2.0))
    r = residual_steady(p, g, (0.2, 2.0), u)
    assert np.max(np.abs(r)) <= 1e-10
    # the forcing 100 sin(2 pi x1) cos(2 pi x2) is even in x2, so the
    # solution must be symmetric under x2 -> -x2 on this symmetric grid
    U = u.reshape(g.shape)
    assert np.max(np.abs(U - U[:, ::-1])) < 1e-9


def test_cubic_rd_self_convergence_second_order():
    p = steady_cubic_rd_spec()
    mu = (1.0, 1.0)
    sols = []
    for k in (15, 31, 63):  # interval counts 16, 32, 64: nested grids
        g = make_grid(p, k)
        sols.append(solve_steady(p, g, mu).reshape(g.shape))
    e1 = np.max(np.abs(sols[0] - sols[1][::2, ::2]))
    e2 = np.max(np.abs(sols[1] - sols[2][::2, ::2]))
    rate = np.log2(e1 / e2)
    assert abs(rate - 2.0) < 0.3


def test_cubic_rd_rejects_nonpositive_diffusion():
    p = steady_cubic_rd_spec()
    g = make_grid(p, 8)
    with pytest.raises(ValueError):
        solve_steady(p, g, (1.0, 0.0))


# --- transient solves ----------------------------------------------------------

def test_transient_steady_initial_state_stays_put():
    # backward Euler has the steady solution as a fixed point
    p = steady_heat_spec()
    g = make_grid(p, 40)
    u_star = solve_steady(p, g, 3.0)
    pt = ProblemSpec(
        "transient-burgers", ((0.1, 1.0),), ((0.0, 1.0),),
        forcing="constant", forcing_amplitude=1.0, bc=(0.0, 0.0), t_final=0.05, dt=0.01,
    )
    gt = make_grid(pt, 40)
    u0 = solve_steady(
        ProblemSpec("steady-burgers", ((0.1, 1.0),), ((0.0, 1.0),), forcing="constant",
                    forcing_amplitude=1.0, bc=(0.0, 0.0)),
        gt, 0.5,
    )
    traj = solve_transient(pt, gt, 0.5, resume=None)
    # restart the march from the steady state and check it does not move
    from r2roc.problems import Trajectory

    seeded = Trajectory(times=np.array([0.0]), states=u0[:, None].copy(), dt=pt.dt)
    traj = solve_transient(pt, gt, 0.5, resume=seeded)
    drift = np.max(np.abs(traj.states - u0[:, None]))
    assert drift < 1e-9
    assert u_star.shape == (g.num_nodes,)


def test_transient_burgers_reaches_steady_profile():
    # domain (0,1), zero forcing, boundary data (-1, 1): by t = 1 the state
    # at mu = 1 sits on the steady profile of the same boundary-value problem
    pt = transient_burgers_spec(param_box=((0.1, 1.0),), forcing_amplitude=0.0,
                                bc=(-1.0, 1.0), t_final=1.0, dt=1e-3)
    g = make_grid(pt, 100)
    traj = solve_transient(pt, g, 1.0)
    steady = ProblemSpec("steady-burgers", ((0.1, 1.0),), ((0.0, 1.0),), bc=(-1.0, 1.0))
    u_star = solve_steady(steady, g, 1.0)
    assert np.max(np.abs(traj.states[:, -1] - u_star)) <= 1e-3


def test_transient_first_order_in_time():
    pt_base = dict(param_box=((0.1, 1.0),), forcing_amplitude=1.0, bc=(0.0, 0.0))
    finals = []
    for dt in (0.02, 0.01, 0.005):
        pt = transient_burgers_spec(**pt_base, t_final=0.2, dt=dt)
        g = make_grid(pt, 60)
        finals.append(solve_transient(pt, g, 0.5).states[:, -1])
    e1 = np.max(np.abs(finals[0] - finals[2]))
    e2 = np.max(np.abs(finals[1] - finals[2]))
    # backward Euler: halving dt roughly halves the error against the finer run
    rate = np.log2((e1 / e2) - 1.0 + 1e-30)  # e1/e2 ~ (4dt - dt)/(2dt - dt) = 3 would be too crude
    e_coarse = np.max(np.abs(finals[0] - finals[1]))
    e_fine = np.max(np.abs(finals[1] - finals[2]))
    assert 1.6 < e_coarse / e_fine < 2.6  # ratio ~2 for first order


def test_transient_level_zero_and_residuals():
    pt = transient_burgers_spec(param_box=((0.1, 1.0),), forcing_amplitude=1.0,
                                bc=(0.0, 0.0), t_final=0.02, dt=0.01)
    g = make_grid(pt, 30)
    traj = solve_transient(pt, g, 0.4)
    assert traj.states[:, 0].max() == 0.0  # zero initial condition
    r = residual_transient(pt, g, 0.4, traj.states[:, 1], traj.states[:, 0], pt.dt)
    assert np.max(np.abs(r)) <= 1e-10
    # steady state in, steady state out: time term cancels
    u = traj.states[:, 2]
    r2 = residual_transient(pt, g, 0.4, u, u, pt.dt)
    r_steady = residual_steady(pt, g, 0.4, u)
    np.testing.assert_allclose(r2, r_steady, atol=1e-14)


def test_transient_residual_hand_stencil():
    pt = transient_burgers_spec(param_box=((0.1, 1.0),), forcing_amplitude=0.0,
                                bc=(-1.0, 1.0), t_final=0.1, dt=0.05)
    g = build_grid_1d(0.0, 1.0, 3)
    u_now = np.array([0.3, -0.2, 0.5, 0.1, -0.4])
    u_prev = np.array([0.0, 0.1, 0.2, 0.3, 0.4])
    mu, dt, h = 0.7, 0.05, 0.25
    r = residual_transient(pt, g, mu, u_now, u_prev, dt)
    for i in (1, 2, 3):
        expected = (
            (u_now[i] - u_prev[i]) / dt
            + (u_now[i + 1] ** 2 - u_now[i - 1] ** 2) / (4 * h)
            - mu * (u_now[i - 1] - 2 * u_now[i] + u_now[i + 1]) / h**2
        )
        assert r[i] == pytest.approx(expected, rel=1e-14)


def test_residual_transient_validates():
    pt = transient_burgers_spec(param_box=((0.1, 1.0),), forcing_amplitude=0.0,
                                bc=(0.0, 0.0), t_final=0.1, dt=0.05)
    g = make_grid(pt, 8)
    u = np.zeros(g.num_nodes)
    with pytest.raises(ValueError):
        residual_transient(pt, g, 0.5, u, u, -0.1)
    with pytest.raises(ValueError):
        residual_transient(pt, g, 0.5, u, u[:-1], 0.05)


def test_trajectory_level_count_validation():
    assert num_time_levels(1.0, 1e-3) == 1000
    with pytest.raises(ValueError):
        num_time_levels(1.0, 3e-4)
    with pytest.raises(ValueError):
        ProblemSpec("transient-burgers", ((0.1, 1.0),), ((0.0, 1.0),), t_final=1.0, dt=3e-4)


def test_transient_resume_matches_full_march():
    pt = transient_burgers_spec(param_box=((0.1, 1.0),), forcing_amplitude=1.0,
                                bc=(0.0, 0.0), t_final=0.05, dt=0.01)
    g = make_grid(pt, 24)
    full = solve_transient(pt, g, 0.3)
    part = solve_transient(pt, g, 0.3, up_to_level=2)
    rest = solve_transient(pt, g, 0.3, resume=part)
    np.testing.assert_array_equal(rest.states, full.states)


# --- named solver wrappers -----------------------------------------------------

def test_named_wrappers():
    g = build_grid_1d(-1.0, 1.0, 50)
    u = solve_steady_burgers(g, 0.5)
    assert u[0] == 1.0 and u[-1] == -1.0
    p2 = steady_cubic_rd_spec()
    g2 = make_grid(p2, 12)
    u2 = solve_steady_cubic_rd(g2, (1.0, 1.0))
    assert u2.shape == (g2.num_nodes,)


def test_closed_loop_residual_check():
    # every converged solve satisfies its own residual operator
    cases = [
        (steady_burgers_spec(), 48, 0.07),
        (steady_heat_spec(), 48, 2.5),
    ]
    for p, k, mu in cases:
        g = make_grid(p, k)
        u = solve_steady(p, g, mu)
        assert np.max(np.abs(residual_steady(p, g, mu, u))) <= 1e-10
