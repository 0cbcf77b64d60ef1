"""Greedy construction of reduced models.

The steady loop alternates: sweep the training set with the current model
and the hyper-reduced estimator, enrich at the worst parameter (truth
solve, snapshot-side interpolation extension, residual-side point from the
reduced solution's full residual), rebuild the restricted blocks.  Two
collocation points are added per round from the second round on, keeping
the point count at ``2n - 1``.

The transient loop is greedy in the parameter (by the summed per-level
estimator) and in the time node (by the per-level series); the same
parameter may be revisited at a new time node.  Truth trajectories are
cached per parameter and extended only as far as the selected node.

Enrichment is transactional: interpolation states grow by returning new
objects, so a degenerate extension (numerically dependent snapshot or
residual) just drops that candidate and moves to the next-largest
estimator value.
"""

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DegenerateBasisError
from .geim import TimeContext, empty_residual_state, geim_extend, geim_init, residual_eim_extend
from .online import (
    GaussNewtonConfig,
    build_reduced_model,
    estimate_rr,
    estimate_rr_t,
    reconstruct,
    solve_reduced_steady,
    solve_reduced_transient,
)
from .problems import NewtonConfig, forcing_field, make_operator, num_time_levels, solve_steady, solve_transient

logger = logging.getLogger(__name__)

WORKERS_ENV = "R2ROC_WORKERS"


@dataclass(frozen=True)
class GreedyConfig:
    """Training-loop settings: sweep set, stopping rule, solver pass-through."""

    train_set: np.ndarray
    n_max: int
    tol: float = 1e-12
    first_param: object = 0          # training-set index, or "random" with the seed below
    seed: int = 0
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    gauss_newton: GaussNewtonConfig = field(default_factory=GaussNewtonConfig)

    def __post_init__(self):
        train = np.atleast_2d(np.asarray(self.train_set, dtype=float))
        object.__setattr__(self, "train_set", train)
        if self.n_max < 1 or train.shape[0] == 0 or not self.tol > 0:
            raise ValueError("invalid greedy configuration")

    def first_index(self):
        if self.first_param == "random":
            return int(np.random.default_rng(self.seed).integers(self.train_set.shape[0]))
        idx = int(self.first_param)
        if not 0 <= idx < self.train_set.shape[0]:
            raise ValueError(f"first parameter index {idx} outside the training set")
        return idx


@dataclass
class GreedyRecord:
    iteration: int
    mu: tuple
    t_level: int = None
    k_mu: int = 1
    max_estimator: float = math.nan
    test_error: float = math.nan
    points_added: tuple = ()
    cumulative_seconds: float = 0.0


@dataclass
class GreedyTrace:
    records: list
    stop_reason: str
    estimator_name: str

    def max_estimators(self):
        return np.array([r.max_estimator for r in self.records])


@dataclass
class SweepEntry:
    mu: np.ndarray
    value: float
    report: object
    series: np.ndarray = None


def _worker_count():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _map_ordered(fn, items):
    """Apply ``fn`` over ``items``; results in input order regardless of the
    worker count, so parallel sweeps merge deterministically."""
    workers = _worker_count()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sweep_estimates(model, train_set, cfg=None, estimator=None):
    """Reduced solve + estimator for every training parameter.

    Failures are recorded with a ``+inf`` estimate so the greedy examines
    that parameter next instead of silently skipping it.
    """
    gn = cfg.gauss_newton if cfg is not None else GaussNewtonConfig()
    train = np.atleast_2d(np.asarray(train_set, dtype=float))

    def run(mu):
        try:
            if model.problem.is_transient:
                rtraj = solve_reduced_transient(model, mu, cfg=gn)
                record = estimate_rr_t(model, mu, rtraj.coeffs)
                value, series, report = record.value, record.series, rtraj
            else:
                report = solve_reduced_steady(model, mu, cfg=gn)
                if estimator is None:
                    value = estimate_rr(model, mu, report.coefficients).value
                else:
                    value = estimator(model, mu, report)
                series = None
                if report.spurious:
                    value = math.inf  # untrustworthy residual: enrich here next
            if not np.isfinite(value):
                value = math.inf
        except Exception:  # noqa: BLE001 - sweep must survive any per-parameter failure
            logger.exception("sweep failed at mu=%s", mu)
            return SweepEntry(mu=mu, value=math.inf, report=None)
        return SweepEntry(mu=mu, value=value, report=report, series=series)

    return _map_ordered(run, list(train))


def _snapshot_coefficients(W, snapshots):
    """Exact coefficients of each stored snapshot in the processed basis."""
    coeffs = np.zeros((W.shape[1], len(snapshots)))
    for j, u in enumerate(snapshots):
        c, *_ = np.linalg.lstsq(W, u, rcond=None)
        coeffs[:, j] = c
    return coeffs


def _argmax_eligible(values, eligible):
    best, best_val = None, -math.inf
    for i, v in enumerate(values):
        if eligible[i] and v > best_val:
            best, best_val = i, v
    return best, best_val


def train_steady(problem, grid, cfg, estimator=None, estimator_name="reduced-residual",
                 preset_parameters=None, provenance=None):
    """Greedy training for steady problems; returns (model, trace).

    ``estimator`` replaces the hyper-reduced default (signature
    ``estimator(model, mu, report) -> float``); the loop is otherwise
    identical, which keeps alternative estimators comparable.  With
    ``preset_parameters`` the sweep/argmax stage is skipped and the given
    parameter sequence is enriched in order (snapshot replay for baselines
    and mesh studies).
    """
    if problem.is_transient:
        raise ValueError("transient problem: use train_transient")
    t0 = time.perf_counter()
    op = make_operator(problem, grid)
    forcing = forcing_field(problem, grid)
    records = []
    stop_reason = "n_max"

    preset = None if preset_parameters is None else np.atleast_2d(np.asarray(preset_parameters, dtype=float))
    if preset is not None:
        mu1 = preset[0]
    else:
        mu1 = cfg.train_set[cfg.first_index()]
    u1 = solve_steady(problem, grid, mu1, cfg=cfg.newton)
    geim = geim_init(u1, mu1, op)
    reim = empty_residual_state(grid.num_nodes)
    snapshots = [u1]
    chosen = [tuple(np.atleast_1d(mu1))]
    restriction = [int(geim.points[0])]

    def build(provenance_extra=()):
        prov = {"grid": grid.num_interior if hasattr(grid, "num_interior") else (grid.k1, grid.k2),
                "newton_tol": cfg.newton.tol, "gn_tol": cfg.gauss_newton.tol, "seed": cfg.seed,
                "estimator": estimator_name}
        prov.update(dict(provenance or {}))
        prov.update(dict(provenance_extra))
        return build_reduced_model(
            problem, grid, geim.basis, restriction, geim, reim,
            trained_mus=np.array([list(m) for m in chosen]),
            snapshot_coeffs=_snapshot_coefficients(geim.basis, snapshots),
            provenance=prov,
        )

    model = build()
    records.append(GreedyRecord(iteration=1, mu=chosen[0], points_added=(restriction[0],),
                                cumulative_seconds=time.perf_counter() - t0))

    n_target = cfg.n_max if preset is None else min(cfg.n_max, preset.shape[0])
    dropped = set()
    for n in range(2, n_target + 1):
        if preset is None:
            table = sweep_estimates(model, cfg.train_set, cfg=cfg, estimator=estimator)
            values = [e.value for e in table]
            eligible = [tuple(np.atleast_1d(e.mu)) not in set(chosen) and i not in dropped
                        for i, e in enumerate(table)]
        else:
            table = None

        enriched = False
        while not enriched:
            if preset is None:
                idx, max_val = _argmax_eligible(values, eligible)
                if idx is None:
                    stop_reason = "exhausted"
                    break
                if max_val <= cfg.tol:
                    stop_reason = "tolerance"
                    break
                mu_n = table[idx].mu
                report = table[idx].report
            else:
                mu_n = preset[n - 1]
                max_val = math.nan
                report = solve_reduced_steady(model, mu_n, cfg=cfg.gauss_newton)

            guess = reconstruct(model, report.coefficients) if report is not None else None
            try:
                u_n = solve_steady(problem, grid, mu_n, cfg=cfg.newton, initial_guess=guess)
            except ConvergenceError:
                logger.warning("truth solve failed at mu=%s; dropping it from candidacy", mu_n)
                if preset is None:
                    eligible[idx] = False
                    dropped.add(idx)
                    continue
                raise
            try:
                new_geim = geim_extend(geim, u_n, mu_n, op, exclude=reim.points)
                x_sol = int(new_geim.points[-1])
                u_hat = reconstruct(model, report.coefficients)
                r_full = op.apply(u_hat, mu_n) - forcing
                new_reim = residual_eim_extend(reim, r_full, op,
                                               exclude=tuple(restriction) + (x_sol,))
            except DegenerateBasisError as exc:
                logger.warning("degenerate enrichment at mu=%s (%s); dropped", mu_n, exc)
                if preset is None:
                    eligible[idx] = False
                    dropped.add(idx)
                    continue
                raise
            geim, reim = new_geim, new_reim
            x_res = int(reim.points[-1])
            restriction.extend([x_sol, x_res])
            snapshots.append(u_n)
            chosen.append(tuple(np.atleast_1d(mu_n)))
            model = build()
            records.append(GreedyRecord(iteration=n, mu=chosen[-1], max_estimator=max_val,
                                        points_added=(x_sol, x_res),
                                        cumulative_seconds=time.perf_counter() - t0))
            enriched = True
        if not enriched:
            break

    trace = GreedyTrace(records=records, stop_reason=stop_reason, estimator_name=estimator_name)
    return model, trace


def initial_time_level(trajectory):
    """Level whose state has the largest spatial variation (max - min);
    ties break to the earliest level."""
    spread = trajectory.states.max(axis=0) - trajectory.states.min(axis=0)
    return int(np.argmax(spread))


def train_transient(problem, grid, cfg, provenance=None):
    """Parameter-time greedy training for transient problems."""
    if not problem.is_transient:
        raise ValueError(f"{problem.kind} is steady: use train_steady")
    t0 = time.perf_counter()
    op = make_operator(problem, grid)
    forcing = forcing_field(problem, grid)
    dt = problem.dt
    n_levels = num_time_levels(problem.t_final, dt)
    records = []
    stop_reason = "n_max"

    truth_cache = {}

    def truth_up_to(mu, level):
        key = tuple(np.atleast_1d(mu))
        traj = truth_cache.get(key)
        if traj is None or traj.num_levels < level:
            traj = solve_transient(problem, grid, mu, cfg=cfg.newton, up_to_level=level,
                                   resume=traj)
            truth_cache[key] = traj
        return traj

    mu1 = cfg.train_set[cfg.first_index()]
    traj1 = truth_up_to(mu1, n_levels)
    t1 = initial_time_level(traj1)
    xi1 = traj1.states[:, t1]
    ctx1 = TimeContext(dt=dt, prev_state=traj1.states[:, t1 - 1], t=traj1.times[t1]) if t1 > 0 else None
    geim = geim_init(xi1, mu1, op, time_ctx=ctx1)
    reim = empty_residual_state(grid.num_nodes)
    snapshots = [xi1]
    chosen = [tuple(np.atleast_1d(mu1))]
    t_levels = [t1]
    k_mu = {chosen[0]: 1}
    restriction = [int(geim.points[0])]

    def build():
        prov = {"grid": grid.num_interior if hasattr(grid, "num_interior") else (grid.k1, grid.k2),
                "newton_tol": cfg.newton.tol, "gn_tol": cfg.gauss_newton.tol, "seed": cfg.seed,
                "estimator": "reduced-residual-transient", "dt": dt, "t_final": problem.t_final}
        prov.update(dict(provenance or {}))
        return build_reduced_model(
            problem, grid, geim.basis, restriction, geim, reim,
            trained_mus=np.array([list(m) for m in chosen]),
            snapshot_coeffs=_snapshot_coefficients(geim.basis, snapshots),
            trained_t_levels=np.array(t_levels),
            provenance=prov,
        )

    model = build()
    records.append(GreedyRecord(iteration=1, mu=chosen[0], t_level=t1, k_mu=1,
                                points_added=(restriction[0],),
                                cumulative_seconds=time.perf_counter() - t0))

    enriched_pairs = {(chosen[0], t1)}
    for n in range(2, cfg.n_max + 1):
        table = sweep_estimates(model, cfg.train_set, cfg=cfg)
        values = [e.value for e in table]
        eligible = [True] * len(table)

        enriched = False
        while not enriched:
            idx, max_val = _argmax_eligible(values, eligible)
            if idx is None:
                stop_reason = "exhausted"
                break
            if max_val <= cfg.tol:
                stop_reason = "tolerance"
                break
            entry = table[idx]
            mu_key = tuple(np.atleast_1d(entry.mu))
            # greedy time node: next-largest unused level for this parameter
            order = np.argsort(-entry.series, kind="stable")
            t_star = None
            for lev in order:
                if (mu_key, int(lev)) not in enriched_pairs and entry.series[lev] > 0:
                    t_star = int(lev)
                    break
            if t_star is None:
                logger.warning("all informative time nodes of mu=%s already enriched", mu_key)
                eligible[idx] = False
                continue

            traj = truth_up_to(entry.mu, t_star)
            xi = traj.states[:, t_star]
            ctx = TimeContext(dt=dt, prev_state=traj.states[:, t_star - 1], t=traj.times[t_star])
            try:
                new_geim = geim_extend(geim, xi, entry.mu, op, exclude=reim.points, time_ctx=ctx)
                x_sol = int(new_geim.points[-1])
                u_now = reconstruct(model, entry.report.coeffs[:, t_star])
                u_prev = reconstruct(model, entry.report.coeffs[:, t_star - 1])
                r_full = op.apply(u_now, entry.mu) - forcing
                r_full[grid.interior] += (u_now[grid.interior] - u_prev[grid.interior]) / dt
                new_reim = residual_eim_extend(reim, r_full, op,
                                               exclude=tuple(restriction) + (x_sol,))
            except DegenerateBasisError as exc:
                logger.warning("degenerate transient enrichment at %s, level %d (%s)", mu_key, t_star, exc)
                eligible[idx] = False
                continue
            geim, reim = new_geim, new_reim
            x_res = int(reim.points[-1])
            restriction.extend([x_sol, x_res])
            snapshots.append(xi)
            chosen.append(mu_key)
            t_levels.append(t_star)
            k_mu[mu_key] = k_mu.get(mu_key, 0) + 1
            enriched_pairs.add((mu_key, t_star))
            model = build()
            records.append(GreedyRecord(iteration=n, mu=mu_key, t_level=t_star, k_mu=k_mu[mu_key],
                                        max_estimator=max_val, points_added=(x_sol, x_res),
                                        cumulative_seconds=time.perf_counter() - t0))
            enriched = True
        if not enriched:
            break

    trace = GreedyTrace(records=records, stop_reason=stop_reason,
                        estimator_name="reduced-residual-transient")
    return model, trace


def export_trace_csv(trace, path, include_walltime=True):
    """One row per greedy round; the format round-trips through read_csv."""
    from .bench import write_csv

    p = max(len(r.mu) for r in trace.records)
    header = (["iteration"] + [f"mu_{i + 1}" for i in range(p)]
              + ["t_node", "k_mu", "max_estimator", "test_error", "cumulative_offline_seconds", "points_added"])
    rows = []
    for r in trace.records:
        rows.append(
            [r.iteration] + [repr(float(v)) for v in r.mu]
            + ["" if r.t_level is None else r.t_level,
               r.k_mu,
               "" if math.isnan(r.max_estimator) else repr(float(r.max_estimator)),
               "" if math.isnan(r.test_error) else repr(float(r.test_error)),
               repr(float(r.cumulative_seconds)) if include_walltime else repr(0.0),
               ";".join(str(i) for i in r.points_added)]
        )
    write_csv(path, header, rows)
