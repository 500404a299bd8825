"""Receding-horizon constrained control and plan execution.

The per-step problem maximizes the summed subtask reward over the horizon
subject to nonnegative constraint margins along the predicted rollout.  It is
solved by single shooting on the exterior-penalty objective

    J(u) = sum_k R(x_k, u_k) - w * sum_k sum_j min(0, phi_j(x_k, u_k))^2

with projected ascent along gradient and curvature-scaled directions (central
finite differences, batched line search).  Several well-separated starts are
probed before the best one is refined, and single-coordinate grid jumps let it
cross the kinks that contact onsets create.  Hard feasibility of the control that is actually applied is then
enforced by a repair step on the first control.
"""

from __future__ import annotations

import functools
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .core import (
    SubtaskSpec,
    TaskPlan,
    check_terminal,
    constraint_margins,
    eval_constraints,
    reward_terms,
    terminal_residual,
)

log = logging.getLogger(__name__)

SOLVERS = ("PenaltyShooting", "GridSearchOracle")


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 5
    solver: str = "PenaltyShooting"
    penalty_weight: float = 1e3
    iterations: int = 200
    constraint_tolerance: float = 1e-6
    # None means the environment's declared bounds
    control_bounds: tuple[tuple[float, float], ...] | None = None
    grid_points: int = 11
    fd_step: float = 1e-7
    hessian_step: float = 1e-4
    repair_points: int = 21
    random_starts: int = 128
    starts: int = 4
    seed: int = 0
    allow_correction: bool = False

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.constraint_tolerance < 0 or self.penalty_weight < 0:
            raise ValueError("tolerance and penalty weight must be >= 0")
        if self.control_bounds is not None and any(lo >= hi for lo, hi in self.control_bounds):
            raise ValueError("control bounds need lo < hi")
        if self.grid_points < 2 or self.repair_points < 2:
            raise ValueError("grids need at least two points")
        if self.random_starts < 0 or self.starts < 1:
            raise ValueError("random_starts must be >= 0 and starts >= 1")


@dataclass(frozen=True)
class Solution:
    controls: np.ndarray  # (horizon, m)
    objective: float
    feasible: bool
    iterations: int = 0
    repaired: bool = False

    def __getitem__(self, k: int) -> np.ndarray:
        return self.controls[k]


def _bounds(env, cfg: MpcConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.control_bounds is None:
        return np.asarray(env.lower, dtype=float), np.asarray(env.upper, dtype=float)
    lo, hi = zip(*cfg.control_bounds)
    return np.array(lo, dtype=float), np.array(hi, dtype=float)


class _Problem:
    """Batched objective over normalized control sequences ``z`` in ``[0, 1]``."""

    def __init__(self, spec: SubtaskSpec, env, world, cfg: MpcConfig):
        self.spec, self.env, self.world, self.cfg = spec, env, world, cfg
        self.lo, self.hi = _bounds(env, cfg)
        self.shape = (cfg.horizon, len(self.lo))
        self.evaluations = 0

    def controls(self, z: np.ndarray) -> np.ndarray:
        return self.lo + z * (self.hi - self.lo)

    def normalized(self, u: np.ndarray) -> np.ndarray:
        return np.clip((u - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def margins(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = self.controls(z)
        states, obs = self.env.predict(self.world, u)
        self.evaluations += len(z)
        return reward_terms(self.spec, states, u), constraint_margins(self.spec, states, u, obs)

    def objective(self, z: np.ndarray) -> np.ndarray:
        rewards, phi = self.margins(z)
        viol = np.minimum(phi, 0.0)
        return rewards.sum(axis=1) - self.cfg.penalty_weight * (viol * viol).sum(axis=(1, 2))

    def first_margin(self, u0: np.ndarray) -> np.ndarray:
        """Smallest first-step margin for each candidate first control ``(B, m)``."""
        if not self.spec.constraints:
            return np.full(len(u0), np.inf)
        states, obs = self.env.predict(self.world, u0[:, None, :])
        phi = constraint_margins(self.spec, states, u0[:, None, :], obs)
        return phi[:, 0, :].min(axis=1)


@functools.lru_cache(maxsize=32)
def _probe_offsets(d: int, hg: float, h: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    eye = np.eye(d)
    i, j = np.triu_indices(d, 1)
    signs = np.array([(1, 1), (1, -1), (-1, 1), (-1, -1)], dtype=float)
    cross = h * (signs[None, :, 0, None] * eye[i][:, None] + signs[None, :, 1, None] * eye[j][:, None])
    offsets = np.concatenate([np.zeros((1, d)), hg * eye, -hg * eye, 2 * h * eye, -2 * h * eye,
                              cross.reshape(-1, d)])
    return offsets, i, j


def _fd_derivatives(prob: _Problem, Z: np.ndarray, hg: float, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients (step ``hg``) and Hessians (step ``h``) at each row of ``Z``.

    All probes for all rows go through one batched rollout. Probes may leave the unit box
    slightly; the rollout model is defined there.
    """
    K, d = Z.shape[0], Z[0].size
    offsets, iu, ju = _probe_offsets(d, hg, h)
    probes = Z.reshape(K, 1, d) + offsets[None]
    vals = prob.objective(probes.reshape(-1, *Z.shape[1:])).reshape(K, -1)
    f0 = vals[:, :1]
    fp, fm = vals[:, 1:1 + d], vals[:, 1 + d:1 + 2 * d]
    f2p, f2m = vals[:, 1 + 2 * d:1 + 3 * d], vals[:, 1 + 3 * d:1 + 4 * d]
    g = (fp - fm) / (2 * hg)
    H = np.zeros((K, d, d))
    H[:, np.arange(d), np.arange(d)] = (f2p - 2 * f0 + f2m) / (4 * h * h)
    q = vals[:, 1 + 4 * d:].reshape(K, -1, 4)
    H[:, iu, ju] = H[:, ju, iu] = (q[..., 0] - q[..., 1] - q[..., 2] + q[..., 3]) / (4 * h * h)
    return g, H


_STEPS = 2.0 ** -np.arange(0, 30)
_STALL = 10


def _directions(g: np.ndarray, H: np.ndarray) -> list[np.ndarray]:
    """Steepest ascent plus a curvature-scaled ascent direction when one exists."""
    dirs = [g / np.max(np.abs(g))]
    lam, V = np.linalg.eigh(H)
    scale = np.max(np.abs(lam))
    if np.all(np.isfinite(lam)) and scale > 0:
        # force negative curvature so the step is an ascent direction
        neg = np.minimum(lam, -1e-9 * scale)
        newton = -(V @ ((V.T @ g) / neg))
        if np.all(np.isfinite(newton)) and np.any(newton):
            dirs.append(newton)
    return dirs


def _improves(new: float, old: float) -> bool:
    return new > old + 1e-12 * (1.0 + abs(old))


def _ascend(prob: _Problem, Z: np.ndarray, J: np.ndarray, budget: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Line-searched ascent along the gradient and Newton directions, all starts in lockstep.

    Returns the improved starts, their objectives and the number of lockstep iterations.
    """
    cfg = prob.cfg
    tau, m = prob.shape
    Z, J = Z.copy(), J.copy()
    history = [[float(j)] for j in J]
    active = np.ones(len(Z), dtype=bool)
    it = 0
    while it < budget and active.any():
        it += 1
        idx = np.flatnonzero(active)
        G, H = _fd_derivatives(prob, Z[idx], cfg.fd_step, cfg.hessian_step)
        owners, cands = [], []
        for r, k in enumerate(idx):
            g = G[r]
            if not np.any(g) or not np.all(np.isfinite(g)):
                active[k] = False
                continue
            flat = Z[k].reshape(-1)
            for d in _directions(g, H[r]):
                cands.append(np.clip(flat[None] + _STEPS[:, None] * d[None], 0.0, 1.0))
                owners.append(np.full(len(_STEPS), k))
        if not cands:
            break
        cands, owners = np.concatenate(cands), np.concatenate(owners)
        cvals = prob.objective(cands.reshape(-1, tau, m))
        for k in np.unique(owners):
            mine = np.flatnonzero(owners == k)
            best = mine[int(np.argmax(cvals[mine]))]
            if not _improves(cvals[best], J[k]):
                active[k] = False
                continue
            Z[k], J[k] = cands[best].reshape(tau, m), cvals[best]
            h = history[k]
            h.append(float(J[k]))
            # stalled: creeping along a kink of the penalty
            if len(h) > _STALL and h[-1] - h[-1 - _STALL] <= 1e-6 * (1.0 + abs(h[-1])):
                active[k] = False
    return Z, J, it


def _coordinate_scan(prob: _Problem, Z: np.ndarray, J: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best single-coordinate replacement from a uniform grid for each start.

    This jumps across contact onsets that local steps cannot cross. Returns the new starts,
    objectives and a mask of the starts that moved.
    """
    levels = np.linspace(0.0, 1.0, 2 * prob.cfg.grid_points - 1)
    K, shape = len(Z), Z.shape[1:]
    flat = Z.reshape(K, -1)
    d = flat.shape[1]
    n = d * len(levels)
    cands = np.repeat(flat, n, axis=0).reshape(K, n, d)
    cands[:, np.arange(n), np.repeat(np.arange(d), len(levels))] = np.tile(levels, d)
    vals = prob.objective(cands.reshape(-1, *shape)).reshape(K, n)
    best = np.argmax(vals, axis=1)
    moved = np.array([_improves(vals[k, best[k]], J[k]) for k in range(K)])
    Z, J = Z.copy(), J.copy()
    for k in np.flatnonzero(moved):
        Z[k], J[k] = cands[k, best[k]].reshape(shape), vals[k, best[k]]
    return Z, J, moved


_SCAN_ROUNDS = 4
_PROBE_BUDGET = 10


def _diverse_starts(seeds: np.ndarray, vals: np.ndarray, k: int, spread: float) -> list[int]:
    """Indices of up to ``k`` best seeds, each at least ``spread`` (max-norm) from those chosen."""
    chosen: list[int] = []
    for i in np.argsort(-vals, kind="stable"):
        if all(np.max(np.abs(seeds[i] - seeds[j])) >= spread for j in chosen):
            chosen.append(int(i))
            if len(chosen) == k:
                break
    return chosen


def _shooting(prob: _Problem, warm_start: np.ndarray | None) -> tuple[np.ndarray, float, int]:
    cfg = prob.cfg
    tau, m = prob.shape
    levels = np.linspace(0.0, 1.0, cfg.grid_points)
    seeds = [np.full((1, tau, m), v) for v in levels]
    rng = np.random.default_rng(cfg.seed)
    seeds.append(rng.random((cfg.random_starts, tau, m)))
    if warm_start is not None:
        seeds.append(prob.normalized(np.asarray(warm_start, dtype=float))[None])
    seeds = np.concatenate(seeds)
    vals = prob.objective(seeds)
    chosen = _diverse_starts(seeds, vals, cfg.starts, 0.25)
    Z, J = seeds[chosen], vals[chosen]
    # short lockstep ascent from several basins, then only the leader gets the full budget
    Z, J, used = _ascend(prob, Z, J, min(_PROBE_BUDGET, cfg.iterations))
    k = int(np.argmax(J))
    z, J_best = Z[k:k + 1], J[k:k + 1]
    for _ in range(_SCAN_ROUNDS):
        z, J_best, it = _ascend(prob, z, J_best, cfg.iterations)
        used += it
        z, J_best, moved = _coordinate_scan(prob, z, J_best)
        if not moved[0]:
            break
    return z[0], float(J_best[0]), used


def _grid_search(prob: _Problem) -> tuple[np.ndarray, float]:
    tau, m = prob.shape
    if tau > 3:
        raise ValueError("the grid oracle is limited to horizons of at most 3 steps")
    levels = np.linspace(0.0, 1.0, prob.cfg.grid_points)
    grid = np.array(list(itertools.product(levels, repeat=tau * m))).reshape(-1, tau, m)
    vals = prob.objective(grid)
    k = int(np.argmax(vals))
    return grid[k], float(vals[k])


def _repair(prob: _Problem, u0: np.ndarray) -> tuple[np.ndarray, bool, bool]:
    """Make the applied control satisfy every first-step margin.

    Returns (control, feasible, changed).  The closest safe control to ``u0``
    along the segment from the safest grid candidate is located by batched
    bisection.
    """
    if prob.first_margin(u0[None])[0] >= 0.0:
        return u0, True, False
    m = len(u0)
    levels = np.linspace(0.0, 1.0, prob.cfg.repair_points)
    grid = prob.controls(np.array(list(itertools.product(levels, repeat=m))))
    margin = prob.first_margin(grid)
    best = margin.max()
    # ties on margin go to the candidate nearest the solver's choice
    ties = np.flatnonzero(margin >= best - 1e-12)
    safe = grid[ties[np.argmin(np.abs(grid[ties] - u0).sum(axis=1))]]
    if best < 0.0:
        return safe, False, True
    lo, hi = 0.0, 1.0  # fraction of the way from safe to u0; lo is feasible
    fracs = np.linspace(0.0, 1.0, 17)[1:-1]
    for _ in range(8):
        pts = lo + fracs * (hi - lo)
        ok = prob.first_margin(safe + pts[:, None] * (u0 - safe)) >= 0.0
        bad = np.flatnonzero(~ok)
        first_bad = bad[0] if len(bad) else len(pts)
        new_hi = pts[first_bad] if first_bad < len(pts) else hi
        new_lo = pts[first_bad - 1] if first_bad > 0 else lo
        lo, hi = new_lo, new_hi
    return safe + lo * (u0 - safe), True, True


def solve(spec: SubtaskSpec, env, world, cfg: MpcConfig, warm_start=None) -> Solution:
    """Optimal control sequence of length ``cfg.horizon`` from ``world``."""
    prob = _Problem(spec, env, world, cfg)
    if cfg.solver == "GridSearchOracle":
        z, J = _grid_search(prob)
        iters = 0
    else:
        z, J, iters = _shooting(prob, warm_start)
    u = prob.controls(z)
    u0, feasible, changed = _repair(prob, u[0])
    if changed:
        u = u.copy()
        u[0] = u0
        J = float(prob.objective(prob.normalized(u)[None])[0])
    if feasible and cfg.solver == "GridSearchOracle":
        feasible = bool(prob.margins(prob.normalized(u)[None])[1].min(initial=np.inf)
                        >= -cfg.constraint_tolerance)
    return Solution(u, J, feasible, iters, changed)


def objective_value(spec: SubtaskSpec, env, world, cfg: MpcConfig, controls) -> float:
    """Penalized shooting objective of a given control sequence."""
    prob = _Problem(spec, env, world, cfg)
    u = np.asarray(controls, dtype=float).reshape(prob.shape)
    return float(prob.objective(((u - prob.lo) / (prob.hi - prob.lo))[None])[0])


def control_step(spec: SubtaskSpec, env, world, cfg: MpcConfig, warm_start=None):
    """First control of :func:`solve` together with the full solution."""
    sol = solve(spec, env, world, cfg, warm_start)
    return sol.controls[0], sol


# --------------------------------------------------------------------------
# execution


@dataclass(frozen=True)
class Boundary:
    index: int
    start: int
    end: int
    success: bool


@dataclass
class Trajectory:
    """States ``0..T``, controls ``0..T-1`` and observables aligned with states."""

    states: list[np.ndarray] = field(default_factory=list)
    controls: list[np.ndarray] = field(default_factory=list)
    observables: list[dict] = field(default_factory=list)
    boundaries: list[Boundary] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.controls)


@dataclass(frozen=True)
class FeedbackText:
    text: str
    metric: float | None = None
    violations: tuple[tuple[str, float], ...] = ()

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class SubtaskOutcome:
    index: int
    success: bool
    realized_window: int
    start: int
    end: int
    worst_margin: float
    terminal_held: bool
    infeasible_steps: int = 0
    feedback: FeedbackText | None = None


@dataclass
class RunResult:
    trajectory: Trajectory
    outcomes: list[SubtaskOutcome]
    plan: TaskPlan
    completed: bool
    corrections: list[str] = field(default_factory=list)

    @property
    def windows_total(self) -> int:
        return sum(o.realized_window for o in self.outcomes)


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.4g}"


def subtask_feedback(env, spec: SubtaskSpec, traj: Trajectory, start: int, end: int,
                     margins: np.ndarray, terminal_held: bool) -> FeedbackText:
    """Summary of a failed subtask: histories, margins and terminal residual."""
    xs = np.array(traj.states[start:end + 1])
    us = np.array(traj.controls[start:end]) if end > start else np.zeros((0, 1))
    lines = [f"subtask {spec.index} failed after {end - start} of {spec.window} steps."]
    lines.append(f"state x1: start {_fmt(xs[0, 0])}, end {_fmt(xs[-1, 0])}; "
                 f"x2: start {_fmt(xs[0, 1])}, end {_fmt(xs[-1, 1])}")
    if len(us):
        lines.append(f"control: min {_fmt(us.min())}, max {_fmt(us.max())}, last {_fmt(us[-1, 0])}")
    violations = []
    for k, c in enumerate(spec.constraints):
        worst = float(margins[:, k].min()) if len(margins) else math.inf
        status = "violated" if worst < 0 else "satisfied"
        lines.append(f"constraint {c.label()}: worst margin {_fmt(worst)} ({status})")
        if worst < 0:
            violations.append((c.label(), worst))
    residual = terminal_residual(spec.terminal, xs[-1], spec.resolve)
    lines.append(f"terminal {spec.terminal.kind}: residual {_fmt(residual)} "
                 f"({'held' if terminal_held else 'not reached'})")
    lines += env.summarize(_slice(traj, start, end))
    return FeedbackText("\n".join(lines), None, tuple(violations))


def _slice(traj: Trajectory, start: int, end: int) -> Trajectory:
    return Trajectory(traj.states[start:end + 1], traj.controls[start:end],
                      traj.observables[start:end + 1],
                      [Boundary(0, 0, end - start, False)])


def run_subtask(env, spec: SubtaskSpec, world, cfg: MpcConfig, traj: Trajectory | None = None):
    """Execute one subtask until its terminal condition holds or its window runs out.

    Appends to ``traj`` (created if missing) and returns ``(outcome, world, traj)``.
    """
    if traj is None:
        traj = Trajectory([env.state(world)], [], [env.observe(world)], [])
    start = traj.T
    tol = cfg.constraint_tolerance
    held = check_terminal(spec.terminal, env.state(world), 0, spec.window, spec.resolve)
    margins = []
    infeasible = 0
    warm = None
    elapsed = 0
    while not held and elapsed < spec.window:
        u, sol = control_step(spec, env, world, cfg, warm)
        if not sol.feasible:
            infeasible += 1
        warm = np.concatenate([sol.controls[1:], sol.controls[-1:]])
        world, obs = env.step(world, u)
        x = env.state(world)
        traj.states.append(x)
        traj.controls.append(np.asarray(u, dtype=float).copy())
        traj.observables.append(obs)
        margins.append(eval_constraints(spec, x, u, obs))
        elapsed += 1
        held = check_terminal(spec.terminal, x, elapsed, spec.window, spec.resolve)
    margins = np.array(margins).reshape(len(margins), len(spec.constraints))
    worst = float(margins.min()) if margins.size else math.inf
    success = bool(held and worst >= -tol)
    end = traj.T
    feedback = None
    if not success:
        feedback = subtask_feedback(env, spec, traj, start, end, margins, held)
    traj.boundaries.append(Boundary(spec.index, start, end, success))
    outcome = SubtaskOutcome(spec.index, success, elapsed, start, end, worst, held, infeasible, feedback)
    return outcome, world, traj


Corrector = Callable[[TaskPlan, int, FeedbackText], "TaskPlan | None"]


def whole_task_done(plan: TaskPlan, state, elapsed: int) -> bool:
    horizon = sum(st.window for st in plan.subtasks)
    return check_terminal(plan.whole_task_done, state, elapsed, horizon, plan.resolve)


def run_plan(env, plan: TaskPlan, cfg: MpcConfig, world=None,
             corrector: Corrector | None = None) -> RunResult:
    """Run subtasks in order until the whole-task condition holds or the plan is used up.

    When ``cfg.allow_correction`` is set and a subtask fails, ``corrector`` may
    return a plan whose later subtasks replace the remaining ones.
    """
    world = env.reset() if world is None else world
    traj = Trajectory([env.state(world)], [], [env.observe(world)], [])
    outcomes: list[SubtaskOutcome] = []
    corrections: list[str] = []
    i = 0
    while i < len(plan.subtasks):
        if whole_task_done(plan, env.state(world), traj.T):
            break
        spec = plan.subtasks[i]
        outcome, world, traj = run_subtask(env, spec, world, cfg, traj)
        if not outcome.success and cfg.allow_correction and corrector is not None:
            metric = env.metric(traj, plan)
            feedback = replace(outcome.feedback, metric=metric,
                               text=outcome.feedback.text + f"\nevaluation metric so far: {_fmt(metric)}")
            outcome = replace(outcome, feedback=feedback)
            new = corrector(plan, spec.index, feedback)
            if new is not None:
                head = plan.subtasks[:i + 1]
                tail = tuple(st for st in new.subtasks if st.index > spec.index)
                plan = TaskPlan(head + tail, new.whole_task_done, source=f"corrected:{spec.index}")
                corrections.append(plan.source)
                log.info("subtask %d failed; plan rewritten with %d later subtasks",
                         spec.index, len(tail))
        outcomes.append(outcome)
        i += 1
    completed = whole_task_done(plan, env.state(world), traj.T)
    return RunResult(traj, outcomes, plan, completed, corrections)
