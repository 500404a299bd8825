"""Bi-level adaptation: language-model corrections outside, finite-difference SGD inside.

The loss of a pooled parameter vector is the mean evaluation metric over a
fixed battery of rollout seeds (an error-style metric, so it is minimized).
Inner steps follow ``theta <- clip(theta - eta_n * grad)`` with
``eta_n = eta0 * exp(-gamma * n)``.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import Param, ParamVector, TaskPlan, pool_params, scatter_params
from .llm import FixtureMiss, LlmPipeline, LlmUnavailable, ParseError
from .mpc import FeedbackText, MpcConfig, RunResult, run_plan

log = logging.getLogger(__name__)

VARIANTS = ("Full", "SgdOnly", "LlmOnly")


class NonConvergence(Exception):
    """Raised only on request; the framework normally returns a flagged result."""


@dataclass(frozen=True)
class LearningSchedule:
    eta0: float = 3.0
    gamma: float = 0.05
    inner_steps: int = 5
    eps_fd: float = 1e-3
    eps_stop: float = 1e-2
    max_outer: int = 8
    rollouts_per_eval: int = 8
    base_seed: int = 0
    # decay index continues across outer steps; False restarts it every inner loop
    global_index: bool = True
    # optional cap on the L2 norm of an update step (in parameter units)
    max_step: float | None = None

    def __post_init__(self) -> None:
        if self.eta0 <= 0 or self.gamma < 0 or self.eps_fd <= 0 or self.eps_stop <= 0:
            raise ValueError("eta0, eps_fd and eps_stop must be > 0 and gamma >= 0")
        if self.inner_steps < 0 or self.max_outer < 1 or self.rollouts_per_eval < 1:
            raise ValueError("inner_steps >= 0, max_outer >= 1 and rollouts_per_eval >= 1 required")

    def eta(self, n: int) -> float:
        return self.eta0 * math.exp(-self.gamma * n)

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(self.base_seed + k for k in range(self.rollouts_per_eval))


@dataclass(frozen=True)
class LossEstimate:
    value: float
    std_error: float
    count: int
    seeds: tuple[int, ...]
    # smallest realized margin over all successful subtasks of all rollouts
    worst_success_margin: float = math.inf
    runs: tuple[RunResult, ...] = field(default=(), compare=False, repr=False)

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class IterationRecord:
    outer_step: int
    inner_step: int
    global_n: int
    theta: dict
    loss: float
    grad_norm: float = math.nan
    eta: float = math.nan
    command: str = ""
    evaluations: int = 0
    wall_time: float = field(default=0.0, compare=False)


# --------------------------------------------------------------------------
# loss and gradient


def expected_loss(plan: TaskPlan, theta: ParamVector | None, env_factory: Callable[[int], object],
                  schedule: LearningSchedule, mpc_cfg: MpcConfig = MpcConfig(),
                  corrector=None) -> LossEstimate:
    """Mean metric over the schedule's seed battery (deterministic given its inputs)."""
    if theta is not None:
        plan = scatter_params(plan, theta)
    values, runs = [], []
    worst = math.inf
    for seed in schedule.seeds:
        env = env_factory(seed)
        run = run_plan(env, plan, mpc_cfg, corrector=corrector)
        values.append(env.metric(run.trajectory, run.plan))
        runs.append(run)
        for o in run.outcomes:
            if o.success:
                worst = min(worst, o.worst_margin)
    arr = np.array(values, dtype=float)
    se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return LossEstimate(float(arr.mean()), se, len(arr), schedule.seeds, worst, tuple(runs))


def finite_diff_grad(loss_fn: Callable, theta, eps: float) -> np.ndarray:
    """Central differences ``[L(t + eps e_j) - L(t - eps e_j)] / (2 eps)``.

    ``theta`` is a :class:`ParamVector` (probes are clipped to its bounds and
    fixed entries get a zero component without being probed) or a plain array.
    ``loss_fn`` receives the same kind of object and must use common random
    numbers across probes.
    """
    if isinstance(theta, ParamVector):
        x = theta.values
        lo, hi = theta.lower, theta.upper
        free = hi > lo
        wrap = theta.with_values
    else:
        x = np.atleast_1d(np.asarray(theta, dtype=float))
        lo, hi = np.full_like(x, -np.inf), np.full_like(x, np.inf)
        free = np.ones(len(x), dtype=bool)
        wrap = lambda v: v  # noqa: E731
    grad = np.zeros(len(x))
    for j in np.flatnonzero(free):
        xp, xm = x.copy(), x.copy()
        xp[j] = min(x[j] + eps, hi[j])
        xm[j] = max(x[j] - eps, lo[j])
        width = xp[j] - xm[j]
        if width <= 0:
            continue
        grad[j] = (float(loss_fn(wrap(xp))) - float(loss_fn(wrap(xm)))) / width
    return grad


def sgd_update(theta: ParamVector, grad, schedule: LearningSchedule, n: int) -> ParamVector:
    """One projected step ``clip(theta - eta0 * exp(-gamma * n) * grad)``."""
    step = schedule.eta(n) * np.asarray(grad, dtype=float)
    if schedule.max_step is not None:
        norm = float(np.linalg.norm(step))
        if norm > schedule.max_step:
            step = step * (schedule.max_step / norm)
    return theta.clipped(theta.values - step)


@dataclass
class InnerResult:
    theta: ParamVector
    records: list[IterationRecord]
    n: int
    converged: bool
    last_loss: float


def sgd_inner_loop(theta, loss_fn: Callable, schedule: LearningSchedule, n0: int = 0,
                   outer_step: int = 0, first_loss: float | None = None,
                   counter: Callable[[], int] | None = None, grad_fn: Callable | None = None) -> InnerResult:
    """``schedule.inner_steps`` projected SGD updates starting at global index ``n0``.

    Each record holds the loss and gradient at the parameters *before* its
    update and the learning rate used for it.  ``first_loss`` reuses an
    evaluation of the starting point that the caller already has.  ``grad_fn``
    replaces the finite-difference estimate when an exact gradient is known.
    """
    unwrap = not isinstance(theta, ParamVector)
    if unwrap:
        arr = np.atleast_1d(np.asarray(theta, dtype=float))
        theta = ParamVector(tuple(Param(f"x{k}", float(v), -np.inf, np.inf) for k, v in enumerate(arr)))
    f = (lambda t: loss_fn(t.values if len(t) > 1 else t.values[0])) if unwrap else loss_fn
    g = (lambda t: grad_fn(t.values if len(t) > 1 else t.values[0])) if unwrap and grad_fn else grad_fn
    records: list[IterationRecord] = []
    converged = False
    n = n0
    loss = first_loss
    t_start = time.perf_counter()
    for j in range(1, schedule.inner_steps + 1):
        n = n0 + j if schedule.global_index else j
        if loss is None:
            loss = float(f(theta))
        evals = counter() if counter else 0
        if g is not None:
            grad = np.atleast_1d(np.asarray(g(theta), dtype=float))
        else:
            grad = finite_diff_grad(f, theta, schedule.eps_fd)
        gnorm = float(np.linalg.norm(grad))
        records.append(IterationRecord(outer_step, j, n, theta.as_dict(), loss, gnorm, schedule.eta(n), "",
                                       evals, time.perf_counter() - t_start))
        theta = sgd_update(theta, grad, schedule, n)
        loss = None
        if gnorm <= schedule.eps_stop:
            converged = True
            break
    if not schedule.global_index:
        n = n0 + len(records)
    last_loss = records[-1].loss if records else (math.nan if first_loss is None else first_loss)
    return InnerResult(theta, records, n, converged, last_loss)


# --------------------------------------------------------------------------
# outer correction


def render_feedback(env, plan: TaskPlan, run: RunResult, loss: float) -> FeedbackText:
    """Feedback text for a completed evaluation: outcome per subtask, margins, metric."""
    lines = [f"evaluation metric (lower is better): {loss:.4g}",
             f"whole task {'completed' if run.completed else 'not completed'} in {run.trajectory.T} steps"]
    violations = []
    for o in run.outcomes:
        state = "succeeded" if o.success else "failed"
        margin = "inf" if math.isinf(o.worst_margin) else f"{o.worst_margin:.4g}"
        lines.append(f"subtask {o.index} {state} after {o.realized_window} steps; worst constraint margin {margin}")
        if o.feedback is not None:
            lines += ["  " + ln for ln in o.feedback.text.splitlines()[1:]]
            violations += list(o.feedback.violations)
    for st in plan.subtasks:
        values = ", ".join(f"{p.name}={p.value:.4g}" for p in st.params)
        lines.append(f"subtask {st.index} parameters: {values or 'none'}")
    lines += env.summarize(run.trajectory)
    return FeedbackText("\n".join(lines), loss, tuple(violations))


@dataclass
class CorrectionResult:
    plan: TaskPlan
    theta: ParamVector
    command: str
    changed: bool
    warning: str | None = None


def apply_seeds(plan: TaskPlan, seeds: dict) -> tuple[ParamVector, list[str]]:
    pooled = pool_params(plan)
    values = pooled.values
    unknown = []
    for name, value in seeds.items():
        if name in pooled:
            values[pooled.names.index(name)] = value
        else:
            unknown.append(name)
    return pooled.clipped(values), unknown


def outer_correction(pipeline: LlmPipeline, instruction: str, plan: TaskPlan, theta: ParamVector,
                     env, run: RunResult, loss: float, step: int = 0, scene: str = "") -> CorrectionResult:
    """Ask for a correction command and a rewritten plan; keep the old plan on any failure.

    Missing fixtures are configuration errors and propagate.
    """
    current = scatter_params(plan, theta)
    feedback = render_feedback(env, current, run, loss)
    try:
        cmd = pipeline.correction(instruction, feedback.text, current)
        if cmd.no_change:
            return CorrectionResult(plan, theta, cmd.text, False)
        new_plan = pipeline.generate_plan(instruction, cmd.text, scene, (), current, source=f"corrected:{step}")
    except FixtureMiss:
        raise
    except (LlmUnavailable, ParseError) as e:
        warning = f"correction at outer step {step} rejected, keeping previous plan: {e}"
        log.warning(warning)
        return CorrectionResult(plan, theta, "", False, warning)
    if len(new_plan.subtasks) != len(plan.subtasks):
        log.info("outer step %d changed the number of subtasks from %d to %d",
                 step, len(plan.subtasks), len(new_plan.subtasks))
    new_theta, unknown = apply_seeds(new_plan, dict(cmd.seeds))
    warning = None
    if unknown:
        warning = f"ignored seeds for unknown parameters {unknown}"
        log.warning(warning)
    return CorrectionResult(new_plan, new_theta, cmd.text, True, warning)


def make_corrector(pipeline: LlmPipeline, instruction: str, scene: str = ""):
    """Mid-run corrector for :func:`mpc.run_plan` (subtask failure -> rewritten tail)."""

    def corrector(plan: TaskPlan, index: int, feedback: FeedbackText):
        try:
            cmd = pipeline.correction(instruction, feedback.text, plan)
            if cmd.no_change:
                return None
            return pipeline.generate_plan(instruction, cmd.text, scene, (), plan, source=f"corrected:{index}")
        except FixtureMiss:
            raise
        except (LlmUnavailable, ParseError) as e:
            log.warning("mid-run correction after subtask %d rejected: %s", index, e)
            return None

    return corrector


# --------------------------------------------------------------------------
# the full loop


@dataclass
class FrameworkResult:
    variant: str
    plan: TaskPlan
    theta: ParamVector
    records: list[IterationRecord]
    converged: bool
    evaluations: int
    best_loss: float
    warnings: list[str] = field(default_factory=list)

    @property
    def non_convergence(self) -> bool:
        return not self.converged


class _Counter:
    def __init__(self):
        self.n = 0

    def __call__(self) -> int:
        return self.n


def run_framework(instruction: str, plan: TaskPlan, env_factory: Callable[[int], object],
                  schedule: LearningSchedule, variant: str = "Full",
                  pipeline: LlmPipeline | None = None, mpc_cfg: MpcConfig = MpcConfig(),
                  scene: str = "", corrector=None) -> FrameworkResult:
    """Alternate outer corrections and inner SGD until the gradient is small.

    ``Full`` runs both levels, ``SgdOnly`` never corrects after the initial
    plan and ``LlmOnly`` runs no inner steps.  The best evaluated plan is
    returned; ``converged`` is False when ``max_outer`` ran out first.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if variant != "SgdOnly" and pipeline is None:
        raise ValueError(f"variant {variant} needs a language-model pipeline")
    inner = replace(schedule, inner_steps=0) if variant == "LlmOnly" else schedule
    counter = _Counter()
    last: dict = {}

    def evaluate(p: TaskPlan, th: ParamVector) -> LossEstimate:
        counter.n += 1
        est = expected_loss(p, th, env_factory, schedule, mpc_cfg, corrector)
        last["estimate"] = est
        return est

    t0 = time.perf_counter()
    theta = pool_params(plan)
    est = evaluate(plan, theta)
    records = [IterationRecord(0, 0, 0, theta.as_dict(), est.value, evaluations=counter.n,
                               wall_time=time.perf_counter() - t0)]
    best = (est.value, plan, theta)
    warnings: list[str] = []
    n = 0
    converged = False
    for k in range(1, schedule.max_outer + 1):
        loss = est.value
        if variant != "SgdOnly":
            env = env_factory(schedule.base_seed)
            res = outer_correction(pipeline, instruction, plan, theta, env, est.runs[0], est.value, k, scene)
            if res.warning:
                warnings.append(res.warning)
            if res.changed:
                plan, theta = res.plan, res.theta
                est = evaluate(plan, theta)
                loss = est.value
            records.append(IterationRecord(k, 0, n, theta.as_dict(), loss, command=res.command,
                                           evaluations=counter.n, wall_time=time.perf_counter() - t0))
            if loss < best[0]:
                best = (loss, plan, theta)
        if inner.inner_steps == 0:
            continue
        current_plan = plan

        def loss_fn(th: ParamVector, _plan=current_plan) -> float:
            return evaluate(_plan, th).value

        out = sgd_inner_loop(theta, loss_fn, inner, n, k, first_loss=loss, counter=counter)
        for r in out.records:
            records.append(replace(r, wall_time=time.perf_counter() - t0))
            if r.loss < best[0]:
                best = (r.loss, plan, theta.with_values([r.theta[name] for name in theta.names]))
        theta, n = out.theta, out.n
        if out.converged:
            converged = True
            break
        est = evaluate(plan, theta)
        records.append(IterationRecord(k, len(out.records) + 1, n, theta.as_dict(), est.value,
                                       evaluations=counter.n, wall_time=time.perf_counter() - t0))
        if est.value < best[0]:
            best = (est.value, plan, theta)
    best_loss, best_plan, best_theta = best
    return FrameworkResult(variant, scatter_params(best_plan, best_theta), best_theta, records,
                           converged, counter.n, best_loss, warnings)


def evaluations_to_band(records: Sequence[IterationRecord], optimum: float, band: float = 0.1) -> int | None:
    """Cumulative evaluations at the first record within ``(1 + band) * optimum``."""
    for r in records:
        if r.loss <= (1.0 + band) * optimum:
            return r.evaluations
    return None


def write_learning_curve(records: Sequence[IterationRecord], path) -> None:
    names: list[str] = []
    for r in records:
        for name in r.theta:
            if name not in names:
                names.append(name)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["outer_step", "inner_step", "global_n", *(f"theta_{n}" for n in names),
                    "loss", "grad_norm", "eta", "evaluations"])
        for r in records:
            w.writerow([r.outer_step, r.inner_step, r.global_n,
                        *(_num(r.theta[n]) if n in r.theta else "" for n in names),
                        _num(r.loss), _num(r.grad_norm), _num(r.eta), r.evaluations])


def _num(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))
