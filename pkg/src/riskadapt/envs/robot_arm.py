"""Velocity-commanded arm pushing a box along one axis.

The arm follows ``x(t+1) = [x1 + dt*u, u]``. The box slides under kinetic
friction ``F_s = mu*m*g`` and, while the arm face is in contact, moves with the
arm; the contact force needed for that is ``F = m*(u - v_box)/dt + F_s``
(from ``F - F_s = m*a``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

# penetration below this is treated as touching, not pushing
CONTACT_EPS = 1e-9


@dataclass(frozen=True)
class RobotArmConfig:
    dt: float = 0.1
    arm_position: float = 0.0
    box_position: float = 0.5
    box_mass: float = 1.0
    friction: float = 0.2
    gravity: float = 9.81
    velocity_bound: float = 1.0
    target_velocity: float = 0.5

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.box_mass <= 0 or self.friction < 0 or self.velocity_bound <= 0:
            raise ValueError(f"invalid robot arm config {self}")

    @property
    def friction_force(self) -> float:
        return self.friction * self.box_mass * self.gravity


@dataclass(frozen=True)
class RobotArmWorld:
    arm_position: float
    arm_velocity: float
    box_position: float
    box_velocity: float
    config: RobotArmConfig
    t: int = 0

    @property
    def state(self) -> np.ndarray:
        return np.array([self.arm_position, self.arm_velocity])


def step_robot_arm(state, u, dt: float) -> np.ndarray:
    x1 = np.asarray(state, dtype=float)[0]
    u = float(np.asarray(u, dtype=float).reshape(-1)[0])
    return np.array([x1 + dt * u, u])


def _contact_kernel(x1, p, vb, u, cfg: RobotArmConfig):
    """Shared by the realized step and the batched predictor (identical arithmetic)."""
    dt = cfg.dt
    x1n = x1 + dt * u
    v_free = np.maximum(vb - cfg.friction * cfg.gravity * dt, 0.0)
    p_free = p + dt * v_free
    contact = (u > 0.0) & (x1n - p_free > CONTACT_EPS)
    force = np.where(contact, cfg.box_mass * (u - vb) / dt + cfg.friction_force, 0.0)
    vbn = np.where(contact, u, v_free)
    pn = np.where(contact, x1n, p_free)
    return x1n, pn, vbn, force


def step_box(world: RobotArmWorld, u) -> tuple[RobotArmWorld, float]:
    """Advance arm and box one step; returns the new world and the contact force."""
    u = float(np.asarray(u, dtype=float).reshape(-1)[0])
    x1n, pn, vbn, force = _contact_kernel(
        np.float64(world.arm_position), np.float64(world.box_position),
        np.float64(world.box_velocity), np.float64(u), world.config)
    new = replace(world, arm_position=float(x1n), arm_velocity=u, box_position=float(pn),
                  box_velocity=float(vbn), t=world.t + 1)
    return new, float(force)


class RobotArmEnv:
    """Environment facade used by the controller and the adaptation loop."""

    kind = "robot_arm"
    n = 2
    m = 1

    def __init__(self, config: RobotArmConfig | None = None):
        self.config = config or RobotArmConfig()
        b = self.config.velocity_bound
        self.lower = np.array([-b])
        self.upper = np.array([b])

    def reset(self) -> RobotArmWorld:
        c = self.config
        return RobotArmWorld(c.arm_position, 0.0, c.box_position, 0.0, c)

    def state(self, world: RobotArmWorld) -> np.ndarray:
        return world.state

    def observe(self, world: RobotArmWorld, force: float = 0.0) -> dict[str, float]:
        gap = world.box_position - world.arm_position
        return {
            "contact_force": force,
            "box_position": world.box_position,
            "box_velocity": world.box_velocity,
            "distance/box": gap,
            "gap/box": gap,
            "gap/any": gap,
        }

    def step(self, world: RobotArmWorld, u) -> tuple[RobotArmWorld, dict[str, float]]:
        u = np.clip(np.asarray(u, dtype=float).reshape(-1), self.lower, self.upper)
        new, force = step_box(world, u)
        return new, self.observe(new, force)

    def predict(self, world: RobotArmWorld, controls: np.ndarray):
        """Roll out a batch of control sequences ``(B, tau, 1)``.

        Returns states ``(B, tau, 2)`` after each control and observables as
        arrays of shape ``(B, tau)``.
        """
        controls = np.asarray(controls, dtype=float)
        B, tau, _ = controls.shape
        cfg = self.config
        x1 = np.full(B, world.arm_position)
        p = np.full(B, world.box_position)
        vb = np.full(B, world.box_velocity)
        states = np.empty((B, tau, 2))
        force = np.empty((B, tau))
        gap = np.empty((B, tau))
        for k in range(tau):
            u = controls[:, k, 0]
            x1, p, vb, f = _contact_kernel(x1, p, vb, u, cfg)
            states[:, k, 0] = x1
            states[:, k, 1] = u
            force[:, k] = f
            gap[:, k] = p - x1
        return states, {"contact_force": force, "gap/box": gap, "gap/any": gap}

    def metric(self, trajectory, plan=None) -> float:
        """Sum of squared box-velocity errors over the final executed subtask."""
        if not trajectory.boundaries:
            return 0.0
        last = trajectory.boundaries[-1]
        v_star = self.config.target_velocity
        return float(sum((v_star - trajectory.observables[t]["box_velocity"]) ** 2
                         for t in range(last.start, last.end)))

    def summarize(self, trajectory) -> list[str]:
        vb = [o["box_velocity"] for o in trajectory.observables]
        forces = [o["contact_force"] for o in trajectory.observables]
        return [
            f"box velocity: final {_fmt(vb[-1])} m/s, peak {_fmt(max(vb))} m/s "
            f"(target {_fmt(self.config.target_velocity)} m/s)",
            f"box position: start {_fmt(trajectory.observables[0]['box_position'])} m, "
            f"final {_fmt(trajectory.observables[-1]['box_position'])} m",
            f"contact force: peak {_fmt(max(forces))} N",
        ]


def _fmt(x: float) -> str:
    return f"{x:.4g}"
