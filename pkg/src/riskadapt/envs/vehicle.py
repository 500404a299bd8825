"""Point-mass vehicle on a straight road with objects that may step into its lane."""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, replace

import numpy as np

from ..core import object_key

OBJECT_CLASSES = ("SchoolBus", "Teenager", "Adult", "Child")
CLASS_KEYS = {"SchoolBus": "school_bus", "Teenager": "teenager", "Adult": "adult", "Child": "child"}
ENTRY_PROBABILITY = {"SchoolBus": 0.0, "Teenager": 0.5, "Adult": 0.0, "Child": 0.5}


@dataclass(frozen=True)
class VehicleConfig:
    mass: float = 1500.0
    drag: float = 200.0
    dt: float = 0.1
    force_bound: float = 5000.0
    initial_position: float = 0.0
    initial_velocity: float = 0.0
    target: float = 60.0

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.mass <= 0 or self.drag < 0 or self.force_bound <= 0:
            raise ValueError(f"invalid vehicle config {self}")


@dataclass(frozen=True)
class LatentEntry:
    enters: bool
    entry_time: int


@dataclass(frozen=True)
class SceneObject:
    id: str
    cls: str
    station: float
    lateral: float = 3.0
    hidden: bool = False
    entry_window: tuple[int, int] | None = None
    crossing_steps: int = 25
    latent_entry: LatentEntry | None = None

    def __post_init__(self) -> None:
        if self.cls not in OBJECT_CLASSES:
            raise ValueError(f"unknown object class {self.cls!r}")

    @property
    def key(self) -> str:
        return CLASS_KEYS[self.cls]

    def on_path(self, t: int) -> bool:
        e = self.latent_entry
        return bool(e and e.enters and e.entry_time <= t < e.entry_time + self.crossing_steps)


@dataclass(frozen=True)
class VehicleWorld:
    position: float
    velocity: float
    objects: tuple[SceneObject, ...]
    config: VehicleConfig
    t: int = 0

    @property
    def state(self) -> np.ndarray:
        return np.array([self.position, self.velocity])


def step_vehicle(state, u, m: float, drag: float, dt: float) -> np.ndarray:
    """``x(t+1) = x + dt*[v, -F_r/m] + dt*[0, 1/m]*u`` with the velocity floored at 0."""
    x1, x2 = (float(v) for v in np.asarray(state, dtype=float)[:2])
    u = float(np.asarray(u, dtype=float).reshape(-1)[0])
    return np.array([x1 + dt * x2, max(x2 + dt * (u - drag) / m, 0.0)])


def _obs_keys(objects) -> list[str]:
    keys = {"any", *CLASS_KEYS.values()}
    keys.update(o.id for o in objects)
    return sorted(keys)


class VehicleEnv:
    kind = "vehicle"
    n = 2
    m = 1

    def __init__(self, config: VehicleConfig, objects=(), tolerance: float = 1.0):
        self.config = config
        self.objects = tuple(objects)
        self.tolerance = tolerance
        self.lower = np.array([-config.force_bound])
        self.upper = np.array([config.force_bound])
        self._keys = _obs_keys(self.objects)

    def reset(self) -> VehicleWorld:
        c = self.config
        return VehicleWorld(c.initial_position, c.initial_velocity, self.objects, c)

    def state(self, world: VehicleWorld) -> np.ndarray:
        return world.state

    def _observe(self, position: float, t: int, ahead_of: float) -> dict[str, float]:
        obs = {f"distance/{k}": math.inf for k in self._keys}
        obs.update({f"gap/{k}": math.inf for k in self._keys})
        for o in self.objects:
            if not o.on_path(t):
                continue
            dist = abs(position - o.station)
            gap = o.station - position if o.station >= ahead_of else math.inf
            for k in (o.id, o.key, "any"):
                obs[f"distance/{k}"] = min(obs[f"distance/{k}"], dist)
                obs[f"gap/{k}"] = min(obs[f"gap/{k}"], gap)
        return obs

    def observe(self, world: VehicleWorld) -> dict[str, float]:
        obs = self._observe(world.position, world.t, world.position)
        obs["contact_force"] = 0.0
        return obs

    def step(self, world: VehicleWorld, u) -> tuple[VehicleWorld, dict[str, float]]:
        u = np.clip(np.asarray(u, dtype=float).reshape(-1), self.lower, self.upper)
        c = self.config
        x = step_vehicle(world.state, u, c.mass, c.drag, c.dt)
        new = replace(world, position=float(x[0]), velocity=float(x[1]), t=world.t + 1)
        obs = self._observe(new.position, new.t, world.position)
        obs["contact_force"] = 0.0
        return new, obs

    def predict(self, world: VehicleWorld, controls: np.ndarray):
        """Batched rollout; objects on the path now are assumed to stay put."""
        controls = np.asarray(controls, dtype=float)
        B, tau, _ = controls.shape
        c = self.config
        # velocity floor as a reflected cumulative sum: v_k = W_k - min(0, min_{j<=k} W_j)
        w = world.velocity + np.cumsum(c.dt * (controls[:, :, 0] - c.drag) / c.mass, axis=1)
        v = w - np.minimum(np.minimum.accumulate(w, axis=1), 0.0)
        v_prev = np.concatenate([np.full((B, 1), world.velocity), v[:, :-1]], axis=1)
        states = np.empty((B, tau, 2))
        states[:, :, 0] = world.position + c.dt * np.cumsum(v_prev, axis=1)
        states[:, :, 1] = v
        present = [o for o in self.objects if o.on_path(world.t) and o.station >= world.position]
        return states, _PredictedGaps(states, present, self._keys)

    def metric(self, trajectory, plan=None) -> float:
        """Squared terminal position error."""
        return float((self.config.target - trajectory.states[-1][0]) ** 2)

    def summarize(self, trajectory) -> list[str]:
        xs = trajectory.states
        return [
            f"vehicle position: final {xs[-1][0]:.4g} m (target {self.config.target:.4g} m)",
            f"vehicle speed: final {xs[-1][1]:.4g} m/s, peak {max(s[1] for s in xs):.4g} m/s",
        ]


class _PredictedGaps(Mapping):
    """Observables of a batched rollout, computed on first access."""

    def __init__(self, states: np.ndarray, present: list[SceneObject], keys: list[str]):
        self._states, self._present = states, present
        self._names = ["contact_force", *(f"gap/{k}" for k in keys)]
        self._cache: dict[str, np.ndarray] = {}

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self._cache:
            if name == "contact_force":
                value = np.zeros(self._states.shape[:2])
            elif name in self._names:
                key = name[len("gap/"):]
                rel = [o.station for o in self._present if key in (o.id, o.key, "any")]
                if rel:
                    value = min(rel) - self._states[:, :, 0]
                else:
                    value = np.full(self._states.shape[:2], math.inf)
            else:
                raise KeyError(name)
            self._cache[name] = value
        return self._cache[name]

    def __iter__(self):
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)


def min_distance(trajectory, obj: str) -> float:
    """Smallest |x1 - station| while the object occupies the path; inf if it never does."""
    key = f"distance/{object_key(obj)}"
    values = [o.get(key, math.inf) for o in trajectory.observables]
    return float(min(values)) if values else math.inf


def time_to_travel(trajectory, target: float, tol: float, episode_steps: int | None = None) -> int:
    """First step at which the vehicle is within ``tol`` of ``target``."""
    for t, x in enumerate(trajectory.states):
        if abs(x[0] - target) <= tol:
            return t
    return episode_steps if episode_steps is not None else len(trajectory.states) - 1
