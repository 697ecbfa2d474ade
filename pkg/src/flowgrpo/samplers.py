"""Denoising-time integrators: Euler ODE steps, the marginal-preserving
Euler-Maruyama step, windowed mixed rollouts and transition densities.

Time runs t: 0 -> 1 (noise -> data). Step ``k`` moves from ``k/T`` to
``(k+1)/T``. Stochastic steps may only occupy indices ``1 .. T-2``: the
noise scale diverges at t = 0 and the last step is kept deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ParamSet, guided_forward

TRAJ_FORMAT = "flowgrpo-trajectory/1"


@dataclass(frozen=True)
class TimeGrid:
    T: int

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @property
    def dt(self) -> float:
        return 1.0 / self.T

    @property
    def knots(self) -> np.ndarray:
        return np.arange(self.T + 1) / self.T

    def t(self, k: int) -> float:
        return k / self.T


@dataclass(frozen=True)
class WindowSpec:
    """``ws`` consecutive SDE steps starting at step index ``s_min``."""

    s_min: int
    ws: int

    def steps(self) -> range:
        return range(self.s_min, self.s_min + self.ws)

    def validate(self, grid: TimeGrid) -> None:
        if self.ws < 1:
            raise ValueError("window size must be >= 1")
        if self.s_min < 1:
            raise ValueError("s_min must be >= 1 (no SDE step at t = 0)")
        if self.s_min + self.ws - 1 > grid.T - 2:
            raise ValueError(
                f"window [{self.s_min}, {self.s_min + self.ws - 1}] must end by step {grid.T - 2} for T={grid.T}"
            )

    @classmethod
    def full(cls, grid: TimeGrid) -> "WindowSpec":
        return cls(1, grid.T - 2)


def sigma(t: float, a: float) -> float:
    """Exploration scale a * sqrt((1 - t) / t), defined on the open interval."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"sigma is singular outside (0, 1), got t={t}")
    if a < 0:
        raise ValueError("noise level must be >= 0")
    return a * math.sqrt((1.0 - t) / t)


def ode_step(x, v, dt: float):
    return x + v * dt


def sde_mean(x, v, t: float, dt: float, a: float):
    """Drift-corrected mean of the stochastic step.

    sigma_t^2 / (2 (1 - t)) reduces to a^2 / (2 t). Works on arrays and on
    Tensors with the same operation order, so recomputing a stored mean under
    the behavior parameters is bit-exact.
    """
    if t <= 0.0:
        raise ValueError("sde_mean needs t > 0")
    coef = a * a / (2.0 * t)
    return x + (v + coef * (t * v - x)) * dt


def sde_step(x, v, t: float, dt: float, a: float, eps):
    return sde_mean(x, v, t, dt, a) + (sigma(t, a) * math.sqrt(dt)) * eps


@dataclass
class StepRecord:
    k: int
    t: float
    dt: float
    kind: str  # "ode" | "sde"
    x: np.ndarray
    x_next: np.ndarray
    mean: np.ndarray | None = None
    sigma: float | None = None
    eps: np.ndarray | None = None
    a: float = 0.0

    @property
    def std(self) -> float:
        return self.sigma * math.sqrt(self.dt)


@dataclass
class Trajectory:
    """A batch of N denoising paths sharing grid, window and noise level.

    ``states[k]`` holds x at knot k for every row; SDE quantities are stored
    per SDE step in window order.
    """

    grid: TimeGrid
    window: WindowSpec | None
    a: float
    cond: np.ndarray
    states: np.ndarray
    sde_steps: tuple[int, ...]
    means: np.ndarray
    noises: np.ndarray
    sigmas: np.ndarray
    guidance_scale: float = 1.0
    version: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def kind(self, k: int) -> str:
        return "sde" if k in self.sde_steps else "ode"

    def record(self, k: int) -> StepRecord:
        dt = self.grid.dt
        rec = StepRecord(k, self.grid.t(k), dt, self.kind(k), self.states[k], self.states[k + 1], a=self.a)
        if rec.kind == "sde":
            j = self.sde_steps.index(k)
            rec.mean, rec.sigma, rec.eps = self.means[j], float(self.sigmas[j]), self.noises[j]
        return rec

    def records(self) -> list[StepRecord]:
        return [self.record(k) for k in range(self.grid.T)]

    def sde_records(self) -> list[StepRecord]:
        return [self.record(k) for k in self.sde_steps]

    def select(self, rows) -> "Trajectory":
        rows = np.asarray(rows)
        return Trajectory(
            self.grid, self.window, self.a, self.cond[rows], self.states[:, rows], self.sde_steps,
            self.means[:, rows], self.noises[:, rows], self.sigmas, self.guidance_scale, self.version, dict(self.meta),
        )

    def to_dict(self) -> dict:
        return {
            "format": TRAJ_FORMAT,
            "T": self.grid.T,
            "window": None if self.window is None else [self.window.s_min, self.window.ws],
            "a": self.a,
            "guidance_scale": self.guidance_scale,
            "version": self.version,
            "cond": self.cond.tolist(),
            "states": self.states.tolist(),
            "sde_steps": list(self.sde_steps),
            "means": self.means.tolist(),
            "noises": self.noises.tolist(),
            "sigmas": self.sigmas.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        if d.get("format") != TRAJ_FORMAT:
            raise ValueError(f"unsupported trajectory format {d.get('format')!r}")
        n, dim = len(d["cond"]), len(d["cond"][0])
        shape = (len(d["sde_steps"]), n, dim)
        return cls(
            TimeGrid(d["T"]),
            None if d["window"] is None else WindowSpec(*d["window"]),
            float(d["a"]),
            np.array(d["cond"], dtype=np.float64),
            np.array(d["states"], dtype=np.float64),
            tuple(d["sde_steps"]),
            np.array(d["means"], dtype=np.float64).reshape(shape),
            np.array(d["noises"], dtype=np.float64).reshape(shape),
            np.array(d["sigmas"], dtype=np.float64),
            float(d["guidance_scale"]),
            int(d["version"]),
            d.get("meta", {}),
        )


VelocityFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


def model_velocity(params: ParamSet, guidance_scale: float = 1.0) -> VelocityFn:
    return lambda x, c, t: guided_forward(params, x, c, t, guidance_scale).data


def row_rngs(seed, n: int) -> list[np.random.Generator]:
    """One independent stream per row; an int seed is spawned into n children."""
    if isinstance(seed, (int, np.integer)) or seed is None:
        children = np.random.SeedSequence(seed).spawn(n)
        return [np.random.default_rng(s) for s in children]
    seeds = list(seed)
    if len(seeds) != n:
        raise ValueError(f"expected {n} row seeds, got {len(seeds)}")
    return [s if isinstance(s, np.random.Generator) else np.random.default_rng(s) for s in seeds]


def rollout(
    params: ParamSet | None,
    c,
    grid: TimeGrid,
    window: WindowSpec | None = None,
    a: float = 0.0,
    guidance_scale: float = 1.0,
    seed=None,
    x0=None,
    velocity: VelocityFn | None = None,
) -> Trajectory:
    """Integrate from x ~ N(0, I) at t = 0 to t = 1.

    ``c`` is one condition (d,) or a batch (N, d). Each row draws its start
    point and then its SDE noises, in step order, from its own stream, so a
    row's path never depends on which other rows share the call. ``velocity``
    overrides the network (used with analytic fields).
    """
    c = np.asarray(c, dtype=np.float64)
    cond = np.atleast_2d(c)
    n, d = cond.shape
    sde_steps: tuple[int, ...] = ()
    if window is not None:
        window.validate(grid)
        sde_steps = tuple(window.steps())
    if velocity is None:
        if params is None:
            raise ValueError("need params or a velocity function")
        velocity = model_velocity(params, guidance_scale)

    draws = np.stack([r.standard_normal((1 + len(sde_steps), d)) for r in row_rngs(seed, n)], axis=1)
    x = draws[0] if x0 is None else np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    states = np.empty((grid.T + 1, n, d))
    states[0] = x
    means = np.empty((len(sde_steps), n, d))
    noises = draws[1:].copy()
    sigmas = np.empty(len(sde_steps))
    dt = grid.dt
    j = 0
    for k in range(grid.T):
        t = grid.t(k)
        v = velocity(x, cond, t)
        if j < len(sde_steps) and sde_steps[j] == k:
            means[j] = sde_mean(x, v, t, dt, a)
            sigmas[j] = sigma(t, a)
            x = means[j] + (sigmas[j] * math.sqrt(dt)) * noises[j]
            j += 1
        else:
            x = ode_step(x, v, dt)
        states[k + 1] = x
    version = params.version if params is not None else -1
    return Trajectory(grid, window, a, cond, states, sde_steps, means, noises, sigmas, guidance_scale, version)


def replay(traj: Trajectory, velocity: VelocityFn) -> np.ndarray:
    """Recompute every state from the stored start point and noises."""
    x = traj.states[0].copy()
    out = [x]
    dt = traj.grid.dt
    for k in range(traj.grid.T):
        t = traj.grid.t(k)
        v = velocity(x, traj.cond, t)
        if k in traj.sde_steps:
            j = traj.sde_steps.index(k)
            x = sde_mean(x, v, t, dt, traj.a) + (sigma(t, traj.a) * math.sqrt(dt)) * traj.noises[j]
        else:
            x = ode_step(x, v, dt)
        out.append(x)
    return np.stack(out)


def policy_mean(params: ParamSet, x, c, t, dt: float, a: float, guidance_scale: float = 1.0) -> Tensor:
    """Differentiable mean of the stochastic step under ``params``.

    ``t`` may be a scalar or one time per row; rows are independent.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    v = guided_forward(params, x, c, t_arr, guidance_scale)
    if t_arr.ndim == 0:
        return sde_mean(x, v, float(t_arr), dt, a)
    if np.any(t_arr <= 0.0):
        raise ValueError("sde_mean needs t > 0")
    tt = t_arr[:, None]
    coef = a * a / (2.0 * tt)
    return x + (v + coef * (tt * v - x)) * dt


def transition_logpdf(params: ParamSet, record: StepRecord, c, guidance_scale: float = 1.0) -> Tensor:
    """log p_params(x_next | x, c) for a stored SDE step (one value per row)."""
    if record.kind != "sde":
        raise ValueError(f"step {record.k} is deterministic; it has no transition density")
    mean = policy_mean(params, record.x, c, record.t, record.dt, record.a, guidance_scale)
    return ad.gaussian_log_density(record.x_next, mean, record.std)


def stored_logpdf(record: StepRecord) -> np.ndarray:
    """Behavior-policy log density from the stored mean (no recomputation)."""
    return ad.gaussian_log_density(Tensor(record.x_next), Tensor(record.mean), record.std).data


def terminal_samples(traj: Trajectory) -> np.ndarray:
    return traj.final


def stack_trajectories(trajs: Sequence[Trajectory]) -> Trajectory:
    """Concatenate rows of trajectories that share grid, window and a."""
    first = trajs[0]
    for tr in trajs[1:]:
        if tr.grid != first.grid or tr.sde_steps != first.sde_steps or tr.a != first.a:
            raise ValueError("cannot stack trajectories with different grids or windows")
    return Trajectory(
        first.grid, first.window, first.a,
        np.concatenate([t.cond for t in trajs]),
        np.concatenate([t.states for t in trajs], axis=1),
        first.sde_steps,
        np.concatenate([t.means for t in trajs], axis=1),
        np.concatenate([t.noises for t in trajs], axis=1),
        first.sigmas, first.guidance_scale, first.version, dict(first.meta),
    )
