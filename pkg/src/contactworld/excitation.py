"""Temporally correlated joystick excitation via an Ornstein-Uhlenbeck process.

The raw OU state evolves by Euler-Maruyama and is never modified by the
command post-processing; each step the emitted command is a post-processed
copy (minimum-norm rescue, then a per-component deadzone), and the command
drives a workspace-clipped position integrator.

Randomness comes from a numpy ``Generator`` over the PCG64 bit generator
seeded with a 64-bit integer; normals use ``Generator.standard_normal``
(ziggurat). That identity is echoed into every trajectory header so runs
are reproducible across platforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

RNG_IDENTITY = "numpy.random.Generator(PCG64(seed)), normals via standard_normal"


@dataclass(frozen=True)
class OUParams:
    theta: float
    mu: np.ndarray
    sigma: float
    dt: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).reshape(3))
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


@dataclass(frozen=True)
class OUState:
    x: np.ndarray
    step_index: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(3)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite OU state")
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class ExcitationConfig:
    """Command post-processing and integration parameters.

    ``horizon_bounds`` is the admissible episode-length range; the default
    matches the 300-600 step episode convention used elsewhere.
    """

    m_min: float = 0.3
    epsilon: float = 0.1
    v_scale: float = 0.25
    workspace_lo: np.ndarray = (-0.5, -0.5, 0.0)
    workspace_hi: np.ndarray = (0.5, 0.5, 0.6)
    horizon: int = 400
    horizon_bounds: tuple[int, int] = (300, 600)

    def __post_init__(self):
        object.__setattr__(self, "workspace_lo",
                           np.asarray(self.workspace_lo, dtype=float).reshape(3))
        object.__setattr__(self, "workspace_hi",
                           np.asarray(self.workspace_hi, dtype=float).reshape(3))
        if not self.m_min > 0:
            raise ValueError("m_min must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if np.any(self.workspace_lo > self.workspace_hi):
            raise ValueError("workspace must satisfy lo <= hi componentwise")
        lo, hi = self.horizon_bounds
        if not (1 <= lo <= hi):
            raise ValueError("bad horizon bounds")
        if not (lo <= self.horizon <= hi):
            raise ValueError(f"horizon {self.horizon} outside bounds [{lo}, {hi}]")


DEFAULT_OU = dict(theta=2.0, mu=(0.0, 0.0, 0.0), sigma=1.5, dt=0.02)


def step_ou(state: OUState, params: OUParams, noise) -> OUState:
    """One Euler-Maruyama step; noise is injected so the step is pure."""
    noise = np.asarray(noise, dtype=float).reshape(3)
    x = state.x + params.theta * (params.mu - state.x) * params.dt \
        + params.sigma * math.sqrt(params.dt) * noise
    return OUState(x=x, step_index=state.step_index + 1)


def enforce_min_norm(x, m_min: float, fallback_dir) -> np.ndarray:
    """Rescale x so its norm is at least m_min, preserving direction.

    A zero vector has no direction; it becomes fallback_dir * m_min.
    """
    x = np.asarray(x, dtype=float)
    norm = float(np.linalg.norm(x))
    if norm >= m_min:
        return x.copy()
    if norm == 0.0:
        return np.asarray(fallback_dir, dtype=float) * m_min
    return x * (m_min / norm)


def apply_deadzone(x, epsilon: float) -> np.ndarray:
    """Zero components with |x_i| < epsilon (strict; |x_i| == epsilon is kept)."""
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < epsilon, 0.0, x)


def integrate_position(p, x, cfg: ExcitationConfig, dt: float) -> np.ndarray:
    """Kinematic update p + v_scale * x * dt, clipped to the workspace box."""
    p = np.asarray(p, dtype=float)
    return np.clip(p + cfg.v_scale * np.asarray(x, dtype=float) * dt,
                   cfg.workspace_lo, cfg.workspace_hi)


def _random_unit(rng) -> np.ndarray:
    while True:
        v = rng.standard_normal(3)
        norm = float(np.linalg.norm(v))
        if norm > 0.0:
            return v / norm


def generate_trajectory(params: OUParams, cfg: ExcitationConfig,
                        p0) -> tuple[np.ndarray, np.ndarray]:
    """Run the full excitation pipeline for ``cfg.horizon`` steps.

    Each step: OU update, minimum-norm rescue, deadzone, clipped position
    integration (in that order). Returns (commands, positions), each of
    shape (horizon, 3). Deterministic for a fixed seed; the zero-norm
    fallback direction is drawn from the same stream.
    """
    p = np.asarray(p0, dtype=float).reshape(3)
    if np.any(p < cfg.workspace_lo) or np.any(p > cfg.workspace_hi):
        raise ValueError("p0 outside workspace")
    rng = np.random.Generator(np.random.PCG64(params.seed))
    state = OUState(x=np.zeros(3))
    commands = np.empty((cfg.horizon, 3))
    positions = np.empty((cfg.horizon, 3))
    for k in range(cfg.horizon):
        state = step_ou(state, params, rng.standard_normal(3))
        cmd = state.x
        if float(np.linalg.norm(cmd)) == 0.0:
            cmd = enforce_min_norm(cmd, cfg.m_min, _random_unit(rng))
        else:
            cmd = enforce_min_norm(cmd, cfg.m_min, None)
        cmd = apply_deadzone(cmd, cfg.epsilon)
        p = integrate_position(p, cmd, cfg, params.dt)
        commands[k] = cmd
        positions[k] = p
    return commands, positions


def trajectory_header(params: OUParams, cfg: ExcitationConfig, p0) -> dict:
    return {
        "rng": RNG_IDENTITY,
        "ou": {"theta": params.theta, "mu": list(params.mu),
               "sigma": params.sigma, "dt": params.dt, "seed": params.seed},
        "excitation": {"m_min": cfg.m_min, "epsilon": cfg.epsilon,
                       "v_scale": cfg.v_scale,
                       "workspace_lo": list(cfg.workspace_lo),
                       "workspace_hi": list(cfg.workspace_hi),
                       "horizon": cfg.horizon},
        "p0": [float(v) for v in np.asarray(p0, dtype=float)],
    }


def write_trajectory_jsonl(path, params: OUParams, cfg: ExcitationConfig,
                           p0, commands, positions) -> None:
    """JSON-lines export: one header line with the full config echo, then
    one {k, x, p} record per step."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": trajectory_header(params, cfg, p0)},
                            sort_keys=True) + "\n")
        for k in range(len(commands)):
            fh.write(json.dumps({"k": k,
                                 "x": [float(v) for v in commands[k]],
                                 "p": [float(v) for v in positions[k]]}) + "\n")
