"""Analytic longitudinal controllers: the IDM car-following law and the
PI-with-saturation velocity controller.

The IDM governs every human-driven vehicle in the simulator and doubles as
the knowledge-driven base of the virtual dynamics model. The PI controller
is the physics-based initial policy that the learned residual refines.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

# Hard deceleration floor for executed HDV accelerations, m/s^2. Keeps the
# acceleration noise from commanding unbounded braking.
EMERGENCY_DECEL = 3.0


@dataclass
class IdmParams:
    """IDM parameters, defaults per typical highway driving.

    See Treiber, Hennecke and Helbing, "Congested traffic states in empirical
    observations and microscopic simulations" (2000).
    """

    v0: float = 30.0        # desired velocity, m/s
    T0: float = 1.0         # safe time headway, s
    a_max: float = 1.0      # maximum acceleration, m/s^2
    b: float = 1.5          # comfortable deceleration, m/s^2
    delta_exp: float = 4.0  # acceleration exponent
    s0: float = 2.0         # minimum desired gap, m
    noise_std: float = 0.2  # std of Gaussian acceleration noise, m/s^2

    def validate(self) -> None:
        for name in ("v0", "T0", "a_max", "b", "s0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IdmParams.{name} must be positive")
        if self.delta_exp < 1:
            raise ValueError("IdmParams.delta_exp must be >= 1")
        if self.noise_std < 0:
            raise ValueError("IdmParams.noise_std must be >= 0")


def idm_accel(v, v_lead, gap, params: IdmParams):
    """Deterministic IDM acceleration. Accepts scalars or numpy arrays.

    Requires gap > 0; a non-positive gap means the vehicles have collided and
    the episode should already have terminated.
    """
    gap_arr = np.asarray(gap, dtype=float)
    if np.any(gap_arr <= 0):
        raise ValueError("idm_accel requires gap > 0 (collision upstream?)")
    v = np.asarray(v, dtype=float)
    dv = v - np.asarray(v_lead, dtype=float)
    s_star = params.s0 + np.maximum(
        0.0, v * params.T0 + v * dv / (2.0 * np.sqrt(params.a_max * params.b))
    )
    accel = params.a_max * (
        1.0 - (v / params.v0) ** params.delta_exp - (s_star / gap_arr) ** 2
    )
    if accel.ndim == 0:
        return float(accel)
    return accel


def idm_accel_noisy(v, v_lead, gap, params: IdmParams, rng: np.random.Generator):
    """IDM acceleration with additive N(0, noise_std^2) noise, clipped to the
    executable range [-EMERGENCY_DECEL, a_max]."""
    accel = idm_accel(v, v_lead, gap, params)
    if params.noise_std > 0:
        accel = accel + params.noise_std * rng.standard_normal(np.shape(accel))
    return np.clip(accel, -EMERGENCY_DECEL, params.a_max)


def idm_equilibrium_gap(v: float, params: IdmParams) -> float:
    """Gap at which a vehicle following a same-speed leader holds speed v."""
    if not 0 <= v < params.v0:
        raise ValueError("equilibrium speed must lie in [0, v0)")
    s_star = params.s0 + v * params.T0
    return s_star / np.sqrt(1.0 - (v / params.v0) ** params.delta_exp)


def idm_equilibrium_speed(gap: float, params: IdmParams) -> float:
    """Inverse of idm_equilibrium_gap, solved by bisection."""
    if gap <= params.s0:
        return 0.0
    lo, hi = 0.0, params.v0 * (1.0 - 1e-12)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if idm_equilibrium_gap(mid, params) < gap:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class PiParams:
    """PI-with-saturation parameters, after the field-tested controller of
    Stern et al., "Dissipation of stop-and-go waves via control of autonomous
    vehicles" (2018)."""

    v_c: float = 1.0     # maximum catch-up velocity, m/s
    s_l: float = 7.0     # lower gap threshold, m
    s_u: float = 30.0    # upper gap threshold, m
    dx_s: float = 4.0    # safety distance, m
    window: int = 100    # speed-averaging window, steps

    def validate(self) -> None:
        if not self.s_l < self.s_u:
            raise ValueError("PiParams requires s_l < s_u")
        for name in ("v_c", "s_l", "dx_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"PiParams.{name} must be positive")
        if self.window < 1:
            raise ValueError("PiParams.window must be >= 1")


@dataclass
class PiState:
    """Mutable controller state: the ego-speed history and the running
    command velocity."""

    window: int
    speed_history: deque = field(default_factory=deque)
    v_cmd: float = 0.0

    @classmethod
    def fresh(cls, window: int, v_ego: float) -> "PiState":
        state = cls(window=window, v_cmd=max(0.0, v_ego))
        state.speed_history = deque([max(0.0, v_ego)], maxlen=window)
        return state


def pi_target_velocity(v_bar: float, gap: float, params: PiParams) -> float:
    """Target velocity: average speed plus a gap-proportional catch-up term
    saturated between the lower and upper gap thresholds."""
    frac = (gap - params.s_l) / (params.s_u - params.s_l)
    return v_bar + params.v_c * min(max(frac, 0.0), 1.0)


def pi_update_command(
    state: PiState, gap: float, v_lead: float, v_ego: float, params: PiParams
) -> float:
    """Advance the PI controller one step and return the new command velocity.

    The ego speed is pushed into the averaging window first; a partially
    filled window averages whatever samples exist. The weight alpha defers
    to the leader speed near the safety distance, and beta = 1 - alpha/2
    speeds up the response in critical-gap situations.
    """
    if state.speed_history.maxlen != params.window:
        state.speed_history = deque(state.speed_history, maxlen=params.window)
    state.speed_history.append(v_ego)
    v_bar = sum(state.speed_history) / len(state.speed_history)
    v_star = pi_target_velocity(v_bar, gap, params)
    alpha = min(max((gap - params.dx_s) / 2.0, 0.0), 1.0)
    beta = 1.0 - alpha / 2.0
    v_cmd = beta * (alpha * v_star + (1.0 - alpha) * v_lead) + (1.0 - beta) * state.v_cmd
    state.v_cmd = max(0.0, v_cmd)
    return state.v_cmd


def command_to_accel(
    v_cmd: float, v: float, dt: float, bounds: tuple[float, float] = (-1.0, 1.0)
) -> float:
    """Acceleration that tracks a command velocity in one step, clipped to the
    actuator bounds."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return float(np.clip((v_cmd - v) / dt, bounds[0], bounds[1]))
