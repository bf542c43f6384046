"""Knowledge-informed one-step model of the CAV's local neighborhood.

The analytic base advances the ego with the commanded acceleration and its
observed leader/follower with the deterministic IDM, assuming the unobserved
second ring mirrors the observed local conditions (locally homogeneous
traffic). A residual network learns whatever the base misses, in normalized
units, and a scalar model-error estimate gates how far virtual rollouts may
run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .controllers import EMERGENCY_DECEL, IdmParams, idm_accel
from .env import (
    ACTION_LIMIT,
    COLLISION_PENALTY,
    GAP_SCALE,
    OBS_DIM,
    OBS_GAP_CAP,
    RewardConfig,
)
from .nn import Mlp, MomentumSgd

STATE_REWARD_DIM = OBS_DIM + 1  # five observation dims plus the reward
MIN_CONTROL_GAP = 0.1
SCALE_FLOOR = 1e-3  # residual target scales never collapse below this


@dataclass
class RolloutConfig:
    k_max: int = 500
    kappa: float = 2.0

    def validate(self) -> None:
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")


def rollout_length(eps_m: float, config: RolloutConfig) -> int:
    """Adaptive virtual-rollout horizon: shrink with model error, capped at
    k_max. The epsilon nudge keeps exact decimal ratios (e.g. 2/0.1) on the
    mathematically intended side of the floor."""
    if eps_m < 0:
        raise ValueError("eps_m must be >= 0")
    if eps_m == 0.0:
        return config.k_max
    return min(config.k_max, int(math.floor(config.kappa / eps_m + 1e-9)))


def decode_observation(obs: np.ndarray, v_des: float):
    """Observation block -> physical (v_ego, v_lead, v_fol, gap_lead, gap_fol)."""
    obs = np.atleast_2d(obs)
    v_e = obs[:, 0] * v_des
    v_l = np.maximum(0.0, v_e + obs[:, 1] * v_des)
    v_f = np.maximum(0.0, v_e + obs[:, 2] * v_des)
    g_l = obs[:, 3] * GAP_SCALE
    g_f = obs[:, 4] * GAP_SCALE
    return v_e, v_l, v_f, g_l, g_f


def encode_observation(v_e, v_l, v_f, g_l, g_f, v_des: float) -> np.ndarray:
    return np.stack(
        [
            v_e / v_des,
            (v_l - v_e) / v_des,
            (v_f - v_e) / v_des,
            np.minimum(g_l, OBS_GAP_CAP) / GAP_SCALE,
            np.minimum(g_f, OBS_GAP_CAP) / GAP_SCALE,
        ],
        axis=1,
    )


class _BatchPi:
    """Vectorized PI-with-saturation state for a batch of virtual branches.

    Each branch's speed-averaging window starts from the decoded ego speed of
    its start state (the ring-buffer history is not observable)."""

    def __init__(self, start_obs: np.ndarray, params, v_des: float):
        self.params = params
        m = len(start_obs)
        v_e = start_obs[:, 0] * v_des
        self.window = np.zeros((m, params.window))
        self.window[:, 0] = v_e
        self.count = np.ones(m, dtype=int)
        self.head = np.ones(m, dtype=int)
        self.v_cmd = np.maximum(0.0, v_e)
        self.v_des = v_des

    def accel(self, obs: np.ndarray, idx: np.ndarray, dt: float) -> np.ndarray:
        p = self.params
        v_e = obs[:, 0] * self.v_des
        v_l = np.maximum(0.0, v_e + obs[:, 1] * self.v_des)
        gap = obs[:, 3] * GAP_SCALE
        self.window[idx, self.head[idx] % p.window] = v_e
        self.head[idx] += 1
        self.count[idx] = np.minimum(self.count[idx] + 1, p.window)
        sums = self.window[idx].sum(axis=1)
        v_bar = sums / self.count[idx]
        frac = np.clip((gap - p.s_l) / (p.s_u - p.s_l), 0.0, 1.0)
        v_star = v_bar + p.v_c * frac
        alpha = np.clip((gap - p.dx_s) / 2.0, 0.0, 1.0)
        beta = 1.0 - alpha / 2.0
        v_cmd = beta * (alpha * v_star + (1.0 - alpha) * v_l) + (1.0 - beta) * self.v_cmd[idx]
        v_cmd = np.maximum(0.0, v_cmd)
        self.v_cmd[idx] = v_cmd
        return np.clip((v_cmd - v_e) / dt, -ACTION_LIMIT, ACTION_LIMIT)


class ResidualDynamicsModel:
    """Analytic base plus residual net, with running normalization statistics
    and a validation-based model-error estimate."""

    def __init__(
        self,
        idm: IdmParams | None = None,
        reward: RewardConfig | None = None,
        dt: float = 0.1,
        rng: np.random.Generator | None = None,
        hidden: tuple[int, ...] = (64, 64),
        base_mode: str = "idm",
        lr: float = 1e-3,
        momentum: float = 0.9,
    ):
        if base_mode not in ("idm", "kinematic"):
            raise ValueError(f"unknown base mode {base_mode!r}")
        self.idm = idm or IdmParams()
        self.reward_config = reward or RewardConfig()
        self.dt = dt
        self.base_mode = base_mode
        rng = rng or np.random.default_rng(0)
        self.net = Mlp.initialized(
            [OBS_DIM + 1, *hidden, STATE_REWARD_DIM], rng, "identity", output_scale=0.0
        )
        self.in_mean = np.zeros(OBS_DIM + 1)
        self.in_std = np.ones(OBS_DIM + 1)
        self.out_scale = np.ones(STATE_REWARD_DIM)
        self.eps_m = 0.0
        self._opt = MomentumSgd(lr=lr, momentum=momentum)

    # ---- analytic base ----------------------------------------------------

    def base_predict(self, obs, actions):
        """One analytic step: (next observation, predicted reward, terminal).

        The ego executes the clipped action; the leader and follower follow
        the deterministic IDM with executed accelerations clipped like every
        simulated human driver. A non-positive predicted gap marks the
        transition terminal and carries the collision penalty.
        """
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        a_e = np.clip(np.atleast_1d(np.asarray(actions, dtype=float)).reshape(-1), -ACTION_LIMIT, ACTION_LIMIT)
        v_des = self.reward_config.v_des
        v_e, v_l, v_f, g_l, g_f = decode_observation(obs, v_des)
        if self.base_mode == "idm":
            # unobserved second ring assumed locally homogeneous: the leader
            # sees its own leader at the same gap and speed
            a_l = np.clip(
                idm_accel(v_l, v_l, np.maximum(g_l, MIN_CONTROL_GAP), self.idm),
                -EMERGENCY_DECEL, self.idm.a_max,
            )
            a_f = np.clip(
                idm_accel(v_f, v_e, np.maximum(g_f, MIN_CONTROL_GAP), self.idm),
                -EMERGENCY_DECEL, self.idm.a_max,
            )
        else:  # kinematic: neighbors coast, only the ego responds
            a_l = np.zeros_like(v_l)
            a_f = np.zeros_like(v_f)
        dt = self.dt
        v_e2 = np.maximum(0.0, v_e + a_e * dt)
        v_l2 = np.maximum(0.0, v_l + a_l * dt)
        v_f2 = np.maximum(0.0, v_f + a_f * dt)
        g_l2 = g_l + (v_l2 - v_e2) * dt
        g_f2 = g_f + (v_e2 - v_f2) * dt
        terminal = (g_l2 <= 0.0) | (g_f2 <= 0.0)
        next_obs = encode_observation(v_e2, v_l2, v_f2, g_l2, g_f2, v_des)
        # ego-local surrogate of the fleet reward
        mean_v = (v_e2 + v_l2 + v_f2) / 3.0
        rc = self.reward_config
        if rc.variant == "verbatim":
            term1 = rc.alpha_w * np.maximum(rc.v_des - mean_v, 0.0)
        else:
            term1 = rc.alpha_w * np.maximum(
                rc.v_des - np.abs(rc.v_des - mean_v), 0.0
            ) / rc.v_des
        h = g_l2 / np.maximum(v_e2, 0.1)
        reward = (
            term1
            - rc.beta_w * np.maximum(rc.h_max - h, 0.0)
            - rc.gamma_w * np.abs(a_e)
        )
        reward = np.where(terminal, reward - COLLISION_PENALTY, reward)
        return next_obs, reward, terminal

    # ---- residual ---------------------------------------------------------

    def _net_input(self, obs, actions):
        obs = np.atleast_2d(obs)
        a = np.atleast_1d(np.asarray(actions, dtype=float)).reshape(-1, 1)
        raw = np.concatenate([obs, a], axis=1)
        return (raw - self.in_mean) / self.in_std

    def residual_normalized(self, obs, actions) -> np.ndarray:
        """Residual-net output in normalized units: five state deltas plus
        one reward delta."""
        return self.net.forward(self._net_input(obs, actions))

    def predict(self, obs, actions):
        """Base prediction plus the denormalized residual."""
        base_obs, base_r, terminal = self.base_predict(obs, actions)
        res = self.residual_normalized(obs, actions) * self.out_scale
        next_obs = base_obs + res[:, :OBS_DIM]
        reward = base_r + res[:, OBS_DIM]
        return next_obs, reward, terminal

    def update_normalization(self, obs, actions, next_obs, rewards) -> None:
        """Refresh input statistics and residual-target scales from actual
        transitions; call between training rounds, never mid-rollout."""
        obs = np.atleast_2d(obs)
        a = np.asarray(actions, dtype=float).reshape(-1, 1)
        raw_in = np.concatenate([obs, a], axis=1)
        self.in_mean = raw_in.mean(axis=0)
        self.in_std = np.maximum(raw_in.std(axis=0), 1e-6)
        targets = self._raw_targets(obs, actions, next_obs, rewards)
        self.out_scale = np.maximum(targets.std(axis=0), SCALE_FLOOR)

    def _raw_targets(self, obs, actions, next_obs, rewards) -> np.ndarray:
        base_obs, base_r, _ = self.base_predict(obs, actions)
        d_obs = np.atleast_2d(next_obs) - base_obs
        d_r = np.asarray(rewards, dtype=float).reshape(-1) - base_r
        return np.concatenate([d_obs, d_r[:, None]], axis=1)

    def train_step(self, obs, actions, next_obs, rewards) -> float:
        """One gradient step on the normalized-residual MSE; returns the loss."""
        if len(np.atleast_2d(obs)) == 0:
            raise ValueError("empty training batch")
        targets = self._raw_targets(obs, actions, next_obs, rewards) / self.out_scale
        x = self._net_input(obs, actions)
        pred, cache = self.net.forward_cached(x)
        err = pred - targets
        loss = float(np.mean(err ** 2))
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite dynamics loss")
        grad = self.net.backward(cache, 2.0 * err / err.size)
        self._opt.step(self.net, grad)
        return loss

    def estimate_model_error(self, obs, actions, next_obs, rewards) -> float:
        """Mean over validation samples of the RMS normalized one-step error
        across the five state dims plus reward; stored on the model."""
        if len(np.atleast_2d(obs)) == 0:
            raise ValueError("empty validation set")
        pred_obs, pred_r, _ = self.predict(obs, actions)
        err_state = (pred_obs - np.atleast_2d(next_obs)) / self.out_scale[:OBS_DIM]
        err_r = (pred_r - np.asarray(rewards, dtype=float).reshape(-1)) / self.out_scale[OBS_DIM]
        err = np.concatenate([err_state, err_r[:, None]], axis=1)
        per_sample = np.sqrt(np.mean(err ** 2, axis=1))
        self.eps_m = float(per_sample.mean())
        return self.eps_m

    # ---- rollouts ---------------------------------------------------------

    def branched_rollout(
        self,
        policy,
        start_obs: np.ndarray,
        k_star: int,
        rng: np.random.Generator,
        pi_params=None,
        dt: float | None = None,
    ) -> dict:
        """Roll the composed policy (initial controller plus sampled residual)
        from each start state for up to k_star virtual steps.

        Returns a dict of (branches, steps) arrays with a validity mask;
        branches stop early at predicted terminals. The initial controller's
        averaging window is seeded with the decoded ego speed, since branch
        states carry no history.
        """
        if k_star < 1:
            raise ValueError("k_star must be >= 1")
        start_obs = np.atleast_2d(np.asarray(start_obs, dtype=float))
        m = len(start_obs)
        dt = dt or self.dt
        v_des = self.reward_config.v_des
        pi = _BatchPi(start_obs, pi_params, v_des) if pi_params is not None else None
        obs = start_obs.copy()
        alive = np.ones(m, dtype=bool)
        out = {
            "obs": np.zeros((m, k_star, OBS_DIM)),
            "action": np.zeros((m, k_star)),
            "residual": np.zeros((m, k_star)),
            "logp": np.zeros((m, k_star)),
            "reward": np.zeros((m, k_star)),
            "next_obs": np.zeros((m, k_star, OBS_DIM)),
            "done": np.zeros((m, k_star), dtype=bool),
            "valid": np.zeros((m, k_star), dtype=bool),
        }
        for t in range(k_star):
            if not alive.any():
                break
            idx = np.where(alive)[0]
            cur = obs[idx]
            residual, logp = policy.sample(cur, rng)
            residual = residual[:, 0]
            a_h = pi.accel(cur, idx, dt) if pi is not None else np.zeros(len(idx))
            action = np.clip(a_h + residual, -ACTION_LIMIT, ACTION_LIMIT)
            nxt, rew, term = self.predict(cur, action)
            out["obs"][idx, t] = cur
            out["action"][idx, t] = action
            out["residual"][idx, t] = residual
            out["logp"][idx, t] = logp
            out["reward"][idx, t] = rew
            out["next_obs"][idx, t] = nxt
            out["done"][idx, t] = term
            out["valid"][idx, t] = True
            obs[idx] = nxt
            alive[idx] &= ~term
        return out

    # ---- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "wavedamp.dynamics/1",
            "net": self.net.to_dict(),
            "base_mode": self.base_mode,
            "dt": self.dt,
            "idm": vars(self.idm).copy(),
            "reward": vars(self.reward_config).copy(),
            "in_mean": [float(v) for v in self.in_mean],
            "in_std": [float(v) for v in self.in_std],
            "out_scale": [float(v) for v in self.out_scale],
            "eps_m": self.eps_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResidualDynamicsModel":
        if d.get("format") != "wavedamp.dynamics/1":
            raise ValueError(f"unsupported dynamics format {d.get('format')!r}")
        m = cls(
            idm=IdmParams(**d["idm"]),
            reward=RewardConfig(**d["reward"]),
            dt=float(d["dt"]),
            base_mode=d["base_mode"],
        )
        m.net = Mlp.from_dict(d["net"])
        m.in_mean = np.array(d["in_mean"], dtype=float)
        m.in_std = np.array(d["in_std"], dtype=float)
        m.out_scale = np.array(d["out_scale"], dtype=float)
        m.eps_m = float(d["eps_m"])
        return m
