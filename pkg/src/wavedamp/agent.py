"""Residual agent: physics-based initial policy plus learned correction,
experience buffers, the model-based training loop, and ablation variants.

Variants:
  proposed          initial PI controller + IDM-anchored virtual model
  no-initial-policy IDM-anchored virtual model, no initial controller
  mb-trpo           virtual model with a kinematic (knowledge-free) base
  vanilla-trpo      model-free, no initial controller
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .controllers import IdmParams, PiParams, PiState, command_to_accel, pi_update_command
from .dynamics import ResidualDynamicsModel, RolloutConfig, rollout_length
from .env import ACTION_LIMIT, OBS_DIM, RewardConfig, TrafficEnv
from .networks import ScenarioConfig
from .trpo import (
    GaussianPolicy,
    TrpoConfig,
    ValueNet,
    fit_value,
    gae,
    normalize_advantages,
    trpo_update,
)

log = logging.getLogger("wavedamp")

VARIANTS = ("proposed", "vanilla-trpo", "mb-trpo", "no-initial-policy")

ACTUAL = "actual"
VIRTUAL = "virtual"


@dataclass
class Transition:
    """One step of experience; `a` is the executed (clipped) acceleration,
    `residual` and `logp` record the sampled correction for policy updates."""

    s: np.ndarray
    a: float
    r: float
    s_next: np.ndarray
    done: bool
    source: str = ACTUAL
    residual: float = 0.0
    logp: float = 0.0

    def __post_init__(self):
        if abs(self.a) > ACTION_LIMIT + 1e-9:
            raise ValueError("executed action exceeds the acceleration bound")
        if self.source not in (ACTUAL, VIRTUAL):
            raise ValueError(f"unknown transition source {self.source!r}")


class ExperienceBuffer:
    """FIFO transition store with a fixed source tag."""

    FIELDS = ("obs", "action", "reward", "next_obs", "done", "residual", "logp")

    def __init__(self, capacity: int, source: str):
        if source not in (ACTUAL, VIRTUAL):
            raise ValueError(f"unknown source tag {source!r}")
        self.capacity = int(capacity)
        self.source = source
        self._obs = np.zeros((capacity, OBS_DIM))
        self._action = np.zeros(capacity)
        self._reward = np.zeros(capacity)
        self._next_obs = np.zeros((capacity, OBS_DIM))
        self._done = np.zeros(capacity, dtype=bool)
        self._residual = np.zeros(capacity)
        self._logp = np.zeros(capacity)
        self._head = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, t: Transition) -> None:
        if t.source != self.source:
            raise ValueError(
                f"{t.source!r} transition rejected by {self.source!r} buffer"
            )
        self.add_arrays(
            t.s[None], np.array([t.a]), np.array([t.r]), t.s_next[None],
            np.array([t.done]), np.array([t.residual]), np.array([t.logp]),
        )

    def add_arrays(self, obs, action, reward, next_obs, done, residual=None, logp=None):
        n = len(obs)
        if residual is None:
            residual = np.zeros(n)
        if logp is None:
            logp = np.zeros(n)
        for row in range(n):
            k = self._head
            self._obs[k] = obs[row]
            self._action[k] = action[row]
            self._reward[k] = reward[row]
            self._next_obs[k] = next_obs[row]
            self._done[k] = done[row]
            self._residual[k] = residual[row]
            self._logp[k] = logp[row]
            self._head = (self._head + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        """Indices oldest to newest."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._head) % self.capacity

    def recent(self, n: int) -> dict:
        idx = self._order()[-min(n, self._size):]
        return self._view(idx)

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.choice(self._order(), size=min(n, self._size), replace=False)
        return self._view(idx)

    def _view(self, idx) -> dict:
        return {
            "obs": self._obs[idx],
            "action": self._action[idx],
            "reward": self._reward[idx],
            "next_obs": self._next_obs[idx],
            "done": self._done[idx],
            "residual": self._residual[idx],
            "logp": self._logp[idx],
        }


def compose_action(a_initial: float, a_residual: float,
                   bounds=(-ACTION_LIMIT, ACTION_LIMIT)) -> float:
    """Full control: initial-policy action plus residual correction, clipped
    to the actuator range."""
    return float(np.clip(a_initial + a_residual, bounds[0], bounds[1]))


def estimate_policy_shift(old_policy: GaussianPolicy, new_policy: GaussianPolicy,
                          states) -> float:
    """Total-variation proxy for the policy update: max over states of
    sqrt(KL/2) (Pinsker upper bound)."""
    states = np.atleast_2d(states)
    if len(states) == 0:
        raise ValueError("states must be non-empty")
    kl = old_policy.kl(new_policy, states)
    return float(np.sqrt(np.maximum(kl, 0.0) / 2.0).max())


@dataclass
class BoundInputs:
    R_max: float
    gamma: float
    eps_pi: float
    eps_m: float
    k: int

    def validate(self) -> None:
        if min(self.R_max, self.eps_pi, self.eps_m, self.k) < 0 or self.gamma < 0:
            raise ValueError("bound inputs must be non-negative")
        if self.gamma >= 1.0:
            raise ValueError("the bound is finite only for gamma < 1")


def c_bound(inputs: BoundInputs) -> float:
    """Return-gap bound between virtual and actual performance for a k-step
    model rollout under bounded model error and policy shift."""
    inputs.validate()
    g, k = inputs.gamma, inputs.k
    term = (
        g ** (k + 1) * inputs.eps_pi / (1.0 - g) ** 2
        + g ** k * inputs.eps_pi / (1.0 - g)
        + k * inputs.eps_m / (1.0 - g)
    )
    return 2.0 * inputs.R_max * term


@dataclass
class AgentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig.ring)
    reward: RewardConfig = field(default_factory=RewardConfig)
    idm: IdmParams = field(default_factory=IdmParams)
    pi: PiParams = field(default_factory=PiParams)
    trpo: TrpoConfig = field(default_factory=TrpoConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    variant: str = "proposed"
    actual_capacity: int = 100_000
    virtual_capacity: int = 400_000
    collect_steps: int = 3000
    branch_starts: int = 400
    virtual_ratio: float = 4.0
    model_train_steps: int = 100
    model_batch: int = 256
    model_lr: float = 1e-3
    model_momentum: float = 0.9
    model_val_fraction: float = 0.1
    model_val_min: int = 256

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        self.scenario.validate()
        self.reward.validate()
        self.idm.validate()
        self.pi.validate()
        self.trpo.validate()
        self.rollout.validate()


class ResidualAgent:
    """Training loop: collect actual experience with the composed policy,
    refresh the virtual model, branch virtual rollouts, and take one
    trust-region update per iteration on the mixed batch."""

    def __init__(self, config: AgentConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.variant = config.variant
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        env_ss, policy_ss, value_ss, model_ss, agent_ss = ss.spawn(5)
        self._episode_seeds = env_ss
        self.rng = np.random.default_rng(agent_ss)
        self.env = TrafficEnv(config.scenario, config.reward, config.idm, seed=seed)
        self.policy = GaussianPolicy(OBS_DIM, 1, rng=np.random.default_rng(policy_ss))
        self.value = ValueNet(OBS_DIM, rng=np.random.default_rng(value_ss))
        self.uses_initial_policy = self.variant == "proposed"
        self.uses_model = self.variant != "vanilla-trpo"
        base_mode = "kinematic" if self.variant == "mb-trpo" else "idm"
        self.model = ResidualDynamicsModel(
            idm=config.idm, reward=config.reward, dt=config.scenario.dt,
            rng=np.random.default_rng(model_ss), base_mode=base_mode,
            lr=config.model_lr, momentum=config.model_momentum,
        ) if self.uses_model else None
        self.actual_buffer = ExperienceBuffer(config.actual_capacity, ACTUAL)
        self.virtual_buffer = ExperienceBuffer(config.virtual_capacity, VIRTUAL)
        self.iteration = 0
        self.total_actual_steps = 0
        self.r_max_seen = 0.0
        self._env_done = True
        self._pi_states: list[PiState | None] = [None] * self.env.n_slots

    # ---- acting ------------------------------------------------------------

    def _initial_action(self, slot: int, obs_row: np.ndarray) -> float:
        if not self.uses_initial_policy:
            return 0.0
        state = self._pi_states[slot]
        v_des = self.config.reward.v_des
        v_ego = obs_row[0] * v_des
        if state is None:
            state = PiState.fresh(self.config.pi.window, v_ego)
            self._pi_states[slot] = state
        gap = obs_row[3] * 100.0
        v_lead = max(0.0, v_ego + obs_row[1] * v_des)
        v_cmd = pi_update_command(state, gap, v_lead, v_ego, self.config.pi)
        return command_to_accel(v_cmd, v_ego, self.config.scenario.dt)

    def act(self, obs_block: np.ndarray, deterministic: bool = False):
        """Compose per-slot actions; returns (actions, residuals, logps)."""
        n = self.env.n_slots
        actions = np.zeros(n)
        residuals = np.zeros(n)
        logps = np.zeros(n)
        for slot in range(n):
            if self.env.slots[slot] is None:
                continue
            row = obs_block[slot]
            a_h = self._initial_action(slot, row)
            if deterministic:
                res = float(self.policy.mean(row[None])[0, 0])
                lp = 0.0
            else:
                sample, lp_arr = self.policy.sample(row[None], self.rng)
                res, lp = float(sample[0, 0]), float(lp_arr[0])
            residuals[slot] = res
            logps[slot] = lp
            actions[slot] = compose_action(a_h, res)
        return actions, residuals, logps

    # ---- collection --------------------------------------------------------

    def _reset_env(self):
        obs = self.env.reset(seed=self._episode_seeds.spawn(1)[0])
        self._pi_states = [None] * self.env.n_slots
        self._env_done = False
        return obs

    def collect_actual(self, steps: int, deterministic: bool = False):
        """Run the composed policy in the actual environment for `steps`
        steps (resetting between episodes) and store the transitions.

        Returns (trajectories, episode returns, per-step fleet stats).
        Trajectories are per-CAV-slot contiguous segments carrying what the
        policy update needs."""
        trajs: list[dict] = []
        open_traj: list[dict | None] = [None] * self.env.n_slots
        episode_returns: list[float] = []
        mean_speeds: list[float] = []
        speed_stds: list[float] = []
        ep_return = 0.0
        obs = self._reset_env() if self._env_done else self.env.observe()

        def close(slot, bootstrap_obs=None):
            traj = open_traj[slot]
            if traj is not None and traj["obs"]:
                traj["bootstrap_obs"] = bootstrap_obs
                trajs.append({k: np.array(v) if isinstance(v, list) else v
                              for k, v in traj.items()})
            open_traj[slot] = None

        for _ in range(steps):
            actions, residuals, logps = self.act(obs, deterministic)
            active_before = [v is not None for v in self.env.slots]
            next_obs, reward, done, info = self.env.step(actions)
            ep_return += reward
            mean_speeds.append(info["mean_speed"])
            speed_stds.append(info["speed_std"])
            for slot in range(self.env.n_slots):
                if not active_before[slot]:
                    continue
                slot_closed = info["slot_done"][slot] or done
                if open_traj[slot] is None:
                    open_traj[slot] = {
                        "obs": [], "residual": [], "logp": [], "reward": [],
                        "done": [],
                    }
                traj = open_traj[slot]
                traj["obs"].append(obs[slot].copy())
                traj["residual"].append(residuals[slot])
                traj["logp"].append(logps[slot])
                traj["reward"].append(reward)
                terminal = bool(info["collisions"]) and slot_closed
                traj["done"].append(terminal)
                self.actual_buffer.add_arrays(
                    obs[slot][None], np.array([actions[slot]]),
                    np.array([reward]), next_obs[slot][None],
                    np.array([terminal]), np.array([residuals[slot]]),
                    np.array([logps[slot]]),
                )
                self.r_max_seen = max(self.r_max_seen, abs(reward))
                if slot_closed:
                    close(slot, None if terminal else next_obs[slot].copy())
                    self._pi_states[slot] = None
            self.total_actual_steps += 1
            obs = next_obs
            if done:
                episode_returns.append(ep_return)
                ep_return = 0.0
                obs = self._reset_env()
        for slot in range(self.env.n_slots):
            boot = obs[slot].copy() if self.env.slots[slot] is not None else None
            close(slot, boot)
        self._env_done = self.env.done
        if not episode_returns and ep_return:
            episode_returns.append(ep_return)  # partial episode fallback
        return trajs, episode_returns, {
            "mean_speed": float(np.mean(mean_speeds)) if mean_speeds else 0.0,
            "speed_std": float(np.mean(speed_stds)) if speed_stds else 0.0,
        }

    # ---- model -------------------------------------------------------------

    def train_model(self) -> dict:
        """Refresh normalization, take gradient steps on sampled actual
        batches, and re-estimate the model error on the newest slice."""
        assert self.model is not None
        n = len(self.actual_buffer)
        window = self.actual_buffer.recent(min(n, 20_000))
        keep = ~window["done"]  # terminal steps carry the discontinuous penalty
        self.model.update_normalization(
            window["obs"][keep], window["action"][keep],
            window["next_obs"][keep], window["reward"][keep],
        )
        losses = []
        for _ in range(self.config.model_train_steps):
            batch = self.actual_buffer.sample(self.config.model_batch, self.rng)
            ok = ~batch["done"]
            if ok.sum() < 2:
                continue
            losses.append(self.model.train_step(
                batch["obs"][ok], batch["action"][ok],
                batch["next_obs"][ok], batch["reward"][ok],
            ))
        val_n = max(self.config.model_val_min, int(n * self.config.model_val_fraction))
        val = self.actual_buffer.recent(val_n)
        ok = ~val["done"]
        eps_m = self.model.estimate_model_error(
            val["obs"][ok], val["action"][ok], val["next_obs"][ok], val["reward"][ok]
        )
        return {"model_loss": float(np.mean(losses)) if losses else math.nan,
                "eps_m": eps_m}

    def rollout_virtual(self, k_star: int) -> dict | None:
        """Branch virtual rollouts from buffer states into the virtual buffer;
        returns the raw branch arrays for the policy update."""
        assert self.model is not None
        if k_star < 1 or len(self.actual_buffer) == 0:
            return None
        starts = self.actual_buffer.sample(self.config.branch_starts, self.rng)["obs"]
        pi_params = self.config.pi if self.uses_initial_policy else None
        branches = self.model.branched_rollout(
            self.policy, starts, k_star, self.rng, pi_params=pi_params,
            dt=self.config.scenario.dt,
        )
        valid = branches["valid"]
        idx = np.where(valid.reshape(-1))[0]
        flat = {
            "obs": branches["obs"].reshape(-1, OBS_DIM)[idx],
            "action": branches["action"].reshape(-1)[idx],
            "reward": branches["reward"].reshape(-1)[idx],
            "next_obs": branches["next_obs"].reshape(-1, OBS_DIM)[idx],
            "done": branches["done"].reshape(-1)[idx],
            "residual": branches["residual"].reshape(-1)[idx],
            "logp": branches["logp"].reshape(-1)[idx],
        }
        self.virtual_buffer.add_arrays(
            flat["obs"], flat["action"], flat["reward"], flat["next_obs"],
            flat["done"], flat["residual"], flat["logp"],
        )
        return branches

    # ---- updates -----------------------------------------------------------

    def _actual_update_arrays(self, trajs):
        obs, res, logp, adv, ret = [], [], [], [], []
        for traj in trajs:
            values = self.value.predict(traj["obs"])
            boot = traj.get("bootstrap_obs")
            boot_v = float(self.value.predict(boot[None])[0]) if boot is not None else 0.0
            a, r = gae(
                traj["reward"], values, traj["done"],
                self.config.trpo.discount, self.config.trpo.gae_lambda, boot_v,
            )
            obs.append(traj["obs"])
            res.append(traj["residual"])
            logp.append(traj["logp"])
            adv.append(a)
            ret.append(r)
        if not obs:
            return None
        return (np.concatenate(obs), np.concatenate(res)[:, None],
                np.concatenate(logp), np.concatenate(adv), np.concatenate(ret))

    def _virtual_update_arrays(self, branches, cap: int):
        valid = branches["valid"]
        m, T = valid.shape
        obs, res, logp, adv, ret = [], [], [], [], []
        for b in range(m):
            L = int(valid[b].sum())
            if L == 0:
                continue
            o = branches["obs"][b, :L]
            values = self.value.predict(o)
            terminal = bool(branches["done"][b, L - 1])
            boot = 0.0 if terminal else float(
                self.value.predict(branches["next_obs"][b, L - 1][None])[0]
            )
            dones = branches["done"][b, :L]
            a, r = gae(
                branches["reward"][b, :L], values, dones,
                self.config.trpo.discount, self.config.trpo.gae_lambda, boot,
            )
            obs.append(o)
            res.append(branches["residual"][b, :L])
            logp.append(branches["logp"][b, :L])
            adv.append(a)
            ret.append(r)
        if not obs:
            return None
        obs = np.concatenate(obs)
        res = np.concatenate(res)[:, None]
        logp = np.concatenate(logp)
        adv = np.concatenate(adv)
        ret = np.concatenate(ret)
        if len(obs) > cap:
            pick = self.rng.choice(len(obs), size=cap, replace=False)
            obs, res, logp, adv, ret = obs[pick], res[pick], logp[pick], adv[pick], ret[pick]
        return obs, res, logp, adv, ret

    def update_policy(self, trajs, branches) -> dict:
        actual = self._actual_update_arrays(trajs)
        if actual is None:
            return {"accepted": False, "kl": 0.0, "eps_pi": 0.0, "value_loss": math.nan}
        parts = [actual]
        if branches is not None:
            cap = int(self.config.virtual_ratio * len(actual[0]))
            virtual = self._virtual_update_arrays(branches, cap)
            if virtual is not None:
                parts.append(virtual)
        obs = np.concatenate([p[0] for p in parts])
        res = np.concatenate([p[1] for p in parts])
        logp = np.concatenate([p[2] for p in parts])
        adv = normalize_advantages(np.concatenate([p[3] for p in parts]))
        ret = np.concatenate([p[4] for p in parts])

        old_policy = self.policy.clone()
        info = trpo_update(
            self.policy, obs, res, adv, logp, self.config.trpo, rng=self.rng
        )
        info["eps_pi"] = estimate_policy_shift(old_policy, self.policy, obs)
        info["value_loss"] = fit_value(
            self.value, obs, ret,
            l2=self.config.trpo.value_l2, lr=self.config.trpo.value_lr,
            passes=self.config.trpo.value_passes,
        )
        info["batch_size"] = len(obs)
        return info

    # ---- training loop -----------------------------------------------------

    def train_iteration(self) -> dict:
        """One pass of the outer loop; returns the metrics row."""
        t0 = time.perf_counter()
        trajs, returns, fleet = self.collect_actual(self.config.collect_steps)
        model_info = {"model_loss": math.nan, "eps_m": 0.0}
        k_star = 0
        branches = None
        eta_virtual = math.nan
        if self.uses_model:
            model_info = self.train_model()
            k_star = rollout_length(model_info["eps_m"], self.config.rollout)
            branches = self.rollout_virtual(k_star)
            if branches is not None:
                per_branch = np.where(branches["valid"], branches["reward"], 0.0)
                eta_virtual = float(per_branch.sum(axis=1).mean())
        update = self.update_policy(trajs, branches)
        eta_actual = float(np.mean(returns)) if returns else math.nan
        bound = c_bound(BoundInputs(
            R_max=self.r_max_seen, gamma=self.config.trpo.discount,
            eps_pi=update["eps_pi"], eps_m=model_info["eps_m"], k=max(k_star, 0),
        )) if self.uses_model else math.nan
        if self.uses_model and math.isfinite(eta_virtual) and math.isfinite(eta_actual):
            if eta_virtual - bound > eta_actual + 1e-6:
                log.warning(
                    "virtual return %.3f minus bound %.3f exceeds actual %.3f",
                    eta_virtual, bound, eta_actual,
                )
        self.iteration += 1
        return {
            "iteration": self.iteration,
            "episode_return": eta_actual,
            "avg_speed": fleet["mean_speed"],
            "speed_std": fleet["speed_std"],
            "eps_m": model_info["eps_m"],
            "k_star": k_star,
            "c_bound": bound,
            "eta_virtual": eta_virtual,
            "eps_pi": update["eps_pi"],
            "kl": update["kl"],
            "accepted": int(update["accepted"]),
            "model_loss": model_info["model_loss"],
            "value_loss": update.get("value_loss", math.nan),
            "actual_steps": self.total_actual_steps,
            "wall_time_s": time.perf_counter() - t0,
        }

    def evaluate(self, episodes: int = 1) -> dict:
        """Deterministic evaluation (mean action, no exploration noise)."""
        if episodes < 1:
            raise ValueError("need at least one evaluation episode")
        returns, speeds, stds = [], [], []
        for _ in range(episodes):
            obs = self._reset_env()
            total, ms, ss = 0.0, [], []
            done = False
            while not done:
                actions, _, _ = self.act(obs, deterministic=True)
                obs, r, done, info = self.env.step(actions)
                total += r
                ms.append(info["mean_speed"])
                ss.append(info["speed_std"])
            returns.append(total)
            speeds.append(float(np.mean(ms)))
            stds.append(float(np.mean(ss)))
        self._env_done = True
        return {
            "reward": float(np.mean(returns)),
            "avg_speed": float(np.mean(speeds)),
            "speed_std": float(np.mean(stds)),
            "episodes": episodes,
        }

    # ---- checkpointing -----------------------------------------------------

    def checkpoint_dict(self) -> dict:
        return {
            "format": "wavedamp.checkpoint/1",
            "variant": self.variant,
            "iteration": self.iteration,
            "total_actual_steps": self.total_actual_steps,
            "r_max_seen": self.r_max_seen,
            "policy": self.policy.to_dict(),
            "value": self.value.to_dict(),
            "dynamics": self.model.to_dict() if self.model else None,
            "pi": vars(self.config.pi).copy(),
            "rng_state": _encode_rng(self.rng),
        }

    def save_checkpoint(self, path: str) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.checkpoint_dict(), fh, sort_keys=True, separators=(",", ":"))
        os.replace(tmp, path)

    def load_checkpoint(self, path: str) -> None:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if d.get("format") != "wavedamp.checkpoint/1":
            raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
        if d["variant"] != self.variant:
            raise ValueError(
                f"checkpoint holds variant {d['variant']!r}, agent is {self.variant!r}"
            )
        self.policy = GaussianPolicy.from_dict(d["policy"])
        self.value = ValueNet.from_dict(d["value"])
        if d["dynamics"] is not None:
            self.model = ResidualDynamicsModel.from_dict(d["dynamics"])
        self.iteration = int(d["iteration"])
        self.total_actual_steps = int(d["total_actual_steps"])
        self.r_max_seen = float(d["r_max_seen"])
        self.rng = _decode_rng(d["rng_state"])


def _encode_rng(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=str))


def _decode_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    fixed = {
        "bit_generator": state["bit_generator"],
        "state": {k: int(v) for k, v in state["state"].items()},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }
    rng.bit_generator.state = fixed
    return rng
