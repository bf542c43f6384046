"""MDP wrapper over the traffic simulator.

Observations are local 5-dim vectors per controlled CAV (ego speed, relative
speeds and bumper gaps to the leader and follower, all normalized); the merge
scenario packs them into a fixed block of CAV slots, zero-padded. Rewards
trade off fleet speed against short CAV headways and control effort.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controllers import IdmParams, idm_accel_noisy, idm_equilibrium_speed
from .networks import (
    CAV,
    HDV,
    Network,
    ScenarioConfig,
    VehicleState,
    _in_zone,
    _next_zone_entrance_dist,
    all_followers,
    all_leaders,
    build_network,
    detect_collisions,
    remove_exited,
    ring_follower_arrays,
    ring_leader_arrays,
    spawn_inflows,
    update_right_of_way,
    zone_conflicts,
)

GAP_SCALE = 100.0        # m, observation gap normalization
OBS_GAP_CAP = 200.0      # m, gaps are clipped here before normalizing
OBS_DIM = 5
ACTION_LIMIT = 1.0       # m/s^2, CAV acceleration bound
COLLISION_PENALTY = 50.0  # flat reward penalty on episode-ending collision


@dataclass
class RewardConfig:
    alpha_w: float = 1.0
    beta_w: float = 0.1
    gamma_w: float = 0.1
    v_des: float = 30.0
    h_max: float = 1.0
    variant: str = "closeness"  # "closeness" or "verbatim"

    def validate(self) -> None:
        if min(self.alpha_w, self.beta_w, self.gamma_w) < 0:
            raise ValueError("reward weights must be >= 0")
        if self.v_des <= 0:
            raise ValueError("v_des must be positive")
        if self.variant not in ("closeness", "verbatim"):
            raise ValueError(f"unknown reward variant {self.variant!r}")


def headway(gap: float, v: float) -> float:
    """Time headway with the speed floored at 0.1 m/s to stay finite at
    standstill."""
    return gap / max(v, 0.1)


def compute_reward(
    speeds: np.ndarray,
    cav_headways: np.ndarray,
    cav_actions: np.ndarray,
    config: RewardConfig,
) -> float:
    """Fleet-level reward: speed term minus CAV short-headway and control
    effort penalties.

    The verbatim variant scores max(v_des - mean speed, 0) directly, which
    grows as traffic slows; the closeness variant (default) rewards proximity
    of the mean speed to v_des instead, normalized to a 0..alpha range.
    """
    mean_v = float(np.mean(speeds)) if len(speeds) else 0.0
    if config.variant == "verbatim":
        term1 = config.alpha_w * max(config.v_des - mean_v, 0.0)
    else:
        term1 = (
            config.alpha_w
            * max(config.v_des - abs(config.v_des - mean_v), 0.0)
            / config.v_des
        )
    head_pen = config.beta_w * float(
        np.sum(np.maximum(config.h_max - np.asarray(cav_headways, dtype=float), 0.0))
    )
    act_pen = config.gamma_w * float(np.sum(np.abs(np.asarray(cav_actions, dtype=float))))
    return term1 - head_pen - act_pen


def build_observation(
    v_ego: float, v_lead: float, v_fol: float, gap_lead: float, gap_fol: float,
    v_des: float,
) -> np.ndarray:
    return np.array(
        [
            v_ego / v_des,
            (v_lead - v_ego) / v_des,
            (v_fol - v_ego) / v_des,
            min(gap_lead, OBS_GAP_CAP) / GAP_SCALE,
            min(gap_fol, OBS_GAP_CAP) / GAP_SCALE,
        ]
    )


class TrafficEnv:
    """Episodic mixed-traffic environment.

    HDVs follow the noisy IDM; CAV accelerations come from the caller and are
    clipped to +-ACTION_LIMIT. Episodes terminate on any collision (with a
    flat penalty) or at the horizon. `n_cavs=0` turns the closed scenarios
    into an all-IDM reference fleet.
    """

    def __init__(
        self,
        scenario: ScenarioConfig,
        reward: RewardConfig | None = None,
        idm: IdmParams | None = None,
        seed: int = 0,
        n_cavs: int | None = None,
    ):
        scenario.validate()
        self.scenario = scenario
        self.reward_config = reward or RewardConfig()
        self.reward_config.validate()
        self.idm = idm or IdmParams()
        self.idm.validate()
        self._rng = np.random.default_rng(seed)
        self.n_slots = scenario.max_cav_slots if scenario.kind == "merge" else 1
        self._n_cavs = 1 if n_cavs is None else int(n_cavs)
        if scenario.kind == "merge":
            self._n_cavs = 0  # merge CAVs arrive through the inflow
        self.network: Network | None = None
        self.states: list[VehicleState] = []
        self.slots: list[str | None] = [None] * self.n_slots
        self.t = 0
        self._row_clock = 0  # monotone step counter for right-of-way FIFO
        self._snapshot = None
        self.done = True

    # ---- lifecycle -------------------------------------------------------

    def reset(self, seed: int | None = None) -> np.ndarray:
        """Rebuild the network with freshly sampled geometry, place vehicles,
        and run the all-IDM warmup. Returns the first observation."""
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        for _ in range(8):
            self._initialize_episode()
            if self._run_warmup():
                break
        else:
            raise RuntimeError("could not complete a collision-free warmup")
        self.t = 0
        self.done = False
        return self.observe()

    def _initialize_episode(self) -> None:
        cfg = self.scenario
        self.network = build_network(cfg, self._rng)
        self.states = []
        self.slots = [None] * self.n_slots
        self._snapshot = None
        if cfg.kind == "merge":
            return
        n = cfg.n_vehicles
        spacing = self.network.length / n
        gap = spacing - 5.0
        if gap <= 0:
            raise ValueError("network too short for the configured fleet")
        v_init = idm_equilibrium_speed(gap, self.idm)
        offset = 0.0
        if cfg.kind == "figure-eight":
            # start slow enough to yield at the crossing from a cold start;
            # warmup settles the network into its natural queueing pattern
            v_init = min(v_init, 6.0)
        jitter_cap = max(0.0, min(cfg.init_jitter, 0.4 * gap))
        if cfg.kind == "figure-eight":
            offset = self._clear_offset(spacing, jitter_cap)
        jitter = (
            self._rng.uniform(-jitter_cap, jitter_cap, size=n)
            if jitter_cap > 0
            else np.zeros(n)
        )
        for i in range(n):
            kind = CAV if i < self._n_cavs else HDV
            vid = f"cav{i}" if kind == CAV else f"hdv{i}"
            self.states.append(
                VehicleState(
                    id=vid,
                    pos=(offset + i * spacing + jitter[i]) % self.network.length,
                    v=v_init,
                    kind=kind,
                )
            )
            if kind == CAV:
                self.slots[i] = vid

    def _clear_offset(self, spacing: float, jitter_cap: float) -> float:
        """Placement offset keeping every initial front bumper away from the
        figure-eight crossing (inside or shortly before either zone)."""
        net = self.network
        margin_before = 8.0 + jitter_cap
        margin_after = 5.0 + 0.5 + jitter_cap  # vehicle length + slack
        n = self.scenario.n_vehicles
        for off in np.arange(0.0, spacing, 0.25):
            ok = True
            for i in range(n):
                front = (off + i * spacing) % net.length
                for e, x in net.conflict_zones:
                    if e - margin_before < front < x + margin_after:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                return float(off)
        return 0.0

    def _run_warmup(self) -> bool:
        self._row_clock = 0
        for _ in range(self.scenario.warmup):
            if self._sim_step(idm_all=True):
                return False
        return True

    # ---- core stepping ---------------------------------------------------

    def _slot_index(self) -> dict[str, int]:
        return {
            vid: slot for slot, vid in enumerate(self.slots) if vid is not None
        }

    def _control_leaders(self, pos, vel, lengths):
        """Effective (gap, leader speed) per vehicle: nearest-ahead plus the
        figure-eight right-of-way wall."""
        net = self.network
        if net.closed:
            _, gaps, lead_v = ring_leader_arrays(pos, lengths, vel, net.length)
            if net.kind == "figure-eight":
                for i, s in enumerate(self.states):
                    if s.id == net.holder_id or _in_zone(net, s.pos) >= 0:
                        continue
                    d = _next_zone_entrance_dist(net, s.pos)
                    if d < gaps[i]:
                        gaps[i] = d
                        lead_v[i] = 0.0
            return gaps, lead_v
        _, gaps, lead_v = all_leaders(net, self.states)
        return gaps, lead_v

    def _sim_step(self, idm_all: bool, cav_actions: np.ndarray | None = None) -> list:
        """One kinematic step; returns the list of collision pairs."""
        net, cfg, states = self.network, self.scenario, self.states
        n = len(states)
        if n:
            pos = np.fromiter((s.pos for s in states), float, n)
            vel = np.fromiter((s.v for s in states), float, n)
            lengths = np.fromiter((s.length for s in states), float, n)
            gaps, lead_v = self._control_leaders(pos, vel, lengths)
            accels = np.empty(n)
            controlled = np.full(n, -1, dtype=int)
            if not idm_all and cav_actions is not None:
                slot_of = self._slot_index()
                for i, s in enumerate(states):
                    if s.id in slot_of:
                        controlled[i] = slot_of[s.id]
            hdv = controlled < 0
            if np.any(hdv):
                # projected/virtual leaders can report a vanishing gap without
                # physical contact; floor it so the law stays evaluable and
                # commands maximum braking instead
                ctrl_gaps = np.maximum(gaps[hdv], 0.1)
                accels[hdv] = idm_accel_noisy(
                    vel[hdv], lead_v[hdv], ctrl_gaps, self.idm, self._rng
                )
            if not np.all(hdv):
                cav_idx = np.where(~hdv)[0]
                accels[cav_idx] = cav_actions[controlled[cav_idx]]
            v_new = np.maximum(0.0, vel + accels * cfg.dt)
            pos_new = pos + v_new * cfg.dt
            if net.closed:
                pos_new = pos_new % net.length
            for i, s in enumerate(states):
                p = pos_new[i]
                if s.stream == "ramp" and p >= net.ramp_length:
                    s.stream = "highway"
                    p = net.merge_point + (p - net.ramp_length)
                s.pos = p
                s.v = v_new[i]
                s.accel = accels[i]

        if net.kind == "merge":
            exited = remove_exited(net, states)
            for vid in exited:
                if vid in self.slots:
                    self.slots[self.slots.index(vid)] = None
            spawned = spawn_inflows(
                net, states, self._rng, cfg,
                active_cavs=sum(1 for v in self.slots if v is not None),
            )
            for s in spawned:
                if s.kind == CAV:
                    self.slots[self.slots.index(None)] = s.id
        self._row_clock += 1
        if net.kind == "figure-eight":
            update_right_of_way(net, states, self._row_clock)

        collisions = self._post_step_snapshot()
        return collisions

    def _post_step_snapshot(self) -> list:
        """Recompute leader/follower geometry after the move; returns the
        collision pairs (physical gap <= 0 plus crossing-box conflicts)."""
        net, states = self.network, self.states
        n = len(states)
        if n == 0:
            self._snapshot = {
                "vel": np.zeros(0), "lead_gap": np.zeros(0), "lead_v": np.zeros(0),
                "fol_gap": np.zeros(0), "fol_v": np.zeros(0),
            }
            return []
        pos = np.fromiter((s.pos for s in states), float, n)
        vel = np.fromiter((s.v for s in states), float, n)
        lengths = np.fromiter((s.length for s in states), float, n)
        collisions: list = []
        if net.closed:
            lead_idx, raw_gaps, lead_v = ring_leader_arrays(pos, lengths, vel, net.length)
            fol_idx, fol_gaps, fol_v = ring_follower_arrays(pos, lengths, vel, net.length)
            if n > 1:
                bad = np.where(raw_gaps <= 0)[0]
                collisions = [(states[i].id, states[lead_idx[i]].id) for i in bad]
            gaps = raw_gaps.copy()
            if net.kind == "figure-eight":
                collisions += zone_conflicts(net, states)
                for i, s in enumerate(states):
                    if s.id == net.holder_id or _in_zone(net, s.pos) >= 0:
                        continue
                    d = _next_zone_entrance_dist(net, s.pos)
                    if d < gaps[i]:
                        gaps[i] = d
                        lead_v[i] = 0.0
        else:
            _, gaps, lead_v = all_leaders(net, states)
            _, fol_gaps, fol_v = all_followers(net, states)
            collisions = detect_collisions(net, states)
        self._snapshot = {
            "vel": vel, "lead_gap": gaps, "lead_v": lead_v,
            "fol_gap": fol_gaps, "fol_v": fol_v,
        }
        return collisions

    def step(self, actions=None):
        """Advance one control step. `actions` holds one acceleration per CAV
        slot (ignored entries for empty slots); out-of-range values are
        clipped and flagged in the info dict."""
        if self.done:
            raise RuntimeError("episode is done; call reset() first")
        if actions is None:
            actions = np.zeros(self.n_slots)
        actions = np.atleast_1d(np.asarray(actions, dtype=float)).copy()
        if actions.shape != (self.n_slots,):
            raise ValueError(f"expected {self.n_slots} actions, got {actions.shape}")
        clipped = bool(np.any(np.abs(actions) > ACTION_LIMIT + 1e-12))
        actions = np.clip(actions, -ACTION_LIMIT, ACTION_LIMIT)

        prev_slots = list(self.slots)
        collisions = self._sim_step(idm_all=False, cav_actions=actions)
        self.t += 1

        snap = self._snapshot
        idx_of = {s.id: i for i, s in enumerate(self.states)}
        cav_h, cav_a = [], []
        for slot, vid in enumerate(self.slots):
            if vid is None or vid not in idx_of:
                continue
            i = idx_of[vid]
            cav_h.append(headway(snap["lead_gap"][i], snap["vel"][i]))
            cav_a.append(actions[slot])
        reward = compute_reward(
            snap["vel"], np.array(cav_h), np.array(cav_a), self.reward_config
        )

        info = {
            "mean_speed": float(snap["vel"].mean()) if snap["vel"].size else 0.0,
            "speed_std": float(snap["vel"].std()) if snap["vel"].size else 0.0,
            "collisions": collisions,
            "action_clipped": clipped,
            "slot_done": [
                prev_slots[k] is not None and self.slots[k] != prev_slots[k]
                for k in range(self.n_slots)
            ],
            "active_slots": [v is not None for v in self.slots],
        }
        if collisions:
            reward -= COLLISION_PENALTY
            self.done = True
            info["done_reason"] = "collision"
        elif self.t >= self.scenario.horizon:
            self.done = True
            info["done_reason"] = "horizon"
        return self.observe(), float(reward), self.done, info

    # ---- observations ----------------------------------------------------

    def observe(self) -> np.ndarray:
        """(n_slots, OBS_DIM) observation block; inactive slots are zero."""
        obs = np.zeros((self.n_slots, OBS_DIM))
        if self._snapshot is None:
            self._post_step_snapshot()
        snap = self._snapshot
        idx_of = {s.id: i for i, s in enumerate(self.states)}
        for slot, vid in enumerate(self.slots):
            if vid is None or vid not in idx_of:
                continue
            i = idx_of[vid]
            obs[slot] = build_observation(
                snap["vel"][i], snap["lead_v"][i], snap["fol_v"][i],
                snap["lead_gap"][i], snap["fol_gap"][i], self.reward_config.v_des,
            )
        return obs

    def fleet_speeds(self) -> np.ndarray:
        return np.array([s.v for s in self.states])
