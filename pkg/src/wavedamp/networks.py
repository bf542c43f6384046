"""Road network topologies and vehicle bookkeeping.

Three single-lane topologies are supported: a closed ring, a figure-eight
(two loops sharing an unsignalized crossing), and a highway with an on-ramp
merge. Positions live on a one-dimensional route coordinate; closed networks
wrap modulo the route length.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

VEHICLE_LENGTH = 5.0     # m, uniform for all vehicles
FREE_GAP = 1.0e6         # reported gap when a vehicle has no leader
HIGHWAY_ENTRY_SPEED = 25.0  # m/s, merge highway inflow
RAMP_ENTRY_SPEED = 10.0     # m/s, merge ramp inflow

CAV = "CAV"
HDV = "HDV"


@dataclass
class ScenarioConfig:
    """Scenario parameters; geometry ranges are sampled per episode."""

    kind: str = "ring"
    ring_length_range: tuple[float, float] = (220.0, 270.0)
    loop_radius_range: tuple[float, float] = (32.0, 35.0)
    highway_length: float = 700.0
    ramp_length: float = 100.0
    n_vehicles: int = 22
    cav_penetration: float = 0.10
    highway_inflow: float = 2000.0   # veh/hr
    ramp_inflow: float = 100.0       # veh/hr
    dt: float = 0.1
    horizon: int = 3000
    warmup: int = 750
    seed: int = 0
    init_jitter: float = 1.0         # m, positional jitter at reset
    max_cav_slots: int = 5           # merge: observation/action slots

    def validate(self) -> None:
        if self.kind not in ("ring", "figure-eight", "merge"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        lo, hi = self.ring_length_range
        if not (lo <= hi and lo >= 220.0 - 1e-9 and hi <= 270.0 + 1e-9):
            raise ValueError("ring_length_range must lie within [220, 270]")
        rlo, rhi = self.loop_radius_range
        if not (rlo <= rhi and rlo >= 32.0 - 1e-9 and rhi <= 35.0 + 1e-9):
            raise ValueError("loop_radius_range must lie within [32, 35]")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.kind in ("ring", "figure-eight") and self.n_vehicles < 2:
            raise ValueError("closed networks need at least 2 vehicles")
        if self.highway_inflow < 0 or self.ramp_inflow < 0:
            raise ValueError("inflow rates must be >= 0")
        if not 0.0 <= self.cav_penetration <= 1.0:
            raise ValueError("cav_penetration must be a fraction")

    @classmethod
    def ring(cls, **kw) -> "ScenarioConfig":
        return cls(kind="ring", n_vehicles=kw.pop("n_vehicles", 22), **kw)

    @classmethod
    def figure_eight(cls, **kw) -> "ScenarioConfig":
        return cls(kind="figure-eight", n_vehicles=kw.pop("n_vehicles", 14), **kw)

    @classmethod
    def merge(cls, **kw) -> "ScenarioConfig":
        return cls(kind="merge", n_vehicles=kw.pop("n_vehicles", 0), **kw)


@dataclass(slots=True)
class VehicleState:
    """One vehicle on the route coordinate. `stream` distinguishes the merge
    network's highway and ramp approaches; closed networks leave it None."""

    id: str
    pos: float
    v: float
    accel: float = 0.0
    length: float = VEHICLE_LENGTH
    kind: str = HDV
    stream: str | None = None

    def copy(self) -> "VehicleState":
        return replace(self)


@dataclass
class Network:
    kind: str
    length: float = 0.0              # closed-route length (ring/figure-eight)
    loop_radius: float = 0.0         # figure-eight
    highway_length: float = 0.0      # merge
    ramp_length: float = 0.0         # merge
    merge_point: float = 0.0         # merge: route coordinate of the junction
    conflict_zones: tuple = ()       # figure-eight: two (entrance, exit) intervals
    approach_window: float = 15.0    # figure-eight: commit window before entrance
    min_insertion_gap: float = 10.0  # merge: headroom needed to spawn
    # figure-eight right-of-way bookkeeping (mutable per episode)
    holder_id: str | None = None
    holder_zone: int = -1
    commit_step: dict = field(default_factory=dict)
    # merge bookkeeping (mutable per episode)
    spawn_counts: dict = field(default_factory=dict)
    yielding: set = field(default_factory=set)

    @property
    def closed(self) -> bool:
        return self.kind in ("ring", "figure-eight")


CONFLICT_ZONE_LENGTH = 10.0  # m, the shared crossing box of the figure-eight


def build_network(config: ScenarioConfig, rng: np.random.Generator) -> Network:
    """Sample a concrete geometry from the configured ranges."""
    config.validate()
    if config.kind == "ring":
        lo, hi = config.ring_length_range
        length = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        return Network(kind="ring", length=length)
    if config.kind == "figure-eight":
        rlo, rhi = config.loop_radius_range
        radius = float(rng.uniform(rlo, rhi)) if rhi > rlo else float(rlo)
        length = 4.0 * math.pi * radius  # two loops of equal radius
        # the same physical crossing is traversed at quarter and three-quarter
        # points of the canonical route
        e1, e2 = 0.25 * length, 0.75 * length
        zones = ((e1, e1 + CONFLICT_ZONE_LENGTH), (e2, e2 + CONFLICT_ZONE_LENGTH))
        return Network(
            kind="figure-eight", length=length, loop_radius=radius,
            conflict_zones=zones,
        )
    return Network(
        kind="merge",
        highway_length=config.highway_length,
        ramp_length=config.ramp_length,
        merge_point=600.0,
        spawn_counts={"highway": 0, "ramp": 0},
    )


def step_kinematics(
    network: Network,
    states: list[VehicleState],
    accels: dict[str, float],
    dt: float,
) -> list[VehicleState]:
    """First-order Euler update: v' = max(0, v + a dt), pos' = pos + v' dt.

    Closed routes wrap positions modulo the route length; on the merge
    network, ramp vehicles that reach the ramp end transfer onto the highway
    at the merge point.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    for s in states:
        a = accels[s.id]
        v_new = max(0.0, s.v + a * dt)
        pos_new = s.pos + v_new * dt
        if network.closed:
            pos_new = pos_new % network.length
        elif s.stream == "ramp" and pos_new >= network.ramp_length:
            s.stream = "highway"
            pos_new = network.merge_point + (pos_new - network.ramp_length)
            network.yielding.discard(s.id)
        s.v = v_new
        s.pos = pos_new
        s.accel = a
    return states


def remove_exited(network: Network, states: list[VehicleState]) -> list[str]:
    """Drop merge-network vehicles past the highway end; returns their ids."""
    if network.kind != "merge":
        return []
    exited = [s.id for s in states if s.stream == "highway" and s.pos > network.highway_length]
    if exited:
        gone = set(exited)
        states[:] = [s for s in states if s.id not in gone]
        network.yielding -= gone
    return exited


def _closed_order(states: list[VehicleState]) -> np.ndarray:
    pos = np.array([s.pos for s in states])
    return np.argsort(pos, kind="stable")


def ring_leader_arrays(pos: np.ndarray, lengths: np.ndarray, vel: np.ndarray, L: float):
    """Vectorized nearest-ahead resolution on a closed route.

    Returns (leader index, bumper gap, leader velocity) arrays aligned with
    the input order. A single vehicle leads itself across the whole loop.
    """
    n = pos.shape[0]
    leader_idx = np.empty(n, dtype=int)
    gaps = np.empty(n)
    if n == 1:
        leader_idx[0] = 0
        gaps[0] = L - lengths[0]
        return leader_idx, gaps, vel.copy()
    order = np.argsort(pos, kind="stable")
    nxt = np.roll(order, -1)
    raw = (pos[nxt] - pos[order]) % L
    leader_idx[order] = nxt
    gaps[order] = raw - lengths[nxt]
    return leader_idx, gaps, vel[leader_idx]


def ring_follower_arrays(pos: np.ndarray, lengths: np.ndarray, vel: np.ndarray, L: float):
    """Vectorized nearest-behind resolution on a closed route; gaps measure
    from the follower's front bumper to the ego rear bumper."""
    n = pos.shape[0]
    fol_idx = np.empty(n, dtype=int)
    gaps = np.empty(n)
    if n == 1:
        fol_idx[0] = 0
        gaps[0] = L - lengths[0]
        return fol_idx, gaps, vel.copy()
    order = np.argsort(pos, kind="stable")
    prv = np.roll(order, 1)
    raw = (pos[order] - pos[prv]) % L
    fol_idx[order] = prv
    gaps[order] = raw - lengths[order]
    return fol_idx, gaps, vel[fol_idx]


def closed_leader_arrays(network: Network, states: list[VehicleState]):
    """Per-vehicle (leader index, bumper gap, leader velocity) on a closed
    route, ignoring any right-of-way overrides."""
    pos = np.array([s.pos for s in states])
    vel = np.array([s.v for s in states])
    lengths = np.array([s.length for s in states])
    return ring_leader_arrays(pos, lengths, vel, network.length)


def _next_zone_entrance_dist(network: Network, pos: float) -> float:
    L = network.length
    return min((z[0] - pos) % L for z in network.conflict_zones)


def _in_zone(network: Network, pos: float) -> int:
    """Index of the conflict-zone interval containing the front bumper, or -1."""
    for k, (e, x) in enumerate(network.conflict_zones):
        if e <= pos < x:
            return k
    return -1


def update_right_of_way(network: Network, states: list[VehicleState], step: int) -> None:
    """First-committed-first-served reservation on the figure-eight crossing.

    A vehicle commits when its front bumper enters the approach window before
    either zone entrance; the earliest committer holds the reservation until
    its rear bumper clears the zone exit.
    """
    if network.kind != "figure-eight":
        return
    by_id = {s.id: s for s in states}
    L = network.length

    # release: holder's rear bumper past its zone exit
    if network.holder_id is not None:
        holder = by_id.get(network.holder_id)
        if holder is None:
            network.holder_id = None
        else:
            entrance, exit_ = network.conflict_zones[network.holder_zone]
            rear = (holder.pos - holder.length) % L
            travelled = (rear - entrance) % L
            zone_len = exit_ - entrance
            # rear past the exit but not yet wrapped most of the loop
            if zone_len < travelled < L / 2:
                network.commit_step.pop(network.holder_id, None)
                network.holder_id = None
                network.holder_zone = -1

    # record commitments
    for s in states:
        if s.id in network.commit_step:
            continue
        d = _next_zone_entrance_dist(network, s.pos)
        if d <= network.approach_window or _in_zone(network, s.pos) >= 0:
            network.commit_step[s.id] = step

    # prune stale commitments (vehicle moved on past the zone without holding)
    for vid in list(network.commit_step):
        s = by_id.get(vid)
        if s is None:
            network.commit_step.pop(vid)
            continue
        if vid == network.holder_id:
            continue
        d = _next_zone_entrance_dist(network, s.pos)
        if d > network.approach_window and _in_zone(network, s.pos) < 0:
            network.commit_step.pop(vid)

    # grant to the earliest committer
    if network.holder_id is None and network.commit_step:
        def key(vid):
            s = by_id[vid]
            return (network.commit_step[vid], _next_zone_entrance_dist(network, s.pos), vid)

        winner = min(network.commit_step, key=key)
        network.holder_id = winner
        w = by_id[winner]
        zone = _in_zone(network, w.pos)
        if zone < 0:
            # the zone it is about to enter
            dists = [((z[0] - w.pos) % L, k) for k, z in enumerate(network.conflict_zones)]
            zone = min(dists)[1]
        network.holder_zone = zone


def all_leaders(network: Network, states: list[VehicleState]):
    """Leader resolution for every vehicle at once.

    Returns (leader ids, gaps, leader velocities); a None id marks a virtual
    leader (figure-eight right-of-way wall) or free road (merge boundary).
    """
    n = len(states)
    ids = [s.id for s in states]
    if n == 0:
        return [], np.empty(0), np.empty(0)

    if network.closed:
        leader_idx, gaps, lead_v = closed_leader_arrays(network, states)
        leader_ids = [ids[j] for j in leader_idx]
        if network.kind == "figure-eight":
            for i, s in enumerate(states):
                if s.id == network.holder_id or _in_zone(network, s.pos) >= 0:
                    continue
                d = _next_zone_entrance_dist(network, s.pos)
                if d < gaps[i]:
                    leader_ids[i] = None
                    gaps[i] = d
                    lead_v[i] = 0.0
        return leader_ids, gaps, lead_v

    # merge network: per-stream nearest-ahead, plus junction projection for
    # ramp vehicles close to the merge point
    leader_ids: list[str | None] = [None] * n
    gaps = np.full(n, FREE_GAP)
    lead_v = np.array([s.v for s in states])

    hw = [(s.pos, i) for i, s in enumerate(states) if s.stream == "highway"]
    rp = [(s.pos, i) for i, s in enumerate(states) if s.stream == "ramp"]
    for group in (hw, rp):
        group.sort()
        for rank in range(len(group) - 1):
            pos_i, i = group[rank]
            pos_j, j = group[rank + 1]
            leader_ids[i] = ids[j]
            gaps[i] = pos_j - pos_i - states[j].length
            lead_v[i] = states[j].v

    yield_window = 50.0
    for pos_i, i in rp:
        d_ego = network.ramp_length - pos_i
        if d_ego > yield_window:
            continue
        # project every vehicle onto distance-to-merge-point; anything with a
        # smaller projected distance is downstream of the ramp vehicle
        projected = None
        follower = None
        for j, s in enumerate(states):
            if j == i or s.stream != "highway":
                continue
            d_j = network.merge_point - s.pos
            if d_j < d_ego and (projected is None or d_j > projected[0]):
                projected = (d_j, j)
            if d_j > d_ego and (follower is None or d_j < follower[0]):
                follower = (d_j, j)
        vid = ids[i]
        accept = True
        if follower is not None:
            # gap acceptance: hold at the ramp end unless the projected
            # highway follower can absorb the merge without emergency braking
            v_ego = states[i].v
            d_f, j = follower
            v_f = states[j].v
            dv = max(0.0, v_f - v_ego)
            t_merge = d_ego / max(v_ego, 1.0)
            rear_pred = d_f - d_ego - states[i].length - dv * t_merge
            required = 2.0 + 0.5 * v_f + dv * dv / 4.0
            accept = rear_pred >= required
        if accept:
            network.yielding.discard(vid)
        elif vid not in network.yielding:
            # start yielding only while stopping before the bar is still
            # physically possible (b_emergency = 3); afterwards the vehicle
            # is committed and carries on. Once yielding, stay yielding
            # until a gap is accepted.
            v_ego = states[i].v
            if d_ego - 1.0 > v_ego * v_ego / 6.0 + v_ego * 0.1:
                network.yielding.add(vid)
        if vid in network.yielding:
            # stop bar at the ramp end; the real same-stream leader may
            # still be the binding constraint inside the ramp queue
            if d_ego < gaps[i]:
                leader_ids[i] = None
                gaps[i] = d_ego
                lead_v[i] = 0.0
        elif projected is not None:
            d_j, j = projected
            gap = d_ego - d_j - states[j].length
            if gap < gaps[i]:
                leader_ids[i] = ids[j]
                gaps[i] = gap
                lead_v[i] = states[j].v
    return leader_ids, gaps, lead_v


def leader_of(network: Network, states: list[VehicleState], vehicle_id: str):
    """(leader id or None-for-virtual, bumper gap, leader velocity) for one
    vehicle. A single vehicle on a closed route leads itself with gap
    L minus its own length."""
    idx = next((i for i, s in enumerate(states) if s.id == vehicle_id), None)
    if idx is None:
        raise KeyError(f"unknown vehicle {vehicle_id!r}")
    leader_ids, gaps, lead_v = all_leaders(network, states)
    return leader_ids[idx], float(gaps[idx]), float(lead_v[idx])


def all_followers(network: Network, states: list[VehicleState]):
    """Per-vehicle (follower id, gap behind ego's rear bumper, follower
    velocity); free-boundary vehicles get a virtual far-away follower."""
    n = len(states)
    ids = [s.id for s in states]
    fol_ids: list[str | None] = [None] * n
    gaps = np.full(n, FREE_GAP)
    fol_v = np.array([s.v for s in states])
    if n == 0:
        return fol_ids, gaps, fol_v
    if network.closed:
        pos = np.array([s.pos for s in states])
        vel = np.array([s.v for s in states])
        lengths = np.array([s.length for s in states])
        fol_idx, fgaps, fvel = ring_follower_arrays(pos, lengths, vel, network.length)
        return [ids[j] for j in fol_idx], fgaps, fvel
    hw = sorted((s.pos, i) for i, s in enumerate(states) if s.stream == "highway")
    rp = sorted((s.pos, i) for i, s in enumerate(states) if s.stream == "ramp")
    for group in (hw, rp):
        for rank in range(1, len(group)):
            pos_i, i = group[rank]
            pos_j, j = group[rank - 1]
            fol_ids[i] = ids[j]
            gaps[i] = pos_i - pos_j - states[i].length
            fol_v[i] = states[j].v
    return fol_ids, gaps, fol_v


def spawn_inflows(
    network: Network,
    states: list[VehicleState],
    rng: np.random.Generator,
    config: ScenarioConfig,
    active_cavs: int = 0,
) -> list[VehicleState]:
    """Bernoulli inflow at the merge-network boundaries.

    Each stream inserts with probability rate*dt/3600 per step, provided the
    entry segment has at least min_insertion_gap of headroom; blocked
    insertions are silently deferred. Highway entrants are CAVs with
    probability cav_penetration while a control slot is free.
    """
    if network.kind != "merge":
        return []
    new: list[VehicleState] = []
    for stream, rate, speed in (
        ("highway", config.highway_inflow, HIGHWAY_ENTRY_SPEED),
        ("ramp", config.ramp_inflow, RAMP_ENTRY_SPEED),
    ):
        u = rng.random()
        if rate <= 0 or u >= rate * config.dt / 3600.0:
            continue
        ahead = [s for s in states if s.stream == stream]
        if ahead:
            nearest = min(ahead, key=lambda s: s.pos)
            headroom = nearest.pos - nearest.length
            v_lead = nearest.v
        else:
            headroom, v_lead = FREE_GAP, speed
        if headroom < network.min_insertion_gap:
            continue
        # enter no faster than allows braking to the leader speed within the
        # available headroom at the emergency deceleration (3 m/s^2)
        v_entry = min(
            speed, math.sqrt(v_lead * v_lead + 6.0 * max(0.0, headroom - 2.0))
        )
        kind = HDV
        if stream == "highway":
            if rng.random() < config.cav_penetration and active_cavs + sum(
                1 for s in new if s.kind == CAV
            ) < config.max_cav_slots:
                kind = CAV
        network.spawn_counts[stream] += 1
        vid = f"{stream[:2]}{network.spawn_counts[stream]}"
        new.append(VehicleState(id=vid, pos=0.0, v=v_entry, kind=kind, stream=stream))
    states.extend(new)
    return new


def detect_collisions(network: Network, states: list[VehicleState]):
    """Ordered (follower, leader) pairs whose bumper gap is <= 0."""
    pairs = []
    n = len(states)
    if n < 2:
        return pairs
    ids = [s.id for s in states]
    if network.closed:
        order = _closed_order(states)
        L = network.length
        for rank, i in enumerate(order):
            j = order[(rank + 1) % n]
            if i == j:
                continue
            gap = (states[j].pos - states[i].pos) % L - states[j].length
            if gap <= 0:
                pairs.append((ids[i], ids[j]))
        return pairs
    for stream in ("highway", "ramp"):
        group = sorted((s.pos, i) for i, s in enumerate(states) if s.stream == stream)
        for rank in range(len(group) - 1):
            _, i = group[rank]
            _, j = group[rank + 1]
            gap = states[j].pos - states[i].pos - states[j].length
            if gap <= 0:
                pairs.append((ids[i], ids[j]))
    return pairs


def zone_conflicts(network: Network, states: list[VehicleState]):
    """Figure-eight cross-stream conflicts: pairs of vehicles occupying the
    shared crossing box via different route intervals simultaneously."""
    if network.kind != "figure-eight":
        return []
    occupants: dict[int, list[str]] = {0: [], 1: []}
    for s in states:
        front = s.pos
        rear = front - s.length  # may be negative; zones sit mid-route
        for k, (e, x) in enumerate(network.conflict_zones):
            if front > e and rear < x:  # vehicle span overlaps the zone
                occupants[k].append(s.id)
                break
    return [(a, b) for a in occupants[0] for b in occupants[1]]


def cyclic_order(network: Network, states: list[VehicleState]) -> tuple:
    """Canonical cyclic ordering of vehicle ids on a closed route, rotated to
    start at the lexicographically smallest id (for order-conservation tests)."""
    order = [states[i].id for i in _closed_order(states)]
    k = order.index(min(order))
    return tuple(order[k:] + order[:k])
