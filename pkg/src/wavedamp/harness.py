"""Experiment orchestration: multi-seed training runs, deterministic
evaluation, the synthetic car-following corpus, the knowledge-vs-vanilla
dynamics comparison, and the CSV exporters consumed by the plotting frontend.

All CSVs start with a `# schema:` comment line and print floats with full
round-trip precision, so reruns are byte-identical and aggregates can be
recomputed exactly from the per-seed files.
"""
from __future__ import annotations

import concurrent.futures
import copy
import csv
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .agent import AgentConfig, ResidualAgent
from .config import ExperimentConfig
from .controllers import IdmParams, idm_accel, idm_accel_noisy, EMERGENCY_DECEL
from .env import TrafficEnv
from .nn import Mlp, MomentumSgd

log = logging.getLogger("wavedamp")

METRIC_COLUMNS = [
    "iteration", "episode_return", "avg_speed", "speed_std", "eps_m", "k_star",
    "c_bound", "eta_virtual", "eps_pi", "kl", "accepted", "model_loss",
    "value_loss", "actual_steps", "wall_time_s",
]
AGGREGATE_COLUMNS = [
    "episode_return", "avg_speed", "speed_std", "eps_m", "k_star", "c_bound",
]
INT_COLUMNS = {"iteration", "k_star", "accepted", "actual_steps"}

METRICS_SCHEMA = "wavedamp.metrics/1"
AGGREGATE_SCHEMA = "wavedamp.metrics-aggregate/1"
TRAJECTORY_SCHEMA = "wavedamp.trajectories/1"
CF_DATASET_SCHEMA = "wavedamp.cf-dataset/1"
MODEL_COMPARE_SCHEMA = "wavedamp.model-compare/1"
MODEL_COMPARE_LOSS_SCHEMA = "wavedamp.model-compare-loss/1"


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    return repr(v)


def write_csv(path: str, schema: str, columns: list[str], rows: list[dict]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema: {schema}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([
                str(row[c]) if isinstance(row[c], str) else _fmt(row[c])
                for c in columns
            ])
    os.replace(tmp, path)


def read_csv(path: str, expected_schema: str | None = None) -> tuple[list[str], list[dict]]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("# schema:"):
            raise ValueError(f"{path} is missing the schema header")
        schema = first.split(":", 1)[1].strip()
        if expected_schema and schema != expected_schema:
            raise ValueError(f"{path} holds schema {schema!r}, expected {expected_schema!r}")
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {}
            for key, val in raw.items():
                try:
                    row[key] = int(val) if key in INT_COLUMNS else float(val)
                except (TypeError, ValueError):
                    row[key] = val
            rows.append(row)
        return list(reader.fieldnames or []), rows


# ---- training runs ---------------------------------------------------------


def _train_one_seed(config: ExperimentConfig, seed: int) -> tuple[int, list[dict], str]:
    agent = ResidualAgent(config.agent, seed=seed)
    out_dir = config.run.out_dir
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    rows = []
    for k in range(config.run.iterations):
        row = agent.train_iteration()
        if not config.run.record_timings:
            row["wall_time_s"] = math.nan
        rows.append(row)
        if (k + 1) % config.run.save_every == 0:
            agent.save_checkpoint(
                os.path.join(ckpt_dir, f"{agent.variant}_seed{seed}_iter{k + 1}.json")
            )
        log.info(
            "seed %d iter %d return %.2f speed %.2f std %.2f eps_m %.3f k* %d",
            seed, row["iteration"], row["episode_return"], row["avg_speed"],
            row["speed_std"], row["eps_m"], row["k_star"],
        )
    final_path = os.path.join(ckpt_dir, f"{agent.variant}_seed{seed}_final.json")
    agent.save_checkpoint(final_path)
    return seed, rows, final_path


def run(config: ExperimentConfig) -> dict:
    """Train every configured seed; writes per-seed metrics CSVs, the
    cross-seed aggregate, and checkpoints. Returns the output paths."""
    config.validate()
    out_dir = config.run.out_dir
    os.makedirs(out_dir, exist_ok=True)
    seeds = list(config.run.seeds)
    results: dict[int, tuple[list[dict], str]] = {}
    if config.run.workers > 1 and len(seeds) > 1:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=min(config.run.workers, len(seeds))
        ) as pool:
            futures = [pool.submit(_train_one_seed, config, s) for s in seeds]
            for fut in concurrent.futures.as_completed(futures):
                seed, rows, ckpt = fut.result()
                results[seed] = (rows, ckpt)
    else:
        for s in seeds:
            seed, rows, ckpt = _train_one_seed(config, s)
            results[seed] = (rows, ckpt)

    seed_files = {}
    for s in seeds:
        rows, _ = results[s]
        path = os.path.join(out_dir, f"metrics_seed{s}.csv")
        write_csv(path, METRICS_SCHEMA, METRIC_COLUMNS, rows)
        seed_files[s] = path
    agg_path = os.path.join(out_dir, "metrics_aggregate.csv")
    aggregate_metrics(list(seed_files.values()), agg_path)
    return {
        "seed_files": seed_files,
        "aggregate": agg_path,
        "checkpoints": {s: results[s][1] for s in seeds},
    }


def aggregate_metrics(seed_files: list[str], out_path: str) -> None:
    """Per-iteration mean and population std across seeds, recomputed from
    the written per-seed files so a reader can verify it bit for bit."""
    per_seed = [read_csv(p, METRICS_SCHEMA)[1] for p in seed_files]
    n_iter = min(len(rows) for rows in per_seed)
    out_rows = []
    for k in range(n_iter):
        row = {"iteration": per_seed[0][k]["iteration"], "n_seeds": len(per_seed)}
        for col in AGGREGATE_COLUMNS:
            vals = np.array([float(rows[k][col]) for rows in per_seed])
            row[f"{col}_mean"] = float(vals.mean())
            row[f"{col}_std"] = float(vals.std())
        out_rows.append(row)
    columns = ["iteration", "n_seeds"] + [
        f"{c}_{suffix}" for c in AGGREGATE_COLUMNS for suffix in ("mean", "std")
    ]
    write_csv(out_path, AGGREGATE_SCHEMA, columns, out_rows)


# ---- evaluation ------------------------------------------------------------


def _baseline_agent(config: AgentConfig, seed: int, baseline: str) -> ResidualAgent:
    cfg = copy.deepcopy(config)
    cfg.variant = "proposed" if baseline == "pi" else "vanilla-trpo"
    return ResidualAgent(cfg, seed=seed)


def _checkpoint_agent(source: str, config: AgentConfig, seed: int) -> ResidualAgent:
    cfg = copy.deepcopy(config)
    with open(source, encoding="utf-8") as fh:
        cfg.variant = json.load(fh)["variant"]
    agent = ResidualAgent(cfg, seed=seed)
    agent.load_checkpoint(source)
    return agent


def evaluate(
    source: str,
    config: AgentConfig,
    episodes: int = 3,
    seed: int = 0,
) -> dict:
    """Deterministic evaluation of a checkpoint or a named baseline.

    `source` is a checkpoint path, "pi" (initial controller only), or "idm"
    (no CAV control at all: every vehicle drives by the noisy IDM)."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    if source == "idm":
        env = TrafficEnv(config.scenario, config.reward, config.idm,
                         seed=seed, n_cavs=0)
        returns, speeds, stds = [], [], []
        ss = np.random.SeedSequence(seed)
        for child in ss.spawn(episodes):
            env.reset(seed=child)
            total, ms, sd = 0.0, [], []
            done = False
            while not done:
                _, r, done, info = env.step(np.zeros(env.n_slots))
                total += r
                ms.append(info["mean_speed"])
                sd.append(info["speed_std"])
            returns.append(total)
            speeds.append(float(np.mean(ms)))
            stds.append(float(np.mean(sd)))
        return {
            "reward": float(np.mean(returns)),
            "avg_speed": float(np.mean(speeds)),
            "speed_std": float(np.mean(stds)),
            "episodes": episodes,
        }
    if source == "pi":
        agent = _baseline_agent(config, seed, "pi")
    else:
        agent = _checkpoint_agent(source, config, seed)
    return agent.evaluate(episodes)


def export_trajectories(
    source: str,
    config: AgentConfig,
    out_path: str,
    seed: int = 0,
) -> int:
    """Write one deterministic episode as space-time rows
    (t, vehicle_id, route_pos, velocity, kind); returns the row count.

    Merge-network ramp positions are projected onto the highway coordinate
    (negative upstream of the junction) so trajectories stay continuous."""
    if source == "idm":
        env = TrafficEnv(config.scenario, config.reward, config.idm, seed=seed, n_cavs=0)
        agent = None
    else:
        agent = (_baseline_agent(config, seed, "pi") if source == "pi"
                 else _checkpoint_agent(source, config, seed))
        env = agent.env
    obs = (
        env.reset(seed=np.random.SeedSequence(seed).spawn(1)[0])
        if agent is None
        else agent._reset_env()
    )
    net = env.network
    rows = []
    done = False
    t = 0
    dt = config.scenario.dt
    while not done:
        if agent is None:
            actions = np.zeros(env.n_slots)
        else:
            actions, _, _ = agent.act(obs, deterministic=True)
        obs, _, done, _ = env.step(actions)
        t += 1
        for s in env.states:
            pos = s.pos
            if s.stream == "ramp":
                pos = net.merge_point - (net.ramp_length - s.pos)
            rows.append({
                "t": t * dt, "vehicle_id": s.id, "route_pos": pos,
                "velocity": s.v, "kind": s.kind,
            })
    write_csv(out_path, TRAJECTORY_SCHEMA,
              ["t", "vehicle_id", "route_pos", "velocity", "kind"], rows)
    return len(rows)


# ---- car-following corpus ---------------------------------------------------

CF_LABELS = ("accelerate", "decelerate", "cruise", "emergency-brake")


@dataclass
class CfDataset:
    follower_v: np.ndarray
    leader_v: np.ndarray
    gap: np.ndarray
    accel: np.ndarray
    label: np.ndarray   # scenario tag per sample
    split: np.ndarray   # train / val / test


def simulate_following(
    v_f: float,
    v_l: float,
    gap: float,
    leader_accel: float,
    steps: int,
    idm: IdmParams,
    rng: np.random.Generator,
    dt: float = 0.1,
    profile_steps: int = 30,
):
    """Leader runs `leader_accel` for the profile phase then holds speed; the
    follower runs the noisy IDM. Returns (samples, crashed) where each sample
    is (follower_v, leader_v, gap, executed follower accel)."""
    samples: list[tuple] = []
    for k in range(steps):
        a_f = float(idm_accel_noisy(v_f, v_l, gap, idm, rng))
        samples.append((v_f, v_l, gap, a_f))
        a_l = leader_accel if k < profile_steps else 0.0
        v_l_new = max(0.0, v_l + a_l * dt)
        v_f_new = max(0.0, v_f + a_f * dt)
        gap = gap + (v_l_new - v_f_new) * dt
        v_l, v_f = v_l_new, v_f_new
        if gap <= 0.5:
            return samples, True
    return samples, False


def generate_cf_dataset(
    n_target: int = 50_000,
    idm: IdmParams | None = None,
    seed: int = 0,
    dt: float = 0.1,
    steps_per_trajectory: int = 80,
    profile_steps: int = 30,
) -> CfDataset:
    """Synthetic leader-follower corpus over four driving regimes.

    Each trajectory draws initial speeds and gap, runs the leader through its
    regime profile (then constant speed) and the follower through the noisy
    IDM. Trajectories that reach a collision are discarded. The split is an
    exact 70/10/20 partition by random permutation.
    """
    idm = idm or IdmParams()
    rng = np.random.default_rng(seed)
    cols: dict[str, list] = {k: [] for k in ("v_f", "v_l", "gap", "a", "label")}
    label_idx = 0
    while len(cols["a"]) < n_target:
        label = CF_LABELS[label_idx % len(CF_LABELS)]
        label_idx += 1
        v_l = rng.uniform(3.0, 28.0)
        v_f = rng.uniform(0.0, 28.0)
        gap = rng.uniform(5.0, 50.0)
        if label == "accelerate":
            a_profile = rng.uniform(0.0, 2.0)
        elif label == "decelerate":
            a_profile = -rng.uniform(0.0, 2.0)
        elif label == "emergency-brake":
            a_profile = -2.0
        else:
            a_profile = 0.0
        samples, crashed = simulate_following(
            v_f, v_l, gap, a_profile, steps_per_trajectory, idm, rng,
            dt=dt, profile_steps=profile_steps,
        )
        if crashed:
            continue
        for v_f0, v_l0, g0, a0 in samples:
            cols["v_f"].append(v_f0)
            cols["v_l"].append(v_l0)
            cols["gap"].append(g0)
            cols["a"].append(a0)
            cols["label"].append(label)
    n = len(cols["a"])
    perm = rng.permutation(n)
    n_train = round(0.7 * n)
    n_val = round(0.1 * n)
    split = np.empty(n, dtype=object)
    split[perm[:n_train]] = "train"
    split[perm[n_train:n_train + n_val]] = "val"
    split[perm[n_train + n_val:]] = "test"
    return CfDataset(
        follower_v=np.array(cols["v_f"]),
        leader_v=np.array(cols["v_l"]),
        gap=np.array(cols["gap"]),
        accel=np.array(cols["a"]),
        label=np.array(cols["label"], dtype=object),
        split=split,
    )


def save_cf_dataset(ds: CfDataset, path: str) -> None:
    rows = [
        {
            "follower_v": ds.follower_v[k], "leader_v": ds.leader_v[k],
            "gap": ds.gap[k], "accel": ds.accel[k],
            "label": str(ds.label[k]), "split": str(ds.split[k]),
        }
        for k in range(len(ds.accel))
    ]
    write_csv(path, CF_DATASET_SCHEMA,
              ["follower_v", "leader_v", "gap", "accel", "label", "split"], rows)


def load_cf_dataset(path: str) -> CfDataset:
    _, rows = read_csv(path, CF_DATASET_SCHEMA)
    return CfDataset(
        follower_v=np.array([r["follower_v"] for r in rows], dtype=float),
        leader_v=np.array([r["leader_v"] for r in rows], dtype=float),
        gap=np.array([r["gap"] for r in rows], dtype=float),
        accel=np.array([r["accel"] for r in rows], dtype=float),
        label=np.array([r["label"] for r in rows], dtype=object),
        split=np.array([r["split"] for r in rows], dtype=object),
    )


# ---- knowledge-vs-vanilla comparison ----------------------------------------


class CfRegressor:
    """Acceleration regressor on (follower speed, leader speed, gap).

    knowledge=True predicts the residual on top of the clipped deterministic
    IDM; knowledge=False predicts the acceleration directly. Both share the
    same architecture, input normalization, and optimizer; outputs stay in
    raw acceleration units so losses are directly comparable.
    """

    def __init__(self, knowledge: bool, idm: IdmParams | None = None,
                 hidden=(64, 64), seed: int = 0, lr: float = 1e-3):
        self.knowledge = knowledge
        self.idm = idm or IdmParams()
        self.net = Mlp.initialized(
            [3, *hidden, 1], np.random.default_rng(seed), "identity",
            output_scale=0.0 if knowledge else 0.01,
        )
        self.in_mean = np.zeros(3)
        self.in_std = np.ones(3)
        self._opt = MomentumSgd(lr=lr, momentum=0.9)

    def _features(self, v_f, v_l, gap):
        x = np.stack([v_f, v_l, gap], axis=1)
        return (x - self.in_mean) / self.in_std

    def _base(self, v_f, v_l, gap):
        if not self.knowledge:
            return np.zeros_like(v_f)
        return np.clip(
            idm_accel(v_f, v_l, np.maximum(gap, 0.1), self.idm),
            -EMERGENCY_DECEL, self.idm.a_max,
        )

    def fit(self, v_f, v_l, gap, accel, steps: int = 3000, batch: int = 256,
            rng: np.random.Generator | None = None, record_every: int = 0):
        """Minibatch momentum SGD on the squared error; optionally records
        (step, loss) pairs. Returns the loss curve (possibly empty)."""
        rng = rng or np.random.default_rng(0)
        self.in_mean = np.stack([v_f, v_l, gap], axis=1).mean(axis=0)
        self.in_std = np.maximum(np.stack([v_f, v_l, gap], axis=1).std(axis=0), 1e-6)
        target = accel - self._base(v_f, v_l, gap)
        x_all = self._features(v_f, v_l, gap)
        n = len(accel)
        curve = []
        for step in range(steps):
            idx = rng.integers(0, n, size=min(batch, n))
            x = x_all[idx]
            y = target[idx]
            pred, cache = self.net.forward_cached(x)
            err = pred[:, 0] - y
            loss = float(np.mean(err ** 2))
            grad = self.net.backward(cache, (2.0 * err / len(y))[:, None])
            self._opt.step(self.net, grad)
            if record_every and step % record_every == 0:
                curve.append((step, loss))
        return curve

    def predict(self, v_f, v_l, gap):
        out = self.net.forward(self._features(v_f, v_l, gap))[:, 0]
        return out + self._base(v_f, v_l, gap)

    def test_rmse(self, v_f, v_l, gap, accel) -> float:
        err = self.predict(v_f, v_l, gap) - accel
        return float(np.sqrt(np.mean(err ** 2)))


def compare_dynamics_models(
    ds: CfDataset,
    fractions=(0.1, 0.25, 0.5, 0.75, 1.0),
    repeats: int = 5,
    steps: int = 3000,
    seed: int = 0,
    idm: IdmParams | None = None,
) -> tuple[list[dict], list[dict]]:
    """Train the knowledge-anchored and the plain regressor on subsamples of
    the training split and score both on the fixed test split.

    Returns (comparison rows, full-data loss-curve rows)."""
    train = ds.split == "train"
    test = ds.split == "test"
    tr = (ds.follower_v[train], ds.leader_v[train], ds.gap[train], ds.accel[train])
    te = (ds.follower_v[test], ds.leader_v[test], ds.gap[test], ds.accel[test])
    n_train = len(tr[0])
    rows = []
    rng = np.random.default_rng(seed)
    for fraction in fractions:
        for repeat in range(repeats):
            m = max(1, int(round(fraction * n_train)))
            pick = rng.choice(n_train, size=m, replace=False)
            sub = tuple(arr[pick] for arr in tr)
            for name, knowledge in (("knowledge", True), ("vanilla", False)):
                reg = CfRegressor(knowledge, idm=idm,
                                  seed=seed * 1000 + repeat * 10 + knowledge)
                reg.fit(*sub, steps=steps,
                        rng=np.random.default_rng(seed * 77 + repeat))
                rows.append({
                    "fraction": fraction, "repeat": repeat, "model": name,
                    "test_rmse": reg.test_rmse(*te), "n_train": m,
                })
                log.info("fraction %.2f repeat %d %s rmse %.4f",
                         fraction, repeat, name, rows[-1]["test_rmse"])
    loss_rows = []
    for name, knowledge in (("knowledge", True), ("vanilla", False)):
        reg = CfRegressor(knowledge, idm=idm, seed=seed)
        curve = reg.fit(*tr, steps=steps, rng=np.random.default_rng(seed + 5),
                        record_every=max(1, steps // 200))
        for step, loss in curve:
            loss_rows.append({"model": name, "step": step, "loss": loss})
    return rows, loss_rows


def save_model_compare(rows: list[dict], loss_rows: list[dict], out_dir: str) -> dict:
    cmp_path = os.path.join(out_dir, "model_compare.csv")
    loss_path = os.path.join(out_dir, "model_compare_loss.csv")
    write_csv(cmp_path, MODEL_COMPARE_SCHEMA,
              ["fraction", "repeat", "model", "test_rmse", "n_train"], rows)
    write_csv(loss_path, MODEL_COMPARE_LOSS_SCHEMA, ["model", "step", "loss"], loss_rows)
    return {"compare": cmp_path, "loss": loss_path}
