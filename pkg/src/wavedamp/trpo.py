"""Trust-region policy optimization over a diagonal Gaussian policy.

The policy mean is a tanh-bounded MLP; the log-std vector is state
independent. Updates follow the classic recipe: importance-weighted
advantage surrogate, natural gradient via conjugate gradient on
Fisher-vector products, and a KL-constrained backtracking line search.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Mlp, MomentumSgd

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class TrpoConfig:
    discount: float = 0.995
    gae_lambda: float = 0.97
    max_kl: float = 1e-2
    cg_iterations: int = 10
    cg_damping: float = 0.1
    cg_residual_tol: float = 1e-10
    backtrack_count: int = 10
    backtrack_ratio: float = 0.8
    value_l2: float = 1e-3
    value_lr: float = 1e-3
    value_passes: int = 25
    fvp_subsample: int = 4096  # cap on states used per Fisher-vector product

    def validate(self) -> None:
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.max_kl <= 0:
            raise ValueError("max_kl must be positive")


class GaussianPolicy:
    """Diagonal Gaussian: mean from an MLP, one log-std per action dim."""

    def __init__(
        self,
        obs_dim: int,
        act_dim: int = 1,
        hidden: tuple[int, ...] = (64, 64),
        rng: np.random.Generator | None = None,
        log_std_init: float = math.log(0.2),
        output_activation: str = "tanh",
    ):
        rng = rng or np.random.default_rng(0)
        self.mean_net = Mlp.initialized(
            [obs_dim, *hidden, act_dim], rng, output_activation, output_scale=0.0
        )
        self.log_std = np.full(act_dim, float(log_std_init))
        self.obs_dim = obs_dim
        self.act_dim = act_dim

    # ---- parameters --------------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.mean_net.n_params + self.act_dim

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.mean_net.get_flat(), self.log_std])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError("flat parameter length mismatch")
        self.mean_net.set_flat(flat[: self.mean_net.n_params])
        self.log_std = flat[self.mean_net.n_params:].copy()

    def clone(self) -> "GaussianPolicy":
        twin = GaussianPolicy.__new__(GaussianPolicy)
        twin.mean_net = Mlp(self.mean_net.layer_sizes, self.mean_net.output_activation)
        twin.mean_net.set_flat(self.mean_net.get_flat())
        twin.log_std = self.log_std.copy()
        twin.obs_dim = self.obs_dim
        twin.act_dim = self.act_dim
        return twin

    # ---- distribution ------------------------------------------------------

    def mean(self, states) -> np.ndarray:
        return self.mean_net.forward(states)

    def sample(self, states, rng: np.random.Generator):
        """Reparameterized draw; returns (actions, log-probs)."""
        states = np.atleast_2d(states)
        mu = self.mean(states)
        std = np.exp(self.log_std)
        actions = mu + std * rng.standard_normal(mu.shape)
        return actions, self._log_prob_given_mean(mu, actions)

    def log_prob(self, states, actions) -> np.ndarray:
        mu = self.mean(np.atleast_2d(states))
        return self._log_prob_given_mean(mu, np.atleast_2d(actions))

    def _log_prob_given_mean(self, mu, actions) -> np.ndarray:
        z = (actions - mu) / np.exp(self.log_std)
        return -0.5 * np.sum(z * z + 2.0 * self.log_std + LOG_2PI, axis=1)

    def kl(self, other: "GaussianPolicy", states) -> np.ndarray:
        """Per-state KL(self || other) between the two diagonal Gaussians."""
        states = np.atleast_2d(states)
        mu_p = self.mean(states)
        mu_q = other.mean(states)
        var_p = np.exp(2.0 * self.log_std)
        var_q = np.exp(2.0 * other.log_std)
        return np.sum(
            other.log_std - self.log_std
            + (var_p + (mu_p - mu_q) ** 2) / (2.0 * var_q)
            - 0.5,
            axis=1,
        )

    def to_dict(self) -> dict:
        return {
            "format": "wavedamp.policy/1",
            "mean_net": self.mean_net.to_dict(),
            "log_std": [float(v) for v in self.log_std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianPolicy":
        if d.get("format") != "wavedamp.policy/1":
            raise ValueError(f"unsupported policy format {d.get('format')!r}")
        net = Mlp.from_dict(d["mean_net"])
        p = cls.__new__(cls)
        p.mean_net = net
        p.log_std = np.array(d["log_std"], dtype=float)
        p.obs_dim = net.layer_sizes[0]
        p.act_dim = net.layer_sizes[-1]
        return p


class ValueNet:
    """Scalar state-value regressor with internal target standardization."""

    def __init__(self, obs_dim: int, hidden: tuple[int, ...] = (64, 64),
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.net = Mlp.initialized([obs_dim, *hidden, 1], rng, "identity", output_scale=0.0)
        self.ret_mean = 0.0
        self.ret_std = 1.0
        self._opt = None

    def predict(self, states) -> np.ndarray:
        out = self.net.forward(np.atleast_2d(states))[:, 0]
        return out * self.ret_std + self.ret_mean

    def to_dict(self) -> dict:
        return {
            "format": "wavedamp.value/1",
            "net": self.net.to_dict(),
            "ret_mean": self.ret_mean,
            "ret_std": self.ret_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValueNet":
        if d.get("format") != "wavedamp.value/1":
            raise ValueError(f"unsupported value format {d.get('format')!r}")
        v = cls.__new__(cls)
        v.net = Mlp.from_dict(d["net"])
        v.ret_mean = float(d["ret_mean"])
        v.ret_std = float(d["ret_std"])
        v._opt = None
        return v


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
    bootstrap_value: float = 0.0,
):
    """Generalized advantage estimation along one trajectory.

    `values[t]` is V(s_t); the bootstrap covers V(s_T) at truncation (zero
    for a terminal end). Returns raw (unnormalized) advantages and the
    matching value-regression targets A + V.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values and dones must have equal length")
    T = len(rewards)
    adv = np.zeros(T)
    next_value = float(bootstrap_value)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        acc = delta + gamma * lam * live * acc
        adv[t] = acc
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    std = adv.std()
    if std < 1e-8:
        return adv - adv.mean()
    return (adv - adv.mean()) / std


def surrogate_loss(policy: GaussianPolicy, states, actions, advantages, old_log_probs):
    """Importance-weighted advantage, to be maximized."""
    ratios = np.exp(policy.log_prob(states, actions) - old_log_probs)
    return float(np.mean(ratios * advantages))


def surrogate_gradient(policy: GaussianPolicy, states, actions, advantages, old_log_probs):
    """Exact gradient of surrogate_loss w.r.t. the policy's flat parameters."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    mu, cache = policy.mean_net.forward_cached(states)
    std = np.exp(policy.log_std)
    z = (actions - mu) / std
    logp = -0.5 * np.sum(z * z + 2.0 * policy.log_std + LOG_2PI, axis=1)
    w = np.exp(logp - old_log_probs) * advantages / len(states)
    # d logp / d mu = z / std
    grad_mean = policy.mean_net.backward(cache, w[:, None] * z / std)
    # d logp / d log_std = z^2 - 1
    grad_log_std = np.sum(w[:, None] * (z * z - 1.0), axis=0)
    return np.concatenate([grad_mean, grad_log_std])


def fisher_vector_product(
    policy: GaussianPolicy, states, v: np.ndarray, damping: float = 0.0
):
    """Hessian of the mean KL(old || new) at new = old, applied to v.

    For a diagonal Gaussian the curvature splits exactly: the mean block is
    J^T diag(1/sigma^2) J / N (J the mean-net Jacobian) and the log-std block
    is 2 I.
    """
    states = np.atleast_2d(states)
    v = np.asarray(v, dtype=float)
    if v.shape != (policy.n_params,):
        raise ValueError("vector length mismatch")
    n_mean = policy.mean_net.n_params
    v_mean, v_log_std = v[:n_mean], v[n_mean:]
    _, cache = policy.mean_net.forward_cached(states)
    u = policy.mean_net.jvp(cache, v_mean)          # J v
    inv_var = np.exp(-2.0 * policy.log_std)
    fv_mean = policy.mean_net.backward(cache, u * inv_var / len(states))  # J^T D J v
    fv_log_std = 2.0 * v_log_std
    return np.concatenate([fv_mean, fv_log_std]) + damping * v


def conjugate_gradient(matvec, b: np.ndarray, iterations: int = 10, residual_tol: float = 1e-10):
    """Solve matvec(x) = b for symmetric positive-definite matvec."""
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    r_dot = float(r @ r)
    if r_dot < residual_tol:
        return x
    for _ in range(iterations):
        Ap = matvec(p)
        if not np.all(np.isfinite(Ap)):
            raise FloatingPointError("conjugate gradient produced non-finite values")
        alpha = r_dot / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        r_dot_new = float(r @ r)
        if r_dot_new < residual_tol:
            break
        p = r + (r_dot_new / r_dot) * p
        r_dot = r_dot_new
    return x


def line_search(
    policy: GaussianPolicy,
    old_policy: GaussianPolicy,
    states,
    actions,
    advantages,
    old_log_probs,
    full_step: np.ndarray,
    expected_improvement: float,
    config: TrpoConfig,
):
    """Backtrack over step fractions; accept the first candidate that improves
    the surrogate while keeping mean KL within the trust region. On
    exhaustion the old parameters are restored."""
    theta_old = old_policy.get_flat()
    base = surrogate_loss(old_policy, states, actions, advantages, old_log_probs)
    if float(np.linalg.norm(full_step)) == 0.0:
        policy.set_flat(theta_old)
        return {"accepted": False, "kl": 0.0, "improvement": 0.0, "step_fraction": 0.0}
    frac = 1.0
    for _ in range(config.backtrack_count):
        candidate = theta_old + frac * full_step
        policy.set_flat(candidate)
        improvement = (
            surrogate_loss(policy, states, actions, advantages, old_log_probs) - base
        )
        kl = float(np.mean(old_policy.kl(policy, states)))
        if np.isfinite(improvement) and improvement > 0 and kl <= config.max_kl:
            return {
                "accepted": True, "kl": kl, "improvement": improvement,
                "step_fraction": frac,
            }
        frac *= config.backtrack_ratio
    policy.set_flat(theta_old)
    return {"accepted": False, "kl": 0.0, "improvement": 0.0, "step_fraction": 0.0}


def trpo_update(
    policy: GaussianPolicy,
    states,
    actions,
    advantages,
    old_log_probs,
    config: TrpoConfig,
    rng: np.random.Generator | None = None,
):
    """One constrained policy update; returns acceptance diagnostics."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    advantages = np.asarray(advantages, dtype=float)
    old_log_probs = np.asarray(old_log_probs, dtype=float)
    old_policy = policy.clone()

    g = surrogate_gradient(policy, states, actions, advantages, old_log_probs)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite policy gradient")
    if float(np.linalg.norm(g)) < 1e-12:
        return {"accepted": False, "kl": 0.0, "improvement": 0.0, "step_fraction": 0.0}

    if len(states) > config.fvp_subsample:
        idx = (rng or np.random.default_rng(0)).choice(
            len(states), size=config.fvp_subsample, replace=False
        )
        fvp_states = states[idx]
    else:
        fvp_states = states

    def matvec(v):
        return fisher_vector_product(policy, fvp_states, v, config.cg_damping)

    direction = conjugate_gradient(
        matvec, g, config.cg_iterations, config.cg_residual_tol
    )
    shs = float(direction @ matvec(direction))
    if shs <= 0 or not np.isfinite(shs):
        return {"accepted": False, "kl": 0.0, "improvement": 0.0, "step_fraction": 0.0}
    step_scale = math.sqrt(2.0 * config.max_kl / shs)
    full_step = step_scale * direction
    expected = float(g @ full_step)
    info = line_search(
        policy, old_policy, states, actions, advantages, old_log_probs,
        full_step, expected, config,
    )
    info["expected_improvement"] = expected
    if info["accepted"]:
        assert info["kl"] <= config.max_kl + 1e-12
    return info


def fit_value(
    value_net: ValueNet,
    states,
    returns,
    l2: float = 1e-3,
    lr: float = 1e-3,
    passes: int = 25,
    momentum: float = 0.9,
) -> float:
    """Iterative regularized least-squares fit; returns final MSE + L2 term.

    Targets are standardized internally (the affine transform is stored on
    the net), so the learning rate is scale-free.
    """
    states = np.atleast_2d(states)
    returns = np.asarray(returns, dtype=float)
    if len(returns) == 0:
        raise ValueError("fit_value needs a non-empty batch")
    value_net.ret_mean = float(returns.mean())
    value_net.ret_std = float(max(returns.std(), 1e-6))
    targets = (returns - value_net.ret_mean) / value_net.ret_std
    if value_net._opt is None or value_net._opt.lr != lr:
        value_net._opt = MomentumSgd(lr=lr, momentum=momentum)
    opt = value_net._opt
    n = len(returns)
    for _ in range(passes):
        pred, cache = value_net.net.forward_cached(states)
        err = pred[:, 0] - targets
        if not np.all(np.isfinite(err)):
            raise FloatingPointError("non-finite value loss")
        grad = value_net.net.backward(cache, (2.0 * err / n)[:, None])
        grad += 2.0 * l2 * value_net.net.get_flat()
        opt.step(value_net.net, grad)
    final_err = value_net.predict(states) - returns
    final = float(np.mean(final_err ** 2)) + l2 * float(
        np.sum(value_net.net.get_flat() ** 2)
    )
    if not math.isfinite(final):
        raise FloatingPointError("non-finite value loss")
    return final
