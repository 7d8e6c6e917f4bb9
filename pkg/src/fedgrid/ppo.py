"""Clipped-surrogate PPO over tensor-nn policies.

The policy is a diagonal Gaussian over raw (pre-sigmoid) 48-dim actions
whose mean comes from an MLP and whose log standard deviation is a
state-independent parameter vector. The critic is a separate MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .env import ACTION_DIM, STATE_DIM, MicrogridEnv


class PpoDivergenceError(FloatingPointError):
    """Non-finite loss or gradient during an update."""


@dataclass(frozen=True)
class PpoConfig:
    clip_param: float = 0.2
    sgd_iters: int = 10
    batch_size: int = 20  # days collected per local step
    minibatch_size: int = 10
    learning_rate: float = 1e-3
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    optimizer: str = "adam"  # or "sgd"
    reward_scale: float = 0.01
    log_std_init: float = -0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_param <= 1.0:
            raise ValueError("clip_param must lie in (0, 1]")
        for name in ("sgd_iters", "batch_size", "minibatch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")


# ----- policy ----------------------------------------------------------------


@dataclass(frozen=True)
class Policy:
    """Mean network plus log-std; ``theta`` is the flat vector that gets federated."""

    net: nn.ParamVector
    log_std: np.ndarray

    def __post_init__(self) -> None:
        log_std = np.asarray(self.log_std, dtype=np.float64)
        if log_std.shape != (self.net.output_dim,):
            raise nn.ShapeError("log_std must match the network output dim")
        object.__setattr__(self, "log_std", log_std)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.net.values, self.log_std])

    @property
    def specs(self) -> tuple[nn.LayerSpec, ...]:
        return self.net.specs

    @classmethod
    def from_theta(cls, theta: np.ndarray, specs: Sequence[nn.LayerSpec]) -> "Policy":
        theta = np.asarray(theta, dtype=np.float64)
        n = nn.param_count(specs)
        if theta.shape != (n + specs[-1].output_dim,):
            raise nn.ShapeError(f"theta length {theta.shape} does not match policy layout")
        return cls(nn.ParamVector(theta[:n].copy(), tuple(specs)), theta[n:].copy())

    def head(self, obs: np.ndarray) -> nn.GaussianHead:
        return nn.GaussianHead(nn.mlp_forward(self.net, obs), self.log_std)


def policy_specs(hidden: Sequence[int] = (32,), obs_dim: int = STATE_DIM, act_dim: int = ACTION_DIM):
    return nn.mlp_specs([obs_dim, *hidden, act_dim])


def value_specs(hidden: Sequence[int] = (64,), obs_dim: int = STATE_DIM):
    return nn.mlp_specs([obs_dim, *hidden, 1])


def theta_size(specs: Sequence[nn.LayerSpec]) -> int:
    return nn.param_count(specs) + specs[-1].output_dim


def init_policy(specs, seed, log_std_init: float = -0.5, mean_action: np.ndarray | None = None) -> Policy:
    """Small output layer; ``mean_action`` (raw action space) becomes the output bias."""
    net = nn.mlp_init(specs, seed)
    layers = net.unflatten()
    w, b = layers[-1]
    w *= 0.1
    if mean_action is not None:
        b[:] = mean_action
    return Policy(net, np.full(specs[-1].output_dim, log_std_init))


# ----- rollouts ----------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    state: np.ndarray  # network input (scaled observation)
    action: np.ndarray  # raw action before squashing
    log_prob: float
    reward: float
    value: float
    done: bool = False

    def __post_init__(self) -> None:
        if self.state.shape != (STATE_DIM,) or self.action.shape != (ACTION_DIM,):
            raise nn.ShapeError("transition dims must be 120/48")
        if not math.isfinite(self.log_prob):
            raise ValueError("log_prob must be finite")


@dataclass(frozen=True)
class TrajectoryBatch:
    transitions: tuple[Transition, ...]
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    last_value: float = 0.0  # critic estimate of the state after the last transition

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions])

    @property
    def values(self) -> np.ndarray:
        return np.array([t.value for t in self.transitions])

    def arrays(self):
        states = np.stack([t.state for t in self.transitions])
        actions = np.stack([t.action for t in self.transitions])
        logp = np.array([t.log_prob for t in self.transitions])
        return states, actions, logp


def _value(value_params: nn.ParamVector, obs: np.ndarray) -> float:
    return float(nn.mlp_forward(value_params, obs)[0])


def collect_rollout(
    env: MicrogridEnv,
    policy: Policy,
    value_params: nn.ParamVector,
    n_days: int,
    rng: np.random.Generator,
) -> TrajectoryBatch:
    if n_days < 1:
        raise ValueError("n_days must be >= 1")
    out = []
    obs = env.observe()
    for _ in range(n_days):
        head = policy.head(obs)
        action, logp = nn.gaussian_sample(head, rng)
        v = _value(value_params, obs)
        outcome = env.step_action(action)
        out.append(Transition(obs, action, logp, outcome.reward, v, False))
        obs = env.observe()
    return TrajectoryBatch(tuple(out), last_value=_value(value_params, obs))


def compute_gae(batch: TrajectoryBatch, gamma: float, lam: float, reward_scale: float = 1.0) -> TrajectoryBatch:
    """Generalized advantage estimation with bootstrap from ``batch.last_value``."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    rewards = batch.rewards * reward_scale
    values = batch.values
    dones = np.array([t.done for t in batch.transitions], dtype=np.float64)
    next_values = np.append(values[1:], batch.last_value)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_values[t] * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return replace(batch, advantages=adv, returns=adv + values)


# ----- optimisation --------------------------------------------------------------


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None or self.m.shape != params.shape:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
            self.t = 0
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class Sgd:
    lr: float

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad


def make_optimizer(cfg: PpoConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else Sgd(cfg.learning_rate)


@dataclass(frozen=True)
class Minibatch:
    states: np.ndarray
    actions: np.ndarray
    old_log_prob: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


@dataclass
class LossInfo:
    total: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_frac: float
    max_ratio_dev: float


def ppo_loss_and_grads(policy: Policy, value_params: nn.ParamVector, mb: Minibatch, cfg: PpoConfig):
    """Loss ``-surrogate + value_coef * mse - entropy_coef * entropy`` and its gradients.

    Returns ``(info, g_net, g_log_std, g_value)``.
    """
    n = mb.states.shape[0]
    mean = nn.mlp_forward(policy.net, mb.states)
    log_std = nn.clamp_log_std(policy.log_std)
    inv_var = np.exp(-2.0 * log_std)
    diff = mb.actions - mean
    head = nn.GaussianHead(mean, log_std)
    logp = nn.gaussian_log_prob(head, mb.actions)
    ratio = np.exp(logp - mb.old_log_prob)
    adv = mb.advantages
    eps = cfg.clip_param
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    surr = np.minimum(ratio * adv, clipped * adv)
    # gradient flows through the unclipped branch whenever it is the selected one
    active = np.where(adv >= 0, ratio <= 1.0 + eps, ratio >= 1.0 - eps)
    policy_loss = -float(np.mean(surr))

    values = nn.mlp_forward(value_params, mb.states)[:, 0]
    verr = values - mb.returns
    value_loss = float(np.mean(verr * verr))
    entropy = head.entropy()
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    d_logp = -(adv * ratio * active) / n
    g_mean = d_logp[:, None] * diff * inv_var
    g_net, _ = nn.mlp_backward(policy.net, mb.states, g_mean)
    g_log_std = (d_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) - cfg.entropy_coef
    inside = (policy.log_std >= nn.LOG_STD_MIN) & (policy.log_std <= nn.LOG_STD_MAX)
    g_log_std = g_log_std * inside
    g_v = (cfg.value_coef * 2.0 * verr / n)[:, None]
    g_value, _ = nn.mlp_backward(value_params, mb.states, g_v)

    info = LossInfo(
        total=total,
        policy_loss=policy_loss,
        value_loss=value_loss,
        entropy=entropy,
        approx_kl=float(np.mean(mb.old_log_prob - logp)),
        clip_frac=float(np.mean(np.abs(ratio - 1.0) > eps)),
        max_ratio_dev=float(np.max(np.abs(ratio - 1.0))),
    )
    return info, g_net, g_log_std, g_value


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(g @ g) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def _normalized(adv: np.ndarray) -> np.ndarray:
    if adv.shape[0] < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_update(
    policy: Policy,
    value_params: nn.ParamVector,
    batch: TrajectoryBatch,
    cfg: PpoConfig,
    rng: np.random.Generator | None = None,
    optimizer=None,
) -> tuple[Policy, nn.ParamVector, dict]:
    """Run ``cfg.sgd_iters`` epochs of shuffled minibatch steps.

    ``optimizer`` carries state across calls (one per client); a fresh one is
    built from ``cfg`` when omitted. Minibatches are taken in order when
    ``rng`` is None.
    """
    if batch.advantages is None or batch.returns is None:
        raise ValueError("batch has no advantages; run compute_gae first")
    opt = make_optimizer(cfg) if optimizer is None else optimizer
    states, actions, old_logp = batch.arrays()
    adv = _normalized(batch.advantages) if cfg.normalize_advantages else batch.advantages
    returns = batch.returns
    n = len(batch)
    n_net = len(policy.net)
    n_std = policy.log_std.shape[0]

    params = np.concatenate([policy.theta, value_params.values])
    infos: list[LossInfo] = []
    first_dev = None
    grad_norms = []
    for _ in range(cfg.sgd_iters):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start : start + cfg.minibatch_size]
            mb = Minibatch(states[idx], actions[idx], old_logp[idx], adv[idx], returns[idx])
            cur_policy = Policy(nn.ParamVector(params[:n_net], policy.specs), params[n_net : n_net + n_std])
            cur_value = value_params.with_values(params[n_net + n_std :])
            info, g_net, g_std, g_val = ppo_loss_and_grads(cur_policy, cur_value, mb, cfg)
            if first_dev is None:
                first_dev = info.max_ratio_dev
            grads, gnorm = clip_global_norm([g_net, g_std, g_val], cfg.max_grad_norm)
            grad = np.concatenate(grads)
            if not (math.isfinite(info.total) and np.all(np.isfinite(grad))):
                raise PpoDivergenceError(
                    f"non-finite PPO step: loss={info.total} grad_norm={gnorm} "
                    f"policy_loss={info.policy_loss} value_loss={info.value_loss}"
                )
            params = opt.step(params, grad)
            params[n_net : n_net + n_std] = nn.clamp_log_std(params[n_net : n_net + n_std])
            infos.append(info)
            grad_norms.append(gnorm)

    new_policy = Policy(nn.ParamVector(params[:n_net].copy(), policy.specs), params[n_net : n_net + n_std].copy())
    new_value = value_params.with_values(params[n_net + n_std :])
    stats = {
        "policy_loss": float(np.mean([i.policy_loss for i in infos])),
        "value_loss": float(np.mean([i.value_loss for i in infos])),
        "entropy": infos[-1].entropy,
        "approx_kl": float(np.mean([i.approx_kl for i in infos[-max(1, math.ceil(n / cfg.minibatch_size)):]])),
        "clip_frac": float(np.mean([i.clip_frac for i in infos])),
        "initial_ratio_dev": float(first_dev),
        "max_grad_norm_seen": float(max(grad_norms)),
        "mean_reward": float(np.mean(batch.rewards)),
    }
    return new_policy, new_value, stats


# ----- evaluation ---------------------------------------------------------------


def evaluate(env: MicrogridEnv, policy: Policy, n_days: int) -> float:
    """Mean daily profit of the deterministic (mean-action) policy; ``env`` is not mutated."""
    if n_days < 1:
        raise ValueError("n_days must be >= 1")
    sim = env.clone()
    sim.horizon = None
    total = 0.0
    for _ in range(n_days):
        mean = nn.mlp_forward(policy.net, sim.observe())
        total += sim.step_action(mean).reward
    return total / n_days


# ----- per-client trainer ---------------------------------------------------------


@dataclass
class LocalTrainer:
    """One client's learning state: critic, optimizer moments and random stream.

    The critic never leaves the client.
    """

    env: MicrogridEnv
    cfg: PpoConfig
    value_params: nn.ParamVector
    rng: np.random.Generator
    optimizer: object = None
    history: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.optimizer is None:
            self.optimizer = make_optimizer(self.cfg)

    @classmethod
    def create(cls, env, cfg: PpoConfig, seed, value_hidden=(64,)) -> "LocalTrainer":
        rng = np.random.default_rng(seed)
        value = nn.mlp_init(value_specs(value_hidden), rng)
        return cls(env, cfg, value, rng)

    def train(self, policy: Policy, local_steps: int) -> tuple[Policy, list[float]]:
        """``local_steps`` rounds of (collect ``batch_size`` days, PPO update).

        Returns the trained policy and the daily rewards earned while training.
        """
        rewards: list[float] = []
        for _ in range(local_steps):
            batch = collect_rollout(self.env, policy, self.value_params, self.cfg.batch_size, self.rng)
            batch = compute_gae(batch, self.cfg.gamma, self.cfg.gae_lambda, self.cfg.reward_scale)
            policy, self.value_params, stats = ppo_update(
                policy, self.value_params, batch, self.cfg, self.rng, self.optimizer
            )
            self.history.append(stats)
            rewards.extend(batch.rewards.tolist())
        return policy, rewards
