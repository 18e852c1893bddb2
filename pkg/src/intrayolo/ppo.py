"""PPO agent for the accept/reject distillation gate.

States are ``(area_norm, teacher_conf, student_entropy / ln C)``; actions
are 1 (accept) or 0 (reject) drawn from a Bernoulli policy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

ACCEPT, REJECT = 1, 0


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch_size: int = 64
    lr: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    accept_cost: float = 0.01
    update_interval: int = 16
    hidden: int = 32

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not 0 <= self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("epochs and minibatch_size must be positive")


def normalize_state(area_norm: float, teacher_conf: float, student_entropy: float,
                    num_classes: int = 2) -> tuple[float, float, float]:
    state = (float(area_norm), float(teacher_conf), float(student_entropy) / math.log(num_classes))
    if not all(math.isfinite(v) for v in state):
        raise ValueError(f"non-finite decision state {state}")
    return state


class GatePolicy(nn.Module):
    """Shared two-layer trunk with a sigmoid accept head and a value head.

    Box area enters as ``sqrt(area_norm)`` so lesion side length, not the
    tiny raw area fraction, reaches the trunk; features are centred on
    [-1, 1].
    """

    def __init__(self, hidden: int = 32):
        super().__init__()
        self.trunk = nn.Sequential(nn.Linear(3, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh())
        self.policy_head = nn.Linear(hidden, 1)
        self.value_head = nn.Linear(hidden, 1)
        nn.init.zeros_(self.policy_head.weight)
        nn.init.zeros_(self.policy_head.bias)

    def features(self, states: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([states[:, :1].clamp(min=0).sqrt(), states[:, 1:]], dim=1)
        return 2.0 * feats - 1.0

    def forward(self, states: torch.Tensor):
        """Return (accept logit, value), each shaped (N,)."""
        if not torch.isfinite(states).all():
            raise ValueError("non-finite state component")
        z = self.trunk(self.features(states))
        return self.policy_head(z).squeeze(-1), self.value_head(z).squeeze(-1)


def policy_forward(policy: GatePolicy, state) -> tuple[float, float]:
    with torch.no_grad():
        logit, value = policy(torch.as_tensor(np.atleast_2d(state), dtype=torch.float32))
    return float(torch.sigmoid(logit)[0]), float(value[0])


def bernoulli_log_prob(logit: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
    # log sigmoid(l) for accept, log sigmoid(-l) for reject
    return nn.functional.logsigmoid(torch.where(action > 0, logit, -logit))


def bernoulli_entropy(logit: torch.Tensor) -> torch.Tensor:
    p = torch.sigmoid(logit)
    return -(p * nn.functional.logsigmoid(logit) + (1 - p) * nn.functional.logsigmoid(-logit))


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    terminal_value: float = 0.0

    def __len__(self):
        return len(self.actions)

    def validate(self):
        n = len(self.actions)
        if not (len(self.states) == len(self.log_probs) == len(self.rewards) == len(self.values) == n):
            raise ValueError("trajectory fields have unequal lengths")
        if not all(math.isfinite(r) for r in self.rewards):
            raise ValueError("non-finite reward in trajectory")


def compute_gae(rewards: Sequence[float], values: Sequence[float], terminal_value: float,
                gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have equal length")
    adv = np.zeros_like(rewards)
    next_value, running = float(terminal_value), 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def clipped_surrogate(ratio, advantage, epsilon: float):
    """``min(r * A, clip(r, 1 - eps, 1 + eps) * A)``; works on floats or tensors."""
    if isinstance(ratio, torch.Tensor):
        return torch.minimum(ratio * advantage, ratio.clamp(1 - epsilon, 1 + epsilon) * advantage)
    if ratio <= 0:
        raise ValueError("probability ratio must be positive")
    return min(ratio * advantage, min(max(ratio, 1 - epsilon), 1 + epsilon) * advantage)


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    std = adv.std()
    if std < eps:
        return np.zeros_like(adv)
    return (adv - adv.mean()) / std


def compute_reward(decisions: Sequence[dict], loss_before: float, loss_after: float,
                   config: PPOConfig) -> list[float]:
    """Shared clipped loss improvement, minus ``accept_cost`` per acceptance.

    Writes the reward into each decision record and returns the list.
    """
    if not (math.isfinite(loss_before) and math.isfinite(loss_after)):
        raise ValueError(f"non-finite loss (before={loss_before}, after={loss_after})")
    base = min(max(loss_before - loss_after, -1.0), 1.0)
    rewards = []
    for d in decisions:
        r = base - (config.accept_cost if d["action"] == ACCEPT else 0.0)
        d["reward"] = r
        rewards.append(r)
    return rewards


class PPOAgent:
    def __init__(self, config: PPOConfig = PPOConfig(), seed: int = 0):
        self.config = config
        gen_state = torch.get_rng_state()
        torch.manual_seed(seed)
        self.policy = GatePolicy(config.hidden)
        torch.set_rng_state(gen_state)
        self.optimizer = torch.optim.Adam(self.policy.parameters(), lr=config.lr)
        self.rng = np.random.default_rng(seed)
        self.updates = 0

    def act(self, states: np.ndarray, rng: Optional[np.random.Generator] = None):
        """Sample actions; returns (actions, log_probs, values) arrays."""
        rng = rng if rng is not None else self.rng
        states = np.asarray(states, dtype=np.float32).reshape(-1, 3)
        if not len(states):
            return np.zeros(0, np.int64), np.zeros(0), np.zeros(0)
        with torch.no_grad():
            logit, value = self.policy(torch.from_numpy(states))
            p = torch.sigmoid(logit).double().numpy()
        actions = (rng.random(len(p)) < p).astype(np.int64)
        with torch.no_grad():
            logp = bernoulli_log_prob(logit, torch.from_numpy(actions)).double().numpy()
        return actions, logp, value.double().numpy()

    def accept_prob(self, states) -> np.ndarray:
        with torch.no_grad():
            logit, _ = self.policy(torch.as_tensor(np.asarray(states, dtype=np.float32).reshape(-1, 3)))
        return torch.sigmoid(logit).double().numpy()

    def update(self, trajectories: Sequence[Trajectory]) -> dict[str, float]:
        return update_policy(self, trajectories, self.config)

    def state_dict(self) -> dict:
        return {"policy": self.policy.state_dict(), "optimizer": self.optimizer.state_dict(),
                "config": asdict(self.config), "rng_state": self.rng.bit_generator.state,
                "updates": self.updates}

    @classmethod
    def from_state_dict(cls, state: dict) -> "PPOAgent":
        agent = cls(PPOConfig(**state["config"]))
        agent.policy.load_state_dict(state["policy"])
        agent.optimizer.load_state_dict(state["optimizer"])
        agent.rng.bit_generator.state = state["rng_state"]
        agent.updates = state["updates"]
        return agent


def update_policy(agent: PPOAgent, trajectories: Sequence[Trajectory], config: PPOConfig) -> dict[str, float]:
    trajectories = [t for t in trajectories if len(t)]
    if not trajectories:
        raise ValueError("update_policy needs at least one non-empty trajectory")
    states, actions, old_logp, advs, rets = [], [], [], [], []
    for t in trajectories:
        t.validate()
        adv, ret = compute_gae(t.rewards, t.values, t.terminal_value, config.gamma, config.gae_lambda)
        states.extend(t.states)
        actions.extend(t.actions)
        old_logp.extend(t.log_probs)
        advs.append(adv)
        rets.append(ret)
    states = torch.tensor(np.asarray(states, dtype=np.float32))
    actions = torch.tensor(np.asarray(actions, dtype=np.int64))
    old_logp = torch.tensor(np.asarray(old_logp, dtype=np.float32))
    adv = torch.tensor(normalize_advantages(np.concatenate(advs)), dtype=torch.float32)
    ret = torch.tensor(np.concatenate(rets), dtype=torch.float32)

    n = len(actions)
    ratios, clipped, pol_losses, val_losses, ents = [], [], [], [], []
    first_epoch_ratio = None
    for epoch in range(config.epochs):
        perm = agent.rng.permutation(n)
        epoch_ratios = []
        for start in range(0, n, config.minibatch_size):
            idx = torch.from_numpy(perm[start:start + config.minibatch_size])
            logit, value = agent.policy(states[idx])
            logp = bernoulli_log_prob(logit, actions[idx])
            ratio = torch.exp(logp - old_logp[idx])
            surrogate = clipped_surrogate(ratio, adv[idx], config.clip_eps).mean()
            entropy = bernoulli_entropy(logit).mean()
            value_loss = ((value - ret[idx]) ** 2).mean()
            loss = -surrogate - config.entropy_coef * entropy + config.value_coef * value_loss
            agent.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            agent.optimizer.step()
            r = ratio.detach()
            epoch_ratios.append(r)
            clipped.append(((r - 1).abs() > config.clip_eps).float())
            pol_losses.append(float(-surrogate.detach()))
            val_losses.append(float(value_loss.detach()))
            ents.append(float(entropy.detach()))
        if epoch == 0:
            first_epoch_ratio = float(torch.cat(epoch_ratios).mean())
        ratios.extend(epoch_ratios)
    agent.updates += 1
    return {
        "mean_ratio": float(torch.cat(ratios).mean()),
        "first_epoch_ratio": first_epoch_ratio,
        "clip_fraction": float(torch.cat(clipped).mean()),
        "policy_loss": float(np.mean(pol_losses)),
        "value_loss": float(np.mean(val_losses)),
        "entropy": float(np.mean(ents)),
        "samples": n,
    }


# accept-rule bandit ----------------------------------------------------

def bandit_rule(states: np.ndarray) -> np.ndarray:
    """Oracle action for the toy bandit: accept iff conf > 0.5 and area < 0.25."""
    states = np.asarray(states).reshape(-1, 3)
    return ((states[:, 1] > 0.5) & (states[:, 0] < 0.25)).astype(np.int64)


def bandit_expected_reward(agent: PPOAgent, states: np.ndarray) -> float:
    """Expected reward of the stochastic policy (reward 1 for the oracle action)."""
    p = agent.accept_prob(states)
    return float(np.where(bandit_rule(states) == ACCEPT, p, 1 - p).mean())


def run_bandit(seed: int, updates: int = 200, samples_per_update: int = 1024,
               config: PPOConfig = PPOConfig(), eval_states: int = 20000,
               target: Optional[float] = None) -> dict:
    """Train a gate on one-step bandit episodes with uniform random states.

    The oracle always earns reward 1, so the returned ``ratio`` is the
    learned policy's fraction of the oracle average reward. Training stops
    early once ``target`` is reached.
    """
    agent = PPOAgent(config, seed=seed)
    rng = np.random.default_rng([seed, 1])
    probe = np.random.default_rng([seed, 2]).random((eval_states, 3))
    history = []
    for _ in range(updates):
        s = rng.random((samples_per_update, 3))
        a, lp, v = agent.act(s, rng)
        r = (a == bandit_rule(s)).astype(np.float64)
        agent.update([Trajectory([s[i].tolist()], [int(a[i])], [float(lp[i])], [float(r[i])], [float(v[i])])
                      for i in range(len(s))])
        history.append(bandit_expected_reward(agent, probe))
        if target is not None and history[-1] >= target:
            break
    return {"ratio": max(history), "final": history[-1], "updates": len(history), "history": history,
            "oracle": 1.0}
