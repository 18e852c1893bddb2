"""The PPO gate on its contextual-bandit sanity task: accept a candidate
iff it is small and the teacher is confident."""

import numpy as np

from intrayolo.ppo import PPOAgent, bandit_rule, compute_gae, clipped_surrogate, run_bandit

# single-step GAE collapses to r + gamma * v_T - v
adv, ret = compute_gae([2.0], [0.5], 3.0, gamma=1.0, lam=1.0)
print("gae:", adv, ret)

# the clipped surrogate caps the gain from pushing the ratio past 1 + eps
for ratio in (0.5, 1.0, 1.5):
    print(f"surrogate ratio={ratio}: {clipped_surrogate(ratio, 1.0, 0.2):.2f}")

print("fresh agent accept prob:", PPOAgent(seed=0).accept_prob(np.array([[0.1, 0.9, 0.2]])))

for seed in range(3):
    res = run_bandit(seed, updates=200, target=0.95)
    print(f"seed {seed}: {res['ratio']:.3f} of the oracle reward after {res['updates']} updates")

states = np.random.default_rng(0).random((8, 3))
print("oracle rule on 8 random states:", bandit_rule(states))
