"""Noisy autoregressive sequence environment.

The agent appends one symbol per round; the environment then keeps that
symbol with probability 1 - alpha + alpha/A and substitutes each other symbol
with probability alpha/A (a uniformly random symbol with probability alpha).
Terminal reward is f(x)**beta where f is a position-weight-matrix score
normalised to (0, 1], seeded deterministically from the spec.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ENVIRONMENT, Cursor, TreeEnv


@dataclass(frozen=True)
class SequenceEnvSpec:
    length: int
    alphabet: int
    alpha: float
    beta: float
    weight_seed: int = 0

    def validate(self) -> None:
        if self.length < 1 or self.alphabet < 2:
            raise ValueError("need length >= 1 and alphabet >= 2")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")


def make_sequence_env(spec: SequenceEnvSpec, weights: np.ndarray | None = None) -> "SequenceEnv":
    spec.validate()
    return SequenceEnv(spec, weights)


class SequenceEnv(TreeEnv):
    num_players = 1

    def __init__(self, spec: SequenceEnvSpec, weights: np.ndarray | None = None):
        self.spec = spec
        self.action_space_size = spec.alphabet
        if weights is None:
            rng = np.random.default_rng(spec.weight_seed)
            weights = rng.uniform(0.05, 1.0, size=(spec.length, spec.alphabet))
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (spec.length, spec.alphabet) or np.any(weights <= 0):
            raise ValueError("weights must be a positive (length, alphabet) table")
        self.weights = weights
        self._norm = float(weights.max(axis=1).sum())
        # corruption distribution: keep vs substitute
        a, n = spec.alpha, spec.alphabet
        self.p_keep = 1.0 - a + a / n
        self.p_swap = a / n

    def score(self, symbols) -> float:
        """PWM score normalised to (0, 1]."""
        total = sum(self.weights[i, s] for i, s in enumerate(symbols))
        return total / self._norm

    def log_reward_of(self, symbols) -> float:
        return self.spec.beta * math.log(self.score(symbols))

    def cursor(self) -> "SequenceCursor":
        return SequenceCursor(self)


class SequenceCursor(Cursor):
    def __init__(self, env: SequenceEnv):
        self.env = env
        self.history: list[int] = []
        self.realized: list[int] = []  # symbols that survived corruption

    def _at_env_state(self) -> bool:
        return len(self.history) % 2 == 1

    def legal_actions(self) -> list[int]:
        env = self.env
        if self._at_env_state() and env.p_swap == 0.0:
            return [self.history[-1]]  # deterministic environment keeps the choice
        return list(range(env.action_space_size))

    def child_count(self) -> int:
        if self._at_env_state() and self.env.p_swap == 0.0:
            return 1
        return self.env.action_space_size

    def push(self, action: int) -> None:
        if self._at_env_state():
            self.realized.append(action)
        self.history.append(action)

    def pop(self) -> None:
        if not self._at_env_state():
            # the step being undone was an environment resolution
            self.realized.pop()
        self.history.pop()

    def is_terminal(self) -> bool:
        return len(self.realized) == self.env.spec.length and not self._at_env_state()

    def owner(self) -> int:
        return ENVIRONMENT if self._at_env_state() else 1

    def env_probs(self) -> list[float]:
        env = self.env
        if env.p_swap == 0.0:
            return [1.0]
        chosen = self.history[-1]
        probs = [env.p_swap] * env.action_space_size
        probs[chosen] = env.p_keep
        return probs

    def terminal_log_rewards(self) -> tuple[float, ...]:
        return (self.env.log_reward_of(self.realized),)

    def obs_key(self):
        # Realised prefix determines the remaining subtree; pending agent
        # choices are part of the key only while the environment resolves them.
        if self._at_env_state():
            return (tuple(self.realized), self.history[-1])
        return (tuple(self.realized), None)
