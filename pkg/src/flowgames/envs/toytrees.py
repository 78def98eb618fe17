"""Hand-built stochastic trees with explicit owners, transition probabilities
and terminal rewards. These are the instances small enough for brute-force
verification of every constraint system."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ENVIRONMENT, Cursor, TreeEnv, TreeEnvError


@dataclass
class ToyNode:
    """A node of an explicit tree.

    Terminal nodes carry per-player log rewards. Environment nodes carry one
    probability per child (must be positive; zero-probability branches are
    simply omitted). Player nodes carry the owner index.
    """

    owner: int | None = None  # ENVIRONMENT, player index, or None for terminal
    children: list["ToyNode"] = field(default_factory=list)
    probs: list[float] | None = None
    log_rewards: tuple[float, ...] | None = None

    @property
    def terminal(self) -> bool:
        return not self.children

    def validate(self, num_players: int) -> None:
        if self.terminal:
            if self.log_rewards is None:
                raise TreeEnvError("terminal node without rewards")
            if len(self.log_rewards) != num_players:
                raise TreeEnvError("terminal reward arity mismatch")
            return
        if self.owner is None:
            raise TreeEnvError("nonterminal node without owner")
        if self.owner == ENVIRONMENT:
            if self.probs is None or len(self.probs) != len(self.children):
                raise TreeEnvError("environment node without aligned probabilities")
            if any(p <= 0 for p in self.probs):
                raise TreeEnvError("environment probabilities must be positive")
            if abs(sum(self.probs) - 1.0) > 1e-12:
                raise TreeEnvError("environment probabilities must sum to 1")
        elif not 1 <= self.owner <= num_players:
            raise TreeEnvError(f"owner {self.owner} out of range")
        for child in self.children:
            child.validate(num_players)


def terminal(reward: float | tuple[float, ...]) -> ToyNode:
    """Terminal node from linear-space reward(s)."""
    rewards = (reward,) if isinstance(reward, (int, float)) else tuple(reward)
    if any(r <= 0 for r in rewards):
        raise TreeEnvError("terminal rewards must be strictly positive")
    return ToyNode(log_rewards=tuple(math.log(r) for r in rewards))


def agent(children: list[ToyNode], player: int = 1) -> ToyNode:
    return ToyNode(owner=player, children=children)


def chance(children: list[ToyNode], probs: list[float]) -> ToyNode:
    kept = [(c, p) for c, p in zip(children, probs) if p > 0.0]
    return ToyNode(
        owner=ENVIRONMENT,
        children=[c for c, _ in kept],
        probs=[p for _, p in kept],
    )


class ToyTreeEnv(TreeEnv):
    def __init__(self, root: ToyNode, num_players: int = 1):
        root.validate(num_players)
        self.root_node = root
        self.num_players = num_players
        self.action_space_size = _max_fanout(root)

    def cursor(self) -> "ToyCursor":
        return ToyCursor(self)


def _max_fanout(node: ToyNode) -> int:
    width = len(node.children)
    for child in node.children:
        width = max(width, _max_fanout(child))
    return max(width, 1)


class ToyCursor(Cursor):
    def __init__(self, env: ToyTreeEnv):
        self.env = env
        self.history: list[int] = []
        self.stack = [env.root_node]

    @property
    def node(self) -> ToyNode:
        return self.stack[-1]

    def legal_actions(self) -> list[int]:
        return list(range(len(self.node.children)))

    def child_count(self) -> int:
        return len(self.node.children)

    def push(self, action: int) -> None:
        self.stack.append(self.node.children[action])
        self.history.append(action)

    def pop(self) -> None:
        self.stack.pop()
        self.history.pop()

    def is_terminal(self) -> bool:
        return self.node.terminal

    def owner(self) -> int:
        return self.node.owner

    def env_probs(self) -> list[float]:
        return list(self.node.probs)

    def terminal_log_rewards(self) -> tuple[float, ...]:
        return self.node.log_rewards


def make_coinflip_tree(deterministic: bool = False) -> ToyTreeEnv:
    """Two agent actions, each followed by a coin-flip environment state.

    Terminal rewards are (1, 2, 4, 8). With the fair coin the detailed-balance
    system on the action-augmented graph is unsatisfiable (both left leaves
    would need probability p/2 despite rewards 1 != 2), while the expected
    detailed-balance system has the unique solution F(left) = 1.5,
    F(right) = 6, P(left action) = 0.2. With ``deterministic`` the coins
    always come up on their first branch and the tree collapses to a two-leaf
    deterministic sampler over rewards (1, 4).
    """
    probs = [1.0, 0.0] if deterministic else [0.5, 0.5]
    left = chance([terminal(1.0), terminal(2.0)], probs)
    right = chance([terminal(4.0), terminal(8.0)], probs)
    return ToyTreeEnv(agent([left, right]), num_players=1)


def random_toy_tree(
    rng: np.random.Generator,
    depth: int = 3,
    max_children: int = 3,
    env_fraction: float = 0.5,
    reward_scale: float = 3.0,
) -> ToyTreeEnv:
    """Seeded random single-agent stochastic tree for property tests."""

    def build(level: int) -> ToyNode:
        if level == 0:
            return terminal(float(np.exp(rng.uniform(-reward_scale, reward_scale))))
        width = int(rng.integers(1, max_children + 1))
        children = [build(level - 1) for _ in range(width)]
        if level < depth and rng.random() < env_fraction:
            raw = rng.uniform(0.1, 1.0, size=width)
            return chance(children, list(raw / raw.sum()))
        return agent(children)

    return ToyTreeEnv(build(depth), num_players=1)
