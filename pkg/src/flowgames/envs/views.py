"""Environment adapters: a two-player game seen by one player as a stochastic
environment (the opponent becomes chance), a tree stripped of ownership for
plain-GFlowNet solving, and a depth-truncated game for small exact studies."""

from __future__ import annotations

import math

from .boards import Outcome, log_outcome_reward
from .core import ENVIRONMENT, Cursor, TreeEnv


class FixedOpponentView(TreeEnv):
    """One player's view of a two-player game against a fixed stochastic
    opponent. Opponent states become environment states whose transition is
    the opponent policy (uniform unless given). Terminal rewards are the
    agent's outcome rewards, optionally divided by the product of the agent's
    branching factors along the trajectory."""

    num_players = 1

    def __init__(self, game: TreeEnv, agent_player: int = 1, lam: float = 1.0,
                 branch_adjusted: bool = True, opponent_probs=None,
                 obs: str = "history"):
        self.game = game
        self.agent_player = agent_player
        self.lam = lam
        self.branch_adjusted = branch_adjusted
        self.opponent_probs = opponent_probs  # fn(game_cursor) -> probs, None = uniform
        self.action_space_size = game.action_space_size
        if obs not in ("history", "board"):
            raise ValueError(f"unknown observation mode {obs!r}")
        if obs == "board":
            # board-keyed observations are only sound when every history to a
            # position contributes the same branch adjustment, i.e. fanout is
            # a pure function of depth (free placement: legal moves = empties)
            if branch_adjusted and getattr(game, "gravity", True):
                raise ValueError(
                    "board observations with branch-adjusted rewards require "
                    "depth-determined fanout (free-placement games)"
                )
        self.obs = obs

    def cursor(self) -> "FixedOpponentCursor":
        return FixedOpponentCursor(self)


class FixedOpponentCursor(Cursor):
    def __init__(self, view: FixedOpponentView):
        self.env = view
        self.view = view
        self.inner = view.game.cursor()
        self._log_b_stack = [0.0]

    @property
    def history(self):
        return self.inner.history

    def legal_actions(self):
        return self.inner.legal_actions()

    def child_count(self):
        return self.inner.child_count()

    def push(self, action):
        log_b = self._log_b_stack[-1]
        if not self.inner.is_terminal() and self.inner.owner() == self.view.agent_player:
            log_b += math.log(self.inner.child_count())
        self.inner.push(action)
        self._log_b_stack.append(log_b)

    def pop(self):
        self.inner.pop()
        self._log_b_stack.pop()

    def is_terminal(self):
        return self.inner.is_terminal()

    def owner(self):
        return 1 if self.inner.owner() == self.view.agent_player else ENVIRONMENT

    def env_probs(self):
        if self.view.opponent_probs is not None:
            return self.view.opponent_probs(self.inner)
        n = self.inner.child_count()
        return [1.0 / n] * n

    def outcome(self) -> Outcome:
        return self.inner.outcome()

    def terminal_log_rewards(self):
        raw = log_outcome_reward(self.inner.outcome(), self.view.agent_player, self.view.lam)
        if self.view.branch_adjusted:
            raw -= self._log_b_stack[-1]
        return (raw,)

    def obs_key(self):
        # branch-adjusted flows are history functions in general (the
        # adjustment carries the path's fanout product); board keying is
        # opted into only where fanout is depth-determined
        if self.view.obs == "board":
            return self.inner.obs_key()
        return bytes(self.inner.history)


class AsSingleAgent(TreeEnv):
    """Ownership-blind view of any tree: every nonterminal state belongs to a
    single agent. Terminal log rewards come from ``log_reward_fn`` (default:
    reward 1 everywhere, so the root flow counts leaves)."""

    num_players = 1

    def __init__(self, base: TreeEnv, log_reward_fn=None):
        self.base = base
        self.log_reward_fn = log_reward_fn
        self.action_space_size = base.action_space_size

    def cursor(self) -> "SingleAgentCursor":
        return SingleAgentCursor(self)


class SingleAgentCursor(Cursor):
    def __init__(self, view: AsSingleAgent):
        self.env = view
        self.view = view
        self.inner = view.base.cursor()

    @property
    def history(self):
        return self.inner.history

    def legal_actions(self):
        return self.inner.legal_actions()

    def child_count(self):
        return self.inner.child_count()

    def push(self, action):
        self.inner.push(action)

    def pop(self):
        self.inner.pop()

    def is_terminal(self):
        return self.inner.is_terminal()

    def owner(self):
        return 1

    def terminal_log_rewards(self):
        if self.view.log_reward_fn is None:
            return (0.0,)
        return (self.view.log_reward_fn(self.inner),)

    def obs_key(self):
        return self.inner.obs_key()


class TruncatedGame(TreeEnv):
    """A two-player game cut off after ``max_plies`` moves; positions at the
    cap that are not already decided count as draws."""

    def __init__(self, game: TreeEnv, max_plies: int):
        self.game = game
        self.max_plies = max_plies
        self.num_players = game.num_players
        self.action_space_size = game.action_space_size

    def cursor(self) -> "TruncatedCursor":
        return TruncatedCursor(self)


class TruncatedCursor(Cursor):
    def __init__(self, view: TruncatedGame):
        self.env = view
        self.view = view
        self.inner = view.game.cursor()

    @property
    def history(self):
        return self.inner.history

    def legal_actions(self):
        return self.inner.legal_actions()

    def child_count(self):
        return self.inner.child_count()

    def push(self, action):
        self.inner.push(action)

    def pop(self):
        self.inner.pop()

    def is_terminal(self):
        return self.inner.is_terminal() or len(self.inner.history) >= self.view.max_plies

    def owner(self):
        return self.inner.owner()

    def outcome(self) -> Outcome:
        if self.inner.is_terminal():
            return self.inner.outcome()
        return Outcome.DRAW

    def obs_key(self):
        return self.inner.obs_key()
