"""Tree-structured environment contract shared by all games.

States are identified by their full action history from the root, so the
reachable state graph is always a tree even for games whose board positions
merge. Environments expose a cheap do/undo ``Cursor`` for tree walks; the
key-based methods (``children``, ``owner``, ...) are built on top of it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

ENVIRONMENT = 0  # owner tag for chance states; players are 1..num_players

PROB_TOLERANCE = 1e-12


class TreeEnvError(Exception):
    """Base class for environment contract violations."""


class TerminalStateError(TreeEnvError):
    """A child/owner/transition query hit a terminal state."""


class OwnershipError(TreeEnvError):
    """An operation was applied to a state with the wrong owner class."""


class IllegalActionError(TreeEnvError):
    """An action outside the legal mask was applied."""


class StateKey:
    """Identifier of a state: the action history from the root.

    Encodes losslessly to bytes (one byte per action; action spaces here are
    far below 256). Two keys are equal iff their histories are equal.
    """

    __slots__ = ("actions",)

    def __init__(self, actions: Iterable[int] = ()):
        self.actions = tuple(actions)

    def encode(self) -> bytes:
        return bytes(self.actions)

    @classmethod
    def decode(cls, raw: bytes) -> "StateKey":
        return cls(raw)

    def child(self, action: int) -> "StateKey":
        return StateKey(self.actions + (action,))

    def parent(self) -> "StateKey":
        if not self.actions:
            raise TreeEnvError("root state has no parent")
        return StateKey(self.actions[:-1])

    def __len__(self) -> int:
        return len(self.actions)

    def __eq__(self, other) -> bool:
        return isinstance(other, StateKey) and self.actions == other.actions

    def __hash__(self) -> int:
        return hash(self.actions)

    def __repr__(self) -> str:
        return f"StateKey({list(self.actions)})"


class Cursor:
    """Mutable walker over an environment's history tree.

    Implementations maintain whatever incremental structure the game needs
    (bitboards, partial sequences) so that push/pop are O(1)-ish and the
    exact solvers never materialise StateKeys on hot paths. Subclasses set
    ``self.env`` and ``self.history`` (a list of action indices).
    """

    env: "TreeEnv"
    history: list[int]

    def legal_actions(self) -> list[int]:
        """Legal actions at the current state, ascending."""
        raise NotImplementedError

    def child_count(self) -> int:
        return len(self.legal_actions())

    def mask(self) -> list[int]:
        m = [0] * self.env.action_space_size
        for a in self.legal_actions():
            m[a] = 1
        return m

    def push(self, action: int) -> None:
        raise NotImplementedError

    def pop(self) -> None:
        raise NotImplementedError

    def is_terminal(self) -> bool:
        raise NotImplementedError

    def owner(self) -> int:
        """Owner of the current nonterminal state (ENVIRONMENT or player)."""
        raise NotImplementedError

    def env_probs(self) -> list[float]:
        """Transition probabilities aligned with legal_actions()."""
        raise OwnershipError("state is not environment-owned")

    def outcome(self):
        """Terminal outcome tag for game environments, else None."""
        return None

    def terminal_log_rewards(self) -> tuple[float, ...]:
        """Per-player log rewards at a terminal state (intrinsic-reward envs)."""
        raise NotImplementedError

    def key(self) -> StateKey:
        return StateKey(self.history)

    def key_bytes(self) -> bytes:
        return bytes(self.history)

    def obs_key(self):
        """Hashable observation identity for parameter sharing; history by default.

        Board games override this with the (position, side-to-move) identity so
        that models generalise across histories reaching the same position.
        """
        return bytes(self.history)

    @property
    def depth(self) -> int:
        return len(self.history)


class TreeEnv:
    """Rooted-tree environment: players and chance nodes over a finite tree.

    Subclasses set ``num_players`` and ``action_space_size`` and implement
    ``cursor()``. Environments are immutable after construction and safe to
    share; each cursor is single-owner.
    """

    num_players: int = 1
    action_space_size: int = 0

    @property
    def root(self) -> StateKey:
        return StateKey()

    def cursor(self) -> Cursor:
        raise NotImplementedError

    def cursor_at(self, key: StateKey) -> Cursor:
        cur = self.cursor()
        for a in key.actions:
            if cur.is_terminal():
                raise TerminalStateError(f"history descends through terminal state: {key}")
            if a not in cur.legal_actions():
                raise IllegalActionError(f"illegal action {a} in history {key}")
            cur.push(a)
        return cur

    # -- key-based contract operations ------------------------------------

    def is_terminal(self, key: StateKey) -> bool:
        return self.cursor_at(key).is_terminal()

    def children(self, key: StateKey) -> list[tuple[int, StateKey]]:
        """All legal children of a nonterminal state, ascending action index."""
        cur = self.cursor_at(key)
        if cur.is_terminal():
            raise TerminalStateError(f"children() on terminal state {key}")
        return [(a, key.child(a)) for a in cur.legal_actions()]

    def owner(self, key: StateKey) -> int:
        cur = self.cursor_at(key)
        if cur.is_terminal():
            raise TerminalStateError(f"owner() on terminal state {key}")
        return cur.owner()

    def env_transition(self, key: StateKey) -> list[tuple[int, float]]:
        """Distribution over children of an environment state as (action, prob)."""
        cur = self.cursor_at(key)
        if cur.is_terminal():
            raise TerminalStateError(f"env_transition() on terminal state {key}")
        if cur.owner() != ENVIRONMENT:
            raise OwnershipError(f"env_transition() on agent-owned state {key}")
        actions = cur.legal_actions()
        probs = cur.env_probs()
        total = sum(probs)
        if abs(total - 1.0) > PROB_TOLERANCE:
            raise TreeEnvError(f"environment transition sums to {total!r} at {key}")
        if any(p <= 0.0 for p in probs):
            raise TreeEnvError(f"environment transition lacks full support at {key}")
        return list(zip(actions, probs))

    def legal_mask(self, key: StateKey) -> list[int]:
        cur = self.cursor_at(key)
        if cur.is_terminal():
            raise TerminalStateError(f"legal_mask() on terminal state {key}")
        return cur.mask()

    def obs_key(self, key: StateKey):
        return self.cursor_at(key).obs_key()

    def outcome(self, key: StateKey):
        return self.cursor_at(key).outcome()

    def terminal_log_rewards(self, key: StateKey) -> tuple[float, ...]:
        cur = self.cursor_at(key)
        if not cur.is_terminal():
            raise TreeEnvError(f"terminal_log_rewards() on nonterminal state {key}")
        return cur.terminal_log_rewards()


@dataclass
class TrajectoryStep:
    """One recorded step: the state observed, what was legal, who moved, what
    was played, and (on the final step only) the per-player log reward."""

    state: StateKey
    mask: tuple[int, ...]
    curr_player: int
    action: int
    done: bool
    log_reward: tuple[float, ...] | None = None


class Trajectory:
    """Ordered record of one complete or partial rollout."""

    def __init__(self, steps: Sequence[TrajectoryStep] | None = None):
        self.steps: list[TrajectoryStep] = list(steps) if steps else []

    def append(self, step: TrajectoryStep) -> None:
        if self.steps and self.steps[-1].done:
            raise TreeEnvError("cannot append after the terminal step")
        if not step.mask[step.action]:
            raise IllegalActionError(f"action {step.action} is masked out")
        if self.steps:
            prev = self.steps[-1]
            if step.state != prev.state.child(prev.action):
                raise TreeEnvError("step state is not the child of the previous step")
        if step.done != (step.log_reward is not None):
            raise TreeEnvError("log_reward must be present exactly on the done step")
        self.steps.append(step)

    @property
    def complete(self) -> bool:
        return bool(self.steps) and self.steps[-1].done

    @property
    def final_state(self) -> StateKey:
        if not self.complete:
            raise TreeEnvError("trajectory is not complete")
        last = self.steps[-1]
        return last.state.child(last.action)

    @property
    def log_reward(self) -> tuple[float, ...]:
        if not self.complete:
            raise TreeEnvError("trajectory is not complete")
        return self.steps[-1].log_reward

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self) -> Iterator[TrajectoryStep]:
        return iter(self.steps)


def trajectory_to_json(traj: Trajectory) -> str:
    """One trajectory as a single JSON line (list of step records)."""
    records = []
    for s in traj.steps:
        records.append(
            {
                "state": list(s.state.actions),
                "mask": list(s.mask),
                "curr_player": s.curr_player,
                "action": s.action,
                "done": s.done,
                "log_reward": list(s.log_reward) if s.log_reward is not None else None,
            }
        )
    return json.dumps(records)


def trajectory_from_json(line: str) -> Trajectory:
    traj = Trajectory()
    for rec in json.loads(line):
        traj.append(
            TrajectoryStep(
                state=StateKey(rec["state"]),
                mask=tuple(rec["mask"]),
                curr_player=rec["curr_player"],
                action=rec["action"],
                done=rec["done"],
                log_reward=tuple(rec["log_reward"]) if rec["log_reward"] is not None else None,
            )
        )
    return traj


def write_trajectories(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w") as fh:
        for t in trajectories:
            fh.write(trajectory_to_json(t) + "\n")


def read_trajectories(path) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(trajectory_from_json(line))
    return out
