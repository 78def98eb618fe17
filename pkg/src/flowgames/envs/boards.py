"""Parametric k-in-a-row board games: tic-tac-toe style free placement and
connect-k style gravity drops.

Boards are encoded as one bitmask per player, column-major with a guard bit
above each column so shift-based line detection cannot wrap between columns.
Win checks are O(k) shift-and-AND per direction; a naive line scan backs them
in tests.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import Cursor, TreeEnv, TreeEnvError


class Outcome(enum.Enum):
    WIN_P1 = 1
    WIN_P2 = 2
    DRAW = 0

    def winner(self) -> int | None:
        return None if self is Outcome.DRAW else self.value


def log_outcome_reward(outcome: Outcome, player: int, lam: float) -> float:
    """Raw zero-sum log reward: +lam for a win, 0 for a draw, -lam for a loss."""
    if outcome is Outcome.DRAW:
        return 0.0
    return lam if outcome.value == player else -lam


@dataclass(frozen=True)
class BoardGameSpec:
    rows: int
    cols: int
    win_length: int
    gravity: bool

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("board must have positive dimensions")
        if self.rows * self.cols > 64:
            raise ValueError("board exceeds 64 cells (not bitboard encodable)")
        if not (1 <= self.win_length <= max(self.rows, self.cols)):
            raise ValueError("win_length must be between 1 and max(rows, cols)")


def make_board_game(spec: BoardGameSpec) -> "BoardGame":
    """Two-player alternating game from a board spec; player 1 moves first."""
    spec.validate()
    return BoardGame(spec)


class BoardGame(TreeEnv):
    num_players = 2

    def __init__(self, spec: BoardGameSpec):
        self.spec = spec
        self.rows = spec.rows
        self.cols = spec.cols
        self.k = spec.win_length
        self.gravity = spec.gravity
        self.action_space_size = spec.cols if spec.gravity else spec.rows * spec.cols
        self.col_stride = spec.rows + 1  # one guard bit per column
        # bit offsets for the four line directions
        self.directions = (1, self.col_stride, self.col_stride + 1, self.col_stride - 1)
        self.full_count = spec.rows * spec.cols

    def cursor(self) -> "BoardCursor":
        return BoardCursor(self)

    # -- bit helpers -------------------------------------------------------

    def bit(self, row: int, col: int) -> int:
        return 1 << (col * self.col_stride + row)

    def has_line(self, bits: int) -> bool:
        k = self.k
        for d in self.directions:
            x = bits
            for i in range(1, k):
                x &= bits >> (i * d)
                if not x:
                    break
            if x:
                return True
        return False

    def action_cell(self, action: int, heights=None) -> tuple[int, int]:
        if self.gravity:
            return (heights[action], action)
        return divmod(action, self.cols)

    def mirror_action(self, action: int) -> int:
        """Action under a left-right board reflection (for symmetry tests)."""
        if self.gravity:
            return self.cols - 1 - action
        r, c = divmod(action, self.cols)
        return r * self.cols + (self.cols - 1 - c)

    def obs_planes(self, obs) -> np.ndarray:
        """Decode an observation key into (own, opponent, turn) planes."""
        bits1, bits2, player = obs
        own, opp = (bits1, bits2) if player == 1 else (bits2, bits1)
        planes = np.zeros((3, self.rows, self.cols), dtype=np.float64)
        for c in range(self.cols):
            for r in range(self.rows):
                b = self.bit(r, c)
                if own & b:
                    planes[0, r, c] = 1.0
                elif opp & b:
                    planes[1, r, c] = 1.0
        planes[2, :, :] = 1.0 if player == 1 else 0.0
        return planes

    def plane_shape(self) -> tuple[int, int, int]:
        return (3, self.rows, self.cols)


class BoardCursor(Cursor):
    def __init__(self, env: BoardGame):
        self.env = env
        self.history: list[int] = []
        self.bits = [0, 0]  # player 1 / player 2 stones
        self.heights = [0] * env.cols if env.gravity else None
        self.count = 0
        self.won_by: int | None = None  # player index, set while terminal by win
        self._won_stack: list[int | None] = []

    def legal_actions(self) -> list[int]:
        env = self.env
        if env.gravity:
            return [c for c in range(env.cols) if self.heights[c] < env.rows]
        occupied = self.bits[0] | self.bits[1]
        out = []
        for a in range(env.action_space_size):
            r, c = divmod(a, env.cols)
            if not occupied & env.bit(r, c):
                out.append(a)
        return out

    def child_count(self) -> int:
        env = self.env
        if env.gravity:
            return sum(1 for c in range(env.cols) if self.heights[c] < env.rows)
        return env.full_count - self.count

    def is_terminal(self) -> bool:
        return self.won_by is not None or self.count == self.env.full_count

    def owner(self) -> int:
        return 1 if self.count % 2 == 0 else 2

    def outcome(self) -> Outcome:
        if not self.is_terminal():
            raise TreeEnvError("outcome() on nonterminal board")
        if self.won_by == 1:
            return Outcome.WIN_P1
        if self.won_by == 2:
            return Outcome.WIN_P2
        return Outcome.DRAW

    def push(self, action: int) -> None:
        env = self.env
        mover = 0 if self.count % 2 == 0 else 1
        if env.gravity:
            row, col = self.heights[action], action
            self.heights[action] += 1
        else:
            row, col = divmod(action, env.cols)
        self.bits[mover] |= env.bit(row, col)
        self.count += 1
        self.history.append(action)
        self._won_stack.append(self.won_by)
        if self.won_by is None and env.has_line(self.bits[mover]):
            self.won_by = mover + 1

    def pop(self) -> None:
        env = self.env
        action = self.history.pop()
        self.count -= 1
        mover = 0 if self.count % 2 == 0 else 1
        if env.gravity:
            self.heights[action] -= 1
            row, col = self.heights[action], action
        else:
            row, col = divmod(action, env.cols)
        self.bits[mover] &= ~env.bit(row, col)
        self.won_by = self._won_stack.pop()

    def obs_key(self):
        return (self.bits[0], self.bits[1], 1 if self.count % 2 == 0 else 2)


def naive_has_line(env: BoardGame, bits: int) -> bool:
    """Line detection by scanning every k-window; oracle for has_line."""
    k = env.k
    cells = [[bool(bits & env.bit(r, c)) for c in range(env.cols)] for r in range(env.rows)]
    for r in range(env.rows):
        for c in range(env.cols):
            for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
                rr, cc = r + (k - 1) * dr, c + (k - 1) * dc
                if not (0 <= rr < env.rows and 0 <= cc < env.cols):
                    continue
                if all(cells[r + i * dr][c + i * dc] for i in range(k)):
                    return True
    return False


def tictactoe() -> BoardGame:
    return make_board_game(BoardGameSpec(3, 3, 3, gravity=False))


def connect_k(rows: int, cols: int, k: int) -> BoardGame:
    return make_board_game(BoardGameSpec(rows, cols, k, gravity=True))
