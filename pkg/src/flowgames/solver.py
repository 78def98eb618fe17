"""Perfect and heuristic game solving.

The exact solver is a negamax with alpha-beta pruning and a transposition
table keyed on the board position (values are history-independent). Scores
encode distance: a win in d plies scores MAX - d and a loss in d plies
-(MAX - d), so the search naturally prefers quick wins and slow losses. A
plain exhaustive minimax oracle (no pruning, no ordering, no score encoding
tricks) backs the solver in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

from .envs.boards import BoardGame, Outcome
from .envs.core import StateKey

MAX_SCORE = 1 << 20

WIN, DRAW, LOSS = 1, 0, -1

EXACT, LOWER, UPPER = 0, 1, 2


class BudgetExceeded(Exception):
    pass


@dataclass(frozen=True)
class SolveResult:
    """Game value from the mover's perspective with distance-to-outcome.

    For decided positions the distance is the number of plies to the quickest
    win / slowest loss; for draws it spans the remaining game (the number of
    plies until the board fills)."""

    sign: int           # WIN / DRAW / LOSS
    plies: int
    solved: bool = True

    @property
    def outcome_sign(self) -> str:
        return {WIN: "win", DRAW: "draw", LOSS: "loss"}[self.sign]


def _step(c: int) -> int:
    """Parent score through a move into a child with relative score c."""
    if c > 0:
        return -(c - 1)
    if c < 0:
        return -(c + 1)
    return 0


def _inv(s: int) -> int:
    """Child-score bound corresponding to a parent bound (inverse of _step)."""
    if s > 0:
        return -(s + 1)
    if s < 0:
        return -(s - 1)
    return 0


def _score_to_result(score: int, empties: int) -> SolveResult:
    if score > 0:
        return SolveResult(WIN, MAX_SCORE - score)
    if score < 0:
        return SolveResult(LOSS, MAX_SCORE + score)
    return SolveResult(DRAW, empties)


class Solver:
    """Exact solver for one board game; the transposition table is shared
    across queries (entries stay valid: positions determine their subtrees)."""

    def __init__(self, env: BoardGame, use_table: bool = True):
        self.env = env
        self.use_table = use_table
        self.table: dict = {}
        self.nodes = 0

    def _ordered_moves(self, cur, tt_move: int | None) -> list[int]:
        moves = cur.legal_actions()
        if self.env.gravity:
            center = (self.env.cols - 1) / 2.0
            moves = sorted(moves, key=lambda a: (abs(a - center), a))
        if tt_move is not None and tt_move in moves:
            moves = [tt_move] + [m for m in moves if m != tt_move]
        return moves

    def _negamax(self, cur, alpha: int, beta: int, budget: int | None) -> int:
        self.nodes += 1
        if budget is not None and self.nodes > budget:
            raise BudgetExceeded
        if cur.is_terminal():
            return -MAX_SCORE if cur.outcome() is not Outcome.DRAW else 0

        key = (cur.bits[0], cur.bits[1], cur.count & 1)
        tt_move = None
        alpha_orig = alpha
        if self.use_table:
            hit = self.table.get(key)
            if hit is not None:
                score, flag, tt_move = hit
                if flag == EXACT:
                    return score
                if flag == LOWER and score > alpha:
                    alpha = score
                elif flag == UPPER and score < beta:
                    beta = score
                if alpha >= beta:
                    return score

        best = -MAX_SCORE - 1
        best_move = None
        for move in self._ordered_moves(cur, tt_move):
            cur.push(move)
            child = self._negamax(cur, _inv(beta), _inv(alpha), budget)
            cur.pop()
            value = _step(child)
            if value > best:
                best = value
                best_move = move
            if best > alpha:
                alpha = best
            if alpha >= beta:
                break

        if self.use_table:
            if best <= alpha_orig:
                flag = UPPER
            elif best >= beta:
                flag = LOWER
            else:
                flag = EXACT
            self.table[key] = (best, flag, best_move)
        return best

    def solve(self, position, budget: int | None = None) -> SolveResult:
        """Game-theoretic value with distance for a position given as a
        StateKey, history list, or prepared cursor. Returns an explicit
        unsolved result when the node budget runs out."""
        cur = self._cursor_at(position)
        empties = self.env.full_count - cur.count
        if cur.is_terminal():
            sign = DRAW if cur.outcome() is Outcome.DRAW else LOSS
            return SolveResult(sign, 0 if sign == LOSS else empties)
        self.nodes = 0
        try:
            score = self._negamax(cur, -MAX_SCORE - 1, MAX_SCORE + 1, budget)
        except BudgetExceeded:
            return SolveResult(DRAW, 0, solved=False)
        return _score_to_result(score, empties)

    def move_scores(self, position, budget: int | None = None) -> dict[int, int]:
        """Exact score of every legal move (parent perspective)."""
        cur = self._cursor_at(position)
        out = {}
        self.nodes = 0
        for move in cur.legal_actions():
            cur.push(move)
            child = self._negamax(cur, -MAX_SCORE - 1, MAX_SCORE + 1, budget)
            cur.pop()
            out[move] = _step(child)
        return out

    def optimal_moves(self, position, budget: int | None = None) -> set[int]:
        scores = self.move_scores(position, budget)
        best = max(scores.values())
        return {m for m, s in scores.items() if s == best}

    def _cursor_at(self, position):
        if hasattr(position, "legal_actions"):
            return position
        if isinstance(position, StateKey):
            return self.env.cursor_at(position)
        return self.env.cursor_at(StateKey(position))


# -- the naive oracle ---------------------------------------------------------


def naive_minimax(env: BoardGame, memo: dict | None = None):
    """Plain exhaustive minimax over board positions: returns a function
    position -> (sign, plies). Independent of the alpha-beta machinery."""
    memo = {} if memo is None else memo

    def value(cur) -> tuple[int, int]:
        key = (cur.bits[0], cur.bits[1], cur.count & 1)
        hit = memo.get(key)
        if hit is not None:
            return hit
        if cur.is_terminal():
            out = (DRAW, 0) if cur.outcome() is Outcome.DRAW else (LOSS, 0)
            memo[key] = out
            return out
        candidates = []
        for move in cur.legal_actions():
            cur.push(move)
            sign, plies = value(cur)
            cur.pop()
            candidates.append((-sign, plies + 1))
        wins = [d for s, d in candidates if s == WIN]
        if wins:
            out = (WIN, min(wins))
        elif any(s == DRAW for s, _ in candidates):
            out = (DRAW, next(d for s, d in candidates if s == DRAW))
        else:
            out = (LOSS, max(d for _, d in candidates))
        memo[key] = out
        return out

    def solve(position) -> SolveResult:
        if hasattr(position, "legal_actions"):
            cur = position
        elif isinstance(position, StateKey):
            cur = env.cursor_at(position)
        else:
            cur = env.cursor_at(StateKey(position))
        sign, plies = value(cur)
        return SolveResult(sign, plies)

    return solve


def reachable_positions(env: BoardGame) -> list[list[int]]:
    """One witness history per distinct reachable board position."""
    import sys

    sys.setrecursionlimit(100_000)
    seen = set()
    out = []
    cur = env.cursor()

    def rec():
        key = (cur.bits[0], cur.bits[1], cur.count & 1)
        if key in seen:
            return
        seen.add(key)
        out.append(list(cur.history))
        if cur.is_terminal():
            return
        for a in cur.legal_actions():
            cur.push(a)
            rec()
            cur.pop()

    rec()
    return out


# -- move-quality classification ------------------------------------------------


OPTIMAL, INACCURACY, BLUNDER = "optimal", "inaccuracy", "blunder"


def classify_move(solver: Solver, position, action: int,
                  budget: int | None = None) -> str | None:
    """Tag one move against perfect play: optimal moves achieve the quickest
    win or slowest loss (or keep the draw); inaccuracies keep the game value's
    sign but lose distance; blunders drop the sign. Returns None if the
    position cannot be solved within budget."""
    try:
        scores = solver.move_scores(position, budget)
    except BudgetExceeded:
        return None
    if action not in scores:
        raise ValueError(f"illegal move {action}")
    best = max(scores.values())
    mine = scores[action]
    if mine == best:
        return OPTIMAL

    def sign(s):
        return (s > 0) - (s < 0)

    return INACCURACY if sign(mine) == sign(best) else BLUNDER


def classify_policy(solver: Solver, positions, choose_action,
                    budget: int | None = None) -> dict:
    """Aggregate move quality of ``choose_action(history)`` over a corpus."""
    counts = {OPTIMAL: 0, INACCURACY: 0, BLUNDER: 0}
    skipped = 0
    for position in positions:
        action = choose_action(position)
        tag = classify_move(solver, position, action, budget)
        if tag is None:
            skipped += 1
        else:
            counts[tag] += 1
    total = sum(counts.values())
    rates = {k: (v / total if total else 0.0) for k, v in counts.items()}
    return {"counts": counts, "rates": rates, "skipped": skipped, "total": total}


def random_position_corpus(env: BoardGame, size: int, rng,
                           min_plies: int = 2, max_plies: int = 10) -> list[list[int]]:
    """Random nonterminal, nonforced positions reached by 2..10 uniform plies."""
    corpus = []
    while len(corpus) < size:
        cur = env.cursor()
        plies = int(rng.integers(min_plies, max_plies + 1))
        dead = False
        for _ in range(plies):
            actions = cur.legal_actions()
            cur.push(int(actions[rng.integers(len(actions))]))
            if cur.is_terminal():
                dead = True
                break
        if dead or cur.child_count() <= 1:
            continue
        corpus.append(list(cur.history))
    return corpus


# -- depth-limited baseline agent ---------------------------------------------------


def _line_windows(env: BoardGame) -> list[int]:
    """Bitmasks of every k-in-a-row window on the board."""
    k = env.k
    windows = []
    for r in range(env.rows):
        for c in range(env.cols):
            for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
                rr, cc = r + (k - 1) * dr, c + (k - 1) * dc
                if not (0 <= rr < env.rows and 0 <= cc < env.cols):
                    continue
                mask = 0
                for i in range(k):
                    mask |= env.bit(r + i * dr, c + i * dc)
                windows.append(mask)
    return windows


_WINDOW_CACHE: dict = {}


def _heuristic(env: BoardGame, cur) -> int:
    """Open-line count heuristic from the mover's perspective: a window with
    n of one side's stones and none of the other's is worth 10**n to that
    side."""
    windows = _WINDOW_CACHE.get(env.spec)
    if windows is None:
        windows = _line_windows(env)
        _WINDOW_CACHE[env.spec] = windows
    mover = 0 if cur.count % 2 == 0 else 1
    mine, theirs = cur.bits[mover], cur.bits[1 - mover]
    score = 0
    for w in windows:
        a = (w & mine).bit_count()
        b = (w & theirs).bit_count()
        if a and not b:
            score += 10 ** a
        elif b and not a:
            score -= 10 ** b
    return score


def tree_search_agent(env: BoardGame, position, depth: int) -> int:
    """Depth-limited alpha-beta with the open-line heuristic at the horizon;
    ties break to the lowest action index."""
    if depth < 1:
        raise ValueError("depth must be at least 1")
    big = 10 ** 12

    def search(cur, d, alpha, beta):
        if cur.is_terminal():
            # previous mover just won, or a draw
            return -big - d if cur.outcome() is not Outcome.DRAW else 0
        if d == 0:
            return _heuristic(env, cur)
        best = -big * 4
        for move in cur.legal_actions():
            cur.push(move)
            v = -search(cur, d - 1, -beta, -alpha)
            cur.pop()
            if v > best:
                best = v
            if best > alpha:
                alpha = best
            if alpha >= beta:
                break
        return best

    if hasattr(position, "legal_actions"):
        cur = position
    elif isinstance(position, StateKey):
        cur = env.cursor_at(position)
    else:
        cur = env.cursor_at(StateKey(position))
    best_move, best_val = None, None
    for move in cur.legal_actions():
        cur.push(move)
        v = -search(cur, depth - 1, -big * 4, big * 4)
        cur.pop()
        if best_val is None or v > best_val:
            best_val = v
            best_move = move
    return best_move