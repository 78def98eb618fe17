"""Ground-truth flow computation by backward induction over history trees.

Everything here works in log space: with outcome sharpness up to 15 the
win/loss reward ratio is e^30, so linear-space accumulation is not an option.
Backward induction is an explicit-stack post-order walk; subtree results are
never merged across transpositions (states are histories, and the systems
being solved are defined on the history tree).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .envs.core import ENVIRONMENT, Cursor, StateKey, TreeEnv, TreeEnvError
from .envs.boards import log_outcome_reward

MAX_SOLVE_NODES = 50_000_000
MAX_STRATEGIES = 10_000

TERMINAL = -1


class GuardExceededError(TreeEnvError):
    """A brute-force routine refused an instance above its size guard."""


def _lse(vals):
    m = max(vals)
    if m == -math.inf:
        return m
    return m + math.log(sum(math.exp(v - m) for v in vals))


class FlowTable:
    """Per-player positive flows keyed by state (stored as log flows).

    Keys are the canonical byte encoding of the state's action history.
    """

    def __init__(self, num_players: int = 1):
        self.num_players = num_players
        self._index: dict[bytes, int] = {}
        self._logf: list[list[float]] = [[] for _ in range(num_players)]

    def add(self, key: bytes, log_flows) -> None:
        idx = self._index.get(key)
        if idx is None:
            self._index[key] = len(self._logf[0])
            for p in range(self.num_players):
                self._logf[p].append(log_flows[p])
        else:
            for p in range(self.num_players):
                self._logf[p][idx] = log_flows[p]

    @staticmethod
    def _key(state) -> bytes:
        return state.encode() if isinstance(state, StateKey) else bytes(state)

    def __contains__(self, state) -> bool:
        return self._key(state) in self._index

    def __len__(self) -> int:
        return len(self._index)

    def log_flow(self, player: int, state) -> float:
        key = self._key(state)
        idx = self._index.get(key)
        if idx is None:
            raise KeyError(f"state not in flow table: {key!r}")
        return self._logf[player - 1][idx]

    def flow(self, player: int, state) -> float:
        return math.exp(self.log_flow(player, state))

    def log_flows(self, state) -> tuple[float, ...]:
        key = self._key(state)
        idx = self._index.get(key)
        if idx is None:
            raise KeyError(f"state not in flow table: {key!r}")
        return tuple(self._logf[p][idx] for p in range(self.num_players))

    def set_log_flow(self, player: int, state, value: float) -> None:
        key = self._key(state)
        self._logf[player - 1][self._index[key]] = value

    def keys(self):
        return self._index.keys()

    def log_policy(self, player: int, state) -> dict[int, float]:
        """Log edge probabilities F_i(child)/F_i(state) over existing children."""
        key = self._key(state)
        logf_s = self.log_flow(player, key)
        out = {}
        for a in range(256):
            child = key + bytes([a])
            idx = self._index.get(child)
            if idx is None:
                continue
            out[a] = self._logf[player - 1][idx] - logf_s
        return out

    def export_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for key, idx in self._index.items():
                rec = {
                    "state": list(key),
                    "log_flow": [self._logf[p][idx] for p in range(self.num_players)],
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "FlowTable":
        table = None
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if table is None:
                    table = cls(len(rec["log_flow"]))
                table.add(bytes(rec["state"]), rec["log_flow"])
        return table if table is not None else cls(1)


# -- reward models for the solvers -----------------------------------------


def intrinsic_rewards(cursor: Cursor, log_b) -> tuple[float, ...]:
    return cursor.terminal_log_rewards()


def outcome_rewards(lam: float, branch_adjusted: bool = True, num_players: int = 2):
    """Win/draw/loss log rewards (+lam/0/-lam), optionally divided by each
    player's product of branching factors along the trajectory."""

    def fn(cursor: Cursor, log_b) -> tuple[float, ...]:
        out = cursor.outcome()
        return tuple(
            log_outcome_reward(out, p + 1, lam) - (log_b[p] if branch_adjusted else 0.0)
            for p in range(num_players)
        )

    return fn


# -- the backward-induction engine ------------------------------------------


def backward_induction(
    env: TreeEnv,
    reward_fn,
    num_players: int,
    *,
    store: bool = False,
    visit=None,
    guard: int = MAX_SOLVE_NODES,
    reverse_children: bool = False,
):
    """Post-order solve of the joint flow recurrence.

    At a state owned by player j the j-flow is the sum of child j-flows and
    every other flow is the j-policy-weighted average of its child flows; at
    an environment state every flow is the transition-weighted average; at a
    terminal state flows equal rewards. ``visit(owner, log_flows, child_log_
    flows, env_log_probs, log_b)`` is called once per state with the player
    branching prefix ``log_b`` (the node's own fanout excluded).

    Returns (root log flows, FlowTable or None, node count).
    """
    cur = env.cursor()
    table = FlowTable(num_players) if store else None
    path: list[int] = []
    # branch prefixes are kept as a stack of freshly summed tuples; updating a
    # running total in place lets rounding drift accumulate across the whole
    # traversal instead of a single path
    log_b_stack: list[tuple] = [(0.0,) * num_players]
    nodes = 0
    stack: list[list] = []
    pending = None
    log = math.log

    while True:
        if pending is None:
            nodes += 1
            if nodes > guard:
                raise GuardExceededError(f"tree exceeds {guard} nodes")
            log_b = log_b_stack[-1]
            if cur.is_terminal():
                vals = tuple(reward_fn(cur, log_b))
                for v in vals:
                    if not math.isfinite(v):
                        raise ValueError(f"non-finite log reward {vals} at {path}")
                if store:
                    table.add(bytes(path), vals)
                if visit is not None:
                    visit(TERMINAL, vals, None, None, log_b)
                pending = vals
                continue
            owner = cur.owner()
            actions = cur.legal_actions()
            logp = None
            if owner == ENVIRONMENT:
                logp = [log(p) for p in cur.env_probs()]
            if reverse_children:
                actions = actions[::-1]
                if logp is not None:
                    logp = logp[::-1]
            if owner > 0:
                child_b = list(log_b)
                child_b[owner - 1] += log(len(actions))
                log_b_stack.append(tuple(child_b))
            else:
                log_b_stack.append(log_b)
            stack.append([actions, 0, owner, logp, []])
            a = actions[0]
            cur.push(a)
            path.append(a)
            continue

        if not stack:
            return pending, table, nodes

        frame = stack[-1]
        frame[4].append(pending)
        pending = None
        frame[1] += 1
        cur.pop()
        path.pop()
        if frame[1] < len(frame[0]):
            a = frame[0][frame[1]]
            cur.push(a)
            path.append(a)
            continue

        actions, _, owner, logp, child_vals = frame
        stack.pop()
        log_b_stack.pop()
        vals = _combine(owner, child_vals, logp, num_players)
        if store:
            table.add(bytes(path), vals)
        if visit is not None:
            visit(owner, vals, child_vals, logp, log_b_stack[-1])
        pending = vals


def _combine(owner, child_vals, logp, n):
    if owner == ENVIRONMENT:
        return tuple(
            _lse([logp[c] + cv[i] for c, cv in enumerate(child_vals)]) for i in range(n)
        )
    j = owner - 1
    if n == 2:  # hot path for two-player games
        fj = [cv[j] for cv in child_vals]
        denom = _lse(fj)
        i = 1 - j
        other = _lse([cv[i] + fj[c] for c, cv in enumerate(child_vals)]) - denom
        return (denom, other) if j == 0 else (other, denom)
    fj = [cv[j] for cv in child_vals]
    denom = _lse(fj)
    out = [0.0] * n
    out[j] = denom
    for i in range(n):
        if i != j:
            out[i] = _lse([cv[i] + fj[c] for c, cv in enumerate(child_vals)]) - denom
    return tuple(out)


# -- solvers -----------------------------------------------------------------


def solve_gfn(env: TreeEnv, *, guard: int = MAX_SOLVE_NODES, reverse_children: bool = False) -> FlowTable:
    """Flows of a deterministic single-agent tree: sums at interior states,
    rewards at terminals. Policy edge probabilities are child/parent ratios."""
    if env.num_players != 1:
        raise TreeEnvError("solve_gfn expects a single-agent environment")

    def no_env(owner, vals, children, logp, log_b):
        if owner == ENVIRONMENT:
            raise TreeEnvError("solve_gfn got an environment state; use solve_eflow")

    _, table, _ = backward_induction(
        env, intrinsic_rewards, 1, store=True, visit=no_env, guard=guard,
        reverse_children=reverse_children,
    )
    return table


def solve_eflow(env: TreeEnv, *, guard: int = MAX_SOLVE_NODES, reverse_children: bool = False) -> FlowTable:
    """Unique flow of a single-agent stochastic tree: sums at agent states,
    transition expectations at environment states, rewards at terminals."""
    if env.num_players != 1:
        raise TreeEnvError("solve_eflow expects a single-agent environment")
    _, table, _ = backward_induction(
        env, intrinsic_rewards, 1, store=True, guard=guard, reverse_children=reverse_children,
    )
    return table


def solve_afn(
    env: TreeEnv,
    lam: float | None = None,
    branch_adjusted: bool = True,
    *,
    guard: int = MAX_SOLVE_NODES,
    reverse_children: bool = False,
) -> FlowTable:
    """Jointly optimal per-player flows of an n-player tree.

    With ``lam`` given, terminal rewards are the zero-sum outcome rewards
    (optionally branch-adjusted); otherwise the environment's intrinsic
    per-player rewards are used.
    """
    n = env.num_players
    reward_fn = intrinsic_rewards if lam is None else outcome_rewards(lam, branch_adjusted, n)
    _, table, _ = backward_induction(
        env, reward_fn, n, store=True, guard=guard, reverse_children=reverse_children,
    )
    return table


# -- residual checks ---------------------------------------------------------


@dataclass
class ResidualReport:
    max_agent_sum: float = 0.0
    max_expectation: float = 0.0
    max_terminal: float = 0.0
    states: int = 0

    @property
    def max_residual(self) -> float:
        return max(self.max_agent_sum, self.max_expectation, self.max_terminal)


def edb_residuals(env: TreeEnv, table: FlowTable, reward_fn=None) -> ResidualReport:
    """Recompute the expected-detailed-balance residuals of a stored table.

    For each player i: |log F_i(s) - log sum_c F_i(c)| at i's states,
    |log F_i(s) - log E_c F_i(c)| under the other owner's table policy (or the
    environment transition) elsewhere, and |log F_i(x) - log R_i(x)| at
    terminals when a reward function is supplied.
    """
    n = table.num_players
    report = ResidualReport()
    cur = env.cursor()
    path = bytearray()

    def rec(log_b):
        report.states += 1
        key = bytes(path)
        logf = table.log_flows(key)
        if cur.is_terminal():
            if reward_fn is not None:
                rewards = reward_fn(cur, log_b)
                r = max(abs(logf[i] - rewards[i]) for i in range(n))
                report.max_terminal = max(report.max_terminal, r)
            return
        owner = cur.owner()
        actions = cur.legal_actions()
        logp_env = None
        if owner == ENVIRONMENT:
            logp_env = [math.log(p) for p in cur.env_probs()]
        child_b = log_b
        if owner > 0:
            child_b = list(log_b)
            child_b[owner - 1] += math.log(len(actions))
            child_b = tuple(child_b)
        child_logf = []
        for a in actions:
            cur.push(a)
            path.append(a)
            rec(child_b)
            child_logf.append(table.log_flows(bytes(path)))
            path.pop()
            cur.pop()
        j = owner - 1
        for i in range(n):
            if owner > 0 and i == j:
                r = abs(logf[i] - _lse([cv[i] for cv in child_logf]))
                report.max_agent_sum = max(report.max_agent_sum, r)
            else:
                if owner == ENVIRONMENT:
                    w = logp_env
                else:
                    denom = _lse([cv[j] for cv in child_logf])
                    w = [cv[j] - denom for cv in child_logf]
                r = abs(logf[i] - _lse([w[c] + cv[i] for c, cv in enumerate(child_logf)]))
                report.max_expectation = max(report.max_expectation, r)

    import sys

    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 10000))
    try:
        rec((0.0,) * n)
    finally:
        sys.setrecursionlimit(old)
    return report


@dataclass
class ProductFlowReport:
    max_fm_residual: float = 0.0
    max_terminal_residual: float = 0.0
    max_branch_identity: float = 0.0
    root_log_flows: tuple = ()
    nodes: int = 0


def product_flow_residual(env: TreeEnv, table: FlowTable, reward_fn,
                          branch_identity: bool = True) -> ProductFlowReport:
    """Check that F1*F2 from a stored table is a flow for reward R1*R2, and
    (with branch-adjusted rewards) that F1*F2*B1*B2 = 1 at every state."""
    report = ProductFlowReport()
    cur = env.cursor()
    path = bytearray()

    def rec(log_b):
        report.nodes += 1
        key = bytes(path)
        f1, f2 = table.log_flows(key)
        prod = f1 + f2
        if branch_identity:
            report.max_branch_identity = max(
                report.max_branch_identity, abs(prod + log_b[0] + log_b[1])
            )
        if cur.is_terminal():
            r1, r2 = reward_fn(cur, log_b)
            report.max_terminal_residual = max(
                report.max_terminal_residual, abs(prod - (r1 + r2))
            )
            return
        owner = cur.owner()
        actions = cur.legal_actions()
        child_b = list(log_b)
        child_b[owner - 1] += math.log(len(actions))
        child_b = tuple(child_b)
        child_prod = []
        for a in actions:
            cur.push(a)
            path.append(a)
            rec(child_b)
            c1, c2 = table.log_flows(bytes(path))
            child_prod.append(c1 + c2)
            path.pop()
            cur.pop()
        report.max_fm_residual = max(report.max_fm_residual, abs(prod - _lse(child_prod)))

    import sys

    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 10000))
    try:
        rec((0.0, 0.0))
    finally:
        sys.setrecursionlimit(old)
    report.root_log_flows = table.log_flows(b"")
    return report


def afn_stream_check(env: TreeEnv, lam: float | None = None, branch_adjusted: bool = True,
                     *, reward_fn=None, guard: int = MAX_SOLVE_NODES) -> ProductFlowReport:
    """Solve and check the product-flow and branch identities in one streaming
    pass, without materialising the flow table (for trees too large to store)."""
    report = ProductFlowReport()
    if reward_fn is None:
        reward_fn = outcome_rewards(lam, branch_adjusted, 2)

    def visit(owner, vals, child_vals, logp, log_b):
        prod = vals[0] + vals[1]
        if branch_adjusted:
            report.max_branch_identity = max(
                report.max_branch_identity, abs(prod + log_b[0] + log_b[1])
            )
        if owner != TERMINAL:
            child_prod = [cv[0] + cv[1] for cv in child_vals]
            report.max_fm_residual = max(report.max_fm_residual, abs(prod - _lse(child_prod)))

    root, _, nodes = backward_induction(env, reward_fn, 2, visit=visit, guard=guard)
    report.root_log_flows = root
    report.nodes = nodes
    return report


# -- trajectory-balance constant ---------------------------------------------


def uniform_policy_logp(cursor: Cursor, action: int) -> float:
    return -math.log(cursor.child_count())


def table_policy_logp(table: FlowTable):
    def fn(cursor: Cursor, action: int) -> float:
        player = cursor.owner()
        key = cursor.key_bytes()
        return table.log_flow(player, key + bytes([action])) - table.log_flow(player, key)

    return fn


def tb_constant_check(
    env: TreeEnv,
    lam: float,
    policy_logp,
    n_traj: int,
    rng: np.random.Generator,
    ref_log_z: float | None = None,
):
    """Sample complete trajectories uniformly and evaluate the per-trajectory
    balance constant log Z(tau) = log R1(x) + log B2(x) + sum log P2 - sum
    log P1. Returns (Z estimate, max |log Z(tau) - ref|, mean log Z); ``ref``
    defaults to the sample mean. At the joint optimum the constant equals
    F1(root) for every trajectory.
    """
    if env.num_players != 2:
        raise TreeEnvError("trajectory balance applies to two-player alternating games")
    log_zs = []
    for _ in range(n_traj):
        cur = env.cursor()
        log_b = [0.0, 0.0]
        acc = 0.0  # sum log P2 - sum log P1
        while not cur.is_terminal():
            owner = cur.owner()
            actions = cur.legal_actions()
            log_b[owner - 1] += math.log(len(actions))
            a = int(actions[rng.integers(len(actions))])
            lp = policy_logp(cur, a)
            acc += lp if owner == 2 else -lp
            cur.push(a)
        outcome = cur.outcome()
        if outcome is not None:
            log_r1 = log_outcome_reward(outcome, 1, lam) - log_b[0]
        else:
            # intrinsic-reward game: rewards already carry the branch adjustment
            log_r1 = cur.terminal_log_rewards()[0]
        log_zs.append(log_r1 + log_b[1] + acc)
    mean = sum(log_zs) / len(log_zs)
    ref = mean if ref_log_z is None else ref_log_z
    max_dev = max(abs(z - ref) for z in log_zs)
    return math.exp(mean), max_dev, mean


# -- environment strategies and marginalisation ------------------------------


@dataclass
class EnvStrategy:
    """A deterministic pre-commitment of every reachable environment state to
    one child, with its probability under the environment policy."""

    choices: dict[bytes, int]
    probability: float
    vertices: frozenset = field(default_factory=frozenset)


def count_env_strategies(env: TreeEnv) -> int:
    cur = env.cursor()

    def rec() -> int:
        if cur.is_terminal():
            return 1
        owner = cur.owner()
        counts = []
        for a in cur.legal_actions():
            cur.push(a)
            counts.append(rec())
            cur.pop()
        if owner == ENVIRONMENT:
            return sum(counts)
        total = 1
        for c in counts:
            total *= c
        return total

    return rec()


def enumerate_env_strategies(env: TreeEnv, guard: int = MAX_STRATEGIES) -> list[EnvStrategy]:
    total = count_env_strategies(env)
    if total > guard:
        raise GuardExceededError(f"{total} environment strategies exceed the guard of {guard}")
    cur = env.cursor()
    path = bytearray()

    def rec() -> list[tuple[dict, float, set]]:
        here = bytes(path)
        if cur.is_terminal():
            return [({}, 1.0, {here})]
        owner = cur.owner()
        actions = cur.legal_actions()
        if owner == ENVIRONMENT:
            probs = cur.env_probs()
            out = []
            for a, p in zip(actions, probs):
                cur.push(a)
                path.append(a)
                for choices, q, verts in rec():
                    out.append(({here: a, **choices}, p * q, verts | {here}))
                path.pop()
                cur.pop()
            return out
        # player state: keep all children, combine strategies across subtrees
        parts = []
        for a in actions:
            cur.push(a)
            path.append(a)
            parts.append(rec())
            path.pop()
            cur.pop()
        out = [({}, 1.0, {here})]
        for part in parts:
            out = [
                ({**choices, **c2}, p * p2, verts | v2)
                for choices, p, verts in out
                for c2, p2, v2 in part
            ]
        return out

    return [EnvStrategy(c, p, frozenset(v)) for c, p, v in rec()]


def strategy_marginalization_residual(env: TreeEnv, guard: int = MAX_STRATEGIES) -> float:
    """Compare the stochastic-tree optimal policy against the normalised
    strategy-conditional expectation of deterministic flows: for agent states,
    P(c|s) should be proportional to E[F_strategy(c) | s reachable]."""
    table = solve_eflow(env)
    strategies = enumerate_env_strategies(env, guard)

    contrib: dict[bytes, dict[int, float]] = {}
    mass: dict[bytes, float] = {}
    cur = env.cursor()
    path = bytearray()

    def walk(strategy: EnvStrategy) -> float:
        """Flow of the strategy-restricted deterministic tree (sum of rewards)."""
        here = bytes(path)
        if cur.is_terminal():
            return math.exp(cur.terminal_log_rewards()[0])
        owner = cur.owner()
        if owner == ENVIRONMENT:
            a = strategy.choices[here]
            cur.push(a)
            path.append(a)
            val = walk(strategy)
            path.pop()
            cur.pop()
            return val
        total = 0.0
        per_child = {}
        for a in cur.legal_actions():
            cur.push(a)
            path.append(a)
            val = walk(strategy)
            path.pop()
            cur.pop()
            per_child[a] = val
            total += val
        slot = contrib.setdefault(here, {})
        for a, val in per_child.items():
            slot[a] = slot.get(a, 0.0) + strategy.probability * val
        mass[here] = mass.get(here, 0.0) + strategy.probability
        return total

    for strat in strategies:
        walk(strat)

    worst = 0.0
    for key, slot in contrib.items():
        expected = {a: v / mass[key] for a, v in slot.items()}
        norm = sum(expected.values())
        logf_s = table.log_flow(1, key)
        for a, v in expected.items():
            p_marg = v / norm
            p_edb = math.exp(table.log_flow(1, key + bytes([a])) - logf_s)
            worst = max(worst, abs(p_marg - p_edb))
    return worst


# -- flow-as-expectation ------------------------------------------------------


def log_branch_prefix(env: TreeEnv, state: StateKey, player: int) -> float:
    """log of the product of player i's branching factors strictly before state."""
    cur = env.cursor()
    total = 0.0
    for a in state.actions:
        if not cur.is_terminal() and cur.owner() == player:
            total += math.log(cur.child_count())
        cur.push(a)
    return total


def flow_expectation_residual(
    env: TreeEnv,
    table: FlowTable,
    lam: float,
    states: list[StateKey],
    players=(1, 2),
) -> float:
    """Check B_i(s) F_i(s) = E[raw outcome reward of i] where from s player i
    moves uniformly and the opponent follows its table policy. Returns the max
    relative error over the given states and players."""
    worst = 0.0
    for state in states:
        cur = env.cursor_at(state)
        prefix = tuple(log_branch_prefix(env, state, p) for p in (1, 2))
        for player in players:
            expected = _uniform_vs_policy_expectation(cur, table, lam, player, prefix)
            bf = math.exp(
                prefix[player - 1] + table.log_flow(player, state.encode())
            )
            worst = max(worst, abs(expected - bf) / abs(expected))
    return worst


def _uniform_vs_policy_expectation(cur: Cursor, table: FlowTable, lam: float,
                                   player: int, log_b) -> float:
    if cur.is_terminal():
        outcome = cur.outcome()
        if outcome is not None:
            return math.exp(log_outcome_reward(outcome, player, lam))
        # intrinsic branch-adjusted reward: undo the adjustment to get the raw one
        return math.exp(cur.terminal_log_rewards()[player - 1] + log_b[player - 1])
    owner = cur.owner()
    actions = cur.legal_actions()
    if owner == player:
        weights = [1.0 / len(actions)] * len(actions)
    else:
        key = cur.key_bytes()
        logf_s = table.log_flow(owner, key)
        weights = [
            math.exp(table.log_flow(owner, key + bytes([a])) - logf_s) for a in actions
        ]
    child_b = list(log_b)
    child_b[owner - 1] += math.log(len(actions))
    child_b = tuple(child_b)
    total = 0.0
    for a, w in zip(actions, weights):
        cur.push(a)
        total += w * _uniform_vs_policy_expectation(cur, table, lam, player, child_b)
        cur.pop()
    return total


def tree_size(env: TreeEnv, guard: int = MAX_SOLVE_NODES) -> tuple[int, int]:
    """(total states, terminal states) of the history tree, guard-checked."""
    cur = env.cursor()
    nodes = 1
    leaves = 0
    stack = [cur.legal_actions()] if not cur.is_terminal() else []
    if not stack:
        return 1, 1
    idx = [0]
    while stack:
        actions = stack[-1]
        i = idx[-1]
        if i == len(actions):
            stack.pop()
            idx.pop()
            if stack:
                cur.pop()
            continue
        idx[-1] += 1
        cur.push(actions[i])
        nodes += 1
        if nodes > guard:
            raise GuardExceededError(f"tree exceeds {guard} nodes")
        if cur.is_terminal():
            leaves += 1
            cur.pop()
        else:
            stack.append(cur.legal_actions())
            idx.append(0)
    return nodes, leaves
