"""Agent evaluation: round-robin tournaments with color balance, Elo fitting
by maximum likelihood under a Davidson win/draw/loss model (anchored so the
uniform-random agent rates exactly 0), flow error against exact tables, and
move-quality aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .envs.boards import BoardGame, Outcome
from .envs.core import StateKey, TreeEnv
from .solver import Solver, tree_search_agent

ELO_SCALE = 400.0 / math.log(10.0)


# -- agents --------------------------------------------------------------------


class Agent:
    name: str

    def act(self, env: TreeEnv, cursor, rng: np.random.Generator) -> int:
        raise NotImplementedError


class UniformAgent(Agent):
    def __init__(self, name: str = "uniform"):
        self.name = name

    def act(self, env, cursor, rng):
        legal = cursor.legal_actions()
        return int(legal[rng.integers(len(legal))])


class PolicyAgent(Agent):
    """Plays a trained model; temperature 0 (the default) is the evaluation
    argmax rule."""

    def __init__(self, model, name: str, temperature: float = 0.0):
        self.model = model
        self.name = name
        self.temperature = temperature

    def act(self, env, cursor, rng):
        from .selfplay import select_action

        return select_action(self.model, env, cursor, self.temperature, rng)


class SolverAgent(Agent):
    """Perfect play: quickest win / slowest loss, lowest index on ties."""

    def __init__(self, solver: Solver, name: str = "perfect"):
        self.solver = solver
        self.name = name

    def act(self, env, cursor, rng):
        return min(self.solver.optimal_moves(cursor))


class TreeSearchAgent(Agent):
    def __init__(self, depth: int, name: str | None = None):
        self.depth = depth
        self.name = name or f"tree-search-{depth}"

    def act(self, env, cursor, rng):
        return tree_search_agent(env, cursor, self.depth)


# -- tournaments ------------------------------------------------------------------


@dataclass(frozen=True)
class MatchRecord:
    agent_a: str
    agent_b: str
    a_first: bool
    outcome: str  # "p1" / "p2" / "draw" (first mover is p1)
    plies: int
    seed: int


def play_match(env: TreeEnv, first: Agent, second: Agent, seed: int) -> tuple[str, int]:
    rng = np.random.default_rng(seed)
    cur = env.cursor()
    plies = 0
    while not cur.is_terminal():
        agent = first if cur.owner() == 1 else second
        cur.push(agent.act(env, cur, rng))
        plies += 1
    out = cur.outcome()
    tag = {Outcome.WIN_P1: "p1", Outcome.WIN_P2: "p2", Outcome.DRAW: "draw"}[out]
    return tag, plies


def run_tournament(agents: list[Agent], env: TreeEnv, games_per_pair: int,
                   seed: int = 0) -> list[MatchRecord]:
    """Round robin; every unordered pair plays exactly half its games with
    each color assignment. Each game gets its own derived seed."""
    if len(agents) < 2:
        raise ValueError("a tournament needs at least two agents")
    if games_per_pair % 2:
        raise ValueError("games_per_pair must be even for color balance")
    records = []
    match_seed = seed
    for i in range(len(agents)):
        for j in range(i + 1, len(agents)):
            a, b = agents[i], agents[j]
            for g in range(games_per_pair):
                a_first = g % 2 == 0
                first, second = (a, b) if a_first else (b, a)
                outcome, plies = play_match(env, first, second, match_seed)
                records.append(MatchRecord(a.name, b.name, a_first, outcome,
                                           plies, match_seed))
                match_seed += 1
    return records


def score_table(records: list[MatchRecord]) -> dict[str, float]:
    """Total points at 2 per win, 1 per draw, 0 per loss."""
    points: dict[str, float] = {}
    for r in records:
        first, second = (r.agent_a, r.agent_b) if r.a_first else (r.agent_b, r.agent_a)
        for name in (first, second):
            points.setdefault(name, 0.0)
        if r.outcome == "draw":
            points[first] += 1
            points[second] += 1
        elif r.outcome == "p1":
            points[first] += 2
        else:
            points[second] += 2
    return points


def write_match_csv(path, records: list[MatchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["agent_a", "agent_b", "a_first", "outcome", "plies", "seed"])
        for r in records:
            writer.writerow([r.agent_a, r.agent_b, int(r.a_first), r.outcome, r.plies, r.seed])


def read_match_csv(path) -> list[MatchRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(MatchRecord(row["agent_a"], row["agent_b"], bool(int(row["a_first"])),
                                   row["outcome"], int(row["plies"]), int(row["seed"])))
    return out


# -- Elo fitting -----------------------------------------------------------------------


class DisconnectedTournamentError(ValueError):
    def __init__(self, components):
        super().__init__(f"comparison graph is disconnected: {components}")
        self.components = components


@dataclass
class EloTable:
    ratings: dict[str, float]
    stderr: dict[str, float]
    draw_parameter: float
    anchor: str
    gradient_norm: float
    log_likelihood: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["agent", "rating", "stderr"])
            for name in sorted(self.ratings):
                writer.writerow([name, f"{self.ratings[name]:.3f}", f"{self.stderr[name]:.3f}"])


def _pair_counts(records: list[MatchRecord]):
    counts: dict[tuple[str, str], list[float]] = {}
    for r in records:
        first, second = (r.agent_a, r.agent_b) if r.a_first else (r.agent_b, r.agent_a)
        key = (first, second) if first <= second else (second, first)
        wins_first, wins_second, draws = counts.setdefault(key, [0.0, 0.0, 0.0])
        if r.outcome == "draw":
            counts[key][2] += 1
        elif (r.outcome == "p1") == (key[0] == first):
            counts[key][0] += 1
        else:
            counts[key][1] += 1
    return counts


def _check_connected(names, counts):
    parent = {n: n for n in names}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for (a, b) in counts:
        parent[find(a)] = find(b)
    components: dict[str, list[str]] = {}
    for n in names:
        components.setdefault(find(n), []).append(n)
    if len(components) > 1:
        raise DisconnectedTournamentError(sorted(sorted(v) for v in components.values()))


def fit_elo(records: list[MatchRecord], anchor: str = "uniform",
            nu_bounds: tuple[float, float] = (-16.0, 16.0)) -> EloTable:
    """Maximum-likelihood ratings under the Davidson paired-comparison model:
    with strengths p = 10**(rating/400) and draw parameter nu,
    P(i beats j) = p_i / D and P(draw) = nu sqrt(p_i p_j) / D where
    D = p_i + p_j + nu sqrt(p_i p_j). The anchor agent is pinned at 0."""
    names = sorted({r.agent_a for r in records} | {r.agent_b for r in records})
    if anchor not in names:
        raise ValueError(f"anchor agent {anchor!r} played no games")
    counts = _pair_counts(records)
    _check_connected(names, counts)
    free = [n for n in names if n != anchor]
    index = {n: i for i, n in enumerate(free)}
    c = 1.0 / ELO_SCALE  # rating -> natural-log strength

    def unpack(x):
        u = {anchor: 0.0}
        for n, i in index.items():
            u[n] = x[i] * c
        return u, x[-1]  # natural-log draw parameter

    def nll_grad(x):
        u, w = unpack(x)
        nu = math.exp(w)
        nll = 0.0
        grad = np.zeros_like(x)

        def add_grad(name, val):
            if name != anchor:
                grad[index[name]] += val * c

        for (a, b), (wa, wb, dr) in counts.items():
            pa, pb = math.exp(u[a]), math.exp(u[b])
            g = math.sqrt(pa * pb)
            denom = pa + pb + nu * g
            ldenom = math.log(denom)
            da = (pa + nu * g / 2) / denom
            db = (pb + nu * g / 2) / denom
            dnu = nu * g / denom
            if wa:
                nll -= wa * (u[a] - ldenom)
                add_grad(a, -wa * (1 - da))
                add_grad(b, wa * db)
                grad[-1] += wa * dnu
            if wb:
                nll -= wb * (u[b] - ldenom)
                add_grad(b, -wb * (1 - db))
                add_grad(a, wb * da)
                grad[-1] += wb * dnu
            if dr:
                nll -= dr * (w + (u[a] + u[b]) / 2 - ldenom)
                add_grad(a, -dr * (0.5 - da))
                add_grad(b, -dr * (0.5 - db))
                grad[-1] -= dr * (1 - dnu)
        return nll, grad

    x0 = np.zeros(len(free) + 1)
    bounds = [(None, None)] * len(free) + [nu_bounds]
    res = minimize(nll_grad, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": 20000, "ftol": 1e-15, "gtol": 1e-12})
    x = res.x
    _, grad = nll_grad(x)
    # projected gradient: the draw parameter may legitimately sit at a bound
    proj = grad.copy()
    if (x[-1] <= nu_bounds[0] + 1e-12 and proj[-1] > 0) or (
            x[-1] >= nu_bounds[1] - 1e-12 and proj[-1] < 0):
        proj[-1] = 0.0
    gnorm = float(np.linalg.norm(proj))

    ratings = {anchor: 0.0}
    for n, i in index.items():
        ratings[n] = float(x[i])
    stderr = {n: 0.0 for n in names}
    if free:
        h = _fd_hessian(lambda y: nll_grad(y)[1], x)
        try:
            cov = np.linalg.inv(h)
            for n, i in index.items():
                v = cov[i, i]
                stderr[n] = float(math.sqrt(v)) if v > 0 else float("nan")
        except np.linalg.LinAlgError:
            for n in free:
                stderr[n] = float("nan")
    return EloTable(ratings, stderr, math.exp(x[-1]), anchor, gnorm,
                    -float(nll_grad(x)[0]))


def _fd_hessian(grad_fn, x, eps: float = 1e-5) -> np.ndarray:
    n = len(x)
    h = np.zeros((n, n))
    for i in range(n):
        up = x.copy()
        up[i] += eps
        down = x.copy()
        down[i] -= eps
        h[:, i] = (grad_fn(up) - grad_fn(down)) / (2 * eps)
    return (h + h.T) / 2


# -- flow error against exact tables -----------------------------------------------------


def flow_mae(env: TreeEnv, model, table, states: list[StateKey], player: int = 1,
             obs_fn=None) -> tuple[float, float]:
    """Mean absolute error of learned node flows and edge flows (not in log
    space) against an exact table, over the given states. Policies at agent
    states come from learned-flow edge ratios; environment states use the
    known transition distribution."""
    from .envs.core import ENVIRONMENT

    node_errors = []
    edge_errors = []
    for state in states:
        key = state.encode()
        if key not in table:
            raise KeyError(f"state {state} missing from the exact table")
        cur = env.cursor_at(state)
        obs = obs_fn(state) if obs_fn is not None else cur.obs_key()
        exact_node = math.exp(table.log_flow(player, key))
        learned_node = math.exp(model.log_flow(player, obs))
        node_errors.append(abs(learned_node - exact_node))
        if cur.is_terminal():
            continue
        owner = cur.owner()
        actions = cur.legal_actions()
        if owner == ENVIRONMENT:
            probs = dict(zip(actions, cur.env_probs()))
            learned = {a: learned_node * probs[a] for a in actions}
            exact = {a: exact_node * probs[a] for a in actions}
        else:
            child_logf = {}
            for a in actions:
                cur.push(a)
                child_logf[a] = (model.log_flow(player, cur.obs_key()),
                                 table.log_flow(player, cur.key_bytes()))
                cur.pop()
            lse_l = _lse([v[0] for v in child_logf.values()])
            learned = {a: learned_node * math.exp(v[0] - lse_l) for a, v in child_logf.items()}
            exact = {a: math.exp(v[1]) for a, v in child_logf.items()}
        for a in actions:
            edge_errors.append(abs(learned[a] - exact[a]))
    node_mae = float(np.mean(node_errors)) if node_errors else 0.0
    edge_mae = float(np.mean(edge_errors)) if edge_errors else 0.0
    return node_mae, edge_mae


def _lse(vals):
    m = max(vals)
    return m + math.log(sum(math.exp(v - m) for v in vals))
