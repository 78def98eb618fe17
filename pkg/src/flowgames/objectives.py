"""Training losses: expected-detailed-balance constraints, the augmented-graph
detailed-balance baseline, the two-player trajectory-balance objective, and
reward construction (raw outcome rewards and their branch adjustment).

Every loss is a squared log-ratio evaluated in log space end to end, and every
loss returns analytic gradients with respect to the tabular parameters it
touched; finite differences pin these down in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envs.boards import Outcome, log_outcome_reward
from .envs.core import ENVIRONMENT, Trajectory, TreeEnvError
from .models.tabular import TabularModel

Q_FORM_CHILD_THRESHOLD = 32


class IncompleteTrajectoryError(TreeEnvError):
    pass


@dataclass(frozen=True)
class OutcomeReward:
    """Zero-sum outcome rewards: e**lam for a win, 1 for a draw, e**-lam for a
    loss; log R1 + log R2 = 0 at every terminal."""

    lam: float

    def log_raw(self, outcome: Outcome, player: int) -> float:
        return log_outcome_reward(outcome, player, self.lam)


@dataclass
class GameStep:
    obs: object
    curr_player: int
    mask: tuple[int, ...]
    action: int


@dataclass
class GameRecord:
    """A complete game prepared for trajectory-level losses.

    ``log_reward`` (per player, branch-adjusted) takes precedence when
    present; otherwise rewards are rebuilt from the outcome tag.
    """

    steps: list[GameStep]
    outcome: Outcome | None = None
    log_reward: tuple[float, float] | None = None


@dataclass
class FlowNode:
    """A visited state prepared for state/edge-level flow losses.

    ``child_obs`` holds the observation of every legal child, aligned with
    ``actions``; ``action_index`` indexes into ``actions``. ``env_probs`` is
    the known transition distribution at environment states (None means the
    learned environment model should be used).
    """

    obs: object
    owner: int
    actions: tuple[int, ...]
    action_index: int
    child_obs: tuple
    env_probs: tuple | None = None


@dataclass
class FlowRecord:
    nodes: list[FlowNode]
    terminal_obs: object
    log_reward: float


@dataclass
class LossValue:
    value: float = 0.0
    terms: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)

    def add_grad(self, key, grad) -> None:
        if key in self.grads:
            self.grads[key] = self.grads[key] + grad
        else:
            self.grads[key] = grad


# -- branch factors and rewards ----------------------------------------------


def _steps_of(traj) -> list:
    if isinstance(traj, Trajectory):
        if not traj.complete:
            raise IncompleteTrajectoryError("branch factors need a complete trajectory")
        return traj.steps
    if isinstance(traj, GameRecord):
        return traj.steps
    raise TypeError(f"unsupported trajectory type {type(traj)}")


def log_branch_factor(traj, player: int) -> float:
    """log of the product of the player's branching factors (child counts at
    the trajectory states where the player moves; empty product is 0)."""
    total = 0.0
    for step in _steps_of(traj):
        if step.curr_player == player:
            total += math.log(sum(step.mask))
    return total


def make_rewards(outcome: Outcome, lam: float, traj) -> tuple[float, float]:
    """Branch-adjusted per-player log rewards: log R_i = log raw_i - log B_i.

    The raw rewards multiply to one, so log R1 + log R2 = -(log B1 + log B2)
    exactly.
    """
    if not isinstance(outcome, Outcome):
        raise ValueError(f"unknown outcome {outcome!r}")
    reward = OutcomeReward(lam)
    return tuple(
        reward.log_raw(outcome, p) - log_branch_factor(traj, p) for p in (1, 2)
    )


# -- trajectory balance --------------------------------------------------------


def tb_loss(model: TabularModel, record: GameRecord, lam: float) -> LossValue:
    """Squared residual of the per-trajectory balance constraint
    Z * prod P1 = R1(x) * B2(x) * prod P2 for one complete game."""
    log_b2 = log_branch_factor(record, 2)
    if record.log_reward is not None:
        log_r1 = record.log_reward[0]
    elif isinstance(record.outcome, Outcome):
        log_r1 = log_outcome_reward(record.outcome, 1, lam) - log_branch_factor(record, 1)
    else:
        raise IncompleteTrajectoryError("trajectory balance needs a complete game")

    residual = model.log_z - log_r1 - log_b2
    step_info = []
    for step in record.steps:
        mask = np.asarray(step.mask)
        lp = model.log_probs(step.curr_player, step.obs, mask)
        sign = 1.0 if step.curr_player == 1 else -1.0
        residual += sign * lp[step.action]
        step_info.append((step, mask, np.exp(lp), sign))

    out = LossValue(value=residual * residual, terms={"tb": residual * residual})
    coef = 2.0 * residual
    out.add_grad(("log_z",), coef)
    for step, mask, probs, sign in step_info:
        g = -coef * sign * probs
        g[step.action] += coef * sign
        g[mask == 0] = 0.0
        out.add_grad(("logits", step.curr_player, step.obs), g)
    return out


# -- expected detailed balance ---------------------------------------------------


def edb_loss(
    model: TabularModel,
    record: FlowRecord,
    player: int = 1,
    q_threshold: int = Q_FORM_CHILD_THRESHOLD,
    force_q: bool | None = None,
) -> LossValue:
    """Expected-detailed-balance loss of one rollout for a single agent.

    Agent edges contribute (log F(s) + log P(a|s) - log F(s'))^2; environment
    states contribute the expectation constraint, or its sampled form with the
    auxiliary distribution Q when the state has more than ``q_threshold``
    children (``force_q`` overrides); the terminal state contributes
    (log F(x) - log R(x))^2.
    """
    out = LossValue()
    agent_term = env_term = 0.0
    for node in record.nodes:
        logf_s = model.log_flow(player, node.obs)
        if node.owner == player:
            child = node.child_obs[node.action_index]
            mask = _mask_of(node, model.action_space_size)
            lp = model.log_probs(player, node.obs, mask)
            action = node.actions[node.action_index]
            r = logf_s + lp[action] - model.log_flow(player, child)
            agent_term += r * r
            coef = 2.0 * r
            out.add_grad(("flow", player, node.obs), coef)
            out.add_grad(("flow", player, child), -coef)
            probs = np.exp(lp)
            g = -coef * probs
            g[action] += coef
            g[mask == 0] = 0.0
            out.add_grad(("logits", player, node.obs), g)
        else:
            env_logp = _env_log_probs(model, node)
            use_q = force_q if force_q is not None else len(node.actions) > q_threshold
            if use_q:
                child = node.child_obs[node.action_index]
                mask = _mask_of(node, model.action_space_size)
                lq = model.q_log_probs(node.obs, mask)
                action = node.actions[node.action_index]
                r = logf_s + lq[action] - model.log_flow(player, child) - env_logp[node.action_index]
                env_term += r * r
                coef = 2.0 * r
                out.add_grad(("flow", player, node.obs), coef)
                out.add_grad(("flow", player, child), -coef)
                q = np.exp(lq)
                g = -coef * q
                g[action] += coef
                g[mask == 0] = 0.0
                out.add_grad(("q", node.obs), g)
            else:
                child_logf = np.array(
                    [model.log_flow(player, c) for c in node.child_obs]
                )
                vals = env_logp + child_logf
                m = vals.max()
                lse = m + math.log(np.exp(vals - m).sum())
                r = logf_s - lse
                env_term += r * r
                coef = 2.0 * r
                out.add_grad(("flow", player, node.obs), coef)
                w = np.exp(vals - lse)
                for c, child in enumerate(node.child_obs):
                    out.add_grad(("flow", player, child), -coef * w[c])

    r = model.log_flow(player, record.terminal_obs) - record.log_reward
    terminal_term = r * r
    out.add_grad(("flow", player, record.terminal_obs), 2.0 * r)

    out.terms = {"agent": agent_term, "env": env_term, "terminal": terminal_term}
    out.value = agent_term + env_term + terminal_term
    return out


def _mask_of(node: FlowNode, width: int) -> np.ndarray:
    mask = np.zeros(width, dtype=np.int64)
    for a in node.actions:
        mask[a] = 1
    return mask


def _env_log_probs(model: TabularModel, node: FlowNode) -> np.ndarray:
    """Known transition log probabilities, or the learned environment model's
    (treated as constants: the environment model trains only on its own
    likelihood, not through the agent's loss)."""
    if node.env_probs is not None:
        return np.log(np.asarray(node.env_probs))
    mask = _mask_of(node, model.action_space_size)
    lp = model.env_log_probs(node.obs, mask)
    return np.array([lp[a] for a in node.actions])


# -- detailed balance on the action-augmented graph ------------------------------


def stoch_db_loss(model: TabularModel, record: FlowRecord) -> LossValue:
    """Plain detailed balance along the rollout, with the policy learnable on
    agent edges and pinned to the transition distribution on environment
    edges. On stochastic instances these constraints may admit no zero-loss
    solution; that unsatisfiability is the point of the baseline."""
    out = LossValue()
    edge_term = 0.0
    player = 1
    for node in record.nodes:
        logf_s = model.log_flow(player, node.obs)
        child = node.child_obs[node.action_index]
        logf_c = model.log_flow(player, child)
        if node.owner == ENVIRONMENT:
            env_logp = _env_log_probs(model, node)
            r = logf_s + env_logp[node.action_index] - logf_c
            edge_term += r * r
            coef = 2.0 * r
            out.add_grad(("flow", player, node.obs), coef)
            out.add_grad(("flow", player, child), -coef)
        else:
            mask = _mask_of(node, model.action_space_size)
            lp = model.log_probs(player, node.obs, mask)
            action = node.actions[node.action_index]
            r = logf_s + lp[action] - logf_c
            edge_term += r * r
            coef = 2.0 * r
            out.add_grad(("flow", player, node.obs), coef)
            out.add_grad(("flow", player, child), -coef)
            probs = np.exp(lp)
            g = -coef * probs
            g[action] += coef
            g[mask == 0] = 0.0
            out.add_grad(("logits", player, node.obs), g)

    r = model.log_flow(player, record.terminal_obs) - record.log_reward
    terminal_term = r * r
    out.add_grad(("flow", player, record.terminal_obs), 2.0 * r)

    out.terms = {"edge": edge_term, "terminal": terminal_term}
    out.value = edge_term + terminal_term
    return out


def naive_db_loss(model: TabularModel, record: FlowRecord) -> LossValue:
    """Detailed balance that ignores the environment entirely: each agent
    decision is balanced directly against the next agent state it happened to
    reach (the environment-blind baseline)."""
    out = LossValue()
    player = 1
    edge_term = 0.0
    agent_nodes = [n for n in record.nodes if n.owner == player]
    hops = [n.obs for n in agent_nodes] + [record.terminal_obs]
    for i, node in enumerate(agent_nodes):
        logf_s = model.log_flow(player, node.obs)
        nxt = hops[i + 1]
        mask = _mask_of(node, model.action_space_size)
        lp = model.log_probs(player, node.obs, mask)
        action = node.actions[node.action_index]
        r = logf_s + lp[action] - model.log_flow(player, nxt)
        edge_term += r * r
        coef = 2.0 * r
        out.add_grad(("flow", player, node.obs), coef)
        out.add_grad(("flow", player, nxt), -coef)
        probs = np.exp(lp)
        g = -coef * probs
        g[action] += coef
        g[mask == 0] = 0.0
        out.add_grad(("logits", player, node.obs), g)

    r = model.log_flow(player, record.terminal_obs) - record.log_reward
    out.add_grad(("flow", player, record.terminal_obs), 2.0 * r)
    out.terms = {"edge": edge_term, "terminal": r * r}
    out.value = edge_term + r * r
    return out


def env_nll_loss(model: TabularModel, record: FlowRecord) -> LossValue:
    """Negative log likelihood of the observed environment transitions under
    the learned environment model (its maximum-likelihood training signal)."""
    out = LossValue()
    total = 0.0
    for node in record.nodes:
        if node.owner != ENVIRONMENT or node.env_probs is not None:
            continue
        mask = _mask_of(node, model.action_space_size)
        lp = model.env_log_probs(node.obs, mask)
        action = node.actions[node.action_index]
        total += -lp[action]
        g = np.exp(lp)
        g[action] -= 1.0
        g[mask == 0] = 0.0
        out.add_grad(("env", node.obs), g)
    out.terms = {"nll": total}
    out.value = total
    return out


def apply_param_delta(model: TabularModel, key, delta) -> None:
    """Shift one parameter group by delta (used by finite-difference checks)."""
    kind = key[0]
    if kind == "log_z":
        model.log_z += delta
    elif kind == "logits":
        model.logits[key[1]].row(key[2])[:] += delta
    elif kind == "flow":
        model.flows[key[1]].row(key[2])[0] += delta
    elif kind == "q":
        model.q_logits.row(key[1])[:] += delta
    elif kind == "env":
        model.env_logits.row(key[1])[:] += delta
    else:
        raise KeyError(f"unknown parameter key {key}")
