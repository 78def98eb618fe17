"""Shared test utilities: rollout-to-record builders and exact-optimum model
loading. Observations in these helpers are history byte keys throughout."""

import math

import numpy as np

from flowgames.envs import ENVIRONMENT
from flowgames.models import TabularModel
from flowgames.objectives import FlowNode, FlowRecord, GameRecord, GameStep


def rollout_flow_record(env, rng, known_env: bool = True) -> FlowRecord:
    """Uniform-random rollout of a single-agent env as a FlowRecord."""
    cur = env.cursor()
    nodes = []
    while not cur.is_terminal():
        obs = cur.key_bytes()
        owner = cur.owner()
        actions = tuple(cur.legal_actions())
        env_probs = tuple(cur.env_probs()) if (owner == ENVIRONMENT and known_env) else None
        child_obs = tuple(obs + bytes([a]) for a in actions)
        idx = int(rng.integers(len(actions)))
        nodes.append(FlowNode(obs, owner, actions, idx, child_obs, env_probs))
        cur.push(actions[idx])
    return FlowRecord(nodes, cur.key_bytes(), cur.terminal_log_rewards()[0])


def all_flow_records(env, known_env: bool = True) -> list[FlowRecord]:
    """One FlowRecord per complete trajectory of a small single-agent env."""
    records = []
    cur = env.cursor()
    nodes = []

    def rec():
        if cur.is_terminal():
            records.append(FlowRecord(list(nodes), cur.key_bytes(),
                                      cur.terminal_log_rewards()[0]))
            return
        obs = cur.key_bytes()
        owner = cur.owner()
        actions = tuple(cur.legal_actions())
        env_probs = tuple(cur.env_probs()) if (owner == ENVIRONMENT and known_env) else None
        child_obs = tuple(obs + bytes([a]) for a in actions)
        for idx, a in enumerate(actions):
            nodes.append(FlowNode(obs, owner, actions, idx, child_obs, env_probs))
            cur.push(a)
            rec()
            cur.pop()
            nodes.pop()

    rec()
    return records


def rollout_game_record(env, rng) -> GameRecord:
    """Uniform-random complete game of a two-player env as a GameRecord."""
    cur = env.cursor()
    steps = []
    while not cur.is_terminal():
        obs = cur.key_bytes()
        owner = cur.owner()
        mask = tuple(cur.mask())
        actions = cur.legal_actions()
        a = int(actions[rng.integers(len(actions))])
        steps.append(GameStep(obs, owner, mask, a))
        cur.push(a)
    outcome = cur.outcome()
    log_reward = None
    if outcome is None:
        log_reward = cur.terminal_log_rewards()
    return GameRecord(steps, outcome=outcome, log_reward=log_reward)


def load_exact_model(env, table) -> TabularModel:
    """Tabular model whose flows, policies, Q and environment tables are set
    to the exact optimum from a solved flow table (history-keyed)."""
    model = TabularModel(env.num_players, env.action_space_size)
    cur = env.cursor()

    def rec():
        key = cur.key_bytes()
        logf = table.log_flows(key)
        for p in range(1, env.num_players + 1):
            model.set_log_flow(p, key, logf[p - 1])
        if cur.is_terminal():
            return
        owner = cur.owner()
        actions = cur.legal_actions()
        child_logf = {}
        for a in actions:
            cur.push(a)
            rec()
            child_logf[a] = table.log_flows(cur.key_bytes())
            cur.pop()
        if owner == ENVIRONMENT:
            probs = cur.env_probs()
            env_row = model.env_logits.row(key)
            q_row = model.q_logits.row(key)
            logf_s = logf[0]
            for a, p in zip(actions, probs):
                env_row[a] = math.log(p)
                q_row[a] = math.log(p) + child_logf[a][0] - logf_s
        else:
            row = model.logits[owner].row(key)
            for a in actions:
                row[a] = child_logf[a][owner - 1]

    rec()
    return model


def finite_difference_check(model, loss_fn, step=1e-5, rtol=1e-4):
    """Compare the analytic gradients of loss_fn() against central finite
    differences, component by component."""
    from flowgames.objectives import apply_param_delta

    base = loss_fn()
    for key, grad in base.grads.items():
        garr = np.atleast_1d(np.asarray(grad, dtype=np.float64))
        for i in range(garr.size):
            delta = np.zeros(garr.size)
            delta[i] = step
            shift = delta if garr.size > 1 else step
            apply_param_delta(model, key, shift)
            up = loss_fn().value
            apply_param_delta(model, key, -2 * shift if garr.size == 1 else -2 * delta)
            down = loss_fn().value
            apply_param_delta(model, key, shift)
            fd = (up - down) / (2 * step)
            denom = max(abs(fd), abs(garr[i]), 1e-6)
            assert abs(fd - garr[i]) / denom <= rtol, (
                f"gradient mismatch at {key}[{i}]: fd={fd}, analytic={garr[i]}"
            )


def randomize_model(model, rng, keys_by_kind) -> None:
    """Fill the rows named in keys_by_kind with random values."""
    for kind, player, obs in keys_by_kind.get("logits", []):
        model.logits[player].row(obs)[:] = rng.normal(0, 1, model.action_space_size)
    for _, player, obs in keys_by_kind.get("flow", []):
        model.flows[player].row(obs)[0] = rng.normal(0, 1)
    for obs in keys_by_kind.get("q", []):
        model.q_logits.row(obs)[:] = rng.normal(0, 1, model.action_space_size)
    for obs in keys_by_kind.get("env", []):
        model.env_logits.row(obs)[:] = rng.normal(0, 1, model.action_space_size)
