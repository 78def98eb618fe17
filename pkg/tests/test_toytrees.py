import math

import numpy as np
import pytest

from flowgames.envs import StateKey, make_coinflip_tree, random_toy_tree
from flowgames.envs.toytrees import ToyTreeEnv, agent, chance, terminal
from flowgames.exact import solve_eflow, solve_gfn


def test_coinflip_flows():
    env = make_coinflip_tree()
    table = solve_eflow(env)
    assert table.flow(1, StateKey([0])) == pytest.approx(1.5, abs=1e-12)
    assert table.flow(1, StateKey([1])) == pytest.approx(6.0, abs=1e-12)
    assert table.flow(1, StateKey()) == pytest.approx(7.5, abs=1e-12)
    p_left = math.exp(table.log_flow(1, StateKey([0])) - table.log_flow(1, StateKey()))
    assert p_left == pytest.approx(0.2, abs=1e-12)


def test_coinflip_unsatisfiable_targets():
    """The augmented-graph constraints would force both left-branch leaves to
    the same probability p/2 while their rewards differ, for every p."""
    rewards = [1.0, 2.0, 4.0, 8.0]
    z = sum(rewards)
    targets = [r / z for r in rewards]
    for p in np.linspace(1e-6, 1 - 1e-6, 101):
        # under the augmented graph: P(x1) = p/2 and P(x2) = p/2
        assert not (
            math.isclose(targets[0], p / 2, rel_tol=1e-9)
            and math.isclose(targets[1], p / 2, rel_tol=1e-9)
        )


def test_deterministic_variant_reduces_to_gfn():
    env = make_coinflip_tree(deterministic=True)
    table = solve_eflow(env)
    # collapses to a two-leaf sampler over rewards 1 and 4
    assert table.flow(1, StateKey()) == pytest.approx(5.0, abs=1e-12)


def test_random_toy_trees_wellformed():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        env = random_toy_tree(rng)
        cur = env.cursor()

        def rec():
            if cur.is_terminal():
                assert all(math.isfinite(r) for r in cur.terminal_log_rewards())
                return
            if cur.owner() == 0:
                probs = cur.env_probs()
                assert all(p > 0 for p in probs)
                assert sum(probs) == pytest.approx(1.0, abs=1e-12)
            for a in cur.legal_actions():
                cur.push(a)
                rec()
                cur.pop()

        rec()


def test_single_terminal_tree():
    env = ToyTreeEnv(agent([terminal(3.0)]))
    table = solve_gfn(env)
    assert table.flow(1, StateKey()) == pytest.approx(3.0)


def test_nonpositive_reward_rejected():
    with pytest.raises(Exception):
        terminal(0.0)
    with pytest.raises(Exception):
        terminal(-1.0)


def test_chance_drops_zero_probability_children():
    node = chance([terminal(1.0), terminal(2.0)], [1.0, 0.0])
    assert len(node.children) == 1
