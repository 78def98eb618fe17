import math

import numpy as np
import pytest

from flowgames.envs import SequenceEnvSpec, StateKey, make_sequence_env
from flowgames.exact import solve_eflow, tree_size


def test_alpha_zero_is_deterministic():
    env = make_sequence_env(SequenceEnvSpec(length=3, alphabet=4, alpha=0.0, beta=1.0))
    cur = env.cursor()
    cur.push(2)
    assert cur.legal_actions() == [2]
    assert cur.env_probs() == [1.0]


def test_alpha_one_is_uniform():
    env = make_sequence_env(SequenceEnvSpec(length=2, alphabet=4, alpha=1.0, beta=1.0))
    cur = env.cursor()
    cur.push(3)
    assert cur.env_probs() == pytest.approx([0.25, 0.25, 0.25, 0.25])


def test_transition_sums_to_one_exactly():
    for alpha in (0.0, 0.25, 0.5, 1.0):
        env = make_sequence_env(SequenceEnvSpec(length=2, alphabet=5, alpha=alpha, beta=1.0))
        cur = env.cursor()
        cur.push(1)
        assert sum(cur.env_probs()) == pytest.approx(1.0, abs=1e-15)


def test_reward_positive_and_normalized():
    env = make_sequence_env(SequenceEnvSpec(length=4, alphabet=4, alpha=0.5, beta=4.0, weight_seed=3))
    rng = np.random.default_rng(0)
    best = tuple(int(np.argmax(env.weights[i])) for i in range(4))
    assert env.score(best) == pytest.approx(1.0)
    for _ in range(50):
        seq = tuple(rng.integers(0, 4, size=4))
        s = env.score(seq)
        assert 0.0 < s <= 1.0
        assert env.log_reward_of(seq) == pytest.approx(4.0 * math.log(s))


def test_two_round_flow_by_hand():
    # one round, two symbols, alpha=0.5: choosing symbol 1 keeps it with
    # probability 0.75, so the flow behind that action is 0.75*f1 + 0.25*f0
    weights = np.array([[0.5, 1.0]])
    env = make_sequence_env(
        SequenceEnvSpec(length=1, alphabet=2, alpha=0.5, beta=1.0), weights
    )
    table = solve_eflow(env)
    assert table.flow(1, StateKey([1])) == pytest.approx(0.75 * 1.0 + 0.25 * 0.5, abs=1e-12)
    assert table.flow(1, StateKey([0])) == pytest.approx(0.75 * 0.5 + 0.25 * 1.0, abs=1e-12)
    # enumeration oracle: root flow is the sum over the agent's two actions
    assert table.flow(1, StateKey()) == pytest.approx(0.875 + 0.625, abs=1e-12)


def test_tree_size_formula():
    env = make_sequence_env(SequenceEnvSpec(length=2, alphabet=3, alpha=0.3, beta=1.0))
    nodes, leaves = tree_size(env)
    # levels: 1 + 3 + 9 + 27 + 81
    assert leaves == 81
    assert nodes == 1 + 3 + 9 + 27 + 81


def test_obs_key_merges_histories():
    env = make_sequence_env(SequenceEnvSpec(length=2, alphabet=3, alpha=0.5, beta=1.0))
    c1 = env.cursor()
    c1.push(0); c1.push(2)   # chose 0, corrupted to 2
    c2 = env.cursor()
    c2.push(1); c2.push(2)   # chose 1, corrupted to 2
    assert c1.obs_key() == c2.obs_key()
    assert c1.key() != c2.key()
