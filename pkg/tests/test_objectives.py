import math

import numpy as np
import pytest

from helpers import (
    finite_difference_check,
    load_exact_model,
    randomize_model,
    rollout_flow_record,
    rollout_game_record,
)

from flowgames import exact, objectives
from flowgames.envs import (
    Outcome,
    SequenceEnvSpec,
    StateKey,
    Trajectory,
    TrajectoryStep,
    make_coinflip_tree,
    make_sequence_env,
    random_toy_tree,
    tictactoe,
)
from flowgames.envs.toytrees import ToyTreeEnv, agent, terminal
from flowgames.envs.views import TruncatedGame
from flowgames.models import TabularModel
from flowgames.objectives import (
    FlowNode,
    FlowRecord,
    GameRecord,
    GameStep,
    IncompleteTrajectoryError,
    OutcomeReward,
    edb_loss,
    env_nll_loss,
    log_branch_factor,
    make_rewards,
    naive_db_loss,
    stoch_db_loss,
    tb_loss,
)


def play(env, actions):
    cur = env.cursor()
    rec = GameRecord(steps=[], outcome=None)
    for a in actions:
        rec.steps.append(GameStep(cur.key_bytes(), cur.owner(), tuple(cur.mask()), a))
        cur.push(a)
    if cur.is_terminal():
        rec.outcome = cur.outcome()
    return rec


# -- rewards and branch factors -------------------------------------------------


def test_outcome_reward_zero_sum():
    for lam in (0.0, 1.0, 10.0, 15.0):
        r = OutcomeReward(lam)
        for out in Outcome:
            assert r.log_raw(out, 1) + r.log_raw(out, 2) == 0.0
        assert r.log_raw(Outcome.WIN_P1, 1) == lam
        assert r.log_raw(Outcome.WIN_P2, 1) == -lam
        assert r.log_raw(Outcome.DRAW, 1) == 0.0


def test_branch_factor_five_ply_win():
    env = tictactoe()
    rec = play(env, [0, 3, 1, 4, 2])  # X wins on the top row
    assert rec.outcome is Outcome.WIN_P1
    assert math.exp(log_branch_factor(rec, 1)) == pytest.approx(9 * 7 * 5)
    assert math.exp(log_branch_factor(rec, 2)) == pytest.approx(8 * 6)


def test_branch_factor_full_game():
    env = tictactoe()
    rec = play(env, [0, 1, 2, 4, 3, 5, 7, 6, 8])
    assert len(rec.steps) == 9
    assert math.exp(log_branch_factor(rec, 1)) == pytest.approx(9 * 7 * 5 * 3 * 1)
    assert math.exp(log_branch_factor(rec, 2)) == pytest.approx(8 * 6 * 4 * 2)


def test_branch_factor_single_move_game():
    steps = [GameStep(b"", 1, (1,) * 5, 2)]
    rec = GameRecord(steps, outcome=Outcome.WIN_P1)
    assert log_branch_factor(rec, 1) == pytest.approx(math.log(5))
    assert log_branch_factor(rec, 2) == 0.0


def test_branch_factor_requires_complete_trajectory():
    traj = Trajectory()
    traj.append(TrajectoryStep(StateKey(), (1, 1, 1), 1, 0, False))
    with pytest.raises(IncompleteTrajectoryError):
        log_branch_factor(traj, 1)


def test_make_rewards():
    env = tictactoe()
    rec = play(env, [0, 3, 1, 4, 2])
    r1, r2 = make_rewards(rec.outcome, 2.0, rec)
    assert r1 == pytest.approx(2.0 - math.log(315))
    assert r1 + r2 == pytest.approx(-(math.log(315) + math.log(48)))

    draw = play(env, [0, 1, 2, 4, 3, 5, 7, 6, 8])
    assert draw.outcome is Outcome.DRAW
    d1, d2 = make_rewards(Outcome.DRAW, 5.0, draw)
    assert d1 + d2 == pytest.approx(-(math.log(945) + math.log(384)))

    z1, z2 = make_rewards(rec.outcome, 0.0, rec)
    assert z1 == pytest.approx(-math.log(315))

    with pytest.raises(ValueError):
        make_rewards("not-an-outcome", 1.0, rec)


# -- trajectory balance ------------------------------------------------------------


def single_move_record(action):
    reward = (math.log(math.exp(1.0) / 2), math.log(math.exp(-1.0))) if action == 0 else (
        math.log(math.exp(-1.0) / 2), math.log(math.exp(1.0)))
    return GameRecord([GameStep(b"", 1, (1, 1), action)], log_reward=reward)


def test_tb_loss_at_optimum():
    model = TabularModel(2, 2)
    z = (math.exp(1) + math.exp(-1)) / 2
    model.log_z = math.log(z)
    p_win = math.exp(1) / (math.exp(1) + math.exp(-1))
    model.logits[1].row(b"")[:] = [math.log(p_win), math.log(1 - p_win)]
    for action in (0, 1):
        assert tb_loss(model, single_move_record(action), 1.0).value <= 1e-12


def test_tb_loss_uniform_example():
    model = TabularModel(2, 2)  # fresh: uniform policy, log Z = 0
    lv = tb_loss(model, single_move_record(0), 1.0)
    assert lv.value == pytest.approx(1.0, abs=1e-12)


def test_tb_loss_all_draws_uniform_optimum():
    env = TruncatedGame(tictactoe(), 2)  # every game ends after 2 plies as a draw
    model = TabularModel(2, 9)  # uniform logits, log Z = 0
    rng = np.random.default_rng(0)
    for _ in range(20):
        rec = rollout_game_record(env, rng)
        assert tb_loss(model, rec, 0.0).value <= 1e-18


def test_tb_loss_incomplete_error():
    model = TabularModel(2, 2)
    with pytest.raises(IncompleteTrajectoryError):
        tb_loss(model, GameRecord([GameStep(b"", 1, (1, 1), 0)]), 1.0)


def test_tb_loss_zero_at_exact_policies_small_game():
    from flowgames.envs import connect_k

    env = connect_k(2, 2, 2)
    lam = 1.5
    table = exact.solve_afn(env, lam=lam)
    model = load_exact_model(env, table)
    model.log_z = table.log_flow(1, StateKey())
    rng = np.random.default_rng(1)
    for _ in range(30):
        rec = rollout_game_record(env, rng)
        rec = GameRecord(rec.steps, outcome=rec.outcome)
        assert tb_loss(model, rec, lam).value <= 1e-18


# -- expected detailed balance -------------------------------------------------------


def test_edb_zero_at_optimum():
    env = make_coinflip_tree()
    table = exact.solve_eflow(env)
    model = load_exact_model(env, table)
    rng = np.random.default_rng(2)
    for _ in range(20):
        rec = rollout_flow_record(env, rng)
        assert edb_loss(model, rec).value <= 1e-18
        assert edb_loss(model, rec, force_q=True).value <= 1e-18


def test_edb_zero_at_optimum_random_trees():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        env = random_toy_tree(rng)
        table = exact.solve_eflow(env)
        model = load_exact_model(env, table)
        for _ in range(5):
            rec = rollout_flow_record(env, rng)
            assert edb_loss(model, rec).value <= 1e-16


def test_edb_agent_edge_arithmetic():
    model = TabularModel(1, 2)
    model.set_log_flow(1, b"s", math.log(2.0))
    model.set_log_flow(1, b"c", 0.0)  # F = 1
    # uniform logits -> P = 0.5 on both actions
    node = FlowNode(b"s", 1, (0, 1), 0, (b"c", b"other"), None)
    model.set_log_flow(1, b"t", 0.0)
    rec = FlowRecord([node], b"t", 0.0)
    lv = edb_loss(model, rec)
    assert lv.terms["agent"] == pytest.approx(0.0, abs=1e-18)

    model.set_log_flow(1, b"c", math.log(2.0))
    lv2 = edb_loss(model, rec)
    assert lv2.terms["agent"] == pytest.approx(math.log(2.0) ** 2, abs=1e-12)


def test_edb_q_form_optimum():
    model = TabularModel(1, 2)
    model.set_log_flow(1, b"s", math.log(3.5))
    model.set_log_flow(1, b"a", math.log(2.0))
    model.set_log_flow(1, b"b", math.log(4.0))
    q = np.array([2.0 * 0.25 / 3.5, 4.0 * 0.75 / 3.5])
    assert q.sum() == pytest.approx(1.0)
    assert q == pytest.approx(np.array([1 / 7, 6 / 7]))
    model.q_logits.row(b"s")[:] = np.log(q)
    model.set_log_flow(1, b"t", 0.0)
    for idx in (0, 1):
        node = FlowNode(b"s", 0, (0, 1), idx, (b"a", b"b"), (0.25, 0.75))
        rec = FlowRecord([node], b"t", 0.0)
        lv = edb_loss(model, rec, force_q=True)
        assert lv.terms["env"] <= 1e-18
        lv_exp = edb_loss(model, rec, force_q=False)
        assert lv_exp.terms["env"] <= 1e-18


# -- stochastic-baseline detailed balance ----------------------------------------------


def test_stoch_db_reduces_to_db_on_deterministic_env():
    env = make_coinflip_tree(deterministic=True)
    table = exact.solve_eflow(env)
    model = load_exact_model(env, table)
    rng = np.random.default_rng(3)
    for _ in range(10):
        rec = rollout_flow_record(env, rng)
        assert stoch_db_loss(model, rec).value <= 1e-18


def coinflip_inner_least_squares(p):
    """Exact inner optimisation of the augmented-graph DB loss over the three
    free log flows, for a fixed root action probability p."""
    log2 = math.log(2.0)
    # unknowns: logF0, logFL, logFR
    a = np.array([
        [1.0, -1.0, 0.0],
        [1.0, 0.0, -1.0],
        [0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, 1.0],
    ])
    b = np.array([
        -math.log(p),
        -math.log(1.0 - p),
        log2 + 0.0,          # logFL - log 2 = log 1
        log2 + math.log(2.0),
        log2 + math.log(4.0),
        log2 + math.log(8.0),
    ])
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    r = a @ x - b
    return float(r @ r)


def test_stoch_db_unsatisfiable_on_coinflip():
    analytic_min = math.log(2.0) ** 2
    grid = np.linspace(5e-4, 1 - 5e-4, 1001)
    grid_min = min(coinflip_inner_least_squares(p) for p in grid)
    assert grid_min >= analytic_min - 1e-9
    assert grid_min <= analytic_min + 1e-4

    # the same instance admits an exact expected-balance optimum
    env = make_coinflip_tree()
    model = load_exact_model(env, exact.solve_eflow(env))
    rng = np.random.default_rng(4)
    for _ in range(10):
        assert edb_loss(model, rollout_flow_record(env, rng)).value <= 1e-18


def test_stoch_db_zero_loss_exists_when_alpha_zero():
    env = make_sequence_env(SequenceEnvSpec(length=2, alphabet=3, alpha=0.0, beta=2.0))
    model = load_exact_model(env, exact.solve_eflow(env))
    rng = np.random.default_rng(5)
    for _ in range(10):
        rec = rollout_flow_record(env, rng)
        assert stoch_db_loss(model, rec).value <= 1e-18


# -- gradient checks ----------------------------------------------------------------


def touched_keys(grads):
    by_kind = {"logits": [], "flow": [], "q": [], "env": []}
    for key in grads:
        if key[0] == "logits":
            by_kind["logits"].append(key)
        elif key[0] == "flow":
            by_kind["flow"].append(key)
        elif key[0] == "q":
            by_kind["q"].append(key[1])
        elif key[0] == "env":
            by_kind["env"].append(key[1])
    return by_kind


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    env = random_toy_tree(rng, depth=3, max_children=3)
    flow_rec = rollout_flow_record(env, rng)
    game_env = TruncatedGame(tictactoe(), 4)
    game_rec = rollout_game_record(game_env, rng)

    losses = []

    model = TabularModel(1, env.action_space_size)
    base = edb_loss(model, flow_rec)
    randomize_model(model, rng, touched_keys(base.grads))
    losses.append((model, lambda m=model: edb_loss(m, flow_rec)))

    model_q = TabularModel(1, env.action_space_size)
    base_q = edb_loss(model_q, flow_rec, force_q=True)
    randomize_model(model_q, rng, touched_keys(base_q.grads))
    losses.append((model_q, lambda m=model_q: edb_loss(m, flow_rec, force_q=True)))

    model_s = TabularModel(1, env.action_space_size)
    base_s = stoch_db_loss(model_s, flow_rec)
    randomize_model(model_s, rng, touched_keys(base_s.grads))
    losses.append((model_s, lambda m=model_s: stoch_db_loss(m, flow_rec)))

    model_n = TabularModel(1, env.action_space_size)
    base_n = naive_db_loss(model_n, flow_rec)
    randomize_model(model_n, rng, touched_keys(base_n.grads))
    losses.append((model_n, lambda m=model_n: naive_db_loss(m, flow_rec)))

    model_t = TabularModel(2, 9)
    model_t.log_z = rng.normal()
    base_t = tb_loss(model_t, game_rec, 2.0)
    randomize_model(model_t, rng, touched_keys(base_t.grads))
    losses.append((model_t, lambda m=model_t: tb_loss(m, game_rec, 2.0)))

    # learned environment model: rollout with unknown transitions
    unknown = rollout_flow_record(env, rng, known_env=False)
    if any(n.owner == 0 for n in unknown.nodes):
        model_e = TabularModel(1, env.action_space_size)
        base_e = env_nll_loss(model_e, unknown)
        randomize_model(model_e, rng, touched_keys(base_e.grads))
        losses.append((model_e, lambda m=model_e: env_nll_loss(m, unknown)))
        model_eu = TabularModel(1, env.action_space_size)
        base_eu = edb_loss(model_eu, unknown)
        randomize_model(model_eu, rng, touched_keys(base_eu.grads))
        losses.append((model_eu, lambda m=model_eu: edb_loss(m, unknown)))

    for model, fn in losses:
        finite_difference_check(model, fn)


# -- perturbation sensitivity ---------------------------------------------------------


def test_single_parameter_perturbation_raises_a_term():
    from helpers import all_flow_records

    env = make_coinflip_tree()
    table = exact.solve_eflow(env)
    records = all_flow_records(env)  # every constraint is exercised

    def total_terms(model):
        worst = 0.0
        for rec in records:
            lv = edb_loss(model, rec)
            worst = max(worst, max(lv.terms.values()))
        return worst

    model = load_exact_model(env, table)
    assert total_terms(model) <= 1e-18
    for key in list(table.keys()):
        model = load_exact_model(env, table)
        model.flows[1].row(key)[0] += 0.1
        assert total_terms(model) >= 0.009


def test_tb_logz_perturbation():
    from flowgames.envs import connect_k

    env = connect_k(2, 2, 2)
    lam = 1.0
    table = exact.solve_afn(env, lam=lam)
    model = load_exact_model(env, table)
    model.log_z = table.log_flow(1, StateKey()) + 0.1
    rng = np.random.default_rng(7)
    rec = rollout_game_record(env, rng)
    rec = GameRecord(rec.steps, outcome=rec.outcome)
    assert tb_loss(model, rec, lam).value >= 0.009
