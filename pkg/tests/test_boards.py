import numpy as np
import pytest

from flowgames.envs import BoardGameSpec, Outcome, connect_k, make_board_game, tictactoe
from flowgames.envs.boards import naive_has_line
from flowgames.exact import tree_size


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        make_board_game(BoardGameSpec(9, 9, 3, gravity=False))  # 81 cells
    with pytest.raises(ValueError):
        make_board_game(BoardGameSpec(3, 3, 5, gravity=False))  # k too long
    with pytest.raises(ValueError):
        make_board_game(BoardGameSpec(0, 3, 1, gravity=False))


def test_root_children():
    assert tictactoe().cursor().child_count() == 9
    assert connect_k(6, 7, 4).cursor().child_count() == 7


def test_tictactoe_leaf_count():
    # exhaustive enumeration of complete games
    nodes, leaves = tree_size(tictactoe())
    assert leaves == 255168
    assert nodes == 549946


def test_win_detection_matches_naive_scan():
    rng = np.random.default_rng(42)
    specs = [
        tictactoe(),
        connect_k(4, 4, 3),
        connect_k(6, 7, 4),
        make_board_game(BoardGameSpec(5, 5, 4, gravity=False)),
    ]
    per_spec = 100_000 // len(specs)
    for env in specs:
        cells = env.rows * env.cols
        bit_positions = [env.bit(r, c) for c in range(env.cols) for r in range(env.rows)]
        densities = rng.uniform(0.1, 0.6, size=per_spec)
        draws = rng.random((per_spec, cells))
        for i in range(per_spec):
            bits = 0
            row = draws[i]
            d = densities[i]
            for j, b in enumerate(bit_positions):
                if row[j] < d:
                    bits |= b
            assert env.has_line(bits) == naive_has_line(env, bits)


@pytest.mark.parametrize("env_factory", [tictactoe, lambda: connect_k(4, 4, 3)])
def test_terminal_tags_unique_and_no_early_lines(env_factory):
    """Every terminal has exactly one outcome; no nonterminal already contains
    a winning line."""
    env = env_factory()
    cur = env.cursor()
    seen = set()

    def rec():
        key = (cur.bits[0], cur.bits[1], cur.count % 2)
        if key in seen:
            return
        seen.add(key)
        if cur.is_terminal():
            out = cur.outcome()
            win1 = env.has_line(cur.bits[0])
            win2 = env.has_line(cur.bits[1])
            assert not (win1 and win2)
            if win1:
                assert out is Outcome.WIN_P1
            elif win2:
                assert out is Outcome.WIN_P2
            else:
                assert out is Outcome.DRAW and cur.count == env.full_count
            return
        assert not env.has_line(cur.bits[0]) and not env.has_line(cur.bits[1])
        for a in cur.legal_actions():
            cur.push(a)
            rec()
            cur.pop()

    import sys
    sys.setrecursionlimit(10000)
    rec()


def test_gravity_stacking():
    env = connect_k(6, 7, 4)
    cur = env.cursor()
    for _ in range(6):
        cur.push(3)
    assert 3 not in cur.legal_actions()
    assert cur.child_count() == 6


def test_outcome_only_at_terminal():
    env = tictactoe()
    cur = env.cursor()
    with pytest.raises(Exception):
        cur.outcome()
