import math

import numpy as np
import pytest

from flowgames.models import DenseAdam, NonFiniteGradientError, TabularAdam, TabularModel
from flowgames.models import autodiff as ad
from flowgames.models.checkpoint import load_checkpoint, save_checkpoint
from flowgames.models.neural import NeuralModel


# -- tabular behaviour -----------------------------------------------------------


def test_fresh_tabular_is_uniform():
    model = TabularModel(2, 9)
    mask = np.ones(9, dtype=int)
    p = model.probs(1, b"anything", mask)
    assert p == pytest.approx(np.full(9, 1 / 9))


def test_single_legal_action_has_probability_one():
    model = TabularModel(1, 5)
    mask = np.array([0, 0, 1, 0, 0])
    model.logits[1].row(b"s")[:] = np.random.default_rng(0).normal(0, 3, 5)
    p = model.probs(1, b"s", mask)
    assert p[2] == pytest.approx(1.0)
    assert p.sum() == pytest.approx(1.0)
    assert all(p[i] == 0.0 for i in (0, 1, 3, 4))


def test_softmax_probabilities_example():
    model = TabularModel(1, 2)
    model.logits[1].row(b"s")[:] = [0.0, math.log(3.0)]
    p = model.probs(1, b"s", np.array([1, 1]))
    assert p == pytest.approx([0.25, 0.75])


def test_temperature_zero_is_argmax_and_deterministic():
    model = TabularModel(1, 4)
    model.logits[1].row(b"s")[:] = [0.1, 2.0, -1.0, 1.9]
    mask = np.ones(4, dtype=int)
    actions = {model.sample_action(None, 1, b"s", mask, 0.0) for _ in range(10)}
    assert actions == {1}


def test_temperature_argmax_invariance():
    rng = np.random.default_rng(1)
    model = TabularModel(1, 6)
    mask = np.array([1, 1, 0, 1, 1, 1])
    for i in range(20):
        key = bytes([i])
        model.logits[1].row(key)[:] = rng.normal(0, 2, 6)
        legal = np.flatnonzero(mask)
        row = model.logits[1].row(key)
        ref = legal[np.argmax(row[legal])]
        for t in (0.25, 1.0, 1.5, 8.0):
            z = row[legal] / t
            assert legal[np.argmax(z)] == ref


def test_uniform_sampling_statistics():
    model = TabularModel(1, 4)
    mask = np.ones(4, dtype=int)
    rng = np.random.default_rng(2)
    n = 100_000
    counts = np.zeros(4)
    for _ in range(n):
        counts[model.sample_action(rng, 1, b"s", mask, 1.5)] += 1
    expected = n / 4
    sigma = math.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - expected) < 3 * sigma)


def test_illegal_actions_never_sampled():
    model = TabularModel(1, 5)
    model.logits[1].row(b"s")[:] = [10.0, -10.0, 10.0, 10.0, 10.0]
    mask = np.array([0, 1, 0, 1, 0])
    rng = np.random.default_rng(3)
    for t in (0.0, 0.7, 1.5):
        for _ in range(200):
            a = model.sample_action(rng, 1, b"s", mask, t)
            assert mask[a] == 1


# -- autodiff gradcheck ------------------------------------------------------------


def numeric_grad(f, x, eps=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
        it.iternext()
    return g


def check_tape_grad(make_loss, params):
    loss = make_loss()
    loss.backward()
    for t in params:
        analytic = t.grad.copy()
        fd = numeric_grad(lambda: make_loss().value.item(), t.value)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-6)
        assert np.max(np.abs(fd - analytic) / denom) < 1e-4
        t.grad = None


def test_tape_dense_ops():
    rng = np.random.default_rng(4)
    w = ad.Tensor(rng.normal(0, 1, (5, 4)))
    b = ad.Tensor(rng.normal(0, 1, 4))
    x = ad.Tensor(rng.normal(0, 1, (3, 5)))
    mask = np.array([[1, 1, 0, 1]] * 3)
    idx = np.array([0, 1, 3])
    seg = np.array([0, 0, 1])

    def make_loss():
        h = ad.leaky_relu(ad.add(ad.matmul(x, w), b))
        h = ad.add(h, ad.scale(h, 0.5))  # residual-style reuse
        lp = ad.log_softmax_masked(h, mask)
        picked = ad.gather(lp, idx)
        s = ad.segment_sum(picked, seg, 2)
        return ad.mean(ad.square(s))

    check_tape_grad(make_loss, [w, b, x])


def test_tape_conv_ops():
    rng = np.random.default_rng(5)
    x = ad.Tensor(rng.normal(0, 1, (2, 3, 4, 5)))
    w = ad.Tensor(rng.normal(0, 0.5, (6, 3, 3, 3)))
    b = ad.Tensor(rng.normal(0, 0.5, 6))

    def make_loss():
        h = ad.leaky_relu(ad.conv2d(x, w, b))
        return ad.mean(ad.square(ad.reshape(h, (2, -1))))

    check_tape_grad(make_loss, [x, w, b])


def test_tape_take_rows():
    rng = np.random.default_rng(6)
    table = ad.Tensor(rng.normal(0, 1, (4, 3)))
    idx = np.array([0, 2, 2, 1])

    def make_loss():
        rows = ad.take_rows(table, idx)
        return ad.mean(ad.square(rows))

    check_tape_grad(make_loss, [table])


@pytest.mark.parametrize("seed", range(10))
def test_two_block_network_gradcheck(seed):
    arch = {"kind": "mlp", "rows": 2, "cols": 2, "action_space": 4, "width": 8, "blocks": 2}
    model = NeuralModel(arch, seed=seed)
    rng = np.random.default_rng(seed)
    planes = rng.normal(0, 1, (3, 3, 2, 2))
    masks = np.ones((3, 4), dtype=int)
    masks[0, 2] = 0
    actions = np.array([0, 1, 3])

    def make_loss():
        lp = model.log_probs(1, planes, masks)
        picked = ad.gather(lp, actions)
        z = ad.add(picked, model.params["log_z"])
        return ad.mean(ad.square(z))

    loss = make_loss()
    loss.backward()
    for name in ("stem.w", "block0.w1", "block1.w2", "head1.b", "log_z"):
        t = model.params[name]
        analytic = t.grad.copy()
        fd = numeric_grad(lambda: make_loss().value.item(), t.value)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-6)
        assert np.max(np.abs(fd - analytic) / denom) < 1e-4
    model.zero_grads()


def test_conv_network_forward_and_grads():
    arch = {"kind": "conv", "rows": 3, "cols": 3, "action_space": 9, "filters": 4, "blocks": 1}
    model = NeuralModel(arch, seed=0)
    planes = np.random.default_rng(0).normal(0, 1, (2, 3, 3, 3))
    masks = np.ones((2, 9), dtype=int)
    lp = model.log_probs(1, planes, masks)
    assert np.exp(lp.value).sum(axis=1) == pytest.approx(np.ones(2), abs=1e-6)
    loss = ad.mean(ad.square(ad.gather(lp, np.array([0, 4]))))
    loss.backward()
    assert model.params["stem.w"].grad is not None


# -- masking and determinism --------------------------------------------------------


def test_neural_masked_probabilities():
    arch = {"kind": "mlp", "rows": 3, "cols": 3, "action_space": 9, "width": 16, "blocks": 1}
    model = NeuralModel(arch, seed=1)
    planes = np.random.default_rng(1).normal(0, 1, (4, 3, 3, 3))
    masks = np.zeros((4, 9), dtype=int)
    masks[:, [0, 4, 8]] = 1
    lp = model.log_probs(1, planes, masks).value
    probs = np.exp(lp)
    probs[np.isneginf(lp)] = 0.0
    assert probs.sum(axis=1) == pytest.approx(np.ones(4), abs=1e-6)
    assert np.all(probs[:, 1] == 0.0)


def test_neural_forward_deterministic():
    arch = {"kind": "mlp", "rows": 2, "cols": 2, "action_space": 4, "width": 8, "blocks": 1}
    m1 = NeuralModel(arch, seed=7)
    m2 = NeuralModel(arch, seed=7)
    planes = np.random.default_rng(2).normal(0, 1, (5, 3, 2, 2))
    assert np.array_equal(m1.logits_np(1, planes), m2.logits_np(1, planes))


# -- Adam ------------------------------------------------------------------------------


def test_adam_quadratic_convergence():
    # single parameter, loss (x - 0.3)^2, lr 1e-3; the reference-implementation
    # oracle reaches |x - 0.3| < 1e-6 at step 1287
    params = {"x": np.array([0.0])}
    adam = DenseAdam(params, lr=1e-3)
    steps = 0
    for _ in range(5000):
        steps += 1
        adam.step({"x": 2.0 * (params["x"] - 0.3)})
        if abs(params["x"][0] - 0.3) < 1e-6:
            break
    assert abs(params["x"][0] - 0.3) < 1e-6
    assert steps == 1287


def test_adam_zero_gradient_leaves_parameters():
    params = {"x": np.array([1.5, -2.0])}
    adam = DenseAdam(params, lr=1e-3)
    adam.step({"x": np.zeros(2)})
    assert params["x"] == pytest.approx([1.5, -2.0])
    assert adam.t == 1


def test_adam_nonfinite_gradient_names_parameter():
    params = {"w": np.zeros(3)}
    adam = DenseAdam(params, lr=1e-3)
    with pytest.raises(NonFiniteGradientError) as err:
        adam.step({"w": np.array([0.0, np.nan, 0.0])})
    assert "w" in str(err.value)


def test_tabular_adam_sparse_rows():
    model = TabularModel(1, 3)
    model.logits[1].row(b"a")
    model.logits[1].row(b"b")
    adam = TabularAdam(model, lr=0.1, lr_z=0.5)
    rows = np.array([0])
    grads = np.array([[1.0, 0.0, -1.0]])
    before_b = model.logits[1].row(b"b").copy()
    adam.step({"logits1": (rows, grads)}, grad_log_z=2.0)
    assert not np.array_equal(model.logits[1].row(b"a"), np.zeros(3))
    assert np.array_equal(model.logits[1].row(b"b"), before_b)
    assert model.log_z != 0.0


def test_adam_logz_learning_rate_override():
    params = {"w": np.array([0.0]), "log_z": np.array([0.0])}
    adam = DenseAdam(params, lr=1e-3, lr_overrides={"log_z": 5e-2})
    adam.step({"w": np.array([1.0]), "log_z": np.array([1.0])})
    assert abs(params["log_z"][0]) > abs(params["w"][0]) * 10


# -- checkpointing -----------------------------------------------------------------------


def test_tabular_checkpoint_roundtrip(tmp_path):
    model = TabularModel(2, 9)
    rng = np.random.default_rng(8)
    for i in range(10):
        model.logits[1].row((i, i * 2, 1))[:] = rng.normal(0, 1, 9)
        model.flows[2].row(bytes([i]))[0] = rng.normal()
    model.log_z = 1.25
    adam = TabularAdam(model, lr=1e-3)
    adam.step({"logits1": (np.array([0, 1]), rng.normal(0, 1, (2, 9)))}, grad_log_z=0.5)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, model, adam, rng=np.random.default_rng(5), step=17,
                    extra={"note": "test"})
    loaded = load_checkpoint(path)
    m2 = loaded["model"]
    assert loaded["step"] == 17
    assert loaded["extra"]["note"] == "test"
    assert m2.log_z == model.log_z
    mask = np.ones(9, dtype=int)
    for i in range(10):
        assert np.array_equal(
            m2.log_probs(1, (i, i * 2, 1), mask), model.log_probs(1, (i, i * 2, 1), mask)
        )
        assert m2.log_flow(2, bytes([i])) == model.log_flow(2, bytes([i]))
    adam2 = TabularAdam(m2, lr=1e-3)
    adam2.load_state(loaded["opt_state"])
    assert adam2.t == adam.t
    assert adam2.mz == adam.mz


def test_neural_checkpoint_bit_identical_forward(tmp_path):
    arch = {"kind": "mlp", "rows": 3, "cols": 3, "action_space": 9, "width": 16, "blocks": 2}
    model = NeuralModel(arch, seed=3)
    path = tmp_path / "net.npz"
    save_checkpoint(path, model, step=5)
    m2 = load_checkpoint(path)["model"]
    planes = np.random.default_rng(4).normal(0, 1, (6, 3, 3, 3))
    for side in (1, 2):
        assert np.array_equal(model.logits_np(side, planes), m2.logits_np(side, planes))


def test_rng_state_roundtrip(tmp_path):
    model = TabularModel(1, 2)
    rng = np.random.default_rng(123)
    rng.random(10)
    save_checkpoint(tmp_path / "c.npz", model, rng=rng, step=0)
    rng2 = load_checkpoint(tmp_path / "c.npz")["rng"]
    assert np.array_equal(rng.random(5), rng2.random(5))
