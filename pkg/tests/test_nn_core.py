import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import max_rel_err, numeric_grad
from ris_control.nn_core import (Adam, ContractError, Dense, LayerSpec, LSTMCell, MLP, NonFiniteError,
                                 SelfAttentionBlock, Tensor, adam_step, atan2, attention_block_apply, concat,
                                 dense_apply, load_checkpoint, lstm_step, mse, save_checkpoint, time_embedding)


def check_params(module, loss_fn, tol=1e-4):
    """Compare tape gradients of every parameter against central differences."""
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    for name, p in module.named_parameters():
        num = numeric_grad(lambda: float(loss_fn().data), p.data)
        err = max_rel_err(p.grad, num)
        assert err < tol, f"{name}: rel err {err:.2e}"


# --- dense -----------------------------------------------------------------

def test_dense_identity_weights():
    layer = Dense(2, 2, np.random.default_rng(0))
    layer.W.data = np.eye(2)
    layer.b.data = np.zeros(2)
    np.testing.assert_array_equal(dense_apply(layer, np.array([1.0, 2.0])).data, [1.0, 2.0])


def test_dense_zero_weights_returns_bias():
    layer = Dense(4, 1, np.random.default_rng(0))
    layer.W.data[:] = 0.0
    layer.b.data = np.array([3.0])
    out = dense_apply(layer, np.array([5.0, -1.0, 2.0, 7.0]))
    np.testing.assert_array_equal(out.data, [3.0])


def test_dense_dimension_mismatch():
    layer = Dense(3, 2, np.random.default_rng(0))
    with pytest.raises(ContractError):
        dense_apply(layer, np.ones(4))


@pytest.mark.parametrize("activation", ["identity", "tanh", "sigmoid"])
def test_dense_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(5)
    layer = Dense(4, 3, rng, activation)
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    target = rng.normal(size=(2, 3))
    check_params(layer, lambda: mse(dense_apply(layer, x), target))
    layer.zero_grad()
    x.grad = None
    mse(dense_apply(layer, x), target).backward()
    num = numeric_grad(lambda: float(mse(dense_apply(layer, x), target).data), x.data)
    assert max_rel_err(x.grad, num) < 1e-4


# --- LSTM ------------------------------------------------------------------

def test_lstm_zero_network_stays_zero():
    cell = LSTMCell(3, 4, np.random.default_rng(0))
    for p in cell.parameters():
        p.data[:] = 0.0
    h0, c0 = cell.initial_state(1)
    out, (h, c) = lstm_step(cell, np.ones((1, 3)), (h0, c0))
    np.testing.assert_array_equal(c.data, 0.0)
    np.testing.assert_array_equal(h.data, 0.0)


def test_lstm_saturated_forget_gate_preserves_cell():
    H = 3
    cell = LSTMCell(2, H, np.random.default_rng(0))
    for p in cell.parameters():
        p.data[:] = 0.0
    cell.b.data[H:2 * H] = 50.0      # forget gate open
    cell.b.data[0:H] = -50.0         # input gate shut
    c_prev = Tensor(np.array([[0.3, -1.2, 2.0]]))
    h_prev = Tensor(np.zeros((1, H)))
    _, (_, c) = lstm_step(cell, np.array([[4.0, -3.0]]), (h_prev, c_prev))
    np.testing.assert_allclose(c.data, c_prev.data, atol=1e-9)


def test_lstm_rejects_non_finite_state():
    cell = LSTMCell(2, 2, np.random.default_rng(0))
    h, c = cell.initial_state(1)
    c = Tensor(np.array([[np.nan, 0.0]]))
    with pytest.raises(NonFiniteError):
        lstm_step(cell, np.zeros((1, 2)), (h, c))


def test_lstm_bptt_three_steps_gradient():
    rng = np.random.default_rng(9)
    cell = LSTMCell(3, 4, rng)
    xs = rng.normal(size=(3, 2, 3))
    target = rng.normal(size=(2, 4))

    def loss():
        state = cell.initial_state(2)
        h = None
        for x in xs:
            h, state = lstm_step(cell, x, state)
        return mse(h, target)

    check_params(cell, loss)


# --- attention -------------------------------------------------------------

def test_attention_single_token_weight_is_one():
    rng = np.random.default_rng(2)
    block = SelfAttentionBlock(4, rng, hidden_dim=8)
    tok = rng.normal(size=(1, 4))
    out = attention_block_apply(block, tok).data
    # softmax over one key is exactly 1, so attention returns the value projection
    mid = tok + tok @ block.Wv.data
    expected = mid + block.ff2(block.ff1(mid)).data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_identical_tokens_give_identical_rows():
    rng = np.random.default_rng(3)
    block = SelfAttentionBlock(5, rng, hidden_dim=7)
    row = rng.normal(size=5)
    out = attention_block_apply(block, np.stack([row, row])).data
    np.testing.assert_array_equal(out[0], out[1])


def test_attention_rejects_empty_sequence():
    block = SelfAttentionBlock(3, np.random.default_rng(0), hidden_dim=4)
    with pytest.raises(ContractError):
        attention_block_apply(block, np.zeros((0, 3)))


def test_attention_gradient_three_tokens():
    rng = np.random.default_rng(4)
    block = SelfAttentionBlock(4, rng, hidden_dim=6)
    tokens = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    target = rng.normal(size=(3, 4))
    check_params(block, lambda: mse(attention_block_apply(block, tokens), target))
    tokens.grad = None
    mse(attention_block_apply(block, tokens), target).backward()
    num = numeric_grad(lambda: float(mse(attention_block_apply(block, tokens), target).data), tokens.data)
    assert max_rel_err(tokens.grad, num) < 1e-4


def test_attention_default_hidden_width():
    block = SelfAttentionBlock(8, np.random.default_rng(0))
    assert block.ff1.W.shape == (8, 256)


def test_two_layer_composite_gradient():
    rng = np.random.default_rng(6)
    net = MLP([3, 5, 2], rng)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))
    check_params(net, lambda: mse(net(x), target))


# --- tape primitives -------------------------------------------------------

def test_atan2_and_concat_gradients():
    rng = np.random.default_rng(8)
    y = Tensor(rng.normal(size=5), requires_grad=True)
    x = Tensor(rng.normal(size=5) + 2.0, requires_grad=True)

    def f():
        return (concat([atan2(y, x), x * y], axis=0) ** 2).sum()

    f().backward()
    for t in (y, x):
        num = numeric_grad(lambda: float(f().data), t.data)
        assert max_rel_err(t.grad, num) < 1e-4


def test_softmax_rows_sum_to_one():
    z = Tensor(np.random.default_rng(1).normal(size=(3, 6)) * 30)
    np.testing.assert_allclose(z.softmax(axis=-1).data.sum(axis=-1), 1.0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ContractError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_backward_accumulates_through_shared_nodes():
    a = Tensor(np.array(3.0), requires_grad=True)
    b = a * a + a
    b.backward()
    assert a.grad == pytest.approx(7.0)


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    net = MLP([4, 16, 3], rng)
    x = np.random.default_rng(1).normal(size=(8, 4))
    assert np.array_equal(net(x).data, net(x).data)


# --- time embedding, layer spec ---------------------------------------------

def test_time_embedding_shape_and_bounds():
    emb = time_embedding(np.arange(1, 9), 16)
    assert emb.shape == (8, 16)
    assert np.all(np.abs(emb) <= 1.0)
    assert len({tuple(r) for r in emb}) == 8


def test_layer_spec_validation():
    with pytest.raises(ContractError):
        LayerSpec("conv", 1, 1, 1)
    with pytest.raises(ContractError):
        LayerSpec("dense", 0, 1, 1)


# --- Adam ------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    opt = Adam([("p", p)], lr=0.1)
    adam_step(opt)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    p = Tensor(np.array(1.0), requires_grad=True)
    p.grad = np.array(1.0)
    opt = Adam([("p", p)], lr=0.1)
    adam_step(opt)
    assert p.data == pytest.approx(0.9, abs=1e-6)


def test_adam_minimises_square():
    p = Tensor(np.array(1.0), requires_grad=True)
    opt = Adam([("x", p)], lr=1e-2)
    for _ in range(100):
        p.grad = 2 * p.data
        adam_step(opt)
    # independent scalar recursion
    x, m, v = 1.0, 0.0, 0.0
    for t in range(1, 101):
        g = 2 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(p.data) < 0.5
    assert float(p.data) == pytest.approx(x, abs=1e-12)


def test_adam_names_non_finite_parameter():
    good = Tensor(np.zeros(2), requires_grad=True)
    bad = Tensor(np.zeros(2), requires_grad=True)
    good.grad, bad.grad = np.zeros(2), np.array([0.0, np.inf])
    opt = Adam([("layer.ok", good), ("layer.broken", bad)])
    with pytest.raises(NonFiniteError, match="layer.broken"):
        adam_step(opt)


# --- checkpoints -----------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    net = MLP([3, 7, 2], np.random.default_rng(11))
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net.state_dict())
    other = MLP([3, 7, 2], np.random.default_rng(99))
    other.load_state_dict(load_checkpoint(path))
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), other.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ContractError):
        load_checkpoint(path)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_checkpoint_preserves_arbitrary_arrays(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("ck") / "a.ckpt"
    save_checkpoint(path, {"a.b": values, "z": values.T.copy()})
    back = load_checkpoint(path)
    assert np.array_equal(back["a.b"], values) and np.array_equal(back["z"], values.T)
