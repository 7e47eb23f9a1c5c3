"""Tensor engine: op semantics, gradient checks, stop-gradient, Adam."""

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

import quiet.autograd as ag
from quiet.autograd import Adam, Tape, Tensor, backward, stop_gradient
from quiet.errors import ContractError, ShapeError

from conftest import grad_check


def _rand(shape, rng, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


# ---------------------------------------------------------------------------
# closed-form examples


def test_softmax_uniform_on_zeros():
    out = ag.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, np.full(3, 1 / 3), atol=1e-15)


def test_layer_norm_constant_row_zero_before_affine():
    x = Tensor(np.full((2, 5), 3.7))
    out = ag.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_matmul_identity():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ag.matmul(Tensor(np.eye(2)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = ag.tsum(ag.square(x))
    backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = ag.square(x)
    with pytest.raises(ContractError):
        backward(y)


def test_disconnected_tensor_grad_absent():
    x = Tensor([1.0], requires_grad=True)
    z = Tensor([5.0], requires_grad=True)
    with Tape():
        loss = ag.tsum(ag.square(x))
    backward(loss)
    assert z.grad is None


def test_repeated_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = ag.tsum(ag.square(x))
    backward(loss)
    backward(loss)
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


# ---------------------------------------------------------------------------
# stop-gradient semantics


def test_stop_gradient_product_rule():
    x = Tensor([3.0], requires_grad=True)
    with Tape():
        loss = ag.tsum(ag.mul(stop_gradient(x), x))
    backward(loss)
    np.testing.assert_allclose(x.grad, [3.0])


def test_stop_gradient_commitment_pattern():
    h = Tensor([1.0, -2.0], requires_grad=True)
    t = Tensor([0.5, 0.5], requires_grad=True)
    with Tape():
        loss = ag.tsum(ag.square(ag.sub(stop_gradient(h), t)))
    backward(loss)
    assert h.grad is None
    np.testing.assert_allclose(t.grad, 2.0 * (t.data - h.data))


def test_nested_stop_gradient():
    x = Tensor([2.0], requires_grad=True)
    inner = stop_gradient(stop_gradient(x))
    np.testing.assert_array_equal(inner.data, x.data)
    assert not inner.requires_grad


def test_stop_gradient_forward_identity():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    np.testing.assert_array_equal(stop_gradient(x).data, x.data)


# ---------------------------------------------------------------------------
# finite-difference checks for every core op


def test_grad_add_broadcast_bias(rng):
    x = Tensor(_rand((4, 3), rng), requires_grad=True)
    b = Tensor(_rand((3,), rng), requires_grad=True)
    w = _rand((4, 3), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.add(x, b), w)), [x, b])


def test_grad_sub(rng):
    a = Tensor(_rand((3, 4), rng), requires_grad=True)
    b = Tensor(_rand((3, 4), rng), requires_grad=True)
    w = _rand((3, 4), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.sub(a, b), w)), [a, b])


def test_grad_mul(rng):
    a = Tensor(_rand((3, 4), rng), requires_grad=True)
    b = Tensor(_rand((3, 4), rng), requires_grad=True)
    grad_check(lambda: ag.tsum(ag.mul(a, b)), [a, b])


def test_grad_scale_by_scalar_tensor(rng):
    x = Tensor(_rand((3, 2), rng), requires_grad=True)
    s = Tensor(np.array([0.7]), requires_grad=True)
    w = _rand((3, 2), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.scale(x, s), w)), [x, s])


def test_grad_matmul_2d(rng):
    a = Tensor(_rand((3, 4), rng), requires_grad=True)
    b = Tensor(_rand((4, 2), rng), requires_grad=True)
    w = _rand((3, 2), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.matmul(a, b), w)), [a, b])


def test_grad_matmul_batched(rng):
    a = Tensor(_rand((2, 3, 4), rng), requires_grad=True)
    b = Tensor(_rand((2, 4, 3), rng), requires_grad=True)
    w = _rand((2, 3, 3), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.matmul(a, b), w)), [a, b])


def test_grad_sparse_dense_matmul(rng):
    mat = sp.random(5, 4, density=0.5, random_state=3, format="csr")
    x = Tensor(_rand((4, 3), rng), requires_grad=True)
    w = _rand((5, 3), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.sparse_dense_matmul(mat, x), w)), x)


def test_grad_relu(rng):
    base = _rand((4, 4), rng)
    base[np.abs(base) < 0.1] = 0.5   # keep away from the kink
    x = Tensor(base, requires_grad=True)
    w = _rand((4, 4), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.relu(x), w)), x)


def test_grad_sigmoid(rng):
    x = Tensor(_rand((3, 3), rng), requires_grad=True)
    w = _rand((3, 3), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.sigmoid(x), w)), x)


def test_grad_square_sqrt(rng):
    x = Tensor(_rand((3, 3), rng, lo=0.5, hi=1.5), requires_grad=True)
    w = _rand((3, 3), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.sqrt(ag.square(x)), w)), x)


def test_grad_softmax(rng):
    x = Tensor(_rand((4, 5), rng), requires_grad=True)
    w = _rand((4, 5), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.softmax(x, axis=1), w)), x)


def test_grad_log_softmax(rng):
    x = Tensor(_rand((4, 5), rng), requires_grad=True)
    w = _rand((4, 5), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.log_softmax(x, axis=1), w)), x)


def test_grad_layer_norm(rng):
    x = Tensor(_rand((4, 6), rng), requires_grad=True)
    gain = Tensor(_rand((6,), rng, lo=0.5, hi=1.5), requires_grad=True)
    bias = Tensor(_rand((6,), rng), requires_grad=True)
    w = _rand((4, 6), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.layer_norm(x, gain, bias), w)),
               [x, gain, bias])


def test_grad_mean_sum_axes(rng):
    x = Tensor(_rand((3, 4), rng), requires_grad=True)
    w0 = _rand((4,), rng)
    w1 = _rand((3,), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.mean(x, axis=0), w0)), x)
    grad_check(lambda: ag.tsum(ag.mul(ag.tsum(x, axis=1), w1)), x)


def test_grad_l2_norm_rows(rng):
    x = Tensor(_rand((4, 3), rng, lo=0.3, hi=1.0), requires_grad=True)
    w = _rand((4,), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.l2_norm_rows(x), w)), x)


def test_grad_cosine_similarity_rows(rng):
    a = Tensor(_rand((4, 5), rng, lo=0.2, hi=1.0), requires_grad=True)
    b = Tensor(_rand((4, 5), rng, lo=0.2, hi=1.0), requires_grad=True)
    w = _rand((4,), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.cosine_similarity_rows(a, b), w)), [a, b])


def test_grad_gather_rows(rng):
    x = Tensor(_rand((5, 3), rng), requires_grad=True)
    idx = np.array([0, 2, 2, 4])
    w = _rand((4, 3), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.gather_rows(x, idx), w)), x)


def test_grad_concat_transpose_reshape(rng):
    a = Tensor(_rand((2, 3), rng), requires_grad=True)
    b = Tensor(_rand((2, 3), rng), requires_grad=True)
    w = _rand((3, 4), rng)

    def loss():
        joined = ag.concat([a, b], axis=0)          # [4, 3]
        flipped = ag.transpose(joined)              # [3, 4]
        return ag.tsum(ag.mul(ag.reshape(flipped, (3, 4)), w))

    grad_check(loss, [a, b])


def test_grad_transpose_3d(rng):
    x = Tensor(_rand((2, 3, 4), rng), requires_grad=True)
    w = _rand((4, 2, 3), rng)
    grad_check(lambda: ag.tsum(ag.mul(ag.transpose(x, (2, 0, 1)), w)), x)


def test_grad_dropout_fixed_mask(rng):
    x = Tensor(_rand((4, 4), rng), requires_grad=True)
    w = _rand((4, 4), rng)

    def loss():
        gen = np.random.default_rng(99)
        return ag.tsum(ag.mul(ag.dropout(x, 0.4, gen, training=True), w))

    grad_check(loss, x)


def test_grad_cross_entropy(rng):
    logits = Tensor(_rand((5, 3), rng), requires_grad=True)
    labels = np.array([0, 2, 1, 2, 0])
    grad_check(lambda: ag.cross_entropy(logits, labels), logits)


def test_grad_bce_with_logits(rng):
    logits = Tensor(_rand((6,), rng), requires_grad=True)
    targets = np.array([1.0, 0, 1, 0, 1, 0])
    grad_check(lambda: ag.bce_with_logits(logits, targets), logits)


# ---------------------------------------------------------------------------
# properties


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one_and_positive(values):
    out = ag.softmax(Tensor(np.array([values])), axis=1)
    assert abs(out.data.sum() - 1.0) < 1e-12
    assert (out.data > 0).all()


def test_shape_errors_name_shapes():
    with pytest.raises(ShapeError) as err:
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)
    with pytest.raises(ShapeError):
        ag.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_tape_replay_determinism(rng):
    def run():
        gen = np.random.default_rng(7)
        x = Tensor(gen.standard_normal((6, 4)), requires_grad=True)
        w = Tensor(gen.standard_normal((4, 2)), requires_grad=True)
        with Tape():
            loss = ag.mean(ag.square(ag.matmul(ag.relu(x), w)))
        backward(loss)
        return loss.data.copy(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)


# ---------------------------------------------------------------------------
# Adam


def _single_param(value):
    return {"p": Tensor(np.array([value]), requires_grad=True)}


def test_adam_zero_grad_no_decay_keeps_params():
    params = _single_param(1.5)
    opt = Adam(params, lr=0.001, weight_decay=0.0)
    params["p"].grad = np.zeros(1)
    opt.step()
    np.testing.assert_allclose(params["p"].data, [1.5])


def test_adam_single_step_matches_hand_formula():
    params = _single_param(1.0)
    opt = Adam(params, lr=0.001, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    params["p"].grad = np.ones(1)
    opt.step()
    # t=1: m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8)
    np.testing.assert_allclose(params["p"].data, [expected], rtol=0, atol=1e-15)


def test_adam_identical_params_stay_identical():
    params = {"a": Tensor(np.array([0.3, 0.3]), requires_grad=True)}
    opt = Adam(params, lr=0.01)
    for _ in range(5):
        params["a"].grad = np.array([0.7, 0.7])
        opt.step()
    assert params["a"].data[0] == params["a"].data[1]


def test_adam_missing_grad_contract_error():
    params = _single_param(1.0)
    opt = Adam(params)
    with pytest.raises(ContractError):
        opt.step()


def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {
        "layer.weight": Tensor(rng.standard_normal((3, 4))),
        "layer.bias": np.zeros(4),
        "scalar": np.array(2.5),
    }
    path = tmp_path / "model.qtck"
    ag.save_checkpoint(path, tensors)
    loaded = ag.load_checkpoint(path)
    assert set(loaded) == set(tensors)
    np.testing.assert_allclose(loaded["layer.weight"],
                               tensors["layer.weight"].data, atol=1e-6)
    assert loaded["scalar"].shape == ()
