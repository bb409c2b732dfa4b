import numpy as np
import pytest
import scipy.sparse as sp

from adaptrec import autodiff as ad
from adaptrec.autodiff import Adam, RankError, ShapeError, Tape, Tensor, UninitializedGradError


def numeric_grad(f, x: Tensor, h=1e-5):
    g = np.zeros_like(x.value)
    flat = x.value.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f()
        flat[k] = old - h
        down = f()
        flat[k] = old
        g.reshape(-1)[k] = (up - down) / (2 * h)
    return g


def analytic(f_tensor, params):
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f_tensor()
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def test_forward_values():
    assert ad.sigmoid(Tensor([0.0])).value[0] == 0.5
    assert ad.relu(Tensor([-1.5, 2.0])).value.tolist() == [0.0, 2.0]
    r = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(ad.mean_rows(Tensor(np.tile(r, (4, 1)))).value, r)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        ad.mul(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_square_grad():
    x = ad.parameter(np.array([1.0, -2.0, 0.5]))
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
    tape.backward(loss)
    assert np.allclose(x.grad, 2 * x.value)


def test_neg_log_sigmoid_grad_at_zero():
    w = ad.parameter(np.array(0.0))
    with Tape() as tape:
        loss = ad.neg_log_sigmoid(w)
    tape.backward(loss)
    assert float(w.grad) == -0.5


def test_non_scalar_loss_rejected():
    x = ad.parameter(np.ones(3))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(RankError):
        tape.backward(y)


def test_no_recording_outside_tape():
    x = ad.parameter(np.ones(3))
    y = ad.relu(x)
    assert not y.requires_grad


def test_three_layer_network_matches_finite_differences():
    rng = np.random.default_rng(0)
    X = Tensor(rng.normal(size=(6, 4)))
    A = sp.random(6, 6, density=0.4, random_state=1, format="csr") + sp.eye(6)
    W = [ad.parameter(rng.normal(size=s)) for s in [(4, 5), (5, 5), (5, 3)]]
    b = ad.parameter(rng.normal(size=5))
    v = ad.parameter(rng.normal(size=3))

    def f():
        h = ad.tanh(ad.spmm(A, X) @ W[0] + b)
        h = ad.relu(ad.spmm(A, h) @ W[1])
        h = ad.mean_rows(ad.spmm(A, h) @ W[2])
        return ad.sum_all(ad.neg_log_sigmoid(ad.reshape(h @ v, (1,))))

    params = W + [b, v]
    grads = analytic(f, params)
    for p, g in zip(params, grads):
        num = numeric_grad(lambda: float(f().value), p)
        assert rel_err(g, num).max() < 1e-4


def test_concat_slice_index_sum_cols_grads():
    rng = np.random.default_rng(3)
    a = ad.parameter(rng.normal(size=(3, 2)))
    b = ad.parameter(rng.normal(size=(2, 2)))
    E = ad.parameter(rng.normal(size=(5, 2)))
    idx = np.array([0, 4, 4, 1])

    def f():
        c = ad.concat([a, b], axis=0)
        flat = ad.reshape(c, (10,))
        part = ad.take_range(flat, 2, 8)
        g = ad.sum_cols(ad.mul(ad.index_rows(E, idx), ad.index_rows(E, idx[::-1].copy())))
        return ad.sum_all(ad.sigmoid(part)) + ad.sum_all(g)

    grads = analytic(f, [a, b, E])
    for p, g in zip([a, b, E], grads):
        assert rel_err(g, numeric_grad(lambda: float(f().value), p)).max() < 1e-4


def test_backward_is_linear():
    rng = np.random.default_rng(5)
    x = ad.parameter(rng.normal(size=4))
    W = Tensor(rng.normal(size=(4, 4)))

    def L1():
        return ad.sum_all(ad.sigmoid(W @ x))

    def L2():
        return ad.sum_all(ad.mul(ad.tanh(x), x))

    g1 = analytic(L1, [x])[0]
    g2 = analytic(L2, [x])[0]
    g = analytic(lambda: L1() * 2.5 + L2() * -0.7, [x])[0]
    assert np.allclose(g, 2.5 * g1 - 0.7 * g2, atol=1e-14)


def test_dropout_eval_identity_and_train_unbiased():
    x = Tensor(np.ones(10_000))
    assert ad.dropout(x, 0.3, None, train=False) is x
    y = ad.dropout(x, 0.3, np.random.default_rng(0), train=True).value
    se = y.std() / np.sqrt(len(y))
    assert abs(y.mean() - 1.0) < 3 * se
    assert set(np.unique(y).round(12)) <= {0.0, round(1 / 0.7, 12)}


def test_adam_zero_grad_keeps_params():
    p = ad.parameter(np.array([1.0, 2.0]))
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert p.value.tolist() == [1.0, 2.0]
    assert p.grad is None


def test_adam_first_step_magnitude_is_lr():
    p = ad.parameter(np.array([1.0, -1.0, 3.0]))
    opt = Adam({"p": p}, lr=0.01, eps=0.0)
    p.grad = np.array([0.3, -2.0, 1e-3])
    opt.step()
    # bias-corrected m/sqrt(v) equals sign(g) on the first step
    assert np.allclose(p.value, [0.99, -0.99, 2.99], rtol=0, atol=1e-15)


def test_adam_missing_grad():
    p = ad.parameter(np.ones(2))
    with pytest.raises(UninitializedGradError):
        Adam({"p": p}).step()


def test_adam_deterministic_runs():
    def run():
        rng = np.random.default_rng(9)
        w = ad.parameter(rng.normal(size=(3, 3)))
        x = Tensor(rng.normal(size=(5, 3)))
        opt = Adam({"w": w}, lr=0.01)
        for _ in range(100):
            with Tape() as tape:
                loss = ad.sum_all(ad.neg_log_sigmoid(ad.sum_cols(x @ w)))
            tape.backward(loss)
            opt.step()
        return w.value

    assert np.array_equal(run(), run())
