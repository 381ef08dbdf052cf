import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2sa import autodiff as ad
from oracles import central_fd, rel_err


def grad_of(fn, *arrays):
    params = [ad.Tensor(a.copy(), True) for a in arrays]
    with ad.Tape():
        loss = fn(*params)
        ad.backward(loss, params)
    return [p.grad for p in params]


def fd_check(fn, *arrays, tol=1e-4, eps=1e-5):
    grads = grad_of(fn, *arrays)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [ad.Tensor(b) for b in arrays]
            args[i] = ad.Tensor(x)
            return fn(*args).item()

        assert rel_err(grads[i], central_fd(f, a, eps)) <= tol


def test_sine_values():
    out = ad.sine(ad.Tensor(np.array([0.0, np.pi / 2])))
    np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-15)


def test_matmul_shape():
    assert ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 4)))).shape == (2, 4)


def test_conv2d_interior_sum_of_ones():
    out = ad.conv2d(ad.Tensor(np.ones((1, 1, 5, 5))), ad.Tensor(np.ones((1, 1, 3, 3))))
    assert out.data[0, 0, 2, 2] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0  # zero padding at the corner


def test_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\)"):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 2))))


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown"):
        ad.record("softmax", ad.Tensor(np.ones(3)))


def test_scalar_broadcast_only():
    x = ad.Tensor(np.ones((2, 3)))
    assert ad.mul(x, 2.0).shape == (2, 3)
    with pytest.raises(ValueError):
        ad.mul(x, ad.Tensor(np.ones(3)))
    assert ad.broadcast_to(ad.Tensor(np.ones((1, 3))), (2, 3)).shape == (2, 3)


def test_backward_square():
    (g,) = grad_of(lambda w: ad.sum_(ad.mul(w, w)), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_backward_sine_at_zero():
    (g,) = grad_of(ad.sine, np.array(0.0))
    assert g == 1.0


def test_non_scalar_loss_rejected():
    w = ad.Tensor(np.ones(3), True)
    with ad.Tape():
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(ad.mul(w, w), [w])


def test_unreached_param_gets_zero_grad():
    a, b = ad.Tensor(np.ones(2), True), ad.Tensor(np.ones(3), True)
    with ad.Tape():
        ad.backward(ad.sum_(a), [a, b])
    np.testing.assert_array_equal(b.grad, np.zeros(3))


def test_tensor_on_one_tape():
    w = ad.Tensor(np.ones(2), True)
    with ad.Tape():
        y = ad.mul(w, w)
    with ad.Tape():
        # outputs of a closed tape are detached constants
        z = ad.sum_(ad.mul(y, w))
        ad.backward(z, [w])
    np.testing.assert_array_equal(w.grad, y.data)


def test_tape_topological_order():
    w = ad.Tensor(np.ones(3), True)
    with ad.Tape() as tape:
        ad.sum_(ad.sine(ad.mul(w, w)))
    assert tape.kinds == ["mul", "sine", "sum"]


def test_siren_layer_graph_fd():
    rng = np.random.default_rng(0)
    x, W, b = rng.normal(size=(6, 6)), rng.normal(size=(6, 6)) / 3, rng.normal(size=(1, 6))

    def f(x, W, b):
        h = ad.add(ad.matmul(x, W), ad.broadcast_to(b, (6, 6)))
        return ad.sum_(ad.mul(ad.sine(ad.scale(h, 3.0)), ad.sine(h)))

    fd_check(f, x, W, b)


OPS = {
    "add": (lambda a, b: ad.sum_(ad.mul(ad.add(a, b), a)), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: ad.sum_(ad.mul(ad.sub(a, b), a)), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.sum_(ad.mul(a, b)), [(3, 4), (3, 4)]),
    "div": (lambda a, b: ad.sum_(ad.div(a, ad.add(ad.mul(b, b), 1.0))), [(3, 4), (3, 4)]),
    "scale": (lambda a: ad.sum_(ad.mul(ad.scale(a, -1.7), a)), [(5,)]),
    "matmul": (lambda a, b: ad.sum_(ad.sine(ad.matmul(a, b))), [(2, 3), (3, 4)]),
    "conv2d": (lambda x, w, b: ad.sum_(ad.sine(ad.conv2d(x, w, b))), [(1, 2, 4, 4), (3, 2, 3, 3), (3,)]),
    "conv2d_1x1": (lambda x, w: ad.sum_(ad.sine(ad.conv2d_1x1(x, w))), [(1, 3, 3, 3), (2, 3)]),
    "sine": (lambda a: ad.sum_(ad.sine(a)), [(8,)]),
    "exp": (lambda a: ad.sum_(ad.exp(a)), [(8,)]),
    "abs": (lambda a: ad.sum_(ad.abs_(a)), [(8,)]),
    "leaky_relu": (lambda a: ad.sum_(ad.mul(ad.leaky_relu(a, 0.2), a)), [(8,)]),
    "sum_axis": (lambda a: ad.sum_(ad.sine(ad.sum_(a, axis=1))), [(3, 4)]),
    "mean": (lambda a: ad.sum_(ad.sine(ad.mean(a, axis=0, keepdims=True))), [(3, 4)]),
    "concat": (lambda a, b: ad.sum_(ad.sine(ad.concat([a, b], axis=1))), [(2, 2), (2, 3)]),
    "slice": (lambda a: ad.sum_(ad.sine(ad.slice_(a, (slice(0, 2), 1)))), [(3, 4)]),
    "reshape": (lambda a: ad.sum_(ad.mul(ad.reshape(a, (4, 3)), ad.Tensor(np.arange(12.0).reshape(4, 3)))), [(3, 4)]),
    "transpose": (lambda a: ad.sum_(ad.mul(ad.transpose(a), ad.Tensor(np.arange(12.0).reshape(4, 3)))), [(3, 4)]),
    "complex_sos": (lambda a: ad.sum_(ad.sine(ad.complex_sum_of_squares(a, axis=0))), [(2, 3, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_fd(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    arrays = [rng.normal(size=s) + (0.3 if name == "abs" else 0.0) for s in shapes]
    if name in ("abs", "leaky_relu"):
        arrays = [a + np.sign(a) * 0.05 for a in arrays]  # keep clear of the kink
    fd_check(fn, *arrays)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    w0 = rng.normal(size=(4, 4))

    def l1(w):
        return ad.sum_(ad.sine(w))

    def l2(w):
        return ad.sum_(ad.mul(w, ad.abs_(w)))

    (g1,) = grad_of(l1, w0)
    (g2,) = grad_of(l2, w0)
    (g,) = grad_of(lambda w: ad.add(ad.scale(l1(w), a), ad.scale(l2(w), b)), w0)
    assert np.max(np.abs(g - (a * g1 + b * g2))) <= 1e-12 * max(1.0, np.max(np.abs(g)))


def test_determinism():
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(2, 2, 3, 3))
        runs.append(grad_of(lambda x, w: ad.sum_(ad.sine(ad.conv2d(x, w))), x, w))
    for a, b in zip(*runs):
        assert a.tobytes() == b.tobytes()


def test_tapes_on_separate_threads():
    results = {}

    def work(i):
        w = ad.Tensor(np.full(3, float(i)), True)
        with ad.Tape():
            ad.backward(ad.sum_(ad.mul(w, w)), [w])
        results[i] = w.grad

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(4):
        np.testing.assert_array_equal(results[i], np.full(3, 2.0 * i))
