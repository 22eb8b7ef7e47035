import math
import zlib

import numpy as np
import pytest

from sdlab import _kernels
from sdlab import autograd as ag

F64 = np.float64
STEP = 1e-3
RTOL = 1e-3
TRIALS = 20


def numeric_grad(f, x, step=STEP):
    """Central differences of scalar f at array x (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def check_grad(build, arrays, seed_weight=None):
    """Compare tape gradients of sum(w * build(*tensors)) against central differences."""
    tensors = [ag.Tensor(a, requires_grad=True, dtype=F64) for a in arrays]
    with ag.Tape() as tape:
        out = build(*tensors)
    w = seed_weight if seed_weight is not None else np.linspace(0.5, 1.5, out.data.size).reshape(out.shape)
    tape.backward(out, grad=w)

    for t in tensors:
        def f():
            return float((build(*[ag.Tensor(s.data, dtype=F64) for s in tensors]).data * w).sum())

        num = numeric_grad(f, t.data)
        ana = t.grad
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        np.testing.assert_allclose(ana, num, rtol=RTOL, atol=RTOL * scale)


def rand(rng, *shape):
    return rng.standard_normal(shape)


def shapes(rng):
    return int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 9))


PRIMITIVES = {
    "matmul": (lambda rng, m, k, n: [rand(rng, m, k), rand(rng, k, n)], lambda a, b: ag.matmul(a, b)),
    "batched_matmul": (lambda rng, m, k, n: [rand(rng, 2, m, k), rand(rng, 2, k, n)], lambda a, b: ag.matmul(a, b)),
    "add": (lambda rng, m, k, n: [rand(rng, m, k), rand(rng, m, k)], lambda a, b: ag.add(a, b)),
    "bias_add": (lambda rng, m, k, n: [rand(rng, m, k), rand(rng, k)], lambda a, b: ag.add(a, b)),
    "sub": (lambda rng, m, k, n: [rand(rng, m, k), rand(rng, m, k)], lambda a, b: ag.sub(a, b)),
    "mul": (lambda rng, m, k, n: [rand(rng, m, k), rand(rng, m, k)], lambda a, b: ag.mul(a, b)),
    "scale": (lambda rng, m, k, n: [rand(rng, m, k)], lambda a: ag.scale(a, -1.7)),
    "add_scalar": (lambda rng, m, k, n: [rand(rng, m, k)], lambda a: ag.add_scalar(a, 0.3)),
    "transpose": (lambda rng, m, k, n: [rand(rng, m, k)], lambda a: ag.transpose(a)),
    "permute": (lambda rng, m, k, n: [rand(rng, 2, m, k)], lambda a: ag.transpose(a, (2, 0, 1))),
    "reshape": (lambda rng, m, k, n: [rand(rng, m, k)], lambda a: ag.reshape(a, a.shape[::-1])),
    "skew": (lambda rng, m, k, n: [rand(rng, m, m)], lambda a: ag.skew(a)),
    "sym": (lambda rng, m, k, n: [rand(rng, m, m)], lambda a: ag.sym(a)),
    "sub_diagonal": (lambda rng, m, k, n: [rand(rng, 2, m, m), rand(rng, 2, m)], lambda a, d: ag.sub_diagonal(a, d)),
    "softplus": (lambda rng, m, k, n: [3 * rand(rng, m, k)], lambda a: ag.softplus(a)),
    "elu": (lambda rng, m, k, n: [rand(rng, m, k) + 0.01], lambda a: ag.elu(a)),
    "gelu": (lambda rng, m, k, n: [rand(rng, m, k)], lambda a: ag.gelu(a)),
    "exp": (lambda rng, m, k, n: [rand(rng, m, k)], lambda a: ag.exp(a)),
    "sum_rows": (lambda rng, m, k, n: [rand(rng, m, k)], lambda a: ag.sum_rows(a)),
    "sum_cols": (lambda rng, m, k, n: [rand(rng, m, k)], lambda a: ag.sum_cols(a)),
    "sum_all": (lambda rng, m, k, n: [rand(rng, m, k)], lambda a: ag.sum_all(a)),
    "mean_all": (lambda rng, m, k, n: [rand(rng, m, k)], lambda a: ag.mean_all(a)),
    "softmax_causal": (lambda rng, m, k, n: [rand(rng, 2, m, m)], lambda a: ag.softmax_rows(a, causal=True)),
    "softmax_full": (lambda rng, m, k, n: [rand(rng, m, m)], lambda a: ag.softmax_rows(a, causal=False)),
    "layer_norm": (lambda rng, m, k, n: [rand(rng, m, k + 1), rand(rng, k + 1), rand(rng, k + 1)],
                   lambda x, g, b: ag.layer_norm(x, g, b)),
    "embedding": (lambda rng, m, k, n: [rand(rng, 5, k)], lambda w: ag.embedding(w, np.array([[0, 3, 3], [4, 0, 1]]))),
    "cross_entropy": (lambda rng, m, k, n: [rand(rng, m, 5)],
                      lambda x: ag.cross_entropy(x, np.arange(x.shape[0]) % 5)),
    "linear_attention": (lambda rng, m, k, n: [np.abs(rand(rng, 2, m, k)) + 0.1, np.abs(rand(rng, 2, m, k)) + 0.1,
                                               rand(rng, 2, m, n)],
                         lambda q, kk, v: ag.causal_linear_attention(q, kk, v)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    make, op = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(TRIALS):
        check_grad(op, make(rng, *shapes(rng)))


@pytest.mark.parametrize("numba_off", ["0", "1"])
def test_linear_attention_gradients_both_kernel_paths(monkeypatch, numba_off):
    monkeypatch.setenv("SDLAB_DISABLE_NUMBA", numba_off)
    rng = np.random.default_rng(7)
    make, op = PRIMITIVES["linear_attention"]
    for _ in range(5):
        check_grad(op, make(rng, 6, 3, 2))


def test_matmul_identity_and_small_product():
    X = np.arange(12, dtype=np.float32).reshape(3, 4)
    np.testing.assert_array_equal(ag.matmul(np.eye(3, dtype=np.float32), X).data, X)
    out = ag.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ag.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ag.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_sum_gradient_is_row_broadcast_of_b_column_sums():
    rng = np.random.default_rng(3)
    A = ag.Tensor(rng.standard_normal((4, 3)), requires_grad=True, dtype=F64)
    B = rng.standard_normal((3, 5))
    with ag.Tape() as tape:
        loss = ag.sum_all(ag.matmul(A, ag.Tensor(B, dtype=F64)))
    tape.backward(loss)
    np.testing.assert_allclose(A.grad, np.tile(B.sum(axis=1), (4, 1)), rtol=1e-12)


def test_softplus_values_and_gradient():
    x = ag.Tensor(np.array([0.0, -100.0, 50.0]), requires_grad=True, dtype=F64)
    with ag.Tape() as tape:
        y = ag.softplus(x)
    assert y.data[0] == pytest.approx(math.log(2.0), abs=1e-12)
    assert 0.0 <= y.data[1] < 1e-40
    assert y.data[2] == 50.0
    tape.backward(y, grad=np.array([1.0, 0.0, 0.0]))
    assert x.grad[0] == pytest.approx(0.5)


def test_softmax_rows_examples():
    out = ag.softmax_rows(np.zeros((1, 4, 4), dtype=np.float32), causal=True).data[0]
    for i in range(4):
        np.testing.assert_allclose(out[i, :i + 1], 1.0 / (i + 1), rtol=1e-6)
        assert np.all(out[i, i + 1:] == 0)
    row = ag.softmax_rows(np.array([[0.0, 0.0, math.log(3.0)]] * 3), causal=False).data[0]
    np.testing.assert_allclose(row, [0.2, 0.2, 0.6], atol=1e-6)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = (5 * rng.standard_normal((3, 17, 17))).astype(np.float32)
    for causal in (True, False):
        y = ag.softmax_rows(x, causal=causal).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_fully_masked_row_rejected():
    x = np.full((1, 2, 2), -np.inf, dtype=np.float32)
    with pytest.raises(ag.FullyMaskedRowError):
        ag.softmax_rows(x, causal=False)


def test_cross_entropy_uniform_logits_is_log_vocab():
    for V in (2, 13, 256):
        loss = ag.cross_entropy(np.zeros((7, V), dtype=np.float32), np.arange(7) % V)
        assert float(loss.data) == pytest.approx(math.log(V), abs=1e-6)


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(11)
        a = ag.Tensor(rng.standard_normal((2, 6, 6)), requires_grad=True)
        b = ag.Tensor(rng.standard_normal((2, 6, 4)), requires_grad=True)
        with ag.Tape() as tape:
            s = ag.softmax_rows(ag.sub_diagonal(ag.skew(a), ag.softplus(ag.Tensor(rng.standard_normal((2, 6))))))
            loss = ag.mean_all(ag.gelu(ag.matmul(s, b)))
        tape.backward(loss)
        return a.grad.copy(), b.grad.copy()

    (a1, b1), (a2, b2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


def test_no_tape_means_no_recording():
    a = ag.Tensor(np.ones((2, 2)), requires_grad=True)
    with ag.Tape() as tape:
        ag.add(a, a)
    assert len(tape) == 1
    ag.add(a, a)
    assert len(tape) == 1


def test_grad_accumulates_over_reuse():
    a = ag.Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=F64)
    with ag.Tape() as tape:
        loss = ag.sum_all(ag.add(a, a))
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [2.0, 2.0])


def test_add_rejects_general_broadcast():
    with pytest.raises(ag.ShapeError):
        ag.add(np.zeros((3, 4)), np.zeros((3, 1)))


@pytest.mark.parametrize("n", [1, 5, 33])
def test_causal_softmax_kernels_agree(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal((3, n, n)).astype(np.float32)
    g = rng.standard_normal((3, n, n)).astype(np.float32)
    y_nb = _kernels.causal_softmax_numba(x)
    y_np = _kernels.causal_softmax_numpy(x)
    np.testing.assert_allclose(y_nb, y_np, atol=1e-6)
    np.testing.assert_allclose(_kernels.causal_softmax_backward_numba(y_nb, g),
                               _kernels.causal_softmax_backward_numpy(y_np, g), atol=1e-5)


@pytest.mark.parametrize("n", [1, 7, 64])
def test_linear_attention_kernels_agree(n):
    rng = np.random.default_rng(n)
    q = np.abs(rng.standard_normal((2, n, 4))) + 0.05
    k = np.abs(rng.standard_normal((2, n, 4))) + 0.05
    v = rng.standard_normal((2, n, 3))
    g = rng.standard_normal((2, n, 3))
    o1, d1 = _kernels.linear_attention_numba(q, k, v, _kernels.DENOM_FLOOR)
    o2, d2 = _kernels.linear_attention_numpy(q, k, v)
    np.testing.assert_allclose(o1, o2, rtol=1e-10)
    np.testing.assert_allclose(d1, d2, rtol=1e-10)
    for a, b in zip(_kernels.linear_attention_backward_numba(q, k, v, o1, d1, g, _kernels.DENOM_FLOOR),
                    _kernels.linear_attention_backward_numpy(q, k, v, o2, d2, g)):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
