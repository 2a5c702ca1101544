import numpy as np
import pytest

from kpiembed import ndiff
from kpiembed.errors import ContractError, DimensionError, NumericError
from kpiembed.ndiff import Tensor


def tensor(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# -- forward oracles ----------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ndiff.matmul(Tensor(np.eye(2)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_tanh_at_zero():
    out = ndiff.tanh(Tensor(np.zeros((3, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((3, 2)))


def test_batch_covariance_hand_case():
    # means are 0 and E[fg] = 1 with the 1/b convention
    f = Tensor(np.array([[1.0, -1.0]]))
    g = Tensor(np.array([[1.0, -1.0]]))
    out = ndiff.batch_covariance(f, g)
    np.testing.assert_array_equal(out.data, np.array([[1.0]]))


def test_trace_and_mean():
    t = Tensor(np.array([[1.0, 5.0], [7.0, 3.0]]))
    assert ndiff.trace(t).item() == 4.0
    assert ndiff.mean(t).item() == 4.0
    np.testing.assert_allclose(ndiff.mean(t, axis=0).data, [4.0, 4.0])


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 7)))
    np.testing.assert_allclose(ndiff.softmax(x, axis=-1).data.sum(axis=-1), np.ones(4))


def test_layer_norm_is_standardized():
    x = Tensor(np.random.default_rng(1).normal(size=(5, 16)) * 3 + 2)
    y = ndiff.layer_norm(x, axis=-1).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)


# -- backward hand cases --------------------------------------------------------

def test_backward_sum_of_squares():
    x = tensor([3.0])
    loss = ndiff.mean(ndiff.mul(x, x))
    loss.backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_tanh_at_zero_has_unit_slope():
    w = tensor([0.0])
    loss = ndiff.tanh(ndiff.mean(w))
    loss.backward()
    np.testing.assert_allclose(w.grad, [1.0])


def test_two_layer_composite_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 3)) + 0.1  # keep relu inputs away from kinks

    def fn(vec):
        w1 = ndiff.reshape(ndiff.slice_axis(vec, 0, 0, 6), (3, 2))
        w2 = ndiff.reshape(ndiff.slice_axis(vec, 0, 6, 8), (2, 1))
        hidden = ndiff.relu(ndiff.matmul(Tensor(x), w1))
        return ndiff.mean(ndiff.matmul(hidden, w2))

    err = ndiff.grad_check(fn, rng.normal(size=8))
    assert err < 1e-6


def test_backward_requires_scalar():
    x = tensor([[1.0, 2.0]])
    with pytest.raises(ContractError):
        ndiff.mul(x, x).backward()


def test_repeated_backward_accumulates():
    x = tensor([2.0])
    loss = ndiff.mean(ndiff.mul(x, x))
    loss.backward()
    loss.backward()
    np.testing.assert_allclose(x.grad, [8.0])  # 2 sweeps x d(x^2)/dx


def test_backward_map_returns_leaf_grads():
    x = tensor([1.0, 2.0])
    y = tensor([3.0, 4.0])
    loss = ndiff.mean(ndiff.mul(x, y))
    grads = ndiff.backward(loss)
    np.testing.assert_allclose(grads[x], [1.5, 2.0])
    np.testing.assert_allclose(grads[y], [0.5, 1.0])


def test_untracked_tensors_receive_no_grad():
    x = tensor([1.0, 2.0])
    c = Tensor(np.array([5.0, 6.0]))  # not tracked
    loss = ndiff.mean(ndiff.mul(x, c))
    loss.backward()
    assert c.grad is None
    assert x.grad is not None


# -- error contracts ---------------------------------------------------------------

def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        ndiff.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_add_rejects_non_bias_broadcast():
    ndiff.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))  # bias-add is fine
    with pytest.raises(DimensionError):
        ndiff.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))


def test_non_finite_output_raises_naming_op():
    big = Tensor(np.array([[1e308, 1e308]]))
    with pytest.raises(NumericError) as exc:
        ndiff.matmul(big, Tensor(np.full((2, 1), 1e308)))
    assert "matmul" in str(exc.value)


def test_slice_out_of_range():
    with pytest.raises(DimensionError):
        ndiff.slice_axis(Tensor(np.zeros((3, 4))), 1, 2, 6)


# -- gradient checking ----------------------------------------------------------------

def test_grad_check_linear_is_exact():
    w = np.array([1.0, -2.0, 3.0])

    def fn(v):
        return ndiff.mean(ndiff.mul(v, Tensor(w * 3.0)))

    assert ndiff.grad_check(fn, np.array([0.5, 1.5, -0.5])) < 1e-10


def test_grad_check_quadratic_at_origin():
    def fn(v):
        return ndiff.mean(ndiff.mul(v, v))

    assert ndiff.grad_check(fn, np.zeros(4)) < 1e-9


def _random_op_case(op_name, rng):
    """Build (fn, point) exercising one op inside a scalarizing wrapper."""
    if op_name == "matmul":
        m, k, n = rng.integers(1, 4, size=3)
        b = rng.normal(size=(k, n))

        def fn(v):
            return ndiff.mean(ndiff.matmul(ndiff.reshape(v, (m, k)), Tensor(b)))

        return fn, rng.normal(size=m * k)
    if op_name == "matmul_stacked":
        s, m, k = 2, 2, 3
        b = rng.normal(size=(s, k, 2))

        def fn(v):
            return ndiff.mean(ndiff.matmul(ndiff.reshape(v, (s, m, k)), Tensor(b)))

        return fn, rng.normal(size=s * m * k)
    if op_name == "add":
        shape = (3, 4)
        bias = rng.normal(size=4)

        def fn(v):
            return ndiff.mean(ndiff.add(ndiff.reshape(v, shape), Tensor(bias)))

        return fn, rng.normal(size=12)
    if op_name == "mul":
        other = rng.normal(size=(2, 5))

        def fn(v):
            return ndiff.mean(ndiff.mul(ndiff.reshape(v, (2, 5)), Tensor(other)))

        return fn, rng.normal(size=10)
    if op_name == "scale":
        c = float(rng.normal())

        def fn(v):
            return ndiff.mean(ndiff.scale(v, c))

        return fn, rng.normal(size=6)
    if op_name == "tanh":
        def fn(v):
            return ndiff.mean(ndiff.tanh(v))

        return fn, rng.normal(size=8)
    if op_name == "relu":
        point = rng.normal(size=8)
        point[np.abs(point) < 1e-3] = 0.1  # keep away from the kink

        def fn(v):
            return ndiff.mean(ndiff.relu(v))

        return fn, point
    if op_name == "softmax":
        w = rng.normal(size=(2, 4))

        def fn(v):
            return ndiff.mean(ndiff.mul(ndiff.softmax(ndiff.reshape(v, (2, 4)), axis=-1), Tensor(w)))

        return fn, rng.normal(size=8)
    if op_name == "layer_norm":
        w = rng.normal(size=(2, 6))

        def fn(v):
            return ndiff.mean(ndiff.mul(ndiff.layer_norm(ndiff.reshape(v, (2, 6)), axis=-1), Tensor(w)))

        return fn, rng.normal(size=12)
    if op_name == "concat":
        def fn(v):
            a = ndiff.reshape(ndiff.slice_axis(v, 0, 0, 6), (2, 3))
            b = ndiff.reshape(ndiff.slice_axis(v, 0, 6, 10), (2, 2))
            return ndiff.mean(ndiff.tanh(ndiff.concat([a, b], axis=1)))

        return fn, rng.normal(size=10)
    if op_name == "reshape":
        def fn(v):
            return ndiff.mean(ndiff.mul(ndiff.reshape(v, (3, 2)), ndiff.reshape(v, (3, 2))))

        return fn, rng.normal(size=6)
    if op_name == "transpose":
        w = rng.normal(size=(4, 3))

        def fn(v):
            return ndiff.mean(ndiff.mul(ndiff.transpose(ndiff.reshape(v, (3, 4))), Tensor(w)))

        return fn, rng.normal(size=12)
    if op_name == "slice":
        def fn(v):
            return ndiff.mean(ndiff.tanh(ndiff.slice_axis(ndiff.reshape(v, (4, 3)), 0, 1, 3)))

        return fn, rng.normal(size=12)
    if op_name == "mean_axis":
        def fn(v):
            return ndiff.mean(ndiff.tanh(ndiff.mean(ndiff.reshape(v, (3, 4)), axis=0)))

        return fn, rng.normal(size=12)
    if op_name == "batch_covariance":
        g = rng.normal(size=(3, 5))

        def fn(v):
            cov = ndiff.batch_covariance(ndiff.reshape(v, (3, 5)), Tensor(g))
            return ndiff.trace(cov)

        return fn, rng.normal(size=15)
    if op_name == "trace":
        def fn(v):
            m = ndiff.reshape(v, (3, 3))
            return ndiff.trace(ndiff.matmul(m, m))

        return fn, rng.normal(size=9)
    raise AssertionError(op_name)


ALL_OPS = ["matmul", "matmul_stacked", "add", "mul", "scale", "tanh", "relu",
           "softmax", "layer_norm", "concat", "reshape", "transpose", "slice",
           "mean_axis", "batch_covariance", "trace"]


@pytest.mark.parametrize("op_name", ALL_OPS)
def test_randomized_grad_check_per_op(op_name):
    """Every registered op passes 20 randomized finite-difference checks."""
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng([hash(op_name) % (2**32), trial])
        fn, point = _random_op_case(op_name, rng)
        worst = max(worst, ndiff.grad_check(fn, point))
    assert worst < 1e-6, f"{op_name}: worst rel err {worst}"


def test_backward_through_28_step_recurrence():
    """BPTT over a fixed-weight tanh recurrence matches finite differences."""
    from kpiembed.models import esn_init

    rng = np.random.default_rng(11)
    n_res, n_in, n_steps = 5, 3, 28
    res = esn_init(seed=11, n_res=n_res, rho=0.9, gamma=0.5, n_in=n_in)
    w_res = Tensor(res.w_res.data.T.copy())
    w_in = Tensor(res.w_in.data.T.copy())

    def fn(v):
        u = ndiff.reshape(v, (n_steps, n_in))
        s = Tensor(np.zeros((1, n_res)))
        for t in range(n_steps):
            u_t = ndiff.slice_axis(u, 0, t, t + 1)
            s = ndiff.tanh(ndiff.add(ndiff.matmul(s, w_res), ndiff.matmul(u_t, w_in)))
        return ndiff.mean(s)

    err = ndiff.grad_check(fn, rng.normal(size=n_steps * n_in))
    assert err < 1e-5


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 6))

    def run():
        t = Tensor(x, requires_grad=True)
        return ndiff.mean(ndiff.softmax(ndiff.matmul(t, t), axis=-1)).item()

    assert run() == run()


def test_no_grad_suppresses_tape():
    x = tensor([1.0, 2.0])
    with ndiff.no_grad():
        out = ndiff.mul(x, x)
    assert out._parents == ()
    assert not out.requires_grad
