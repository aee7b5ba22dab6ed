import numpy as np
import pytest
import scipy.sparse as sp

from coherent3d import diff
from coherent3d.core import VoxelLattice, axis_angle_to_matrix
from coherent3d.exceptions import InvalidInputError


def test_square_derivative():
    tape = diff.Tape()
    x = tape.var(3.0)
    assert diff.backward(x * x)[x] == 6.0


def test_two_variable_hand_derivative():
    tape = diff.Tape()
    x, y = tape.var(2.0), tape.var(5.0)
    g = diff.backward(x * y + diff.log(x))
    assert g[x] == pytest.approx(5.5) and g[y] == pytest.approx(2.0)


def test_unused_leaf_gets_zero():
    tape = diff.Tape()
    x, y = tape.var(np.ones(3)), tape.var(2.0)
    g = diff.backward(diff.sum(x))
    assert np.array_equal(g[y], 0.0)


def test_backward_needs_scalar():
    tape = diff.Tape()
    with pytest.raises(InvalidInputError):
        diff.backward(tape.var(np.ones(2)) * 2)


def test_plain_arrays_pass_through():
    assert np.allclose(diff.sigmoid(np.zeros(2)), 0.5)
    assert not isinstance(diff.sum(np.ones(3)), diff.Var)


PRIMITIVES = {
    "add": (lambda x: diff.sum(x + 2.0 * x[::-1]), (5,)),
    "sub_div": (lambda x: diff.sum((x - 0.3) / (x * x + 1.0)), (5,)),
    "rdiv": (lambda x: diff.sum(2.0 / (x + 3.0)), (5,)),
    "power": (lambda x: diff.sum(diff.power(x * x + 0.5, 1.5)), (5,)),
    "exp_log": (lambda x: diff.sum(diff.log(diff.exp(x) + 1.0)), (5,)),
    "sqrt": (lambda x: diff.sum(diff.sqrt(x * x + 0.1)), (5,)),
    "tanh": (lambda x: diff.sum(diff.tanh(x) * x), (5,)),
    "sigmoid": (lambda x: diff.sum(diff.sigmoid(x) ** 2), (5,)),
    "softplus": (lambda x: diff.sum(diff.softplus(3 * x)), (5,)),
    "trig": (lambda x: diff.sum(diff.sin(x) * diff.cos(2 * x)), (5,)),
    "mean_axis": (lambda x: diff.sum(diff.mean(diff.reshape(x, (2, 3)), axis=0) ** 2), (6,)),
    "sum_keepdims": (lambda x: diff.sum(diff.reshape(x, (2, 3)) / diff.sum(diff.reshape(x, (2, 3)) ** 2, axis=1,
                                                                           keepdims=True)), (6,)),
    "norm": (lambda x: diff.sum(diff.norm(diff.reshape(x, (3, 2)), axis=1)), (6,)),
    "matmul": (lambda x: diff.sum(diff.reshape(x, (2, 3)) @ np.arange(6.0).reshape(3, 2) ** 1.5), (6,)),
    "matvec": (lambda x: diff.sum((np.arange(6.0).reshape(2, 3) @ x) ** 2), (3,)),
    "transpose": (lambda x: diff.sum(diff.reshape(x, (2, 3)).T @ np.ones((2, 1)) * np.arange(3.0)[:, None]), (6,)),
    "getitem_repeat": (lambda x: diff.sum(x[np.array([0, 0, 2, 4])] ** 2), (5,)),
    "concat_stack": (lambda x: diff.sum(diff.concat([x, x * x]) * np.arange(10.0))
                     + diff.sum(diff.stack([x, x], axis=1) ** 3), (5,)),
    "gather": (lambda x: diff.sum(diff.gather_weighted(x, np.array([[0, 1], [2, 2]]),
                                                     np.array([[0.3, 0.7], [0.5, 0.5]])) ** 2), (3,)),
    "sparse": (lambda x: diff.sum(diff.sparse_matmul(sp.csr_matrix(np.arange(15.0).reshape(3, 5) % 4), x) ** 2), (5,)),
    "logmeanexp": (lambda x: diff.sum(diff.segment_logmeanexp(x, np.array([0, 2, 2, 5]), 0.5)
                                      * np.array([1, 2, 3])), (5,)),
    "smooth_max": (lambda x: diff.sum(diff.smooth_max(diff.reshape(x, (2, 3)), 0.2)), (6,)),
    "rodrigues": (lambda w: diff.sum(diff.rodrigues(w) * np.arange(9.0).reshape(3, 3)), (3,)),
    "abs_clip_relu": (lambda x: diff.sum(diff.absolute(x) + diff.clip(x, -0.5, 0.5) + diff.relu(x)), (5,)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, rng):
    f, shape = PRIMITIVES[name]
    for _ in range(3):
        rep = diff.grad_check(f, rng.normal(size=shape), tol=1e-5)
        assert rep.passed, f"{name}: {rep.summary()}"


def test_trilinear_and_bilinear_gradients(rng):
    lat = VoxelLattice([0, 0, 0], 0.5, (3, 3, 3))
    p = rng.random((20, 3))
    rep = diff.grad_check(lambda v: diff.sum(diff.trilinear_sample(diff.reshape(v, lat.shape), lat, p) ** 2),
                          rng.random(27))
    assert rep.passed, rep.summary()
    u, v = rng.uniform(0, 4, 10), rng.uniform(0, 3, 10)
    rep = diff.grad_check(lambda im: diff.sum(diff.bilinear_sample(diff.reshape(im, (3, 4)), u, v) ** 2),
                          rng.random(12))
    assert rep.passed, rep.summary()


def test_astype_gradient_is_cast_back():
    tape = diff.Tape()
    x = tape.var(np.array([1.0, 2.0, 3.0]))
    y = diff.astype(x, np.float32)
    assert y.value.dtype == np.float32
    g = diff.backward(diff.sum(y * np.float32(2.0)))[x]
    assert g.dtype == np.float64 and np.array_equal(g, [2.0, 2.0, 2.0])


def test_rodrigues_near_zero():
    rep = diff.grad_check(lambda w: diff.sum(diff.rodrigues(w) * np.arange(9.0).reshape(3, 3)),
                          np.array([1e-9, -2e-9, 0.0]), tol=1e-5)
    assert rep.passed, rep.summary()
    assert np.allclose(diff.rodrigues(np.array([0.1, 0.2, 0.3])), axis_angle_to_matrix([0.1, 0.2, 0.3]))


def test_grad_check_quadratic_form(rng):
    A = rng.normal(size=(4, 4))
    A = A @ A.T
    rep = diff.grad_check(lambda x: diff.sum(x * (A @ x)), rng.normal(size=4), tol=1e-7)
    assert rep.passed, rep.summary()


def test_grad_check_reports_clamp_kink():
    x0 = np.array([0.5, 0.2])
    rep = diff.grad_check(lambda x: diff.sum(diff.clip(x, 0.0, 0.5)), x0)
    assert rep.nondifferentiable == [0]
    assert rep.passed
    assert "excluded" in rep.summary()


def test_grad_check_detects_wrong_gradient():
    def bad(x):
        return diff._make(float(np.sum(diff.value_of(x) ** 2)), (x,), (lambda g: g * np.ones(3),))

    assert not diff.grad_check(bad, np.array([1.0, 2.0, 3.0])).passed


def test_adam_minimizes_quadratic():
    opt = diff.Adam(lr=0.1)
    x = np.array([3.0, -2.0])
    for _ in range(500):
        x = opt.step(x, 2 * x)
    assert np.max(np.abs(x)) < 1e-2


def test_mlp_shapes_and_gradient(rng):
    sizes = [4, 5, 1]
    params = diff.mlp_init(sizes, rng)
    assert len(params) == diff.mlp_num_params(sizes) == 4 * 5 + 5 + 5 + 1
    x = rng.normal(size=(7, 4))
    assert diff.mlp_apply(params, x, sizes).shape == (7, 1)
    rep = diff.grad_check(lambda p: diff.sum(diff.sigmoid(diff.mlp_apply(p, x, sizes))), params)
    assert rep.passed, rep.summary()


def test_tape_mismatch_rejected():
    t1, t2 = diff.Tape(), diff.Tape()
    x, y = t1.var(1.0), t2.var(1.0)
    g = diff.backward(x * 2)
    with pytest.raises(InvalidInputError):
        g[y]
