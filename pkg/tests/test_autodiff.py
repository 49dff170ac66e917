import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bivit import autodiff as ad
from bivit.autodiff import ContractError, NonFiniteError, SteSpec, Tensor


def grad_check(build, params, tol=1e-4):
    """Compare tape gradients of the scalar ``build()`` against central differences."""
    with ad.Tape() as tape:
        loss = build()
    grads = ad.backward(tape, loss)
    for p in params:
        num = ad.numerical_grad(lambda: build().item(), p)
        err = ad.relative_error(grads[p], num)
        assert err < tol, f"{p.name}: relative error {err:.2e}"


def leaf(rng, shape, name=None):
    return Tensor(rng.uniform(-2, 2, shape), True, name)


# -- basic ops ---------------------------------------------------------------------


def test_matmul_identity(rng):
    x = leaf(rng, (3, 3))
    with ad.Tape() as tape:
        y = ad.matmul(Tensor(np.eye(3)), x)
        loss = ad.tsum(y * Tensor(np.arange(9.0).reshape(3, 3)))
    assert np.array_equal(y.data, x.data)
    assert np.array_equal(ad.backward(tape, loss)[x], np.arange(9.0).reshape(3, 3))


def test_sum_gradient_is_ones(rng):
    x = leaf(rng, (2, 5))
    with ad.Tape() as tape:
        loss = ad.tsum(x)
    assert np.array_equal(ad.backward(tape, loss)[x], np.ones((2, 5)))


def test_two_uses_accumulate(rng):
    x = leaf(rng, (4,))
    with ad.Tape() as tape:
        loss = ad.tsum(x * 3.0) + ad.tsum(x * x)
    np.testing.assert_allclose(ad.backward(tape, loss)[x], 3.0 + 2 * x.data)


def test_layernorm_constant_row():
    x = Tensor(np.full((1, 6), 3.7), True)
    g, b = Tensor(np.ones(6), True), Tensor(np.zeros(6), True)
    with ad.Tape() as tape:
        y = ad.layernorm(x, g, b)
        loss = ad.tsum(y * Tensor(np.arange(6.0)))
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)
    gx = ad.backward(tape, loss)[x]
    assert abs(gx.sum()) < 1e-9  # no gradient along the constant direction


def test_composite_graph_finite_differences(rng):
    a, b = leaf(rng, (3, 4), "a"), leaf(rng, (4, 5), "b")
    g, beta = leaf(rng, (5,), "gamma"), leaf(rng, (5,), "beta")
    w = Tensor(rng.normal(size=(3, 5)))

    def build():
        h = ad.layernorm(ad.matmul(a, b), g, beta)
        h = ad.gelu(h) * 0.7 + ad.softmax(h, axis=0)
        h = ad.reshape(ad.transpose(h), (5, 3)) - ad.mean(h, axis=1)
        return ad.tsum(ad.transpose(h) * w)

    grad_check(build, [a, b, g, beta])


def test_getitem_concat_mean_gradients(rng):
    x, y = leaf(rng, (2, 3, 4), "x"), leaf(rng, (2, 1, 4), "y")
    w = Tensor(rng.normal(size=(2, 4, 4)))

    def build():
        z = ad.concat([y, x], axis=1)
        return ad.tsum(z * w) + ad.mean(z[:, 0, :] * z[:, 2, :])

    grad_check(build, [x, y])


def test_broadcast_add_mul_gradients(rng):
    x, s, bias = leaf(rng, (3, 4, 5), "x"), leaf(rng, (4, 1), "s"), leaf(rng, (5,), "bias")
    w = Tensor(rng.normal(size=(3, 4, 5)))
    grad_check(lambda: ad.tsum((x * s + bias) * w), [x, s, bias])


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_smooth_ops_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (3, 4), "x")
    g, b = leaf(rng, (4,), "g"), leaf(rng, (4,), "b")
    w = Tensor(rng.normal(size=(3, 4)))
    grad_check(lambda: ad.tsum(ad.gelu(ad.layernorm(x, g, b)) * w), [x, g, b])


# -- softmax -----------------------------------------------------------------------------


def test_softmax_uniform_row():
    y = ad.softmax(Tensor(np.full((1, 7), 0.3)))
    np.testing.assert_allclose(y.data, 1 / 7, rtol=0, atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one_and_shift_invariant(seed, c):
    x = np.random.default_rng(seed).uniform(-2, 2, (5, 9))
    y = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax(Tensor(x + c)).data, y, atol=1e-12)


def test_softmax_gradient_4x7(rng):
    x = leaf(rng, (4, 7))
    w = Tensor(rng.normal(size=(4, 7)))
    grad_check(lambda: ad.tsum(ad.softmax(x, axis=-1) * w), [x])
    grad_check(lambda: ad.tsum(ad.softmax(x, axis=0) * w), [x])


def test_softmax_uses_full_jacobian(rng):
    x = rng.normal(size=5)
    y = ad.softmax(Tensor(x)).data
    jac = np.diag(y) - np.outer(y, y)
    xt = Tensor(x, True)
    for i in range(5):
        with ad.Tape() as tape:
            loss = ad.softmax(xt)[i]
        np.testing.assert_allclose(ad.backward(tape, loss)[xt], jac[i], atol=1e-15)


# -- straight-through estimators -------------------------------------------------------------


def ste_grad(x, alpha):
    xt = Tensor(np.asarray(x, dtype=float), True)
    with ad.Tape() as tape:
        y = ad.sign_ste(xt, SteSpec(alpha))
        loss = ad.tsum(y)
    return y.data, ad.backward(tape, loss)[xt]


def test_ste_inside_window():
    y, g = ste_grad([0.5], 1.0)
    assert y.tolist() == [1.0] and g.tolist() == [1.0]


def test_ste_outside_window():
    y, g = ste_grad([3.0], 1.0)
    assert y.tolist() == [1.0] and g.tolist() == [0.0]


def test_ste_wider_alpha_reactivates():
    y, g = ste_grad([3.0], 5.0)
    assert y.tolist() == [1.0] and g.tolist() == [1.0]


def test_ste_boundary_passes_gradient():
    _, g = ste_grad([-2.0, 2.0, 2.0000001], 2.0)
    assert g.tolist() == [1.0, 1.0, 0.0]


def test_ste_sign_of_zero():
    y, _ = ste_grad([0.0, -0.0], 1.0)
    assert y.tolist() == [1.0, 1.0]


def test_ste_rejects_non_positive_alpha():
    with pytest.raises(ValueError):
        SteSpec(0.0)
    with pytest.raises(ValueError):
        ad.sign_ste(Tensor([1.0]), np.array([1.0, -1.0]))


def test_threshold_ste():
    x, tau = Tensor(np.array([0.1, 0.3, 0.9]), True), Tensor(np.array([0.25]), True)
    with ad.Tape() as tape:
        y = ad.threshold_ste(x, tau, 0.2)
        loss = ad.tsum(y * Tensor([1.0, 2.0, 3.0]))
    grads = ad.backward(tape, loss)
    assert y.data.tolist() == [0.0, 1.0, 1.0]
    assert grads[x].tolist() == [1.0, 2.0, 0.0]
    assert grads[tau].tolist() == [-3.0]


# -- tape contract ------------------------------------------------------------------------------


def test_non_scalar_loss_rejected(rng):
    x = leaf(rng, (3,))
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        ad.backward(tape, y)


def test_non_finite_trips():
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        ad.mul(Tensor([np.inf]), Tensor([0.0]))


def test_backward_is_deterministic(rng):
    a, b = leaf(rng, (6, 6), "a"), leaf(rng, (6, 6), "b")
    with ad.Tape() as tape:
        loss = ad.tsum(ad.softmax(ad.matmul(a, b)) * ad.gelu(a))
    g1 = {k.name: v.copy() for k, v in ad.backward(tape, loss).items()}
    g2 = {k.name: v.copy() for k, v in ad.backward(tape, loss).items()}
    assert set(g1) == {"a", "b"}
    for k in g1:
        assert g1[k].tobytes() == g2[k].tobytes()


def test_ops_outside_tape_are_not_recorded(rng):
    x = leaf(rng, (2,))
    y = x * 2.0
    assert ad.current_tape() is None and y.requires_grad is False
