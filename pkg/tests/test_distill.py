import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bivit import autodiff as ad
from bivit.autodiff import Tensor
from bivit.distill import TeacherBundle, dist_loss, psi, ranking_loss, total_loss
from bivit.layers import PrecisionConfig, TinyViT, ViTArch

maps = st.integers(2, 6).flatmap(
    lambda n: arrays(np.float64, (2, n, n), elements=st.floats(-10, 10, allow_nan=False))
)


def psi_loop(A):
    """Row-by-row circular difference, the plain-loop oracle."""
    A = np.asarray(A, float)
    out = np.empty_like(A)
    n = A.shape[-2]
    for i in range(n):
        out[..., i, :] = A[..., i, :] - A[..., (i - 1) % n, :]
    return out


def test_psi_example():
    np.testing.assert_array_equal(psi([[1.0, 2.0], [4.0, 8.0]]), [[-3.0, -6.0], [3.0, 6.0]])


def test_psi_needs_two_rows():
    with pytest.raises(ValueError):
        psi(np.ones((1, 4)))


@given(maps)
def test_psi_matches_loop(A):
    np.testing.assert_array_equal(psi(A), psi_loop(A))


@settings(max_examples=50)
@given(maps, st.floats(-3, 3), st.floats(-3, 3))
def test_psi_linear_and_rows_cancel(A, a, b):
    B = A[::-1]
    np.testing.assert_allclose(psi(a * A + b * B), a * psi(A) + b * psi(B), atol=1e-9)
    np.testing.assert_allclose(psi(A).sum(axis=-2), 0.0, atol=1e-9)


def test_ranking_zero_for_equal_maps(rng):
    A = rng.normal(size=(2, 3, 4, 4))
    assert ranking_loss([A], [A.copy()]).item() == 0.0


def test_ranking_ignores_common_row_shift(rng):
    A = rng.normal(size=(2, 4, 4))
    assert ranking_loss([A], [A + rng.normal(size=(1, 1, 4))]).item() < 1e-12


def test_ranking_positive_for_different_maps(rng):
    A = rng.normal(size=(2, 4, 4))
    B = A.copy()
    B[0, 1, 2] += 0.5
    assert ranking_loss([A], [B]).item() > 0


def test_ranking_hand_example():
    T = np.array([[[1.0, 0, -1], [1, 0, -1], [0, 0, 0]]])
    S = np.zeros_like(T)
    # psi(T) rows: r0 - r2 = [1,0,-1], r1 - r0 = 0, r2 - r1 = [-1,0,1]
    assert ranking_loss([T], [S]).item() == pytest.approx(2.0, abs=1e-15)


def test_ranking_sums_blocks_and_averages_batch(rng):
    maps_t = [rng.normal(size=(3, 2, 4, 4)) for _ in range(2)]
    maps_s = [rng.normal(size=(3, 2, 4, 4)) for _ in range(2)]
    expect = 0.0
    for t, s in zip(maps_t, maps_s):
        expect += np.mean([np.linalg.norm((psi_loop(t[i]) - psi_loop(s[i])).ravel()) for i in range(3)])
    assert ranking_loss(maps_t, maps_s).item() == pytest.approx(expect, rel=1e-13)


@settings(max_examples=50)
@given(maps, st.integers(0, 2**32 - 1))
def test_ranking_metric_properties(A, seed):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=A.shape)
    C = rng.normal(size=A.shape)
    r = lambda x, y: ranking_loss([x], [y]).item()  # noqa: E731
    assert r(A, B) >= 0
    assert r(A, B) == pytest.approx(r(B, A), rel=1e-12, abs=1e-12)
    assert r(A, C) <= r(A, B) + r(B, C) + 1e-9


def test_ranking_shape_errors(rng):
    with pytest.raises(ValueError):
        ranking_loss([np.ones((2, 3, 3))], [np.ones((2, 4, 4))])
    with pytest.raises(ValueError):
        ranking_loss([np.ones((2, 3, 3))], [])


def test_ranking_gradient_finite_differences(rng):
    T = [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(2, 2, 5, 5))]
    S = [Tensor(rng.normal(size=(2, 2, 5, 5)), True, f"s{i}") for i in range(2)]
    with ad.Tape() as tape:
        loss = ranking_loss(T, S)
    grads = ad.backward(tape, loss)
    for s in S:
        num = ad.numerical_grad(lambda: ranking_loss(T, S).item(), s)
        assert ad.relative_error(grads[s], num) < 1e-6


def test_kl_closed_form_three_classes():
    s = np.array([[1.0, 0.0, -1.0]])
    t = np.array([[0.0, 2.0, 0.5]])
    ps = np.exp(s) / np.exp(s).sum()
    pt = np.exp(t) / np.exp(t).sum()
    ce = -np.log(ps[0, 2])
    kl = float(np.sum(pt * np.log(pt / ps)))
    assert dist_loss(Tensor(s), t, [2]).item() == pytest.approx(ce + kl, rel=1e-14)


def test_kl_vanishes_when_logits_agree(rng):
    z = rng.normal(size=(4, 6))
    labels = np.array([0, 1, 2, 3])
    ce = -np.mean(np.log(np.exp(z) / np.exp(z).sum(1, keepdims=True))[np.arange(4), labels])
    assert dist_loss(Tensor(z), z, labels).item() == pytest.approx(ce, rel=1e-13)


def test_temperature_scaling(rng):
    s, t = rng.normal(size=(2, 5, 4))
    labels = np.zeros(5, int)
    T = 3.0
    ls = s / T - np.log(np.exp(s / T).sum(1, keepdims=True))
    lt = t / T - np.log(np.exp(t / T).sum(1, keepdims=True))
    ce = -np.mean(s[:, 0] - np.log(np.exp(s).sum(1)))
    kl = np.mean(np.sum(np.exp(lt) * (lt - ls), axis=1))
    assert dist_loss(Tensor(s), t, labels, T).item() == pytest.approx(ce + kl, rel=1e-12)
    with pytest.raises(ValueError):
        dist_loss(Tensor(s), t, labels, 0.0)


@pytest.mark.parametrize("temperature", [1.0, 2.5])
def test_dist_loss_finite_differences(rng, temperature):
    s = Tensor(rng.normal(size=(4, 5)), True, "s")
    t = rng.normal(size=(4, 5))
    labels = np.array([0, 4, 2, 2])
    with ad.Tape() as tape:
        loss = dist_loss(s, t, labels, temperature)
    g = ad.backward(tape, loss)[s]
    num = ad.numerical_grad(lambda: dist_loss(s, t, labels, temperature).item(), s)
    assert ad.relative_error(g, num) < 1e-7


def test_dist_loss_shape_errors():
    with pytest.raises(ValueError):
        dist_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 4)), [0, 1])
    with pytest.raises(ValueError):
        dist_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 3)), [0])


def test_total_loss_examples():
    total, rep = total_loss(1.5, 0.2, 10.0)
    assert total.item() == pytest.approx(3.5, abs=1e-15)
    assert (rep.l_dist, rep.l_ranking, rep.lam) == (1.5, 0.2, 10.0)
    total, rep = total_loss(1.5, 0.2, 0.0)
    assert total.item() == 1.5
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -1.0)


@settings(max_examples=50)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 100))
def test_total_loss_decomposes(d, r, lam):
    total, rep = total_loss(d, r, lam)
    assert rep.total == total.item()
    assert rep.total == pytest.approx(rep.l_dist + rep.lam * rep.l_ranking, rel=1e-12, abs=1e-12)


def test_total_loss_gradient_routes_lambda(rng):
    a = Tensor(np.array(2.0), True, "a")
    b = Tensor(np.array(3.0), True, "b")
    with ad.Tape() as tape:
        total, _ = total_loss(a * a, b * b, 4.0)
    g = ad.backward(tape, total)
    assert g[a] == pytest.approx(4.0) and g[b] == pytest.approx(24.0)


def teacher_model():
    arch = ViTArch(image_size=8, patch=2, dim=16, depth=2, heads=2, mlp_ratio=2.0, classes=4)
    return TinyViT(arch, PrecisionConfig.full(), seed=0)


def test_teacher_bundle_caches_and_freezes(rng):
    model = teacher_model()
    bundle = TeacherBundle(model, "post_softmax")
    images = rng.normal(size=(10, 1, 8, 8))
    bundle.precompute(images, batch_size=4)
    assert all(not t.requires_grad for t in model.all_tensors().values())
    logits, maps_ = bundle.lookup(np.array([3, 7]))
    direct, recs = model(images[[3, 7]])
    np.testing.assert_allclose(logits, direct.data, atol=1e-12)
    assert len(maps_) == 2
    np.testing.assert_allclose(maps_[1], recs[1].attn.data, atol=1e-12)


def test_teacher_bundle_stage_and_precision(rng):
    bundle = TeacherBundle(teacher_model(), "pre_softmax")
    images = rng.normal(size=(3, 1, 8, 8))
    bundle.precompute(images)
    _, recs = bundle.model(images)
    np.testing.assert_allclose(bundle.lookup(np.arange(3))[1][0], recs[0].scores.data, atol=1e-12)
    with pytest.raises(ValueError):
        TeacherBundle(teacher_model(), "middle")
    arch = ViTArch(image_size=8, patch=2, dim=16, depth=1, heads=2, classes=4)
    with pytest.raises(ValueError):
        TeacherBundle(TinyViT(arch, PrecisionConfig.binary()))
    with pytest.raises(RuntimeError):
        TeacherBundle(teacher_model()).lookup(np.arange(2))


def test_psi_of_constant_map_is_zero():
    assert np.all(psi(np.full((2, 4, 4), 0.25)) == 0)


def test_uniform_teacher_kl_closed_form():
    s = np.array([[2.0, -1.0, 0.5]])
    ps = np.exp(s) / np.exp(s).sum()
    ce = -np.log(ps[0, 0])
    # KL(u || p) = -log 3 - mean(log p)
    kl = -np.log(3.0) - np.mean(np.log(ps))
    assert dist_loss(Tensor(s), np.zeros((1, 3)), [0]).item() == pytest.approx(ce + kl, rel=1e-14)
