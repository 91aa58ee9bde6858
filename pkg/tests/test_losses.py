import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepcomp import losses as L
from deepcomp import nets as N
from deepcomp import tensor as T
from deepcomp.color import hsv_to_rgb_array
from oracles import LN2, numeric_grad, rel_err


def t64(a, grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def const_hsv(h, s, v, size=4):
    hsv = np.stack([np.full((size, size), h), np.full((size, size), s), np.full((size, size), v)])[None]
    return hsv_to_rgb_array(hsv)


def saturated_image(seed, shape=(2, 3, 8, 8)):
    rng = np.random.default_rng(seed)
    hsv = np.stack([rng.uniform(0, 1, shape[:1] + shape[2:]),
                    rng.uniform(0.3, 1, shape[:1] + shape[2:]),
                    rng.uniform(0.3, 1, shape[:1] + shape[2:])], axis=1)
    return hsv


def test_hsv_loss_constant_example():
    a, b = t64(const_hsv(0.0, 1, 1)), t64(const_hsv(0.4, 1, 1))
    assert L.hsv_loss(a, b).item() == pytest.approx(0.16, abs=1e-12)
    assert L.hsv_loss(a, b, circular=True).item() == pytest.approx(0.16, abs=1e-12)
    c = t64(const_hsv(0.9, 1, 1))
    assert L.hsv_loss(a, c).item() == pytest.approx(0.81, abs=1e-12)
    assert L.hsv_loss(a, c, circular=True).item() == pytest.approx(0.01, abs=1e-12)


def test_hsv_loss_identity_and_shape_error():
    x = t64(np.random.default_rng(0).uniform(size=(1, 3, 5, 5)))
    assert L.hsv_loss(x, x).item() == 0.0
    with pytest.raises(T.ShapeError):
        L.hsv_loss(x, t64(np.zeros((1, 3, 5, 4))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 1.0), st.booleans())
def test_hsv_loss_ignores_value_edits(seed, factor, circular):
    hsv = saturated_image(seed)
    edited = hsv.copy()
    edited[:, 2] *= factor
    a, b = t64(hsv_to_rgb_array(hsv)), t64(hsv_to_rgb_array(edited))
    assert abs(L.hsv_loss(a, b, circular).item()) < 1e-6
    other = t64(hsv_to_rgb_array(saturated_image(seed + 1)))
    assert abs(L.hsv_loss(a, other, circular).item() - L.hsv_loss(b, other, circular).item()) < 1e-6


def test_recon_loss():
    rng = np.random.default_rng(1)
    x, y = rng.uniform(size=(2, 3, 6, 6)), rng.uniform(size=(2, 3, 6, 6))
    assert L.recon_loss(t64(x), t64(x)).item() == 0.0
    assert L.recon_loss(t64(np.clip(x, 0, 0.9) + 0.1), t64(np.clip(x, 0, 0.9))).item() == pytest.approx(0.1)
    loop = sum(abs(a - b) for a, b in zip(x.ravel().tolist(), y.ravel().tolist())) / x.size
    assert abs(L.recon_loss(t64(x), t64(y)).item() - loop) < 1e-6


def test_feature_extractor_frozen_and_deterministic():
    fx1, fx2 = L.FeatureExtractor(seed=3), L.FeatureExtractor(seed=3)
    for (w1, _), (w2, _) in zip(fx1._weights, fx2._weights):
        np.testing.assert_array_equal(w1, w2)
    before = [w.copy() for w, _ in fx1._weights]
    x = t64(np.random.default_rng(0).uniform(size=(1, 3, 16, 16)), grad=True)
    T.backward(L.perceptual_loss(x, t64(np.zeros((1, 3, 16, 16))), fx1))
    for b, (w, _) in zip(before, fx1._weights):
        np.testing.assert_array_equal(b, w)
    assert [f.shape[1] for f in fx1.features(x)] == [16, 32, 64]


def test_perceptual_loss_properties():
    fx = L.FeatureExtractor()
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(1, 3, 16, 16))
    assert L.perceptual_loss(t64(x), t64(x), fx).item() == 0.0
    for seed in range(5):
        y = np.random.default_rng(seed).uniform(size=x.shape)
        assert L.perceptual_loss(t64(x), t64(y), fx).item() >= 0


def test_perceptual_loss_sees_structure():
    fx = L.FeatureExtractor()
    rng = np.random.default_rng(4)
    target = np.full((1, 3, 16, 16), 0.5)
    blocky = np.where(np.arange(16)[None, None, None, :] < 8, 0.1, -0.1) * np.ones_like(target)
    shuffled = blocky.reshape(1, 3, -1)[:, :, rng.permutation(256)].reshape(target.shape)
    r1 = L.recon_loss(t64(target + blocky), t64(target)).item()
    r2 = L.recon_loss(t64(target + shuffled), t64(target)).item()
    assert r1 == pytest.approx(r2, abs=1e-12)
    a = L.perceptual_loss(t64(target + blocky), t64(target), fx).item()
    b = L.perceptual_loss(t64(target + shuffled), t64(target), fx).item()
    assert abs(a - b) > 1e-2 * max(a, b)


def test_adversarial_closed_forms():
    zeros = T.Tensor(np.zeros((2, 1, 6, 6)))
    assert L.adversarial_g_loss(zeros).item() == pytest.approx(LN2, abs=1e-6)
    assert L.adversarial_d_loss(zeros, zeros).item() == pytest.approx(LN2, abs=1e-6)
    real, fake = T.Tensor(np.full((2, 1), 30.0)), T.Tensor(np.full((2, 1), -30.0))
    assert L.adversarial_d_loss(real, fake).item() < 1e-10
    assert L.adversarial_g_loss(fake).item() == pytest.approx(30.0, abs=1e-6)
    for v in (-2.0, 0.3, 5.0):
        patch = T.Tensor(np.full((1, 1, 6, 6), v), dtype=np.float64)
        scalar = T.Tensor(np.full((1, 1), v), dtype=np.float64)
        assert L.adversarial_g_loss(patch).item() == pytest.approx(L.adversarial_g_loss(scalar).item(), rel=1e-14)
        assert L.adversarial_g_loss(scalar).item() == pytest.approx(math.log1p(math.exp(-v)), abs=1e-12)


def test_total_loss_arithmetic():
    parts = [t64(v) for v in (0.7, 0.2, 0.1, 0.05)]
    total, br = L.generator_total_loss(*parts, L.LossWeights(100, 1, 10))
    assert total.item() == pytest.approx(21.3, abs=1e-12)
    assert (br.adversarial, br.recon, br.perceptual, br.hsv) == (0.7, 0.2, 0.1, 0.05)
    assert br.total == pytest.approx(br.adversarial + 100 * br.recon + br.perceptual + 10 * br.hsv, rel=1e-6)
    total0, _ = L.generator_total_loss(*parts, L.LossWeights(0, 0, 0))
    assert total0.item() == 0.7


def test_total_loss_divergence():
    parts = [t64(0.7), t64(float("nan")), t64(0.1), t64(0.05)]
    with pytest.raises(L.TrainingDivergence) as exc:
        L.generator_total_loss(*parts, L.LossWeights())
    assert exc.value.component == "recon"
    with pytest.raises(ValueError):
        L.LossWeights(lambda_hsv=-1)
    with pytest.raises(ValueError):
        L.LossWeights(lambda_recon=float("inf"))


def _components(pred, target, fx, logits_w):
    adv = L.adversarial_g_loss(T.reshape(T.sum_all(pred * logits_w), (1, 1)))
    return adv, L.recon_loss(pred, target), L.perceptual_loss(pred, target, fx), L.hsv_loss(pred, target)


def test_total_gradient_is_weighted_sum_and_linear_in_lambda():
    rng = np.random.default_rng(7)
    x = rng.uniform(0.1, 0.9, size=(1, 3, 8, 8))
    target = t64(rng.uniform(0.1, 0.9, size=(1, 3, 8, 8)))
    fx = L.FeatureExtractor()
    lw = t64(rng.normal(size=(1, 3, 8, 8)) * 0.01)
    w = L.LossWeights(3.0, 2.0, 5.0)

    grads = []
    for k in range(4):
        p = t64(x, grad=True)
        T.backward(_components(p, target, fx, lw)[k])
        grads.append(p.grad)
    p = t64(x, grad=True)
    total, br = L.generator_total_loss(*_components(p, target, fx, lw), w)
    T.backward(total)
    combo = grads[0] + 3.0 * grads[1] + 2.0 * grads[2] + 5.0 * grads[3]
    assert rel_err(p.grad, combo) < 1e-9

    p2 = t64(x, grad=True)
    total2, br2 = L.generator_total_loss(*_components(p2, target, fx, lw), L.LossWeights(3.0, 2.0, 10.0))
    T.backward(total2)
    assert total2.item() - total.item() == pytest.approx(5.0 * br.hsv, rel=1e-9)
    assert rel_err(p2.grad - p.grad, 5.0 * grads[3]) < 1e-9


def test_total_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    while True:
        x = rng.uniform(0.1, 0.9, size=(1, 3, 8, 8))
        srt = np.sort(x, axis=1)
        if np.min(np.diff(srt, axis=1)) > 5e-3:
            break
    target = t64(rng.uniform(0.1, 0.9, size=(1, 3, 8, 8)) * 0.5 + 0.25)
    fx = L.FeatureExtractor()
    lw = t64(rng.normal(size=(1, 3, 8, 8)) * 0.01)
    w = L.LossWeights(100, 1, 10)

    def f(arr):
        return L.generator_total_loss(*_components(t64(arr), target, fx, lw), w)[0].item()

    p = t64(x, grad=True)
    T.backward(L.generator_total_loss(*_components(p, target, fx, lw), w)[0])
    # L1 has kinks at pred == target; skip coordinates within the FD step
    num = numeric_grad(lambda: f(x), x, h=1e-6)
    ok = np.abs(x - target.data) > 1e-4
    assert rel_err(p.grad[ok], num[ok]) < 1e-3


def test_generator_end_to_end_loss_gradient():
    with T.precision(np.float64):
        g = N.build_generator(N.GeneratorConfig(num_blocks=2, base_channels=4), seed=0)
        rng = np.random.default_rng(3)
        comp = t64(rng.uniform(size=(2, 3, 8, 8)))
        real = t64(rng.uniform(size=(2, 3, 8, 8)))
        pred = N.generator_forward(g, comp)
        loss = L.hsv_loss(pred, real) + L.recon_loss(pred, real)
        T.backward(loss)
        assert all(np.any(p.grad) for p in g.params.values())
