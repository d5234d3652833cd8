import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ptrag import autodiff as ad
from ptrag.autodiff import Tensor
from ptrag.selector import (EXCLUDE, INCLUDE, gumbel_from_uniform, gumbel_softmax_select,
                            sample_gumbel)

EULER_GAMMA = 0.5772156649015329


def _soft_path(logits, noise, tau):
    """The relaxed include probability, built from the same ops as the selector."""
    perturbed = ad.add(logits, noise)
    return ad.index(ad.softmax(ad.scale(perturbed, 1.0 / tau)), (Ellipsis, INCLUDE))


class TestGumbel:
    def test_fixed_point(self):
        assert gumbel_from_uniform(1 / math.e) == pytest.approx(0.0, abs=1e-15)

    def test_right_tail(self):
        g = gumbel_from_uniform([1e-6, 0.5, 1 - 1e-6])
        assert g[0] < g[1] < g[2]
        assert g[2] > 10

    def test_clamped_endpoints_finite(self):
        assert np.all(np.isfinite(gumbel_from_uniform([0.0, 1.0])))

    def test_mean_is_euler_gamma(self):
        g = sample_gumbel((1_000_000,), np.random.default_rng(0))
        assert abs(g.mean() - EULER_GAMMA) < 0.01


class TestSelect:
    def test_saturated_include(self):
        logits = np.zeros((1, 2))
        logits[0, INCLUDE], logits[0, EXCLUDE] = 10.0, -10.0
        mask = gumbel_softmax_select(logits, 0.5, deterministic_noise=True)
        assert mask.hard[0] == 1.0
        assert mask.soft[0] == pytest.approx(1.0, abs=1e-15)

    def test_tie_goes_to_include(self):
        mask = gumbel_softmax_select(np.zeros((3, 2)), 1.0, deterministic_noise=True)
        np.testing.assert_array_equal(mask.soft, 0.5)
        np.testing.assert_array_equal(mask.hard, 1.0)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_tau_must_be_positive(self, tau):
        with pytest.raises(ValueError):
            gumbel_softmax_select(np.zeros((1, 2)), tau, deterministic_noise=True)

    def test_requires_rng_for_fresh_noise(self):
        with pytest.raises(ValueError):
            gumbel_softmax_select(np.zeros((1, 2)), 0.5)

    def test_non_finite_logits(self):
        with pytest.raises(ValueError):
            gumbel_softmax_select(np.array([[np.nan, 0.0]]), 0.5, deterministic_noise=True)

    @given(st.integers(0, 10_000), st.floats(0.05, 5.0))
    def test_mask_invariants(self, seed, tau):
        rng = np.random.default_rng(seed)
        logits = rng.normal(scale=3.0, size=(4, 5, 2))
        mask = gumbel_softmax_select(logits, tau, rng)
        assert set(np.unique(mask.hard)) <= {0.0, 1.0}
        assert np.all((mask.soft >= 0) & (mask.soft <= 1))
        perturbed = logits + mask.noise
        np.testing.assert_array_equal(mask.hard, perturbed[..., INCLUDE] >= perturbed[..., EXCLUDE])
        z = perturbed / tau
        probs = np.exp(z - z.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(mask.soft, probs[..., INCLUDE], atol=1e-12)
        assert mask.weights.data.tobytes() == mask.hard.tobytes()

    def test_lower_tau_approaches_hard(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(6, 8, 2))
        noise = sample_gumbel(logits.shape, rng)
        gaps = [np.abs(gumbel_softmax_select(logits, t, noise=noise).soft
                       - gumbel_softmax_select(logits, t, noise=noise).hard).max()
                for t in (1.0, 0.5, 0.1, 0.01)]
        assert all(a >= b for a, b in zip(gaps, gaps[1:]))

    @pytest.mark.parametrize("a,b", [(0.0, 0.0), (1.0, -0.5), (-2.0, 0.3)])
    def test_include_rate_is_logistic(self, a, b):
        logits = np.tile([b, a], (100_000, 1))
        mask = gumbel_softmax_select(logits, 0.5, np.random.default_rng(7))
        assert abs(mask.hard.mean() - 1 / (1 + math.exp(-(a - b)))) < 0.01


class TestStraightThroughContract:
    def test_soft_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 4, 2))
        noise = sample_gumbel(logits.shape, rng)
        err = ad.gradcheck(lambda l: ad.total(_soft_path(l, noise, 0.5)), [logits])
        assert err <= 1e-5

    def test_linear_downstream_equals_soft_network(self):
        rng = np.random.default_rng(1)
        logits_np = rng.normal(size=(5, 6, 2))
        noise = sample_gumbel(logits_np.shape, rng)
        c = rng.normal(size=(5, 6))

        st_logits = Tensor(logits_np, requires_grad=True)
        mask = gumbel_softmax_select(st_logits, 0.5, noise=noise)
        st_loss = ad.total(ad.mul(mask.weights, c))
        ad.backward(st_loss)

        soft_logits = Tensor(logits_np, requires_grad=True)
        soft_loss = ad.total(ad.mul(_soft_path(soft_logits, noise, 0.5), c))
        ad.backward(soft_loss)

        assert st_logits.grad.tobytes() == soft_logits.grad.tobytes()
        assert st_loss.item() != soft_loss.item()

    def test_nonlinear_downstream_routes_upstream_gradient_to_soft(self):
        rng = np.random.default_rng(2)
        logits_np = rng.normal(size=(4, 5, 2))
        noise = sample_gumbel(logits_np.shape, rng)
        ctx = rng.normal(size=(5, 3))

        def downstream(w):
            return ad.mean(ad.exp(ad.matmul(w, ctx)))

        st_logits = Tensor(logits_np, requires_grad=True)
        mask = gumbel_softmax_select(st_logits, 0.5, noise=noise)
        ad.backward(downstream(mask.weights))

        # upstream gradient at the hard value, then pushed through the soft path only
        w = Tensor(mask.hard, requires_grad=True)
        ad.backward(downstream(w))
        soft_logits = Tensor(logits_np, requires_grad=True)
        ad.backward(ad.total(ad.mul(_soft_path(soft_logits, noise, 0.5), w.grad)))

        assert st_logits.grad.tobytes() == soft_logits.grad.tobytes()
