import math

import numpy as np
import pytest

from reslab import lossgrad, model
from reslab.lossgrad import (batch_loss_grad, batch_output_grad, finite_diff_oracle,
                             output_gradient, perturbation_flips, xent, xent_deriv)
from reslab.model import forward, forward_batch, init_gaussian
from reslab.numkit import RngState


def unit(v):
    return v / np.linalg.norm(v)


def net(seed=0, d=4, L=6, m=16, m_last=16, arch="residual"):
    return init_gaussian(RngState(seed).substream("init"), d, L, m, m_last,
                         0.1 / L, arch)


class TestXent:
    def test_values_at_zero(self):
        assert xent(0.0) == pytest.approx(math.log(2.0))
        assert xent_deriv(0.0) == pytest.approx(-0.5)

    def test_overflow_safe_tails(self):
        assert xent(-1000.0) == pytest.approx(1000.0)
        assert xent(1000.0) == 0.0
        assert xent_deriv(1000.0) == pytest.approx(0.0, abs=1e-300)
        assert xent_deriv(-1000.0) == pytest.approx(-1.0)

    def test_deriv_matches_finite_difference(self):
        z = np.linspace(-30, 30, 301)
        h = 1e-6
        fd = (xent(z + h) - xent(z - h)) / (2 * h)
        np.testing.assert_allclose(xent_deriv(z), fd, atol=1e-7)

    def test_deriv_range(self):
        z = np.linspace(-35, 35, 1000)
        d = xent_deriv(z)
        assert np.all(d < 0) and np.all(d > -1)

    def test_loss_floor_on_mistakes(self):
        # per-sample loss is at least log 2 whenever the margin is nonpositive
        z = np.linspace(-5, 0, 50)
        assert np.all(xent(z) >= math.log(2.0) - 1e-15)


class TestOutputGradient:
    def test_matches_finite_differences_on_flip_free_entries(self):
        h = 1e-4
        worst = 0.0
        for seed in range(3):
            p = net(seed)
            x = unit(RngState(100 + seed).standard_normal(4))
            t = forward(p, x)
            ernd = RngState(200 + seed)
            for l in range(1, p.depth + 2):
                g = output_gradient(p, t, l)
                for _ in range(4):
                    i = int(ernd.integers(0, g.shape[0]))
                    j = int(ernd.integers(0, g.shape[1]))
                    if perturbation_flips(p, x, l, i, j, h):
                        continue
                    fd = finite_diff_oracle(p, x, l, i, j, h)
                    denom = max(abs(fd), abs(g[i, j]), 1e-12)
                    worst = max(worst, abs(fd - g[i, j]) / denom)
        assert worst <= 1e-5

    def test_flip_free_entries_are_exactly_linear(self):
        # with frozen patterns the output is linear in any single weight
        # entry (each path uses a layer once), so flip-free central
        # differences are exact up to roundoff at any step size
        p = net(1)
        x = unit(RngState(7).standard_normal(4))
        t = forward(p, x)
        g = output_gradient(p, t, 2)
        checked = 0
        for i in range(0, 16, 5):
            for j in range(0, 16, 5):
                if perturbation_flips(p, x, 2, i, j, 1e-2):
                    continue
                for h in (1e-2, 1e-3):
                    fd = finite_diff_oracle(p, x, 2, i, j, h)
                    assert fd == pytest.approx(g[i, j], abs=1e-9)
                checked += 1
        assert checked >= 3

    def test_directional_truncation_error_decays_quadratically(self):
        # along a full-weight direction the output is a depth-degree
        # polynomial, so directional central differences show the O(h^2)
        # truncation decay that single entries (linear) cannot
        p = net(1)
        x = unit(RngState(7).standard_normal(4))
        direction = [RngState(70 + k).standard_normal(w.shape)
                     for k, w in enumerate(p.weights)]
        t = forward(p, x)
        grad_dot_d = sum(float(np.sum(output_gradient(p, t, l) * direction[l - 1]))
                         for l in range(1, p.depth + 2))

        def f_along(tval):
            moved = p.with_weights(w + tval * d for w, d in zip(p.weights, direction))
            return forward(moved, x).output

        base = forward(p, x)
        errs = []
        for h in (1e-3, 1e-4):
            for s in (+h, -h):
                moved = p.with_weights(w + s * d for w, d in zip(p.weights, direction))
                tr = forward(moved, x)
                for l in range(1, p.depth + 2):
                    if not np.array_equal(tr.pattern(l), base.pattern(l)):
                        pytest.skip("direction crosses a kink at this seed")
            errs.append(abs((f_along(h) - f_along(-h)) / (2 * h) - grad_dot_d))
        assert errs[0] > 1e-9  # curvature visible at the larger step
        assert errs[1] <= errs[0] / 20

    def test_zero_pattern_gives_zero_gradient(self):
        p = net(2)
        x = unit(RngState(8).standard_normal(4))
        t = forward(p, x)
        dead = [w.copy() for w in p.weights]
        dead[2] = -np.abs(dead[2])  # all layer-3 preactivations nonpositive
        p2 = p.with_weights(dead)
        t2 = forward(p2, x)
        assert not np.any(t2.pattern(3))
        assert np.all(output_gradient(p2, t2, 3) == 0.0)

    def test_theta_linearity_with_frozen_trace(self):
        # with activations and patterns frozen, doubling theta exactly
        # doubles the layer-L gradient (its backward row is theta-free) and
        # leaves the output layer unchanged; the leading scale factor is
        # theta^{1(2<=l<=L)} at every layer
        L = 6
        base = net(3, L=L)
        doubled = model.NetworkParams(base.weights, 2 * base.theta, base.v, base.arch)
        x = unit(RngState(9).standard_normal(4))
        bt = forward_batch(base, x[None, :])
        w = np.array([1.0])
        g1 = batch_output_grad(base, bt, w).layers
        g2 = batch_output_grad(doubled, bt, w).layers
        np.testing.assert_allclose(g2[L - 1], 2.0 * g1[L - 1], rtol=1e-12)
        np.testing.assert_allclose(g2[L], g1[L], rtol=1e-12)
        for l in range(1, L + 2):
            expected = base.theta if 2 <= l <= L else 1.0
            assert base.layer_scale(l) == expected
            assert doubled.layer_scale(l) == (2 * expected if 2 <= l <= L else 1.0)

    def test_rank_one_norm_identity(self):
        # ||outer(a, b)||_F == ||a|| * ||b|| realized by the analytic gradient
        p = net(4)
        x = unit(RngState(10).standard_normal(4))
        t = forward(p, x)
        bt = forward_batch(p, x[None, :])
        rows = lossgrad._backward_rows(p, bt)
        for l in range(1, p.depth + 2):
            g = output_gradient(p, t, l)
            a = t.activation(l - 1)
            b = (rows[l] * bt.pattern(l))[0] * p.layer_scale(l)
            assert np.linalg.norm(g) == pytest.approx(
                np.linalg.norm(a) * np.linalg.norm(b), rel=1e-12)

    def test_layer_index_validated(self):
        p = net(5)
        t = forward(p, unit(np.ones(4)))
        with pytest.raises(IndexError):
            output_gradient(p, t, 0)
        with pytest.raises(IndexError):
            output_gradient(p, t, p.depth + 2)


class TestBatchLossGrad:
    def make_data(self, p, n, seed=0):
        xs = RngState(seed).standard_normal((n, p.d))
        xs /= np.linalg.norm(xs, axis=1, keepdims=True)
        ys = np.where(RngState(seed + 1).uniform(shape=n) < 0.5, 1.0, -1.0)
        return xs, ys

    def test_single_sample_composition(self):
        p = net(6)
        xs, ys = self.make_data(p, 1, seed=20)
        loss, surr, grads = batch_loss_grad(p, (xs, ys))
        t = forward(p, xs[0])
        c = xent_deriv(ys[0] * t.output) * ys[0]
        for l in range(1, p.depth + 2):
            np.testing.assert_allclose(grads.layers[l - 1],
                                       c * output_gradient(p, t, l), rtol=1e-12)

    def test_batch_is_mean_of_per_sample(self):
        p = net(7)
        xs, ys = self.make_data(p, 8, seed=30)
        _, _, grads = batch_loss_grad(p, (xs, ys))
        manual = [np.zeros_like(w) for w in p.weights]
        for i in range(8):
            t = forward(p, xs[i])
            c = xent_deriv(ys[i] * t.output) * ys[i] / 8
            for l in range(1, p.depth + 2):
                manual[l - 1] += c * output_gradient(p, t, l)
        for a, b in zip(manual, grads.layers):
            np.testing.assert_allclose(a, b, atol=1e-14)

    def test_duplication_invariance(self):
        p = net(8)
        xs, ys = self.make_data(p, 5, seed=40)
        l1, s1, g1 = batch_loss_grad(p, (xs, ys))
        l2, s2, g2 = batch_loss_grad(p, (np.vstack([xs, xs]), np.hstack([ys, ys])))
        assert l1.total == pytest.approx(l2.total, rel=1e-12)
        assert s1.empirical == pytest.approx(s2.empirical, rel=1e-12)
        for a, b in zip(g1.layers, g2.layers):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-15)

    def test_surrogate_near_half_at_small_outputs(self):
        # shrink the last layer so outputs are tiny; -l'(0) = 1/2
        p = net(9, m=64, m_last=64)
        scaled = [w.copy() for w in p.weights]
        scaled[-1] *= 1e-6
        p = p.with_weights(scaled)
        xs, ys = self.make_data(p, 50, seed=50)
        _, surr, _ = batch_loss_grad(p, (xs, ys))
        assert surr.empirical == pytest.approx(0.5, abs=1e-4)

    def test_surrogate_strictly_inside_unit_interval(self):
        p = net(10)
        xs, ys = self.make_data(p, 16, seed=60)
        _, surr, _ = batch_loss_grad(p, (xs, ys))
        assert 0.0 < surr.empirical < 1.0

    def test_label_validation(self):
        p = net(11)
        xs, _ = self.make_data(p, 3, seed=70)
        with pytest.raises(lossgrad.DataError):
            batch_loss_grad(p, (xs, np.array([1.0, 0.5, -1.0])))
        with pytest.raises(lossgrad.DataError):
            batch_loss_grad(p, (xs[:0], np.array([])))

    def test_loss_total_is_mean(self):
        p = net(12)
        xs, ys = self.make_data(p, 7, seed=80)
        loss, _, _ = batch_loss_grad(p, (xs, ys))
        assert loss.total == pytest.approx(float(np.mean(loss.per_sample)), rel=1e-12)

    def test_weighted_output_grad_factors_match_dense(self):
        p = net(13)
        xs, ys = self.make_data(p, 6, seed=90)
        bt = forward_batch(p, xs)
        w = RngState(91).standard_normal(6)
        grads = batch_output_grad(p, bt, w)
        for (a, b), dense in zip(grads.factors, grads.layers):
            np.testing.assert_allclose(a.T @ b, dense, atol=1e-13)

    def test_finite_diff_oracle_zero_net(self):
        p = net(14)
        p = p.with_weights(np.zeros_like(w) for w in p.weights)
        assert finite_diff_oracle(p, unit(np.ones(4)), 2, 0, 0, 1e-4) == 0.0

    def test_finite_diff_step_validation(self):
        p = net(15)
        with pytest.raises(ValueError):
            finite_diff_oracle(p, unit(np.ones(4)), 1, 0, 0, 0.0)
