import math

import numpy as np
import pytest

from faegen import layers
from faegen.linalg import ShapeError

FD_STEP = 1e-5
FD_TOL = 1e-6


def central_diff(f, arr, i, h=FD_STEP):
    flat = arr.reshape(-1)
    orig = flat[i]
    flat[i] = orig + h
    plus = f()
    flat[i] = orig - h
    minus = f()
    flat[i] = orig
    return (plus - minus) / (2.0 * h)


def assert_fd_match(f, arr, grad, tol=FD_TOL):
    """Every entry of grad must agree with central differences of f."""
    flat_grad = np.asarray(grad).reshape(-1)
    for i in range(flat_grad.size):
        fd = central_diff(f, arr, i)
        rel = abs(flat_grad[i] - fd) / max(1e-8, abs(flat_grad[i]) + abs(fd))
        assert rel < tol, f"entry {i}: analytic {flat_grad[i]} vs fd {fd}"


def make_lstm_params(rng, hidden, input_dim, scale=0.4):
    shape = (hidden, input_dim + hidden)
    return layers.LstmCellParams(
        w_i=rng.normal(scale=scale, size=shape),
        w_f=rng.normal(scale=scale, size=shape),
        w_o=rng.normal(scale=scale, size=shape),
        w_g=rng.normal(scale=scale, size=shape),
        b_i=rng.normal(scale=scale, size=hidden),
        b_f=rng.normal(scale=scale, size=hidden),
        b_o=rng.normal(scale=scale, size=hidden),
        b_g=rng.normal(scale=scale, size=hidden),
        input_dim=input_dim,
        hidden_dim=hidden,
    )


class TestFactoredLinear:
    def test_one_hot_sigma_selects_one_factor(self):
        u = np.eye(3)
        v = np.eye(3)
        sigma = np.diag([0.0, 1.0, 0.0])
        h = np.array([1.5, -2.5, 3.5])
        out, _ = layers.factored_linear_fwd(u, sigma, v, h)
        assert np.array_equal(out, [0.0, -2.5, 0.0])

    def test_identity_sigma_is_two_layer_map(self):
        rng = np.random.default_rng(0)
        u = rng.normal(size=(4, 3))
        v = rng.normal(size=(3, 5))
        h = rng.normal(size=5)
        out, _ = layers.factored_linear_fwd(u, np.eye(3), v, h)
        assert np.max(np.abs(out - u @ (v @ h))) <= 1e-15

    def test_matches_triple_product_oracle(self):
        rng = np.random.default_rng(1)
        u = rng.normal(size=(5, 3))
        sigma = rng.normal(size=(3, 3))
        v = rng.normal(size=(3, 4))
        h = rng.normal(size=4)
        out, _ = layers.factored_linear_fwd(u, sigma, v, h)
        oracle = u @ sigma @ v @ h
        assert np.max(np.abs(out - oracle)) < 1e-12

    def test_rank_one_behavior_with_one_hot_sigma(self):
        rng = np.random.default_rng(2)
        u = rng.normal(size=(4, 3))
        v = rng.normal(size=(3, 6))
        h = rng.normal(size=6)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            out, _ = layers.factored_linear_fwd(u, np.diag(e), v, h)
            oracle = u[:, i] * (v @ h)[i]
            assert np.array_equal(out, oracle)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            layers.factored_linear_fwd(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((3, 4)), np.zeros(5))
        with pytest.raises(ShapeError):
            layers.factored_linear_fwd(np.zeros((2, 2)), np.zeros((3, 3)), np.zeros((3, 4)), np.zeros(4))

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(3)
        u = rng.normal(size=(4, 3))
        sigma = rng.normal(size=(3, 3))
        v = rng.normal(size=(3, 5))
        h = rng.normal(size=5)
        _, cache = layers.factored_linear_fwd(u, sigma, v, h)
        du, ds, dv, dh = layers.factored_linear_bwd(cache, np.zeros(4))
        for g in (du, ds, dv, dh):
            assert np.all(g == 0.0)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(4)
        u = rng.normal(size=(5, 3))
        sigma = rng.normal(size=(3, 3))
        v = rng.normal(size=(3, 4))
        h = rng.normal(size=4)
        d_out = rng.normal(size=5)
        _, cache = layers.factored_linear_fwd(u, sigma, v, h)
        du, ds, dv, dh = layers.factored_linear_bwd(cache, d_out)

        def loss():
            out, _ = layers.factored_linear_fwd(u, sigma, v, h)
            return float(d_out @ out)

        assert_fd_match(loss, u, du)
        assert_fd_match(loss, sigma, ds)
        assert_fd_match(loss, v, dv)
        assert_fd_match(loss, h, dh)

    def test_diagonal_mode_zeroes_off_diagonal(self):
        rng = np.random.default_rng(5)
        u = rng.normal(size=(4, 3))
        sigma = np.diag(rng.normal(size=3))
        v = rng.normal(size=(3, 4))
        h = rng.normal(size=4)
        _, cache = layers.factored_linear_fwd(u, sigma, v, h)
        _, ds, _, _ = layers.factored_linear_bwd(cache, rng.normal(size=4), sigma_diagonal=True)
        off_diag = ds - np.diag(np.diag(ds))
        assert np.all(off_diag == 0.0)


class TestAttention:
    def test_single_view_passthrough(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(4, 4))
        view = rng.normal(size=4)
        alpha, pooled, _ = layers.attention_fwd(rng.normal(size=4), w, w, [view], np.zeros(4))
        assert np.array_equal(alpha, [1.0])
        assert np.array_equal(pooled, view)

    def test_two_identical_views_split_evenly(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(4, 4))
        view = rng.normal(size=4)
        alpha, pooled, _ = layers.attention_fwd(
            rng.normal(size=4), w, w, [view, view], rng.normal(size=4)
        )
        assert np.allclose(alpha, [0.5, 0.5], atol=1e-15)
        assert np.max(np.abs(pooled - view)) <= 1e-15

    def test_pooled_matches_weighted_sum_oracle(self):
        rng = np.random.default_rng(2)
        views = [rng.normal(size=5) for _ in range(3)]
        alpha, pooled, _ = layers.attention_fwd(
            rng.normal(size=5), rng.normal(size=(5, 5)), rng.normal(size=(5, 5)),
            views, rng.normal(size=5),
        )
        oracle = sum(alpha[j] * views[j] for j in range(3))
        assert np.max(np.abs(pooled - oracle)) < 1e-12

    def test_alpha_on_simplex_and_pooled_in_hull(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            m = rng.integers(1, 6)
            views = [rng.normal(size=4) for _ in range(m)]
            alpha, pooled, _ = layers.attention_fwd(
                rng.normal(size=4), rng.normal(size=(4, 4)), rng.normal(size=(4, 4)),
                views, rng.normal(size=4),
            )
            assert np.all(alpha > 0.0)
            assert abs(alpha.sum() - 1.0) <= 1e-12
            stacked = np.array(views)
            assert np.all(pooled >= stacked.min(axis=0) - 1e-12)
            assert np.all(pooled <= stacked.max(axis=0) + 1e-12)

    def test_empty_views_rejected(self):
        with pytest.raises(ValueError):
            layers.attention_fwd(np.zeros(3), np.zeros((3, 3)), np.zeros((3, 3)), [], np.zeros(3))

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(4)
        views = [rng.normal(size=3) for _ in range(2)]
        _, _, cache = layers.attention_fwd(
            rng.normal(size=3), rng.normal(size=(3, 3)), rng.normal(size=(3, 3)),
            views, rng.normal(size=3),
        )
        ds, dv, dh, dviews, dhp = layers.attention_bwd(cache, np.zeros(2), np.zeros(3))
        assert np.all(ds == 0.0) and np.all(dv == 0.0) and np.all(dh == 0.0)
        assert all(np.all(g == 0.0) for g in dviews)
        assert np.all(dhp == 0.0)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(5)
        w_score = rng.normal(scale=0.6, size=4)
        w_view = rng.normal(scale=0.6, size=(4, 4))
        w_hidden = rng.normal(scale=0.6, size=(4, 4))
        views = [rng.normal(size=4) for _ in range(2)]
        h_prev = rng.normal(size=4)
        d_alpha = rng.normal(size=2)
        d_pooled = rng.normal(size=4)

        def loss():
            alpha, pooled, _ = layers.attention_fwd(w_score, w_view, w_hidden, views, h_prev)
            return float(d_alpha @ alpha + d_pooled @ pooled)

        _, _, cache = layers.attention_fwd(w_score, w_view, w_hidden, views, h_prev)
        ds, dv, dh, dviews, dhp = layers.attention_bwd(cache, d_alpha, d_pooled)
        assert_fd_match(loss, w_score, ds)
        assert_fd_match(loss, w_view, dv)
        assert_fd_match(loss, w_hidden, dh)
        for j in range(2):
            assert_fd_match(loss, views[j], dviews[j])
        assert_fd_match(loss, h_prev, dhp)

    def test_gradient_locality(self):
        # a vector never passed as a view gets no gradient path at all:
        # gradients for the included views are unchanged by its presence
        rng = np.random.default_rng(6)
        w_score = rng.normal(size=3)
        w_view = rng.normal(size=(3, 3))
        w_hidden = rng.normal(size=(3, 3))
        views = [rng.normal(size=3) for _ in range(2)]
        h_prev = rng.normal(size=3)
        _ = rng.normal(size=3)  # unattended vector, excluded from views
        _, _, cache = layers.attention_fwd(w_score, w_view, w_hidden, views, h_prev)
        first = layers.attention_bwd(cache, None, np.ones(3))
        _, _, cache2 = layers.attention_fwd(w_score, w_view, w_hidden, views, h_prev)
        second = layers.attention_bwd(cache2, None, np.ones(3))
        assert np.array_equal(first[0], second[0])
        assert np.array_equal(first[1], second[1])


class TestLstmCell:
    def test_all_zero(self):
        rng = np.random.default_rng(0)
        p = make_lstm_params(rng, 3, 2, scale=0.0)
        h, c, _ = layers.lstm_cell_fwd(p, np.zeros(2), np.zeros(3), np.zeros(3))
        assert np.all(h == 0.0) and np.all(c == 0.0)

    def test_zero_params_nonzero_cell(self):
        rng = np.random.default_rng(1)
        p = make_lstm_params(rng, 3, 2, scale=0.0)
        c_prev = np.array([1.0, -2.0, 0.5])
        h, c, _ = layers.lstm_cell_fwd(p, np.zeros(2), np.zeros(3), c_prev)
        assert np.max(np.abs(c - 0.5 * c_prev)) <= 1e-15
        assert np.max(np.abs(h - 0.5 * np.tanh(0.5 * c_prev))) <= 1e-15

    def test_matches_gate_by_gate_oracle(self):
        rng = np.random.default_rng(2)
        p = make_lstm_params(rng, 4, 3)
        x = rng.normal(size=3)
        h_prev = rng.normal(size=4)
        c_prev = rng.normal(size=4)
        h, c, _ = layers.lstm_cell_fwd(p, x, h_prev, c_prev)
        # independently coded oracle
        z = np.concatenate([x, h_prev])
        sig = lambda t: 1.0 / (1.0 + np.exp(-t))
        i = sig(p.w_i @ z + p.b_i)
        f = sig(p.w_f @ z + p.b_f)
        o = sig(p.w_o @ z + p.b_o)
        g = np.tanh(p.w_g @ z + p.b_g)
        c_oracle = f * c_prev + i * g
        h_oracle = o * np.tanh(c_oracle)
        assert np.max(np.abs(c - c_oracle)) < 1e-12
        assert np.max(np.abs(h - h_oracle)) < 1e-12

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(3)
        p = make_lstm_params(rng, 3, 2)
        _, _, cache = layers.lstm_cell_fwd(p, rng.normal(size=2), rng.normal(size=3), rng.normal(size=3))
        grads, dx, dhp, dcp = layers.lstm_cell_bwd(cache, np.zeros(3), np.zeros(3))
        for gate in "ifog":
            assert np.all(getattr(grads, f"w_{gate}") == 0.0)
            assert np.all(getattr(grads, f"b_{gate}") == 0.0)
        assert np.all(dx == 0.0) and np.all(dhp == 0.0) and np.all(dcp == 0.0)

    def test_c_prev_gradient_with_zero_params(self):
        rng = np.random.default_rng(4)
        p = make_lstm_params(rng, 3, 2, scale=0.0)
        c_prev = rng.normal(size=3)
        _, _, cache = layers.lstm_cell_fwd(p, np.zeros(2), np.zeros(3), c_prev)
        dc = rng.normal(size=3)
        _, _, _, d_c_prev = layers.lstm_cell_bwd(cache, np.zeros(3), dc)
        assert np.array_equal(d_c_prev, 0.5 * dc)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(5)
        p = make_lstm_params(rng, 3, 2)
        x = rng.normal(size=2)
        h_prev = rng.normal(size=3)
        c_prev = rng.normal(size=3)
        dh = rng.normal(size=3)
        dc = rng.normal(size=3)

        def loss():
            h, c, _ = layers.lstm_cell_fwd(p, x, h_prev, c_prev)
            return float(dh @ h + dc @ c)

        _, _, cache = layers.lstm_cell_fwd(p, x, h_prev, c_prev)
        grads, dx, dhp, dcp = layers.lstm_cell_bwd(cache, dh, dc)
        for gate in "ifog":
            assert_fd_match(loss, getattr(p, f"w_{gate}"), getattr(grads, f"w_{gate}"))
            assert_fd_match(loss, getattr(p, f"b_{gate}"), getattr(grads, f"b_{gate}"))
        assert_fd_match(loss, x, dx)
        assert_fd_match(loss, h_prev, dhp)
        assert_fd_match(loss, c_prev, dcp)

    def test_shape_errors(self):
        rng = np.random.default_rng(6)
        p = make_lstm_params(rng, 3, 2)
        with pytest.raises(ShapeError):
            layers.lstm_cell_fwd(p, np.zeros(99), np.zeros(3), np.zeros(3))


class TestCombineOutput:
    def test_all_zero_params(self):
        h_s, logits, _ = layers.combine_output_fwd(
            np.zeros((3, 6)), np.zeros(3), np.zeros((5, 3)), np.zeros(5),
            np.ones(3), np.ones(3),
        )
        assert np.all(h_s == 0.0) and np.all(logits == 0.0)

    def test_projection_case(self):
        h_fwd = np.array([0.3, -0.7, 1.1])
        merge_w = np.hstack([np.eye(3), np.zeros((3, 3))])
        h_s, _, _ = layers.combine_output_fwd(
            merge_w, np.zeros(3), np.zeros((4, 3)), np.zeros(4), h_fwd, np.ones(3)
        )
        assert np.max(np.abs(h_s - np.tanh(h_fwd))) <= 1e-15

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(0)
        merge_w = rng.normal(size=(3, 6))
        merge_b = rng.normal(size=3)
        vocab_w = rng.normal(size=(5, 3))
        vocab_b = rng.normal(size=5)
        h_fwd = rng.normal(size=3)
        h_bwd = rng.normal(size=3)
        h_s, logits, _ = layers.combine_output_fwd(merge_w, merge_b, vocab_w, vocab_b, h_fwd, h_bwd)
        h_s_oracle = np.tanh(merge_w @ np.concatenate([h_fwd, h_bwd]) + merge_b)
        logits_oracle = vocab_w @ h_s_oracle + vocab_b
        assert np.max(np.abs(h_s - h_s_oracle)) < 1e-12
        assert np.max(np.abs(logits - logits_oracle)) < 1e-12

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(1)
        merge_w = rng.normal(scale=0.5, size=(3, 6))
        merge_b = rng.normal(scale=0.5, size=3)
        vocab_w = rng.normal(scale=0.5, size=(5, 3))
        vocab_b = rng.normal(scale=0.5, size=5)
        h_fwd = rng.normal(size=3)
        h_bwd = rng.normal(size=3)
        d_h_s = rng.normal(size=3)
        d_logits = rng.normal(size=5)

        def loss():
            h_s, logits, _ = layers.combine_output_fwd(
                merge_w, merge_b, vocab_w, vocab_b, h_fwd, h_bwd
            )
            return float(d_h_s @ h_s + d_logits @ logits)

        _, _, cache = layers.combine_output_fwd(merge_w, merge_b, vocab_w, vocab_b, h_fwd, h_bwd)
        dmw, dmb, dvw, dvb, dhf, dhb = layers.combine_output_bwd(cache, d_h_s, d_logits)
        assert_fd_match(loss, merge_w, dmw)
        assert_fd_match(loss, merge_b, dmb)
        assert_fd_match(loss, vocab_w, dvw)
        assert_fd_match(loss, vocab_b, dvb)
        assert_fd_match(loss, h_fwd, dhf)
        assert_fd_match(loss, h_bwd, dhb)


class TestNllLoss:
    def test_uniform_logits(self):
        loss, _ = layers.nll_loss(np.zeros(4), 2)
        assert loss == pytest.approx(math.log(4.0), abs=1e-12)

    def test_peaked_logits_tiny_loss(self):
        loss, _ = layers.nll_loss(np.array([10.0, -10.0]), 0)
        assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
        assert loss == pytest.approx(2.06e-9, rel=1e-2)

    def test_gradient_sums_to_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            logits = rng.normal(scale=5.0, size=rng.integers(2, 10))
            _, d = layers.nll_loss(logits, int(rng.integers(0, logits.size)))
            assert abs(d.sum()) <= 1e-12

    def test_gradient_is_softmax_minus_onehot(self):
        logits = np.array([1.0, 2.0, 3.0])
        _, d = layers.nll_loss(logits, 1)
        e = np.exp(logits - logits.max())
        p = e / e.sum()
        p[1] -= 1.0
        assert np.max(np.abs(d - p)) < 1e-12

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            logits = rng.normal(scale=3.0, size=6)
            loss, _ = layers.nll_loss(logits, int(rng.integers(0, 6)))
            assert loss >= 0.0

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            layers.nll_loss(np.zeros(3), 3)
