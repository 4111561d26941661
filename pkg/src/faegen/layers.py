"""Differentiable building blocks: explicit forward passes with caches and
exact backward passes.

Every ``*_fwd`` returns a cache holding exactly the activations its
``*_bwd`` partner needs; backward functions return fresh gradient arrays
(callers accumulate them into parameter grad buffers).  All gradients are
verified against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ShapeError, sigmoid_ew, softmax, tanh_ew


@dataclass
class ParamTensor:
    """A named learnable array with an accumulated gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray

    @classmethod
    def create(cls, name: str, value: np.ndarray) -> "ParamTensor":
        value = np.asarray(value, dtype=np.float64)
        return cls(name=name, value=value, grad=np.zeros_like(value))

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


@dataclass
class LstmCellParams:
    """Gate weights over the [input ; recurrent] concatenation.

    The four gate matrices share shape (hidden, input_dim + hidden); the
    four biases have length hidden.  Gate order: input, forget, output,
    cell candidate.
    """

    w_i: np.ndarray
    w_f: np.ndarray
    w_o: np.ndarray
    w_g: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_g: np.ndarray
    input_dim: int
    hidden_dim: int


@dataclass
class LstmCellGrads:
    w_i: np.ndarray
    w_f: np.ndarray
    w_o: np.ndarray
    w_g: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_g: np.ndarray


# ---------------------------------------------------------------------------
# Factored linear transform: out = U . Sigma . V . h
# ---------------------------------------------------------------------------


@dataclass
class FactoredLinearCache:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    h: np.ndarray
    vh: np.ndarray
    svh: np.ndarray


def factored_linear_fwd(u, sigma, v, h):
    """Forward pass of the three-factor linear map U.Sigma.V.h.

    Returns (out, cache); the cache keeps V.h and Sigma.V.h for backward.
    """
    u = np.asarray(u, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if v.shape[1] != h.shape[0]:
        raise ShapeError(f"V {v.shape} does not accept h {h.shape}")
    if sigma.shape[0] != sigma.shape[1] or sigma.shape[1] != v.shape[0]:
        raise ShapeError(f"Sigma {sigma.shape} does not fit V {v.shape}")
    if u.shape[1] != sigma.shape[0]:
        raise ShapeError(f"U {u.shape} does not accept Sigma {sigma.shape}")
    vh = v @ h
    svh = sigma @ vh
    out = u @ svh
    return out, FactoredLinearCache(u=u, sigma=sigma, v=v, h=h, vh=vh, svh=svh)


def factored_linear_bwd(cache: FactoredLinearCache, d_out, sigma_diagonal: bool = False):
    """Exact gradients of <d_out, U.Sigma.V.h> w.r.t. every operand.

    With ``sigma_diagonal`` set, off-diagonal entries of dSigma are
    reported as exactly zero (diagonal-constrained parametrization).
    dSigma is returned even when Sigma is not learned; callers discard it.
    """
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != (cache.u.shape[0],):
        raise ShapeError(f"d_out {d_out.shape} does not match U {cache.u.shape}")
    du = np.outer(d_out, cache.svh)
    ut_d = cache.u.T @ d_out
    if sigma_diagonal:
        d_sigma = np.diag(ut_d * cache.vh)
    else:
        d_sigma = np.outer(ut_d, cache.vh)
    st_ut_d = cache.sigma.T @ ut_d
    dv = np.outer(st_ut_d, cache.h)
    dh = cache.v.T @ st_ut_d
    return du, d_sigma, dv, dh


# ---------------------------------------------------------------------------
# Attention over a set of view features
# ---------------------------------------------------------------------------


@dataclass
class AttentionCache:
    w_score: np.ndarray
    w_view: np.ndarray
    w_hidden: np.ndarray
    views: np.ndarray  # stacked (num_views, dim)
    h_prev: np.ndarray
    acts: np.ndarray  # tanh pre-combinations, stacked (num_views, dim)
    alpha: np.ndarray


def attention_fwd(w_score, w_view, w_hidden, views, h_prev):
    """Score each view against the previous hidden feature and pool.

    score_j = w_score . tanh(w_view . view_j + w_hidden . h_prev),
    alpha = softmax(scores), pooled = sum_j alpha_j view_j.

    Returns (alpha, pooled, cache).
    """
    if len(views) == 0:
        raise ValueError("attention requires at least one view")
    w_score = np.asarray(w_score, dtype=np.float64)
    w_view = np.asarray(w_view, dtype=np.float64)
    w_hidden = np.asarray(w_hidden, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    views_mat = np.asarray(views, dtype=np.float64)
    acts = tanh_ew(views_mat @ w_view.T + w_hidden @ h_prev)
    alpha = softmax(acts @ w_score)
    pooled = alpha @ views_mat
    cache = AttentionCache(
        w_score=w_score,
        w_view=w_view,
        w_hidden=w_hidden,
        views=views_mat,
        h_prev=h_prev,
        acts=acts,
        alpha=alpha,
    )
    return alpha, pooled, cache


def attention_bwd_core(cache: AttentionCache, d_alpha, d_pooled):
    """Input-side backward: gradients the recurrence loop needs per step.

    Returns (d_scores, d_pre, d_views, d_h_prev) where d_pre is the
    (num_views, dim) gradient on the tanh pre-combinations; weight
    gradients follow from it (see attention_bwd) and can be accumulated
    across timesteps in one batch because the view matrix is constant.
    """
    alpha = cache.alpha
    m = cache.views.shape[0]
    d_alpha = np.zeros(m) if d_alpha is None else np.asarray(d_alpha, dtype=np.float64)
    d_pooled = (
        np.zeros(cache.views.shape[1])
        if d_pooled is None
        else np.asarray(d_pooled, dtype=np.float64)
    )
    d_alpha_total = d_alpha + cache.views @ d_pooled
    # softmax jacobian: d_score_j = alpha_j * (d_alpha_j - sum_i alpha_i d_alpha_i)
    inner = float(alpha @ d_alpha_total)
    d_scores = alpha * (d_alpha_total - inner)
    d_pre = (1.0 - cache.acts * cache.acts) * np.outer(d_scores, cache.w_score)
    d_views = alpha[:, None] * d_pooled + d_pre @ cache.w_view
    d_h_prev = cache.w_hidden.T @ d_pre.sum(axis=0)
    return d_scores, d_pre, d_views, d_h_prev


def attention_bwd(cache: AttentionCache, d_alpha, d_pooled):
    """Backward pass; upstream gradients may target alpha, pooled, or both.

    Returns (d_w_score, d_w_view, d_w_hidden, d_views, d_h_prev) with
    d_views a list of per-view gradients.
    """
    d_scores, d_pre, d_views, d_h_prev = attention_bwd_core(cache, d_alpha, d_pooled)
    d_w_score = cache.acts.T @ d_scores
    d_w_view = d_pre.T @ cache.views
    d_w_hidden = np.outer(d_pre.sum(axis=0), cache.h_prev)
    return d_w_score, d_w_view, d_w_hidden, list(d_views), d_h_prev


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------


@dataclass
class LstmCache:
    params: LstmCellParams
    z: np.ndarray  # [input ; h_prev]
    gate_i: np.ndarray
    gate_f: np.ndarray
    gate_o: np.ndarray
    gate_g: np.ndarray
    c_prev: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


def lstm_cell_fwd(params: LstmCellParams, x, h_prev, c_prev):
    """One LSTM step: sigmoid input/forget/output gates, tanh candidate.

    c = f*c_prev + i*g, h = o*tanh(c).  Returns (h, c, cache).
    """
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if x.shape != (params.input_dim,):
        raise ShapeError(f"lstm input {x.shape}, expected ({params.input_dim},)")
    if h_prev.shape != (params.hidden_dim,) or c_prev.shape != (params.hidden_dim,):
        raise ShapeError(
            f"lstm state {h_prev.shape}/{c_prev.shape}, expected ({params.hidden_dim},)"
        )
    z = np.concatenate([x, h_prev])
    h = params.hidden_dim
    # one sigmoid over the three stacked gate pre-activations
    gates = sigmoid_ew(np.concatenate([
        params.w_i @ z + params.b_i,
        params.w_f @ z + params.b_f,
        params.w_o @ z + params.b_o,
    ]))
    gate_i, gate_f, gate_o = gates[:h], gates[h : 2 * h], gates[2 * h :]
    gate_g = tanh_ew(params.w_g @ z + params.b_g)
    c = gate_f * c_prev + gate_i * gate_g
    tanh_c = np.tanh(c)
    h = gate_o * tanh_c
    cache = LstmCache(
        params=params,
        z=z,
        gate_i=gate_i,
        gate_f=gate_f,
        gate_o=gate_o,
        gate_g=gate_g,
        c_prev=c_prev,
        c=c,
        tanh_c=tanh_c,
    )
    return h, c, cache


def lstm_cell_bwd_core(cache: LstmCache, dh, dc):
    """Input-side backward: gate pre-activation gradients plus the
    gradients the recurrence needs.  Weight gradients are outer products
    of the d_pre vectors with the cached z and can be batched over
    timesteps by the caller.

    Returns (d_pres, d_input, d_h_prev, d_c_prev) with d_pres a dict over
    gate letters i/f/o/g.
    """
    p = cache.params
    dh = np.asarray(dh, dtype=np.float64)
    dc = np.asarray(dc, dtype=np.float64)

    d_gate_o = dh * cache.tanh_c
    dc_total = dc + dh * cache.gate_o * (1.0 - cache.tanh_c * cache.tanh_c)
    d_gate_f = dc_total * cache.c_prev
    d_gate_i = dc_total * cache.gate_g
    d_gate_g = dc_total * cache.gate_i
    d_c_prev = dc_total * cache.gate_f

    d_pres = {
        "i": d_gate_i * cache.gate_i * (1.0 - cache.gate_i),
        "f": d_gate_f * cache.gate_f * (1.0 - cache.gate_f),
        "o": d_gate_o * cache.gate_o * (1.0 - cache.gate_o),
        "g": d_gate_g * (1.0 - cache.gate_g * cache.gate_g),
    }
    dz = (
        p.w_i.T @ d_pres["i"]
        + p.w_f.T @ d_pres["f"]
        + p.w_o.T @ d_pres["o"]
        + p.w_g.T @ d_pres["g"]
    )
    d_input = dz[: p.input_dim]
    d_h_prev = dz[p.input_dim :]
    return d_pres, d_input, d_h_prev, d_c_prev


def lstm_cell_bwd(cache: LstmCache, dh, dc):
    """Backward through one LSTM step.

    Returns (LstmCellGrads, d_input, d_h_prev, d_c_prev); dh/dc are the
    upstream gradients on this step's h and c outputs.
    """
    d_pres, d_input, d_h_prev, d_c_prev = lstm_cell_bwd_core(cache, dh, dc)
    grads = LstmCellGrads(
        w_i=np.outer(d_pres["i"], cache.z),
        w_f=np.outer(d_pres["f"], cache.z),
        w_o=np.outer(d_pres["o"], cache.z),
        w_g=np.outer(d_pres["g"], cache.z),
        b_i=d_pres["i"],
        b_f=d_pres["f"],
        b_o=d_pres["o"],
        b_g=d_pres["g"],
    )
    return grads, d_input, d_h_prev, d_c_prev


# ---------------------------------------------------------------------------
# Output head: nonlinear combiner of both directions, then vocab projection
# ---------------------------------------------------------------------------


@dataclass
class CombineCache:
    merge_w: np.ndarray
    vocab_w: np.ndarray
    hcat: np.ndarray
    h_s: np.ndarray


def combine_output_fwd(merge_w, merge_b, vocab_w, vocab_b, h_fwd, h_bwd):
    """h_s = tanh(merge_w.[h_fwd;h_bwd] + merge_b); logits = vocab_w.h_s + vocab_b."""
    merge_w = np.asarray(merge_w, dtype=np.float64)
    vocab_w = np.asarray(vocab_w, dtype=np.float64)
    h_fwd = np.asarray(h_fwd, dtype=np.float64)
    h_bwd = np.asarray(h_bwd, dtype=np.float64)
    if merge_w.shape[1] != h_fwd.shape[0] + h_bwd.shape[0]:
        raise ShapeError(
            f"merge_w {merge_w.shape} does not accept [{h_fwd.shape[0]};{h_bwd.shape[0]}]"
        )
    hcat = np.concatenate([h_fwd, h_bwd])
    h_s = np.tanh(merge_w @ hcat + merge_b)
    logits = vocab_w @ h_s + vocab_b
    return h_s, logits, CombineCache(merge_w=merge_w, vocab_w=vocab_w, hcat=hcat, h_s=h_s)


def combine_output_bwd_core(cache: CombineCache, d_h_s, d_logits):
    """Input-side backward for the output head.

    Returns (d_pre, d_h_fwd, d_h_bwd); weight gradients are outer
    products of d_logits with h_s and of d_pre with hcat, batchable over
    timesteps by the caller.
    """
    d_h_s = np.asarray(d_h_s, dtype=np.float64)
    d_logits = np.asarray(d_logits, dtype=np.float64)
    d_h_s_total = d_h_s + cache.vocab_w.T @ d_logits
    d_pre = (1.0 - cache.h_s * cache.h_s) * d_h_s_total
    d_hcat = cache.merge_w.T @ d_pre
    half = d_hcat.shape[0] // 2
    return d_pre, d_hcat[:half], d_hcat[half:]


def combine_output_bwd(cache: CombineCache, d_h_s, d_logits):
    """Backward through the output head.

    ``d_h_s`` is the gradient arriving on h_s from outside the logits path
    (h_s also feeds the next step's attention); pass zeros when unused.
    Returns (d_merge_w, d_merge_b, d_vocab_w, d_vocab_b, d_h_fwd, d_h_bwd).
    """
    d_logits = np.asarray(d_logits, dtype=np.float64)
    d_pre, d_h_fwd, d_h_bwd = combine_output_bwd_core(cache, d_h_s, d_logits)
    d_vocab_w = np.outer(d_logits, cache.h_s)
    d_vocab_b = d_logits.copy()
    d_merge_w = np.outer(d_pre, cache.hcat)
    d_merge_b = d_pre
    return d_merge_w, d_merge_b, d_vocab_w, d_vocab_b, d_h_fwd, d_h_bwd


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def nll_loss(logits, target_index: int):
    """Negative log likelihood of the target class under softmax(logits).

    Returns (loss, d_logits) with d_logits = softmax(logits) - one_hot,
    computed via logsumexp so tiny losses stay accurate.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target_index < logits.shape[0]:
        raise IndexError(f"target index {target_index} out of range for dim {logits.shape[0]}")
    shifted = logits - np.max(logits)
    lse = float(np.log(np.sum(np.exp(shifted))))
    loss = lse - float(shifted[target_index])
    d_logits = np.exp(shifted - lse)
    d_logits[target_index] -= 1.0
    return loss, d_logits
