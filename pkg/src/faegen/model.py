"""The full generator network: per-view encoding, per-step attention over
the encoded views, a two-direction factored-embedding recurrence, an
output head, and exact backpropagation through time.

Topology per decode step t (teacher forced; S_0 is <bos>):

  1. attention scores every encoded view against the previous combined
     hidden feature h_s(t-1) and pools them into h_a(t);
  2. each direction embeds the previous token through its factored
     embedding (out_proj . topic_factor[k] . in_proj . one_hot), feeds
     [embedding ; attn_in_proj . h_a] to its LSTM cell;
  3. both directions' hidden states are merged by a tanh combiner into
     h_s(t), projected to vocabulary logits, and softmaxed.

Both directions advance left to right consuming the same previous token
and the same pooled attention feature, with separate parameters; training
and generation use the identical scheme.  The topic index enters the
computation only through the per-topic embedding factor, so with shared
embeddings the output is topic-independent.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .corpus import BOS, Sample
from .linalg import SeededRng, softmax

DIRECTIONS = ("fwd", "bwd")

ATTENTION_MODES = ("factored", "plain", "mean_pool")
EMBEDDING_MODES = ("factored", "shared")
TOPIC_FACTOR_SHAPES = ("full", "diagonal")


@dataclass
class FaeGenConfig:
    vocab_size: int
    num_topics: int
    feature_dim: int = 32
    hidden_dim: int = 512
    num_views: int = 5
    topic_factor_dim: int = 10
    max_len: int = 30
    attention_mode: str = "factored"
    embedding_mode: str = "factored"
    topic_factor_shape: str = "full"

    @property
    def view_factor_dim(self) -> int:
        # the view factor matrix is diag(view_probs), so its size is tied
        # to the number of view identities
        return self.num_views

    def validate(self) -> None:
        for name in ("vocab_size", "num_topics", "feature_dim", "hidden_dim",
                     "num_views", "topic_factor_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")
        if self.embedding_mode not in EMBEDDING_MODES:
            raise ValueError(f"unknown embedding_mode {self.embedding_mode!r}")
        if self.topic_factor_shape not in TOPIC_FACTOR_SHAPES:
            raise ValueError(f"unknown topic_factor_shape {self.topic_factor_shape!r}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "num_topics": self.num_topics,
            "feature_dim": self.feature_dim,
            "hidden_dim": self.hidden_dim,
            "num_views": self.num_views,
            "topic_factor_dim": self.topic_factor_dim,
            "max_len": self.max_len,
            "attention_mode": self.attention_mode,
            "embedding_mode": self.embedding_mode,
            "topic_factor_shape": self.topic_factor_shape,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "FaeGenConfig":
        cfg = cls(**payload)
        cfg.validate()
        return cfg


class FaeGenParams:
    """Every learned tensor, named, in a fixed creation order.

    Which tensors exist depends on the config: the factored view
    projections only under factored attention (the plain projection
    otherwise), per-topic embedding factors only under factored
    embeddings.  Iteration order is stable, which fixes the
    initialization draw order, checkpoint layout, and report order.
    """

    def __init__(self, config: FaeGenConfig):
        config.validate()
        self.config = config
        self.tensors: dict = {}
        h, dv = config.hidden_dim, config.feature_dim
        fv, fs = config.view_factor_dim, config.topic_factor_dim
        vocab = config.vocab_size

        if config.attention_mode == "factored":
            self._add("view_proj_out", (h, fv))
            self._add("view_proj_in", (fv, dv))
        else:
            self._add("view_proj_plain", (h, dv))
        self._add("attn_score_w", (h,))
        self._add("attn_view_w", (h, h))
        self._add("attn_state_w", (h, h))
        for d in DIRECTIONS:
            self._add(f"{d}_embed_out", (h, fs))
            self._add(f"{d}_embed_in", (fs, vocab))
            if config.embedding_mode == "factored":
                for k in range(config.num_topics):
                    self._add(f"{d}_topic_factor_{k}", (fs, fs))
            self._add(f"{d}_attn_in_w", (h, h))
            for gate in "ifog":
                self._add(f"{d}_lstm_w_{gate}", (h, 3 * h))
            for gate in "ifog":
                self._add(f"{d}_lstm_b_{gate}", (h,))
        self._add("merge_w", (h, 2 * h))
        self._add("merge_b", (h,))
        self._add("vocab_w", (vocab, h))
        self._add("vocab_b", (vocab,))

    def _add(self, name: str, shape: tuple) -> None:
        self.tensors[name] = layers.ParamTensor.create(name, np.zeros(shape))

    def __getitem__(self, name: str) -> layers.ParamTensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list:
        return list(self.tensors.keys())

    def named(self):
        return self.tensors.items()

    def zero_grads(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def topic_factor(self, direction: str, k: int) -> layers.ParamTensor:
        return self.tensors[f"{direction}_topic_factor_{k}"]

    def lstm_cell(self, direction: str) -> layers.LstmCellParams:
        h = self.config.hidden_dim
        return layers.LstmCellParams(
            w_i=self[f"{direction}_lstm_w_i"].value,
            w_f=self[f"{direction}_lstm_w_f"].value,
            w_o=self[f"{direction}_lstm_w_o"].value,
            w_g=self[f"{direction}_lstm_w_g"].value,
            b_i=self[f"{direction}_lstm_b_i"].value,
            b_f=self[f"{direction}_lstm_b_f"].value,
            b_o=self[f"{direction}_lstm_b_o"].value,
            b_g=self[f"{direction}_lstm_b_g"].value,
            input_dim=2 * h,
            hidden_dim=h,
        )

    def clone(self) -> "FaeGenParams":
        return copy.deepcopy(self)


def init_params(config: FaeGenConfig, seed: int) -> FaeGenParams:
    """Random initialization, deterministic given (config, seed).

    All weights uniform(-0.08, 0.08) except topic factors, which start at
    identity plus 0.01-scaled Gaussian noise (near-neutral factorization;
    under the diagonal constraint the noise lands on the diagonal only).
    """
    params = FaeGenParams(config)
    rng = SeededRng(seed)
    fs = config.topic_factor_dim
    for name, tensor in params.named():
        if "_topic_factor_" in name:
            if config.topic_factor_shape == "diagonal":
                value = np.diag(1.0 + 0.01 * rng.gaussian(0.0, 1.0, fs))
            else:
                value = np.eye(fs) + 0.01 * rng.gaussian(0.0, 1.0, fs * fs).reshape(fs, fs)
        else:
            value = rng.uniform(-0.08, 0.08, tensor.value.size).reshape(tensor.value.shape)
        tensor.value[...] = value
    return params


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


@dataclass
class DecoderState:
    h_s: np.ndarray
    h: dict  # direction -> LSTM hidden
    c: dict  # direction -> LSTM cell

    @classmethod
    def zeros(cls, hidden_dim: int) -> "DecoderState":
        return cls(
            h_s=np.zeros(hidden_dim),
            h={d: np.zeros(hidden_dim) for d in DIRECTIONS},
            c={d: np.zeros(hidden_dim) for d in DIRECTIONS},
        )


@dataclass
class EncodeCache:
    mode: str
    factored: list = None  # FactoredLinearCache per observation
    features: list = None  # raw features per observation (plain / mean_pool)


@dataclass
class EmbedCache:
    token: int
    in_col: np.ndarray  # embed_in[:, token]
    factored_col: np.ndarray  # topic_factor @ in_col (factored mode only)


@dataclass
class StepCache:
    token_in: int
    target: int
    attn: layers.AttentionCache
    pooled: np.ndarray  # attention output h_a, shared by both directions
    embed: dict  # direction -> EmbedCache
    lstm: dict  # direction -> LstmCache
    head: layers.CombineCache
    logits: np.ndarray
    probs: np.ndarray
    loss: float


@dataclass
class ForwardTrace:
    """Everything backward needs to replay one (sample, topic) forward."""

    topic: int
    targets: list
    inputs: list
    sample: Sample
    encode_cache: EncodeCache
    steps: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    total_loss: float = 0.0


def encode_views(params: FaeGenParams, config: FaeGenConfig, sample: Sample):
    """Encode each observation into a hidden-dim view feature.

    factored:  out_proj . diag(view_probs) . in_proj . features per view;
    plain:     a single dense projection per view;
    mean_pool: the mean of the plain encodings (one pooled pseudo-view).

    Returns (views, cache).
    """
    if not sample.observations:
        raise ValueError(f"sample {sample.id!r} has no observations")
    for obs in sample.observations:
        probs = np.asarray(obs.view_probs, dtype=np.float64)
        if probs.shape != (config.num_views,):
            raise ValueError(
                f"sample {sample.id!r}: view_probs dim {probs.shape[0]} != {config.num_views}"
            )
        if np.any(probs < -1e-6) or abs(float(probs.sum()) - 1.0) > 1e-6:
            raise ValueError(f"sample {sample.id!r}: view_probs off the simplex")

    if config.attention_mode == "factored":
        u = params["view_proj_out"].value
        v = params["view_proj_in"].value
        views, caches = [], []
        for obs in sample.observations:
            out, cache = layers.factored_linear_fwd(
                u, np.diag(np.asarray(obs.view_probs, dtype=np.float64)), v, obs.features
            )
            views.append(out)
            caches.append(cache)
        return np.asarray(views), EncodeCache(mode="factored", factored=caches)

    w = params["view_proj_plain"].value
    feats = [np.asarray(obs.features, dtype=np.float64) for obs in sample.observations]
    encoded = [w @ f for f in feats]
    if config.attention_mode == "plain":
        return np.asarray(encoded), EncodeCache(mode="plain", features=feats)
    pooled = sum(encoded) / len(encoded)
    return np.asarray([pooled]), EncodeCache(mode="mean_pool", features=feats)


def _embed_token(params: FaeGenParams, config: FaeGenConfig, direction: str,
                 topic: int, token: int):
    """Factored word embedding of one token (a one-hot column pick)."""
    in_col = params[f"{direction}_embed_in"].value[:, token]
    if config.embedding_mode == "factored":
        factored_col = params.topic_factor(direction, topic).value @ in_col
    else:
        factored_col = in_col  # identity topic factor
    out = params[f"{direction}_embed_out"].value @ factored_col
    return out, EmbedCache(token=token, in_col=in_col, factored_col=factored_col)


def decode_step(params: FaeGenParams, config: FaeGenConfig, topic: int,
                token_prev: int, state: DecoderState, encoded_views: list):
    """Advance both directions one step; returns (p_t, h_s, state, cache)."""
    if not 0 <= topic < config.num_topics:
        raise IndexError(f"topic {topic} out of range for {config.num_topics} topics")
    if not 0 <= token_prev < config.vocab_size:
        raise IndexError(f"token {token_prev} out of range for vocab {config.vocab_size}")

    alpha, pooled, attn_cache = layers.attention_fwd(
        params["attn_score_w"].value,
        params["attn_view_w"].value,
        params["attn_state_w"].value,
        encoded_views,
        state.h_s,
    )

    embed_caches, lstm_caches = {}, {}
    new_h, new_c = {}, {}
    for d in DIRECTIONS:
        emb, embed_caches[d] = _embed_token(params, config, d, topic, token_prev)
        attn_in = params[f"{d}_attn_in_w"].value @ pooled
        x = np.concatenate([emb, attn_in])
        new_h[d], new_c[d], lstm_caches[d] = layers.lstm_cell_fwd(
            params.lstm_cell(d), x, state.h[d], state.c[d]
        )

    h_s, logits, head_cache = layers.combine_output_fwd(
        params["merge_w"].value,
        params["merge_b"].value,
        params["vocab_w"].value,
        params["vocab_b"].value,
        new_h["fwd"],
        new_h["bwd"],
    )
    probs = softmax(logits)
    new_state = DecoderState(h_s=h_s, h=new_h, c=new_c)
    cache = StepCache(
        token_in=token_prev,
        target=-1,
        attn=attn_cache,
        pooled=pooled,
        embed=embed_caches,
        lstm=lstm_caches,
        head=head_cache,
        logits=logits,
        probs=probs,
        loss=0.0,
    )
    return probs, h_s, new_state, cache


def forward_nll(params: FaeGenParams, config: FaeGenConfig, sample: Sample,
                topic: int, targets: list):
    """Teacher-forced negative log likelihood of one description.

    ``targets`` are token indices ending with <eos>; step t consumes
    target[t-1] (with <bos> at t=1) and is scored against target[t].
    Returns (total_loss, trace).
    """
    if not targets:
        raise ValueError("empty target sequence")
    if len(targets) > config.max_len:
        raise ValueError(f"sequence length {len(targets)} exceeds max_len {config.max_len}")
    for tok in targets:
        if not 0 <= tok < config.vocab_size:
            raise IndexError(f"token {tok} out of range for vocab {config.vocab_size}")

    encoded_views, encode_cache = encode_views(params, config, sample)
    inputs = [BOS] + list(targets[:-1])
    trace = ForwardTrace(
        topic=topic,
        targets=list(targets),
        inputs=inputs,
        sample=sample,
        encode_cache=encode_cache,
    )
    state = DecoderState.zeros(config.hidden_dim)
    for token_in, target in zip(inputs, targets):
        probs, _, state, cache = decode_step(
            params, config, topic, token_in, state, encoded_views
        )
        loss, _ = layers.nll_loss(cache.logits, target)
        cache.target = target
        cache.loss = loss
        trace.steps.append(cache)
        trace.alphas.append(cache.attn.alpha)
        trace.losses.append(loss)
    # exact sum: keeps finite-difference probes of the total loss clean
    trace.total_loss = math.fsum(trace.losses)
    return trace.total_loss, trace


def sample_loss_all_topics(params: FaeGenParams, config: FaeGenConfig,
                           sample: Sample, reports_by_topic: dict):
    """Sum of forward_nll over every topic the sample covers.

    ``reports_by_topic`` maps topic index -> encoded token sequence.
    Returns (total_loss, traces).
    """
    if not reports_by_topic:
        raise ValueError(f"sample {sample.id!r} covers no topics")
    traces = []
    for topic in sorted(reports_by_topic):
        _, trace = forward_nll(params, config, sample, topic, reports_by_topic[topic])
        traces.append(trace)
    return math.fsum(trace.total_loss for trace in traces), traces


# ---------------------------------------------------------------------------
# Backward (BPTT)
# ---------------------------------------------------------------------------


def backward(params: FaeGenParams, config: FaeGenConfig, trace: ForwardTrace,
             loss_scale: float = 1.0):
    """Exact gradients of ``loss_scale * trace.total_loss``.

    Gradients accumulate into the ParamTensor grad buffers (callers zero
    them per optimization step).  The recurrence is walked step by step
    in reverse; weight gradients, which are sums of per-step outer
    products, are deferred and formed as single matrix products over the
    stacked per-step vectors.  The trace must come from forward passes of
    the current parameter values; a stale trace silently yields gradients
    for the old computation.  Returns {name: grad} for convenience.
    """
    h_dim = config.hidden_dim
    steps = trace.steps
    views_mat = steps[0].attn.views
    d_hs_next = np.zeros(h_dim)
    d_h = {d: np.zeros(h_dim) for d in DIRECTIONS}
    d_c = {d: np.zeros(h_dim) for d in DIRECTIONS}

    d_logits_rows, h_s_rows = [], []
    d_pre_head_rows, hcat_rows = [], []
    pooled_rows, h_prev_rows = [], []
    d_scores_rows, acts_blocks, d_pre_att_sums = [], [], []
    d_pre_att_total = np.zeros_like(views_mat)
    d_views_total = np.zeros_like(views_mat)
    d_attn_in_rows = {d: [] for d in DIRECTIONS}
    d_emb_rows = {d: [] for d in DIRECTIONS}
    lstm_d_pre_rows = {d: {g: [] for g in "ifog"} for d in DIRECTIONS}
    z_rows = {d: [] for d in DIRECTIONS}

    for step in reversed(steps):
        d_logits = loss_scale * step.probs.copy()
        d_logits[step.target] -= loss_scale
        d_pre_head, d_h_fwd, d_h_bwd = layers.combine_output_bwd_core(
            step.head, d_hs_next, d_logits
        )
        d_logits_rows.append(d_logits)
        h_s_rows.append(step.head.h_s)
        d_pre_head_rows.append(d_pre_head)
        hcat_rows.append(step.head.hcat)
        d_h["fwd"] += d_h_fwd
        d_h["bwd"] += d_h_bwd

        d_pooled = np.zeros(h_dim)
        for d in DIRECTIONS:
            d_pres, d_input, d_h_prev, d_c_prev = layers.lstm_cell_bwd_core(
                step.lstm[d], d_h[d], d_c[d]
            )
            for g in "ifog":
                lstm_d_pre_rows[d][g].append(d_pres[g])
            z_rows[d].append(step.lstm[d].z)
            d_emb_rows[d].append(d_input[:h_dim])
            d_attn_in = d_input[h_dim:]
            d_attn_in_rows[d].append(d_attn_in)
            d_pooled += params[f"{d}_attn_in_w"].value.T @ d_attn_in
            d_h[d] = d_h_prev
            d_c[d] = d_c_prev
        pooled_rows.append(step.pooled)

        d_scores, d_pre_att, d_views, d_hs_prev = layers.attention_bwd_core(
            step.attn, None, d_pooled
        )
        d_scores_rows.append(d_scores)
        acts_blocks.append(step.attn.acts)
        d_pre_att_sums.append(d_pre_att.sum(axis=0))
        h_prev_rows.append(step.attn.h_prev)
        d_pre_att_total += d_pre_att
        d_views_total += d_views
        d_hs_next = d_hs_prev  # flows into h_s of the previous step

    # deferred weight gradients: one matrix product per tensor
    d_logits_mat = np.asarray(d_logits_rows)
    params["vocab_w"].grad += d_logits_mat.T @ np.asarray(h_s_rows)
    params["vocab_b"].grad += d_logits_mat.sum(axis=0)
    d_pre_head_mat = np.asarray(d_pre_head_rows)
    params["merge_w"].grad += d_pre_head_mat.T @ np.asarray(hcat_rows)
    params["merge_b"].grad += d_pre_head_mat.sum(axis=0)

    params["attn_score_w"].grad += (
        np.concatenate(acts_blocks, axis=0).T @ np.concatenate(d_scores_rows)
    )
    params["attn_view_w"].grad += d_pre_att_total.T @ views_mat
    params["attn_state_w"].grad += np.asarray(d_pre_att_sums).T @ np.asarray(h_prev_rows)

    pooled_mat = np.asarray(pooled_rows)
    for d in DIRECTIONS:
        params[f"{d}_attn_in_w"].grad += np.asarray(d_attn_in_rows[d]).T @ pooled_mat
        z_mat = np.asarray(z_rows[d])
        for g in "ifog":
            d_pre_mat = np.asarray(lstm_d_pre_rows[d][g])
            params[f"{d}_lstm_w_{g}"].grad += d_pre_mat.T @ z_mat
            params[f"{d}_lstm_b_{g}"].grad += d_pre_mat.sum(axis=0)
        _embed_backward(params, config, d, trace, np.asarray(d_emb_rows[d]))

    _encode_backward(params, config, trace.encode_cache, d_views_total)
    return {name: tensor.grad for name, tensor in params.named()}


def _embed_backward(params: FaeGenParams, config: FaeGenConfig, direction: str,
                    trace: ForwardTrace, d_emb_mat: np.ndarray) -> None:
    """Embedding-path gradients for one direction, batched over steps.

    ``d_emb_mat`` rows follow the (reversed) step order of the backward
    walk; only sums over steps are formed, so the order is irrelevant.
    """
    embed_out = params[f"{direction}_embed_out"]
    factored_cols = np.asarray(
        [step.embed[direction].factored_col for step in reversed(trace.steps)]
    )
    embed_out.grad += d_emb_mat.T @ factored_cols
    up_mat = d_emb_mat @ embed_out.value  # row t = embed_out^T . d_emb_t
    if config.embedding_mode == "factored":
        factor = params.topic_factor(direction, trace.topic)
        in_cols = np.asarray(
            [step.embed[direction].in_col for step in reversed(trace.steps)]
        )
        if config.topic_factor_shape == "diagonal":
            factor.grad += np.diag((up_mat * in_cols).sum(axis=0))
        else:
            factor.grad += up_mat.T @ in_cols
        d_in_cols = up_mat @ factor.value  # row t = factor^T . up_t
    else:
        d_in_cols = up_mat
    embed_in_grad = params[f"{direction}_embed_in"].grad
    for row, step in zip(d_in_cols, reversed(trace.steps)):
        embed_in_grad[:, step.embed[direction].token] += row


def _encode_backward(params: FaeGenParams, config: FaeGenConfig,
                     cache: EncodeCache, d_views: list) -> None:
    if cache.mode == "factored":
        for fl_cache, d_view in zip(cache.factored, d_views):
            du, _, dv, _ = layers.factored_linear_bwd(fl_cache, d_view)
            params["view_proj_out"].grad += du
            params["view_proj_in"].grad += dv
    elif cache.mode == "plain":
        for feats, d_view in zip(cache.features, d_views):
            params["view_proj_plain"].grad += np.outer(d_view, feats)
    else:  # mean_pool: one pooled view, gradient splits evenly
        d_each = d_views[0] / len(cache.features)
        for feats in cache.features:
            params["view_proj_plain"].grad += np.outer(d_each, feats)
