"""Topic-conditioned generation: greedy, beam, and sampling decoders.

Token policy shared by every mode: <pad>, <bos>, and <unk> are never
emitted.  <eos> terminates a sequence; in the deterministic modes it is
chosen only when it is strictly more probable than the best content
token, so ties (e.g. an untrained uniform model) resolve to the
lowest-index content token rather than an instant stop.  Among content
tokens, ties break to the lowest index for cross-platform determinism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import BOS, EOS, Sample, Vocabulary
from .linalg import SeededRng
from .model import DecoderState, FaeGenConfig, FaeGenParams, decode_step, encode_views

DECODE_MODES = ("greedy", "beam", "sample")


@dataclass
class DecodeConfig:
    mode: str = "greedy"
    beam_width: int = 3
    max_len: int = 30
    temperature: float = 1.0
    seed: int = 0
    length_normalize: bool = True  # beam scores divided by token count

    def validate(self) -> None:
        if self.mode not in DECODE_MODES:
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.max_len < 1:
            raise ValueError("max length must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def _pick_greedy(probs: np.ndarray) -> int:
    """Deterministic token choice under the shared policy.

    Returns the best content token (>= 4, lowest index wins ties), or
    <eos> when eos is strictly preferred over every content token.
    """
    content = probs[4:]
    best_content = 4 + int(np.argmax(content))
    if probs[EOS] > probs[best_content]:
        return EOS
    return best_content


def greedy_generate(params: FaeGenParams, config: FaeGenConfig, sample: Sample,
                    topic: int, max_len: int = None) -> list:
    """Greedy decoding; stops at <eos> or max length.

    The returned sequence includes the terminating <eos> when one was
    emitted before the length cap.
    """
    max_len = config.max_len if max_len is None else max_len
    encoded_views, _ = encode_views(params, config, sample)
    state = DecoderState.zeros(config.hidden_dim)
    token = BOS
    out = []
    for _ in range(max_len):
        probs, _, state, _ = decode_step(params, config, topic, token, state, encoded_views)
        token = _pick_greedy(probs)
        out.append(token)
        if token == EOS:
            break
    return out


@dataclass
class _Hypothesis:
    tokens: tuple
    log_prob: float
    state: DecoderState

    def normalized(self, length_normalize: bool) -> float:
        if not self.tokens:
            return -np.inf
        return self.log_prob / len(self.tokens) if length_normalize else self.log_prob


def _hyp_key(hyp: _Hypothesis, length_normalize: bool):
    # higher score first; ties -> lexicographically smaller token sequence
    return (-hyp.normalized(length_normalize), hyp.tokens)


def beam_generate(params: FaeGenParams, config: FaeGenConfig, sample: Sample,
                  topic: int, width: int = 3, max_len: int = None,
                  length_normalize: bool = True):
    """Beam search; returns (tokens, score).

    Live hypotheses are pruned by cumulative log probability; the final
    winner maximizes length-normalized log probability (plain sum when
    normalization is off) over finished hypotheses plus max-length
    survivors.  Candidate expansion ranks (prob desc, content-before-eos,
    index asc), which makes width 1 reproduce greedy decoding exactly.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    max_len = config.max_len if max_len is None else max_len
    encoded_views, _ = encode_views(params, config, sample)
    live = [_Hypothesis(tokens=(), log_prob=0.0, state=DecoderState.zeros(config.hidden_dim))]
    finished = []
    for _ in range(max_len):
        expansions = []
        for hyp in live:
            token_prev = hyp.tokens[-1] if hyp.tokens else BOS
            probs, _, state, _ = decode_step(
                params, config, topic, token_prev, hyp.state, encoded_views
            )
            with np.errstate(divide="ignore"):
                log_p = np.log(probs)
            candidates = [EOS] + list(range(4, config.vocab_size))
            # prob desc; exact ties prefer content over eos, then lowest index
            candidates.sort(key=lambda tok: (-probs[tok], tok == EOS, tok))
            for tok in candidates[:width]:
                expansions.append(
                    _Hypothesis(
                        tokens=hyp.tokens + (tok,),
                        log_prob=hyp.log_prob + float(log_p[tok]),
                        state=state,
                    )
                )
        # keep the top `width` expansions; finished ones retire their slot,
        # so a width-1 beam is exactly the greedy choice sequence
        expansions.sort(key=lambda h: (-h.log_prob, h.tokens[-1] == EOS, h.tokens))
        live = []
        for hyp in expansions[:width]:
            if hyp.tokens[-1] == EOS:
                finished.append(hyp)
            else:
                live.append(hyp)
        if not live:
            break
    pool = finished + live  # survivors at max length count as finished
    pool.sort(key=lambda h: _hyp_key(h, length_normalize))
    best = pool[0]
    return list(best.tokens), best.normalized(length_normalize)


def sample_token(probs: np.ndarray, rng: SeededRng, temperature: float = 1.0) -> int:
    """Draw one index from probs^(1/temperature), renormalized.

    Inverse-CDF over the tempered distribution; deterministic given the
    rng state.  Zero-probability entries stay impossible at any
    temperature.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if temperature != 1.0:
        with np.errstate(divide="ignore"):
            logs = np.log(probs) / temperature
        shifted = logs - np.max(logs[np.isfinite(logs)] if np.any(np.isfinite(logs)) else logs)
        weights = np.exp(shifted)
    else:
        weights = probs.copy()
    total = float(weights.sum())
    u = rng.random() * total
    acc = 0.0
    for idx, w in enumerate(weights):
        acc += float(w)
        if u < acc:
            return idx
    return int(len(weights) - 1)


def sample_generate(params: FaeGenParams, config: FaeGenConfig, sample: Sample,
                    topic: int, rng: SeededRng, temperature: float = 1.0,
                    max_len: int = None) -> list:
    """Ancestral sampling with <pad>/<bos>/<unk> masked out."""
    max_len = config.max_len if max_len is None else max_len
    encoded_views, _ = encode_views(params, config, sample)
    state = DecoderState.zeros(config.hidden_dim)
    token = BOS
    out = []
    for _ in range(max_len):
        probs, _, state, _ = decode_step(params, config, topic, token, state, encoded_views)
        masked = probs.copy()
        masked[0] = masked[1] = masked[3] = 0.0
        masked /= masked.sum()
        token = sample_token(masked, rng, temperature)
        out.append(token)
        if token == EOS:
            break
    return out


def score_sequence(params: FaeGenParams, config: FaeGenConfig, sample: Sample,
                   topic: int, tokens: list, length_normalize: bool = True) -> float:
    """Teacher-forced log probability of a token sequence (normalized by
    its length when requested); the re-scoring oracle for beam outputs."""
    from .model import forward_nll

    nll, _ = forward_nll(params, config, sample, topic, list(tokens))
    return -nll / len(tokens) if length_normalize else -nll


def generate_report(params: FaeGenParams, config: FaeGenConfig, sample: Sample,
                    vocab: Vocabulary, topics: list, decode_config: DecodeConfig) -> dict:
    """One decoded description per topic, as {topic_name: (text, score)}."""
    decode_config.validate()
    report = {}
    rng = SeededRng(decode_config.seed)
    for k, topic_name in enumerate(topics):
        if decode_config.mode == "greedy":
            tokens = greedy_generate(params, config, sample, k, decode_config.max_len)
            score = score_sequence(params, config, sample, k, tokens) if tokens else 0.0
        elif decode_config.mode == "beam":
            tokens, score = beam_generate(
                params, config, sample, k,
                width=decode_config.beam_width,
                max_len=decode_config.max_len,
                length_normalize=decode_config.length_normalize,
            )
        else:
            tokens = sample_generate(
                params, config, sample, k, rng, decode_config.temperature,
                decode_config.max_len,
            )
            score = score_sequence(params, config, sample, k, tokens) if tokens else 0.0
        report[topic_name] = (" ".join(vocab.decode(tokens)), float(score))
    return report
