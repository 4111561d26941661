"""Corpus-level caption metrics implemented from scratch.

All metrics operate on lowercased, whitespace-split token sequences and
are invariant to the order of the pair list.  Conventions (documented in
every score report):

* BLEU: corpus-level modified n-gram precision with per-reference
  clipping, geometric mean over orders 1..n, closest-reference brevity
  penalty, and no smoothing (a zero precision zeroes that B-n).
* ROUGE-L: per-pair best-reference LCS F-measure with beta = 1.2,
  averaged over pairs.
* CIDEr: per order n, tf-idf vectors (raw counts times idf) with
  idf = log(N / df) over the reference corpus (df floored at 1, so
  n-grams absent from every reference weigh log N); cosine similarity
  averaged over references, pairs, then orders, scaled by 10.  An
  optional Gaussian length penalty is off by default.
* METEOR (exact-match "lite" variant, not comparable to resource-based
  METEOR): maximum-cardinality exact unigram alignment built greedily
  left to right, chunk penalty gamma * (chunks/m)^beta, harmonic
  F(alpha); per-pair best reference, averaged over pairs.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field


@dataclass
class EvalPair:
    sample_id: str
    topic: str
    hypothesis: list  # tokens
    references: list  # list of token lists, at least one

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"pair {self.sample_id}/{self.topic} has no references")


@dataclass
class ScoreReport:
    scores: dict  # bleu_1..bleu_4, cider, meteor, rouge_l
    per_topic: dict = field(default_factory=dict)
    conventions: dict = field(default_factory=dict)
    num_pairs: int = 0

    def to_dict(self) -> dict:
        return {
            "num_pairs": self.num_pairs,
            "scores": dict(self.scores),
            "per_topic": {t: dict(s) for t, s in self.per_topic.items()},
            "conventions": dict(self.conventions),
        }


CONVENTIONS = {
    "tokenization": "lowercase, whitespace split",
    "bleu": "corpus-level, clipped counts, no smoothing, closest-reference brevity penalty",
    "rouge_l_beta": 1.2,
    "cider": "plain tf-idf cosine (no length penalty), idf = log(N/df) with df floored at 1",
    "cider_scale": 10.0,
    "meteor": "exact-match unigram variant (meteor_lite); alpha 0.9, gamma 0.5, beta 3",
}


def tokenize(text: str) -> list:
    return text.lower().split()


def ngram_counts(tokens, n: int) -> Counter:
    """Counts of contiguous n-grams; total = max(0, len - n + 1)."""
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def bleu(pairs, max_n: int = 4) -> dict:
    """Corpus BLEU for every order 1..max_n, as {n: score}."""
    if not pairs:
        raise ValueError("bleu requires at least one pair")
    matched = [0] * (max_n + 1)
    total = [0] * (max_n + 1)
    hyp_len = 0
    ref_len = 0
    for pair in pairs:
        hyp = pair.hypothesis
        hyp_len += len(hyp)
        # closest reference length; ties resolve to the shorter reference
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in pair.references)[1]
        for n in range(1, max_n + 1):
            counts = ngram_counts(hyp, n)
            if not counts:
                continue
            clip = Counter()
            for ref in pair.references:
                for gram, cnt in ngram_counts(ref, n).items():
                    if cnt > clip[gram]:
                        clip[gram] = cnt
            matched[n] += sum(min(cnt, clip[gram]) for gram, cnt in counts.items())
            total[n] += max(0, len(hyp) - n + 1)
    if hyp_len == 0:
        return {n: 0.0 for n in range(1, max_n + 1)}
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    precisions = [0.0] + [
        (matched[n] / total[n] if total[n] > 0 else 0.0) for n in range(1, max_n + 1)
    ]
    scores = {}
    for n in range(1, max_n + 1):
        if any(precisions[i] == 0.0 for i in range(1, n + 1)):
            scores[n] = 0.0
        else:
            log_mean = sum(math.log(precisions[i]) for i in range(1, n + 1)) / n
            scores[n] = brevity * math.exp(log_mean)
    return scores


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def lcs_length(a, b) -> int:
    """Longest common subsequence length, classic O(len(a)*len(b)) DP."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pairs, beta: float = 1.2) -> float:
    """Mean over pairs of the best-reference LCS F-measure."""
    if not pairs:
        raise ValueError("rouge_l requires at least one pair")
    total = 0.0
    beta2 = beta * beta
    for pair in pairs:
        best = 0.0
        for ref in pair.references:
            lcs = lcs_length(pair.hypothesis, ref)
            if lcs == 0:
                continue
            recall = lcs / len(ref)
            precision = lcs / len(pair.hypothesis)
            f = (1 + beta2) * recall * precision / (recall + beta2 * precision)
            best = max(best, f)
        total += best
    return total / len(pairs)


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------


def cider(pairs, max_n: int = 4, scale: float = 10.0,
          length_penalty: bool = False, sigma: float = 6.0) -> float:
    """tf-idf n-gram cosine consensus over the reference corpus.

    ``length_penalty`` enables the Gaussian length-difference damping
    variant; the default is the plain cosine form.
    """
    if not pairs:
        raise ValueError("cider requires at least one pair")
    num_docs = len(pairs)
    doc_freq = [Counter() for _ in range(max_n + 1)]
    for pair in pairs:
        for n in range(1, max_n + 1):
            seen = set()
            for ref in pair.references:
                seen.update(ngram_counts(ref, n).keys())
            for gram in seen:
                doc_freq[n][gram] += 1

    def idf(n, gram) -> float:
        return math.log(num_docs / max(1, doc_freq[n][gram]))

    def vector(tokens, n) -> dict:
        return {g: cnt * idf(n, g) for g, cnt in ngram_counts(tokens, n).items()}

    def cosine(u: dict, v: dict) -> float:
        dot = sum(w * v[g] for g, w in u.items() if g in v)
        nu = math.sqrt(sum(w * w for w in u.values()))
        nv = math.sqrt(sum(w * w for w in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        return dot / (nu * nv)

    order_means = []
    for n in range(1, max_n + 1):
        pair_total = 0.0
        for pair in pairs:
            hyp_vec = vector(pair.hypothesis, n)
            ref_total = 0.0
            for ref in pair.references:
                sim = cosine(hyp_vec, vector(ref, n))
                if length_penalty:
                    delta = len(pair.hypothesis) - len(ref)
                    sim *= math.exp(-(delta * delta) / (2.0 * sigma * sigma))
                ref_total += sim
            pair_total += ref_total / len(pair.references)
        order_means.append(pair_total / num_docs)
    return scale * sum(order_means) / max_n


# ---------------------------------------------------------------------------
# METEOR (exact-match variant)
# ---------------------------------------------------------------------------


def _align_greedy(hyp, ref):
    """Left-to-right greedy maximum exact-unigram alignment.

    Each hypothesis position matches the earliest unused reference
    occurrence of the same word, capped at min(count_hyp, count_ref) per
    word, which realizes maximum cardinality.  Returns (m, chunks).
    """
    positions = {}
    for j, word in enumerate(ref):
        positions.setdefault(word, []).append(j)
    used_next = {word: 0 for word in positions}
    aligned = []  # (hyp_index, ref_index) in hyp order
    for i, word in enumerate(hyp):
        slots = positions.get(word)
        if slots is None or used_next[word] >= len(slots):
            continue
        aligned.append((i, slots[used_next[word]]))
        used_next[word] += 1
    m = len(aligned)
    if m == 0:
        return 0, 0
    chunks = 1
    for (hi, ri), (hj, rj) in zip(aligned, aligned[1:]):
        if hj != hi + 1 or rj != ri + 1:
            chunks += 1
    return m, chunks


def meteor_lite(pairs, alpha: float = 0.9, gamma: float = 0.5,
                beta_pen: float = 3.0) -> float:
    """Exact-match METEOR; mean over pairs of the best-reference score."""
    if not pairs:
        raise ValueError("meteor_lite requires at least one pair")
    total = 0.0
    for pair in pairs:
        best = 0.0
        for ref in pair.references:
            m, chunks = _align_greedy(pair.hypothesis, ref)
            if m == 0:
                continue
            precision = m / len(pair.hypothesis)
            recall = m / len(ref)
            f = precision * recall / (alpha * precision + (1 - alpha) * recall)
            penalty = gamma * (chunks / m) ** beta_pen
            best = max(best, f * (1 - penalty))
        total += best
    return total / len(pairs)


# ---------------------------------------------------------------------------
# Combined evaluation
# ---------------------------------------------------------------------------


def compute_scores(pairs) -> dict:
    b = bleu(pairs)
    return {
        "bleu_1": b[1],
        "bleu_2": b[2],
        "bleu_3": b[3],
        "bleu_4": b[4],
        "cider": cider(pairs),
        "meteor": meteor_lite(pairs),
        "rouge_l": rouge_l(pairs),
    }


def evaluate(pairs, per_topic: bool = True) -> ScoreReport:
    """All-topic scores plus per-topic sub-reports (recomputed per subset,
    so per-topic CIDEr idf statistics come from that topic's pairs)."""
    if not pairs:
        raise ValueError("no evaluation pairs")
    report = ScoreReport(
        scores=compute_scores(pairs),
        conventions=dict(CONVENTIONS),
        num_pairs=len(pairs),
    )
    if per_topic:
        topics = []
        for pair in pairs:
            if pair.topic not in topics:
                topics.append(pair.topic)
        for topic in topics:
            subset = [p for p in pairs if p.topic == topic]
            report.per_topic[topic] = compute_scores(subset)
    return report


def build_pairs(hyp_records, ref_dataset, topic_filter=None) -> list:
    """Join hypothesis records {id, topic, text} against reference reports.

    Raises ValueError listing every (id, topic) that cannot be resolved.
    """
    by_id = {sample.id: sample for sample in ref_dataset}
    pairs = []
    missing = []
    for record in hyp_records:
        sid, topic = record["id"], record["topic"]
        if topic_filter and topic not in topic_filter:
            continue
        sample = by_id.get(sid)
        if sample is None or topic not in sample.reports:
            missing.append(f"{sid}/{topic}")
            continue
        pairs.append(
            EvalPair(
                sample_id=sid,
                topic=topic,
                hypothesis=tokenize(record["text"]),
                references=[tokenize(sample.reports[topic])],
            )
        )
    if missing:
        raise ValueError(f"unmatched hypothesis ids: {', '.join(missing)}")
    return pairs
