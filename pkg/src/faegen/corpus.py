"""Vocabulary management, dataset serialization, and a seeded synthetic
corpus generator.

A sample is one patient: a variable-length set of view observations (a
probability distribution over the five view identities plus a feature
vector) and one reference description per topic.  The synthetic generator
mimics that structure: three conditions (normal plus two septal-defect
classes), per-view dropout and repetition, condition-and-severity
dependent feature means, and deterministic topic templates whose
measurement slots are filled with number words.

Datasets are stored as JSON Lines, one sample per line; floats are
serialized with Python's shortest round-trip repr, so save/load is exact.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .linalg import SeededRng

PAD, BOS, EOS, UNK = 0, 1, 2, 3
PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED_TOKENS = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN]

CONDITIONS = ["normal", "VSD", "ASD"]
NUM_VIEWS = 5
DEFAULT_TOPICS = ["echo", "motion", "structure", "flow"]

SEVERITY_BUCKETS = ["small", "moderate", "large"]
MEASUREMENT_WORDS = {"small": "three", "moderate": "six", "large": "nine"}
DEGREE_WORDS = {"small": "mildly", "moderate": "moderately", "large": "severely"}

# Feature-mean tables are drawn once from a fixed generator seed so every
# dataset shares the same underlying "anatomy", whatever its cfg seed.
_MEAN_TABLE_SEED = 190521


class DatasetError(ValueError):
    """Malformed dataset content; message carries the offending line."""


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file + rename so readers never see partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = os.path.join(directory, f".{os.path.basename(path)}.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Core data types
# ---------------------------------------------------------------------------


@dataclass
class ViewObservation:
    """One image's worth of input: a view distribution plus features."""

    view_probs: np.ndarray  # simplex over the NUM_VIEWS view identities
    features: np.ndarray

    def validate(self, context: str = "") -> None:
        probs = np.asarray(self.view_probs, dtype=np.float64)
        if probs.ndim != 1 or np.any(probs < 0) or abs(float(probs.sum()) - 1.0) > 1e-6:
            raise DatasetError(f"view_probs off the simplex{context}")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError(f"non-finite features{context}")


@dataclass
class Sample:
    """One patient: observations plus one description per topic."""

    id: str
    condition: str  # generator metadata; the model never reads it
    observations: list
    reports: dict  # topic name -> whitespace-tokenized description string

    def validate(self, context: str = "") -> None:
        if not self.observations:
            raise DatasetError(f"sample without observations{context}")
        for obs in self.observations:
            obs.validate(context)
        for topic, text in self.reports.items():
            if not text.strip():
                raise DatasetError(f"empty report for topic {topic}{context}")


@dataclass
class Dataset:
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def topics(self) -> list:
        """Topic names in first-appearance order across samples."""
        seen = []
        for sample in self.samples:
            for topic in sample.reports:
                if topic not in seen:
                    seen.append(topic)
        return seen


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Deterministic token<->index map with 4 reserved leading tokens.

    Content tokens are ordered by count descending, ties lexicographic.
    """

    def __init__(self, tokens, counts=None):
        self.tokens = list(tokens)
        if self.tokens[:4] != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the 4 reserved tokens")
        self.counts = list(counts) if counts is not None else [0] * len(self.tokens)
        if len(self.counts) != len(self.tokens):
            raise ValueError("token/count length mismatch")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens) -> list:
        """Map tokens to indices (unknown -> <unk>) and append <eos>."""
        if isinstance(tokens, str):
            tokens = tokens.split()
        out = [self.index.get(tok, UNK) for tok in tokens]
        out.append(EOS)
        return out

    def decode(self, indices) -> list:
        """Map indices back to tokens, stripping all reserved tokens."""
        out = []
        for idx in indices:
            if not 0 <= idx < len(self.tokens):
                raise IndexError(f"token index {idx} out of range for vocab {len(self.tokens)}")
            if idx >= 4:
                out.append(self.tokens[idx])
        return out

    def save(self, path: str) -> None:
        payload = {"tokens": [[tok, int(cnt)] for tok, cnt in zip(self.tokens, self.counts)]}
        atomic_write_text(path, json.dumps(payload, indent=1) + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        tokens = [entry[0] for entry in payload["tokens"]]
        counts = [entry[1] for entry in payload["tokens"]]
        return cls(tokens, counts)


def build_vocab(dataset: Dataset, min_count: int = 1) -> Vocabulary:
    """Count tokens over every report and keep those above threshold."""
    counter = Counter()
    for sample in dataset:
        for text in sample.reports.values():
            counter.update(text.split())
    kept = sorted(
        (tok for tok, cnt in counter.items() if cnt >= min_count),
        key=lambda tok: (-counter[tok], tok),
    )
    tokens = RESERVED_TOKENS + kept
    counts = [0, 0, 0, 0] + [counter[tok] for tok in kept]
    return Vocabulary(tokens, counts)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    num_train: int = 200
    num_test: int = 50
    topics: tuple = tuple(DEFAULT_TOPICS)
    feature_dim: int = 32
    feature_noise: float = 0.3
    view_concentration: float = 4.0
    missing_prob: float = 0.15
    repeat_prob: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.num_train < 1 or self.num_test < 0:
            raise ValueError("num_train must be >= 1 and num_test >= 0")
        for name in ("missing_prob", "repeat_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.feature_dim < 1 or not self.topics:
            raise ValueError("feature_dim must be >= 1 and topics non-empty")


def _severity_of(latent: float) -> str:
    if latent < 1.0 / 3.0:
        return "small"
    if latent < 2.0 / 3.0:
        return "moderate"
    return "large"


def _mean_tables(feature_dim: int):
    """Fixed per-(view, condition) feature means plus severity directions.

    Defect features are mean + severity_level * direction, severity_level
    in {0, 1, 2}; the shift is large against the default noise so severity
    is recoverable from the inputs.
    """
    rng = SeededRng(_MEAN_TABLE_SEED)
    means = {}
    directions = {}
    for view in range(NUM_VIEWS):
        for condition in CONDITIONS:
            means[(view, condition)] = rng.gaussian(0.0, 1.0, feature_dim)
            directions[(view, condition)] = rng.gaussian(0.0, 1.0, feature_dim)
    return means, directions


def render_report(topic: str, condition: str, severity: str) -> str:
    """Deterministic description for one (topic, condition, severity)."""
    number = MEASUREMENT_WORDS[severity]
    degree = DEGREE_WORDS[severity]
    chamber = "ventricular" if condition == "VSD" else "atrial"
    side = "left ventricle" if condition == "VSD" else "right atrium"
    level = "ventricular" if condition == "VSD" else "atrial"
    if topic == "echo":
        if condition == "normal":
            return "septal echo pattern intact with no dropout"
        return f"{chamber} septal echo shows a defect of {number} mm"
    if topic == "motion":
        if condition == "normal":
            return "wall motion amplitude appears normal in all segments"
        return f"{chamber} wall motion is {degree} reduced near the defect"
    if topic == "structure":
        if condition == "normal":
            return "cardiac chambers show normal structure and proportion"
        return f"{side} appears {degree} enlarged with a break in the {chamber} septum"
    if topic == "flow":
        if condition == "normal":
            return "doppler flow across the septum is undisturbed"
        return f"doppler shows a {degree} left to right shunt at the {level} level"
    # extra topics beyond the named four reuse a generic pattern
    if condition == "normal":
        return f"{topic} assessment within normal limits"
    return f"{topic} assessment shows a {degree} {chamber} abnormality of {number} mm"


def template_realizations(topics) -> dict:
    """Every possible description string, keyed by topic."""
    table = {}
    for topic in topics:
        realized = set()
        for condition in CONDITIONS:
            for severity in SEVERITY_BUCKETS:
                realized.add(render_report(topic, condition, severity))
        table[topic] = realized
    return table


def classify_template(text: str, topics=tuple(DEFAULT_TOPICS)):
    """Exact template classifier: the topic whose realization set contains
    the text verbatim, or None.  Realization sets are disjoint by
    construction, so at most one topic matches."""
    normalized = " ".join(text.split())
    for topic, realized in template_realizations(topics).items():
        if normalized in realized:
            return topic
    return None


def synth_generate(cfg: SynthConfig):
    """Generate (train, test) datasets, fully determined by cfg.seed.

    Per sample: a condition drawn uniformly over the three classes, a
    severity latent (defect classes only), per-view dropout with repeated
    views refilling dropped slots, features = mean(view, condition) +
    severity shift + Gaussian noise, and view_probs softened around the
    true view identity.  Train/test ids are disjoint.
    """
    cfg.validate()
    rng = SeededRng(cfg.seed)
    means, directions = _mean_tables(cfg.feature_dim)

    def one_sample(sample_id: str) -> Sample:
        condition = CONDITIONS[rng.randint(0, len(CONDITIONS))]
        severity = _severity_of(rng.random())
        level = 0.0 if condition == "normal" else float(SEVERITY_BUCKETS.index(severity))

        present = [v for v in range(NUM_VIEWS) if rng.random() >= cfg.missing_prob]
        if not present:
            present = [rng.randint(0, NUM_VIEWS)]
        dropped = NUM_VIEWS - len(present)
        slots = list(present)
        for _ in range(dropped):
            if len(slots) < NUM_VIEWS and rng.random() < cfg.repeat_prob:
                slots.append(present[rng.randint(0, len(present))])

        observations = []
        for view in slots:
            feats = (
                means[(view, condition)]
                + level * directions[(view, condition)]
                + rng.gaussian(0.0, cfg.feature_noise, cfg.feature_dim)
            )
            logits = rng.gaussian(0.0, 1.0, NUM_VIEWS)
            logits[view] += cfg.view_concentration
            shifted = logits - np.max(logits)
            probs = np.exp(shifted)
            probs /= probs.sum()
            observations.append(ViewObservation(view_probs=probs, features=feats))

        reports = {
            topic: render_report(topic, condition, severity) for topic in cfg.topics
        }
        return Sample(id=sample_id, condition=condition, observations=observations, reports=reports)

    train = Dataset([one_sample(f"p{idx:05d}") for idx in range(cfg.num_train)])
    test = Dataset(
        [one_sample(f"p{cfg.num_train + idx:05d}") for idx in range(cfg.num_test)]
    )
    return train, test


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _sample_to_record(sample: Sample) -> dict:
    return {
        "id": sample.id,
        "condition": sample.condition,
        "views": [
            {
                "view_probs": [float(x) for x in obs.view_probs],
                "features": [float(x) for x in obs.features],
            }
            for obs in sample.observations
        ],
        "reports": dict(sample.reports),
    }


def _sample_from_record(record: dict, line_no: int) -> Sample:
    try:
        observations = [
            ViewObservation(
                view_probs=np.asarray(view["view_probs"], dtype=np.float64),
                features=np.asarray(view["features"], dtype=np.float64),
            )
            for view in record["views"]
        ]
        sample = Sample(
            id=record["id"],
            condition=record["condition"],
            observations=observations,
            reports=dict(record["reports"]),
        )
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"line {line_no}: missing or malformed field ({exc})") from exc
    sample.validate(context=f" (line {line_no})")
    return sample


def dataset_to_jsonl(dataset: Dataset) -> str:
    return "".join(json.dumps(_sample_to_record(s)) + "\n" for s in dataset)


def save_dataset(path: str, dataset: Dataset) -> None:
    atomic_write_text(path, dataset_to_jsonl(dataset))


def load_dataset(path: str) -> Dataset:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            samples.append(_sample_from_record(record, line_no))
    return Dataset(samples)


def encode_sample_reports(vocab: Vocabulary, sample: Sample, topics) -> dict:
    """Encode each report the sample covers, keyed by topic index."""
    encoded = {}
    for k, topic in enumerate(topics):
        text = sample.reports.get(topic)
        if text is not None:
            encoded[k] = vocab.encode(text)
    return encoded
