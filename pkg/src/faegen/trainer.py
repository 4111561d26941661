"""Deterministic optimization loop, gradient-check harness, and checkpoint
persistence.

Training performs one adaptive-moment (Adam) update per sample: gradients
are accumulated over all topics the sample covers, the global norm is
clipped, then every learnable tensor steps.  Sample order is reshuffled
per epoch from a seeded stream, so runs are bitwise reproducible given
identical seeds and build.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    Dataset,
    Vocabulary,
    atomic_write_text,
    encode_sample_reports,
)
from .linalg import SeededRng
from .model import FaeGenConfig, FaeGenParams, backward, init_params, sample_loss_all_topics

CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Loss or gradients left the finite range; message pinpoints where."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent with its config."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 60
    clip_norm: float = 5.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    log_interval: int = 1

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "clip_norm": self.clip_norm,
            "seed": self.seed,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "log_interval": self.log_interval,
        }


def clip_global_norm(params: FaeGenParams, clip: float) -> float:
    """Scale every grad buffer so the global norm is at most ``clip``.

    Returns the pre-clip norm.  Direction is preserved: post-clip grads
    are a positive scalar multiple of pre-clip grads.
    """
    total = 0.0
    for _, tensor in params.named():
        total += float(np.sum(tensor.grad * tensor.grad))
    norm = math.sqrt(total)
    if norm > clip:
        scale = clip / norm
        for _, tensor in params.named():
            tensor.grad *= scale
    return norm


class AdamState:
    """Per-tensor first/second moment buffers plus the shared step count."""

    def __init__(self, params: FaeGenParams):
        self.step = 0
        self.m = {name: np.zeros_like(t.value) for name, t in params.named()}
        self.v = {name: np.zeros_like(t.value) for name, t in params.named()}

    def apply(self, params: FaeGenParams, cfg: TrainConfig) -> None:
        self.step += 1
        bc1 = 1.0 - cfg.beta1**self.step
        bc2 = 1.0 - cfg.beta2**self.step
        for name, tensor in params.named():
            g = tensor.grad
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
            tensor.value -= cfg.learning_rate * update


@dataclass
class TrainResult:
    params: FaeGenParams
    epoch_log: list  # (epoch, mean per-token NLL)
    token_count: int


def train(train_set: Dataset, vocab: Vocabulary, model_config: FaeGenConfig,
          train_config: TrainConfig, topics: list | None = None,
          progress=None) -> TrainResult:
    """Optimize the model on a dataset; deterministic given the seeds.

    ``topics`` fixes the topic-name -> index mapping (defaults to the
    dataset's first-appearance order).  ``progress``, when given, is
    called with (epoch, mean_nll) after every epoch.
    """
    train_config.validate()
    model_config.validate()
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if topics is None:
        topics = train_set.topics()

    encoded = []
    for sample in train_set:
        reports = encode_sample_reports(vocab, sample, topics)
        if reports:
            encoded.append((sample, reports))
    if not encoded:
        raise ValueError("no sample covers any configured topic")
    tokens_per_epoch = sum(
        len(seq) for _, reports in encoded for seq in reports.values()
    )

    params = init_params(model_config, seed=train_config.seed)
    adam = AdamState(params)
    order_rng = SeededRng(train_config.seed + 1)
    epoch_log = []
    for epoch in range(train_config.epochs):
        order = list(range(len(encoded)))
        order_rng.shuffle(order)
        epoch_loss = 0.0
        for idx in order:
            sample, reports = encoded[idx]
            loss, traces = sample_loss_all_topics(params, model_config, sample, reports)
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, sample {sample.id!r}"
                )
            params.zero_grads()
            for trace in traces:
                backward(params, model_config, trace)
            clip_global_norm(params, train_config.clip_norm)
            adam.apply(params, train_config)
            epoch_loss += loss
        mean_nll = epoch_loss / tokens_per_epoch
        epoch_log.append((epoch, mean_nll))
        if progress is not None and epoch % train_config.log_interval == 0:
            progress(epoch, mean_nll)
    return TrainResult(params=params, epoch_log=epoch_log, token_count=tokens_per_epoch)


def format_loss_log(epoch_log: list) -> str:
    return "".join(f"{epoch},{nll!r}\n" for epoch, nll in epoch_log)


def evaluate_mean_nll(params: FaeGenParams, config: FaeGenConfig, dataset: Dataset,
                      vocab: Vocabulary, topics: list) -> float:
    """Teacher-forced mean per-token NLL over a dataset."""
    total = 0.0
    tokens = 0
    for sample in dataset:
        reports = encode_sample_reports(vocab, sample, topics)
        if not reports:
            continue
        loss, _ = sample_loss_all_topics(params, config, sample, reports)
        total += loss
        tokens += sum(len(seq) for seq in reports.values())
    if tokens == 0:
        raise ValueError("no scorable reports in dataset")
    return total / tokens


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


GRADCHECK_MAX_PROBES = 200


def grad_check(config: FaeGenConfig, seed: int = 1, fd_step: float = 1e-5,
               seq_len: int = 5, num_observations: int = 3) -> dict:
    """Max relative error, analytic vs central differences, per tensor.

    Probes every entry of tensors with <= 200 entries and 200
    seeded-random entries otherwise.  Relative error is
    |analytic - fd| / max(1e-8, |analytic| + |fd|).

    The probe instance draws weight magnitudes from [0.3, 0.8] with random
    signs (topic factors: identity plus [0.1, 0.3]-magnitude offsets).
    Central differences at step 1e-5 cannot resolve gradients below the
    rounding noise of the loss, so near-zero-by-chance weights would
    poison the relative-error report even though the analytic gradient is
    exact; bounding magnitudes away from zero keeps every gradient entry
    resolvable.
    """
    from .corpus import Sample, ViewObservation

    config.validate()
    params = init_params(config, seed=seed)
    rng = SeededRng(seed + 55555)
    for name, tensor in params.named():
        n = tensor.value.size
        if "_topic_factor_" in name:
            fs = tensor.value.shape[0]
            mag = rng.uniform(0.1, 0.3, n)
            sign = np.where(rng.uniform(0.0, 1.0, n) < 0.5, -1.0, 1.0)
            offset = (mag * sign).reshape(tensor.value.shape)
            if config.topic_factor_shape == "diagonal":
                offset = np.diag(np.diag(offset))
            tensor.value[...] = np.eye(fs) + offset
        else:
            mag = rng.uniform(0.3, 0.8, n)
            sign = np.where(rng.uniform(0.0, 1.0, n) < 0.5, -1.0, 1.0)
            tensor.value[...] = (mag * sign).reshape(tensor.value.shape)

    observations = []
    for _ in range(min(num_observations, 1 + config.num_views)):
        logits = rng.gaussian(0.0, 1.0, config.num_views)
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        observations.append(
            ViewObservation(view_probs=probs, features=rng.gaussian(0.0, 1.0, config.feature_dim))
        )
    sample = Sample(id="gradcheck", condition="normal", observations=observations, reports={})

    content = list(range(4, config.vocab_size))
    reports = {}
    for k in range(config.num_topics):
        seq = [content[rng.randint(0, len(content))] for _ in range(seq_len - 1)]
        reports[k] = seq + [2]  # terminate with <eos>

    def total_loss() -> float:
        loss, _ = sample_loss_all_topics(params, config, sample, reports)
        return loss

    _, traces = sample_loss_all_topics(params, config, sample, reports)
    params.zero_grads()
    for trace in traces:
        backward(params, config, trace)

    probe_rng = SeededRng(seed + 31337)
    report = {}
    for name, tensor in params.named():
        flat = tensor.value.reshape(-1)
        grad = tensor.grad.reshape(-1)
        n = flat.size
        if n <= GRADCHECK_MAX_PROBES:
            indices = range(n)
        else:
            indices = sorted({probe_rng.randint(0, n) for _ in range(GRADCHECK_MAX_PROBES)})
        worst = 0.0
        for i in indices:
            orig = flat[i]
            flat[i] = orig + fd_step
            lp = total_loss()
            flat[i] = orig - fd_step
            lm = total_loss()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * fd_step)
            rel = abs(grad[i] - fd) / max(1e-8, abs(grad[i]) + abs(fd))
            worst = max(worst, rel)
        report[name] = worst
    return report


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: FaeGenConfig
    params: FaeGenParams
    vocab: Vocabulary
    topics: list
    metadata: dict = field(default_factory=dict)


def checkpoint_to_json(ckpt: Checkpoint) -> str:
    tensors = {}
    for name, tensor in ckpt.params.named():
        tensors[name] = {
            "shape": list(tensor.value.shape),
            "data": [float(x) for x in tensor.value.reshape(-1)],
        }
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "vocabulary": {
            "tokens": [[tok, int(cnt)] for tok, cnt in zip(ckpt.vocab.tokens, ckpt.vocab.counts)]
        },
        "topics": list(ckpt.topics),
        "metadata": dict(ckpt.metadata),
        "tensors": tensors,
    }
    return json.dumps(payload)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    atomic_write_text(path, checkpoint_to_json(ckpt) + "\n")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r}, expected {CHECKPOINT_VERSION}"
        )
    config = FaeGenConfig.from_dict(payload["config"])
    params = FaeGenParams(config)
    tensors = payload["tensors"]
    missing = [name for name in params.names() if name not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {missing}")
    extra = [name for name in tensors if name not in params.names()]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensors: {extra}")
    for name, tensor in params.named():
        entry = tensors[name]
        shape = tuple(entry["shape"])
        if shape != tensor.value.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {list(shape)}, expected {list(tensor.value.shape)}"
            )
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != tensor.value.size:
            raise CheckpointError(f"tensor {name!r} data length {data.size} != shape product")
        tensor.value[...] = data.reshape(shape)
        if not np.all(np.isfinite(tensor.value)):
            raise CheckpointError(f"tensor {name!r} contains non-finite values")
    vocab_entries = payload["vocabulary"]["tokens"]
    vocab = Vocabulary([e[0] for e in vocab_entries], [e[1] for e in vocab_entries])
    if len(vocab) != config.vocab_size:
        raise CheckpointError(
            f"vocabulary size {len(vocab)} != config vocab_size {config.vocab_size}"
        )
    return Checkpoint(
        config=config,
        params=params,
        vocab=vocab,
        topics=list(payload["topics"]),
        metadata=dict(payload["metadata"]),
    )
