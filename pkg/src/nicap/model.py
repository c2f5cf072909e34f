"""Joint caption decoder and anomaly classifier.

The image feature is embedded and fed to the LSTM exactly once, before
the begin-of-sentence token; every later step consumes the embedding of
the previous word and predicts the next one through a vocabulary softmax.
A separate two-hidden-layer ReLU MLP on the raw feature produces the
anomaly probability. The heads share no parameters, so the classification
weight in the joint objective is a pure loss mixer.

Training mutates one params instance and is single-threaded; inference on
a finalized instance is read-only and may run concurrently.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import text
from .data import resolve_feature
from .tensor import (
    Parameter,
    Rng,
    Tensor,
    add,
    binary_cross_entropy_from_logit,
    clip_gradients,
    cross_entropy_from_logits,
    dropout_mask,
    embedding_row,
    log_softmax_values,
    matmul,
    mul,
    read_tensor,
    relu,
    scale,
    scale_grads,
    sgd_step,
    sigmoid,
    tanh,
    write_tensor,
    zero_grads,
)

CHECKPOINT_MAGIC = b"NICM"
CHECKPOINT_VERSION = 1

GATES = ("input", "forget", "cell", "output")


class CheckpointFormatError(ValueError):
    """Malformed or mismatched checkpoint file."""


class NonFiniteLossError(RuntimeError):
    """Training loss became NaN/Inf."""


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int = 2048
    embed_dim: int = 512
    hidden_dim: int = 512
    max_caption_len: int = 14
    dropout_rate: float = 0.5
    classifier_hidden: tuple[int, int] = (256, 64)
    loss_weight: float = 1.0

    def __post_init__(self):
        dims = (
            self.vocab_size, self.feature_dim, self.embed_dim, self.hidden_dim,
            self.max_caption_len, *self.classifier_hidden,
        )
        if any(d < 1 for d in dims):
            raise ValueError("all model dimensions must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.loss_weight < 0.0:
            raise ValueError("loss_weight must be >= 0")


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; iteration order fixes init and checkpoint order."""
    d, h, v = config.embed_dim, config.hidden_dim, config.vocab_size
    h1, h2 = config.classifier_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "w_image": (config.feature_dim, d),
        "w_embed": (v, d),
    }
    for gate in GATES:
        shapes[f"lstm_{gate}_w"] = (d, h)
        shapes[f"lstm_{gate}_u"] = (h, h)
        shapes[f"lstm_{gate}_b"] = (h,)
    shapes["w_out"] = (h, v)
    shapes["b_out"] = (v,)
    shapes["mlp_w1"] = (config.feature_dim, h1)
    shapes["mlp_b1"] = (h1,)
    shapes["mlp_w2"] = (h1, h2)
    shapes["mlp_b2"] = (h2,)
    shapes["mlp_w3"] = (h2, 1)
    shapes["mlp_b3"] = (1,)
    return shapes


class NicParams:
    """All trainable tensors, addressable by name and as attributes."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        expected = parameter_shapes(config)
        missing = expected.keys() - tensors.keys()
        extra = tensors.keys() - expected.keys()
        if missing or extra:
            raise CheckpointFormatError(
                f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        self.config = config
        self._params: dict[str, Parameter] = {}
        for name, shape in expected.items():
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise CheckpointFormatError(
                    f"tensor {name}: shape {arr.shape} != expected {shape}"
                )
            param = Parameter(name, arr)
            self._params[name] = param
            setattr(self, name, param)

    def all(self) -> list[Parameter]:
        return list(self._params.values())

    def caption_parameters(self) -> list[Parameter]:
        return [p for n, p in self._params.items() if not n.startswith("mlp_")]

    def classifier_parameters(self) -> list[Parameter]:
        return [p for n, p in self._params.items() if n.startswith("mlp_")]

    def gate(self, name: str) -> tuple[Parameter, Parameter, Parameter]:
        return (
            self._params[f"lstm_{name}_w"],
            self._params[f"lstm_{name}_u"],
            self._params[f"lstm_{name}_b"],
        )


def init_params(config: ModelConfig, rng: Rng) -> NicParams:
    """Uniform [-0.08, 0.08] weights, zero biases, forget-gate bias 1."""
    shapes = parameter_shapes(config)
    tensors = {}
    for name, shape in shapes.items():
        is_bias = "_b" in name or name.startswith("b_")
        tensors[name] = np.zeros(shape) if is_bias else rng.uniform(-0.08, 0.08, shape)
    tensors["lstm_forget_b"] = np.ones(shapes["lstm_forget_b"])
    return NicParams(config, tensors)


class LstmState(NamedTuple):
    h: Tensor
    c: Tensor


def initial_state(config: ModelConfig) -> LstmState:
    return LstmState(Tensor(np.zeros((1, config.hidden_dim))), Tensor(np.zeros((1, config.hidden_dim))))


def lstm_step(params: NicParams, state: LstmState, x: Tensor) -> LstmState:
    """One no-peephole LSTM step on a (1, D) input."""

    def gate_pre(name):
        w, u, b = params.gate(name)
        return add(add(matmul(x, w), matmul(state.h, u)), b)

    i = sigmoid(gate_pre("input"))
    f = sigmoid(gate_pre("forget"))
    g = tanh(gate_pre("cell"))
    o = sigmoid(gate_pre("output"))
    c = add(mul(f, state.c), mul(i, g))
    h = mul(o, tanh(c))
    return LstmState(h, c)


def _feature_tensor(params: NicParams, feature) -> Tensor:
    arr = np.asarray(feature, dtype=np.float64).reshape(1, -1)
    if arr.shape[1] != params.config.feature_dim:
        raise ValueError(
            f"feature dim {arr.shape[1]} != configured {params.config.feature_dim}"
        )
    return Tensor(arr)


def _image_state(params: NicParams, feature) -> LstmState:
    # the image is fed exactly once, before BOS; its output is discarded
    x = matmul(_feature_tensor(params, feature), params.w_image)
    return lstm_step(params, initial_state(params.config), x)


def caption_loss(params: NicParams, feature, target: list[int],
                 rng: Rng | None = None, train_mode: bool = False):
    """Teacher-forced negative log-likelihood of an encoded caption.

    ``target`` is the encoded sequence BOS, w_1..w_n, EOS, PAD...; the loss
    sums one cross-entropy term per predicted symbol (w_1..w_n and EOS; PAD
    steps excluded). Returns (loss tensor, list of per-step probability
    vectors).
    """
    if not target or target[0] != text.BOS or text.EOS not in target:
        raise ValueError("malformed target: expected BOS ... EOS")
    eos_pos = target.index(text.EOS)
    rate = params.config.dropout_rate
    if train_mode and rate > 0.0 and rng is None:
        raise ValueError("train_mode with dropout requires an rng")
    state = _image_state(params, feature)
    total = None
    step_probs = []
    for t in range(eos_pos):
        state = lstm_step(params, state, embedding_row(params.w_embed, target[t]))
        h = state.h
        if train_mode and rate > 0.0:
            h = mul(h, dropout_mask(h.shape, rate, rng))
        logits = add(matmul(h, params.w_out), params.b_out)
        step_loss = cross_entropy_from_logits(logits, target[t + 1])
        step_probs.append(step_loss.probs)
        total = step_loss if total is None else add(total, step_loss)
    return total, step_probs


def classify_logit(params: NicParams, feature, rng: Rng | None = None,
                   train_mode: bool = False) -> Tensor:
    rate = params.config.dropout_rate
    if train_mode and rate > 0.0 and rng is None:
        raise ValueError("train_mode with dropout requires an rng")
    h = relu(add(matmul(_feature_tensor(params, feature), params.mlp_w1), params.mlp_b1))
    if train_mode and rate > 0.0:
        h = mul(h, dropout_mask(h.shape, rate, rng))
    h = relu(add(matmul(h, params.mlp_w2), params.mlp_b2))
    if train_mode and rate > 0.0:
        h = mul(h, dropout_mask(h.shape, rate, rng))
    return add(matmul(h, params.mlp_w3), params.mlp_b3)


def classify(params: NicParams, feature, rng: Rng | None = None,
             train_mode: bool = False) -> float:
    """Probability that the image is an anomaly."""
    return sigmoid(classify_logit(params, feature, rng, train_mode)).data.item()


def predict_label(probability: float) -> str:
    # ties at exactly 0.5 resolve to anomaly
    return "anomaly" if probability >= 0.5 else "normal"


def joint_loss(params: NicParams, feature, target: list[int], label: str | None,
               rng: Rng | None = None, train_mode: bool = False) -> Tensor:
    """caption nll + loss_weight * classification BCE.

    With loss_weight 0 (or no label) the classifier head is skipped
    entirely, so its parameters receive no gradient.
    """
    nll, _ = caption_loss(params, feature, target, rng, train_mode)
    lam = params.config.loss_weight
    if lam == 0.0 or label is None:
        return nll
    logit = classify_logit(params, feature, rng, train_mode)
    bce = binary_cross_entropy_from_logit(logit, 1.0 if label == "anomaly" else 0.0)
    return add(nll, scale(bce, lam))


@dataclass
class TrainSample:
    feature: np.ndarray
    target: list[int]
    label: str | None = None


def build_training_samples(records, vocab: text.Vocabulary, max_len: int,
                           base_dir=None, expected_dim: int | None = None) -> list[TrainSample]:
    """One sample per (record, caption); over-length captions are discarded."""
    samples = []
    for rec in records:
        feature = resolve_feature(rec, base_dir, expected_dim)
        for caption in rec.captions:
            tokens = text.tokenize(text.normalize_caption(caption))
            if len(tokens) > max_len:
                continue
            samples.append(TrainSample(feature, text.encode(tokens, vocab, max_len), rec.label))
    return samples


def _run_sgd(params, samples, loss_of_sample, epochs, learning_rate, rng,
             clip_norm, batch_size, max_steps, start_epoch, on_epoch_end):
    if not samples:
        raise ValueError("empty training set")
    if learning_rate < 0:
        raise ValueError("learning rate must be >= 0")
    trainable = params.all()
    history = []
    steps = 0
    for epoch in range(start_epoch, start_epoch + epochs):
        # per-epoch child stream: resuming at epoch k replays run k exactly
        epoch_rng = rng.child(epoch)
        order = epoch_rng.permutation(len(samples))
        epoch_total = 0.0
        for lo in range(0, len(order), batch_size):
            batch = order[lo : lo + batch_size]
            zero_grads(trainable)
            for si in batch:
                loss = loss_of_sample(samples[int(si)], epoch_rng)
                value = loss.data.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(
                        f"non-finite loss {value} at epoch {epoch}, step {steps}"
                    )
                loss.backward()
                epoch_total += value
            if len(batch) > 1:
                scale_grads(trainable, 1.0 / len(batch))
            clip_gradients(trainable, clip_norm)
            sgd_step(trainable, learning_rate)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        history.append(epoch_total / len(samples))
        if on_epoch_end is not None:
            on_epoch_end(epoch, history[-1])
        if max_steps is not None and steps >= max_steps:
            break
    return history


def train(params: NicParams, samples: list[TrainSample], epochs: int,
          learning_rate: float, rng: Rng, clip_norm: float = 5.0,
          batch_size: int = 1, max_steps: int | None = None,
          start_epoch: int = 0, on_epoch_end=None) -> list[float]:
    """SGD with global-norm gradient clipping over deterministically
    shuffled epochs; returns the per-epoch mean joint loss."""

    def loss_of_sample(sample, epoch_rng):
        return joint_loss(params, sample.feature, sample.target, sample.label,
                          epoch_rng, train_mode=True)

    return _run_sgd(params, samples, loss_of_sample, epochs, learning_rate, rng,
                    clip_norm, batch_size, max_steps, start_epoch, on_epoch_end)


def train_classifier(params: NicParams, samples: list[TrainSample], epochs: int,
                     learning_rate: float, rng: Rng, clip_norm: float = 5.0,
                     batch_size: int = 1, max_steps: int | None = None,
                     start_epoch: int = 0, on_epoch_end=None) -> list[float]:
    """Classifier-head-only training (the two-phase alternative to a joint run)."""

    def loss_of_sample(sample, epoch_rng):
        logit = classify_logit(params, sample.feature, epoch_rng, train_mode=True)
        return binary_cross_entropy_from_logit(
            logit, 1.0 if sample.label == "anomaly" else 0.0
        )

    return _run_sgd(params, samples, loss_of_sample, epochs, learning_rate, rng,
                    clip_norm, batch_size, max_steps, start_epoch, on_epoch_end)


def _next_distribution(params: NicParams, state: LstmState, word: int):
    state = lstm_step(params, state, embedding_row(params.w_embed, word))
    logits = add(matmul(state.h, params.w_out), params.b_out)
    return state, log_softmax_values(logits.data.ravel())


def greedy_decode(params: NicParams, feature, max_len: int | None = None) -> list[int]:
    """Argmax rollout; stops at EOS or after max_len words (ties pick the
    lowest index). Returns word indices without BOS/EOS."""
    if max_len is None:
        max_len = params.config.max_caption_len
    state = _image_state(params, feature)
    words: list[int] = []
    prev = text.BOS
    for _ in range(max_len + 1):
        state, logp = _next_distribution(params, state, prev)
        idx = int(np.argmax(logp))
        if idx == text.EOS or len(words) == max_len:
            break
        words.append(idx)
        prev = idx
    return words


def beam_decode(params: NicParams, feature, beam_width: int,
                max_len: int | None = None) -> tuple[list[int], float]:
    """Length-bounded beam search over summed log-probabilities.

    A hypothesis reaching ``max_len`` words is finalized with a forced EOS
    scoring step, so the returned log-probability always equals the
    negated caption loss of the returned sequence. Ties prefer higher
    score, then shorter, then the lexicographically smaller index
    sequence. ``beam_width`` 1 reproduces the greedy rollout exactly.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len is None:
        max_len = params.config.max_caption_len
    vocab_size = params.config.vocab_size
    state, logp = _next_distribution(params, _image_state(params, feature), text.BOS)
    live = [(0.0, (), state, logp)]
    finished: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(max_len + 1):
        if not live:
            break
        candidates = []
        for score, words, state, logp in live:
            if len(words) == max_len:
                finished.append((score + float(logp[text.EOS]), words))
                continue
            for v in range(vocab_size):
                candidates.append((score + float(logp[v]), words + (v,), state))
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, words, state in candidates[:beam_width]:
            if words[-1] == text.EOS:
                finished.append((score, words[:-1]))
            else:
                nstate, nlogp = _next_distribution(params, state, words[-1])
                live.append((score, words, nstate, nlogp))
    best = min(finished, key=lambda f: (-f[0], len(f[1]), f[1]))
    return list(best[1]), best[0]


_U32_FIELDS = (
    "feature_dim", "embed_dim", "hidden_dim", "vocab_size",
    "max_caption_len", "classifier_h1", "classifier_h2", "trained_epochs",
)
_F64_FIELDS = ("dropout_rate", "loss_weight")


def save_checkpoint(path, params: NicParams, trained_epochs: int = 0) -> None:
    """Binary checkpoint: magic, version, named config entries, named tensors."""
    cfg = params.config
    entries: list[tuple[str, int, float]] = [
        ("feature_dim", 0, cfg.feature_dim),
        ("embed_dim", 0, cfg.embed_dim),
        ("hidden_dim", 0, cfg.hidden_dim),
        ("vocab_size", 0, cfg.vocab_size),
        ("max_caption_len", 0, cfg.max_caption_len),
        ("classifier_h1", 0, cfg.classifier_hidden[0]),
        ("classifier_h2", 0, cfg.classifier_hidden[1]),
        ("trained_epochs", 0, trained_epochs),
        ("dropout_rate", 1, cfg.dropout_rate),
        ("loss_weight", 1, cfg.loss_weight),
    ]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, tag, value in entries:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tag))
            fh.write(struct.pack("<I", int(value)) if tag == 0 else struct.pack("<d", value))
        tensors = params.all()
        fh.write(struct.pack("<I", len(tensors)))
        for p in tensors:
            write_tensor(fh, p.name, p.data)


def load_checkpoint(path) -> tuple[NicParams, int]:
    """Read a checkpoint; every tensor shape is validated against the config."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != CHECKPOINT_VERSION:
                raise CheckpointFormatError(f"{path}: unsupported version {version}")
            (n_entries,) = struct.unpack("<I", fh.read(4))
            values: dict[str, float] = {}
            for _ in range(n_entries):
                (name_len,) = struct.unpack("<H", fh.read(2))
                name = fh.read(name_len).decode("utf-8")
                (tag,) = struct.unpack("<B", fh.read(1))
                if tag == 0:
                    (values[name],) = struct.unpack("<I", fh.read(4))
                else:
                    (values[name],) = struct.unpack("<d", fh.read(8))
            missing = [f for f in _U32_FIELDS + _F64_FIELDS if f not in values]
            if missing:
                raise CheckpointFormatError(f"{path}: missing config entries {missing}")
            config = ModelConfig(
                vocab_size=int(values["vocab_size"]),
                feature_dim=int(values["feature_dim"]),
                embed_dim=int(values["embed_dim"]),
                hidden_dim=int(values["hidden_dim"]),
                max_caption_len=int(values["max_caption_len"]),
                dropout_rate=values["dropout_rate"],
                classifier_hidden=(int(values["classifier_h1"]), int(values["classifier_h2"])),
                loss_weight=values["loss_weight"],
            )
            (n_tensors,) = struct.unpack("<I", fh.read(4))
            tensors = {}
            for _ in range(n_tensors):
                name, arr = read_tensor(fh)
                tensors[name] = arr
            if fh.read(1):
                raise CheckpointFormatError(f"{path}: trailing bytes")
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated checkpoint ({exc})") from exc
    except ValueError as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"{path}: {exc}") from exc
    return NicParams(config, tensors), int(values["trained_epochs"])
