"""Deterministic desk-scale next-token model with analytic gradients.

A Markov-chain corpus feeds a two-layer network (mean of context
embeddings -> relu hidden layer -> softmax over the vocabulary). The
model is small enough that every gradient is hand-derived and checkable
against finite differences, yet it exercises the full calibration
pipeline: per-sequence gradients and layer-input activations stream into
LayerStats exactly like a transformer linear layer would.

All randomness flows through SplitMix64 streams keyed by seed XOR a
per-purpose tag, so corpora, parameter init, and batch order are
independent and bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from gradprune.container import Container
from gradprune.masks import PruneMask, apply_mask
from gradprune.prng import SplitMix64
from gradprune.stats import LayerStats, new_stats

# stream tags (arbitrary fixed constants; distinct per purpose)
STREAM_TAGS = {
    "language": 0x1F6E_83C9_A04B_2D07,
    "train": 0x7452_41F3_0C1A_99D1,
    "eval": 0xE7A1_5C26_B90D_4E02,
    "calib": 0x3B8F_D5A4_7716_C303,
    "init": 0x91C0_2E85_54F3_1204,
    "batch": 0x5D3A_90B7_E2C8_6605,
}

CALIB_SEQ_LEN = 128

# container names for the two maskable layers, in model order (W1, W2)
TOY_WEIGHT_NAMES = ("layers.0.fc.weight", "layers.1.fc.weight")


class ToyError(ValueError):
    pass


@dataclass(frozen=True)
class ToyConfig:
    vocab: int = 64
    embed_dim: int = 32
    hidden_dim: int = 64
    context: int = 8
    seed: int = 0
    train_tokens: int = 32768
    eval_tokens: int = 8192
    sgd_steps: int = 2000
    batch: int = 64
    lr: float = 0.05

    def __post_init__(self):
        for name in ("vocab", "embed_dim", "hidden_dim", "context", "train_tokens",
                     "eval_tokens", "sgd_steps", "batch"):
            if getattr(self, name) < 1:
                raise ToyError(f"config field {name} must be positive")
        if self.lr < 0:
            raise ToyError("lr must be nonnegative")

    def stream(self, purpose: str) -> SplitMix64:
        return SplitMix64(self.seed ^ STREAM_TAGS[purpose])


@dataclass
class ToyModel:
    """embed is fixed at construction; only w1 and w2 are maskable."""

    embed: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def copy(self) -> "ToyModel":
        return ToyModel(self.embed, self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


@dataclass
class Corpus:
    tokens: np.ndarray
    transition: np.ndarray


@dataclass
class ForwardPieces:
    x_rows: np.ndarray       # mean context embeddings, input rows of w1
    hidden_pre: np.ndarray   # w1 @ x + b1 before relu
    hidden: np.ndarray       # input rows of w2
    probs: np.ndarray
    nll: np.ndarray          # per-example negative log-likelihood


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    x_rows: np.ndarray
    hidden_rows: np.ndarray
    loss: float


def transition_matrix(cfg: ToyConfig) -> np.ndarray:
    """Row-stochastic matrix defining the seed's language: softmax over
    unit-scale random logits sharpened by temperature 0.5.

    Drawn from its own stream so train/eval/calib describe the same
    process and only the sampled token streams differ.
    """
    stream = cfg.stream("language")
    logits = stream.gauss_array((cfg.vocab, cfg.vocab)) / 0.5
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    transition = expz / expz.sum(axis=1, keepdims=True)
    assert np.allclose(transition.sum(axis=1), 1.0, atol=1e-12)
    return transition


def gen_corpus(cfg: ToyConfig, split: str, n_tokens: int | None = None) -> Corpus:
    """Markov-chain token stream, deterministic given (seed, split);
    tokens are drawn by inverse CDF over the shared transition rows.

    Requesting more tokens later extends the same stream (prefix
    property), which keeps growing calibration sets nested.
    """
    if split not in ("train", "eval", "calib"):
        raise ToyError(f"unknown split {split!r}")
    if n_tokens is None:
        n_tokens = cfg.eval_tokens if split == "eval" else cfg.train_tokens
    transition = transition_matrix(cfg)
    stream = cfg.stream(split)

    cumulative = np.cumsum(transition, axis=1)
    cumulative[:, -1] = 1.0
    draws = stream.float_array(n_tokens)
    tokens = np.empty(n_tokens, dtype=np.int64)
    state = min(int(draws[0] * cfg.vocab), cfg.vocab - 1)
    tokens[0] = state
    for i in range(1, n_tokens):
        state = int(np.searchsorted(cumulative[state], draws[i], side="right"))
        tokens[i] = state
    return Corpus(tokens=tokens, transition=transition)


def init_model(cfg: ToyConfig) -> ToyModel:
    """Parameter init from the init stream; draw order embed, w1, w2."""
    stream = cfg.stream("init")
    embed = stream.gauss_array((cfg.vocab, cfg.embed_dim))
    w1 = stream.gauss_array((cfg.hidden_dim, cfg.embed_dim)) / np.sqrt(cfg.embed_dim)
    w2 = stream.gauss_array((cfg.vocab, cfg.hidden_dim)) / np.sqrt(cfg.hidden_dim)
    return ToyModel(embed=embed, w1=w1, b1=np.zeros(cfg.hidden_dim),
                    w2=w2, b2=np.zeros(cfg.vocab))


def _check_tokens(model: ToyModel, windows: np.ndarray, targets: np.ndarray) -> None:
    vocab = model.embed.shape[0]
    lo = min(int(windows.min()), int(targets.min()))
    hi = max(int(windows.max()), int(targets.max()))
    if lo < 0 or hi >= vocab:
        raise ToyError(f"token id outside [0, {vocab}): saw {lo if lo < 0 else hi}")


def forward(model: ToyModel, windows, targets) -> ForwardPieces:
    """Mean-embedding context -> relu hidden -> stabilized softmax NLL."""
    windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if windows.shape[0] != targets.shape[0]:
        raise ToyError("windows and targets disagree on batch size")
    _check_tokens(model, windows, targets)

    x = model.embed[windows].mean(axis=1)
    hidden_pre = x @ model.w1.T + model.b1
    hidden = np.maximum(hidden_pre, 0.0)
    logits = hidden @ model.w2.T + model.b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shifted)
    probs = expl / expl.sum(axis=1, keepdims=True)
    idx = np.arange(targets.size)
    nll = -(shifted[idx, targets] - np.log(expl.sum(axis=1)))
    return ForwardPieces(x_rows=x, hidden_pre=hidden_pre, hidden=hidden, probs=probs, nll=nll)


def backward(model: ToyModel, windows, targets) -> Gradients:
    """Analytic gradients of the mean NLL over the batch.

    Also hands back the per-layer input rows (x for w1, hidden for w2)
    so calibration can accumulate activation norms from the same pass.
    """
    windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size == 0:
        raise ToyError("backward needs a nonempty batch")
    pieces = forward(model, windows, targets)
    batch = targets.size

    dlogits = pieces.probs.copy()
    dlogits[np.arange(batch), targets] -= 1.0
    dlogits /= batch

    grad_w2 = dlogits.T @ pieces.hidden
    grad_b2 = dlogits.sum(axis=0)
    dhidden = dlogits @ model.w2
    dpre = dhidden * (pieces.hidden_pre > 0.0)
    grad_w1 = dpre.T @ pieces.x_rows
    grad_b1 = dpre.sum(axis=0)
    return Gradients(w1=grad_w1, b1=grad_b1, w2=grad_w2, b2=grad_b2,
                     x_rows=pieces.x_rows, hidden_rows=pieces.hidden, loss=float(pieces.nll.mean()))


def _window_batch(tokens: np.ndarray, starts: np.ndarray, context: int):
    windows = tokens[starts[:, None] + np.arange(context)[None, :]]
    targets = tokens[starts + context]
    return windows, targets


def train(cfg: ToyConfig) -> ToyModel:
    """Plain SGD over the train split; deterministic batch order."""
    corpus = gen_corpus(cfg, "train")
    model = init_model(cfg)
    n_positions = corpus.tokens.size - cfg.context
    if n_positions < 1:
        raise ToyError("train corpus shorter than the context window")
    batch_stream = cfg.stream("batch")
    for step in range(cfg.sgd_steps):
        starts = batch_stream.index_array(cfg.batch, n_positions)
        windows, targets = _window_batch(corpus.tokens, starts, cfg.context)
        grads = backward(model, windows, targets)
        if not np.isfinite(grads.loss):
            raise ToyError(f"training diverged at step {step}: non-finite loss")
        model.w1 -= cfg.lr * grads.w1
        model.b1 -= cfg.lr * grads.b1
        model.w2 -= cfg.lr * grads.w2
        model.b2 -= cfg.lr * grads.b2
    return model


def perplexity(model: ToyModel, corpus: Corpus, cfg: ToyConfig,
               masks: dict[str, PruneMask] | None = None) -> float:
    """exp(mean NLL) over every next-token position; pure evaluation.

    ``masks`` maps the conventional weight names to masks applied to
    copies of w1/w2; the stored model is never mutated.
    """
    if corpus.tokens.size <= cfg.context:
        raise ToyError("corpus shorter than the context window")
    eval_model = model
    if masks:
        eval_model = model.copy()
        if TOY_WEIGHT_NAMES[0] in masks:
            eval_model.w1 = apply_mask(eval_model.w1, masks[TOY_WEIGHT_NAMES[0]])
        if TOY_WEIGHT_NAMES[1] in masks:
            eval_model.w2 = apply_mask(eval_model.w2, masks[TOY_WEIGHT_NAMES[1]])
        unknown = set(masks) - set(TOY_WEIGHT_NAMES)
        if unknown:
            raise ToyError(f"masks for unknown layers: {sorted(unknown)}")

    starts = np.arange(corpus.tokens.size - cfg.context)
    windows, targets = _window_batch(corpus.tokens, starts, cfg.context)
    total = 0.0
    for chunk in range(0, starts.size, 4096):
        pieces = forward(eval_model, windows[chunk : chunk + 4096], targets[chunk : chunk + 4096])
        total += float(pieces.nll.sum())
    return float(np.exp(total / starts.size))


def calibrate(model: ToyModel, cfg: ToyConfig, n_samples: int, start: int = 0) -> dict[str, LayerStats]:
    """Per-layer stats from n_samples disjoint 128-token calibration
    sequences (one backward over each sequence's mean NLL).

    ``start`` skips that many sequences first, giving disjoint sample
    subsets for merge experiments.
    """
    if n_samples < 1:
        raise ToyError("need at least one calibration sample")
    corpus = gen_corpus(cfg, "calib", n_tokens=(start + n_samples) * CALIB_SEQ_LEN)
    stats = {
        TOY_WEIGHT_NAMES[0]: new_stats(cfg.hidden_dim, cfg.embed_dim),
        TOY_WEIGHT_NAMES[1]: new_stats(cfg.vocab, cfg.hidden_dim),
    }
    for k in range(start, start + n_samples):
        seq = corpus.tokens[k * CALIB_SEQ_LEN : (k + 1) * CALIB_SEQ_LEN]
        starts = np.arange(seq.size - cfg.context)
        windows, targets = _window_batch(seq, starts, cfg.context)
        grads = backward(model, windows, targets)
        stats[TOY_WEIGHT_NAMES[0]].accumulate_gradient(grads.w1)
        stats[TOY_WEIGHT_NAMES[1]].accumulate_gradient(grads.w2)
        stats[TOY_WEIGHT_NAMES[0]].accumulate_activations(grads.x_rows)
        stats[TOY_WEIGHT_NAMES[1]].accumulate_activations(grads.hidden_rows)
    return stats


def export_model(model: ToyModel, cfg: ToyConfig) -> Container:
    """Model weights under the shared naming convention, plus the extra
    records and metadata needed to rebuild the model for evaluation."""
    c = Container(metadata={f"toy.{k}": repr(getattr(cfg, k)) for k in (
        "vocab", "embed_dim", "hidden_dim", "context", "seed",
        "train_tokens", "eval_tokens", "sgd_steps", "batch", "lr")})
    c.add(TOY_WEIGHT_NAMES[0], model.w1)
    c.add(TOY_WEIGHT_NAMES[1], model.w2)
    c.add("toy.embed", model.embed)
    c.add("toy.b1", model.b1)
    c.add("toy.b2", model.b2)
    return c


def config_from_metadata(metadata: dict[str, str] | None) -> ToyConfig | None:
    """Rebuild the generating config from container metadata, if present."""
    if not metadata:
        return None
    fields = {}
    for key, raw in metadata.items():
        if not key.startswith("toy."):
            continue
        name = key[len("toy."):]
        fields[name] = float(raw) if name == "lr" else int(raw)
    if not fields:
        return None
    return replace(ToyConfig(), **fields)


def model_from_container(c: Container) -> tuple[ToyModel, ToyConfig]:
    cfg = config_from_metadata(c.metadata)
    if cfg is None:
        raise ToyError("container has no toy model metadata")
    needed = [*TOY_WEIGHT_NAMES, "toy.embed", "toy.b1", "toy.b2"]
    missing = [n for n in needed if n not in c]
    if missing:
        raise ToyError(f"container is missing toy records: {missing}")
    model = ToyModel(
        embed=np.asarray(c["toy.embed"], dtype=np.float64),
        w1=np.asarray(c[TOY_WEIGHT_NAMES[0]], dtype=np.float64),
        b1=np.asarray(c["toy.b1"], dtype=np.float64),
        w2=np.asarray(c[TOY_WEIGHT_NAMES[1]], dtype=np.float64),
        b2=np.asarray(c["toy.b2"], dtype=np.float64),
    )
    return model, cfg
