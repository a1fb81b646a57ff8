"""The full tagger: embedding -> BLSTM -> bank attention -> BLSTM ->
projection -> per-token softmax, with the two ablation wirings.

Variants:
  san           full model with bank attention and the second BLSTM
  sblstm        supervised stacked BLSTM; the bank branch is absent, so
                outputs are exactly independent of bank contents
  san-noblstm2  bank attention but no second BLSTM; the projection reads
                the concatenated representation directly

Loss and decoding exclude PAD positions.  Checkpoints are a versioned JSON
container with base64 little-endian float64 tensors; round trips are
bit-exact.
"""

from __future__ import annotations

import base64
import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .attention import (AttentionParams, AttentionTrace, bank_attend_batch,
                        init_attention)
from .autodiff import (NonFiniteError, Tensor, constant, gather_rows, linear,
                       log, mul, neg, reduce_sum, reshape, softmax)
from .data import Batch, Example, LABELS, F_INDEX, O_INDEX, collate
from .embeddings import EmbeddingMatrix
from .lstm import BlstmParams, blstm_forward, glorot, init_blstm
from .optim import ParamGroup
from .vocab import EOS_TOKEN, Vocabulary

VARIANTS = ("san", "sblstm", "san-noblstm2")

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint container is malformed or incompatible."""


@dataclass
class SanConfig:
    """Model hyperparameters.  max_len=40 and bank_size=5 are the run
    defaults; labels are fixed to the two-symbol F/O set."""
    embedding_dim: int = 100
    hidden_size: int = 100
    attention_dim: int = 100
    max_len: int = 40
    bank_size: int = 5
    dropout: float = 0.2
    variant: str = "san"
    share_bank_encoder: bool = False
    seed: int = 13
    labels: tuple[str, ...] = LABELS

    def __post_init__(self):
        self.labels = tuple(self.labels)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.labels) != 2:
            raise ValueError("label set must have exactly two symbols")
        for name in ("embedding_dim", "hidden_size", "attention_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.bank_size < 0:
            raise ValueError("bank_size must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def has_bank(self) -> bool:
        return self.variant in ("san", "san-noblstm2")

    @property
    def has_layer2(self) -> bool:
        return self.variant in ("san", "sblstm")

    @property
    def encoder_width(self) -> int:
        return 2 * self.hidden_size

    @property
    def augmented_width(self) -> int:
        if self.has_bank:
            return self.encoder_width + self.attention_dim
        return self.encoder_width

    @property
    def projection_width(self) -> int:
        return self.encoder_width if self.has_layer2 else self.augmented_width

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["labels"] = list(self.labels)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "SanConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


class SanParams:
    """All trainable tensors, registered by name in one ParamGroup.

    Exactly one bank encoder exists regardless of how many bank questions
    an example carries; with ``share_bank_encoder`` it is the same object
    as the first labeled-question encoder and is not stored twice.
    """

    def __init__(self, group: ParamGroup, embedding: Tensor, blstm1: BlstmParams,
                 bank_blstm: BlstmParams | None, attention: AttentionParams | None,
                 blstm2: BlstmParams | None, proj_w: Tensor, proj_b: Tensor):
        self.group = group
        self.embedding = embedding
        self.blstm1 = blstm1
        self.bank_blstm = bank_blstm
        self.attention = attention
        self.blstm2 = blstm2
        self.proj_w = proj_w
        self.proj_b = proj_b

    @classmethod
    def build(cls, cfg: SanConfig, vocab_size: int, rng: np.random.Generator,
              pretrained: EmbeddingMatrix | None = None) -> "SanParams":
        group = ParamGroup()
        if pretrained is not None:
            if pretrained.dim != cfg.embedding_dim:
                raise ValueError(
                    f"pretrained dim {pretrained.dim} != config embedding_dim {cfg.embedding_dim}")
            if pretrained.vectors.shape[0] != vocab_size:
                raise ValueError("pretrained embedding rows != vocabulary size")
            vectors = pretrained.vectors.copy()
        else:
            vectors = (rng.random((vocab_size, cfg.embedding_dim)) - 0.5) / cfg.embedding_dim
            vectors[0] = 0.0
        embedding = group.add("embedding", vectors)

        blstm1 = init_blstm(group, "blstm1", cfg.embedding_dim, cfg.hidden_size, rng)
        bank_blstm = attention = blstm2 = None
        if cfg.has_bank:
            if cfg.share_bank_encoder:
                bank_blstm = blstm1
            else:
                bank_blstm = init_blstm(group, "bank", cfg.embedding_dim, cfg.hidden_size, rng)
            attention = init_attention(group, "attention", cfg.encoder_width,
                                       cfg.attention_dim, rng)
        if cfg.has_layer2:
            blstm2 = init_blstm(group, "blstm2", cfg.augmented_width, cfg.hidden_size, rng)
        proj_w = group.add("proj.w", glorot(rng, (len(cfg.labels), cfg.projection_width)))
        proj_b = group.add("proj.b", np.zeros(len(cfg.labels)))
        return cls(group, embedding, blstm1, bank_blstm, attention, blstm2, proj_w, proj_b)


def forward_batch(batch: Batch, params: SanParams, cfg: SanConfig,
                  training: bool = False, rng: np.random.Generator | None = None,
                  want_trace: bool = False) -> tuple[Tensor, list[AttentionTrace] | None]:
    """Per-token label distributions for a batch: (B, T, |L|) plus traces.

    Valid rows sum to one; padded rows are computed but must be excluded
    by every consumer (the loss and the decoder both do).
    """
    if batch.ids.shape[1] != cfg.max_len:
        raise ValueError(
            f"batch length {batch.ids.shape[1]} != configured max_len {cfg.max_len}; "
            "input was not preprocessed")
    if training and cfg.dropout > 0.0 and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")

    emb = gather_rows(params.embedding, batch.ids)
    hq1 = blstm_forward(emb, batch.mask, params.blstm1,
                        dropout_rate=cfg.dropout, training=training, rng=rng)
    traces = None
    if cfg.has_bank:
        b_sz, n_banks, t_len = batch.bank_ids.shape
        if n_banks > 0:
            bank_emb = gather_rows(params.embedding, batch.bank_ids.reshape(-1, t_len))
            bank_enc = blstm_forward(bank_emb, batch.bank_mask.reshape(-1, t_len),
                                     params.bank_blstm)
            bank_enc = reshape(bank_enc, (b_sz, n_banks, t_len, cfg.encoder_width))
        else:
            bank_enc = Tensor(np.zeros((b_sz, 0, 1, cfg.encoder_width)), const=True)
        hq2, traces = bank_attend_batch(hq1, bank_enc, batch.bank_mask,
                                        batch.bank_valid, params.attention,
                                        want_trace=want_trace)
    else:
        hq2 = hq1
    if cfg.has_layer2:
        feats = blstm_forward(hq2, batch.mask, params.blstm2,
                              dropout_rate=cfg.dropout, training=training, rng=rng)
    else:
        feats = hq2
    logits = linear(feats, params.proj_w, params.proj_b)
    probs = softmax(logits, axis=-1)
    return probs, traces


def forward(example: Example, params: SanParams, cfg: SanConfig, mode: str = "eval",
            rng: np.random.Generator | None = None,
            want_trace: bool = True) -> tuple[np.ndarray, AttentionTrace | None]:
    """Single-example forward; returns detached (T, |L|) probabilities."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    probs, traces = forward_batch(collate([example]), params, cfg,
                                  training=(mode == "train"), rng=rng,
                                  want_trace=want_trace)
    return probs.data[0], (traces[0] if traces else None)


def _check_one_hot(gold: np.ndarray, valid: np.ndarray) -> None:
    rows = gold[valid > 0]
    ok = np.all((rows == 0.0) | (rows == 1.0)) and np.all(rows.sum(axis=-1) == 1.0)
    if not ok:
        raise ValueError("gold labels must be one-hot over the label set")


def batch_loss(probs: Tensor, gold: np.ndarray, valid: np.ndarray) -> Tensor:
    """Summed cross entropy over examples and their valid positions.

    Padding never contributes; teaching the model the pad label would
    distort the class balance.  log is clamped at 1e-12 for stability.
    """
    gold = np.asarray(gold, dtype=float)
    valid = np.asarray(valid, dtype=float)
    _check_one_hot(gold, valid)
    picked = gold * valid[..., None]
    return neg(reduce_sum(mul(log(probs, floor=1e-12), constant(picked))))


def sequence_loss(probs, gold: np.ndarray, valid: np.ndarray) -> Tensor:
    """Cross entropy of one (T, |L|) distribution sequence."""
    probs = probs if isinstance(probs, Tensor) else Tensor(probs, const=False)
    return batch_loss(probs, gold, valid)


def predict_tags(probs: np.ndarray, valid) -> list[str]:
    """Per-token argmax over valid positions; an exact F/O tie goes to O."""
    valid = np.asarray(valid)
    out = []
    for t in range(probs.shape[0]):
        if valid[t] <= 0:
            continue
        out.append(LABELS[F_INDEX] if probs[t, F_INDEX] > probs[t, O_INDEX]
                   else LABELS[O_INDEX])
    return out


@dataclass(frozen=True)
class FunctionSpan:
    start: int
    end: int  # inclusive
    text: str


def extract_spans(tags: list[str], tokens: list[str]) -> list[FunctionSpan]:
    """Maximal contiguous F runs.  EOS separators terminate a span and are
    never inside one, whatever their predicted tag."""
    spans = []
    start = None
    for t, (tag, token) in enumerate(zip(tags, tokens)):
        in_span = tag == LABELS[F_INDEX] and token != EOS_TOKEN
        if in_span and start is None:
            start = t
        elif not in_span and start is not None:
            spans.append(FunctionSpan(start, t - 1, " ".join(tokens[start:t])))
            start = None
    if start is not None:
        spans.append(FunctionSpan(start, len(tags) - 1,
                                  " ".join(tokens[start:len(tags)])))
    return spans


def save_model(path, params: SanParams, cfg: SanConfig, vocab: Vocabulary) -> None:
    """Versioned JSON checkpoint; tensors as base64 little-endian float64."""
    tensors = {}
    for name, t in params.group.items():
        tensors[name] = {
            "shape": list(t.shape),
            "data": base64.b64encode(np.ascontiguousarray(t.data, dtype="<f8").tobytes()).decode("ascii"),
        }
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": {**cfg.to_dict(), "vocab": vocab.id_to_token},
        "tensors": tensors,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_model(path, expected: SanConfig | None = None) -> tuple[SanParams, SanConfig, Vocabulary]:
    """Load a checkpoint; with ``expected`` given, refuse variant or shape
    disagreements instead of silently rewiring."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as err:
            raise CheckpointError(f"{path}: not a JSON checkpoint") from err
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    config_dict = dict(payload.get("config", {}))
    vocab_tokens = config_dict.pop("vocab", None)
    if not vocab_tokens:
        raise CheckpointError("checkpoint lacks the vocabulary")
    cfg = SanConfig.from_dict(config_dict)
    vocab = Vocabulary(vocab_tokens)
    if expected is not None and expected.variant != cfg.variant:
        raise CheckpointError(
            f"checkpoint variant {cfg.variant!r} is incompatible with the "
            f"requested {expected.variant!r} configuration")

    params = SanParams.build(cfg, len(vocab), np.random.default_rng(0))
    stored = payload.get("tensors", {})
    expected_names = set(params.group.names())
    missing = expected_names - set(stored)
    extra = set(stored) - expected_names
    if missing:
        raise CheckpointError(f"checkpoint missing tensor {sorted(missing)[0]!r}")
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {sorted(extra)[0]!r}")
    for name, t in params.group.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {list(shape)}, expected {list(t.shape)}")
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype="<f8")
        if arr.size != t.size:
            raise CheckpointError(f"tensor {name!r} payload size mismatch")
        t.data[...] = arr.reshape(shape)
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"tensor {name!r} holds non-finite values")
    return params, cfg, vocab
