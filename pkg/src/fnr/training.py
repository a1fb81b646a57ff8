"""Mini-batch training with Adam and validation-based early stopping,
plus evaluation and the multi-method comparison report.

Everything is deterministic given the seeds: epoch shuffles and dropout
masks come from one generator, batches run sequentially, and gradient
accumulation is an ordered sum, so two runs with the same configuration
produce bit-identical checkpoints and epoch logs.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tape
from .data import CorpusSplit, Example, collate
from .embeddings import EmbeddingMatrix
from .metrics import Metrics, score_predictions
from .model import SanConfig, SanParams, batch_loss, forward_batch, predict_tags
from .optim import adam_step
from .vocab import Vocabulary

# Published P/R/F1 reference targets for this task.  Informational only:
# absolute numbers depend on a ~1M-question pretraining crawl and retrieval
# settings that do not ship with this package.  The CRF row is a
# feature-engineered non-neural baseline that is never computed here.
PUBLISHED_RESULTS = {
    "crf": {"precision": 0.798, "recall": 0.611, "f1": 0.692},
    "sblstm": {"precision": 0.844, "recall": 0.673, "f1": 0.749},
    "san-noblstm2": {"precision": 0.83, "recall": 0.7, "f1": 0.759},
    "san": {"precision": 0.839, "recall": 0.721, "f1": 0.776},
}
CRF_REFERENCE = PUBLISHED_RESULTS["crf"]


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss or update."""


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    dropout: float = 0.2
    seed: int = 13

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 < self.patience < self.max_epochs:
            raise ValueError("patience must satisfy 0 < patience < max_epochs")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class EpochLog:
    """One epoch's record.  ``wall_time`` is kept in memory for progress
    reporting but stays out of the serialized form so that logs from
    identical runs compare bit-for-bit."""
    epoch: int
    train_loss: float
    val_metrics: Metrics
    wall_time: float

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val": self.val_metrics.to_dict(),
        }, sort_keys=True)


def predict(params: SanParams, cfg: SanConfig, examples: Sequence[Example],
            batch_size: int = 64) -> list[list[str]]:
    """Eval-mode tag sequences for each example, valid positions only."""
    out: list[list[str]] = []
    for lo in range(0, len(examples), batch_size):
        batch = collate(examples[lo:lo + batch_size])
        probs, _ = forward_batch(batch, params, cfg, training=False)
        for i, ex in enumerate(batch.examples):
            out.append(predict_tags(probs.data[i], ex.mask))
    return out


def evaluate(params: SanParams, cfg: SanConfig, examples: Sequence[Example],
             batch_size: int = 64) -> Metrics:
    """Span- and token-level metrics against gold tags."""
    unlabeled = [e for e in examples if e.tag_ids is None]
    if unlabeled:
        raise ValueError("evaluation set contains unlabeled examples")
    if not examples:
        return Metrics.from_counts(0, 0, 0, 0, 0, 0)
    preds = predict(params, cfg, examples, batch_size)
    items = [(pred, ex.gold_tags(), ex.tokens) for pred, ex in zip(preds, examples)]
    return score_predictions(items)


def train(cfg: SanConfig, tcfg: TrainConfig, split: CorpusSplit, vocab: Vocabulary,
          pretrained: EmbeddingMatrix | None = None,
          epoch_sink: Callable[[EpochLog], None] | None = None) -> tuple[SanParams, list[EpochLog]]:
    """Train one variant, keeping the checkpoint with the best validation
    span-F1 and stopping after ``patience`` epochs without improvement.

    The per-batch objective is the summed cross entropy over the batch's
    examples; one Adam step runs per batch and the last partial batch is
    kept.  Divergence aborts with the epoch/batch location.
    """
    if not split.train:
        raise ValueError("training split is empty")
    run_cfg = dataclasses.replace(cfg, dropout=tcfg.dropout)
    params = SanParams.build(run_cfg, len(vocab), np.random.default_rng(run_cfg.seed),
                             pretrained)
    rng = np.random.default_rng(tcfg.seed)
    best_values = params.group.copy_values()
    best_f1: float | None = None
    stale = 0
    logs: list[EpochLog] = []
    for epoch in range(1, tcfg.max_epochs + 1):
        started = time.monotonic()
        order = rng.permutation(len(split.train))
        epoch_loss = 0.0
        for batch_idx, lo in enumerate(range(0, len(order), tcfg.batch_size)):
            members = [split.train[i] for i in order[lo:lo + tcfg.batch_size]]
            batch = collate(members)
            try:
                with Tape() as tape:
                    probs, _ = forward_batch(batch, params, run_cfg, training=True, rng=rng)
                    loss = batch_loss(probs, batch.gold, batch.mask)
                grads = tape.gradients(loss)
                adam_step(params.group, grads, lr=tcfg.lr)
            except NonFiniteError as err:
                raise DivergenceError(
                    f"training diverged at epoch {epoch}, batch {batch_idx}: {err}") from err
            epoch_loss += loss.item()
        val_metrics = evaluate(params, run_cfg, split.validation)
        entry = EpochLog(epoch, epoch_loss, val_metrics, time.monotonic() - started)
        logs.append(entry)
        if epoch_sink is not None:
            epoch_sink(entry)
        if best_f1 is None or val_metrics.span_f1 > best_f1:
            best_f1 = val_metrics.span_f1
            best_values = params.group.copy_values()
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    params.group.load_values(best_values)
    return params, logs


def compare_methods(base_cfg: SanConfig, tcfg: TrainConfig, split: CorpusSplit,
                    vocab: Vocabulary, variants: Sequence[str],
                    pretrained: EmbeddingMatrix | None = None,
                    include_reference: bool = True) -> dict:
    """Train each variant with the same seed and split; report test metrics
    in a comparison-table shape (plus the constant reference CRF row)."""
    report: dict = {"methods": {}}
    for variant in variants:
        cfg = dataclasses.replace(base_cfg, variant=variant)
        params, _ = train(cfg, tcfg, split, vocab, pretrained)
        metrics = evaluate(params, cfg, split.test)
        report["methods"][variant] = metrics.to_dict()
    if include_reference:
        report["reference"] = {"crf": dict(CRF_REFERENCE)}
    return report


def format_comparison(report: dict) -> str:
    """Plain-text method-by-P/R/F1 table over span-level metrics."""
    names = list(report.get("methods", {}))
    ref = report.get("reference", {})
    width = max([len("Method")] + [len(n) for n in names]
                + [len(f"{n} (reference)") for n in ref])
    lines = [f"{'Method':<{width}}  {'P':>6}  {'R':>6}  {'F1':>6}"]
    for name, row in ref.items():
        label = f"{name} (reference)"
        lines.append(f"{label:<{width}}  {row['precision']:>6.3f}  "
                     f"{row['recall']:>6.3f}  {row['f1']:>6.3f}")
    for name in names:
        span = report["methods"][name]["span"]
        lines.append(f"{name:<{width}}  {span['precision']:>6.3f}  "
                     f"{span['recall']:>6.3f}  {span['f1']:>6.3f}")
    return "\n".join(lines)
