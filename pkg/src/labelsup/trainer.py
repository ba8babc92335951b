"""Cross-entropy finetuning with AdamW, periodic evaluation, metric logging."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import LabeledBatch, Vocabulary, batches
from .heads import Classifier, LabelSpace, TokenHead
from .lora import LoraConfig, trainable_parameters
from .metrics import NerScores, accuracy, entity_scores
from .model import ConfigError
from .tensor import ContractError, DimensionError, Tensor


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message: str, records: list["MetricsRecord"], step: int):
        super().__init__(message)
        self.records = records
        self.step = step


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 8e-5
    max_steps: int | None = None
    epochs: int = 1
    log_every: int = 100
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    weight_decay: float = 0.01
    mask_mode: str = "causal"
    pooling: str = "last"
    lora: LoraConfig | None = field(default_factory=LoraConfig)
    full_finetune: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if isinstance(self.lora, dict):
            self.lora = LoraConfig(**self.lora)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    eval_loss: float | None = None
    eval_metric: float | None = None
    seconds: float = 0.0

    def same_values(self, other: "MetricsRecord") -> bool:
        """Equality ignoring wall-clock time."""
        a, b = asdict(self), asdict(other)
        a.pop("seconds"), b.pop("seconds")
        return a == b


@dataclass
class Dataset:
    examples: Sequence
    vocab: Vocabulary
    labels: LabelSpace
    max_len: int = 64

    def __len__(self) -> int:
        return len(self.examples)

    def batches(self, batch_size: int, order=None):
        return batches(self.examples, self.vocab, self.labels, self.max_len, batch_size, order)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> AdamState:
    """One in-place AdamW update with bias correction and decoupled decay.

    A ``None`` gradient is treated as zero.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} / state {m.shape} do not match parameter {p.shape}")
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                   self.lr, self.betas, self.eps, self.weight_decay)


# ---------------------------------------------------------------- loss/eval

def batch_loss(model: Classifier, batch: LabeledBatch, mode: str = "eval", rng=None) -> Tensor:
    logits = model(batch.tokens, batch.pad_mask, mode, rng)
    ignore = model_labels_ignore(model)
    if batch.is_token_task:
        c = logits.shape[-1]
        return T.cross_entropy(T.reshape(logits, (-1, c)), batch.labels.reshape(-1), ignore)
    return T.cross_entropy(logits, batch.labels, ignore)


def model_labels_ignore(model) -> int:
    return getattr(model, "ignore_index", -100)


def _predict_batches(model: Classifier, data: Dataset, batch_size: int):
    with T.no_grad():
        for batch in data.batches(batch_size):
            logits = model(batch.tokens, batch.pad_mask, "eval")
            yield batch, logits


def evaluate_sequence(model: Classifier, data: Dataset, batch_size: int = 32) -> float:
    """Fraction of examples whose arg-max logit is the gold label."""
    if len(data) == 0:
        raise ContractError("evaluate_sequence needs a non-empty evaluation set")
    pred, gold = [], []
    for batch, logits in _predict_batches(model, data, batch_size):
        pred.extend(logits.data.argmax(axis=-1).tolist())
        gold.extend(batch.labels.tolist())
    return accuracy(pred, gold)


def predict_tags(model: Classifier, data: Dataset, batch_size: int = 32) -> tuple[list[list[str]], list[list[str]]]:
    """Gold and predicted tag strings per sentence, over non-ignored positions."""
    gold_all, pred_all = [], []
    ignore = data.labels.ignore_index
    for batch, logits in _predict_batches(model, data, batch_size):
        pred = logits.data.argmax(axis=-1)
        for row in range(len(batch)):
            keep = batch.labels[row] != ignore
            gold_all.append([data.labels.name(i) for i in batch.labels[row][keep]])
            pred_all.append([data.labels.name(i) for i in pred[row][keep]])
    return gold_all, pred_all


def evaluate_ner(model: Classifier, data: Dataset, batch_size: int = 32) -> NerScores:
    """Entity-level micro P/R/F1 from greedy per-token decoding with BIO repair."""
    if not data.labels.is_bio():
        raise ConfigError(f"label space {list(data.labels.names)} is not a BIO tag set")
    if len(data) == 0:
        raise ContractError("evaluate_ner needs a non-empty evaluation set")
    gold, pred = predict_tags(model, data, batch_size)
    return entity_scores(gold, pred)


def evaluate(model: Classifier, data: Dataset, batch_size: int = 32) -> tuple[float, float]:
    """Mean cross-entropy and the task metric (accuracy, or entity F1 for BIO tags)."""
    total, count = 0.0, 0
    ignore = data.labels.ignore_index
    with T.no_grad():
        for batch in data.batches(batch_size):
            n = int((batch.labels != ignore).sum())
            if n:
                total += float(batch_loss(model, batch).data) * n
                count += n
    loss = total / count if count else float("nan")
    if isinstance(model.head, TokenHead):
        if data.labels.is_bio():
            metric = evaluate_ner(model, data, batch_size).f1
        else:
            gold, pred = predict_tags(model, data, batch_size)
            metric = accuracy([t for s in pred for t in s], [t for s in gold for t in s])
    else:
        metric = evaluate_sequence(model, data, batch_size)
    return loss, metric


# ------------------------------------------------------------------- train

def train(model: Classifier, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None,
          progress=None) -> tuple[Classifier, list[MetricsRecord]]:
    """Minimise mean cross-entropy over the trainable parameters.

    Runs ``cfg.max_steps`` optimiser steps when set, otherwise ``cfg.epochs``
    passes; the data order is reshuffled every epoch from ``cfg.seed``.  A
    :class:`MetricsRecord` is emitted every ``cfg.log_every`` steps and after
    the final step.
    """
    if len(data) == 0:
        raise ContractError("cannot train on an empty dataset")
    model.ignore_index = data.labels.ignore_index
    if cfg.full_finetune:
        for p in model.parameters():
            p.requires_grad = True
        params = model.parameters()
    else:
        params = trainable_parameters(model)
    opt = AdamW(params, cfg.learning_rate, cfg.betas, cfg.adam_epsilon, cfg.weight_decay)
    order_rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * steps_per_epoch

    records: list[MetricsRecord] = []
    window: list[float] = []
    start = time.perf_counter()
    step = 0
    while step < total:
        order = order_rng.permutation(len(data))
        for batch in data.batches(cfg.batch_size, order):
            opt.zero_grad()
            # overflow shows up as a non-finite loss, reported below
            with np.errstate(over="ignore", invalid="ignore"):
                loss = batch_loss(model, batch, "train", dropout_rng)
                value = float(loss.data)
                if not math.isfinite(value):
                    records.append(MetricsRecord(step + 1, value, seconds=time.perf_counter() - start))
                    raise DivergenceError(f"training loss became {value} at step {step + 1}", records, step + 1)
                loss.backward()
                opt.step()
            step += 1
            window.append(value)
            if step % cfg.log_every == 0 or step == total:
                rec = MetricsRecord(step, float(np.mean(window)))
                if eval_data is not None and len(eval_data):
                    rec.eval_loss, rec.eval_metric = evaluate(model, eval_data)
                rec.seconds = time.perf_counter() - start
                records.append(rec)
                window = []
                if progress is not None:
                    progress(rec)
            if step >= total:
                break
    return model, records


METRICS_COLUMNS = ("step", "train_loss", "eval_loss", "eval_metric", "seconds")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_metrics_csv(path, records: Sequence[MetricsRecord], include_seconds: bool = False) -> None:
    """Write one row per record.  The ``seconds`` column is left blank unless
    ``include_seconds`` is set, so reruns produce byte-identical files."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            w.writerow([r.step, _fmt(r.train_loss), _fmt(r.eval_loss), _fmt(r.eval_metric),
                        _fmt(r.seconds) if include_seconds else ""])


def read_metrics_csv(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            f = lambda k: float(row[k]) if row[k] else None  # noqa: E731
            out.append(MetricsRecord(int(row["step"]), f("train_loss"), f("eval_loss"), f("eval_metric"),
                                     f("seconds") or 0.0))
    return out
