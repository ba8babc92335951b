"""Accuracy and entity-level precision/recall/F1 for BIO tag sequences."""

from __future__ import annotations

from typing import NamedTuple, Sequence

from .data import repair_bio
from .tensor import ContractError


class NerScores(NamedTuple):
    f1: float
    precision: float
    recall: float
    token_accuracy: float = float("nan")


def accuracy(predicted: Sequence[int], gold: Sequence[int]) -> float:
    if len(gold) == 0:
        raise ContractError("accuracy of an empty set is undefined")
    if len(predicted) != len(gold):
        raise ContractError(f"{len(predicted)} predictions for {len(gold)} gold labels")
    return sum(int(p == g) for p, g in zip(predicted, gold)) / len(gold)


def bio_spans(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """Entity spans ``(type, start, end)`` with ``end`` exclusive, after BIO repair."""
    tags, _ = repair_bio(tags)
    spans = set()
    start, kind = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        if tag.startswith("I-") and kind == tag[2:]:
            continue
        if kind is not None:
            spans.add((kind, start, i))
            start, kind = None, None
        if tag.startswith("B-"):
            start, kind = i, tag[2:]
    return spans


def entity_scores(gold: Sequence[Sequence[str]], predicted: Sequence[Sequence[str]]) -> NerScores:
    """Micro-averaged exact-match span scores; zero denominators give 0."""
    if len(gold) != len(predicted):
        raise ContractError(f"{len(predicted)} predicted sentences for {len(gold)} gold sentences")
    n_gold = n_pred = n_hit = 0
    tok_hit = tok_total = 0
    for g, p in zip(gold, predicted):
        if len(g) != len(p):
            raise ContractError("gold and predicted sentences differ in length")
        gs, ps = bio_spans(g), bio_spans(p)
        n_gold += len(gs)
        n_pred += len(ps)
        n_hit += len(gs & ps)
        tok_hit += sum(a == b for a, b in zip(g, p))
        tok_total += len(g)
    precision = n_hit / n_pred if n_pred else 0.0
    recall = n_hit / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    tok_acc = tok_hit / tok_total if tok_total else float("nan")
    return NerScores(f1, precision, recall, tok_acc)
