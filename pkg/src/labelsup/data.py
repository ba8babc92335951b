"""Word-level tokenisation, dataset readers, and batch collation."""

from __future__ import annotations

import csv
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .heads import IGNORE_INDEX, LabelSpace
from .tensor import ContractError

logger = logging.getLogger(__name__)

PAD_ID, UNK_ID, BOS_ID = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<bos>")

_WORD_RE = re.compile(r"\w+|[^\w\s]")


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


def split_words(text: str) -> list[str]:
    """Lowercased words and single punctuation marks."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Token ↔ id map with ``<pad>``=0, ``<unk>``=1, ``<bos>``=2 reserved."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]], max_size: int = 1024) -> "Vocabulary":
        """Most frequent tokens first, ties broken by first appearance;
        ``max_size`` counts the reserved entries."""
        counts: Counter[str] = Counter()
        for toks in token_lists:
            counts.update(toks)
        ranked = [t for t, _ in counts.most_common() if t not in RESERVED]
        return cls(ranked[: max(0, max_size - len(RESERVED))])

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, i: int) -> str:
        return self.itos[i]

    def detokenize(self, ids: Sequence[int], skip_special: bool = True) -> list[str]:
        keep = (PAD_ID, BOS_ID) if skip_special else ()
        return [self.itos[i] for i in ids if i not in keep]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    def to_list(self) -> list[str]:
        return self.itos[len(RESERVED):]


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [BOS_ID] + [vocab.id(w) for w in split_words(text)]


# ------------------------------------------------------------------ examples

@dataclass
class SequenceExample:
    text: str
    label: str


@dataclass
class TokenExample:
    tokens: list[str]
    tags: list[str]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.tags)} tags")


def repair_bio(tags: Sequence[str]) -> tuple[list[str], int]:
    """Turn every ``I-X`` that does not continue an ``X`` entity into ``B-X``."""
    out: list[str] = []
    fixes = 0
    prev = "O"
    for tag in tags:
        if tag.startswith("I-") and (prev == "O" or prev[2:] != tag[2:]):
            tag = "B-" + tag[2:]
            fixes += 1
        out.append(tag)
        prev = tag
    return out, fixes


class ConllData(NamedTuple):
    examples: list[TokenExample]
    repairs: int


def read_conll(path) -> ConllData:
    examples: list[TokenExample] = []
    repairs = 0
    toks: list[str] = []
    tags: list[str] = []

    def flush():
        nonlocal repairs, toks, tags
        if toks:
            fixed, n = repair_bio(tags)
            repairs += n
            examples.append(TokenExample(toks, fixed))
        toks, tags = [], []

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                flush()
                continue
            if line.startswith("-DOCSTART-"):
                continue
            fields = line.split()
            if len(fields) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'token tag', found {len(fields)} fields")
            toks.append(fields[0])
            tags.append(fields[1])
    flush()
    return ConllData(examples, repairs)


def write_conll(path, examples: Sequence[TokenExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            for tok, tag in zip(ex.tokens, ex.tags):
                fh.write(f"{tok} {tag}\n")
            fh.write("\n")


class ClassificationData(NamedTuple):
    examples: list[SequenceExample]
    labels: LabelSpace
    skipped: int


def read_classification(path, format: str = "csv", text_col: str = "text", label_col: str = "label") -> ClassificationData:
    if format not in ("csv", "tsv"):
        raise SchemaError(f"unknown classification format {format!r}")
    delimiter = "," if format == "csv" else "\t"
    examples: list[SequenceExample] = []
    skipped = 0
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        missing = [c for c in (text_col, label_col) if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; header is {header}")
        for row in reader:
            text = row[text_col] or ""
            if not text.strip():
                skipped += 1
                continue
            examples.append(SequenceExample(text, row[label_col]))
    if skipped:
        logger.warning("%s: skipped %d rows with empty text", path, skipped)
    return ClassificationData(examples, LabelSpace.from_labels(e.label for e in examples), skipped)


def write_classification(path, examples: Sequence[SequenceExample], format: str = "csv",
                         text_col: str = "text", label_col: str = "label") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="," if format == "csv" else "\t", lineterminator="\n")
        w.writerow([text_col, label_col])
        for ex in examples:
            w.writerow([ex.text, ex.label])


def build_vocab(examples: Sequence[SequenceExample | TokenExample], max_size: int = 1024) -> Vocabulary:
    return Vocabulary.build((example_words(e) for e in examples), max_size)


def example_words(ex: SequenceExample | TokenExample) -> list[str]:
    if isinstance(ex, TokenExample):
        return [t.lower() for t in ex.tokens]
    return split_words(ex.text)


# ----------------------------------------------------------------- batching

@dataclass
class LabeledBatch:
    tokens: np.ndarray  # (b, s) int64
    pad_mask: np.ndarray  # (b, s) bool, True at real tokens
    labels: np.ndarray  # (b,) or (b, s) int64

    @property
    def is_token_task(self) -> bool:
        return self.labels.ndim == 2

    def __len__(self) -> int:
        return self.tokens.shape[0]


def collate(examples: Sequence[SequenceExample | TokenExample], vocab: Vocabulary, labels: LabelSpace,
            max_len: int) -> LabeledBatch:
    """Right-pad to the longest row (tail-truncated at ``max_len`` including
    the begin-of-sequence id).  Token-task labels line up one-to-one with
    words; the begin-of-sequence slot and pads carry the ignore index."""
    if not examples:
        raise ContractError("collate needs at least one example")
    if max_len < 2:
        raise ContractError("max_len must leave room for at least one word after <bos>")
    token_task = isinstance(examples[0], TokenExample)
    rows = []
    for ex in examples:
        if isinstance(ex, TokenExample) != token_task:
            raise ContractError("cannot mix sequence and token examples in one batch")
        ids = [BOS_ID] + [vocab.id(w) for w in example_words(ex)]
        rows.append(ids[:max_len])
    b, s = len(rows), max(len(r) for r in rows)
    tokens = np.full((b, s), PAD_ID, dtype=np.int64)
    pad_mask = np.zeros((b, s), dtype=bool)
    for i, r in enumerate(rows):
        tokens[i, : len(r)] = r
        pad_mask[i, : len(r)] = True
    if token_task:
        out = np.full((b, s), labels.ignore_index, dtype=np.int64)
        for i, ex in enumerate(examples):
            tag_ids = [labels.index(t) for t in ex.tags][: len(rows[i]) - 1]
            out[i, 1 : 1 + len(tag_ids)] = tag_ids
    else:
        out = np.array([labels.index(ex.label) for ex in examples], dtype=np.int64)
    return LabeledBatch(tokens, pad_mask, out)


def batches(examples: Sequence, vocab: Vocabulary, labels: LabelSpace, max_len: int, batch_size: int,
            order: Sequence[int] | None = None):
    order = range(len(examples)) if order is None else order
    order = list(order)
    for k in range(0, len(order), batch_size):
        yield collate([examples[i] for i in order[k : k + batch_size]], vocab, labels, max_len)
