"""Seeded synthetic corpora with known decision rules.

``final_word_task``
    Sequence classification where the class is fixed by the last word.
``next_word_tagging_task``
    BIO tagging where each word's tag is fixed by the word that follows it,
    so a left-to-right model cannot do better than the tag prior.
"""

from __future__ import annotations

import numpy as np

from .data import SequenceExample, TokenExample


def _words(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i}" for i in range(n)]


def final_word_task(n: int, seed: int = 0, n_classes: int = 2, cues_per_class: int = 4, n_filler: int = 40,
                    min_len: int = 3, max_len: int = 8, cues_in_body: bool = False) -> list[SequenceExample]:
    """Sentences of filler words ending with a cue word; the label is the
    cue's class (``"c0"``, ``"c1"``, ...).  Classes are balanced and
    interleaved.  With ``cues_in_body`` the filler positions may also hold
    cue words of any class, so only the final position is informative.
    """
    rng = np.random.default_rng(seed)
    cues = [_words(f"cue{c}_", cues_per_class) for c in range(n_classes)]
    filler = _words("w", n_filler)
    pool = filler + [w for group in cues for w in group] if cues_in_body else filler
    out = []
    for i in range(n):
        c = i % n_classes
        length = int(rng.integers(min_len, max_len + 1))
        body = [pool[j] for j in rng.integers(0, len(pool), size=length - 1)]
        last = cues[c][int(rng.integers(0, cues_per_class))]
        out.append(SequenceExample(" ".join(body + [last]), f"c{c}"))
    return out


TAG_GROUPS = ("O", "PER", "LOC")


def next_word_tagging_task(n: int, seed: int = 0, words_per_group: int = 20, min_len: int = 4,
                           max_len: int = 10) -> list[TokenExample]:
    """Words belong to one of three groups (``o*``, ``per*``, ``loc*``).  A
    word is tagged ``B-PER`` / ``B-LOC`` when the *next* word is in that
    group, and ``O`` otherwise (including the sentence-final word)."""
    rng = np.random.default_rng(seed)
    groups = [_words(f"{g.lower()}", words_per_group) for g in TAG_GROUPS]
    out = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        gids = rng.integers(0, len(groups), size=length)
        words = [groups[g][int(rng.integers(0, words_per_group))] for g in gids]
        tags = []
        for i in range(length):
            nxt = gids[i + 1] if i + 1 < length else 0
            tags.append("O" if nxt == 0 else f"B-{TAG_GROUPS[nxt]}")
        out.append(TokenExample(words, tags))
    return out


def random_bio(rng: np.random.Generator, length: int, types=("PER", "LOC", "ORG")) -> list[str]:
    """Arbitrary (possibly ill-formed) BIO sequence for metric fuzzing."""
    choices = ["O"] + [f"{p}-{t}" for t in types for p in ("B", "I")]
    return [choices[int(i)] for i in rng.integers(0, len(choices), size=length)]
