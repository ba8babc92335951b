"""Label spaces, pooling, and projection heads on top of decoder latents."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .model import DecoderStack, Module
from .tensor import DimensionError, Tensor

IGNORE_INDEX = -100


class EmptySequenceError(ValueError):
    pass


class PoolingStrategy(str, enum.Enum):
    LAST = "last"
    MAX = "max"
    AVERAGE = "average"


@dataclass(frozen=True)
class LabelSpace:
    names: tuple[str, ...]
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError("label names must be unique")
        if 0 <= self.ignore_index < len(self.names):
            raise ValueError(f"ignore_index {self.ignore_index} collides with a class index")

    @classmethod
    def from_labels(cls, labels: Iterable[str], ignore_index: int = IGNORE_INDEX) -> "LabelSpace":
        """Collect distinct labels in first-appearance order."""
        return cls(tuple(dict.fromkeys(labels)), ignore_index)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name) -> bool:
        return name in self._index

    @property
    def _index(self) -> dict[str, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {n: i for i, n in enumerate(self.names)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"label {name!r} is not in the label space {list(self.names)}") from None

    def name(self, i: int) -> str:
        return self.names[i]

    def is_bio(self) -> bool:
        return "O" in self.names and all(n == "O" or n[:2] in ("B-", "I-") and len(n) > 2 for n in self.names)


def _check_pad(H: Tensor, pad_mask) -> np.ndarray:
    b, s = H.shape[:2]
    valid = np.ones((b, s), dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if valid.shape != (b, s):
        raise DimensionError(f"pad mask {valid.shape} does not match latents {H.shape}")
    if not valid.any(axis=1).all():
        raise EmptySequenceError("cannot pool a sequence with no non-pad positions")
    return valid


def last_positions(valid: np.ndarray) -> np.ndarray:
    """Index of the final non-pad position in each row."""
    s = valid.shape[1]
    return s - 1 - np.argmax(valid[:, ::-1], axis=1)


def pool(H: Tensor, pad_mask, strategy: PoolingStrategy | str) -> Tensor:
    """Reduce (b, s, d) latents to (b, d) using only non-pad positions."""
    if H.ndim != 3:
        raise DimensionError(f"pool expects (b, s, d) latents, got {H.shape}")
    valid = _check_pad(H, pad_mask)
    strategy = PoolingStrategy(strategy)
    if strategy is PoolingStrategy.LAST:
        return T.gather_positions(H, last_positions(valid))
    if strategy is PoolingStrategy.MAX:
        return T.masked_max(H, valid)
    return T.masked_mean(H, valid)


class SequenceHead(Module):
    """Pooling followed by a linear map to ``n_labels`` logits.

    ``hidden`` > 0 inserts one tanh hidden layer before the projection.
    """

    def __init__(self, d_model: int, n_labels: int, pooling=PoolingStrategy.LAST, hidden: int = 0,
                 seed: int = 0, std: float = 0.02, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.pooling = PoolingStrategy(pooling)
        self.hidden = hidden
        if hidden:
            self.hidden_weight = Tensor((rng.standard_normal((hidden, d_model)) * std).astype(dtype), requires_grad=True)
            self.hidden_bias = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        width = hidden or d_model
        self.weight = Tensor((rng.standard_normal((n_labels, width)) * std).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_labels, dtype=dtype), requires_grad=True)

    @property
    def d_model(self) -> int:
        return self.hidden_weight.shape[1] if self.hidden else self.weight.shape[1]

    def project(self, h: Tensor) -> Tensor:
        if self.hidden:
            h = T.tanh(T.add_bias(T.linear(h, self.hidden_weight), self.hidden_bias))
        return T.add_bias(T.linear(h, self.weight), self.bias)

    def __call__(self, H: Tensor, pad_mask=None) -> Tensor:
        return sequence_logits(H, pad_mask, self)


class TokenHead(SequenceHead):
    """Per-position projection; pad positions still get logits."""

    def __init__(self, d_model: int, n_labels: int, hidden: int = 0, seed: int = 0, std: float = 0.02,
                 dtype=np.float32):
        super().__init__(d_model, n_labels, PoolingStrategy.LAST, hidden, seed, std, dtype)
        self.pooling = None

    def __call__(self, H: Tensor, pad_mask=None) -> Tensor:
        return token_logits(H, self)


def sequence_logits(H: Tensor, pad_mask, head: SequenceHead) -> Tensor:
    if H.ndim != 3 or H.shape[-1] != head.d_model:
        raise DimensionError(f"head expects width {head.d_model}, latents are {H.shape}")
    return head.project(pool(H, pad_mask, head.pooling))


def token_logits(H: Tensor, head: TokenHead) -> Tensor:
    if H.ndim != 3 or H.shape[-1] != head.d_model:
        raise DimensionError(f"head expects width {head.d_model}, latents are {H.shape}")
    return head.project(H)


def head_parameter_count(d_model: int, n_labels: int, hidden: int = 0) -> int:
    if hidden:
        return hidden * d_model + hidden + n_labels * hidden + n_labels
    return n_labels * d_model + n_labels


class Classifier(Module):
    """Decoder stack plus a sequence or token head."""

    def __init__(self, decoder: DecoderStack, head: SequenceHead):
        self.decoder = decoder
        self.head = head

    @property
    def task(self) -> str:
        return "token" if isinstance(self.head, TokenHead) else "sequence"

    def __call__(self, tokens, pad_mask=None, mode: str = "eval", rng=None) -> Tensor:
        H = self.decoder(tokens, pad_mask, mode, rng)
        return self.head(H, pad_mask)


def predict_indices(logits: Tensor | np.ndarray) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else logits
    return data.argmax(axis=-1)


def probabilities(logits: Tensor | np.ndarray) -> np.ndarray:
    data = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = data - data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def names_for(indices: Sequence[int], labels: LabelSpace) -> list[str]:
    return [labels.name(int(i)) for i in indices]
