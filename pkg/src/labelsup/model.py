"""LLaMA-shaped decoder stack with a switchable self-attention mask.

The stack is the feature extractor: it maps token ids to per-token latent
vectors after a final RMS normalisation.  ``MaskMode.CAUSAL`` reproduces the
usual decoder behaviour; ``MaskMode.UNMASKED`` drops the upper-triangular
mask in every layer so each position attends to the whole sequence.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

NEG_LARGE = -1e9


class VocabularyError(ValueError):
    pass


class LengthError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class MaskMode(str, enum.Enum):
    CAUSAL = "causal"
    UNMASKED = "unmasked"


@dataclass
class ModelConfig:
    vocab_size: int = 1024
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_seq_len: int = 64
    dropout_p: float = 0.0
    norm_epsilon: float = 1e-6
    mask_mode: MaskMode = MaskMode.CAUSAL
    position: str = "rotary"  # or "learned"
    rope_base: float = 10000.0
    init_std: float = 0.02

    def __post_init__(self):
        self.mask_mode = MaskMode(self.mask_mode)
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.position == "rotary" and (self.d_model // self.n_heads) % 2:
            raise ConfigError("rotary positions need an even head dimension")
        if self.position not in ("rotary", "learned"):
            raise ConfigError(f"unknown position scheme {self.position!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.norm_epsilon <= 0:
            raise ConfigError("norm_epsilon must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_mode"] = self.mask_mode.value
        return d


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :class:`DecoderStack`."""
    d = cfg.d_model
    per_block = 4 * d * d + 3 * d * cfg.d_ff + 2 * d
    pos = cfg.max_seq_len * d if cfg.position == "learned" else 0
    return cfg.vocab_size * d + pos + cfg.n_layers * per_block + d


# ---------------------------------------------------------------- modules

class Module:
    """Minimal container: parameters and child modules are discovered from
    instance attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    """Bias-free projection ``y = x Wᵀ`` with W of shape (d_out, d_in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float32):
        self.weight = Tensor(_normal(rng, (d_out, d_in), std, dtype), requires_grad=True)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return T.linear(x, self.weight)


class RMSNorm(Module):
    def __init__(self, d: int, eps: float, dtype=np.float32):
        self.weight = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.rms_norm(x, self.weight, self.eps)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return T.mul_const(x, keep)


# ------------------------------------------------------------------ masks

@dataclass
class AttentionMask:
    """Additive (s, s) matrix plus an optional (b, s) boolean of real tokens."""

    matrix: np.ndarray
    padding: np.ndarray | None = None

    @property
    def seq_len(self) -> int:
        return self.matrix.shape[0]

    def with_padding(self, pad_mask: np.ndarray | None) -> "AttentionMask":
        return AttentionMask(self.matrix, None if pad_mask is None else np.asarray(pad_mask, dtype=bool))

    def additive(self, dtype=np.float32) -> np.ndarray:
        """Combined mask shaped (b, 1, s, s), or (1, 1, s, s) without padding."""
        m = self.matrix.astype(dtype)[None, None]
        if self.padding is None:
            return m
        keys = np.where(self.padding, 0.0, NEG_LARGE).astype(dtype)
        return m + keys[:, None, None, :]


def build_causal_mask(seq_len: int) -> AttentionMask:
    if seq_len < 1:
        raise DimensionError(f"seq_len must be >= 1, got {seq_len}")
    upper = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
    return AttentionMask(np.where(upper, NEG_LARGE, 0.0))


def build_unmasked(seq_len: int) -> AttentionMask:
    if seq_len < 1:
        raise DimensionError(f"seq_len must be >= 1, got {seq_len}")
    return AttentionMask(np.zeros((seq_len, seq_len)))


def build_mask(mode: MaskMode, seq_len: int) -> AttentionMask:
    return build_causal_mask(seq_len) if MaskMode(mode) is MaskMode.CAUSAL else build_unmasked(seq_len)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask) -> Tensor:
    """Scaled dot-product attention over (b, h, s, d_h) tensors."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must match and be 4-d")
    b, _, s, dh = q.shape
    if mask.seq_len != s:
        raise DimensionError(f"attention: mask is {mask.seq_len}x{mask.seq_len} but sequence length is {s}")
    if mask.padding is not None and mask.padding.shape != (b, s):
        raise DimensionError(f"attention: padding mask {mask.padding.shape} vs batch {(b, s)}")
    return T.matmul(attention_weights(q, k, mask), v)


def attention_weights(q: Tensor, k: Tensor, mask: AttentionMask) -> Tensor:
    """Row-stochastic (b, h, s, s) weights ``softmax(q kᵀ / √d_h + mask)``."""
    dh = q.shape[-1]
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    return T.softmax(T.add_const(scores, mask.additive(q.dtype)))


def rotary_tables(seq_len: int, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = 1.0 / base ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


# ----------------------------------------------------------------- blocks

class SelfAttention(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        d = cfg.d_model
        self.query = Linear(d, d, rng, cfg.init_std, dtype)
        self.key = Linear(d, d, rng, cfg.init_std, dtype)
        self.value = Linear(d, d, rng, cfg.init_std, dtype)
        self.output = Linear(d, d, rng, cfg.init_std, dtype)
        self.n_heads = cfg.n_heads

    def _split(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        return T.transpose(T.reshape(x, (b, s, self.n_heads, d // self.n_heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: AttentionMask, rope, rng) -> Tensor:
        b, s, d = x.shape
        q = self._split(self.query(x, rng))
        k = self._split(self.key(x, rng))
        v = self._split(self.value(x, rng))
        if rope is not None:
            cos, sin = rope
            q = T.rotary(q, cos, sin)
            k = T.rotary(k, cos, sin)
        y = attention(q, k, v, mask)
        y = T.reshape(T.transpose(y, (0, 2, 1, 3)), (b, s, d))
        return self.output(y, rng)


class FeedForward(Module):
    """SiLU-gated feed-forward: ``down(silu(gate(x)) * up(x))``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        self.gate = Linear(cfg.d_model, cfg.d_ff, rng, cfg.init_std, dtype)
        self.up = Linear(cfg.d_model, cfg.d_ff, rng, cfg.init_std, dtype)
        self.down = Linear(cfg.d_ff, cfg.d_model, rng, cfg.init_std, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.mul(T.silu(self.gate(x)), self.up(x)))


class DecoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        self.attn_norm = RMSNorm(cfg.d_model, cfg.norm_epsilon, dtype)
        self.attn = SelfAttention(cfg, rng, dtype)
        self.ffn_norm = RMSNorm(cfg.d_model, cfg.norm_epsilon, dtype)
        self.ffn = FeedForward(cfg, rng, dtype)
        self.dropout_p = cfg.dropout_p

    def __call__(self, x: Tensor, mask: AttentionMask, rope, rng) -> Tensor:
        h = T.add(x, dropout(self.attn(self.attn_norm(x), mask, rope, rng), self.dropout_p, rng))
        return T.add(h, dropout(self.ffn(self.ffn_norm(h)), self.dropout_p, rng))


class DecoderStack(Module):
    """Token embedding, ``n_layers`` pre-norm decoder blocks, final RMS norm."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.dtype = np.dtype(dtype)
        self.embed = Tensor(_normal(rng, (cfg.vocab_size, cfg.d_model), cfg.init_std, dtype), requires_grad=True)
        if cfg.position == "learned":
            self.pos_embed = Tensor(_normal(rng, (cfg.max_seq_len, cfg.d_model), cfg.init_std, dtype),
                                    requires_grad=True)
        self.blocks = [DecoderBlock(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.final_norm = RMSNorm(cfg.d_model, cfg.norm_epsilon, dtype)
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _rope(self, s: int):
        if self.config.position != "rotary":
            return None
        if s not in self._rope_cache:
            self._rope_cache[s] = rotary_tables(s, self.config.head_dim, self.config.rope_base, self.dtype)
        return self._rope_cache[s]

    def __call__(self, tokens, pad_mask=None, mode: str = "eval", rng=None) -> Tensor:
        return self.forward(tokens, pad_mask, mode, rng)

    def forward(self, tokens, pad_mask=None, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        """Latent representations of shape (b, s, d_model).

        ``pad_mask`` is True at real tokens.  In ``"train"`` mode dropout draws
        from ``rng``; ``"eval"`` mode is deterministic.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be (batch, seq), got shape {tokens.shape}")
        b, s = tokens.shape
        if s > cfg.max_seq_len:
            raise LengthError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise VocabularyError(f"token id outside [0, {cfg.vocab_size})")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mode == "eval":
            rng = None
        elif rng is None:
            rng = np.random.default_rng(0)

        x = T.take_rows(self.embed, tokens)
        if cfg.position == "learned":
            x = T.add(x, T.reshape(T.take_rows(self.pos_embed, np.tile(np.arange(s), (b, 1))), (b, s, cfg.d_model)))
        mask = build_mask(cfg.mask_mode, s).with_padding(pad_mask)
        rope = self._rope(s)
        for block in self.blocks:
            x = block(x, mask, rope, rng)
        return self.final_norm(x)
