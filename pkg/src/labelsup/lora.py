"""Low-rank adapters for the attention projections of a :class:`DecoderStack`."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import ConfigError, DecoderStack, Linear, Module, dropout
from .tensor import Tensor

PROJECTIONS = ("query", "key", "value", "output")


class LoraStateError(RuntimeError):
    """Raised when adapter-only operations are used on an un-injected model."""


@dataclass
class LoraConfig:
    rank: int = 12
    alpha: float = 32.0
    dropout_p: float = 0.1
    target_projections: tuple[str, ...] = field(default=("query", "value"))

    def __post_init__(self):
        self.target_projections = tuple(self.target_projections)
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if not self.alpha > 0:
            raise ConfigError(f"LoRA alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"LoRA dropout must lie in [0, 1), got {self.dropout_p}")
        if not self.target_projections:
            raise ConfigError("LoRA needs at least one target projection")
        unknown = set(self.target_projections) - set(PROJECTIONS)
        if unknown:
            raise ConfigError(f"unknown LoRA targets {sorted(unknown)}; choose from {PROJECTIONS}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_projections"] = list(self.target_projections)
        return d


class LoraLinear(Module):
    """``y = x Wᵀ + scale · dropout(x) Aᵀ Bᵀ`` with W frozen.

    B starts at zero so a freshly wrapped layer reproduces the base layer.
    """

    def __init__(self, base: Linear, rank: int, alpha: float, dropout_p: float, rng: np.random.Generator):
        self.weight = base.weight
        self.weight.requires_grad = False
        d_out, d_in = self.weight.shape
        dtype = self.weight.dtype
        self.lora_A = Tensor((rng.standard_normal((rank, d_in)) / np.sqrt(d_in)).astype(dtype), requires_grad=True)
        self.lora_B = Tensor(np.zeros((d_out, rank), dtype=dtype), requires_grad=True)
        self.scale = alpha / rank
        self.dropout_p = dropout_p

    @property
    def rank(self) -> int:
        return self.lora_A.shape[0]

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        base = T.linear(x, self.weight)
        delta = T.linear(T.linear(dropout(x, self.dropout_p, rng), self.lora_A), self.lora_B)
        return T.add(base, T.mul(delta, self.scale))


def _decoder(model) -> DecoderStack:
    return model if isinstance(model, DecoderStack) else model.decoder


def inject(model, cfg: LoraConfig, seed: int = 0):
    """Wrap the targeted attention projections of every block with adapters
    and freeze all decoder weights.  Works on a :class:`DecoderStack` or on a
    classifier exposing ``.decoder``; head parameters are left trainable.
    Mutates and returns ``model``."""
    if not cfg.target_projections:
        raise ConfigError("LoRA needs at least one target projection")
    dec = _decoder(model)
    if getattr(dec, "lora_config", None) is not None:
        raise LoraStateError("model already carries LoRA adapters")
    rng = np.random.default_rng(seed)
    for p in dec.parameters():
        p.requires_grad = False
    for block in dec.blocks:
        for name in cfg.target_projections:
            base = getattr(block.attn, name, None)
            if not isinstance(base, Linear):
                raise ConfigError(f"block has no plain projection named {name!r}")
            setattr(block.attn, name, LoraLinear(base, cfg.rank, cfg.alpha, cfg.dropout_p, rng))
    dec.lora_config = cfg
    return model


def is_injected(model) -> bool:
    return getattr(_decoder(model), "lora_config", None) is not None


def trainable_parameters(model) -> list[Tensor]:
    """Adapter matrices plus head parameters, in definition order."""
    if not is_injected(model):
        raise LoraStateError("trainable_parameters() requires a model with LoRA adapters injected")
    return [p for p in model.parameters() if p.requires_grad]


def lora_layers(model) -> list[tuple[str, LoraLinear]]:
    out = []
    for i, block in enumerate(_decoder(model).blocks):
        for name in PROJECTIONS:
            layer = getattr(block.attn, name)
            if isinstance(layer, LoraLinear):
                out.append((f"blocks.{i}.attn.{name}", layer))
    return out


def expected_trainable_count(model_cfg, lora_cfg: LoraConfig, head_params: int) -> int:
    d = model_cfg.d_model
    return model_cfg.n_layers * len(lora_cfg.target_projections) * lora_cfg.rank * (d + d) + head_params


def merge(layer: LoraLinear) -> Tensor:
    """Fold the adapter into a plain weight ``W + scale · B A``."""
    if not isinstance(layer, LoraLinear):
        return Tensor(layer.weight.data.copy())
    delta = (layer.lora_B.data @ layer.lora_A.data) * layer.scale
    return Tensor((layer.weight.data + delta).astype(layer.weight.dtype))
