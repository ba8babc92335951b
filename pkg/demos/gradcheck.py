"""Finite-difference check of a small float64 classifier, parameter by parameter."""

import numpy as np

from labelsup import tensor as T
from labelsup.heads import Classifier, SequenceHead
from labelsup.lora import LoraConfig, inject
from labelsup.model import DecoderStack, ModelConfig
from labelsup.tensor import finite_difference_check

cfg = ModelConfig(vocab_size=13, d_model=8, n_heads=2, n_layers=2, d_ff=12, max_seq_len=8, mask_mode="unmasked")
model = Classifier(DecoderStack(cfg, seed=0, dtype=np.float64), SequenceHead(8, 3, "max", seed=1, dtype=np.float64))
inject(model, LoraConfig(rank=2, dropout_p=0.0))
rng = np.random.default_rng(0)
for p in model.parameters():
    p.data += rng.normal(0, 0.1, p.shape)  # B starts at zero; perturb so adapters carry gradient

tokens = np.array([[2, 5, 7, 0], [2, 11, 3, 6]])
labels = np.array([2, 0])

worst = 0.0
for name, p in model.named_parameters():
    flag = p.requires_grad
    err = finite_difference_check(lambda _: T.cross_entropy(model(tokens, tokens != 0), labels), p)
    p.requires_grad = flag
    worst = max(worst, err)
    print(f"{name:32s} {err:.2e}")
print(f"worst relative error {worst:.2e}")
