"""Classification finetuning of a small decoder-only transformer with LoRA adapters.

Final-layer token representations are pooled (sequence tasks) or used
per position (token tasks), projected onto a label space, and trained with
cross-entropy through low-rank adapters.  The self-attention mask can be
causal or removed entirely.
"""

from .data import LabeledBatch, SequenceExample, TokenExample, Vocabulary, collate, read_classification, read_conll, tokenize, write_conll
from .heads import Classifier, LabelSpace, PoolingStrategy, SequenceHead, TokenHead, pool, sequence_logits, token_logits
from .lora import LoraConfig, LoraLinear, inject, merge, trainable_parameters
from .metrics import entity_scores
from .model import AttentionMask, DecoderStack, MaskMode, ModelConfig, attention, build_causal_mask, build_unmasked
from .tensor import Tensor, cross_entropy, finite_difference_check, matmul, no_grad, softmax
from .trainer import AdamW, Dataset, MetricsRecord, TrainConfig, adamw_step, evaluate_ner, evaluate_sequence, train

__version__ = "0.1.0"
