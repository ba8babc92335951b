"""Sectioned binary checkpoints.

Layout (all integers little-endian)::

    b"LSUL"  u16 version
    u32 header length, UTF-8 JSON header (configs, labels, vocabulary, counters)
    u32 tensor count, then per tensor:
        u16 name length, UTF-8 name, u8 ndim, u32 × ndim shape, float32 payload
    u32 CRC-32 of every preceding byte

Adapter tensors live beside the weights they modify, e.g.
``decoder.blocks.0.attn.query.lora_A``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .heads import Classifier, LabelSpace, SequenceHead, TokenHead
from .lora import LoraConfig, inject
from .model import DecoderStack, ModelConfig

MAGIC = b"LSUL"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class IntegrityError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    labels: LabelSpace
    vocab: Vocabulary
    task: str
    tensors: dict[str, np.ndarray]
    pooling: str | None = "last"
    head_hidden: int = 0
    lora: LoraConfig | None = None
    max_len: int = 64
    seed: int = 0
    step: int = 0
    version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Classifier, vocab: Vocabulary, labels: LabelSpace, max_len: int = 64,
                   seed: int = 0, step: int = 0, **extra) -> "Checkpoint":
        tensors = {name: p.data for name, p in model.named_parameters()}
        return cls(
            model_config=model.decoder.config,
            labels=labels,
            vocab=vocab,
            task=model.task,
            tensors=tensors,
            pooling=None if model.task == "token" else model.head.pooling.value,
            head_hidden=model.head.hidden,
            lora=getattr(model.decoder, "lora_config", None),
            max_len=max_len,
            seed=seed,
            step=step,
            extra=extra,
        )

    def header(self) -> dict:
        return {
            "model_config": self.model_config.to_dict(),
            "labels": list(self.labels.names),
            "ignore_index": self.labels.ignore_index,
            "vocab": self.vocab.to_list(),
            "task": self.task,
            "pooling": self.pooling,
            "head_hidden": self.head_hidden,
            "lora": None if self.lora is None else self.lora.to_dict(),
            "max_len": self.max_len,
            "seed": self.seed,
            "step": self.step,
            "extra": self.extra,
        }

    def build_model(self) -> Classifier:
        """Instantiate a classifier and load every stored tensor into it."""
        dec = DecoderStack(self.model_config, seed=self.seed)
        d, c = self.model_config.d_model, len(self.labels)
        if self.task == "token":
            head = TokenHead(d, c, hidden=self.head_hidden)
        else:
            head = SequenceHead(d, c, self.pooling, hidden=self.head_hidden)
        model = Classifier(dec, head)
        model.ignore_index = self.labels.ignore_index
        if self.lora is not None:
            inject(model, self.lora)
        params = dict(model.named_parameters())
        if set(params) != set(self.tensors):
            missing = sorted(set(params) - set(self.tensors))
            unexpected = sorted(set(self.tensors) - set(params))
            raise IntegrityError(f"tensor table mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in params.items():
            arr = self.tensors[name]
            if arr.shape != p.shape:
                raise IntegrityError(f"{name}: stored shape {arr.shape}, model expects {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        return model

    def n_lora_entries(self) -> int:
        return sum(1 for n in self.tensors if ".lora_" in n)


def save_checkpoint(state: Checkpoint, path) -> None:
    header = json.dumps(state.header(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", state.version), struct.pack("<I", len(header)), header,
             struct.pack("<I", len(state.tensors))]
    for name, arr in state.tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    if len(buf) < 10:
        raise IntegrityError(f"{path}: truncated")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise IntegrityError(f"{path}: checksum mismatch (file corrupt or truncated)")
    r.buf = buf[:-4]
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable header: {exc}") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.buf):
        raise IntegrityError(f"{path}: {len(r.buf) - r.pos} trailing bytes after tensor table")
    lora = header.get("lora")
    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]),
        labels=LabelSpace(tuple(header["labels"]), header["ignore_index"]),
        vocab=Vocabulary(header["vocab"]),
        task=header["task"],
        tensors=tensors,
        pooling=header.get("pooling"),
        head_hidden=header.get("head_hidden", 0),
        lora=None if lora is None else LoraConfig(**lora),
        max_len=header["max_len"],
        seed=header["seed"],
        step=header["step"],
        version=version,
        extra=header.get("extra", {}),
    )


def describe(state: Checkpoint) -> dict:
    out = state.header()
    out["vocab_size_used"] = len(state.vocab)
    out.pop("vocab")
    out["version"] = state.version
    out["tensors"] = {name: list(arr.shape) for name, arr in state.tensors.items()}
    out["n_tensors"] = len(state.tensors)
    out["n_lora_tensors"] = state.n_lora_entries()
    out["n_lora_layers"] = out["n_lora_tensors"] // 2
    return out

