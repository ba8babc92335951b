"""Command-line entry point.

Configuration is a flat YAML mapping of ``key: value`` pairs; relative paths
are resolved against the config file's directory.  ``--set key=value`` flags
override file values.  Every artifact is written under ``output_dir``.

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical
divergence, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, describe, load_checkpoint, save_checkpoint
from .data import (ParseError, SchemaError, SequenceExample, TokenExample, build_vocab, read_classification,
                   read_conll, repair_bio)
from .heads import Classifier, LabelSpace, PoolingStrategy, SequenceHead, TokenHead, head_parameter_count, probabilities
from .lora import LoraConfig, inject
from .model import ConfigError, DecoderStack, LengthError, MaskMode, ModelConfig, VocabularyError, parameter_count
from .trainer import (Dataset, DivergenceError, TrainConfig, evaluate, evaluate_ner, evaluate_sequence, predict_tags,
                      train, write_metrics_csv)

logger = logging.getLogger("labelsup")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.lsul"


class DataError(ValueError):
    pass


class CompatibilityError(DataError):
    pass


@dataclass
class RunConfig:
    task: str = "sequence"
    train_path: str | None = None
    eval_path: str | None = None
    format: str | None = None
    text_col: str = "text"
    label_col: str = "label"
    output_dir: str = "runs/default"
    max_vocab: int = 1024
    max_len: int = 64
    # model
    vocab_size: int = 1024
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_seq_len: int = 64
    dropout_p: float = 0.0
    norm_epsilon: float = 1e-6
    mask_mode: str = "causal"
    position: str = "rotary"
    # adapters
    lora_rank: int = 12
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1
    lora_targets: list[str] = field(default_factory=lambda: ["query", "value"])
    full_finetune: bool = False
    # head
    pooling: str = "last"
    head_hidden: int = 0
    # optimisation
    batch_size: int = 8
    learning_rate: float = 8e-5
    max_steps: int | None = None
    epochs: int = 1
    log_every: int = 100
    seed: int = 0
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    # reporting
    repeats: int = 1
    metrics_wallclock: bool = False

    @classmethod
    def from_mapping(cls, values: dict, base_dir: Path | None = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        values = dict(values)
        if isinstance(values.get("lora_targets"), str):
            values["lora_targets"] = [t.strip() for t in values["lora_targets"].split(",") if t.strip()]
        cfg = cls(**values)
        if base_dir is not None:
            for key in ("train_path", "eval_path", "output_dir"):
                val = getattr(cfg, key)
                if val is not None and not Path(val).is_absolute():
                    setattr(cfg, key, str(base_dir / val))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.task not in ("sequence", "token"):
            raise ConfigError(f"task must be 'sequence' or 'token', got {self.task!r}")
        if self.format is None:
            self.format = "conll" if self.task == "token" else "csv"
        if (self.task == "token") != (self.format == "conll"):
            raise ConfigError(f"format {self.format!r} does not fit task {self.task!r}")
        if self.format not in ("csv", "tsv", "conll"):
            raise ConfigError(f"format must be csv, tsv or conll, got {self.format!r}")
        for key in ("train_path", "eval_path"):
            val = getattr(self, key)
            if val is not None and not Path(val).is_file():
                raise ConfigError(f"{key}: file {val} does not exist")
        if self.max_vocab > self.vocab_size:
            raise ConfigError(f"max_vocab ({self.max_vocab}) exceeds vocab_size ({self.vocab_size})")
        if self.max_len > self.max_seq_len:
            raise ConfigError(f"max_len ({self.max_len}) exceeds max_seq_len ({self.max_seq_len})")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        for key, enum in (("pooling", PoolingStrategy), ("mask_mode", MaskMode)):
            try:
                enum(getattr(self, key))
            except ValueError:
                choices = ", ".join(e.value for e in enum)
                raise ConfigError(f"{key} must be one of {choices}, got {getattr(self, key)!r}") from None
        # constructing the component configs runs their field checks
        self.model_config()
        self.train_config()

    def model_config(self, **overrides) -> ModelConfig:
        kw = dict(vocab_size=self.vocab_size, d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
                  d_ff=self.d_ff, max_seq_len=self.max_seq_len, dropout_p=self.dropout_p,
                  norm_epsilon=self.norm_epsilon, mask_mode=self.mask_mode, position=self.position)
        kw.update(overrides)
        return ModelConfig(**kw)

    def lora_config(self) -> LoraConfig | None:
        if self.full_finetune:
            return None
        return LoraConfig(self.lora_rank, self.lora_alpha, self.lora_dropout, tuple(self.lora_targets))

    def train_config(self, **overrides) -> TrainConfig:
        kw = dict(batch_size=self.batch_size, learning_rate=self.learning_rate, max_steps=self.max_steps,
                  epochs=self.epochs, log_every=self.log_every, seed=self.seed,
                  betas=(self.adam_beta1, self.adam_beta2), adam_epsilon=self.adam_epsilon,
                  weight_decay=self.weight_decay, mask_mode=self.mask_mode, pooling=self.pooling,
                  lora=self.lora_config(), full_finetune=self.full_finetune)
        kw.update(overrides)
        return TrainConfig(**kw)


def _parse_value(text: str):
    return yaml.safe_load(text)


def load_run_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    path = Path(path)
    try:
        values = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a key-value mapping")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, val = item.split("=", 1)
        values[key.strip()] = _parse_value(val)
    try:
        return RunConfig.from_mapping(values, path.parent)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# -------------------------------------------------------------------- data

def _read_examples(path, cfg: RunConfig) -> list:
    try:
        if cfg.format == "conll":
            return read_conll(path).examples
        return read_classification(path, cfg.format, cfg.text_col, cfg.label_col).examples
    except (ParseError, SchemaError, UnicodeDecodeError) as exc:
        raise DataError(str(exc)) from None


def load_task_data(cfg: RunConfig) -> tuple[Dataset, Dataset | None]:
    if cfg.train_path is None:
        raise ConfigError("train_path is required")
    train_ex = _read_examples(cfg.train_path, cfg)
    if not train_ex:
        raise DataError(f"{cfg.train_path}: no examples")
    eval_ex = _read_examples(cfg.eval_path, cfg) if cfg.eval_path else None
    if cfg.task == "token":
        names = [t for ex in train_ex for t in ex.tags]
        if "O" not in names:
            names.insert(0, "O")
        labels = LabelSpace.from_labels(names)
    else:
        labels = LabelSpace.from_labels(ex.label for ex in train_ex)
    vocab = build_vocab(train_ex, cfg.max_vocab)
    train_ds = Dataset(train_ex, vocab, labels, cfg.max_len)
    eval_ds = None
    if eval_ex is not None:
        _check_labels(eval_ex, labels)
        eval_ds = Dataset(eval_ex, vocab, labels, cfg.max_len)
    return train_ds, eval_ds


def _check_labels(examples, labels: LabelSpace) -> None:
    for ex in examples:
        names = ex.tags if isinstance(ex, TokenExample) else [ex.label]
        for n in names:
            if n not in labels:
                raise CompatibilityError(f"label {n!r} is not in the trained label space {list(labels.names)}")


def build_classifier(cfg: RunConfig, n_labels: int, mask_mode=None, pooling=None) -> Classifier:
    mcfg = cfg.model_config(**({} if mask_mode is None else {"mask_mode": mask_mode}))
    dec = DecoderStack(mcfg, seed=cfg.seed)
    if cfg.task == "token":
        head = TokenHead(mcfg.d_model, n_labels, hidden=cfg.head_hidden, seed=cfg.seed + 1)
    else:
        head = SequenceHead(mcfg.d_model, n_labels, pooling or cfg.pooling, hidden=cfg.head_hidden,
                            seed=cfg.seed + 1)
    model = Classifier(dec, head)
    lcfg = cfg.lora_config()
    if lcfg is not None:
        inject(model, lcfg, seed=cfg.seed + 2)
    return model


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _count_trainable(model: Classifier) -> int:
    return int(sum(p.data.size for p in model.parameters() if p.requires_grad))


def run_training(cfg: RunConfig, out: Path, mask_mode=None, pooling=None, seed=None):
    """Train one model; writes ``metrics.csv`` into ``out`` (also on divergence)."""
    if seed is not None and seed != cfg.seed:
        cfg = RunConfig(**{**cfg.__dict__, "seed": seed})
    train_ds, eval_ds = load_task_data(cfg)
    model = build_classifier(cfg, len(train_ds.labels), mask_mode, pooling)
    tcfg = cfg.train_config()
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        model, records = train(model, train_ds, tcfg, eval_ds)
    except DivergenceError as exc:
        write_metrics_csv(out / "metrics.csv", exc.records, cfg.metrics_wallclock)
        raise
    write_metrics_csv(out / "metrics.csv", records, cfg.metrics_wallclock)
    return model, records, train_ds, eval_ds, time.perf_counter() - start


# ---------------------------------------------------------------- commands

def cmd_train(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    model, records, train_ds, eval_ds, seconds = run_training(cfg, out)
    step = records[-1].step if records else 0
    state = Checkpoint.from_model(model, train_ds.vocab, train_ds.labels, cfg.max_len, cfg.seed, step)
    save_checkpoint(state, out / CHECKPOINT_NAME)
    train_ds.vocab.save(out / "vocab.txt")
    _, train_metric = evaluate(model, train_ds)
    eval_metric = evaluate(model, eval_ds)[1] if eval_ds is not None else None
    summary = {
        "task": cfg.task,
        "metric": "f1" if cfg.task == "token" and train_ds.labels.is_bio() else "accuracy",
        "final_metric": eval_metric if eval_metric is not None else train_metric,
        "train_metric": train_metric,
        "eval_metric": eval_metric,
        "steps": step,
        "parameters": {
            "decoder": parameter_count(model.decoder.config),
            "head": head_parameter_count(model.decoder.config.d_model, len(train_ds.labels), cfg.head_hidden),
            "trainable": _count_trainable(model),
        },
        "wall_clock_seconds": seconds,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


def _probe_input(path, task: str, cfg_like, filler_tag: str = "O") -> list:
    """Read predict/eval input; token tasks accept one- or two-column CoNLL."""
    if task == "token":
        if str(path).endswith((".csv", ".tsv")):
            raise CompatibilityError("token-task checkpoint needs CoNLL input")
        examples, toks = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(list(fh) + [""], 1):
                line = raw.strip()
                if line.startswith("-DOCSTART-"):
                    continue
                if not line:
                    if toks:
                        examples.append(TokenExample(toks, [filler_tag] * len(toks)))
                    toks = []
                    continue
                parts = line.split()
                if len(parts) > 2:
                    raise DataError(f"{path}:{lineno}: expected 'token [tag]'")
                toks.append(parts[0])
        return examples
    if str(path).endswith(".conll"):
        raise CompatibilityError("sequence-task checkpoint needs CSV/TSV input")
    fmt = "tsv" if str(path).endswith(".tsv") else "csv"
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh, delimiter="," if fmt == "csv" else "\t")
            if cfg_like.text_col not in (reader.fieldnames or []):
                raise SchemaError(f"{path}: missing column {cfg_like.text_col!r}")
            return [SequenceExample(row[cfg_like.text_col] or "", row.get(cfg_like.label_col) or "")
                    for row in reader]
    except SchemaError as exc:
        raise DataError(str(exc)) from None


def _load_model(path) -> tuple[Checkpoint, Classifier]:
    state = load_checkpoint(path)
    if len(state.vocab) > state.model_config.vocab_size:
        raise CompatibilityError(
            f"checkpoint vocabulary has {len(state.vocab)} entries but the model embeds {state.model_config.vocab_size}")
    return state, state.build_model()


def cmd_predict(checkpoint, input_path, output_dir, text_col: str = "text", label_col: str = "label") -> Path:
    state, model = _load_model(checkpoint)
    cols = argparse.Namespace(text_col=text_col, label_col=label_col)
    examples = _probe_input(input_path, state.task, cols, state.labels.name(0))
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if state.task == "token":
        ds = Dataset(examples, state.vocab, state.labels, state.max_len)
        _, pred = predict_tags(model, ds)
        target = out / "predictions.conll"
        with open(target, "w", encoding="utf-8") as fh:
            for ex, tags in zip(examples, pred):
                tags, _ = repair_bio(tags + ["O"] * (len(ex.tokens) - len(tags)))
                for tok, tag in zip(ex.tokens, tags):
                    fh.write(f"{tok} {tag}\n")
                fh.write("\n")
        return target
    target = out / "predictions.jsonl"
    fake = [SequenceExample(ex.text, state.labels.name(0)) for ex in examples]
    ds = Dataset(fake, state.vocab, state.labels, state.max_len)
    with open(target, "w", encoding="utf-8") as fh, T.no_grad():
        k = 0
        for batch in ds.batches(32):
            probs = probabilities(model(batch.tokens, batch.pad_mask, "eval"))
            for row in probs:
                rec = {"text": examples[k].text, "label": state.labels.name(int(row.argmax())),
                       "probabilities": {n: float(p) for n, p in zip(state.labels.names, row)}}
                fh.write(json.dumps(rec) + "\n")
                k += 1
    return target


def cmd_eval(checkpoint, data_path, output_dir, text_col: str = "text", label_col: str = "label") -> dict:
    state, model = _load_model(checkpoint)
    if state.task == "token":
        try:
            examples = read_conll(data_path).examples
        except ParseError as exc:
            raise DataError(str(exc)) from None
    else:
        fmt = "tsv" if str(data_path).endswith(".tsv") else "csv"
        try:
            examples = read_classification(data_path, fmt, text_col, label_col).examples
        except SchemaError as exc:
            raise DataError(str(exc)) from None
    if not examples:
        raise DataError(f"{data_path}: no examples")
    _check_labels(examples, state.labels)
    ds = Dataset(examples, state.vocab, state.labels, state.max_len)
    loss, metric = evaluate(model, ds)
    result = {"loss": loss, "metric": metric, "n_examples": len(examples)}
    if state.task == "token" and state.labels.is_bio():
        scores = evaluate_ner(model, ds)
        result.update(f1=scores.f1, precision=scores.precision, recall=scores.recall,
                      token_accuracy=scores.token_accuracy)
    elif state.task == "sequence":
        result["accuracy"] = metric
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return result


def cmd_ablate_pooling(cfg: RunConfig) -> list[dict]:
    """Train every pooling strategy with and without the causal mask; write a
    3 × 2 accuracy table to ``pooling_ablation.csv``."""
    if cfg.task != "sequence":
        raise ConfigError("ablate-pooling needs a sequence-classification task")
    out = _out_dir(cfg)
    modes = [m.value for m in MaskMode]
    rows = []
    for strat in PoolingStrategy:
        row: dict = {"pooling": strat.value}
        for mode in modes:
            scores = []
            for rep in range(cfg.repeats):
                cell = out / "pooling" / f"{mode}_{strat.value}" / (f"rep{rep}" if cfg.repeats > 1 else "")
                model, _, train_ds, eval_ds, _ = run_training(cfg, cell, mode, strat.value, cfg.seed + rep)
                scores.append(evaluate_sequence(model, eval_ds if eval_ds is not None else train_ds))
            row[mode] = float(np.mean(scores))
            if cfg.repeats > 1:
                row[f"{mode}_std"] = float(np.std(scores))
        rows.append(row)
    cols = ["pooling"] + [c for m in modes for c in ([m, f"{m}_std"] if cfg.repeats > 1 else [m])]
    _write_table(out / "pooling_ablation.csv", cols, rows)
    return rows


def cmd_ablate_mask(cfg: RunConfig) -> list[dict]:
    """Train the causal and unmasked variants identically and tabulate
    entity F1, precision, recall and token accuracy plus their difference."""
    if cfg.task != "token":
        raise ConfigError("ablate-mask needs a token-classification task")
    out = _out_dir(cfg)
    rows = []
    for mode in MaskMode:
        per_rep = []
        for rep in range(cfg.repeats):
            cell = out / "mask" / mode.value / (f"rep{rep}" if cfg.repeats > 1 else "")
            model, _, train_ds, eval_ds, _ = run_training(cfg, cell, mode.value, None, cfg.seed + rep)
            ds = eval_ds if eval_ds is not None else train_ds
            if ds.labels.is_bio():
                per_rep.append(evaluate_ner(model, ds))
            else:
                gold, pred = predict_tags(model, ds)
                flat_g = [t for s in gold for t in s]
                acc = sum(a == b for a, b in zip(flat_g, [t for s in pred for t in s])) / len(flat_g)
                per_rep.append((float("nan"), float("nan"), float("nan"), acc))
        arr = np.array([tuple(s) for s in per_rep], dtype=float)
        mean = arr.mean(axis=0)
        rows.append({"variant": mode.value, "f1": mean[0], "precision": mean[1], "recall": mean[2],
                     "token_accuracy": mean[3]})
    diff = {"variant": "unmasked_minus_causal"}
    for key in ("f1", "precision", "recall", "token_accuracy"):
        diff[key] = rows[1][key] - rows[0][key]
    rows.append(diff)
    _write_table(out / "mask_ablation.csv", ["variant", "f1", "precision", "recall", "token_accuracy"], rows)
    return rows


def _write_table(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], str) else repr(float(row[c])) for c in columns])


def cmd_inspect(checkpoint) -> dict:
    return describe(load_checkpoint(checkpoint))


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="labelsup", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("config", help="YAML key-value run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir")
        sp.add_argument("--repeats", type=int)
        return sp

    with_config("train", "finetune a classifier and save a checkpoint")
    with_config("ablate-pooling", "last/max/average pooling x causal/unmasked table")
    with_config("ablate-mask", "causal vs unmasked token-classification comparison")

    for name, help in (("eval", "score a checkpoint on labelled data"), ("predict", "label new inputs")):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("checkpoint")
        sp.add_argument("input")
        sp.add_argument("--output-dir", required=True)
        sp.add_argument("--text-col", default="text")
        sp.add_argument("--label-col", default="label")

    sp = sub.add_parser("inspect-checkpoint", help="print a checkpoint's header and tensor table")
    sp.add_argument("checkpoint")
    return p


def _config_from_args(args) -> RunConfig:
    overrides = list(args.overrides)
    for key in ("seed", "output_dir", "repeats"):
        val = getattr(args, key, None)
        if key == "output_dir" and val is not None:
            val = Path(val).resolve()
        if val is not None:
            overrides.append(f"{key}={val}")
    return load_run_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            print(json.dumps(cmd_train(_config_from_args(args)), indent=2))
        elif args.command == "ablate-pooling":
            rows = cmd_ablate_pooling(_config_from_args(args))
            print(json.dumps(rows, indent=2))
        elif args.command == "ablate-mask":
            print(json.dumps(cmd_ablate_mask(_config_from_args(args)), indent=2))
        elif args.command == "eval":
            print(json.dumps(cmd_eval(args.checkpoint, args.input, args.output_dir, args.text_col, args.label_col),
                             indent=2))
        elif args.command == "predict":
            print(cmd_predict(args.checkpoint, args.input, args.output_dir, args.text_col, args.label_col))
        elif args.command == "inspect-checkpoint":
            print(json.dumps(cmd_inspect(args.checkpoint), indent=2))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, VocabularyError, LengthError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
