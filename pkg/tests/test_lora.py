import numpy as np
import pytest

from conftest import make_classifier, make_dataset
from labelsup import tensor as T
from labelsup.heads import head_parameter_count
from labelsup.lora import (
    LoraConfig,
    LoraLinear,
    LoraStateError,
    expected_trainable_count,
    inject,
    is_injected,
    lora_layers,
    merge,
    trainable_parameters,
)
from labelsup.model import ConfigError, DecoderStack, Linear, ModelConfig
from labelsup.synthetic import final_word_task
from labelsup.tensor import Tensor
from labelsup.trainer import TrainConfig, batch_loss, train


def snapshot(model, frozen_only=False):
    return {n: p.data.copy() for n, p in model.named_parameters() if not (frozen_only and p.requires_grad)}


def test_default_config():
    cfg = LoraConfig()
    assert (cfg.rank, cfg.alpha, cfg.dropout_p) == (12, 32.0, 0.1)
    assert cfg.target_projections == ("query", "value")


def test_scale_is_eight_thirds():
    assert LoraConfig(rank=12, alpha=32).scale == pytest.approx(8 / 3, rel=0, abs=1e-15)


@pytest.mark.parametrize("kwargs", [dict(rank=0), dict(alpha=0.0), dict(alpha=-1.0), dict(dropout_p=1.0),
                                    dict(target_projections=()), dict(target_projections=("gate",))])
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        LoraConfig(**kwargs)


@pytest.mark.parametrize("task", ["sequence", "token"])
def test_injection_is_identity_before_training(toy_config, task):
    model = make_classifier(toy_config, n_labels=3, task=task, seed=5)
    toks = np.random.default_rng(0).integers(3, toy_config.vocab_size, (4, 9))
    before = model(toks).data.copy()
    inject(model, LoraConfig(target_projections=("query", "key", "value", "output")))
    after = model(toks).data
    assert np.abs(after - before).max() <= 1e-6


def test_injection_freezes_decoder_only(small_config):
    model = make_classifier(small_config)
    inject(model, LoraConfig())
    for name, p in model.named_parameters():
        if name.startswith("head."):
            assert p.requires_grad, name
        elif ".lora_" in name:
            assert p.requires_grad, name
        else:
            assert not p.requires_grad, name


def test_trainable_parameters_are_adapters_and_head(small_config):
    model = make_classifier(small_config)
    inject(model, LoraConfig(rank=4))
    trainable = {id(p) for p in trainable_parameters(model)}
    expected = {id(p) for n, p in model.named_parameters() if ".lora_" in n or n.startswith("head.")}
    assert trainable == expected


def test_toy_trainable_count(toy_config):
    model = make_classifier(toy_config, n_labels=2)
    inject(model, LoraConfig())
    enumerated = sum(p.data.size for p in trainable_parameters(model))
    # 2 layers * {q, v} * 12 * (64 + 64), plus a 2x64 head with bias
    assert enumerated == 2 * 2 * 12 * 128 + 2 * 64 + 2
    assert enumerated == expected_trainable_count(toy_config, LoraConfig(), head_parameter_count(64, 2))


@pytest.mark.parametrize("rank", [1, 4, 12])
@pytest.mark.parametrize("d_model", [32, 64])
@pytest.mark.parametrize("n_layers", [1, 2, 3])
@pytest.mark.parametrize("targets", [("query", "value"), ("key",), ("query", "key", "value", "output")])
def test_count_formula_sweep(rank, d_model, n_layers, targets):
    cfg = ModelConfig(vocab_size=40, d_model=d_model, n_heads=4, n_layers=n_layers, d_ff=16, max_seq_len=8)
    lcfg = LoraConfig(rank=rank, target_projections=targets)
    model = inject(make_classifier(cfg, n_labels=5), lcfg)
    enumerated = sum(p.data.size for p in trainable_parameters(model))
    closed = n_layers * len(targets) * rank * (d_model + d_model) + head_parameter_count(d_model, 5)
    assert enumerated == closed == expected_trainable_count(cfg, lcfg, head_parameter_count(d_model, 5))


def test_inject_on_bare_decoder(small_config):
    dec = inject(DecoderStack(small_config), LoraConfig(rank=2))
    assert is_injected(dec)
    assert [n for n, _ in lora_layers(dec)] == ["blocks.0.attn.query", "blocks.0.attn.value",
                                               "blocks.1.attn.query", "blocks.1.attn.value"]
    assert all(not p.requires_grad for n, p in dec.named_parameters() if ".lora_" not in n)


def test_adapter_names_in_state(small_config):
    model = inject(make_classifier(small_config), LoraConfig(rank=2))
    names = [n for n, _ in model.named_parameters()]
    assert "decoder.blocks.0.attn.query.lora_A" in names
    assert "decoder.blocks.1.attn.value.lora_B" in names
    assert "decoder.blocks.0.attn.query.weight" in names


def test_state_errors(small_config):
    model = make_classifier(small_config)
    with pytest.raises(LoraStateError):
        trainable_parameters(model)
    inject(model, LoraConfig())
    with pytest.raises(LoraStateError):
        inject(model, LoraConfig())


def test_empty_targets_rejected_at_inject(small_config):
    cfg = LoraConfig()
    cfg.target_projections = ()  # bypass construction-time validation
    with pytest.raises(ConfigError):
        inject(make_classifier(small_config), cfg)


def test_adapter_shapes_and_init():
    rng = np.random.default_rng(0)
    base = Linear(48, 20, rng)
    layer = LoraLinear(base, rank=6, alpha=32, dropout_p=0.1, rng=rng)
    assert layer.lora_A.shape == (6, 48)
    assert layer.lora_B.shape == (20, 6)
    assert not layer.lora_B.data.any()
    assert 0.05 < layer.lora_A.data.std() * np.sqrt(48) < 2.0
    assert not layer.weight.requires_grad


def test_forward_formula(rng):
    base = Linear(7, 5, rng, dtype=np.float64)
    layer = LoraLinear(base, rank=3, alpha=6.0, dropout_p=0.0, rng=rng)
    layer.lora_B.data = rng.standard_normal((5, 3))
    x = rng.standard_normal((4, 7))
    W, A, B = layer.weight.data, layer.lora_A.data, layer.lora_B.data
    expected = x @ W.T + 2.0 * (x @ A.T @ B.T)
    np.testing.assert_allclose(layer(Tensor(x)).data, expected, atol=1e-12)


def test_dropout_touches_adapter_path_only(rng):
    base = Linear(6, 4, rng, dtype=np.float64)
    layer = LoraLinear(base, rank=2, alpha=4.0, dropout_p=0.5, rng=rng)
    x = Tensor(rng.standard_normal((3, 6)))
    # with B = 0 the dropped adapter contributes nothing, so train == base exactly
    out = layer(x, np.random.default_rng(1)).data
    np.testing.assert_array_equal(out, T.linear(x, base.weight).data)


def test_merge_untrained_equals_base(rng):
    base = Linear(8, 6, rng)
    layer = LoraLinear(base, rank=4, alpha=32, dropout_p=0.1, rng=rng)
    np.testing.assert_array_equal(merge(layer).data, base.weight.data)


def test_merge_matches_adapted_forward(rng):
    base = Linear(16, 12, rng)
    layer = LoraLinear(base, rank=12, alpha=32, dropout_p=0.1, rng=rng)
    layer.lora_B.data = rng.standard_normal((12, 12)).astype(np.float32) * 0.1
    x = Tensor(rng.standard_normal((5, 16)).astype(np.float32))
    merged = T.linear(x, merge(layer)).data
    np.testing.assert_allclose(merged, layer(x).data, atol=1e-5)
    delta = merge(layer).data - base.weight.data
    np.testing.assert_allclose(delta, (8 / 3) * layer.lora_B.data @ layer.lora_A.data, atol=1e-6)


def test_full_rank_delta_reachable():
    d = 8
    rng = np.random.default_rng(2)
    layer = LoraLinear(Linear(d, d, rng, dtype=np.float64), rank=d, alpha=d, dropout_p=0.0, rng=rng)
    layer.lora_B.data = rng.standard_normal((d, d))
    assert np.linalg.matrix_rank(layer.lora_B.data @ layer.lora_A.data) == d


def _short_run(cfg_model, steps, lr=1e-3, seed=0):
    examples = final_word_task(32, seed=seed)
    data = make_dataset(examples)
    model = make_classifier(cfg_model, n_labels=len(data.labels), seed=seed)
    inject(model, LoraConfig(), seed=seed)
    return model, data, TrainConfig(max_steps=steps, learning_rate=lr, log_every=steps)


def test_ten_steps_freeze_and_adapter_movement(toy_config):
    model, data, cfg = _short_run(toy_config, 10)
    frozen = snapshot(model, frozen_only=True)
    adapters = {n: p.data.copy() for n, p in model.named_parameters() if ".lora_" in n}
    train(model, data, cfg)
    now = dict(model.named_parameters())
    for n, arr in frozen.items():
        assert np.array_equal(now[n].data, arr), n
    moved = {n for n, arr in adapters.items() if not np.array_equal(now[n].data, arr)}
    assert any(n.endswith("lora_A") for n in moved)
    assert any(n.endswith("lora_B") for n in moved)


def test_frozen_weights_receive_no_gradient(small_config):
    model, data, cfg = _short_run(small_config, 1)
    model.ignore_index = data.labels.ignore_index
    batch = next(data.batches(8))
    batch_loss(model, batch, "train").backward()
    for n, p in model.named_parameters():
        if not p.requires_grad:
            assert p.grad is None, n
