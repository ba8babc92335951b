import numpy as np
import pytest

from labelsup import tensor as T
from labelsup.heads import (
    IGNORE_INDEX,
    EmptySequenceError,
    LabelSpace,
    PoolingStrategy,
    SequenceHead,
    TokenHead,
    head_parameter_count,
    last_positions,
    names_for,
    pool,
    predict_indices,
    probabilities,
    sequence_logits,
    token_logits,
)
from labelsup.tensor import DimensionError, Tensor

STRATEGIES = list(PoolingStrategy)


def brute_pool(H, valid, strategy):
    out = []
    for b in range(H.shape[0]):
        idx = [i for i in range(H.shape[1]) if valid[b, i]]
        rows = H[b, idx]
        out.append({"last": rows[-1], "max": rows.max(axis=0), "average": rows.mean(axis=0)}[strategy.value])
    return np.stack(out)


# ------------------------------------------------------------- label space

def test_label_space_bijection():
    ls = LabelSpace.from_labels(["pos", "neg", "pos", "neu"])
    assert ls.names == ("pos", "neg", "neu")
    assert [ls.index(n) for n in ls.names] == [0, 1, 2]
    assert [ls.name(i) for i in range(3)] == ["pos", "neg", "neu"]
    assert "neg" in ls and "other" not in ls
    assert len(ls) == 3


def test_label_space_errors():
    with pytest.raises(ValueError):
        LabelSpace(("a", "a"))
    with pytest.raises(ValueError):
        LabelSpace(("a", "b"), ignore_index=1)
    with pytest.raises(KeyError, match="other"):
        LabelSpace(("a",)).index("other")


def test_bio_detection():
    assert LabelSpace(("O", "B-PER", "I-PER")).is_bio()
    assert not LabelSpace(("pos", "neg")).is_bio()
    assert not LabelSpace(("B-PER", "I-PER")).is_bio()


# ------------------------------------------------------------------ pooling

def test_pool_hand_example():
    H = Tensor([[[1.0, 5.0], [3.0, 2.0]]])
    assert pool(H, None, "last").data.tolist() == [[3.0, 2.0]]
    assert pool(H, None, "max").data.tolist() == [[3.0, 5.0]]
    assert pool(H, None, "average").data.tolist() == [[2.0, 3.5]]


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_pool_single_position(rng, strategy):
    H = Tensor(rng.standard_normal((3, 1, 4)))
    np.testing.assert_array_equal(pool(H, None, strategy).data, H.data[:, 0])


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_pool_trailing_pad_matches_brute_force(rng, strategy):
    H = Tensor(rng.standard_normal((1, 3, 5)))
    valid = np.array([[True, True, False]])
    out = pool(H, valid, strategy).data
    np.testing.assert_allclose(out, brute_pool(H.data, valid, strategy), atol=1e-7)
    if strategy is PoolingStrategy.LAST:
        np.testing.assert_array_equal(out[0], H.data[0, 1])


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_pool_random_masks_match_brute_force(rng, strategy):
    for _ in range(20):
        b, s, d = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 6)
        H = rng.standard_normal((b, s, d))
        lengths = rng.integers(1, s + 1, size=b)
        valid = np.arange(s)[None, :] < lengths[:, None]
        np.testing.assert_allclose(pool(Tensor(H), valid, strategy).data, brute_pool(H, valid, strategy),
                                   atol=1e-6)


def test_pool_interior_gaps(rng):
    # non-contiguous validity: LAST is the final True, MAX/AVERAGE skip gaps
    H = rng.standard_normal((1, 5, 3))
    valid = np.array([[True, False, True, True, False]])
    for strategy in STRATEGIES:
        np.testing.assert_allclose(pool(Tensor(H), valid, strategy).data, brute_pool(H, valid, strategy),
                                   atol=1e-12)
    assert last_positions(valid).tolist() == [3]


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_pool_pad_invariance(rng, strategy):
    H = rng.standard_normal((2, 4, 3))
    ref = pool(Tensor(H), None, strategy).data
    big = rng.standard_normal((2, 3, 3)) * 100  # garbage in pad positions
    padded = np.concatenate([H, big], axis=1)
    valid = np.concatenate([np.ones((2, 4), bool), np.zeros((2, 3), bool)], axis=1)
    np.testing.assert_allclose(pool(Tensor(padded), valid, strategy).data, ref, atol=1e-5)


def test_all_pad_sequence_raises(rng):
    H = Tensor(rng.standard_normal((2, 3, 4)))
    valid = np.array([[True, False, False], [False, False, False]])
    for strategy in STRATEGIES:
        with pytest.raises(EmptySequenceError):
            pool(H, valid, strategy)


def test_pool_shape_errors(rng):
    with pytest.raises(DimensionError):
        pool(Tensor(rng.standard_normal((3, 4))), None, "max")
    with pytest.raises(DimensionError):
        pool(Tensor(rng.standard_normal((2, 3, 4))), np.ones((2, 4), bool), "max")


def test_max_is_permutation_invariant_last_is_not(rng):
    H = rng.standard_normal((1, 6, 4))
    valid = np.array([[True] * 5 + [False]])
    perm = np.concatenate([rng.permutation(5), [5]])
    Hp = H[:, perm]
    np.testing.assert_array_equal(pool(Tensor(H), valid, "max").data, pool(Tensor(Hp), valid, "max").data)
    np.testing.assert_allclose(pool(Tensor(H), valid, "average").data, pool(Tensor(Hp), valid, "average").data,
                               atol=1e-12)
    # a counterexample for LAST exists among permutations of random rows
    found = False
    for _ in range(10):
        perm = np.concatenate([rng.permutation(5), [5]])
        if not np.array_equal(pool(Tensor(H), valid, "last").data, pool(Tensor(H[:, perm]), valid, "last").data):
            found = True
            break
    assert found


# -------------------------------------------------------------------- heads

def test_bias_forces_prediction(rng):
    head = SequenceHead(4, 2, "last")
    head.weight.data[:] = 0
    head.bias.data[:] = [0.1, -0.1]
    H = Tensor(rng.standard_normal((5, 3, 4)).astype(np.float32))
    assert predict_indices(head(H)).tolist() == [0] * 5


def test_identity_projection_exposes_pooled_vector():
    head = SequenceHead(2, 2, "max")
    head.weight.data = np.eye(2, dtype=np.float32)
    H = Tensor([[[1.0, 5.0], [3.0, 2.0]]])
    assert head(H).data.tolist() == [[3.0, 5.0]]


@pytest.mark.parametrize("strategy", STRATEGIES)
@pytest.mark.parametrize("hidden", [0, 5])
def test_sequence_logits_direct_formula(rng, strategy, hidden):
    head = SequenceHead(6, 3, strategy, hidden=hidden, seed=3, std=0.5, dtype=np.float64)
    head.bias.data = rng.standard_normal(3)
    H = rng.standard_normal((4, 5, 6))
    valid = np.array([[1, 1, 1, 1, 1], [1, 1, 0, 0, 0], [1, 0, 0, 0, 0], [1, 1, 1, 1, 0]], bool)
    pooled = brute_pool(H, valid, strategy)
    if hidden:
        pooled = np.tanh(pooled @ head.hidden_weight.data.T + head.hidden_bias.data)
    expected = pooled @ head.weight.data.T + head.bias.data
    np.testing.assert_allclose(sequence_logits(Tensor(H), valid, head).data, expected, atol=1e-6)


def test_argmax_invariant_to_constant_shift(rng):
    head = SequenceHead(6, 4, "average", seed=1, std=1.0, dtype=np.float64)
    H = Tensor(rng.standard_normal((8, 3, 6)))
    pred = predict_indices(head(H))
    for c in (-1e3, -2.5, 0.7, 1e4):
        assert np.array_equal(predict_indices(head(H).data + c), pred)
        head.bias.data += c
        assert np.array_equal(predict_indices(head(H)), pred)
        head.bias.data -= c


def test_token_logits_shapes_and_oracle(rng):
    head = TokenHead(6, 4, seed=2, std=0.3, dtype=np.float64)
    assert head.pooling is None
    assert token_logits(Tensor(rng.standard_normal((1, 1, 6))), head).shape == (1, 1, 4)
    H = rng.standard_normal((3, 5, 6))
    out = head(Tensor(H)).data
    for b in range(3):
        for s in range(5):
            np.testing.assert_allclose(out[b, s], head.weight.data @ H[b, s] + head.bias.data, atol=1e-6)


def test_token_logits_pad_invariance(rng):
    head = TokenHead(6, 4, seed=2, dtype=np.float64)
    H = rng.standard_normal((2, 3, 6))
    padded = np.concatenate([H, rng.standard_normal((2, 2, 6))], axis=1)
    np.testing.assert_allclose(head(Tensor(padded)).data[:, :3], head(Tensor(H)).data, atol=1e-5)


def test_ignored_position_gets_zero_gradient(rng):
    head = TokenHead(4, 3, seed=0, std=1.0, dtype=np.float64)
    H = Tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
    logits = head(H)
    labels = np.array([1, 2, IGNORE_INDEX])
    T.cross_entropy(T.reshape(logits, (3, 3)), labels, IGNORE_INDEX).backward()
    assert not H.grad[0, 2].any()
    assert H.grad[0, :2].any()


@pytest.mark.parametrize("head_cls", [SequenceHead, TokenHead])
def test_dimension_mismatch(rng, head_cls):
    head = head_cls(5, 2)
    with pytest.raises(DimensionError):
        head(Tensor(rng.standard_normal((1, 2, 4)).astype(np.float32)))


def test_head_parameter_count():
    assert head_parameter_count(64, 2) == 130
    assert head_parameter_count(64, 2, hidden=8) == 64 * 8 + 8 + 2 * 8 + 2
    for hidden in (0, 8):
        head = SequenceHead(64, 2, hidden=hidden)
        assert sum(p.data.size for p in head.parameters()) == head_parameter_count(64, 2, hidden)


def test_head_weights_trainable():
    assert all(p.requires_grad for p in SequenceHead(4, 2).parameters())
    assert all(p.requires_grad for p in TokenHead(4, 2, hidden=3).parameters())


def test_probabilities_and_names():
    p = probabilities(np.array([[0.0, 0.0], [1000.0, 0.0]]))
    np.testing.assert_allclose(p.sum(-1), 1.0)
    np.testing.assert_allclose(p[0], [0.5, 0.5])
    assert names_for([1, 0], LabelSpace(("a", "b"))) == ["b", "a"]
