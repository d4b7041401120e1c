import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mat_forecast import autodiff as ad
from mat_forecast.attention import (
    AttentionParams,
    PositionalEncoding,
    attention_weights,
    init_attention_params,
    multi_head_attention,
    positional_embedding,
    self_attention,
)
from mat_forecast.autodiff import Tensor
from mat_forecast.errors import ConfigError, DimensionError

from oracles import attention


def identity_params(d, H=1):
    eye = lambda: Tensor(np.eye(d))
    return AttentionParams(eye(), eye(), eye(), eye(), H)


def test_hand_example():
    Q = np.array([[1.0], [0.0]])
    V = np.array([[2.0], [4.0]])
    out = multi_head_attention(Q, Q, V, identity_params(1)).data[:, 0]
    e = math.e
    assert out[0] == pytest.approx(2 * e / (e + 1) + 4 / (e + 1), abs=1e-14)
    assert out[1] == pytest.approx(3.0, abs=1e-14)
    np.testing.assert_allclose(out, [2.5379, 3.0], atol=1e-4)


def test_matches_loop_oracle_per_head(rng):
    d, H = 6, 3
    p = init_attention_params(d, H, rng)
    Q, K, V = rng.standard_normal((4, d)), rng.standard_normal((5, d)), rng.standard_normal((5, d))
    heads = []
    for h in range(H):
        wq, wk, wv = p.head(h)
        heads.append(attention(Q @ wq, K @ wk, V @ wv, 1 / math.sqrt(d // H)))
    expected = np.concatenate(heads, axis=1) @ p.w_o.data
    np.testing.assert_allclose(multi_head_attention(Q, K, V, p).data, expected, atol=1e-13)


def test_model_width_scale_option(rng):
    p = init_attention_params(4, 2, rng)
    Q, K = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    a = multi_head_attention(Q, K, K, p, score_scale="model").data
    heads = [attention(Q @ p.head(h)[0], K @ p.head(h)[1], K @ p.head(h)[2], 0.5) for h in range(2)]
    np.testing.assert_allclose(a, np.concatenate(heads, 1) @ p.w_o.data, atol=1e-13)
    with pytest.raises(ConfigError):
        multi_head_attention(Q, K, K, p, score_scale="bogus")


def test_single_key_returns_its_value(rng):
    p = init_attention_params(4, 2, rng)
    K = rng.standard_normal((1, 4))
    out = multi_head_attention(rng.standard_normal((5, 4)), K, K, p).data
    expected = (K @ p.w_v.data) @ p.w_o.data
    np.testing.assert_allclose(out, np.repeat(expected, 5, 0), atol=1e-14)


def test_identical_keys_average_values(rng):
    p = identity_params(3)
    K = np.tile(rng.standard_normal(3), (4, 1))
    V = rng.standard_normal((4, 3))
    out = multi_head_attention(rng.standard_normal((2, 3)), K, V, p).data
    np.testing.assert_allclose(out, np.tile(V.mean(0), (2, 1)), atol=1e-14)


@given(st.integers(0, 10_000))
def test_key_permutation_invariance(seed):
    r = np.random.default_rng(seed)
    p = init_attention_params(4, 2, r)
    Q, K, V = r.standard_normal((3, 4)), r.standard_normal((6, 4)), r.standard_normal((6, 4))
    perm = r.permutation(6)
    np.testing.assert_allclose(
        multi_head_attention(Q, K[perm], V[perm], p).data, multi_head_attention(Q, K, V, p).data, atol=1e-12
    )


def test_weights_rows_sum_to_one(rng):
    w = attention_weights(Tensor(rng.standard_normal((2, 5, 3))), Tensor(rng.standard_normal((2, 7, 3))), 0.5)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)


def test_batched_equals_unbatched(rng):
    p = init_attention_params(4, 2, rng)
    x = rng.standard_normal((3, 5, 4))
    batched = self_attention(x, p).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], self_attention(x[i], p).data, atol=1e-14)


def test_errors(rng):
    with pytest.raises(ConfigError):
        init_attention_params(6, 4, rng)
    p = init_attention_params(4, 2, rng)
    with pytest.raises(DimensionError):
        multi_head_attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)), p)
    with pytest.raises(DimensionError):
        multi_head_attention(np.ones((2, 4)), np.ones((2, 4)), np.ones((3, 4)), p)


def test_gradients(rng):
    p = init_attention_params(4, 2, rng)
    x = Tensor(rng.standard_normal((2, 5, 4)))
    w = Tensor(rng.standard_normal((2, 5, 4)))
    params = [p.w_q, p.w_k, p.w_v, p.w_o]
    assert ad.grad_check_params(lambda: ad.tsum(self_attention(x, p) * w), params) < 1e-4


# -- positional codes ---------------------------------------------------------------------------


def test_positional_origin():
    p = positional_embedding(0, PositionalEncoding(6))
    np.testing.assert_array_equal(p, [0, 1, 0, 1, 0, 1])


def test_positional_example():
    np.testing.assert_allclose(positional_embedding(1, PositionalEncoding(2)), [math.sin(1), math.cos(100)], atol=1e-15)


@given(st.integers(0, 10_000), st.integers(1, 32))
def test_positional_range(t, d):
    p = positional_embedding(t, PositionalEncoding(d))
    assert p.shape == (d,) and np.all(np.abs(p) <= 1.0)


def test_positional_table_rows():
    enc = PositionalEncoding(4)
    table = enc.table(5)
    for t in range(5):
        np.testing.assert_array_equal(table[t], enc(t))
