import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import aggregate_loops
from stark_cslr import ndiff as nd
from stark_cslr.config import StarkConfig
from stark_cslr.encoder import (
    aggregate, count_parameters, encoder_forward, init_attention, init_encoder, input_stem, module_parameter_count,
    patchify, pooled_length, sinusoidal_encoding, spatial_attention, stark_module, temporal_attention,
    temporal_max_pool,
)
from stark_cslr.gradcheck import check_gradients
from stark_cslr.ndiff import DiffArray, ShapeError
from stark_cslr.prep import PAPER_LAYOUT, StreamLayout

TINY = StarkConfig(stem_channels=4, channels=(4,), heads=1, head_dim=2, kernel=3, dec_hidden=4, dec_ffn=4)
SMALL = StarkConfig(stem_channels=6, channels=(5, 7), heads=2, head_dim=3, kernel=3, dec_hidden=4, dec_ffn=4)


def rand(rng, *shape):
    return rng.normal(size=shape)


# stem


def test_stem_zero_weights_gives_position_encoding():
    w, b = DiffArray(np.zeros((64, 3))), DiffArray(np.zeros(64))
    out = input_stem(np.zeros((3, 16, 11)), w, b)
    assert out.shape == (64, 16, 11)
    pe = sinusoidal_encoding(16, 64)
    for p in range(11):
        np.testing.assert_array_equal(out.value[:, :, p], pe.T)
    np.testing.assert_allclose(out.value[:, 3, 0] - out.value[:, 9, 0], pe[3] - pe[9])


def test_position_encoding_interleaves_sin_cos():
    pe = sinusoidal_encoding(5, 6)
    np.testing.assert_allclose(pe[:, 0], np.sin(np.arange(5)))
    np.testing.assert_allclose(pe[:, 1], np.cos(np.arange(5)))
    np.testing.assert_allclose(pe[:, 2], np.sin(np.arange(5) / 10000 ** (2 / 6)))


def test_stem_rejects_wrong_channel_count():
    with pytest.raises(ShapeError):
        input_stem(np.zeros((2, 4, 3)), DiffArray(np.zeros((8, 3))), DiffArray(np.zeros(8)))


# patchify


def test_patchify_identity_window():
    x = np.random.default_rng(0).normal(size=(2, 1, 3))
    out = patchify(x, 1).value
    assert out.shape == (2, 1, 1, 3)
    np.testing.assert_array_equal(out[:, :, 0], x)


def test_patchify_three_frames_zero_padded():
    x = np.array([[[1.0], [2.0], [3.0]]])
    out = patchify(x, 3).value[0, :, :, 0]
    np.testing.assert_array_equal(out, [[0, 1, 2], [1, 2, 3], [2, 3, 0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.sampled_from([1, 3, 5, 7]), st.integers(0, 1000))
def test_patchify_centre_slice_is_input(t, k, seed):
    x = np.random.default_rng(seed).normal(size=(2, t, 3))
    out = patchify(x, k).value
    assert out.shape == (2, t, k, 3)
    np.testing.assert_array_equal(out[:, :, k // 2, :], x)


def test_patchify_rejects_even_kernel():
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 4, 2)), 4)


# attention


def test_temporal_attention_zero_query_is_uniform():
    rng = np.random.default_rng(1)
    q = np.zeros((2, 3, 4, 5))
    a = temporal_attention(q, rand(rng, 2, 3, 4, 5, 5), np.ones((2, 5)), np.zeros((2, 5)))
    np.testing.assert_allclose(a.value, 1 / 5)


def test_temporal_attention_rows_sum_to_one():
    rng = np.random.default_rng(2)
    q = rand(rng, 2, 3, 4, 5)
    kp = patchify(rand(rng, 2, 3, 4, 5), 3)
    a = temporal_attention(q, kp, np.ones((2, 5)), np.zeros((2, 5))).value
    np.testing.assert_allclose(a.sum(axis=2), 1.0, atol=1e-12)


def test_temporal_attention_unit_window_is_affine_sum():
    rng = np.random.default_rng(3)
    alpha, beta = rand(rng, 2, 4), rand(rng, 2, 4)
    a = temporal_attention(rand(rng, 2, 3, 5, 4), rand(rng, 2, 3, 5, 1, 4), alpha, beta).value
    np.testing.assert_allclose(a, np.broadcast_to((alpha + beta)[:, None, None, :], a.shape))


def test_temporal_attention_score_scaling():
    rng = np.random.default_rng(4)
    q, kp = rand(rng, 1, 2, 3, 2), rand(rng, 1, 2, 3, 3, 2)
    a = temporal_attention(q, kp, np.ones((1, 2)), np.zeros((1, 2))).value
    scores = np.einsum("sctp,sctjp->stjp", q, kp) / 2
    expected = np.exp(scores) / np.exp(scores).sum(axis=2, keepdims=True)
    np.testing.assert_allclose(a, expected, atol=1e-14)


def test_spatial_attention_zero_query_and_single_point():
    rng = np.random.default_rng(5)
    a = spatial_attention(np.zeros((2, 3, 4, 5)), rand(rng, 2, 3, 4, 5), np.ones((2, 5)), np.zeros((2, 5)))
    np.testing.assert_allclose(a.value, 1 / 5)
    a1 = spatial_attention(rand(rng, 2, 3, 4, 1), rand(rng, 2, 3, 4, 1), np.ones((2, 1)), np.zeros((2, 1)))
    np.testing.assert_allclose(a1.value, 1.0)


def test_spatial_attention_time_pooled_scaling():
    rng = np.random.default_rng(6)
    q, k = rand(rng, 1, 2, 3, 4), rand(rng, 1, 2, 3, 4)
    a = spatial_attention(q, k, np.ones((1, 4)), np.zeros((1, 4))).value
    scores = np.einsum("sctp,sctq->spq", q, k) / (2 * 3)
    expected = np.exp(scores) / np.exp(scores).sum(axis=2, keepdims=True)
    np.testing.assert_allclose(a, expected, atol=1e-14)


def test_spatial_attention_conjugate_permutation():
    rng = np.random.default_rng(7)
    q, k = rand(rng, 2, 3, 4, 5), rand(rng, 2, 3, 4, 5)
    g, d = rand(rng, 2, 5), rand(rng, 2, 5)
    perm = rng.permutation(5)
    a = spatial_attention(q, k, g, d).value
    b = spatial_attention(q[..., perm], k[..., perm], g[:, perm], d[:, perm]).value
    np.testing.assert_allclose(b, a[:, perm][:, :, perm], atol=1e-12)


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        temporal_attention(np.zeros((1, 2, 3, 4)), np.zeros((1, 2, 3, 3, 5)), np.ones((1, 4)), np.zeros((1, 4)))
    with pytest.raises(ShapeError):
        spatial_attention(np.zeros((1, 2, 3, 4)), np.zeros((1, 2, 3, 4)), np.ones((1, 3)), np.zeros((1, 4)))


# aggregation


def test_aggregate_collapses_to_identity():
    rng = np.random.default_rng(8)
    x = rand(rng, 3, 4, 5)
    a_t = np.ones((2, 4, 1, 5))
    a_s = np.broadcast_to(np.eye(5), (2, 5, 5))
    out = aggregate(a_t, a_s, x, patchify(x, 1)).value
    np.testing.assert_allclose(out, np.concatenate([x, x]), atol=1e-15)


def test_aggregate_zero_temporal_attention():
    rng = np.random.default_rng(9)
    x = rand(rng, 2, 3, 4)
    out = aggregate(np.zeros((2, 3, 3, 4)), rand(rng, 2, 4, 4), x, patchify(x, 3)).value
    assert out.shape == (4, 3, 4) and not out.any()


def test_aggregate_matches_loops_on_small_instance():
    rng = np.random.default_rng(10)
    x = rand(rng, 2, 3, 2)
    a_t, a_s = rand(rng, 1, 3, 3, 2), rand(rng, 1, 2, 2)
    np.testing.assert_allclose(aggregate(a_t, a_s, x, patchify(x, 3)).value, aggregate_loops(a_t, a_s, x, 3), atol=1e-12)


# module


def test_module_output_shape():
    cfg = StarkConfig()
    params = init_attention(np.random.default_rng(0), 64, 96, 11, cfg)
    x = np.random.default_rng(1).uniform(-1, 1, (64, 8, 11))
    assert stark_module(x, params, cfg).shape == (96, 8, 11)


def _randomised(params, rng, scale=0.5):
    for arr in params.named().values():
        arr.value = arr.value + rng.normal(0, scale, arr.shape)
    return params


def test_module_gradient_of_mean_output():
    rng = np.random.default_rng(11)
    params = _randomised(init_attention(rng, 4, 4, 3, TINY), rng)
    x = DiffArray(rng.normal(size=(4, 4, 3)), requires_grad=True)
    arrays = [x, *params.named().values()]
    assert check_gradients(lambda: nd.reduce(stark_module(x, params, TINY), None, "mean"), arrays) < 1e-4


def permuted(params, perm):
    out = type(params)(**{name: DiffArray(arr.value) for name, arr in params.named().items()})
    for name in ("alpha", "beta", "gamma", "delta"):
        getattr(out, name).value = getattr(params, name).value[:, perm]
    return out


def test_module_permutation_equivariance():
    rng = np.random.default_rng(12)
    params = _randomised(init_attention(rng, 6, 5, 7, SMALL), rng)
    x = rng.normal(size=(6, 5, 7))
    perm = rng.permutation(7)
    a = stark_module(x, params, SMALL).value
    b = stark_module(x[..., perm], permuted(params, perm), SMALL).value
    np.testing.assert_allclose(b, a[..., perm], atol=1e-9)


# encoder


@pytest.mark.parametrize("t,expected", [(16, 4), (5, 2), (1, 1), (4, 1), (9, 3)])
def test_pooled_length(t, expected):
    assert pooled_length(t) == expected
    params = init_encoder(np.random.default_rng(0), 3, SMALL)
    out = encoder_forward(np.random.default_rng(1).uniform(-1, 1, (3, t, 3)), params, SMALL)
    assert out.shape == (expected, 7)


def test_max_pool_ceil_and_ties():
    h = DiffArray([[1.0, 5.0], [3.0, 5.0], [2.0, 0.0]], requires_grad=True)
    with nd.Tape() as tape:
        out = temporal_max_pool(h)
        loss = out.sum()
    np.testing.assert_array_equal(out.value, [[3.0, 5.0], [2.0, 0.0]])
    np.testing.assert_array_equal(nd.backward(tape, loss, [h])[h], [[0, 1], [1, 0], [1, 1]])


def test_encoder_pooled_output_permutation_invariant():
    rng = np.random.default_rng(13)
    params = init_encoder(rng, 6, SMALL)
    for i, m in enumerate(params.modules):
        _randomised(m, rng, 0.3)
    frames = rng.uniform(-1, 1, (3, 9, 6))
    perm = rng.permutation(6)
    swapped = type(params)(params.stem_w, params.stem_b, [permuted(m, perm) for m in params.modules])
    a = encoder_forward(frames, params, SMALL).value
    b = encoder_forward(frames[..., perm], swapped, SMALL).value
    np.testing.assert_allclose(b, a, atol=1e-9)


def test_encoder_finite_on_unit_cube():
    cfg = StarkConfig(stem_channels=16, channels=(16, 24, 32, 48), heads=2, head_dim=8)
    for seed in range(3):
        rng = np.random.default_rng(seed)
        params = init_encoder(rng, 24, cfg)
        out = encoder_forward(rng.uniform(-1, 1, (3, 12, 24)), params, cfg).value
        assert out.shape == (3, 48) and np.all(np.isfinite(out))


def test_encoder_rejects_empty_stream():
    params = init_encoder(np.random.default_rng(0), 3, SMALL)
    with pytest.raises(ShapeError):
        encoder_forward(np.zeros((3, 4, 0)), params, SMALL)


# parameter budget


def test_toy_module_count():
    parts = module_parameter_count(2, 2, 1, 2, 3, 2)
    assert parts == {"qk": 12, "affine": 12, "out": 6, "res1": 6, "ffn": 22, "res2": 6}
    assert sum(parts.values()) == 64


def test_counts_match_instantiated_shapes():
    layout = StreamLayout("small", 10, (0, 1), (2, 3, 4), (5, 6, 7), (8, 9))
    counts = count_parameters(SMALL, layout)
    for name, points in layout.sizes().items():
        params = init_encoder(np.random.default_rng(0), points, SMALL)
        real = params.stem_w.size + params.stem_b.size + sum(
            sum(a.size for a in m.named().values()) for m in params.modules
        )
        assert counts["streams"][name]["total"] == real


def test_stem_only_count():
    cfg = StarkConfig(channels=())
    counts = count_parameters(cfg, PAPER_LAYOUT)
    for s in counts["streams"].values():
        assert s["total"] == 3 * 64 + 64
    assert counts["total"] == 4 * (3 * 64 + 64)


def test_default_count_in_band():
    counts = count_parameters(StarkConfig(), PAPER_LAYOUT)
    assert 2_000_000 <= counts["total"] <= 4_500_000
    assert counts["total"] == 3_861_664


def test_config_rejects_even_kernel():
    with pytest.raises(ValueError):
        StarkConfig(kernel=4)
