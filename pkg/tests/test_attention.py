import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrfuser import tensor as T
from hrfuser.attention import (
    MultiHeadAttention,
    MwcaBlock,
    MwcaBlockConfig,
    attention_mass,
    cross_attention_head,
    dump_attention_maps,
    mwca_block,
    parallel_cross_attention,
    to_channels_first,
    window_merge,
    window_split,
)
from hrfuser.oracles import mwca_pre_ffn
from hrfuser.pnm import read_pnm
from hrfuser.tensor import ConfigError, Tensor


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


# -- window partition ---------------------------------------------------------

def test_single_window_is_vectorized_map():
    x = np.random.default_rng(0).normal(size=(7, 7, 3))
    windows, grid = window_split(Tensor(x), 7)
    assert grid.num_windows == 1 and windows.shape == (1, 49, 3)
    np.testing.assert_array_equal(windows.data[0], x.reshape(49, 3))


def test_four_windows_row_major():
    x = np.random.default_rng(1).normal(size=(14, 14, 2))
    windows, grid = window_split(Tensor(x), 7)
    assert grid.num_windows == 4
    np.testing.assert_array_equal(windows.data[0], x[0:7, 0:7].reshape(49, 2))
    np.testing.assert_array_equal(windows.data[1], x[0:7, 7:14].reshape(49, 2))
    np.testing.assert_array_equal(windows.data[2], x[7:14, 0:7].reshape(49, 2))


def test_stem_resolution_padding():
    # ceil-to-multiple: 90 -> 91 = 13*7, 160 -> 161 = 23*7
    h, w, k = 90, 160, 7
    x = np.random.default_rng(2).normal(size=(h, w, 2))
    windows, grid = window_split(Tensor(x), k)
    padded_h, padded_w = math.ceil(h / k) * k, math.ceil(w / k) * k
    assert (padded_h, padded_w) == (91, 161)
    assert (grid.pad_bottom, grid.pad_right) == (1, 1)
    assert grid.num_windows == 13 * 23 == 299
    # the last window of the bottom-right corner holds padded zeros in its last row/col
    last = windows.data[-1].reshape(7, 7, 2)
    assert np.all(last[6] == 0) and np.all(last[:, 6] == 0)
    np.testing.assert_array_equal(window_merge(windows, grid).data, x)


@pytest.mark.parametrize("shape", [(13, 21, 4), (10, 9, 2), (1, 1, 1), (7, 8, 3), (28, 28, 2)])
def test_merge_split_round_trip(shape):
    x = np.random.default_rng(3).normal(size=shape)
    windows, grid = window_split(Tensor(x), 7)
    np.testing.assert_array_equal(window_merge(windows, grid).data, x)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 30), st.integers(1, 30), st.integers(1, 9))
def test_merge_split_round_trip_property(b, h, w, k):
    x = np.random.default_rng(h * 31 + w).normal(size=(b, h, w, 2))
    windows, grid = window_split(Tensor(x), k)
    assert (h + grid.pad_bottom) % k == 0 and (w + grid.pad_right) % k == 0
    np.testing.assert_array_equal(window_merge(windows, grid).data, x)


def test_merge_is_order_sensitive():
    x = np.zeros((14, 14, 1))
    for p, (r, c) in enumerate([(0, 0), (0, 7), (7, 0), (7, 7)]):
        x[r:r + 7, c:c + 7] = p  # distinct window means
    windows, grid = window_split(Tensor(x), 7)
    permuted = Tensor(windows.data[[1, 0, 3, 2]])
    assert not np.array_equal(window_merge(permuted, grid).data, x)


def test_invalid_window_size():
    with pytest.raises(ConfigError):
        window_split(Tensor(np.zeros((4, 4, 1))), 0)


# -- single head ----------------------------------------------------------------

def _zero_bias_attention(rng, d, h):
    return MultiHeadAttention(rng, d, h, bias=False)


def test_head_zero_values():
    rng = np.random.default_rng(4)
    w = _zero_bias_attention(rng, 4, 2)
    out = cross_attention_head(rand(rng, 9, 4), Tensor(np.zeros((9, 4))), w, 1)
    np.testing.assert_array_equal(out.data, np.zeros((9, 2)))


def test_head_single_token():
    w = _zero_bias_attention(np.random.default_rng(5), 1, 1)
    for lin in (w.q, w.k, w.v, w.o):
        lin.weight.data[...] = 1.0
    out = cross_attention_head(Tensor([[0.7]]), Tensor([[-2.5]]), w, 0)
    assert out.data.tolist() == [[-2.5]]


def scalar_head(xp, yp, wq, wk, wv):
    n, d = xp.shape
    dh = wq.shape[1]
    q = [[sum(xp[i, c] * wq[c, e] for c in range(d)) for e in range(dh)] for i in range(n)]
    k = [[sum(yp[i, c] * wk[c, e] for c in range(d)) for e in range(dh)] for i in range(n)]
    v = [[sum(yp[i, c] * wv[c, e] for c in range(d)) for e in range(dh)] for i in range(n)]
    out = np.zeros((n, dh))
    for i in range(n):
        s = [sum(q[i][e] * k[j][e] for e in range(dh)) / math.sqrt(d / (d // dh)) for j in range(n)]
        m = max(s)
        ex = [math.exp(v_ - m) for v_ in s]
        tot = sum(ex)
        for e in range(dh):
            out[i, e] = sum(ex[j] / tot * v[j][e] for j in range(n))
    return out


def test_head_vs_scalar_loops():
    rng = np.random.default_rng(6)
    w = _zero_bias_attention(rng, 2, 1)
    xp, yp = rng.normal(size=(16, 2)), rng.normal(size=(16, 2))
    out = cross_attention_head(Tensor(xp), Tensor(yp), w, 0)
    expected = scalar_head(xp, yp, w.q.weight.data, w.k.weight.data, w.v.weight.data)
    assert np.max(np.abs(out.data - expected)) < 1e-12


def test_head_concat_matches_batched_attention():
    rng = np.random.default_rng(7)
    w = MultiHeadAttention(rng, 6, 3, bias=True)
    for lin in (w.q, w.k, w.v, w.o):
        lin.bias.data[...] = rng.normal(size=6)
    xp, yp = rand(rng, 9, 6), rand(rng, 9, 6)
    heads = np.concatenate([cross_attention_head(xp, yp, w, h).data for h in range(3)], axis=1)
    expected = heads @ w.o.weight.data + w.o.bias.data
    got = w(xp.reshape(1, 9, 6), yp.reshape(1, 9, 6)).data[0]
    assert np.max(np.abs(got - expected)) < 1e-12


# -- parallel cross-attention ------------------------------------------------------

def test_parallel_empty_sum_identity():
    xp = rand(np.random.default_rng(8), 49, 4)
    out = parallel_cross_attention(xp, [], [])
    np.testing.assert_array_equal(out.data, xp.data)


def test_parallel_zero_secondaries_identity():
    rng = np.random.default_rng(9)
    ws = [_zero_bias_attention(rng, 4, 2) for _ in range(3)]
    xp = rand(rng, 49, 4)
    out = parallel_cross_attention(xp, [Tensor(np.zeros((49, 4)))] * 3, ws)
    np.testing.assert_array_equal(out.data, xp.data)


@pytest.mark.parametrize("variant", ["mwca", "mwca_no_secondary_skip"])
def test_parallel_vs_direct_formula(variant):
    rng = np.random.default_rng(10)
    d, h = 4, 2
    ws = [MultiHeadAttention(rng, d, h) for _ in range(2)]
    for w in ws:
        for lin in (w.q, w.k, w.v, w.o):
            lin.bias.data[...] = rng.normal(size=d) * 0.1
    xp = rng.normal(size=(9, d))
    yps = [rng.normal(size=(9, d)) for _ in range(2)]
    out = parallel_cross_attention(Tensor(xp), [Tensor(y) for y in yps], ws, variant)
    expected = xp.copy()
    for y, w in zip(yps, ws):
        q = xp @ w.q.weight.data + w.q.bias.data
        k = y @ w.k.weight.data + w.k.bias.data
        v = y @ w.v.weight.data + w.v.bias.data
        heads = []
        for hh in range(h):
            sl = slice(hh * 2, hh * 2 + 2)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(d / h)
            p = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
            heads.append(p @ v[:, sl])
        mh = np.concatenate(heads, axis=1) @ w.o.weight.data + w.o.bias.data
        expected += (y + mh) if variant == "mwca" else mh
    assert np.max(np.abs(out.data - expected)) < 1e-12


# -- block ---------------------------------------------------------------------------

def test_block_none_variant_returns_input():
    rng = np.random.default_rng(11)
    cfg = MwcaBlockConfig(dim=4, heads=2, num_modalities=2, fusion_variant="none")
    block = MwcaBlock(rng, cfg)
    x = rand(rng, 1, 4, 9, 9)
    out = mwca_block(x, [rand(rng, 1, 4, 9, 9), rand(rng, 1, 4, 9, 9)], cfg, block)
    np.testing.assert_array_equal(out.data, x.data)


def test_block_composed_identity():
    rng = np.random.default_rng(12)
    cfg = MwcaBlockConfig(dim=4, heads=2, num_modalities=2, bias=False)
    block = MwcaBlock(rng, cfg)
    block.ffn.reduce.weight.data[...] = 0.0
    block.ffn.reduce.bias.data[...] = 0.0
    x = rand(rng, 2, 4, 10, 12)
    zeros = Tensor(np.zeros(x.shape))
    out = block(x, [zeros, zeros])
    np.testing.assert_array_equal(out.data, x.data)


def test_block_addition_variant():
    rng = np.random.default_rng(13)
    block = MwcaBlock(rng, MwcaBlockConfig(dim=4, heads=1, num_modalities=2, fusion_variant="addition"))
    x, y1, y2 = rand(rng, 1, 5, 5, 4), rand(rng, 1, 5, 5, 4), rand(rng, 1, 5, 5, 4)
    np.testing.assert_array_equal(block.fuse(x, [y1, y2]).data, x.data + y1.data + y2.data)


def test_block_modality_count_mismatch():
    rng = np.random.default_rng(14)
    block = MwcaBlock(rng, MwcaBlockConfig(dim=4, heads=1, num_modalities=2))
    x = rand(rng, 1, 4, 7, 7)
    with pytest.raises(ConfigError):
        block(x, [x])


def _random_block(rng, d, h, m, variant="mwca"):
    block = MwcaBlock(rng, MwcaBlockConfig(dim=d, heads=h, num_modalities=m, fusion_variant=variant))
    for _, p in block.named_parameters():
        p.data[...] = p.data + rng.normal(size=p.shape) * 0.3
    return block


@pytest.mark.parametrize("seed", range(6))
def test_block_pre_ffn_matches_loop_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    h_, w_ = rng.integers(1, 29, size=2)
    heads = int(rng.integers(1, 3))
    d = heads * int(rng.integers(1, 5))
    m = int(rng.integers(0, 4))
    block = _random_block(rng, d, heads, m, "mwca" if seed % 2 else "mwca_no_secondary_skip")
    x = rng.normal(size=(1, h_, w_, d))
    ys = [rng.normal(size=(1, h_, w_, d)) for _ in range(m)]
    got = block.fuse(Tensor(x), [Tensor(y) for y in ys]).data
    assert np.max(np.abs(got - mwca_pre_ffn(x, ys, block))) < 1e-10


@pytest.mark.parametrize("seed", range(4))
def test_block_window_locality(seed):
    rng = np.random.default_rng(200 + seed)
    h_, w_ = rng.integers(8, 22, size=2)
    block = _random_block(rng, 4, 2, 2)
    x = rand(rng, 1, h_, w_, 4)
    ys = [rand(rng, 1, h_, w_, 4) for _ in range(2)]
    base = block.fuse(x, ys).data
    r, c, beta = int(rng.integers(h_)), int(rng.integers(w_)), int(rng.integers(2))
    bumped = ys[beta].data.copy()
    bumped[0, r, c] += rng.normal(size=4) * 5
    ys2 = list(ys)
    ys2[beta] = Tensor(bumped)
    changed = np.abs(block.fuse(x, ys2).data - base).max(axis=-1)[0] > 0
    rows, cols = np.nonzero(changed)
    assert changed.any()
    assert np.all(rows // 7 == r // 7) and np.all(cols // 7 == c // 7)


def test_block_gradients_all_params_and_inputs():
    rng = np.random.default_rng(15)
    block = _random_block(rng, 4, 2, 2)
    x = Tensor(rng.normal(size=(1, 4, 8, 9)), requires_grad=True)
    ys = [Tensor(rng.normal(size=(1, 4, 8, 9)), requires_grad=True) for _ in range(2)]
    r = Tensor(rng.normal(size=(1, 4, 8, 9)))

    def loss():
        return (block(x, ys) * r).sum()

    err = T.gradcheck(loss, block.parameters() + [x] + ys, samples=6, rng=rng)
    assert err < 1e-4


# -- attention maps ------------------------------------------------------------------

def test_attention_map_uniform_inputs(tmp_path):
    rng = np.random.default_rng(16)
    block = _random_block(rng, 4, 2, 2)
    x = Tensor(np.tile(rng.normal(size=4), (1, 14, 14, 1)))
    ys = [Tensor(np.tile(rng.normal(size=4), (1, 14, 14, 1))) for _ in range(2)]
    for m in attention_mass(block, x, ys):
        assert m.max() - m.min() < 1e-6
    files = dump_attention_maps(block, to_channels_first(x), [to_channels_first(y) for y in ys], tmp_path, ["lidar", "radar"])
    assert read_pnm(files[0]).shape == (14, 14)
    assert T.load_tensors(files[1])["attention/lidar"].shape == (1, 14, 14)


def test_attention_map_total_mass_per_window():
    rng = np.random.default_rng(17)
    block = _random_block(rng, 4, 2, 1)
    x, y = rand(rng, 2, 14, 21, 4), rand(rng, 2, 14, 21, 4)
    (m,) = attention_mass(block, x, [y])
    for b in range(2):
        for r in range(0, 14, 7):
            for c in range(0, 21, 7):
                assert abs(m[b, r:r + 7, c:c + 7].sum() - 49.0) < 1e-9


def test_attention_map_peaks_at_matching_pixel():
    rng = np.random.default_rng(18)
    d = 4
    block = MwcaBlock(rng, MwcaBlockConfig(dim=d, heads=1, num_modalities=1, bias=False))
    att = block.attn[0]
    att.q.weight.data[...] = np.eye(d) * 3.0
    att.k.weight.data[...] = np.eye(d) * 3.0
    pattern = np.array([2.0, -1.0, 0.5, -1.5])
    x = np.tile(pattern, (1, 14, 14, 1))
    y = np.zeros((1, 14, 14, d))
    y[0, 9, 3] = pattern * 4.0
    (m,) = attention_mass(block, Tensor(x), [Tensor(y)])
    window = m[0, 7:14, 0:7]
    assert np.unravel_index(np.argmax(window), window.shape) == (2, 3)


# -- linear cost in the number of modalities ----------------------------------------------

def test_block_flops_linear_in_modalities():
    from hrfuser.profile import count_flops_of

    rng = np.random.default_rng(19)
    x = rand(rng, 1, 8, 14, 14)
    flops = []
    for m in range(4):
        block = MwcaBlock(rng, MwcaBlockConfig(dim=8, heads=2, num_modalities=m))
        flops.append(count_flops_of(lambda: block(x, [x] * m)))
    deltas = np.diff(flops[1:])
    assert np.allclose(deltas, deltas[0], rtol=1e-12)
