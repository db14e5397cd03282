import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrfuser import tensor as T
from hrfuser.checks import op_cases
from hrfuser.tensor import ConfigError, GraphError, ShapeError, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_conv(x, w, b, stride, padding, groups):
    bsz, cin, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    xp = np.zeros((bsz, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    cout_g = cout // groups
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for co in range(cout):
            g = co // cout_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[co]
                    for ci in range(cin_g):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[n, g * cin_g + ci, i * stride + di, j * stride + dj] * w[co, ci, di, dj]
                    out[n, co, i, j] = acc
    return out


def projected(out: Tensor, rng):
    """Scalar loss sum(out * R) for a fixed random R."""
    r = Tensor(rng.normal(size=out.shape))
    return (out * r).sum()


# -- matmul ---------------------------------------------------------------

def test_matmul_identity():
    b = np.arange(12.0).reshape(3, 4)
    out = T.matmul(Tensor(np.eye(3)), Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_matmul_forced_case():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_vs_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 6))
    out = T.matmul(Tensor(a), Tensor(b))
    assert np.max(np.abs(out.data - naive_matmul(a, b))) < 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax --------------------------------------------------------------

def test_softmax_uniform():
    out = T.softmax(Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, [0.25] * 4)


def test_softmax_no_overflow():
    out = T.softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-300)


def test_softmax_vs_direct_formula():
    x = np.random.default_rng(2).normal(size=8)
    direct = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(T.softmax(Tensor(x)).data - direct)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_normalized(values):
    out = T.softmax(Tensor(np.array([values, values[::-1]]))).data
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_empty_axis():
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.zeros((2, 0))))


# -- conv2d ---------------------------------------------------------------

def test_conv_pointwise_identity():
    x = np.random.default_rng(3).normal(size=(2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = T.conv2d(Tensor(x), Tensor(w), stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_is_nine():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


@pytest.mark.parametrize(
    "cout,k,stride,padding,groups",
    [(3, 3, 1, 1, 1), (5, 3, 2, 1, 1), (4, 3, 1, 1, 4), (4, 3, 2, 1, 4), (6, 1, 1, 0, 1), (4, 3, 1, 0, 2), (2, 1, 2, 0, 1)],
)
def test_conv_vs_nested_loops(cout, k, stride, padding, groups):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 4, 9, 9))
    w = rng.normal(size=(cout, 4 // groups, k, k))
    b = rng.normal(size=cout)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, groups=groups)
    expected = naive_conv(x, w, b, stride, padding, groups)
    assert out.shape == expected.shape == (2, cout, (9 + 2 * padding - k) // stride + 1, (9 + 2 * padding - k) // stride + 1)
    assert np.max(np.abs(out.data - expected)) < 1e-12


def test_depthwise_identity_center_kernel():
    x = np.random.default_rng(5).normal(size=(2, 6, 7, 8))
    w = np.zeros((6, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    out = T.conv2d(Tensor(x), Tensor(w), padding=1, groups=6)
    np.testing.assert_array_equal(out.data, x)


def test_conv_bad_groups():
    with pytest.raises(ConfigError):
        T.conv2d(Tensor(np.ones((1, 4, 5, 5))), Tensor(np.ones((4, 2, 3, 3))), groups=3)


# -- backward contract -------------------------------------------------------

def test_backward_sum_is_ones():
    x = Tensor(np.random.default_rng(6).normal(size=(3, 4, 2)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad.data, np.ones((3, 4, 2)))
    assert x.grad.shape == x.shape


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad.data, [2.0, 4.0, 6.0])


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()
    with pytest.raises(GraphError):
        Tensor(np.ones(())).backward()
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_no_broadcasting_beyond_scalars():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    out = Tensor(np.ones((2, 3))) * 2.0
    np.testing.assert_array_equal(out.data, np.full((2, 3), 2.0))


def test_shared_subexpression_accumulates():
    x = Tensor([0.5, -1.5], requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    np.testing.assert_allclose(x.grad.data, 2 * x.data + 3 * x.data ** 2)


# -- finite-difference suite over every op -------------------------------------

OP_CASES = op_cases()


@pytest.mark.parametrize("name,build", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_gradient_matches_finite_differences(name, build):
    worst = 0.0
    for seed in range(20):
        fn, params = build(np.random.default_rng(seed))
        worst = max(worst, T.gradcheck(fn, params, eps=1e-5))
    assert worst < 1e-4, f"{name}: max relative error {worst:.2e}"


# -- structural invariants ---------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_reshape_and_transpose_round_trips(a, b, c):
    x = Tensor(np.arange(a * b * c, dtype=float).reshape(a, b, c))
    np.testing.assert_array_equal(x.reshape(c, a * b).reshape(a, b, c).data, x.data)
    np.testing.assert_array_equal(T.transpose(T.transpose(x, (1, 0, 2)), (1, 0, 2)).data, x.data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_non_finite():
    with T.debug_mode():
        with pytest.raises(FloatingPointError):
            T.log(Tensor([-1.0]))


def test_batch_norm_running_stats_momentum():
    rm, rv = np.zeros(2), np.ones(2)
    x = np.random.default_rng(0).normal(size=(4, 2, 3, 3)) + 5.0
    T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(2, 3)), "bé": rng.normal(size=()), "c": rng.normal(size=(1, 2, 1, 4))}
    path = tmp_path / "t.mwca"
    T.save_tensors(path, tensors)
    blob = path.read_bytes()
    assert blob[:5] == b"MWCA1"
    loaded = T.load_tensors(path)
    assert list(loaded) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_checkpoint_layout_bytes(tmp_path):
    path = tmp_path / "one.mwca"
    T.save_tensors(path, {"w": np.array([[1.5, -2.0]])})
    blob = path.read_bytes()
    expected = (
        b"MWCA1" + (1).to_bytes(8, "little") + b"w" + (2).to_bytes(8, "little")
        + (1).to_bytes(8, "little") + (2).to_bytes(8, "little") + np.array([1.5, -2.0], "<f8").tobytes()
    )
    assert blob == expected


def test_single_input_channel_conv_is_dense():
    # groups == cin == 1 but cout > 1 must not take the depthwise path
    rng = np.random.default_rng(31)
    x, w, b = rng.normal(size=(2, 1, 6, 5)), rng.normal(size=(8, 1, 3, 3)), rng.normal(size=8)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, 2, 1, 1), atol=1e-12)
