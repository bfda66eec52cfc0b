"""Autodiff engine tests: oracles first, then trivial contract checks."""

import numpy as np
import pytest

from retiscreen.tensor import (
    Adam,
    CheckpointError,
    SGD,
    ShapeMismatchError,
    Tensor,
    add,
    bce_loss,
    bce_with_logits,
    concat_channels,
    conv2d,
    dense,
    depthwise_conv2d,
    global_avg_pool,
    kaiming_uniform,
    load_params,
    maxpool2,
    mul,
    no_grad,
    relu,
    save_params,
    scale,
    sigmoid,
    tsum,
    upsample_nearest2,
)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def naive_conv2d(x, w, b, stride=1, padding=0):
    """Direct-convolution oracle: explicit loops, no vectorization."""
    n, c_in, h, wd = x.shape
    c_out, _, k_h, k_w = w.shape
    out_h = (h + 2 * padding - k_h) // stride + 1
    out_w = (wd + 2 * padding - k_w) // stride + 1
    out = np.zeros((n, c_out, out_h, out_w))
    for ni in range(n):
        for o in range(c_out):
            for i in range(out_h):
                for j in range(out_w):
                    acc = 0.0
                    for c in range(c_in):
                        for u in range(k_h):
                            for v in range(k_w):
                                yy = i * stride + u - padding
                                xx = j * stride + v - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += x[ni, c, yy, xx] * w[o, c, u, v]
                    out[ni, o, i, j] = acc + b[o]
    return out


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar f with respect to array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = f()
        x[idx] = orig - eps
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2.0 * eps)
        it.iternext()
    return g


def max_rel_err(analytic, numeric):
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build_loss, tensors, tol=1e-6):
    """Compare backward() grads against central differences for each input."""
    loss = build_loss()
    loss.backward()
    analytic = {id(t): t.grad.copy() for t in tensors}
    for t in tensors:
        num = numeric_grad(lambda: float(build_loss().data), t.data)
        err = max_rel_err(analytic[id(t)], num)
        assert err < tol, f"grad mismatch on {t.op or t.shape}: rel err {err}"


def projected_loss(out, proj):
    return tsum(mul(out, Tensor(proj)))


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = Tensor(np.arange(9, dtype=float).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 1, 1)))
    b = Tensor(np.zeros(1))
    out = conv2d(x, w, b)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_counting():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, w, Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_matches_naive_oracle_basic():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, b), atol=1e-12)


def test_conv2d_random_configs_match_oracle():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 5))
        k = int(rng.choice([1, 2, 3]))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.choice([0, 1]))
        h = int(rng.integers(k, k + 5))
        wd = int(rng.integers(k, k + 5))
        x = rng.standard_normal((n, c_in, h, wd))
        w = rng.standard_normal((c_out, c_in, k, k))
        b = rng.standard_normal(c_out)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
        want = naive_conv2d(x, w, b, stride, padding)
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv2d_shape_contract_errors():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    w = Tensor(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeMismatchError, match="channels"):
        conv2d(x, w, Tensor(np.zeros(1)))
    with pytest.raises(ShapeMismatchError, match="kernel"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))),
               Tensor(np.zeros(1)))


def test_depthwise_matches_per_channel_conv():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((3, 3, 3))
    got = depthwise_conv2d(Tensor(x), Tensor(w), stride=1, padding=1).data
    # grouped-convolution oracle: each channel through its own 1-in/1-out conv
    for c in range(3):
        want = naive_conv2d(x[:, c:c + 1], w[c][None, None], np.zeros(1), 1, 1)
        np.testing.assert_allclose(got[:, c:c + 1], want, atol=1e-12)


# ---------------------------------------------------------------------------
# global average pool
# ---------------------------------------------------------------------------

def test_gap_constant_planes():
    x = np.zeros((1, 2, 2, 2))
    x[0, 0] = 1.0
    x[0, 1] = 2.0
    out = global_avg_pool(Tensor(x))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_gap_arithmetic():
    plane = np.array([[0.0, 0.0], [0.0, 4.0]]).reshape(1, 1, 2, 2)
    assert global_avg_pool(Tensor(plane)).data[0, 0] == 1.0


def test_gap_matches_mean_oracle():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 5, 7, 7))
    got = global_avg_pool(Tensor(x)).data
    want = np.array([[x[n, c].mean() for c in range(5)] for n in range(3)])
    np.testing.assert_allclose(got, want, atol=1e-15)


# ---------------------------------------------------------------------------
# layer kinds: trivial contracts
# ---------------------------------------------------------------------------

def test_sigmoid_at_zero():
    assert sigmoid(Tensor(np.zeros((1,)))).data[0] == 0.5


def test_bce_perfect_prediction():
    y = np.array([0.0, 1.0, 1.0, 0.0])
    loss = bce_loss(Tensor(y), Tensor(y))
    assert loss.item() <= 1e-6


def test_bce_rejects_bad_targets():
    with pytest.raises(ValueError, match="targets"):
        bce_loss(Tensor(np.array([0.5])), Tensor(np.array([1.5])))
    with pytest.raises(ValueError, match="targets"):
        bce_with_logits(Tensor(np.array([0.0])), Tensor(np.array([-0.1])))


def test_bce_finite_for_extreme_probabilities():
    p = Tensor(np.array([0.0, 1.0, 0.5]))
    y = Tensor(np.array([1.0, 0.0, 1.0]))
    assert np.isfinite(bce_loss(p, y).item())


def test_maxpool2_simple():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert maxpool2(x).item() == 4.0


def test_maxpool2_rejects_odd_dims():
    with pytest.raises(ShapeMismatchError, match="even"):
        maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_upsample_then_pool_is_identity():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 4))
    up = upsample_nearest2(Tensor(x))
    assert up.shape == (2, 3, 8, 8)
    np.testing.assert_array_equal(maxpool2(up).data, x)


def test_concat_channels_splits_gradient():
    a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    b = Tensor(np.full((1, 3, 2, 2), 2.0), requires_grad=True)
    out = concat_channels(a, b)
    assert out.shape == (1, 5, 2, 2)
    tsum(out).backward()
    np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
    np.testing.assert_array_equal(b.grad, np.ones_like(b.data))
    with pytest.raises(ShapeMismatchError):
        concat_channels(a, Tensor(np.zeros((1, 1, 3, 3))))


# ---------------------------------------------------------------------------
# backward contract
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    w = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    tsum(w).backward()
    np.testing.assert_array_equal(w.grad, np.ones((3, 4)))


def test_backward_sum_of_squares():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tsum(mul(w, w)).backward()
    np.testing.assert_array_equal(w.grad, np.array([2.0, 4.0]))


def test_backward_requires_scalar():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeMismatchError, match="scalar"):
        mul(w, w).backward()


def test_shared_node_accumulates():
    w = Tensor(np.array([3.0]), requires_grad=True)
    out = add(mul(w, w), scale(w, 2.0))  # w^2 + 2w -> grad 2w + 2
    tsum(out).backward()
    np.testing.assert_allclose(w.grad, [8.0])


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones((2,)), requires_grad=True)
    with no_grad():
        out = relu(w)
    assert not out.requires_grad and out._parents == ()


# ---------------------------------------------------------------------------
# finite-difference gradient oracle, >=20 random shapes per kind
# ---------------------------------------------------------------------------

def _distinct_grid(rng, shape, step=0.1):
    """Values with pairwise gaps >> FD epsilon (keeps max/relu FD exact)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n // 2) * step + 0.033  # offset keeps 0 off the grid
    return vals.reshape(shape)


@pytest.mark.parametrize("kind", [
    "relu", "sigmoid", "dense", "maxpool2", "upsample_nearest2",
    "concat_channels", "bce_loss", "bce_with_logits",
    "conv2d", "depthwise_conv2d", "global_avg_pool",
])
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2 ** 32)
    for trial in range(20):
        if kind == "relu":
            x = Tensor(_distinct_grid(rng, (int(rng.integers(2, 6)), int(rng.integers(2, 6)))),
                       requires_grad=True)
            proj = rng.standard_normal(x.shape)
            check_gradients(lambda: projected_loss(relu(x), proj), [x])
        elif kind == "sigmoid":
            x = Tensor(rng.uniform(-3, 3, (int(rng.integers(2, 8)),)), requires_grad=True)
            proj = rng.standard_normal(x.shape)
            check_gradients(lambda: projected_loss(sigmoid(x), proj), [x])
        elif kind == "dense":
            n, d, k = (int(rng.integers(1, 4)) for _ in range(3))
            x = Tensor(rng.standard_normal((n, d)), requires_grad=True)
            w = Tensor(rng.standard_normal((d, k)), requires_grad=True)
            b = Tensor(rng.standard_normal(k), requires_grad=True)
            proj = rng.standard_normal((n, k))
            check_gradients(lambda: projected_loss(dense(x, w, b), proj), [x, w, b])
        elif kind == "maxpool2":
            h, w_ = 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
            x = Tensor(_distinct_grid(rng, (1, 2, h, w_)), requires_grad=True)
            proj = rng.standard_normal((1, 2, h // 2, w_ // 2))
            check_gradients(lambda: projected_loss(maxpool2(x), proj), [x])
        elif kind == "upsample_nearest2":
            x = Tensor(rng.standard_normal((1, 2, 3, 2)), requires_grad=True)
            proj = rng.standard_normal((1, 2, 6, 4))
            check_gradients(lambda: projected_loss(upsample_nearest2(x), proj), [x])
        elif kind == "concat_channels":
            a = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
            b = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
            proj = rng.standard_normal((2, 3, 3, 3))
            check_gradients(lambda: projected_loss(concat_channels(a, b), proj), [a, b])
        elif kind == "bce_loss":
            p = Tensor(rng.uniform(0.05, 0.95, (int(rng.integers(2, 10)),)),
                       requires_grad=True)
            y = Tensor(rng.integers(0, 2, p.shape).astype(float))
            check_gradients(lambda: bce_loss(p, y), [p])
        elif kind == "bce_with_logits":
            z = Tensor(rng.uniform(-4, 4, (int(rng.integers(2, 10)),)), requires_grad=True)
            y = Tensor(rng.integers(0, 2, z.shape).astype(float))
            check_gradients(lambda: bce_with_logits(z, y), [z])
        elif kind == "conv2d":
            stride = int(rng.choice([1, 2]))
            padding = int(rng.choice([0, 1]))
            k = int(rng.choice([1, 3]))
            h = int(rng.integers(k, k + 3))
            wd = int(rng.integers(k, k + 3))
            c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            x = Tensor(rng.standard_normal((1, c_in, h, wd)), requires_grad=True)
            w = Tensor(rng.standard_normal((c_out, c_in, k, k)), requires_grad=True)
            b = Tensor(rng.standard_normal(c_out), requires_grad=True)
            oh = (h + 2 * padding - k) // stride + 1
            ow = (wd + 2 * padding - k) // stride + 1
            proj = rng.standard_normal((1, c_out, oh, ow))
            check_gradients(
                lambda: projected_loss(conv2d(x, w, b, stride, padding), proj), [x, w, b])
        elif kind == "depthwise_conv2d":
            c = int(rng.integers(1, 4))
            x = Tensor(rng.standard_normal((1, c, 4, 4)), requires_grad=True)
            w = Tensor(rng.standard_normal((c, 3, 3)), requires_grad=True)
            proj = rng.standard_normal((1, c, 4, 4))
            check_gradients(
                lambda: projected_loss(depthwise_conv2d(x, w, 1, 1), proj), [x, w])
        elif kind == "global_avg_pool":
            x = Tensor(rng.standard_normal((2, 3, 4, 5)), requires_grad=True)
            proj = rng.standard_normal((2, 3))
            check_gradients(lambda: projected_loss(global_avg_pool(x), proj), [x])


def test_composite_network_gradient():
    """conv -> relu -> pool -> gap -> dense -> sigmoid -> bce, end to end."""
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((2, 1, 4, 4)))
    w1 = Tensor(rng.standard_normal((2, 1, 3, 3)) * 0.5, requires_grad=True)
    b1 = Tensor(np.zeros(2), requires_grad=True)
    w2 = Tensor(rng.standard_normal((2, 3)) * 0.5, requires_grad=True)
    b2 = Tensor(np.zeros(3), requires_grad=True)
    y = Tensor(rng.integers(0, 2, (2, 3)).astype(float))

    def loss():
        h = relu(conv2d(x, w1, b1, 1, 1))
        h = maxpool2(h)
        emb = global_avg_pool(h)
        return bce_with_logits(dense(emb, w2, b2), y)

    check_gradients(loss, [w1, b1, w2, b2])


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def test_sgd_basic_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    SGD([p], lr=0.1).step()
    np.testing.assert_allclose(p.data, [0.9])


def test_sgd_zero_lr_is_identity():
    p = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    p.grad = np.array([5.0, -7.0])
    SGD([p], lr=0.0).step()
    np.testing.assert_array_equal(p.data, [2.0, -3.0])


def test_adam_first_step_hand_computed():
    # m=0.1g, v=0.001g^2, bias-corrected to (1, 1): step = lr/(1+eps)
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    Adam([p], lr=0.001).step()
    assert abs(p.data[0] - (-0.001)) < 1e-9


def test_optimizer_missing_grad_raises():
    p = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ValueError, match="missing gradient"):
        SGD([p], lr=0.1).step()
    with pytest.raises(ValueError, match="missing gradient"):
        Adam([p]).step()


# ---------------------------------------------------------------------------
# determinism & checkpoints
# ---------------------------------------------------------------------------

def test_seeded_init_is_bit_identical():
    a = kaiming_uniform((4, 3, 3, 3), fan_in=27, rng=np.random.default_rng(9))
    b = kaiming_uniform((4, 3, 3, 3), fan_in=27, rng=np.random.default_rng(9))
    assert a.data.tobytes() == b.data.tobytes()


def test_forward_determinism():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out1 = conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    out2 = conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    assert out1.tobytes() == out2.tobytes()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    params = {
        "conv.w": Tensor(rng.standard_normal((2, 1, 3, 3))),
        "head.b": Tensor(rng.standard_normal(8)),
    }
    path = tmp_path / "weights.npz"
    save_params(params, path, extra_meta={"note": "unit"})
    arrays, meta = load_params(path)
    assert meta["format_version"] == 1 and meta["note"] == "unit"
    for name, t in params.items():
        assert arrays[name].tobytes() == t.data.tobytes()


def test_checkpoint_truncated_file(tmp_path):
    path = tmp_path / "weights.npz"
    save_params({"w": Tensor(np.ones(16))}, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_params(path)
