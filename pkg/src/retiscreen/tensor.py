"""Minimal reverse-mode autodiff engine on float64 numpy arrays.

Provides the layer primitives the rest of the package needs: 2-D
convolution (dense and depthwise), pooling, dense layers, activations,
binary cross-entropy losses, and SGD/Adam optimizers. Everything is
float64 so gradients can be validated against central finite
differences to tight tolerances.

Convolutions are computed through vectorized patch extraction (im2col
style); the test suite pins them against a naive nested-loop oracle.
"""

from __future__ import annotations

import json
import zipfile
import zlib
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "no_grad",
    "add",
    "scale",
    "mul",
    "tsum",
    "relu",
    "sigmoid",
    "dense",
    "conv2d",
    "depthwise_conv2d",
    "maxpool2",
    "upsample_nearest2",
    "concat_channels",
    "global_avg_pool",
    "bce_loss",
    "bce_with_logits",
    "SGD",
    "Adam",
    "kaiming_uniform",
    "save_params",
    "load_params",
]


class ShapeMismatchError(ValueError):
    """Raised when an operation's shape contract is violated."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-d float64 array that can participate in an autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.ndim else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op!r})"

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad ancestor of a scalar loss."""
        if self.data.size != 1:
            raise ShapeMismatchError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative DFS; graphs can be deep for cascaded nets
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(out_data, (a, b), backward, "add")


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out_data = a.data * c

    def backward(g):
        _accumulate(a, g * c)

    return _make(out_data, (a,), backward, "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} differ")
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(out_data, (a, b), backward, "mul")


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = _as_tensor(x)
    out_data = np.asarray(x.data.sum())

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _make(out_data, (x,), backward, "sum")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        _accumulate(x, g * (x.data > 0.0))

    return _make(out_data, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # overflow-safe logistic
    out_data = np.empty_like(x.data)
    pos = x.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward, "sigmoid")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for x of shape (N, D), w (D, K), b (K,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError(f"dense: x {x.shape} incompatible with w {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeMismatchError(f"dense: bias {b.shape} != ({w.shape[1]},)")
    out_data = x.data @ w.data + b.data

    def backward(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)
        _accumulate(b, g.sum(axis=0))

    return _make(out_data, (x, w, b), backward, "dense")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeMismatchError("concat_channels expects NCHW inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatchError(
            f"concat_channels: N/H/W must match, got {a.shape} vs {b.shape}"
        )
    ca = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        _accumulate(a, g[:, :ca])
        _accumulate(b, g[:, ca:])

    return _make(out_data, (a, b), backward, "concat_channels")


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def _extract_patches(xp: np.ndarray, k_h: int, k_w: int, stride: int,
                     out_h: int, out_w: int) -> np.ndarray:
    """View padded input as (N, C, kH, kW, H', W') patch array."""
    n, c = xp.shape[:2]
    patches = np.empty((n, c, k_h, k_w, out_h, out_w), dtype=np.float64)
    for u in range(k_h):
        for v in range(k_w):
            patches[:, :, u, v] = xp[:, :, u:u + out_h * stride:stride,
                                     v:v + out_w * stride:stride]
    return patches


def _conv_geometry(x: Tensor, k_h: int, k_w: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if h + 2 * padding < k_h or w + 2 * padding < k_w:
        raise ShapeMismatchError(
            f"conv: padded input {h + 2 * padding}x{w + 2 * padding} smaller "
            f"than kernel {k_h}x{k_w}"
        )
    out_h = (h + 2 * padding - k_h) // stride + 1
    out_w = (w + 2 * padding - k_w) // stride + 1
    return n, c, h, w, out_h, out_w


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with an OIHW kernel plus bias.

    Output spatial dims follow floor((S + 2p - k) / stride) + 1.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects NCHW input and OIHW kernel, got {x.shape}, {w.shape}"
        )
    c_out, c_in, k_h, k_w = w.shape
    if x.shape[1] != c_in:
        raise ShapeMismatchError(
            f"conv2d: input has {x.shape[1]} channels, kernel expects {c_in}"
        )
    if b.shape != (c_out,):
        raise ShapeMismatchError(f"conv2d: bias {b.shape} != ({c_out},)")
    n, _, h, wd, out_h, out_w = _conv_geometry(x, k_h, k_w, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    patches = _extract_patches(xp, k_h, k_w, stride, out_h, out_w)
    # (N, H', W', O) <- sum over (C, kH, kW)
    out_data = np.tensordot(patches, w.data, axes=([1, 2, 3], [1, 2, 3]))
    out_data = out_data.transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def backward(g):
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.tensordot(g, patches, axes=([0, 2, 3], [0, 4, 5]))
            _accumulate(w, gw)
        if x.requires_grad:
            # (N, H', W', C, kH, kW) contributions scattered back over strides
            gx_patches = np.tensordot(g, w.data, axes=([1], [0]))
            gx_patches = gx_patches.transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for u in range(k_h):
                for v in range(k_w):
                    gxp[:, :, u:u + out_h * stride:stride,
                        v:v + out_w * stride:stride] += gx_patches[:, :, u, v]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
            _accumulate(x, gxp)

    return _make(out_data, (x, w, b), backward, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution: channel c of x convolved with w[c] only."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeMismatchError(
            f"depthwise_conv2d expects NCHW input and CHW kernel, got {x.shape}, {w.shape}"
        )
    c, k_h, k_w = w.shape
    if x.shape[1] != c:
        raise ShapeMismatchError(
            f"depthwise_conv2d: input has {x.shape[1]} channels, kernel has {c}"
        )
    n, _, h, wd, out_h, out_w = _conv_geometry(x, k_h, k_w, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    patches = _extract_patches(xp, k_h, k_w, stride, out_h, out_w)
    out_data = np.einsum("ncuvhw,cuv->nchw", patches, w.data, optimize=True)

    def backward(g):
        if w.requires_grad:
            _accumulate(w, np.einsum("nchw,ncuvhw->cuv", g, patches, optimize=True))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(k_h):
                for v in range(k_w):
                    gxp[:, :, u:u + out_h * stride:stride,
                        v:v + out_w * stride:stride] += g * w.data[None, :, u, v, None, None]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
            _accumulate(x, gxp)

    return _make(out_data, (x, w), backward, "depthwise_conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route gradient to the first max."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatchError("maxpool2 expects an NCHW input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool2 needs even H and W, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        _accumulate(x, gx.reshape(n, c, h, w))

    return _make(out_data, (x,), backward, "maxpool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatchError("upsample_nearest2 expects an NCHW input")
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward, "upsample_nearest2")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: NCHW -> NC."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatchError("global_avg_pool expects an NCHW input")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())

    return _make(out_data, (x,), backward, "global_avg_pool")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

BCE_EPS = 1e-7


def bce_loss(p: Tensor, y: Tensor) -> Tensor:
    """Mean binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]."""
    p, y = _as_tensor(p), _as_tensor(y)
    if p.shape != y.shape:
        raise ShapeMismatchError(f"bce_loss: shapes {p.shape} vs {y.shape}")
    if np.any(y.data < 0.0) or np.any(y.data > 1.0):
        raise ValueError("bce_loss: targets must lie in [0, 1]")
    pc = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    out_data = -(y.data * np.log(pc) + (1.0 - y.data) * np.log1p(-pc)).sum() / n

    def backward(g):
        if p.requires_grad:
            inside = (p.data >= BCE_EPS) & (p.data <= 1.0 - BCE_EPS)
            gp = (pc - y.data) / (pc * (1.0 - pc)) / n
            _accumulate(p, g * gp * inside)
        if y.requires_grad:
            _accumulate(y, g * (np.log1p(-pc) - np.log(pc)) / n)

    return _make(np.asarray(out_data), (p, y), backward, "bce_loss")


def bce_with_logits(z: Tensor, y: Tensor) -> Tensor:
    """Numerically stable mean BCE on raw logits."""
    z, y = _as_tensor(z), _as_tensor(y)
    if z.shape != y.shape:
        raise ShapeMismatchError(f"bce_with_logits: shapes {z.shape} vs {y.shape}")
    if np.any(y.data < 0.0) or np.any(y.data > 1.0):
        raise ValueError("bce_with_logits: targets must lie in [0, 1]")
    n = z.size
    zd = z.data
    out_data = (np.maximum(zd, 0.0) - zd * y.data + np.log1p(np.exp(-np.abs(zd)))).sum() / n

    def backward(g):
        if z.requires_grad:
            s = np.empty_like(zd)
            pos = zd >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-zd[pos]))
            ex = np.exp(zd[~pos])
            s[~pos] = ex / (1.0 + ex)
            _accumulate(z, g * (s - y.data) / n)
        if y.requires_grad:
            _accumulate(y, g * (-zd) / n)

    return _make(np.asarray(out_data), (z, y), backward, "bce_with_logits")


# ---------------------------------------------------------------------------
# initialization & optimizers
# ---------------------------------------------------------------------------

def kaiming_uniform(shape: Sequence[int], fan_in: int, rng: np.random.Generator) -> Tensor:
    """ReLU-gain uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)


class SGD:
    """Plain / momentum SGD over an explicit parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params] if momentum else None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError("optimizer step with missing gradient; run backward() first")
            if self._velocity is not None:
                self._velocity[i] = self.momentum * self._velocity[i] + p.grad
                p.data -= self.lr * self._velocity[i]
            else:
                p.data -= self.lr * p.grad


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError("optimizer step with missing gradient; run backward() first")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, params: Iterable[Tensor], lr: float):
    if kind == "sgd":
        return SGD(params, lr=lr)
    if kind == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_params(params: dict[str, Tensor], path: str | Path,
                extra_meta: dict | None = None) -> None:
    """Write a versioned .npz container mapping parameter names to arrays.

    Layout: key ``__meta__`` holds a JSON document (format version, extra
    metadata, parameter name list); each parameter lives under
    ``param/<name>`` as a float64 array.
    """
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "names": sorted(params),
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {f"param/{k}": np.asarray(v.data, dtype=np.float64) for k, v in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


class CheckpointError(ValueError):
    """Raised for unreadable, truncated, or mismatched checkpoint files."""


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint container; returns (name -> array, metadata)."""
    try:
        with np.load(path) as npz:
            raw_meta = bytes(npz["__meta__"].tobytes())
            meta = json.loads(raw_meta.decode("utf-8"))
            arrays = {k[len("param/"):]: np.asarray(npz[k], dtype=np.float64)
                      for k in npz.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError, zlib.error, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version mismatch: expected {CHECKPOINT_VERSION}, found {version}"
        )
    missing = set(meta.get("names", [])) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint {path} missing parameters: {sorted(missing)}")
    return arrays, meta
