"""Self-contained differentiable layer stack for the screening model.

Tensors are plain numpy arrays (float32 by default, row-major); a
:class:`Param` couples a value array with its gradient accumulator and a
freeze flag.  Layers are functional in their activations: ``forward``
returns ``(output, cache)`` and ``backward`` consumes that cache, so
several forward passes can be in flight at once (needed for the
alternating adversarial update, which holds multiple live graphs).

Gradients accumulate into ``Param.grad`` via ``backward``; ``sgd_step``
consumes them.  Frozen params never receive updates, byte for byte.
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, DataError, StaleGradientError

CHECKPOINT_MAGIC = b"DSNN"
CHECKPOINT_VERSION = 1


class Param:
    """A named trainable array with gradient accumulator and freeze flag."""

    __slots__ = ("name", "value", "grad", "frozen", "grad_ready")

    def __init__(self, name: str, value: np.ndarray, frozen: bool = False):
        self.name = name
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.frozen = bool(frozen)
        self.grad_ready = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad[...] = 0
        self.grad_ready = False

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.grad.shape:
            raise ConfigError(
                f"gradient shape {g.shape} does not match param {self.name} {self.grad.shape}"
            )
        self.grad += g
        self.grad_ready = True

    def __repr__(self):
        tag = ", frozen" if self.frozen else ""
        return f"Param({self.name}, shape={self.value.shape}{tag})"


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    """Output length of a cross-correlation: floor((size + 2*pad - k)/stride) + 1."""
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ConfigError(f"kernel {k} (pad {pad}) does not fit input of size {size}")
    return out


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Unfold (N,C,H,W) into (N*oh*ow, C*k*k) patch rows."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, k, stride, pad)
    ow = conv_output_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = x.strides
    win = as_strided(
        x,
        shape=(n, c, k, k, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * k * k)
    return cols, oh, ow


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Fold patch-row gradients back onto the (padded) input, overlap-adding."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    d6 = dcols.reshape(n, oh, ow, c, k, k)
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                d6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def conv2d(x: np.ndarray, weights: Param, bias: Param | None = None,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (C,H,W or N,C,H,W) with a (O,C,k,k) kernel.

    Output spatial size is floor((H + 2*pad - k)/stride) + 1 per axis.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ConfigError(f"conv2d expects (C,H,W) or (N,C,H,W), got ndim={x.ndim}")
    o, c, k, _ = weights.value.shape
    if x.shape[1] != c:
        raise ConfigError(f"conv2d input has {x.shape[1]} channels, kernel expects {c}")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    cols, oh, ow = _im2col(x, k, stride, pad)
    wmat = weights.value.reshape(o, c * k * k)
    y = cols @ wmat.T
    if bias is not None:
        y += bias.value
    y = y.reshape(x.shape[0], oh, ow, o).transpose(0, 3, 1, 2)
    return y[0] if single else y


class Conv2d:
    """2-D convolution layer (cross-correlation) with optional bias."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0,
                 rng: np.random.Generator | None = None, name: str = "conv",
                 bias: bool = True, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = c_in * k * k
        self.k, self.stride, self.pad = k, stride, pad
        self.c_in, self.c_out = c_in, c_out
        self.w = Param(f"{name}.w", uniform_init(rng, (c_out, c_in, k, k), fan_in, dtype))
        self.b = Param(f"{name}.b", np.zeros(c_out, dtype=dtype)) if bias else None

    def params(self) -> list[Param]:
        return [self.w] + ([self.b] if self.b is not None else [])

    def forward(self, x: np.ndarray):
        if x.shape[1] != self.c_in:
            raise ConfigError(
                f"{self.w.name}: input has {x.shape[1]} channels, expected {self.c_in}"
            )
        cols, oh, ow = _im2col(x, self.k, self.stride, self.pad)
        wmat = self.w.value.reshape(self.c_out, -1)
        y = cols @ wmat.T
        if self.b is not None:
            y += self.b.value
        y = y.reshape(x.shape[0], oh, ow, self.c_out).transpose(0, 3, 1, 2)
        # cols is only needed for the weight gradient
        cache = (x.shape, cols if not self.w.frozen else None)
        return y, cache

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        x_shape, cols = cache
        n = x_shape[0]
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        wmat = self.w.value.reshape(self.c_out, -1)
        if not self.w.frozen:
            self.w.accumulate((dy2.T @ cols).reshape(self.w.value.shape))
        if self.b is not None and not self.b.frozen:
            self.b.accumulate(dy2.sum(axis=0))
        dcols = dy2 @ wmat
        return _col2im(dcols, x_shape, self.k, self.stride, self.pad)


class Dense:
    """Fully connected layer y = x @ W.T + b."""

    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator | None = None,
                 name: str = "dense", zero_init: bool = False, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        if zero_init:
            w = np.zeros((f_out, f_in), dtype=dtype)
        else:
            w = uniform_init(rng, (f_out, f_in), f_in, dtype)
        self.f_in, self.f_out = f_in, f_out
        self.w = Param(f"{name}.w", w)
        self.b = Param(f"{name}.b", np.zeros(f_out, dtype=dtype))

    def params(self) -> list[Param]:
        return [self.w, self.b]

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.f_in:
            raise ConfigError(f"{self.w.name}: fan-in {x.shape[-1]} != {self.f_in}")
        return x @ self.w.value.T + self.b.value, x

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        x = cache
        if not self.w.frozen:
            self.w.accumulate(dy.T @ x)
        if not self.b.frozen:
            self.b.accumulate(dy.sum(axis=0))
        return dy @ self.w.value


class ReLU:
    def forward(self, x: np.ndarray):
        y = np.maximum(x, 0)
        return y, (x > 0)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        return dy * cache


class LeakyReLU:
    def __init__(self, alpha: float = 0.2):
        self.alpha = alpha

    def forward(self, x: np.ndarray):
        y = np.where(x > 0, x, x.dtype.type(self.alpha) * x)
        return y, (x > 0)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        return np.where(cache, dy, dy.dtype.type(self.alpha) * dy)


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax, numerically stabilized."""
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class Softmax:
    def forward(self, x: np.ndarray):
        y = softmax(x)
        return y, y

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        y = cache
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


class Sigmoid:
    def forward(self, x: np.ndarray):
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return y, y

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        y = cache
        return dy * y * (1 - y)


class GlobalAvgPool:
    """(N,C,H,W) -> (N,C) spatial mean."""

    def forward(self, x: np.ndarray):
        n, c, h, w = x.shape
        return x.mean(axis=(2, 3)), (x.shape,)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        (shape,) = cache
        n, c, h, w = shape
        g = dy[:, :, None, None] / dy.dtype.type(h * w)
        return np.broadcast_to(g, shape).copy()


class BatchNorm2d:
    """Per-channel running-statistics normalization (optional, off by default).

    Train mode normalizes with batch statistics and updates the running
    buffers; eval mode uses the stored running statistics.
    """

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5,
                 name: str = "bn", dtype=np.float32):
        self.gamma = Param(f"{name}.gamma", np.ones(c, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.train = True
        self._buf_name = name

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self._buf_name}.running_mean": self.running_mean,
                f"{self._buf_name}.running_var": self.running_var}

    def forward(self, x: np.ndarray):
        dt = x.dtype.type
        if self.train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean).astype(x.dtype)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        invstd = 1.0 / np.sqrt(var + dt(self.eps))
        xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
        y = self.gamma.value[None, :, None, None] * xhat + self.beta.value[None, :, None, None]
        return y, (xhat, invstd, x.shape, self.train)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        xhat, invstd, shape, was_train = cache
        n, c, h, w = shape
        m = dy.dtype.type(n * h * w)
        if not self.gamma.frozen:
            self.gamma.accumulate((dy * xhat).sum(axis=(0, 2, 3)))
        if not self.beta.frozen:
            self.beta.accumulate(dy.sum(axis=(0, 2, 3)))
        dxhat = dy * self.gamma.value[None, :, None, None]
        if not was_train:
            return dxhat * invstd[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (invstd[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)


class ResidualBlock:
    """Two 3x3 convolutions with a shortcut; projection when shape changes.

    output = relu(conv2(relu(conv1(x))) + shortcut(x)); shortcut is the
    identity when channels and stride allow, else a strided 1x1 conv.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1,
                 rng: np.random.Generator | None = None, name: str = "res",
                 norm: bool = False, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.conv1 = Conv2d(c_in, c_out, 3, stride=stride, pad=1, rng=rng,
                            name=f"{name}.conv1", dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, stride=1, pad=1, rng=rng,
                            name=f"{name}.conv2", dtype=dtype)
        self.relu1 = ReLU()
        self.relu_out = ReLU()
        self.norm = norm
        if norm:
            self.bn1 = BatchNorm2d(c_out, name=f"{name}.bn1", dtype=dtype)
            self.bn2 = BatchNorm2d(c_out, name=f"{name}.bn2", dtype=dtype)
        if c_in != c_out or stride != 1:
            self.shortcut = Conv2d(c_in, c_out, 1, stride=stride, pad=0, rng=rng,
                                   name=f"{name}.shortcut", dtype=dtype)
        else:
            self.shortcut = None

    def params(self) -> list[Param]:
        ps = self.conv1.params() + self.conv2.params()
        if self.norm:
            ps += self.bn1.params() + self.bn2.params()
        if self.shortcut is not None:
            ps += self.shortcut.params()
        return ps

    def buffers(self) -> dict[str, np.ndarray]:
        if not self.norm:
            return {}
        return {**self.bn1.buffers(), **self.bn2.buffers()}

    def forward(self, x: np.ndarray):
        a, c1 = self.conv1.forward(x)
        if self.norm:
            a, cb1 = self.bn1.forward(a)
        else:
            cb1 = None
        r, cr1 = self.relu1.forward(a)
        m, c2 = self.conv2.forward(r)
        if self.norm:
            m, cb2 = self.bn2.forward(m)
        else:
            cb2 = None
        if self.shortcut is not None:
            s, cs = self.shortcut.forward(x)
        else:
            s, cs = x, None
        y, cro = self.relu_out.forward(m + s)
        return y, (c1, cb1, cr1, c2, cb2, cs, cro)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        c1, cb1, cr1, c2, cb2, cs, cro = cache
        dsum = self.relu_out.backward(cro, dy)
        dm = dsum
        if self.norm:
            dm = self.bn2.backward(cb2, dm)
        dr = self.conv2.backward(c2, dm)
        da = self.relu1.backward(cr1, dr)
        if self.norm:
            da = self.bn1.backward(cb1, da)
        dx = self.conv1.backward(c1, da)
        if self.shortcut is not None:
            dx = dx + self.shortcut.backward(cs, dsum)
        else:
            dx = dx + dsum
        return dx


class SoftmaxHead:
    """Dense layer into a softmax over two classes."""

    def __init__(self, f_in: int, n_out: int = 2, rng: np.random.Generator | None = None,
                 name: str = "head", dtype=np.float32):
        self.dense = Dense(f_in, n_out, rng=rng, name=name, dtype=dtype)
        self.softmax = Softmax()

    def params(self) -> list[Param]:
        return self.dense.params()

    def forward(self, x: np.ndarray):
        logits, cd = self.dense.forward(x)
        z, cz = self.softmax.forward(logits)
        return z, (cd, cz)

    def backward(self, cache, dz: np.ndarray) -> np.ndarray:
        cd, cz = cache
        dlogits = self.softmax.backward(cz, dz)
        return self.dense.backward(cd, dlogits)


def dense_softmax(x: np.ndarray, weights: Param, bias: Param | None = None) -> np.ndarray:
    """Probability vector from a dense projection followed by softmax."""
    if x.shape[-1] != weights.value.shape[1]:
        raise ConfigError(
            f"dense_softmax fan-in {x.shape[-1]} != weight fan-in {weights.value.shape[1]}"
        )
    logits = x @ weights.value.T
    if bias is not None:
        logits = logits + bias.value
    return softmax(logits)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: Iterable[Param], lr: float) -> None:
    """In-place SGD update: value <- value - lr * grad for non-frozen params.

    Consumes the gradients (they are zeroed after the step).  Raises
    :class:`StaleGradientError` if any trainable param has not received a
    gradient since its last step.
    """
    params = list(params)
    for p in params:
        if not p.frozen and not p.grad_ready:
            raise StaleGradientError(f"param {p.name} has no fresh gradient")
    for p in params:
        if not p.frozen:
            p.value -= p.dtype.type(lr) * p.grad
        p.zero_grad()


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------
# Little-endian binary: magic "DSNN", u32 version, u32 tensor count, then per
# tensor: u32 name length, UTF-8 name, u32 dim count, u32 dims, float32 payload.

def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a DSNN checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        out[name] = arr.astype(np.float32)
    return out


def save_params(path, params: Iterable[Param], buffers: dict[str, np.ndarray] | None = None) -> None:
    tensors = {p.name: p.value for p in params}
    if buffers:
        tensors.update(buffers)
    save_checkpoint(path, tensors)


def restore_params(params: Iterable[Param], tensors: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in tensors:
            raise ConfigError(f"checkpoint is missing param {p.name}")
        arr = tensors[p.name]
        if arr.shape != p.value.shape:
            raise ConfigError(
                f"checkpoint param {p.name} has shape {arr.shape}, expected {p.value.shape}"
            )
        p.value = arr.astype(p.value.dtype).copy()
        p.grad = np.zeros_like(p.value)
        p.grad_ready = False
