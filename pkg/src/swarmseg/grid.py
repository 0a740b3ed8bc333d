"""Numeric core: rank-3 grids, channel reductions, convolutions and parameters.

Every tensor in the package is a float64 numpy array laid out as
``(rows, cols, channels)``. Layer functions also accept extra leading batch
axes, so ``(..., rows, cols, channels)`` works wherever it is cheap to do so.
"""

from __future__ import annotations

import io
import struct
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

GridTensor = np.ndarray

MAGIC = b"MASH"
FORMAT_VERSION = 1


def as_grid(data, dtype=np.float64) -> GridTensor:
    """Validate and return ``data`` as a rank-3 grid."""
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 3:
        raise ConfigError(f"expected a rank-3 grid (rows, cols, channels), got shape {arr.shape}")
    return arr


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise DataError(f"{what} contains NaN or Inf")
    return t


# ---------------------------------------------------------------------------
# channel-wise reductions


def channel_softmax(t: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Softmax over the last axis, with max subtraction for stability."""
    if t.shape[-1] < 1:
        raise ConfigError("channel_softmax needs at least one channel")
    z = t * scale if scale != 1.0 else t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def channel_log_softmax(t: np.ndarray) -> np.ndarray:
    z = t - t.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_backward(prob: np.ndarray, dprob: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax probabilities back to the logits."""
    return prob * (dprob - (prob * dprob).sum(axis=-1, keepdims=True))


def channel_argmax_max(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell argmax and max over channels. Ties go to the lowest index."""
    if t.shape[-1] < 1:
        raise ConfigError("channel_argmax_max needs at least one channel")
    idx = np.argmax(t, axis=-1)
    val = np.take_along_axis(t, idx[..., None], axis=-1)[..., 0]
    return idx, val


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class ParamBundle:
    """Named weights with matching gradient accumulators.

    All entries are rank-3. Convolution kernels are stored as
    ``(k*k, in_channels, out_channels)`` and biases as ``(1, 1, out_channels)``.
    """

    def __init__(self) -> None:
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise ConfigError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=np.float64)
        if value.ndim != 3:
            raise ConfigError(f"parameter {name!r} must be rank-3, got shape {value.shape}")
        p = Param(value, np.zeros_like(value))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def copy(self) -> ParamBundle:
        out = ParamBundle()
        for name, p in self._params.items():
            q = out.add(name, p.value.copy())
            q.grad[...] = p.grad
        return out

    def subset(self, prefix: str) -> ParamBundle:
        out = ParamBundle()
        for name in self.names(prefix):
            out.add(name, self._params[name].value.copy())
        return out

    def update(self, other: ParamBundle) -> None:
        """Copy (or insert) every entry of ``other`` into this bundle."""
        for name, p in other.items():
            if name in self._params:
                if self._params[name].shape != p.shape:
                    raise ConfigError(
                        f"shape mismatch for {name!r}: {self._params[name].shape} vs {p.shape}"
                    )
                self._params[name].value[...] = p.value
            else:
                self.add(name, p.value.copy())

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.value for n, p in self._params.items()}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad**2).sum()) for p in self._params.values())))


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int, int]) -> np.ndarray:
    """Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)) for a (k*k, cin, cout) kernel."""
    taps, cin, cout = shape
    a = np.sqrt(6.0 / (taps * cin + taps * cout))
    return rng.uniform(-a, a, size=shape)


def add_conv(
    params: ParamBundle,
    name: str,
    cin: int,
    cout: int,
    rng: np.random.Generator,
    ksize: int = 1,
    bias: bool = True,
    init: str = "glorot",
) -> None:
    """Register ``name.weight`` (and ``name.bias``) in ``params``.

    ``init`` is one of ``glorot``, ``zeros`` or ``identity`` (centre tap eye).
    """
    shape = (ksize * ksize, cin, cout)
    if init == "glorot":
        w = glorot_uniform(rng, shape)
    elif init == "zeros":
        w = np.zeros(shape)
    elif init == "identity":
        w = np.zeros(shape)
        centre = (ksize * ksize) // 2
        n = min(cin, cout)
        w[centre, np.arange(n), np.arange(n)] = 1.0
    else:
        raise ConfigError(f"unknown init {init!r}")
    params.add(f"{name}.weight", w)
    if bias:
        params.add(f"{name}.bias", np.zeros((1, 1, cout)))


def sgd_step(params: ParamBundle, learning_rate: float, prefix: str = "") -> None:
    """In-place ``w -= lr * g`` for every entry (optionally under ``prefix``), then zero grads."""
    if learning_rate < 0:
        raise ConfigError("learning rate must be non-negative")
    for name, p in params.items():
        if name.startswith(prefix):
            p.value -= learning_rate * p.grad
        p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# convolution


def _kernel_size(kernel: np.ndarray) -> int:
    k = int(round(np.sqrt(kernel.shape[0])))
    if k * k != kernel.shape[0] or k % 2 == 0:
        raise ConfigError(f"kernel taps {kernel.shape[0]} are not an odd square")
    return k


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    pad = [(0, 0)] * (x.ndim - 3) + [(r, r), (r, r), (0, 0)]
    xp = np.pad(x, pad)
    rows, cols = x.shape[-3], x.shape[-2]
    taps = [xp[..., i : i + rows, j : j + cols, :] for i in range(k) for j in range(k)]
    return np.concatenate(taps, axis=-1)


def _col2im(dcols: np.ndarray, k: int, cin: int) -> np.ndarray:
    r = k // 2
    rows, cols = dcols.shape[-3], dcols.shape[-2]
    lead = dcols.shape[:-3]
    dxp = np.zeros(lead + (rows + 2 * r, cols + 2 * r, cin))
    t = 0
    for i in range(k):
        for j in range(k):
            dxp[..., i : i + rows, j : j + cols, :] += dcols[..., t * cin : (t + 1) * cin]
            t += 1
    return dxp[..., r : r + rows, r : r + cols, :]


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Same-padded (zeros) stride-1 convolution.

    Args:
        x: input of shape (..., rows, cols, cin).
        kernel: (k*k, cin, cout) with odd k; taps in row-major (di, dj) order.
        bias: optional (1, 1, cout).
    """
    k = _kernel_size(kernel)
    if kernel.shape[1] != x.shape[-1]:
        raise ConfigError(
            f"kernel expects {kernel.shape[1]} input channels (kernel shape {kernel.shape}), "
            f"input has shape {x.shape}"
        )
    if k == 1:
        y = x @ kernel[0]
    else:
        y = _im2col(x, k) @ kernel.reshape(-1, kernel.shape[2])
    if bias is not None:
        y = y + bias[0, 0]
    return y


def conv2d_backward(
    dy: np.ndarray, x: np.ndarray, kernel: np.ndarray, with_bias: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias."""
    k = _kernel_size(kernel)
    cin, cout = kernel.shape[1], kernel.shape[2]
    expected = x.shape[:-1] + (cout,)
    if dy.shape != expected:
        raise ConfigError(f"upstream gradient shape {dy.shape} does not match output shape {expected}")
    dy2 = dy.reshape(-1, cout)
    if k == 1:
        dx = dy @ kernel[0].T
        dk = (x.reshape(-1, cin).T @ dy2)[None]
    else:
        flat = kernel.reshape(-1, cout)
        cols = _im2col(x, k)
        dk = (cols.reshape(-1, flat.shape[0]).T @ dy2).reshape(kernel.shape)
        dx = _col2im(dy @ flat.T, k, cin)
    db = dy2.sum(axis=0).reshape(1, 1, cout) if with_bias else None
    return dx, dk, db


class Conv:
    """A convolution bound to named entries of a :class:`ParamBundle`.

    The layer keeps no activations; ``forward`` returns the output and the
    caller passes the input back into ``backward``.
    """

    def __init__(self, params: ParamBundle, name: str):
        self.params = params
        self.name = name
        self.has_bias = f"{name}.bias" in params

    @property
    def weight(self) -> Param:
        return self.params[f"{self.name}.weight"]

    @property
    def bias(self) -> Param | None:
        return self.params[f"{self.name}.bias"] if self.has_bias else None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[2]

    def forward(self, x: np.ndarray) -> np.ndarray:
        b = self.bias.value if self.has_bias else None
        return conv2d_forward(x, self.weight.value, b)

    def backward(self, dy: np.ndarray, x: np.ndarray, need_input_grad: bool = True) -> np.ndarray | None:
        dx, dk, db = conv2d_backward(dy, x, self.weight.value, self.has_bias)
        self.weight.grad += dk
        if self.has_bias:
            self.bias.grad += db
        return dx if need_input_grad else None


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (y > 0)


def patch_mean(x: np.ndarray, patch: int) -> np.ndarray:
    """Average-pool non-overlapping ``patch x patch`` blocks of (..., rows, cols, ch)."""
    rows, cols, ch = x.shape[-3:]
    if rows % patch or cols % patch:
        raise ConfigError(f"grid {rows}x{cols} is not divisible by patch size {patch}")
    lead = x.shape[:-3]
    v = x.reshape(lead + (rows // patch, patch, cols // patch, patch, ch))
    return v.mean(axis=(-4, -2))


def patch_mean_backward(dy: np.ndarray, patch: int) -> np.ndarray:
    g = np.repeat(np.repeat(dy, patch, axis=-3), patch, axis=-2)
    return g / (patch * patch)


# ---------------------------------------------------------------------------
# binary persistence


def _write_entries(fh, entries: Mapping[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<B", FORMAT_VERSION))
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 3:
            raise ConfigError(f"entry {name!r} must be rank-3, got {arr.shape}")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<3i", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_entries(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise DataError("bad magic bytes, not a tensor file")
    if data[4] != FORMAT_VERSION:
        raise DataError(f"unsupported format version {data[4]}")
    out: dict[str, np.ndarray] = {}
    pos = 5
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            shape = struct.unpack_from("<3i", data, pos)
            pos += 12
            count = shape[0] * shape[1] * shape[2]
            if pos + 8 * count > len(data):
                raise DataError(f"truncated payload for entry {name!r}")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise DataError(f"truncated tensor file: {exc}") from None
    return out


def dumps_tensors(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    _write_entries(buf, entries)
    return buf.getvalue()


def loads_tensors(data: bytes) -> dict[str, np.ndarray]:
    return _read_entries(data)


def save_tensors(path: str | Path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_tensors(entries))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return loads_tensors(Path(path).read_bytes())


def save_params(path: str | Path, params: ParamBundle) -> None:
    save_tensors(path, params.as_arrays())


def load_params(path: str | Path) -> ParamBundle:
    out = ParamBundle()
    for name, arr in load_tensors(path).items():
        out.add(name, arr)
    return out


class ConvStack:
    """Convolutions applied in sequence with ReLU between them.

    ``final_relu`` also rectifies the last output. ``forward`` returns the
    output plus the list of activations that ``backward`` needs.
    """

    def __init__(self, params: ParamBundle, names: list[str], final_relu: bool = False):
        self.layers = [Conv(params, n) for n in names]
        self.final_relu = final_relu

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.forward(h)
            if i < len(self.layers) - 1 or self.final_relu:
                h = relu(h)
            acts.append(h)
        return h, acts

    def backward(self, dy: np.ndarray, acts: list[np.ndarray], need_input_grad: bool = True) -> np.ndarray | None:
        g = dy
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.layers) - 1 or self.final_relu:
                g = relu_backward(g, acts[i + 1])
            g = self.layers[i].backward(g, acts[i], need_input_grad=(i > 0 or need_input_grad))
        return g
