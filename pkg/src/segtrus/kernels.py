"""Layer primitives with forward and analytic backward passes.

Every activation is a float64 ``numpy.ndarray`` of shape ``(N, C, H, W)``.
Pooling index maps are int64 arrays of the pooled shape holding flat
``row * W + col`` offsets into the pre-pooling ``(H, W)`` plane.

Conventions fixed for determinism:

* convolution is 3x3 cross-correlation, stride 1, zero padding 1;
* pooling is 2x2 with stride 2, ties go to the first cell in row-major order;
* the ReLU subgradient at 0 is 0;
* batch normalization uses the biased batch variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, NumericError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_tensor4(x, name="x"):
    """Return ``x`` as a C-contiguous float64 4-axis array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must have 4 axes (N, C, H, W), got shape {arr.shape}")
    return arr


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {a.shape} does not match {b.shape}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _im2col(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, h, w), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + h, kx:kx + w]
    return cols.reshape(n, c * 9, h * w)


def _check_conv_args(x, weights, bias):
    if weights.ndim != 4 or weights.shape[2:] != (3, 3):
        raise ShapeError(f"conv weights must be (C_out, C_in, 3, 3), got {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"conv input has {x.shape[1]} channels, weights expect {weights.shape[1]}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"conv input has empty spatial extent {x.shape[2:]}")
    if bias is not None and np.shape(bias) != (weights.shape[0],):
        raise ShapeError(f"conv bias must have shape ({weights.shape[0]},), got {np.shape(bias)}")


def conv2d_forward(x, weights, bias=None):
    x = as_tensor4(x)
    weights = np.asarray(weights, dtype=np.float64)
    _check_conv_args(x, weights, bias)
    n, _, h, w = x.shape
    c_out = weights.shape[0]
    out = np.matmul(weights.reshape(c_out, -1), _im2col(x))
    out = out.reshape(n, c_out, h, w)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[None, :, None, None]
    return out


def conv2d_backward(x, weights, grad_out):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    x = as_tensor4(x)
    weights = np.asarray(weights, dtype=np.float64)
    _check_conv_args(x, weights, None)
    n, c_in, h, w = x.shape
    c_out = weights.shape[0]
    grad_out = as_tensor4(grad_out, "grad_out")
    if grad_out.shape != (n, c_out, h, w):
        raise ShapeError(f"conv grad_out shape {grad_out.shape} != {(n, c_out, h, w)}")

    g = grad_out.reshape(n, c_out, h * w)
    cols = _im2col(x)
    grad_w = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weights.shape)
    grad_b = g.sum(axis=(0, 2))

    grad_cols = np.matmul(weights.reshape(c_out, -1).T, g).reshape(n, c_in, 3, 3, h, w)
    grad_xp = np.zeros((n, c_in, h + 2, w + 2), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            grad_xp[:, :, ky:ky + h, kx:kx + w] += grad_cols[:, :, ky, kx]
    return grad_xp[:, :, 1:-1, 1:-1].copy(), grad_w, grad_b


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

@dataclass
class BnState:
    """Per-channel scale/shift and running statistics of one BN layer.

    Arrays are held by reference, so a state built over a parameter store
    updates that store's running statistics in place.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum_bn: float = BN_MOMENTUM

    def __post_init__(self):
        c = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != c:
                raise ShapeError(f"BnState.{name} has length {len(getattr(self, name))}, expected {c}")
        if self.eps <= 0:
            raise ValueError("BnState.eps must be positive")
        if not 0.0 <= self.momentum_bn <= 1.0:
            raise ValueError("BnState.momentum_bn must lie in [0, 1]")

    @classmethod
    def fresh(cls, channels):
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
        )

    @property
    def channels(self):
        return len(self.gamma)


def _bn_stats(x):
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def _bcast(v):
    return np.asarray(v, dtype=np.float64)[None, :, None, None]


def batchnorm_forward(x, state, training):
    x = as_tensor4(x)
    if x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm input has {x.shape[1]} channels, state has {state.channels}")
    if training:
        n, _, h, w = x.shape
        if n * h * w < 2:
            raise ShapeError("batchnorm training mode needs at least 2 values per channel")
        mean, var = _bn_stats(x)
        m = state.momentum_bn
        state.running_mean[...] = (1.0 - m) * state.running_mean + m * mean
        state.running_var[...] = (1.0 - m) * state.running_var + m * var
    else:
        mean, var = state.running_mean, state.running_var
    xhat = (x - _bcast(mean)) / np.sqrt(_bcast(var) + state.eps)
    return _bcast(state.gamma) * xhat + _bcast(state.beta)


def batchnorm_backward(x, state, grad_out):
    """Gradient of training-mode batch normalization, batch statistics included."""
    x = as_tensor4(x)
    if x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm input has {x.shape[1]} channels, state has {state.channels}")
    grad_out = as_tensor4(grad_out, "grad_out")
    _check_same_shape(grad_out, x, "batchnorm grad_out")
    n, _, h, w = x.shape
    count = n * h * w
    mean, var = _bn_stats(x)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - _bcast(mean)) * _bcast(inv_std)

    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    dxhat = grad_out * _bcast(state.gamma)
    grad_x = (_bcast(inv_std) / count) * (
        count * dxhat
        - _bcast(dxhat.sum(axis=(0, 2, 3)))
        - xhat * _bcast((dxhat * xhat).sum(axis=(0, 2, 3)))
    )
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# pointwise ops
# --------------------------------------------------------------------------

def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, grad_out):
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    _check_same_shape(grad_out, x, "relu grad_out")
    return np.where(x > 0.0, grad_out, 0.0)


def residual_add(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b, "residual_add")
    return a + b


def residual_add_backward(grad_out):
    """Both summands receive the upstream gradient unchanged."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    return grad_out, grad_out.copy()


def softmax_pixelwise(x):
    x = as_tensor4(x)
    if x.shape[1] < 2:
        raise ShapeError("softmax needs at least 2 channels")
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_backward(probs, grad_out):
    """Vector-Jacobian product of the channel softmax, given its output."""
    probs = as_tensor4(probs, "probs")
    grad_out = as_tensor4(grad_out, "grad_out")
    _check_same_shape(grad_out, probs, "softmax grad_out")
    return probs * (grad_out - (probs * grad_out).sum(axis=1, keepdims=True))


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def maxpool2d(x):
    """2x2 stride-2 max pooling, returning values and argmax offsets."""
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial extents, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    k = windows.argmax(axis=-1)
    values = np.take_along_axis(windows, k[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(ho)[:, None] + k // 2
    cols = 2 * np.arange(wo)[None, :] + k % 2
    return values, (rows * w + cols).astype(np.int64)


def _check_indices(y, idx, out_h, out_w):
    if idx.shape != y.shape:
        raise ShapeError(f"index map shape {idx.shape} != pooled shape {y.shape}")
    ho, wo = y.shape[2:]
    if out_h != 2 * ho or out_w != 2 * wo:
        raise ShapeError(f"unpool target {out_h}x{out_w} is not twice {ho}x{wo}")
    rows, cols = np.divmod(idx, out_w)
    ok = (rows // 2 == np.arange(ho)[:, None]) & (cols // 2 == np.arange(wo)[None, :])
    if not ok.all() or (idx < 0).any():
        bad = tuple(int(v) for v in np.argwhere(~ok | (idx < 0))[0])
        raise CorruptionError(f"index map entry {bad} points outside its 2x2 window")


def maxunpool2d(y, idx, out_h, out_w):
    """Scatter pooled values back to their recorded argmax cells."""
    y = as_tensor4(y, "y")
    idx = np.asarray(idx, dtype=np.int64)
    _check_indices(y, idx, out_h, out_w)
    n, c = y.shape[:2]
    out = np.zeros((n, c, out_h * out_w), dtype=np.float64)
    np.put_along_axis(out, idx.reshape(n, c, -1), y.reshape(n, c, -1), axis=2)
    return out.reshape(n, c, out_h, out_w)


def maxpool2d_backward(grad_out, idx, in_h, in_w):
    return maxunpool2d(grad_out, idx, in_h, in_w)


def maxunpool2d_backward(grad_out, idx):
    grad_out = as_tensor4(grad_out, "grad_out")
    idx = np.asarray(idx, dtype=np.int64)
    n, c = grad_out.shape[:2]
    flat = grad_out.reshape(n, c, -1)
    return np.take_along_axis(flat, idx.reshape(n, c, -1), axis=2).reshape(idx.shape)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    """Maximum relative error per checked argument."""

    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def failed(self):
        return [name for name, err in self.errors.items() if not err <= self.tolerance]

    @property
    def passed(self):
        return not self.failed

    def lines(self):
        for name, err in self.errors.items():
            status = "PASS" if err <= self.tolerance else "FAIL"
            yield f"{status} {name}: max rel err {err:.3e} (tol {self.tolerance:.0e})"


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def gradcheck(forward, backward, inputs, *, tolerance=1e-4, step=1e-5, seed=0, masks=None):
    """Compare analytic gradients against central finite differences.

    ``forward(**inputs)`` returns an array. ``backward(grad_out, **inputs)``
    returns a dict mapping input names to gradients; names missing from it
    are not checked. The output is reduced to a scalar through a fixed random
    projection drawn from ``seed``. ``masks`` optionally maps an input name
    to a boolean array selecting which elements to perturb.
    """
    from .data import Rng

    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    for name, arr in inputs.items():
        if not np.isfinite(arr).all():
            raise NumericError(f"gradcheck input {name!r} is not finite")
    masks = masks or {}

    out = np.asarray(forward(**inputs), dtype=np.float64)
    if not np.isfinite(out).all():
        raise NumericError("gradcheck forward produced non-finite output")
    proj = Rng(seed).uniform_array(out.size).reshape(out.shape) * 2.0 - 1.0
    analytic = backward(proj.copy(), **inputs)

    def objective():
        val = np.asarray(forward(**inputs), dtype=np.float64)
        if not np.isfinite(val).all():
            raise NumericError("gradcheck forward produced non-finite output")
        return math.fsum((proj * val).ravel())

    report = GradcheckReport(tolerance=tolerance)
    for name, grad in analytic.items():
        if grad is None:
            continue
        arr = inputs[name]
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != arr.shape:
            raise ShapeError(f"gradient for {name!r} has shape {grad.shape}, expected {arr.shape}")
        if not np.isfinite(grad).all():
            raise NumericError(f"analytic gradient for {name!r} is not finite")
        selected = masks.get(name)
        worst = 0.0
        flat = arr.reshape(-1)
        for i in range(flat.size):
            if selected is not None and not selected.reshape(-1)[i]:
                continue
            orig = flat[i]
            hi = orig + step
            lo = orig - step
            flat[i] = hi
            f_hi = objective()
            flat[i] = lo
            f_lo = objective()
            flat[i] = orig
            numeric = (f_hi - f_lo) / (hi - lo)
            worst = max(worst, float(relative_error(grad.reshape(-1)[i], numeric)))
        report.errors[name] = worst
    return report
