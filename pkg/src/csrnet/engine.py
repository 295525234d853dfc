"""Minimal dense-tensor engine with hand-written backward passes.

Tensors are plain numpy arrays laid out channel-first (C x H x W) for a
single image; there is no batch axis because training uses one image per
step. Every op here is a pure function. Backward functions take the
upstream gradient plus whatever the forward pass consumed and return the
gradients with respect to each differentiable input.

float32 is the working precision. Passing float64 arrays runs every op in
float64, which is how the finite-difference checker gets clean numbers.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DegenerateInputError, DivergenceError, ShapeError

EPS = 1e-12
DTYPE = np.float32

NORMALIZERS = (
    "none",
    "softmax",
    "sigmoid",
    "softmax_scaling",
    "sigmoid_scaling",
    "zscore",
    "minmax",
    "un",
)


def check_finite(x, name="tensor"):
    """Debug assertion: raise if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name} contains non-finite values")
    return x


@dataclass
class Parameter:
    """A trainable tensor plus its gradient and Adam moment buffers."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)
        for buf in (self.grad, self.adam_m, self.adam_v):
            if buf.shape != self.value.shape:
                raise ShapeError(
                    f"parameter buffers must share shape {self.value.shape}, got {buf.shape}"
                )

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)

    def astype(self, dtype):
        return Parameter(
            self.value.astype(dtype),
            self.grad.astype(dtype),
            self.adam_m.astype(dtype),
            self.adam_v.astype(dtype),
            self.step_count,
        )


@dataclass(frozen=True)
class ModulationParams:
    """Affine modulation: per-channel vectors (GFM) or per-element maps (SFM)."""

    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape:
            raise ShapeError(
                f"gamma shape {self.gamma.shape} != beta shape {self.beta.shape}"
            )

    @property
    def rank(self):
        return self.gamma.ndim


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv_args(x, w, b, stride, padding):
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be C x H x W, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d weight must be O x C x K x K, got shape {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[0]} channels, "
            f"weight expects {w.shape[1]} (weight shape {w.shape})"
        )
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias must have shape ({w.shape[0]},), got {b.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    oh = conv_output_size(x.shape[1], k, stride, padding)
    ow = conv_output_size(x.shape[2], k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d output would be {oh} x {ow} for input {x.shape[1:]} "
            f"with K={k}, stride={stride}, padding={padding}"
        )
    return k, oh, ow


def _is_pointwise(k, stride, padding):
    return k == 1 and stride == 1 and padding == 0


def im2col(x, k, stride, padding):
    """Unfold ``x`` (C x H x W) into a (C*K*K) x (H'*W') column matrix."""
    c, h, w = x.shape
    if padding:
        xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, padding : padding + h, padding : padding + w] = x
    else:
        xp = np.ascontiguousarray(x)
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    sc, sh, sw = xp.strides
    # (c, ki, kj, oy, ox) view; the reshape copies it into column order
    win = as_strided(xp, (c, k, k, oh, ow), (sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return win.reshape(c * k * k, oh * ow)


def conv2d(x, w, b, stride=1, padding=0, cache=None):
    """Cross-correlation with zero padding.

    ``cache`` may be a dict; the unfolded input is stored there so the
    backward pass does not have to rebuild it.
    """
    k, oh, ow = _check_conv_args(x, w, b, stride, padding)
    o = w.shape[0]
    if _is_pointwise(k, stride, padding):
        cols = x.reshape(x.shape[0], -1)
    else:
        cols = im2col(x, k, stride, padding)
    if cache is not None:
        cache["cols"] = cols
    out = w.reshape(o, -1) @ cols
    out += b[:, None]
    return out.reshape(o, oh, ow)


def conv2d_backward(grad_out, x, w, stride=1, padding=0, cache=None, need_input_grad=True):
    """Return ``(dx, dw, db)`` for :func:`conv2d`."""
    o, c, k, _ = w.shape
    _, h, wd = x.shape
    oh, ow = grad_out.shape[1:]
    g2 = grad_out.reshape(o, -1)
    if cache is not None and "cols" in cache:
        cols = cache["cols"]
    elif _is_pointwise(k, stride, padding):
        cols = x.reshape(c, -1)
    else:
        cols = im2col(x, k, stride, padding)
    dw = (g2 @ cols.T).reshape(w.shape)
    db = g2.sum(axis=1)
    if not need_input_grad:
        return None, dw, db
    dcols = w.reshape(o, -1).T @ g2
    if _is_pointwise(k, stride, padding):
        return dcols.reshape(x.shape), dw, db
    dcols = dcols.reshape(c, k, k, oh, ow)
    dxp = np.zeros((c, h + 2 * padding, wd + 2 * padding), dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, i, j]
    return dxp[:, padding : padding + h, padding : padding + wd], dw, db


# ---------------------------------------------------------------------------
# pointwise / pooling / dense


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


def global_avg_pool(x):
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects C x H x W, got {x.shape}")
    return x.mean(axis=(1, 2))


def global_avg_pool_backward(grad_out, input_shape):
    _, h, w = input_shape
    g = grad_out / (h * w)
    return np.broadcast_to(g[:, None, None], input_shape).copy()


def fully_connected(x, w, b):
    if x.ndim != 1 or w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"fully_connected shape mismatch: x {x.shape}, weight {w.shape}, bias {b.shape}"
        )
    return w @ x + b


def fully_connected_backward(grad_out, x, w):
    """Return ``(dx, dw, db)``."""
    return w.T @ grad_out, np.outer(grad_out, x), grad_out.copy()


# ---------------------------------------------------------------------------
# feature modulation


def gfm(x, mod):
    """Global feature modulation: ``gamma[c] * x[c] + beta[c]``."""
    if mod.rank != 1 or x.ndim != 3 or mod.gamma.shape[0] != x.shape[0]:
        raise ShapeError(
            f"gfm needs rank-1 gamma/beta of length C={x.shape[0] if x.ndim else '?'}, "
            f"got gamma {mod.gamma.shape} for x {x.shape}"
        )
    return mod.gamma[:, None, None] * x + mod.beta[:, None, None]


def gfm_backward(grad_out, x, mod):
    """Return ``(dx, dgamma, dbeta)``."""
    dx = grad_out * mod.gamma[:, None, None]
    dgamma = (grad_out * x).sum(axis=(1, 2))
    dbeta = grad_out.sum(axis=(1, 2))
    return dx, dgamma, dbeta


def sfm(x, mod):
    """Spatial feature modulation: elementwise ``gamma * x + beta``."""
    if mod.rank != 3 or mod.gamma.shape != x.shape:
        raise ShapeError(
            f"sfm needs gamma/beta maps shaped like x {x.shape}, got {mod.gamma.shape}"
        )
    return mod.gamma * x + mod.beta


def sfm_backward(grad_out, x, mod):
    return grad_out * mod.gamma, grad_out * x, grad_out.copy()


# ---------------------------------------------------------------------------
# normalizers


def unit_normalize(x):
    """Rescale ``x`` onto the sphere of radius sqrt(N)."""
    norm = float(np.linalg.norm(x))
    if norm < EPS:
        raise DegenerateInputError(f"unit_normalize: input norm {norm:.3g} below {EPS}")
    return (float(np.sqrt(x.size)) / norm) * x


def unit_normalize_backward(grad_out, x):
    norm = float(np.linalg.norm(x))
    if norm < EPS:
        raise DegenerateInputError(f"unit_normalize: input norm {norm:.3g} below {EPS}")
    scale = float(np.sqrt(x.size)) / norm
    return scale * (grad_out - x * (float(np.dot(x, grad_out)) / (norm * norm)))


def _sigmoid(x):
    # split by sign to keep exp() from overflowing
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def _zscore_stats(x):
    mu = x.mean()
    sigma = np.sqrt(np.mean((x - mu) ** 2))
    if sigma < EPS:
        raise DegenerateInputError("zscore: input has zero standard deviation")
    return mu, sigma


def _minmax_stats(x):
    lo, hi = x.min(), x.max()
    if hi - lo < EPS:
        raise DegenerateInputError("minmax: input is constant")
    return lo, hi


def apply_normalizer(kind, x):
    """Apply one of :data:`NORMALIZERS` to the vector ``x``."""
    if kind == "none":
        return x.copy()
    if kind == "softmax":
        return _softmax(x)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "softmax_scaling":
        return _softmax(x) * x
    if kind == "sigmoid_scaling":
        return _sigmoid(x) * x
    if kind == "zscore":
        mu, sigma = _zscore_stats(x)
        return (x - mu) / sigma
    if kind == "minmax":
        lo, hi = _minmax_stats(x)
        return (x - lo) / (hi - lo)
    if kind == "un":
        return unit_normalize(x)
    raise ValueError(f"unknown normalizer {kind!r}; expected one of {NORMALIZERS}")


def normalizer_backward(kind, grad_out, x):
    """Full-Jacobian backward for :func:`apply_normalizer`."""
    g = grad_out
    if kind == "none":
        return g.copy()
    if kind == "softmax":
        s = _softmax(x)
        return s * (g - np.dot(g, s))
    if kind == "sigmoid":
        s = _sigmoid(x)
        return g * s * (1 - s)
    if kind == "softmax_scaling":
        s = _softmax(x)
        gx = g * x
        return g * s + s * (gx - np.dot(gx, s))
    if kind == "sigmoid_scaling":
        s = _sigmoid(x)
        return g * (s + x * s * (1 - s))
    if kind == "zscore":
        mu, sigma = _zscore_stats(x)
        y = (x - mu) / sigma
        return (g - g.mean() - y * np.mean(g * y)) / sigma
    if kind == "minmax":
        lo, hi = _minmax_stats(x)
        r = hi - lo
        y = (x - lo) / r
        dx = g / r
        gy = np.dot(g, y)
        dx[np.argmin(x)] += (gy - g.sum()) / r
        dx[np.argmax(x)] -= gy / r
        return dx
    if kind == "un":
        return unit_normalize_backward(g, x)
    raise ValueError(f"unknown normalizer {kind!r}; expected one of {NORMALIZERS}")


# ---------------------------------------------------------------------------
# loss and optimizer


def l1_loss(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def l1_loss_backward(pred, target):
    # np.sign is 0 at ties
    return np.sign(pred - target) / pred.size


def adam_step(param, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of ``param`` in place; returns ``param``."""
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise DivergenceError(f"non-finite gradient at Adam step {param.step_count + 1}")
    param.step_count += 1
    t = param.step_count
    param.adam_m *= beta1
    param.adam_m += (1 - beta1) * g
    param.adam_v *= beta2
    param.adam_v += (1 - beta2) * (g * g)
    m_hat = param.adam_m / (1 - beta1**t)
    v_hat = param.adam_v / (1 - beta2**t)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn, grad_fn, inputs, h=1e-5):
    """Compare analytic gradients against central differences.

    ``loss_fn(inputs)`` returns a scalar and ``grad_fn(inputs)`` returns one
    gradient array per input. Inputs are perturbed in place and restored;
    they should be float64. Returns the max over all elements of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in grad_fn(inputs)]
    worst = 0.0
    for arr, grad in zip(inputs, analytic):
        if grad.shape != arr.shape:
            raise ShapeError(f"gradient shape {grad.shape} != input shape {arr.shape}")
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn(inputs)
            flat[i] = orig - h
            fm = loss_fn(inputs)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, abs(gflat[i] - numeric) / max(1.0, abs(numeric)))
    return worst
