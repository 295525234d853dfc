"""Classical pixel-independent retouching operators and their MLP forms.

Images are float arrays of shape (M, N, 3), nominally in [0, 1]. None of
the operators clamp; clamping only happens when an image is encoded.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

OP_KINDS = ("brightness", "contrast", "tone_curve", "white_balance", "saturation")


def _as_image(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"expected an M x N x 3 image, got shape {img.shape}")
    return img


def luminance(img):
    img = _as_image(img)
    return img @ LUMA_WEIGHTS.astype(img.dtype)


def brightness(img, alpha):
    return alpha * _as_image(img)


def contrast(img, alpha):
    """``alpha * I + (1 - alpha) * mean(I)`` with the mean taken per channel."""
    img = _as_image(img)
    mean = img.mean(axis=(0, 1), keepdims=True)
    return alpha * img + (1 - alpha) * mean


def _check_tone_params(t, tol):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 1 or t.size < 1:
        raise ValueError("tone curve needs at least one segment weight")
    if np.any(t < 0):
        raise ValueError(f"tone curve weights must be non-negative, got {t.tolist()}")
    if abs(t.sum() - 1.0) > tol:
        raise ValueError(f"tone curve weights must sum to 1, got {t.sum():.9g}")
    return t


def tone_curve(img, t):
    """Piecewise-linear curve ``f(v) = sum_k t_k * clip(L*v - k, 0, 1)``."""
    img = _as_image(img)
    t = _check_tone_params(t, 1e-6)
    levels = t.size
    v = np.clip(img, 0.0, 1.0)
    out = np.zeros_like(img)
    for k, weight in enumerate(t):
        out += weight * np.clip(levels * v - k, 0.0, 1.0)
    return out


def white_balance(img, gains):
    gains = np.asarray(gains, dtype=np.float64)
    if gains.shape != (3,):
        raise ValueError(f"white balance needs 3 gains, got {gains.shape}")
    img = _as_image(img)
    return img * gains.astype(img.dtype)


def saturation(img, alpha):
    """Blend each pixel toward its luminance: ``Y + alpha * (I - Y)``."""
    img = _as_image(img)
    y = luminance(img)[..., None]
    return y + alpha * (img - y)


@dataclass(frozen=True)
class RetouchOp:
    kind: str
    alpha: float = 1.0
    tone_params: tuple = ()
    gains: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown retouch op {self.kind!r}; expected one of {OP_KINDS}")
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.kind == "tone_curve":
            _check_tone_params(self.tone_params, 1e-9)
        if self.kind == "white_balance" and len(self.gains) != 3:
            raise ValueError("white balance needs 3 gains")

    def __call__(self, img):
        if self.kind == "brightness":
            return brightness(img, self.alpha)
        if self.kind == "contrast":
            return contrast(img, self.alpha)
        if self.kind == "tone_curve":
            return tone_curve(img, self.tone_params)
        if self.kind == "white_balance":
            return white_balance(img, self.gains)
        return saturation(img, self.alpha)

    def describe(self):
        if self.kind == "tone_curve":
            return "tone_curve(" + ",".join(f"{t:g}" for t in self.tone_params) + ")"
        if self.kind == "white_balance":
            return "white_balance(" + ",".join(f"{g:g}" for g in self.gains) + ")"
        return f"{self.kind}({self.alpha:g})"


# ---------------------------------------------------------------------------
# MLP equivalents over a flattened single channel


@dataclass
class MlpLayer:
    # stored input-major (in_dim x out_dim) and applied as W^T x + b
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __call__(self, x):
        y = self.weight.T @ x + self.bias
        if self.activation == "relu":
            y = np.maximum(y, 0)
        return y


@dataclass
class MlpEquivalent:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeError(
                    f"MLP layers do not chain: {a.weight.shape} then {b.weight.shape}"
                )

    @property
    def in_dim(self):
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self):
        return self.layers[-1].weight.shape[1]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def hidden(self, x, depth):
        """Activations after the first ``depth`` layers."""
        for layer in self.layers[:depth]:
            x = layer(x)
        return x


def build_mlp_brightness(alpha, m, n):
    """One identity-activated layer with ``W = diag(alpha)`` and ``b = 0``."""
    size = m * n
    if size < 1:
        raise ValueError("image must have at least one pixel")
    return MlpEquivalent([MlpLayer(alpha * np.eye(size), np.zeros(size))])


def build_mlp_contrast(alpha, m, n):
    """Two identity-activated layers of widths MN -> MN+1 -> MN.

    The first layer copies ``alpha * x`` into the first MN hidden units and
    writes the channel mean into the last one; the second adds
    ``(1 - alpha) * mean`` back onto every pixel.
    """
    size = m * n
    if size < 1:
        raise ValueError("image must have at least one pixel")
    a = alpha * np.eye(size)
    b = np.full((size, 1), 1.0 / size)
    c = np.eye(size)
    d = np.full((1, size), 1.0 - alpha)
    w1 = np.hstack([a, b])
    w2 = np.vstack([c, d])
    return MlpEquivalent(
        [MlpLayer(w1, np.zeros(size + 1)), MlpLayer(w2, np.zeros(size))]
    )


def verify_equivalence(op, mlp, img):
    """Max |MLP(channel) - op(img)[channel]| over every pixel and channel."""
    img = np.asarray(_as_image(img), dtype=np.float64)
    m, n, _ = img.shape
    if mlp.in_dim != m * n or mlp.out_dim != m * n:
        raise ShapeError(
            f"MLP built for {mlp.in_dim} inputs / {mlp.out_dim} outputs, image has {m * n} pixels"
        )
    expected = op(img)
    worst = 0.0
    for c in range(3):
        got = mlp(img[:, :, c].reshape(-1)).reshape(m, n)
        worst = max(worst, float(np.max(np.abs(got - expected[:, :, c]))))
    return worst
