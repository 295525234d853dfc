"""CSRNet (global) and CSRNet-L (local) built from the engine layers.

The base network is a stack of convolutions (1x1 for CSRNet, 3x3 for
CSRNet-L). Each base conv output is modulated by a scale and a shift
produced from the condition network, and all but the last are followed by
a ReLU. With GFM the condition network is three strided convs, a global
average pool and a normalizer, giving a vector that dense heads turn into
per-channel gamma/beta. With SFM the condition convs keep full resolution
and 1x1 conv heads produce per-pixel gamma/beta maps.
"""

import dataclasses
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .config import dataclass_from_kv, dataclass_to_text, parse_kv_text
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    ConfigMismatchError,
    ParameterShapeError,
    ShapeError,
    TruncatedCheckpointError,
    VersionError,
)

MODULATIONS = ("gfm", "sfm", "none")


@dataclass(frozen=True)
class ModelConfig:
    base_layers: int = 3
    base_kernel: int = 1
    base_channels: int = 64
    cond_channels: int = 32
    cond_kernels: tuple = (7, 3, 3)
    cond_stride: int = 2
    modulation: str = "gfm"
    normalizer: str = "un"
    pooled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "cond_kernels", tuple(int(k) for k in self.cond_kernels))
        if self.base_layers < 2:
            raise ConfigError(f"base_layers must be >= 2, got {self.base_layers}")
        if self.base_kernel not in (1, 3):
            raise ConfigError(f"base_kernel must be 1 or 3, got {self.base_kernel}")
        if self.base_channels < 1 or self.cond_channels < 1:
            raise ConfigError("channel counts must be positive")
        if not self.cond_kernels or any(k < 1 or k % 2 == 0 for k in self.cond_kernels):
            raise ConfigError(f"cond_kernels must be odd and positive, got {self.cond_kernels}")
        if self.modulation not in MODULATIONS:
            raise ConfigError(f"modulation must be one of {MODULATIONS}, got {self.modulation!r}")
        if self.normalizer not in E.NORMALIZERS:
            raise ConfigError(
                f"normalizer must be one of {E.NORMALIZERS}, got {self.normalizer!r}"
            )
        if self.modulation == "gfm" and not self.pooled:
            raise ConfigError("GFM requires pooled=true")
        if self.modulation == "sfm" and self.pooled:
            raise ConfigError("SFM requires pooled=false")
        if self.modulation != "none" and (self.cond_stride == 1) == self.pooled:
            raise ConfigError("cond_stride must be 1 exactly when pooled=false")
        if self.cond_stride < 1:
            raise ConfigError("cond_stride must be positive")

    @property
    def has_condition(self):
        return self.modulation != "none"

    @property
    def base_widths(self):
        """Channel counts along the base path, input and output included."""
        return [3] + [self.base_channels] * (self.base_layers - 1) + [3]

    @property
    def cond_widths(self):
        return [3] + [self.cond_channels] * len(self.cond_kernels)

    def to_text(self):
        return dataclass_to_text(self)

    @classmethod
    def from_text(cls, text):
        return dataclass_from_kv(cls, parse_kv_text(text, "model config"))


def csrnet_config(**overrides):
    return ModelConfig(**overrides)


def csrnet_l_config(**overrides):
    kw = dict(base_kernel=3, cond_stride=1, modulation="sfm", pooled=False)
    kw.update(overrides)
    return ModelConfig(**kw)


def base_only_config(**overrides):
    kw = dict(modulation="none")
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# parameter layout


def parameter_shapes(config):
    """Ordered ``name -> shape`` for every trainable tensor of ``config``."""
    shapes = OrderedDict()
    bw = config.base_widths
    k = config.base_kernel
    for i in range(config.base_layers):
        shapes[f"base.{i}.weight"] = (bw[i + 1], bw[i], k, k)
        shapes[f"base.{i}.bias"] = (bw[i + 1],)
    if not config.has_condition:
        return shapes
    cw = config.cond_widths
    for j, ck in enumerate(config.cond_kernels):
        shapes[f"cond.{j}.weight"] = (cw[j + 1], cw[j], ck, ck)
        shapes[f"cond.{j}.bias"] = (cw[j + 1],)
    cc = config.cond_channels
    for i in range(config.base_layers):
        out = bw[i + 1]
        wshape = (out, cc) if config.pooled else (out, cc, 1, 1)
        for role in ("scale", "shift"):
            shapes[f"head.{i}.{role}.weight"] = wshape
            shapes[f"head.{i}.{role}.bias"] = (out,)
    return shapes


def count_params(config):
    """Closed-form trainable parameter count."""

    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    bw = config.base_widths
    total = sum(conv(bw[i], bw[i + 1], config.base_kernel) for i in range(config.base_layers))
    if not config.has_condition:
        return total
    cw = config.cond_widths
    total += sum(conv(cw[j], cw[j + 1], k) for j, k in enumerate(config.cond_kernels))
    cc = config.cond_channels
    total += sum(2 * (cc * bw[i + 1] + bw[i + 1]) for i in range(config.base_layers))
    return total


def count_flops(config, height, width):
    """Multiply-accumulate count of all convolutions and heads (1 MAC = 1 FLOP).

    ReLU, pooling, normalizer and modulation arithmetic are not counted.
    """
    if height < 1 or width < 1:
        raise ValueError("image size must be positive")
    bw = config.base_widths
    k = config.base_kernel
    pixels = height * width
    macs = pixels * sum(bw[i] * bw[i + 1] * k * k for i in range(config.base_layers))
    if not config.has_condition:
        return macs
    cw = config.cond_widths
    h, w = height, width
    stride = config.cond_stride if config.pooled else 1
    for j, ck in enumerate(config.cond_kernels):
        h = E.conv_output_size(h, ck, stride, ck // 2)
        w = E.conv_output_size(w, ck, stride, ck // 2)
        macs += h * w * cw[j] * cw[j + 1] * ck * ck
    head = sum(2 * config.cond_channels * bw[i + 1] for i in range(config.base_layers))
    macs += head if config.pooled else head * pixels
    return macs


# ---------------------------------------------------------------------------
# model


class Model:
    """A config plus its named parameters (insertion order is canonical)."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    def __getitem__(self, name):
        return self.params[name].value

    @property
    def base_convs(self):
        return [p for n, p in self.params.items() if n.startswith("base.")]

    @property
    def cond_convs(self):
        return [p for n, p in self.params.items() if n.startswith("cond.")]

    @property
    def head_weights(self):
        return [p for n, p in self.params.items() if n.startswith("head.")]

    def num_parameters(self):
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype):
        return Model(self.config, OrderedDict((n, p.astype(dtype)) for n, p in self.params.items()))

    def copy(self):
        return self.astype(next(iter(self.params.values())).value.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype


def build(config, seed=0):
    """Deterministic initialization.

    Convs get He-normal weights and zero biases. Scale heads start at
    weight 0 / bias 1 and shift heads at 0 / 0, so a fresh model applies
    identity modulation.
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.startswith("head."):
            fill = 1.0 if name.endswith("scale.bias") else 0.0
            value = np.full(shape, fill, dtype=E.DTYPE)
        elif name.endswith(".bias"):
            value = np.zeros(shape, dtype=E.DTYPE)
        else:
            fan_in = int(np.prod(shape[1:]))
            value = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(E.DTYPE)
        params[name] = E.Parameter(value)
    return Model(config, params)


def _condition_forward(model, x, cache):
    cfg = model.config
    stride = cfg.cond_stride if cfg.pooled else 1
    last = len(cfg.cond_kernels) - 1
    h = x
    convs = []
    for j, k in enumerate(cfg.cond_kernels):
        c = {}
        z = E.conv2d(h, model[f"cond.{j}.weight"], model[f"cond.{j}.bias"], stride, k // 2, c)
        convs.append((h, z, c))
        h = E.relu(z) if j < last else z
    cache["cond_convs"] = convs
    cache["cond_features"] = h
    if cfg.pooled:
        pooled = E.global_avg_pool(h)
        cache["pooled"] = pooled
        h = E.apply_normalizer(cfg.normalizer, pooled)
    cache["cond_out"] = h
    return head_modulations(model, h)


def head_modulations(model, cond_out):
    """Per-layer gamma / beta from a condition vector (GFM) or condition maps (SFM)."""
    layer = E.fully_connected if model.config.pooled else E.conv2d
    mods = []
    for i in range(model.config.base_layers):
        gamma = layer(cond_out, model[f"head.{i}.scale.weight"], model[f"head.{i}.scale.bias"])
        beta = layer(cond_out, model[f"head.{i}.shift.weight"], model[f"head.{i}.shift.bias"])
        mods.append(E.ModulationParams(gamma, beta))
    return mods


def condition(model, x):
    """Condition output for a C x H x W input: the vector (GFM) or maps (SFM)."""
    cache = {}
    _condition_forward(model, x, cache)
    return cache["cond_out"]


def modulations(model, x):
    """Per-base-layer :class:`ModulationParams` for a C x H x W input."""
    if not model.config.has_condition:
        raise ConfigError("model has no condition network")
    return _condition_forward(model, x, {})


def forward_chw(model, x, cache=None, mods=None, bypass_condition=False):
    """Run the network on a 3 x H x W array.

    ``mods`` freezes the modulation to the given per-layer parameters;
    ``bypass_condition`` runs the bare base network with no modulation.
    """
    cfg = model.config
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"model input must be 3 x H x W, got {x.shape}")
    if cache is None:
        cache = {}
    use_mod = cfg.has_condition and not bypass_condition
    if use_mod and mods is None:
        mods = _condition_forward(model, x, cache)
    cache["mods"] = mods if use_mod else None
    cache["frozen_mods"] = use_mod and "cond_convs" not in cache
    modulate = E.gfm if cfg.pooled else E.sfm
    pad = cfg.base_kernel // 2
    last = cfg.base_layers - 1
    layers = []
    h = x
    for i in range(cfg.base_layers):
        c = {}
        z = E.conv2d(h, model[f"base.{i}.weight"], model[f"base.{i}.bias"], 1, pad, c)
        m = modulate(z, mods[i]) if use_mod else z
        layers.append((h, z, m, c))
        h = E.relu(m) if i < last else m
    cache["base"] = layers
    return h


def _accumulate(params, want, prefix, dw, db):
    if want(prefix + ".weight"):
        params[prefix + ".weight"].grad += dw
    if want(prefix + ".bias"):
        params[prefix + ".bias"].grad += db


def backward_chw(model, cache, grad_out, need_input_grad=False, train=None):
    """Accumulate parameter gradients into ``model`` from a forward cache.

    ``train`` optionally restricts which parameter names receive gradients
    (and lets the condition branch be skipped when none of it trains).
    Returns the input gradient when ``need_input_grad`` is set.
    """
    cfg = model.config
    params = model.params

    def want(name):
        return train is None or name in train

    mods = cache["mods"]
    use_mod = mods is not None
    modulate_bwd = E.gfm_backward if cfg.pooled else E.sfm_backward
    pad = cfg.base_kernel // 2
    last = cfg.base_layers - 1
    dmods = [None] * cfg.base_layers
    g = grad_out
    dx = None
    for i in range(last, -1, -1):
        h, z, m, c = cache["base"][i]
        if i < last:
            g = E.relu_backward(g, m)
        if use_mod:
            g, dgamma, dbeta = modulate_bwd(g, z, mods[i])
            dmods[i] = (dgamma, dbeta)
        need_dh = i > 0 or need_input_grad
        dh, dw, db = E.conv2d_backward(
            g, h, model[f"base.{i}.weight"], 1, pad, c, need_input_grad=need_dh
        )
        _accumulate(params, want, f"base.{i}", dw, db)
        g = dh
    dx = g

    if not use_mod or cache.get("frozen_mods"):
        return dx
    cond_names = [n for n in params if n.startswith(("cond.", "head."))]
    if not need_input_grad and not any(want(n) for n in cond_names):
        return dx

    feats = cache["cond_out"]
    dfeat = np.zeros_like(feats)
    for i in range(cfg.base_layers):
        dgamma, dbeta = dmods[i]
        for role, d in (("scale", dgamma), ("shift", dbeta)):
            w = model[f"head.{i}.{role}.weight"]
            if cfg.pooled:
                dv, dw, db = E.fully_connected_backward(d, feats, w)
            else:
                dv, dw, db = E.conv2d_backward(d, feats, w)
            _accumulate(params, want, f"head.{i}.{role}", dw, db)
            dfeat += dv
    if cfg.pooled:
        dpooled = E.normalizer_backward(cfg.normalizer, dfeat, cache["pooled"])
        g = E.global_avg_pool_backward(dpooled, cache["cond_features"].shape)
    else:
        g = dfeat
    stride = cfg.cond_stride if cfg.pooled else 1
    convs = cache["cond_convs"]
    last_c = len(convs) - 1
    for j in range(last_c, -1, -1):
        h, z, c = convs[j]
        if j < last_c:
            g = E.relu_backward(g, z)
        k = cfg.cond_kernels[j]
        need_dh = j > 0 or need_input_grad
        dh, dw, db = E.conv2d_backward(
            g, h, model[f"cond.{j}.weight"], stride, k // 2, c, need_input_grad=need_dh
        )
        _accumulate(params, want, f"cond.{j}", dw, db)
        g = dh
    if need_input_grad:
        dx = dx + g
    return dx


def to_chw(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got {img.shape}")
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def to_hwc(x):
    return np.ascontiguousarray(x.transpose(1, 2, 0))


def forward(model, img, mods=None, bypass_condition=False):
    """Retouch an H x W x 3 image; output is unclamped."""
    x = to_chw(img).astype(model.dtype, copy=False)
    return to_hwc(forward_chw(model, x, mods=mods, bypass_condition=bypass_condition))


def export_modulation(model, img, layer):
    """``(gamma, beta)`` the condition network produces for base layer ``layer``."""
    if not model.config.has_condition:
        raise ConfigError("model has no condition network")
    if not 0 <= layer < model.config.base_layers:
        raise IndexError(f"layer {layer} out of range [0, {model.config.base_layers})")
    x = to_chw(img).astype(model.dtype, copy=False)
    mod = modulations(model, x)[layer]
    return mod.gamma, mod.beta


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CSRN"
VERSION = 1


def _u32(n):
    return struct.pack("<I", n)


def save_checkpoint(model, path, include_adam=True):
    """Write ``model`` in the little-endian CSRN binary format."""
    out = bytearray(MAGIC)
    out += _u32(VERSION)
    cfg = model.config.to_text().encode("utf-8")
    out += _u32(len(cfg)) + cfg
    out += _u32(len(model.params))
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        out += _u32(len(raw)) + raw
        out += _u32(p.value.ndim)
        for d in p.value.shape:
            out += _u32(d)
        out += p.value.astype("<f4").tobytes()
    out += _u32(1 if include_adam else 0)
    if include_adam:
        for p in model.params.values():
            out += _u32(p.step_count)
            out += p.adam_m.astype("<f4").tobytes()
            out += p.adam_v.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.data)})"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def floats(self, count, what):
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(E.DTYPE)


def load_checkpoint(path, expected_config=None):
    """Read a checkpoint written by :func:`save_checkpoint`.

    If ``expected_config`` is given, a checkpoint saved under a different
    config is rejected with :class:`ConfigMismatchError`.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(min(4, len(data)), "magic") != MAGIC:
        raise BadMagicError(f"{path}: not a CSRN checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    cfg_text = r.take(r.u32("config length"), "config text").decode("utf-8")
    try:
        config = ModelConfig.from_text(cfg_text)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: invalid embedded config: {exc}") from exc
    if expected_config is not None and config != expected_config:
        diffs = [
            f.name
            for f in dataclasses.fields(config)
            if getattr(config, f.name) != getattr(expected_config, f.name)
        ]
        raise ConfigMismatchError(f"{path}: config mismatch in {', '.join(diffs)}")
    expected = parameter_shapes(config)
    count = r.u32("parameter count")
    if count != len(expected):
        raise ParameterShapeError(
            f"{path}: {count} parameters stored, config needs {len(expected)}"
        )
    params = OrderedDict()
    for name, shape in expected.items():
        stored = r.take(r.u32("name length"), "parameter name").decode("utf-8")
        rank = r.u32(f"{stored} rank")
        dims = tuple(r.u32(f"{stored} dims") for _ in range(rank))
        if stored != name or dims != shape:
            raise ParameterShapeError(
                f"{path}: expected {name}{list(shape)}, found {stored}{list(dims)}"
            )
        value = r.floats(int(np.prod(dims)), f"{name} data").reshape(dims)
        params[name] = E.Parameter(value)
    if r.u32("adam flag"):
        for name, p in params.items():
            p.step_count = r.u32(f"{name} step count")
            p.adam_m = r.floats(p.value.size, f"{name} adam m").reshape(p.shape)
            p.adam_v = r.floats(p.value.size, f"{name} adam v").reshape(p.shape)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return Model(config, params)
