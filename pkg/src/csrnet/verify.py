"""Finite-difference verification of every layer and of whole models."""

import numpy as np

from . import engine as E
from .model import backward_chw, build, csrnet_config, forward_chw, head_modulations


def _projected(forward, backward, inputs, rng):
    r = rng.standard_normal(np.shape(forward(*inputs)))
    return E.grad_check(
        lambda xs: float(np.sum(r * forward(*xs))),
        lambda xs: backward(r, *xs),
        inputs,
    )


def _away_from_zero(x, margin=0.1):
    return np.where(np.abs(x) < margin, x + np.copysign(2 * margin, x), x)


def check_layers(seed=0):
    """Max relative gradient error for every engine layer, keyed by name."""
    rng = np.random.default_rng(seed)

    def randn(*shape):
        return rng.standard_normal(shape)

    results = {}
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        results[f"conv2d_k3_s{stride}_p{pad}"] = _projected(
            lambda x, w, b: E.conv2d(x, w, b, stride, pad),
            lambda g, x, w, b: E.conv2d_backward(g, x, w, stride, pad),
            [randn(2, 4, 4), randn(3, 2, 3, 3), randn(3)],
            rng,
        )
    results["conv2d_k1"] = _projected(
        E.conv2d,
        lambda g, x, w, b: E.conv2d_backward(g, x, w),
        [randn(3, 4, 4), randn(5, 3, 1, 1), randn(5)],
        rng,
    )
    results["relu"] = _projected(
        E.relu, lambda g, x: [E.relu_backward(g, x)], [_away_from_zero(randn(2, 4, 4))], rng
    )
    results["global_avg_pool"] = _projected(
        E.global_avg_pool, lambda g, x: [E.global_avg_pool_backward(g, x.shape)], [randn(3, 4, 5)], rng
    )
    results["fully_connected"] = _projected(
        E.fully_connected,
        lambda g, x, w, b: E.fully_connected_backward(g, x, w),
        [randn(6), randn(4, 6), randn(4)], rng
    )
    results["gfm"] = _projected(
        lambda x, g, b: E.gfm(x, E.ModulationParams(g, b)),
        lambda r, x, g, b: E.gfm_backward(r, x, E.ModulationParams(g, b)),
        [randn(3, 4, 4), randn(3), randn(3)],
        rng,
    )
    results["sfm"] = _projected(
        lambda x, g, b: E.sfm(x, E.ModulationParams(g, b)),
        lambda r, x, g, b: E.sfm_backward(r, x, E.ModulationParams(g, b)),
        [randn(3, 4, 4), randn(3, 4, 4), randn(3, 4, 4)],
        rng,
    )
    for kind in E.NORMALIZERS:
        results[f"normalizer_{kind}"] = _projected(
            lambda x: E.apply_normalizer(kind, x),
            lambda g, x: [E.normalizer_backward(kind, g, x)],
            [randn(9)],
            rng,
        )
    target = rng.random((3, 4, 4))
    pred = target + np.where(rng.random(target.shape) < 0.5, -1, 1) * (0.1 + rng.random(target.shape))
    results["l1_loss"] = E.grad_check(
        lambda xs: E.l1_loss(xs[0], target),
        lambda xs: [E.l1_loss_backward(xs[0], target)],
        [pred],
    )
    return results


def randomize_heads(model, rng, scale=0.3):
    """Give the modulation heads non-trivial weights so the condition path carries gradient."""
    for name, p in model.params.items():
        if name.startswith("head."):
            p.value[...] = p.value + scale * rng.standard_normal(p.shape).astype(p.value.dtype)
            if name.endswith("bias"):
                p.value[...] = p.value + 0.1 * rng.standard_normal(p.shape).astype(p.value.dtype)
    return model


def check_model(config=None, seed=0, size=(8, 8)):
    """End-to-end gradient check of a model over its input and all parameters.

    Every element is perturbed. Perturbing a base weight cannot change the
    modulation, and perturbing a head weight cannot change the condition
    output, so those groups reuse the cached upstream values.
    """
    config = config or csrnet_config()
    rng = np.random.default_rng(seed)
    model = build(config, seed).astype(np.float64)
    randomize_heads(model, rng)
    x = rng.random((3, *size))
    r = rng.standard_normal((3, *size))

    model.zero_grad()
    cache = {}
    forward_chw(model, x, cache)
    dx = backward_chw(model, cache, r, need_input_grad=True)

    def loss(mods_fn=None):
        def fn(xs):
            mods = None if mods_fn is None else mods_fn()
            return float(np.sum(r * forward_chw(model, x, mods=mods)))

        return fn

    def check(prefix, loss_fn):
        names = [n for n in model.params if n.startswith(prefix)]
        if not names:
            return 0.0
        grads = [model.params[n].grad for n in names]
        return E.grad_check(loss_fn, lambda xs: grads, [model[n] for n in names])

    input_loss = lambda xs: float(np.sum(r * forward_chw(model, xs[0])))  # noqa: E731
    worst = E.grad_check(input_loss, lambda xs: [dx], [x])
    worst = max(worst, check("cond.", loss()))
    if config.has_condition:
        mods = cache["mods"]
        cond_out = cache["cond_out"]
        worst = max(worst, check("base.", loss(lambda: mods)))
        worst = max(worst, check("head.", loss(lambda: head_modulations(model, cond_out))))
    else:
        worst = max(worst, check("base.", loss()))
    return worst
