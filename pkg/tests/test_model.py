import numpy as np
import pytest

from csrnet import engine as E
from csrnet.errors import (
    BadMagicError,
    ConfigError,
    ConfigMismatchError,
    ParameterShapeError,
    TruncatedCheckpointError,
    VersionError,
)
from csrnet.model import (
    ModelConfig,
    backward_chw,
    base_only_config,
    build,
    condition,
    count_flops,
    count_params,
    csrnet_config,
    csrnet_l_config,
    export_modulation,
    forward,
    forward_chw,
    load_checkpoint,
    modulations,
    parameter_shapes,
    save_checkpoint,
    to_chw,
)
from csrnet.verify import check_model, randomize_heads

ABLATION_GRID = [
    (layers, kernel, cond)
    for layers in (3, 5, 7)
    for kernel in (1, 3)
    for cond in (True, False)
]


def grid_config(layers, kernel, cond):
    if not cond:
        return base_only_config(base_layers=layers, base_kernel=kernel)
    if kernel == 1:
        return csrnet_config(base_layers=layers)
    return csrnet_l_config(base_layers=layers)


@pytest.fixture
def img():
    return np.random.default_rng(3).random((8, 8, 3)).astype(np.float32)


class TestConfig:
    def test_defaults_are_csrnet(self):
        c = ModelConfig()
        assert (c.base_layers, c.base_kernel, c.base_channels, c.cond_channels) == (3, 1, 64, 32)
        assert c.cond_kernels == (7, 3, 3) and c.modulation == "gfm" and c.normalizer == "un"

    @pytest.mark.parametrize(
        "kwargs,match",
        [
            (dict(base_layers=1), "base_layers"),
            (dict(modulation="gfm", pooled=False, cond_stride=1), "GFM requires pooled"),
            (dict(modulation="sfm", pooled=True), "SFM requires pooled=false"),
            (dict(cond_stride=1), "cond_stride"),
            (dict(normalizer="layernorm"), "normalizer"),
            (dict(base_kernel=5), "base_kernel"),
        ],
    )
    def test_invalid(self, kwargs, match):
        with pytest.raises(ConfigError, match=match):
            ModelConfig(**kwargs)

    def test_text_round_trip(self):
        c = csrnet_l_config(base_layers=5, normalizer="zscore")
        assert ModelConfig.from_text(c.to_text()) == c

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            ModelConfig.from_text("base_layers = 3\nwidth = 9\n")


class TestCounting:
    @pytest.mark.parametrize(
        "config,expected",
        [
            (csrnet_config(), 36_489),
            (base_only_config(), 4_611),
            (base_only_config(base_kernel=3), 40_451),
            (csrnet_config(base_layers=5), 53_257),
            (csrnet_config(base_layers=7), 70_025),
            (csrnet_l_config(), 72_329),
        ],
    )
    def test_published_counts(self, config, expected):
        assert count_params(config) == expected

    @pytest.mark.parametrize("layers,kernel,cond", ABLATION_GRID)
    def test_closed_form_matches_instantiated(self, layers, kernel, cond):
        config = grid_config(layers, kernel, cond)
        assert count_params(config) == build(config, 0).num_parameters()

    def test_flops_published_value(self):
        assert 1.43e9 <= count_flops(csrnet_config(), 480, 480) <= 1.49e9

    def test_flops_per_pixel_base(self):
        assert count_flops(base_only_config(), 1, 1) == 3 * 64 + 64 * 64 + 64 * 3 == 4480

    def test_flops_base_scales_with_area(self):
        c = base_only_config()
        assert count_flops(c, 20, 30) == 4 * count_flops(c, 10, 15)

    def test_flops_condition_uses_ceil_sizes(self):
        # 7x7 input: stride-2 convs give 4x4, 2x2, 1x1
        c = csrnet_config()
        base = 49 * 4480
        cond = 16 * 3 * 32 * 49 + 4 * 32 * 32 * 9 + 1 * 32 * 32 * 9
        heads = 2 * 32 * (64 + 64 + 3)
        assert count_flops(c, 7, 7) == base + cond + heads


class TestBuild:
    def test_layout(self):
        m = build(csrnet_config(), 0)
        assert len(m.base_convs) == 6 and len(m.cond_convs) == 6 and len(m.head_weights) == 12
        assert m["head.2.scale.weight"].shape == (3, 32)
        sfm = build(csrnet_l_config(), 0)
        assert sfm["head.0.shift.weight"].shape == (64, 32, 1, 1)
        assert sfm["base.0.weight"].shape == (64, 3, 3, 3)

    def test_initialization(self):
        m = build(csrnet_config(), 5)
        for name, p in m.params.items():
            assert p.value.dtype == np.float32
            if name.startswith("head."):
                want = 1.0 if name.endswith("scale.bias") else 0.0
                assert np.all(p.value == want), name
            elif name.endswith("bias"):
                assert not p.value.any()
        w = m["base.1.weight"]
        assert np.std(w) == pytest.approx(np.sqrt(2 / 64), rel=0.1)

    def test_deterministic(self):
        a, b = build(csrnet_config(), 42), build(csrnet_config(), 42)
        for name in a.params:
            assert a[name].tobytes() == b[name].tobytes()
        c = build(csrnet_config(), 43)
        assert a["base.0.weight"].tobytes() != c["base.0.weight"].tobytes()

    @pytest.mark.parametrize("config", [csrnet_config(), csrnet_l_config()], ids=["gfm", "sfm"])
    def test_fresh_model_equals_bare_base(self, config):
        m = build(config, 1)
        for seed in range(3):
            x = np.random.default_rng(seed).random((12, 10, 3)).astype(np.float32)
            diff = np.max(np.abs(forward(m, x) - forward(m, x, bypass_condition=True)))
            assert diff == 0.0


class TestForward:
    def test_shape_and_dtype(self, img):
        out = forward(build(csrnet_config(), 0), img)
        assert out.shape == img.shape and out.dtype == np.float32

    def test_deterministic(self, img):
        m = build(csrnet_config(), 0)
        randomize_heads(m, np.random.default_rng(0))
        assert forward(m, img).tobytes() == forward(m, img).tobytes()

    def test_sfm_shapes(self):
        m = build(csrnet_l_config(), 0)
        x = np.random.default_rng(0).random((9, 7, 3)).astype(np.float32)
        assert forward(m, x).shape == (9, 7, 3)

    def test_base_path_pixel_independent_with_frozen_condition(self, img):
        m = build(csrnet_config(), 0)
        rng = np.random.default_rng(1)
        randomize_heads(m, rng)
        mods = modulations(m, to_chw(img))
        perm = rng.permutation(64)

        def permute(a):
            return a.reshape(64, 3)[perm].reshape(8, 8, 3)

        np.testing.assert_array_equal(forward(m, permute(img), mods=mods), permute(forward(m, img, mods=mods)))

    def test_3x3_base_is_not_pixel_independent(self, img):
        m = build(base_only_config(base_kernel=3), 0)
        perm = np.random.default_rng(1).permutation(64)

        def permute(a):
            return a.reshape(64, 3)[perm].reshape(8, 8, 3)

        assert np.max(np.abs(forward(m, permute(img)) - permute(forward(m, img)))) > 1e-3

    def test_un_condition_vector_norm(self):
        m = build(csrnet_config(), 0)
        rng = np.random.default_rng(2)
        for _ in range(5):
            x = to_chw(rng.random((16, 16, 3)).astype(np.float32))
            v = condition(m, x)
            assert v.dtype == np.float32
            assert abs(np.linalg.norm(v.astype(np.float64)) - np.sqrt(32)) < 1e-3

    def test_rejects_bad_input(self):
        with pytest.raises(Exception):
            forward(build(csrnet_config(), 0), np.zeros((4, 4)))


class TestGradients:
    @pytest.mark.parametrize(
        "config",
        [
            csrnet_config(base_channels=8, cond_channels=4),
            csrnet_l_config(base_channels=6, cond_channels=4),
            csrnet_config(base_channels=8, cond_channels=4, normalizer="zscore"),
            base_only_config(base_kernel=3, base_channels=6),
        ],
        ids=["gfm", "sfm", "gfm-zscore", "base3x3"],
    )
    def test_small_models(self, config):
        # seed 0 keeps every ReLU input away from its kink at this size
        assert check_model(config, seed=0, size=(6, 5)) < 1e-5

    @pytest.mark.parametrize(
        "target,fix",
        [
            ("gfm_backward", lambda dx, dg, db: (dx, 1.01 * dg, db)),
            ("normalizer_backward", lambda d: 1.01 * d),
            ("relu_backward", lambda d: 1.01 * d),
        ],
    )
    def test_detects_broken_backward(self, monkeypatch, target, fix):
        original = getattr(E, target)

        def broken(*args, **kwargs):
            out = original(*args, **kwargs)
            return fix(*out) if isinstance(out, tuple) else fix(out)

        monkeypatch.setattr(E, target, broken)
        assert check_model(csrnet_config(base_channels=8, cond_channels=4), seed=0, size=(6, 5)) > 1e-4

    def test_train_filter_skips_frozen_params(self, img):
        m = build(csrnet_config(), 0)
        randomize_heads(m, np.random.default_rng(0))
        cache = {}
        out = forward_chw(m, to_chw(img), cache)
        backward_chw(m, cache, np.ones_like(out), train={"base.0.weight"})
        assert m.params["base.0.weight"].grad.any()
        assert not m.params["base.0.bias"].grad.any()
        assert not m.params["cond.0.weight"].grad.any()
        assert not m.params["head.0.scale.weight"].grad.any()


class TestCheckpoint:
    def trained_like(self, config=None):
        m = build(config or csrnet_config(), 3)
        rng = np.random.default_rng(0)
        randomize_heads(m, rng)
        for p in m.params.values():
            p.grad[...] = rng.standard_normal(p.shape)
            E.adam_step(p, 1e-3)
        return m

    @pytest.mark.parametrize("config", [csrnet_config(), csrnet_l_config(), base_only_config()], ids=["gfm", "sfm", "base"])
    def test_round_trip(self, tmp_path, config):
        m = self.trained_like(config)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        back = load_checkpoint(path, expected_config=config)
        assert back.config == config
        for name, p in m.params.items():
            q = back.params[name]
            assert p.value.tobytes() == q.value.tobytes()
            assert p.adam_m.tobytes() == q.adam_m.tobytes()
            assert p.adam_v.tobytes() == q.adam_v.tobytes()
            assert p.step_count == q.step_count == 1

    def test_header_layout(self, tmp_path):
        m = build(base_only_config(), 0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path, include_adam=False)
        raw = path.read_bytes()
        assert raw[:4] == b"CSRN"
        assert int.from_bytes(raw[4:8], "little") == 1
        n = int.from_bytes(raw[8:12], "little")
        assert ModelConfig.from_text(raw[12 : 12 + n].decode()) == base_only_config()
        assert len(raw) == 12 + n + 4 + sum(
            4 + len(name) + 4 + 4 * len(shape) + 4 * int(np.prod(shape))
            for name, shape in parameter_shapes(base_only_config()).items()
        ) + 4

    def test_same_model_same_bytes(self, tmp_path):
        save_checkpoint(self.trained_like(), tmp_path / "a")
        save_checkpoint(self.trained_like(), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(self.trained_like(), path)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(build(base_only_config(), 0), path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(build(base_only_config(), 0), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
        with pytest.raises(VersionError):
            load_checkpoint(path)

    def test_config_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(build(csrnet_config(), 0), path)
        with pytest.raises(ConfigMismatchError, match="base_layers"):
            load_checkpoint(path, expected_config=csrnet_config(base_layers=5))

    def test_shape_mismatch(self, tmp_path):
        # a checkpoint whose embedded config disagrees with its tensors
        path = tmp_path / "m.ckpt"
        save_checkpoint(build(csrnet_config(), 0), path)
        raw = path.read_bytes()
        old = csrnet_config().to_text().encode()
        new = old.replace(b"base_channels = 64", b"base_channels = 65")
        path.write_bytes(raw[:8] + len(new).to_bytes(4, "little") + new + raw[12 + len(old) :])
        with pytest.raises(ParameterShapeError):
            load_checkpoint(path)


class TestExportModulation:
    def test_fresh_identity(self, img):
        m = build(csrnet_config(), 0)
        for layer in range(3):
            gamma, beta = export_modulation(m, img, layer)
            assert np.all(gamma == 1) and np.all(beta == 0)

    def test_gfm_shapes(self, img):
        m = build(csrnet_config(), 0)
        assert export_modulation(m, img, 0)[0].shape == (64,)
        assert export_modulation(m, img, 2)[1].shape == (3,)

    def test_sfm_shapes(self, img):
        m = build(csrnet_l_config(), 0)
        gamma, beta = export_modulation(m, img, 1)
        assert gamma.shape == beta.shape == (64, 8, 8)

    def test_layer_out_of_range(self, img):
        with pytest.raises(IndexError):
            export_modulation(build(csrnet_config(), 0), img, 3)

    def test_needs_condition(self, img):
        with pytest.raises(ConfigError):
            export_modulation(build(base_only_config(), 0), img, 0)
