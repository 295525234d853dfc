import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csrnet.errors import ShapeError
from csrnet.retouch import (
    RetouchOp,
    brightness,
    build_mlp_brightness,
    build_mlp_contrast,
    contrast,
    luminance,
    saturation,
    tone_curve,
    verify_equivalence,
    white_balance,
)

REFERENCE_TONE = (3 / 8, 2 / 8, 1 / 8, 2 / 8)


@pytest.fixture
def img():
    return np.random.default_rng(7).random((5, 6, 3))


def pixel(rgb):
    return np.array(rgb, dtype=np.float64).reshape(1, 1, 3)


def permute_pixels(img, perm):
    h, w, c = img.shape
    return img.reshape(-1, c)[perm].reshape(h, w, c)


class TestLuminance:
    def test_white(self):
        assert luminance(pixel([1, 1, 1]))[0, 0] == pytest.approx(1.0)

    def test_red_and_blue(self):
        assert luminance(pixel([1, 0, 0]))[0, 0] == pytest.approx(0.299)
        assert luminance(pixel([0, 0, 1]))[0, 0] == pytest.approx(0.114)

    def test_rejects_non_rgb(self):
        with pytest.raises(ShapeError):
            luminance(np.zeros((2, 2)))


class TestBrightness:
    def test_identity(self, img):
        np.testing.assert_array_equal(brightness(img, 1.0), img)

    def test_hand_value(self):
        assert brightness(pixel([0.2, 0.2, 0.2]), 1.5)[0, 0, 0] == pytest.approx(0.3)

    def test_composition(self, img):
        np.testing.assert_allclose(brightness(brightness(img, 0.7), 1.9), brightness(img, 0.7 * 1.9), atol=1e-6)

    def test_no_clamping(self):
        assert brightness(pixel([0.9, 0.9, 0.9]), 2.0)[0, 0, 0] == pytest.approx(1.8)


class TestContrast:
    def test_identity(self, img):
        np.testing.assert_allclose(contrast(img, 1.0), img, atol=0)

    def test_two_pixel_example(self):
        im = np.zeros((1, 2, 3))
        im[0, 1] = 1.0
        out = contrast(im, 0.5)
        np.testing.assert_allclose(out[0, :, 0], [0.25, 0.75])

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 2.0])
    def test_constant_image(self, alpha):
        im = np.full((3, 3, 3), 0.4)
        np.testing.assert_allclose(contrast(im, alpha), im, atol=1e-15)

    @pytest.mark.parametrize("alpha", [0.25, 1.5, 3.0])
    def test_preserves_channel_mean(self, img, alpha):
        np.testing.assert_allclose(contrast(img, alpha).mean(axis=(0, 1)), img.mean(axis=(0, 1)), atol=1e-6)

    def test_not_crop_equivariant(self, img):
        crop = (slice(0, 3), slice(0, 3))
        adjusted_then_cropped = contrast(img, 1.5)[crop]
        cropped_then_adjusted = contrast(img[crop], 1.5)
        assert np.max(np.abs(adjusted_then_cropped - cropped_then_adjusted)) > 1e-3


class TestToneCurve:
    def test_uniform_weights_identity(self):
        v = np.linspace(0, 1, 101)
        im = np.stack([v, v, v], axis=-1)[None]
        np.testing.assert_allclose(tone_curve(im, [0.25] * 4), im, atol=1e-6)

    def test_hand_value(self):
        assert tone_curve(pixel([0.5] * 3), REFERENCE_TONE)[0, 0, 0] == pytest.approx(0.625)

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            tone_curve(pixel([0.5] * 3), [0.5, 0.6])
        with pytest.raises(ValueError):
            tone_curve(pixel([0.5] * 3), [1.5, -0.5])

    def test_clips_input(self):
        out = tone_curve(pixel([-0.5, 1.5, 1.0]), REFERENCE_TONE)
        np.testing.assert_allclose(out[0, 0], [0.0, 1.0, 1.0])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8).filter(lambda t: sum(t) > 1e-3))
    def test_monotone_and_endpoints(self, raw):
        t = np.array(raw) / np.sum(raw)
        v = np.arange(0, 1.0005, 1e-3)
        im = np.stack([v, v, v], axis=-1)[None]
        out = tone_curve(im, t)[0, :, 0]
        assert np.all(np.diff(out) >= -1e-12)
        assert out[0] == pytest.approx(0.0, abs=1e-12)
        assert out[-1] == pytest.approx(1.0, abs=1e-9)


class TestWhiteBalanceAndSaturation:
    def test_unit_gains(self, img):
        np.testing.assert_array_equal(white_balance(img, (1, 1, 1)), img)

    def test_gain_hand_value(self):
        np.testing.assert_allclose(white_balance(pixel([0.1] * 3), (2, 1, 1))[0, 0], [0.2, 0.1, 0.1])

    def test_commutes_with_brightness(self, img):
        g = (1.2, 0.9, 0.7)
        np.testing.assert_allclose(
            white_balance(brightness(img, 1.3), g), brightness(white_balance(img, g), 1.3), atol=1e-15
        )

    def test_saturation_identity(self, img):
        np.testing.assert_allclose(saturation(img, 1.0), img, atol=1e-15)

    def test_full_desaturation(self, img):
        out = saturation(img, 0.0)
        y = luminance(img)
        for c in range(3):
            np.testing.assert_allclose(out[..., c], y, atol=1e-15)

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 3.0])
    def test_gray_pixel_fixed(self, alpha):
        np.testing.assert_allclose(saturation(pixel([0.3] * 3), alpha), pixel([0.3] * 3), atol=1e-15)


@pytest.mark.parametrize(
    "op",
    [
        RetouchOp("brightness", 1.5),
        RetouchOp("contrast", 1.5),
        RetouchOp("tone_curve", tone_params=REFERENCE_TONE),
        RetouchOp("white_balance", gains=(1.1, 1.0, 0.8)),
        RetouchOp("saturation", 1.4),
    ],
    ids=lambda op: op.kind,
)
def test_ops_commute_with_pixel_permutation(img, op):
    perm = np.random.default_rng(3).permutation(img.shape[0] * img.shape[1])
    np.testing.assert_allclose(op(permute_pixels(img, perm)), permute_pixels(op(img), perm), atol=1e-12)


class TestRetouchOp:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            RetouchOp("vignette")

    def test_rejects_bad_tone(self):
        with pytest.raises(ValueError):
            RetouchOp("tone_curve", tone_params=(0.5, 0.4))

    def test_rejects_non_finite_alpha(self):
        with pytest.raises(ValueError):
            RetouchOp("brightness", float("nan"))

    def test_describe(self):
        assert RetouchOp("brightness", 1.5).describe() == "brightness(1.5)"


class TestMlpConstructions:
    def test_brightness_identity_weight(self):
        mlp = build_mlp_brightness(1.0, 3, 4)
        np.testing.assert_array_equal(mlp.layers[0].weight, np.eye(12))
        np.testing.assert_array_equal(mlp.layers[0].bias, np.zeros(12))

    def test_brightness_zero(self, img):
        mlp = build_mlp_brightness(0.0, 5, 6)
        np.testing.assert_array_equal(mlp(img[..., 0].reshape(-1)), np.zeros(30))

    def test_contrast_block_structure(self):
        alpha, m, n = 1.5, 2, 3
        mlp = build_mlp_contrast(alpha, m, n)
        w1, w2 = mlp.layers[0].weight, mlp.layers[1].weight
        assert w1.shape == (6, 7) and w2.shape == (7, 6)
        np.testing.assert_array_equal(w1[:, :6], alpha * np.eye(6))
        np.testing.assert_array_equal(w1[:, 6], np.full(6, 1 / 6))
        np.testing.assert_array_equal(w2[:6], np.eye(6))
        np.testing.assert_array_equal(w2[6], np.full(6, 1 - alpha))
        assert all(layer.activation == "identity" for layer in mlp.layers)
        assert all(not layer.bias.any() for layer in mlp.layers)

    def test_contrast_alpha_one_is_identity(self, img):
        x = img[..., 1].reshape(-1)
        np.testing.assert_allclose(build_mlp_contrast(1.0, 5, 6)(x), x, atol=1e-15)

    def test_contrast_hidden_mean_unit(self, img):
        x = img[..., 2].reshape(-1)
        hidden = build_mlp_contrast(0.7, 5, 6).hidden(x, 1)
        assert hidden[30] == pytest.approx(x.mean(), abs=1e-15)

    def test_contrast_random_2x2(self):
        ch = np.random.default_rng(11).random((2, 2))
        im = np.repeat(ch[..., None], 3, axis=2)
        out = build_mlp_contrast(1.5, 2, 2)(ch.reshape(-1)).reshape(2, 2)
        np.testing.assert_allclose(out, contrast(im, 1.5)[..., 0], atol=1e-6)

    @pytest.mark.parametrize("alpha", [0.5, 1.5])
    def test_verify_brightness(self, alpha):
        im = np.random.default_rng(5).random((4, 4, 3))
        assert verify_equivalence(RetouchOp("brightness", alpha), build_mlp_brightness(alpha, 4, 4), im) <= 1e-6

    @pytest.mark.parametrize("alpha", [0.5, 1.5])
    def test_verify_contrast(self, alpha):
        im = np.random.default_rng(6).random((4, 4, 3))
        assert verify_equivalence(RetouchOp("contrast", alpha), build_mlp_contrast(alpha, 4, 4), im) <= 1e-6

    def test_verify_detects_perturbation(self):
        im = np.random.default_rng(8).random((4, 4, 3))
        mlp = build_mlp_contrast(1.5, 4, 4)
        mlp.layers[1].weight[3, 5] += 0.01
        assert verify_equivalence(RetouchOp("contrast", 1.5), mlp, im) > 1e-3

    def test_verify_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            verify_equivalence(RetouchOp("brightness", 2.0), build_mlp_brightness(2.0, 3, 3), np.zeros((4, 4, 3)))

    def test_layers_must_chain(self):
        from csrnet.retouch import MlpEquivalent, MlpLayer

        with pytest.raises(ShapeError):
            MlpEquivalent([MlpLayer(np.eye(3), np.zeros(3)), MlpLayer(np.eye(4), np.zeros(4))])
