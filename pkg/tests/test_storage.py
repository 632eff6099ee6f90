import numpy as np
import pytest
from PIL import Image as PILImage

from conftest import random_normalized_alphas, random_palette
from softseg.errors import ImageReadError, PaletteError, WeightsFormatError
from softseg.layer_ops import compose
from softseg.models import ModelBundle
from softseg.palette import Palette
from softseg.stacks import LayerStack
from softseg.storage import (format_palette, load_image, load_layers, load_weights,
                             parse_palette, quantize_8bit, save_layers, save_weights)
from softseg.tensor import AdamState, adam_step


class TestLoadImage:
    def test_byte_mapping(self, tmp_path):
        arr = np.array([[[0, 128, 255]]], np.uint8)
        PILImage.fromarray(np.repeat(arr, 2, axis=1), mode="RGB").save(tmp_path / "a.png")
        img = load_image(tmp_path / "a.png")
        np.testing.assert_allclose(img[0, 0], [0.0, 128 / 255, 1.0], atol=1e-7)

    def test_roundtrip_exact(self, tmp_path, rng):
        quantized = quantize_8bit(rng.uniform(0, 1, (8, 8, 3)))
        PILImage.fromarray(quantized, mode="RGB").save(tmp_path / "b.png")
        img = load_image(tmp_path / "b.png")
        np.testing.assert_array_equal(quantize_8bit(img), quantized)

    def test_grayscale_promoted(self, tmp_path):
        PILImage.fromarray(np.full((4, 4), 77, np.uint8), mode="L").save(tmp_path / "g.png")
        img = load_image(tmp_path / "g.png")
        assert img.shape == (4, 4, 3)
        assert np.all(img[..., 0] == img[..., 1])

    def test_alpha_input_warns(self, tmp_path):
        rgba = np.zeros((4, 4, 4), np.uint8)
        rgba[..., 3] = 200
        PILImage.fromarray(rgba, mode="RGBA").save(tmp_path / "a.png")
        with pytest.warns(UserWarning, match="alpha"):
            img = load_image(tmp_path / "a.png")
        assert img.shape == (4, 4, 3)

    def test_unreadable_raises(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(ImageReadError, match="bad.png"):
            load_image(bad)


class TestSaveLayers:
    def _stack(self, rng, k=3, h=16, w=16):
        return LayerStack(colors=rng.uniform(0, 1, (k, h, w, 3)).astype(np.float32),
                          alphas=random_normalized_alphas(rng, k, h, w),
                          palette=random_palette(rng, k))

    def test_file_count_and_manifest(self, tmp_path, rng):
        stack = self._stack(rng, k=7)
        manifest_path = save_layers(stack, tmp_path / "out", weights_hash="cafe")
        files = sorted(p.name for p in (tmp_path / "out").iterdir())
        assert files == [f"layer_{i:02d}.png" for i in range(7)] + ["manifest.json"]
        import json

        manifest = json.loads(manifest_path.read_text())
        assert manifest["k"] == 7
        assert manifest["weights_hash"] == "cafe"
        assert manifest["image_size"] == [16, 16]

    def test_reload_composite_within_quantization(self, tmp_path, rng):
        # alphas already at 8-bit resolution: only the colors move, so the
        # composite shifts by at most one quantization step
        stack = self._stack(rng)
        alphas = quantize_8bit(stack.alphas).astype(np.float32) / 255.0
        stack = LayerStack(colors=stack.colors, alphas=alphas, palette=stack.palette)
        save_layers(stack, tmp_path / "out")
        reloaded = load_layers(tmp_path / "out")
        assert np.abs(reloaded.colors - stack.colors).max() <= 0.5 / 255 + 1e-6
        assert np.abs(compose(reloaded) - compose(stack)).max() <= 1 / 255 + 1e-6

    def test_reload_composite_float_alphas_bound(self, tmp_path, rng):
        # float alphas quantize too; each of the K alpha planes and the color
        # plane contributes at most half a step
        k = 3
        stack = self._stack(rng, k=k)
        save_layers(stack, tmp_path / "out")
        reloaded = load_layers(tmp_path / "out")
        bound = (k + 1) * 0.5 / 255
        assert np.abs(compose(reloaded) - compose(stack)).max() <= bound + 1e-6

    def test_manifest_palette_roundtrips_exactly(self, tmp_path, rng):
        stack = self._stack(rng)
        save_layers(stack, tmp_path / "out")
        reloaded = load_layers(tmp_path / "out")
        np.testing.assert_array_equal(reloaded.palette.colors, stack.palette.colors)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ImageReadError, match="manifest"):
            load_layers(tmp_path)


class TestParsePalette:
    def test_hex(self):
        palette = parse_palette("#ff0000\n#00ff00\n")
        np.testing.assert_allclose(palette.colors, [[1, 0, 0], [0, 1, 0]], atol=1e-7)

    def test_decimal(self):
        palette = parse_palette("0.5,0.5,0.5\n0.25, 0.75, 1.0\n")
        np.testing.assert_allclose(palette.colors,
                                   [[0.5, 0.5, 0.5], [0.25, 0.75, 1.0]], atol=1e-7)

    def test_json_form(self):
        palette = parse_palette('{"colors": [[0.1, 0.2, 0.3]]}')
        np.testing.assert_allclose(palette.colors, [[0.1, 0.2, 0.3]], atol=1e-7)

    def test_bad_hex_names_line(self):
        with pytest.raises(PaletteError, match="line 1"):
            parse_palette("#GG0000\n")

    def test_bad_component_names_line(self):
        with pytest.raises(PaletteError, match="line 2"):
            parse_palette("0.1,0.1,0.1\n0.5,oops,0.5\n")

    def test_out_of_range_component(self):
        with pytest.raises(PaletteError, match="line 1"):
            parse_palette("0.5,1.5,0.5\n")

    def test_empty_file(self):
        with pytest.raises(PaletteError, match="no colors"):
            parse_palette("\n\n")

    def test_format_parse_roundtrip(self, rng):
        palette = random_palette(rng, 4)
        again = parse_palette(format_palette(palette))
        np.testing.assert_array_equal(again.colors, palette.colors)


class TestWeightContainer:
    def test_roundtrip_byte_identical(self, tmp_path, rng):
        bundle = ModelBundle(3, rng=rng)
        path = tmp_path / "w.sseg"
        h1 = save_weights(path, bundle)
        loaded, opt, h2 = load_weights(path)
        assert h1 == h2
        assert opt is None
        path2 = tmp_path / "w2.sseg"
        save_weights(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_checkpoint_preserves_optimizer(self, tmp_path, rng):
        bundle = ModelBundle(2, rng=rng)
        opt = AdamState(lr=1e-3)
        params = bundle.params()
        grads = {name: rng.standard_normal(p.shape).astype(np.float32) * 0.01
                 for name, p in params.items()}
        adam_step(params, grads, opt)
        path = tmp_path / "ckpt.sseg"
        save_weights(path, bundle, optimizer=opt)
        loaded, opt2, _ = load_weights(path)
        assert opt2 is not None
        assert opt2.step_count == 1
        np.testing.assert_allclose(opt2.m["alpha.head.bias"], opt.m["alpha.head.bias"],
                                   atol=1e-7)

    def test_weights_restore_predictions(self, tmp_path, rng):
        from conftest import random_image
        from softseg.models import predict_alpha

        bundle = ModelBundle(2, rng=np.random.default_rng(3))
        image = random_image(rng, 16, 16)
        palette = random_palette(rng, 2)
        before = predict_alpha(image, palette, bundle).values
        path = tmp_path / "w.sseg"
        save_weights(path, bundle)
        loaded, _, _ = load_weights(path)
        after = predict_alpha(image, palette, loaded).values
        np.testing.assert_array_equal(before, after)

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "bad.sseg"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(WeightsFormatError, match="magic"):
            load_weights(path)

    def test_truncated_container(self, tmp_path, rng):
        bundle = ModelBundle(2, rng=rng)
        path = tmp_path / "w.sseg"
        save_weights(path, bundle)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises((WeightsFormatError, ValueError)):
            load_weights(path)

    def test_shape_validation(self, tmp_path, rng):
        bundle = ModelBundle(2, rng=rng)
        path = tmp_path / "w.sseg"
        save_weights(path, bundle)
        # tamper: shrink one blob by rewriting the container with a wrong K
        from softseg.storage import _bundle_widths, _deserialize, _serialize

        k, widths, blobs = _deserialize(path.read_bytes())
        blobs["alpha.head.bias"] = blobs["alpha.head.bias"][:-1]
        path.write_bytes(_serialize(k, widths, blobs))
        with pytest.raises(WeightsFormatError, match="alpha.head.bias"):
            load_weights(path)
