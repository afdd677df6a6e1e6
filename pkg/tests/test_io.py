"""Image/mask file formats and the weight container."""

import numpy as np
import pytest

from tearflow.container import load_model, read_weights, write_weights
from tearflow.errors import DataError
from tearflow.imageio import read_image, read_mask, write_image, write_mask
from tearflow.model import TFNetConfig, build, forward, fuse_model

MICRO = TFNetConfig(
    variant="micro",
    stage_widths=(4, 8, 8, 8, 8),
    stage_repetitions=(1, 1, 1, 1),
    input_size=32,
)


class TestImageFiles:
    def test_black_image_reads_as_zeros(self, tmp_path):
        path = tmp_path / "black.ppm"
        write_image(path, np.zeros((3, 4, 5), dtype=np.float32))
        arr = read_image(path)
        assert arr.shape == (3, 4, 5)
        assert not arr.any()

    def test_image_round_trip(self, tmp_path, rng):
        image = rng.random((3, 6, 7)).astype(np.float32)
        path = tmp_path / "img.ppm"
        write_image(path, image)
        got = read_image(path)
        # quantized to 8 bits on disk
        np.testing.assert_allclose(got, np.round(image * 255) / 255, atol=1e-7)

    def test_gray_midpoint_normalization(self, tmp_path):
        path = tmp_path / "gray.pgm"
        with open(path, "wb") as f:
            f.write(b"P5\n2 2\n255\n" + bytes([128, 128, 128, 128]))
        arr = read_image(path)
        assert arr.shape == (3, 2, 2)
        np.testing.assert_allclose(arr, 128 / 255, rtol=1e-6)

    def test_header_comment_parsed(self, tmp_path):
        path = tmp_path / "c.pgm"
        with open(path, "wb") as f:
            f.write(b"P5\n# a comment\n2 1\n255\n" + bytes([0, 255]))
        arr = read_image(path)
        assert arr.shape == (3, 1, 2)

    def test_truncated_pixels_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        with open(path, "wb") as f:
            f.write(b"P5\n4 4\n255\n" + bytes(3))
        with pytest.raises(DataError, match="pixel bytes"):
            read_image(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(DataError, match="binary"):
            read_image(path)


class TestPng:
    def test_png_reads_when_pillow_present(self, tmp_path, rng):
        pytest.importorskip("PIL")
        from PIL import Image

        rgb = (rng.random((5, 4, 3)) * 255).astype(np.uint8)
        path = tmp_path / "img.png"
        Image.fromarray(rgb).save(path)
        arr = read_image(path)
        assert arr.shape == (3, 5, 4)
        np.testing.assert_allclose(arr, rgb.transpose(2, 0, 1) / 255.0, atol=1e-7)


class TestMaskFiles:
    def test_round_trip_exact(self, tmp_path, rng):
        mask = (rng.random((5, 8)) < 0.4).astype(np.uint8)
        path = tmp_path / "m.pgm"
        write_mask(path, mask)
        np.testing.assert_array_equal(read_mask(path), mask)

    def test_non_binary_values_rejected(self, tmp_path):
        path = tmp_path / "m.pgm"
        with open(path, "wb") as f:
            f.write(b"P5\n2 1\n255\n" + bytes([0, 77]))
        with pytest.raises(DataError, match="0 or 255"):
            read_mask(path)


class TestContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build(MICRO, seed=9)
        path = tmp_path / "w.tfw"
        write_weights(model, path)
        container = read_weights(path)
        assert container.mode == "train_form"
        state = model.state_arrays()
        assert set(container.tensors) == set(state)
        for name, arr in state.items():
            loaded = container.tensors[name]
            assert loaded.dtype == np.float32
            assert np.array_equal(loaded, arr)

    def test_load_model_restores_forward(self, tmp_path, rng):
        model = build(MICRO, seed=4)
        path = tmp_path / "w.tfw"
        write_weights(model, path)
        loaded = load_model(path)
        x = rng.uniform(-1, 1, (1, 3, 32, 32)).astype(np.float32)
        np.testing.assert_array_equal(forward(model, x), forward(loaded, x))

    def test_fused_container_round_trip(self, tmp_path, rng):
        model = build(MICRO, seed=4)
        fused = fuse_model(model)
        path = tmp_path / "wf.tfw"
        write_weights(fused, path)
        loaded = load_model(path)
        assert loaded.mode == "fused"
        x = rng.uniform(-1, 1, (1, 3, 32, 32)).astype(np.float32)
        np.testing.assert_array_equal(forward(fused, x), forward(loaded, x))
        # fused container forward tracks the source train container
        assert np.abs(forward(loaded, x) - forward(model, x)).max() <= 1e-3

    def test_single_byte_corruption_detected(self, tmp_path):
        model = build(MICRO, seed=1)
        path = tmp_path / "w.tfw"
        write_weights(model, path)
        blob = bytearray(path.read_bytes())
        blob[-100] ^= 0x01  # inside the payload
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="CRC"):
            read_weights(path)

    def test_bad_magic_rejected(self, tmp_path):
        model = build(MICRO, seed=1)
        path = tmp_path / "w.tfw"
        write_weights(model, path)
        blob = bytearray(path.read_bytes())
        blob[0:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="magic"):
            read_weights(path)

    def test_version_mismatch_rejected(self, tmp_path):
        model = build(MICRO, seed=1)
        path = tmp_path / "w.tfw"
        write_weights(model, path)
        blob = path.read_bytes().replace(b"version 1\n", b"version 9\n", 1)
        path.write_bytes(blob)
        with pytest.raises(DataError, match="version"):
            read_weights(path)

    def test_missing_tensor_rejected(self, tmp_path):
        from tearflow.container import serialize_state

        model = build(MICRO, seed=1)
        state = model.state_arrays()
        state.pop("head.conv.b")
        path = tmp_path / "w.tfw"
        path.write_bytes(
            serialize_state(state, model.config.to_dict(), model.mode)
        )
        with pytest.raises(DataError, match="missing"):
            load_model(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = build(MICRO, seed=1)
        path = tmp_path / "w.tfw"
        write_weights(model, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError, match="size"):
            read_weights(path)

    def test_offsets_are_aligned(self, tmp_path):
        model = build(MICRO, seed=1)
        path = tmp_path / "w.tfw"
        write_weights(model, path)
        header = path.read_bytes().split(b"\nend\n")[0].decode()
        tensor_lines = [
            l for l in header.splitlines()[6:] if l and not l.startswith(("version",))
        ]
        assert tensor_lines
        for line in tensor_lines:
            off = int(line.split(" ")[2])
            assert off % 16 == 0
