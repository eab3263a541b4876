import numpy as np
import pytest

from egoflow.utils.errors import FileFormatError
from egoflow.utils.formats import read_flo, read_image, read_mask, read_pfm, write_flo, write_mask, write_pfm


class TestFlo:
    def test_round_trip(self, rng, tmp_path):
        vectors = rng.normal(scale=10.0, size=(12, 17, 2))
        valid = rng.uniform(size=(12, 17)) > 0.2
        path = tmp_path / "flow.flo"
        write_flo(path, vectors, valid)

        loaded, loaded_valid = read_flo(path)
        np.testing.assert_array_equal(loaded_valid, valid)
        np.testing.assert_allclose(loaded[valid], vectors[valid], rtol=1e-6)
        np.testing.assert_array_equal(loaded[~valid], 0.0)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "flow.flo"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(FileFormatError) as excinfo:
            read_flo(path)
        assert excinfo.value.path == str(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "flow.flo"
        write_flo(path, np.zeros((4, 4, 2)), np.ones((4, 4), dtype=bool))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FileFormatError):
            read_flo(path)


class TestPfm:
    def test_round_trip(self, rng, tmp_path):
        values = rng.uniform(1.0, 50.0, size=(9, 13))
        path = tmp_path / "depth.pfm"
        write_pfm(path, values)
        np.testing.assert_allclose(read_pfm(path), values, rtol=1e-6)

    def test_rows_are_stored_bottom_up(self, tmp_path):
        values = np.array([[1.0, 2.0], [3.0, 4.0]])
        path = tmp_path / "depth.pfm"
        write_pfm(path, values)
        payload = np.frombuffer(path.read_bytes()[-16:], dtype="<f4")
        np.testing.assert_array_equal(payload, [3.0, 4.0, 1.0, 2.0])

    def test_big_endian(self, tmp_path):
        path = tmp_path / "depth.pfm"
        path.write_bytes(b"Pf\n2 1\n1.0\n" + np.array([1.5, 2.5], dtype=">f4").tobytes())
        np.testing.assert_array_equal(read_pfm(path), [[1.5, 2.5]])

    def test_color_is_rejected(self, tmp_path):
        path = tmp_path / "color.pfm"
        path.write_bytes(b"PF\n1 1\n-1.0\n" + bytes(12))
        with pytest.raises(FileFormatError):
            read_pfm(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "depth.pfm"
        path.write_bytes(b"Pf\nwide tall\n-1.0\n")
        with pytest.raises(FileFormatError):
            read_pfm(path)


class TestMasksAndImages:
    def test_mask_round_trip(self, rng, tmp_path):
        mask = rng.uniform(size=(10, 11)) > 0.5
        path = tmp_path / "mask.pgm"
        write_mask(path, mask)
        np.testing.assert_array_equal(read_mask(path), mask)

    def test_unreadable_mask(self, tmp_path):
        path = tmp_path / "mask.pgm"
        path.write_bytes(b"garbage")
        with pytest.raises(FileFormatError):
            read_mask(path)

    def test_image_is_normalized(self, tmp_path):
        from PIL import Image

        pixels = np.array([[0, 255], [51, 102]], dtype=np.uint8)
        path = tmp_path / "image.png"
        Image.fromarray(pixels).save(path)
        np.testing.assert_allclose(read_image(path), pixels / 255.0)
