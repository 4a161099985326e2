import struct

import numpy as np
import pytest

from illusionlab.data import (
    Dataset,
    IdxFormatError,
    SyntheticSpec,
    generate_synthetic,
    read_idx,
    read_idx_images,
    read_idx_labels,
)


def write_idx_fixture(tmp_path, pixels, labels):
    """Independent IDX writer: raw struct packing, no shared code."""
    n, rows, cols = pixels.shape
    img_path = tmp_path / "images-idx3-ubyte"
    with open(img_path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        fh.write(pixels.astype(np.uint8).tobytes())
    lab_path = tmp_path / "labels-idx1-ubyte"
    with open(lab_path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, len(labels)))
        fh.write(bytes(int(v) for v in labels))
    return img_path, lab_path


class TestIdxReader:
    def test_well_formed_fixture(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(4, 28, 28))
        img_path, lab_path = write_idx_fixture(tmp_path, pixels, [0, 3, 9, 5])
        data = read_idx(img_path, lab_path)
        assert len(data) == 4
        assert data.images.shape == (4, 28, 28, 1)
        assert np.array_equal(data.labels, [0, 3, 9, 5])
        assert np.allclose(data.images[:, :, :, 0], pixels / 255.0)

    def test_pixel_255_maps_to_one_exactly(self, tmp_path):
        pixels = np.full((1, 28, 28), 255)
        img_path, lab_path = write_idx_fixture(tmp_path, pixels, [1])
        data = read_idx(img_path, lab_path)
        assert data.images.max() == 1.0
        assert data.images.min() == 1.0

    def test_empty_file_bad_magic(self, tmp_path):
        path = tmp_path / "empty"
        path.write_bytes(b"")
        with pytest.raises(IdxFormatError, match="bad magic"):
            read_idx_images(path)
        with pytest.raises(IdxFormatError, match="bad magic"):
            read_idx_labels(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 28, 28) + b"\0" * 784)
        with pytest.raises(IdxFormatError, match="bad magic"):
            read_idx_images(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short"
        path.write_bytes(struct.pack(">IIII", 0x00000803, 2, 28, 28) + b"\0" * 100)
        with pytest.raises(IdxFormatError, match="truncated"):
            read_idx_images(path)

    def test_count_mismatch(self, tmp_path):
        pixels = np.zeros((3, 28, 28))
        img_path, lab_path = write_idx_fixture(tmp_path, pixels, [0, 1])
        with pytest.raises(IdxFormatError, match="mismatch"):
            read_idx(img_path, lab_path)


class TestSyntheticGenerator:
    def test_deterministic_under_seed(self):
        spec = SyntheticSpec(per_class=3, seed=42)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_zero_noise_leaves_glyphs_clean(self):
        data = generate_synthetic(SyntheticSpec(per_class=2, noise=0.0, seed=1))
        # only glyph pixels are lit; background must be exactly zero
        for image in data.images:
            values = np.unique(image)
            assert values[0] == 0.0
            assert len(values) <= 3  # background + one brightness level (+ clip)

    def test_counts_and_ranges(self):
        data = generate_synthetic(SyntheticSpec(per_class=7, seed=5))
        assert len(data) == 70
        assert np.array_equal(np.bincount(data.labels), np.full(10, 7))
        assert data.images.min() >= 0.0 and data.images.max() <= 1.0

    def test_classes_visually_distinct(self):
        # zero-noise class prototypes should differ pairwise by a wide margin
        data = generate_synthetic(SyntheticSpec(per_class=1, noise=0.0, seed=0))
        flat = data.images.reshape(10, -1)
        for i in range(10):
            for j in range(i + 1, 10):
                assert np.abs(flat[i] - flat[j]).sum() > 5.0


class TestDatasetInvariants:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="labels"):
            Dataset(images=np.zeros((2, 28, 28, 1)), labels=np.zeros(3, dtype=int))

    def test_range_violation_rejected(self):
        with pytest.raises(ValueError, match="0, 1"):
            Dataset(images=np.full((1, 28, 28, 1), 1.5), labels=np.zeros(1, dtype=int))

    def test_label_range_rejected(self):
        with pytest.raises(ValueError, match="labels"):
            Dataset(images=np.zeros((1, 28, 28, 1)), labels=np.array([11]))
