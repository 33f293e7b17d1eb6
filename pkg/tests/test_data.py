import hashlib

import numpy as np
import pytest
from PIL import Image

from gausstok.data import (
    ImageDataset,
    export_corpus,
    generate_toy_corpus,
    load_directory,
    load_manifest_directory,
    read_pgm,
    read_ppm,
    split_dataset,
    write_pgm,
    write_ppm,
)

# sha256 of the uint8-quantized 16-image 32x32 corpus at seed 1234; pinned from
# the generator itself to catch accidental changes to the drawing pipeline.
GOLDEN_CORPUS_SHA256 = "2815f137f46bff971553238e66e63af78a250a6bca3441e0ec5b2b87ccdb44c9"


class TestToyCorpus:
    def test_count_and_shape(self):
        ds = generate_toy_corpus(3, 32, seed=0)
        assert len(ds) == 3
        assert ds.images.shape == (3, 32, 32, 3)

    def test_single_image(self):
        ds = generate_toy_corpus(1, 16, seed=5)
        assert len(ds) == 1

    def test_count_zero_rejected(self):
        with pytest.raises(ValueError):
            generate_toy_corpus(0, 32, seed=0)

    def test_values_in_unit_range_no_nan(self):
        ds = generate_toy_corpus(8, 32, seed=1)
        assert np.isfinite(ds.images).all()
        assert ds.images.min() >= 0.0
        assert ds.images.max() <= 1.0

    def test_bitwise_reproducible(self):
        a = generate_toy_corpus(5, 32, seed=9)
        b = generate_toy_corpus(5, 32, seed=9)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.masks["stroke"], b.masks["stroke"])
        assert np.array_equal(a.masks["texture"], b.masks["texture"])

    def test_golden_checksum(self):
        ds = generate_toy_corpus(16, 32, seed=1234)
        u8 = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8)
        digest = hashlib.sha256(u8.tobytes()).hexdigest()
        assert digest == GOLDEN_CORPUS_SHA256

    def test_masks_recorded_and_plausible(self):
        ds = generate_toy_corpus(6, 32, seed=2)
        assert set(ds.masks) == {"stroke", "texture"}
        assert ds.masks["stroke"].any()
        assert ds.masks["texture"].any()
        assert ds.masks["stroke"].shape == (6, 32, 32)


class TestSplits:
    def test_split_arithmetic(self):
        ds = generate_toy_corpus(10, 16, seed=3)
        train, val = split_dataset(ds, 0.8, seed=0)
        assert len(train) == 8
        assert len(val) == 2

    def test_disjoint_and_exhaustive(self):
        ds = generate_toy_corpus(12, 16, seed=4)
        train, val = split_dataset(ds, 0.75, seed=1)
        assert set(train.ids) | set(val.ids) == set(ds.ids)
        assert not (set(train.ids) & set(val.ids))

    def test_same_seed_same_membership(self):
        ds = generate_toy_corpus(10, 16, seed=5)
        a_train, _ = split_dataset(ds, 0.8, seed=7)
        b_train, _ = split_dataset(ds, 0.8, seed=7)
        assert a_train.ids == b_train.ids


class TestPPM:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        img = rng.integers(0, 256, (8, 10, 3)).astype(np.uint8)
        write_ppm(tmp_path / "x.ppm", img)
        back = read_ppm(tmp_path / "x.ppm")
        assert np.array_equal(img, back)

    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        mask = rng.random((6, 9)) > 0.5
        write_pgm(tmp_path / "m.pgm", mask)
        assert np.array_equal(read_pgm(tmp_path / "m.pgm"), mask)

    def test_rejects_non_p6(self, tmp_path):
        (tmp_path / "bad.ppm").write_bytes(b"P3\n2 2\n255\n0 0 0")
        with pytest.raises(ValueError):
            read_ppm(tmp_path / "bad.ppm")


class TestLoadDirectory:
    def _write_images(self, path, count, size=16):
        rng = np.random.default_rng(8)
        for i in range(count):
            img = rng.integers(0, 256, (size, size, 3)).astype(np.uint8)
            if i % 2 == 0:
                write_ppm(path / f"img_{i:03d}.ppm", img)
            else:
                Image.fromarray(img).save(path / f"img_{i:03d}.png")

    def test_split_ratio(self, tmp_path):
        self._write_images(tmp_path, 10)
        train, val = load_directory(tmp_path, 16, split_ratio=0.8, seed=0)
        assert len(train) == 8
        assert len(val) == 2

    def test_same_seed_identical_split(self, tmp_path):
        self._write_images(tmp_path, 10)
        a, _ = load_directory(tmp_path, 16, split_ratio=0.8, seed=3)
        b, _ = load_directory(tmp_path, 16, split_ratio=0.8, seed=3)
        assert a.ids == b.ids

    def test_non_square_center_cropped(self, tmp_path):
        img = np.zeros((32, 64, 3), dtype=np.uint8)
        img[:, 16:48] = 255  # center band survives the crop
        Image.fromarray(img).save(tmp_path / "wide.png")
        train, _ = load_directory(tmp_path, 32, split_ratio=1.0, seed=0)
        assert train.images.shape == (1, 32, 32, 3)
        assert train.images.min() == 1.0  # cropped region is all white

    def test_undecodable_skipped_with_warning(self, tmp_path, caplog):
        self._write_images(tmp_path, 2)
        (tmp_path / "broken.png").write_bytes(b"not an image")
        with caplog.at_level("WARNING"):
            train, val = load_directory(tmp_path, 16, split_ratio=1.0, seed=0)
        assert len(train) == 2
        assert any("broken.png" in r.message for r in caplog.records)

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            load_directory(tmp_path, 16, split_ratio=0.8, seed=0)

    def test_lossless_when_resolution_matches(self, tmp_path):
        ds = generate_toy_corpus(3, 16, seed=9)
        export_corpus(ds, tmp_path)
        train, _ = load_directory(tmp_path, 16, split_ratio=1.0, seed=0)
        u8_orig = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8)
        for i, name in enumerate(train.ids):
            j = [f"{x}.ppm" for x in ds.ids].index(name)
            u8_loaded = np.clip(np.round(train.images[i] * 255.0), 0, 255).astype(np.uint8)
            assert np.array_equal(u8_loaded, u8_orig[j])


class TestExportAndManifest:
    def test_export_then_load_with_masks(self, tmp_path):
        ds = generate_toy_corpus(4, 16, seed=10)
        export_corpus(ds, tmp_path)
        assert (tmp_path / "manifest.tsv").exists()
        loaded = load_manifest_directory(tmp_path, 16)
        assert len(loaded) == 4
        assert np.array_equal(loaded.masks["stroke"], ds.masks["stroke"])
        assert np.array_equal(loaded.masks["texture"], ds.masks["texture"])

    def test_export_bitwise_reproducible(self, tmp_path):
        for sub in ("a", "b"):
            export_corpus(generate_toy_corpus(3, 16, seed=11), tmp_path / sub)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
