import math

import numpy as np
import pytest
from PIL import Image

from masktok import maskdata
from masktok.maskdata import (
    DatasetManifest,
    MaskFormatError,
    ParameterError,
    ShapeSpec,
    binarize,
    build_dataset,
    ellipse_mask,
    gen_synthetic,
    load_mask,
    random_crop_resize,
    rectangle_mask,
    save_mask,
    split_counts,
)


class TestLoadSave:
    def test_all_black_loads_as_zeros(self, tmp_path):
        path = tmp_path / "black.png"
        Image.fromarray(np.zeros((256, 256), dtype=np.uint8), mode="L").save(path)
        mask = load_mask(path)
        assert mask.shape == (256, 256)
        assert (mask == 0.0).all()

    def test_all_white_loads_as_ones(self, tmp_path):
        path = tmp_path / "white.pgm"
        Image.fromarray(np.full((256, 256), 255, dtype=np.uint8), mode="L").save(path)
        assert (load_mask(path) == 1.0).all()

    def test_midgray_scales_by_255(self, tmp_path):
        data = np.zeros((16, 16), dtype=np.uint8)
        data[3, 7] = 127
        path = tmp_path / "gray.pgm"
        Image.fromarray(data, mode="L").save(path)
        assert load_mask(path)[3, 7] == pytest.approx(127 / 255)

    def test_binary_round_trip_exact(self, tmp_path, rng):
        mask = (rng.random((64, 64)) > 0.5).astype(np.float64)
        for ext in ("pgm", "png"):
            path = tmp_path / f"m.{ext}"
            save_mask(mask, path)
            assert (load_mask(path) == mask).all()

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_mask(tmp_path / "nope.pgm")

    def test_non_grayscale_rejected(self, tmp_path):
        path = tmp_path / "rgb.png"
        Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8), mode="RGB").save(path)
        with pytest.raises(MaskFormatError, match="mode"):
            load_mask(path)

    def test_non_square_rejected(self, tmp_path):
        path = tmp_path / "rect.png"
        Image.fromarray(np.zeros((8, 16), dtype=np.uint8), mode="L").save(path)
        with pytest.raises(MaskFormatError, match="square"):
            load_mask(path)


class TestBinarize:
    def test_below_threshold_goes_to_zero(self):
        assert (binarize(np.full((4, 4), 0.498), 0.5) == 0.0).all()

    def test_above_threshold_goes_to_one(self):
        assert (binarize(np.full((4, 4), 0.6), 0.5) == 1.0).all()

    def test_checkerboard(self):
        grid = np.where(np.indices((6, 6)).sum(0) % 2 == 0, 0.3, 0.7)
        out = binarize(grid, 0.5)
        assert (out == np.where(np.indices((6, 6)).sum(0) % 2 == 0, 0.0, 1.0)).all()

    def test_idempotent(self, rng):
        mask = rng.random((32, 32))
        once = binarize(mask, 0.4)
        assert (binarize(once, 0.4) == once).all()

    def test_boundary_is_strict(self):
        assert (binarize(np.full((2, 2), 0.5), 0.5) == 0.0).all()


class TestRandomCropResize:
    def test_identity_when_fraction_is_one(self, rng):
        mask = (rng.random((32, 32)) > 0.5).astype(np.float64)
        out = random_crop_resize(mask, np.random.default_rng(0), 1.0)
        assert (out == mask).all()

    def test_constant_field_stays_constant(self):
        mask = np.ones((32, 32))
        out = random_crop_resize(mask, np.random.default_rng(3), 0.5)
        assert (out == 1.0).all()

    def test_deterministic_given_seed(self):
        mask = ellipse_mask(64, 32, 32, 20, 20)
        a = random_crop_resize(mask, np.random.default_rng(42), 0.5)
        b = random_crop_resize(mask, np.random.default_rng(42), 0.5)
        assert (a == b).all()

    def test_preserves_binaryness_and_shape(self, rng):
        mask = (rng.random((48, 48)) > 0.7).astype(np.float64)
        for seed in range(20):
            out = random_crop_resize(mask, np.random.default_rng(seed), 0.3)
            assert out.shape == mask.shape
            assert np.isin(out, (0.0, 1.0)).all()

    def test_bad_fraction_rejected(self, rng):
        with pytest.raises(ParameterError):
            random_crop_resize(np.zeros((8, 8)), rng, 0.0)


class TestSynthetic:
    def test_rectangle_covering_left_half(self):
        mask = rectangle_mask(256, 63.5, 127.5, 64.0, 128.0, 0.0)
        assert mask.sum() == 256 * 128
        assert (mask[:, :128] == 1.0).all()
        assert (mask[:, 128:] == 0.0).all()

    def test_circle_area_matches_pi_r_squared(self):
        r = 60.0
        mask = ellipse_mask(256, 127.5, 127.5, r, r)
        assert mask.sum() == pytest.approx(math.pi * r * r, rel=0.02)

    def test_same_spec_same_mask(self):
        spec = ShapeSpec(kind="polygon", seed=77)
        assert (gen_synthetic(spec) == gen_synthetic(spec)).all()

    @pytest.mark.parametrize("kind", maskdata.SHAPE_KINDS)
    def test_every_family_is_binary_with_foreground(self, kind):
        mask = gen_synthetic(ShapeSpec(kind=kind, seed=3))
        assert np.isin(mask, (0.0, 1.0)).all()
        assert mask.sum() > 0

    def test_zero_size_spec_rejected(self):
        with pytest.raises(ParameterError):
            ShapeSpec(kind="ellipse", size_range=(1e-9, 0.5))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ParameterError):
            ShapeSpec(kind="triangle")


class TestDataset:
    def test_split_counts_largest_remainder(self):
        assert split_counts(10, (0.8, 0.1, 0.1)) == (8, 1, 1)
        assert split_counts(0, (0.8, 0.1, 0.1)) == (0, 0, 0)
        assert split_counts(2500, (0.8, 0.08, 0.12)) == (2000, 200, 300)

    def test_build_writes_unique_paths(self, tmp_path):
        specs = maskdata.mixed_specs(10, seed=1, side=32)
        manifest = build_dataset(specs, tmp_path / "d", splits=(0.8, 0.1, 0.1))
        paths = [p for p, _ in manifest.entries]
        assert len(paths) == len(set(paths)) == 10
        assert len(manifest.paths("train")) == 8
        assert len(manifest.paths("val")) == 1
        assert len(manifest.paths("test")) == 1
        for p in manifest.paths("train"):
            assert p.exists()

    def test_empty_spec_list_is_fine(self, tmp_path):
        manifest = build_dataset([], tmp_path / "empty", splits=(0.8, 0.1, 0.1))
        assert manifest.entries == []

    def test_manifest_round_trip(self, small_dataset, tmp_path):
        loaded = DatasetManifest.load(small_dataset.root / "manifest.tsv")
        assert loaded.entries == small_dataset.entries
        assert loaded.format_version == 1

    def test_manifest_rejects_duplicates(self, tmp_path):
        bad = tmp_path / "m.tsv"
        bad.write_text("format-version\t1\na.pgm\ttrain\na.pgm\tval\n")
        with pytest.raises(MaskFormatError, match="duplicate"):
            DatasetManifest.load(bad)

    def test_manifest_rejects_missing_header(self, tmp_path):
        bad = tmp_path / "m.tsv"
        bad.write_text("a.pgm\ttrain\n")
        with pytest.raises(MaskFormatError, match="format-version"):
            DatasetManifest.load(bad)
