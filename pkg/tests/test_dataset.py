import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from pixpoint.dataset import (DatasetConfig, assign_conditions, build_dataset,
                              load_manifest, load_sample, make_sample)
from pixpoint.errors import ConfigError


def tiny_config(**kw):
    defaults = dict(seed=0, train_count=6, val_count=3)
    defaults.update(kw)
    return DatasetConfig(**defaults)


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


class TestAssignConditions:
    def test_default_mixture_at_one_hundred_samples(self):
        conditions = assign_conditions(100, night_fraction=0.12, rain_fraction=0.19)
        assert conditions.count("night") == 12
        assert conditions.count("day_rain") == 19
        assert conditions.count("day_clear") == 69

    def test_zero_count(self):
        assert assign_conditions(0, 0.12, 0.19) == []

    def test_over_unity_rejected(self):
        with pytest.raises(ConfigError):
            assign_conditions(2, 0.9, 0.9)


class TestBuildDataset:
    def test_counts_and_files(self, tmp_path):
        config = tiny_config()
        manifest = build_dataset(config, tmp_path / "ds")
        assert len(manifest.samples) == 9
        assert sum(manifest.counts.values()) == 9
        for record in manifest.samples:
            directory = tmp_path / "ds" / record.path
            for name in ("meta.json", "image.f32", "image_clean.f32",
                         "points.f32", "depth.f32", "labels.u16"):
                assert (directory / name).exists(), name

    def test_empty_dataset_valid(self, tmp_path):
        manifest = build_dataset(tiny_config(train_count=0, val_count=0), tmp_path / "ds")
        assert manifest.samples == []
        reloaded = load_manifest(tmp_path / "ds")
        assert reloaded.samples == []

    def test_rebuild_is_byte_identical(self, tmp_path):
        config = tiny_config(train_count=4, val_count=2)
        build_dataset(config, tmp_path / "a")
        build_dataset(config, tmp_path / "b")
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")

    def test_different_seed_changes_content(self, tmp_path):
        build_dataset(tiny_config(seed=0, train_count=3, val_count=0), tmp_path / "a")
        build_dataset(tiny_config(seed=1, train_count=3, val_count=0), tmp_path / "b")
        assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "b")

    def test_round_trip_load(self, tmp_path):
        config = tiny_config(train_count=2, val_count=1)
        manifest = build_dataset(config, tmp_path / "ds")
        for record in manifest.samples:
            sample = load_sample(tmp_path / "ds", record)
            assert sample.image.shape == (config.image_height, config.image_width, 3)
            assert sample.image.dtype == np.float32
            assert sample.points.shape[1] == 3
            assert len(sample.point_labels) == len(sample.points)
            assert sample.condition == record.condition
            assert np.all(sample.pixel_depth[sample.depth_valid] > 0)

    def test_invalid_fractions_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            build_dataset(tiny_config(night_fraction=0.8, rain_fraction=0.5),
                          tmp_path / "ds")


class TestAdverseSamples:
    def test_corruption_leaves_geometry_untouched(self):
        config = tiny_config()
        clean = make_sample(config, "x", "day_clear")
        night = make_sample(config, "x", "night")
        rain = make_sample(config, "x", "day_rain")
        for adverse in (night, rain):
            assert np.array_equal(adverse.points, clean.points)
            assert np.array_equal(adverse.point_labels, clean.point_labels)
            assert np.array_equal(adverse.pixel_depth, clean.pixel_depth)
            assert np.array_equal(adverse.image_clean, clean.image_clean)
            assert not np.array_equal(adverse.image, adverse.image_clean)

    def test_day_clear_image_equals_clean(self):
        sample = make_sample(tiny_config(), "y", "day_clear")
        assert np.array_equal(sample.image, sample.image_clean)

    def test_condition_images_stored_separately(self, tmp_path):
        config = tiny_config(train_count=10, val_count=0, night_fraction=0.5,
                             rain_fraction=0.0)
        manifest = build_dataset(config, tmp_path / "ds")
        night_records = [r for r in manifest.samples if r.condition == "night"]
        assert len(night_records) == 5
        sample = load_sample(tmp_path / "ds", night_records[0])
        assert not np.array_equal(sample.image, sample.image_clean)
        assert sample.image.mean() < sample.image_clean.mean()  # darker


class TestManifest:
    def test_counts_match_records(self, tmp_path):
        manifest = build_dataset(tiny_config(train_count=12, val_count=6), tmp_path / "ds")
        for condition, count in manifest.counts.items():
            assert count == sum(1 for r in manifest.samples if r.condition == condition)

    def test_manifest_json_is_sorted_and_parseable(self, tmp_path):
        build_dataset(tiny_config(train_count=1, val_count=1), tmp_path / "ds")
        payload = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        assert set(payload) == {"config_hash", "counts", "samples"}

    def test_unique_sample_ids(self, tmp_path):
        manifest = build_dataset(tiny_config(train_count=5, val_count=5), tmp_path / "ds")
        ids = [r.sample_id for r in manifest.samples]
        assert len(set(ids)) == len(ids)
