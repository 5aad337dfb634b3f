import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pixpoint.dataset import DatasetConfig, build_dataset, load_sample, make_sample
from pixpoint.distill import distill_loss
from pixpoint.encoders import EncoderConfig, ImageEncoder, PointEncoder, params_hash
from pixpoint.errors import NumericalError
from pixpoint.evalsuite import (ConditionMetrics, ProbeConfig, centroid_distances,
                                collapse_metric, cross_entropy, evaluate_depth,
                                evaluate_segmentation, feature_shift_stats,
                                matched_feature_distance, make_head, miou, mse,
                                pooled_descriptor, probe_depth, probe_segmentation,
                                project_labels, render_feature_pca, write_metrics,
                                write_ppm)
from pixpoint.geometry import match_correspondences
from pixpoint.scenes import Sample, default_rig


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalds")
    config = DatasetConfig(seed=3, train_count=10, val_count=6,
                           night_fraction=0.2, rain_fraction=0.2)
    return build_dataset(config, root)


@pytest.fixture(scope="module")
def probe_cfg():
    return ProbeConfig(epochs=4, batch_size=4, lr=1e-2, finetune_lr=1e-4, seed=0)


class TestMiou:
    def test_diagonal_confusion_is_one(self):
        assert miou(np.diag([5, 2, 9]))[0] == pytest.approx(1.0)

    def test_hand_filled_two_class_case(self):
        # class 0: TP=1 FN=1 FP=0 -> IoU 0.5; class 1: TP=1 FP=1 FN=0 -> IoU 0.5
        confusion = np.array([[1, 1], [0, 1]])
        mean, per = miou(confusion)
        assert per[0] == pytest.approx(0.5) and per[1] == pytest.approx(0.5)
        assert mean == pytest.approx(0.5)

    def test_absent_class_excluded(self):
        confusion = np.zeros((3, 3), dtype=int)
        confusion[0, 0] = 4
        mean, per = miou(confusion)
        assert mean == pytest.approx(1.0)
        assert np.isnan(per[1]) and np.isnan(per[2])

    def test_permutation_invariance_of_mean(self):
        rng = np.random.default_rng(0)
        confusion = rng.integers(0, 20, size=(4, 4))
        mean, per = miou(confusion)
        perm = rng.permutation(4)
        mean_p, per_p = miou(confusion[np.ix_(perm, perm)])
        assert mean_p == pytest.approx(mean)
        assert np.allclose(per_p, per[perm], equal_nan=True)

    def test_all_empty_raises(self):
        with pytest.raises(NumericalError):
            miou(np.zeros((3, 3), dtype=int))


class TestProjectLabels:
    def test_no_visible_points_all_unlabeled(self):
        rig = default_rig(16, 16)
        sample = Sample(image=np.zeros((16, 16, 3), np.float32),
                        points=np.array([[-5.0, 0.0, 0.0]], np.float32),
                        point_labels=np.array([2], np.uint16),
                        pixel_depth=np.zeros((16, 16), np.float32),
                        condition="day_clear", rig=rig)
        assert np.all(project_labels(sample) == -1)

    def test_single_visible_point(self):
        rig = default_rig(16, 16)
        sample = Sample(image=np.zeros((16, 16, 3), np.float32),
                        points=np.array([[5.0, 0.0, 0.0]], np.float32),
                        point_labels=np.array([3], np.uint16),
                        pixel_depth=np.zeros((16, 16), np.float32),
                        condition="day_clear", rig=rig)
        labels = project_labels(sample)
        assert (labels == 3).sum() == 1
        assert (labels == -1).sum() == 16 * 16 - 1

    def test_matches_brute_force_nearest_point(self, manifest):
        from tests.test_geometry import brute_force_matches

        for record in manifest.records("val"):
            sample = load_sample(manifest.root, record)
            labels = project_labels(sample)
            expected = brute_force_matches(sample.points, sample.rig)
            got = {(r, c): labels[r, c] for r, c in zip(*np.nonzero(labels >= 0))}
            want = {key: int(sample.point_labels[idx]) for key, idx in expected.items()}
            assert got == want


class TestLossHelpers:
    def test_cross_entropy_matches_log_softmax_by_hand(self):
        logits = torch.tensor([[2.0, 0.0], [0.0, 1.0]])
        targets = torch.tensor([0, 1])
        want = -(math.log(math.exp(2) / (math.exp(2) + 1))
                 + math.log(math.exp(1) / (1 + math.exp(1)))) / 2
        assert float(cross_entropy(logits, targets)) == pytest.approx(want, rel=1e-6)

    def test_mse_hand_case(self):
        pred = torch.tensor([1.0, 3.0])
        target = torch.tensor([2.0, 2.0])
        assert float(mse(pred, target)) == pytest.approx(1.0)


class TestProbeSegmentation:
    def test_constant_labels_perfect_head(self, tmp_path):
        # ground-only scenes: every labeled pixel is class 0, and a head
        # biased toward class 0 scores mIoU 1
        from pixpoint.scenes import WorldConfig
        config = DatasetConfig(seed=1, train_count=3, val_count=2,
                               night_fraction=0.0, rain_fraction=0.0,
                               world=WorldConfig(min_primitives=1, max_primitives=1,
                                                 x_range=(200.0, 300.0)))
        man = build_dataset(config, tmp_path / "ds")
        enc = ImageEncoder(EncoderConfig(), seed=0)
        head = make_head(enc.cfg.feature_dim, 7, seed=0)
        with torch.no_grad():
            head.weight.zero_()
            head.bias.zero_()
            head.bias[0] = 10.0
        metrics = evaluate_segmentation(enc, head, man, num_classes=7)
        assert metrics.values["full"] == pytest.approx(1.0)

    def test_frozen_probe_purity_and_determinism(self, manifest, probe_cfg):
        enc = ImageEncoder(EncoderConfig(), seed=1)
        before = params_hash(enc)
        _, metrics_a = probe_segmentation(enc, manifest, probe_cfg, num_classes=7)
        assert params_hash(enc) == before
        _, metrics_b = probe_segmentation(enc, manifest, probe_cfg, num_classes=7)
        assert metrics_a.values == metrics_b.values

    def test_finetune_changes_encoder(self, manifest, probe_cfg):
        enc = ImageEncoder(EncoderConfig(), seed=2)
        before = params_hash(enc)
        probe_segmentation(enc, manifest, probe_cfg, finetune=True, num_classes=7)
        assert params_hash(enc) != before

    def test_full_equals_pooled_union(self, manifest, probe_cfg):
        enc = ImageEncoder(EncoderConfig(), seed=1)
        head, metrics = probe_segmentation(enc, manifest, probe_cfg, num_classes=7)
        # recompute the union confusion from per-sample evaluation
        total = np.zeros((7, 7), dtype=np.int64)
        for record in manifest.records("val"):
            sample = load_sample(manifest.root, record)
            labels = project_labels(sample)
            rows, cols = np.nonzero(labels >= 0)
            with torch.no_grad():
                from pixpoint.encoders import forward_2d
                fmap = forward_2d(enc, sample.image)
                pred = head(fmap[torch.from_numpy(rows), torch.from_numpy(cols)]).argmax(-1).numpy()
            np.add.at(total, (labels[rows, cols], pred), 1)
        assert metrics.values["full"] == pytest.approx(miou(total)[0], abs=1e-9)


class TestProbeDepth:
    def test_perfect_predictions_zero_rmse(self):
        assert math.sqrt(mse(torch.tensor([2.0, 5.0]), torch.tensor([2.0, 5.0]))) == 0.0

    def test_constant_predictor_hand_rmse(self):
        # two pixels at depths c+1 and c-1 under constant prediction c
        pred = torch.tensor([3.0, 3.0])
        target = torch.tensor([4.0, 2.0])
        assert math.sqrt(float(mse(pred, target))) == pytest.approx(1.0)

    def test_probe_runs_and_reports_conditions(self, manifest, probe_cfg):
        enc = ImageEncoder(EncoderConfig(), seed=3)
        head, metrics = probe_depth(enc, manifest, probe_cfg)
        assert metrics.metric == "rmse"
        assert set(metrics.values) >= {"day_clear", "full"}
        assert all(v >= 0 for v in metrics.values.values())
        corrupted = evaluate_depth(enc, head, manifest, corruption=("gaussian", 3))
        assert corrupted.values["full"] != metrics.values["full"]


class TestMatchedFeatureDistance:
    def test_constant_encoders_give_zero(self, manifest):
        cfg = EncoderConfig()
        enc2d = ImageEncoder(cfg, seed=0)
        enc3d = PointEncoder(cfg, seed=0)
        with torch.no_grad():
            for p in list(enc2d.parameters()) + list(enc3d.parameters()):
                p.zero_()
            enc2d.out_proj.bias.copy_(torch.ones(cfg.feature_dim))
            enc3d.head.bias.copy_(torch.ones(cfg.feature_dim))
        assert matched_feature_distance(enc2d, enc3d, manifest) == pytest.approx(0.0, abs=1e-6)

    def test_random_encoders_in_loss_range(self, manifest):
        enc2d = ImageEncoder(EncoderConfig(), seed=4)
        enc3d = PointEncoder(EncoderConfig(), seed=5)
        value = matched_feature_distance(enc2d, enc3d, manifest)
        assert 0.0 < value <= 2.0

    def test_equals_brute_force_recomputation(self, manifest):
        from pixpoint.encoders import forward_2d, forward_3d

        enc2d = ImageEncoder(EncoderConfig(), seed=4)
        enc3d = PointEncoder(EncoderConfig(), seed=5)
        got = matched_feature_distance(enc2d, enc3d, manifest, split="val",
                                       condition="day_clear")
        values = []
        for record in manifest.records("val"):
            if record.condition != "day_clear":
                continue
            sample = load_sample(manifest.root, record)
            corr = match_correspondences(sample.points, sample.rig)
            if corr.count == 0:
                continue
            with torch.no_grad():
                g = forward_2d(enc2d, sample.image)[corr.pixel_rows, corr.pixel_cols]
                f = forward_3d(enc3d, sample.points)[torch.from_numpy(corr.point_indices)]
                values.append(float(distill_loss(g, f)))
        assert got == pytest.approx(np.mean(values), abs=1e-7)


class TestDiagnostics:
    def test_identical_images_zero_distances(self, tmp_path):
        config = DatasetConfig(seed=2, train_count=0, val_count=6,
                               night_fraction=0.34, rain_fraction=0.33)
        man = build_dataset(config, tmp_path / "ds")
        enc = ImageEncoder(EncoderConfig(), seed=0)
        with torch.no_grad():
            for p in enc.parameters():
                p.zero_()
            enc.out_proj.bias.copy_(torch.ones(enc.cfg.feature_dim))
        report = feature_shift_stats(enc, man)
        for value in report.distances.values():
            assert value == pytest.approx(0.0, abs=1e-6)

    def test_hand_placed_centroid_distance(self):
        descs = np.array([[0.0, 0.0], [3.0, 4.0]])
        report = centroid_distances(descs, ["day_clear", "night"])
        assert report.distances["day_clear|night"] == pytest.approx(5.0)
        assert "day_clear|day_rain" in report.missing

    def test_missing_condition_flagged(self, tmp_path):
        config = DatasetConfig(seed=2, train_count=0, val_count=4,
                               night_fraction=0.0, rain_fraction=0.0)
        man = build_dataset(config, tmp_path / "ds")
        enc = ImageEncoder(EncoderConfig(), seed=0)
        report = feature_shift_stats(enc, man)
        assert set(report.missing) == {"day_clear|night", "day_clear|day_rain"}

    def test_collapse_metric_constant_encoder_zero(self, manifest):
        enc = ImageEncoder(EncoderConfig(), seed=0)
        with torch.no_grad():
            for p in enc.parameters():
                p.zero_()
            enc.out_proj.bias.copy_(torch.ones(enc.cfg.feature_dim))
        assert collapse_metric(enc, manifest) == pytest.approx(0.0, abs=1e-7)

    def test_collapse_metric_basis_vector_hand_value(self):
        # descriptors = standard basis over D samples: each dimension has one 1
        # and D-1 zeros, population std sqrt(p(1-p)) with p = 1/D
        d = 6
        descs = np.eye(d)
        p = 1.0 / d
        expected = math.sqrt(p * (1 - p))
        assert descs.std(axis=0, ddof=0).mean() == pytest.approx(expected)

    def test_descriptor_order_invariance(self, manifest):
        enc = ImageEncoder(EncoderConfig(), seed=6)
        value = collapse_metric(enc, manifest)
        descs = []
        for record in manifest.records("val"):
            sample = load_sample(manifest.root, record)
            descs.append(pooled_descriptor(enc, sample.image))
        descs = np.array(descs)
        rng = np.random.default_rng(0)
        shuffled = descs[rng.permutation(len(descs))]
        assert shuffled.std(axis=0, ddof=0).mean() == pytest.approx(value, abs=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_centroid_distance_rotation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        descs = rng.normal(size=(8, 5))
        conditions = ["day_clear"] * 4 + ["night"] * 2 + ["day_rain"] * 2
        base = centroid_distances(descs, conditions).distances
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        rotated = centroid_distances(descs @ q, conditions).distances
        for key in base:
            assert rotated[key] == pytest.approx(base[key], rel=1e-9, abs=1e-12)


class TestRenderFeaturePca:
    def test_constant_map_is_mid_gray(self):
        out = render_feature_pca(np.full((4, 6, 5), 3.3))
        assert np.allclose(out, 0.5)

    def test_rank_one_map_degenerates_to_gray_channels(self):
        rng = np.random.default_rng(0)
        direction = rng.normal(size=5)
        weights = rng.normal(size=(4, 6, 1))
        fmap = weights * direction
        out = render_feature_pca(fmap)
        assert np.allclose(out[:, :, 1], 0.5)
        assert np.allclose(out[:, :, 2], 0.5)
        assert out[:, :, 0].min() == pytest.approx(0.0)
        assert out[:, :, 0].max() == pytest.approx(1.0)

    def test_top3_reconstruction_matches_eigen_tail(self):
        rng = np.random.default_rng(1)
        fmap = rng.normal(size=(8, 9, 6))
        x = fmap.reshape(-1, 6)
        centered = x - x.mean(axis=0)
        cov = centered.T @ centered / len(x)
        eigvals, eigvecs = np.linalg.eigh(cov)
        top = eigvecs[:, ::-1][:, :3]
        recon = centered @ top @ top.T
        err = ((centered - recon) ** 2).sum() / len(x)
        tail = eigvals[:-3].sum()  # dense eigensolver oracle
        assert err == pytest.approx(tail, rel=1e-9)

    def test_small_dim_rejected(self):
        with pytest.raises(ValueError):
            render_feature_pca(np.zeros((4, 4, 2)))

    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        image = rng.random((5, 7, 3))
        path = tmp_path / "out.ppm"
        write_ppm(image, path)
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n7 5\n255\n")
        data = np.frombuffer(raw.split(b"255\n", 1)[1], dtype=np.uint8)
        assert len(data) == 5 * 7 * 3
        assert np.allclose(data.reshape(5, 7, 3) / 255.0, image, atol=1 / 255.0 + 1e-9)


class TestMetricsFiles:
    def test_json_and_csv_outputs(self, tmp_path):
        metrics = ConditionMetrics(task="segmentation", metric="miou",
                                   values={"day_clear": 0.5, "full": 0.4},
                                   counts={"day_clear": 3, "full": 3})
        write_metrics([metrics], tmp_path / "m.json", tmp_path / "m.csv", run_id="r1")
        payload = json.loads((tmp_path / "m.json").read_text())
        assert payload["run_id"] == "r1"
        assert payload["tasks"]["segmentation"]["values"]["full"] == 0.4
        lines = (tmp_path / "m.csv").read_text().strip().splitlines()
        assert lines[0] == "run_id,condition,metric,value"
        assert len(lines) == 3
