import numpy as np
import pytest
import torch

from pointfit.diffusion import SamplerConfig
from pointfit.errors import CheckpointError, ConfigError, ShapeMismatchError
from pointfit.evalbench import (bench_control_points, bench_targets, image_metrics,
                                improvement, landmark_distance, locate_fiducials,
                                run_landmark_bench, run_strategy_ablation)
from pointfit.synth import BACKGROUND


def paste_image(size, markers, coords):
    img = np.empty((3, size, size), dtype=np.float32)
    img[:] = np.asarray(BACKGROUND, dtype=np.float32)[:, None, None]
    for name, color in markers.items():
        x, y = coords[name]
        img[:, int(y), int(x)] = np.asarray(color, dtype=np.float32)
    return img


class TestLocateFiducials:
    def test_exact_on_clean_single_pixel(self):
        markers = {"a": (1.0, 0.0, 0.0), "b": (0.0, 1.0, 0.0)}
        coords = {"a": (5, 7), "b": (20, 3)}
        img = paste_image(32, markers, coords)
        out = locate_fiducials(img, markers, np.ones((32, 32), dtype=np.uint8))
        for name in markers:
            assert out[name]["pos"] == coords[name]
            assert out[name]["confidence"] == pytest.approx(1.0, abs=1e-6)

    def test_not_found_above_threshold(self):
        markers = {"a": (1.0, 0.0, 0.0)}
        img = np.full((3, 16, 16), 0.5, dtype=np.float32)
        out = locate_fiducials(img, markers, np.ones((16, 16), dtype=np.uint8))
        assert out["a"]["pos"] is None and out["a"]["confidence"] == 0.0

    def test_search_restricted_to_mask(self):
        markers = {"a": (1.0, 0.0, 0.0)}
        coords = {"a": (2, 2)}
        img = paste_image(16, markers, coords)
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[8:, 8:] = 1  # true marker outside the searchable region
        out = locate_fiducials(img, markers, mask)
        assert out["a"]["pos"] is None

    def test_blurred_marker_located_within_2px(self):
        # 3x3 box blur moves the minimum by at most a pixel
        markers = {"a": (1.0, 0.0, 1.0)}
        coords = {"a": (9, 9)}
        img = paste_image(24, markers, coords)
        k = torch.ones(3, 1, 3, 3) / 9.0
        blurred = torch.nn.functional.conv2d(
            torch.as_tensor(img).unsqueeze(0), k, padding=1, groups=3)[0].numpy()
        out = locate_fiducials(blurred, markers, np.ones((24, 24), dtype=np.uint8),
                               threshold=0.95)
        px, py = out["a"]["pos"]
        assert np.hypot(px - 9, py - 9) <= 2.0

    def test_tie_centroid_centers_flat_blob(self):
        markers = {"a": (0.0, 0.0, 1.0)}
        img = np.zeros((3, 16, 16), dtype=np.float32)
        img[2, 4:9, 6:11] = 1.0  # 5x5 flat blob centered at (8, 6)
        out = locate_fiducials(img, markers, np.ones((16, 16), dtype=np.uint8))
        assert out["a"]["pos"] == (8, 6)


class TestLandmarkDistance:
    def test_identical_zero(self):
        loc = {"a": {"pos": (3, 4), "confidence": 1.0}}
        assert landmark_distance(loc, {"a": (3, 4)}, penalty=90.0) == 0.0

    def test_three_four_five(self):
        loc = {"a": {"pos": (3, 4), "confidence": 1.0}}
        assert landmark_distance(loc, {"a": (0, 0)}, penalty=90.0) == pytest.approx(5.0)

    def test_missing_landmark_costs_penalty(self):
        loc = {"a": {"pos": None, "confidence": 0.0}, "b": {"pos": (1, 1), "confidence": 1.0}}
        d = landmark_distance(loc, {"a": (0, 0), "b": (1, 1)}, penalty=90.5)
        assert d == pytest.approx(45.25)

    def test_empty_overlap_error(self):
        with pytest.raises(ValueError, match="overlap"):
            landmark_distance({"a": {"pos": (0, 0)}}, {"b": (0, 0)}, penalty=1.0)

    def test_symmetry_in_located_and_targets(self):
        loc = {"a": {"pos": (10, 0)}}
        assert landmark_distance(loc, {"a": (0, 0)}, 90.0) == \
            landmark_distance({"a": {"pos": (0, 0)}}, {"a": (10, 0)}, 90.0)


class TestImageMetrics:
    def test_identical_images(self):
        a = np.random.default_rng(0).uniform(size=(3, 32, 32)).astype(np.float32)
        m = image_metrics(a, a)
        assert m["mse"] == 0.0 and m["psnr"] == float("inf")
        assert m["ssim"] == pytest.approx(1.0, abs=1e-9)

    def test_constant_images_mse_one(self):
        a = np.zeros((3, 16, 16), dtype=np.float32)
        b = np.ones((3, 16, 16), dtype=np.float32)
        assert image_metrics(a, b)["mse"] == pytest.approx(1.0)

    def test_ssim_range(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(3, 32, 32)).astype(np.float32)
        b = rng.uniform(size=(3, 32, 32)).astype(np.float32)
        s = image_metrics(a, b)["ssim"]
        assert -1.0 <= s <= 1.0

    def test_against_skimage_oracle(self):
        skimage = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(48, 48)).astype(np.float64)
        b = np.clip(a + rng.normal(0, 0.08, size=a.shape), 0, 1)
        ours = image_metrics(a, b)
        ref = skimage.structural_similarity(a, b, win_size=7, data_range=1.0,
                                            gaussian_weights=False,
                                            use_sample_covariance=False)
        assert ours["ssim"] == pytest.approx(ref, abs=1e-6)
        ref_psnr = skimage.peak_signal_noise_ratio(a, b, data_range=1.0)
        assert ours["psnr"] == pytest.approx(ref_psnr, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            image_metrics(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))


class TestBenchProtocol:
    def test_protocol_closure_paste_oracle_zero(self, sample_set):
        # a generator that pastes marker pixels exactly at targets scores 0.0
        def oracle(item, points, seed):
            markers = {n: c for n, c, _ in item.markers}
            return paste_image(64, markers, bench_targets(item))

        report = run_landmark_bench(None, sample_set, "attention_injection",
                                    seeds=2, generator_fn=oracle)
        assert set(report["per_class"]) == {"top", "pants", "coat"}
        for cls, mean in report["per_class"].items():
            assert mean == 0.0, cls
        assert report["overall"] == 0.0

    def test_unknown_mode_rejected(self, sample_set):
        with pytest.raises(ConfigError):
            run_landmark_bench(None, sample_set, "telepathy", generator_fn=lambda *a: None)

    def test_mode_requires_matching_checkpoint(self, tiny_bundle, sample_set):
        with pytest.raises(CheckpointError, match="latent_noise"):
            run_landmark_bench(tiny_bundle, sample_set, "latent_noise_injection", seeds=1)

    def test_zero_init_model_injection_equals_no_points(self, tiny_bundle, sample_set):
        # fresh point heads: generation ignores points bit-exactly, so the two
        # reports coincide
        sampler = SamplerConfig(steps=4)
        items = sample_set[:2]
        rep_pts = run_landmark_bench(tiny_bundle, items, "attention_injection",
                                     seeds=1, sampler=sampler)
        rep_none = run_landmark_bench(tiny_bundle, items, "no_points",
                                      seeds=1, sampler=sampler)
        for a, b in zip(rep_pts["items"], rep_none["items"]):
            assert a["distance"] == b["distance"]

    def test_control_points_are_integer_pixels(self, sample_set):
        for pt in bench_control_points(sample_set[0]):
            assert all(float(v) == int(v) for v in pt["g"] + pt["p"])

    def test_improvement_helper(self):
        base = {"per_class": {"top": 10.0, "coat": 8.0}}
        better = {"per_class": {"top": 5.0, "coat": 8.0}}
        imp = improvement(base, better)
        assert imp["top"] == pytest.approx(0.5) and imp["coat"] == 0.0


class TestStrategyAblation:
    def test_identical_bundles_produce_identical_rows(self, tiny_bundle, sample_set):
        bundles = {k: tiny_bundle for k in ("base", "zero_init", "cond_drop", "point_weight")}
        rep = run_strategy_ablation(bundles, sample_set[:1], seeds=1,
                                    sampler=SamplerConfig(steps=3))
        assert [r["row"] for r in rep["rows"]] == ["base", "zero_init", "cond_drop",
                                                   "point_weight"]
        first = rep["rows"][0]
        for row in rep["rows"][1:]:
            assert row["per_class"] == first["per_class"]

    def test_missing_checkpoint_rejected(self, tiny_bundle, sample_set):
        with pytest.raises(ConfigError, match="missing ablation checkpoints"):
            run_strategy_ablation({"base": tiny_bundle}, sample_set, seeds=1)

    def test_undocumented_config_diff_rejected(self, tiny_bundle, sample_set, tmp_path):
        import dataclasses
        from pointfit.train import TrainConfig, save_checkpoint, load_checkpoint
        from pointfit.diffusion import NoiseSchedule
        other_path = tmp_path / "other.ckpt"
        save_checkpoint(other_path, tiny_bundle.model, tiny_bundle.codec,
                        NoiseSchedule.linear(T=200),
                        TrainConfig(total_steps=0, lr=123.0), 0)
        other = load_checkpoint(other_path)
        bundles = {"base": tiny_bundle, "zero_init": other,
                   "cond_drop": tiny_bundle, "point_weight": tiny_bundle}
        with pytest.raises(ConfigError, match="undocumented fields"):
            run_strategy_ablation(bundles, sample_set, seeds=1)
