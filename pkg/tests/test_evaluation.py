import json
import math

import numpy as np
import pytest

from portrait_stylize import core, evaluation, toy
from portrait_stylize.evaluation import FeatureSetStats, frechet_distance, stats_from_features
from portrait_stylize.providers import ChannelMeanEmbedding, PixelMeanFeatures, RandomConvEmbedding, RandomConvFeatures


def gaussian_1d(mu, var):
    return FeatureSetStats(np.array([mu]), np.array([[var]]), 100)


class TestFrechet:
    def test_one_dimensional_closed_form(self):
        assert frechet_distance(gaussian_1d(0, 1), gaussian_1d(2, 1)) == pytest.approx(4.0, abs=1e-12)
        rng = np.random.default_rng(0)
        for _ in range(50):
            m1, m2 = rng.normal(size=2) * 3
            s1, s2 = rng.uniform(0.01, 5, size=2)
            expected = (m1 - m2) ** 2 + (s1 - s2) ** 2
            assert frechet_distance(gaussian_1d(m1, s1 ** 2), gaussian_1d(m2, s2 ** 2)) == pytest.approx(
                expected, abs=1e-8)

    def test_diagonal_closed_form(self):
        rng = np.random.default_rng(1)
        va, vb = rng.uniform(0.1, 3, size=(2, 6))
        ma, mb = rng.normal(size=(2, 6))
        a = FeatureSetStats(ma, np.diag(va), 10)
        b = FeatureSetStats(mb, np.diag(vb), 10)
        expected = np.sum((ma - mb) ** 2) + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2)
        assert frechet_distance(a, b) == pytest.approx(expected, abs=1e-10)

    def test_self_distance_and_symmetry(self):
        rng = np.random.default_rng(2)
        a = stats_from_features(rng.normal(size=(50, 8)))
        b = stats_from_features(rng.normal(size=(50, 8)) + 0.5)
        assert abs(frechet_distance(a, a)) < 1e-6
        assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), abs=1e-8)
        assert frechet_distance(a, b) > 0

    def test_singular_covariance_allowed(self):
        # fewer samples than dimensions gives a rank-deficient covariance
        rng = np.random.default_rng(3)
        a = stats_from_features(rng.normal(size=(4, 10)))
        assert abs(frechet_distance(a, a)) < 1e-6

    def test_non_psd_reports_diagnostics(self):
        bad = FeatureSetStats(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]), 5)
        with pytest.raises(FloatingPointError, match="condition"):
            frechet_distance(bad, bad)

    def test_dimension_mismatch(self):
        with pytest.raises(core.DataError):
            frechet_distance(gaussian_1d(0, 1), FeatureSetStats(np.zeros(2), np.eye(2), 5))


class TestStats:
    def test_hand_computation(self):
        images = [np.full((2, 2, 3), v, np.float32) for v in (-0.5, 0.0, 0.25)]
        images[1][..., 2] = 0.5
        stats = evaluation.compute_stats(images, PixelMeanFeatures())
        feats = np.array([[-0.5, -0.5, -0.5], [0.0, 0.0, 0.5], [0.25, 0.25, 0.25]])
        mean = feats.sum(axis=0) / 3
        centered = feats - mean
        cov = sum(np.outer(r, r) for r in centered) / 2
        np.testing.assert_allclose(stats.mean, mean, atol=1e-10, rtol=0)
        np.testing.assert_allclose(stats.cov, cov, atol=1e-10, rtol=0)

    def test_duplicates_have_zero_covariance(self):
        img = np.random.default_rng(0).uniform(-1, 1, size=(8, 8, 3)).astype(np.float32)
        stats = evaluation.compute_stats([img] * 10, PixelMeanFeatures())
        assert np.all(stats.cov == 0)

    def test_permutation_invariance(self):
        images, _ = toy.make_faces(12, 32)
        extractor = RandomConvFeatures()
        a = evaluation.compute_stats(images, extractor)
        b = evaluation.compute_stats(images[::-1], extractor)
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(a.cov, b.cov, rtol=1e-12, atol=1e-14)

    def test_needs_two_images(self):
        with pytest.raises(core.DataError):
            evaluation.compute_stats([np.zeros((4, 4, 3), np.float32)], PixelMeanFeatures())

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(core.DataError):
            FeatureSetStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), 5)


class TestIdentitySimilarity:
    def test_self_is_one(self):
        img = np.random.default_rng(0).uniform(-1, 1, size=(32, 32, 3)).astype(np.float32)
        assert evaluation.identity_similarity(img, img, RandomConvEmbedding()) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_is_half(self):
        a = np.zeros((8, 8, 3), np.float32)
        b = np.zeros((8, 8, 3), np.float32)
        a[..., 0], b[..., 2] = 0.7, 0.2
        assert evaluation.identity_similarity(a, b, ChannelMeanEmbedding()) == pytest.approx(0.5, abs=1e-9)

    def test_opposite_is_zero(self):
        a = np.full((8, 8, 3), 0.3, np.float32)
        assert evaluation.identity_similarity(a, -a, ChannelMeanEmbedding()) == pytest.approx(0.0, abs=1e-9)

    def test_degenerate_embedding_surfaces(self):
        with pytest.raises(FloatingPointError):
            evaluation.identity_similarity(np.zeros((8, 8, 3), np.float32), np.ones((8, 8, 3), np.float32),
                                           ChannelMeanEmbedding())


@pytest.fixture(scope="module")
def image_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    toy.write_toy_dataset(root, n_source=16, n_style=16, size=32)
    return root


class TestEvaluateRun:
    def test_identical_sets(self, image_dirs):
        report = evaluation.evaluate_run(image_dirs / "source", image_dirs / "source", image_dirs / "source",
                                         RandomConvFeatures(), RandomConvEmbedding())
        assert 0 <= report.fid < 1e-6
        assert report.id_mean == pytest.approx(1.0, abs=1e-6)
        assert report.n == 16

    def test_toy_report_is_finite(self, image_dirs):
        report = evaluation.evaluate_run(image_dirs / "style", image_dirs / "style", image_dirs / "source",
                                         RandomConvFeatures(), RandomConvEmbedding())
        assert math.isfinite(report.fid) and report.fid >= 0
        assert 0 <= report.id_mean <= 1 and 0 <= report.id_std <= 0.5
        assert json.loads(report.to_json())["n"] == 16
        assert "FID" in report.table()

    def test_misaligned_pairs_listed(self, image_dirs, tmp_path):
        gen = tmp_path / "gen"
        img = core.load_image(image_dirs / "source" / "0000.png")
        core.save_image(img, gen / "0000.png")
        core.save_image(img, gen / "stray.png")
        core.save_image(img, gen / "0001.png")
        with pytest.raises(core.DataError, match="stray.png"):
            evaluation.evaluate_run(gen, image_dirs / "style", image_dirs / "source", RandomConvFeatures(),
                                    RandomConvEmbedding())

    def test_empty_directory(self, image_dirs, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(core.DataError):
            evaluation.evaluate_run(tmp_path / "empty", image_dirs / "style", image_dirs / "source",
                                    RandomConvFeatures(), RandomConvEmbedding())
