import numpy as np
import pytest

from usgen import metrics
from usgen.dataset import load_batch
from usgen.errors import NumericsError
from usgen.metrics import (FIDReport, GaussianStats, MetricsError, extract_features,
                           fid, frechet_distance, gaussian_stats, load_extractor,
                           save_extractor, tiny_extractor)
from usgen.seeding import np_rng
from .oracles import diagonal_gaussian_fid


@pytest.fixture(scope="module")
def extractor():
    return tiny_extractor()


class TestExtractor:
    def test_row_count_and_determinism(self, extractor):
        rng = np_rng(0)
        batch = rng.uniform(-1, 1, (5, 1, 16, 16)).astype(np.float32)
        a = extract_features(extractor, batch)
        b = extract_features(extractor, batch)
        assert a.shape == (5, extractor.feature_dim)
        assert np.array_equal(a, b)

    def test_identical_images_identical_rows(self, extractor):
        img = np_rng(1).uniform(-1, 1, (1, 1, 32, 32)).astype(np.float32)
        batch = np.concatenate([img, img], axis=0)
        feats = extract_features(extractor, batch)
        assert np.array_equal(feats[0], feats[1])

    def test_channel_adaptation(self, extractor):
        rgb = np_rng(2).uniform(-1, 1, (3, 3, 16, 16)).astype(np.float32)
        feats = extract_features(extractor, rgb)
        assert feats.shape == (3, extractor.feature_dim)

    def test_empty_batch_rejected(self, extractor):
        with pytest.raises(MetricsError):
            extract_features(extractor, np.empty((0, 1, 8, 8), dtype=np.float32))

    def test_checksum_stable_across_constructions(self):
        assert tiny_extractor().checksum == tiny_extractor().checksum
        assert tiny_extractor(seed=1).checksum != tiny_extractor().checksum

    def test_save_load_roundtrip(self, extractor, tmp_path):
        save_extractor(extractor, tmp_path / "ext.ckpt")
        loaded = load_extractor(tmp_path / "ext.ckpt")
        assert loaded.checksum == extractor.checksum
        batch = np_rng(3).uniform(-1, 1, (2, 1, 16, 16)).astype(np.float32)
        assert np.array_equal(extract_features(extractor, batch),
                              extract_features(loaded, batch))


class TestGaussianStats:
    def test_hand_computed_two_rows(self):
        stats = gaussian_stats(np.array([[0.0, 0.0], [2.0, 2.0]]))
        assert np.allclose(stats.mu, [1.0, 1.0])
        assert np.allclose(stats.sigma, [[2.0, 2.0], [2.0, 2.0]])

    def test_identical_rows_zero_covariance(self):
        stats = gaussian_stats(np.ones((5, 3)))
        assert np.all(stats.sigma == 0.0)

    def test_single_row_rejected(self):
        with pytest.raises(MetricsError):
            gaussian_stats(np.ones((1, 3)))


class TestFrechetDistance:
    def test_identity(self):
        rng = np_rng(4)
        feats = rng.normal(size=(50, 6))
        a = gaussian_stats(feats)
        assert frechet_distance(a, a) <= 1e-8

    def test_mean_only_shift(self):
        a = GaussianStats(np.zeros(2), np.eye(2), 10)
        b = GaussianStats(np.ones(2), np.eye(2), 10)
        assert frechet_distance(a, b) == pytest.approx(2.0, abs=1e-12)

    def test_diagonal_hand_case(self):
        a = GaussianStats(np.zeros(2), 4.0 * np.eye(2), 10)
        b = GaussianStats(np.zeros(2), np.eye(2), 10)
        assert frechet_distance(a, b) == pytest.approx(2.0, abs=1e-10)

    def test_diagonal_closed_form_random_cases(self):
        rng = np_rng(5)
        for _ in range(20):
            dim = int(rng.integers(2, 65))
            mu1, mu2 = rng.normal(size=dim), rng.normal(size=dim)
            v1, v2 = rng.uniform(0.1, 4.0, dim), rng.uniform(0.1, 4.0, dim)
            a = GaussianStats(mu1, np.diag(v1), 10)
            b = GaussianStats(mu2, np.diag(v2), 10)
            expected = diagonal_gaussian_fid(mu1, mu2, v1, v2)
            assert abs(frechet_distance(a, b) - expected) / expected < 1e-6

    def test_symmetry(self):
        rng = np_rng(6)
        fa = rng.normal(size=(40, 8))
        fb = rng.normal(size=(40, 8)) * 1.4 + 0.3
        a, b = gaussian_stats(fa), gaussian_stats(fb)
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-6

    def test_dimension_mismatch(self):
        a = GaussianStats(np.zeros(2), np.eye(2), 5)
        b = GaussianStats(np.zeros(3), np.eye(3), 5)
        with pytest.raises(MetricsError):
            frechet_distance(a, b)

    def test_singular_covariance_handled(self):
        # rank-deficient covariances from duplicated rows still give a finite value
        feats = np.tile(np_rng(7).normal(size=(3, 8)), (4, 1))
        a = gaussian_stats(feats)
        b = gaussian_stats(feats + 0.5)
        value = frechet_distance(a, b)
        assert np.isfinite(value) and value >= 0.0


class TestFID:
    def test_self_distance_near_zero(self, phantoms16, extractor):
        real = load_batch(phantoms16, range(8), extractor.input_size, 1)
        report = fid(phantoms16, real, extractor, sample_count=8,
                     seed=123, epoch=1, model_tag="self")
        # the seeded real subset is exactly the fake batch only if selection
        # picks the same 8 images; use full-manifest fakes for a true copy
        full = load_batch(phantoms16, range(phantoms16.count), extractor.input_size, 1)
        report_full = fid(phantoms16, full, extractor, sample_count=phantoms16.count,
                          seed=123, epoch=1, model_tag="self")
        assert report_full.fid < 1e-6
        assert report.fid >= 0.0

    def test_inverted_images_rank_worse(self, phantoms16, extractor):
        full = load_batch(phantoms16, range(phantoms16.count), extractor.input_size, 1)
        inverted = -full
        self_fid = fid(phantoms16, full, extractor, phantoms16.count, seed=1).fid
        inv_fid = fid(phantoms16, inverted, extractor, phantoms16.count, seed=1).fid
        assert inv_fid > self_fid

    def test_order_invariance(self, phantoms16, extractor):
        fakes = load_batch(phantoms16, range(10), extractor.input_size, 1)
        a = fid(phantoms16, fakes, extractor, phantoms16.count, seed=2).fid
        b = fid(phantoms16, fakes[::-1].copy(), extractor, phantoms16.count, seed=2).fid
        assert abs(a - b) < 1e-8

    def test_minimum_counts(self, phantoms16, extractor):
        one = load_batch(phantoms16, [0], extractor.input_size, 1)
        with pytest.raises(MetricsError):
            fid(phantoms16, one, extractor, 8, seed=0)

    def test_report_fields_and_csv(self, phantoms16, extractor):
        fakes = load_batch(phantoms16, range(4), extractor.input_size, 1)
        report = fid(phantoms16, fakes, extractor, 8, seed=3, epoch=7, model_tag="toy")
        assert report.n_fake == 4
        assert report.feature_dim == extractor.feature_dim
        assert report.extractor_checksum == extractor.checksum
        row = report.csv_row()
        assert row.startswith("7,toy,8,4,64,")

    def test_negative_fid_rejected_in_report(self):
        with pytest.raises(MetricsError):
            FIDReport(0, "x", 2, 2, 4, "abc", -0.5)
