import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boundmargin import data as D
from boundmargin.errors import ConfigError, ContractError, FormatError
from boundmargin.rng import RngStream


def brute_mu(points):
    flat = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    total, pairs = 0.0, 0
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            total += np.sqrt(((flat[i] - flat[j]) ** 2).sum())
            pairs += 1
    return total / pairs


def tiny_labeled(n=3, shape=(2,)):
    rng = np.random.default_rng(0)
    return D.LabeledSet(rng.normal(size=(n, *shape)), np.arange(n) % 2, 2)


class TestMuPair:
    def test_two_points(self):
        assert D.mu_pair(np.array([[0.0, 0.0], [3.0, 4.0]])) == 5.0

    def test_triangle(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert D.mu_pair(pts) == pytest.approx((2 + np.sqrt(2)) / 3, abs=1e-12)

    def test_matches_brute_force(self):
        pts = np.random.default_rng(3).normal(size=(40, 5))
        assert D.mu_pair(pts) == pytest.approx(brute_mu(pts), rel=1e-12)

    def test_images_are_flattened(self):
        imgs = np.random.default_rng(4).normal(size=(6, 1, 3, 3))
        assert D.mu_pair(imgs) == pytest.approx(brute_mu(imgs), rel=1e-12)

    def test_sampled_estimate_close_to_full(self):
        pts = RngStream(0, "mu-test").normal((1000, 2))
        full = D.mu_pair(pts, sample_cap=1000)
        sampled = D.mu_pair(pts, sample_cap=300, rng=RngStream(1, "cap"))
        assert abs(sampled - full) / full < 0.02

    def test_needs_two_points(self):
        with pytest.raises(ConfigError):
            D.mu_pair(np.zeros((1, 2)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariant(self, seed):
        pts = np.random.default_rng(seed).normal(size=(12, 3))
        perm = np.random.default_rng(seed + 1).permutation(12)
        assert D.mu_pair(pts[perm]) == pytest.approx(D.mu_pair(pts), rel=1e-12)


class TestSigmas:
    def test_rule(self):
        assert D.derive_sigmas(5.0) == (15.0, 1.5)
        su, sb = D.derive_sigmas(0.1)
        assert su == pytest.approx(0.3) and sb == pytest.approx(0.03)

    def test_rejects_non_positive(self):
        with pytest.raises(ConfigError):
            D.derive_sigmas(0.0)

    def test_mnist_override_values(self):
        cfg = D.NoiseConfig(0.126, 0.0126, 1, 1)
        assert cfg.sigma_b == pytest.approx(cfg.sigma_u / 10)

    @pytest.mark.parametrize("kw", [dict(sigma_u=0.0, sigma_b=1.0), dict(sigma_u=1.0, sigma_b=0.0),
                                    dict(sigma_u=1.0, sigma_b=1.0, n_u=-1), dict(sigma_u=1.0, sigma_b=1.0, n_b=0)])
    def test_noise_config_invariants(self, kw):
        with pytest.raises(ConfigError):
            D.NoiseConfig(**kw)


class TestGenerators:
    def test_unlabeled_counts(self):
        X = tiny_labeled(3)
        assert len(D.gen_unlabeled(X, D.NoiseConfig(1.0, 0.1, 2, 1), RngStream(0, "u"))) == 6
        assert len(D.gen_unlabeled(X, D.NoiseConfig(1.0, 0.1, 0, 1), RngStream(0, "u"))) == 0

    def test_unlabeled_source_and_shape(self):
        X = tiny_labeled(4, (1, 3, 3))
        U = D.gen_unlabeled(X, D.NoiseConfig(0.5, 0.05, 3, 1), RngStream(0, "u"))
        assert U.points.shape == (12, 1, 3, 3)
        np.testing.assert_array_equal(U.source, [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3])

    def test_unlabeled_statistics(self):
        sigma = 0.7
        X = D.LabeledSet(np.zeros((1, 2)), [0], 2)
        U = D.gen_unlabeled(X, D.NoiseConfig(sigma, 0.07, 100_000, 1), RngStream(5, "u"))
        assert np.all(np.abs(U.points.mean(axis=0)) < 4 * sigma / np.sqrt(1e5))
        assert np.all(np.abs(U.points.std(axis=0) / sigma - 1) < 0.02)

    def test_unlabeled_deterministic(self):
        X = tiny_labeled(5)
        cfg = D.NoiseConfig(1.0, 0.1, 3, 1)
        a = D.gen_unlabeled(X, cfg, RngStream(9, "u")).points
        b = D.gen_unlabeled(X, cfg, RngStream(9, "u")).points
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != D.gen_unlabeled(X, cfg, RngStream(10, "u")).points.tobytes()

    def test_single_neighbor_moves(self):
        psi = np.array([0.3, -0.2])
        nb = D.gen_neighbors(psi, D.NoiseConfig(1.0, 0.1, 1, 1), RngStream(0, "nb"))
        assert nb.shape == (1, 2)
        assert np.linalg.norm(nb[0] - psi) > 0

    def test_neighbor_statistics(self):
        sigma = 0.05
        nb = D.gen_neighbors(np.zeros(1), D.NoiseConfig(1.0, sigma, 1, 100_000), RngStream(2, "nb"))
        assert abs(nb.std() / sigma - 1) < 0.02

    def test_neighbor_batch_shape(self):
        centers = np.zeros((4, 1, 5, 5))
        assert D.gen_neighbor_batch(centers, 3, 0.1, RngStream(0, "nb")).shape == (4, 3, 1, 5, 5)


class TestAssemble:
    def test_no_unlabeled(self):
        X = tiny_labeled(4)
        ds = D.assemble(X, D.gen_unlabeled(X, D.NoiseConfig(1.0, 0.1, 0, 1), RngStream(0, "u")))
        assert len(ds) == 4 and ds.labeled.all()

    def test_with_unlabeled(self):
        X = tiny_labeled(4)
        ds = D.assemble(X, D.gen_unlabeled(X, D.NoiseConfig(1.0, 0.1, 3, 1), RngStream(0, "u")))
        assert len(ds) == 16 and ds.labeled.sum() == 4
        assert ds[0].label == X.labels[0]

    def test_unlabeled_entries_hide_labels(self):
        X = tiny_labeled(2)
        ds = D.assemble(X, D.gen_unlabeled(X, D.NoiseConfig(1.0, 0.1, 2, 1), RngStream(0, "u")))
        for k in range(2, len(ds)):
            with pytest.raises(ContractError):
                ds[k].label

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            D.assemble(tiny_labeled(2), D.UnlabeledSet(np.zeros((3, 5))))


class TestPoints2D:
    def test_default_layout(self):
        X = D.gen_2d_points(seed=0)
        assert len(X) == 200 and set(X.labels.tolist()) == {0, 1}
        assert X.points[X.labels == 0, 0].mean() < -0.8 and X.points[X.labels == 1, 0].mean() > 0.8

    def test_zero_stdev(self):
        spec = [{"center": (2.0, 3.0), "stdev": 0.0, "count": 5, "label": 0},
                {"center": (0.0, 0.0), "stdev": 1.0, "count": 5, "label": 1}]
        X = D.gen_2d_points(spec, seed=1)
        np.testing.assert_array_equal(X.points[:5], np.tile([2.0, 3.0], (5, 1)))

    def test_deterministic(self):
        assert D.gen_2d_points(seed=3).points.tobytes() == D.gen_2d_points(seed=3).points.tobytes()

    def test_needs_two_labels(self):
        with pytest.raises(ConfigError):
            D.gen_2d_points([{"center": (0, 0), "stdev": 1, "count": 3, "label": 0}] * 2)

    def test_label_range_checked(self):
        with pytest.raises(ConfigError):
            D.LabeledSet(np.zeros((2, 2)), [0, 2], 2)


class TestIdx:
    def write_pair(self, tmp_path, images, labels):
        D.write_idx(tmp_path / "img", images)
        D.write_idx(tmp_path / "lab", labels)
        return tmp_path / "img", tmp_path / "lab"

    def test_header_layout(self, tmp_path):
        D.write_idx(tmp_path / "x", np.zeros((3, 28, 28), dtype=np.uint8))
        raw = (tmp_path / "x").read_bytes()
        assert struct.unpack(">IIII", raw[:16]) == (0x00000803, 3, 28, 28)
        assert len(raw) == 16 + 3 * 28 * 28

    def test_large_header_accepted(self, tmp_path):
        header = struct.pack(">IIII", 0x00000803, 60000, 28, 28)
        (tmp_path / "big").write_bytes(header + bytes(60000 * 28 * 28))
        assert D.read_idx(tmp_path / "big", D.IDX_IMAGES_MAGIC).shape == (60000, 28, 28)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(struct.pack(">II", 0x00000901, 1) + b"\x00")
        with pytest.raises(FormatError):
            D.read_idx(tmp_path / "x", D.IDX_LABELS_MAGIC)

    def test_length_mismatch(self, tmp_path):
        (tmp_path / "x").write_bytes(struct.pack(">II", 0x00000801, 5) + b"\x00\x01")
        with pytest.raises(FormatError):
            D.read_idx(tmp_path / "x")

    def test_count_mismatch(self, tmp_path):
        img, lab = self.write_pair(tmp_path, np.zeros((4, 28, 28)), np.zeros(3))
        with pytest.raises(FormatError):
            D.load_mnist(img, lab)

    def test_all_zero_images(self, tmp_path):
        img, lab = self.write_pair(tmp_path, np.zeros((4, 28, 28)), np.arange(4))
        X = D.load_mnist(img, lab)
        assert X.point_shape == (1, 32, 32)
        assert np.unique(X.points).size == 1

    def test_normalization_and_padding(self, tmp_path):
        raw = np.random.default_rng(0).integers(0, 256, size=(20, 28, 28)).astype(np.uint8)
        img, lab = self.write_pair(tmp_path, raw, np.arange(20) % 10)
        X = D.load_mnist(img, lab)
        assert abs(X.points.mean()) < 1e-6 and abs(X.points.std() - 1) < 1e-6
        border = X.points[:, 0, :2, :]
        assert np.allclose(border, -X.normalization["mean"] / X.normalization["std"])
        inner = X.points[:, 0, 2:30, 2:30] * X.normalization["std"] + X.normalization["mean"]
        np.testing.assert_allclose(inner, raw / 255.0, atol=1e-12)

    def test_reused_stats(self):
        raw = np.full((2, 28, 28), 255, dtype=np.uint8)
        stats = {"mean": 0.5, "std": 0.25, "pad": 2}
        pts, back = D.preprocess_images(raw, stats)
        assert back is stats
        assert pts[0, 0, 16, 16] == pytest.approx(2.0) and pts[0, 0, 0, 0] == pytest.approx(-2.0)

    def test_balanced_subset(self, tmp_path):
        labels = np.repeat(np.arange(10), 70)
        img, lab = self.write_pair(tmp_path, np.zeros((700, 28, 28)), labels)
        X = D.load_mnist(img, lab, subset_per_class=64, seed=1)
        assert len(X) == 640 and np.all(np.bincount(X.labels) == 64)
        again = D.load_mnist(img, lab, subset_per_class=64, seed=1)
        np.testing.assert_array_equal(X.labels, again.labels)

    def test_balanced_indices_too_few(self):
        with pytest.raises(ConfigError):
            D.balanced_indices(np.array([0, 0, 1]), 2, RngStream(0, "s"))

    def test_gzip_accepted(self, tmp_path):
        import gzip

        D.write_idx(tmp_path / "x", np.arange(6, dtype=np.uint8).reshape(2, 3))
        (tmp_path / "x.gz").write_bytes(gzip.compress((tmp_path / "x").read_bytes()))
        np.testing.assert_array_equal(D.read_idx(tmp_path / "x.gz"), [[0, 1, 2], [3, 4, 5]])


class TestCaches:
    def test_labeled_round_trip(self, tmp_path):
        X = D.LabeledSet(np.random.default_rng(0).normal(size=(5, 2)), [0, 1, 1, 0, 1], 2, {"mean": 0.1})
        D.save_labeled(tmp_path / "x.bmds", X, {"seed": 3})
        back = D.load_labeled(tmp_path / "x.bmds")
        assert back.points.tobytes() == X.points.tobytes()
        np.testing.assert_array_equal(back.labels, X.labels)
        assert back.normalization == {"mean": 0.1}

    def test_unlabeled_round_trip(self, tmp_path):
        X = tiny_labeled(3, (1, 4, 4))
        U = D.gen_unlabeled(X, D.NoiseConfig(1.0, 0.1, 2, 1), RngStream(0, "u"))
        D.save_unlabeled(tmp_path / "u.bmds", U, X.point_shape)
        back = D.load_external_unlabeled(tmp_path / "u.bmds", X.point_shape)
        assert back.points.tobytes() == U.points.tobytes()
        assert len(D.assemble(X, back)) == 9

    def test_wrong_dimensionality(self, tmp_path):
        U = D.UnlabeledSet(np.zeros((2, 3)))
        D.save_unlabeled(tmp_path / "u.bmds", U, (3,))
        with pytest.raises(FormatError):
            D.load_external_unlabeled(tmp_path / "u.bmds", (2,))

    def test_empty_file(self, tmp_path):
        (tmp_path / "empty").write_bytes(b"")
        U = D.load_external_unlabeled(tmp_path / "empty", (2,))
        assert len(U) == 0 and U.points.shape == (0, 2)

    def test_labeled_loader_rejects_unlabeled(self, tmp_path):
        D.save_unlabeled(tmp_path / "u.bmds", D.UnlabeledSet(np.zeros((1, 2))), (2,))
        with pytest.raises(FormatError):
            D.load_labeled(tmp_path / "u.bmds")
