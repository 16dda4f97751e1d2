"""Neighbor search, local PCA, and denoising against straight-line oracles."""

import numpy as np
import pytest

from deviad.deviations import (SubspaceError, denoise, denoise_query,
                               extract_deviations, local_pca, nearest_normal,
                               residual_deviations, topk_neighbors)
from deviad.synthetic import principal_angles
from oracles import deviation_pipeline_oracle, knn_scan


def random_pool(rng, n=64, c=8):
    return rng.normal(size=(n, c))


class TestNearestNormal:
    def test_exact_match(self):
        rng = np.random.default_rng(0)
        pool = random_pool(rng)
        idx, dist = nearest_normal(pool[3], pool)
        assert idx == 3
        assert dist < 1e-12

    def test_basis_vectors(self):
        pool = np.array([[1.0, 0.0], [0.0, 1.0]])
        idx, _ = nearest_normal(np.array([1.0, 0.0]), pool)
        assert idx == 0

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(1)
        pool = random_pool(rng, 64, 8)
        for f in rng.normal(size=(16, 8)):
            dists, order = knn_scan(f, pool, 1)
            idx, dist = nearest_normal(f, pool)
            assert idx == order[0]
            assert abs(dist - dists[idx]) < 1e-12

    def test_empty_pool_rejected(self):
        with pytest.raises(SubspaceError):
            nearest_normal(np.ones(3), np.zeros((0, 3)))


class TestTopK:
    def test_k_equals_pool(self):
        rng = np.random.default_rng(2)
        pool = random_pool(rng, 10, 4)
        f = rng.normal(size=4)
        idx = topk_neighbors(f, pool, 10)
        dists, order = knn_scan(f, pool, 10)
        assert list(idx) == order

    def test_k_one_equals_nearest(self):
        rng = np.random.default_rng(3)
        pool = random_pool(rng, 30, 6)
        f = rng.normal(size=6)
        assert topk_neighbors(f, pool, 1)[0] == nearest_normal(f, pool)[0]

    def test_matches_full_sort(self):
        rng = np.random.default_rng(4)
        pool = random_pool(rng, 200, 8)
        f = rng.normal(size=8)
        _, order = knn_scan(f, pool, 12)
        assert list(topk_neighbors(f, pool, 12)) == order

    def test_capacity(self):
        with pytest.raises(SubspaceError):
            topk_neighbors(np.ones(3), np.ones((4, 3)), 5)


class TestLocalPca:
    def test_axis_aligned(self):
        pts = np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        sub = local_pca(pts, r=1)
        np.testing.assert_allclose(sub.mean, np.zeros(3), atol=1e-12)
        np.testing.assert_allclose(np.abs(sub.basis[:, 0]), [1.0, 0.0, 0.0], atol=1e-12)
        assert sub.basis[0, 0] > 0  # sign fix
        assert sub.effective_rank == 1

    def test_identical_neighbors_degenerate(self):
        pts = np.tile(np.array([1.0, 2.0, 3.0, 4.0]), (5, 1))
        sub = local_pca(pts, r=2)
        np.testing.assert_allclose(sub.eigenvalues, np.zeros(2), atol=1e-12)
        assert sub.effective_rank == 0
        # padded basis still orthonormal
        np.testing.assert_allclose(sub.basis.T @ sub.basis, np.eye(2), atol=1e-10)

    def test_matches_dense_eigensolver(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(12, 8))
        sub = local_pca(pts, r=4)
        _, _, bases, evals = deviation_pipeline_oracle(
            pts.mean(axis=0, keepdims=True) * 0 + pts[:1], pts, k=12, r=4, alpha=1.0)
        # compare against the oracle's dense decomposition of the same cloud
        mu = pts.mean(axis=0)
        centered = pts - mu
        cov = centered.T @ centered / 11
        w, v = np.linalg.eigh(cov)
        order = np.argsort(w)[::-1][:4]
        angles = principal_angles(sub.basis, v[:, order])
        assert np.max(angles) < 1e-5
        np.testing.assert_allclose(sub.eigenvalues, w[order], rtol=1e-8, atol=1e-10)

    def test_rank_contract(self):
        with pytest.raises(SubspaceError):
            local_pca(np.zeros((5, 3)), r=4)


class TestDenoise:
    def test_in_span_alpha_one(self):
        pts = np.vstack([np.linspace(-1, 1, 6)[:, None] * np.eye(4)[0], np.zeros((6, 4))])
        sub = local_pca(pts, r=1)
        res = np.array([[0.7, 0.0, 0.0, 0.0]])
        out = denoise(res, [sub], alpha=1.0)
        np.testing.assert_allclose(out, np.zeros((1, 4)), atol=1e-10)

    def test_orthogonal_untouched(self):
        pts = np.vstack([np.linspace(-1, 1, 6)[:, None] * np.eye(4)[0], np.zeros((6, 4))])
        sub = local_pca(pts, r=1)
        res = np.array([[0.0, 0.3, -0.2, 0.0]])
        out = denoise(res, [sub], alpha=0.77)
        np.testing.assert_allclose(out, res, atol=1e-12)

    def test_partial_suppression_factor(self):
        pts = np.vstack([np.linspace(-1, 1, 6)[:, None] * np.eye(4)[0], np.zeros((6, 4))])
        sub = local_pca(pts, r=1)
        res = np.array([[1.0, 0.0, 0.0, 0.0]])
        out = denoise(res, [sub], alpha=0.8)
        np.testing.assert_allclose(out, [[0.2, 0.0, 0.0, 0.0]], atol=1e-10)


class TestResiduals:
    def test_zero_residual_for_known_patch(self):
        rng = np.random.default_rng(6)
        pool = random_pool(rng, 20, 5)
        res = residual_deviations(pool[4:5], pool)
        np.testing.assert_allclose(res, np.zeros((1, 5)), atol=1e-12)

    def test_single_reference(self):
        res = residual_deviations(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
        np.testing.assert_allclose(res, [[1.0, -1.0]])

    def test_matches_64bit_recomputation(self):
        rng = np.random.default_rng(7)
        pool = random_pool(rng, 40, 6)
        patches = rng.normal(size=(20, 6))
        expected, _, _, _ = deviation_pipeline_oracle(patches, pool, k=5, r=2, alpha=0.5)
        got = residual_deviations(patches, pool)
        np.testing.assert_allclose(got, expected, atol=1e-12)


class TestPipelineOracleEquivalence:
    def test_50_random_instances(self):
        rng = np.random.default_rng(8)
        for trial in range(50):
            n_pool = int(rng.integers(20, 120))
            n_patch = int(rng.integers(4, 40))
            c = int(rng.integers(5, 16))
            k = int(rng.integers(4, min(13, n_pool)))
            r = int(rng.integers(1, min(k - 1, c)))
            alpha = float(rng.uniform(0.1, 1.0))
            pool = rng.normal(size=(n_pool, c))
            patches = rng.normal(size=(n_patch, c))

            field = extract_deviations(patches, pool, k=k, r=r, alpha=alpha)
            res_o, den_o, bases_o, evals_o = deviation_pipeline_oracle(
                patches, pool, k=k, r=r, alpha=alpha)

            assert np.max(np.abs(field.residuals - res_o)) < 1e-4
            assert np.max(np.abs(field.denoised - den_o)) < 1e-4
            for i in range(n_patch):
                angles = principal_angles(field.bases[i], bases_o[i])
                assert np.max(angles) < 1e-5
                np.testing.assert_allclose(field.eigenvalues[i], evals_o[i],
                                           rtol=1e-6, atol=1e-9)

    def test_query_path_identical_to_reference_path(self):
        rng = np.random.default_rng(9)
        pool = random_pool(rng, 50, 8)
        patches = rng.normal(size=(10, 8))
        a = extract_deviations(patches, pool, k=6, r=2, alpha=0.8)
        b = denoise_query(patches, pool, k=6, r=2, alpha=0.8)
        assert np.array_equal(a.denoised, b.denoised)
        assert np.array_equal(a.nearest_normal_idx, b.nearest_normal_idx)


class TestInvariants:
    def test_suppression_bound_fuzz(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            pool = rng.normal(size=(int(rng.integers(15, 40)), 6))
            patches = rng.normal(size=(10, 6))
            alpha = float(rng.uniform(0.0, 1.0))
            field = extract_deviations(patches, pool, k=8, r=3, alpha=alpha)
            res_norm = np.linalg.norm(field.residuals, axis=1)
            den_norm = np.linalg.norm(field.denoised, axis=1)
            assert np.all(den_norm <= res_norm + 1e-5)

    def test_alpha_one_annihilates_subspace_component(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            pool = rng.normal(size=(30, 6))
            patches = rng.normal(size=(8, 6))
            field = extract_deviations(patches, pool, k=8, r=3, alpha=1.0)
            for i in range(8):
                u = field.bases[i][:, :field.effective_ranks[i]]
                leak = np.linalg.norm(u.T @ field.denoised[i].astype(np.float64))
                bound = 1e-5 * (np.linalg.norm(field.residuals[i]) + 1e-12)
                assert leak <= bound

    def test_projector_idempotence(self):
        rng = np.random.default_rng(12)
        pool = rng.normal(size=(30, 6))
        patches = rng.normal(size=(5, 6))
        field = extract_deviations(patches, pool, k=8, r=3, alpha=0.8)
        f = rng.normal(size=6)
        for i in range(5):
            u = field.bases[i]
            once = u @ (u.T @ f)
            twice = u @ (u.T @ once)
            assert np.max(np.abs(once - twice)) < 1e-5

    def test_pool_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        pool = rng.normal(size=(40, 6))
        patches = rng.normal(size=(12, 6))
        field = extract_deviations(patches, pool, k=8, r=3, alpha=0.8)
        perm = rng.permutation(40)
        field_p = extract_deviations(patches, pool[perm], k=8, r=3, alpha=0.8)
        np.testing.assert_allclose(field.residuals, field_p.residuals, atol=1e-5)
        np.testing.assert_allclose(field.denoised, field_p.denoised, atol=1e-5)

    def test_deterministic(self):
        rng = np.random.default_rng(14)
        pool = rng.normal(size=(30, 6))
        patches = rng.normal(size=(6, 6))
        a = extract_deviations(patches, pool, k=8, r=3, alpha=0.8)
        b = extract_deviations(patches, pool, k=8, r=3, alpha=0.8)
        assert np.array_equal(a.denoised, b.denoised)

    def test_query_identical_to_reference_image_all_zero(self):
        rng = np.random.default_rng(15)
        pool = rng.normal(size=(30, 6))
        field = denoise_query(pool[:10], pool, k=8, r=3, alpha=0.8)
        np.testing.assert_allclose(field.residuals, np.zeros((10, 6)), atol=1e-12)
        np.testing.assert_allclose(field.denoised, np.zeros((10, 6)), atol=1e-12)

    def test_planted_orthogonal_offset_survives(self):
        # normal variation along the first two axes; offset along the last
        rng = np.random.default_rng(16)
        c = 6
        base = rng.normal(size=c)
        variation = rng.normal(size=(60, 2)) @ np.eye(c)[:2]
        pool = base + variation
        offset = np.zeros(c)
        offset[-1] = 2.5
        query = (base + rng.normal(size=2) @ np.eye(c)[:2] + offset)[None, :]
        field = denoise_query(query, pool, k=12, r=2, alpha=1.0)
        np.testing.assert_allclose(field.denoised[0, -1], 2.5, atol=1e-5)
        assert np.linalg.norm(field.denoised[0, :2]) < 1e-5
