"""Projection algebra, patch/image scores, upsampling, episode scoring."""

import math

import numpy as np
import pytest

from deviad import autodiff as ad
from deviad.encoder import Checkpoint, EncoderConfig, init_bank, init_params
from deviad.features import episode_from_ids
from deviad.scoring import (ScoreMap, image_score, image_score_node,
                            matching_score_map, patch_score, patch_score_rows,
                            prepare_references, project, project_rows,
                            read_score_map, score_episode, score_query,
                            top_count, upsample_map, write_score_map)
from oracles import bilinear_reference, projection_oracle
from test_features import make_set


class TestProjection:
    def test_single_axis_token(self):
        out = project(np.array([1.0, 1.0, 0.0]), np.eye(3)[:1])
        np.testing.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-7)

    def test_orthogonal_input_zero(self):
        out = project(np.array([0.0, 0.0, 2.0]), np.eye(3)[:2])
        np.testing.assert_allclose(out, np.zeros(3), atol=1e-7)

    def test_non_orthogonal_bank_not_idempotent(self):
        tokens = np.stack([np.eye(3)[0], (np.eye(3)[0] + np.eye(3)[1]) / np.sqrt(2)])
        f = np.eye(3)[1]
        once = project(f, tokens)
        np.testing.assert_allclose(once, [0.5, 0.5, 0.0], atol=1e-7)
        twice = project(once, tokens)
        assert np.max(np.abs(twice - once)) > 0.1
        np.testing.assert_allclose(once, projection_oracle(f, tokens), atol=1e-12)

    def test_zero_norm_token_contributes_nothing(self):
        tokens = np.vstack([np.zeros(3), np.eye(3)[1]])
        out = project(np.array([3.0, 4.0, 0.0]), tokens)
        np.testing.assert_allclose(out, [0.0, 4.0, 0.0], atol=1e-7)

    def test_linearity(self):
        rng = np.random.default_rng(0)
        tokens = rng.normal(size=(4, 6))
        for _ in range(10):
            x, y = rng.normal(size=(2, 6))
            a, b = rng.normal(size=2)
            lhs = project(a * x + b * y, tokens)
            rhs = a * project(x, tokens) + b * project(y, tokens)
            assert np.max(np.abs(lhs - rhs)) < 1e-5

    def test_orthonormal_bank_idempotent_and_fixed_points(self):
        rng = np.random.default_rng(1)
        q, _ = np.linalg.qr(rng.normal(size=(6, 3)))
        tokens = q.T
        f = rng.normal(size=6)
        once = project(f, tokens)
        twice = project(once, tokens)
        assert np.max(np.abs(twice - once)) < 1e-5
        for t in tokens:
            np.testing.assert_allclose(project(t, tokens), t, atol=1e-5)


class TestPatchScore:
    def test_midpoint_case(self):
        f = np.array([1.0, 0.0])
        assert patch_score(f, f, f, f) == pytest.approx(0.5, abs=1e-7)

    def test_annihilated_deviation_fully_normal(self):
        f = np.array([1.0, 0.0])
        assert patch_score(f, np.zeros(2), f, f) == pytest.approx(0.0, abs=1e-7)

    def test_extreme_anomaly(self):
        f = np.array([1.0, 0.0])
        opposite = np.array([-1.0, 0.0])
        assert patch_score(f, f, f, opposite) == pytest.approx(1.0, abs=1e-7)

    def test_clamped_to_unit_interval(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            a, b, c, d = rng.normal(size=(4, 3))
            assert 0.0 <= patch_score(a, b, c, d) <= 1.0


class TestImageScore:
    def test_grid_1024_uses_11_scores(self):
        assert top_count(1024) == 11
        rng = np.random.default_rng(3)
        scores = rng.random(1024)
        expected = np.sort(scores)[::-1][:11].mean()
        assert image_score(scores) == pytest.approx(expected, rel=1e-12)

    def test_constant_scores(self):
        assert image_score(np.full(64, 0.37)) == pytest.approx(0.37, rel=1e-7)

    def test_small_grid_takes_max(self):
        assert top_count(50) == 1
        scores = np.linspace(0, 1, 50)
        assert image_score(scores) == pytest.approx(1.0)

    def test_monotone_aggregation(self):
        rng = np.random.default_rng(4)
        scores = rng.random(100)
        base = image_score(scores)
        for i in [0, 13, 99]:
            bumped = scores.copy()
            bumped[i] = min(1.0, bumped[i] + 0.2)
            assert image_score(bumped) >= base - 1e-12

    def test_node_gradient_hits_selected_entries_only(self):
        scores = np.array([0.9, 0.1, 0.5], dtype=np.float64)
        t = ad.parameter(scores)
        tape = ad.Tape()
        with ad.recording(tape):
            node = image_score_node(t)
        ad.backward(tape, node)
        assert node.item() == pytest.approx(0.9)
        np.testing.assert_allclose(t.grad, [1.0, 0.0, 0.0])


class TestUpsample:
    def test_constant_grid(self):
        out = upsample_map(np.full((3, 3), 0.4), 10, 14)
        np.testing.assert_allclose(out, np.full((10, 14), 0.4), atol=1e-6)

    def test_row_ramp(self):
        out = upsample_map(np.array([[0.0, 1.0], [0.0, 1.0]]), 2, 4)
        expected = np.tile(np.linspace(0, 1, 4), (2, 1))
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_matches_reference_resampler(self):
        rng = np.random.default_rng(5)
        grid = rng.random((4, 4))
        out = upsample_map(grid, 13, 9)
        expected = bilinear_reference(grid, 13, 9)
        assert np.max(np.abs(out - expected)) < 1e-5

    def test_range_bounded(self):
        rng = np.random.default_rng(6)
        grid = rng.random((5, 5))
        out = upsample_map(grid, 32, 32)
        assert out.min() >= grid.min() - 1e-7
        assert out.max() <= grid.max() + 1e-7

    def test_nearest_mode(self):
        grid = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = upsample_map(grid, 2, 2, mode="nearest")
        np.testing.assert_allclose(out, grid)

    def test_identity_when_same_size(self):
        rng = np.random.default_rng(7)
        grid = rng.random((4, 4))
        np.testing.assert_allclose(upsample_map(grid, 4, 4), grid, atol=1e-7)


def toy_checkpoint(c=6, m=4, seed=0, knn=6, rank=2, alpha=0.8):
    rng = np.random.default_rng(seed)
    return Checkpoint(bank=init_bank(m, c, rng), params=init_params(c, rng),
                      config=EncoderConfig(heads=2, dropout=0.1),
                      knn=knn, rank=rank, alpha=alpha, suppress=True)


class TestEpisodeScoring:
    def test_query_equal_to_normal_reference_bounded(self):
        fs = make_set(n_normal=3, per_type=(2,), n_patches=4, channels=6, seed=8)
        # query duplicates normal image 0 exactly
        fs.features.flags.writeable = True
        fs.features[2] = fs.features[0]
        fs.features.flags.writeable = False
        episode = episode_from_ids(fs, 2, [0, 1], [3, 4], "type0")
        smap = score_episode(episode, toy_checkpoint(knn=4, rank=2))
        assert smap.image_score <= 0.5 + 1e-6

    def test_deterministic_rescoring(self):
        fs = make_set(n_normal=4, per_type=(2,), n_patches=9, channels=6, seed=9)
        episode = episode_from_ids(fs, 0, [1, 2], [4, 5], "type0")
        ckpt = toy_checkpoint(knn=8, rank=2)
        a = score_episode(episode, ckpt)
        b = score_episode(episode, ckpt)
        assert np.array_equal(a.patch_scores, b.patch_scores)
        assert np.array_equal(a.pixel_map, b.pixel_map)
        assert a.image_score == b.image_score

    def test_score_bounds_and_invariant(self):
        fs = make_set(n_normal=4, per_type=(3,), n_patches=9, channels=6, seed=10)
        episode = episode_from_ids(fs, 5, [0, 1], [4, 6], "type0")
        smap = score_episode(episode, toy_checkpoint(knn=8, rank=2), height=18, width=18)
        assert np.all(smap.patch_scores >= 0) and np.all(smap.patch_scores <= 1)
        assert np.all(smap.pixel_map >= 0) and np.all(smap.pixel_map <= 1)
        assert 0.0 <= smap.image_score <= 1.0
        smap.validate()

    def test_matching_scorer_modes(self):
        fs = make_set(n_normal=4, per_type=(3,), n_patches=9, channels=6, seed=11)
        normal = fs.features[[0, 1]].reshape(-1, 6)
        abn = fs.features[[4]].reshape(-1, 6)
        abn_mask = fs.patch_masks[[4]].reshape(-1)
        prep = prepare_references(normal, abn, abn_mask, 3, None, knn=8, rank=2)
        for space in ("feature", "deviation"):
            smap = matching_score_map(fs.features[5], prep, space=space)
            assert smap.patch_scores.shape == (9,)
            assert np.all((smap.patch_scores >= 0) & (smap.patch_scores <= 1))


class TestScoreMapIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        patch = rng.random(16).astype(np.float32)
        smap = ScoreMap(patch_scores=patch,
                        pixel_map=upsample_map(patch.reshape(4, 4), 8, 8),
                        image_score=image_score(patch))
        path = tmp_path / "m.idsm"
        write_score_map(path, smap)
        back = read_score_map(path)
        assert np.array_equal(back.patch_scores, smap.patch_scores)
        assert np.array_equal(back.pixel_map, smap.pixel_map)
        assert back.image_score == pytest.approx(smap.image_score, abs=1e-7)
