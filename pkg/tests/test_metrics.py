import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slatmorph.assets import AssetDescriptor, build_asset
from slatmorph.geometry import ColoredVoxelGrid, SparseStructure
from slatmorph.metrics import (
    FEATURE_DIM,
    adjacent_distances,
    feature_embed,
    frechet_feature_distance,
    gaps_csv,
    metrics_json,
    perceptual_distance_variance,
    perceptual_path_length,
    sequence_metrics,
)
from slatmorph import metrics


def grid(family="bar", shade=0.5, yaw=0):
    P = build_asset(AssetDescriptor(family, yaw=yaw)).structure
    return ColoredVoxelGrid(P, np.full((len(P), 3), shade))


class TestFeatureEmbed:
    def test_dimension(self):
        assert feature_embed(grid()).shape == (FEATURE_DIM,)

    def test_identical_grids(self):
        assert np.array_equal(feature_embed(grid()), feature_embed(grid()))

    def test_empty_grid_is_bias(self):
        empty = ColoredVoxelGrid(SparseStructure(16, []), np.zeros((0, 3)))
        assert np.array_equal(feature_embed(empty), metrics._BIAS)

    def test_distinguishes_shape_and_colour(self):
        base = feature_embed(grid())
        assert not np.allclose(base, feature_embed(grid("cross")))
        assert not np.allclose(base, feature_embed(grid(shade=0.9)))

    def test_pooled_statistics_oracle(self):
        # a single voxel at the origin of a 4^3 grid: every block mean is known by hand
        g = ColoredVoxelGrid(SparseStructure(4, [(0, 0, 0)]), [[1.0, 0.5, 0.0]])
        stats = metrics._pooled_stats(g)
        unit = np.array([1.0, 1.0, 0.5, 0.0])
        np.testing.assert_allclose(stats[:4], unit / 64)
        np.testing.assert_allclose(stats[4:8], unit / 8)
        np.testing.assert_allclose(stats[4 + 32:4 + 36], unit)
        assert np.count_nonzero(stats) == 3 * 3

    def test_resolution_must_divide(self):
        with pytest.raises(ValueError):
            feature_embed(ColoredVoxelGrid(SparseStructure(6, [(0, 0, 0)]), [[0, 0, 0]]))


class TestPathMetrics:
    def test_constant_sequence(self):
        frames = [grid()] * 5
        assert perceptual_path_length(frames) == 0.0
        assert perceptual_distance_variance(frames) == 0.0

    def test_single_gap_mean(self):
        assert perceptual_path_length(distances=[3.0]) == 3.0

    def test_two_frames_distance_three(self, monkeypatch):
        # embed frames straight to chosen feature vectors
        feats = {"a": np.zeros(FEATURE_DIM), "b": np.r_[3.0, np.zeros(FEATURE_DIM - 1)]}
        monkeypatch.setattr(metrics, "feature_embed", lambda g: feats[g])
        assert perceptual_path_length(["a", "b"]) == 3.0

    def test_gap_variance(self):
        assert perceptual_distance_variance(distances=[1.0, 3.0]) == 1.0

    def test_equal_gaps_zero_variance(self, monkeypatch):
        monkeypatch.setattr(metrics, "feature_embed", lambda k: np.full(FEATURE_DIM, 0.25 * k))
        assert perceptual_distance_variance(list(range(6))) == pytest.approx(0.0, abs=1e-24)

    def test_reversal_invariance(self):
        frames = [grid(f, s) for f, s in [("bar", 0.2), ("ell", 0.4), ("tee", 0.3), ("cross", 0.9)]]
        assert perceptual_path_length(frames) == pytest.approx(perceptual_path_length(frames[::-1]), rel=1e-12)
        assert perceptual_distance_variance(frames) == pytest.approx(
            perceptual_distance_variance(frames[::-1]), rel=1e-12)

    @pytest.mark.parametrize("fn,n", [(perceptual_path_length, 1), (perceptual_distance_variance, 2)])
    def test_too_short(self, fn, n):
        with pytest.raises(ValueError):
            fn([grid()] * n)

    def test_adjacent_distances(self):
        frames = [grid(shade=s) for s in (0.1, 0.2, 0.4)]
        d = adjacent_distances(frames)
        expected = [np.linalg.norm(feature_embed(b) - feature_embed(a)) for a, b in zip(frames, frames[1:])]
        np.testing.assert_allclose(d, expected, rtol=1e-15)


class TestFrechet:
    def test_identical_sets(self):
        A = np.random.default_rng(0).standard_normal((10, 4))
        assert frechet_feature_distance(A, A) == 0.0

    @pytest.mark.parametrize("delta", [0.5, 2.0, -3.0])
    def test_mean_shift(self, delta):
        A = np.random.default_rng(1).standard_normal((8, 5))
        B = A.copy()
        B[:, 2] += delta
        assert frechet_feature_distance(A, B) == pytest.approx(delta ** 2, abs=1e-9)

    def test_variance_term(self):
        A = np.array([[-1.0], [1.0]])
        B = np.array([[-2.0], [2.0]])
        # population std 1 vs 2
        assert frechet_feature_distance(A, B) == pytest.approx(1.0, abs=1e-12)

    @given(arrays(np.float64, (5, 3), elements=st.floats(-10, 10)),
           arrays(np.float64, (4, 3), elements=st.floats(-10, 10)))
    @settings(max_examples=50)
    def test_symmetric_non_negative(self, A, B):
        d = frechet_feature_distance(A, B)
        assert d >= 0.0
        assert d == pytest.approx(frechet_feature_distance(B, A), rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("A,B", [(np.ones((1, 3)), np.ones((4, 3))), (np.ones((3, 3)), np.ones((3, 2)))])
    def test_errors(self, A, B):
        with pytest.raises(ValueError):
            frechet_feature_distance(A, B)


class TestOutputs:
    def test_record_and_files(self):
        frames = [grid(shade=s) for s in (0.1, 0.2, 0.4, 0.45)]
        record, gaps = sequence_metrics(frames)
        assert record["ffd"] is None and record["n_frames"] == 4
        doc = json.loads(metrics_json(record))
        assert set(doc) == {"ppl", "pdv", "ffd", "n_frames"}
        rows = list(csv.reader(io.StringIO(gaps_csv(gaps))))
        assert rows[0] == ["gap", "from_frame", "to_frame", "distance"]
        assert [float(r[3]) for r in rows[1:]] == gaps.tolist()

    def test_with_reference(self):
        frames = [grid(shade=s) for s in (0.1, 0.2, 0.4)]
        record, _ = sequence_metrics(frames, reference=frames)
        assert record["ffd"] == 0.0
