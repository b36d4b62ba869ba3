import numpy as np
import pytest

from pcdeform.errors import GenerationError, ParameterError
from pcdeform.geometry import CorrespondenceSet, DeformationField, PointCloud, apply_rigid, mean_distance
from pcdeform.synth import (
    SHAPES,
    ChallengeSpec,
    RegistrationPair,
    add_noise,
    add_outliers,
    crop_to_overlap,
    deform,
    ground_truth_residual,
    make_pair,
    outlier_box,
    sample_primitive,
)


@pytest.mark.parametrize("shape", SHAPES)
def test_primitives_are_unit_normalized(shape):
    c = sample_primitive(shape, 300, seed=1)
    assert c.bbox_diagonal() == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_allclose(c.points.mean(axis=0), 0, atol=1e-12)


class TestDeform:
    def test_level_zero(self, sphere):
        out, field = deform(sphere, 0.0, seed=4)
        assert out == sphere
        assert not field.displacements.any()

    def test_deterministic(self, sphere):
        a, fa = deform(sphere, 0.5, seed=9)
        b, fb = deform(sphere, 0.5, seed=9)
        assert a.points.tobytes() == b.points.tobytes()
        assert fa.displacements.tobytes() == fb.displacements.tobytes()

    def test_level_calibration(self):
        src = sample_primitive("sphere", 512, seed=0)
        for seed in range(10):
            _, field = deform(src, 0.4, seed)
            p95 = np.percentile(np.linalg.norm(field.displacements, axis=1), 95)
            assert 0.19 <= p95 <= 0.21

    @pytest.mark.parametrize("level", [-0.1, 1.5])
    def test_range(self, sphere, level):
        with pytest.raises(ParameterError):
            deform(sphere, level, 0)

    def test_field_is_exact(self, sphere):
        out, field = deform(sphere, 0.7, seed=2)
        np.testing.assert_array_equal(out.points, sphere.points + field.displacements)

    def test_field_is_smooth(self):
        # nearby points move nearly alike: displacement differences are bounded by
        # a small multiple of point spacing
        src = sample_primitive("sphere", 2000, seed=1)
        _, field = deform(src, 1.0, seed=3)
        from pcdeform.geometry import knn_indices
        nb = knn_indices(src, src, 2)[:, 1]
        dx = np.linalg.norm(src.points - src.points[nb], axis=1)
        du = np.linalg.norm(field.displacements - field.displacements[nb], axis=1)
        assert np.max(du / dx) < 10.0


class TestNoise:
    def test_zero(self, sphere):
        assert add_noise(sphere, 0.0, 1) == sphere

    def test_statistics(self):
        c = PointCloud(np.zeros((10_000, 3)))
        noisy = add_noise(c, 0.03, seed=7)
        sd = noisy.points.std(axis=0, ddof=1)
        assert np.all((sd >= 0.029) & (sd <= 0.031))

    def test_deterministic(self, sphere):
        assert add_noise(sphere, 0.02, 5) == add_noise(sphere, 0.02, 5)

    def test_negative(self, sphere):
        with pytest.raises(ParameterError):
            add_noise(sphere, -1.0, 0)


class TestOutliers:
    def test_zero(self, sphere):
        out, idx = add_outliers(sphere, 0.0, 1)
        assert out == sphere and len(idx) == 0

    def test_count_and_containment(self):
        c = sample_primitive("torus", 200, seed=2)
        out, idx = add_outliers(c, 0.45, seed=3)
        assert len(idx) == 90 and len(out) == 290
        lo, hi = outlier_box(c)
        pts = out.points[idx]
        assert np.all((pts >= lo) & (pts <= hi))

    def test_append_semantics(self):
        c = sample_primitive("cone", 1000, seed=2)
        out, idx = add_outliers(c, 0.25, seed=3)
        assert len(idx) == 250 and idx.min() >= 1000
        np.testing.assert_array_equal(out.points[:1000], c.points)

    def test_fraction_one(self, sphere):
        with pytest.raises(ParameterError):
            add_outliers(sphere, 1.0, 0)


def full_pair(n=1000, seed=0):
    src = sample_primitive("cylinder", n, seed=seed)
    return make_pair(src, ChallengeSpec(deformation_level=0.3, seed=seed))


class TestCrop:
    def test_ratio_one(self):
        pair = full_pair(200)
        assert crop_to_overlap(pair, 1.0, 0) is pair

    def test_half(self):
        pair = crop_to_overlap(full_pair(1000), 0.5, seed=4)
        assert 480 <= len(pair.correspondences) <= 520

    def test_ratio_across_seeds(self):
        base = full_pair(500, seed=1)
        for seed in range(50):
            ratio = [0.1, 0.3, 0.5, 0.7, 0.9][seed % 5]
            pair = crop_to_overlap(base, ratio, seed)
            # count surviving ground-truth correspondences directly
            survivors = len(pair.correspondences)
            assert abs(survivors / len(base.source) - ratio) <= 0.02
            assert np.max(ground_truth_residual(pair)) < 1e-9

    def test_half_space(self):
        from pcdeform.synth import _unit_vectors

        base = full_pair(400)
        pair = crop_to_overlap(base, 0.6, seed=8)
        # first draw from the crop seed is the cutting direction (no ties in continuous data)
        v = _unit_vectors(np.random.default_rng(8), 1)[0]
        kept = {tuple(p) for p in pair.target.points}
        mask = np.array([tuple(p) in kept for p in base.target.points])
        proj = base.target.points @ v
        assert mask.sum() == len(pair.target)
        assert proj[mask].max() < proj[~mask].min()

    def test_degenerate(self):
        src = PointCloud(np.zeros((10, 3)))
        pair = RegistrationPair(src, src, CorrespondenceSet.identity(10), DeformationField.zeros(10))
        with pytest.raises(GenerationError):
            crop_to_overlap(pair, 0.5, 0)

    def test_bad_ratio(self):
        with pytest.raises(ParameterError):
            crop_to_overlap(full_pair(50), 0.0, 0)


class TestMakePair:
    def test_null_pipeline(self, sphere):
        pair = make_pair(sphere, ChallengeSpec())
        assert pair.target == sphere
        assert not pair.field_gt.displacements.any()
        assert len(pair.outlier_indices) == 0

    def test_rotation_only(self, sphere):
        pair = make_pair(sphere, ChallengeSpec(rotation_max=np.pi / 4, seed=3))
        back = apply_rigid(pair.target, pair.rigid.inverse())
        assert mean_distance(back, sphere) < 1e-12
        angle = np.arctan2(pair.rigid.rotation[1, 0], pair.rigid.rotation[0, 0])
        assert 0 <= angle <= np.pi / 4

    def test_full_spec_deterministic(self, sphere):
        spec = ChallengeSpec(0.3, 0.01, 0.05, 0.8, 0.2, seed=7)
        assert make_pair(sphere, spec) == make_pair(sphere, spec)

    def test_stage_seeds_recorded(self, sphere):
        pair = make_pair(sphere, ChallengeSpec(seed=7))
        assert set(pair.stage_seeds) == {"deform", "rotate", "crop", "noise", "outliers"}
        assert len(set(pair.stage_seeds.values())) == 5

    def test_noiseless_ground_truth(self):
        src = sample_primitive("box", 400, seed=4)
        pair = make_pair(src, ChallengeSpec(0.6, 0.0, 0.25, 0.7, 0.5, seed=21))
        assert np.max(ground_truth_residual(pair)) < 1e-9
        # outliers never become correspondents
        assert not set(pair.correspondences.target) & set(pair.outlier_indices)

    def test_noisy_ground_truth_bounded(self):
        src = sample_primitive("box", 400, seed=4)
        pair = make_pair(src, ChallengeSpec(0.6, 0.02, 0.0, 1.0, 0.0, seed=21))
        # 3-D Gaussian offset norms: a 6-sigma bound is never hit in practice
        assert np.max(ground_truth_residual(pair)) < 6 * 0.02 * np.sqrt(3)

    def test_outliers_inside_box(self):
        src = sample_primitive("sphere", 300, seed=4)
        pair = make_pair(src, ChallengeSpec(0.2, 0.0, 0.45, 1.0, 0.0, seed=2))
        inliers = pair.target.subset(np.setdiff1d(np.arange(len(pair.target)), pair.outlier_indices))
        lo, hi = outlier_box(inliers)
        pts = pair.target.points[pair.outlier_indices]
        assert np.all((pts >= lo) & (pts <= hi))

    def test_monotone_initial_error(self):
        levels = [0.1, 0.2, 0.4, 0.6, 0.8]
        means = []
        for level in levels:
            vals = []
            for seed in range(20):
                src = sample_primitive(SHAPES[seed % 5], 256, seed=seed)
                vals.append(make_pair(src, ChallengeSpec(deformation_level=level, seed=seed)).initial_mean_distance())
            means.append(np.mean(vals))
        assert all(b >= a for a, b in zip(means, means[1:]))

    def test_spec_validation(self):
        with pytest.raises(ParameterError):
            ChallengeSpec(overlap_ratio=0.0)
        with pytest.raises(ParameterError):
            ChallengeSpec(seed=-1)
