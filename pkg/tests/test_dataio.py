import numpy as np
import pytest

import oracles
from pcdeform.dataio import (
    UPSTREAM_FIELDS,
    FourDMatchRecord,
    export_colorized,
    find_bundles,
    load_4dmatch_record,
    load_index_paired,
    overlap_label,
    read_bundle,
    read_ply,
    reconstruct_4dmatch_target,
    record_to_pair,
    red_blue,
    save_4dmatch_record,
    write_bundle,
)
from pcdeform.errors import BundleFormatError, BundleParseError, DimensionError, ParameterError
from pcdeform.geometry import PointCloud, RigidTransform
from pcdeform.synth import ChallengeSpec, make_pair, sample_primitive


@pytest.fixture
def rich_pair():
    src = sample_primitive("torus", 150, seed=2)
    return make_pair(src, ChallengeSpec(0.4, 0.01, 0.1, 0.7, 0.8, seed=5))


def bundle_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


class TestBundle:
    def test_round_trip(self, rich_pair, tmp_path):
        write_bundle(rich_pair, tmp_path / "b")
        assert read_bundle(tmp_path / "b") == rich_pair

    def test_reserialization_is_byte_identical(self, rich_pair, tmp_path):
        write_bundle(rich_pair, tmp_path / "a")
        write_bundle(read_bundle(tmp_path / "a"), tmp_path / "b")
        assert bundle_bytes(tmp_path / "a") == bundle_bytes(tmp_path / "b")

    def test_layout(self, small_pair, tmp_path):
        write_bundle(small_pair, tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["corr.csv", "meta.json", "source.xyz", "target.xyz"]
        assert (tmp_path / "corr.csv").read_text().splitlines()[0] == "source,target"

    @pytest.mark.parametrize("name", ["source.xyz", "target.xyz", "corr.csv", "meta.json"])
    def test_missing_part(self, small_pair, tmp_path, name):
        write_bundle(small_pair, tmp_path)
        (tmp_path / name).unlink()
        with pytest.raises(BundleFormatError, match=name.split(".")[0][:4]):
            read_bundle(tmp_path)

    def test_nan_reports_line(self, small_pair, tmp_path):
        write_bundle(small_pair, tmp_path)
        f = tmp_path / "target.xyz"
        lines = f.read_text().splitlines()
        lines[6] = "0 nan 0"
        f.write_text("\n".join(lines) + "\n")
        with pytest.raises(BundleParseError) as info:
            read_bundle(tmp_path)
        assert info.value.line == 7
        assert "target.xyz" in str(info.value)

    def test_bad_columns(self, small_pair, tmp_path):
        write_bundle(small_pair, tmp_path)
        (tmp_path / "corr.csv").write_text("source,target\n0,1\n2\n")
        with pytest.raises(BundleParseError) as info:
            read_bundle(tmp_path)
        assert info.value.line == 3

    def test_find_bundles(self, small_pair, tmp_path):
        for name in ["z", "a/b", "a/c"]:
            write_bundle(small_pair, tmp_path / name)
        assert [p.relative_to(tmp_path).as_posix() for p in find_bundles(tmp_path)] == ["a/b", "a/c", "z"]
        assert find_bundles(tmp_path / "z") == [tmp_path / "z"]


def random_record(rng, n=40, overlap=0.6, n_corr=25):
    rot = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    if np.linalg.det(rot) < 0:
        rot[:, 0] *= -1
    src = rng.choice(n, n_corr, replace=False)
    corr = np.stack([src, rng.integers(0, 50, n_corr)], axis=1)
    return FourDMatchRecord(rng.normal(size=(n, 3)), 0.1 * rng.normal(size=(n, 3)), rot, rng.normal(size=3), overlap, corr)


class TestFourDMatch:
    def test_identity_reconstruction_exact(self, rng):
        X = rng.normal(size=(10, 3))
        rec = FourDMatchRecord(X, np.zeros((10, 3)), np.eye(3), np.zeros(3), 0.9, np.c_[np.arange(10), np.arange(10)])
        np.testing.assert_array_equal(reconstruct_4dmatch_target(rec).points, X)

    def test_identity_transform_adds_deformation(self, rng):
        X, D = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
        rec = FourDMatchRecord(X, D, np.eye(3), np.zeros(3), 0.7, np.c_[np.arange(8), np.arange(8)])
        np.testing.assert_array_equal(reconstruct_4dmatch_target(rec).points, X + D)

    def test_hand_case(self):
        # quarter turn about z, shift by one along x
        rot = RigidTransform.about_z(np.pi / 2).rotation
        rec = FourDMatchRecord([[1.0, 0, 0]], [[0, 0, 1.0]], rot, [1.0, 0, 0], 0.5, [[0, 0]])
        np.testing.assert_allclose(reconstruct_4dmatch_target(rec).points, [[1.0, 1.0, 1.0]], atol=1e-15)

    def test_affine_oracle(self, rng):
        for _ in range(10):
            rec = random_record(rng)
            out = reconstruct_4dmatch_target(rec).points
            for row, i in zip(out, rec.source_indices()):
                moved = [a + b for a, b in zip(rec.X[i], rec.D[i])]
                expect = [a + b for a, b in zip(oracles.matvec(rec.R.tolist(), moved), rec.t)]
                np.testing.assert_allclose(row, expect, atol=1e-6, rtol=0)

    def test_source_indices_dedup_keeps_order(self):
        rec = FourDMatchRecord(np.zeros((5, 3)), np.zeros((5, 3)), np.eye(3), np.zeros(3), 0.5,
                               [[3, 0], [1, 1], [3, 2], [0, 0]])
        np.testing.assert_array_equal(rec.source_indices(), [3, 1, 0])

    @pytest.mark.parametrize("overlap,label", [
        (0.9, "4DMatch"), (0.46, "4DMatch"), (0.45, "4DLoMatch"), (0.44, "4DLoMatch"), (0.1, "4DLoMatch"),
    ])
    def test_labels(self, overlap, label):
        assert overlap_label(overlap) == label

    def test_validation(self, rng):
        with pytest.raises(ParameterError):
            FourDMatchRecord(np.zeros((2, 3)), np.zeros((2, 3)), 2 * np.eye(3), np.zeros(3), 0.5, [[0, 0]])
        with pytest.raises(DimensionError):
            FourDMatchRecord(np.zeros((2, 3)), np.zeros((3, 3)), np.eye(3), np.zeros(3), 0.5, [[0, 0]])
        with pytest.raises(DimensionError):
            FourDMatchRecord(np.zeros((2, 3)), np.zeros((2, 3)), np.eye(3), np.zeros(3), 0.5, [[2, 0]])

    def test_npz_round_trip(self, rng, tmp_path):
        rec = random_record(rng)
        save_4dmatch_record(rec, tmp_path / "r.npz")
        back = load_4dmatch_record(tmp_path / "r.npz")
        np.testing.assert_array_equal(back.X, rec.X)
        np.testing.assert_array_equal(back.corr, rec.corr)
        assert back.overlap == rec.overlap

    def test_upstream_names(self, rng, tmp_path):
        rec = random_record(rng)
        inverse = {v: k for k, v in UPSTREAM_FIELDS.items()}
        np.savez(tmp_path / "u.npz", **{inverse[f]: getattr(rec, f) for f in ("X", "D", "R", "t", "overlap", "corr")})
        back = load_4dmatch_record(tmp_path / "u.npz")
        np.testing.assert_array_equal(back.D, rec.D)

    def test_missing_field(self, tmp_path):
        np.savez(tmp_path / "m.npz", X=np.zeros((2, 3)))
        with pytest.raises(BundleFormatError, match="lacks"):
            load_4dmatch_record(tmp_path / "m.npz")

    def test_record_to_pair(self, rng, tmp_path):
        rec = random_record(rng, overlap=0.3)
        pair = record_to_pair(rec)
        assert pair.label == "4DLoMatch"
        assert len(pair.source) == len(pair.target) == len(rec.source_indices())
        write_bundle(pair, tmp_path)
        back = read_bundle(tmp_path)
        assert back == pair and back.extra["overlap"] == 0.3


class TestPly:
    def test_red_blue_ends(self):
        rgb = red_blue(np.array([0.0, 0.5, 1.0]))
        np.testing.assert_array_equal(rgb, [[255, 0, 0], [128, 0, 128], [0, 0, 255]])

    def test_constant_channel(self):
        np.testing.assert_array_equal(red_blue(np.ones(3)), [[255, 0, 0]] * 3)

    def test_export_round_trip(self, rng, tmp_path):
        pts = rng.normal(size=(20, 3))
        err = rng.random(20)
        export_colorized(PointCloud(pts, {"error": err}), "error", tmp_path / "e.ply")
        back, colors = read_ply(tmp_path / "e.ply")
        np.testing.assert_array_equal(back, pts)
        assert colors[np.argmin(err)].tolist() == [255, 0, 0]
        assert colors[np.argmax(err)].tolist() == [0, 0, 255]

    def test_unknown_channel(self, sphere, tmp_path):
        with pytest.raises(ParameterError):
            export_colorized(sphere, "error", tmp_path / "e.ply")


class TestIndexPaired:
    def test_loads_pairs(self, rng, tmp_path):
        a, b = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
        np.savetxt(tmp_path / "0001_source.txt", a)
        np.savetxt(tmp_path / "0001_target.txt", b)
        np.savetxt(tmp_path / "unrelated.txt", a)
        [pair] = load_index_paired(tmp_path)
        np.testing.assert_allclose(pair.target.points - pair.source.points, pair.field_gt.displacements)
        assert len(pair.correspondences) == 12

    def test_count_mismatch(self, rng, tmp_path):
        np.save(tmp_path / "source.npy", rng.normal(size=(4, 3)))
        np.save(tmp_path / "target.npy", rng.normal(size=(5, 3)))
        with pytest.raises(BundleFormatError):
            load_index_paired(tmp_path)
