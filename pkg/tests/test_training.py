import json

import numpy as np
import pytest
import torch

from pcdeform.descriptor import DescriptorConfig, load_checkpoint
from pcdeform.errors import ConfigError, DivergenceError
from pcdeform.geometry import CorrespondenceSet, DeformationField, PointCloud
from pcdeform.pipeline import pair_metrics, prepare, register
from pcdeform.solver import SolverConfig
from pcdeform import training
from pcdeform.training import TrainConfig, correspondence_loss, loss, train, validate
from pcdeform.synth import ChallengeSpec, RegistrationPair, make_pair, sample_primitive

SMALL_SOLVER = SolverConfig(k_cand=6, k_reg=4, lbp_iterations=2)


def quick_config(**kw):
    base = dict(epochs=3, learning_rate=1e-2, solver=SMALL_SOLVER, descriptor=DescriptorConfig.tiny())
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def pairs():
    return [make_pair(sample_primitive(s, 48, seed=i), ChallengeSpec(deformation_level=0.2, seed=i))
            for i, s in enumerate(["sphere", "box"])]


def three_point_pair():
    src = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    tgt = src + np.array([[0, 0, 1.0], [0, 0, 2], [0, 0, 3]])
    return RegistrationPair(PointCloud(src), PointCloud(tgt), CorrespondenceSet.identity(3), DeformationField(tgt - src))


class TestLoss:
    def test_zero_field(self):
        assert loss(three_point_pair(), np.zeros((3, 3))) == pytest.approx(14 / 3)

    def test_unit_lift(self):
        assert loss(three_point_pair(), DeformationField([[0, 0, 1.0]] * 3)) == pytest.approx(5 / 3)

    def test_exact_field(self):
        pair = three_point_pair()
        assert loss(pair, pair.field_gt) == 0.0

    def test_no_correspondences(self):
        pair = three_point_pair()
        pair.correspondences = CorrespondenceSet(np.zeros((0, 2), dtype=int))
        with pytest.raises(ConfigError):
            loss(pair, np.zeros((3, 3)))

    def test_normalized_loss_scales(self, pairs):
        pair = pairs[0]
        prep = prepare(pair, SMALL_SOLVER)
        field = torch.zeros(len(pair.source), 3, dtype=torch.float64)
        got = float(correspondence_loss(field, prep)) * prep.scale ** 2
        assert got == pytest.approx(loss(pair, np.zeros((len(pair.source), 3))), rel=1e-12)


class TestConfig:
    def test_nested_dicts(self):
        c = TrainConfig.from_dict({"solver": {"k_cand": 4}, "descriptor": DescriptorConfig.tiny().to_dict()})
        assert c.solver.k_cand == 4 and c.descriptor.d_model == 8

    def test_round_trip_hash(self):
        c = quick_config()
        assert TrainConfig.from_dict(c.to_dict()).config_hash() == c.config_hash()
        assert quick_config(seed=1).config_hash() != c.config_hash()

    @pytest.mark.parametrize("kw", [{"epochs": -1}, {"learning_rate": 0.0}, {"loss": "l1"},
                                    {"optimizer": "sgd"}, {"dtype": "float16"}, {"normalization": "box"}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestTrain:
    def test_zero_epochs(self, pairs):
        model, report = train(pairs, quick_config(epochs=0))
        ref = training.Descriptor(DescriptorConfig.tiny(), seed=0).double()
        assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), ref.state_dict().values()))
        assert report.losses == [] and report.val_mean_distance == []

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            train([], quick_config())

    def test_loss_decreases(self, pairs):
        _, report = train(pairs[:1], quick_config(epochs=15))
        assert report.losses[-1] < report.losses[0]
        assert len(report.val_mean_distance) == 15

    def test_deterministic(self, pairs):
        _, a = train(pairs, quick_config(batch_size=2))
        _, b = train(pairs, quick_config(batch_size=2))
        assert a.losses == b.losses

    def test_first_epoch_loss_matches_untrained_model(self, pairs):
        # batch of everything: the first logged loss precedes any update
        model = training.Descriptor(DescriptorConfig.tiny(), seed=0).double()
        expect = np.mean([loss(p, register(model, p, SMALL_SOLVER)[0]) for p in pairs])
        _, report = train(pairs, quick_config(epochs=1, batch_size=2))
        assert report.losses[0] == pytest.approx(expect, rel=1e-9)

    def test_divergence(self, pairs, monkeypatch):
        monkeypatch.setattr(training, "correspondence_loss", lambda pred, prep: pred.sum() * float("nan"))
        with pytest.raises(DivergenceError) as info:
            train(pairs, quick_config())
        assert info.value.epoch == 1

    def test_checkpoints_and_report(self, pairs, tmp_path):
        model, report = train(pairs, quick_config(epochs=2, checkpoint_every=1), out_dir=tmp_path)
        report.write(tmp_path)
        assert sorted(p.name for p in tmp_path.glob("*.npz")) == [
            "checkpoint_epoch0001.npz", "checkpoint_epoch0002.npz",
            "optimizer_epoch0001.npz", "optimizer_epoch0002.npz",
        ]
        back = load_checkpoint(tmp_path / "checkpoint_epoch0002.npz")
        assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), back.state_dict().values()))
        rows = (tmp_path / "loss.csv").read_text().splitlines()
        assert rows[0] == "epoch,loss,val_mean_distance" and len(rows) == 3
        assert json.loads((tmp_path / "report.json").read_text())["config_hash"] == report.config_hash

    def test_validation_tracked(self, pairs):
        _, report = train(pairs[:1], quick_config(epochs=2), validation=pairs[1:])
        assert len(report.val_mean_distance) == 2


class TestValidate:
    def test_matches_recomputed_metrics(self, pairs):
        model = training.Descriptor(DescriptorConfig.tiny(), seed=2).double()
        record = validate(model, pairs, SMALL_SOLVER)
        for pair, got in zip(pairs, record["pairs"]):
            field, _ = register(model, pair, SMALL_SOLVER)
            expect = pair_metrics(pair, field)
            assert got == expect
        vals = [m["registered_mean_distance"] for m in record["pairs"]]
        assert record["mean_registered_mean_distance"] == pytest.approx(np.mean(vals))
        assert record["median_registered_mean_distance"] == pytest.approx(np.median(vals))

    def test_perfect_field_metrics(self, pairs):
        pair = pairs[0]
        m = pair_metrics(pair, pair.field_gt)
        assert m["registered_mean_distance"] < 1e-12
        assert m["initial_mean_distance"] == pytest.approx(pair.initial_mean_distance())
