import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from nqnet import heads, nn, simdata, trainer
from nqnet.simdata import LINEAR1D, WAVE
from nqnet.trainer import TrainConfig, TrainingDiverged

SMALL = dict(hidden=(32, 32), max_epochs=60, patience=10)


class ExactPredictor:
    def __init__(self, model, levels):
        self.model = simdata.get_model(model)
        self.levels = np.asarray(levels)

    def __call__(self, X):
        return self.model.quantiles(X, self.levels)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(batch_size=0), dict(max_epochs=0), dict(patience=0),
                                     dict(head_kind="QRNN"), dict(levels=(0.5, 0.4)),
                                     dict(levels=(0.0, 0.5)), dict(hidden=(8, 0)),
                                     dict(trunk="tree"), dict(head_kind="DQR", trunk="parallel")])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.K == 19 and cfg.batch_size == 128 and cfg.max_epochs == 1000
        assert cfg.hidden_for(1) == (128, 128, 128)
        assert cfg.hidden_for(8) == (256, 256, 256)
        assert (cfg.lr, cfg.beta1, cfg.beta2) == (1e-3, 0.9, 0.99)


class TestLayout:
    @pytest.mark.parametrize("kind", heads.HEAD_KINDS)
    def test_default_layout(self, kind):
        cfg = TrainConfig(head_kind=kind, levels=(0.25, 0.5, 0.75), hidden=(8, 8))
        net = trainer.build_net(cfg, 2)
        if kind in trainer.NQ_KINDS:
            assert cfg.layout == "parallel" and isinstance(net, nn.ParallelNet)
            mean_net, gaps_net = net.parts
            assert mean_net.layer_dims == [2, 8, 8, 1] and gaps_net.layer_dims == [2, 8, 8, 3]
        else:
            assert cfg.layout == "shared" and isinstance(net, nn.DenseNet)
        assert net.layer_dims[-1] == heads.raw_width(kind, 3)

    def test_shared_override(self):
        cfg = TrainConfig(trunk="shared", levels=(0.25, 0.5, 0.75), hidden=(8, 8))
        net = trainer.build_net(cfg, 2)
        assert isinstance(net, nn.DenseNet) and net.layer_dims == [2, 8, 8, 4]

    def test_parallel_net_size(self):
        net = trainer.build_net(TrainConfig(), 1)
        one = 1 * 128 + 128 + 2 * (128 * 128 + 128)
        assert net.n_params == (one + 128 + 1) + (one + 128 * 19 + 19)

    @pytest.mark.parametrize("trunk", ["shared", "parallel"])
    def test_both_layouts_fit_and_stay_ordered(self, trunk):
        cfg = TrainConfig(trunk=trunk, seed=2, **SMALL)
        pred, hist = trainer.train(WAVE, 256, cfg)
        assert hist.val_loss[hist.best_epoch] < hist.val_loss[0]
        Q = pred(np.linspace(0, 1, 101))
        assert np.all(np.diff(Q, axis=1) > 0)


class TestTrain:
    def test_constant_target(self):
        rng = np.random.default_rng(0)
        X, Xv = rng.random((1024, 1)), rng.random((256, 1))
        c = 1.7
        cfg = TrainConfig(levels=(0.5,), hidden=(16, 16), seed=4)
        pred, _ = trainer.fit_arrays(X, np.full(1024, c), Xv, np.full(256, c), cfg)
        grid = np.linspace(0, 1, 201)[:, None]
        assert np.max(np.abs(pred(grid)[:, 0] - c)) < 0.05

    def test_descent_after_first_epoch(self):
        _, hist = trainer.train(WAVE, 256, TrainConfig(max_epochs=1, seed=2))
        assert hist.train_loss[1] < hist.train_loss[0]

    def test_best_weights_restored(self):
        pred, hist = trainer.train(WAVE, 128, TrainConfig(seed=3, **SMALL))
        assert hist.val_loss[hist.best_epoch] == min(hist.val_loss)
        val = simdata.sample(WAVE, 32, 3, trainer.seeding.VALID)
        obj = trainer.quantile_objective(heads.NQ_ELU, TrainConfig().levels, TrainConfig().loss)
        assert obj(nn.forward(pred.net, val.X)[0], val.Y)[0] == hist.val_loss[hist.best_epoch]

    def test_early_stop_within_budget(self):
        _, hist = trainer.train(WAVE, 128, TrainConfig(seed=3, hidden=(16,), max_epochs=500, patience=5))
        assert hist.stop_epoch - hist.best_epoch <= 5
        assert len(hist.train_loss) == hist.stop_epoch + 1

    def test_linear_recovery_n2048(self):
        pred, _ = trainer.train(LINEAR1D, 2048, TrainConfig(seed=1))
        rep = trainer.evaluate(pred, LINEAR1D, 100_000, seed=1)
        k = list(pred.levels).index(0.5)
        assert rep.l2sq[k] <= 0.05
        assert rep.crossing_fraction == 0.0 and rep.min_gap > 0

    def test_dqr_crosses_on_wave(self):
        pred, _ = trainer.train(WAVE, 512, TrainConfig(head_kind=heads.DQR, seed=1))
        assert trainer.evaluate(pred, WAVE, 100_000, seed=1).crossing_fraction > 0

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            trainer.train(WAVE, 7, TrainConfig())

    def test_divergence_reports_epoch(self):
        def nan_from_sixth_call(raw, y, calls=[0]):
            calls[0] += 1
            # initial train + val, then epoch 1: batch, train, val; epoch 2 batch is call 6
            loss = np.nan if calls[0] > 5 else 1.0
            return loss, np.zeros_like(raw)

        net = nn.init_net([1, 4, 1], 0)
        X = np.random.default_rng(0).random((64, 1))
        with pytest.raises(TrainingDiverged) as info:
            trainer.fit_net(net, X, (np.zeros(64),), X[:8], (np.zeros(8),), nan_from_sixth_call,
                            TrainConfig(batch_size=64))
        assert info.value.epoch == 2

    def test_deterministic(self):
        a, ha = trainer.train(WAVE, 64, TrainConfig(seed=8, **SMALL))
        b, hb = trainer.train(WAVE, 64, TrainConfig(seed=8, **SMALL))
        assert ha.train_loss == hb.train_loss
        np.testing.assert_array_equal(nn.flatten_params(a.net), nn.flatten_params(b.net))

    def test_error_decreases_with_data(self):
        def l2_median(n, seed):
            pred, _ = trainer.train(LINEAR1D, n, TrainConfig(seed=seed))
            rep = trainer.evaluate(pred, LINEAR1D, 20_000, seed=seed)
            return rep.l2sq[9]

        seeds = range(20, 25)
        small = np.mean([l2_median(512, s) for s in seeds])
        large = np.mean([l2_median(2048, s) for s in seeds])
        assert large < small


class TestEvaluate:
    @pytest.mark.parametrize("model_id", [WAVE, simdata.SINDEX])
    def test_exact_predictor_zero_error(self, model_id):
        levels = TrainConfig().levels
        rep = trainer.evaluate(ExactPredictor(model_id, levels), model_id, 1000, seed=0)
        assert np.all(rep.l1 == 0) and np.all(rep.l2sq == 0)
        assert rep.crossing_fraction == 0.0

    def test_three_point_brute_force(self):
        pred = np.array([[0.0, 1.0, 2.0], [1.0, 0.5, 3.0], [-1.0, -1.0, 0.0]])
        truth = np.array([[0.5, 1.0, 1.0], [0.0, 1.0, 2.0], [-2.0, 0.0, 1.0]])
        l1, l2, cross, gap = trainer.error_metrics(pred, truth)
        for k in range(3):
            a = b = 0.0
            for i in range(3):
                d = pred[i][k] - truth[i][k]
                a += abs(d)
                b += d * d
            assert l1[k] == pytest.approx(a / 3, abs=1e-15)
            assert l2[k] == pytest.approx(b / 3, abs=1e-15)
        assert cross == pytest.approx(1 / 3)
        assert gap == -0.5

    def test_pure(self):
        pred, _ = trainer.train(WAVE, 64, TrainConfig(seed=5, **SMALL))
        a = trainer.evaluate(pred, WAVE, 5000, seed=11).to_dict()
        b = trainer.evaluate(pred, WAVE, 5000, seed=11).to_dict()
        a.pop("seconds"), b.pop("seconds")
        assert a == b

    def test_bad_T(self):
        with pytest.raises(ValueError):
            trainer.evaluate(ExactPredictor(WAVE, [0.5]), WAVE, 0, seed=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            trainer.error_metrics(np.zeros((3, 2)), np.zeros((3, 3)))


class TestReplicate:
    cfg = TrainConfig(levels=(0.25, 0.5, 0.75), **SMALL)

    def run(self, **kw):
        args = dict(models=[WAVE], methods=[heads.NQ_ELU, heads.DQR], N=64, R=2, base_seed=7,
                    config=self.cfg, T=2000)
        args.update(kw)
        return trainer.replicate(**args)

    def test_r1_std_zero(self):
        s = self.run(R=1)
        assert all(r["l1_std"] == 0 and r["l2sq_std"] == 0 for r in s.rows)
        assert all(r["runs_completed"] == 1 for r in s.rows)

    def test_deterministic_and_worker_independent(self, tmp_path):
        a = self.run(log_path=tmp_path / "a.jsonl")
        b = self.run(workers=2)
        assert a.rows == b.rows
        recs = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
        assert len(recs) == 4
        assert {"config", "train_loss", "val_loss", "stop_epoch", "train_seconds"} <= set(recs[0])
        assert recs[0]["config"]["head_kind"] == heads.NQ_ELU

    def test_layout_and_invariants(self, tmp_path):
        s = self.run()
        assert [(r["method"], r["tau"]) for r in s.rows] == [
            (m, t) for m in (heads.NQ_ELU, heads.DQR) for t in (0.25, 0.5, 0.75)]
        assert all(r["crossing_fraction_mean"] == 0 for r in s.cell(WAVE, heads.NQ_ELU))
        assert all(r["l1_std"] >= 0 for r in s.rows)
        with open(s.to_csv(tmp_path / "s.csv"), newline="") as fh:
            reader = csv.DictReader(fh)
            assert tuple(reader.fieldnames) == trainer.SUMMARY_COLUMNS
            assert len(list(reader)) == 6
        table = s.to_table(WAVE)
        assert table.splitlines()[0].split() == ["tau", heads.NQ_ELU, heads.DQR]
        assert len(table.splitlines()) == 4

    def test_methods_share_data(self):
        s = self.run(R=1)
        seeds = {run.method: run.seed for run in s.runs}
        assert seeds[heads.NQ_ELU] == seeds[heads.DQR]

    def test_failures_counted(self, monkeypatch):
        real = trainer.train

        def flaky(model, n, config):
            if config.head_kind == heads.DQR:
                raise TrainingDiverged(3)
            return real(model, n, config)

        monkeypatch.setattr(trainer, "train", flaky)
        s = self.run()
        assert s.failures == 2
        assert all(r["runs_completed"] == 0 for r in s.cell(WAVE, heads.DQR))
        assert all(r["runs_completed"] == 2 for r in s.cell(WAVE, heads.NQ_ELU))
        assert "epoch 3" in [run.error for run in s.runs if run.error][0]

    def test_bad_R(self):
        with pytest.raises(ValueError):
            self.run(R=0)
