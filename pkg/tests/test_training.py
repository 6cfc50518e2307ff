import itertools
import json

import numpy as np
import pytest

from slashlab import autodiff as ad
from slashlab import data as dt
from slashlab import model as md
from slashlab import training as tr
from slashlab.autodiff import Tensor
from slashlab.errors import CheckpointError, ConfigError, NumericError


SMALL = md.ModelConfig(H=16, W=16, K=5, D_slot=16, D_enc=8, D=16, T=2,
                       kernel_variant=md.KernelVariant(kind="wnconv", size=3),
                       ippe_enabled=True)


@pytest.fixture(scope="module")
def corpus():
    ds = dt.build_dataset(num_samples=32, seed=77, difficulty="stripes", H=16, W=16,
                          policy=dt.AnnotationPolicy(image_fraction=0.25, seed=78))
    return ds.samples


@pytest.fixture(autouse=True)
def _fresh_counters():
    tr.reset_counters()
    yield


class TestLossConfig:
    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            tr.LossConfig(point_weight=-0.1)

    def test_bad_iteration_mode_rejected(self):
        with pytest.raises(ConfigError):
            tr.LossConfig(point_loss_iterations="first")

    def test_bad_optimizer_values_rejected(self):
        with pytest.raises(ConfigError):
            tr.OptimizerConfig(base_lr=0.0)
        with pytest.raises(ConfigError):
            tr.OptimizerConfig(warmup_steps=-1)


class TestPointLoss:
    def test_exact_predictions_give_zero(self):
        gt = np.array([[0.25, 0.25], [0.75, 0.75]])
        pred = Tensor(gt.copy(), dtype=np.float64)
        assert float(tr.point_loss(pred, gt).data) == 0.0

    def test_matching_finds_the_zero(self):
        # predictions in the opposite order of the gt list: matched loss is 0
        pred = Tensor(np.array([[0.0, 0.0], [1.0, 1.0]]), dtype=np.float64)
        gt = np.array([[1.0, 1.0], [0.0, 0.0]])
        assert float(tr.point_loss(pred, gt).data) == 0.0

    def test_matches_ordered_subset_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(25):
            K, m = 5, 3
            pred = rng.uniform(size=(K, 2))
            gt = rng.uniform(size=(m, 2))
            got = float(tr.point_loss(Tensor(pred, dtype=np.float64), gt).data)
            best = min(
                sum(((pred[s] - gt[j]) ** 2).sum() for j, s in enumerate(subset)) / m
                for subset in itertools.permutations(range(K), m))
            assert got == pytest.approx(best, rel=1e-12)

    def test_empty_gt_is_zero_and_counted(self):
        pred = Tensor(np.zeros((3, 2)), dtype=np.float64)
        out = tr.point_loss(pred, np.zeros((0, 2)))
        assert float(out.data) == 0.0
        assert tr.counters["point_loss_skipped"] == 1

    def test_more_points_than_slots_rejected(self):
        with pytest.raises(ConfigError):
            tr.point_loss(Tensor(np.zeros((2, 2)), dtype=np.float64),
                          np.full((3, 2), 0.5))

    def test_gradient_flows_only_into_matched_predictions(self):
        pred = ad.Parameter(np.array([[0.1, 0.1], [0.9, 0.9], [0.5, 0.5]]),
                            "pred", dtype=np.float64)
        gt = np.array([[0.0, 0.0], [1.0, 1.0]])
        with ad.Tape() as tape:
            loss = tr.point_loss(pred, gt)
        g = tape.backward(loss)[pred]
        assert np.abs(g[0]).sum() > 0
        assert np.abs(g[1]).sum() > 0
        np.testing.assert_array_equal(g[2], 0.0)


class TestTotalLoss:
    def _fake_result(self, recon, points=()):
        dec = md.DecoderOutput(per_slot_rgb=None, per_slot_alpha_logits=None,
                               mixture=None, reconstruction=recon)
        return md.ForwardResult(slots=None, fields=[], points=list(points),
                                routing=[], decoder=dec, features=None)

    def test_perfect_reconstruction_no_annotation_is_zero(self):
        rng = np.random.default_rng(32)
        img = rng.uniform(size=(4, 4, 3))
        result = self._fake_result(Tensor(img.reshape(16, 3), dtype=np.float64))
        loss, comp = tr.total_loss(Tensor(img, dtype=np.float64), result, None,
                                   tr.LossConfig())
        assert float(loss.data) == 0.0
        assert comp["total"] == 0.0 and comp["recon"] == 0.0 and comp["point"] == 0.0

    def test_zero_point_weight_reduces_to_recon(self):
        rng = np.random.default_rng(33)
        img = rng.uniform(size=(4, 4, 3))
        recon = Tensor(rng.uniform(size=(16, 3)), dtype=np.float64)
        pts = Tensor(rng.uniform(size=(3, 2)), dtype=np.float64)
        ann = {"points": np.array([[0.5, 0.5]]), "indices": [1]}
        with_pts, _ = tr.total_loss(Tensor(img, dtype=np.float64),
                                    self._fake_result(recon, [pts]), ann,
                                    tr.LossConfig(point_weight=0.0))
        without, _ = tr.total_loss(Tensor(img, dtype=np.float64),
                                   self._fake_result(recon), None,
                                   tr.LossConfig())
        assert float(with_pts.data) == float(without.data)

    def test_components_recompose_total(self):
        rng = np.random.default_rng(34)
        img = rng.uniform(size=(4, 4, 3))
        recon = Tensor(rng.uniform(size=(16, 3)), dtype=np.float64)
        pts = [Tensor(rng.uniform(size=(3, 2)), dtype=np.float64) for _ in range(2)]
        ann = {"points": np.array([[0.2, 0.8], [0.6, 0.4]]), "indices": [1, 2]}
        lc = tr.LossConfig(recon_weight=0.7, point_weight=0.3,
                           point_loss_iterations="all")
        loss, comp = tr.total_loss(Tensor(img, dtype=np.float64),
                                   self._fake_result(recon, pts), ann, lc)
        assert comp["total"] == pytest.approx(
            0.7 * comp["recon"] + 0.3 * comp["point"], rel=1e-12)
        assert float(loss.data) == comp["total"]

    def test_all_iterations_averages_terms(self):
        rng = np.random.default_rng(35)
        img = np.zeros((4, 4, 3))
        recon = Tensor(np.zeros((16, 3)), dtype=np.float64)
        pts = [Tensor(rng.uniform(size=(3, 2)), dtype=np.float64) for _ in range(3)]
        ann = {"points": np.array([[0.5, 0.5]]), "indices": [1]}
        _, comp_all = tr.total_loss(Tensor(img, dtype=np.float64),
                                    self._fake_result(recon, pts), ann,
                                    tr.LossConfig(point_loss_iterations="all"))
        singles = [float(tr.point_loss(p, ann["points"]).data) for p in pts]
        assert comp_all["point"] == pytest.approx(np.mean(singles), rel=1e-12)


class TestAdam:
    def test_zero_gradients_leave_params_unchanged(self):
        p = ad.Parameter(np.array([1.0, -2.0, 3.0]), "p")
        before = p.data.copy()
        adam = tr.Adam({"p": p})
        adam.apply({"p": p}, {"p": np.zeros(3)})
        np.testing.assert_array_equal(p.data, before)

    def test_schedule_formula(self):
        adam = tr.Adam({}, tr.OptimizerConfig(base_lr=4e-4, warmup_steps=1000,
                                              decay_half_life=20000))
        assert adam.lr_at(10) == pytest.approx(4e-4 * 0.01 * 0.5 ** (10 / 20000))
        assert adam.lr_at(1000) == pytest.approx(4e-4 * 0.5 ** 0.05)
        assert adam.lr_at(20000) < adam.lr_at(1000)
        # exactly one half-life apart, past warmup: ratio is exactly 1/2
        assert adam.lr_at(21000) == pytest.approx(adam.lr_at(1000) / 2, rel=1e-12)

    def test_zero_warmup_starts_at_full_rate(self):
        adam = tr.Adam({}, tr.OptimizerConfig(base_lr=1e-3, warmup_steps=0,
                                              decay_half_life=1000))
        assert adam.lr_at(1) == pytest.approx(1e-3 * 0.5 ** (1 / 1000))

    def test_single_step_matches_hand_formula(self):
        p = ad.Parameter(np.array([2.0]), "p")
        g = np.array([0.5])
        cfg = tr.OptimizerConfig(base_lr=0.1, warmup_steps=0, decay_half_life=10 ** 9)
        adam = tr.Adam({"p": p}, cfg)
        lr = adam.apply({"p": p}, {"p": g})
        m_hat = (0.1 * 0.5) / (1 - 0.9)
        v_hat = (0.001 * 0.25) / (1 - 0.999)
        expected = 2.0 - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert p.data[0] == pytest.approx(expected, rel=1e-12)


class TestTrainStep:
    def test_empty_batch_rejected(self):
        params = md.init_params(SMALL, np.random.default_rng(0))
        adam = tr.Adam(params)
        with pytest.raises(ConfigError):
            tr.train_step(params, SMALL, tr.LossConfig(), [], adam,
                          np.random.default_rng(0))

    def test_step_runs_and_logs(self, corpus):
        params = md.init_params(SMALL, np.random.default_rng(1))
        adam = tr.Adam(params)
        before = {n: p.data.copy() for n, p in params.items()}
        rec = tr.train_step(params, SMALL, tr.LossConfig(), corpus[:4], adam,
                            np.random.default_rng(2))
        assert rec["step"] == 1
        assert np.isfinite(rec["loss"])
        assert rec["recon"] > 0
        changed = sum(not np.array_equal(before[n], p.data)
                      for n, p in params.items())
        assert changed > len(params) // 2

    def test_nonfinite_loss_aborts_with_diagnostics(self, corpus):
        params = md.init_params(SMALL, np.random.default_rng(1))
        params["enc.mlp2.w"].data[0, 0] = np.nan
        adam = tr.Adam(params)
        with pytest.raises(NumericError, match="param_norm"):
            tr.train_step(params, SMALL, tr.LossConfig(), corpus[:2], adam,
                          np.random.default_rng(2))

    def test_counters_track_annotated_fraction(self, corpus):
        params = md.init_params(SMALL, np.random.default_rng(1))
        adam = tr.Adam(params)
        batch = corpus[:8]
        expected = sum(1 for s in batch if s.annotated)
        tr.train_step(params, SMALL, tr.LossConfig(), batch, adam,
                      np.random.default_rng(3))
        assert tr.counters["train_samples_seen"] == 8
        assert tr.counters["train_annotated_seen"] == expected

    def test_two_fresh_runs_bit_identical(self, corpus):
        logs = []
        for _ in range(2):
            params = md.init_params(SMALL, np.random.default_rng(5))
            adam = tr.Adam(params)
            rng = np.random.default_rng(6)
            recs = [tr.train_step(params, SMALL, tr.LossConfig(), corpus[:4],
                                  adam, rng) for _ in range(3)]
            logs.append([(r["loss"], r["recon"], r["point"]) for r in recs])
        assert logs[0] == logs[1]


class TestEvaluate:
    def test_deterministic(self, corpus):
        params = md.init_params(SMALL, np.random.default_rng(7))
        a = tr.evaluate(params, SMALL, corpus[:6])
        b = tr.evaluate(params, SMALL, corpus[:6])
        assert a == b

    def test_empty_rejected(self):
        params = md.init_params(SMALL, np.random.default_rng(7))
        with pytest.raises(ConfigError):
            tr.evaluate(params, SMALL, [])

    def test_metrics_in_range(self, corpus):
        params = md.init_params(SMALL, np.random.default_rng(8))
        scores = tr.evaluate(params, SMALL, corpus[:6])
        assert -0.5 <= scores["ari"] <= 1.0
        assert 0.0 <= scores["miou"] <= 1.0
        assert scores["num_samples"] == 6


class TestCheckpoint:
    def _setup(self, corpus, steps=2):
        params = md.init_params(SMALL, np.random.default_rng(9))
        adam = tr.Adam(params)
        rng = np.random.default_rng(10)
        for _ in range(steps):
            tr.train_step(params, SMALL, tr.LossConfig(), corpus[:4], adam, rng)
        return params, adam, rng

    def test_round_trip_bit_exact(self, corpus, tmp_path):
        params, adam, rng = self._setup(corpus)
        path = tmp_path / "ck.npz"
        tr.save_checkpoint(path, params, adam, rng, SMALL, tr.LossConfig())
        state = tr.load_checkpoint(path)
        assert state["step"] == 2
        for name, p in params.items():
            np.testing.assert_array_equal(state["params"][name].data, p.data)
            np.testing.assert_array_equal(state["adam"].m[name], adam.m[name])
            np.testing.assert_array_equal(state["adam"].v[name], adam.v[name])
        assert state["rng"].bit_generator.state == rng.bit_generator.state
        assert md.config_to_dict(state["config"]) == md.config_to_dict(SMALL)

    def test_eval_identical_after_round_trip(self, corpus, tmp_path):
        params, adam, rng = self._setup(corpus)
        before = tr.evaluate(params, SMALL, corpus[:4])
        path = tmp_path / "ck.npz"
        tr.save_checkpoint(path, params, adam, rng, SMALL, tr.LossConfig())
        state = tr.load_checkpoint(path)
        after = tr.evaluate(state["params"], SMALL, corpus[:4])
        assert before == after

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="no checkpoint"):
            tr.load_checkpoint(tmp_path / "absent.npz")

    def test_version_mismatch(self, corpus, tmp_path, monkeypatch):
        params, adam, rng = self._setup(corpus, steps=1)
        path = tmp_path / "ck.npz"
        monkeypatch.setattr(tr, "CHECKPOINT_VERSION", 999)
        tr.save_checkpoint(path, params, adam, rng, SMALL, tr.LossConfig())
        monkeypatch.undo()
        with pytest.raises(CheckpointError, match="version"):
            tr.load_checkpoint(path)


class TestTrainRun:
    def _run(self, corpus, out, steps=4, batch_size=4, **kw):
        return tr.train_run(SMALL, tr.LossConfig(),
                            tr.OptimizerConfig(warmup_steps=10, decay_half_life=100),
                            corpus, corpus[:4], seed=11, out_dir=out,
                            steps=steps, batch_size=batch_size, eval_samples=4, **kw)

    def test_two_runs_bit_identical_csv(self, corpus, tmp_path):
        a = self._run(corpus, tmp_path / "a")
        b = self._run(corpus, tmp_path / "b")
        ca = (tmp_path / "a" / "metrics.csv").read_text()
        cb = (tmp_path / "b" / "metrics.csv").read_text()
        assert ca == cb
        assert a.steps_completed == b.steps_completed == 4

    def test_resume_matches_uninterrupted(self, corpus, tmp_path):
        self._run(corpus, tmp_path / "full", steps=5)
        short = self._run(corpus, tmp_path / "cut", steps=3)
        ckpt = tmp_path / "cut" / "checkpoints" / "step-3.npz"
        assert ckpt.exists()
        self._run(corpus, tmp_path / "cut", steps=5, resume=ckpt)
        full_rows = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
        cut_rows = (tmp_path / "cut" / "metrics.csv").read_text().splitlines()
        full_train = [r for r in full_rows if r.split(",")[0] in ("4", "5")
                      and r.split(",")[1] != ""]
        cut_train = [r for r in cut_rows if r.split(",")[0] in ("4", "5")
                     and r.split(",")[1] != ""]
        assert full_train == cut_train

    def test_resume_rejects_config_mismatch(self, corpus, tmp_path):
        self._run(corpus, tmp_path / "r", steps=2)
        other = md.ModelConfig(H=16, W=16, K=6, D_slot=16, D_enc=8, D=16, T=2)
        with pytest.raises(CheckpointError, match="config"):
            tr.train_run(other, tr.LossConfig(), tr.OptimizerConfig(),
                         corpus, corpus[:4], seed=11, out_dir=tmp_path / "r",
                         steps=4, batch_size=4,
                         resume=tmp_path / "r" / "checkpoints" / "step-2.npz")

    def test_manifest_written(self, corpus, tmp_path):
        manifest = self._run(corpus, tmp_path / "m", steps=2)
        on_disk = json.loads((tmp_path / "m" / "manifest.json").read_text())
        assert on_disk["steps_completed"] == 2
        assert on_disk["seed"] == 11
        assert on_disk["final_metrics"] == manifest.final_metrics
        assert (tmp_path / "m" / "checkpoints" / "step-2.npz").exists()

    def test_csv_layout(self, corpus, tmp_path):
        self._run(corpus, tmp_path / "c", steps=2)
        rows = (tmp_path / "c" / "metrics.csv").read_text().splitlines()
        assert rows[0] == tr.CSV_HEADER
        # row 1 is the step-0 eval: train cells blank, metric cells filled
        first = rows[1].split(",")
        assert first[0] == "0" and first[1] == "" and first[5] != ""
        # training rows: train cells filled, metric cells blank
        second = rows[2].split(",")
        assert second[0] == "1" and second[1] != "" and second[5] == ""

    def test_bad_batch_size(self, corpus, tmp_path):
        with pytest.raises(ConfigError):
            self._run(corpus, tmp_path / "x", steps=1, batch_size=0)
