import numpy as np
import pytest

from gaitloom import gait
from gaitloom.autodiff import Adam, Tensor, no_grad
from gaitloom.dataset import (
    PipelineConfig,
    SubjectParams,
    WindowConfig,
    prepare_split,
    synth_corpus,
    synth_generate,
)
from gaitloom.model import (
    AblationFlags,
    BASELINE_FLAGS,
    DegenerateLabelsError,
    EncoderConfig,
    MainModel,
    ModelBundle,
    NumericDivergenceError,
    TimingModel,
    TrainConfig,
    evaluate,
    finetune,
    main_loss,
    metrics,
    nrmse,
    predict_angles,
    r2,
    rmse,
    stack_inputs,
    timing_loss,
    train_main,
    train_timing,
)
from gaitloom.model.training import _check_finite

from gradcheck import max_rel_error


@pytest.fixture(scope="module")
def tiny_split():
    corpus = synth_corpus(2, 2, 10.0, seed=41, noisy=True, spurious_rate=0.3)
    recs = [r for r, _ in corpus]
    pcfg = PipelineConfig(window=WindowConfig(stride=480))
    return prepare_split(recs, {("S01", 1)}, pcfg)


class TestArchitectureContract:
    def test_flatten_width(self):
        assert EncoderConfig().flat_width == 6016

    def test_decoder_output_column(self):
        cfg = EncoderConfig()
        m = MainModel(cfg, AblationFlags(True, True, True), np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).standard_normal((2, 1, 1200, 8)).astype(np.float32))
        h = m.encoder(x)
        assert h.shape == (2, 16, 47, 8)
        time_lengths = [h.shape[2]]
        for layer in m.decoder.net.layers:
            h = layer(h)
            if h.shape[2] != time_lengths[-1]:
                time_lengths.append(h.shape[2])
        assert time_lengths == [47, 235, 239, 1195, 1200]
        assert h.shape == (2, 1, 1200, 8)

    def test_output_shapes(self):
        cfg = EncoderConfig()
        m = MainModel(cfg, AblationFlags(True, True, True), np.random.default_rng(2))
        m.train()
        out = m(Tensor(np.random.default_rng(3).standard_normal((3, 1, 1200, 8)).astype(np.float32)))
        assert out.pattern.shape == (3,)
        assert out.amplitude.shape == (3, 2)
        assert out.activation.shape == (3, 100, 8)
        assert np.all(np.isfinite(out.pattern.data))

    def test_aux_branch_dropped_at_eval(self):
        cfg = EncoderConfig()
        m = MainModel(cfg, AblationFlags(True, True, True), np.random.default_rng(4))
        m.eval()
        with no_grad():
            out = m(Tensor(np.zeros((2, 1, 1200, 8), dtype=np.float32)))
        assert out.activation is None

    def test_timing_head_two_outputs(self):
        tm = TimingModel(EncoderConfig(), np.random.default_rng(5))
        out = tm(Tensor(np.random.default_rng(6).standard_normal((2, 1, 1200, 8)).astype(np.float32)))
        assert out.shape == (2, 2)
        assert np.all(np.isfinite(out.data))

    def test_baseline_single_head(self):
        m = MainModel(EncoderConfig(), BASELINE_FLAGS, np.random.default_rng(7))
        out = m(Tensor(np.zeros((2, 1, 1200, 8), dtype=np.float32)))
        assert out.angle.shape == (2,)
        assert out.pattern is None and out.activation is None

    def test_printed_variant_not_invertible(self):
        printed = EncoderConfig(k_temporal1=10, k_temporal2=10, pool_stride=2)
        assert printed.flat_width != 6016
        assert not printed.decoder_invertible()
        with pytest.raises(ValueError):
            MainModel(printed, AblationFlags(True, True, True), np.random.default_rng(8))
        # encoder + heads still build for sensitivity runs
        MainModel(printed, AblationFlags(True, False, False), np.random.default_rng(9))


class TestTimingLoss:
    def test_perfect_predictions(self):
        pred = Tensor(np.array([[0.1, 0.9], [0.5, 1.2]]))
        assert timing_loss(pred, pred.data.copy()).item() == 0.0

    def test_constant_offset_closed_form(self):
        n, delta = 5, 0.3
        t = np.random.default_rng(10).random((n, 2))
        pred = Tensor(t + delta)
        sym = timing_loss(pred, t, "symmetric").item()
        assert sym == pytest.approx(2 * delta**2, rel=1e-12)
        printed = timing_loss(pred, t, "as_printed").item()
        assert printed == pytest.approx(delta**2 + n * delta**2, rel=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(11)
        pred = Tensor(rng.standard_normal((6, 2)), requires_grad=True)
        t = rng.standard_normal((6, 2))
        assert max_rel_error(lambda p: timing_loss(p, t), [pred]) < 1e-4

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            timing_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), "bogus")


class TestMainLoss:
    def _outputs(self, rng, n=4):
        from gaitloom.model.networks import MainOutputs
        return MainOutputs(
            pattern=Tensor(rng.standard_normal(n)),
            amplitude=Tensor(rng.standard_normal((n, 2))),
            activation=Tensor(rng.random((n, 100, 8))),
        )

    def _labels(self, rng, n=4):
        return {
            "pattern": rng.standard_normal(n),
            "amplitude": rng.standard_normal((n, 2)),
            "angle": rng.standard_normal(n),
            "mask": rng.random((n, 100, 8)),
        }

    def test_perfect_zero(self):
        rng = np.random.default_rng(12)
        out = self._outputs(rng)
        labels = {
            "pattern": out.pattern.data.copy(),
            "amplitude": out.amplitude.data.copy(),
            "angle": np.zeros(4),
            "mask": out.activation.data.copy(),
        }
        total, parts = main_loss(out, labels, 1.0, AblationFlags(True, True, True))
        assert total.item() == 0.0

    def test_alpha_zero_drops_aux(self):
        rng = np.random.default_rng(13)
        out, labels = self._outputs(rng), self._labels(rng)
        with_aux, _ = main_loss(out, labels, 0.0, AblationFlags(True, True, True))
        without, _ = main_loss(out, labels, 1.0, AblationFlags(True, False, True))
        assert with_aux.item() == pytest.approx(without.item(), abs=1e-15)

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(14)
        n = 5
        out, labels = self._outputs(rng, n), self._labels(rng, n)
        alpha = 0.7
        total, parts = main_loss(out, labels, alpha, AblationFlags(True, True, True))
        l1 = sum((labels["pattern"][i] - out.pattern.data[i]) ** 2 for i in range(n)) / n
        l2 = sum((labels["amplitude"][i, j] - out.amplitude.data[i, j]) ** 2
                 for i in range(n) for j in range(2)) / (2 * n)
        l3 = sum((labels["mask"][i, j, k] - out.activation.data[i, j, k]) ** 2
                 for i in range(n) for j in range(100) for k in range(8)) / (800 * n)
        assert total.item() == pytest.approx(l1 + l2 + alpha * l3, rel=1e-12)
        assert parts["pattern"] == pytest.approx(l1, rel=1e-12)
        assert parts["amplitude"] == pytest.approx(l2, rel=1e-12)
        assert parts["activation"] == pytest.approx(l3, rel=1e-12)

    def test_decomposition_property(self):
        rng = np.random.default_rng(15)
        out, labels = self._outputs(rng), self._labels(rng)
        base, parts = main_loss(out, labels, 0.0, AblationFlags(True, True, True))
        for alpha in (0.25, 1.0, 3.5):
            total, _ = main_loss(out, labels, alpha, AblationFlags(True, True, True))
            assert total.item() == pytest.approx(base.item() + alpha * parts["activation"], rel=1e-12)

    def test_baseline_uses_angle(self):
        rng = np.random.default_rng(16)
        from gaitloom.model.networks import MainOutputs
        out = MainOutputs(angle=Tensor(rng.standard_normal(4)))
        labels = self._labels(rng)
        total, parts = main_loss(out, labels, 1.0, BASELINE_FLAGS)
        ref = np.mean((out.angle.data - labels["angle"]) ** 2)
        assert total.item() == pytest.approx(ref, rel=1e-12)

    def test_negative_alpha_rejected(self):
        rng = np.random.default_rng(17)
        with pytest.raises(ValueError):
            main_loss(self._outputs(rng), self._labels(rng), -0.1, AblationFlags(True, True, True))


class TestMetrics:
    def test_perfect_fit(self):
        y = np.array([1.0, 2.0, 3.0])
        assert rmse(y, y) == 0.0
        assert nrmse(y, y) == 0.0
        assert r2(y, y) == 1.0

    def test_constant_offset_exact(self):
        rng = np.random.default_rng(18)
        y = rng.standard_normal(100)
        assert rmse(y + 2.0, y) == 2.0

    def test_mean_predictor_r2_zero(self):
        rng = np.random.default_rng(19)
        y = rng.standard_normal(50)
        pred = np.full(50, y.mean())
        assert r2(pred, y) == 0.0

    def test_scale_laws(self):
        rng = np.random.default_rng(20)
        y = rng.standard_normal(64) * 10 + 40
        p = y + rng.standard_normal(64)
        a = 4.0  # dyadic: scaling is exact in floating point
        assert rmse(a * p, a * y) == a * rmse(p, y)
        assert nrmse(a * p, a * y) == nrmse(p, y)
        assert r2(a * p, a * y) == r2(p, y)
        for a in (3.7, 0.11):
            assert rmse(a * p, a * y) == pytest.approx(a * rmse(p, y), rel=1e-12)
            assert nrmse(a * p, a * y) == pytest.approx(nrmse(p, y), rel=1e-12)
            assert r2(a * p, a * y) == pytest.approx(r2(p, y), rel=1e-12)

    def test_degenerate_labels(self):
        flat = np.full(10, 3.0)
        with pytest.raises(DegenerateLabelsError):
            nrmse(flat, flat)
        with pytest.raises(DegenerateLabelsError):
            r2(flat, flat)

    def test_metrics_dict(self):
        rng = np.random.default_rng(21)
        y = rng.standard_normal(30) * 5 + 30
        m = metrics(y + 1.0, y)
        assert set(m) == {"rmse", "nrmse", "r2"}
        assert m["rmse"] == pytest.approx(1.0)


class TestPredictPath:
    def test_recoupling_consistency(self, tiny_split):
        split = tiny_split
        cfg = EncoderConfig()
        flags = AblationFlags(True, False, False)
        main = MainModel(cfg, flags, np.random.default_rng(22))
        samples = split.test[:8]
        preds = predict_angles(main, None, samples, split.masks)
        x = stack_inputs(samples)
        main.eval()
        with no_grad():
            out = main(Tensor(x))
        manual = (out.amplitude.data[:, 0].astype(np.float64) * out.pattern.data.astype(np.float64)
                  + out.amplitude.data[:, 1].astype(np.float64))
        assert np.array_equal(preds, manual)

    def test_baseline_direct_regression(self, tiny_split):
        split = tiny_split
        main = MainModel(EncoderConfig(), BASELINE_FLAGS, np.random.default_rng(23))
        samples = split.test[:8]
        preds = predict_angles(main, None, samples, None)
        main.eval()
        with no_grad():
            out = main(Tensor(stack_inputs(samples)))
        assert np.array_equal(preds, out.angle.data.astype(np.float64))

    def test_mask_filter_requires_mask_and_timing(self, tiny_split):
        split = tiny_split
        main = MainModel(EncoderConfig(), AblationFlags(True, False, True), np.random.default_rng(24))
        with pytest.raises(ValueError):
            predict_angles(main, None, split.test[:4], None)
        with pytest.raises(ValueError):
            predict_angles(main, None, split.test[:4], split.masks)


class TestTraining:
    def test_loss_decreases_after_first_epochs(self, tiny_split):
        split = tiny_split
        flags = AblationFlags(True, False, False)
        cfg = EncoderConfig()
        tc = TrainConfig(batch_size=16, max_epochs=3, val_fraction=0.0, seed=3)
        init = MainModel(cfg, flags, np.random.default_rng(3))  # same init rng chain
        labels = {
            "pattern": np.array([s.pattern_label for s in split.train]),
            "amplitude": np.array([s.amp_label for s in split.train]),
            "angle": np.array([s.angle_label for s in split.train]),
            "mask": np.stack([s.mask_target for s in split.train]),
        }
        init.eval()
        with no_grad():
            out0 = init(Tensor(stack_inputs(split.train)))
        loss0, _ = main_loss(out0, labels, 1.0, flags)
        trained = train_main(split.train, split.masks, flags, cfg, tc)
        trained.eval()
        with no_grad():
            out1 = trained(Tensor(stack_inputs(split.train)))
        loss1, _ = main_loss(out1, labels, 1.0, flags)
        assert loss1.item() < loss0.item()

    def test_deterministic_given_seed(self, tiny_split):
        split = tiny_split
        flags = BASELINE_FLAGS
        tc = TrainConfig(batch_size=16, max_epochs=2, val_fraction=0.0, seed=7)
        a = train_main(split.train[:48], split.masks, flags, EncoderConfig(), tc)
        b = train_main(split.train[:48], split.masks, flags, EncoderConfig(), tc)
        for (ka, va), (kb, vb) in zip(sorted(a.state_dict().items()), sorted(b.state_dict().items())):
            assert ka == kb and np.array_equal(va, vb)

    def test_zero_lr_freezes_parameters(self, tiny_split):
        split = tiny_split
        flags = BASELINE_FLAGS
        cfg = EncoderConfig()
        tc = TrainConfig(batch_size=16, max_epochs=2, val_fraction=0.0, seed=9, base_lr=0.0, min_lr=0.0)
        model = train_main(split.train[:48], split.masks, flags, cfg, tc)
        init_seed = np.random.SeedSequence(9).spawn(4)[0]  # trainer's init stream
        fresh = MainModel(cfg, flags, np.random.default_rng(init_seed))
        for (k, v), (k2, v2) in zip(sorted(model.named_parameters()), sorted(fresh.named_parameters())):
            assert np.array_equal(v.data, v2.data), k

    def test_divergence_guard(self):
        with pytest.raises(NumericDivergenceError):
            _check_finite(float("nan"))
        with pytest.raises(NumericDivergenceError):
            _check_finite(float("inf"))

    def test_gradient_accumulation_steps(self, tiny_split):
        split = tiny_split
        tc = TrainConfig(batch_size=8, accum_steps=2, max_epochs=1, val_fraction=0.0, seed=5)
        model = train_main(split.train[:32], split.masks, BASELINE_FLAGS, EncoderConfig(), tc)
        assert np.all(np.isfinite(model.state_dict()["angle_head.net.layers.1.weight"]))


class TestFinetune:
    def test_runs_fixed_epochs_at_low_lr(self, tiny_split, monkeypatch):
        split = tiny_split
        flags = BASELINE_FLAGS
        cfg = EncoderConfig()
        main = MainModel(cfg, flags, np.random.default_rng(30))
        bundle = ModelBundle(main=main, timing=None, flags=flags, cfg=cfg)
        seen = {"lrs": [], "steps": 0}
        import gaitloom.model.training as tr
        real_adam = tr.Adam

        class SpyAdam(real_adam):
            def __init__(self, params, lr, **kw):
                seen["lrs"].append(lr)
                super().__init__(params, lr=lr, **kw)

            def step(self):
                seen["steps"] += 1
                super().step()

        monkeypatch.setattr(tr, "Adam", SpyAdam)
        samples = split.train[:32]
        tc = TrainConfig(batch_size=16, seed=1)
        finetune(bundle, samples, split.masks, tc)
        assert seen["lrs"] == [0.0005]
        assert seen["steps"] == 10 * 2  # 10 epochs x 2 batches

    def test_default_constants(self):
        tc = TrainConfig()
        assert tc.finetune_lr == 0.0005
        assert tc.finetune_epochs == 10
        assert tc.base_lr == 0.0025
        assert tc.betas == (0.9, 0.99)
        assert tc.schedule_period == 20
        assert tc.min_lr == 1e-8


class TestSystemInvariances:
    def test_offset_shifts_only_sigma_labels(self):
        params = SubjectParams(carrier_noise=False)
        rec0, _ = synth_generate(params, 10.0, seed=55, subject_id="A")
        from gaitloom.dataset import Recording, build_windows
        from gaitloom.activation import ActivationMask
        # dyadic angle grid keeps the offset addition exact in floating point
        rec = Recording(emg=rec0.emg, angle=np.round(rec0.angle * 2**16) / 2**16,
                        subject_id="A")
        peaks, _ = gait.detect_extrema(rec.angle, 10.0, 600)
        cycles = gait.segment_cycles(rec.angle, peaks)
        mask = ActivationMask(np.random.default_rng(0).random((100, 8)), 3)
        ws_a = build_windows(rec, cycles, mask)
        b = 16.0
        rec_b = Recording(emg=rec.emg, angle=rec.angle + b, subject_id="A")
        peaks_b, _ = gait.detect_extrema(rec_b.angle, 10.0, 600)
        cycles_b = gait.segment_cycles(rec_b.angle, peaks_b)
        ws_b = build_windows(rec_b, cycles_b, mask)
        assert len(ws_a) == len(ws_b)
        for sa, sb in zip(ws_a, ws_b):
            assert sb.pattern_label == sa.pattern_label  # bitwise
            assert sb.amp_label[0] == sa.amp_label[0]    # mu unchanged
            assert sb.amp_label[1] == sa.amp_label[1] + b
            assert sb.timing_label == sa.timing_label

    def test_evaluate_report_layout(self, tiny_split):
        split = tiny_split
        flags = BASELINE_FLAGS
        main = MainModel(EncoderConfig(), flags, np.random.default_rng(31))
        bundle = ModelBundle(main=main, timing=None, flags=flags, cfg=EncoderConfig())
        report = evaluate(bundle, split.test, split.masks)
        assert report["n"] == len(split.test)
        assert {"rmse", "nrmse", "r2"} <= set(report["overall"])
        for key in report["groups"]:
            subj, speed = key.split("|")
            assert subj == "S01"


class TestBundleIO:
    def test_save_load_predictions_identical(self, tiny_split, tmp_path):
        split = tiny_split
        cfg = EncoderConfig()
        flags = AblationFlags(True, True, True)
        rng = np.random.default_rng(32)
        bundle = ModelBundle(main=MainModel(cfg, flags, rng),
                             timing=TimingModel(cfg, rng), flags=flags, cfg=cfg)
        p = tmp_path / "bundle.glnn"
        bundle.save(p)
        loaded = ModelBundle.load(p)
        samples = split.test[:6]
        a = predict_angles(bundle.main, bundle.timing, samples, split.masks)
        b = predict_angles(loaded.main, loaded.timing, samples, split.masks)
        assert np.array_equal(a, b)
