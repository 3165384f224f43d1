import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convalarm.data import synth_two_gaussian
from convalarm.evaluation import (
    EvalReport,
    ExperimentSpec,
    ModeResult,
    ScoreSet,
    baseline_recon_score,
    parse_report_csv,
    render_report,
    render_reports,
    roc_auc,
    run_experiment,
)
from convalarm.networks import AlarmConfig, TargetConfig, build_model
from convalarm.training import TrainConfig

from oracles import pairwise_auc


class TestRocAuc:
    def test_perfect_separation(self):
        s = ScoreSet(scores=[0.9, 0.8, 0.1, 0.2], labels=[1, 1, 0, 0])
        assert roc_auc(s) == 1.0

    def test_all_ties_half(self):
        s = ScoreSet(scores=[0.5] * 6, labels=[1, 0, 1, 0, 1, 0])
        assert roc_auc(s) == 0.5

    def test_matches_pairwise_oracle_exactly(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            n = int(rng.integers(10, 200))
            # quantized scores force plenty of ties
            scores = np.round(rng.random(n), 2)
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            got = roc_auc(ScoreSet(scores=scores, labels=labels))
            assert got == pairwise_auc(scores, labels)

    def test_single_class_is_error_not_default(self):
        with pytest.raises(ValueError, match="both classes"):
            roc_auc(ScoreSet(scores=[0.1, 0.2], labels=[1, 1]))

    def test_nan_scores_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            ScoreSet(scores=[0.1, float("nan")], labels=[0, 1])

    def test_complement_without_ties(self):
        rng = np.random.default_rng(1)
        scores = rng.permutation(np.linspace(0.0, 1.0, 40))
        labels = rng.integers(0, 2, 40)
        labels[:2] = [0, 1]
        a = roc_auc(ScoreSet(scores=scores, labels=labels))
        b = roc_auc(ScoreSet(scores=-scores, labels=labels))
        assert a + b == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 60))
    scores = np.round(rng.random(n), 1)
    labels = rng.integers(0, 2, n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    base = roc_auc(ScoreSet(scores=scores, labels=labels))
    for f in (lambda s: 2.0 * s + 1.0, lambda s: s ** 3, np.exp):
        assert roc_auc(ScoreSet(scores=f(scores), labels=labels)) == \
            pytest.approx(base, abs=1e-12)


class TestBaselineReconScore:
    def test_recon_auc_after_target_only_training(self):
        # gamma=0 trains the autoencoder alone (reconstruction masked to
        # typical samples); anomalies then reconstruct poorly
        from convalarm.training import TrainConfig, fit, stratified_split

        ds = synth_two_gaussian(450, 50, d=10, separation=6.0, seed=11)
        split = stratified_split(ds, (8, 1, 1), seed=0)
        bundle = build_model(TargetConfig.for_tabular(10), AlarmConfig(), seed=0)
        fit(bundle, split, TrainConfig(gamma=0.0, epochs=15, seed=0))
        out = baseline_recon_score(bundle, ds, indices=split.test_idx)
        assert roc_auc(out) >= 0.95

    def test_scores_match_direct_loop(self):
        ds = synth_two_gaussian(30, 5, d=6, separation=3.0, seed=2)
        cfg = TargetConfig.for_tabular(6, encoder_channels=(4,), latent_dim=2,
                                       soft_ordering_width=16, soft_ordering_k=2)
        bundle = build_model(cfg, AlarmConfig(conv_channels=(4,),
                                              hidden_dense=(8,)), seed=0)
        from convalarm.networks import forward_with_taps
        from convalarm.tensor import Tensor

        out = baseline_recon_score(bundle, ds)
        xhat, _ = forward_with_taps(bundle, Tensor(ds.features))
        for i in range(len(ds)):
            want = np.mean((ds.features[i] - xhat.data[i]) ** 2)
            assert out.scores[i] == pytest.approx(want, rel=1e-5)
        np.testing.assert_array_equal(out.labels, ds.labels)


def tiny_spec(iterations=2, gamma=1.0, modes=("alarm", "recon", "combined"),
              seed=7):
    ds = synth_two_gaussian(180, 40, d=8, separation=6.0, seed=1)
    return ExperimentSpec(
        dataset=ds,
        target_cfg=TargetConfig.for_tabular(8, encoder_channels=(4,),
                                            latent_dim=4,
                                            soft_ordering_width=16,
                                            soft_ordering_k=2),
        alarm_cfg=AlarmConfig(conv_channels=(8,), hidden_dense=(16,)),
        train_cfg=TrainConfig(gamma=gamma, epochs=4, seed=seed, batch_size=32),
        iterations=iterations, modes=modes)


class TestScoreBatching:
    def test_combined_mode_chunks_match_single_batch(self):
        from convalarm.evaluation import score_batched
        from convalarm.networks import score
        from convalarm.tensor import Tensor

        ds = synth_two_gaussian(30, 10, d=8, separation=4.0, seed=12)
        cfg = TargetConfig.for_tabular(8, encoder_channels=(4,), latent_dim=4,
                                       soft_ordering_width=16, soft_ordering_k=2)
        bundle = build_model(cfg, AlarmConfig(conv_channels=(4,),
                                              hidden_dense=(8,)), seed=1)
        chunked = score_batched(bundle, ds.features, "combined", lam=0.5,
                                 batch=7)
        whole = score(bundle, Tensor(ds.features), "combined", lam=0.5).data
        np.testing.assert_allclose(chunked, whole, rtol=1e-6)


class TestRunExperiment:
    def test_report_structure_and_aggregates(self):
        report = run_experiment(tiny_spec())
        assert report.iterations == 2
        assert [m.mode for m in report.modes] == ["alarm", "recon", "combined"]
        for m in report.modes:
            assert len(m.aucs) == 2
            assert m.mean == pytest.approx(float(np.mean(m.aucs)), abs=1e-15)
            assert m.std == pytest.approx(float(np.std(m.aucs)), abs=1e-15)

    def test_single_iteration_zero_std(self):
        report = run_experiment(tiny_spec(iterations=1))
        for m in report.modes:
            assert m.std == 0.0

    def test_threads_match_serial(self):
        a = run_experiment(tiny_spec(), threads=1)
        b = run_experiment(tiny_spec(), threads=2)
        for ma, mb in zip(a.modes, b.modes):
            assert ma.aucs == mb.aucs

    def test_iteration_failure_names_index(self):
        spec = tiny_spec()
        spec.train_cfg = TrainConfig(gamma=1.0, epochs=1, seed=7,
                                     learning_rate=1e18)
        with np.errstate(all="ignore"):
            with pytest.raises(RuntimeError, match="iteration 0"):
                run_experiment(spec)


class TestRendering:
    def make_report(self, aucs=(0.97,)):
        return EvalReport(
            dataset="synth", normal_class=None, gamma=1.0,
            iterations=len(aucs), base_seed=0, combined_lambda=1.0,
            modes=[ModeResult(mode="alarm", aucs=list(aucs))],
            target_cfg={}, alarm_cfg={}, train_cfg={})

    def test_single_run_markdown_cell(self):
        text = render_report(self.make_report([0.97]), "markdown")
        assert "0.9700 ± 0.0000" in text

    def test_csv_round_trip_exact(self):
        rng = np.random.default_rng(3)
        aucs = list(rng.random(5))
        text = render_report(self.make_report(aucs), "csv")
        rows = parse_report_csv(text)
        assert len(rows) == 1
        assert rows[0]["run_aucs"] == aucs
        assert rows[0]["mean_auc"] == float(np.mean(aucs))
        assert rows[0]["std_auc"] == float(np.std(aucs))

    def test_two_renders_byte_identical(self):
        r = self.make_report([0.5, 0.75])
        assert render_report(r, "csv") == render_report(r, "csv")
        assert render_report(r, "markdown") == render_report(r, "markdown")

    def test_multiple_reports_one_csv(self):
        text = render_reports([self.make_report([0.9]),
                               self.make_report([0.8])], "csv")
        assert len(parse_report_csv(text)) == 2

    def test_unknown_format_rejected(self):
        with pytest.raises(ValueError, match="unknown report format"):
            render_report(self.make_report(), "xml")
