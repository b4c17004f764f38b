import json

import pytest
import numpy as np
import pandas as pd
from numpy.testing import assert_array_equal

from multimodal_gpc.config import PriorConfig, SamplerConfig
from multimodal_gpc.data import NormalizationStats
from multimodal_gpc.diagnostics import summarize
from multimodal_gpc.errors import EmptyTrace
from multimodal_gpc.evaluation import (ConfigurationResult, EvaluationReport, FoldResult, accuracy_reject_curve,
                                       weight_posterior_summary)
from multimodal_gpc.export import (TRACE_METADATA, prediction_frame, read_traces, write_diagnostics,
                                   write_evaluation, write_predictions, write_traces)
from multimodal_gpc.prediction import PredictiveDistribution

from conftest import make_trace


@pytest.fixture
def prediction():
    probs = np.array([[0.7, 0.3], [0.45, 0.55], [0.5, 0.5]])
    return PredictiveDistribution(probs, np.full((3, 2), 0.01), n1=10, n2=4, subject_ids=["s1", "s2", "s3"])


class TestTraces:
    def test_write_then_read(self, tmp_path, traces):
        sampler = SamplerConfig(scheme="e")
        normalization = {"gm": NormalizationStats(np.array([0.1, 0.2]), np.array([1.0, 2.0]))}
        write_traces(tmp_path, traces, sampler, PriorConfig(), ["gm", "wm"], ["A", "B"], 4,
                     manifest="data/manifest.json", normalization=normalization)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["chain_0.csv", "chain_1.csv", "chain_2.csv",
                                                             TRACE_METADATA]

        loaded, metadata = read_traces(tmp_path)
        assert [trace.chain_id for trace in loaded] == [0, 1, 2]
        for ours, theirs in zip(loaded, traces):
            assert_array_equal(ours.theta, theirs.theta)
            assert_array_equal(ours.f, theirs.f)
            assert_array_equal(ours.iterations, theirs.iterations)
            assert_array_equal(ours.accepted["latent"], theirs.accepted["latent"])
            assert ours.seed_keys == theirs.seed_keys
            assert ours.divergences == 1
        assert metadata["sampler"] == sampler
        assert metadata["prior"] == PriorConfig()
        assert metadata["sampler_label"] == "(e)"
        assert metadata["modality_ids"] == ["gm", "wm"]
        assert metadata["normalization"]["gm"]["std"] == [1.0, 2.0]
        assert metadata["manifest"].endswith("manifest.json")

    def test_trace_columns(self, tmp_path):
        trace = make_trace(alpha=True, n_samples=5)
        write_traces(tmp_path, [trace], SamplerConfig(), PriorConfig(variant="dirichlet"), ["a", "b"],
                     ["x", "y"], 4)
        columns = list(pd.read_csv(tmp_path / "chain_0.csv").columns)
        assert columns[:5] == ["iteration", "accepted_latent", "accepted_theta", "log_joint", "theta[0,0]"]
        assert "alpha" in columns
        assert columns[-1] == "f[1,3]"

    def test_missing_chain_file(self, tmp_path, traces):
        write_traces(tmp_path, traces, SamplerConfig(), PriorConfig(), ["gm", "wm"], ["A", "B"], 4)
        (tmp_path / "chain_1.csv").unlink()
        with pytest.raises(FileNotFoundError):
            read_traces(tmp_path)

    def test_no_chains(self, tmp_path):
        write_traces(tmp_path, [], SamplerConfig(), PriorConfig(), ["gm"], ["A", "B"], 4)
        with pytest.raises(EmptyTrace):
            read_traces(tmp_path)


class TestDiagnosticsFiles:
    def test_files(self, tmp_path, traces):
        paths = write_diagnostics(tmp_path, summarize(traces, sampler="(e)"), traces)
        assert set(paths) == {"csv", "json", "text", "rhat_evolution"}
        saved = json.loads(paths["json"].read_text())
        assert saved["rhat_variant"] == "split"
        assert saved["n_chains"] == 3
        assert paths["text"].read_text().strip().endswith("converged: true")
        assert len(pd.read_csv(paths["csv"])) == 12

    def test_single_chain_has_no_evolution(self, tmp_path):
        trace = make_trace()
        paths = write_diagnostics(tmp_path, summarize([trace]), [trace])
        assert "rhat_evolution" not in paths
        assert json.loads(paths["json"].read_text())["converged"] is False


class TestPredictionFiles:
    def test_frame(self, prediction):
        df = prediction_frame(prediction, ["A", "B"], threshold=0.6)
        assert list(df.columns) == ["subject_id", "p_A", "p_B", "se_A", "se_B", "decision", "rejected"]
        assert list(df["decision"]) == ["A", "", ""]
        assert list(df["rejected"]) == [False, True, True]

    def test_tie_goes_to_first_class(self, prediction):
        df = prediction_frame(prediction, ["A", "B"])
        assert list(df["decision"]) == ["A", "B", "A"]

    def test_write(self, tmp_path, prediction):
        path = write_predictions(tmp_path, prediction, ["A", "B"], threshold=0.5)
        df = pd.read_csv(path, keep_default_na=False)
        assert list(df["subject_id"]) == ["s1", "s2", "s3"]
        assert list(df["decision"]) == ["A", "B", "A"]


class TestEvaluationFiles:
    def test_files(self, tmp_path, prediction):
        labels = np.array([0, 1, 1])
        weighted = ConfigurationResult(
            "Weighted sum", ["gm", "wm"],
            folds=[FoldResult(0, 3, 0.75, 0.67, 0.2, True)],
            labels=labels, prediction=prediction,
            metrics={"balanced_accuracy": 0.75, "brier": 0.2},
            curve=accuracy_reject_curve(prediction.probs, labels),
            weights=weight_posterior_summary([make_trace()], ["A", "B"], ["gm", "wm"]))
        failed = ConfigurationResult("Single source: gm", ["gm"], failed=True, error="chain failure in fold 0")
        report = EvaluationReport([weighted, failed], ["A", "B"], k_folds=2, reject_threshold=0.5, sampler="(e)")

        paths = write_evaluation(tmp_path, report)
        assert set(paths) == {"json", "text", "curve_weighted_sum", "weights", "predictions"}
        assert len(pd.read_csv(tmp_path / "reject_curve_weighted_sum.csv")) == 101
        saved = json.loads(paths["json"].read_text())
        assert saved["complete"] is False
        assert [c["name"] for c in saved["configurations"]] == ["Weighted sum", "Single source: gm"]
        assert "failed: chain failure in fold 0" in paths["text"].read_text()
        predictions = pd.read_csv(paths["predictions"])
        assert list(predictions["label"]) == ["A", "B", "B"]
        assert set(pd.read_csv(paths["weights"])["configuration"]) == {"Weighted sum"}
