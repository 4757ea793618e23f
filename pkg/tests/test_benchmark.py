import numpy as np
import pytest

from moldxai.benchmark import (BenchmarkReport, ExperimentConfig, emit_report, format_tables,
                               load_report, mean_std, measure_inference, restrict, run_experiment)
from moldxai.data import generate_cycles
from moldxai.errors import ConfigError, DataError
from moldxai.lstm import TrainConfig, init_params

TINY = TrainConfig(hidden_sizes=(4, 3, 3), epochs=2, batch_size=8, seed=0)


@pytest.fixture(scope="module")
def tiny_data():
    ds = generate_cycles(40, 16, F=6, causal=(0, 1), seed=3)
    X, y = ds.X, ds.y
    return X[:28], y[:28], X[28:], y[28:]


def _experiment(data, sets=None, seeds=(0, 1), **kw):
    sets = sets or {"all": list(range(6)), "three": [0, 1, 4]}
    cfg = ExperimentConfig(sets, TINY, list(seeds), timing_repeats=2, timing_batch=16, **kw)
    return run_experiment(*data, cfg)


class TestMeanStd:
    def test_population_std(self):
        m, s = mean_std([1.0, 3.0])
        assert m == 2.0 and s == 1.0

    def test_single_run_has_zero_std(self):
        assert mean_std([0.7]) == (0.7, 0.0)

    def test_empty(self):
        assert mean_std([]) == (None, None)


class TestMeasureInference:
    def test_single_repeat_positive(self):
        model = init_params(range(3), (4, 3, 3), seed=0)
        mean, times = measure_inference(model, np.zeros((5, 7, 3)), repeats=1, warmup=0)
        assert len(times) == 1 and mean == times[0] > 0

    @pytest.mark.parametrize("kw", [{"repeats": 0}, {"X": np.zeros((0, 4, 3))}])
    def test_rejects(self, kw):
        model = init_params(range(3), (4, 3, 3), seed=0)
        X = kw.pop("X", np.zeros((2, 4, 3)))
        with pytest.raises(ConfigError):
            measure_inference(model, X, **kw)


class TestExperiment:
    def test_structure(self, tiny_data):
        report = _experiment(tiny_data)
        assert [s.name for s in report.sets] == ["all", "three"]
        for s in report.sets:
            assert s.complete and len(s.runs) == 2
            fields = (s.accuracy_mean, s.accuracy_std, s.f1_mean, s.f1_std, s.inference_mean)
            assert all(v is not None and np.isfinite(v) for v in fields)
            assert all(len(r.inference_times) == 2 and min(r.inference_times) > 0 for r in s.runs)

    def test_statistics_recomputed_from_runs(self, tiny_data):
        report = _experiment(tiny_data, seeds=(0, 1, 2))
        for s in report.sets:
            acc = np.array([r.accuracy for r in s.runs])
            f1 = np.array([r.f1 for r in s.runs])
            assert abs(s.accuracy_mean - acc.mean()) <= 1e-12
            assert abs(s.accuracy_std - np.sqrt(np.mean((acc - acc.mean()) ** 2))) <= 1e-12
            assert abs(s.f1_std - f1.std()) <= 1e-12
            assert abs(s.inference_mean - np.mean([r.inference_mean for r in s.runs])) <= 1e-12

    def test_single_run_std_zero(self, tiny_data):
        report = _experiment(tiny_data, seeds=(4,))
        assert all(s.accuracy_std == 0.0 and s.f1_std == 0.0 for s in report.sets)

    def test_deterministic_metrics(self, tiny_data):
        a, b = _experiment(tiny_data), _experiment(tiny_data)
        assert a.metric_view() == b.metric_view()

    def test_excluded_channels_never_read(self, tiny_data):
        Xtr, ytr, Xva, yva = tiny_data
        sets = {"three": [0, 1, 4]}
        clean = _experiment(tiny_data, sets)
        poisoned = [c for c in range(6) if c not in sets["three"]]
        Xtr2, Xva2 = Xtr.copy(), Xva.copy()
        Xtr2[..., poisoned] = np.nan
        Xva2[..., poisoned] = np.nan
        dirty = _experiment((Xtr2, ytr, Xva2, yva), sets)
        assert clean.metric_view() == dirty.metric_view()

    def test_failed_run_is_recorded(self, tiny_data):
        from moldxai.lstm import train

        model, _ = train(restrict(tiny_data[0], [0, 1]), tiny_data[1], restrict(tiny_data[2], [0, 1]),
                         tiny_data[3], TINY, feature_subset=[0, 1])
        # a pretrained model on the wrong channels makes that one run fail
        cfg = ExperimentConfig({"three": [0, 1, 4]}, TINY, [0, 1], timing_repeats=1)
        report = run_experiment(*tiny_data, cfg, pretrained={("three", 1): model})
        s, = report.sets
        assert not s.complete
        assert s.runs[0].error is None and "ConfigError" in s.runs[1].error
        assert s.accuracy_mean == s.runs[0].accuracy and s.accuracy_std == 0.0
        assert "INCOMPLETE" in format_tables(report)

    @pytest.mark.parametrize("kw", [{"seeds": []}, {"timing_repeats": 0},
                                    {"feature_sets": {"none": []}}])
    def test_config_validation(self, kw):
        base = {"feature_sets": {"a": [0]}, "train_config": TINY}
        with pytest.raises(ConfigError):
            ExperimentConfig(**{**base, **kw})


class TestReportFiles:
    def test_round_trip(self, tiny_data, tmp_path):
        report = _experiment(tiny_data, seeds=(0,))
        assert emit_report(report, tmp_path)
        back = load_report(tmp_path)
        assert back.metric_view() == report.metric_view()
        assert back.sets[0].runs[0].inference_times == report.sets[0].runs[0].inference_times
        assert {p.name for p in tmp_path.iterdir()} == {"report.json", "tables.txt", "runs.csv"}
        rows = (tmp_path / "runs.csv").read_text().splitlines()
        assert len(rows) == 1 + 2

    def test_empty_experiment_emits_headers(self, tmp_path):
        report = BenchmarkReport([], "abc")
        assert emit_report(report, tmp_path) is False
        text = (tmp_path / "tables.txt").read_text()
        assert "Val. Acc." in text and "Mean inference Time (s)" in text
        assert (tmp_path / "runs.csv").read_text().splitlines()[0].startswith("set,")

    def test_missing_report(self, tmp_path):
        with pytest.raises(DataError):
            load_report(tmp_path)
