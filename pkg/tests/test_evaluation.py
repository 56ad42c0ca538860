import numpy as np
import pytest

from conftest import CUTOFF, TINY_L_PRED
from tfrcast.baselines import DRIFT_MODEL, naive_drift
from tfrcast.ensemble import load_ensemble
from tfrcast.evaluation import ACTUAL_COLUMNS, run_backtest
from tfrcast.manifest import read_csv
from tfrcast.metrics import METRICS
from tfrcast.projection import NEURAL_MODEL, point_records, read_forecasts


@pytest.fixture(scope="module")
def ensemble(tiny_ensemble_dir):
    return load_ensemble(tiny_ensemble_dir)


def _drift_comparator(panel, model, skip=()):
    records = []
    for code in panel.country_codes:
        if code in skip:
            continue
        training = panel.series[code].before(CUTOFF).values
        records.extend(point_records(code, CUTOFF, naive_drift(training, TINY_L_PRED) * 1.01, model))
    return records


class TestBacktest:
    def test_neural_and_drift(self, ensemble, small_panel):
        result = run_backtest(ensemble, small_panel, CUTOFF)
        assert result.cutoff_year == CUTOFF
        assert len(result.scores_for(NEURAL_MODEL)) == 6
        assert len(result.scores_for(DRIFT_MODEL)) == 6
        assert len(result.actuals) == 6 * TINY_L_PRED
        assert list(result.actuals.columns) == ACTUAL_COLUMNS
        assert set(result.actuals["year"]) == {2009, 2010, 2011}
        for s in result.scores:
            for metric in METRICS:
                assert np.isfinite(s.value(metric))
        assert {s.model for s in result.report.summaries} == {NEURAL_MODEL, DRIFT_MODEL}

    def test_drift_scores_match_direct_computation(self, ensemble, small_panel):
        result = run_backtest(ensemble, small_panel, CUTOFF)
        code = small_panel.country_codes[0]
        series = small_panel.series[code]
        forecast = naive_drift(series.before(CUTOFF).values, TINY_L_PRED)
        actual = np.array([series.value_at(y) for y in range(CUTOFF, CUTOFF + TINY_L_PRED)])
        drift = next(s for s in result.scores_for(DRIFT_MODEL) if s.country == code)
        assert drift.rmse == pytest.approx(np.sqrt(np.mean((actual - forecast) ** 2)))
        assert drift.mpiw90 == 0.0

    def test_comparators_scored(self, ensemble, small_panel):
        skip = {small_panel.country_codes[0]}
        comparators = {"wpp": _drift_comparator(small_panel, "wpp", skip=skip)}
        result = run_backtest(ensemble, small_panel, CUTOFF, comparators)
        assert len(result.scores_for("wpp")) == 5
        assert {s.model for s in result.report.summaries} == {NEURAL_MODEL, DRIFT_MODEL, "wpp"}
        assert result.report.countries["rmse"] == sorted(set(small_panel.country_codes) - skip)

    def test_write(self, ensemble, small_panel, tmp_path):
        result = run_backtest(ensemble, small_panel, CUTOFF)
        paths = result.write(str(tmp_path), "mid")
        assert set(paths) == {"scores", "summary", "heldout_forecasts", "actuals"}
        for path in paths.values():
            with open(path) as f:
                assert f.readline() == "# manifest=mid\n"
        heldout = read_forecasts(paths["heldout_forecasts"])
        assert {r.model for r in heldout} == {NEURAL_MODEL, DRIFT_MODEL}
        assert len(read_csv(paths["scores"])) == 12

    def test_deterministic(self, ensemble, small_panel, tmp_path):
        a = run_backtest(ensemble, small_panel, CUTOFF).write(str(tmp_path / "a"), "m")
        b = run_backtest(ensemble, small_panel, CUTOFF).write(str(tmp_path / "b"), "m")
        for name in a:
            with open(a[name], "rb") as fa, open(b[name], "rb") as fb:
                assert fa.read() == fb.read()

    def test_nothing_to_evaluate(self, ensemble, small_panel):
        with pytest.raises(ValueError):
            run_backtest(ensemble, small_panel, cutoff_year=2030)
