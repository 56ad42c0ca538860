import numpy as np
import pytest

from tfrcast.baselines import DriftForecast, DriftForecaster, drift_forecasts, naive_drift


class TestNaiveDrift:
    def test_extends_line_through_endpoints(self):
        np.testing.assert_allclose(naive_drift([3.0, 2.9, 2.0], 2), [1.5, 1.0])

    def test_two_points(self):
        np.testing.assert_allclose(naive_drift([2.0, 2.2], 3), [2.4, 2.6, 2.8])

    def test_floor(self):
        np.testing.assert_allclose(naive_drift([1.0, 0.6, 0.2], 3), [0.05, 0.05, 0.05])
        np.testing.assert_allclose(naive_drift([1.0, 0.6, 0.2], 1, floor=0.1), [0.1])

    def test_needs_two_observations(self):
        with pytest.raises(ValueError):
            naive_drift([2.0], 3)

    def test_predict_before_fit(self):
        with pytest.raises(RuntimeError):
            DriftForecaster().predict(3)

    def test_forecast_values_positive(self):
        with pytest.raises(ValueError):
            DriftForecast("AAA", 2000, np.array([1.0, 0.0]))


class TestDriftForecasts:
    def test_from_origin(self, small_panel):
        forecasts = drift_forecasts(small_panel, origin_year=2008, horizon=4)
        assert set(forecasts) == set(small_panel.country_codes)
        for code, forecast in forecasts.items():
            series = small_panel.series[code].before(2009)
            assert forecast.origin_year == 2008
            np.testing.assert_array_equal(forecast.years, [2009, 2010, 2011, 2012])
            np.testing.assert_allclose(forecast.values, naive_drift(series.values, 4))

    def test_from_last_year(self, small_panel):
        forecasts = drift_forecasts(small_panel, origin_year=None, horizon=2)
        for code, forecast in forecasts.items():
            assert forecast.origin_year == small_panel.series[code].last_year

    def test_too_early_origin_skipped(self, small_panel, caplog):
        first = min(s.first_year for s in small_panel.series.values())
        assert drift_forecasts(small_panel, origin_year=first, horizon=2) == {}
        assert "fewer than 2 observations" in caplog.text
