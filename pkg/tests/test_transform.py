import numpy as np
import pytest

from tfrcast.harmonizer import OBSERVED, AnnualSeries, HarmonizedPanel
from tfrcast.nn.rng import RngStream
from tfrcast.transform import (
    GlobalScaler,
    augment_low_fertility,
    country_index_for,
    decoder_tail,
    encoder_input,
    fit_scaler,
    forecast_origins,
    log_standardize,
    make_windows,
    temporal_split,
    window_count,
)


def _series(code, first_year, values):
    values = np.asarray(values, dtype=float)
    return AnnualSeries(code, first_year, values, (OBSERVED,) * len(values))


def _ramp_panel(n_years=40, first_year=1970, codes=("AAA", "BBB")):
    """z-values equal to the year offset, so every window is easy to read."""
    return {c: _series(c, first_year, np.arange(n_years, dtype=float)) for c in codes}


class TestScaler:
    def test_fit_uses_years_before_cutoff(self):
        panel = HarmonizedPanel(
            series={"AAA": _series("AAA", 2000, [1.0, np.e, 1000.0])}
        )
        scaler = fit_scaler(panel, cutoff_year=2002)
        assert scaler.mu == pytest.approx(0.5)
        assert scaler.sigma == pytest.approx(0.5)

    def test_round_trip(self):
        scaler = GlobalScaler(mu=0.7, sigma=0.4)
        tfr = np.array([1.1, 2.1, 6.5])
        np.testing.assert_allclose(scaler.invert(scaler.standardize(tfr)), tfr)
        assert GlobalScaler.from_dict(scaler.to_dict()) == scaler

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            GlobalScaler(0.0, 1.0).standardize([1.0, 0.0])
        with pytest.raises(ValueError):
            GlobalScaler(0.0, 0.0)

    def test_empty_or_constant_training(self):
        panel = HarmonizedPanel(series={"AAA": _series("AAA", 2010, [2.0, 2.0])})
        with pytest.raises(ValueError):
            fit_scaler(panel, cutoff_year=2000)
        with pytest.raises(ValueError):
            fit_scaler(panel, cutoff_year=None)

    def test_log_standardize_keeps_layout(self, small_panel):
        scaler = fit_scaler(small_panel, cutoff_year=None)
        zpanel = log_standardize(small_panel, scaler)
        all_z = np.concatenate([s.values for s in zpanel.values()])
        assert all_z.mean() == pytest.approx(0.0, abs=1e-9)
        assert all_z.std() == pytest.approx(1.0)
        for code, s in small_panel.series.items():
            assert zpanel[code].first_year == s.first_year
            assert zpanel[code].flags == s.flags


class TestWindows:
    def test_count_matches_closed_form(self):
        zpanel = _ramp_panel(40)
        windows = make_windows(zpanel, country_index_for(zpanel), l_enc=5, l_pred=3)
        assert window_count(40, 5, 3) == 27
        assert len(windows) == 2 * 27
        assert windows.encoder.shape == (54, 5, 4)
        assert windows.targets.shape == (54, 3)

    @pytest.mark.parametrize("l_enc", [12, 24])
    def test_count_identity_over_lengths(self, l_enc):
        l_pred = 15
        assert window_count(0, l_enc, l_pred) == 0
        for n in range(1, 201):
            zpanel = {"AAA": _series("AAA", 1900, np.zeros(n))}
            windows = make_windows(zpanel, {"AAA": 0}, l_enc=l_enc, l_pred=l_pred)
            expected = max(0, n - (l_enc + 6) - l_pred + 1)
            assert window_count(n, l_enc, l_pred) == expected
            assert len(windows) == expected

    def test_lag_features_and_targets(self):
        values = np.arange(30, dtype=float)
        enc = encoder_input(values, origin_index=12, l_enc=4)
        # rows 9..12, lags 0, 2, 4, 6
        np.testing.assert_array_equal(enc[-1], [12, 10, 8, 6])
        np.testing.assert_array_equal(enc[0], [9, 7, 5, 3])

        zpanel = {"AAA": _series("AAA", 2000, values)}
        windows = make_windows(zpanel, {"AAA": 0}, l_enc=4, l_pred=2)
        first = windows[0]
        assert first.origin_year == 2009
        np.testing.assert_array_equal(first.target, [10, 11])

    def test_decoder_tail_reads_last_seven(self):
        values = np.arange(30, dtype=float)
        for l_enc in (2, 3, 7):
            enc = encoder_input(values, origin_index=20, l_enc=l_enc)[None]
            np.testing.assert_array_equal(decoder_tail(enc)[0], np.arange(14, 21))

    def test_decoder_tail_needs_two_steps(self):
        with pytest.raises(ValueError):
            decoder_tail(np.zeros((1, 1, 4)))
        with pytest.raises(ValueError):
            make_windows(_ramp_panel(), {"AAA": 0, "BBB": 1}, l_enc=1, l_pred=2)

    def test_short_series_yields_nothing(self):
        zpanel = {"AAA": _series("AAA", 2000, np.arange(8, dtype=float))}
        windows = make_windows(zpanel, {"AAA": 0}, l_enc=4, l_pred=3)
        assert len(windows) == 0
        assert windows.encoder.shape == (0, 4, 4)

    def test_cutoff_is_respected(self):
        zpanel = _ramp_panel(40, first_year=1970)
        windows = make_windows(
            zpanel, country_index_for(zpanel), l_enc=4, l_pred=3, cutoff_year=2000
        )
        assert len(windows) > 0
        assert np.all(windows.origin_years + 3 < 2000)
        # values are year offsets, so no cell may reach offset 30 (year 2000)
        assert windows.targets.max() < 30
        assert windows.encoder.max() < 30


class TestSplit:
    def test_partition(self):
        zpanel = _ramp_panel(45, first_year=1965)
        index = country_index_for(zpanel)
        split = temporal_split(zpanel, index, l_enc=4, l_pred=3, cutoff_year=2000, validation_years=5)

        last_origin = 2000 - 1 - 3
        assert split.validation.origin_years.min() == last_origin - 4
        assert split.validation.origin_years.max() == last_origin
        assert split.train.origin_years.max() == last_origin - 5
        assert len(split.test) == 2
        assert set(split.test.origin_years) == {1999}
        np.testing.assert_array_equal(split.test.tails[0], np.arange(28, 35))

    def test_full_sample(self):
        zpanel = _ramp_panel(30)
        split = temporal_split(zpanel, country_index_for(zpanel), 4, 3, cutoff_year=None)
        assert split.test is None
        assert len(split.train) + len(split.validation) == 2 * window_count(30, 4, 3)

    def test_no_validation(self):
        zpanel = _ramp_panel(30)
        split = temporal_split(
            zpanel, country_index_for(zpanel), 4, 3, cutoff_year=None, validation_years=0
        )
        assert len(split.validation) == 0


class TestAugmentation:
    def _panel(self):
        low = _series("LOW", 1960, np.linspace(3.0, 1.2, 40))
        high = _series("HIGH", 1960, np.linspace(6.0, 3.0, 40))
        return HarmonizedPanel(series={"LOW": low, "HIGH": high})

    def test_duplicates_recent_low_fertility_windows(self):
        panel = self._panel()
        index = country_index_for(panel.country_codes)
        scaler = fit_scaler(panel, cutoff_year=None)
        windows = make_windows(log_standardize(panel, scaler), index, 4, 3)
        out = augment_low_fertility(
            windows, panel, index, RngStream(0), cutoff_year=None, n_recent=5
        )

        assert len(out) == len(windows) + 5
        added = out.subset(out.augmented)
        assert set(added.country_ids) == {index["LOW"]}
        low_origins = windows.origin_years[windows.country_ids == index["LOW"]]
        np.testing.assert_array_equal(np.sort(added.origin_years), np.sort(low_origins)[-5:])
        # originals come first and are untouched
        np.testing.assert_array_equal(out.encoder[: len(windows)], windows.encoder)
        recent = np.flatnonzero(windows.country_ids == index["LOW"])[-5:]
        assert not np.allclose(added.encoder, windows.encoder[recent])

    def test_noise_is_seeded(self):
        panel = self._panel()
        index = country_index_for(panel.country_codes)
        windows = make_windows(log_standardize(panel, fit_scaler(panel, None)), index, 4, 3)
        a = augment_low_fertility(windows, panel, index, RngStream(3), cutoff_year=None)
        b = augment_low_fertility(windows, panel, index, RngStream(3), cutoff_year=None)
        np.testing.assert_array_equal(a.encoder, b.encoder)

    def test_no_qualifying_country(self):
        panel = self._panel()
        index = country_index_for(panel.country_codes)
        windows = make_windows(log_standardize(panel, fit_scaler(panel, None)), index, 4, 3)
        out = augment_low_fertility(
            windows, panel, index, RngStream(0), cutoff_year=None, threshold=1.0
        )
        assert out is windows


class TestOrigins:
    def test_latest_origin_per_country(self):
        zpanel = {
            "AAA": _series("AAA", 1970, np.arange(40, dtype=float)),
            "SHORT": _series("SHORT", 2000, np.arange(5, dtype=float)),
        }
        origins = forecast_origins(zpanel, {"AAA": 0, "SHORT": 1}, l_enc=4)
        assert origins.country_codes == ["AAA"]
        assert list(origins.origin_years) == [2009]
        np.testing.assert_array_equal(origins.tails[0], np.arange(33, 40))

    def test_origin_outside_series(self):
        zpanel = {"AAA": _series("AAA", 1970, np.arange(20, dtype=float))}
        origins = forecast_origins(zpanel, {"AAA": 0}, l_enc=4, origin_year=2020)
        assert len(origins) == 0
        assert origins.encoder.shape == (0, 4, 4)
