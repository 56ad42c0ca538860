import numpy as np
import pytest

from tfrcast.ensemble import train_ensemble
from tfrcast.harmonizer import harmonize
from tfrcast.synth import SynthConfig, synth_panel
from tfrcast.trainer import TrainConfig
from tfrcast.transform import country_index_for, fit_scaler, log_standardize, temporal_split

TINY_TRAIN = TrainConfig(
    hidden_dim=6, n_layers=1, batch_size=32, d_emb=2, max_epochs=2, learning_rate=5e-3
)
TINY_L_ENC, TINY_L_PRED = 4, 3
CUTOFF = 2009


@pytest.fixture(autouse=True)
def isolated_config(tmp_path, monkeypatch):
    """Keep a user's ~/.config/tfrcast/settings.json out of every test."""
    monkeypatch.setenv("XDG_CONFIG_HOME", str(tmp_path / "xdg"))
    monkeypatch.setenv("APPDATA", str(tmp_path / "appdata"))


@pytest.fixture(scope="session")
def synth_reports():
    reports, curves = synth_panel(SynthConfig(n_countries=6, n_years=50), seed=3)
    return reports, curves


@pytest.fixture(scope="session")
def small_panel(synth_reports):
    reports, _ = synth_reports
    return harmonize(reports)


@pytest.fixture(scope="session")
def tiny_ensemble_dir(small_panel, tmp_path_factory):
    """Two small members trained on years before CUTOFF."""
    out = tmp_path_factory.mktemp("ensemble")
    index = country_index_for(small_panel.country_codes)
    scaler = fit_scaler(small_panel, CUTOFF)
    split = temporal_split(
        log_standardize(small_panel, scaler), index, TINY_L_ENC, TINY_L_PRED, CUTOFF, 5
    )
    train_ensemble(
        TINY_TRAIN,
        split.train,
        split.validation,
        scaler,
        small_panel.country_codes,
        str(out),
        n_members=2,
        manifest_id="fixture",
    )
    return str(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
