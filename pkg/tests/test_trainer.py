from dataclasses import replace

import numpy as np
import pytest

from tfrcast.model import QUANTILES, ModelParams
from tfrcast.nn.rng import RngStream
from tfrcast.settings_manager import SettingsManager
from tfrcast.trainer import (
    SearchSpace,
    TinyProblem,
    TrainConfig,
    gradcheck_tiny,
    loss_and_grads,
    pinball,
    random_search,
    teacher_forcing_prob,
    total_loss,
    train_model,
)
from tfrcast.transform import (
    country_index_for,
    fit_scaler,
    log_standardize,
    temporal_split,
)

FAST = TrainConfig(hidden_dim=6, n_layers=1, batch_size=32, d_emb=2, max_epochs=3, learning_rate=5e-3)


@pytest.fixture(scope="module")
def split(small_panel):
    index = country_index_for(small_panel.country_codes)
    zpanel = log_standardize(small_panel, fit_scaler(small_panel, None))
    return temporal_split(zpanel, index, l_enc=4, l_pred=3, cutoff_year=None, validation_years=5)


class TestLosses:
    def test_pinball(self):
        np.testing.assert_allclose(pinball([1.0, 1.0], [0.0, 2.0], 0.9), [0.9, 0.1])
        with pytest.raises(ValueError):
            pinball(1.0, 0.0, 1.0)

    def test_total_loss(self):
        targets = np.array([[1.0, 2.0]])
        perfect = np.repeat(targets[:, :, None], len(QUANTILES), axis=2)
        assert total_loss(targets, perfect) == 0.0
        shifted = perfect + 1.0
        # over-prediction by 1 costs (1 - tau) per level and step
        expected = 2 * sum(1 - t for t in QUANTILES)
        assert total_loss(targets, shifted) == pytest.approx(expected)
        assert total_loss(targets[0], shifted[0]) == pytest.approx(expected)

    def test_total_loss_shapes(self):
        with pytest.raises(ValueError):
            total_loss(np.zeros((2, 3)), np.zeros((2, 3, 4)))
        assert np.isnan(total_loss(np.zeros((0, 3)), np.zeros((0, 3, 5))))

    @pytest.mark.parametrize(
        "epoch, decay, expected", [(0, 20, 1.0), (10, 20, 0.5), (25, 20, 0.0), (3, 0, 0.0)]
    )
    def test_teacher_forcing_schedule(self, epoch, decay, expected):
        assert teacher_forcing_prob(epoch, decay) == pytest.approx(expected)


class TestGradients:
    def test_every_parameter_gets_a_gradient(self, split):
        config = FAST.model_config(6, 4, 3)
        named = ModelParams.initialize(config, RngStream(0)).named_arrays()
        w = split.train
        loss, grads = loss_and_grads(named, w.encoder[:8], w.country_ids[:8], w.targets[:8])
        assert np.isfinite(loss)
        assert set(grads) == set(named)
        for name, g in grads.items():
            assert g.shape == named[name].shape

    def test_tiny_gradcheck_passes(self):
        report = gradcheck_tiny(seed=0)
        assert report.passed, report.summary()
        assert report.checked > 0
        assert report.max_rel_error < 1e-4

    def test_tiny_problem_defaults(self):
        problem = TinyProblem()
        assert (problem.hidden_dim, problem.n_layers, problem.l_enc, problem.l_pred) == (8, 2, 6, 3)


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(patience=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)

    def test_config_from_settings(self):
        config = TrainConfig.from_settings(SettingsManager().get_all_settings())
        assert config == TrainConfig()

    def test_deterministic(self, split):
        a = train_model(FAST, split.train, split.validation, n_countries=6)
        b = train_model(FAST, split.train, split.validation, n_countries=6)
        frame_a, frame_b = a.history.to_frame(), b.history.to_frame()
        assert frame_a.equals(frame_b)
        for name, value in a.params.named_arrays().items():
            np.testing.assert_array_equal(value, b.params.named_arrays()[name])

    def test_seed_changes_result(self, split):
        a = train_model(FAST, split.train, split.validation, n_countries=6)
        b = train_model(replace(FAST, seed=1), split.train, split.validation, n_countries=6)
        assert not np.array_equal(a.params.embeddings, b.params.embeddings)

    def test_history_and_schedule(self, split, tmp_path):
        config = replace(FAST, max_epochs=4, lr_step_size=2, tf_decay_epochs=2)
        records = []
        result = train_model(config, split.train, split.validation, 6, progress_callback=records.append)
        frame = result.history.to_frame()
        assert list(frame.columns) == ["epoch", "train_loss", "val_loss", "lr", "tf_prob"]
        assert len(records) == len(frame) == 4
        np.testing.assert_allclose(frame["lr"], [5e-3, 5e-3, 2.5e-3, 2.5e-3])
        np.testing.assert_allclose(frame["tf_prob"], [1.0, 0.5, 0.0, 0.0])
        assert result.best_val_loss == pytest.approx(frame["val_loss"].min())

        path = tmp_path / "history.csv"
        result.history.write(str(path), "m1")
        assert path.read_text().startswith("# manifest=m1\nepoch,train_loss")

    def test_early_stop_needs_strict_improvement(self, split):
        # lr 0 freezes the weights, so the validation loss never improves
        config = replace(FAST, learning_rate=0.0, patience=2, max_epochs=10)
        result = train_model(config, split.train, split.validation, 6)
        assert result.stopped_early
        assert result.best_epoch == 0
        assert len(result.history) == 3

    def test_no_validation_uses_train_loss(self, split):
        empty = split.validation.subset(np.zeros(len(split.validation), dtype=bool))
        result = train_model(replace(FAST, max_epochs=2), split.train, empty, 6)
        frame = result.history.to_frame()
        np.testing.assert_allclose(frame["val_loss"], frame["train_loss"])

    def test_empty_training_set(self, split):
        empty = split.train.subset(np.zeros(len(split.train), dtype=bool))
        with pytest.raises(ValueError):
            train_model(FAST, empty, split.validation, 6)


class TestRandomSearch:
    def test_picks_minimum(self):
        space = SearchSpace()
        result = random_search(FAST, lambda c: abs(np.log10(c.learning_rate) + 3), 8, seed=1, space=space)
        scores = [score for _, score in result.trials]
        assert len(result.trials) == 8
        assert result.best_index == int(np.argmin(scores))
        for config, _ in result.trials:
            assert 1e-4 <= config.learning_rate <= 1e-2
            assert config.hidden_dim in space.hidden_choices
            assert config.n_layers in space.layer_choices
            assert config.batch_size in space.batch_choices
            assert config.max_epochs == FAST.max_epochs

    def test_ties_go_to_first(self):
        result = random_search(FAST, lambda c: 1.0, 4, seed=0)
        assert result.best_index == 0

    def test_seeded(self):
        a = random_search(FAST, lambda c: c.learning_rate, 5, seed=9)
        b = random_search(FAST, lambda c: c.learning_rate, 5, seed=9)
        assert [c for c, _ in a.trials] == [c for c, _ in b.trials]

    def test_budget(self):
        with pytest.raises(ValueError):
            random_search(FAST, lambda c: 0.0, 0, seed=0)
