import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mealnet.dataset import DatasetError, SceneConfig, generate_scene
from mealnet.estimator import MealAssessor
from mealnet.validation import check_images, check_rgb, check_scalar

TINY = dict(input_size=64, depth_scales=(8, 16, 32, 64), backbone_widths=(8, 8, 16, 16), depth_channels=8,
            anchor_sizes=(8.0, 16.0, 32.0, 64.0), box_head_width=32, mask_head_width=8, rpn_proposals=200)


@pytest.fixture(scope="module")
def samples():
    return [generate_scene(s, SceneConfig(resolution=64), capture=c) for s in range(2) for c in (0, 2)]


@pytest.fixture(scope="module")
def fitted(samples):
    est = MealAssessor(iterations=6, fpn_channels=8, volume_head_width=16, model_params=TINY)
    return est.fit(samples)


class TestSklearnContract:
    def test_params_round_trip(self):
        est = MealAssessor(iterations=10, seed=3)
        assert est.get_params()["seed"] == 3
        c = clone(est)
        assert c.get_params() == est.get_params() and c is not est
        assert est.set_params(learning_rate=0.01).learning_rate == 0.01

    def test_unfitted(self, samples):
        with pytest.raises(NotFittedError):
            MealAssessor().predict([samples[0].rgb])

    @pytest.mark.parametrize("kw,err", [(dict(iterations=0), ValueError), (dict(iterations=2.5), TypeError),
                                        (dict(learning_rate=0.0), ValueError), (dict(batch_size=True), TypeError),
                                        (dict(model_params={"fpn_channels": 4}), ValueError)])
    def test_invalid_params(self, samples, kw, err):
        with pytest.raises(err):
            MealAssessor(**kw).fit(samples)

    def test_rejects_wrong_size(self):
        with pytest.raises(DatasetError):
            MealAssessor(iterations=2).fit([generate_scene(0, SceneConfig(resolution=64))])


class TestFitted:
    def test_predict(self, fitted, samples):
        out = fitted.predict([s.rgb for s in samples])
        assert len(out) == 4
        assert [d.width for d in out[0].depth_predictions] == [8, 16, 32, 64]
        assert fitted.train_state_.iteration == 6

    def test_single_image_and_samples(self, fitted, samples):
        assert len(fitted.predict(samples[0].rgb)) == 1
        assert len(fitted.predict(samples[0])) == 1
        assert len(fitted.predict_volumes(samples)) == 4

    def test_score_is_fraction(self, fitted, samples):
        assert 0.0 <= fitted.score(samples) <= 1.0

    def test_save_load(self, fitted, samples, tmp_path):
        back = MealAssessor.load(fitted.save(tmp_path / "m.pt"))
        assert back.get_params()["model_params"]["input_size"] == 64
        a = fitted.predict(samples[:1])[0].depth_predictions[-1].values
        b = back.predict(samples[:1])[0].depth_predictions[-1].values
        assert np.array_equal(a, b)

    def test_deterministic_fit(self, fitted, samples):
        again = clone(fitted).fit(samples)
        a = fitted.predict(samples[:1])[0].depth_predictions[-1].values
        assert np.array_equal(a, again.predict(samples[:1])[0].depth_predictions[-1].values)


class TestValidation:
    def test_float_image_converted(self):
        im = check_rgb(np.full((4, 4, 3), 0.5))
        assert im.dtype == np.uint8 and im[0, 0, 0] == 128

    @pytest.mark.parametrize("bad", [np.zeros((4, 4)), np.zeros((4, 4, 4), np.uint8), np.full((2, 2, 3), 2.0),
                                     np.full((2, 2, 3), -1), np.full((2, 2, 3), np.nan)])
    def test_bad_images(self, bad):
        with pytest.raises(ValueError):
            check_rgb(bad)

    def test_size_check(self):
        with pytest.raises(ValueError):
            check_rgb(np.zeros((4, 5, 3), np.uint8), 4)
        with pytest.raises(ValueError):
            check_images([])

    def test_scalar(self):
        assert check_scalar(3, "n", min_val=1) == 3
        with pytest.raises(ValueError):
            check_scalar(5, "n", max_val=4)
        with pytest.raises(TypeError):
            check_scalar("3", "n")
