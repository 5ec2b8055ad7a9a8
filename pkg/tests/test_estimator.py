import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from msva.estimator import MSVARegressor, check_streams, check_videos
from msva.exceptions import BundleError, ConfigurationError, DimensionError


def quick(**kw):
    params = dict(streams="rgb,flow", aperture=2, learning_rate=1e-3, max_epochs=3, random_state=1)
    params.update(kw)
    return MSVARegressor(**params)


def test_get_params_and_clone():
    est = quick(fusion="late")
    params = est.get_params()
    assert params["fusion"] == "late" and params["max_epochs"] == 3
    twin = clone(est)
    assert twin.get_params() == params
    assert not hasattr(twin, "model_")


def test_set_params():
    est = quick().set_params(dropout_rate=0.1)
    assert est.dropout_rate == 0.1


def test_predict_before_fit(small_bundles):
    with pytest.raises(NotFittedError):
        quick().predict(small_bundles)


def test_fit_predict_on_bundles(small_bundles):
    est = quick().fit(small_bundles)
    preds = est.predict(small_bundles)
    assert [len(p) for p in preds] == [b.T for b in small_bundles]
    assert all(np.all((p > 0) & (p < 1)) for p in preds)
    assert est.streams_ == ("rgb", "flow")
    assert len(est.epoch_log_) == 3
    assert 0.0 <= est.score(small_bundles) <= 1.0


def test_fit_on_raw_arrays_matches_bundles(small_bundles):
    X = [{s: b.streams[s] for s in ("rgb", "flow")} for b in small_bundles]
    y = [b.gtscore for b in small_bundles]
    a = quick().fit(X, y).predict(X)
    b = quick().fit(small_bundles).predict(small_bundles)
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_raw_arrays_need_targets(small_bundles):
    X = [{"rgb": b.streams["rgb"], "flow": b.streams["flow"]} for b in small_bundles]
    with pytest.raises(ConfigurationError):
        quick().fit(X)


def test_target_validation(small_bundles):
    bad = [b.gtscore * 2 for b in small_bundles]
    with pytest.raises(ConfigurationError):
        quick().fit(small_bundles, bad)
    with pytest.raises(DimensionError):
        quick().fit(small_bundles, [b.gtscore[:-1] for b in small_bundles])


def test_stream_width_checked_at_predict(small_bundles):
    est = quick().fit(small_bundles)
    with pytest.raises(DimensionError):
        est.predict([{"rgb": np.zeros((5, 3)), "flow": np.zeros((5, 3))}])


def test_check_videos_errors():
    with pytest.raises(ConfigurationError):
        check_videos({"rgb": np.zeros((3, 2))}, ("rgb",))
    with pytest.raises(BundleError):
        check_videos([{"rgb": np.zeros((3, 2))}], ("rgb", "flow"))
    with pytest.raises(BundleError):
        check_videos([{"rgb": np.full((3, 2), np.nan)}], ("rgb",))
    with pytest.raises(DimensionError):
        check_videos([{"rgb": np.zeros((3, 2))}, {"rgb": np.zeros((3, 4))}], ("rgb",))
    with pytest.raises(ConfigurationError):
        check_videos([], ("rgb",))


def test_check_streams():
    assert check_streams("flow,object") == ("object", "flow")
    with pytest.raises(ConfigurationError):
        check_streams("")


def test_single_stream_builds_single_branch(small_bundles):
    est = quick(streams=["object"]).fit(small_bundles)
    assert list(est.model_.branches) == ["object"]


def test_checkpoint_round_trip(small_bundles, tmp_path):
    est = quick().fit(small_bundles)
    est.save(tmp_path / "ck")
    back = MSVARegressor.from_checkpoint(tmp_path / "ck")
    assert back.get_params()["fusion"] == est.fusion
    for p, q in zip(est.predict(small_bundles), back.predict(small_bundles)):
        assert np.array_equal(p, q)
