"""Estimator wrapper: sklearn conventions over the training loop."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import Pipeline

from vhpvae import HierarchicalPriorVAE
from vhpvae.evalmetrics import loglik_iw_per_datum
from vhpvae.pendulum import generate


TINY = dict(hidden=(8, 8), iw_samples=2, epochs=2, batch_size=16,
            learning_rate=1e-3, s_loglik=8, seed=11)


@pytest.fixture(scope="module")
def data():
    images, _ = generate(32, seed=5)
    return np.asarray(images, dtype=np.float64)


@pytest.fixture(scope="module")
def fitted(data):
    return HierarchicalPriorVAE(**TINY).fit(data)


def test_params_round_trip_and_clone():
    est = HierarchicalPriorVAE(kappa=0.3, hidden=(4,), algorithm="geco")
    params = est.get_params()
    assert params["kappa"] == 0.3
    assert params["hidden"] == (4,)
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(nu=2.0)
    assert est.nu == 2.0


def test_fit_sets_state(fitted, data):
    assert fitted.n_features_in_ == data.shape[1]
    assert fitted.model_ is fitted.trainer_.model
    assert len(fitted.history_) == fitted.trainer_.step
    assert fitted.fit(data) is fitted


def test_unfitted_raises(data):
    est = HierarchicalPriorVAE(**TINY)
    with pytest.raises(NotFittedError):
        est.transform(data)
    with pytest.raises(NotFittedError):
        est.sample(2)


def test_transform_is_posterior_mean(fitted, data):
    codes = fitted.transform(data)
    assert codes.shape == (data.shape[0], 2)
    np.testing.assert_array_equal(codes, fitted.model_.encoder(data).mean)


def test_transform_accepts_lists(fitted, data):
    codes = fitted.transform(data[:3].tolist())
    np.testing.assert_allclose(codes, fitted.transform(data[:3]))


def test_feature_count_mismatch(fitted, data):
    with pytest.raises(ValueError, match="features"):
        fitted.transform(data[:, :100])


def test_inverse_transform_decodes(fitted, data):
    codes = fitted.transform(data[:4])
    recon = fitted.inverse_transform(codes)
    assert recon.shape == (4, data.shape[1])
    np.testing.assert_array_equal(recon, fitted.model_.decoder(codes).mean)
    with pytest.raises(ValueError, match="columns"):
        fitted.inverse_transform(np.zeros((2, 3)))


def test_sample_shape_and_determinism(fitted):
    a = fitted.sample(5, random_state=3)
    b = fitted.sample(5, random_state=3)
    c = fitted.sample(5, random_state=4)
    assert a.shape == (5, fitted.n_features_in_)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_score_is_mean_of_score_samples(fitted, data):
    per_datum = fitted.score_samples(data[:6])
    expected = loglik_iw_per_datum(fitted.model_, data[:6], TINY["s_loglik"],
                                   seed=TINY["seed"])
    np.testing.assert_array_equal(per_datum, expected)
    assert fitted.score(data[:6]) == pytest.approx(per_datum.mean())


def test_refit_of_clone_reproduces(fitted, data):
    twin = clone(fitted).fit(data)
    np.testing.assert_array_equal(twin.transform(data),
                                  fitted.transform(data))


def test_batch_size_clamped_to_dataset(data):
    est = HierarchicalPriorVAE(**{**TINY, "batch_size": 4096, "epochs": 1})
    est.fit(data)
    assert len(est.history_) == 1  # one batch per epoch


def test_pipeline_compose(data):
    pipe = Pipeline([("vae", HierarchicalPriorVAE(**TINY))])
    codes = pipe.fit(data).transform(data)
    assert codes.shape == (data.shape[0], 2)
