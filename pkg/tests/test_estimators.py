import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from noisygen.estimators import DPSGDClassifier, NoisyIterativeClassifier, SGLDClassifier
from noisygen.learning_core import synth_blobs


@pytest.fixture(scope="module")
def blobs():
    d = synth_blobs(200, 4, 3, 6.0, 0)
    labels = np.array(["a", "b", "c"])[d.labels]
    return d.features, labels


class TestEstimators:
    def test_get_set_params_and_clone(self):
        clf = DPSGDClassifier(batch_size=4, iterations=7)
        p = clf.get_params()
        assert p["batch_size"] == 4 and p["algorithm"] == "dp_sgd"
        c = clone(clf).set_params(learning_rate=0.2)
        assert c.learning_rate == 0.2 and clf.learning_rate == 0.1

    def test_fit_predict_string_labels(self, blobs):
        X, y = blobs
        clf = NoisyIterativeClassifier(batch_size=10, iterations=20, learning_rate=0.5).fit(X, y)
        assert set(clf.predict(X)) <= {"a", "b", "c"}
        assert clf.score(X, y) > 0.8
        np.testing.assert_allclose(clf.predict_proba(X).sum(axis=1), 1.0)
        assert clf.n_features_in_ == 4

    def test_deterministic(self, blobs):
        X, y = blobs
        a = DPSGDClassifier(batch_size=5, iterations=10, random_state=3).fit(X, y)
        b = DPSGDClassifier(batch_size=5, iterations=10, random_state=3).fit(X, y)
        assert np.array_equal(a.params_, b.params_)

    def test_bound(self, blobs):
        X, y = blobs
        clf = DPSGDClassifier(batch_size=5, iterations=10).fit(X, y)
        kl = clf.generalization_bound("kl").total
        tv = clf.generalization_bound("tv").total
        assert 0 < tv <= kl

    def test_sgld(self, blobs):
        X, y = blobs
        clf = SGLDClassifier(hidden=(4,), batch_size=20, epochs=2).fit(X, y)
        assert clf.trajectory_.T == 20
        assert clf.generalization_bound().total > 0

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            DPSGDClassifier().predict(np.zeros((1, 2)))

    def test_validation(self, blobs):
        X, y = blobs
        with pytest.raises(ValueError):
            DPSGDClassifier().fit(X, y[:-1])
        with pytest.raises(ValueError):
            DPSGDClassifier().fit(X, np.zeros(len(X)))
        clf = DPSGDClassifier(batch_size=5, iterations=2).fit(X, y)
        with pytest.raises(ValueError):
            clf.predict(np.zeros((2, 3)))

    def test_hold_out(self, blobs):
        X, y = blobs
        clf = DPSGDClassifier(batch_size=5, iterations=3, stats="hold_out")
        clf.fit(X[:100], y[:100], X_holdout=X[100:], y_holdout=y[100:])
        assert clf.trajectory_.stats[0].n_samples == 64
