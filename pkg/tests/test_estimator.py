import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import MinMaxScaler

from deep_pursuit import DeepPursuitClassifier
from deep_pursuit.data import synth_dataset


@pytest.fixture
def blobs():
    ds = synth_dataset(3, 6, 120, seed=2, margin=5.0, noise=0.3)
    names = np.array(["cat", "dog", "emu"])
    return ds.images, names[ds.labels]


def test_fit_predict_with_string_labels(blobs):
    X, y = blobs
    clf = DeepPursuitClassifier(hidden=(8,), T=2, epochs=30, lr=0.1).fit(X, y)
    assert set(clf.classes_) == {"cat", "dog", "emu"}
    assert clf.score(X, y) >= 0.9
    proba = clf.predict_proba(X[:5])
    assert proba.shape == (5, 3) and np.allclose(proba.sum(axis=1), 1)
    assert clf.transform(X[:4]).shape == (4, 8)
    assert 0 <= clf.robust_score(X, y, epsilon=0.05) <= clf.score(X, y)


def test_not_fitted_and_input_validation(blobs):
    X, y = blobs
    clf = DeepPursuitClassifier(epochs=1)
    with pytest.raises(NotFittedError):
        clf.predict(X)
    with pytest.raises(ValueError):
        clf.fit(X, y[:-1])
    with pytest.raises(ValueError):
        clf.fit(np.where(np.arange(X.size).reshape(X.shape) == 0, np.nan, X), y)
    with pytest.raises(ValueError, match="two classes"):
        clf.fit(X, np.zeros(len(X)))
    clf.fit(X, y)
    with pytest.raises(ValueError, match="features"):
        clf.predict(X[:, :3])
    with pytest.raises(ValueError, match="not seen"):
        clf.robust_score(X[:2], ["cat", "yak"])


def test_clone_and_params():
    clf = DeepPursuitClassifier(T=7, residual=True, hidden=(4, 4))
    twin = clone(clf)
    assert twin.get_params() == clf.get_params()
    assert twin.set_params(T=3).T == 3


def test_pipeline_cross_validation(blobs):
    X, y = blobs
    pipe = make_pipeline(MinMaxScaler(), DeepPursuitClassifier(hidden=(6, 6), residual=True, T=2,
                                                               epochs=15, lr=0.1, norm="bn"))
    scores = cross_val_score(pipe, X, y, cv=3)
    assert scores.mean() > 0.6


def test_image_input_shape():
    ds = synth_dataset(2, 48, 40, seed=1, shape=(3, 4, 4))
    X = ds.images.reshape(40, -1)
    clf = DeepPursuitClassifier(input_shape=(3, 4, 4), width=3, depth=1, T=1, epochs=2).fit(X, ds.labels)
    assert clf.predict(X).shape == (40,)
    with pytest.raises(ValueError, match="input_shape"):
        DeepPursuitClassifier(input_shape=(3, 5, 5), width=3).fit(X, ds.labels)


def test_same_seed_same_model(blobs):
    X, y = blobs
    a = DeepPursuitClassifier(hidden=(5,), T=2, epochs=2, random_state=4).fit(X, y)
    b = DeepPursuitClassifier(hidden=(5,), T=2, epochs=2, random_state=4).fit(X, y)
    assert np.array_equal(a.decision_function(X), b.decision_function(X))
