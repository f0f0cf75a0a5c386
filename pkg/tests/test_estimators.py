import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import make_classification
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from mapnet.estimators import MappingNetworkClassifier, MappingNetworkRegressor, WeightManifoldPCA


@pytest.fixture(scope="module")
def clf_data():
    return make_classification(n_samples=300, n_features=6, n_informative=4, n_classes=3,
                               n_clusters_per_class=1, class_sep=2.0, random_state=0)


def test_classifier_fits_and_counts(clf_data):
    X, y = clf_data
    clf = MappingNetworkClassifier(hidden_layer_sizes=(16,), latent_dim=12, epochs=30, learning_rate=0.1)
    clf.fit(X, y)
    assert clf.score(X, y) > 0.85
    assert clf.n_trainable_ == 12 + 3
    proba = clf.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-6)
    assert set(clf.predict(X)) <= set(clf.classes_)


def test_string_labels_and_clone(clf_data):
    X, y = clf_data
    names = np.array(["a", "b", "c"])[y]
    clf = MappingNetworkClassifier(hidden_layer_sizes=(8,), latent_dim=8, epochs=2)
    clf.fit(X, names)
    assert clf.predict(X).dtype == names.dtype
    twin = clone(clf)
    assert twin.get_params() == clf.get_params() and not hasattr(twin, "model_")


def test_same_seed_same_predictions(clf_data):
    X, y = clf_data
    a = MappingNetworkClassifier(latent_dim=8, epochs=3, random_state=4).fit(X, y)
    b = MappingNetworkClassifier(latent_dim=8, epochs=3, random_state=4).fit(X, y)
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))


def test_pipeline_cross_val(clf_data):
    X, y = clf_data
    pipe = make_pipeline(StandardScaler(), MappingNetworkClassifier(latent_dim=8, epochs=5))
    scores = cross_val_score(pipe, X, y, cv=3)
    assert scores.shape == (3,)


def test_not_fitted_and_feature_check(clf_data):
    X, y = clf_data
    clf = MappingNetworkClassifier(latent_dim=8, epochs=1)
    with pytest.raises(NotFittedError):
        clf.predict(X)
    clf.fit(X, y)
    with pytest.raises(ValueError, match="features"):
        clf.predict(X[:, :3])


def test_baseline_flag(clf_data):
    X, y = clf_data
    clf = MappingNetworkClassifier(hidden_layer_sizes=(4,), baseline=True, epochs=1).fit(X, y)
    assert clf.n_trainable_ == 6 * 4 + 4 + 4 * 3 + 3


def test_regressor_shapes():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (400, 3))
    y = np.sin(2 * X[:, 0]) + X[:, 1] ** 2
    reg = MappingNetworkRegressor(hidden_layer_sizes=(32,), latent_dim=16, epochs=60, learning_rate=0.03)
    reg.fit(X, y)
    pred = reg.predict(X)
    assert pred.shape == (400,)
    assert reg.score(X, y) > 0.5
    multi = MappingNetworkRegressor(latent_dim=8, epochs=1).fit(X, np.c_[y, -y])
    assert multi.predict(X).shape == (400, 2)


def test_manifold_pca_transform():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((12, 40))
    pca = WeightManifoldPCA(n_components=3)
    emb = pca.fit_transform(X)
    np.testing.assert_allclose(pca.transform(X), emb, atol=1e-10)
    assert emb.shape == (12, 3) and np.all(np.diff(pca.explained_variance_ratio_) <= 0)
