import numpy as np
import pytest
from sklearn.base import clone

from cidacap.estimators import CIDAFeatureExtractor, MeshedCaptionModel
from cidacap.synthdata import SOURCE, TRAIN, SceneSpec, build_splits
from cidacap.validation import check_captions, check_images, check_labels, check_regions


@pytest.fixture(scope="module")
def images():
    m = build_splits(SceneSpec(image_size=32, seed=3),
                     counts={"train": 6, "val": 1, "test": 2, "target_pool": 2, "target_test": 1}, k_shot=1)
    tr = m.select(SOURCE, TRAIN)
    X = np.stack([s.image for s in tr])
    y = np.array([s.label for s in tr])
    return X, y, [s.caption for s in tr]


def small(**kw):
    params = dict(stages=((8, 1), (16, 1)), image_size=32, proj_dim=8, epochs=2, finetune_epochs=1,
                  batch_size=8, lr=0.05, memory_budget=2)
    params.update(kw)
    return CIDAFeatureExtractor(**params)


def test_get_params_and_clone():
    est = small(mode="supcon", cbs=True)
    p = est.get_params()
    assert p["mode"] == "supcon" and p["cbs"] and p["memory_budget"] == 2
    twin = clone(est)
    assert twin.get_params() == p and twin is not est
    est.set_params(lr=0.01)
    assert est.lr == 0.01


@pytest.mark.parametrize("mode,cbs", [("ce", False), ("supcon", True)])
def test_fit_then_partial_fit(images, mode, cbs):
    X, y, _ = images
    first = y < 4
    est = small(mode=mode, cbs=cbs).fit(X[first], y[first])
    assert est.classes_.tolist() == [0, 1, 2, 3]
    assert set(est.predict(X[first]).tolist()) <= {0, 1, 2, 3}
    second = (y == 4) | (y == 5)
    est.partial_fit(X[second], y[second])
    assert est.classes_.tolist() == [0, 1, 2, 3, 4, 5]
    assert len(est.increments_) == 2
    assert sum(len(v) for v in est.memory_.per_class.values()) == 12
    P = est.predict_proba(X[:5])
    assert P.shape == (5, 6)
    np.testing.assert_allclose(P.sum(1), 1.0, rtol=1e-5)
    assert est.transform(X[:5]).shape == (5, 16)
    assert est.transform_regions(X[:5]).shape[0] == 5
    np.testing.assert_allclose(np.linalg.norm(est.embed(X[:5]), axis=1), 1.0, rtol=1e-5)


def test_fit_is_reproducible(images):
    X, y, _ = images
    a = small().fit(X[:12], y[:12]).transform(X[:4])
    b = small().fit(X[:12], y[:12]).transform(X[:4])
    assert np.array_equal(a, b)


def test_unfitted_and_bad_inputs(images):
    X, y, _ = images
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        small().transform(X[:2])
    with pytest.raises(ValueError):
        small(mode="mse").fit(X[:6], y[:6])
    with pytest.raises(ValueError):
        small(image_size=64).fit(X[:6], y[:6])
    with pytest.raises(ValueError):
        small().fit(X[:6], y[:5])


def test_validation_helpers():
    assert check_images(np.zeros((2, 2, 3), dtype=float)).shape == (1, 2, 2, 3)
    assert check_images(np.full((1, 2, 2, 3), 1.0))[0, 0, 0, 0] == 255
    with pytest.raises(ValueError):
        check_images(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 2, 2, 3), np.nan))
    assert check_labels([1.0, 2.0], 2).dtype == np.int64
    with pytest.raises(ValueError):
        check_labels([1.5], 1)
    assert check_regions(np.zeros((3, 4))).shape == (1, 3, 4)
    with pytest.raises(ValueError):
        check_regions(np.zeros((1, 3, 4)), d_in=5)
    assert check_captions(["A b"], 1) == [["a", "b"]]
    with pytest.raises(ValueError):
        check_captions([""], 1)


def test_caption_model_fit_predict_score():
    rng = np.random.default_rng(0)
    words = ["alpha", "beta", "gamma"]
    R = rng.normal(size=(12, 3, 4)).astype(np.float32)
    caps = []
    for i in range(12):
        R[i, :, 0] = 3.0 * (i % 3)  # caption fully determined by one feature
        caps.append(f"{words[i % 3]} is over here")  # four tokens so BLEU-4 is defined
    est = MeshedCaptionModel(d_model=16, n_heads=2, d_ff=32, n_layers=2, memory_slots=2, dropout=0.0,
                             max_len=7, epochs=60, batch_size=12, lr=1e-2, beam=2)
    est.fit(R, caps)
    assert {"alpha", "beta", "gamma", "is"} <= set(est.vocab_.words)
    pred = est.predict(R)
    assert len(pred) == 12 and all(isinstance(p, list) for p in pred)
    assert est.score(R, caps) > 0.9
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 3, 5)))
