import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from microvlm import synthetic
from microvlm.estimator import MultimodalAssistant, VisionFeaturizer


@pytest.fixture(scope="module")
def pairs():
    data = synthetic.corpus(size=64)
    picks = [0, 4, 8, 12]
    return [data[i][0] for i in picks], [data[i][2] for i in picks], [data[i][1] for i in picks]


def test_params_roundtrip():
    est = MultimodalAssistant(epochs=3, d_model=32, heads=2)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(rank=8)
    assert est.rank == 8


def test_featurizer_shape(pairs):
    images, _, _ = pairs
    feats = VisionFeaturizer(dim=16, layers=1, heads=2).fit(images).transform(images)
    assert feats.shape == (4, 16)
    again = VisionFeaturizer(dim=16, layers=1, heads=2).fit_transform(images)
    assert np.array_equal(feats, again)


def test_unfitted_and_bad_input(pairs):
    images, captions, _ = pairs
    with pytest.raises(NotFittedError):
        MultimodalAssistant().predict(images)
    with pytest.raises(ValueError):
        MultimodalAssistant(epochs=1).fit(images, captions[:2])


def test_fit_predict_score(pairs):
    images, captions, kinds = pairs
    est = MultimodalAssistant(epochs=40, batch_size=4, d_model=32, heads=2, blocks=1, ffn_hidden=64,
                              r_min=2, r_max=8, early_stop_patience=100, max_new=12)
    est.fit(images, captions)
    preds = est.predict(images)
    assert len(preds) == 4 and all(isinstance(p, str) for p in preds)
    assert est.score(images, captions) > 0.9
    assert est.classify(images, list(synthetic.CLASSES)) == kinds
