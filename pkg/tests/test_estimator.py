import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ctxse.datagen import generate_examples, speaker_roster
from ctxse.estimator import ContextualEnhancer

TINY_KWARGS = dict(d_model=16, num_blocks=1, num_cross_blocks=1, num_heads=2,
                   num_channels=8, conv_kernel=3, attn_window=4, steps=3,
                   batch_size=2, seed=0)


@pytest.fixture(scope="module")
def examples():
    roster = speaker_roster(range(4))
    return generate_examples("noise", 6, seed=200, roster=roster, snr_db=(-5, 5),
                             context_seconds=1.0, utterance_seconds=0.5,
                             num_channels=8)


@pytest.fixture(scope="module")
def fitted(examples):
    return ContextualEnhancer(**TINY_KWARGS).fit(examples)


def test_get_set_params_roundtrip():
    est = ContextualEnhancer(**TINY_KWARGS)
    params = est.get_params()
    assert params["d_model"] == 16
    assert params["ca_variant"] == "proposed"
    est.set_params(dropout_prob=0.5)
    assert est.get_params()["dropout_prob"] == 0.5


def test_clone_preserves_params():
    est = ContextualEnhancer(**TINY_KWARGS, dropout_prob=0.3)
    twin = clone(est)
    assert twin.get_params() == est.get_params()


def test_unfitted_raises():
    est = ContextualEnhancer(**TINY_KWARGS)
    with pytest.raises(NotFittedError):
        est.predict([])
    with pytest.raises(NotFittedError):
        est.transform([])
    with pytest.raises(NotFittedError):
        est.score([])


def test_fit_predict_transform(fitted, examples):
    masks = fitted.predict(examples[:2])
    assert len(masks) == 2
    for mask, example in zip(masks, examples):
        assert mask.shape == example.noisy.shape
        assert mask.min() >= 0.0 and mask.max() <= 1.0
    enhanced = fitted.transform(examples[:2])
    for feats, example in zip(enhanced, examples):
        assert feats.shape == example.noisy.shape
        assert np.all(np.isfinite(feats))


def test_predict_accepts_feature_bundle_pairs(fitted, examples):
    pair = (examples[0].noisy, examples[0].bundle)
    mask_from_pair = fitted.predict([pair])[0]
    mask_from_example = fitted.predict([examples[0]])[0]
    assert np.array_equal(mask_from_pair, mask_from_example)


def test_score_is_negative_loss(fitted, examples):
    score = fitted.score(examples)
    assert np.isfinite(score)
    assert score < 0.0


def test_fit_history_recorded(fitted):
    assert len(fitted.history_) == TINY_KWARGS["steps"]


def test_bad_items_rejected(fitted):
    with pytest.raises(TypeError):
        fitted.predict([42])
    with pytest.raises(TypeError):
        ContextualEnhancer(**TINY_KWARGS).fit([1, 2])
    with pytest.raises(TypeError):
        fitted.predict([(np.zeros((4, 8)), "not a bundle")])


def test_refit_is_deterministic(examples):
    a = ContextualEnhancer(**TINY_KWARGS).fit(examples)
    b = ContextualEnhancer(**TINY_KWARGS).fit(examples)
    mask_a = a.predict(examples[:1])[0]
    mask_b = b.predict(examples[:1])[0]
    assert np.array_equal(mask_a, mask_b)
