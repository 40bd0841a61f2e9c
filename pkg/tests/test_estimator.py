import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from adt._validation import check_images, check_labels
from adt.estimator import AdversarialDefenseTeacher
from adt.geometry import LabeledBoxes


def test_params_round_trip():
    est = AdversarialDefenseTeacher(p_attack=0.5, zoom=False)
    params = est.get_params()
    assert params["p_attack"] == 0.5 and params["zoom"] is False
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(ema_decay=0.99)
    assert est.ema_decay == 0.99


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        AdversarialDefenseTeacher().predict(np.zeros((1, 32, 32, 3)))


def test_fit_predict_score(small_dataset):
    xs = np.stack(small_dataset["source_train"].images[:6])
    ys = small_dataset["source_train"].labels[:6]
    xt = np.stack(small_dataset["target_train"].images[:6])
    est = AdversarialDefenseTeacher(burn_in=3, max_iter=2, batch_size=2, score_threshold=0.0, lr=0.001)
    assert est.fit(xs, ys, xt) is est
    assert est.n_iter_ == 2
    preds = est.predict(xt[:2])
    assert len(preds) == 2 and all(isinstance(p, LabeledBoxes) for p in preds)
    s = est.score(np.stack(small_dataset["target_eval"].images[:3]), small_dataset["target_eval"].labels[:3])
    assert 0.0 <= s <= 100.0


def test_fit_rejects_bad_inputs(small_dataset):
    est = AdversarialDefenseTeacher(burn_in=1, max_iter=1)
    xs = np.stack(small_dataset["source_train"].images[:2])
    ys = small_dataset["source_train"].labels[:2]
    with pytest.raises(ValueError):
        est.fit(xs, ys[:1], xs)
    with pytest.raises(ValueError):
        est.fit(xs[:, :30], ys, xs)
    with pytest.raises(ValueError):
        AdversarialDefenseTeacher(p_attack=1.5, burn_in=1, max_iter=1).fit(xs, ys, xs)


def test_validation_helpers():
    assert check_images(np.zeros((8, 8, 3))).shape == (1, 8, 8, 3)
    for bad in (np.zeros((2, 8, 8)), np.full((1, 8, 8, 3), 2.0), np.full((1, 8, 8, 3), np.nan), np.zeros((0, 8, 8, 3))):
        with pytest.raises(ValueError):
            check_images(bad)
    labels = check_labels([([[0, 0, 2, 2]], [1])], 1, 3)
    assert labels[0].classes.tolist() == [1]
    with pytest.raises(ValueError):
        check_labels([LabeledBoxes([[0, 0, 2, 2]], [5])], 1, 3)
