import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from copt import COPTDialogueModel
from copt.estimator import check_dialogues, check_histories

X = ["hi there __eou__ how are you", "good morning", "see you", "hi there"] * 6
Y = ["fine thanks", "morning", "bye now", "hello"] * 6
SMALL = dict(pretrain_epochs=3, adversarial_epochs=1, d_pretrain_epochs=1, batch_size=8,
             emb_dim=6, hidden_dim=8, pretrain_lr=1e-2, max_len=6)


def test_params_round_trip_and_clone():
    est = COPTDialogueModel(mode="standard", seed=4)
    params = est.get_params()
    assert params["mode"] == "standard" and params["g_lr"] == 1e-5 and params["batch_size"] == 64
    assert clone(est).get_params() == params
    assert est.set_params(beam_width=2).beam_width == 2


def test_validation_helpers():
    assert check_histories(["a b __eou__ c"]) == [[["a", "b"], ["c"]]]
    assert check_histories([["u1", "u2", "u3", "u4"]]) == [[["u2"], ["u3"], ["u4"]]]
    with pytest.raises(ValueError):
        check_dialogues(["a", "b"], ["c"])
    with pytest.raises(ValueError):
        check_dialogues(["a"], [""])
    with pytest.raises(TypeError):
        check_histories("a b")
    with pytest.raises(ValueError):
        check_histories([])


def test_fit_predict_score_and_determinism():
    with pytest.raises(NotFittedError):
        COPTDialogueModel().predict(["hi"])
    a = COPTDialogueModel(**SMALL).fit(X, Y)
    b = COPTDialogueModel(**SMALL).fit(X, Y)
    pred = a.predict(X[:4])
    assert len(pred) == 4 and all(isinstance(p, str) for p in pred)
    assert pred == b.predict(X[:4])
    assert a.score(X, Y) == b.score(X, Y) < 0
    assert len(a.history_) == 1
    rep = a.analyze_rewards(X, Y, n=10, seed=1)
    assert rep["counterfactual"]["count"] == 10
    assert sum(rep["standard"]["shares"].values()) == pytest.approx(100.0)
    with pytest.raises(ValueError):
        a.analyze_rewards(X, Y, n=0)
