import numpy as np
import pytest
from sklearn.base import clone

from clsgen.estimator import CLSGenClassifier, check_binary_target, check_documents
from clsgen.synth import OracleTeacher, SynthTaskSpec, gen_dataset, oracle_explain

SPEC = SynthTaskSpec(prevalence=0.4)
SMALL = {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq_len": 96, "cls_hidden_dim": 8,
         "lora_rank": 2}


def data(n=60, seed=0):
    d = gen_dataset(SPEC, n, seed=seed)
    return [x.document for x in d], np.array([x.label for x in d])


@pytest.fixture(scope="module")
def fitted():
    X, y = data(80)
    y_str = np.where(y == 1, "died", "alive")
    expl = [oracle_explain(SPEC, d, t) for d, t in zip(X, y)]
    clf = CLSGenClassifier(model_config=SMALL, epochs=3, max_new=6, pretrain_epochs=1, lr=1e-2)
    return clf.fit(X, y_str, explanations=expl), X, y_str


def test_predict_shapes_and_classes(fitted):
    clf, X, y = fitted
    p = clf.predict_proba(X[:5])
    assert p.shape == (5, 2)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert set(clf.predict(X)) <= {"alive", "died"}
    assert list(clf.classes_) == ["alive", "died"]
    assert 0.0 <= clf.score(X, y) <= 1.0


def test_explain_returns_text(fitted):
    clf, X, _ = fitted
    out = clf.explain(X[:3])
    assert len(out) == 3 and all(isinstance(t, str) for t in out)


def test_clone_keeps_params():
    clf = CLSGenClassifier(epochs=2, lr=1e-3)
    c = clone(clf)
    assert c.get_params() == clf.get_params()
    assert not hasattr(c, "model_")


def test_teacher_supplies_explanations():
    X, y = data(30)
    clf = CLSGenClassifier(model_config=SMALL, epochs=1, max_new=4,
                           teacher=OracleTeacher.uniform(SPEC, 1.0, 1.0))
    clf.fit(X, y)
    assert clf.datagen_report_.retention == 1.0


def test_cls_only_needs_no_explanations():
    X, y = data(20)
    clf = CLSGenClassifier(model_config=SMALL, epochs=1, mode="cls_only", max_new=4).fit(X, y)
    assert clf.predict_proba(X).shape == (20, 2)


def test_fit_errors():
    X, y = data(10)
    with pytest.raises(ValueError, match="explanations"):
        CLSGenClassifier(model_config=SMALL).fit(X, y)
    with pytest.raises(ValueError, match="mode"):
        CLSGenClassifier(mode="other").fit(X, y)
    with pytest.raises(ValueError, match="binary"):
        CLSGenClassifier(mode="cls_only").fit(X, [0] * 10)
    with pytest.raises(ValueError, match="labels"):
        CLSGenClassifier(mode="cls_only").fit(X, y[:5])


def test_predict_before_fit():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        CLSGenClassifier().predict_proba(["home"])


def test_input_validation():
    with pytest.raises(ValueError, match="single string"):
        check_documents("home")
    with pytest.raises(ValueError, match="blank"):
        check_documents(["a", " "])
    with pytest.raises(ValueError, match="expected str"):
        check_documents(["a", 3])
    classes, codes = check_binary_target(["b", "a", "b"], 3)
    assert list(classes) == ["a", "b"] and list(codes) == [1, 0, 1]
