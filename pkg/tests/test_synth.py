import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clsgen.synth import (
    CorpusMix, Instance, OracleJudge, OracleTeacher, SynthTaskSpec, corpus_vocabulary, gen_dataset,
    gen_pretrain_corpus, gen_splits, oracle_explain, read_instances, relabel_check, verbal_probability,
    write_jsonl,
)
from clsgen.textproto import parse_classification

SPEC = SynthTaskSpec()


@pytest.mark.parametrize("doc,label", [
    ("sepsis shock home", 1),       # 6 > 4
    ("sepsis anemia home", 0),      # 4 is not above threshold
    ("frailty cancer fever", 1),    # 5
    ("stable walking eating", 0),
])
def test_rule_examples(doc, label):
    assert SPEC.label(doc) == label


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthTaskSpec(prevalence=1.5)
    with pytest.raises(ValueError):
        SynthTaskSpec(fillers=("sepsis",))
    with pytest.raises(ValueError):
        SynthTaskSpec(doc_length=(5, 3))
    assert SynthTaskSpec.from_dict(SPEC.to_dict()) == SPEC


def test_generation_is_deterministic():
    a = gen_dataset(SPEC, 50, seed=3)
    b = gen_dataset(SPEC, 50, seed=3)
    assert [x.to_dict() for x in a] == [x.to_dict() for x in b]
    assert [x.document for x in gen_dataset(SPEC, 50, seed=4)] != [x.document for x in a]


@pytest.mark.parametrize("prevalence", [0.04, 0.15, 0.5])
def test_prevalence_and_labels(prevalence):
    spec = SynthTaskSpec(prevalence=prevalence)
    data = gen_dataset(spec, 1000, seed=1)
    rate = np.mean([x.label for x in data])
    assert abs(rate - prevalence) <= 0.02
    assert relabel_check(spec, data)
    assert len({x.id for x in data}) == 1000


def test_infeasible_prevalence_is_reported():
    spec = SynthTaskSpec(prevalence=0.5, feature_rate=0.0)
    with pytest.raises(ValueError, match="infeasible"):
        gen_dataset(spec, 10, seed=0)


def test_splits_are_disjoint_streams():
    splits = gen_splits(SPEC, {"train": 30, "dev": 10, "test": 10}, seed=0)
    assert [len(v) for v in splits.values()] == [30, 10, 10]
    assert splits["dev"][0].split == "dev"


def test_jsonl_roundtrip(tmp_path):
    data = gen_dataset(SPEC, 5, seed=0)
    data[0].explanation, data[0].trial_index = "x", 2
    back = read_instances(write_jsonl(tmp_path / "d.jsonl", data))
    assert [x.to_dict() for x in back] == [x.to_dict() for x in data]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 1))
def test_judge_inverts_oracle_explanation(seed, label):
    doc = gen_dataset(SPEC, 1, seed=seed)[0].document
    text = oracle_explain(SPEC, doc, label)
    judge = OracleJudge(SPEC)
    assert judge.infer_label(text) == label
    assert judge.readable(text)


def test_judge_rejects_garbage():
    judge = OracleJudge(SPEC)
    assert judge.infer_label("findings : sepsis .") is None
    assert not judge.readable("risk is high because")


def test_teacher_parse_rate_and_accuracy():
    data = gen_dataset(SynthTaskSpec(prevalence=0.3), 10_000, seed=5)
    teacher = OracleTeacher.uniform(SPEC, p=0.8, v=0.9, seed=2)
    parsed = [parse_classification(teacher.generate(x.document, x.id), SPEC.label_map) for x in data]
    ok = [p.parsable for p in parsed]
    assert abs(np.mean(ok) - 0.9) <= 0.01
    acc = np.mean([p.label == x.label for p, x in zip(parsed, data) if p.parsable])
    assert abs(acc - 0.8) <= 0.015


def test_teacher_replays_per_key_and_trial():
    teacher = OracleTeacher.uniform(SPEC, p=0.5, v=0.5, seed=1)
    doc = "sepsis shock home"
    assert teacher.generate(doc, "a", 1) == teacher.generate(doc, "a", 1)
    outs = {teacher.generate(doc, "a", k) for k in range(20)}
    assert len(outs) > 1


def test_verbal_probability_monotone_in_score():
    low = verbal_probability(SPEC, "home")
    high = verbal_probability(SPEC, "sepsis shock frailty cancer")
    assert 0 <= low < 50 < high <= 100


def test_pretrain_corpus_vocabulary_and_mix():
    corpus = gen_pretrain_corpus(SPEC, 400, seed=0)
    assert len(corpus) == 400
    vocab = set(corpus_vocabulary(SPEC)) | {"EOG"}  # EOG is a reserved tokenizer id
    for passage in corpus:
        assert set(passage.split()) <= vocab, passage
    with_label = sum("Classification:" in p for p in corpus)
    assert with_label / len(corpus) >= 0.3
    assert gen_pretrain_corpus(SPEC, 400, seed=0) == corpus


def test_corpus_mix_validation():
    with pytest.raises(ValueError):
        CorpusMix(document=-1).weights()
    np.testing.assert_allclose(CorpusMix().weights().sum(), 1.0)


def test_instance_dict_omits_missing_explanation():
    assert "explanation" not in Instance("a", "doc", 0).to_dict()
