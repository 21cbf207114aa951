import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clsgen.textproto import (
    CLINICAL, DESK, EOG, LabelMap, PromptBundle, PromptTemplates, Tokenizer, UNPARSABLE, ParsedOutput,
    assemble_input, fill, parse_classification, parse_probability, join_words, render_target, strip_think,
)

LM = LabelMap()
words = st.text(alphabet="abcdefghij .,", min_size=1, max_size=40).filter(lambda s: s.strip())


# label map -------------------------------------------------------------------


def test_label_map_roundtrip_and_errors():
    assert LM.to_label(LM.to_string(1)) == 1
    assert LM.to_label(LM.to_string(0)) == 0
    assert LM.to_label("1:Death") is None
    with pytest.raises(ValueError):
        LM.to_string(2)
    with pytest.raises(ValueError):
        LabelMap("a", "a")
    with pytest.raises(ValueError):
        LabelMap("no way", "yes")


# rendering / parsing --------------------------------------------------------------


def test_render_target_layout():
    assert render_target("because", 1, LM) == f"because\n\nClassification: 1:death\n\n{EOG}"


@settings(max_examples=100, deadline=None)
@given(words, st.integers(0, 1))
def test_render_parse_roundtrip(explanation, label):
    explanation = explanation.strip()
    out = parse_classification(render_target(explanation, label, LM), LM)
    assert out.parsable and out.label == label
    assert out.explanation == explanation


def test_last_classification_wins():
    text = "Classification: 0:alive\nthen again\nClassification: 1:death"
    assert parse_classification(text, LM).label == 1


def test_last_occurrence_invalid_is_unparsable():
    text = "Classification: 1:death\nClassification: maybe"
    assert parse_classification(text, LM) == UNPARSABLE


@pytest.mark.parametrize("text", ["Classification: Pom Pomuppy", "no label here", "",
                                  "Classification: 1:deaths", "classification: 1:death"])
def test_unparsable_outputs(text):
    assert not parse_classification(text, LM).parsable


@pytest.mark.parametrize("text,expected", [
    ("risk noted\n\nProbability: 85", 85),
    ("Probability: 0", 0),
    ("Probability: 100", 100),
    ("Probability: 12\nProbability: 40", 40),
])
def test_probability_values(text, expected):
    assert parse_probability(text).probability_pct == expected


@pytest.mark.parametrize("text", ["Probability: 250", "Probability: 1000", "Probability: high", "none"])
def test_probability_out_of_range_or_missing(text):
    assert not parse_probability(text).parsable


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=80))
def test_parsers_never_throw(text):
    a = parse_classification(text, LM)
    b = parse_probability(text)
    assert a.parsable in (True, False) and b.parsable in (True, False)


def test_parsed_output_invariants():
    with pytest.raises(ValueError):
        ParsedOutput(parsable=True)
    with pytest.raises(ValueError):
        ParsedOutput(parsable=False, label=1)


def test_strip_think():
    assert strip_think("<think>hmm</think>  answer") == "answer"
    assert strip_think("plain") == "plain"


# templates ----------------------------------------------------------------------


def test_fill_leaves_unknown_placeholders():
    assert fill("{a} and {b}", a=1) == "1 and {b}"


def test_clinical_templates_fill_task_days():
    b = CLINICAL.bundle("note text", 30)
    assert "within 30 days" in b.system_prompt
    assert b.document.endswith("note text")
    assert b.generation_prefix == "Reasoning: "


def test_templates_from_dir(tmp_path):
    (tmp_path / "system_prompt.txt").write_text("sys")
    (tmp_path / "user_prompt.txt").write_text("doc {document}")
    (tmp_path / "question.txt").write_text("q")
    t = PromptTemplates.from_dir(tmp_path)
    assert t.bundle("x").document == "doc x"


# tokenizer and assembly ----------------------------------------------------------


def test_tokenizer_reserved_ids_and_roundtrip():
    tok = Tokenizer.from_texts(["a b c\n\nd"])
    assert tok.pad_id == 0 and tok.eog_id == 1 and tok.unk_id == 2
    assert tok.decode(tok.encode("a b\n\nc d")) == "a b\n\nc d"
    assert tok.encode("zzz") == [tok.unk_id]
    assert Tokenizer.from_list(tok.to_list()).vocab == tok.vocab
    assert tok.coverage("a zzz") == 0.5


def test_tokenizer_independent_of_text_order():
    assert Tokenizer.from_texts(["b a", "c"]).vocab == Tokenizer.from_texts(["c", "a b"]).vocab


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "\n", "Classification:", "1:death"]), max_size=30))
def test_tokenizer_roundtrip_property(ws):
    tok = Tokenizer(["a", "b", "c", "Classification:", "1:death"])
    text = join_words(ws)
    assert tok.decode(tok.encode(text)) == text


def _tok():
    return Tokenizer.from_texts(["s1 s2 d1 d2 d3 d4 d5 q1 Reasoning:"])


def test_assemble_order_and_prefix_len():
    tok = _tok()
    b = PromptBundle("s1 s2", "d1 d2", "q1", "Reasoning: ")
    ids, n = assemble_input(b, tok, 20)
    assert tok.decode(ids) == "s1 s2 d1 d2 q1 Reasoning:"
    assert n == len(ids) == 6


def test_assemble_truncates_document_head():
    tok = _tok()
    b = PromptBundle("s1 s2", "d1 d2 d3 d4 d5", "q1", "Reasoning:")
    ids, n = assemble_input(b, tok, 6)
    assert tok.decode(ids) == "s1 s2 d4 d5 q1 Reasoning:"
    assert n == 6


def test_assemble_errors():
    tok = _tok()
    with pytest.raises(ValueError, match="max_seq_len"):
        assemble_input(PromptBundle("s1 s2", "d1", "q1", "Reasoning:"), tok, 3)
    with pytest.raises(ValueError, match="prefix"):
        assemble_input(PromptBundle("s1", "d1", "q1", ""), tok, 10)
    ids, n = assemble_input(PromptBundle("s1", "d1", "q1", ""), tok, 10, require_prefix=False)
    assert n == 3


def test_desk_templates_have_prefix():
    assert DESK.bundle("x").generation_prefix.strip()
