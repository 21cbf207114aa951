import json

import httpx
import pytest

from clsgen.datagen import RemoteTeacher, build_dataset
from clsgen.evalsuite import RemoteJudge
from clsgen.remote import ChatClient, TransportError, extract_text
from clsgen.synth import SynthTaskSpec, gen_dataset, oracle_explain
from clsgen.textproto import LabelMap, render_target

SPEC = SynthTaskSpec()


def reply(text, status=200):
    return httpx.Response(status, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def client(handler, **kw):
    return ChatClient("http://teacher.test/", "m-1", transport=httpx.MockTransport(handler), backoff=0.0, **kw)


def test_wire_format_and_bearer(monkeypatch):
    seen = {}

    def handler(req):
        seen["url"] = str(req.url)
        seen["auth"] = req.headers.get("authorization")
        seen["body"] = json.loads(req.content)
        return reply("hi")

    monkeypatch.setenv("CLSGEN_API_TOKEN", "sekret")
    out = client(handler).complete([{"role": "user", "content": "x"}], temperature=0.3, max_tokens=7)
    assert out == "hi"
    assert seen["url"] == "http://teacher.test/v1/chat/completions"
    assert seen["auth"] == "Bearer sekret"
    assert seen["body"] == {"model": "m-1", "messages": [{"role": "user", "content": "x"}],
                            "temperature": 0.3, "max_tokens": 7}


def test_no_token_no_header(monkeypatch):
    monkeypatch.delenv("CLSGEN_API_TOKEN", raising=False)
    seen = {}

    def handler(req):
        seen["auth"] = req.headers.get("authorization")
        return reply("ok")

    client(handler).complete([])
    assert seen["auth"] is None


def test_retries_then_succeeds():
    calls = []

    def handler(req):
        calls.append(1)
        return reply("late") if len(calls) == 3 else httpx.Response(503)

    assert client(handler, max_retries=3).complete([]) == "late"
    assert len(calls) == 3


def test_gives_up_after_retries():
    calls = []

    def handler(req):
        calls.append(1)
        raise httpx.ConnectError("refused")

    with pytest.raises(TransportError, match="giving up"):
        client(handler, max_retries=2).complete([])
    assert len(calls) == 3


def test_client_errors_are_not_retried():
    with pytest.raises(httpx.HTTPStatusError):
        client(lambda req: httpx.Response(400)).complete([])


def test_malformed_response():
    with pytest.raises(TransportError):
        extract_text({"nope": 1})
    assert extract_text({"choices": [{"message": {"content": None}}]}) == ""


def test_remote_teacher_feeds_build_dataset():
    data = gen_dataset(SPEC, 10, seed=0)
    by_doc = {x.document: x.label for x in data}

    def handler(req):
        user = json.loads(req.content)["messages"][1]["content"]
        doc = next(d for d in by_doc if d in user)
        y = by_doc[doc]
        return reply("<think>hmm</think>" + render_target(oracle_explain(SPEC, doc, y), y, LabelMap()))

    teacher = RemoteTeacher(client(handler))
    msgs = teacher.messages("home")
    assert msgs[0]["role"] == "system" and msgs[1]["content"].endswith("Reasoning:")
    kept, rep, _ = build_dataset(data, teacher, K=2)
    assert rep.retention == 1.0 and rep.teacher["kind"] == "remote"


def test_remote_judge_parses_replies():
    answers = iter(["Classification: 1:death", "Readability: READABLE", "?", "Readability: UNREADABLE"])
    judge = RemoteJudge(client(lambda req: reply(next(answers))), LabelMap())
    assert judge.infer_label("risk is high") == 1
    assert judge.readable("risk is high") is True
    assert judge.infer_label("???") is None
    assert judge.readable("zz") is False
