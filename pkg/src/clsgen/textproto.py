"""Prompt assembly, target rendering and structured-output parsing.

Input = system prompt + document + question + generation prefix.
Target = explanation, blank line, ``Classification: <label>``, blank line, EOG.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from string import Formatter
from typing import Iterable

CLASSIFICATION_KEY = "Classification:"
PROBABILITY_KEY = "Probability:"
EOG = "EOG"
NEWLINE = "\n"
PAD = "<pad>"
UNK = "<unk>"

_TOKEN_RE = re.compile(r"\n|[^ \n]+")


@dataclass(frozen=True)
class LabelMap:
    negative_string: str = "0:alive"
    positive_string: str = "1:death"

    def __post_init__(self):
        if not self.negative_string or not self.positive_string:
            raise ValueError("label strings must be non-empty")
        if self.negative_string == self.positive_string:
            raise ValueError("label strings must differ")
        for s in (self.negative_string, self.positive_string):
            if any(ch.isspace() for ch in s):
                raise ValueError(f"label string {s!r} must not contain whitespace")

    def to_string(self, label: int) -> str:
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label!r}")
        return self.positive_string if label == 1 else self.negative_string

    def to_label(self, s: str) -> int | None:
        if s == self.positive_string:
            return 1
        if s == self.negative_string:
            return 0
        return None


@dataclass(frozen=True)
class PromptBundle:
    system_prompt: str
    document: str
    question: str
    generation_prefix: str = "Reasoning: "


@dataclass(frozen=True)
class ParsedOutput:
    parsable: bool
    label: int | None = None
    probability_pct: int | None = None
    explanation: str = ""

    def __post_init__(self):
        if self.parsable and (self.label is None) == (self.probability_pct is None):
            raise ValueError("a parsable output carries exactly one of label / probability_pct")
        if not self.parsable and (self.label is not None or self.probability_pct is not None):
            raise ValueError("an unparsable output carries neither label nor probability")

    def to_dict(self) -> dict:
        return {"parsable": self.parsable, "label": self.label,
                "probability_pct": self.probability_pct, "explanation": self.explanation}


UNPARSABLE = ParsedOutput(parsable=False)


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def join_words(words: Iterable[str]) -> str:
    out: list[str] = []
    prev = None
    for w in words:
        if prev is not None and prev != NEWLINE and w != NEWLINE:
            out.append(" ")
        out.append(w)
        prev = w
    return "".join(out)


class Tokenizer:
    """Word-level vocabulary; newlines are tokens of their own.

    Ids 0 and 1 are reserved for padding and EOG; unknown words map to the
    ``<unk>`` id.
    """

    def __init__(self, words: Iterable[str]):
        vocab = [PAD, EOG, UNK, NEWLINE]
        seen = set(vocab)
        for w in words:
            if w not in seen:
                seen.add(w)
                vocab.append(w)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}

    @classmethod
    def from_texts(cls, texts: Iterable[str], extra: Iterable[str] = ()) -> "Tokenizer":
        words: list[str] = list(extra)
        for t in texts:
            words.extend(split_words(t))
        # sorted so the vocabulary does not depend on text order
        return cls(sorted(set(words) - {PAD, EOG, UNK, NEWLINE}))

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def eog_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def __len__(self) -> int:
        return len(self.vocab)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(w, unk) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return join_words(self.vocab[i] for i in ids)

    def coverage(self, text: str) -> float:
        words = split_words(text)
        if not words:
            return 0.0
        return sum(w in self.index for w in words) / len(words)

    def to_list(self) -> list[str]:
        return list(self.vocab)

    @classmethod
    def from_list(cls, vocab: list[str]) -> "Tokenizer":
        if vocab[:4] != [PAD, EOG, UNK, NEWLINE]:
            raise ValueError("vocabulary does not start with the reserved tokens")
        return cls(vocab[4:])


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplates:
    """Named-placeholder templates: ``{document}``, ``{task_days}``, ``{label}``."""

    system_prompt: str
    user_prompt: str
    question: str
    generation_prefix: str = "Reasoning: "
    probability_system_prompt: str = ""
    probability_question: str = ""

    def bundle(self, document: str, task_days: int | str = 30, probability: bool = False) -> PromptBundle:
        system = self.probability_system_prompt if probability else self.system_prompt
        question = self.probability_question if probability else self.question
        return PromptBundle(
            system_prompt=fill(system, task_days=task_days),
            document=fill(self.user_prompt, document=document, task_days=task_days),
            question=fill(question, task_days=task_days),
            generation_prefix=self.generation_prefix,
        )

    def texts(self) -> list[str]:
        return [self.system_prompt, self.user_prompt.replace("{document}", ""), self.question,
                self.generation_prefix, self.probability_system_prompt, self.probability_question]

    @classmethod
    def from_dir(cls, path) -> "PromptTemplates":
        """Load ``<name>.txt`` files for each field present in ``path``."""
        path = Path(path)
        kwargs = {}
        for name in cls.__dataclass_fields__:
            f = path / f"{name}.txt"
            if f.exists():
                kwargs[name] = f.read_text()
        return cls(**kwargs)


def fill(template: str, **values) -> str:
    names = {f for _, f, _, _ in Formatter().parse(template) if f}
    return template.format(**{k: values.get(k, "{" + k + "}") for k in names})


# Verbatim clinical templates (mortality task).
CLINICAL = PromptTemplates(
    system_prompt=(
        "You are a clinical decision support assistant. Analyze the clinical document provided "
        "and classify the patient's out-of-hospital mortality within {task_days} days as either "
        "0:alive or 1:death. First provide your clinical reasoning, then state your final classification."
    ),
    user_prompt="Clinical Document:\n\n{document}",
    question=(
        "Based on the clinical document below, reason about the patient's likely outcome and "
        "classify their out-of-hospital mortality within {task_days} days. Answer with exactly "
        "one of: 0:alive or 1:death."
    ),
    generation_prefix="Reasoning: ",
    probability_system_prompt=(
        "You are a clinical decision support assistant. "
        "Analyze the clinical document provided and estimate the probability of "
        "out-of-hospital mortality within {task_days} days."
    ),
    probability_question=(
        "Based on the clinical document below, what is the probability (0 to 100) "
        "that this patient will die out-of-hospital within {task_days} days?\n\n"
        "Briefly reason about the key clinical findings, then state your answer "
        "in the format: Probability: <integer>"
    ),
)

# Compact templates for the synthetic desk tasks; same segment structure.
DESK = PromptTemplates(
    system_prompt="classify the note as 0:alive or 1:death . give reasoning then classification .",
    user_prompt="note : {document}",
    question="answer with 0:alive or 1:death .",
    generation_prefix="Reasoning: ",
    probability_system_prompt="estimate the probability of 1:death .",
    probability_question="give reasoning then Probability: <integer>",
)

JUDGE_SYSTEM_PROMPT = """You are a text analyst. You will be shown a piece of reasoning written by another model.
Read the surface meaning of the text and determine what conclusion it implies.
Do not use external knowledge — judge solely based on what the text says.
Output ONLY the classification label. Do not explain or add any other text."""

JUDGE_TEMPLATE = """Read the following reasoning and determine whether it implies {negative} or {positive}.

REASONING:
\"\"\"
{explanation}
\"\"\"

Reply with ONLY one of the two lines below — no explanation, no extra text:
Classification: {negative}
Classification: {positive}"""

JUDGE_TEMPLATE_CLINIFACT = """Read the following reasoning and determine whether it implies the claim is supported or not.

REASONING:
\"\"\"
{explanation}
\"\"\"

Reply with ONLY one of the two lines below — no explanation, no extra text:
Classification: TRUE
Classification: FALSE"""

READABILITY_SYSTEM_PROMPT = """You are a text quality evaluator. You will be shown a piece of text written by a language model.
Judge whether the text is readable and coherent.
Output ONLY the verdict label. Do not explain or add any other text."""

READABILITY_TEMPLATE = """Read the following text and decide whether it is readable.

Mark it as UNREADABLE if it contains ANY of the following:
- Made-up or nonsensical words
- Unexpected foreign characters or scripts (e.g. random Chinese, Arabic, or other non-English characters)
- A sentence that cuts off abruptly or is clearly incomplete
- Content that is largely unintelligible

Otherwise mark it as READABLE.

TEXT:
\"\"\"
{text}
\"\"\"

Reply with ONLY one of the two lines below — no explanation, no extra text:
Readability: READABLE
Readability: UNREADABLE"""


# ---------------------------------------------------------------------------
# assembly / rendering / parsing
# ---------------------------------------------------------------------------


def assemble_input(bundle: PromptBundle, tokenizer: Tokenizer, max_seq_len: int,
                   require_prefix: bool = True) -> tuple[list[int], int]:
    """Token ids for system + document + question + prefix, and the prefix length.

    Only the document is truncated, from the head, so its tail survives.
    ``require_prefix=False`` admits an empty generation prefix (direct-answer
    prompts).
    """
    system = tokenizer.encode(bundle.system_prompt)
    doc = tokenizer.encode(bundle.document)
    question = tokenizer.encode(bundle.question)
    prefix = tokenizer.encode(bundle.generation_prefix)
    if require_prefix and not prefix:
        raise ValueError("generation prefix must contain at least one token")
    fixed = len(system) + len(question) + len(prefix)
    if fixed > max_seq_len:
        raise ValueError(f"prompt without document needs {fixed} tokens, max_seq_len is {max_seq_len}")
    room = max_seq_len - fixed
    if len(doc) > room:
        doc = doc[len(doc) - room:] if room else []
    ids = system + doc + question + prefix
    return ids, len(ids)


def render_target(explanation: str, label: int, label_map: LabelMap) -> str:
    return f"{explanation}\n\n{CLASSIFICATION_KEY} {label_map.to_string(label)}\n\n{EOG}"


_CLS_RE = re.compile(re.escape(CLASSIFICATION_KEY) + r"[ \t]*(\S+)")
_PROB_RE = re.compile(re.escape(PROBABILITY_KEY) + r"[ \t]*([0-9]+)(?![0-9])")


def parse_classification(text: str, label_map: LabelMap) -> ParsedOutput:
    """Read the label from the last ``Classification:`` line.

    The last occurrence decides; if its value is not exactly one of the two
    label strings, the output is unparsable.
    """
    matches = list(_CLS_RE.finditer(text))
    if not matches:
        return UNPARSABLE
    m = matches[-1]
    label = label_map.to_label(m.group(1))
    if label is None:
        return UNPARSABLE
    return ParsedOutput(parsable=True, label=label, explanation=_before(text, m.start()))


def parse_probability(text: str) -> ParsedOutput:
    matches = list(_PROB_RE.finditer(text))
    if not matches:
        return UNPARSABLE
    m = matches[-1]
    digits = m.group(1)
    if len(digits) > 3 or int(digits) > 100:
        return UNPARSABLE
    return ParsedOutput(parsable=True, probability_pct=int(digits), explanation=_before(text, m.start()))


def _before(text: str, end: int) -> str:
    head = text[:end]
    if head.endswith("\n\n"):
        return head[:-2]
    return head.rstrip()


def strip_think(text: str, open_tag: str = "<think>", close_tag: str = "</think>") -> str:
    """Drop a leading reasoning block delimited by think tags."""
    end = text.rfind(close_tag)
    if end == -1:
        return text
    return text[end + len(close_tag):].lstrip()
