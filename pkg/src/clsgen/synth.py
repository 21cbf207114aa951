"""Synthetic binary tasks with a known linear-threshold rule.

Documents are bags of attribute tokens drawn from weighted risk features and
neutral filler words. ``label = 1`` iff the summed weight of the features
present exceeds the threshold. The oracle teacher and judge give exact
ground truth for every downstream stage.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .textproto import (
    DESK,
    EOG,
    LabelMap,
    PromptTemplates,
    parse_classification,
    render_target,
)

DEFAULT_FEATURES = {
    "sepsis": 3,
    "shock": 3,
    "frailty": 2,
    "cancer": 2,
    "anemia": 1,
    "fever": 1,
    "cough": 1,
}
DEFAULT_FILLERS = (
    "stable", "walking", "eating", "visit", "family", "home", "labs", "normal",
    "rest", "clinic", "follow-up", "calm", "alert", "review", "routine", "sleep",
)


@dataclass
class SynthTaskSpec:
    features: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_FEATURES))
    threshold: int = 4
    prevalence: float = 0.26
    doc_length: tuple[int, int] = (8, 16)
    feature_rate: float = 0.3
    fillers: tuple[str, ...] = DEFAULT_FILLERS
    task_days: int = 30
    label_map: LabelMap = field(default_factory=LabelMap)

    def __post_init__(self):
        self.doc_length = tuple(self.doc_length)
        self.fillers = tuple(self.fillers)
        if isinstance(self.label_map, dict):
            self.label_map = LabelMap(**self.label_map)
        if not 0.0 <= self.prevalence <= 1.0:
            raise ValueError("prevalence must be in [0, 1]")
        lo, hi = self.doc_length
        if lo < 1 or hi < lo:
            raise ValueError(f"bad doc_length {self.doc_length}")
        if hi < len(self.features):
            raise ValueError("doc_length upper bound must fit every weighted feature")
        if not self.fillers:
            raise ValueError("need at least one filler word")
        overlap = set(self.features) & set(self.fillers)
        if overlap:
            raise ValueError(f"features and fillers overlap: {sorted(overlap)}")

    def score(self, document: str) -> int:
        present = set(document.split())
        return sum(w for f, w in self.features.items() if f in present)

    def label(self, document: str) -> int:
        return int(self.score(document) > self.threshold)

    def present_features(self, document: str) -> list[str]:
        seen = []
        for w in document.split():
            if w in self.features and w not in seen:
                seen.append(w)
        return seen

    def words(self) -> list[str]:
        return list(self.features) + list(self.fillers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["doc_length"] = list(self.doc_length)
        d["fillers"] = list(self.fillers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthTaskSpec":
        return cls(**d)


@dataclass
class Instance:
    id: str
    document: str
    label: int
    split: str = "train"
    explanation: str | None = None
    trial_index: int | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "document": self.document, "label": self.label, "split": self.split}
        if self.explanation is not None:
            d["explanation"] = self.explanation
            d["trial_index"] = self.trial_index
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        return cls(id=str(d["id"]), document=d["document"], label=int(d["label"]),
                   split=d.get("split", "train"), explanation=d.get("explanation"),
                   trial_index=d.get("trial_index"))


def _sample_document(spec: SynthTaskSpec, rng: np.random.Generator) -> str:
    lo, hi = spec.doc_length
    n = int(rng.integers(lo, hi + 1))
    feats = [f for f in spec.features if rng.random() < spec.feature_rate]
    words = feats + [spec.fillers[i] for i in rng.integers(0, len(spec.fillers), size=max(0, n - len(feats)))]
    order = rng.permutation(len(words))
    return " ".join(words[i] for i in order)


def _check_feasible(spec: SynthTaskSpec, n_pos: int, n_neg: int) -> None:
    top = sum(w for w in spec.features.values() if w > 0)
    bottom = sum(w for w in spec.features.values() if w < 0)
    if n_pos and top <= spec.threshold:
        raise ValueError(f"infeasible prevalence: max score {top} never exceeds threshold {spec.threshold}")
    if n_neg and bottom > spec.threshold:
        raise ValueError(f"infeasible prevalence: min score {bottom} always exceeds threshold {spec.threshold}")
    if n_pos and spec.feature_rate <= 0:
        raise ValueError("infeasible prevalence: feature_rate=0 yields no positives")


def gen_dataset(spec: SynthTaskSpec, n: int, seed: int, split: str = "train",
                id_prefix: str | None = None, max_draws_per_instance: int = 2000) -> list[Instance]:
    """Draw ``n`` instances with exactly ``round(prevalence * n)`` positives."""
    if n < 1:
        raise ValueError("n must be >= 1")
    n_pos = int(round(spec.prevalence * n))
    n_neg = n - n_pos
    _check_feasible(spec, n_pos, n_neg)
    rng = np.random.default_rng([seed, 0x5E7])
    want = {1: n_pos, 0: n_neg}
    slots: list[tuple[str, int]] = []
    draws = 0
    budget = max_draws_per_instance * n
    while want[0] or want[1]:
        draws += 1
        if draws > budget:
            raise ValueError(f"infeasible prevalence {spec.prevalence}: quota not met after {budget} draws")
        doc = _sample_document(spec, rng)
        y = spec.label(doc)
        if want[y]:
            want[y] -= 1
            slots.append((doc, y))
    order = rng.permutation(len(slots))
    prefix = id_prefix if id_prefix is not None else split
    return [Instance(id=f"{prefix}-{i:06d}", document=slots[j][0], label=slots[j][1], split=split)
            for i, j in enumerate(order)]


def gen_splits(spec: SynthTaskSpec, sizes: dict[str, int], seed: int) -> dict[str, list[Instance]]:
    return {name: gen_dataset(spec, n, seed * 1000 + k, split=name)
            for k, (name, n) in enumerate(sizes.items())}


# ---------------------------------------------------------------------------
# oracle explanations and judge
# ---------------------------------------------------------------------------

_CONCLUSION = {1: "high", 0: "low"}
_EXPLAIN_RE = re.compile(r"^findings : (none|[^ .]+(?: [^ .]+)*) \. risk is (high|low)$")
_CONCLUSION_RE = re.compile(r"risk is (high|low)")


def oracle_explain(spec: SynthTaskSpec, document: str, label: int) -> str:
    """Template rationale citing the weighted features, concluding per ``label``."""
    feats = spec.present_features(document)
    cited = " ".join(feats) if feats else "none"
    return f"findings : {cited} . risk is {_CONCLUSION[int(label)]}"


class OracleJudge:
    """Rule-based stand-in for an LLM judge on template explanations."""

    def __init__(self, spec: SynthTaskSpec | None = None):
        self.spec = spec

    def infer_label(self, explanation: str) -> int | None:
        hits = _CONCLUSION_RE.findall(explanation)
        if not hits:
            return None
        return 1 if hits[-1] == "high" else 0

    def readable(self, text: str) -> bool:
        m = _EXPLAIN_RE.match(text.strip())
        if not m:
            return False
        if self.spec is None or m.group(1) == "none":
            return True
        return all(w in self.spec.features for w in m.group(1).split())


@dataclass
class OracleTeacher:
    """Controllable stand-in for the data-generating LLM.

    ``p_pos``/``p_neg`` give class-conditional label accuracy; ``validity`` is
    the chance that the output is well-formed at all. Each call draws from a
    stream derived from ``(seed, instance id, trial)``.
    """

    spec: SynthTaskSpec
    p_pos: float = 1.0
    p_neg: float = 1.0
    validity: float = 1.0
    seed: int = 0

    @classmethod
    def uniform(cls, spec: SynthTaskSpec, p: float, v: float, seed: int = 0) -> "OracleTeacher":
        return cls(spec=spec, p_pos=p, p_neg=p, validity=v, seed=seed)

    def describe(self) -> dict:
        return {"kind": "oracle", "p_pos": self.p_pos, "p_neg": self.p_neg,
                "validity": self.validity, "seed": self.seed}

    def rng_for(self, key: str, trial: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, _stable_hash(key), trial])

    def generate(self, document: str, key: str = "", trial: int = 0) -> str:
        rng = self.rng_for(key or document, trial)
        return teacher_generate(self, document, rng)


def teacher_generate(teacher: OracleTeacher, document: str, rng: np.random.Generator) -> str:
    spec = teacher.spec
    y = spec.label(document)
    correct = rng.random() < (teacher.p_pos if y == 1 else teacher.p_neg)
    valid = rng.random() < teacher.validity
    y_hat = y if correct else 1 - y
    if not valid:
        return _corrupt(spec, document, rng)
    return render_target(oracle_explain(spec, document, y_hat), y_hat, spec.label_map)


def _corrupt(spec: SynthTaskSpec, document: str, rng: np.random.Generator) -> str:
    words = document.split() or ["none"]
    kind = int(rng.integers(0, 3))
    if kind == 0:
        # truncated before the label line
        return f"findings : {' '.join(words[:3])} ."
    if kind == 1:
        # label line with a value that is not a label string
        return f"findings : none . risk is unclear\n\nClassification: unsure\n\n{EOG}"
    return " ".join(words[int(i)] for i in rng.integers(0, len(words), size=6))


def _stable_hash(key: str) -> int:
    h = 1469598103934665603
    for b in key.encode():
        h = ((h ^ b) * 1099511628211) & 0xFFFFFFFFFFFFFFFF
    return h


# ---------------------------------------------------------------------------
# pretraining corpus
# ---------------------------------------------------------------------------


@dataclass
class CorpusMix:
    """Passage-type proportions for the LM pretraining corpus."""

    document: float = 0.1
    reasoning: float = 0.6
    label_only: float = 0.15
    probability: float = 0.15
    prevalence: float = 0.5

    def weights(self) -> np.ndarray:
        w = np.array([self.document, self.reasoning, self.label_only, self.probability], dtype=float)
        if (w < 0).any() or w.sum() <= 0:
            raise ValueError("corpus mix weights must be non-negative with positive sum")
        return w / w.sum()


def verbal_probability(spec: SynthTaskSpec, document: str) -> int:
    """Integer percentage that rises with the rule score (used in corpus passages)."""
    z = spec.score(document) - spec.threshold - 0.5
    return int(round(100.0 / (1.0 + np.exp(-1.5 * z))))


def prompt_text(spec: SynthTaskSpec, document: str, templates: PromptTemplates = DESK,
                mode: str = "reasoning") -> str:
    """Assembled prompt as plain text (system, document, question, prefix)."""
    b = templates.bundle(document, spec.task_days, probability=(mode == "probability"))
    prefix = "" if mode == "label" else b.generation_prefix.strip()
    parts = [b.system_prompt, b.document, b.question] + ([prefix] if prefix else [])
    return " ".join(p.strip() for p in parts)


def gen_pretrain_corpus(spec: SynthTaskSpec, n_docs: int, seed: int, templates: PromptTemplates = DESK,
                        mix: CorpusMix | None = None) -> list[str]:
    """Passages mixing raw notes with formatted reasoning / label / probability answers."""
    mix = mix or CorpusMix()
    probs = mix.weights()
    corpus_spec = SynthTaskSpec(**{**spec.__dict__, "prevalence": mix.prevalence})
    docs = gen_dataset(corpus_spec, max(n_docs, 1), seed, split="corpus") if n_docs else []
    rng = np.random.default_rng([seed, 0xC0])
    kinds = rng.choice(4, size=len(docs), p=probs)
    lm = spec.label_map
    out = []
    for inst, kind in zip(docs, kinds):
        d, y = inst.document, inst.label
        if kind == 0:
            out.append(f"note : {d} {EOG}")
        elif kind == 1:
            out.append(prompt_text(spec, d, templates) + " " + render_target(oracle_explain(spec, d, y), y, lm))
        elif kind == 2:
            out.append(prompt_text(spec, d, templates, "label") + f"\n\nClassification: {lm.to_string(y)}\n\n{EOG}")
        else:
            out.append(prompt_text(spec, d, templates, "probability") + " "
                       + f"{oracle_explain(spec, d, y)}\n\nProbability: {verbal_probability(spec, d)}\n\n{EOG}")
    return out[:n_docs]


def corpus_vocabulary(spec: SynthTaskSpec, templates: PromptTemplates = DESK) -> list[str]:
    """Every word the desk pipeline can emit or read."""
    from .textproto import split_words

    words = set(spec.words())
    for t in templates.texts():
        words.update(split_words(t.replace("{task_days}", str(spec.task_days))))
    words.update(["note", ":", "findings", "none", ".", "risk", "is", "high", "low", "unclear", "unsure",
                  "Classification:", "Probability:", "Reasoning:", lm_words(spec.label_map)[0],
                  lm_words(spec.label_map)[1]])
    words.update(str(i) for i in range(101))
    return sorted(words)


def lm_words(label_map: LabelMap) -> tuple[str, str]:
    return label_map.negative_string, label_map.positive_string


# ---------------------------------------------------------------------------
# line-delimited records
# ---------------------------------------------------------------------------


def write_jsonl(path, records: Iterable) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            d = r.to_dict() if hasattr(r, "to_dict") else r
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_instances(path) -> list[Instance]:
    return [Instance.from_dict(d) for d in read_jsonl(path)]


def relabel_check(spec: SynthTaskSpec, instances: Sequence[Instance]) -> bool:
    return all(spec.label(x.document) == x.label for x in instances)


def parses_to(spec: SynthTaskSpec, text: str) -> int | None:
    return parse_classification(text, spec.label_map).label
