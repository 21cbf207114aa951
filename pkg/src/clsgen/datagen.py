"""Explanation-augmented data construction by rejection sampling.

For every (document, label) pair the teacher is asked up to ``K`` times; the
first output that parses, carries a valid explanation and agrees with the
gold label is kept. Instances that never succeed are dropped and counted.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

from .remote import ChatClient, TransportError
from .synth import Instance
from .textproto import (
    CLASSIFICATION_KEY,
    DESK,
    LabelMap,
    PromptTemplates,
    Tokenizer,
    parse_classification,
    split_words,
    strip_think,
)

log = logging.getLogger(__name__)


class TeacherModel(Protocol):
    def generate(self, document: str, key: str = "", trial: int = 0) -> str:
        ...

    def describe(self) -> dict:
        ...


@dataclass
class Validator:
    """Explanation checks applied before a teacher output is accepted."""

    max_tokens: int = 384
    tokenizer: Tokenizer | None = None
    min_coverage: float = 0.9

    def __call__(self, explanation: str) -> bool:
        return is_valid(explanation, self.max_tokens, self.tokenizer, self.min_coverage)


def is_valid(explanation: str, max_tokens: int = 384, tokenizer: Tokenizer | None = None,
             min_coverage: float = 0.9) -> bool:
    words = split_words(explanation)
    if not explanation.strip() or not words:
        return False
    if len(words) > max_tokens:
        return False
    if CLASSIFICATION_KEY in explanation:
        return False
    if tokenizer is not None and tokenizer.coverage(explanation) < min_coverage:
        return False
    return True


@dataclass
class DataGenReport:
    original: dict = field(default_factory=lambda: {0: 0, 1: 0})
    retained: dict = field(default_factory=lambda: {0: 0, 1: 0})
    failed: dict = field(default_factory=lambda: {0: 0, 1: 0})
    accepted_at: dict = field(default_factory=dict)  # trial index -> count
    transport_failures: int = 0
    teacher: dict = field(default_factory=dict)
    max_trials: int = 0

    @property
    def retention(self) -> float:
        total = sum(self.original.values())
        return sum(self.retained.values()) / total if total else 0.0

    def rows(self) -> list[dict]:
        """Table rows: original / successfully generated / failed, by class."""
        out = []
        for name, counts in (("Original dataset", self.original),
                             ("Successfully generated", self.retained),
                             ("Failed to generate", self.failed)):
            total = counts[0] + counts[1]
            out.append({"status": name, "false": counts[0], "true": counts[1],
                        "true_over_total": counts[1] / total if total else 0.0})
        return out

    def to_dict(self) -> dict:
        return {
            "rows": self.rows(),
            "retention": self.retention,
            "accepted_at": {str(k): v for k, v in sorted(self.accepted_at.items())},
            "transport_failures": self.transport_failures,
            "max_trials": self.max_trials,
            "teacher": self.teacher,
        }

    def to_text(self) -> str:
        lines = [f"{'Status':<24}{'False':>8}{'True':>8}{'True/Total':>12}"]
        for r in self.rows():
            lines.append(f"{r['status']:<24}{r['false']:>8}{r['true']:>8}{100 * r['true_over_total']:>11.1f}%")
        lines.append(f"retention {self.retention:.4f}")
        return "\n".join(lines)


@dataclass
class TrialLog:
    id: str
    trial: int
    output: str
    accepted: bool
    reason: str


def _attempt(inst: Instance, teacher: TeacherModel, K: int, label_map: LabelMap, valid: Callable,
             preprocess: Callable[[str], str], log_trials: bool):
    trials: list[TrialLog] = []
    for k in range(1, K + 1):
        try:
            raw = teacher.generate(inst.document, key=inst.id, trial=k)
        except TransportError as exc:
            trials.append(TrialLog(inst.id, k, "", False, f"transport: {exc}"))
            return None, trials, str(exc)
        parsed = parse_classification(preprocess(raw), label_map)
        if not parsed.parsable:
            reason = "unparsable"
        elif not valid(parsed.explanation):
            reason = "invalid explanation"
        elif parsed.label != inst.label:
            reason = "label mismatch"
        else:
            reason = "accepted"
        if log_trials or reason == "accepted":
            trials.append(TrialLog(inst.id, k, raw, reason == "accepted", reason))
        if reason == "accepted":
            aug = Instance(id=inst.id, document=inst.document, label=inst.label, split=inst.split,
                           explanation=parsed.explanation, trial_index=k)
            return aug, trials, None
    return None, trials, None


def build_dataset(instances: Sequence[Instance], teacher: TeacherModel, K: int = 5,
                  label_map: LabelMap | None = None, validator: Callable | None = None,
                  preprocess: Callable[[str], str] = strip_think, log_trials: bool = False,
                  workers: int = 1) -> tuple[list[Instance], DataGenReport, list[TrialLog]]:
    """Rejection-sample explanations; returns kept instances, the report and trial logs.

    Output order follows input order regardless of ``workers``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    label_map = label_map or LabelMap()
    valid = validator or Validator()
    report = DataGenReport(teacher=teacher.describe(), max_trials=K)

    def run(inst):
        return _attempt(inst, teacher, K, label_map, valid, preprocess, log_trials)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, instances))
    else:
        results = [run(x) for x in instances]
    kept: list[Instance] = []
    trials: list[TrialLog] = []
    for inst, (aug, tlog, err) in zip(instances, results):
        y = int(inst.label)
        report.original[y] += 1
        trials.extend(tlog)
        if aug is not None:
            kept.append(aug)
            report.retained[y] += 1
            report.accepted_at[aug.trial_index] = report.accepted_at.get(aug.trial_index, 0) + 1
        else:
            report.failed[y] += 1
            if err is not None:
                report.transport_failures += 1
    return kept, report, trials


class RemoteTeacher:
    """Teacher backed by a chat-completions endpoint."""

    def __init__(self, client: ChatClient, templates: PromptTemplates = DESK, task_days: int = 30,
                 temperature: float = 0.7, max_tokens: int = 2048):
        self.client = client
        self.templates = templates
        self.task_days = task_days
        self.temperature = temperature
        self.max_tokens = max_tokens

    def describe(self) -> dict:
        return {"kind": "remote", "model": self.client.model, "base_url": self.client.base_url,
                "temperature": self.temperature}

    def messages(self, document: str) -> list[dict]:
        b = self.templates.bundle(document, self.task_days)
        user = f"{b.document}\n\n{b.question}\n\n{b.generation_prefix}".rstrip()
        return [{"role": "system", "content": b.system_prompt}, {"role": "user", "content": user}]

    def generate(self, document: str, key: str = "", trial: int = 0) -> str:
        return self.client.complete(self.messages(document), self.temperature, self.max_tokens)


def trials_to_jsonl(trials: Sequence[TrialLog]) -> str:
    return "".join(json.dumps(asdict(t), sort_keys=True) + "\n" for t in trials)
