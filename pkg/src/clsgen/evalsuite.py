"""Evaluation of fine-tuned models, inference-only baselines and judges."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import metrics as M
from .model import DualHeadModel
from .remote import ChatClient, TransportError
from .synth import Instance, _stable_hash
from .textproto import (
    DESK,
    JUDGE_SYSTEM_PROMPT,
    JUDGE_TEMPLATE,
    READABILITY_SYSTEM_PROMPT,
    READABILITY_TEMPLATE,
    LabelMap,
    ParsedOutput,
    PromptBundle,
    PromptTemplates,
    Tokenizer,
    assemble_input,
    parse_classification,
    parse_probability,
)

log = logging.getLogger(__name__)

MODES = ("reasoning", "label", "probability")


@dataclass
class PredictionRecord:
    id: str
    text: str
    parsed: ParsedOutput
    probability: float | None = None
    gold: int | None = None
    run: int = 0

    @property
    def verbalized(self) -> int | None:
        return self.parsed.label

    def to_dict(self) -> dict:
        return {"id": self.id, "text": self.text, "parsed": self.parsed.to_dict(),
                "probability": self.probability, "gold": self.gold, "run": self.run}

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        return cls(id=d["id"], text=d["text"], parsed=ParsedOutput(**d["parsed"]),
                   probability=d.get("probability"), gold=d.get("gold"), run=d.get("run", 0))


class TextModel(Protocol):
    """Anything that turns instances into raw generations for a prompt mode."""

    def complete(self, instances: Sequence[Instance], mode: str, run: int) -> list[str]:
        ...


def build_prompt(inst: Instance, tokenizer: Tokenizer, templates: PromptTemplates, max_len: int,
                 mode: str = "reasoning", task_days: int = 30) -> tuple[list[int], int]:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    b = templates.bundle(inst.document, task_days, probability=(mode == "probability"))
    if mode == "label":
        b = PromptBundle(b.system_prompt, b.document, b.question, generation_prefix="")
    return assemble_input(b, tokenizer, max_len, require_prefix=(mode != "label"))


class DeskTextModel:
    """Adapter exposing a :class:`DualHeadModel` as a :class:`TextModel`.

    ``temperature=0`` decodes greedily; otherwise each (run, instance) pair
    gets its own seeded stream.
    """

    def __init__(self, model: DualHeadModel, tokenizer: Tokenizer, templates: PromptTemplates = DESK,
                 task_days: int = 30, max_new: int = 32, temperature: float = 0.7, seed: int = 0):
        self.model = model
        self.tokenizer = tokenizer
        self.templates = templates
        self.task_days = task_days
        self.max_new = max_new
        self.temperature = temperature
        self.seed = seed

    def prompts(self, instances, mode: str) -> list[list[int]]:
        room = self.model.config.max_seq_len - self.max_new
        return [build_prompt(x, self.tokenizer, self.templates, room, mode, self.task_days)[0] for x in instances]

    def complete(self, instances, mode: str = "reasoning", run: int = 0) -> list[str]:
        prompts = self.prompts(instances, mode)
        rngs = None
        if self.temperature > 0:
            rngs = [np.random.default_rng([self.seed, run, _stable_hash(x.id)]) for x in instances]
        outs = self.model.generate_batch(prompts, self.max_new, self.temperature, rngs=rngs)
        return [self.tokenizer.decode(o) for o in outs]


# ---------------------------------------------------------------------------
# CLSGen evaluation
# ---------------------------------------------------------------------------


def head_probabilities(model: DualHeadModel, instances, tokenizer: Tokenizer,
                       templates: PromptTemplates = DESK, task_days: int = 30, max_new: int = 32) -> np.ndarray:
    room = model.config.max_seq_len - max_new
    enc = [build_prompt(x, tokenizer, templates, room, "reasoning", task_days) for x in instances]
    width = max(len(ids) for ids, _ in enc)
    ids = np.zeros((len(enc), width), dtype=np.int64)
    for i, (row, _) in enumerate(enc):
        ids[i, : len(row)] = row
    return model.predict_proba(ids, [p for _, p in enc])


def predict(model: DualHeadModel, instances, tokenizer: Tokenizer, label_map: LabelMap,
            templates: PromptTemplates = DESK, task_days: int = 30, max_new: int = 32) -> list[PredictionRecord]:
    """Head probability plus greedy generation for each instance."""
    probs = head_probabilities(model, instances, tokenizer, templates, task_days, max_new)
    texts = DeskTextModel(model, tokenizer, templates, task_days, max_new, temperature=0.0).complete(instances)
    return [PredictionRecord(id=x.id, text=t, parsed=parse_classification(t, label_map),
                             probability=float(p), gold=x.label)
            for x, t, p in zip(instances, texts, probs)]


def tune_thresholds(records: Sequence[PredictionRecord]) -> dict:
    """Dev-set thresholds: F1 against gold, kappa against the verbalized labels."""
    probs = [r.probability for r in records]
    out = {"f1": M.tune_threshold(probs, [r.gold for r in records], "f1")}
    verbal = [r.verbalized for r in records]
    if any(v is not None for v in verbal):
        out["kappa"] = M.tune_threshold(probs, verbal, "kappa")
    return out


def report_for(records: Sequence[PredictionRecord], thresholds: dict | None = None, judge=None) -> M.MetricReport:
    inferred = readable = None
    if judge is not None:
        jr = judge_consistency(records, judge)
        inferred, readable = jr.inferred, jr.readable
    return M.build_report(
        [r.probability for r in records], [r.gold for r in records], [r.verbalized for r in records],
        [r.parsed for r in records], thresholds, inferred, readable,
    )


def run_clsgen_eval(model: DualHeadModel, instances, tokenizer: Tokenizer, label_map: LabelMap,
                    thresholds: dict | float | None = None, judge=None, templates: PromptTemplates = DESK,
                    task_days: int = 30, max_new: int = 32) -> tuple[list[PredictionRecord], M.MetricReport]:
    """Full report with the default 0.5 rows and, if given, tuned-threshold rows."""
    if isinstance(thresholds, (int, float)):
        thresholds = {"f1": float(thresholds), "kappa": float(thresholds)}
    records = predict(model, instances, tokenizer, label_map, templates, task_days, max_new)
    return records, report_for(records, thresholds, judge)


def dev_metrics(records: Sequence[PredictionRecord]) -> dict:
    """Per-epoch selection metrics, kappa at the default 0.5 threshold."""
    probs = np.array([r.probability for r in records])
    gold = [r.gold for r in records]
    verbal = [r.verbalized for r in records]
    head = M.threshold_labels(probs, 0.5)
    return {
        "auroc_cls": M.safe(M.auroc, probs, gold),
        "auroc_align": M.safe(M.auroc_alignment, probs, verbal),
        "kappa": M.safe(M.cohens_kappa, head, verbal),
        "parsability": M.parsability([r.parsed for r in records]),
    }


def dev_evaluator(instances, tokenizer: Tokenizer, label_map: LabelMap, templates: PromptTemplates = DESK,
                  task_days: int = 30, max_new: int = 32, dev_examples=None):
    """Callable ``(model, epoch) -> metrics`` for :func:`clsgen.training.train`."""
    from .training import joint_loss

    def evaluate(model: DualHeadModel, epoch: int) -> dict:
        recs = predict(model, instances, tokenizer, label_map, templates, task_days, max_new)
        out = dev_metrics(recs)
        if dev_examples:
            loss, parts = joint_loss(model, dev_examples)
            out.update({f"dev_loss_{k}": v for k, v in parts.items()})
        return out

    return evaluate


# ---------------------------------------------------------------------------
# inference-only baselines
# ---------------------------------------------------------------------------


@dataclass
class AggregateResult:
    means: dict
    stds: dict
    n_runs: int
    runs: list = field(default_factory=list)
    exclusions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(runs: Sequence[dict], exclusions: dict | None = None) -> AggregateResult:
    """Mean and sample standard deviation per metric (``None`` when unavailable)."""
    keys = sorted({k for r in runs for k in r})
    means, stds = {}, {}
    for k in keys:
        vals = [r.get(k) for r in runs]
        if any(v is None for v in vals):
            means[k] = stds[k] = None
            continue
        a = np.asarray(vals, dtype=np.float64)
        means[k] = float(a.mean())
        # identical runs give exactly 0, not mean-rounding noise
        stds[k] = float(a.std(ddof=1)) if len(a) > 1 and np.ptp(a) > 0 else 0.0
    return AggregateResult(means, stds, len(runs), list(runs), dict(exclusions or {}))


def run_label_prediction(text_model: TextModel, instances, label_map: LabelMap, n_runs: int = 10) -> AggregateResult:
    gold = [x.label for x in instances]
    runs, unparsable = [], 0
    for run in range(n_runs):
        parsed = [parse_classification(t, label_map) for t in text_model.complete(instances, "label", run)]
        pred = [p.label for p in parsed]
        unparsable += sum(not p.parsable for p in parsed)
        p, r, f = M.precision_recall_f1(pred, gold, "wrong")
        pe, re_, fe = M.precision_recall_f1(pred, gold, "exclude")
        runs.append({"auroc": None, "precision": p, "recall": r, "f1": f, "parsability": M.parsability(parsed),
                     "precision_excl": pe, "recall_excl": re_, "f1_excl": fe})
    return aggregate(runs, {"unparsable_outputs": unparsable, "outputs": n_runs * len(instances)})


def run_verbalized_probability(text_model: TextModel, instances, n_runs: int = 10) -> AggregateResult:
    gold = [x.label for x in instances]
    runs, unparsable = [], 0
    for run in range(n_runs):
        parsed = [parse_probability(t) for t in text_model.complete(instances, "probability", run)]
        unparsable += sum(not p.parsable for p in parsed)
        scores = np.array([p.probability_pct / 100.0 if p.parsable else np.nan for p in parsed])
        keep = ~np.isnan(scores)
        labels_kept = [g for g, k in zip(gold, keep) if k]
        auc = M.safe(M.auroc, scores[keep], labels_kept) if keep.any() else None
        pred = [None if np.isnan(s) else int(s >= 0.5) for s in scores]
        p, r, f = M.precision_recall_f1(pred, gold, "wrong")
        runs.append({"auroc": auc, "precision": p, "recall": r, "f1": f, "parsability": M.parsability(parsed)})
    return aggregate(runs, {"unparsable_outputs": unparsable, "outputs": n_runs * len(instances)})


@dataclass
class SelfConsistencyResult:
    vote_fraction: np.ndarray  # NaN where no run parsed
    majority: list
    report: M.MetricReport
    ledger: dict

    def to_dict(self) -> dict:
        return {"vote_fraction": [None if np.isnan(v) else float(v) for v in self.vote_fraction],
                "majority": self.majority, "report": self.report.to_dict(), "ledger": self.ledger}


def vote(labels: Sequence[int | None]) -> tuple[float | None, int | None]:
    """Positive-vote fraction over parsed runs and the majority label (ties negative)."""
    votes = [v for v in labels if v is not None]
    if not votes:
        return None, None
    frac = sum(votes) / len(votes)
    return frac, int(frac > 0.5)


def run_self_consistency(text_model: TextModel, instances, label_map: LabelMap,
                         n_runs: int = 10) -> SelfConsistencyResult:
    n = len(instances)
    per_run = []
    for run in range(n_runs):
        per_run.append([parse_classification(t, label_map).label
                        for t in text_model.complete(instances, "label", run)])
    fracs, majority = np.full(n, np.nan), []
    for i in range(n):
        f, lab = vote([r[i] for r in per_run])
        if f is not None:
            fracs[i] = f
        majority.append(lab)
    gold = [x.label for x in instances]
    excluded = int(np.isnan(fracs).sum())
    keep = ~np.isnan(fracs)
    rep = M.MetricReport(n=n)
    rep.auroc = M.safe(M.auroc, fracs[keep], [g for g, k in zip(gold, keep) if k]) if keep.any() else None
    p, r, f = M.precision_recall_f1(majority, gold, "wrong")
    rep.default = {"precision": p, "recall": r, "f1": f}
    rep.parsability = (n - excluded) / n if n else None
    outputs = n * n_runs
    parsed_outputs = sum(v is not None for run in per_run for v in run)
    rep.exclusions = {"instances_excluded": excluded, "instances_evaluated": n - excluded}
    rep.extra = {"run_parse_rate": parsed_outputs / outputs if outputs else None, "tie_rule": "negative"}
    ledger = {"instances": n, "evaluated": n - excluded, "excluded": excluded,
              "outputs": outputs, "unparsable_outputs": outputs - parsed_outputs}
    return SelfConsistencyResult(fracs, majority, rep, ledger)


# ---------------------------------------------------------------------------
# judges
# ---------------------------------------------------------------------------


@dataclass
class JudgeResult:
    inferred: list
    readable: list
    rli: float | None
    rl_kappa: float | None
    readability: float | None
    coverage: float

    def to_dict(self) -> dict:
        return {"rli": self.rli, "rl_kappa": self.rl_kappa, "readability": self.readability,
                "coverage": self.coverage}


class RemoteJudge:
    """LLM judge over the chat-completions protocol with the fixed judge prompts."""

    def __init__(self, client: ChatClient, label_map: LabelMap, template: str = JUDGE_TEMPLATE,
                 max_tokens: int = 16):
        self.client = client
        self.label_map = label_map
        self.template = template
        self.max_tokens = max_tokens

    def _ask(self, system: str, user: str) -> str:
        msgs = [{"role": "system", "content": system}, {"role": "user", "content": user}]
        return self.client.complete(msgs, temperature=0.0, max_tokens=self.max_tokens)

    def infer_label(self, explanation: str) -> int | None:
        lm = self.label_map
        user = self.template.format(explanation=explanation, negative=lm.negative_string,
                                    positive=lm.positive_string)
        return parse_classification(self._ask(JUDGE_SYSTEM_PROMPT, user), lm).label

    def readable(self, text: str) -> bool | None:
        reply = self._ask(READABILITY_SYSTEM_PROMPT, READABILITY_TEMPLATE.format(text=text))
        verdicts = [w for w in reply.replace(":", " ").split() if w in ("READABLE", "UNREADABLE")]
        if not verdicts:
            return None
        return verdicts[-1] == "READABLE"


def judge_consistency(records: Sequence[PredictionRecord], judge) -> JudgeResult:
    """Ask ``judge`` for the label implied by each explanation, and its readability.

    Unparsable records are skipped; judge transport failures leave gaps and
    lower ``coverage``.
    """
    inferred: list = [None] * len(records)
    readable: list = [None] * len(records)
    asked = answered = 0
    for i, r in enumerate(records):
        if not r.parsed.parsable:
            continue
        asked += 1
        try:
            inferred[i] = judge.infer_label(r.parsed.explanation)
            readable[i] = judge.readable(r.parsed.explanation)
            answered += 1
        except TransportError as exc:
            log.warning("judge unreachable for %s: %s", r.id, exc)
    verbal = [r.verbalized for r in records]
    rk = M.safe(M.rationale_label_metrics, inferred, verbal)
    done = [x for x in readable if x is not None]
    return JudgeResult(
        inferred=inferred, readable=readable,
        rli=None if rk is None else rk[0], rl_kappa=None if rk is None else rk[1],
        readability=(sum(done) / len(done)) if done else None,
        coverage=(answered / asked) if asked else 0.0,
    )


# ---------------------------------------------------------------------------
# collapse ablation
# ---------------------------------------------------------------------------


def collapse_point(model: DualHeadModel, instances, tokenizer, label_map, templates=DESK,
                   task_days: int = 30, max_new: int = 32) -> dict:
    """Parsability, head AUROC and head-vs-text kappa (threshold 0.5).

    A generation that does not parse counts as disagreeing with the head.
    """
    recs = predict(model, instances, tokenizer, label_map, templates, task_days, max_new)
    probs = np.array([r.probability for r in recs])
    verbal = [r.verbalized for r in recs]
    kappa = M.safe(M.cohens_kappa, M.threshold_labels(probs, 0.5), verbal, unparsable="wrong")
    return {
        "parsability": M.parsability([r.parsed for r in recs]),
        "auroc": M.safe(M.auroc, probs, [r.gold for r in recs]),
        "kappa": 0.0 if kappa is None else kappa,
    }


def collapse_ablation(pretrained: DualHeadModel, train_examples, dev_instances, tokenizer, label_map,
                      config, templates=DESK, task_days: int = 30, max_new: int = 32) -> list[dict]:
    """Curves of (parsability, auroc, kappa) from epoch 0 through ``config.epochs``.

    ``config.mode`` picks the regime: ``cls_only`` for the ablation,
    ``joint`` for the paired control.
    """
    from .training import configure_trainable, train

    model = pretrained.clone()
    configure_trainable(model, config)
    curve = [{"epoch": 0, **collapse_point(model, dev_instances, tokenizer, label_map, templates, task_days, max_new)}]

    def evaluate(m, epoch):
        return collapse_point(m, dev_instances, tokenizer, label_map, templates, task_days, max_new)

    for rec in train(model, train_examples, config, evaluate=evaluate):
        curve.append({"epoch": rec.epoch, **rec.metrics})
    return curve


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    from scipy.stats import spearmanr

    if np.ptp(np.asarray(x, dtype=float)) == 0 or np.ptp(np.asarray(y, dtype=float)) == 0:
        return 0.0
    rho = spearmanr(x, y).statistic
    return 0.0 if rho is None or np.isnan(rho) else float(rho)


def write_records(path, records: Sequence[PredictionRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_records(path) -> list[PredictionRecord]:
    with open(path) as fh:
        return [PredictionRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
