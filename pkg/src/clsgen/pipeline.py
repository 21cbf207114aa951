"""Run configuration, profiles and the staged pipeline behind the command line.

Every stage writes its artifacts into one output directory with the stage's
config hash and the seed in each file name, then a manifest. A stage whose
manifest and artifacts already exist is skipped, so reruns are cheap and
never touch artifacts that belong to other stages.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .datagen import RemoteTeacher, Validator, build_dataset, trials_to_jsonl
from .evalsuite import (
    DeskTextModel,
    RemoteJudge,
    dev_evaluator,
    judge_consistency,
    predict,
    read_records,
    report_for,
    run_label_prediction,
    run_self_consistency,
    run_verbalized_probability,
    tune_thresholds,
    write_records,
)
from .model import DualHeadModel, ModelConfig, load_checkpoint, save_checkpoint
from .remote import DEFAULT_TOKEN_ENV, ChatClient
from .synth import (
    CorpusMix,
    OracleJudge,
    OracleTeacher,
    SynthTaskSpec,
    corpus_vocabulary,
    gen_pretrain_corpus,
    gen_splits,
    read_instances,
    read_jsonl,
    write_jsonl,
)
from .textproto import DESK, Tokenizer
from .training import (
    EpochRecord,
    TrainConfig,
    encode_instance,
    encode_text,
    quality_scores,
    select_checkpoint,
    train,
)

log = logging.getLogger(__name__)

SECTIONS = ("task", "sizes", "corpus", "model", "pretrain", "datagen", "teacher", "train", "eval", "judge")
BASELINES = ("label-pred", "verb-prob", "self-consistency")


class ConfigError(ValueError):
    """The run configuration is malformed."""


class MissingArtifactError(FileNotFoundError):
    """An upstream stage has not been run for this config and seed."""


BASE = {
    "task": {"prevalence": 0.15},
    "sizes": {"train": 800, "dev": 200, "test": 400},
    "corpus": {"n_docs": 3000, "mix": {}},
    "model": {},
    "pretrain": {"lr": 3e-3, "warmup_steps": 50, "epochs": 2, "micro_batch": 16, "mode": "lm_pretrain"},
    "datagen": {"K": 5, "max_explanation_tokens": 384, "min_coverage": 0.9, "workers": 1, "log_trials": False},
    "teacher": {"source": "oracle", "oracle": {"p_pos": 0.9, "p_neg": 0.9, "validity": 0.95},
                "remote": {"base_url": None, "model": None, "token_env": DEFAULT_TOKEN_ENV,
                           "temperature": 0.7}},
    "train": {"lr": 1e-3, "warmup_steps": 10, "epochs": 15, "micro_batch": 8, "mode": "joint"},
    "eval": {"max_new": 32, "temperature": 0.7, "runs": 10},
    "judge": {"source": "oracle", "remote": {"base_url": None, "model": None, "token_env": DEFAULT_TOKEN_ENV}},
}

PROFILES = {
    # the setup used by the desk experiments (collapse ablation and its joint control)
    "desk": {},
    # two-minute end-to-end run
    "smoke": {
        "sizes": {"train": 120, "dev": 40, "test": 40},
        "corpus": {"n_docs": 1500},
        "model": {"d_model": 48, "n_layers": 2, "n_heads": 4, "d_ff": 128, "max_seq_len": 128,
                  "cls_hidden_dim": 48, "lora_rank": 4, "lora_alpha": 8.0},
        "pretrain": {"epochs": 3},
        "train": {"epochs": 3},
        "eval": {"max_new": 24, "runs": 2},
    },
    # imbalanced 4% task, K=5, 20 epochs
    "paper-shape": {
        "task": {"prevalence": 0.04},
        "sizes": {"train": 2500, "dev": 500, "test": 1000},
        "train": {"epochs": 20},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class RunConfig:
    profile: str = "smoke"
    seed: int = 0
    sections: dict = field(default_factory=dict)

    @classmethod
    def build(cls, profile: str = "smoke", overrides: dict | None = None, seed: int | None = None) -> "RunConfig":
        overrides = dict(overrides or {})
        profile = overrides.pop("profile", profile)
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        file_seed = overrides.pop("seed", 0)
        unknown = set(overrides) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}; allowed: {list(SECTIONS)}")
        sections = deep_merge(deep_merge(BASE, PROFILES[profile]), overrides)
        cfg = cls(profile=profile, seed=int(file_seed if seed is None else seed), sections=sections)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, profile: str = "smoke", seed: int | None = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a JSON object")
        return cls.build(profile, data, seed)

    def __getitem__(self, key: str) -> dict:
        return self.sections[key]

    def validate(self) -> None:
        try:
            self.task_spec()
            for split in ("train", "dev", "test"):
                if int(self["sizes"].get(split, 0)) < 2:
                    raise ConfigError(f"sizes.{split} must be at least 2")
            CorpusMix(**self["corpus"].get("mix", {}))
            ModelConfig(**{**self["model"], "vocab_size": 8, "eog_id": 1})
            self.train_config("pretrain")
            self.train_config("train")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from None
        if int(self["datagen"]["K"]) < 1:
            raise ConfigError("datagen.K must be >= 1")
        for role in ("teacher", "judge"):
            src = self[role].get("source")
            if src not in ("oracle", "remote"):
                raise ConfigError(f"{role}.source must be 'oracle' or 'remote', got {src!r}")
            if src == "remote":
                r = self[role].get("remote") or {}
                if not r.get("base_url") or not r.get("model"):
                    raise ConfigError(f"{role}.remote needs base_url and model when {role}.source is 'remote'")

    def task_spec(self) -> SynthTaskSpec:
        return SynthTaskSpec(**self["task"])

    def model_config(self, tokenizer: Tokenizer) -> ModelConfig:
        return ModelConfig(**{**self["model"], "vocab_size": len(tokenizer), "eog_id": tokenizer.eog_id})

    def train_config(self, section: str = "train", **override) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self[section], **override})

    def part(self, *names) -> dict:
        return {n: self[n] for n in names}

    def to_dict(self) -> dict:
        return {"profile": self.profile, "seed": self.seed, **self.sections}


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


class Pipeline:
    """Stage runner bound to one config, seed and output directory."""

    def __init__(self, config: RunConfig, out_dir, force: bool = False):
        self.config = config
        self.seed = config.seed
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.force = force
        self.templates = DESK

    # naming -----------------------------------------------------------------

    def stage_hash(self, stage: str, **extra) -> str:
        c = self.config
        if stage == "synth":
            key = c.part("task", "sizes", "corpus")
        elif stage == "pretrain":
            key = {"synth": self.stage_hash("synth"), **c.part("model", "pretrain")}
        elif stage == "data":
            teacher = dict(c["teacher"])
            teacher = {"source": teacher["source"], teacher["source"]: teacher.get(teacher["source"])}
            key = {"pretrain": self.stage_hash("pretrain"), "datagen": c["datagen"], "teacher": teacher}
        elif stage == "train":
            key = {"pretrain": self.stage_hash("pretrain"), "data": self.stage_hash("data"),
                   "train": c["train"], "max_new": c["eval"]["max_new"]}
        elif stage == "eval":
            key = {"train": self.stage_hash("train"), "threshold": extra["threshold"]}
        elif stage == "judge":
            judge = {"source": c["judge"]["source"]}
            if judge["source"] == "remote":
                judge["remote"] = c["judge"]["remote"]
            key = {"eval": self.stage_hash("eval", threshold=extra["threshold"]), "judge": judge}
        elif stage == "baseline":
            key = {"pretrain": self.stage_hash("pretrain"), "method": extra["method"], "runs": extra["runs"],
                   "eval": c["eval"]}
        else:
            raise ValueError(f"unknown stage {stage!r}")
        return config_hash({"stage": stage, "seed": self.seed, **key})

    def path(self, name: str, h: str, suffix: str) -> Path:
        return self.out / f"{name}-{h}-s{self.seed}{suffix}"

    def manifest_path(self, stage: str, h: str) -> Path:
        return self.path(f"manifest-{stage}", h, ".json")

    def done(self, stage: str, h: str) -> dict | None:
        mp = self.manifest_path(stage, h)
        if self.force or not mp.exists():
            return None
        manifest = json.loads(mp.read_text())
        if all((self.out / a).exists() for a in manifest["artifacts"]):
            log.info("%s up to date (%s)", stage, mp.name)
            return manifest
        return None

    def finish(self, stage: str, h: str, artifacts: list[Path], info: dict | None = None) -> dict:
        manifest = {"stage": stage, "config_hash": h, "seed": self.seed, "profile": self.config.profile,
                    "artifacts": [str(Path(p).relative_to(self.out)) for p in artifacts], "info": info or {}}
        _write_json(self.manifest_path(stage, h), manifest)
        return manifest

    def require(self, stage: str, h: str, command: str) -> dict:
        mp = self.manifest_path(stage, h)
        if not mp.exists():
            raise MissingArtifactError(
                f"no {stage} artifacts for this config and seed {self.seed} in {self.out} "
                f"(expected {mp.name}); run `clsgen {command}` first with the same --config/--seed/--out")
        return json.loads(mp.read_text())

    # synth-gen ----------------------------------------------------------------

    def synth_gen(self) -> dict:
        h = self.stage_hash("synth")
        if (m := self.done("synth", h)) is not None:
            return m
        c = self.config
        spec = c.task_spec()
        splits = gen_splits(spec, {k: int(v) for k, v in c["sizes"].items()}, self.seed)
        arts = []
        for name, items in splits.items():
            arts.append(write_jsonl(self.path(f"synth-{name}", h, ".jsonl"), [x.to_dict() for x in items]))
        corpus = gen_pretrain_corpus(spec, int(c["corpus"]["n_docs"]), self.seed + 7919, self.templates,
                                     CorpusMix(**c["corpus"].get("mix", {})))
        arts.append(write_jsonl(self.path("synth-corpus", h, ".jsonl"), [{"text": t} for t in corpus]))
        spec_path = self.path("synth-task", h, ".json")
        _write_json(spec_path, spec.to_dict())
        arts.append(spec_path)
        info = {k: {"n": len(v), "positives": sum(x.label for x in v)} for k, v in splits.items()}
        return self.finish("synth", h, arts, info)

    def load_split(self, split: str):
        h = self.stage_hash("synth")
        self.require("synth", h, "synth-gen")
        return read_instances(self.path(f"synth-{split}", h, ".jsonl"))

    # pretrain -----------------------------------------------------------------

    def pretrain(self) -> dict:
        h = self.stage_hash("pretrain")
        if (m := self.done("pretrain", h)) is not None:
            return m
        sh = self.stage_hash("synth")
        self.require("synth", sh, "synth-gen")
        c = self.config
        spec = c.task_spec()
        corpus = [r["text"] for r in read_jsonl(self.path("synth-corpus", sh, ".jsonl"))]
        tok = Tokenizer.from_texts(corpus, extra=corpus_vocabulary(spec, self.templates))
        model = DualHeadModel(c.model_config(tok), seed=self.seed)
        examples = [encode_text(t, tok, model.config.max_seq_len) for t in corpus]
        log_path = self.path("pretrain-log", h, ".jsonl")
        log_path.unlink(missing_ok=True)
        records = train(model, examples, c.train_config("pretrain"), log_path=log_path)
        ckpt = save_checkpoint(model, self.path("pretrain", h, ".npz"), epoch=len(records), seed=self.seed,
                               extra={"tokenizer": tok.to_list(), "config_hash": h})
        return self.finish("pretrain", h, [ckpt, log_path], {"final_loss": records[-1].train_loss})

    def load_pretrained(self) -> tuple[DualHeadModel, Tokenizer]:
        h = self.stage_hash("pretrain")
        self.require("pretrain", h, "pretrain")
        return load_model(self.path("pretrain", h, ".npz"))

    # build-data ---------------------------------------------------------------

    def teacher(self):
        c = self.config
        spec = c.task_spec()
        if c["teacher"]["source"] == "oracle":
            o = c["teacher"]["oracle"]
            return OracleTeacher(spec, p_pos=o["p_pos"], p_neg=o["p_neg"], validity=o["validity"], seed=self.seed)
        r = c["teacher"]["remote"]
        client = ChatClient(r["base_url"], r["model"], token_env=r.get("token_env", DEFAULT_TOKEN_ENV))
        return RemoteTeacher(client, self.templates, spec.task_days, temperature=r.get("temperature", 0.7))

    def build_data(self) -> dict:
        h = self.stage_hash("data")
        if (m := self.done("data", h)) is not None:
            return m
        c = self.config
        d = c["datagen"]
        train_set = self.load_split("train")
        _, tok = self.load_pretrained()
        validator = Validator(int(d["max_explanation_tokens"]), tok, float(d["min_coverage"]))
        kept, report, trials = build_dataset(train_set, self.teacher(), int(d["K"]), c.task_spec().label_map,
                                             validator, log_trials=bool(d["log_trials"]),
                                             workers=int(d["workers"]))
        arts = [write_jsonl(self.path("data-train", h, ".jsonl"), [x.to_dict() for x in kept])]
        rp = self.path("data-report", h, ".json")
        _write_json(rp, report.to_dict())
        tp = self.path("data-report", h, ".txt")
        tp.write_text(report.to_text() + "\n")
        arts += [rp, tp]
        if d["log_trials"]:
            lp = self.path("data-trials", h, ".jsonl")
            lp.write_text(trials_to_jsonl(trials))
            arts.append(lp)
        return self.finish("data", h, arts, {"retention": report.retention, "kept": len(kept)})

    # train --------------------------------------------------------------------

    def train(self) -> dict:
        h = self.stage_hash("train")
        if (m := self.done("train", h)) is not None:
            return m
        c = self.config
        dh = self.stage_hash("data")
        self.require("data", dh, "build-data")
        data = read_instances(self.path("data-train", dh, ".jsonl"))
        if not data:
            raise MissingArtifactError("build-data kept no instances; nothing to train on")
        dev = self.load_split("dev")
        model, tok = self.load_pretrained()
        spec = c.task_spec()
        examples = [encode_instance(x, tok, spec.label_map, model.config.max_seq_len, self.templates,
                                    spec.task_days) for x in data]
        ckpt_dir = self.out / f"train-{h}-s{self.seed}"
        log_path = self.path("train-log", h, ".jsonl")
        log_path.unlink(missing_ok=True)
        evaluate = dev_evaluator(dev, tok, spec.label_map, self.templates, spec.task_days, c["eval"]["max_new"])
        records = train(model, examples, c.train_config("train"), evaluate=evaluate, checkpoint_dir=ckpt_dir,
                        log_path=log_path, checkpoint_extra={"tokenizer": tok.to_list(), "config_hash": h})
        arts = [log_path] + [Path(r.checkpoint) for r in records]
        return self.finish("train", h, arts, {"epochs": len(records)})

    def train_records(self) -> list[EpochRecord]:
        h = self.stage_hash("train")
        self.require("train", h, "train")
        out = []
        for row in read_jsonl(self.path("train-log", h, ".jsonl")):
            out.append(EpochRecord(**row))
        return out

    # select -------------------------------------------------------------------

    def select(self) -> dict:
        h = self.stage_hash("train")
        if (m := self.done("select", h)) is not None:
            return m
        records = self.train_records()
        best = select_checkpoint(records)
        scores = quality_scores(records)
        sp = self.path("select", h, ".json")
        _write_json(sp, {"epoch": best.epoch, "checkpoint": Path(best.checkpoint).name,
                         "checkpoint_path": str(Path(best.checkpoint).relative_to(self.out)),
                         "quality_scores": {str(r.epoch): float(s) for r, s in zip(records, scores)}})
        return self.finish("select", h, [sp], {"epoch": best.epoch})

    def load_selected(self) -> tuple[DualHeadModel, Tokenizer, dict]:
        h = self.stage_hash("train")
        self.require("select", h, "select")
        sel = json.loads(self.path("select", h, ".json").read_text())
        model, tok = load_model(self.out / sel["checkpoint_path"])
        return model, tok, sel

    # eval ---------------------------------------------------------------------

    def evaluate(self, threshold: str = "default") -> dict:
        if threshold not in ("default", "tuned"):
            raise ConfigError("threshold must be 'default' or 'tuned'")
        h = self.stage_hash("eval", threshold=threshold)
        if (m := self.done("eval", h)) is not None:
            return m
        c = self.config
        spec = c.task_spec()
        model, tok, sel = self.load_selected()
        max_new = c["eval"]["max_new"]
        thresholds = None
        if threshold == "tuned":
            dev_recs = predict(model, self.load_split("dev"), tok, spec.label_map, self.templates,
                               spec.task_days, max_new)
            thresholds = tune_thresholds(dev_recs)
        recs = predict(model, self.load_split("test"), tok, spec.label_map, self.templates, spec.task_days, max_new)
        report = report_for(recs, thresholds)
        report.extra = {"selected_epoch": sel["epoch"], "threshold_mode": threshold}
        rp = self.path("eval-records", h, ".jsonl")
        write_records(rp, recs)
        mp = self.path("eval-report", h, ".json")
        mp.write_text(report.to_json() + "\n")
        return self.finish("eval", h, [rp, mp], {"auroc": report.auroc, "parsability": report.parsability})

    # judge --------------------------------------------------------------------

    def judge_model(self):
        c = self.config
        if c["judge"]["source"] == "oracle":
            return OracleJudge(c.task_spec())
        r = c["judge"]["remote"]
        client = ChatClient(r["base_url"], r["model"], token_env=r.get("token_env", DEFAULT_TOKEN_ENV))
        return RemoteJudge(client, c.task_spec().label_map)

    def judge(self, threshold: str = "default") -> dict:
        h = self.stage_hash("judge", threshold=threshold)
        if (m := self.done("judge", h)) is not None:
            return m
        eh = self.stage_hash("eval", threshold=threshold)
        self.require("eval", eh, f"eval --threshold {threshold}")
        recs = read_records(self.path("eval-records", eh, ".jsonl"))
        result = judge_consistency(recs, self.judge_model())
        jp = self.path("judge", h, ".json")
        jp.write_text(json.dumps(M._rounded(result.to_dict()), sort_keys=True, indent=2) + "\n")
        return self.finish("judge", h, [jp], {"rli": result.rli})

    # baselines ----------------------------------------------------------------

    def baseline(self, method: str, runs: int | None = None) -> dict:
        if method not in BASELINES:
            raise ConfigError(f"baseline method must be one of {BASELINES}")
        c = self.config
        runs = int(runs if runs is not None else c["eval"]["runs"])
        if runs < 1:
            raise ConfigError("--runs must be >= 1")
        h = self.stage_hash("baseline", method=method, runs=runs)
        if (m := self.done("baseline", h)) is not None:
            return m
        spec = c.task_spec()
        model, tok = self.load_pretrained()
        text_model = DeskTextModel(model, tok, self.templates, spec.task_days, c["eval"]["max_new"],
                                   float(c["eval"]["temperature"]), seed=self.seed)
        test = self.load_split("test")
        if method == "label-pred":
            result = run_label_prediction(text_model, test, spec.label_map, runs).to_dict()
        elif method == "verb-prob":
            result = run_verbalized_probability(text_model, test, runs).to_dict()
        else:
            sc = run_self_consistency(text_model, test, spec.label_map, runs)
            result = {"report": sc.report.to_dict(), "ledger": sc.ledger}
        result["method"] = method
        bp = self.path(f"baseline-{method}", h, ".json")
        bp.write_text(json.dumps(M._rounded(result), sort_keys=True, indent=2) + "\n")
        return self.finish("baseline", h, [bp], {"method": method, "runs": runs})

    # report -------------------------------------------------------------------

    def report(self) -> dict:
        c = self.config
        eh = self.stage_hash("eval", threshold="default")
        self.require("eval", eh, "eval")
        parts = {"eval_default": json.loads(self.path("eval-report", eh, ".json").read_text())}
        th = self.stage_hash("eval", threshold="tuned")
        if self.manifest_path("eval", th).exists():
            parts["eval_tuned"] = json.loads(self.path("eval-report", th, ".json").read_text())
        for thr in ("default", "tuned"):
            jh = self.stage_hash("judge", threshold=thr)
            if self.manifest_path("judge", jh).exists():
                parts["judge"] = json.loads(self.path("judge", jh, ".json").read_text())
                break
        dh = self.stage_hash("data")
        if self.manifest_path("data", dh).exists():
            parts["datagen"] = json.loads(self.path("data-report", dh, ".json").read_text())
        runs = int(c["eval"]["runs"])
        for method in BASELINES:
            bh = self.stage_hash("baseline", method=method, runs=runs)
            if self.manifest_path("baseline", bh).exists():
                parts[f"baseline_{method}"] = json.loads(self.path(f"baseline-{method}", bh, ".json").read_text())
        h = config_hash({"report": {k: v for k, v in parts.items()}, "seed": self.seed})
        rp = self.path("report", h, ".json")
        body = {"config": c.to_dict(), **parts}
        rp.write_text(json.dumps(M._rounded(body), sort_keys=True, indent=2) + "\n")
        mdp = self.path("report", h, ".md")
        mdp.write_text(render_markdown(parts, c))
        return self.finish("report", h, [rp, mdp], {"report": rp.name})


def load_model(path) -> tuple[DualHeadModel, Tokenizer]:
    model, meta = load_checkpoint(path)
    vocab = meta.get("extra", {}).get("tokenizer")
    if not vocab:
        raise MissingArtifactError(f"{path} carries no tokenizer")
    return model, Tokenizer.from_list(vocab)


# ---------------------------------------------------------------------------
# markdown tables
# ---------------------------------------------------------------------------


def _fmt(v, digits: int = 4) -> str:
    if v is None:
        return "N/A"
    return f"{v:.{digits}f}"


def _pm(means: dict, stds: dict, key: str) -> str:
    if means.get(key) is None:
        return "N/A"
    return f"{means[key]:.4f} ± {stds[key]:.4f}"


def render_markdown(parts: dict, config: RunConfig) -> str:
    lines = [f"# CLSGen run report (profile {config.profile}, seed {config.seed})", ""]
    lines += ["## Classification", "",
              "| Method | AUROC | F1 (default) | F1 (threshold) | Precision | Recall |",
              "|---|---|---|---|---|---|"]
    for key, name in (("baseline_label-pred", "Label prediction"), ("baseline_verb-prob", "Verbalized probability")):
        if key in parts:
            mu, sd = parts[key]["means"], parts[key]["stds"]
            lines.append(f"| {name} | {_pm(mu, sd, 'auroc')} | {_pm(mu, sd, 'f1')} | N/A | "
                         f"{_pm(mu, sd, 'precision')} | {_pm(mu, sd, 'recall')} |")
    if "baseline_self-consistency" in parts:
        r = parts["baseline_self-consistency"]["report"]
        lines.append(f"| Self-consistency | {_fmt(r['auroc'])} | {_fmt(r['default'].get('f1'))} | N/A | "
                     f"{_fmt(r['default'].get('precision'))} | {_fmt(r['default'].get('recall'))} |")
    ev = parts["eval_default"]
    tuned = parts.get("eval_tuned", {}).get("tuned", {})
    src = tuned if tuned else ev["default"]
    lines.append(f"| CLSGen | {_fmt(ev['auroc'])} | {_fmt(ev['default'].get('f1'))} | {_fmt(tuned.get('f1'))} | "
                 f"{_fmt(src.get('precision'))} | {_fmt(src.get('recall'))} |")
    lines += ["", "## Consistency", "",
              "| AUROC-Align | Kappa (default) | Kappa (threshold) | Parsability | RLI | R-L Kappa | Readability |",
              "|---|---|---|---|---|---|---|"]
    j = parts.get("judge", {})
    lines.append(f"| {_fmt(ev['auroc_alignment'])} | {_fmt(ev['default'].get('kappa'))} | "
                 f"{_fmt(tuned.get('kappa'))} | {_fmt(ev['parsability'])} | {_fmt(j.get('rli'))} | "
                 f"{_fmt(j.get('rl_kappa'))} | {_fmt(j.get('readability'))} |")
    if "datagen" in parts:
        lines += ["", "## Data generation", "", "| Status | False | True | True/Total |", "|---|---|---|---|"]
        for row in parts["datagen"]["rows"]:
            lines.append(f"| {row['status']} | {row['false']} | {row['true']} | {100 * row['true_over_total']:.1f}% |")
        lines.append("")
        lines.append(f"Retention {parts['datagen']['retention']:.4f}")
    return "\n".join(lines) + "\n"


def run_all(pipe: Pipeline, baselines: bool = True) -> dict:
    """Every stage in order; returns the report manifest."""
    pipe.synth_gen()
    pipe.pretrain()
    pipe.build_data()
    pipe.train()
    pipe.select()
    pipe.evaluate("default")
    pipe.evaluate("tuned")
    pipe.judge("default")
    if baselines:
        for method in BASELINES:
            pipe.baseline(method)
    return pipe.report()
