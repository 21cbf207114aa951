"""Joint generation + classification training, ablations and checkpoint selection."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import DualHeadModel, save_checkpoint
from .synth import Instance
from .textproto import DESK, LabelMap, PromptTemplates, Tokenizer, assemble_input, render_target

log = logging.getLogger(__name__)

MODES = ("joint", "cls_only", "lm_pretrain")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class Example:
    """Token ids plus the bookkeeping the losses need.

    Tokens ``ids[target_from:]`` are scored by the LM loss; ``prefix_len``
    locates h_n.
    """

    ids: np.ndarray
    prefix_len: int
    target_from: int
    label: int = 0
    id: str = ""


@dataclass
class TrainConfig:
    lr: float = 2e-3
    warmup_steps: int = 10
    weight_decay: float = 0.01
    epochs: int = 3
    micro_batch: int = 8
    grad_accum: int = 1
    lambda_cls: float = 1.0
    mode: str = "joint"
    seed: int = 0
    base_frozen: bool = True
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_grad_norm: float | None = 1.0
    shuffle: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr <= 0 or self.epochs < 1 or self.micro_batch < 1 or self.grad_accum < 1:
            raise ValueError("lr, epochs, micro_batch and grad_accum must be positive")
        if self.warmup_steps < 0 or self.weight_decay < 0 or self.lambda_cls < 0:
            raise ValueError("warmup_steps, weight_decay and lambda_cls must be non-negative")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accum

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class EpochRecord:
    epoch: int
    metrics: dict = field(default_factory=dict)
    checkpoint: str | None = None
    train_loss: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def encode_instance(inst: Instance, tokenizer: Tokenizer, label_map: LabelMap, max_seq_len: int,
                    templates: PromptTemplates = DESK, task_days: int = 30,
                    explanation: str | None = None) -> Example:
    """Prompt ids (prefix) followed by the rendered target, if an explanation exists."""
    bundle = templates.bundle(inst.document, task_days)
    expl = inst.explanation if explanation is None else explanation
    target = [] if expl is None else tokenizer.encode(render_target(expl, inst.label, label_map))
    prompt, plen = assemble_input(bundle, tokenizer, max_seq_len - len(target))
    ids = np.array(prompt + target, dtype=np.int64)
    return Example(ids=ids, prefix_len=plen, target_from=plen if target else len(ids),
                   label=int(inst.label), id=inst.id)


def encode_text(text: str, tokenizer: Tokenizer, max_seq_len: int) -> Example:
    ids = np.array(tokenizer.encode(text)[:max_seq_len], dtype=np.int64)
    return Example(ids=ids, prefix_len=len(ids), target_from=1)


def pad_batch(examples: Sequence[Example], pad_id: int = 0, upto: str = "full") -> tuple[np.ndarray, np.ndarray]:
    if upto == "prefix":
        width = max(e.prefix_len for e in examples)
    else:
        width = max(len(e.ids) for e in examples)
    ids = np.full((len(examples), width), pad_id, dtype=np.int64)
    for i, e in enumerate(examples):
        n = min(len(e.ids), width)
        ids[i, :n] = e.ids[:n]
    return ids, np.array([e.prefix_len for e in examples], dtype=np.int64)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _gen_loss(model: DualHeadModel, hidden: T.Tensor, examples: Sequence[Example]) -> T.Tensor:
    rows, cols, nxt, w = [], [], [], []
    for r, e in enumerate(examples):
        n_t = len(e.ids) - e.target_from
        if n_t <= 0:
            continue
        pos = np.arange(e.target_from - 1, len(e.ids) - 1)
        rows.append(np.full(n_t, r))
        cols.append(pos)
        nxt.append(e.ids[pos + 1])
        # per-instance token mean, then mean over the batch
        w.append(np.full(n_t, 1.0 / (n_t * len(examples))))
    if not rows:
        raise ValueError("batch has zero target tokens")
    h = T.take(hidden, (np.concatenate(rows), np.concatenate(cols)))
    logits = model.lm_logits(h)
    return T.cross_entropy(logits, np.concatenate(nxt), np.concatenate(w))


def _cls_loss(model: DualHeadModel, h_n: T.Tensor, examples: Sequence[Example], rng) -> T.Tensor:
    logits = model.class_logits(h_n, rng)
    return T.cross_entropy(logits, np.array([e.label for e in examples]))


def joint_loss(model: DualHeadModel, examples: Sequence[Example], lambda_cls: float = 1.0,
               rng: np.random.Generator | None = None) -> tuple[T.Tensor, dict]:
    """L_gen + lambda_cls * L_cls, with L_gen restricted to target positions."""
    ids, plens = pad_batch(examples)
    enc = model.encode(ids, plens, rng)
    l_gen = _gen_loss(model, enc.hidden, examples)
    parts = {"gen": float(l_gen.data)}
    if lambda_cls == 0:
        return l_gen, parts
    l_cls = _cls_loss(model, enc.h_n, examples, rng)
    parts["cls"] = float(l_cls.data)
    total = T.add(l_gen, T.scale(l_cls, lambda_cls)) if lambda_cls != 1 else T.add(l_gen, l_cls)
    return total, parts


def cls_only_loss(model: DualHeadModel, examples: Sequence[Example],
                  rng: np.random.Generator | None = None) -> tuple[T.Tensor, dict]:
    """Classification loss alone; only the prompt is run (h_n is causal)."""
    ids, plens = pad_batch(examples, upto="prefix")
    enc = model.encode(ids, plens, rng)
    l_cls = _cls_loss(model, enc.h_n, examples, rng)
    return l_cls, {"cls": float(l_cls.data)}


def lm_loss(model: DualHeadModel, examples: Sequence[Example],
            rng: np.random.Generator | None = None) -> tuple[T.Tensor, dict]:
    ids, plens = pad_batch(examples)
    enc = model.encode(ids, plens, rng)
    l_gen = _gen_loss(model, enc.hidden, examples)
    return l_gen, {"gen": float(l_gen.data)}


def batch_loss(model, examples, config: TrainConfig, rng=None):
    if config.mode == "joint":
        return joint_loss(model, examples, config.lambda_cls, rng)
    if config.mode == "cls_only":
        return cls_only_loss(model, examples, rng)
    return lm_loss(model, examples, rng)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup from 0 to ``peak`` then linear decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    return peak * max(0.0, (total - step) / (total - warmup))


class AdamW:
    """Adam with decoupled weight decay; decay skips vectors (biases, norms)."""

    def __init__(self, params: dict[str, T.Parameter], weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            w = p.data
            if self.wd and w.ndim >= 2:
                w = w - lr * self.wd * w
            p.assign(w - lr * update)


def configure_trainable(model: DualHeadModel, config: TrainConfig) -> list[str]:
    """Select the trainable parameter set for a run mode."""
    if config.mode == "lm_pretrain":
        names = [k for k in model.base_names()]
    elif config.base_frozen:
        if not model.has_lora:
            model.add_lora(seed=config.seed)
        names = model.lora_names() + model.cls_names()
    else:
        names = [k for k in model.params]
    if config.mode == "cls_only":
        names = [k for k in names if k not in model.lm_head_names()]
    model.set_trainable(names)
    return names


def accumulate_grads(model: DualHeadModel, micro_batches: Sequence[Sequence[Example]], config: TrainConfig,
                     rng: np.random.Generator | None) -> tuple[dict[str, np.ndarray], float]:
    """Instance-weighted mean of micro-batch gradients."""
    params = model.trainable()
    names = list(params)
    total_n = sum(len(mb) for mb in micro_batches)
    acc = {k: np.zeros_like(p.data) for k, p in params.items()}
    loss_sum = 0.0
    for mb in micro_batches:
        with T.Tape() as tape:
            loss, _ = batch_loss(model, mb, config, rng)
        if not np.isfinite(loss.data):
            raise TrainingDivergedError("non-finite loss")
        grads = tape.gradient(loss, [params[k] for k in names])
        w = len(mb) / total_n
        for k, g in zip(names, grads):
            acc[k] += w * g
        loss_sum += w * float(loss.data)
    return acc, loss_sum


def clip_grads(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] *= s
    return norm


def gradient_check(model: DualHeadModel, examples: Sequence[Example], config: TrainConfig | None = None,
                   coords: int = 3, eps: float = 1e-5, seed: int = 0, floor: float = 1e-6) -> tuple[float, dict]:
    """Worst relative error between backprop and central differences on the training loss.

    Works on a float64 copy with every parameter trainable and probes
    ``coords`` random coordinates of each parameter. Dropout masks are
    replayed from ``seed`` so the loss is a fixed function of the weights.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    exactly-zero gradients (attention key biases, unused positions) from
    turning central-difference roundoff into a large ratio.
    """
    config = config or TrainConfig()
    m = model.astype(T.HIGH).train()
    m.set_trainable(list(m.params))
    names = list(m.params)

    def value() -> float:
        return float(batch_loss(m, examples, config, np.random.default_rng(seed))[0].data)

    with T.Tape() as tape:
        loss, _ = batch_loss(m, examples, config, np.random.default_rng(seed))
    grads = dict(zip(names, tape.gradient(loss, [m.params[k] for k in names])))
    pick = np.random.default_rng([seed, 17])
    worst, per_param = 0.0, {}
    for k in names:
        p = m.params[k]
        flat = p.data.reshape(-1)
        idx = pick.choice(flat.size, size=min(coords, flat.size), replace=False)
        errs = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = value()
            flat[i] = orig - eps
            lo = value()
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            ana = float(grads[k].reshape(-1)[i])
            errs.append(abs(ana - num) / max(abs(ana), abs(num), floor))
        per_param[k] = max(errs)
        worst = max(worst, per_param[k])
    return worst, per_param


def steps_per_epoch(n: int, config: TrainConfig) -> int:
    return math.ceil(n / config.effective_batch)


def train(model: DualHeadModel, examples: Sequence[Example], config: TrainConfig,
          evaluate: Callable[[DualHeadModel, int], dict] | None = None,
          checkpoint_dir=None, log_path=None, on_epoch: Callable | None = None,
          checkpoint_extra: dict | None = None) -> list[EpochRecord]:
    """Run ``config.epochs`` epochs; returns one record per epoch.

    ``evaluate(model, epoch)`` supplies dev metrics for each record; with a
    ``checkpoint_dir`` a checkpoint is written at the end of each epoch.
    """
    if not examples:
        raise ValueError("training set is empty")
    configure_trainable(model, config)
    params = model.trainable()
    opt = AdamW(params, config.weight_decay, config.betas, config.adam_eps)
    n = len(examples)
    per_epoch = steps_per_epoch(n, config)
    total = per_epoch * config.epochs
    order_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    records: list[EpochRecord] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = order_rng.permutation(n) if config.shuffle else np.arange(n)
        losses = []
        for s in range(per_epoch):
            chunk = order[s * config.effective_batch:(s + 1) * config.effective_batch]
            mbs = [[examples[i] for i in chunk[j:j + config.micro_batch]]
                   for j in range(0, len(chunk), config.micro_batch)]
            lr = lr_at(step, config.lr, config.warmup_steps, total)
            try:
                grads, loss = accumulate_grads(model, mbs, config, drop_rng)
            except (TrainingDivergedError, T.NonFiniteError) as exc:
                raise TrainingDivergedError(f"{exc} at epoch {epoch}, step {step}, lr {lr:.3g}") from exc
            clip_grads(grads, config.max_grad_norm)
            opt.step(grads, lr)
            losses.append(loss)
            step += 1
        model.eval()
        rec = EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)))
        if evaluate is not None:
            rec.metrics = evaluate(model, epoch)
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch-{epoch:03d}.npz"
            save_checkpoint(model, path, epoch=epoch, seed=config.seed, extra=checkpoint_extra)
            rec.checkpoint = str(path)
        log.info("epoch %d loss %.4f %s", epoch, rec.train_loss, rec.metrics)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        records.append(rec)
        if on_epoch is not None:
            on_epoch(model, rec)
    return records


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

QUALITY_METRICS = ("auroc_cls", "auroc_align", "kappa")


def zscores(values: Sequence[float]) -> np.ndarray:
    """Population z-scores; a constant series maps to zeros."""
    x = np.asarray(values, dtype=np.float64)
    sd = x.std()
    if sd == 0 or not np.isfinite(sd):
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def quality_scores(records: Sequence[EpochRecord], metrics=QUALITY_METRICS) -> np.ndarray:
    total = np.zeros(len(records))
    for m in metrics:
        vals = [r.metrics.get(m) for r in records]
        # an undefined metric (e.g. a single verbalized class) ties with the worst defined epoch
        filled = [np.nan if v is None else v for v in vals]
        arr = np.array(filled, dtype=np.float64)
        if np.isnan(arr).all():
            continue
        arr = np.where(np.isnan(arr), np.nanmin(arr), arr)
        total += zscores(arr)
    return total


def select_checkpoint(records: Sequence[EpochRecord]) -> EpochRecord:
    """Record with the highest z-normalized quality score; earliest wins ties."""
    if not records:
        raise ValueError("no epoch records to select from")
    scores = quality_scores(records)
    best = int(np.argmax(scores))
    return records[best]
