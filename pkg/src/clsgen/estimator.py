"""scikit-learn style wrapper around the dual-head model.

>>> clf = CLSGenClassifier(epochs=3).fit(notes, y, explanations=rationales)
>>> clf.predict_proba(new_notes)[:, 1]
>>> clf.explain(new_notes)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .datagen import Validator, build_dataset
from .evalsuite import DeskTextModel, head_probabilities
from .model import DualHeadModel, ModelConfig
from .synth import Instance
from .textproto import DESK, LabelMap, Tokenizer, split_words
from .training import Example, TrainConfig, encode_instance, train

__all__ = ["CLSGenClassifier", "check_documents", "check_binary_target"]


def check_documents(X, name: str = "X") -> list[str]:
    """Coerce a 1-d collection of note strings to a list, rejecting anything else."""
    if isinstance(X, str):
        raise ValueError(f"{name} must be a collection of documents, not a single string")
    try:
        docs = list(X)
    except TypeError:
        raise ValueError(f"{name} must be an iterable of strings") from None
    if not docs:
        raise ValueError(f"{name} is empty")
    for i, d in enumerate(docs):
        if not isinstance(d, str):
            raise ValueError(f"{name}[{i}] is {type(d).__name__}, expected str")
        if not d.strip():
            raise ValueError(f"{name}[{i}] is blank")
    return docs


def check_binary_target(y, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Validate ``y`` against ``n`` documents; returns (classes, 0/1 codes)."""
    y = column_or_1d(np.asarray(y), warn=True)
    check_classification_targets(y)
    if y.shape[0] != n:
        raise ValueError(f"X has {n} documents but y has {y.shape[0]} labels")
    classes, codes = np.unique(y, return_inverse=True)
    if classes.size != 2:
        raise ValueError(f"binary target required, got {classes.size} classes: {classes.tolist()}")
    return classes, codes.astype(np.int64)


def template_vocabulary(label_map: LabelMap, templates=DESK, task_days: int = 30) -> list[str]:
    words = set()
    for t in templates.texts():
        words.update(split_words(t.replace("{task_days}", str(task_days))))
    words.update(["Classification:", "Probability:", label_map.negative_string, label_map.positive_string])
    return sorted(words)


class CLSGenClassifier(ClassifierMixin, BaseEstimator):
    """Binary classifier that also writes a rationale for each decision.

    Training targets need an explanation per document: pass ``explanations``
    to :meth:`fit`, or set ``teacher`` (anything with ``generate`` and
    ``describe``) to rejection-sample them. With ``mode="cls_only"`` no
    explanations are needed, but generation is not trained.

    ``pretrain_epochs`` runs plain language modelling over the training
    documents and targets first, which a from-scratch model needs before it
    can write anything.
    """

    def __init__(self, model_config=None, lr=1e-3, epochs=15, micro_batch=8, lambda_cls=1.0, mode="joint",
                 base_frozen=True, pretrain_epochs=0, pretrain_lr=3e-3, teacher=None, K=5, max_new=32,
                 threshold=0.5, task_days=30, label_map=None, random_state=0):
        self.model_config = model_config
        self.lr = lr
        self.epochs = epochs
        self.micro_batch = micro_batch
        self.lambda_cls = lambda_cls
        self.mode = mode
        self.base_frozen = base_frozen
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_lr = pretrain_lr
        self.teacher = teacher
        self.K = K
        self.max_new = max_new
        self.threshold = threshold
        self.task_days = task_days
        self.label_map = label_map
        self.random_state = random_state

    def _label_map(self) -> LabelMap:
        return self.label_map if self.label_map is not None else LabelMap()

    def _instances(self, docs, codes=None) -> list[Instance]:
        labels = codes if codes is not None else np.zeros(len(docs), dtype=np.int64)
        return [Instance(id=str(i), document=d, label=int(y)) for i, (d, y) in enumerate(zip(docs, labels))]

    def fit(self, X, y, explanations=None):
        if self.mode not in ("joint", "cls_only"):
            raise ValueError(f"mode must be 'joint' or 'cls_only', got {self.mode!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        docs = check_documents(X)
        self.classes_, codes = check_binary_target(y, len(docs))
        lm = self._label_map()
        instances = self._instances(docs, codes)
        if explanations is not None:
            expl = check_documents(explanations, "explanations")
            if len(expl) != len(docs):
                raise ValueError("explanations and X differ in length")
            for inst, e in zip(instances, expl):
                inst.explanation = e
        elif self.teacher is not None:
            instances, self.datagen_report_, _ = build_dataset(instances, self.teacher, self.K, lm, Validator())
            if not instances:
                raise ValueError("the teacher produced no usable explanation")
        elif self.mode == "joint":
            raise ValueError("joint training needs explanations= or a teacher")

        texts = docs + [x.explanation for x in instances if x.explanation]
        self.tokenizer_ = Tokenizer.from_texts(texts, extra=template_vocabulary(lm, DESK, self.task_days))
        cfg = ModelConfig(**{**(self.model_config or {}), "vocab_size": len(self.tokenizer_),
                             "eog_id": self.tokenizer_.eog_id})
        self.model_ = DualHeadModel(cfg, seed=self.random_state)
        examples = [encode_instance(x, self.tokenizer_, lm, cfg.max_seq_len, DESK, self.task_days)
                    for x in instances]
        if self.pretrain_epochs:
            corpus = [Example(ids=e.ids, prefix_len=len(e.ids), target_from=1) for e in examples]
            train(self.model_, corpus, TrainConfig(lr=self.pretrain_lr, epochs=self.pretrain_epochs,
                                                   micro_batch=self.micro_batch, mode="lm_pretrain",
                                                   seed=self.random_state))
        tc = TrainConfig(lr=self.lr, epochs=self.epochs, micro_batch=self.micro_batch, lambda_cls=self.lambda_cls,
                         mode=self.mode, base_frozen=self.base_frozen, seed=self.random_state)
        self.history_ = train(self.model_, examples, tc)
        self.model_.eval()
        self.n_features_in_ = 1
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        docs = check_documents(X)
        p = head_probabilities(self.model_, self._instances(docs), self.tokenizer_, DESK, self.task_days,
                               self.max_new)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        p = self.predict_proba(X)[:, 1]
        return self.classes_[(p >= self.threshold).astype(np.int64)]

    def explain(self, X) -> list[str]:
        """Greedy rationale plus classification line for each document."""
        check_is_fitted(self, "model_")
        docs = check_documents(X)
        text_model = DeskTextModel(self.model_, self.tokenizer_, DESK, self.task_days, self.max_new,
                                   temperature=0.0)
        return text_model.complete(self._instances(docs))
