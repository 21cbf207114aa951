"""Tiny decoder-only transformer with an LM head and a classification head.

The classification head reads ``h_n``: the post-final-norm hidden state at
the last token of the input prefix. LoRA adapters can be attached to the
attention projections; ``B`` starts at zero so an adapted model initially
computes exactly what the base model computes.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

LORA_TARGETS = ("query", "key", "value", "output")


@dataclass
class ModelConfig:
    vocab_size: int = 200
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 256
    cls_hidden_dim: int = 128
    cls_dropout: float = 0.1
    dropout: float = 0.0
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    lora_targets: tuple[str, ...] = LORA_TARGETS
    eog_id: int = 1

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        dims = (self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff,
                self.max_seq_len, self.cls_hidden_dim)
        if min(dims) <= 0:
            raise ValueError(f"model dimensions must be positive: {dims}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        bad = set(self.lora_targets) - set(LORA_TARGETS)
        if bad:
            raise ValueError(f"unknown LoRA targets: {sorted(bad)}")
        for name in ("cls_dropout", "dropout", "lora_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if not 0 <= self.eog_id < self.vocab_size:
            raise ValueError("eog_id outside vocabulary")

    @property
    def lora_scaling(self) -> float:
        return self.lora_alpha / self.lora_rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


_PROJ = {"query": "q", "key": "k", "value": "v", "output": "o"}


@dataclass
class ForwardOutput:
    hidden: Tensor  # (B, T, d) after the final layer norm
    h_n: Tensor  # (B, d)


class DualHeadModel:
    """Parameters live in ``self.params`` keyed by dotted names."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=T.STANDARD):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self.training = False
        rng = np.random.default_rng(seed)
        c = config
        std = 0.02

        def normal(*shape, s=std):
            return rng.normal(0.0, s, size=shape)

        self._add("tok_emb", normal(c.vocab_size, c.d_model))
        self._add("pos_emb", normal(c.max_seq_len, c.d_model))
        proj_std = std / np.sqrt(2 * c.n_layers)
        for i in range(c.n_layers):
            p = f"blocks.{i}"
            self._add(f"{p}.ln1.g", np.ones(c.d_model))
            self._add(f"{p}.ln1.b", np.zeros(c.d_model))
            for short in "qkv":
                self._add(f"{p}.attn.{short}.w", normal(c.d_model, c.d_model))
                self._add(f"{p}.attn.{short}.b", np.zeros(c.d_model))
            self._add(f"{p}.attn.o.w", normal(c.d_model, c.d_model, s=proj_std))
            self._add(f"{p}.attn.o.b", np.zeros(c.d_model))
            self._add(f"{p}.ln2.g", np.ones(c.d_model))
            self._add(f"{p}.ln2.b", np.zeros(c.d_model))
            self._add(f"{p}.mlp.fc.w", normal(c.d_model, c.d_ff))
            self._add(f"{p}.mlp.fc.b", np.zeros(c.d_ff))
            self._add(f"{p}.mlp.proj.w", normal(c.d_ff, c.d_model, s=proj_std))
            self._add(f"{p}.mlp.proj.b", np.zeros(c.d_model))
        self._add("ln_f.g", np.ones(c.d_model))
        self._add("ln_f.b", np.zeros(c.d_model))
        self._add("lm_head.w", normal(c.d_model, c.vocab_size))
        self._add("cls.fc1.w", rng.normal(0.0, 1.0 / np.sqrt(c.d_model), size=(c.d_model, c.cls_hidden_dim)))
        self._add("cls.fc1.b", np.zeros(c.cls_hidden_dim))
        self._add("cls.fc2.w", rng.normal(0.0, 1.0 / np.sqrt(c.cls_hidden_dim), size=(c.cls_hidden_dim, 2)))
        self._add("cls.fc2.b", np.zeros(2))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Parameter(np.asarray(value, dtype=self.dtype), name=name)

    # -- parameter groups ---------------------------------------------------

    @property
    def has_lora(self) -> bool:
        return any(".lora_" in k for k in self.params)

    def lora_names(self) -> list[str]:
        return [k for k in self.params if ".lora_" in k]

    def cls_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("cls.")]

    def lm_head_names(self) -> list[str]:
        return ["lm_head.w"]

    def base_names(self) -> list[str]:
        return [k for k in self.params if ".lora_" not in k and not k.startswith("cls.")]

    def set_trainable(self, names) -> None:
        names = set(names)
        unknown = names - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        for k, p in self.params.items():
            p.requires_grad = k in names

    def trainable(self) -> dict[str, Parameter]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype) -> "DualHeadModel":
        other = copy.copy(self)
        other.dtype = np.dtype(dtype)
        other.params = {
            k: Parameter(p.data.astype(dtype), name=k, requires_grad=p.requires_grad)
            for k, p in self.params.items()
        }
        return other

    def clone(self) -> "DualHeadModel":
        return self.astype(self.dtype)

    def train(self, mode: bool = True) -> "DualHeadModel":
        self.training = mode
        return self

    def eval(self) -> "DualHeadModel":
        return self.train(False)

    # -- LoRA ---------------------------------------------------------------

    def add_lora(self, seed: int = 0) -> "DualHeadModel":
        """Attach zero-initialized adapters to every configured projection."""
        if self.has_lora:
            raise ValueError("adapters already attached")
        rng = np.random.default_rng(seed)
        c = self.config
        for i in range(c.n_layers):
            for target in c.lora_targets:
                base = f"blocks.{i}.attn.{_PROJ[target]}"
                # A: r x d_in, B: d_out x r
                self._add(f"{base}.lora_A", rng.normal(0.0, 1.0 / np.sqrt(c.d_model), size=(c.lora_rank, c.d_model)))
                self._add(f"{base}.lora_B", np.zeros((c.d_model, c.lora_rank)))
        return self

    def _linear(self, x: Tensor, base: str, rng) -> Tensor:
        out = T.add(T.matmul(x, self.params[f"{base}.w"]), self.params[f"{base}.b"])
        a = self.params.get(f"{base}.lora_A")
        if a is None:
            return out
        b = self.params[f"{base}.lora_B"]
        xd = T.dropout(x, self.config.lora_dropout, rng, self.training)
        # x @ (s * B A)^T == s * (x @ A^T) @ B^T
        low = T.matmul(T.matmul(xd, T.transpose(a, (1, 0))), T.transpose(b, (1, 0)))
        return T.add(out, T.scale(low, self.config.lora_scaling))

    # -- forward ------------------------------------------------------------

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.shape[-1] > self.config.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_seq_len={self.config.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"unknown token id (vocabulary has {self.config.vocab_size} entries)")

    def encode(self, ids, prefix_lens, rng: np.random.Generator | None = None) -> ForwardOutput:
        """Run the backbone on a right-padded batch ``ids`` of shape (B, T).

        Right padding is harmless under causal masking: real positions never
        attend to later (padded) ones.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError(f"expected (batch, time) ids, got shape {ids.shape}")
        self._check_ids(ids)
        prefix_lens = np.asarray(prefix_lens, dtype=np.int64)
        B, L = ids.shape
        if prefix_lens.shape != (B,) or prefix_lens.min() < 1 or prefix_lens.max() > L:
            raise ValueError("prefix_len must satisfy 1 <= prefix_len <= len(tokens)")
        c = self.config
        training = self.training
        if training and rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        x = T.add(T.embedding(self.params["tok_emb"], ids), T.take(self.params["pos_emb"], slice(0, L)))
        x = T.dropout(x, c.dropout, rng, training)
        causal = np.triu(np.ones((L, L), dtype=bool), k=1)
        h, dh = c.n_heads, c.d_model // c.n_heads
        for i in range(c.n_layers):
            p = f"blocks.{i}"
            a_in = T.layer_norm(x, self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])

            def heads(t):
                return T.transpose(T.reshape(t, (B, L, h, dh)), (0, 2, 1, 3))

            q = heads(self._linear(a_in, f"{p}.attn.q", rng))
            k = heads(self._linear(a_in, f"{p}.attn.k", rng))
            v = heads(self._linear(a_in, f"{p}.attn.v", rng))
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            att = T.softmax(T.masked_fill(scores, causal))
            att = T.dropout(att, c.dropout, rng, training)
            ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, c.d_model))
            x = T.add(x, T.dropout(self._linear(ctx, f"{p}.attn.o", rng), c.dropout, rng, training))
            m_in = T.layer_norm(x, self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"])
            m = T.gelu(T.add(T.matmul(m_in, self.params[f"{p}.mlp.fc.w"]), self.params[f"{p}.mlp.fc.b"]))
            m = T.add(T.matmul(m, self.params[f"{p}.mlp.proj.w"]), self.params[f"{p}.mlp.proj.b"])
            x = T.add(x, T.dropout(m, c.dropout, rng, training))
        hidden = T.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        h_n = T.take(hidden, (np.arange(B), prefix_lens - 1))
        return ForwardOutput(hidden, h_n)

    def lm_logits(self, hidden: Tensor) -> Tensor:
        return T.matmul(hidden, self.params["lm_head.w"])

    def class_logits(self, h_n: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """Two logits from the MLP head; index 1 is the positive class."""
        if not isinstance(h_n, Tensor):
            h_n = Tensor(np.asarray(h_n, dtype=self.dtype))
        if h_n.shape[-1] != self.config.d_model:
            raise T.ShapeError(f"class_logits: expected {self.config.d_model} features, got {h_n.shape}")
        p = self.config.cls_dropout
        z = T.dropout(h_n, p, rng, self.training)
        z = T.gelu(T.add(T.matmul(z, self.params["cls.fc1.w"]), self.params["cls.fc1.b"]))
        z = T.dropout(z, p, rng, self.training)
        if z.ndim == 1:
            return T.add(T.reshape(T.matmul(T.reshape(z, (1, -1)), self.params["cls.fc2.w"]), (2,)),
                         self.params["cls.fc2.b"])
        return T.add(T.matmul(z, self.params["cls.fc2.w"]), self.params["cls.fc2.b"])

    def forward(self, tokens, prefix_len: int, rng=None) -> tuple[Tensor, Tensor]:
        """Single sequence: (per-position vocab logits, h_n)."""
        ids = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
        out = self.encode(ids, [prefix_len], rng)
        logits = self.lm_logits(out.hidden)
        return T.take(logits, 0), T.take(out.h_n, 0)

    def predict_proba(self, ids, prefix_lens, batch_size: int = 64) -> np.ndarray:
        """Positive-class probability for a padded batch (eval mode, no tape)."""
        ids = np.asarray(ids)
        prefix_lens = np.asarray(prefix_lens)
        was = self.training
        self.training = False
        out = []
        try:
            for s in range(0, len(ids), batch_size):
                pl = prefix_lens[s:s + batch_size]
                chunk = ids[s:s + batch_size, : int(pl.max())]
                enc = self.encode(chunk, pl)
                out.append(positive_probability(self.class_logits(enc.h_n).data))
        finally:
            self.training = was
        return np.concatenate(out) if out else np.zeros(0)

    # -- generation ---------------------------------------------------------

    def generate(self, prompt, max_new: int, temperature: float = 0.0,
                 rng: np.random.Generator | None = None, stop_id: int | None = None) -> list[int]:
        """Decode after ``prompt``; greedy when ``temperature == 0``.

        The returned list excludes the prompt and ends with the stop token
        when one was produced.
        """
        return self.generate_batch([list(prompt)], max_new, temperature,
                                   rngs=None if rng is None else [rng], stop_id=stop_id)[0]

    def generate_batch(self, prompts, max_new: int, temperature: float = 0.0,
                       rngs=None, stop_id: int | None = None, use_cache: bool = True) -> list[list[int]]:
        """Decode a batch of prompts of possibly different lengths.

        ``use_cache=False`` recomputes the whole prefix at every step through
        the taped forward; the cached path gives the same tokens faster.
        """
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        if not prompts or any(len(p) == 0 for p in prompts):
            raise ValueError("prompts must be non-empty")
        lim = self.config.max_seq_len
        if max(len(p) for p in prompts) > lim:
            raise ValueError(f"prompt exceeds max_seq_len={lim}")
        if temperature > 0 and (rngs is None or len(rngs) != len(prompts)):
            raise ValueError("temperature sampling needs one rng per prompt")
        stop = self.config.eog_id if stop_id is None else stop_id
        n = len(prompts)
        lens = np.array([len(p) for p in prompts])
        width = min(lim, int(lens.max()) + max_new)
        buf = np.zeros((n, width), dtype=np.int64)
        for i, p in enumerate(prompts):
            buf[i, : len(p)] = p
        self._check_ids(buf)
        outs: list[list[int]] = [[] for _ in range(n)]
        active = np.ones(n, dtype=bool)
        was = self.training
        self.training = False
        try:
            cache = _Decoder(self, buf, lens) if use_cache else None
            for _ in range(max_new):
                idx = np.flatnonzero(active & (lens < lim))
                if idx.size == 0:
                    break
                if cache is not None:
                    logits = cache.logits[idx]
                else:
                    cur = int(lens[idx].max())
                    enc = self.encode(buf[idx, :cur], lens[idx])
                    logits = self.lm_logits(enc.h_n).data.astype(np.float64)
                picked = np.zeros(n, dtype=np.int64)
                for row, i in enumerate(idx):
                    tok = _pick(logits[row], temperature, None if rngs is None else rngs[i])
                    buf[i, lens[i]] = tok
                    picked[i] = tok
                    outs[i].append(tok)
                    if tok == stop:
                        active[i] = False
                if cache is not None:
                    cache.advance(idx, picked[idx], lens[idx])
                lens[idx] += 1
        finally:
            self.training = was
        return outs


class _Decoder:
    """Key/value cache for eval-mode decoding (plain numpy, no tape)."""

    def __init__(self, model: DualHeadModel, buf: np.ndarray, lens: np.ndarray):
        c = model.config
        self.c = c
        P = {k: p.data for k, p in model.params.items()}
        self.P = P
        s = c.lora_scaling
        self.W = {}
        for i in range(c.n_layers):
            for short in "qkvo":
                base = f"blocks.{i}.attn.{short}"
                w = P[f"{base}.w"]
                if f"{base}.lora_A" in P:
                    w = w + s * (P[f"{base}.lora_B"] @ P[f"{base}.lora_A"]).T
                self.W[base] = w
        n, width = buf.shape
        h, dh = c.n_heads, c.d_model // c.n_heads
        self.h, self.dh = h, dh
        L = int(lens.max())
        self.K = [np.zeros((n, h, width, dh), dtype=model.dtype) for _ in range(c.n_layers)]
        self.V = [np.zeros((n, h, width, dh), dtype=model.dtype) for _ in range(c.n_layers)]
        ids = buf[:, :L]
        x = P["tok_emb"][ids] + P["pos_emb"][:L]
        causal = np.triu(np.ones((L, L), dtype=bool), k=1)
        for i in range(c.n_layers):
            b = f"blocks.{i}"
            a = _ln(x, P[f"{b}.ln1.g"], P[f"{b}.ln1.b"])
            q, k, v = (self._proj(a, f"{b}.attn.{t}").reshape(n, L, h, dh).transpose(0, 2, 1, 3) for t in "qkv")
            self.K[i][:, :, :L] = k
            self.V[i][:, :, :L] = v
            sc = np.where(causal, MASK, q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh))
            ctx = (_softmax(sc) @ v).transpose(0, 2, 1, 3).reshape(n, L, c.d_model)
            x = x + self._proj(ctx, f"{b}.attn.o")
            x = x + self._mlp(x, b)
        last = x[np.arange(n), lens - 1]
        self.logits = self._head(last)

    def _proj(self, x, base):
        return x @ self.W[base] + self.P[f"{base}.b"]

    def _mlp(self, x, b):
        P = self.P
        m = _ln(x, P[f"{b}.ln2.g"], P[f"{b}.ln2.b"])
        m = _gelu(m @ P[f"{b}.mlp.fc.w"] + P[f"{b}.mlp.fc.b"])
        return m @ P[f"{b}.mlp.proj.w"] + P[f"{b}.mlp.proj.b"]

    def _head(self, x):
        hid = _ln(x, self.P["ln_f.g"], self.P["ln_f.b"])
        return (hid @ self.P["lm_head.w"]).astype(np.float64)

    def advance(self, rows: np.ndarray, tokens: np.ndarray, pos: np.ndarray) -> None:
        """Append ``tokens`` at positions ``pos`` for ``rows`` and refresh their logits."""
        c, P, h, dh = self.c, self.P, self.h, self.dh
        m = len(rows)
        x = P["tok_emb"][tokens] + P["pos_emb"][pos]
        width = self.K[0].shape[2]
        invalid = np.arange(width)[None, :] > pos[:, None]
        for i in range(c.n_layers):
            b = f"blocks.{i}"
            a = _ln(x, P[f"{b}.ln1.g"], P[f"{b}.ln1.b"])
            q, k, v = (self._proj(a, f"{b}.attn.{t}").reshape(m, h, dh) for t in "qkv")
            self.K[i][rows, :, pos] = k
            self.V[i][rows, :, pos] = v
            K, V = self.K[i][rows], self.V[i][rows]
            sc = np.einsum("mhd,mhtd->mht", q, K) / np.sqrt(dh)
            sc = np.where(invalid[:, None, :], MASK, sc)
            ctx = np.einsum("mht,mhtd->mhd", _softmax(sc), V).reshape(m, c.d_model)
            x = x + self._proj(ctx, f"{b}.attn.o")
            x = x + self._mlp(x, b)
        self.logits[rows] = self._head(x)


MASK = T.MASK_VALUE


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(T._GELU_C * (x + 0.044715 * (x * x * x))))


def _pick(logits: np.ndarray, temperature: float, rng) -> int:
    if temperature <= 0:
        return int(np.argmax(logits))
    z = logits / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def positive_probability(logits: np.ndarray) -> np.ndarray:
    """softmax(logits)[..., 1] computed stably in float64."""
    z = np.asarray(logits, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(z[..., 0] - z[..., 1]))


def lora_merge(model: DualHeadModel) -> DualHeadModel:
    """Fold adapters into the projection weights and drop them.

    Without adapters this returns an unchanged copy.
    """
    merged = model.clone()
    s = model.config.lora_scaling
    for name in model.lora_names():
        if not name.endswith(".lora_A"):
            continue
        base = name[: -len(".lora_A")]
        a = model.params[f"{base}.lora_A"].data
        b = model.params[f"{base}.lora_B"].data
        w = model.params[f"{base}.w"].data
        # stored as (d_in, d_out): W'^T = W^T + s * (B A)^T
        merged.params[f"{base}.w"] = Parameter(w + s * (b @ a).T, name=f"{base}.w")
        del merged.params[f"{base}.lora_A"]
        del merged.params[f"{base}.lora_B"]
    return merged


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: DualHeadModel, path, epoch: int | None = None, seed: int | None = None,
                    extra: dict | None = None) -> Path:
    """Write config, weights, adapters and metadata into one ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": model.config.to_dict(),
        "dtype": model.dtype.name,
        "epoch": epoch,
        "seed": seed,
        "trainable": [k for k, p in model.params.items() if p.requires_grad],
        "extra": extra or {},
    }
    arrays = {f"param/{k}": p.data for k, p in model.params.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[DualHeadModel, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        config = ModelConfig.from_dict(meta["config"])
        model = DualHeadModel.__new__(DualHeadModel)
        model.config = config
        model.dtype = np.dtype(meta["dtype"])
        model.training = False
        trainable = set(meta["trainable"])
        model.params = {}
        for key in z.files:
            if key.startswith("param/"):
                name = key[len("param/"):]
                model.params[name] = Parameter(z[key], name=name, requires_grad=name in trainable)
    return model, meta
