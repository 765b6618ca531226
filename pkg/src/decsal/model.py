"""Small post-LN encoder transformer with an MLM head and a [CLS] classifier."""
from __future__ import annotations

import dataclasses
import fnmatch
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .vocab import MASK_ID, N_SPECIALS, PAD_ID, TokenSeq

log = logging.getLogger(__name__)

LM_PREFIX = "lm."
CLS_PREFIX = "cls."
_MAGIC = b"DECSALv1"
# full: everything but the LM head; attention: query/key projections and
# classifier only; classifier: classifier only
FINETUNE_SCOPES = ("full", "attention", "classifier")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    n_max: int = 32
    classes: int = 2
    seed: int = 0
    ffn_mult: int = 4
    ln_eps: float = 1e-5
    tie_lm_head: bool = False
    finetune_scope: str = "full"
    pooling: str = "cls"

    def __post_init__(self):
        if self.vocab_size < N_SPECIALS + 1:
            raise ModelError(f"vocab_size must be > {N_SPECIALS}")
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise ModelError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ModelError("layers must be >= 1")
        if self.classes < 2:
            raise ModelError("classes must be >= 2")
        if self.n_max < 3:
            raise ModelError("n_max must be >= 3")
        if self.finetune_scope not in FINETUNE_SCOPES:
            raise ModelError(f"finetune_scope must be one of {FINETUNE_SCOPES}")
        if self.pooling not in ("cls", "mean"):
            raise ModelError(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")
        if self.ffn_mult < 1 or self.ln_eps <= 0:
            raise ModelError("ffn_mult must be >= 1 and ln_eps > 0")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @classmethod
    def paper_preset(cls, vocab_size: int, classes: int = 2, **kw) -> "ModelConfig":
        """The 12-block, 12-head, 768-wide layout of a base-size encoder."""
        return cls(vocab_size=vocab_size, hidden=768, layers=12, heads=12,
                   n_max=kw.pop("n_max", 128), classes=classes, **kw)


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def lm_param_names(self) -> list[str]:
        names = [k for k in self.params if k.startswith(LM_PREFIX)]
        if self.config.tie_lm_head:
            names.append("tok_emb")
        return names


@dataclass
class ForwardResult:
    hidden: list[np.ndarray]      # h_0..h_L, each n x K
    logits: np.ndarray            # 1 x C

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.logits[0]))


def _shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    V, K, F = cfg.vocab_size, cfg.hidden, cfg.hidden * cfg.ffn_mult
    shapes = {"tok_emb": (V, K), "pos_emb": (cfg.n_max, K)}
    for b in range(cfg.layers):
        p = f"blocks.{b}."
        shapes.update({
            p + "wq": (K, K), p + "wk": (K, K), p + "wv": (K, K),
            p + "wo": (K, K), p + "bo": (1, K),
            p + "ln1_g": (1, K), p + "ln1_b": (1, K),
            p + "w1": (K, F), p + "b1": (1, F), p + "w2": (F, K), p + "b2": (1, K),
            p + "ln2_g": (1, K), p + "ln2_b": (1, K),
        })
    shapes.update({
        "lm.dense": (K, K), "lm.dense_b": (1, K), "lm.ln_g": (1, K), "lm.ln_b": (1, K),
        "cls.w": (K, cfg.classes), "cls.b": (1, cfg.classes),
    })
    if not cfg.tie_lm_head:
        shapes["lm.proj"] = (K, V)
    shapes["lm.proj_b"] = (1, V)
    return shapes


def init_model(cfg: ModelConfig) -> Model:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in _shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return Model(cfg, params)


# ------------------------------------------------------------------ forward pass

def self_attention(x, wq, wk, wv, key_mask, heads: int):
    """Multi-head ``softmax(X Wq Wk^T X^T / sqrt(d)) X Wv`` with heads concatenated.

    ``x`` is B x n x K; ``key_mask`` is B x n (True = may be attended to).
    """
    B, n, K = nx.value(x).shape
    d = K // heads

    def split(t):
        return nx.transpose(nx.reshape(t, (B, n, heads, d)), (0, 2, 1, 3))

    q, k, v = split(nx.matmul(x, wq)), split(nx.matmul(x, wk)), split(nx.matmul(x, wv))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    attn = nx.softmax_rows(scores, key_mask[:, None, None, :])
    ctx = nx.matmul(attn, v)
    return nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (B, n, K))


def _block(p, b: int, x, key_mask, cfg: ModelConfig):
    pre = f"blocks.{b}."
    att = self_attention(x, p[pre + "wq"], p[pre + "wk"], p[pre + "wv"], key_mask, cfg.heads)
    att = nx.add(nx.matmul(att, p[pre + "wo"]), p[pre + "bo"])
    x1 = nx.layer_norm(nx.add(x, att), p[pre + "ln1_g"], p[pre + "ln1_b"], cfg.ln_eps)
    ff = nx.gelu(nx.add(nx.matmul(x1, p[pre + "w1"]), p[pre + "b1"]))
    ff = nx.add(nx.matmul(ff, p[pre + "w2"]), p[pre + "b2"])
    return nx.layer_norm(nx.add(x1, ff), p[pre + "ln2_g"], p[pre + "ln2_b"], cfg.ln_eps)


def embed_tokens(p, ids: np.ndarray):
    n = ids.shape[-1]
    return nx.add(nx.embed(p["tok_emb"], ids), nx.take(p["pos_emb"], slice(0, n)))


def run_blocks(p, cfg: ModelConfig, h, key_mask, start: int = 0) -> list:
    """Apply blocks ``start+1..L`` to layer-``start`` output ``h``; returns all outputs from ``h`` on."""
    outs = [h]
    for b in range(start, cfg.layers):
        h = _block(p, b, h, key_mask, cfg)
        outs.append(h)
    return outs


def classify(p, h_last, cfg: ModelConfig, mask=None):
    if cfg.pooling == "mean":
        weights = np.asarray(mask, dtype=np.float64)
        weights = weights / weights.sum(axis=1, keepdims=True)
        pooled = nx.reshape(nx.matmul(weights[:, None, :], h_last), (weights.shape[0], cfg.hidden))
    else:
        pooled = nx.take(h_last, (slice(None), 0))
    return nx.add(nx.matmul(pooled, p["cls.w"]), p["cls.b"])


def lm_logits(p, cfg: ModelConfig, h):
    z = nx.gelu(nx.add(nx.matmul(h, p["lm.dense"]), p["lm.dense_b"]))
    z = nx.layer_norm(z, p["lm.ln_g"], p["lm.ln_b"], cfg.ln_eps)
    proj = nx.transpose(p["tok_emb"]) if cfg.tie_lm_head else p["lm.proj"]
    return nx.add(nx.matmul(z, proj), p["lm.proj_b"])


def _check_batch(cfg: ModelConfig, ids, mask):
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if ids.shape[-1] > cfg.n_max:
        raise ModelError(f"sequence length {ids.shape[-1]} exceeds n_max={cfg.n_max}")
    if ids.shape != mask.shape:
        raise ModelError("ids and mask shapes differ")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ModelError("token id outside vocabulary")
    return ids, mask


def encode_batch(model: Model, ids, mask, params=None):
    """Hidden states (list of B x n x K) and class logits (B x C) for a batch.

    ``params`` may map names to recorded nodes; defaults to the model's arrays.
    """
    cfg = model.config
    ids, mask = _check_batch(cfg, ids, mask)
    p = model.params if params is None else params
    hidden = run_blocks(p, cfg, embed_tokens(p, ids), mask)
    return hidden, classify(p, hidden[-1], cfg, mask)


def record_forward(model: Model, seq: TokenSeq, graph: nx.DiffGraph):
    """Forward one sequence with h_0 as a recorded leaf.

    Returns (hidden nodes, each 1 x n x K; logits node 1 x C).
    """
    cfg = model.config
    ids, mask = _check_batch(cfg, seq.ids, seq.mask)
    h0 = graph.leaf(nx.value(embed_tokens(model.params, ids)), name="h0")
    hidden = run_blocks(model.params, cfg, h0, mask)
    return hidden, classify(model.params, hidden[-1], cfg, mask)


def forward(model: Model, seq: TokenSeq) -> ForwardResult:
    hidden, logits = encode_batch(model, seq.ids, seq.mask)
    return ForwardResult([h[0] for h in hidden], logits)


def logits_from_layer(model: Model, h: np.ndarray, layer: int, mask) -> np.ndarray:
    """Class logits when layer ``layer``'s output is replaced by ``h`` (n x K)."""
    cfg = model.config
    if not 0 <= layer <= cfg.layers:
        raise ModelError(f"layer {layer} outside 0..{cfg.layers}")
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    outs = run_blocks(model.params, cfg, np.asarray(h, dtype=np.float64)[None], mask, start=layer)
    return classify(model.params, outs[-1], cfg, mask)


def predict(model: Model, seqs: Sequence[TokenSeq], batch_size: int = 64) -> np.ndarray:
    preds = []
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start:start + batch_size]
        _, logits = encode_batch(model, np.stack([s.ids for s in chunk]),
                                 np.stack([s.mask for s in chunk]))
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def lm_decode(model: Model, h) -> np.ndarray:
    """Token probabilities (n x V, rows sum to 1) for any layer's output."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != model.config.hidden:
        raise ModelError(f"hidden width {h.shape[-1]} != K={model.config.hidden}")
    return nx.softmax_rows(lm_logits(model.params, model.config, h))


# --------------------------------------------------------------------- training

class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _loss_and_grads(model: Model, names: list[str], loss_fn):
    graph = nx.DiffGraph()
    leaves = {k: graph.leaf(v, name=k) if k in names else v for k, v in model.params.items()}
    loss = loss_fn(leaves)
    grads = nx.gradients(graph, loss, [leaves[k] for k in names])
    return float(loss.value[0, 0]), dict(zip(names, grads))


def _stack(seqs: Sequence[TokenSeq]):
    return np.stack([s.ids for s in seqs]), np.stack([s.mask for s in seqs])


def mlm_mask(ids: np.ndarray, mask: np.ndarray, rate: float, rng: np.random.Generator,
             keep_rate: float = 0.0):
    """Pick positions for the loss; returns (corrupted ids, selected bool array).

    Content positions are selected at ``rate`` and become [MASK]. On top of
    that a ``keep_rate`` share of the remaining visible positions ([CLS] and
    [SEP] included) are selected unchanged, so the head also learns to
    decode what it can see.
    """
    visible = mask & (ids != PAD_ID)
    hidden = visible & (ids >= N_SPECIALS) & (rng.random(ids.shape) < rate)
    kept = visible & ~hidden & (rng.random(ids.shape) < keep_rate)
    return np.where(hidden, MASK_ID, ids), hidden | kept


def mlm_loss(model: Model, params, ids, mask, targets, selected):
    cfg = model.config
    hidden, _ = encode_batch(model, ids, mask, params)
    flat = nx.reshape(hidden[-1], (-1, cfg.hidden))
    rows = np.flatnonzero(selected.reshape(-1))
    logits = lm_logits(params, cfg, nx.embed(flat, rows))
    return nx.cross_entropy(logits, targets.reshape(-1)[rows])


def pretrain_mlm(model: Model, corpus: Sequence[TokenSeq], epochs: int = 30, lr: float = 1e-3,
                 mask_rate: float = 0.15, batch_size: int = 32, seed: int = 0,
                 keep_rate: float = 0.1):
    """Masked-token pretraining of the base and LM head. Returns (model, per-epoch mean loss)."""
    if not 0.0 < mask_rate < 1.0:
        raise ModelError("mask_rate must lie in (0, 1)")
    if not 0.0 <= keep_rate < 1.0:
        raise ModelError("keep_rate must lie in [0, 1)")
    if len(corpus) == 0:
        raise ModelError("empty pretraining corpus")
    model = model.copy()
    names = [k for k in model.params if not k.startswith(CLS_PREFIX)]
    opt = Adam(lr)
    rng = np.random.default_rng(seed)
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            ids, mask = _stack([corpus[i] for i in order[start:start + batch_size]])
            corrupted, selected = mlm_mask(ids, mask, mask_rate, rng, keep_rate)
            if not selected.any():
                continue
            loss, grads = _loss_and_grads(
                model, names, lambda p: mlm_loss(model, p, corrupted, mask, ids, selected))
            opt.step(model.params, grads)
            total += loss
            count += 1
        trace.append(total / max(count, 1))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, trace[-1])
    return model, trace


def class_loss(model: Model, params, ids, mask, labels):
    _, logits = encode_batch(model, ids, mask, params)
    return nx.cross_entropy(logits, labels)


def finetune_classifier(model: Model, data: Sequence[TokenSeq], labels: Sequence[int],
                        epochs: int = 5, lr: float = 1e-3, batch_size: int = 32, seed: int = 0,
                        freeze: Sequence[str] = ()):
    """Train the classifier (and base unless frozen) with the LM head held fixed.

    ``freeze`` holds extra glob patterns of parameter names to keep fixed,
    e.g. ``"blocks.*.w1"``. Returns (model, per-epoch training accuracy).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(data) != len(labels):
        raise ModelError("data and labels differ in length")
    if labels.size and (labels.min() < 0 or labels.max() >= model.config.classes):
        raise ModelError(f"label outside 0..{model.config.classes - 1}")
    model = model.copy()
    frozen = set(model.lm_param_names())
    scope = model.config.finetune_scope
    if scope == "classifier":
        frozen |= {k for k in model.params if not k.startswith(CLS_PREFIX)}
    elif scope == "attention":
        frozen |= {k for k in model.params
                   if not (k.startswith(CLS_PREFIX) or k.endswith((".wq", ".wk")))}
    frozen |= {k for k in model.params if any(fnmatch.fnmatchcase(k, pat) for pat in freeze)}
    names = [k for k in model.params if k not in frozen]
    before = {k: model.params[k].copy() for k in frozen}
    opt = Adam(lr)
    rng = np.random.default_rng(seed)
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        correct = 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            ids, mask = _stack([data[i] for i in idx])
            y = labels[idx]
            graph = nx.DiffGraph()
            leaves = {k: graph.leaf(v) if k in names else v for k, v in model.params.items()}
            _, logits = encode_batch(model, ids, mask, leaves)
            loss = nx.cross_entropy(logits, y)
            grads = nx.gradients(graph, loss, [leaves[k] for k in names])
            correct += int((np.argmax(logits.value, axis=1) == y).sum())
            opt.step(model.params, dict(zip(names, grads)))
        trace.append(correct / max(len(data), 1))
        log.info("finetune epoch %d train acc %.4f", epoch + 1, trace[-1])
    for k, v in before.items():
        if not np.array_equal(v, model.params[k]):
            raise ModelError(f"frozen parameter {k} changed during fine-tuning")
    return model, trace


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(model: Model, path) -> None:
    """Magic, u64 header length, JSON header, then little-endian float64 payload."""
    manifest, offset, chunks = [], 0, []
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": dataclasses.asdict(model.config), "weights": manifest},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ModelError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    payload = memoryview(raw)[16 + hlen:]
    cfg = ModelConfig(**header["config"])
    params = {}
    for entry in header["weights"]:
        count = int(np.prod(entry["shape"]))
        start = entry["offset"]
        arr = np.frombuffer(payload[start:start + 8 * count], dtype="<f8")
        params[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    expected = _shapes(cfg)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise ModelError(f"{path}: weight manifest does not match config")
    return Model(cfg, params)
