"""Layer saliency decoded onto input tokens through the LM head.

A layer's feature scores (gradient x activation for Grad-CAM, raw loss
gradient for "simple") are summed over features per output position.
The LM head turns the layer output into token probabilities; the columns
of those probabilities belonging to the input's tokens say how much each
input token makes up each output position, and the per-position scores
are redistributed onto tokens with those weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import Model, lm_decode, record_forward
from .vocab import N_SPECIALS, TokenSeq, Vocabulary

METHODS = ("gradcam", "simple")


class SaliencyError(ValueError):
    pass


@dataclass
class FeatureScores:
    alpha: np.ndarray      # n x K
    layer: int
    cls: int
    method: str


@dataclass
class TokenContributions:
    dhat: np.ndarray       # T x n
    token_ids: tuple[int, ...]
    layer: int


@dataclass
class SaliencyResult:
    token_ids: tuple[int, ...]
    scores: np.ndarray                  # length T, aligned with token_ids
    layer: int
    method: str
    tau: int
    predicted_class: int
    class_prob: float
    position_scores: np.ndarray = field(repr=False)   # length n, zero at specials
    positions: dict[int, list[int]] = field(repr=False, default_factory=dict)
    decoder: str = "lm"

    def score_of(self, token_id: int) -> float:
        return float(self.scores[self.token_ids.index(token_id)])

    def ranking(self) -> list[int]:
        """Token ids by descending score, ties by first appearance."""
        order = sorted(range(len(self.token_ids)), key=lambda i: (-self.scores[i], i))
        return [self.token_ids[i] for i in order]

    def to_json(self, vocab: Vocabulary | None = None) -> dict:
        return {
            "layer": self.layer,
            "method": self.method,
            "decoder": self.decoder,
            "tau": self.tau,
            "predicted_class": self.predicted_class,
            "class_prob": self.class_prob,
            "tokens": [
                {"token": vocab.tokens[t] if vocab else str(t), "id": int(t),
                 "score": float(s), "positions": self.positions.get(t, [])}
                for t, s in zip(self.token_ids, self.scores)
            ],
            "position_scores": [float(x) for x in self.position_scores],
        }

    @classmethod
    def from_json(cls, data: dict) -> "SaliencyResult":
        toks = data["tokens"]
        ids = tuple(int(t["id"]) for t in toks)
        return cls(ids, np.array([t["score"] for t in toks], dtype=np.float64), data["layer"],
                   data["method"], data["tau"], data["predicted_class"], data["class_prob"],
                   np.array(data.get("position_scores", []), dtype=np.float64),
                   {i: list(t["positions"]) for i, t in zip(ids, toks)}, data.get("decoder", "lm"))


def _check_layer(model: Model, layer: int) -> None:
    if not 0 <= layer <= model.config.layers:
        raise SaliencyError(f"layer {layer} outside 0..{model.config.layers}")


def _check_class(model: Model, cls: int) -> None:
    if not 0 <= cls < model.config.classes:
        raise SaliencyError(f"class {cls} outside 0..{model.config.classes - 1}")


def layer_gradients(model: Model, seq: TokenSeq, layers: Sequence[int], method: str,
                    cls: int | None = None):
    """One backward pass; returns (class, class probabilities, {layer: (h_l, grad)}).

    gradcam differentiates the pre-softmax logit of ``cls``; simple
    differentiates the cross-entropy against ``cls``. ``cls`` defaults to
    the predicted class.
    """
    if method not in METHODS:
        raise SaliencyError(f"unknown method {method!r}; expected one of {METHODS}")
    for layer in layers:
        _check_layer(model, layer)
    graph = nx.DiffGraph()
    hidden, logits = record_forward(model, seq, graph)
    z = logits.value[0]
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    if cls is None:
        cls = int(np.argmax(z))
    _check_class(model, cls)
    if method == "gradcam":
        target = nx.take(logits, (slice(0, 1), slice(cls, cls + 1)))
    else:
        target = nx.cross_entropy(logits, [cls])
    nodes = [hidden[layer] for layer in layers]
    grads = nx.gradients(graph, target, nodes)
    out = {layer: (node.value[0], g[0]) for layer, node, g in zip(layers, nodes, grads)}
    return cls, probs, out


def feature_scores_gradcam(model: Model, seq: TokenSeq, layer: int,
                           cls: int | None = None) -> FeatureScores:
    cls, _, per_layer = layer_gradients(model, seq, [layer], "gradcam", cls)
    h, g = per_layer[layer]
    return FeatureScores(g * h, layer, cls, "gradcam")


def feature_scores_simple(model: Model, seq: TokenSeq, layer: int,
                          cls: int | None = None) -> FeatureScores:
    cls, _, per_layer = layer_gradients(model, seq, [layer], "simple", cls)
    return FeatureScores(per_layer[layer][1], layer, cls, "simple")


def aggregate(fs) -> np.ndarray:
    """ReLU of the feature sum per position."""
    alpha = fs.alpha if isinstance(fs, FeatureScores) else np.asarray(fs, dtype=np.float64)
    return np.maximum(alpha.sum(axis=1), 0.0)


def l1_normalize(scores: np.ndarray) -> np.ndarray:
    total = np.abs(scores).sum()
    return scores / total if total > 0 else np.zeros_like(scores)


def contributions_from_probs(probs: np.ndarray, seq: TokenSeq, layer: int = -1) -> TokenContributions:
    """Rows are the probability columns of the input's unique content tokens."""
    token_ids = seq.unique_content_ids
    if not token_ids:
        raise SaliencyError("input has no content tokens")
    dhat = probs[:, list(token_ids)].T.copy()
    dhat[:, ~seq.mask] = 0.0
    return TokenContributions(dhat, token_ids, layer)


def token_contributions(model: Model, seq: TokenSeq, layer: int, h: np.ndarray | None = None
                        ) -> TokenContributions:
    _check_layer(model, layer)
    if h is None:
        from .model import forward
        h = forward(model, seq).hidden[layer]
    return contributions_from_probs(lm_decode(model, h), seq, layer)


def identity_contributions(seq: TokenSeq) -> TokenContributions:
    """Indicator decoder: each position belongs wholly to its own token."""
    token_ids = seq.unique_content_ids
    if not token_ids:
        raise SaliencyError("input has no content tokens")
    dhat = np.array([(seq.ids == t) & seq.mask for t in token_ids], dtype=np.float64)
    return TokenContributions(dhat, token_ids, 0)


def top_tau_weights(dhat: np.ndarray, tau: int) -> np.ndarray:
    """Zero every entry that is not among its column's ``tau`` largest (ties: lower row first)."""
    T = dhat.shape[0]
    if not 1 <= tau <= T:
        raise SaliencyError(f"tau={tau} outside 1..{T}")
    if tau == T:
        return dhat.copy()
    order = np.argsort(-dhat, axis=0, kind="stable")
    keep = np.zeros_like(dhat, dtype=bool)
    np.put_along_axis(keep, order[:tau], True, axis=0)
    return np.where(keep, dhat, 0.0)


def project_scores(dhat: np.ndarray, position_sums: np.ndarray, tau: int,
                   per_term_relu: bool = False) -> np.ndarray:
    """Token scores from per-position feature sums weighted by top-tau contributions.

    Default: ``ReLU(W @ r)``. With ``per_term_relu`` each contribution is
    clamped before summing: ``sum_j ReLU(W[i, j] * r[j])``.
    """
    weights = top_tau_weights(dhat, tau)
    if per_term_relu:
        return np.maximum(weights * position_sums[None, :], 0.0).sum(axis=1)
    return np.maximum(weights @ position_sums, 0.0)


def _positions(seq: TokenSeq, token_ids) -> dict[int, list[int]]:
    return {t: [int(p) for p in np.flatnonzero(seq.ids == t)] for t in token_ids}


def _broadcast(seq: TokenSeq, token_ids, scores) -> np.ndarray:
    out = np.zeros(len(seq))
    for t, s in zip(token_ids, scores):
        out[seq.ids == t] = s
    return out


def saliency_from_gradients(model: Model, seq: TokenSeq, layer: int, h: np.ndarray,
                            grad: np.ndarray, method: str, cls: int, class_prob: float,
                            tau: int | None = None, per_term_relu: bool = False,
                            decoder: str = "lm") -> SaliencyResult:
    alpha = grad * h if method == "gradcam" else grad
    sums = alpha.sum(axis=1)
    if decoder == "identity":
        contrib = identity_contributions(seq)
        position_scores = aggregate(alpha)
        position_scores[seq.ids < N_SPECIALS] = 0.0
        position_scores[~seq.mask] = 0.0
        scores = contrib.dhat @ position_scores
        tau_used = len(contrib.token_ids) if tau is None else tau
        if not 1 <= tau_used <= len(contrib.token_ids):
            raise SaliencyError(f"tau={tau_used} outside 1..{len(contrib.token_ids)}")
        if method == "simple":
            total = np.abs(scores).sum()
            scores = scores / total if total > 0 else np.zeros_like(scores)
            position_scores = position_scores / total if total > 0 else np.zeros_like(position_scores)
    elif decoder == "lm":
        contrib = contributions_from_probs(lm_decode(model, h), seq, layer)
        tau_used = len(contrib.token_ids) if tau is None else tau
        scores = project_scores(contrib.dhat, sums, tau_used, per_term_relu)
        if method == "simple":
            scores = l1_normalize(scores)
        position_scores = _broadcast(seq, contrib.token_ids, scores)
    else:
        raise SaliencyError(f"unknown decoder {decoder!r}")
    return SaliencyResult(contrib.token_ids, scores, layer, method, tau_used, cls, class_prob,
                          position_scores, _positions(seq, contrib.token_ids), decoder)


def decoded_saliency(model: Model, seq: TokenSeq, layer: int, tau: int | None = None,
                     method: str = "gradcam", cls: int | None = None,
                     per_term_relu: bool = False, decoder: str = "lm") -> SaliencyResult:
    """Saliency of each unique input token from layer ``layer``'s downstream computation.

    ``tau`` defaults to T (no restriction). ``decoder="identity"`` skips the
    LM head and reports the plain per-position scores (the vanilla variant).
    """
    return explain(model, seq, [layer], tau, method, cls, per_term_relu, decoder)[0]


def explain(model: Model, seq: TokenSeq, layers: Sequence[int], tau: int | None = None,
            method: str = "gradcam", cls: int | None = None, per_term_relu: bool = False,
            decoder: str = "lm") -> list[SaliencyResult]:
    """Saliency for several layers from one backward pass."""
    if not seq.unique_content_ids:
        raise SaliencyError("input has no content tokens")
    cls, probs, per_layer = layer_gradients(model, seq, list(layers), method, cls)
    return [saliency_from_gradients(model, seq, layer, *per_layer[layer], method, cls,
                                    float(probs[cls]), tau, per_term_relu, decoder)
            for layer in layers]
