"""Faithfulness games (hiding / revealing) and class token-overlap statistics."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import Model, predict
from .saliency import SaliencyResult
from .vocab import MASK_ID, TokenSeq, Vocabulary

DEFAULT_STEPS = tuple(round(i * 0.05, 10) for i in range(21))
DEFAULT_KS = (1, 2, 3, 5, 10, 20, 30, 40, 50)
_EPS = 1e-9


class EvaluationError(ValueError):
    pass


@dataclass
class EvalCurve:
    fractions: np.ndarray
    accuracies: np.ndarray
    game: str
    explainer: str

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.accuracies = np.asarray(self.accuracies, dtype=np.float64)

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fractions.tolist(), self.accuracies.tolist()))


def auc(curve: EvalCurve) -> float:
    """Trapezoidal area under accuracy vs. fraction."""
    x, y = curve.fractions, curve.accuracies
    if len(x) < 2:
        raise EvaluationError("a curve needs at least two points")
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def _check_steps(steps) -> np.ndarray:
    steps = np.asarray(steps, dtype=np.float64)
    if steps.ndim != 1 or len(steps) < 2:
        raise EvaluationError("need at least two step fractions")
    if np.any(steps < 0) or np.any(steps > 1) or np.any(np.diff(steps) <= 0):
        raise EvaluationError("steps must be strictly increasing within [0, 1]")
    return steps


def importance_order(seq: TokenSeq, scores) -> np.ndarray:
    """Content positions, most important first; ties go to the earlier position.

    ``scores`` is either a length-n array or a mapping position -> score;
    positions without a score rank below every scored one.
    """
    positions = seq.content_positions
    if isinstance(scores, Mapping):
        keyed = [(0 if p in scores else 1, -float(scores.get(p, 0.0)), int(p)) for p in positions]
    else:
        scores = np.asarray(scores, dtype=np.float64)
        keyed = [(0 if np.isfinite(scores[p]) else 1,
                  -float(scores[p]) if np.isfinite(scores[p]) else 0.0, int(p)) for p in positions]
    return np.array([k[2] for k in sorted(keyed)], dtype=np.int64)


def _perturbed(seq: TokenSeq, order: np.ndarray, f: float, game: str, hide_order: str):
    n = len(order)
    if game == "hiding":
        k = math.floor(f * n + _EPS)
        hidden = order[:k] if hide_order == "most" else order[::-1][:k]
    else:
        k = math.ceil(f * n - _EPS)
        hidden = order[k:]
    return seq.replace(hidden, MASK_ID, attend=False)


def game_curve(model: Model, seqs: Sequence[TokenSeq], labels: Sequence[int], scores: Sequence,
               game: str, steps=DEFAULT_STEPS, explainer: str = "", hide_order: str = "most",
               batch_size: int = 256) -> EvalCurve:
    """Accuracy after hiding (or revealing) a growing share of each input's content tokens.

    Hiding masks the ``floor(f * n)`` most important positions (``hide_order="least"``
    masks the least important instead); revealing starts fully masked and
    unmasks the ``ceil(f * n)`` most important. Masked positions get [MASK]
    and are dropped from attention. ``model`` may also be any callable
    mapping a list of TokenSeq to predicted labels.
    """
    if game not in ("hiding", "revealing"):
        raise EvaluationError(f"unknown game {game!r}")
    if hide_order not in ("most", "least"):
        raise EvaluationError(f"hide_order must be 'most' or 'least', got {hide_order!r}")
    if len(seqs) == 0:
        raise EvaluationError("empty dataset")
    if not (len(seqs) == len(labels) == len(scores)):
        raise EvaluationError("seqs, labels and scores differ in length")
    steps = _check_steps(steps)
    labels = np.asarray(labels, dtype=np.int64)
    orders = [importance_order(s, sc) for s, sc in zip(seqs, scores)]
    batch = [_perturbed(s, o, f, game, hide_order) for f in steps for s, o in zip(seqs, orders)]
    if isinstance(model, Model):
        preds = predict(model, batch, batch_size)
    elif callable(model):
        preds = np.asarray(model(batch))
    else:
        raise EvaluationError("model must be a Model or a callable over TokenSeq lists")
    preds = preds.reshape(len(steps), len(seqs))
    acc = (preds == labels[None, :]).mean(axis=1)
    return EvalCurve(steps, acc, game, explainer)


def hiding_curve(model, seqs, labels, scores, steps=DEFAULT_STEPS, explainer="", hide_order="most"):
    return game_curve(model, seqs, labels, scores, "hiding", steps, explainer, hide_order)


def revealing_curve(model, seqs, labels, scores, steps=DEFAULT_STEPS, explainer=""):
    return game_curve(model, seqs, labels, scores, "revealing", steps, explainer)


def random_scores(seqs: Sequence[TokenSeq], rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for s in seqs:
        sc = np.zeros(len(s))
        pos = s.content_positions
        sc[pos] = rng.permutation(len(pos)) + 1.0
        out.append(sc)
    return out


def random_baseline(model: Model, seqs, labels, trials: int = 20, seed: int = 0,
                    steps=DEFAULT_STEPS, hide_order: str = "most") -> tuple[EvalCurve, EvalCurve]:
    """(hiding, revealing) curves averaged over random rankings; trial ``t`` uses seed ``(seed, t)``."""
    if trials < 1:
        raise EvaluationError("trials must be >= 1")
    hid, rev = [], []
    for t in range(trials):
        scores = random_scores(seqs, np.random.default_rng([seed, t]))
        hid.append(hiding_curve(model, seqs, labels, scores, steps, "random", hide_order).accuracies)
        rev.append(revealing_curve(model, seqs, labels, scores, steps, "random").accuracies)
    steps = _check_steps(steps)
    return (EvalCurve(steps, np.mean(hid, axis=0), "hiding", "random"),
            EvalCurve(steps, np.mean(rev, axis=0), "revealing", "random"))


# --------------------------------------------------------------- token overlap

@dataclass
class IdfTable:
    weights: dict[str, float]
    n_docs: int

    def __getitem__(self, token: str) -> float:
        return self.weights.get(token, math.log(1.0 + self.n_docs) + 1.0)


def build_idf(documents: Iterable) -> IdfTable:
    """``ln((1 + N) / (1 + df)) + 1`` over documents (strings or token lists)."""
    from .vocab import tokenize
    df: dict[str, int] = defaultdict(int)
    n = 0
    for doc in documents:
        n += 1
        toks = tokenize(doc) if isinstance(doc, str) else doc
        for tok in set(toks):
            df[tok] += 1
    if n == 0:
        raise EvaluationError("empty reference corpus")
    return IdfTable({t: math.log((1.0 + n) / (1.0 + d)) + 1.0 for t, d in df.items()}, n)


def class_token_ranking(results: Iterable[SaliencyResult], idf: IdfTable,
                        vocab: Vocabulary) -> dict[int, list[tuple[str, float]]]:
    """Per predicted class: tokens by idf-weighted total saliency (descending, ties by token)."""
    totals: dict[int, dict[str, float]] = defaultdict(lambda: defaultdict(float))
    seen = False
    for r in results:
        seen = True
        bucket = totals[r.predicted_class]
        for tid, score in zip(r.token_ids, r.scores):
            bucket[vocab.tokens[tid]] += float(score)
    if not seen:
        raise EvaluationError("no explanations to rank")
    return {c: sorted(((tok, idf[tok] * s) for tok, s in bucket.items()),
                      key=lambda kv: (-kv[1], kv[0]))
            for c, bucket in sorted(totals.items())}


@dataclass
class OverlapReport:
    k: int
    k_requested: int
    classes: list[int]
    pairs: list[dict] = field(default_factory=list)
    total_count: int = 0
    percentage: float = 0.0

    def to_json(self) -> dict:
        return {"k": self.k, "k_requested": self.k_requested, "classes": self.classes,
                "pairs": self.pairs, "total_count": self.total_count, "percentage": self.percentage}


def overlap(rankings: Mapping[int, Sequence], k: int) -> OverlapReport:
    """Shared top-k tokens over every class pair, as a count and as count / (C choose 2 * k).

    ``k`` is clamped to the shortest ranking; the report keeps both values.
    """
    if k < 1:
        raise EvaluationError("k must be >= 1")
    classes = sorted(rankings)
    if len(classes) < 2:
        raise EvaluationError("overlap needs at least two classes")

    def tokens(entry):
        return entry[0] if isinstance(entry, (tuple, list)) else entry

    k_used = min(k, min(len(rankings[c]) for c in classes))
    tops = {c: [tokens(e) for e in rankings[c][:k_used]] for c in classes}
    pairs, total = [], 0
    for a, b in combinations(classes, 2):
        shared = sorted(set(tops[a]) & set(tops[b]))
        pairs.append({"a": a, "b": b, "tokens": shared, "count": len(shared)})
        total += len(shared)
    n_pairs = len(classes) * (len(classes) - 1) // 2
    pct = total / (n_pairs * k_used) if k_used else 0.0
    return OverlapReport(k_used, k, classes, pairs, total, pct)


def overlap_sweep(rankings, ks=DEFAULT_KS) -> list[OverlapReport]:
    return [overlap(rankings, k) for k in ks]
