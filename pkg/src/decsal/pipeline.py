"""End-to-end experiment stages that communicate through files in one output directory.

Every stage reads what it needs from the directory, so stages can be run
one at a time from the command line or chained by :func:`run_experiment`.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as D
from . import evaluation as E
from . import model as M
from . import reports as R
from . import saliency as S
from .config import ConfigError, ExperimentConfig
from .numerics import check_finite
from .vocab import Vocabulary, build_vocab, encode

log = logging.getLogger(__name__)

STAGES = ("data", "vocab", "pretrain", "finetune", "explain", "game", "overlap", "report")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def worker_count() -> int:
    raw = os.environ.get("DECSAL_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DECSAL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DECSAL_THREADS must be a positive integer, got {raw!r}")
    return n


def ordered_map(fn: Callable, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; order follows ``items``."""
    workers = worker_count() if workers is None else workers
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class Experiment:
    """File layout and stage implementations for one output directory."""

    def __init__(self, cfg: ExperimentConfig, out: Path | str | None = None):
        self.cfg = cfg
        self.out = Path(out or cfg.io.out)
        self.seeds = cfg.seeds()

    # ---------------------------------------------------------------- paths
    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def _require(self, *names: str) -> None:
        for name in names:
            if not self.path(name).exists():
                raise D.DataError(f"{self.path(name)} missing; run the earlier stages first")

    # ------------------------------------------------------------- loaders
    def dataset(self, require_label: bool = True) -> D.Dataset:
        self._require("dataset.jsonl")
        return D.ingest(self.path("dataset.jsonl"), "jsonl", require_label=require_label)

    def truth(self) -> dict | None:
        p = self.path("truth.json")
        return json.loads(p.read_text()) if p.exists() else None

    def vocab(self) -> Vocabulary:
        self._require("vocab.json")
        return Vocabulary.load(self.path("vocab.json"))

    def corpus(self) -> list[str]:
        self._require("corpus.txt")
        return D.read_documents(self.path("corpus.txt"))

    def checkpoint(self, name: str) -> M.Model:
        self._require(name)
        return M.load_checkpoint(self.path(name))

    def eval_records(self, require_label: bool = True) -> list[D.Record]:
        recs = self.dataset(require_label).split(self.cfg.evaluation.split)
        if self.cfg.evaluation.max_inputs:
            recs = recs[: self.cfg.evaluation.max_inputs]
        if not recs:
            raise D.DataError(f"split {self.cfg.evaluation.split!r} is empty")
        return recs

    def explanations(self) -> list[dict]:
        files = sorted(self.path("explanations").glob("*.json")) if self.path("explanations").exists() else []
        if not files:
            raise D.DataError("no explanations found; run the explain stage first")
        return [json.loads(f.read_text()) for f in files]

    # -------------------------------------------------------------- stages
    def stage_data(self) -> None:
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        if cfg.data.source == "synthetic":
            s = cfg.synthetic
            ds, truth = D.generate_synthetic(s.classes, s.planted_per_class, s.vocab_content, s.seq_len,
                                             s.n_samples, s.noise_rate, self.seeds["data"])
            R.write_json(self.path("truth.json"), truth.to_json())
        else:
            ds = D.ingest(cfg.data.path, cfg.data.format or None)
            if self.path("truth.json").exists():
                self.path("truth.json").unlink()
        if not ds.split("train"):
            raise D.DataError("dataset has no train split")
        self.path("dataset.jsonl").write_text(ds.to_jsonl(), encoding="utf-8")
        if cfg.data.pretrain_corpus:
            corpus = D.read_documents(cfg.data.pretrain_corpus)
        elif cfg.data.source == "synthetic":
            c = cfg.corpus
            corpus = D.generate_lm_corpus(D.word_pool(cfg.synthetic.vocab_content), c.n_seqs, c.seq_len,
                                          c.follow_prob, c.copy_fraction, self.seeds["corpus"],
                                          grammar_seed=self.seeds["corpus"])
        else:
            corpus = D.texts(ds.split("train"))
        self.path("corpus.txt").write_text("".join(line + "\n" for line in corpus), encoding="utf-8")

    def stage_vocab(self) -> None:
        texts = D.texts(self.dataset().split("train")) + self.corpus()
        build_vocab(texts, self.cfg.data.max_vocab, self.cfg.data.min_freq).save(self.path("vocab.json"))

    def stage_pretrain(self) -> None:
        cfg, vocab, ds = self.cfg, self.vocab(), self.dataset()
        mcfg = cfg.model_config(len(vocab), max(ds.num_classes, 2))
        corpus = [encode(vocab, t, mcfg.n_max) for t in self.corpus()]
        p = cfg.pretrain
        model, losses = M.pretrain_mlm(M.init_model(mcfg), corpus, p.epochs, p.lr, p.mask_rate,
                                       p.batch_size, self.seeds["pretrain"], p.keep_rate)
        check_finite("pretraining loss", np.array(losses))
        check_finite("pretrained weights", *model.params.values())
        M.save_checkpoint(model, self.path("pretrained.ckpt"))
        R.write_csv(self.path("pretrain_loss.csv"), ("epoch", "loss"),
                    ((i + 1, repr(float(v))) for i, v in enumerate(losses)))

    def stage_finetune(self) -> None:
        cfg, vocab, ds = self.cfg, self.vocab(), self.dataset()
        model = self.checkpoint("pretrained.ckpt")
        train = ds.split("train")
        if any(r.label is None for r in train):
            raise D.DataError("fine-tuning needs labels on every train record")
        seqs = [encode(vocab, r.text, model.config.n_max) for r in train]
        f = cfg.finetune
        model, acc = M.finetune_classifier(model, seqs, [r.label for r in train], f.epochs, f.lr,
                                           f.batch_size, self.seeds["finetune"])
        check_finite("fine-tuned weights", *model.params.values())
        M.save_checkpoint(model, self.path("finetuned.ckpt"))
        recs = [r for r in self.eval_records() if r.label is not None]
        eval_acc = None
        if recs:
            preds = M.predict(model, [encode(vocab, r.text, model.config.n_max) for r in recs])
            eval_acc = float(np.mean(preds == np.array([r.label for r in recs])))
        R.write_json(self.path("finetune.json"), {"train_accuracy": [float(a) for a in acc],
                                                 "eval_split": cfg.evaluation.split,
                                                 "eval_accuracy": eval_acc})

    def explainer_names(self, n_layers: int) -> list[str]:
        names = []
        for method in self.cfg.saliency.methods:
            names += [f"{method}-l{layer}" for layer in self.cfg.layers(n_layers)]
            if self.cfg.saliency.vanilla:
                names.append(f"{method}-vanilla")
        return names

    def stage_explain(self) -> None:
        """Explain the evaluation split from text alone; gold labels are never read."""
        cfg, vocab = self.cfg, self.vocab()
        model = self.checkpoint("finetuned.ckpt")
        layers = cfg.layers(model.config.layers)
        sal = cfg.saliency
        texts = D.texts(D.Dataset(self.eval_records(require_label=False)).without_labels().records)

        def one(item):
            index, text = item
            seq = encode(vocab, text, model.config.n_max)
            entries = []
            if not seq.unique_content_ids:
                return {"index": index, "text": text, "tokens": [], "explanations": entries}
            T = len(seq.unique_content_ids)
            tau = min(sal.tau, T) if sal.tau else None
            for method in sal.methods:
                results = S.explain(model, seq, layers, tau, method, None, sal.per_term_relu)
                names = [f"{method}-l{layer}" for layer in layers]
                if sal.vanilla:
                    results += S.explain(model, seq, [0], None, method, None, False, "identity")
                    names.append(f"{method}-vanilla")
                for name, res in zip(names, results):
                    check_finite(f"saliency {name} for input {index}", res.scores, res.position_scores)
                    entries.append({"explainer": name, **res.to_json(vocab)})
            n_real = int(np.sum(seq.ids != 0))
            return {"index": index, "text": text,
                    "tokens": [vocab.tokens[i] for i in seq.ids[:n_real]], "explanations": entries}

        docs = ordered_map(one, enumerate(texts))
        folder = self.path("explanations")
        folder.mkdir(exist_ok=True)
        for stale in folder.glob("*.json"):
            stale.unlink()
        for doc in docs:
            R.write_json(folder / f"{doc['index']:05d}.json", doc)

    def _scores_by_explainer(self, docs, seqs) -> dict[str, list[np.ndarray]]:
        out: dict[str, list[np.ndarray]] = {}
        for doc, seq in zip(docs, seqs):
            for ex in doc["explanations"]:
                sc = np.full(len(seq), np.nan)
                ps = ex["position_scores"]
                sc[: len(ps)] = ps
                out.setdefault(ex["explainer"], []).append(sc)
        return out

    def stage_game(self) -> None:
        cfg, vocab = self.cfg, self.vocab()
        model = self.checkpoint("finetuned.ckpt")
        recs = self.eval_records()
        if any(r.label is None for r in recs):
            raise D.DataError("the games need labels on every evaluation record")
        docs = self.explanations()
        if len(docs) != len(recs):
            raise D.DataError("explanations do not match the evaluation split; rerun explain")
        seqs = [encode(vocab, r.text, model.config.n_max) for r in recs]
        labels = [r.label for r in recs]
        ev = cfg.evaluation
        steps = [i / ev.steps for i in range(ev.steps + 1)]
        by_name = self._scores_by_explainer(docs, seqs)
        truth = self.truth()
        if truth is not None:
            planted = [vocab.index[w] for ws in truth["planted"].values() for w in ws if w in vocab.index]
            by_name["oracle"] = [np.isin(s.ids, planted).astype(np.float64) for s in seqs]
        curves = []
        for name, scores in by_name.items():
            curves.append(E.hiding_curve(model, seqs, labels, scores, steps, name, ev.hide_order))
            curves.append(E.revealing_curve(model, seqs, labels, scores, steps, name))
        curves += E.random_baseline(model, seqs, labels, ev.random_trials, self.seeds["random"],
                                    steps, ev.hide_order)
        R.write_curves_csv(self.path("curves.csv"), curves)
        R.write_auc_csv(self.path("auc.csv"), curves)

    def stage_overlap(self) -> None:
        cfg, vocab = self.cfg, self.vocab()
        ev = cfg.evaluation
        ref = D.read_documents(ev.reference_corpus) if ev.reference_corpus else self.corpus()
        idf = E.build_idf(ref)
        results: dict[str, list[S.SaliencyResult]] = {}
        for doc in self.explanations():
            for ex in doc["explanations"]:
                results.setdefault(ex["explainer"], []).append(S.SaliencyResult.from_json(ex))
        report, folder = {}, self.path("wordcloud")
        folder.mkdir(exist_ok=True)
        for name, res in results.items():
            rankings = E.class_token_ranking(res, idf, vocab)
            entry = {"classes": sorted(rankings), "sweep": []}
            if len(rankings) >= 2:
                entry["sweep"] = [r.to_json() for r in E.overlap_sweep(rankings, ev.ks)]
            report[name] = entry
            R.write_json(folder / f"{name}.json",
                         {str(c): [{"token": t, "weight": w} for t, w in ranked[: ev.wordcloud_size]]
                          for c, ranked in rankings.items()})
        R.write_json(self.path("overlap.json"), report)

    def stage_report(self) -> None:
        curves = R.read_curves_csv(self.path("curves.csv")) if self.path("curves.csv").exists() else []
        labels = {"hiding": "fraction of tokens hidden", "revealing": "fraction of tokens revealed"}
        for game in ("hiding", "revealing"):
            chosen = [c for c in curves if c.game == game]
            if chosen:
                svg = R.svg_line_plot(chosen, f"{game.capitalize()} game", labels[game], "accuracy")
                self.path(f"{game}.svg").write_text(svg, encoding="utf-8")
        folder = self.path("highlights")
        folder.mkdir(exist_ok=True)
        rows: dict[str, list[dict]] = {}
        for doc in self.explanations():
            for ex in doc["explanations"]:
                n = len(doc["tokens"])
                rows.setdefault(ex["explainer"], []).append({
                    "tokens": doc["tokens"], "scores": np.array(ex["position_scores"][:n]),
                    "caption": f"#{doc['index']} predicted class {ex['predicted_class']} "
                               f"(p={ex['class_prob']:.3f})"})
        for name, entries in rows.items():
            (folder / f"{name}.html").write_text(R.highlight_html(f"Saliency: {name}", entries),
                                                 encoding="utf-8")

    # ------------------------------------------------------------ manifest
    def _manifest(self) -> dict:
        p = self.path("manifest.json")
        if p.exists():
            try:
                return json.loads(p.read_text())
            except json.JSONDecodeError:
                pass
        return {}

    def write_manifest(self, stages: dict[str, str], failed: str | None = None) -> None:
        files = sorted(p for p in self.out.rglob("*") if p.is_file() and p.name != "manifest.json")
        R.write_json(self.path("manifest.json"), {
            "config_sha256": self.cfg.digest(),
            "config": {k: v for k, v in self.cfg.to_dict().items() if k != "io"},
            "seed": self.cfg.seed,
            "seeds": self.seeds,
            "stages": stages,
            "status": "failed" if failed else
                      ("complete" if all(stages.get(s) == "done" for s in STAGES) else "partial"),
            "failed_stage": failed,
            "artifacts": {str(p.relative_to(self.out)): hashlib.sha256(p.read_bytes()).hexdigest()
                          for p in files},
        })

    def run_stage(self, name: str) -> None:
        if name not in STAGES:
            raise ConfigError(f"unknown stage {name!r}")
        self.out.mkdir(parents=True, exist_ok=True)
        stages = dict(self._manifest().get("stages", {}))
        log.info("stage %s", name)
        try:
            getattr(self, f"stage_{name}")()
        except Exception as exc:
            stages[name] = "failed"
            self.write_manifest(stages, failed=name)
            raise StageError(name, exc) from exc
        stages[name] = "done"
        self.write_manifest(stages)


def run_experiment(cfg: ExperimentConfig, out: Path | str | None = None,
                   stages=STAGES) -> Path:
    """Run the stages in order into ``out``; returns the output directory."""
    exp = Experiment(cfg, out)
    for i, name in enumerate(stages):
        if i == 0 and exp.path("manifest.json").exists():
            exp.path("manifest.json").unlink()
        exp.run_stage(name)
    return exp.out
