"""Experiment configuration loaded from TOML."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import FINETUNE_SCOPES, ModelConfig
from .saliency import METHODS


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = "synthetic"          # "synthetic" or "file"
    path: str = ""                     # labelled dataset (jsonl/csv) for source = "file"
    format: str = ""                   # inferred from the suffix when empty
    pretrain_corpus: str = ""          # one document per line; optional
    max_vocab: int = 2048
    min_freq: int = 1


@dataclass
class SyntheticSection:
    classes: int = 4
    planted_per_class: int = 1
    vocab_content: int = 200
    seq_len: int = 12
    n_samples: int = 2000
    noise_rate: float = 0.0


@dataclass
class CorpusSection:
    n_seqs: int = 2000
    seq_len: int = 12
    copy_fraction: float = 1.0
    follow_prob: float = 0.85


@dataclass
class ModelSection:
    preset: str = "desk"               # "desk" or "paper"
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    n_max: int = 32
    ffn_mult: int = 4
    tie_lm_head: bool = False
    finetune_scope: str = "full"
    pooling: str = "cls"


@dataclass
class PretrainSection:
    epochs: int = 30
    lr: float = 1e-3
    mask_rate: float = 0.15
    keep_rate: float = 0.1
    batch_size: int = 32


@dataclass
class FinetuneSection:
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 32


@dataclass
class SaliencySection:
    layers: list[int] = field(default_factory=list)      # empty = every layer
    methods: list[str] = field(default_factory=lambda: ["gradcam", "simple"])
    tau: int = 0                                          # 0 = unrestricted
    per_term_relu: bool = False
    vanilla: bool = True                                  # add the layer-0 identity baseline


@dataclass
class EvaluationSection:
    split: str = "test"
    max_inputs: int = 0                                   # 0 = whole split
    steps: int = 20                                       # grid 0, 1/steps, ..., 1
    random_trials: int = 20
    ks: list[int] = field(default_factory=lambda: [1, 2, 3, 5, 10, 20, 30, 40, 50])
    hide_order: str = "most"
    reference_corpus: str = ""
    wordcloud_size: int = 50


@dataclass
class IoSection:
    out: str = "runs/experiment"


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    saliency: SaliencySection = field(default_factory=SaliencySection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    io: IoSection = field(default_factory=IoSection)
    source_hash: str = field(default="", compare=False)

    def seeds(self) -> dict[str, int]:
        """Per-stage seeds derived from the master seed."""
        names = ("data", "corpus", "init", "pretrain", "finetune", "random")
        return {name: self.seed * 1000 + i for i, name in enumerate(names)}

    def model_config(self, vocab_size: int, classes: int) -> ModelConfig:
        m = self.model
        common = dict(classes=classes, seed=self.seeds()["init"], tie_lm_head=m.tie_lm_head,
                      finetune_scope=m.finetune_scope, pooling=m.pooling)
        if m.preset == "paper":
            return ModelConfig.paper_preset(vocab_size, n_max=m.n_max, **common)
        return ModelConfig(vocab_size=vocab_size, hidden=m.hidden, layers=m.layers, heads=m.heads,
                           n_max=m.n_max, ffn_mult=m.ffn_mult, **common)

    def layers(self, n_layers: int) -> list[int]:
        return list(self.saliency.layers) if self.saliency.layers else list(range(n_layers + 1))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("source_hash")
        return d

    def digest(self) -> str:
        """Hash of the source file when loaded from one, else of the canonical fields."""
        if self.source_hash:
            return self.source_hash
        canon = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(canon).hexdigest()


_SECTIONS = {f.name: f.type for f in fields(ExperimentConfig)
             if f.name not in ("seed", "source_hash")}


def _fill(cls, raw: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"[{where}] unknown key(s): {', '.join(unknown)}")
    obj = cls()
    for key, val in raw.items():
        default = getattr(obj, key)
        if isinstance(default, bool):
            ok = isinstance(val, bool)
        elif isinstance(default, int):
            ok = isinstance(val, int) and not isinstance(val, bool)
        elif isinstance(default, float):
            ok = isinstance(val, (int, float)) and not isinstance(val, bool)
            val = float(val) if ok else val
        elif isinstance(default, list):
            ok = isinstance(val, list)
        else:
            ok = isinstance(val, str)
        if not ok:
            raise ConfigError(f"[{where}] {key}: expected {type(default).__name__}, got {val!r}")
        setattr(obj, key, val)
    return obj


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ExperimentConfig, base_dir: Path | None = None) -> ExperimentConfig:
    """Range checks; resolves relative paths against ``base_dir`` and checks they exist."""
    d, s, c, m = cfg.data, cfg.synthetic, cfg.corpus, cfg.model
    p, f, sal, ev = cfg.pretrain, cfg.finetune, cfg.saliency, cfg.evaluation
    _check(cfg.seed >= 0, "seed must be >= 0")
    _check(d.source in ("synthetic", "file"), "data.source must be 'synthetic' or 'file'")
    _check(d.source != "file" or bool(d.path), "data.path is required when data.source = 'file'")
    _check(d.format in ("", "jsonl", "csv"), "data.format must be 'jsonl' or 'csv'")
    _check(d.max_vocab >= 6 and d.min_freq >= 1, "data.max_vocab must be >= 6, min_freq >= 1")
    _check(s.classes >= 2 and s.planted_per_class >= 1, "synthetic.classes >= 2, planted_per_class >= 1")
    _check(s.vocab_content > s.classes * s.planted_per_class, "synthetic.vocab_content too small")
    _check(s.seq_len >= 1 and s.n_samples >= 10, "synthetic.seq_len >= 1, n_samples >= 10")
    _check(0.0 <= s.noise_rate < 1.0, "synthetic.noise_rate must lie in [0, 1)")
    _check(c.n_seqs >= 1 and c.seq_len >= 2, "corpus.n_seqs >= 1, seq_len >= 2")
    _check(0.0 <= c.copy_fraction <= 1.0 and 0.0 <= c.follow_prob <= 1.0,
           "corpus.copy_fraction and follow_prob must lie in [0, 1]")
    _check(m.preset in ("desk", "paper"), "model.preset must be 'desk' or 'paper'")
    _check(m.hidden >= 1 and m.heads >= 1 and m.hidden % m.heads == 0,
           "model.hidden must be a positive multiple of model.heads")
    _check(m.layers >= 1 and m.ffn_mult >= 1 and m.n_max >= 3, "model.layers, ffn_mult >= 1, n_max >= 3")
    _check(m.finetune_scope in FINETUNE_SCOPES, f"model.finetune_scope must be one of {FINETUNE_SCOPES}")
    _check(m.pooling in ("cls", "mean"), "model.pooling must be 'cls' or 'mean'")
    for name, sec in (("pretrain", p), ("finetune", f)):
        _check(sec.epochs >= 0 and sec.lr > 0 and sec.batch_size >= 1,
               f"{name}: epochs >= 0, lr > 0, batch_size >= 1")
    _check(0.0 < p.mask_rate < 1.0 and 0.0 <= p.keep_rate < 1.0,
           "pretrain.mask_rate in (0, 1), keep_rate in [0, 1)")
    n_layers = 12 if m.preset == "paper" else m.layers
    _check(all(isinstance(x, int) and 0 <= x <= n_layers for x in sal.layers),
           f"saliency.layers must lie in 0..{n_layers}")
    _check(bool(sal.methods) and all(x in METHODS for x in sal.methods),
           f"saliency.methods must be a nonempty subset of {METHODS}")
    _check(sal.tau >= 0, "saliency.tau must be >= 0 (0 = unrestricted)")
    _check(ev.split in ("train", "validation", "test"), "evaluation.split must name a split")
    _check(ev.max_inputs >= 0 and ev.steps >= 1 and ev.random_trials >= 1,
           "evaluation: max_inputs >= 0, steps >= 1, random_trials >= 1")
    _check(bool(ev.ks) and all(isinstance(k, int) and k >= 1 for k in ev.ks), "evaluation.ks must be >= 1")
    _check(ev.hide_order in ("most", "least"), "evaluation.hide_order must be 'most' or 'least'")
    _check(ev.wordcloud_size >= 1, "evaluation.wordcloud_size must be >= 1")
    base = Path(base_dir) if base_dir else Path.cwd()
    for sec, key in ((d, "path"), (d, "pretrain_corpus"), (ev, "reference_corpus")):
        val = getattr(sec, key)
        if val:
            path = Path(val) if Path(val).is_absolute() else base / val
            _check(path.is_file(), f"{key}: file not found: {path}")
            setattr(sec, key, str(path))
    return cfg


def from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = ExperimentConfig()
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError("seed must be an integer")
        cfg.seed = raw["seed"]
    for name, cls in _SECTIONS.items():
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ConfigError(f"[{name}] must be a table")
            cls = getattr(sys.modules[__name__], cls) if isinstance(cls, str) else cls
            setattr(cfg, name, _fill(cls, raw[name], name))
    return validate(cfg, base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = tomllib.loads(data.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = from_dict(raw, path.parent)
    cfg.source_hash = hashlib.sha256(data).hexdigest()
    return cfg
