"""End-to-end experiments: corpora, shared tokenizer, strategy chains, fine-tuning, scoring.

A :class:`Lab` owns one output directory. Every artifact it produces (corpora,
vocabulary, stage checkpoints and logs) is written there and reused by later
calls in the same process or by later CLI invocations, provided the directory
was created for an identical configuration.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import corpus as C
from . import decode as D
from . import metrics as MX
from . import model as M
from .checkpoint import Checkpoint
from .report import MetricRecord, records_to_csv
from .tokenizer import Vocabulary, train_vocab
from .train import StageConfig, TrainingLog, run_stage

log = logging.getLogger(__name__)

STRATEGIES = ("general-only", "+clinical-pretrain", "+midtrain")
# Upstream stages per strategy; fine-tuning is appended by the experiment.
CHAINS = {
    "general-only": ("pretrain-general",),
    "+clinical-pretrain": ("pretrain-clinical",),
    "+midtrain": ("pretrain-clinical", "midtrain"),
}
SCORER_CHAIN = "midtrain"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSettings:
    synth: bool = True
    general_reports: int = 600
    clinical_radiology_fraction: float = 0.05
    midtrain_reports: int = 28800
    finetune_reports: int = 600
    general_source: str | None = None
    midtrain_source: str | None = None
    finetune_source: str | None = None
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class DecodeSettings:
    beam_size: int = 4
    max_len: int = 48
    length_penalty: float = 1.0
    seed: int = 42  # recorded for provenance; beam search itself is deterministic
    eval_limit: int = 60


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    strategies: tuple[str, ...] = STRATEGIES
    ks: tuple[int, ...] = (5, 20, 50, 200, 400)
    preset: str = "toy"
    model_overrides: dict = field(default_factory=dict)
    vocab_size: int = 1024
    num_sentinels: int = 100
    corpus: CorpusSettings = CorpusSettings()
    decode: DecodeSettings = DecodeSettings()
    pretrain: StageConfig = StageConfig(
        kind="pretrain", objective="denoise", max_lr=3e-3, min_lr=3e-4, warmup=0.01,
        decay="anneal-to-min", weight_decay=0.01, total_steps=300,
    )
    midtrain: StageConfig = StageConfig(
        kind="midtrain", objective="denoise", max_lr=1e-3, warmup=20, decay="linear-to-zero", epochs=2,
    )
    finetune: StageConfig = StageConfig(
        kind="finetune", objective="supervised", max_lr=2e-3, min_lr=2e-3, epochs=20,
    )

    def __post_init__(self) -> None:
        unknown = [s for s in self.strategies if s not in CHAINS]
        if unknown:
            raise ConfigError(f"unknown strategies {unknown}; choose from {list(STRATEGIES)}")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if list(self.ks) != sorted(set(self.ks)) or (self.ks and self.ks[0] < 1):
            raise ConfigError(f"k list must be positive, strictly ascending, got {list(self.ks)}")
        if self.preset not in M.PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        c = self.corpus
        if not c.synth and not (c.general_source and c.midtrain_source and c.finetune_source):
            raise ConfigError("synth is off, so general_source, midtrain_source and finetune_source are required")
        if not 0 <= c.clinical_radiology_fraction < 1:
            raise ConfigError("clinical_radiology_fraction must lie in [0, 1)")
        for stage, kind in ((self.pretrain, "pretrain"), (self.midtrain, "midtrain"), (self.finetune, "finetune")):
            if stage.kind != kind:
                raise ConfigError(f"[{kind}] section describes a {stage.kind} stage")

    def model_config(self) -> M.ModelConfig:
        return M.preset(self.preset, vocab_size=self.vocab_size, **self.model_overrides)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out_dir")
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# INI loading
# ---------------------------------------------------------------------------


def _convert(text: str, hint):
    """Parse an INI value according to a dataclass field annotation."""
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(text, inner[0])
    if origin is tuple:
        items = [s for s in text.replace(",", " ").split() if s]
        inner = args[0]
        return tuple(_convert(s, inner) for s in items)
    if hint is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text


def _fields_from(section: configparser.SectionProxy, cls, base):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    changes = {}
    for key, value in section.items():
        if key not in names:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        try:
            changes[key] = _convert(value, hints[key])
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key} = {value!r}: {exc}") from exc
    try:
        return dataclasses.replace(base, **changes)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {exc}") from exc


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.read_string(text)
    cfg = base or ExperimentConfig()
    sections = set(parser.sections())
    allowed = {"experiment", "corpus", "model", "decode", "pretrain", "midtrain", "finetune"}
    if sections - allowed:
        raise ConfigError(f"unknown config sections {sorted(sections - allowed)}")
    changes: dict = {}
    if "experiment" in parser:
        hints = typing.get_type_hints(ExperimentConfig)
        for key, value in parser["experiment"].items():
            if key not in ("out_dir", "seed", "seeds", "strategies", "ks"):
                raise ConfigError(f"[experiment] unknown key {key!r}")
            changes[key] = _convert(value, hints[key])
    if "model" in parser:
        overrides = {}
        for key, value in parser["model"].items():
            if key == "preset":
                changes["preset"] = value.strip()
            elif key in ("vocab_size", "num_sentinels"):
                changes[key] = int(value)
            elif key in {f.name for f in dataclasses.fields(M.ModelConfig)}:
                overrides[key] = int(value)
            else:
                raise ConfigError(f"[model] unknown key {key!r}")
        changes["model_overrides"] = overrides
    if "corpus" in parser:
        changes["corpus"] = _fields_from(parser["corpus"], CorpusSettings, cfg.corpus)
    if "decode" in parser:
        changes["decode"] = _fields_from(parser["decode"], DecodeSettings, cfg.decode)
    for name in ("pretrain", "midtrain", "finetune"):
        if name in parser:
            base_stage = getattr(cfg, name)
            sec = parser[name]
            if ("epochs" in sec) != ("total_steps" in sec):
                # Setting one budget form replaces the other.
                cleared = {"epochs": None} if "total_steps" in sec else {"total_steps": None}
                base_stage = _replace_unchecked(base_stage, **cleared)
            changes[name] = _fields_from(sec, StageConfig, base_stage)
    try:
        return dataclasses.replace(cfg, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _replace_unchecked(stage: StageConfig, **changes) -> StageConfig:
    """Copy a stage config without validation; the caller validates after further edits."""
    new = object.__new__(StageConfig)
    for f in dataclasses.fields(StageConfig):
        object.__setattr__(new, f.name, changes.get(f.name, getattr(stage, f.name)))
    return new


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    """Read an INI experiment config; ``None`` loads the bundled toy defaults."""
    if path is None:
        text = resources.files("radlab.data").joinpath("toy.ini").read_text(encoding="utf-8")
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8")
    return parse_config(text)


# ---------------------------------------------------------------------------
# The lab
# ---------------------------------------------------------------------------


@dataclass
class Corpora:
    general: list[C.Report]
    clinical: list[C.Report]
    midtrain: list[C.Report]
    train: list[C.Report]
    val: list[C.Report]
    test: list[C.Report]


@dataclass(frozen=True)
class EvalResult:
    record: MetricRecord
    summaries: list[dict]


class Lab:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self._corpora: Corpora | None = None
        self._vocab: Vocabulary | None = None
        self._chains: dict[str, Checkpoint] = {}
        self._scorer: M.ModelParams | None = None
        self._lexicon = MX.EntityLexicon.default()
        self._prepared = False

    # -- bookkeeping --------------------------------------------------------

    def prepare(self) -> None:
        """Create the output directory and pin it to this configuration."""
        if self._prepared:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        stamp = self.out / "experiment.json"
        text = json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True) + "\n"
        if stamp.exists() and stamp.read_text(encoding="utf-8") != text:
            raise ConfigError(f"{self.out} holds artifacts of a different configuration; choose another --out")
        stamp.write_text(text, encoding="utf-8")
        self._prepared = True

    # -- data ---------------------------------------------------------------

    def corpora(self) -> Corpora:
        if self._corpora is None:
            self.prepare()
            self._corpora = self._build_corpora()
        return self._corpora

    def _build_corpora(self) -> Corpora:
        cs, seed = self.cfg.corpus, self.cfg.seed
        cdir = self.out / "corpus"
        cdir.mkdir(exist_ok=True)
        if cs.synth:
            general = C.synth_corpus(seed * 10 + 1, "general", cs.general_reports)
            midtrain = C.synth_corpus(seed * 10 + 2, "radiology", cs.midtrain_reports)
            target = C.synth_corpus(seed * 10 + 3, "radiology", cs.finetune_reports)
            n_rad = int(round(cs.clinical_radiology_fraction * cs.general_reports / (1 - cs.clinical_radiology_fraction)))
            extra = C.synth_corpus(seed * 10 + 4, "radiology", n_rad) if n_rad else []
        else:
            general = C.load_reports(cs.general_source)
            midtrain = C.load_reports(cs.midtrain_source)
            target = C.load_reports(cs.finetune_source)
            n_rad = int(round(cs.clinical_radiology_fraction * len(general) / (1 - cs.clinical_radiology_fraction)))
            extra = midtrain[:n_rad]
        if not general or not midtrain or not target:
            raise ConfigError("every corpus (general, midtrain, finetune) must hold at least one report")
        clinical = general + extra
        train, val, test = C.split_reports(target, cs.split, seed)
        if not test:
            raise ConfigError("the test split is empty; supply more fine-tuning reports")
        for name, reports in (("general", general), ("clinical", clinical), ("midtrain", midtrain),
                              ("train", train), ("val", val), ("test", test)):
            C.save_jsonl(reports, cdir / f"{name}.jsonl")
        return Corpora(general, clinical, midtrain, train, val, test)

    def vocab(self) -> Vocabulary:
        if self._vocab is None:
            path = self.out / "vocab.txt"
            if path.exists():
                self.prepare()
                self._vocab = Vocabulary.load(path)
            else:
                cp = self.corpora()
                texts = [C.midtrain_sequence(r) for r in cp.clinical + cp.midtrain]
                # Merges come from the unsupervised text; the byte alphabet covers every document.
                everything = [C.render_report(r) for f in dataclasses.fields(cp) for r in getattr(cp, f.name)]
                self._vocab = train_vocab(texts, self.cfg.vocab_size, self.cfg.num_sentinels, alphabet_texts=everything)
                self._vocab.save(path)
        return self._vocab

    def _sequences(self, reports: Sequence[C.Report]) -> list[list[int]]:
        v = self.vocab()
        return [v.encode(C.midtrain_sequence(r)) for r in reports]

    def pairs(self, reports: Sequence[C.Report]) -> list[tuple[list[int], list[int]]]:
        v = self.vocab()
        return [(v.encode(r.findings), v.encode(r.impression)) for r in reports]

    # -- stage chains -------------------------------------------------------

    def chain(self, name: str) -> Checkpoint:
        """Checkpoint after a named upstream stage, trained once and cached on disk."""
        if name in self._chains:
            return self._chains[name]
        path = self.out / "checkpoints" / f"{name}.ckpt"
        if path.exists():
            self.prepare()
            ckpt = Checkpoint.load(path)
        else:
            ckpt = self._train_chain(name)
            path.parent.mkdir(parents=True, exist_ok=True)
            ckpt.save(path)
        self._chains[name] = ckpt
        return ckpt

    def _train_chain(self, name: str) -> Checkpoint:
        cp = self.corpora()
        seed = self.cfg.seed
        if name == "pretrain-general":
            start, cfg, data = Checkpoint.initial(self.model_config(), seed), self.cfg.pretrain, cp.general
        elif name == "pretrain-clinical":
            start, cfg, data = Checkpoint.initial(self.model_config(), seed), self.cfg.pretrain, cp.clinical
        elif name == "midtrain":
            start, cfg, data = self.chain("pretrain-clinical"), self.cfg.midtrain, cp.midtrain
        else:
            raise ConfigError(f"unknown stage chain {name!r}")
        log.info("training %s", name)
        ckpt, train_log = self._run(start, cfg.with_(seed=seed), self._sequences(data), name)
        return ckpt

    def model_config(self) -> M.ModelConfig:
        return self.cfg.model_config().replace(vocab_size=self.vocab().vocab_size)

    def _run(self, start: Checkpoint, cfg: StageConfig, data, name: str) -> tuple[Checkpoint, TrainingLog]:
        try:
            ckpt, train_log = run_stage(start, cfg, data, self.vocab())
        except Exception as exc:
            chain = " -> ".join(start.provenance + (cfg.kind,))
            raise RuntimeError(f"stage {cfg.kind} failed (chain {chain}): {exc}") from exc
        logs = self.out / "logs"
        logs.mkdir(parents=True, exist_ok=True)
        train_log.save_csv(logs / f"{name}.csv")
        return ckpt, train_log

    def pre_finetune(self, strategy: str) -> Checkpoint:
        return self.chain(CHAINS[strategy][-1])

    # -- fine-tuning and evaluation -----------------------------------------

    def finetune(self, strategy: str, reports: Sequence[C.Report], seed: int, name: str) -> Checkpoint:
        cfg = self.cfg.finetune.with_(seed=seed)
        ckpt, _ = self._run(self.pre_finetune(strategy), cfg, self.pairs(reports), name)
        return ckpt

    def scorer(self) -> M.ModelParams:
        if self._scorer is None:
            self._scorer = self.chain(SCORER_CHAIN).model()
        return self._scorer

    def evaluate(self, ckpt: Checkpoint, strategy: str, k: str, seed: int) -> EvalResult:
        cp, v, d = self.corpora(), self.vocab(), self.cfg.decode
        params = ckpt.model()
        test = cp.test[: d.eval_limit] if d.eval_limit else cp.test
        ft = self.cfg.finetune
        scores = {m: [] for m in ("rouge_l", "meteor", "embed_score", "entity_f1")}
        summaries = []
        for r in test:
            src = v.encode(r.findings)[: ft.max_src_len] or [v.first_sentinel]
            out = D.beam(params, src, d.beam_size, min(d.max_len, ft.max_tgt_len), d.length_penalty)
            gen = v.decode(out)
            summaries.append({"id": r.id, "generated": gen, "reference": r.impression})
            scores["rouge_l"].append(MX.rouge_l(gen, r.impression).f1)
            scores["meteor"].append(MX.meteor_lite(gen, r.impression).f1)
            scores["embed_score"].append(MX.embed_score(gen, r.impression, self.scorer(), v).f1)
            scores["entity_f1"].append(MX.entity_f1(gen, r.impression, self._lexicon).f1)
        means = {m: round(MX.corpus_mean(vals), 6) for m, vals in scores.items()}
        rec = MetricRecord(strategy=strategy, preset=self.cfg.preset, k=k, seed=seed, **means)
        return EvalResult(rec, summaries)


def _write_jsonl(rows: Sequence[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _slug(strategy: str) -> str:
    return strategy.lstrip("+")


def run_pipeline(cfg: ExperimentConfig, lab: Lab | None = None) -> list[MetricRecord]:
    """Fine-tune every strategy on the full training split and score the test split.

    Writes ``records.csv``, ``summaries_<strategy>.jsonl`` and one fine-tuned
    checkpoint per (strategy, seed) under the output directory.
    """
    lab = lab or Lab(cfg)
    cp = lab.corpora()
    records = []
    for strategy in cfg.strategies:
        rows = []
        for seed in cfg.seeds:
            name = f"finetune-{_slug(strategy)}-full-s{seed}"
            ckpt = lab.finetune(strategy, cp.train, seed, name)
            ckpt.save(lab.out / "checkpoints" / f"{name}.ckpt")
            res = lab.evaluate(ckpt, strategy, "full", seed)
            records.append(res.record)
            rows += [dict(row, seed=seed) for row in res.summaries]
        _write_jsonl(rows, lab.out / f"summaries_{strategy}.jsonl")
    (lab.out / "records.csv").write_text(records_to_csv(records), encoding="utf-8")
    return records


def sweep_fewshot(cfg: ExperimentConfig, lab: Lab | None = None, save_checkpoints: bool = False) -> list[MetricRecord]:
    """Fine-tune every (strategy, k, seed) cell on nested few-shot subsets and score it.

    Writes ``records.csv``, the few-shot plans and per-cell summaries.
    """
    lab = lab or Lab(cfg)
    cp = lab.corpora()
    if not cfg.ks:
        raise ConfigError("the sweep needs a k list")
    if cfg.ks[-1] > len(cp.train):
        raise ConfigError(f"largest k {cfg.ks[-1]} exceeds the {len(cp.train)} training reports")
    plans = {seed: C.fewshot_subsets(cp.train, cfg.ks, seed) for seed in cfg.seeds}
    pdir = lab.out / "plans"
    pdir.mkdir(exist_ok=True)
    for seed, plan in plans.items():
        plan.save_csv(pdir / f"fewshot_s{seed}.csv")
    sdir = lab.out / "summaries"
    sdir.mkdir(exist_ok=True)
    records = []
    for strategy in cfg.strategies:
        for k in cfg.ks:
            for seed in cfg.seeds:
                name = f"finetune-{_slug(strategy)}-k{k}-s{seed}"
                ckpt = lab.finetune(strategy, plans[seed].subset(cp.train, k), seed, name)
                if save_checkpoints:
                    ckpt.save(lab.out / "checkpoints" / f"{name}.ckpt")
                res = lab.evaluate(ckpt, strategy, str(k), seed)
                log.info("%s k=%d seed=%d rouge_l=%.4f", strategy, k, seed, res.record.rouge_l)
                records.append(res.record)
                _write_jsonl(res.summaries, sdir / f"summaries_{strategy}_k{k}_s{seed}.jsonl")
    (lab.out / "records.csv").write_text(records_to_csv(records), encoding="utf-8")
    return records
