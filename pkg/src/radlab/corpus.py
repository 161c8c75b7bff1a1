"""Reports: parsing, JSONL/text ingestion, synthetic corpora and few-shot plans."""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import normalize

log = logging.getLogger(__name__)

SECTIONS = ("indication", "comparison", "findings", "impression")
_HEADER = re.compile(r"^[ \t]*(INDICATION|COMPARISON|FINDINGS|IMPRESSION)[ \t]*:", re.IGNORECASE | re.MULTILINE)


class ReportParseError(ValueError):
    pass


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Report:
    id: str
    findings: str
    impression: str
    indication: str | None = None
    comparison: str | None = None

    def __post_init__(self) -> None:
        for name in ("findings", "impression", "indication", "comparison"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, normalize(value))
        missing = [s for s in ("findings", "impression") if not getattr(self, s)]
        if missing:
            raise ReportParseError(f"report {self.id!r}: missing {' and '.join(missing)}")

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def parse_report(raw: str, report_id: str = "") -> Report:
    """Split sectioned report text on line-start headers (any case, any order).

    Text before the first header is ignored; a repeated header appends to the
    earlier section.
    """
    found: dict[str, list[str]] = {}
    matches = list(_HEADER.finditer(raw))
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
        body = normalize(raw[m.end() : end])
        found.setdefault(m.group(1).lower(), []).append(body)
    sections = {k: normalize(" ".join(v)) for k, v in found.items()}
    missing = [s for s in ("findings", "impression") if not sections.get(s)]
    if missing:
        raise ReportParseError(f"missing {' and '.join(missing)} section")
    return Report(
        id=report_id,
        findings=sections["findings"],
        impression=sections["impression"],
        indication=sections.get("indication") or None,
        comparison=sections.get("comparison") or None,
    )


def render_report(r: Report) -> str:
    lines = []
    for name in SECTIONS:
        value = getattr(r, name)
        if value:
            lines.append(f"{name.upper()}: {value}")
    return "\n".join(lines) + "\n"


def midtrain_sequence(r: Report) -> str:
    """Raw text for the unsupervised stages: findings then impression, no headers."""
    return f"{r.findings} {r.impression}"


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def load_jsonl(path: str | Path) -> list[Report]:
    reports = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                reports.append(
                    Report(
                        id=str(obj["id"]),
                        findings=obj["findings"],
                        impression=obj["impression"],
                        indication=obj.get("indication"),
                        comparison=obj.get("comparison"),
                    )
                )
            except (KeyError, json.JSONDecodeError, ReportParseError) as exc:
                raise CorpusError(f"{path}:{n}: {exc}") from exc
    return reports


def save_jsonl(reports: Iterable[Report], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def load_reports(source: str | Path) -> list[Report]:
    """A ``.jsonl`` file, a single ``.txt`` report, or a directory of ``.txt`` reports."""
    source = Path(source)
    if not source.exists():
        raise CorpusError(f"corpus source {source} does not exist")
    if source.is_dir():
        files = sorted(source.glob("*.txt"))
        return [parse_report(f.read_text(encoding="utf-8"), f.stem) for f in files]
    if source.suffix == ".jsonl":
        return load_jsonl(source)
    return [parse_report(source.read_text(encoding="utf-8"), source.stem)]


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

# Findings lexicon, ordered by clinical priority (most urgent first).
# Each entry: term, modifier choices, location choices.
RADIOLOGY_FINDINGS = (
    ("pneumothorax", ("small", "moderate", "tiny"), ("left apical", "right apical", "left", "right")),
    ("pleural effusion", ("small", "moderate", "large", "trace"), ("left", "right", "bilateral")),
    ("consolidation", ("focal", "patchy", "dense"), ("right lower lobe", "left lower lobe", "right upper lobe", "lingula", "right middle lobe")),
    ("pulmonary edema", ("mild", "moderate", "interstitial"), ("",)),
    ("cardiomegaly", ("mild", "moderate", "severe"), ("",)),
    ("opacity", ("hazy", "nodular", "streaky", "reticular"), ("right lower lobe", "left lower lobe", "left upper lobe", "retrocardiac", "perihilar")),
    ("atelectasis", ("minimal", "subsegmental", "linear", "mild"), ("bibasilar", "left basilar", "right basilar")),
    ("nodule", ("small", "calcified", "subcentimeter"), ("right upper lobe", "left upper lobe", "left midlung", "right midlung")),
    ("hiatal hernia", ("small", "moderate", "large"), ("",)),
    ("granuloma", ("calcified", "old"), ("right upper lobe", "left hilar", "right hilar", "left upper lobe")),
)
RADIOLOGY_NEGATABLE = (
    "pneumothorax",
    "pleural effusion",
    "focal consolidation",
    "pulmonary edema",
    "pneumonia",
    "acute fracture",
    "free air",
    "mass",
)
NEGATION_FORMS = ("No {}.", "No evidence of {}.", "Without {}.", "Negative for {}.", "No definite {}.")
NEGATION_PHRASES = ("no", "no evidence of", "without", "negative for", "no definite")
RADIOLOGY_NORMAL = (
    "Heart size normal.",
    "Cardiomediastinal silhouette within normal limits.",
    "Lungs otherwise clear.",
    "Osseous structures intact.",
    "Trachea midline.",
    "Hila unremarkable.",
    "Mediastinal contours stable.",
    "Degenerative changes thoracic spine.",
    "Aorta tortuous.",
    "Diaphragm contours sharp.",
)
RADIOLOGY_NORMAL_IMPRESSION = ("No acute cardiopulmonary process.", "No acute cardiopulmonary abnormality.")

GENERAL_SUBJECTS = (
    "the city council",
    "the school board",
    "the museum staff",
    "the library committee",
    "the soccer team",
    "the local bakery",
    "the orchestra",
    "the garden club",
    "the bicycle shop",
    "the theater group",
)
GENERAL_ACTIONS = ("approved", "postponed", "announced", "cancelled", "expanded", "celebrated", "organized", "planned")
GENERAL_OBJECTS = (
    "the annual festival",
    "a new playground",
    "the spring concert",
    "weekend workshops",
    "the science fair",
    "a charity auction",
    "the summer parade",
    "evening lectures",
    "a photography contest",
    "the harvest market",
)
GENERAL_WHEN = ("on tuesday", "last weekend", "after a long meeting", "this morning", "during the holidays", "yesterday afternoon")
GENERAL_FILLER = (
    "The weather was pleasant throughout the afternoon.",
    "Several visitors arrived early and enjoyed fresh coffee.",
    "Nothing unusual happened during the quiet evening.",
    "Many families walked along the river before dinner.",
    "Traffic moved slowly near the central station.",
    "A friendly neighbor shared stories about the old bridge.",
    "The children painted colorful pictures in the classroom.",
    "Students gathered outside to watch the sunset.",
    "There were no complaints about the parking.",
    "Volunteers cleaned the park before the guests arrived.",
)
GENERAL_ROUTINE = ("Routine day with no major announcements.", "Quiet week without important decisions.")


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def _radiology_report(rng: np.random.Generator, rid: str) -> Report:
    n_pos = int(rng.choice([0, 1, 1, 2, 2, 3]))
    chosen = sorted(rng.choice(len(RADIOLOGY_FINDINGS), size=n_pos, replace=False).tolist())
    positives = []  # (priority, phrase)
    for idx in chosen:
        term, mods, locs = RADIOLOGY_FINDINGS[idx]
        mod, loc = _pick(rng, mods), _pick(rng, locs)
        if not loc:
            phrase = f"{mod} {term}"
        elif loc.endswith(("lobe", "midlung", "hilar", "lingula")):
            phrase = f"{mod} {term} {loc}"
        else:
            phrase = f"{mod} {loc} {term}"
        positives.append((idx, phrase.capitalize() + "."))

    pos_terms = {RADIOLOGY_FINDINGS[i][0] for i in chosen}
    negatable = [t for t in RADIOLOGY_NEGATABLE if t not in pos_terms and t.split()[-1] not in pos_terms]
    n_neg = int(rng.integers(2, 4))
    negs = [negatable[i] for i in sorted(rng.choice(len(negatable), size=n_neg, replace=False).tolist())]
    negated = [_pick(rng, NEGATION_FORMS).format(t) for t in negs]
    n_norm = int(rng.integers(1, 3))
    normals = [RADIOLOGY_NORMAL[i] for i in rng.choice(len(RADIOLOGY_NORMAL), size=n_norm, replace=False).tolist()]

    sentences = [p for _, p in positives] + negated + normals
    order = rng.permutation(len(sentences))
    findings = " ".join(sentences[i] for i in order)

    if positives:
        salient = [p for _, p in sorted(positives)[:2]]
        if "pneumothorax" in negs and "pneumothorax" not in pos_terms:
            salient.append("No pneumothorax.")
        impression = " ".join(salient)
    else:
        impression = _pick(rng, RADIOLOGY_NORMAL_IMPRESSION)
    return Report(id=rid, findings=findings, impression=impression)


def _general_report(rng: np.random.Generator, rid: str) -> Report:
    n_events = int(rng.choice([0, 1, 1, 2, 2, 3]))
    subj_idx = sorted(rng.choice(len(GENERAL_SUBJECTS), size=n_events, replace=False).tolist())
    events = []
    for si in subj_idx:
        subj, act, obj = GENERAL_SUBJECTS[si], _pick(rng, GENERAL_ACTIONS), _pick(rng, GENERAL_OBJECTS)
        when = _pick(rng, GENERAL_WHEN)
        sentence = f"{subj} {act} {obj} {when}.".capitalize()
        summary = f"{subj.removeprefix('the ')} {act} {obj.removeprefix('the ').removeprefix('a ')}.".capitalize()
        events.append((si, sentence, summary))
    n_fill = int(rng.integers(2, 5))
    fillers = [GENERAL_FILLER[i] for i in rng.choice(len(GENERAL_FILLER), size=n_fill, replace=False).tolist()]
    sentences = [s for _, s, _ in events] + fillers
    order = rng.permutation(len(sentences))
    findings = " ".join(sentences[i] for i in order)
    if events:
        impression = " ".join(summary for _, _, summary in events[:2])
    else:
        impression = _pick(rng, GENERAL_ROUTINE)
    return Report(id=rid, findings=findings, impression=impression)


def synth_corpus(seed: int, style: str, n: int) -> list[Report]:
    """Deterministic grammar-generated reports.

    ``radiology`` reports are telegraphic with dense negation; ``general`` ones
    are full sentences about community events. In both, the impression is the
    top-priority salient sentences of the findings rewritten tersely.
    """
    if n < 1:
        raise CorpusError(f"synth_corpus needs n >= 1, got {n}")
    if style == "radiology":
        make = _radiology_report
    elif style == "general":
        make = _general_report
    else:
        raise CorpusError(f"unknown synthetic style {style!r}")
    prefix = "rad" if style == "radiology" else "gen"
    return [make(np.random.default_rng([seed, i]), f"{prefix}-{seed}-{i:05d}") for i in range(n)]


STOPWORDS = frozenset(
    "a an the of in on at to for with and or no not was were is are be been by from as "
    "about after before during this that there than into over under near along outside".split()
)


def content_words(reports: Iterable[Report]) -> set[str]:
    words: set[str] = set()
    for r in reports:
        words.update(w for w in re.findall(r"[a-z0-9]+", midtrain_sequence(r).lower()) if w not in STOPWORDS)
    return words


def has_negation(text: str) -> bool:
    low = " " + re.sub(r"[^a-z0-9]+", " ", text.lower()) + " "
    return any(f" {p} " in low for p in NEGATION_PHRASES)


def token_budget_report(reports: Sequence[Report], vocab, budget_tokens: int) -> dict:
    """Token count of the unsupervised sequences and its ratio to a budget."""
    total = sum(len(vocab.encode(midtrain_sequence(r))) for r in reports)
    stats = {"reports": len(reports), "tokens": total, "budget": budget_tokens, "ratio": total / budget_tokens}
    log.info("corpus: %d reports, %d tokens (%.3g of budget %d)", len(reports), total, stats["ratio"], budget_tokens)
    return stats


# ---------------------------------------------------------------------------
# Splits and few-shot plans
# ---------------------------------------------------------------------------


def split_reports(
    reports: Sequence[Report], ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[list[Report], list[Report], list[Report]]:
    """Seeded shuffle, then train/validation/test cut by ratio."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(reports))
    n_train = int(round(ratios[0] * len(reports)))
    n_val = int(round(ratios[1] * len(reports)))
    shuffled = [reports[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


@dataclass(frozen=True)
class FewShotPlan:
    ks: tuple[int, ...]
    seed: int
    selections: dict[int, tuple[str, ...]] = field(hash=False)

    def __getitem__(self, k: int) -> tuple[str, ...]:
        return self.selections[k]

    def subset(self, reports: Sequence[Report], k: int) -> list[Report]:
        by_id = {r.id: r for r in reports}
        return [by_id[i] for i in self.selections[k]]

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "report_id"])
            for k in self.ks:
                for rid in self.selections[k]:
                    w.writerow([k, rid])

    @classmethod
    def load_csv(cls, path: str | Path, seed: int = -1) -> "FewShotPlan":
        selections: dict[int, list[str]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                selections.setdefault(int(row["k"]), []).append(row["report_id"])
        ks = tuple(sorted(selections))
        return cls(ks, seed, {k: tuple(selections[k]) for k in ks})


def fewshot_subsets(train: Sequence[Report], ks: Iterable[int], seed: int) -> FewShotPlan:
    """Nested subsets: one seeded shuffle of the pool, prefix of length k per k."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks:
        raise CorpusError("few-shot plan needs at least one k")
    if ks[0] < 1:
        raise CorpusError(f"few-shot sizes must be positive, got {ks[0]}")
    if ks[-1] > len(train):
        raise CorpusError(f"largest k {ks[-1]} exceeds the {len(train)} available training reports")
    order = np.random.default_rng(seed).permutation(len(train))
    ids = [train[i].id for i in order]
    return FewShotPlan(ks, seed, {k: tuple(ids[:k]) for k in ks})
