"""Summary scoring: ROUGE-L, METEOR-lite, encoder-embedding score, entity F1.

The lexical metrics share one tokenizer (lowercase, split on anything that is
not a letter or digit), independent of the model vocabulary.

METEOR-lite keeps exact and suffix-stripped unigram matches, the 9:1
recall-weighted mean and the fragmentation penalty; it has no synonym stage.
The embedding score is BERTScore-style greedy cosine matching over this
package's own encoder states, so its values are not comparable with scores
computed on a pretrained external model. Entity F1 extracts
``(term, polarity)`` pairs with a lexicon scan and a short negation window; it
stands in for a learned entity/relation extractor.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .tokenizer import Vocabulary

_TOKEN = re.compile(r"[a-z0-9]+")
_CLAUSE = re.compile(r"[.;:!?\n]+")


@dataclass(frozen=True)
class Score:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "Score":
        if precision + recall <= 0:
            return cls(precision, recall, 0.0)
        return cls(precision, recall, 2 * precision * recall / (precision + recall))

    @classmethod
    def single(cls, value: float) -> "Score":
        return cls(value, value, value)


ZERO = Score(0.0, 0.0, 0.0)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> Score:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return ZERO
    lcs = lcs_length(cand, ref)
    return Score.from_pr(lcs / len(cand), lcs / len(ref))


# ---------------------------------------------------------------------------
# METEOR-lite
# ---------------------------------------------------------------------------

_SUFFIXES = ("ing", "ed", "s")


def stem(word: str) -> str:
    """Strip one of ``-ing``, ``-ed``, ``-s`` (keeping >= 3 letters), then undouble a final consonant."""
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            base = word[: -len(suf)]
            if suf != "s" and len(base) >= 2 and base[-1] == base[-2] and base[-1] not in "aeiouls":
                base = base[:-1]
            return base
    return word


def align(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Exact matches first, then stem matches; each side used at most once.

    Within a stage every candidate token, left to right, takes the leftmost
    still-free reference token with the same form.
    """
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for form in (lambda w: w, stem):
        rf = [form(w) for w in ref]
        for i, w in enumerate(cand):
            if i in used_c:
                continue
            key = form(w)
            for j, r in enumerate(rf):
                if j not in used_r and r == key:
                    pairs.append((i, j))
                    used_c.add(i)
                    used_r.add(j)
                    break
    return sorted(pairs)


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    """Runs of matches adjacent in both candidate and reference."""
    chunks = 0
    prev = None
    for i, j in sorted(pairs):
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(candidate: str, reference: str) -> Score:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return ZERO
    pairs = align(cand, ref)
    m = len(pairs)
    if m == 0:
        return ZERO
    p, r = m / len(cand), m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (count_chunks(pairs) / m) ** 3
    return Score.single(f_mean * (1 - penalty))


# ---------------------------------------------------------------------------
# Encoder-embedding score
# ---------------------------------------------------------------------------


def token_states(params: M.ModelParams, vocab: Vocabulary, text: str) -> np.ndarray:
    ids = vocab.encode(text)[: params.config.max_context]
    if not ids:
        return np.zeros((0, params.config.d_model))
    with T.no_grad():
        return M.encode(params, np.asarray(ids)[None, :]).data[0].astype(np.float64)


def embed_score(candidate: str, reference: str, params: M.ModelParams, vocab: Vocabulary) -> Score:
    """Greedy cosine matching of contextual encoder token vectors."""
    c = token_states(params, vocab, candidate)
    r = token_states(params, vocab, reference)
    if len(c) == 0 or len(r) == 0:
        return ZERO
    c = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
    r = r / np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-12)
    sim = np.clip(c @ r.T, -1.0, 1.0)
    return Score.from_pr(float(sim.max(axis=1).mean()), float(sim.max(axis=0).mean()))


# ---------------------------------------------------------------------------
# Entity F1
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EntityLexicon:
    terms: tuple[tuple[str, ...], ...]  # longest first
    negations: tuple[tuple[str, ...], ...]
    window: int = 3

    @classmethod
    def build(cls, terms: Iterable[str], negations: Iterable[str], window: int = 3) -> "EntityLexicon":
        def prep(items):
            toks = {tuple(tokenize(t)) for t in items}
            toks.discard(())
            return tuple(sorted(toks, key=lambda t: (-len(t), t)))

        return cls(prep(terms), prep(negations), window)

    @classmethod
    def load(cls, path: str | Path) -> "EntityLexicon":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def parse(cls, text: str) -> "EntityLexicon":
        terms, negs = [], []
        section = "terms"
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip().lower()
                continue
            (negs if section == "negation" else terms).append(line)
        return cls.build(terms, negs)

    @classmethod
    def default(cls) -> "EntityLexicon":
        return cls.parse(resources.files("radlab.data").joinpath("lexicon.txt").read_text(encoding="utf-8"))


def extract_entities(text: str, lex: EntityLexicon) -> set[tuple[str, bool]]:
    """``(term, positive)`` pairs. A negation cue ending within ``window`` tokens
    before a term, inside the same clause, flips it to negative."""
    found: set[tuple[str, bool]] = set()
    for clause in _CLAUSE.split(text.lower()):
        toks = tokenize(clause)
        neg_ends = []
        i = 0
        while i < len(toks):
            cue = next((n for n in lex.negations if tuple(toks[i : i + len(n)]) == n), None)
            if cue is not None:
                neg_ends.append(i + len(cue))
            term = next((t for t in lex.terms if tuple(toks[i : i + len(t)]) == t), None)
            if term is not None:
                negated = any(0 <= i - end < lex.window for end in neg_ends)
                found.add((" ".join(term), not negated))
                i += len(term)
            elif cue is not None:
                i += len(cue)
            else:
                i += 1
    return found


def set_f1(cand: set, ref: set) -> Score:
    if not cand or not ref:
        return ZERO
    hit = len(cand & ref)
    return Score.from_pr(hit / len(cand), hit / len(ref))


def entity_f1(candidate: str, reference: str, lex: EntityLexicon) -> Score:
    return set_f1(extract_entities(candidate, lex), extract_entities(reference, lex))


# ---------------------------------------------------------------------------
# Corpus aggregation
# ---------------------------------------------------------------------------


def corpus_mean(values: Iterable[float]) -> float:
    """Arithmetic mean with a fixed left-to-right summation order."""
    values = list(values)
    return float(sum(values) / len(values)) if values else 0.0
