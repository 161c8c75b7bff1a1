"""Greedy and beam-search generation.

Both searches work over a *step function*: given ``N`` equal-length prefixes
(generated tokens only, without the start token) it returns an ``(N, V)`` array
of next-token log-probabilities. :func:`model_step_fn` builds one from model
parameters and a source sequence; tests drive the searches with fixed tables.

Ties are broken by the lowest token id, then by the order in which the parent
hypotheses entered the beam, so every search is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import ContractError, Tensor
from .tokenizer import EOS, PAD

StepFn = Callable[[Sequence[Sequence[int]]], np.ndarray]


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool

    def score(self, length_penalty: float = 1.0) -> float:
        return normalized_score(self.logprob, len(self.tokens), length_penalty)

    @property
    def content(self) -> list[int]:
        """Tokens without the trailing eos."""
        return list(self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else self.tokens)


def normalized_score(logprob: float, length: int, length_penalty: float = 1.0) -> float:
    return logprob / (max(length, 1) ** length_penalty)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def model_step_fn(p: M.ModelParams, src_ids: Sequence[int]) -> StepFn:
    """Step function for one source: the encoder runs once, the decoder per step."""
    if len(src_ids) == 0:
        raise ContractError("cannot decode from an empty source")
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    mask = np.ones_like(src, dtype=bool)
    with T.no_grad():
        enc = M.encode(p, src, mask).data
    emb = p["shared.embedding"].data.astype(np.float64)
    scale = p.config.d_model**-0.5

    def step(prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        n = len(prefixes)
        dec_in = np.array([[PAD, *pre] for pre in prefixes], dtype=np.int64)
        with T.no_grad():
            enc_n = Tensor._wrap(np.repeat(enc, n, axis=0))
            hidden = M.decode_hidden(p, enc_n, np.repeat(mask, n, axis=0), dec_in).data
        logits = hidden[:, -1, :].astype(np.float64) @ emb.T * scale
        return _log_softmax(logits)

    return step


def greedy_search(step: StepFn, max_len: int) -> BeamHypothesis:
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    tokens: list[int] = []
    logprob = 0.0
    for _ in range(max_len):
        lp = step([tokens])[0]
        tok = int(np.argmax(lp))  # first maximum = lowest id
        tokens.append(tok)
        logprob += float(lp[tok])
        if tok == EOS:
            break
    return BeamHypothesis(tuple(tokens), logprob, True)


def beam_search(step: StepFn, beam_size: int, max_len: int, length_penalty: float = 1.0) -> list[BeamHypothesis]:
    """All finished hypotheses, best length-normalized score first.

    Each step keeps the top ``beam_size - finished`` expansions by cumulative
    log-probability; expansions ending in eos leave the beam as finished. At
    ``max_len`` the surviving hypotheses are finished as they stand.
    """
    if beam_size < 1:
        raise ContractError(f"beam_size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    live = [BeamHypothesis((), 0.0, False)]
    finished: list[BeamHypothesis] = []
    for t in range(max_len):
        slots = beam_size - len(finished)
        if slots <= 0 or not live:
            break
        lp = step([h.tokens for h in live])
        n, vocab = lp.shape
        totals = np.array([h.logprob for h in live])[:, None] + lp
        flat = totals.reshape(-1)
        parents = np.repeat(np.arange(n), vocab)
        toks = np.tile(np.arange(vocab), n)
        order = np.lexsort((parents, toks, -flat))[:slots]
        last = t == max_len - 1
        new_live = []
        for j in order:
            parent, tok = live[parents[j]], int(toks[j])
            hyp = BeamHypothesis(parent.tokens + (tok,), float(flat[j]), tok == EOS or last)
            (finished if hyp.finished else new_live).append(hyp)
        live = new_live
    finished.extend(BeamHypothesis(h.tokens, h.logprob, True) for h in live)
    ranked = sorted(enumerate(finished), key=lambda item: (-item[1].score(length_penalty), item[0]))
    return [h for _, h in ranked]


def greedy(p: M.ModelParams, src_ids: Sequence[int], max_len: int) -> list[int]:
    """Argmax decoding; returns generated tokens without the closing eos."""
    return greedy_search(model_step_fn(p, src_ids), max_len).content


def beam(
    p: M.ModelParams,
    src_ids: Sequence[int],
    beam_size: int = 4,
    max_len: int = 128,
    length_penalty: float = 1.0,
) -> list[int]:
    """Best length-normalized beam hypothesis, without the closing eos."""
    return beam_search(model_step_fn(p, src_ids), beam_size, max_len, length_penalty)[0].content


def sequence_logprob(step: StepFn, tokens: Sequence[int]) -> float:
    """Sum of per-token log-probabilities of ``tokens`` under ``step``."""
    total = 0.0
    for i, tok in enumerate(tokens):
        total += float(step([list(tokens[:i])])[0][tok])
    return total
