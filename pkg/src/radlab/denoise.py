"""Span-corruption examples for the unsupervised stages.

Each corrupted span is replaced in the input by one sentinel (indices ascending
left to right). The target lists ``sentinel_i, span_i tokens`` for every span
and ends with eos.

Span placement follows the segmentation approach: the number of noise tokens
is ``round(rate * len)``; noise and keep tokens are each cut into random
non-empty runs and interleaved, so spans never touch and the corrupted count is
exact for every sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tokenizer import N_SPECIAL, Vocabulary


class DenoiseError(ValueError):
    pass


class StructureError(DenoiseError):
    """Input and target disagree about the sentinel layout."""


@dataclass(frozen=True)
class DenoisingExample:
    input_ids: tuple[int, ...]
    target_ids: tuple[int, ...]


def _composition(rng: np.random.Generator, total: int, parts: int) -> list[int]:
    """Random split of ``total`` into ``parts`` positive integers."""
    if parts == 1:
        return [total]
    cuts = np.sort(rng.choice(total - 1, size=parts - 1, replace=False)) + 1
    bounds = np.concatenate(([0], cuts, [total]))
    return np.diff(bounds).tolist()


def sample_spans(
    length: int, rate: float, mean_span: float, rng: np.random.Generator, max_spans: int | None = None
) -> list[tuple[int, int]]:
    """Half-open ``(start, end)`` spans, sorted and pairwise non-adjacent."""
    if not 0 <= rate < 1:
        raise DenoiseError(f"corruption rate must lie in [0, 1), got {rate}")
    if mean_span < 1:
        raise DenoiseError(f"mean span length must be >= 1, got {mean_span}")
    if rate == 0 or length < 2:
        return []
    n_noise = min(max(int(round(rate * length)), 1), length - 1)
    n_keep = length - n_noise
    n_spans = int(round(n_noise / mean_span))
    n_spans = max(1, min(n_spans, n_noise, n_keep + 1))
    if max_spans is not None:
        n_spans = min(n_spans, max_spans)
    noise_runs = _composition(rng, n_noise, n_spans)

    # keep runs: interior gaps need >= 1 token, the two ends may be empty
    spare = n_keep - (n_spans - 1)
    slots = np.sort(rng.choice(spare + n_spans, size=n_spans, replace=False))
    edges = np.concatenate(([-1], slots, [spare + n_spans]))
    keep_runs = (np.diff(edges) - 1).tolist()
    for i in range(1, n_spans):
        keep_runs[i] += 1

    spans = []
    pos = 0
    for i in range(n_spans):
        pos += keep_runs[i]
        spans.append((pos, pos + noise_runs[i]))
        pos += noise_runs[i]
    return spans


def apply_spans(tokens: Sequence[int], spans: Sequence[tuple[int, int]], vocab: Vocabulary) -> DenoisingExample:
    """Lay out input/target for an explicit list of sorted, non-adjacent spans."""
    if len(spans) > vocab.num_sentinels:
        raise DenoiseError(f"{len(spans)} spans but only {vocab.num_sentinels} sentinels")
    inp: list[int] = []
    tgt: list[int] = []
    prev = 0
    for i, (start, end) in enumerate(spans):
        if not prev <= start < end <= len(tokens) or (i and start == prev):
            raise DenoiseError(f"span {(start, end)} is empty, unsorted, adjacent or out of range")
        inp.extend(tokens[prev:start])
        inp.append(vocab.sentinel(i))
        tgt.append(vocab.sentinel(i))
        tgt.extend(tokens[start:end])
        prev = end
    inp.extend(tokens[prev:])
    tgt.append(vocab.eos_id)
    return DenoisingExample(tuple(int(t) for t in inp), tuple(int(t) for t in tgt))


def corrupt(
    tokens: Sequence[int],
    rate: float,
    mean_span: float,
    rng: np.random.Generator,
    vocab: Vocabulary,
) -> DenoisingExample:
    if len(tokens) == 0:
        raise DenoiseError("cannot corrupt an empty sequence")
    arr = np.asarray(tokens)
    if np.any(arr < N_SPECIAL) or np.any(arr >= vocab.first_sentinel):
        raise DenoiseError("tokens to corrupt must not contain special or sentinel ids")
    return apply_spans(tokens, sample_spans(len(tokens), rate, mean_span, rng, vocab.num_sentinels), vocab)


def reconstruct(input_ids: Sequence[int], target_ids: Sequence[int], vocab: Vocabulary) -> list[int]:
    """Splice target spans back into the input at their sentinels."""
    if not target_ids or target_ids[-1] != vocab.eos_id:
        raise StructureError("target must end with eos")
    spans: list[list[int]] = []
    for t in target_ids[:-1]:
        if vocab.is_sentinel(t):
            if vocab.sentinel_index(t) != len(spans):
                raise StructureError(f"target sentinel {vocab.sentinel_index(t)} out of order")
            spans.append([])
        elif not spans:
            raise StructureError("target has tokens before its first sentinel")
        else:
            spans[-1].append(t)
    out: list[int] = []
    seen = 0
    for t in input_ids:
        if vocab.is_sentinel(t):
            idx = vocab.sentinel_index(t)
            if idx != seen:
                raise StructureError(f"input sentinel {idx} out of order")
            if idx >= len(spans):
                raise StructureError(f"input sentinel {idx} has no span in the target")
            out.extend(spans[idx])
            seen += 1
        else:
            out.append(t)
    if seen != len(spans):
        raise StructureError(f"target has {len(spans)} spans but input has {seen} sentinels")
    return out


def example_rng(seed: int, stage: int, epoch: int, index: int) -> np.random.Generator:
    """Counter-based generator so each example's corruption is order-independent."""
    return np.random.default_rng([seed, stage, epoch, index])
