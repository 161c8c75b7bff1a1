"""Byte-level BPE tokenizer with a reserved block of span-corruption sentinels.

Id layout for a vocabulary of size ``V`` with ``S`` sentinels::

    0 pad | 1 eos | 2 unk | byte symbols seen in training | merges ... | unused filler | sentinels

Sentinel ``i`` lives at ``V - 1 - i``. If the corpus runs out of pairs to merge
before the merge budget is spent, the gap is filled with never-emitted
``<unused_j>`` entries so ids stay dense.

Text is normalized before encoding: Unicode NFC, then every whitespace run
collapsed to one space and the ends stripped. Words are split on spaces and
merges never cross a word boundary; a word after the first carries its leading
space, so decoding is plain byte concatenation.
"""

from __future__ import annotations

import collections
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, EOS, UNK = 0, 1, 2
N_SPECIAL = 3
HEADER = "MTVOCAB"
FORMAT_VERSION = 1
REPLACEMENT = "�"

_WS = re.compile(r"\s+")
_WORD = re.compile(r" ?[^ ]+")


class VocabularyError(ValueError):
    pass


def normalize(text: str) -> str:
    return _WS.sub(" ", unicodedata.normalize("NFC", text)).strip()


def _words(text: str) -> list[bytes]:
    return [w.encode("utf-8") for w in _WORD.findall(text)]


@dataclass(frozen=True)
class Vocabulary:
    vocab_size: int
    num_sentinels: int
    alphabet: tuple[int, ...]
    merges: tuple[tuple[bytes, bytes], ...]
    _pieces: tuple[bytes | None, ...] = field(init=False, repr=False, compare=False)
    _piece_ids: dict = field(init=False, repr=False, compare=False)
    _ranks: dict = field(init=False, repr=False, compare=False)
    _cache: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        base = N_SPECIAL + len(self.alphabet)
        if base + len(self.merges) + self.num_sentinels > self.vocab_size:
            raise VocabularyError(
                f"vocab_size {self.vocab_size} cannot hold {base} base ids, "
                f"{len(self.merges)} merges and {self.num_sentinels} sentinels"
            )
        pieces: list[bytes | None] = [None] * N_SPECIAL
        pieces += [bytes([b]) for b in self.alphabet]
        pieces += [a + b for a, b in self.merges]
        pieces += [None] * (self.vocab_size - len(pieces))
        piece_ids = {}
        for i, p in enumerate(pieces):
            if p is not None:
                piece_ids.setdefault(p, i)
        object.__setattr__(self, "_pieces", tuple(pieces))
        object.__setattr__(self, "_piece_ids", piece_ids)
        object.__setattr__(self, "_ranks", {m: r for r, m in enumerate(self.merges)})
        object.__setattr__(self, "_cache", {})

    # -- ids ---------------------------------------------------------------
    pad_id = PAD
    eos_id = EOS
    unk_id = UNK

    def sentinel(self, i: int) -> int:
        if not 0 <= i < self.num_sentinels:
            raise VocabularyError(f"sentinel index {i} outside [0, {self.num_sentinels})")
        return self.vocab_size - 1 - i

    def is_sentinel(self, token_id: int) -> bool:
        return self.vocab_size - self.num_sentinels <= token_id < self.vocab_size

    def sentinel_index(self, token_id: int) -> int:
        return self.vocab_size - 1 - token_id

    @property
    def first_sentinel(self) -> int:
        """Smallest sentinel id; every id at or above it is a sentinel."""
        return self.vocab_size - self.num_sentinels

    def piece(self, token_id: int) -> str:
        """Human-readable form of one id (for debugging and the sentinel markers)."""
        self._check_id(token_id)
        if token_id == PAD:
            return "<pad>"
        if token_id == EOS:
            return "</s>"
        if token_id == UNK:
            return "<unk>"
        if self.is_sentinel(token_id):
            return f"<extra_id_{self.sentinel_index(token_id)}>"
        p = self._pieces[token_id]
        if p is None:
            return f"<unused_{token_id}>"
        return p.decode("utf-8", errors="replace")

    # -- encode / decode -----------------------------------------------------
    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in _words(normalize(text)):
            cached = self._cache.get(word)
            if cached is None:
                cached = self._cache[word] = self._encode_word(word)
            ids.extend(cached)
        return ids

    def _encode_word(self, word: bytes) -> tuple[int, ...]:
        alphabet = self._piece_ids
        parts: list[bytes] = []
        out: list[int | bytes] = []
        # unknown bytes split the word; each known run is merged independently
        for b in word:
            sym = bytes([b])
            if sym in alphabet and alphabet[sym] < N_SPECIAL + len(self.alphabet):
                parts.append(sym)
            else:
                out.extend(self._merge(parts))
                parts = []
                out.append(UNK)
        out.extend(self._merge(parts))
        return tuple(self._piece_ids[p] if isinstance(p, bytes) else p for p in out)

    def _merge(self, parts: list[bytes]) -> list[bytes]:
        ranks = self._ranks
        while len(parts) > 1:
            best = None
            best_rank = None
            for i in range(len(parts) - 1):
                r = ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            parts = parts[:best] + [parts[best] + parts[best + 1]] + parts[best + 2 :]
        return parts

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of :meth:`encode`. Pad and eos vanish; unk becomes U+FFFD."""
        chunks: list[str] = []
        buf = bytearray()
        for token_id in ids:
            token_id = int(token_id)
            self._check_id(token_id)
            p = self._pieces[token_id]
            if p is not None and not self.is_sentinel(token_id):
                buf += p
                continue
            if token_id in (PAD, EOS):
                continue
            chunks.append(buf.decode("utf-8", errors="replace"))
            buf = bytearray()
            chunks.append(REPLACEMENT if token_id == UNK else self.piece(token_id))
        chunks.append(buf.decode("utf-8", errors="replace"))
        return "".join(chunks)

    def _check_id(self, token_id: int) -> None:
        if not 0 <= token_id < self.vocab_size:
            raise VocabularyError(f"token id {token_id} outside [0, {self.vocab_size})")

    # -- persistence -------------------------------------------------------
    def save(self, path: str | Path) -> None:
        lines = [
            f"{HEADER} {FORMAT_VERSION} {self.vocab_size} {self.num_sentinels}",
            "alphabet " + bytes(self.alphabet).hex(),
        ]
        lines += [f"{a.hex()} {b.hex()}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="ascii").splitlines()
        if not lines:
            raise VocabularyError(f"{path}: empty vocabulary file")
        head = lines[0].split()
        if len(head) != 4 or head[0] != HEADER or head[1] != str(FORMAT_VERSION):
            raise VocabularyError(f"{path}: bad header {lines[0]!r}")
        if len(lines) < 2 or not lines[1].startswith("alphabet"):
            raise VocabularyError(f"{path}: missing alphabet line")
        alphabet = tuple(bytes.fromhex(lines[1].split(" ", 1)[1] if " " in lines[1] else ""))
        merges = []
        for n, line in enumerate(lines[2:], start=3):
            try:
                a, b = line.split()
                merges.append((bytes.fromhex(a), bytes.fromhex(b)))
            except ValueError as exc:
                raise VocabularyError(f"{path}:{n}: malformed merge rule {line!r}") from exc
        return cls(int(head[2]), int(head[3]), alphabet, tuple(merges))


def train_vocab(
    corpus: Sequence[str], vocab_size: int = 4096, num_sentinels: int = 100, alphabet_texts: Sequence[str] = ()
) -> Vocabulary:
    """Learn merges over word-frequency counts until the id budget is spent.

    The most frequent adjacent pair wins; ties go to the lexicographically
    smaller pair of byte strings. The byte alphabet covers ``corpus`` plus any
    ``alphabet_texts``, which add symbols but do not count toward merges.
    """
    if not corpus:
        raise VocabularyError("cannot train a vocabulary on an empty corpus")
    counts: collections.Counter[bytes] = collections.Counter()
    for doc in corpus:
        counts.update(_words(normalize(doc)))
    alphabet = tuple(sorted({b for w in counts for b in w} | {b for t in alphabet_texts for b in normalize(t).encode("utf-8")}))
    budget = vocab_size - N_SPECIAL - len(alphabet) - num_sentinels
    if budget < 0:
        raise VocabularyError(
            f"vocab_size {vocab_size} is below {N_SPECIAL} specials + "
            f"{len(alphabet)} byte symbols + {num_sentinels} sentinels"
        )

    words = [[bytes([b]) for b in w] for w in counts]
    freqs = list(counts.values())
    pair_counts: collections.Counter[tuple[bytes, bytes]] = collections.Counter()
    where: dict[tuple[bytes, bytes], set[int]] = collections.defaultdict(set)
    for wi, (syms, f) in enumerate(zip(words, freqs)):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += f
            where[pair].add(wi)

    merges: list[tuple[bytes, bytes]] = []
    while len(merges) < budget:
        best = None
        best_count = 0
        for pair, c in pair_counts.items():
            if c > best_count or (c == best_count and c > 0 and pair < best):
                best, best_count = pair, c
        if best is None:
            break
        merges.append(best)
        joined = best[0] + best[1]
        for wi in list(where.pop(best, ())):
            syms, f = words[wi], freqs[wi]
            for pair in zip(syms, syms[1:]):
                pair_counts[pair] -= f
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
            out: list[bytes] = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == best[0] and syms[i + 1] == best[1]:
                    out.append(joined)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[wi] = out
            for pair in zip(out, out[1:]):
                pair_counts[pair] += f
                where[pair].add(wi)
        pair_counts.pop(best, None)
    return Vocabulary(vocab_size, num_sentinels, alphabet, tuple(merges))
