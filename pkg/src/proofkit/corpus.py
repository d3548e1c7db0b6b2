"""Parallel-corpus ingestion: tokenisation, truecasing, filtering, vocabularies
and Dice-coefficient lexical alignment."""
from __future__ import annotations

import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")

DEFAULT_MIN_LEN = 1
DEFAULT_MAX_LEN = 64
DEFAULT_MAX_RATIO = 3.0
DICE_THRESHOLD = 0.1


class IngestionError(ValueError):
    """Malformed corpus input."""


@dataclass
class SentencePair:
    id: str
    source_tokens: list[str]
    target_tokens: list[str]
    alignment: list[tuple[int, int]] | None = None
    gold_tags: list[str] | None = None
    reference: list[str] | None = None
    annotations: list[int] | None = None

    def __post_init__(self):
        if self.alignment is not None:
            n, m = len(self.source_tokens), len(self.target_tokens)
            for i, j in self.alignment:
                if not (0 <= i < n and 0 <= j < m):
                    raise IngestionError(f"pair {self.id}: alignment link ({i}, {j}) out of range")

    def with_annotations(self) -> "SentencePair":
        """Attach the all-zero linguistic annotation channel if missing."""
        if self.annotations is not None:
            return self
        return replace(self, annotations=[0] * len(self.target_tokens))


# ---------------------------------------------------------------------------
# tokenisation
# ---------------------------------------------------------------------------


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[str]:
    """Whitespace split, then peel leading/trailing punctuation into tokens.

    >>> tokenize("Hello, world!")
    ['Hello', ',', 'world', '!']
    """
    tokens: list[str] = []
    for chunk in text.split():
        head: list[str] = []
        tail: list[str] = []
        while chunk and _is_punct(chunk[0]):
            head.append(chunk[0])
            chunk = chunk[1:]
        while chunk and _is_punct(chunk[-1]):
            tail.append(chunk[-1])
            chunk = chunk[:-1]
        tokens.extend(head)
        if chunk:
            tokens.append(chunk)
        tokens.extend(reversed(tail))
    return tokens


def casing_table(sentences: Iterable[Sequence[str]]) -> Counter:
    """Frequencies of tokens seen in non-initial positions, the truecasing evidence."""
    table: Counter = Counter()
    for toks in sentences:
        table.update(toks[1:])
    return table


def truecase(tokens: Sequence[str], table: Counter) -> list[str]:
    """Lowercase the sentence-initial token when its lowercase form is attested."""
    out = list(tokens)
    if out:
        low = out[0].lower()
        if low != out[0] and table.get(low, 0) > 0:
            out[0] = low
    return out


# ---------------------------------------------------------------------------
# cleaning / filtering
# ---------------------------------------------------------------------------


@dataclass
class FilterSummary:
    seen: int = 0
    kept: int = 0
    dropped: Counter = field(default_factory=Counter)

    @property
    def dropped_total(self) -> int:
        return sum(self.dropped.values())


def _has_control(tokens: Sequence[str]) -> bool:
    return any(unicodedata.category(ch) == "Cc" for tok in tokens for ch in tok)


def filter_reason(pair: SentencePair, min_len: int, max_len: int, max_ratio: float) -> str | None:
    ns, nt = len(pair.source_tokens), len(pair.target_tokens)
    if ns == 0 or nt == 0:
        return "empty"
    if _has_control(pair.source_tokens) or _has_control(pair.target_tokens):
        return "control"
    if not (min_len <= ns <= max_len and min_len <= nt <= max_len):
        return "length"
    if max(ns, nt) / min(ns, nt) > max_ratio:
        return "ratio"
    return None


def clean_and_filter(pairs: Iterable[SentencePair], min_len: int = DEFAULT_MIN_LEN,
                     max_len: int = DEFAULT_MAX_LEN, max_ratio: float = DEFAULT_MAX_RATIO,
                     summary: FilterSummary | None = None) -> Iterator[SentencePair]:
    """Yield pairs passing the length/ratio/cleanliness predicate.

    Drop counts by reason are accumulated into ``summary`` when given.
    """
    if not 1 <= min_len <= max_len:
        raise ValueError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    summary = summary if summary is not None else FilterSummary()
    for pair in pairs:
        summary.seen += 1
        reason = filter_reason(pair, min_len, max_len, max_ratio)
        if reason is None:
            summary.kept += 1
            yield pair
        else:
            summary.dropped[reason] += 1
    logger.info("filter kept %d of %d pairs (%s)", summary.kept, summary.seen, dict(summary.dropped))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def write_lines(path, lines: Iterable[str]) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_parallel(src_path, tgt_path, tokenizer=tokenize) -> list[SentencePair]:
    """Read a ``.src``/``.tgt`` pair of line-aligned files."""
    src = read_lines(src_path)
    tgt = read_lines(tgt_path)
    if len(src) != len(tgt):
        line = min(len(src), len(tgt)) + 1
        raise IngestionError(
            f"line count mismatch: {src_path} has {len(src)}, {tgt_path} has {len(tgt)} "
            f"(first unmatched line {line})")
    return [SentencePair(str(i), tokenizer(s), tokenizer(t)) for i, (s, t) in enumerate(zip(src, tgt))]


def write_parallel(prefix, pairs: Sequence[SentencePair], use_reference: bool = False) -> tuple[Path, Path]:
    src_path = Path(f"{prefix}.src")
    tgt_path = Path(f"{prefix}.tgt")
    write_lines(src_path, (" ".join(p.source_tokens) for p in pairs))
    write_lines(tgt_path, (" ".join(p.reference if use_reference and p.reference else p.target_tokens)
                           for p in pairs))
    return src_path, tgt_path


def preprocess(pairs: Sequence[SentencePair], min_len: int = DEFAULT_MIN_LEN,
               max_len: int = DEFAULT_MAX_LEN, max_ratio: float = DEFAULT_MAX_RATIO,
               summary: FilterSummary | None = None) -> list[SentencePair]:
    """Truecase both sides with corpus-wide tables, then filter."""
    src_table = casing_table(p.source_tokens for p in pairs)
    tgt_table = casing_table(p.target_tokens for p in pairs)
    cased = (replace(p, source_tokens=truecase(p.source_tokens, src_table),
                     target_tokens=truecase(p.target_tokens, tgt_table)) for p in pairs)
    return list(clean_and_filter(cased, min_len, max_len, max_ratio, summary))


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path) -> None:
        write_lines(path, self.itos)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = read_lines(path)
        if tuple(lines[:4]) != RESERVED:
            raise IngestionError(f"{path}: first four lines must be the reserved tokens")
        return cls(lines[4:])


def build_vocab(token_lists: Iterable[Sequence[str]], min_freq: int = 1,
                max_size: int | None = None) -> Vocabulary:
    """Most frequent tokens first, ties lexicographic; ``max_size`` counts reserved ids."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter = Counter()
    for toks in token_lists:
        counts.update(toks)
    ranked = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                    key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[:max(0, max_size - len(RESERVED))]
    return Vocabulary(ranked)


def encode_ids(tokens: Sequence[str], vocab: Vocabulary, add_bos_eos: bool = False) -> list[int]:
    ids = [vocab.id(t) for t in tokens]
    return [BOS, *ids, EOS] if add_bos_eos else ids


def decode_ids(ids: Sequence[int], vocab: Vocabulary, strip_special: bool = True) -> list[str]:
    out = []
    for i in ids:
        if strip_special and i in (PAD, BOS, EOS):
            continue
        out.append(vocab.token(i))
    return out


# ---------------------------------------------------------------------------
# lexical alignment
# ---------------------------------------------------------------------------


def dice_table(pairs: Sequence[SentencePair]) -> dict[tuple[str, str], float]:
    """Dice coefficient over sentence-level co-occurrence of token types."""
    src_count: Counter = Counter()
    tgt_count: Counter = Counter()
    cooc: Counter = Counter()
    for p in pairs:
        s_types, t_types = set(p.source_tokens), set(p.target_tokens)
        src_count.update(s_types)
        tgt_count.update(t_types)
        cooc.update((s, t) for s in s_types for t in t_types)
    return {(s, t): 2.0 * c / (src_count[s] + tgt_count[t]) for (s, t), c in cooc.items()}


def lexical_align(pairs: Sequence[SentencePair], threshold: float = DICE_THRESHOLD,
                  dice: dict | None = None) -> list[SentencePair]:
    """Link each target token to its highest-Dice source token.

    Links need Dice >= ``threshold``; ties go to the lowest source index.
    Returns new pairs with ``alignment`` set.
    """
    if not pairs:
        raise ValueError("lexical_align needs at least one pair")
    dice = dice if dice is not None else dice_table(pairs)
    out = []
    for p in pairs:
        links = []
        for j, t in enumerate(p.target_tokens):
            best_i, best = -1, threshold
            for i, s in enumerate(p.source_tokens):
                d = dice.get((s, t), 0.0)
                if d > best or (best_i < 0 and d >= threshold):
                    best_i, best = i, d
            if best_i >= 0:
                links.append((best_i, j))
        out.append(replace(p, alignment=links))
    return out
