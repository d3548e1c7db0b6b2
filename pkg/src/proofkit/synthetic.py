"""Deterministic toy bilingual corpus and labelled error injection.

The source language is generated from a handful of sentence templates over a
categorised lexicon. The target language maps each word through a bijective
lexicon and flips every adjective-noun pair into noun-adjective order, so the
gold word alignment is known exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .corpus import SentencePair
from .lattice import ErrorTag, TagLattice, token_slot

CATEGORY_SHARES = (("DET", 0.10), ("ADJ", 0.25), ("NOUN", 0.35), ("VERB", 0.20), ("PREP", 0.10))

TEMPLATES = (
    ("DET", "NOUN", "VERB"),
    ("DET", "ADJ", "NOUN", "VERB"),
    ("DET", "NOUN", "VERB", "DET", "NOUN"),
    ("DET", "ADJ", "NOUN", "VERB", "DET", "NOUN"),
    ("DET", "NOUN", "VERB", "DET", "ADJ", "NOUN"),
    ("DET", "NOUN", "VERB", "PREP", "DET", "NOUN"),
    ("DET", "ADJ", "NOUN", "VERB", "PREP", "DET", "ADJ", "NOUN"),
)

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")


def _syllable_words(count: int, offset: int, suffix: str) -> list[str]:
    words = []
    n_syl = len(_ONSETS) * len(_VOWELS)
    for k in range(offset, offset + count):
        a, b = divmod(k, n_syl)
        first = _ONSETS[b % len(_ONSETS)] + _VOWELS[b // len(_ONSETS)]
        c = (a * 31 + b * 17 + 3) % n_syl
        second = _ONSETS[c % len(_ONSETS)] + _VOWELS[c // len(_ONSETS)]
        words.append(first + second + suffix)
    return words


@dataclass(frozen=True)
class Lexicon:
    categories: dict[str, tuple[str, ...]]
    forward: dict[str, str]

    @property
    def inverse(self) -> dict[str, str]:
        return {t: s for s, t in self.forward.items()}

    @property
    def source_words(self) -> list[str]:
        return [w for ws in self.categories.values() for w in ws]

    @property
    def target_words(self) -> list[str]:
        return [self.forward[w] for w in self.source_words]

    def category(self, source_word: str) -> str:
        for cat, ws in self.categories.items():
            if source_word in ws:
                return cat
        raise KeyError(source_word)


def make_lexicon(vocab_size: int) -> Lexicon:
    """Split ``vocab_size`` source words over the categories, each with a target twin."""
    if vocab_size < 10:
        raise ValueError("vocab_size must be >= 10")
    sizes = {cat: max(1, int(round(share * vocab_size))) for cat, share in CATEGORY_SHARES}
    # absorb rounding drift in the noun class
    sizes["NOUN"] += vocab_size - sum(sizes.values())
    cats: dict[str, tuple[str, ...]] = {}
    forward: dict[str, str] = {}
    offset = 0
    for cat, _ in CATEGORY_SHARES:
        src = _syllable_words(sizes[cat], offset, "")
        tgt = _syllable_words(sizes[cat], offset + 7 * vocab_size + 3, "en")
        cats[cat] = tuple(src)
        forward.update(zip(src, tgt))
        offset += sizes[cat]
    return Lexicon(cats, forward)


def translate(source: Sequence[str], lexicon: Lexicon) -> tuple[list[str], list[tuple[int, int]]]:
    """Word-by-word translation with adjective-noun flips; returns target and gold links."""
    order = list(range(len(source)))
    i = 0
    while i < len(source) - 1:
        if lexicon.category(source[i]) == "ADJ" and lexicon.category(source[i + 1]) == "NOUN":
            order[i], order[i + 1] = order[i + 1], order[i]
            i += 2
        else:
            i += 1
    target = [lexicon.forward[source[k]] for k in order]
    return target, [(k, j) for j, k in enumerate(order)]


def back_translate(target: Sequence[str], lexicon: Lexicon) -> list[str]:
    inv = lexicon.inverse
    words = [inv[t] for t in target]
    out = list(words)
    i = 0
    while i < len(words) - 1:
        if lexicon.category(words[i]) == "NOUN" and lexicon.category(words[i + 1]) == "ADJ":
            out[i], out[i + 1] = words[i + 1], words[i]
            i += 2
        else:
            i += 1
    return out


def generate_toy_parallel(n_pairs: int, vocab_size: int, rng: np.random.Generator,
                          lexicon: Lexicon | None = None) -> list[SentencePair]:
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    lexicon = lexicon or make_lexicon(vocab_size)
    pairs = []
    for k in range(n_pairs):
        template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
        source = [lexicon.categories[c][int(rng.integers(len(lexicon.categories[c])))] for c in template]
        target, links = translate(source, lexicon)
        pairs.append(SentencePair(f"p{k:06d}", source, target, alignment=links,
                                  reference=list(target)))
    return pairs


# ---------------------------------------------------------------------------
# error injection
# ---------------------------------------------------------------------------


KINDS = ("omission", "replacement", "insertion", "order")


@dataclass(frozen=True)
class ErrorSpec:
    omission: float = 0.0
    replacement: float = 0.0
    insertion: float = 0.0
    order: float = 0.0
    max_errors_per_sentence: int = 1
    seed: int = 0

    def __post_init__(self):
        rates = self.rates
        if any(r < 0 or r > 1 for r in rates):
            raise ValueError("error rates must lie in [0, 1]")
        if sum(rates) > 1 + 1e-12:
            raise ValueError("error rates must sum to at most 1")
        if self.max_errors_per_sentence < 0:
            raise ValueError("max_errors_per_sentence must be >= 0")

    @property
    def rates(self) -> tuple[float, float, float, float]:
        return (self.omission, self.replacement, self.insertion, self.order)

    @classmethod
    def uniform(cls, total: float, **kw) -> "ErrorSpec":
        r = total / 4.0
        return cls(r, r, r, r, **kw)


@dataclass
class _Item:
    token: str
    label: ErrorTag = ErrorTag.OK
    origin: int | None = None     # index in the reference target
    deleted: bool = False


@dataclass
class Edit:
    kind: str
    position: int          # position in the reference target (insertion: live index before which it went)
    token: str             # token removed / inserted / substituted in
    original: str | None = None

    def to_list(self):
        return [self.kind, self.position, self.token, self.original]


def _live(items: list[_Item]) -> list[int]:
    return [k for k, it in enumerate(items) if not it.deleted]


def _adjacent_deleted(items: list[_Item], k: int) -> bool:
    """True when a deleted marker sits in the gap immediately before/after item ``k``."""
    return (k > 0 and items[k - 1].deleted) or (k + 1 < len(items) and items[k + 1].deleted)


def _try_edit(kind: str, items: list[_Item], lexicon_words: Sequence[str],
              rng: np.random.Generator) -> Edit | None:
    live = _live(items)
    if kind == "omission":
        if len(live) < 2:
            return None
        # the gap created must not already carry an omission
        cands = [k for k in live if items[k].label == ErrorTag.OK and not _adjacent_deleted(items, k)]
        if not cands:
            return None
        k = cands[int(rng.integers(len(cands)))]
        items[k].deleted = True
        items[k].label = ErrorTag.OMISSION
        return Edit("omission", items[k].origin, items[k].token)
    if kind == "replacement":
        cands = [k for k in live if items[k].label == ErrorTag.OK and items[k].origin is not None]
        if not cands:
            return None
        k = cands[int(rng.integers(len(cands)))]
        choices = [w for w in lexicon_words if w != items[k].token]
        new = choices[int(rng.integers(len(choices)))]
        edit = Edit("replacement", items[k].origin, new, items[k].token)
        items[k].token = new
        items[k].label = ErrorTag.REPLACEMENT
        return edit
    if kind == "insertion":
        # insertion points are gaps between live items (live index p means before live[p])
        cands = []
        for p in range(len(live) + 1):
            left = live[p - 1] if p > 0 else -1
            right = live[p] if p < len(live) else len(items)
            if any(items[q].deleted for q in range(left + 1, right)):
                continue
            if 0 <= left and right < len(items) and items[left].label == items[right].label == ErrorTag.ORDER:
                continue  # never split a swapped pair
            cands.append((p, right))
        if not cands:
            return None
        p, right = cands[int(rng.integers(len(cands)))]
        new = lexicon_words[int(rng.integers(len(lexicon_words)))]
        items.insert(right, _Item(new, ErrorTag.INSERTION))
        return Edit("insertion", p, new)
    if kind == "order":
        cands = []
        for a, b in zip(live, live[1:]):
            if b != a + 1:
                continue  # a deleted marker sits between them
            ia, ib = items[a], items[b]
            if ia.label == ErrorTag.OK and ib.label == ErrorTag.OK and ia.token != ib.token:
                cands.append(a)
        if not cands:
            return None
        a = cands[int(rng.integers(len(cands)))]
        items[a], items[a + 1] = items[a + 1], items[a]
        items[a].label = items[a + 1].label = ErrorTag.ORDER
        return Edit("order", min(items[a].origin, items[a + 1].origin), items[a].token)
    raise ValueError(kind)


def inject_errors(pair: SentencePair, spec: ErrorSpec, rng: np.random.Generator,
                  lexicon_words: Sequence[str] | None = None):
    """Corrupt ``pair.target_tokens`` per ``spec``.

    Returns ``(corrupted_pair, gold_lattice, edits)``. The corrupted pair keeps
    the original target as ``reference`` and carries updated alignment links
    and gold tags.
    """
    if pair.alignment is None:
        raise ValueError(f"pair {pair.id} has no gold alignment")
    words = list(lexicon_words) if lexicon_words is not None else sorted(set(pair.target_tokens))
    items = [_Item(t, origin=j) for j, t in enumerate(pair.target_tokens)]
    cum = np.cumsum(spec.rates)
    edits: list[Edit] = []
    for _ in range(spec.max_errors_per_sentence):
        u = rng.random()
        kind_idx = int(np.searchsorted(cum, u, side="right"))
        if kind_idx >= len(KINDS):
            continue
        edit = _try_edit(KINDS[kind_idx], items, words, rng)
        if edit is not None:
            edits.append(edit)

    labels: list[ErrorTag] = [ErrorTag.OK]
    tokens: list[str] = []
    origins: list[int | None] = []
    for it in items:
        if it.deleted:
            labels[-1] = ErrorTag.OMISSION
            continue
        tokens.append(it.token)
        origins.append(it.origin if it.label in (ErrorTag.OK, ErrorTag.ORDER) else None)
        labels.extend([it.label, ErrorTag.OK])
    src_of = {j: i for i, j in pair.alignment}
    links = [(src_of[o], j) for j, o in enumerate(origins) if o is not None and o in src_of]
    lattice = TagLattice(labels, id=pair.id)
    corrupted = replace(pair, target_tokens=tokens, alignment=sorted(links, key=lambda x: (x[0], x[1])),
                        gold_tags=lattice.names(), reference=list(pair.reference or pair.target_tokens))
    return corrupted, lattice, edits


def revert_with_gold(corrupted: Sequence[str], lattice: TagLattice, reference: Sequence[str]) -> list[str]:
    """Undo gold-labelled edits using the reference as the source of lost tokens.

    Walks the corrupted target alongside the reference: OK tokens consume one
    reference token, INSERTION tokens are dropped, REPLACEMENT tokens and
    OMISSION gaps take the next reference token, and ORDER pairs are swapped.
    """
    out: list[str] = []
    ref_pos = 0
    labels = lattice.labels
    m = len(corrupted)
    j = 0
    if labels[0] == ErrorTag.OMISSION:
        out.append(reference[ref_pos])
        ref_pos += 1
    while j < m:
        tag = labels[token_slot(j)]
        if tag == ErrorTag.INSERTION:
            pass
        elif tag == ErrorTag.ORDER and j + 1 < m and labels[token_slot(j + 1)] == ErrorTag.ORDER:
            out.extend([corrupted[j + 1], corrupted[j]])
            ref_pos += 2
            if labels[token_slot(j) + 1] == ErrorTag.OMISSION:
                raise AssertionError("omission inside a swapped pair")
            j += 1
        elif tag == ErrorTag.REPLACEMENT:
            out.append(reference[ref_pos])
            ref_pos += 1
        else:
            out.append(corrupted[j])
            ref_pos += 1
        if labels[token_slot(j) + 1] == ErrorTag.OMISSION:
            out.append(reference[ref_pos])
            ref_pos += 1
        j += 1
    return out


def corrupt_corpus(pairs: Sequence[SentencePair], spec: ErrorSpec,
                   lexicon_words: Sequence[str] | None = None):
    """Corrupt every pair with its own substream derived from ``(spec.seed, index)``."""
    out, lattices = [], []
    words = lexicon_words
    if words is None:
        words = sorted({t for p in pairs for t in p.target_tokens})
    for k, pair in enumerate(pairs):
        rng = np.random.default_rng([spec.seed, k])
        corrupted, lattice, _ = inject_errors(pair, spec, rng, words)
        out.append(corrupted)
        lattices.append(lattice)
    return out, lattices
