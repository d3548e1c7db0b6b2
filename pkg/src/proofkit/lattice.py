"""Error tags and the interleaved gap/token slot lattice.

A target of ``m`` tokens has ``2m + 1`` slots: ``gap_0, tok_1, gap_1, ...,
tok_m, gap_m``. Even slot indices are gaps, odd ones are tokens; token ``j``
(0-based) lives at slot ``2j + 1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autograd import MASK_VALUE


class ErrorTag(IntEnum):
    OK = 0
    OMISSION = 1
    REPLACEMENT = 2
    INSERTION = 3
    ORDER = 4

    @classmethod
    def parse(cls, name: str) -> "ErrorTag":
        return cls[name]


TAGS = [t.name for t in ErrorTag]
N_TAGS = len(ErrorTag)
GAP, TOKEN = 0, 1

GAP_TAGS = frozenset({ErrorTag.OK, ErrorTag.OMISSION})
TOKEN_TAGS = frozenset({ErrorTag.OK, ErrorTag.REPLACEMENT, ErrorTag.INSERTION, ErrorTag.ORDER})


class LabelError(ValueError):
    """A label sequence violates the lattice structure."""


def slot_kinds(m: int) -> list[int]:
    return [GAP if s % 2 == 0 else TOKEN for s in range(2 * m + 1)]


def token_slot(j: int) -> int:
    return 2 * j + 1


def legal(tag: ErrorTag, kind: int) -> bool:
    return tag in (GAP_TAGS if kind == GAP else TOKEN_TAGS)


def emission_mask(kinds: Sequence[int]) -> np.ndarray:
    """``(S, T)`` additive mask: 0 for legal tag/slot-kind pairs, -1e9 otherwise."""
    mask = np.zeros((len(kinds), N_TAGS))
    for s, kind in enumerate(kinds):
        for t in ErrorTag:
            if not legal(t, kind):
                mask[s, t] = MASK_VALUE
    return mask


def transition_mask() -> np.ndarray:
    """Pins transitions that can never occur between alternating gap/token slots."""
    mask = np.zeros((N_TAGS, N_TAGS))
    gap_only = [ErrorTag.OMISSION]
    token_only = [ErrorTag.REPLACEMENT, ErrorTag.INSERTION, ErrorTag.ORDER]
    for u in gap_only:
        for v in gap_only:
            mask[u, v] = MASK_VALUE
    for u in token_only:
        for v in token_only:
            mask[u, v] = MASK_VALUE
    return mask


def boundary_mask() -> np.ndarray:
    """Start/stop slots are gaps, so token-only tags are pinned there."""
    mask = np.zeros(N_TAGS)
    for t in (ErrorTag.REPLACEMENT, ErrorTag.INSERTION, ErrorTag.ORDER):
        mask[t] = MASK_VALUE
    return mask


@dataclass
class TagLattice:
    labels: list[ErrorTag]
    features: np.ndarray | None = None
    scores: list[float] | None = None
    id: str = ""

    def __post_init__(self):
        self.labels = [ErrorTag(t) if not isinstance(t, str) else ErrorTag.parse(t) for t in self.labels]
        if len(self.labels) % 2 != 1:
            raise LabelError(f"lattice {self.id!r} has even slot count {len(self.labels)}")

    @property
    def n_tokens(self) -> int:
        return (len(self.labels) - 1) // 2

    @property
    def kinds(self) -> list[int]:
        return slot_kinds(self.n_tokens)

    def validate(self) -> None:
        for s, (tag, kind) in enumerate(zip(self.labels, self.kinds)):
            if not legal(tag, kind):
                raise LabelError(f"lattice {self.id!r}: tag {tag.name} illegal on "
                                 f"{'gap' if kind == GAP else 'token'} slot {s}")

    def names(self) -> list[str]:
        return [t.name for t in self.labels]

    def to_record(self, reference: Sequence[str] | None = None) -> dict:
        rec = {"id": self.id, "slots": self.names()}
        if reference is not None:
            rec["reference"] = list(reference)
        if self.scores is not None:
            rec["scores"] = [float(s) for s in self.scores]
        return rec

    @classmethod
    def all_ok(cls, m: int, id: str = "") -> "TagLattice":
        return cls([ErrorTag.OK] * (2 * m + 1), id=id)


def write_jsonl(path, records: Iterable[dict]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=False) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


def lattice_from_record(rec: dict) -> TagLattice:
    lat = TagLattice([ErrorTag.parse(s) for s in rec["slots"]], id=str(rec.get("id", "")),
                     scores=rec.get("scores"))
    lat.validate()
    return lat
