"""GRU decoding with source attention, translation-memory retrieval and edit application."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import BOS, EOS, SentencePair, dice_table, lexical_align, read_parallel
from .lattice import ErrorTag, TagLattice, token_slot

TM_PRECEDENCE = 0.8


class ContractError(RuntimeError):
    """Inputs violate an operation's preconditions."""


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


@dataclass
class GruParams:
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.U_z.shape[0]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "GruParams":
        def w():
            return ag.seeded_init((input_dim, hidden_dim), input_dim, hidden_dim, rng)

        def u():
            return ag.seeded_init((hidden_dim, hidden_dim), hidden_dim, hidden_dim, rng)

        return cls(w(), u(), ag.zeros((hidden_dim,)), w(), u(), ag.zeros((hidden_dim,)),
                   w(), u(), ag.zeros((hidden_dim,)))

    @classmethod
    def from_dict(cls, params: dict[str, Tensor], prefix: str = "gru.") -> "GruParams":
        return cls(*(params[prefix + n] for n in ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")))

    def to_dict(self, prefix: str = "gru.") -> dict[str, Tensor]:
        vals = (self.W_z, self.U_z, self.b_z, self.W_r, self.U_r, self.b_r, self.W_h, self.U_h, self.b_h)
        return {prefix + n: v for n, v in zip(("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh"), vals)}


def gru_gates(x: Tensor, h_prev: Tensor, p: GruParams) -> tuple[Tensor, Tensor, Tensor]:
    """Update gate, reset gate and candidate state for one step."""
    if x.shape[-1] != p.input_dim or h_prev.shape[-1] != p.hidden_dim:
        raise ag.ShapeError(f"gru_step expects input {p.input_dim} / hidden {p.hidden_dim}, "
                            f"got {x.shape} / {h_prev.shape}")
    z = ag.sigmoid(x @ p.W_z + h_prev @ p.U_z + p.b_z)
    r = ag.sigmoid(x @ p.W_r + h_prev @ p.U_r + p.b_r)
    cand = ag.tanh(x @ p.W_h + (r * h_prev) @ p.U_h + p.b_h)
    return z, r, cand


def gru_step(x, h_prev, p: GruParams) -> Tensor:
    """``h_t = (1 - z) * h_prev + z * candidate``; works on vectors or row batches."""
    x, h_prev = ag.as_tensor(x), ag.as_tensor(h_prev)
    squeeze = x.ndim == 1
    if squeeze:
        x, h_prev = ag.reshape(x, (1, -1)), ag.reshape(h_prev, (1, -1))
    z, _, cand = gru_gates(x, h_prev, p)
    h = (1.0 - z) * h_prev + z * cand
    return ag.reshape(h, (-1,)) if squeeze else h


# ---------------------------------------------------------------------------
# attention decoder
# ---------------------------------------------------------------------------


def init_decoder(vocab_size: int, d_model: int, ctx_width: int, emb_dim: int, hidden: int,
                 rng: np.random.Generator) -> dict[str, Tensor]:
    p = {
        "dec.emb": ag.seeded_init((vocab_size, emb_dim), vocab_size, emb_dim, rng),
        "dec.init.w": ag.seeded_init((ctx_width, hidden), ctx_width, hidden, rng),
        "dec.init.b": ag.zeros((hidden,)),
        "dec.att.w": ag.seeded_init((hidden, d_model), hidden, d_model, rng),
        "dec.att.cov": Tensor(np.array([1.0]), requires_grad=True),
        "dec.att.anchor": Tensor(np.array([1.0]), requires_grad=True),
        "dec.out.w": ag.seeded_init((hidden + d_model, vocab_size), hidden + d_model, vocab_size, rng),
        "dec.out.b": ag.zeros((vocab_size,)),
        "dec.lex.scale": Tensor(np.array([1.0]), requires_grad=True),
    }
    p.update(GruParams.init(emb_dim + d_model, hidden, rng).to_dict())
    return p


@dataclass
class SpanBatch:
    """Flagged spans to decode, each with its own source memory."""
    context: Tensor            # (P, ctx_width)
    memory: Tensor             # (P, N, d_model)
    memory_pad: np.ndarray     # (P, N) True = padding
    unmatched: np.ndarray      # (P, N) prior that a source token lacks a target partner
    source_ids: np.ndarray | None = None   # (P, N) token ids feeding the lexical table
    anchor: np.ndarray | None = None       # (P, N) alignment of the flagged token over the source


def decoder_step(prev_ids, h: Tensor, spans: SpanBatch, params: dict[str, Tensor]):
    """One greedy/teacher-forced step; returns ``(h_new, log_probs, attention)``."""
    d = spans.memory.shape[-1]
    q = h @ params["dec.att.w"]                                          # (P, d)
    scores = ag.reshape(spans.memory @ ag.reshape(q, (*q.shape, 1)), q.shape[:1] + spans.memory.shape[1:2])
    scores = scores * (1.0 / math.sqrt(d)) + params["dec.att.cov"] * Tensor(spans.unmatched)
    if spans.anchor is not None and "dec.att.anchor" in params:
        scores = scores + params["dec.att.anchor"] * Tensor(spans.anchor)
    scores = scores + Tensor(np.where(spans.memory_pad, ag.MASK_VALUE, 0.0))
    att = ag.softmax(scores, axis=-1)
    ctx = ag.reshape(ag.reshape(att, (att.shape[0], 1, att.shape[1])) @ spans.memory, (att.shape[0], d))
    x = ag.concat([ag.embedding(params["dec.emb"], prev_ids), ctx], axis=-1)
    h_new = gru_step(x, h, GruParams.from_dict(params))
    logits = ag.linear(ag.concat([h_new, ctx], axis=-1), params["dec.out.w"], params["dec.out.b"])
    if spans.source_ids is not None and "align.lex" in params:
        # attended source words vote for their translations through the lexical alignment table
        lex = ag.embedding(params["align.lex"], spans.source_ids)               # (P, N, V)
        votes = ag.reshape(att, (att.shape[0], 1, att.shape[1])) @ lex
        logits = logits + params["dec.lex.scale"] * ag.reshape(votes, (att.shape[0], lex.shape[-1]))
    return h_new, ag.log_softmax(logits, axis=-1), att


def initial_state(spans: SpanBatch, params: dict[str, Tensor]) -> Tensor:
    return ag.tanh(ag.linear(spans.context, params["dec.init.w"], params["dec.init.b"]))


def correction_loss(spans: SpanBatch, targets: Sequence[Sequence[int]], params: dict[str, Tensor]):
    """Summed teacher-forced token NLL (targets include EOS) and the token count."""
    P = len(targets)
    T = max(len(t) for t in targets)
    gold = np.zeros((P, T), dtype=np.int64)
    live = np.zeros((P, T))
    for k, t in enumerate(targets):
        gold[k, :len(t)] = t
        live[k, :len(t)] = 1.0
    h = initial_state(spans, params)
    prev = np.full(P, BOS, dtype=np.int64)
    total = None
    rows = np.arange(P)
    for step in range(T):
        h, logp, _ = decoder_step(prev, h, spans, params)
        picked = ag.getitem(logp, (rows, gold[:, step])) * Tensor(live[:, step])
        term = ag.tsum(picked)
        total = term if total is None else total + term
        prev = gold[:, step]
    return -total, float(live.sum())


def decode_correction(spans: SpanBatch, params: dict[str, Tensor], max_len: int,
                      beam_width: int = 1) -> list[tuple[list[int], bool]]:
    """Greedy decoding per span; returns ``(token ids without EOS, truncated)``.

    EOS is barred at the first step, so every span yields at least one token.
    ``beam_width > 1`` (at most 4) runs a small beam search per span.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if beam_width > 1:
        return [_beam_one(_span_slice(spans, k), params, max_len, min(beam_width, 4))
                for k in range(spans.context.shape[0])]
    P = spans.context.shape[0]
    h = initial_state(spans, params)
    prev = np.full(P, BOS, dtype=np.int64)
    out: list[list[int]] = [[] for _ in range(P)]
    done = np.zeros(P, dtype=bool)
    for step in range(max_len):
        h, logp, _ = decoder_step(prev, h, spans, params)
        lp = logp.data
        if step == 0:
            lp = lp.copy()
            lp[:, EOS] = -np.inf
        nxt = np.argmax(lp, axis=-1)
        for k in range(P):
            if done[k]:
                continue
            if nxt[k] == EOS:
                done[k] = True
            else:
                out[k].append(int(nxt[k]))
        if done.all():
            break
        prev = nxt
    return [(toks, not bool(done[k])) for k, toks in enumerate(out)]


def _span_slice(spans: SpanBatch, k: int) -> SpanBatch:
    def cut(a):
        return None if a is None else a[k:k + 1]
    return SpanBatch(Tensor(spans.context.data[k:k + 1]), Tensor(spans.memory.data[k:k + 1]),
                     spans.memory_pad[k:k + 1], spans.unmatched[k:k + 1], cut(spans.source_ids),
                     cut(spans.anchor))


def _beam_one(span: SpanBatch, params, max_len: int, width: int) -> tuple[list[int], bool]:
    h0 = initial_state(span, params)
    beams = [(0.0, [], h0, False)]
    for _ in range(max_len):
        cands = []
        for score, toks, h, ended in beams:
            if ended:
                cands.append((score, toks, h, True))
                continue
            prev = np.array([toks[-1] if toks else BOS])
            h_new, logp, _ = decoder_step(prev, h, span, params)
            lp = logp.data[0].copy()
            if not toks:
                lp[EOS] = -np.inf
            for tok in np.argsort(-lp, kind="stable")[:width]:
                cands.append((score + lp[tok], toks + [int(tok)], h_new, int(tok) == EOS))
        cands.sort(key=lambda c: -c[0])
        beams = cands[:width]
        if all(b[3] for b in beams):
            break
    score, toks, _, ended = beams[0]
    return ([t for t in toks if t != EOS], not ended)


# ---------------------------------------------------------------------------
# translation memory
# ---------------------------------------------------------------------------


@dataclass
class TmHit:
    entry: int
    source: list[str]
    target: list[str]
    similarity: float
    links: list[tuple[int, int]]


class TranslationMemory:
    """Sentence-level store with exact lookup and token-set Jaccard fuzzy lookup."""

    def __init__(self, entries: Sequence[tuple[Sequence[str], Sequence[str]]] = (),
                 links: Sequence[Sequence[tuple[int, int]]] | None = None):
        self.entries: list[tuple[list[str], list[str]]] = []
        self.links: list[list[tuple[int, int]]] = []
        self._exact: dict[tuple[str, ...], int] = {}
        self._sets: list[frozenset] = []
        self.index: dict[str, list[int]] = {}
        for k, (s, t) in enumerate(entries):
            self.add(s, t, links[k] if links is not None else None)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, source: Sequence[str], target: Sequence[str], links=None) -> None:
        k = len(self.entries)
        self.entries.append((list(source), list(target)))
        self.links.append(list(links) if links is not None else [])
        self._exact.setdefault(tuple(source), k)
        s = frozenset(source)
        self._sets.append(s)
        for tok in s:
            self.index.setdefault(tok, []).append(k)

    def lookup(self, source: Sequence[str], threshold: float = 0.0) -> TmHit | None:
        k = self._exact.get(tuple(source))
        if k is not None:
            return self._hit(k, 1.0)
        q = frozenset(source)
        cands = sorted({e for tok in q for e in self.index.get(tok, ())})
        best_k, best = -1, -1.0
        for e in cands:
            s = self._sets[e]
            sim = len(q & s) / len(q | s)
            if sim > best:
                best_k, best = e, sim
        if best_k < 0 or best < threshold:
            return None
        return self._hit(best_k, best)

    def _hit(self, k: int, sim: float) -> TmHit:
        s, t = self.entries[k]
        return TmHit(k, s, t, sim, self.links[k])

    @classmethod
    def from_pairs(cls, pairs: Sequence[SentencePair]) -> "TranslationMemory":
        """Build from pairs, using their alignments or Dice links when absent."""
        if not pairs:
            return cls()
        if any(p.alignment is None for p in pairs):
            pairs = lexical_align(list(pairs), dice=dice_table(pairs))
        return cls([(p.source_tokens, p.target_tokens) for p in pairs], [p.alignment for p in pairs])

    @classmethod
    def load(cls, src_path, tgt_path) -> "TranslationMemory":
        return cls.from_pairs(read_parallel(src_path, tgt_path))


def tm_lookup(src_tokens: Sequence[str], tm: TranslationMemory, threshold: float):
    """``(target tokens, similarity)`` of the best hit at or above ``threshold``, else None."""
    hit = tm.lookup(src_tokens, threshold)
    return None if hit is None else (hit.target, hit.similarity)


# ---------------------------------------------------------------------------
# applying corrections
# ---------------------------------------------------------------------------


@dataclass
class Correction:
    id: str
    edits: list[tuple[int, str, list[str]]]
    corrected: list[str]
    truncated: bool = False
    sources: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return {"id": self.id, "edits": [[s, op, list(toks)] for s, op, toks in self.edits],
                "corrected": self.corrected, "truncated": self.truncated}


def replay_edits(target: Sequence[str], edits: Sequence[tuple[int, str, Sequence[str]]]) -> list[str]:
    """Apply slot-addressed edits to ``target`` in one left-to-right pass."""
    by_slot: dict[int, tuple[str, Sequence[str]]] = {}
    for slot, op, toks in edits:
        if slot in by_slot:
            raise ContractError(f"conflicting edits on slot {slot}")
        by_slot[slot] = (op, toks)
    out: list[str] = []
    m = len(target)
    j = 0

    def gap(g):
        act = by_slot.get(2 * g)
        if act is not None:
            if act[0] != "insert":
                raise ContractError(f"gap slot {2 * g} cannot take {act[0]}")
            out.extend(act[1])

    gap(0)
    while j < m:
        act = by_slot.get(token_slot(j))
        op = act[0] if act else None
        if op is None:
            out.append(target[j])
        elif op == "delete":
            pass
        elif op == "replace":
            out.extend(act[1])
        elif op == "swap":
            if j + 1 >= m or token_slot(j + 1) in by_slot or 2 * (j + 1) in by_slot:
                raise ContractError(f"swap at slot {token_slot(j)} overlaps another edit")
            out.extend([target[j + 1], target[j]])
            j += 1
        else:
            raise ContractError(f"unknown edit {op!r}")
        gap(j + 1)
        j += 1
    return out


def _covered_sources(links, labels, n_src: int) -> list[int]:
    covered = set()
    for i, j in links:
        if labels[token_slot(j)] in (ErrorTag.OK, ErrorTag.ORDER):
            covered.add(i)
    return [i for i in range(n_src) if i not in covered]


def _tm_position(hit: TmHit, word: str, near: int) -> int | None:
    """Target index in the memory entry translating ``word``, using the occurrence nearest ``near``."""
    link_of = {i: j for i, j in hit.links}
    spots = [i for i, s in enumerate(hit.source) if s == word and i in link_of]
    if not spots:
        return None
    i = min(spots, key=lambda k: (abs(k - near), k))
    return link_of[i]


def _anchor_window(slot: int, links, labels, m: int, pos_of) -> tuple[float, float]:
    """Memory-target positions of the nearest intact target tokens left/right of ``slot``."""
    src_of = {j: i for i, j in links if labels[token_slot(j)] == ErrorTag.OK}
    left_j = (slot - 1) // 2 if slot % 2 == 1 else slot // 2 - 1
    right_j = (slot + 1) // 2 if slot % 2 == 1 else slot // 2
    lo = hi = None
    for j in range(left_j, -1, -1):
        if j in src_of and (lo := pos_of(src_of[j])) is not None:
            break
    for j in range(right_j, m):
        if j in src_of and (hi := pos_of(src_of[j])) is not None:
            break
    lo_v = -math.inf if lo is None else lo
    hi_v = math.inf if hi is None else hi
    return (min(lo_v, hi_v), max(lo_v, hi_v))


def apply_corrections(corrupted: Sequence[str], lattice: TagLattice,
                      decoder: Callable[[int], tuple[list[str], bool]] | None = None,
                      tm: TranslationMemory | None = None, threshold: float = TM_PRECEDENCE, *,
                      source: Sequence[str] = (), links: Sequence[tuple[int, int]] = (),
                      id: str = "") -> Correction:
    """Turn a tagged lattice into slot edits and the corrected target.

    REPLACEMENT and OMISSION slots are filled from the translation memory when
    the retrieved entry (similarity >= ``threshold``) contains the uncovered
    source word nearest the slot; otherwise ``decoder(slot)`` supplies tokens.
    INSERTION tokens are deleted and adjacent ORDER pairs swapped once.
    """
    m = len(corrupted)
    if lattice.n_tokens != m:
        raise ContractError(f"lattice has {lattice.n_tokens} token slots for {m} tokens")
    labels = lattice.labels
    hit = tm.lookup(source, threshold) if (tm is not None and len(tm) and source) else None
    unmatched = _covered_sources(links, labels, len(source)) if source else []
    edits: list[tuple[int, str, list[str]]] = []
    provenance: list[str] = []
    truncated = False

    def fill(slot: int) -> list[str]:
        nonlocal truncated
        if hit is not None and unmatched:
            # uncovered source words whose translation the memory entry attests, placed
            # by where that translation sits between the slot's intact neighbours
            pos = {u: _tm_position(hit, source[u], u) for u in unmatched}
            cands = [u for u in unmatched if pos[u] is not None]
            if cands:
                lo, hi = _anchor_window(slot, links, labels, m,
                                        lambda i: _tm_position(hit, source[i], i))
                u = min(cands, key=lambda u: (0 if lo < pos[u] < hi else
                                              min(abs(pos[u] - lo), abs(pos[u] - hi)), pos[u], u))
                unmatched.remove(u)
                provenance.append("tm")
                return [hit.target[pos[u]]]
        if decoder is None:
            provenance.append("none")
            return []
        toks, trunc = decoder(slot)
        truncated = truncated or trunc
        provenance.append("decoder")
        return list(toks)

    j = 0
    order_pending = None
    for slot, tag in enumerate(labels):
        if tag == ErrorTag.OK:
            continue
        if tag == ErrorTag.OMISSION:
            toks = fill(slot)
            if toks:
                edits.append((slot, "insert", toks))
        elif tag == ErrorTag.REPLACEMENT:
            toks = fill(slot)
            if toks:
                edits.append((slot, "replace", toks))
        elif tag == ErrorTag.INSERTION:
            edits.append((slot, "delete", []))
        elif tag == ErrorTag.ORDER:
            j = (slot - 1) // 2
            if order_pending is not None and order_pending == j - 1 and labels[slot - 1] == ErrorTag.OK:
                edits.append((token_slot(order_pending), "swap", []))
                order_pending = None
            else:
                order_pending = j
    corrected = replay_edits(corrupted, edits)
    return Correction(id or lattice.id, edits, corrected, truncated, provenance)


def gold_fills(corrupted: Sequence[str], lattice: TagLattice, reference: Sequence[str]) -> dict[int, list[str]]:
    """Reference tokens owed to each REPLACEMENT/OMISSION slot of a gold lattice."""
    labels = lattice.labels
    fills: dict[int, list[str]] = {}
    ref_pos = 0
    if labels[0] == ErrorTag.OMISSION:
        fills[0] = [reference[ref_pos]]
        ref_pos += 1
    for j in range(len(corrupted)):
        tag = labels[token_slot(j)]
        if tag == ErrorTag.REPLACEMENT:
            fills[token_slot(j)] = [reference[ref_pos]]
        if tag != ErrorTag.INSERTION:
            ref_pos += 1
        gap = token_slot(j) + 1
        if labels[gap] == ErrorTag.OMISSION:
            fills[gap] = [reference[ref_pos]]
            ref_pos += 1
    if ref_pos != len(reference):
        raise ContractError(f"lattice {lattice.id!r} does not account for the reference length")
    return fills
