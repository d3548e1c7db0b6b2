"""Source/target alignment and linear-chain CRF tagging of the slot lattice.

The CRF score of a label path ``y`` over ``S`` slots is::

    start[y_0] + sum_s emit[s, y_s] + sum_{s>0} trans[y_{s-1}, y_s] + stop[y_{S-1}]

and ``P(y | x) = exp(score(y) - log Z)``. ``log Z`` and its gradient (the
posterior marginals) come from the forward/backward recursions in log space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import autograd as ag
from .autograd import Tensor
from .encoder import ContextVectors
from .lattice import (N_TAGS, ErrorTag, LabelError, TagLattice, boundary_mask, emission_mask,
                      legal, slot_kinds, transition_mask)


class DataError(ValueError):
    """Supervision data is inconsistent with the model inputs."""


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------


@dataclass
class AlignmentMatrix:
    probs: Tensor      # (N, M) or (B, N, M)
    scores: Tensor     # pre-softmax scaled similarities, same shape


def alignment_matrix(src: ContextVectors, tgt: ContextVectors) -> AlignmentMatrix:
    """Row-wise softmax of ``src @ tgt^T / sqrt(d)`` over unmasked target positions."""
    d = src.values.shape[-1]
    if tgt.values.shape[-1] != d:
        raise ag.ShapeError(f"source width {d} != target width {tgt.values.shape[-1]}")
    if tgt.values.shape[-2] == 0 or np.any(tgt.pad_mask.all(axis=-1)):
        raise ValueError("alignment needs a non-empty target")
    scores = ag.matmul(src.values, ag.swapaxes(tgt.values, -1, -2)) * (1.0 / math.sqrt(d))
    mask = np.where(tgt.pad_mask, ag.MASK_VALUE, 0.0)[..., None, :]
    return AlignmentMatrix(ag.softmax(scores + mask, axis=-1), scores)


def lexical_alignment(table: Tensor, src_ids: np.ndarray, tgt_ids: np.ndarray,
                      tgt_pad: np.ndarray) -> AlignmentMatrix:
    """Word-to-word alignment from a ``(V, V)`` score table, ignoring context.

    ``scores[b, i, j] = table[src_ids[b, i], tgt_ids[b, j]]``; rows are
    softmaxed over unmasked targets like :func:`alignment_matrix`.
    """
    rows = ag.embedding(table, src_ids)                               # (B, N, V)
    onehot = np.eye(table.shape[1])[np.asarray(tgt_ids, dtype=np.int64)]
    scores = ag.matmul(rows, Tensor(np.swapaxes(onehot, -1, -2)))      # (B, N, M)
    mask = np.where(tgt_pad, ag.MASK_VALUE, 0.0)[..., None, :]
    return AlignmentMatrix(ag.softmax(scores + mask, axis=-1), scores)


def link_indicator(shape: tuple[int, ...], links: Sequence[tuple[int, int]]) -> np.ndarray:
    """0/1 gold indicator with at most one target per source row."""
    y = np.zeros(shape)
    n, m = shape[-2], shape[-1]
    seen = set()
    for i, j in links:
        if not (0 <= i < n and 0 <= j < m):
            raise DataError(f"alignment link ({i}, {j}) outside {n}x{m}")
        if i in seen:
            raise DataError(f"source token {i} has more than one gold link")
        seen.add(i)
        y[..., i, j] = 1.0
    return y


def alignment_loss(pred: AlignmentMatrix, links) -> Tensor:
    """Cross-entropy ``-sum y_ij log p_ij`` over gold links; unaligned rows drop out.

    ``links`` is a list of ``(i, j)`` for a single sentence, or a ready
    indicator array matching ``pred.probs``.
    """
    if isinstance(links, np.ndarray):
        y = links
    else:
        y = link_indicator(pred.probs.shape, links)
    return ag.cross_entropy(y, pred.probs)


# ---------------------------------------------------------------------------
# CRF
# ---------------------------------------------------------------------------


@dataclass
class CrfParams:
    transitions: Tensor
    start_scores: Tensor
    stop_scores: Tensor
    trans_mask: np.ndarray = field(default=None)
    start_mask: np.ndarray = field(default=None)
    stop_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        T = self.transitions.shape[0]
        if self.trans_mask is None:
            self.trans_mask = np.zeros((T, T))
        if self.start_mask is None:
            self.start_mask = np.zeros(T)
        if self.stop_mask is None:
            self.stop_mask = np.zeros(T)

    @property
    def n_tags(self) -> int:
        return self.transitions.shape[0]

    def effective(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.transitions.data + self.trans_mask, self.start_scores.data + self.start_mask,
                self.stop_scores.data + self.stop_mask)

    @classmethod
    def zeros(cls, n_tags: int, requires_grad: bool = True) -> "CrfParams":
        return cls(ag.zeros((n_tags, n_tags), requires_grad), ag.zeros((n_tags,), requires_grad),
                   ag.zeros((n_tags,), requires_grad))

    @classmethod
    def for_lattice(cls, transitions: Tensor, start: Tensor, stop: Tensor) -> "CrfParams":
        """Parameters with the gap/token structural constraints pinned to -1e9."""
        return cls(transitions, start, stop, transition_mask(), boundary_mask(), boundary_mask())


def _forward_backward(E: np.ndarray, lengths: np.ndarray, A: np.ndarray, st: np.ndarray,
                      sp: np.ndarray):
    """Log-space alpha/beta over a padded batch ``E`` of shape ``(B, S, T)``."""
    B, S, T = E.shape
    steps = np.arange(S)
    alpha = np.empty((B, S, T))
    alpha[:, 0] = st + E[:, 0]
    for s in range(1, S):
        new = logsumexp(alpha[:, s - 1, :, None] + A[None] + E[:, s, None, :], axis=1)
        alpha[:, s] = np.where((s < lengths)[:, None], new, alpha[:, s - 1])
    last = alpha[np.arange(B), lengths - 1]
    log_z = logsumexp(last + sp, axis=1)
    beta = np.zeros((B, S, T))
    for s in range(S - 1, -1, -1):
        if s + 1 < S:
            new = logsumexp(A[None] + E[:, s + 1, None, :] + beta[:, s + 1, None, :], axis=2)
        else:
            new = np.zeros((B, T))
        beta[:, s] = np.where((s == lengths - 1)[:, None], sp,
                              np.where((s < lengths - 1)[:, None], new, 0.0))
    valid = (steps[None, :] < lengths[:, None])
    return alpha, beta, log_z, valid


def _posteriors(E, lengths, A, st, sp):
    alpha, beta, log_z, valid = _forward_backward(E, lengths, A, st, sp)
    unary = np.exp(alpha + beta - log_z[:, None, None]) * valid[..., None]
    pair = np.exp(alpha[:, :-1, :, None] + A[None, None] + E[:, 1:, None, :] + beta[:, 1:, None, :]
                  - log_z[:, None, None, None])
    pair = pair * valid[:, 1:, None, None]
    return log_z, unary, pair


def _check_lengths(E: np.ndarray, lengths) -> np.ndarray:
    if E.ndim != 3:
        raise ag.ShapeError(f"emissions must be (B, S, T), got {E.shape}")
    if lengths is None:
        return np.full(E.shape[0], E.shape[1], dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1) or np.any(lengths > E.shape[1]):
        raise ValueError("every sequence needs 1 <= length <= S")
    return lengths


def crf_log_partition_batch(emissions: Tensor, params: CrfParams, lengths=None) -> Tensor:
    """Per-sequence ``log Z`` for ``(B, S, T)`` emissions; returns shape ``(B,)``."""
    E = emissions.data
    lengths = _check_lengths(E, lengths)
    A, st, sp = params.effective()
    B = E.shape[0]
    log_z, unary, pair = _posteriors(E, lengths, A, st, sp)
    last = lengths - 1

    def bw(g):
        gE = unary * g[:, None, None]
        gA = np.einsum("b,bsuv->uv", g, pair)
        gst = unary[:, 0] * g[:, None]
        gsp = unary[np.arange(B), last] * g[:, None]
        return gE, gA, gst.sum(0), gsp.sum(0)

    return ag.custom_op(log_z, (emissions, params.transitions, params.start_scores,
                                params.stop_scores), bw, "crf_log_z")


def path_score_batch(emissions: Tensor, tags: np.ndarray, params: CrfParams, lengths=None) -> Tensor:
    """Unnormalised score of the given label paths; returns shape ``(B,)``."""
    E = emissions.data
    lengths = _check_lengths(E, lengths)
    tags = np.asarray(tags, dtype=np.int64)
    A, st, sp = params.effective()
    B, S, T = E.shape
    b = np.arange(B)
    valid = np.arange(S)[None, :] < lengths[:, None]
    safe = np.where(valid, tags, 0)
    onehot = np.zeros((B, S, T))
    onehot[b[:, None], np.arange(S)[None, :], safe] = valid
    trans_counts = np.zeros((B, T, T))
    for s in range(1, S):
        np.add.at(trans_counts, (b, safe[:, s - 1], safe[:, s]), valid[:, s].astype(float))
    first = np.zeros((B, T))
    first[b, safe[:, 0]] = 1.0
    final = np.zeros((B, T))
    final[b, safe[b, lengths - 1]] = 1.0
    score = ((onehot * E).sum((1, 2)) + np.einsum("buv,uv->b", trans_counts, A)
             + first @ st + final @ sp)

    def bw(g):
        return (onehot * g[:, None, None], np.einsum("b,buv->uv", g, trans_counts),
                (first * g[:, None]).sum(0), (final * g[:, None]).sum(0))

    return ag.custom_op(score, (emissions, params.transitions, params.start_scores,
                                params.stop_scores), bw, "crf_path_score")


def crf_nll_batch(emissions: Tensor, tags, params: CrfParams, lengths=None) -> Tensor:
    """Per-sequence ``log Z - score(gold)``, shape ``(B,)``."""
    return crf_log_partition_batch(emissions, params, lengths) - path_score_batch(
        emissions, tags, params, lengths)


def crf_log_partition(emissions: Tensor, params: CrfParams) -> Tensor:
    """``log Z`` of a single ``(S, T)`` emission matrix, as a scalar tensor."""
    if emissions.ndim != 2 or emissions.shape[0] < 1:
        raise ag.ShapeError(f"emissions must be (S>=1, T), got {emissions.shape}")
    return ag.reshape(crf_log_partition_batch(ag.reshape(emissions, (1, *emissions.shape)), params), ())


def crf_neg_log_likelihood(emissions: Tensor, labels: Sequence[int], params: CrfParams,
                           kinds: Sequence[int] | None = None) -> Tensor:
    """Scalar NLL of one gold path; with ``kinds`` the labels are checked against slot kinds."""
    labels = [int(t) for t in labels]
    if len(labels) != emissions.shape[0]:
        raise DataError(f"{len(labels)} labels for {emissions.shape[0]} slots")
    if kinds is not None:
        for s, (t, k) in enumerate(zip(labels, kinds)):
            if not legal(ErrorTag(t), k):
                raise DataError(f"label {ErrorTag(t).name} illegal at slot {s}")
    e3 = ag.reshape(emissions, (1, *emissions.shape))
    return ag.reshape(crf_nll_batch(e3, np.array([labels]), params), ())


def crf_viterbi(emissions, params: CrfParams) -> list[int]:
    """Exact best path; ties prefer the lowest tag index."""
    E = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions, dtype=float)
    A, st, sp = params.effective()
    S, T = E.shape
    delta = st + E[0]
    back = np.zeros((S, T), dtype=np.int64)
    for s in range(1, S):
        cand = delta[:, None] + A
        back[s] = np.argmax(cand, axis=0)
        delta = cand[back[s], np.arange(T)] + E[s]
    best = int(np.argmax(delta + sp))
    path = [best]
    for s in range(S - 1, 0, -1):
        best = int(back[s, best])
        path.append(best)
    return path[::-1]


def crf_marginals(emissions: Tensor, params: CrfParams) -> np.ndarray:
    """Posterior tag probabilities per slot, shape ``(S, T)``."""
    E = emissions.data[None]
    A, st, sp = params.effective()
    _, unary, _ = _posteriors(E, np.array([E.shape[1]]), A, st, sp)
    return unary[0]


# ---------------------------------------------------------------------------
# slot features
# ---------------------------------------------------------------------------


def slot_layout(lengths: Sequence[int]) -> np.ndarray:
    """Constant ``(B, 2M+1, M)`` matrix mapping token features to slot features.

    Token slot ``2j+1`` copies token ``j``; interior gaps average their two
    neighbours; boundary gaps copy their single neighbour.
    """
    lengths = list(lengths)
    M = max(lengths)
    C = np.zeros((len(lengths), 2 * M + 1, M))
    for b, m in enumerate(lengths):
        for j in range(m):
            C[b, 2 * j + 1, j] = 1.0
        C[b, 0, 0] = 1.0
        C[b, 2 * m, m - 1] = 1.0
        for g in range(1, m):
            C[b, 2 * g, g - 1] = 0.5
            C[b, 2 * g, g] = 0.5
    return C


def target_source_summary(align: AlignmentMatrix, src: ContextVectors) -> tuple[Tensor, Tensor]:
    """Per target token, attention over source tokens and the weighted source vector."""
    src_mask = np.where(src.pad_mask, ag.MASK_VALUE, 0.0)[..., :, None]
    col = ag.softmax(align.scores + src_mask, axis=-2)          # (B, N, M), columns sum to 1
    summary = ag.matmul(ag.swapaxes(col, -1, -2), src.values)   # (B, M, d)
    return col, summary


def lexical_cues(lex: AlignmentMatrix, align: AlignmentMatrix, src_pad: np.ndarray) -> np.ndarray:
    """Detached word-identity cues per target token, ``(B, M, 3)``.

    ``lex`` scores word identities without context, so a wrong word keeps a
    low score even where the contextual alignment has given it a partner.
    Columns: best lexical score, lexical mass received from the source rows,
    and the lexical score at the contextual partner (column-attention average).
    """
    pad = src_pad[..., :, None]
    scores = lex.scores.data
    best = np.where(pad, -np.inf, scores).max(axis=-2)
    mass = np.where(pad, 0.0, lex.probs.data).sum(axis=-2)
    ctx = align.scores.data + np.where(pad, ag.MASK_VALUE, 0.0)
    col = np.exp(ctx - ctx.max(axis=-2, keepdims=True))
    col /= col.sum(axis=-2, keepdims=True)
    at_partner = (col * np.where(pad, 0.0, scores)).sum(axis=-2)
    return np.stack([best, mass, at_partner], axis=-1)


def token_features(src: ContextVectors, tgt: ContextVectors, align: AlignmentMatrix,
                   lex: AlignmentMatrix | None = None) -> Tensor:
    """Target context, attended source summary, their product, and detached alignment scalars.

    The scalars are the best raw similarity of each target token to any source
    token, the alignment mass the source rows place on it, three order cues
    and (when ``lex`` is given, else zeros) three lexical cues.
    """
    _, summary = target_source_summary(align, src)
    t = tgt.values
    src_pad = np.where(src.pad_mask, ag.MASK_VALUE, 0.0)[..., :, None]
    best = align.scores.data + src_pad
    best_score = Tensor(best.max(axis=-2)[..., None])
    probs = align.probs.data * (~src.pad_mask)[..., :, None]
    mass = Tensor(probs.sum(axis=-2)[..., None])
    cues = np.zeros(t.shape[:-1] + (3,)) if lex is None else lexical_cues(lex, align, src.pad_mask)
    return ag.concat([t, summary, t * summary, best_score, mass,
                      Tensor(alignment_geometry(align, src.pad_mask, tgt.pad_mask)), Tensor(cues)], axis=-1)


def alignment_geometry(align: AlignmentMatrix, src_pad: np.ndarray, tgt_pad: np.ndarray) -> np.ndarray:
    """Detached order cues per target token, ``(B, M, 3)``.

    The expected source position of each target token is compared with its
    neighbours' (step minus one, so a monotone alignment gives zeros), and the
    source-minus-target length difference is broadcast to every token.
    """
    scores = align.scores.data + np.where(src_pad, ag.MASK_VALUE, 0.0)[..., :, None]
    col = np.exp(scores - scores.max(axis=-2, keepdims=True))
    col /= col.sum(axis=-2, keepdims=True)
    pos = np.einsum("bnm,n->bm", col, np.arange(col.shape[-2], dtype=float))
    live = ~tgt_pad
    out = np.zeros(pos.shape + (3,))
    step = pos[:, 1:] - pos[:, :-1] - 1.0
    both = live[:, 1:] & live[:, :-1]
    out[:, 1:, 0] = np.where(both, step, 0.0)
    out[:, :-1, 1] = np.where(both, step, 0.0)
    diff = (~src_pad).sum(axis=-1) - live.sum(axis=-1)
    out[..., 2] = np.where(live, diff[:, None], 0.0)
    return out


def token_feature_width(d_model: int) -> int:
    return 3 * d_model + 8


def slot_feature_width(d_model: int) -> int:
    return token_feature_width(d_model) + 4


def source_coverage(align: AlignmentMatrix, src_pad: np.ndarray, tgt_lengths: Sequence[int]) -> np.ndarray:
    """How much target attention each source token receives, ``(B, N)``; padding gets 1."""
    scores = align.scores.data + np.where(src_pad, ag.MASK_VALUE, 0.0)[..., :, None]
    col = np.exp(scores - scores.max(axis=-2, keepdims=True))
    col /= col.sum(axis=-2, keepdims=True)
    live_t = np.arange(col.shape[-1])[None, :] < np.asarray(tgt_lengths)[:, None]
    cov = (col * live_t[:, None, :]).sum(axis=-1)
    return np.where(src_pad, 1.0, cov), col


def gap_unmatched(align: AlignmentMatrix, src_pad: np.ndarray, tgt_lengths: Sequence[int]) -> np.ndarray:
    """Detached per-slot cue for omissions, ``(B, S, 4)``.

    For each target token, the uncovered mass of the source words just before
    and after its aligned source word. A gap slot carries these two numbers for
    its left and its right neighbour token; token slots carry zeros.
    """
    cov, col = source_coverage(align, src_pad, tgt_lengths)
    u = np.clip(1.0 - cov, 0.0, 1.0)
    u_prev = np.pad(u, ((0, 0), (1, 0)))[:, :-1]
    u_next = np.pad(u, ((0, 0), (0, 1)))[:, 1:]
    left = np.einsum("bnm,bn->bm", col, u_prev)
    right = np.einsum("bnm,bn->bm", col, u_next)
    B = len(tgt_lengths)
    out = np.zeros((B, 2 * max(tgt_lengths) + 1, 4))
    for b, m in enumerate(tgt_lengths):
        for g in range(m + 1):
            if g > 0:
                out[b, 2 * g, 0:2] = left[b, g - 1], right[b, g - 1]
            if g < m:
                out[b, 2 * g, 2:4] = left[b, g], right[b, g]
    return out


def slot_features(tok_feats: Tensor, lengths: Sequence[int], extra: np.ndarray | None = None) -> Tensor:
    """Token features spread over the lattice; ``extra`` columns default to zero."""
    spread = ag.matmul(Tensor(slot_layout(lengths)), tok_feats)
    if extra is None:
        extra = np.zeros(spread.shape[:-1] + (4,))
    return ag.concat([spread, Tensor(extra)], axis=-1)


def emissions_from_features(feats: Tensor, params: dict[str, Tensor]) -> Tensor:
    h = ag.tanh(ag.linear(feats, params["emit.hidden.w"], params["emit.hidden.b"]))
    return ag.linear(h, params["emit.out.w"], params["emit.out.b"])


def lattice_emission_mask(lengths: Sequence[int]) -> np.ndarray:
    S = 2 * max(lengths) + 1
    out = np.zeros((len(lengths), S, N_TAGS))
    for b, m in enumerate(lengths):
        out[b, :2 * m + 1] = emission_mask(slot_kinds(m))
    return out


def crf_from_params(params: dict[str, Tensor]) -> CrfParams:
    return CrfParams.for_lattice(params["crf.trans"], params["crf.start"], params["crf.stop"])


def init_detection(d_model: int, hidden: int, rng: np.random.Generator) -> dict[str, Tensor]:
    width = slot_feature_width(d_model)
    return {
        "emit.hidden.w": ag.seeded_init((width, hidden), width, hidden, rng),
        "emit.hidden.b": ag.zeros((hidden,)),
        # zero output layer: untrained emissions are exactly 0 (chance-level CRF)
        "emit.out.w": ag.zeros((hidden, N_TAGS)),
        "emit.out.b": ag.zeros((N_TAGS,)),
        "crf.trans": ag.zeros((N_TAGS, N_TAGS)),
        "crf.start": ag.zeros((N_TAGS,)),
        "crf.stop": ag.zeros((N_TAGS,)),
    }


def lattice_tags(lattices: Sequence[TagLattice]) -> np.ndarray:
    S = max(len(l.labels) for l in lattices)
    out = np.zeros((len(lattices), S), dtype=np.int64)
    for b, lat in enumerate(lattices):
        try:
            lat.validate()
        except LabelError as exc:
            raise DataError(str(exc)) from exc
        out[b, :len(lat.labels)] = [int(t) for t in lat.labels]
    return out


def detect_errors(src_ids, tgt_ids, model) -> tuple[AlignmentMatrix, TagLattice]:
    """Encode one pair, build slot emissions and Viterbi-decode the lattice."""
    out = model.detect_batch([list(src_ids)], [list(tgt_ids)])
    return out.alignments[0], out.lattices[0]
