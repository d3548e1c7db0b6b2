"""The composed proofreading model: shared encoder, CRF detector and span decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import EOS, SentencePair, Vocabulary, decode_ids, encode_ids
from .correction import (Correction, SpanBatch, TranslationMemory, TM_PRECEDENCE, apply_corrections,
                         decode_correction, init_decoder)
from .detection import (AlignmentMatrix, alignment_matrix, lexical_alignment, crf_from_params, crf_marginals, crf_viterbi,
                        emissions_from_features, init_detection, lattice_emission_mask, slot_features,
                        gap_unmatched, slot_feature_width, token_features)
from .encoder import ContextVectors, EncoderConfig, encode_batch, init_encoder, pad_batch
from .lattice import ErrorTag, TagLattice

PARAM_GROUPS = {
    "embeddings": ("emb.",),
    "cnn": ("cnn.k",),
    "transformer": ("enc",),
    "crf": ("crf.",),
    "gru": ("gru.",),
    "projections": ("cnn.proj", "emit.", "dec.", "align."),
}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    emit_hidden: int = 64
    dec_emb: int = 32
    dec_hidden: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


@dataclass
class Forward:
    src: ContextVectors
    tgt: ContextVectors
    align: AlignmentMatrix
    slots: Tensor               # (B, S, F)
    emissions: Tensor           # (B, S, T) with structural mask applied
    tgt_lengths: np.ndarray
    src_lengths: np.ndarray
    src_ids: np.ndarray | None = None   # (B, N) padded
    lex: AlignmentMatrix | None = None  # word-identity alignment, no context

    @property
    def slot_lengths(self) -> np.ndarray:
        return 2 * self.tgt_lengths + 1


@dataclass
class DetectionOutput:
    forward: Forward
    lattices: list[TagLattice]
    marginals: list[np.ndarray]
    alignments: list[AlignmentMatrix]


class ProofreadingModel:
    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: dict[str, Tensor]):
        self.config = config
        self.vocab = vocab
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, vocab: Vocabulary, seed: int) -> "ProofreadingModel":
        enc = config.encoder
        if enc.vocab_size != len(vocab):
            enc = EncoderConfig(**{**asdict(enc), "vocab_size": len(vocab)})
            config = ModelConfig(enc, config.emit_hidden, config.dec_emb, config.dec_hidden)
        rng = ag.make_rng(seed)
        params = init_encoder(enc, rng)
        params.update(init_detection(enc.d_model, config.emit_hidden, rng))
        params["align.lex"] = ag.zeros((len(vocab), len(vocab)))
        params.update(init_decoder(len(vocab), enc.d_model, slot_feature_width(enc.d_model),
                                   config.dec_emb, config.dec_hidden, rng))
        return cls(config, vocab, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def group_of(self, name: str) -> str:
        for group, prefixes in PARAM_GROUPS.items():
            if name.startswith(prefixes) and not (group == "cnn" and name.startswith("cnn.proj")):
                return group
        return "other"

    # ------------------------------------------------------------------

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return encode_ids(tokens, self.vocab)

    def forward(self, src_ids: Sequence[Sequence[int]], tgt_ids: Sequence[Sequence[int]],
                dropout: float = 0.0, rng: np.random.Generator | None = None) -> Forward:
        """Batched forward pass; ``dropout`` only acts when a generator is given (training)."""
        cfg = self.config.encoder
        s_ids, s_pad = pad_batch(src_ids)
        t_ids, t_pad = pad_batch(tgt_ids)
        src = encode_batch(s_ids, s_pad, cfg, self.params, dropout, rng)
        tgt = encode_batch(t_ids, t_pad, cfg, self.params, dropout, rng)
        align = alignment_matrix(src, tgt)
        # context-free word-to-word alignment from the lexical score table
        lex = lexical_alignment(self.params["align.lex"], s_ids, t_ids, t_pad)
        tgt_lengths = np.array([len(t) for t in tgt_ids])
        feats = token_features(src, tgt, align, lex)
        slots = slot_features(feats, tgt_lengths, gap_unmatched(align, s_pad, tgt_lengths))
        emissions = emissions_from_features(slots, self.params) + Tensor(lattice_emission_mask(tgt_lengths))
        return Forward(src, tgt, align, slots, emissions, tgt_lengths,
                       np.array([len(s) for s in src_ids]), s_ids, lex)

    def detect_batch(self, src_ids, tgt_ids) -> DetectionOutput:
        fwd = self.forward(src_ids, tgt_ids)
        crf = crf_from_params(self.params)
        lattices, marginals, aligns = [], [], []
        for b, m in enumerate(fwd.tgt_lengths):
            S = 2 * m + 1
            em = Tensor(fwd.emissions.data[b, :S])
            lattices.append(TagLattice([ErrorTag(t) for t in crf_viterbi(em, crf)]))
            marginals.append(crf_marginals(em, crf))
            n = fwd.src_lengths[b]
            aligns.append(AlignmentMatrix(Tensor(fwd.align.probs.data[b, :n, :m]),
                                          Tensor(fwd.align.scores.data[b, :n, :m])))
        return DetectionOutput(fwd, lattices, marginals, aligns)

    def span_batch(self, fwd: Forward, spans: Sequence[tuple[int, int]]) -> SpanBatch:
        """Decoder inputs for ``(sentence index, slot index)`` spans of a forward pass."""
        bs = np.array([b for b, _ in spans], dtype=np.int64)
        ss = np.array([s for _, s in spans], dtype=np.int64)
        context = ag.getitem(fwd.slots, (bs, ss))
        memory = ag.getitem(fwd.src.values, bs)
        pad = fwd.src.pad_mask[bs]
        probs = fwd.align.probs.data[bs]
        unmatched = 1.0 - probs.max(axis=-1)
        unmatched = np.where(pad, 0.0, unmatched)
        # token slots point at the source words aligned to them; gaps carry no anchor
        anchor = np.zeros_like(unmatched)
        tok = ss % 2 == 1
        if tok.any():
            col = probs[np.nonzero(tok)[0], :, ss[tok] // 2]
            anchor[tok] = np.where(pad[tok], 0.0, col)
        return SpanBatch(context, memory, pad, unmatched, fwd.src_ids[bs], anchor)

    # ------------------------------------------------------------------

    def predicted_links(self, align: AlignmentMatrix, min_prob: float = 0.5) -> list[tuple[int, int]]:
        p = align.probs.data
        out = []
        for i in range(p.shape[0]):
            j = int(np.argmax(p[i]))
            if p[i, j] >= min_prob:
                out.append((i, j))
        return out

    def detect(self, pairs: Sequence[SentencePair], batch_size: int = 64) -> list[TagLattice]:
        """Predicted lattices with per-slot marginal scores and pair ids."""
        out = []
        with ag.no_grad():
            for start in range(0, len(pairs), batch_size):
                chunk = pairs[start:start + batch_size]
                det = self.detect_batch([self.ids(p.source_tokens) for p in chunk],
                                        [self.ids(p.target_tokens) for p in chunk])
                for b, (pair, lat) in enumerate(zip(chunk, det.lattices)):
                    lat.id = pair.id
                    lat.scores = [float(det.marginals[b][s, int(t)]) for s, t in enumerate(lat.labels)]
                    out.append(lat)
        return out

    def proofread(self, pairs: Sequence[SentencePair], tm: TranslationMemory | None = None,
                  threshold: float = TM_PRECEDENCE, max_len: int = 4, batch_size: int = 64,
                  lattices: Sequence[TagLattice] | None = None):
        """Detect (unless ``lattices`` are given) and correct; returns lattices and corrections."""
        out_lattices: list[TagLattice] = []
        corrections: list[Correction] = []
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            det = self.detect_batch([self.ids(p.source_tokens) for p in chunk],
                                    [self.ids(p.target_tokens) for p in chunk])
            lats = det.lattices if lattices is None else list(lattices[start:start + batch_size])
            spans = [(b, s) for b, lat in enumerate(lats) for s, t in enumerate(lat.labels)
                     if t in (ErrorTag.REPLACEMENT, ErrorTag.OMISSION)]
            decoded = {}
            if spans:
                outs = decode_correction(self.span_batch(det.forward, spans), self.params, max_len)
                decoded = {sp: (decode_ids(ids, self.vocab), trunc) for sp, (ids, trunc) in zip(spans, outs)}
            for b, (pair, lat) in enumerate(zip(chunk, lats)):
                lat.id = pair.id
                lat.scores = [float(det.marginals[b][s, int(t)]) for s, t in enumerate(lat.labels)] \
                    if lattices is None else lat.scores
                links = self.predicted_links(det.alignments[b])
                corr = apply_corrections(pair.target_tokens, lat,
                                         decoder=lambda slot, b=b: decoded[(b, slot)], tm=tm,
                                         threshold=threshold, source=pair.source_tokens, links=links,
                                         id=pair.id)
                out_lattices.append(lat)
                corrections.append(corr)
        return out_lattices, corrections
