"""Joint training of encoder, CRF detector and span decoder; sweeps and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import EOS, SentencePair, Vocabulary, build_vocab
from .correction import correction_loss, gold_fills
from .detection import DataError, crf_from_params, crf_nll_batch, lattice_tags, link_indicator
from .encoder import EncoderConfig
from .evaluation import MetricReport, detection_metrics, render_report, report_rows
from .lattice import TagLattice
from .model import ModelConfig, ProofreadingModel

logger = logging.getLogger(__name__)

MAGIC = b"PROOFKIT1"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Checkpoint bytes are not a valid checkpoint."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: "ProofreadingModel | None"):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 0.003
    momentum: float = 0.9
    optimizer: str = "adam"
    lambda_align: float = 1.0
    lambda_crf: float = 1.0
    lambda_corr: float = 1.0
    kernel_sizes: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    filters_per_kernel: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_k: int = 16
    d_ff: int = 128
    max_len: int = 64
    emit_hidden: int = 64
    dec_emb: int = 32
    dec_hidden: int = 64
    patience: int = 10
    max_grad_norm: float = 5.0
    dropout: float = 0.1
    weight_decay: float = 0.0
    min_freq: int = 1
    checkpoint_path: str | None = None

    def __post_init__(self):
        if isinstance(self.kernel_sizes, (int, np.integer)):
            self.kernel_sizes = [int(self.kernel_sizes)]
        self.kernel_sizes = [int(k) for k in self.kernel_sizes]
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        lams = (self.lambda_align, self.lambda_crf, self.lambda_corr)
        if any(l < 0 for l in lams) or not any(l > 0 for l in lams):
            raise ValueError("loss weights must be >= 0 with at least one > 0")

    def model_config(self, vocab_size: int) -> ModelConfig:
        enc = EncoderConfig(vocab_size=vocab_size, kernel_sizes=list(self.kernel_sizes),
                            filters_per_kernel=self.filters_per_kernel, d_model=self.d_model,
                            n_layers=self.n_layers, n_heads=self.n_heads, d_k=self.d_k,
                            d_ff=self.d_ff, max_len=self.max_len)
        return ModelConfig(enc, self.emit_hidden, self.dec_emb, self.dec_hidden)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# batches and the joint loss
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    pairs: list[SentencePair]
    src_ids: list[list[int]]
    tgt_ids: list[list[int]]
    lattices: list[TagLattice] | None
    fills: list[dict[int, list[str]]] | None


def make_batch(pairs: Sequence[SentencePair], model: ProofreadingModel) -> Batch:
    lattices = fills = None
    if all(p.gold_tags is not None for p in pairs):
        lattices = [TagLattice(p.gold_tags, id=p.id) for p in pairs]
    if lattices is not None and all(p.reference is not None for p in pairs):
        fills = [gold_fills(p.target_tokens, lat, p.reference) for p, lat in zip(pairs, lattices)]
    return Batch(list(pairs), [model.ids(p.source_tokens) for p in pairs],
                 [model.ids(p.target_tokens) for p in pairs], lattices, fills)


@dataclass
class LossParts:
    total: Tensor
    align: float
    crf: float
    corr: float


def joint_loss(batch: Batch, model: ProofreadingModel, config: TrainConfig,
               rng: np.random.Generator | None = None) -> LossParts:
    """``λ_align·L_align + λ_crf·L_crf + λ_corr·L_corr``, each averaged over its own count.

    Alignment is averaged per gold link (contextual and lexical alignments
    both supervised), the CRF term per sequence and the correction term per
    supervised token (EOS included).
    """
    fwd = model.forward(batch.src_ids, batch.tgt_ids, config.dropout, rng)
    zero = Tensor(np.array(0.0))
    total = zero
    la = lc = lr = 0.0
    if config.lambda_align > 0:
        if any(p.alignment is None for p in batch.pairs):
            raise DataError("lambda_align > 0 but a pair has no gold alignment")
        y = np.zeros(fwd.align.probs.shape)
        for b, p in enumerate(batch.pairs):
            y[b] = link_indicator(y.shape[1:], p.alignment)
        n_links = max(1.0, float(y.sum()))
        term = ag.cross_entropy(y, fwd.align.probs) * (1.0 / n_links)
        if fwd.lex is not None:
            term = term + ag.cross_entropy(y, fwd.lex.probs) * (1.0 / n_links)
        la = term.item()
        total = total + term * config.lambda_align
    if config.lambda_crf > 0:
        if batch.lattices is None:
            raise DataError("lambda_crf > 0 but a pair has no gold tags")
        for lat, m in zip(batch.lattices, fwd.tgt_lengths):
            if lat.n_tokens != m:
                raise DataError(f"pair {lat.id}: {lat.n_tokens} tagged tokens vs {m} target tokens")
        tags = lattice_tags(batch.lattices)
        nll = crf_nll_batch(fwd.emissions, tags, crf_from_params(model.params), fwd.slot_lengths)
        term = ag.tsum(nll) * (1.0 / len(batch.pairs))
        lc = term.item()
        total = total + term * config.lambda_crf
    if config.lambda_corr > 0:
        if batch.fills is None:
            raise DataError("lambda_corr > 0 but a pair has no reference/gold tags")
        spans, targets = [], []
        for b, fill in enumerate(batch.fills):
            for slot in sorted(fill):
                spans.append((b, slot))
                targets.append(model.ids(fill[slot]) + [EOS])
        if spans:
            nll, count = correction_loss(model.span_batch(fwd, spans), targets, model.params)
            term = nll * (1.0 / count)
            lr = term.item()
            total = total + term * config.lambda_corr
    return LossParts(total, la, lc, lr)


# ---------------------------------------------------------------------------
# optimisation loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_align: float
    loss_crf: float
    loss_corr: float
    dev_f1: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    model: ProofreadingModel
    log: list[EpochRecord]
    best_epoch: int
    best_dev_f1: float
    metrics: dict

    def log_lines(self, include_time: bool = True) -> list[str]:
        out = []
        for rec in self.log:
            d = asdict(rec)
            if not include_time:
                d.pop("seconds")
            out.append(json.dumps(d))
        return out


def evaluate_detection(model: ProofreadingModel, pairs: Sequence[SentencePair], batch_size: int = 128
                       ) -> tuple[MetricReport, list[TagLattice]]:
    preds, probs = [], []
    with ag.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            det = model.detect_batch([model.ids(p.source_tokens) for p in chunk],
                                     [model.ids(p.target_tokens) for p in chunk])
            preds.extend(det.lattices)
            probs.extend(det.marginals)
    gold = [TagLattice(p.gold_tags, id=p.id) for p in pairs]
    return detection_metrics(preds, gold, probs), preds


def corpus_vocab(pairs: Sequence[SentencePair], min_freq: int = 1) -> Vocabulary:
    lists = []
    for p in pairs:
        lists.append(p.source_tokens)
        lists.append(p.target_tokens)
        if p.reference:
            lists.append(p.reference)
    return build_vocab(lists, min_freq=min_freq)


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def train(config: TrainConfig, train_pairs: Sequence[SentencePair], dev_pairs: Sequence[SentencePair],
          vocab: Vocabulary | None = None, clock: Callable[[], float] = time.perf_counter,
          on_epoch: Callable[[EpochRecord], None] | None = None,
          on_batch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Mini-batch Adam (or SGD with momentum) on the joint loss; early stop on dev F1.

    The returned model holds the parameters of the best dev epoch. ``on_batch``
    receives ``(epoch, batch loss)`` after every finite batch.
    """
    if not train_pairs or not dev_pairs:
        raise ValueError("train and dev splits must be non-empty")
    vocab = vocab or corpus_vocab(list(train_pairs) + list(dev_pairs), config.min_freq)
    rng = ag.make_rng(config.seed)
    model = ProofreadingModel.create(config.model_config(len(vocab)), vocab, seed=int(rng.integers(2 ** 62)))
    params = model.parameters()
    state: dict = {}
    best = _snapshot(model.params)
    best_f1, best_epoch, stale = -1.0, -1, 0
    log: list[EpochRecord] = []
    n = len(train_pairs)
    for epoch in range(config.epochs):
        t0 = clock()
        order = rng.permutation(n)
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, n, config.batch_size):
            chunk = [train_pairs[k] for k in order[start:start + config.batch_size]]
            parts = joint_loss(make_batch(chunk, model), model, config, rng)
            value = parts.total.item()
            if not math.isfinite(value):
                last = _restore(model, best)
                if config.checkpoint_path:
                    save_checkpoint(last, config.checkpoint_path, config, {"diverged_epoch": epoch})
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}", last)
            if on_batch is not None:
                on_batch(epoch, value)
            ag.backward(parts.total)
            if config.max_grad_norm > 0:
                ag.clip_grad_norm(params, config.max_grad_norm)
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                if config.weight_decay > 0 and p.data.ndim > 1:
                    p.grad += config.weight_decay * p.data
            if config.optimizer == "adam":
                ag.adam_step(params, config.learning_rate, state)
            else:
                ag.sgd_step(params, config.learning_rate, config.momentum, state)
            sums += (value, parts.align, parts.crf, parts.corr)
            n_batches += 1
        report, _ = evaluate_detection(model, dev_pairs)
        means = sums / max(1, n_batches)
        rec = EpochRecord(epoch, *[float(x) for x in means], float(report.f1), float(clock() - t0))
        log.append(rec)
        logger.info("epoch %d loss %.4f dev_f1 %.4f", epoch, rec.loss_total, rec.dev_f1)
        if on_epoch is not None:
            on_epoch(rec)
        if report.f1 > best_f1:
            best_f1, best_epoch, stale = report.f1, epoch, 0
            best = _snapshot(model.params)
        else:
            stale += 1
            if stale >= config.patience:
                break
    final = _restore(model, best)
    metrics = {"best_epoch": best_epoch, "best_dev_f1": best_f1, "epochs_run": len(log)}
    if config.checkpoint_path:
        save_checkpoint(final, config.checkpoint_path, config, metrics)
    return TrainResult(final, log, best_epoch, best_f1, metrics)


def _restore(model: ProofreadingModel, snap: dict[str, np.ndarray]) -> ProofreadingModel:
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in snap.items()}
    return ProofreadingModel(model.config, model.vocab, params)


# ---------------------------------------------------------------------------
# desk-scale data
# ---------------------------------------------------------------------------


@dataclass
class DeskSplits:
    train: list[SentencePair]
    dev: list[SentencePair]
    test: list[SentencePair]
    lexicon: object


def desk_corpus(n_pairs: int = 2000, vocab_size: int = 60, corruption: float = 0.3, held_out: int = 200,
                dev: int = 200, seed: int = 0, max_errors: int = 1) -> DeskSplits:
    """Synthetic corrupted corpus split into train / early-stopping dev / held-out test.

    ``corruption`` is the summed per-attempt error rate, spread evenly over
    the four error kinds.
    """
    from .synthetic import ErrorSpec, corrupt_corpus, generate_toy_parallel, make_lexicon

    if held_out + dev >= n_pairs:
        raise ValueError("held_out + dev must leave training pairs")
    lexicon = make_lexicon(vocab_size)
    clean = generate_toy_parallel(n_pairs, vocab_size, ag.make_rng(seed), lexicon)
    corrupted, _ = corrupt_corpus(clean, ErrorSpec.uniform(corruption, max_errors_per_sentence=max_errors,
                                                           seed=seed + 1), lexicon.target_words)
    n_train = n_pairs - held_out - dev
    return DeskSplits(corrupted[:n_train], corrupted[n_train:n_train + dev], corrupted[n_train + dev:], lexicon)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("kernel_size", "batch_size")


def sweep(axis: str, values: Sequence, base: TrainConfig, train_pairs, dev_pairs,
          clock: Callable[[], float] = time.perf_counter) -> tuple[list[dict], list[MetricReport]]:
    """Train one model per value (seed ``base.seed + index``); one report row each."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ValueError("sweep needs at least one value")
    reports = []
    for idx, value in enumerate(values):
        if axis == "kernel_size":
            cfg = replace(base, kernel_sizes=list(value) if isinstance(value, (list, tuple)) else [int(value)])
        else:
            cfg = replace(base, batch_size=int(value))
        cfg = replace(cfg, seed=base.seed + idx, checkpoint_path=None)
        t0 = clock()
        result = train(cfg, train_pairs, dev_pairs, clock=clock)
        report, _ = evaluate_detection(result.model, dev_pairs)
        report.wall_clock_seconds = float(clock() - t0)
        reports.append(report)
    return report_rows(axis, values, reports), reports


def render_sweep(axis: str, values, reports, format: str = "tsv") -> str:
    return render_report(report_rows(axis, values, reports), format)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_bytes(model: ProofreadingModel, config: TrainConfig | dict | None = None,
                     metrics: dict | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, t in model.params.items():
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        offset += t.data.size
    cfg = config.to_dict() if isinstance(config, TrainConfig) else (config or {})
    header = {
        "manifest": manifest,
        "model": model.config.to_dict(),
        "vocab": model.vocab.itos,
        "config": cfg,
        "metrics": metrics or {},
    }
    blob = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(blob)), blob, *chunks])


def save_checkpoint(model: ProofreadingModel, path, config=None, metrics=None) -> None:
    data = checkpoint_bytes(model, config, metrics)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> ProofreadingModel:
    """Read a checkpoint; the header is attached as ``model.checkpoint_header``."""
    data = Path(path).read_bytes()
    return model_from_bytes(data)


def model_from_bytes(data: bytes) -> ProofreadingModel:
    head = len(MAGIC) + struct.calcsize("<IQ")
    if len(data) < head or data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if len(data) < head + hlen:
        raise FormatError("checkpoint truncated inside header")
    try:
        header = json.loads(data[head:head + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    payload = np.frombuffer(data[head + hlen:], dtype="<f8") if (len(data) - head - hlen) % 8 == 0 else None
    if payload is None:
        raise FormatError("checkpoint payload is not a whole number of float64 values")
    expected = sum(int(np.prod(e["shape"])) for e in header["manifest"])
    if payload.size != expected:
        raise FormatError(f"checkpoint payload has {payload.size} values, manifest needs {expected}")
    vocab = Vocabulary(header["vocab"][4:])
    mconf = ModelConfig.from_dict(header["model"])
    reference = ProofreadingModel.create(mconf, vocab, seed=0)
    params: dict[str, Tensor] = {}
    for e in header["manifest"]:
        size = int(np.prod(e["shape"]))
        arr = payload[e["offset"]:e["offset"] + size].astype(np.float64).reshape(e["shape"])
        ref = reference.params.get(e["name"])
        if ref is None or ref.shape != tuple(e["shape"]):
            raise FormatError(f"parameter {e['name']} shape {e['shape']} does not match the model")
        params[e["name"]] = Tensor(arr.copy(), requires_grad=True)
    if set(params) != set(reference.params):
        raise FormatError("checkpoint manifest does not cover every model parameter")
    model = ProofreadingModel(mconf, vocab, {k: params[k] for k in reference.params})
    model.checkpoint_header = header
    return model
