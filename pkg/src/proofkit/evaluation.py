"""BLEU, slot-level detection metrics, probability error metrics and table reports."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lattice import ErrorTag, TagLattice, TAGS


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


@dataclass
class BleuResult:
    bleu: float
    brevity_penalty: float
    precisions: list[float]
    hyp_length: int
    ref_length: int
    matches: list[int] = field(default_factory=list)
    totals: list[int] = field(default_factory=list)
    zero_order: int | None = None       # first n with p_n == 0 (unsmoothed), 1-based
    empty_hypothesis: bool = False


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_ngram_precision(hyp: Sequence[str], refs: Sequence[Sequence[str]], n: int) -> tuple[int, int]:
    """Clipped n-gram matches and hypothesis n-gram total."""
    if n < 1:
        raise ValueError("n must be >= 1")
    counts = _ngrams(hyp, n)
    if not counts:
        return 0, 0
    max_ref: Counter = Counter()
    for ref in refs:
        for gram, c in _ngrams(ref, n).items():
            if c > max_ref[gram]:
                max_ref[gram] = c
    clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
    return clipped, sum(counts.values())


def closest_ref_length(hyp_len: int, refs: Sequence[Sequence[str]]) -> int:
    return min((len(r) for r in refs), key=lambda r: (abs(r - hyp_len), r))


def _combine(matches, totals, c: int, r: int, weights, smooth: bool) -> BleuResult:
    N = len(weights)
    precisions, zero = [], None
    for n in range(N):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            p = (m + 1) / (t + 1)
        else:
            p = m / t if t else 0.0
        if p == 0 and zero is None:
            zero = n + 1
        precisions.append(p)
    if c == 0:
        return BleuResult(0.0, 0.0, precisions, c, r, list(matches), list(totals), zero, True)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    if zero is not None:
        return BleuResult(0.0, bp, precisions, c, r, list(matches), list(totals), zero)
    score = bp * math.exp(math.fsum(w * math.log(p) for w, p in zip(weights, precisions)))
    return BleuResult(min(score, 1.0), bp, precisions, c, r, list(matches), list(totals))


def bleu_score(hyp: Sequence[str], refs: Sequence[Sequence[str]], N: int = 4,
               weights: Sequence[float] | None = None, smooth: bool = False) -> BleuResult:
    """Sentence BLEU: brevity penalty times the weighted geometric mean of p_1..p_N."""
    if not refs:
        raise ValueError("bleu_score needs at least one reference")
    weights = list(weights) if weights is not None else [1.0 / N] * N
    stats = [modified_ngram_precision(hyp, refs, n) for n in range(1, N + 1)]
    return _combine([s[0] for s in stats], [s[1] for s in stats], len(hyp),
                    closest_ref_length(len(hyp), refs), weights, smooth)


def corpus_bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[Sequence[str]]], N: int = 4,
                weights: Sequence[float] | None = None, smooth: bool = False) -> BleuResult:
    """Corpus BLEU: n-gram counts and lengths summed over segments before the ratios."""
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses vs {len(refs)} reference sets")
    weights = list(weights) if weights is not None else [1.0 / N] * N
    matches, totals = [0] * N, [0] * N
    c = r = 0
    for hyp, rs in zip(hyps, refs):
        for n in range(1, N + 1):
            m, t = modified_ngram_precision(hyp, rs, n)
            matches[n - 1] += m
            totals[n - 1] += t
        c += len(hyp)
        r += closest_ref_length(len(hyp), rs)
    return _combine(matches, totals, c, r, weights, smooth)


# ---------------------------------------------------------------------------
# detection metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    accuracy: float = 0.0
    rmse: float = 0.0
    mse: float = 0.0
    mae: float = 0.0
    counts: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "accuracy": self.accuracy, "rmse": self.rmse, "mse": self.mse, "mae": self.mae,
                "counts": self.counts, "wall_clock_seconds": self.wall_clock_seconds}


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _labels(lat) -> list[int]:
    if isinstance(lat, TagLattice):
        return [int(t) for t in lat.labels]
    return [int(ErrorTag.parse(t)) if isinstance(t, str) else int(t) for t in lat]


def detection_metrics(predicted: Sequence, gold: Sequence, probabilities: Sequence[np.ndarray] | None = None
                      ) -> MetricReport:
    """Micro P/R/F1 over non-OK slots (exact tag match), slot accuracy, per-tag counts.

    When ``probabilities`` (per-slot tag distributions) are given, RMSE/MSE/MAE
    are filled from them; otherwise from one-hot predictions.
    """
    if len(predicted) != len(gold):
        raise DataError(f"{len(predicted)} predicted vs {len(gold)} gold lattices")
    T = len(TAGS)
    per_tag = {t: {"TP": 0, "FP": 0, "FN": 0, "TN": 0} for t in TAGS}
    tp = fp = fn = 0
    correct = total = 0
    prob_rows, gold_rows = [], []
    for k, (p_lat, g_lat) in enumerate(zip(predicted, gold)):
        p, g = _labels(p_lat), _labels(g_lat)
        if len(p) != len(g):
            pid = getattr(g_lat, "id", "") or getattr(p_lat, "id", "") or str(k)
            raise DataError(f"pair {pid}: {len(p)} predicted slots vs {len(g)} gold slots")
        for a, b in zip(p, g):
            total += 1
            correct += a == b
            if a != 0 and a == b:
                tp += 1
            else:
                fp += a != 0
                fn += b != 0
            for t in range(T):
                cell = per_tag[TAGS[t]]
                if a == t and b == t:
                    cell["TP"] += 1
                elif a == t:
                    cell["FP"] += 1
                elif b == t:
                    cell["FN"] += 1
                else:
                    cell["TN"] += 1
        if probabilities is not None:
            prob_rows.append(np.asarray(probabilities[k], dtype=float))
        else:
            prob_rows.append(np.eye(T)[p])
        gold_rows.append(np.eye(T)[g])
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    rmse, mse, mae = regression_errors(np.concatenate(prob_rows) if prob_rows else np.zeros((0, T)),
                                       np.concatenate(gold_rows) if gold_rows else np.zeros((0, T)))
    counts = {"micro": {"TP": tp, "FP": fp, "FN": fn}, "per_tag": per_tag}
    return MetricReport(precision, recall, f1_score(precision, recall),
                        correct / total if total else 0.0, rmse, mse, mae, counts)


def regression_errors(pred: np.ndarray, gold: np.ndarray) -> tuple[float, float, float]:
    """Elementwise errors of tag distributions vs one-hot gold, averaged over slots and tags."""
    pred = np.asarray(pred, dtype=float)
    gold = np.asarray(gold, dtype=float)
    if pred.shape != gold.shape:
        raise DataError(f"prediction shape {pred.shape} vs gold {gold.shape}")
    if pred.size == 0:
        return 0.0, 0.0, 0.0
    diff = pred - gold
    mse = float(np.mean(diff * diff))
    return math.sqrt(mse), mse, float(np.mean(np.abs(diff)))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("Precision (%)", "Recall (%)", "F1-Score (%)", "Accuracy (%)",
                  "RMSE (%)", "MSE (%)", "MAE (%)")
TIME_COLUMN = "Computational Time (sec)"
ROW_LABELS = {
    "kernel_size": "Conv. Kernel size= {}",
    "batch_size": "Batch Normalization (BN) = {}",
}


def row_label(axis: str, value) -> str:
    if isinstance(value, (list, tuple)):
        value = ",".join(str(v) for v in value)
    return ROW_LABELS.get(axis, axis + "= {}").format(value)


def report_rows(axis: str, values: Sequence, reports: Sequence[MetricReport]) -> list[dict]:
    """Rows with the label column first, metrics as percentages (2 dp) and seconds (6 dp)."""
    rows = []
    for v, r in zip(values, reports):
        pct = (r.precision, r.recall, r.f1, r.accuracy, r.rmse, r.mse, r.mae)
        row = {axis: row_label(axis, v)}
        row.update({col: round(100.0 * x, 2) for col, x in zip(METRIC_COLUMNS, pct)})
        row[TIME_COLUMN] = round(r.wall_clock_seconds, 6)
        rows.append(row)
    return rows


def render_report(rows: Sequence[dict], format: str = "tsv") -> str:
    if format == "json":
        return json.dumps(list(rows), indent=2, ensure_ascii=False) + "\n"
    if format != "tsv":
        raise ValueError(f"unknown report format {format!r}")
    if not rows:
        return ""
    header = list(rows[0].keys())
    lines = ["\t".join(header)]
    for row in rows:
        cells = []
        for col in header:
            v = row[col]
            if col == TIME_COLUMN:
                cells.append(f"{v:.6f}")
            elif isinstance(v, float):
                cells.append(f"{v:.2f}")
            else:
                cells.append(str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def parse_tsv(text: str) -> list[dict]:
    lines = text.rstrip("\n").split("\n")
    header = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        cells = line.split("\t")
        row = {}
        for col, cell in zip(header, cells):
            try:
                row[col] = float(cell)
            except ValueError:
                row[col] = cell
        out.append(row)
    return out
