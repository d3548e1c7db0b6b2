"""Command-line entry point: ``proofkit <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 runtime failure.
Diagnostics go to stderr; results go to stdout or the ``--out`` files.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from collections import Counter
from dataclasses import fields
from pathlib import Path

from .corpus import (FilterSummary, IngestionError, SentencePair, build_vocab, preprocess, read_lines,
                     read_parallel, write_lines, write_parallel)
from .correction import TM_PRECEDENCE, ContractError, TranslationMemory
from .detection import DataError as DetectionDataError
from .evaluation import DataError as EvalDataError
from .evaluation import corpus_bleu, detection_metrics, render_report
from .lattice import TAGS, LabelError, lattice_from_record, read_jsonl, write_jsonl
from .training import (SWEEP_AXES, FormatError, TrainConfig, TrainingDiverged, load_checkpoint, sweep,
                       train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
DATA_ERRORS = (IngestionError, FormatError, DetectionDataError, EvalDataError, LabelError, ContractError,
               FileNotFoundError, IsADirectoryError, UnicodeDecodeError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# config resolution: flag > config file > default, key by key
# ---------------------------------------------------------------------------

FLAG_KEYS = {"epochs": "epochs", "batch_size": "batch_size", "lr": "learning_rate",
             "kernel_sizes": "kernel_sizes", "seed": "seed"}


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise IngestionError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(name: str, value, default):
    if name == "kernel_sizes":
        if isinstance(value, str):
            return [int(v) for v in value.split(",") if v.strip()]
        return [int(v) for v in value]
    if name == "checkpoint_path":
        return None if value in (None, "", "none", "None") else str(value)
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def resolve_config(args, extra_defaults: dict | None = None) -> tuple[TrainConfig, dict]:
    """Build the effective TrainConfig plus the remaining (non-training) settings."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    base = TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for name in known:
        default = getattr(base, name)
        value = file_values.get(name, default)
        values[name] = _coerce(name, value, default) if name in file_values else default
    if "lr" in file_values:
        values["learning_rate"] = float(file_values["lr"])
    for flag, name in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = _coerce(name, v, getattr(base, name))
    other = dict(extra_defaults or {})
    for key in other:
        if key in file_values:
            other[key] = _coerce(key, file_values[key], other[key])
        v = getattr(args, key, None)
        if v is not None:
            other[key] = v
    unknown = set(file_values) - known - set(other) - {"lr"}
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        return TrainConfig(**values), other
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def _read_labelled(prefix: str) -> list[SentencePair]:
    """``prefix.src``/``prefix.tgt`` plus the ``prefix.labels.jsonl`` gold records."""
    pairs = read_parallel(prefix + ".src", prefix + ".tgt", tokenizer=str.split)
    labels_path = Path(prefix + ".labels.jsonl")
    if labels_path.exists():
        recs = read_jsonl(labels_path)
        if len(recs) != len(pairs):
            raise IngestionError(f"{labels_path}: {len(recs)} records for {len(pairs)} pairs")
        for p, rec in zip(pairs, recs):
            lat = lattice_from_record(rec)
            if lat.n_tokens != len(p.target_tokens):
                raise LabelError(f"{labels_path}: record {rec.get('id')} has {lat.n_tokens} tokens, "
                                 f"target has {len(p.target_tokens)}")
            p.id = str(rec.get("id", p.id))
            p.gold_tags = lat.names()
            p.reference = rec.get("reference")
            if rec.get("alignment") is not None:
                p.alignment = [tuple(link) for link in rec["alignment"]]
    return pairs


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)


def _tag_summary(pairs, lattices, corrections, seconds: float, fmt: str) -> str:
    counts = Counter(t.name for lat in lattices for t in lat.labels)
    row = {"sentences": len(lattices),
           "changed": sum(c.corrected != p.target_tokens for p, c in zip(pairs, corrections))}
    row.update({name: counts.get(name, 0) for name in TAGS})
    row["truncated"] = sum(c.truncated for c in corrections)
    row["Computational Time (sec)"] = round(seconds, 6)
    return render_report([row], fmt)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .synthetic import ErrorSpec, corrupt_corpus, generate_toy_parallel, make_lexicon
    from .autograd import make_rng

    seed = args.seed if args.seed is not None else 0
    lexicon = make_lexicon(args.vocab_size)
    clean = generate_toy_parallel(args.n_pairs, args.vocab_size, make_rng(seed), lexicon)
    spec = ErrorSpec.uniform(args.corruption, max_errors_per_sentence=args.max_errors, seed=seed + 1)
    corrupted, lattices = corrupt_corpus(clean, spec, lexicon.target_words)
    prefix = args.out
    write_parallel(prefix, corrupted)
    write_lines(prefix + ".ref.tgt", [" ".join(p.reference) for p in corrupted])
    records = []
    for p, lat in zip(corrupted, lattices):
        lat.id = p.id
        rec = lat.to_record(p.reference)
        rec["alignment"] = [list(link) for link in p.alignment]
        records.append(rec)
    write_jsonl(prefix + ".labels.jsonl", records)
    _err(f"wrote {len(corrupted)} pairs to {prefix}.src/.tgt/.ref.tgt/.labels.jsonl")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    pairs = read_parallel(args.src, args.tgt)
    summary = FilterSummary()
    kept = preprocess(pairs, max_len=args.max_len if args.max_len is not None else 64, summary=summary)
    write_parallel(args.out, kept)
    vocab = build_vocab([p.source_tokens for p in kept] + [p.target_tokens for p in kept])
    vocab.save(args.out + ".vocab")
    _err(json.dumps({"seen": summary.seen, "kept": summary.kept, "dropped": dict(sorted(summary.dropped.items()))}))
    return EXIT_OK


def cmd_tm_build(args) -> int:
    pairs = read_parallel(args.src, args.tgt)
    seen, kept = set(), []
    for p in pairs:
        key = tuple(p.source_tokens)
        if key not in seen:
            seen.add(key)
            kept.append(p)
    write_parallel(args.out, kept)
    _err(f"translation memory: {len(kept)} entries ({len(pairs) - len(kept)} duplicate sources dropped)")
    return EXIT_OK


def cmd_train(args) -> int:
    config, _ = resolve_config(args)
    if args.checkpoint:
        config.checkpoint_path = args.checkpoint
    train_pairs = _read_labelled(args.data)
    dev_pairs = _read_labelled(args.dev)
    log_lines = []

    def on_epoch(rec):
        log_lines.append(rec.to_json())
        _err(rec.to_json())

    result = train(config, train_pairs, dev_pairs, on_epoch=on_epoch)
    _emit("".join(line + "\n" for line in log_lines), args.out)
    _err(f"best epoch {result.best_epoch}, dev F1 {result.best_dev_f1:.4f}")
    return EXIT_OK


def _load_inputs(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model = load_checkpoint(args.checkpoint)
    pairs = read_parallel(args.src, args.tgt, tokenizer=str.split)
    return model, pairs


def cmd_detect(args) -> int:
    model, pairs = _load_inputs(args)
    lattices = model.detect(pairs)
    text = "".join(json.dumps(lat.to_record(), ensure_ascii=False) + "\n" for lat in lattices)
    _emit(text, args.out)
    return EXIT_OK


def _write_corrections(prefix: str | None, pairs, lattices, corrections, seconds: float, fmt: str) -> None:
    corrected = "".join(" ".join(c.corrected) + "\n" for c in corrections)
    edits = "".join(json.dumps(c.to_record(), ensure_ascii=False) + "\n" for c in corrections)
    summary = _tag_summary(pairs, lattices, corrections, seconds, fmt)
    if prefix is None:
        sys.stdout.write(corrected)
        _err(summary.rstrip("\n"))
        return
    Path(prefix + ".tgt").write_text(corrected, encoding="utf-8", newline="\n")
    Path(prefix + ".edits.jsonl").write_text(edits, encoding="utf-8", newline="\n")
    Path(prefix + ".summary." + fmt).write_text(summary, encoding="utf-8", newline="\n")


def _threshold(extra) -> float:
    t = float(extra["threshold"])
    if not 0.0 <= t <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    return t


def _tm(extra):
    path = extra.get("tm")
    if not path:
        return None
    return TranslationMemory.load(path + ".src", path + ".tgt")


def cmd_correct(args) -> int:
    _, extra = resolve_config(args, {"threshold": TM_PRECEDENCE, "max_len": 4, "tm": None})
    model, pairs = _load_inputs(args)
    recs = read_jsonl(args.labels)
    if len(recs) != len(pairs):
        raise IngestionError(f"{args.labels}: {len(recs)} records for {len(pairs)} pairs")
    lattices = [lattice_from_record(r) for r in recs]
    t0 = time.perf_counter()
    lattices, corrections = model.proofread(pairs, _tm(extra), _threshold(extra),
                                            max_len=extra["max_len"], lattices=lattices)
    _write_corrections(args.out, pairs, lattices, corrections, time.perf_counter() - t0, args.format)
    return EXIT_OK


def cmd_proofread(args) -> int:
    _, extra = resolve_config(args, {"threshold": TM_PRECEDENCE, "max_len": 4, "tm": None})
    model, pairs = _load_inputs(args)
    t0 = time.perf_counter()
    lattices, corrections = model.proofread(pairs, _tm(extra), _threshold(extra),
                                            max_len=extra["max_len"])
    seconds = time.perf_counter() - t0
    if args.out:
        write_jsonl(args.out + ".labels.jsonl", [lat.to_record() for lat in lattices])
    _write_corrections(args.out, pairs, lattices, corrections, seconds, args.format)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    hyps = [line.split() for line in read_lines(args.hyp)]
    refs = [line.split() for line in read_lines(args.ref)]
    if len(hyps) != len(refs):
        raise IngestionError(f"{args.hyp} has {len(hyps)} lines, {args.ref} has {len(refs)}")
    res = corpus_bleu(hyps, [[r] for r in refs])
    row = {"metric": "corpus", "BLEU": round(100 * res.bleu, 2), "BP": round(100 * res.brevity_penalty, 2)}
    for n, p in enumerate(res.precisions, 1):
        row[f"P{n} (%)"] = round(100 * p, 2)
    row["hyp_length"] = res.hyp_length
    row["ref_length"] = res.ref_length
    rows = [row]
    if args.labels and args.gold:
        pred = [lattice_from_record(r) for r in read_jsonl(args.labels)]
        gold = [lattice_from_record(r) for r in read_jsonl(args.gold)]
        rep = detection_metrics(pred, gold)
        rows.append({"metric": "detection", "Precision (%)": round(100 * rep.precision, 2),
                     "Recall (%)": round(100 * rep.recall, 2), "F1-Score (%)": round(100 * rep.f1, 2),
                     "Accuracy (%)": round(100 * rep.accuracy, 2)})
    if args.format == "tsv":
        text = "".join(render_report([r], "tsv") for r in rows)
    else:
        text = render_report(rows, "json")
    _emit(text, args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    config, _ = resolve_config(args)
    axis = args.axis
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be a comma list of integers: {exc}") from exc
    if not values:
        raise UsageError("--values needs at least one value")
    train_pairs = _read_labelled(args.data)
    dev_pairs = _read_labelled(args.dev)
    rows, _ = sweep(axis, values, config, train_pairs, dev_pairs)
    _emit(render_report(rows, args.format), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p, *names):
    if "seed" in names:
        p.add_argument("--seed", type=int, help="random seed (overrides the config file)")
    if "config" in names:
        p.add_argument("--config", help="flat 'key = value' config file; flags take precedence")
    if "train" in names:
        p.add_argument("--epochs", type=int, help="maximum training epochs")
        p.add_argument("--batch-size", dest="batch_size", type=int, help="mini-batch size")
        p.add_argument("--kernel-sizes", dest="kernel_sizes", help="comma list of CNN kernel sizes, e.g. 1,3,5")
        p.add_argument("--lr", type=float, help="learning rate")
    if "model" in names:
        p.add_argument("--checkpoint", help="checkpoint file written by 'train'")
        p.add_argument("--src", required=True, help="source sentences (.src, whitespace tokenized)")
        p.add_argument("--tgt", required=True, help="target sentences to proofread (.tgt)")
    if "correct" in names:
        p.add_argument("--tm", help="translation memory prefix (PREFIX.src / PREFIX.tgt)")
        p.add_argument("--threshold", type=float, help=f"TM similarity threshold (default {TM_PRECEDENCE})")
        p.add_argument("--max-len", dest="max_len", type=int, help="maximum tokens generated per span (default 4)")
    if "format" in names:
        p.add_argument("--format", choices=("tsv", "json"), default="tsv", help="report format (default tsv)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proofkit", description="Translation error detection and correction at desk scale.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic corrupted corpus with gold labels")
    _common(p, "seed")
    p.add_argument("--n-pairs", dest="n_pairs", type=int, default=2000, help="number of sentence pairs")
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=60, help="source lexicon size")
    p.add_argument("--corruption", type=float, default=0.3, help="summed error rate over the four kinds")
    p.add_argument("--max-errors", dest="max_errors", type=int, default=1, help="edit attempts per sentence")
    p.add_argument("--out", required=True, help="output prefix (PREFIX.src, .tgt, .ref.tgt, .labels.jsonl)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", help="tokenize, truecase and filter a parallel corpus")
    p.add_argument("--src", required=True, help="raw source text")
    p.add_argument("--tgt", required=True, help="raw target text")
    p.add_argument("--max-len", dest="max_len", type=int, help="maximum tokens per side (default 64)")
    p.add_argument("--out", required=True, help="output prefix (PREFIX.src, .tgt, .vocab)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("tm-build", help="build a translation memory from a clean parallel corpus")
    p.add_argument("--src", required=True, help="source text")
    p.add_argument("--tgt", required=True, help="target text")
    p.add_argument("--out", required=True, help="output prefix (PREFIX.src, PREFIX.tgt)")
    p.set_defaults(func=cmd_tm_build)

    p = sub.add_parser("train", help="train the joint model")
    _common(p, "seed", "config", "train")
    p.add_argument("--data", required=True, help="training prefix (PREFIX.src/.tgt/.labels.jsonl)")
    p.add_argument("--dev", required=True, help="dev prefix used for early stopping")
    p.add_argument("--checkpoint", required=True, help="checkpoint file to write")
    p.add_argument("--out", help="epoch log (JSON lines); stdout when omitted")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="tag translation errors; writes JSON-lines lattices")
    _common(p, "model")
    p.add_argument("--out", help="labels file; stdout when omitted")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("correct", help="apply corrections for given labels")
    _common(p, "config", "model", "correct", "format")
    p.add_argument("--labels", required=True, help="labels file from 'detect'")
    p.add_argument("--out", help="output prefix (PREFIX.tgt, .edits.jsonl, .summary.FORMAT)")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("proofread", help="detect and correct in one pass")
    _common(p, "config", "model", "correct", "format")
    p.add_argument("--out", help="output prefix (PREFIX.tgt, .labels.jsonl, .edits.jsonl, .summary.FORMAT)")
    p.set_defaults(func=cmd_proofread)

    p = sub.add_parser("evaluate", help="corpus BLEU and optional detection metrics")
    _common(p, "format")
    p.add_argument("--hyp", required=True, help="hypothesis .tgt file")
    p.add_argument("--ref", required=True, help="reference .tgt file")
    p.add_argument("--labels", help="predicted labels (JSON lines)")
    p.add_argument("--gold", help="gold labels (JSON lines)")
    p.add_argument("--out", help="report file; stdout when omitted")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train one model per value and report a table")
    _common(p, "seed", "config", "train", "format")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES, help="swept hyperparameter")
    p.add_argument("--values", required=True, help="comma list of values, e.g. 1,3,4,5")
    p.add_argument("--data", required=True, help="training prefix")
    p.add_argument("--dev", required=True, help="evaluation prefix")
    p.add_argument("--out", help="report file; stdout when omitted")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        _err(parser.format_help().rstrip("\n"))
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _err(str(exc))
        _err(parser.format_usage().rstrip("\n"))
        return EXIT_USAGE
    except SystemExit as exc:          # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if getattr(args, "func", None) is None:
        _err(parser.format_help().rstrip("\n"))
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        _err(f"usage error: {exc}")
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    except TrainingDiverged as exc:
        _err(f"training diverged: {exc}")
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        _err(f"runtime failure: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
