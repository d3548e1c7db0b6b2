import json
import math
import statistics

import numpy as np
import pytest

from proofkit import autograd as ag
from proofkit import training
from proofkit.detection import DataError
from proofkit.lattice import TagLattice
from proofkit.model import PARAM_GROUPS
from proofkit.training import (
    FORMAT_VERSION, MAGIC, FormatError, TrainConfig, TrainingDiverged, checkpoint_bytes, corpus_vocab,
    desk_corpus, evaluate_detection, joint_loss, load_checkpoint, make_batch, model_from_bytes,
    save_checkpoint, sweep, train,
)
from proofkit.model import ProofreadingModel

TINY = dict(kernel_sizes=[1, 2, 3], filters_per_kernel=8, d_model=16, n_layers=1, n_heads=2, d_k=8,
            d_ff=32, emit_hidden=16, dec_emb=8, dec_hidden=16, dropout=0.0, learning_rate=0.01)


def tiny_config(**kw):
    return TrainConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def small():
    return desk_corpus(n_pairs=60, vocab_size=20, corruption=0.8, held_out=20, dev=20, seed=3)


def fresh_model(pairs, seed=0, **kw):
    cfg = tiny_config(**kw)
    vocab = corpus_vocab(pairs)
    return ProofreadingModel.create(cfg.model_config(len(vocab)), vocab, seed), cfg


# config

@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(lambda_align=0, lambda_crf=0, lambda_corr=0),
                                dict(lambda_crf=-1), dict(optimizer="rmsprop")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_dict_round_trip():
    cfg = tiny_config(seed=5, kernel_sizes=4)
    assert cfg.kernel_sizes == [4]
    assert TrainConfig.from_dict({**cfg.to_dict(), "unknown": 1}) == cfg


# joint loss

def test_joint_loss_is_weighted_sum(small):
    model, _ = fresh_model(small.train)
    batch = make_batch(small.train[:8], model)
    parts = joint_loss(batch, model, tiny_config())
    assert parts.total.item() == pytest.approx(parts.align + parts.crf + parts.corr, rel=1e-12)
    weighted = joint_loss(batch, model, tiny_config(lambda_align=2.0, lambda_crf=0.5, lambda_corr=0.0))
    assert weighted.corr == 0.0
    assert weighted.total.item() == pytest.approx(2 * parts.align + 0.5 * parts.crf, rel=1e-12)


def test_joint_loss_single_channels_match(small):
    model, _ = fresh_model(small.train)
    batch = make_batch(small.train[:8], model)
    full = joint_loss(batch, model, tiny_config())
    only = [joint_loss(batch, model, tiny_config(**{f"lambda_{k}": float(k == name)
                                                     for k in ("align", "crf", "corr")})).total.item()
            for name in ("align", "crf", "corr")]
    assert only == pytest.approx([full.align, full.crf, full.corr], rel=1e-12)


def test_chance_level_crf(small):
    # zero output layer and zero CRF scores: log Z counts legal paths (2 per gap, 4 per token)
    model, _ = fresh_model(small.train)
    pairs = small.train[:8]
    parts = joint_loss(make_batch(pairs, model), model, tiny_config(lambda_align=0, lambda_corr=0))
    expected = np.mean([(len(p.target_tokens) + 1) * math.log(2) + len(p.target_tokens) * math.log(4)
                        for p in pairs])
    assert parts.crf == pytest.approx(expected, rel=1e-12)


def test_zero_corr_weight_leaves_decoder_untouched(small):
    model, _ = fresh_model(small.train)
    parts = joint_loss(make_batch(small.train[:8], model), model, tiny_config(lambda_corr=0.0))
    ag.backward(parts.total)
    for name, p in model.params.items():
        if name.startswith(("dec.", "gru.")):
            assert p.grad is None or not np.any(p.grad), name


def test_missing_channel_is_data_error(small):
    model, _ = fresh_model(small.train)
    no_tags = [p.__class__(p.id, p.source_tokens, p.target_tokens, p.alignment) for p in small.train[:4]]
    with pytest.raises(DataError):
        joint_loss(make_batch(no_tags, model), model, tiny_config())
    no_links = [p.__class__(p.id, p.source_tokens, p.target_tokens, None, p.gold_tags, p.reference)
                for p in small.train[:4]]
    with pytest.raises(DataError):
        joint_loss(make_batch(no_links, model), model, tiny_config())
    # the same batch is fine once the missing channel is switched off
    joint_loss(make_batch(no_links, model), model, tiny_config(lambda_align=0.0))


def test_every_parameter_group_gets_gradient(small):
    model, _ = fresh_model(small.train)
    ag.backward(joint_loss(make_batch(small.train[:16], model), model, tiny_config()).total)
    seen = {g: False for g in PARAM_GROUPS}
    for name, p in model.params.items():
        group = model.group_of(name)
        assert group in seen, name
        if p.grad is not None and np.any(p.grad):
            seen[group] = True
    assert all(seen.values()), seen


# training loop

def test_overfit_twenty_pairs(small):
    fixture = small.train[:20]
    result = train(tiny_config(epochs=200, batch_size=10, patience=20), fixture, fixture)
    report, preds = evaluate_detection(result.model, fixture)
    assert report.f1 == 1.0
    assert [l.labels for l in preds] == [TagLattice(p.gold_tags).labels for p in fixture]


def test_training_is_deterministic(small):
    cfg = tiny_config(epochs=3, batch_size=8, dropout=0.1)
    a = train(cfg, small.train, small.dev, clock=lambda: 0.0)
    b = train(cfg, small.train, small.dev, clock=lambda: 0.0)
    assert checkpoint_bytes(a.model, cfg, a.metrics) == checkpoint_bytes(b.model, cfg, b.metrics)
    assert a.log_lines() == b.log_lines()
    c = train(tiny_config(epochs=3, batch_size=8, dropout=0.1, seed=1), small.train, small.dev)
    assert checkpoint_bytes(c.model) != checkpoint_bytes(a.model)


def test_epoch_log_fields(small):
    result = train(tiny_config(epochs=2), small.train, small.dev)
    rec = json.loads(result.log[0].to_json())
    assert list(rec) == ["epoch", "loss_total", "loss_align", "loss_crf", "loss_corr", "dev_f1", "seconds"]


def test_early_stopping_patience(small):
    calls = []
    result = train(tiny_config(epochs=50, patience=2, learning_rate=0.0), small.train, small.dev,
                   on_epoch=calls.append)
    # dev F1 never improves after the first epoch when nothing is learned
    assert len(result.log) == 3 and result.best_epoch == 0 and len(calls) == 3


def test_nan_aborts_with_last_good(small, tmp_path, monkeypatch):
    real = training.joint_loss
    seen = {"n": 0}

    def flaky(batch, model, config, rng=None):
        seen["n"] += 1
        parts = real(batch, model, config, rng)
        if seen["n"] == 5:
            parts.total = parts.total * float("nan")
        return parts

    monkeypatch.setattr(training, "joint_loss", flaky)
    path = tmp_path / "diverged.ckpt"
    with pytest.raises(TrainingDiverged) as info:
        train(tiny_config(epochs=5, batch_size=10, checkpoint_path=str(path)), small.train, small.dev)
    good = info.value.last_good
    assert good is not None and path.exists()
    assert all(np.all(np.isfinite(p.data)) for p in good.parameters())
    assert load_checkpoint(path).checkpoint_header["metrics"] == {"diverged_epoch": 2}  # two batches per epoch


def test_empty_split_rejected(small):
    with pytest.raises(ValueError):
        train(tiny_config(), [], small.dev)


def test_desk_corpus_split_sizes():
    sp = desk_corpus(n_pairs=100, vocab_size=20, held_out=10, dev=15, seed=1)
    assert (len(sp.train), len(sp.dev), len(sp.test)) == (75, 15, 10)
    with pytest.raises(ValueError):
        desk_corpus(n_pairs=20, held_out=10, dev=10)


# sweeps

def test_single_value_sweep_equals_direct_run(small):
    base = tiny_config(epochs=2, seed=7)
    rows, reports = sweep("batch_size", [16], base, small.train, small.dev, clock=lambda: 0.0)
    direct = train(training.replace(base, batch_size=16), small.train, small.dev, clock=lambda: 0.0)
    report, _ = evaluate_detection(direct.model, small.dev)
    assert reports[0].to_dict() == report.to_dict()
    assert rows[0]["batch_size"] == "Batch Normalization (BN) = 16"
    with pytest.raises(ValueError):
        sweep("dropout", [0.1], base, small.train, small.dev)
    with pytest.raises(ValueError):
        sweep("batch_size", [], base, small.train, small.dev)


# checkpoints

def test_checkpoint_round_trip(small, tmp_path):
    model, cfg = fresh_model(small.train, seed=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, cfg, {"f1": 0.5})
    loaded = load_checkpoint(path)
    for name, p in model.params.items():
        assert p.data.tobytes() == loaded.params[name].data.tobytes()
    assert loaded.vocab == model.vocab
    assert loaded.checkpoint_header["config"]["seed"] == cfg.seed
    save_checkpoint(loaded, tmp_path / "again.ckpt", cfg, {"f1": 0.5})
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    assert path.read_bytes().startswith(MAGIC)


def test_loaded_model_same_outputs(small, tmp_path):
    model, _ = fresh_model(small.train, seed=4)
    model.params["emit.out.w"].data[:] = np.random.default_rng(0).normal(size=model.params["emit.out.w"].shape)
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    pairs = small.dev[:10]
    a = [(l.labels, l.scores) for l in model.detect(pairs)]
    b = [(l.labels, l.scores) for l in loaded.detect(pairs)]
    assert a == b
    ca = [c.corrected for c in model.proofread(pairs)[1]]
    cb = [c.corrected for c in loaded.proofread(pairs)[1]]
    assert ca == cb


def test_checkpoint_format_errors(small):
    model, _ = fresh_model(small.train)
    data = checkpoint_bytes(model)
    with pytest.raises(FormatError, match="magic"):
        model_from_bytes(b"NOTPROOF" + data[8:])
    bumped = data[:len(MAGIC)] + (FORMAT_VERSION + 1).to_bytes(4, "little") + data[len(MAGIC) + 4:]
    with pytest.raises(FormatError, match="version"):
        model_from_bytes(bumped)
    for cut in (5, 30, len(data) - 8, len(data) - 3):
        with pytest.raises(FormatError):
            model_from_bytes(data[:cut])


def test_checkpoint_shape_mismatch(small):
    model, _ = fresh_model(small.train)
    data = checkpoint_bytes(model)
    head = len(MAGIC) + 12
    hlen = int.from_bytes(data[len(MAGIC) + 4:head], "little")
    header = json.loads(data[head:head + hlen])
    first = header["manifest"][0]
    first["shape"] = [first["shape"][1], first["shape"][0]]
    blob = json.dumps(header, sort_keys=True).encode()
    forged = data[:len(MAGIC) + 4] + len(blob).to_bytes(8, "little") + blob + data[head + hlen:]
    with pytest.raises(FormatError, match="shape"):
        model_from_bytes(forged)


# desk scale

def test_median_batch_loss_decreases_first_ten_epochs(desk_run):
    medians = [statistics.median(desk_run.batch_losses[e]) for e in range(10)]
    assert all(b < a for a, b in zip(medians, medians[1:])), medians
