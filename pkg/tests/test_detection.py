import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from proofkit import autograd as ag
from proofkit.autograd import Tensor
from proofkit.corpus import Vocabulary
from proofkit.detection import (
    AlignmentMatrix, CrfParams, DataError, alignment_loss, alignment_matrix, crf_log_partition,
    crf_log_partition_batch, crf_marginals, crf_neg_log_likelihood, crf_nll_batch, crf_viterbi,
    detect_errors, link_indicator, slot_layout, token_feature_width,
)
from proofkit.encoder import ContextVectors, EncoderConfig
from proofkit.lattice import (
    GAP, TOKEN, ErrorTag, LabelError, TagLattice, boundary_mask, emission_mask, lattice_from_record, legal,
    slot_kinds, transition_mask,
)
from proofkit.model import ModelConfig, ProofreadingModel

from oracles import crf_enumerate, fd_grad, log_sum_exp, rel_err


def cv(arr, pad=None):
    arr = np.asarray(arr, dtype=float)
    return ContextVectors(Tensor(arr), np.zeros(arr.shape[:-1], dtype=bool) if pad is None else pad)


def random_crf(T, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return CrfParams(Tensor(rng.normal(size=(T, T)) * scale, requires_grad=True),
                     Tensor(rng.normal(size=T) * scale, requires_grad=True),
                     Tensor(rng.normal(size=T) * scale, requires_grad=True)), rng


# lattice structure

def test_slot_kinds_alternate():
    assert slot_kinds(2) == [GAP, TOKEN, GAP, TOKEN, GAP]
    assert slot_kinds(0) == [GAP]


def test_legality_table():
    assert legal(ErrorTag.OK, GAP) and legal(ErrorTag.OK, TOKEN)
    assert legal(ErrorTag.OMISSION, GAP) and not legal(ErrorTag.OMISSION, TOKEN)
    for t in (ErrorTag.REPLACEMENT, ErrorTag.INSERTION, ErrorTag.ORDER):
        assert legal(t, TOKEN) and not legal(t, GAP)


def test_lattice_validation():
    with pytest.raises(LabelError):
        TagLattice([ErrorTag.OK, ErrorTag.OK])
    with pytest.raises(LabelError):
        TagLattice([ErrorTag.OK, ErrorTag.OMISSION, ErrorTag.OK]).validate()
    rec = TagLattice(["OK", "REPLACEMENT", "OMISSION"], id="a").to_record(["x"])
    assert rec == {"id": "a", "slots": ["OK", "REPLACEMENT", "OMISSION"], "reference": ["x"]}
    assert lattice_from_record(rec).labels[1] == ErrorTag.REPLACEMENT


# alignment

def test_alignment_single_vector():
    v = [[0.3, -1.2, 2.0]]
    a = alignment_matrix(cv(v), cv(v))
    np.testing.assert_allclose(a.probs.data, [[1.0]])


def test_alignment_orthogonal_uniform():
    a = alignment_matrix(cv([[1.0, 0, 0]]), cv([[0, 1.0, 0], [0, 0, 1.0]]))
    np.testing.assert_allclose(a.probs.data, [[0.5, 0.5]])


@given(st.integers(0, 10_000))
def test_alignment_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    pad = np.array([[False, False, True], [False, False, False]])
    a = alignment_matrix(cv(rng.normal(size=(2, 4, 6)) * 3), cv(rng.normal(size=(2, 3, 6)) * 3, pad))
    np.testing.assert_allclose(a.probs.data.sum(-1), 1.0, atol=1e-9)
    assert np.all(a.probs.data[0, :, 2] < 1e-6)


def test_alignment_empty_target():
    with pytest.raises(ValueError):
        alignment_matrix(cv(np.ones((2, 3))), cv(np.ones((0, 3))))


def test_alignment_loss_values():
    peaked = AlignmentMatrix(Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])), None)
    assert alignment_loss(peaked, [(0, 0), (1, 1)]).item() == pytest.approx(0.0, abs=1e-9)
    uniform = AlignmentMatrix(Tensor(np.full((2, 4), 0.25)), None)
    # second row has no gold link so it drops out
    assert alignment_loss(uniform, [(0, 2)]).item() == pytest.approx(math.log(4), rel=1e-12)


def test_link_indicator_errors():
    with pytest.raises(DataError):
        link_indicator((2, 2), [(2, 0)])
    with pytest.raises(DataError):
        link_indicator((2, 2), [(0, 0), (0, 1)])


def test_alignment_loss_decreases_under_gd():
    rng = np.random.default_rng(0)
    src = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    tgt = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    links = [(0, 2), (1, 0), (2, 1)]
    losses = []
    for _ in range(30):
        loss = alignment_loss(alignment_matrix(cv_t(src), cv_t(tgt)), links)
        losses.append(loss.item())
        ag.backward(loss)
        ag.sgd_step([src, tgt], 0.1)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def cv_t(t):
    return ContextVectors(t, np.zeros(t.shape[:-1], dtype=bool))


# CRF partition function

def test_log_partition_zero_scores():
    for T, S in [(3, 2), (5, 4), (2, 7)]:
        z = crf_log_partition(Tensor(np.zeros((S, T))), CrfParams.zeros(T)).item()
        assert z == pytest.approx(S * math.log(T), abs=1e-12)
    assert crf_log_partition(Tensor(np.zeros((2, 3))), CrfParams.zeros(3)).item() == \
        pytest.approx(2.1972245773, abs=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_forward_matches_enumeration(seed):
    T = 2 + seed % 3
    S = 1 + seed % 6
    crf, rng = random_crf(T, seed)
    E = rng.normal(size=(S, T))
    paths = crf_enumerate(E, crf.transitions.data, crf.start_scores.data, crf.stop_scores.data)
    log_z = log_sum_exp([s for _, s in paths])
    assert crf_log_partition(Tensor(E), crf).item() == pytest.approx(log_z, abs=1e-8)
    assert sum(math.exp(s - log_z) for _, s in paths) == pytest.approx(1.0, abs=1e-8)
    best = max(paths, key=lambda p: p[1])[0]
    assert crf_viterbi(E, crf) == list(best)


def test_batch_partition_matches_single_with_lengths():
    crf, rng = random_crf(4, 1)
    E = rng.normal(size=(3, 5, 4))
    lengths = [5, 2, 1]
    z = crf_log_partition_batch(Tensor(E), crf, lengths).data
    for b, n in enumerate(lengths):
        assert z[b] == pytest.approx(crf_log_partition(Tensor(E[b, :n]), crf).item(), abs=1e-10)


def test_masked_lattice_enumeration():
    m = 2
    kinds = slot_kinds(m)
    rng = np.random.default_rng(5)
    crf = CrfParams.for_lattice(Tensor(rng.normal(size=(5, 5))), Tensor(rng.normal(size=5)),
                                Tensor(rng.normal(size=5)))
    E = rng.normal(size=(2 * m + 1, 5)) + emission_mask(kinds)
    allowed = [[t for t in range(5) if legal(ErrorTag(t), k)] for k in kinds]
    A, st_, sp = crf.effective()
    paths = crf_enumerate(E, A, st_, sp, allowed)
    log_z = log_sum_exp([s for _, s in paths])
    assert crf_log_partition(Tensor(E), crf).item() == pytest.approx(log_z, abs=1e-8)
    best = crf_viterbi(E, crf)
    assert all(legal(ErrorTag(t), k) for t, k in zip(best, kinds))
    assert tuple(best) == max(paths, key=lambda p: p[1])[0]
    assert transition_mask()[ErrorTag.OMISSION, ErrorTag.OMISSION] == ag.MASK_VALUE
    assert boundary_mask()[ErrorTag.ORDER] == ag.MASK_VALUE


# NLL

def test_nll_probabilities_sum_to_one():
    crf, rng = random_crf(3, 11)
    E = rng.normal(size=(3, 3))
    total = sum(math.exp(-crf_neg_log_likelihood(Tensor(E), seq, crf).item())
                for seq, _ in crf_enumerate(E, crf.transitions.data, crf.start_scores.data,
                                            crf.stop_scores.data))
    assert total == pytest.approx(1.0, abs=1e-8)


@given(st.integers(0, 10_000))
def test_nll_nonnegative(seed):
    crf, rng = random_crf(4, seed, scale=3.0)
    S = int(rng.integers(1, 7))
    E = rng.normal(size=(S, 4)) * 3
    tags = rng.integers(0, 4, size=S)
    assert crf_neg_log_likelihood(Tensor(E), tags, crf).item() >= -1e-9


def test_nll_vanishes_for_dominant_gold():
    gold = [2, 0, 1, 1]
    E = np.zeros((4, 3))
    E[np.arange(4), gold] = 50.0
    assert crf_neg_log_likelihood(Tensor(E), gold, CrfParams.zeros(3)).item() < 1e-12


def test_nll_gradients_match_finite_differences():
    crf, rng = random_crf(3, 21)
    E = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    gold = [1, 0, 2]
    ag.backward(crf_neg_log_likelihood(E, gold, crf))
    value = lambda: crf_neg_log_likelihood(Tensor(E.data), gold, crf).item()
    for t in (E, crf.transitions, crf.start_scores, crf.stop_scores):
        assert rel_err(t.grad, fd_grad(value, t.data)) < 1e-4


def test_nll_illegal_label():
    with pytest.raises(DataError):
        crf_neg_log_likelihood(Tensor(np.zeros((3, 5))), [0, ErrorTag.OMISSION, 0], CrfParams.zeros(5),
                               kinds=slot_kinds(1))
    with pytest.raises(DataError):
        crf_neg_log_likelihood(Tensor(np.zeros((3, 5))), [0, 0], CrfParams.zeros(5))


def test_nll_batch_matches_single():
    crf, rng = random_crf(4, 3)
    E = rng.normal(size=(2, 4, 4))
    tags = np.array([[0, 1, 2, 3], [3, 3, 0, 0]])
    nll = crf_nll_batch(Tensor(E), tags, crf, [4, 2]).data
    assert nll[0] == pytest.approx(crf_neg_log_likelihood(Tensor(E[0]), tags[0], crf).item(), abs=1e-10)
    assert nll[1] == pytest.approx(crf_neg_log_likelihood(Tensor(E[1, :2]), tags[1, :2], crf).item(), abs=1e-10)


# Viterbi and marginals

def test_viterbi_decoupled():
    E = np.eye(4)[[2, 0, 3, 3, 1]]
    assert crf_viterbi(E, CrfParams.zeros(4)) == [2, 0, 3, 3, 1]


def test_viterbi_ties_lowest_index():
    assert crf_viterbi(np.zeros((4, 3)), CrfParams.zeros(3)) == [0, 0, 0, 0]


def test_marginals_are_distributions():
    crf, rng = random_crf(4, 8)
    E = rng.normal(size=(5, 4))
    mg = crf_marginals(Tensor(E), crf)
    np.testing.assert_allclose(mg.sum(-1), 1.0, atol=1e-10)
    # slot-0 marginal by enumeration
    paths = crf_enumerate(E, crf.transitions.data, crf.start_scores.data, crf.stop_scores.data)
    log_z = log_sum_exp([s for _, s in paths])
    p0 = np.zeros(4)
    for seq, s in paths:
        p0[seq[0]] += math.exp(s - log_z)
    np.testing.assert_allclose(mg[0], p0, atol=1e-10)


# slot features

def test_slot_layout():
    C = slot_layout([2])[0]
    np.testing.assert_array_equal(C, [[1, 0], [1, 0], [0.5, 0.5], [0, 1], [0, 1]])
    C1 = slot_layout([1, 3])[0]
    assert C1.shape == (7, 3)
    assert C1[3:].sum() == 0


# composed model

def tiny_model(seed=0):
    vocab = Vocabulary([f"w{i}" for i in range(8)])
    enc = EncoderConfig(vocab_size=len(vocab), kernel_sizes=[1, 2], filters_per_kernel=2, d_model=4,
                        n_layers=1, n_heads=2, d_k=2, d_ff=6, max_len=8)
    return ProofreadingModel.create(ModelConfig(enc, emit_hidden=5, dec_emb=3, dec_hidden=4), vocab, seed)


def test_detect_errors_lattice_shape():
    model = tiny_model()
    align, lat = detect_errors([4, 5, 6], [7, 8, 9, 10], model)
    assert len(lat.labels) == 9
    lat.validate()
    assert align.probs.shape == (3, 4)
    assert token_feature_width(4) == 20


def test_untrained_model_chance_level():
    # zero output layer and zero CRF scores make every legal path equally likely
    model = tiny_model()
    out = model.detect_batch([[4, 5]], [[6, 7, 8]])
    mg = out.marginals[0]
    np.testing.assert_allclose(mg[0], [0.5, 0.5, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(mg[1], [0.25, 0, 0.25, 0.25, 0.25], atol=1e-12)


def test_joint_losses_differentiable_end_to_end():
    model = tiny_model(seed=3)
    p = model.params
    rng = np.random.default_rng(4)
    p["emit.out.w"].data[:] = rng.normal(size=p["emit.out.w"].shape)
    p["crf.trans"].data[:] = rng.normal(size=p["crf.trans"].shape)
    # stop-gradient feature columns get zero weight so finite differences see the same graph
    p["emit.hidden.w"].data[3 * 4:] = 0.0
    src, tgt = [[4, 5, 6]], [[7, 8, 9]]
    links = [(0, 0), (1, 2), (2, 1)]
    gold = [0, 0, 0, 2, ErrorTag.OMISSION, 0, 0]
    crf_mask = lambda: CrfParams.for_lattice(p["crf.trans"], p["crf.start"], p["crf.stop"])

    def loss():
        fwd = model.forward(src, tgt)
        nll = crf_nll_batch(fwd.emissions, np.array([gold]), crf_mask())
        a = alignment_loss(AlignmentMatrix(ag.getitem(fwd.align.probs, 0), None), links)
        return ag.tsum(nll) + a

    for t in p.values():
        t.grad = np.zeros_like(t.data)
    value = loss()
    assert value.item() >= 0
    ag.backward(value)

    def numeric():
        with ag.no_grad():
            return loss().item()

    for name in ("emb.tok", "cnn.k2", "enc0.wq", "enc0.ff2.w", "emit.hidden.w", "crf.trans"):
        assert rel_err(p[name].grad, fd_grad(numeric, p[name].data, eps=1e-6)) < 1e-4, name
