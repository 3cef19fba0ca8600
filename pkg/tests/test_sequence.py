import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from breen.sequence import (
    Role,
    Stage,
    assemble_pretrain,
    assemble_sft,
    assemble_text,
    causal_mask,
    modality_route_mask,
)

QUERIES = [(3, 64), (4, 36)]


def test_pretrain_layout_lengths_and_slots():
    seq = assemble_pretrain(144, QUERIES, list(range(10, 20)))
    assert len(seq) == 254
    assert seq.query_slots == {3: (144, 208), 4: (208, 244)}
    assert (seq.roles[:144] == Role.IMAGE).all()
    assert (seq.roles[144:208] == Role.QUERY_FINE).all()
    assert (seq.roles[208:244] == Role.QUERY_COARSE).all()
    assert (seq.roles[244:] == Role.TEXT_GEN).all()


def test_pretrain_labels_on_caption_only():
    seq = assemble_pretrain(144, QUERIES, list(range(10, 20)))
    assert np.flatnonzero(seq.lm_labels >= 0).tolist() == list(range(244, 254))
    assert seq.lm_labels[244:].tolist() == list(range(10, 20))


def test_empty_caption_rejected():
    with pytest.raises(ValueError):
        assemble_pretrain(144, QUERIES, [])


def test_sft_layout():
    seq = assemble_sft(144, QUERIES, list(range(6)), list(range(8)))
    assert len(seq) == 258
    assert seq.query_slots[3][0] == 150 and seq.query_slots[4][1] == 250
    assert (seq.roles[144:150] == Role.TEXT_INSTR).all()
    assert np.flatnonzero(seq.lm_labels >= 0).tolist() == list(range(250, 258))
    # queries come after the instruction, so the causal mask lets them read it
    mask = causal_mask(len(seq))
    assert mask[150:250, 144:150].all()


def test_sft_empty_instruction_matches_pretrain_layout():
    a = assemble_sft(144, QUERIES, [], [5, 6])
    b = assemble_pretrain(144, QUERIES, [5, 6])
    np.testing.assert_array_equal(a.roles, b.roles)
    assert a.query_slots == b.query_slots


def test_sft_empty_response_rejected():
    with pytest.raises(ValueError):
        assemble_sft(144, QUERIES, [1], [])


def test_causal_mask_small():
    np.testing.assert_array_equal(causal_mask(1), [[True]])
    np.testing.assert_array_equal(causal_mask(3), [[1, 0, 0], [1, 1, 0], [1, 1, 1]])
    seq = assemble_pretrain(4, [(3, 2)], [1, 2])
    assert not causal_mask(len(seq))[0, seq.query_slots[3][0]]


def test_route_mask_per_layout():
    pre = assemble_pretrain(144, QUERIES, list(range(10)))
    route = modality_route_mask(pre.roles)
    assert route[:244].all() and not route[244:].any()
    sft = assemble_sft(144, QUERIES, [1, 2, 3], [4, 5])
    route = modality_route_mask(sft.roles)
    assert route[:144].all() and not route[144:147].any() and route[147:247].all() and not route[247:].any()
    assert not modality_route_mask(assemble_text([1, 2, 3]).roles).any()


def test_prealign_uses_pretrain_layout():
    a = assemble_pretrain(8, QUERIES, [1, 2], stage=Stage.PREALIGN)
    assert a.stage == Stage.PREALIGN
    np.testing.assert_array_equal(a.roles, assemble_pretrain(8, QUERIES, [1, 2]).roles)


@given(
    n_img=st.integers(0, 20),
    blocks=st.lists(st.tuples(st.integers(1, 9), st.integers(1, 6)), max_size=3, unique_by=lambda b: b[0]),
    instr=st.lists(st.integers(0, 30), max_size=6),
    resp=st.lists(st.integers(0, 30), min_size=1, max_size=6),
)
def test_role_partition_and_label_subset(n_img, blocks, instr, resp):
    seq = assemble_sft(n_img, blocks, instr, resp)
    counts = seq.role_counts()
    assert counts[Role.IMAGE] == n_img
    assert counts[Role.TEXT_INSTR] == len(instr)
    assert counts[Role.QUERY_FINE] + counts[Role.QUERY_COARSE] == sum(n for _, n in blocks)
    assert counts[Role.TEXT_GEN] == len(resp)
    labelled = seq.lm_labels >= 0
    assert (seq.roles[labelled] == Role.TEXT_GEN).all()
    # slots are contiguous, disjoint and in the given block order
    spans = [seq.query_slots[s] for s, _ in blocks]
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        assert a1 == b0
    # the route mask is a pure per-position function of the role
    perm = np.random.default_rng(0).permutation(len(seq))
    np.testing.assert_array_equal(modality_route_mask(seq.roles[perm]), modality_route_mask(seq.roles)[perm])
