import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmlm.assembly import (
    TokenKind,
    assemble_pmlm_input,
    audit_leakage,
    build_attention_mask,
    build_cloze_instance,
    build_decode_input,
    build_seq2seq_input,
    build_step_instance,
    conditioning_positions,
    format_mask,
    step_subset,
    transitive_closure,
)
from pmlm.corpus import CorpusError
from pmlm.masking import CorruptionPlan, FactorizationOrder, usable_positions
from pmlm.verification import random_case, toy_vocab

C, K, O, P = TokenKind.CONTEXT, TokenKind.CONV_MASK, TokenKind.ORIGINAL, TokenKind.PSEUDO


def assemble(x, vocab, *steps, pseudo=True):
    order = FactorizationOrder.of(*steps)
    return assemble_pmlm_input(x, order, CorruptionPlan.all_masked(order.positions), vocab, append_pseudo=pseudo)


def test_layout_of_two_step_order(six, vocab):
    inst = assemble(six, vocab, (4, 5), (2,))
    labels = [inst.label(r, vocab) for r in range(len(inst))]
    assert labels[9:] == ["[P]4", "[P]5", "x4", "x5", "[P]2", "x2"]
    assert list(inst.position_ids[9:]) == [4, 5, 4, 5, 2, 2]
    assert list(inst.steps[9:]) == [1, 1, 1, 1, 2, 2]
    assert list(inst.token_ids[[2, 4, 5]]) == [vocab.mask] * 3
    assert list(inst.par_rows) == [9, 10, 13]
    assert list(inst.par_labels) == [six.token_ids[p] for p in (4, 5, 2)]
    assert list(inst.ae_rows) == [4, 5, 2]


def test_mask_rule_by_kind():
    kinds = [C, K, P, O, P, O]
    steps = [0, 0, 1, 1, 2, 2]
    m = build_attention_mask(kinds, steps)
    expected = np.array(
        [
            [1, 1, 0, 0, 0, 0],
            [1, 1, 0, 0, 0, 0],
            [1, 1, 1, 0, 0, 0],
            [1, 1, 0, 1, 0, 0],
            [1, 1, 0, 1, 1, 0],
            [1, 1, 0, 1, 0, 1],
        ],
        dtype=bool,
    )
    assert np.array_equal(m, expected)


# conditioning sets for the x1..x6 example
TABLE = [
    ("ae", [(2,), (4, 5)], {(K, 2): {1, 3, 6}, (K, 4): {1, 3, 6}, (K, 5): {1, 3, 6}}),
    ("ar", [(2,), (4,), (5,)], {(P, 2): {1, 3, 6}, (P, 4): {1, 2, 3, 6}, (P, 5): {1, 2, 3, 4, 6}}),
    ("par", [(4, 5), (2,)], {(P, 4): {1, 3, 6}, (P, 5): {1, 3, 6}, (P, 2): {1, 3, 4, 5, 6}}),
    ("par", [(2,), (4, 5)], {(P, 2): {1, 3, 6}, (P, 4): {1, 2, 3, 6}, (P, 5): {1, 2, 3, 6}}),
]


@pytest.mark.parametrize("name,steps,expected", TABLE, ids=["ae", "ar-2-4-5", "par-45-2", "par-2-45"])
def test_conditioning_sets(six, vocab, name, steps, expected):
    inst = assemble(six, vocab, *steps, pseudo=name != "ae")
    usable = usable_positions(six, vocab)
    got = {(kind, pos): conditioning_positions(inst, inst.row_at(kind, pos), usable) for kind, pos in expected}
    assert got == expected


def test_injected_edge_is_reported_with_path(six, vocab):
    inst = assemble(six, vocab, (4, 5), (2,))
    bad = inst.add_edges([(6, inst.row_at(O, 4))])  # x6 may read x4
    report = audit_leakage(bad, vocab)
    assert not report.passed
    assert "[P]4 -> x6 -> x4" in report.describe()
    assert audit_leakage(inst, vocab).passed


def test_explicit_leak_detected(six, vocab):
    inst = assemble(six, vocab, (4, 5), (2,))
    bad = inst.add_edges([(inst.row_at(P, 2), inst.row_at(O, 2))])
    assert ["[P]2", "x2"] in [d.split(" -> ") for d in audit_leakage(bad, vocab).describe()]


def test_transitive_closure_chain():
    m = np.eye(4, dtype=bool)
    m[1, 0] = m[2, 1] = m[3, 2] = True
    reach = transitive_closure(m)
    assert reach[3, 0] and not reach[0, 3]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_instances_leak_free_and_well_formed(seed):
    vocab = toy_vocab(32)
    rng = np.random.default_rng(seed)
    x, order, plan = random_case(rng, vocab)
    inst = assemble_pmlm_input(x, order, plan, vocab)
    assert audit_leakage(inst, vocab).passed
    assert len(inst) == len(x) + 2 * order.masked_count
    # every appended token mirrors the position and segment of its source
    for r in np.flatnonzero(inst.kinds >= O):
        p = inst.position_ids[r]
        assert inst.segment_ids[r] == x.segment_ids[p]
    for r, label in zip(inst.par_rows, inst.par_labels):
        assert inst.attention_mask[r, r]
        assert label == x.token_ids[inst.position_ids[r]]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_step_instance_matches_restricted_combined_mask(seed):
    vocab = toy_vocab(32)
    x, order, plan = random_case(np.random.default_rng(seed), vocab)
    big = assemble_pmlm_input(x, order, plan, vocab)
    for i in range(1, len(order) + 1):
        small = build_step_instance(x, order, plan, i, vocab)
        sub = step_subset(big, i)
        assert np.array_equal(big.attention_mask[np.ix_(sub, sub)], small.attention_mask)
        assert np.array_equal(big.token_ids[sub], small.token_ids)
        assert np.array_equal(big.position_ids[sub], small.position_ids)


def test_cloze_instance_matches_in_place_view(six, vocab, rng):
    order = FactorizationOrder.of((2, 3), (5,))
    plan = CorruptionPlan.all_masked(order.positions)
    ae = assemble_pmlm_input(six, order, plan, vocab, append_pseudo=False)
    cloze = build_cloze_instance(six, order.positions, plan, vocab)
    assert np.array_equal(ae.token_ids, cloze.token_ids)
    assert cloze.attention_mask.all()


def test_inconsistent_plan_rejected(six, vocab):
    order = FactorizationOrder.of((2,))
    with pytest.raises(CorpusError):
        assemble_pmlm_input(six, order, CorruptionPlan.all_masked([3]), vocab)
    with pytest.raises(CorpusError):
        assemble_pmlm_input(six, FactorizationOrder.of((0,)), CorruptionPlan.all_masked([0]), vocab)


def test_seq2seq_layout(vocab):
    inst = build_seq2seq_input([6, 7], [8, 9], vocab)
    assert list(inst.token_ids) == [2, 6, 7, 3, 5, 8, 5, 9, 5, 3]
    assert list(inst.position_ids) == [0, 1, 2, 3, 4, 4, 5, 5, 6, 6]
    assert list(inst.par_labels) == [8, 9, vocab.eos]
    assert audit_leakage(inst, vocab).passed
    with pytest.raises(CorpusError, match="too long"):
        build_seq2seq_input([6] * 5, [7] * 5, vocab, max_len=10)


def test_decode_input_is_prefix_of_training_layout(vocab):
    train = build_seq2seq_input([6, 7], [8, 9], vocab)
    dec = build_decode_input([6, 7], [8], vocab)
    # prediction row for the second target token sees the same content
    row = int(train.par_rows[1])
    assert conditioning_positions(train, row) == conditioning_positions(dec, len(dec) - 1)
    assert dec.position_ids[-1] == train.position_ids[row]


def test_format_mask_shape(six, vocab):
    inst = assemble(six, vocab, (4, 5), (2,))
    text = format_mask(inst, vocab)
    grid = text.split("# mask (row attends column)\n")[1].splitlines()
    assert len(grid) == len(inst)
    assert grid[9].split("|")[1].split() == ["1"] * 9 + ["1", "1", "0", "0", "0", "0"]
