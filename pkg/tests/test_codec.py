import itertools

import numpy as np
import pytest

from relgen.codec import (
    EOS_ID,
    OrderKind,
    SymbolSequence,
    SymbolVocab,
    decode_symbolic,
    encode_lexical,
    encode_symbolic,
    mention_lookup,
    order_cells,
    parse_lexical,
    parse_symbol_text,
)
from relgen.negsample import make_plan, plan_diagonal, plan_none
from relgen.schema import RelationInstance, RelationTypeSet, matrix_from_instances
from helpers import REL4, bmatrix, make_doc, qmatrix

V = SymbolVocab.default(relation_count=4)
V4 = SymbolVocab.default(relation_count=4, arity=4)


# --- vocabulary layout -------------------------------------------------------

def test_default_layout_matches_reserved_ranges():
    # Entities <1>..<100>, relations from <101>, EOS <0>.
    assert V.eos_id == 0
    assert V.entity_id(0, 0) == 1
    assert V.entity_id(1, 99) == 100
    assert V.relation_id(0) == 101
    assert V.no_relation_id == 101 + 4


def test_quaternary_slices_entity_capacity_into_four_blocks():
    assert [V4.entity_id(s, 0) for s in range(4)] == [1, 26, 51, 76]
    assert V4.slot_capacity(0) == 25
    assert V4.relation_id(0) == 101


def test_vocab_rejects_overlapping_blocks():
    with pytest.raises(ValueError):
        SymbolVocab(arity=2, entity_ranges=((1, 100),),
                    relation_range=(50, 100), relation_count=4)


def test_vocab_rejects_relation_overflow():
    with pytest.raises(ValueError):
        SymbolVocab(arity=2, entity_ranges=((1, 10),),
                    relation_range=(11, 3), relation_count=3)


def test_describe_lists_every_id_once():
    lines = V.describe().splitlines()
    assert len(lines) == V.total_size
    assert lines[0] == "0\teos"
    assert lines[101].endswith("relation:0")
    assert lines[105].endswith("no_relation")


# --- encode_symbolic ---------------------------------------------------------

def test_encode_single_fact_triple():
    seq = encode_symbolic(bmatrix(3, [(0, 1, 0)]), V)
    assert seq.ids == (1, 2, 101, 0)
    assert seq.render() == "<1> <2> <101> <0>"


def test_encode_empty_matrix_is_just_eos():
    seq = encode_symbolic(bmatrix(3, []), V)
    assert seq.ids == (EOS_ID,)


def test_encode_row_column_order():
    seq = encode_symbolic(bmatrix(3, [(1, 0, 1), (0, 2, 0)]), V)
    # (0,2) precedes (1,0) regardless of insertion order.
    assert seq.ids == (1, 3, 101, 2, 1, 102, 0)


def test_encode_quaternary_example_group():
    seq = encode_symbolic(qmatrix((2, 2, 2, 2), [((0, 0, 0, 0), 0)]), V4)
    assert seq.ids == (1, 26, 51, 76, 101, 0)


def test_encode_interleaves_plan_cells_in_row_column_order():
    m = bmatrix(3, [(0, 1, 0)])
    seq = encode_symbolic(m, V, plan=plan_diagonal(m, window=1))
    assert seq.ids == (
        1, 2, 101,      # gold (0,1)
        2, 1, 105,      # NO_RELATION at (1,0)
        2, 3, 105,      # (1,2)
        3, 2, 105,      # (2,1)
        0,
    )


def test_encode_multilabel_cell_emits_one_group_per_label():
    m = matrix_from_instances(
        [RelationInstance((0, 1), 0), RelationInstance((0, 1), 2)],
        slot_sizes=(2, 2),
    )
    assert encode_symbolic(m, V).ids == (1, 2, 101, 1, 2, 103, 0)


def test_sequence_length_formula():
    # len = (k+1) * (|facts| + |plan|) + 1
    m = bmatrix(5, [(0, 1, 0), (2, 4, 3)])
    for plan in (plan_none(m), plan_diagonal(m, 1), plan_diagonal(m, 2)):
        seq = encode_symbolic(m, V, plan=plan)
        assert len(seq) == 3 * (2 + len(plan.cells)) + 1


def test_encode_rejects_overflowing_entity_ordinal():
    tiny = SymbolVocab(arity=2, entity_ranges=((1, 2),),
                       relation_range=(3, 5), relation_count=4)
    with pytest.raises(ValueError):
        encode_symbolic(bmatrix(3, [(0, 2, 0)]), tiny)


# --- decode_symbolic ---------------------------------------------------------

def test_decode_inverts_encode():
    m = bmatrix(4, [(0, 1, 0), (1, 3, 2), (3, 0, 1)])
    parsed = decode_symbolic(encode_symbolic(m, V), V, slot_sizes=(4, 4))
    assert parsed.matrix == m
    assert parsed.malformed_groups == 0


def test_decode_drops_no_relation_groups():
    m = bmatrix(3, [(0, 1, 0)])
    seq = encode_symbolic(m, V, plan=plan_diagonal(m, window=1))
    assert decode_symbolic(seq, V, slot_sizes=(3, 3)).matrix == m


def test_decode_duplicate_cell_first_wins():
    # Same cell, two relation labels: both kept (cells are label sets),
    # but an exact duplicate (cell, relation) pair collapses.
    ids = (1, 2, 101, 1, 2, 101, 1, 2, 103, 0)
    parsed = decode_symbolic(ids, V, slot_sizes=(2, 2))
    assert parsed.matrix.cells == {(0, 1): frozenset({0, 2})}
    assert parsed.malformed_groups == 0


def test_decode_counts_trailing_fragment_as_malformed():
    # Complete group then a dangling head entity: fragment discarded.
    parsed = decode_symbolic((1, 2, 101, 3), V, slot_sizes=(3, 3))
    assert parsed.matrix == bmatrix(3, [(0, 1, 0)])
    assert parsed.malformed_groups == 1


def test_decode_stops_at_ill_typed_token():
    # Relation symbol in an entity slot breaks the scan; the valid prefix
    # survives and the rest is counted in group-sized chunks.
    parsed = decode_symbolic((1, 2, 101, 102, 2, 101, 1, 3, 101), V,
                             slot_sizes=(3, 3))
    assert parsed.matrix == bmatrix(3, [(0, 1, 0)])
    assert parsed.malformed_groups == 2


def test_decode_self_pair_group_is_malformed():
    # The scan stops at the self-pair; the discarded fragment spans 4 ids
    # (group + unreached EOS) and is counted in ceil(4/3) = 2 chunks.
    parsed = decode_symbolic((2, 2, 101, 0), V, slot_sizes=(3, 3))
    assert parsed.matrix.is_empty
    assert parsed.malformed_groups == 2


def test_decode_infers_slot_sizes_when_absent():
    parsed = decode_symbolic((3, 1, 102, 0), V)
    assert parsed.matrix.slot_sizes == (3, 3)
    assert parsed.matrix.relations_at((2, 0)) == frozenset({1})


def test_decode_quaternary_round_trip():
    m = qmatrix((3, 2, 2, 4), [((2, 0, 1, 3), 1), ((0, 1, 0, 0), 0)])
    parsed = decode_symbolic(encode_symbolic(m, V4), V4, slot_sizes=(3, 2, 2, 4))
    assert parsed.matrix == m


def test_roundtrip_exhaustive_two_entities():
    # Every binary matrix over 2 entities and 2 relation types; labels are
    # subsets, so each of the 2 cells independently carries one of 4 sets.
    rels = (0, 1)
    cells = [(0, 1), (1, 0)]
    vocab = SymbolVocab.default(relation_count=2)
    count = 0
    for labels in itertools.product(*([[
            frozenset(), frozenset({0}), frozenset({1}), frozenset({0, 1})]] * 2)):
        cellmap = {c: l for c, l in zip(cells, labels) if l}
        m = bmatrix(2, [(h, t, r) for (h, t), ls in cellmap.items() for r in ls])
        for strat in ("none", "diagonal", "all"):
            plan = make_plan(m, strat)
            parsed = decode_symbolic(encode_symbolic(m, vocab, plan=plan),
                                     vocab, slot_sizes=(2, 2))
            assert parsed.matrix == m
            count += 1
    assert count == 16 * 3


def test_injectivity_small_space():
    # Distinct matrices over 2 entities / 2 relations yield distinct
    # sequences under the fixed order and empty plan.
    vocab = SymbolVocab.default(relation_count=2)
    seen = {}
    sets = [frozenset(), frozenset({0}), frozenset({1}), frozenset({0, 1})]
    for a, b in itertools.product(sets, sets):
        cellmap = {}
        if a:
            cellmap[(0, 1)] = a
        if b:
            cellmap[(1, 0)] = b
        facts = [(h, t, r) for (h, t), ls in cellmap.items() for r in ls]
        seq = encode_symbolic(bmatrix(2, facts), vocab).ids
        assert seq not in seen, f"collision with {seen.get(seq)}"
        seen[seq] = (a, b)


# --- symbol text -------------------------------------------------------------

def test_parse_symbol_text_accepts_bracketed_and_raw():
    assert parse_symbol_text("<1> <2> <101>") == (1, 2, 101)
    assert parse_symbol_text("1 2 101") == (1, 2, 101)
    assert parse_symbol_text("") == ()


def test_parse_symbol_text_rejects_junk():
    with pytest.raises(ValueError):
        parse_symbol_text("<1> spam")


def test_render_parse_round_trip():
    seq = SymbolSequence(ids=(1, 2, 101, 0), arity=2)
    assert parse_symbol_text(seq.render()) == seq.ids


def test_is_well_formed():
    assert SymbolSequence((1, 2, 101, 0), 2).is_well_formed(V)
    assert not SymbolSequence((1, 2, 0), 2).is_well_formed(V)
    assert not SymbolSequence((1, 2, 101), 2).is_well_formed(V)  # no EOS


# --- order_cells -------------------------------------------------------------

def test_order_cells_row_column():
    insts = [RelationInstance((1, 0), 0), RelationInstance((0, 2), 1)]
    got = order_cells(insts, OrderKind.row_column())
    assert [i.entities for i in got] == [(0, 2), (1, 0)]


def test_order_cells_random_is_deterministic_per_doc_and_seed():
    insts = [RelationInstance((i, j), 0)
             for i in range(5) for j in range(5) if i != j]
    a = order_cells(insts, OrderKind.random(3), doc_id="doc9")
    b = order_cells(insts, OrderKind.random(3), doc_id="doc9")
    c = order_cells(insts, OrderKind.random(3), doc_id="other")
    assert a == b
    assert sorted(a) == sorted(c)
    assert a != c  # 20 items: doc-keyed permutations collide with p 1/20!


def test_order_cells_annotation_follows_given_ordinals():
    insts = [RelationInstance((0, 1), 0), RelationInstance((2, 0), 1)]
    order = {((0, 1), 0): 5, ((2, 0), 1): 2}
    got = order_cells(insts, OrderKind.annotation(), annotation_order=order)
    assert [i.entities for i in got] == [(2, 0), (0, 1)]


def test_order_cells_annotation_without_ordinals_errors():
    with pytest.raises(ValueError):
        order_cells([RelationInstance((0, 1), 0)], OrderKind.annotation())


# --- lexical codec -----------------------------------------------------------

def test_encode_lexical_figure_style_group():
    # Two-entity doc: person and date; relation "date of birth".
    from relgen.schema import Document, Entity, Mention
    s0 = ("Julian", "Reinard", "was", "born")
    s1 = ("5", "March", "1983",)
    doc = Document(
        doc_id="fig",
        sentences=(s0, s1),
        entities=(
            Entity(index=0, mentions=(Mention(0, 0, 2, ("Julian", "Reinard")),)),
            Entity(index=1, mentions=(Mention(1, 0, 3, ("5", "March", "1983")),)),
        ),
    )
    m = bmatrix(2, [(0, 1, 3)])  # REL4[3] = "date of birth"
    assert encode_lexical(doc, m, REL4) == "Julian Reinard | 5 March 1983 | date of birth ;"


def test_encode_lexical_empty_matrix_is_empty_string():
    assert encode_lexical(make_doc(["a", "b"]), bmatrix(2, []), REL4) == ""


def test_encode_lexical_shared_head_repeats_surface():
    doc = make_doc(["ada", "bob", "eve"])
    text = encode_lexical(doc, bmatrix(3, [(0, 1, 0), (0, 2, 1)]), REL4)
    assert text.count("ada") == 2


def test_parse_lexical_resolves_alias_mentions():
    doc = make_doc(["ada lovelace", "bob"], aliases={0: "she"})
    text = "she | bob | born in ;"
    parsed = parse_lexical(text, doc, REL4)
    assert parsed.matrix == bmatrix(2, [(0, 1, 0)])
    assert parsed.dropped_unknown_mention == 0


def test_parse_lexical_drop_counters():
    doc = make_doc(["ada", "bob"])
    text = (
        "ada | bob | born in ;"          # kept
        " ada | bob | country of ;"      # unknown relation
        " zoe | bob | born in ;"         # unknown mention
        " ada | born in ;"               # malformed: missing field
    )
    parsed = parse_lexical(text, doc, REL4)
    assert parsed.matrix == bmatrix(2, [(0, 1, 0)])
    assert parsed.dropped_unknown_relation == 1
    assert parsed.dropped_unknown_mention == 1
    assert parsed.dropped_malformed == 1


def test_parse_lexical_collapses_duplicates():
    doc = make_doc(["ada", "bob"])
    text = "ada | bob | born in ; ada | bob | born in ;"
    parsed = parse_lexical(text, doc, REL4)
    assert parsed.matrix.instance_count() == 1


def test_parse_lexical_inverts_encode_lexical():
    doc = make_doc(["ada", "bob smith", "eve"])
    m = bmatrix(3, [(0, 1, 0), (1, 2, 3), (2, 0, 2)])
    parsed = parse_lexical(encode_lexical(doc, m, REL4), doc, REL4)
    assert parsed.matrix == m


def test_symbolic_never_longer_than_lexical():
    # Token-count comparison on the same facts: the symbolic rendering of
    # a group is k+1 symbols; lexical repeats mention words and separators.
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(2, 6))
        names = [f"name{i} surname{i}" for i in range(n)]
        doc = make_doc(names)
        facts = []
        for h in range(n):
            for t in range(n):
                if h != t and rng.random() < 0.2:
                    facts.append((h, t, int(rng.integers(0, 4))))
        m = bmatrix(n, facts)
        sym = len(encode_symbolic(m, V))
        lex = len(encode_lexical(doc, m, REL4).split()) + 1  # + EOS
        assert sym <= lex


def test_mention_lookup_prefers_lowest_entity_on_ties():
    from relgen.schema import Document, Entity, Mention
    s = ("bo", "x", "bo")
    doc = Document(
        doc_id="t",
        sentences=(s,),
        entities=(
            Entity(index=0, mentions=(Mention(0, 0, 1, ("bo",)),)),
            Entity(index=1, mentions=(Mention(0, 2, 3, ("bo",)),)),
        ),
    )
    assert mention_lookup(doc)["bo"] == 0
