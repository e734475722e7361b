import numpy as np
import pytest

from relgen.codec import SymbolVocab, decode_symbolic, encode_symbolic
from relgen.decoding import (
    BeamConfig,
    allowed_tokens,
    decode_beam,
    decode_greedy,
    decode_rows_parallel,
    default_max_len,
    initial_state,
    step,
)
from relgen.schema import RelationInstance
from helpers import bmatrix

V = SymbolVocab.default(relation_count=4)
V4 = SymbolVocab.default(relation_count=4, arity=4)


def mask_ids(state):
    # allowed_tokens returns the sorted permitted IDs themselves.
    return set(allowed_tokens(state).tolist())


class ScriptedOracle:
    """Emits a fixed id sequence: huge score on the scripted token."""

    def __init__(self, ids, size):
        self.ids = tuple(ids)
        self.size = size

    def scores(self, prefix):
        s = np.full(self.size, -100.0)
        pos = len(prefix)
        if pos < len(self.ids):
            s[self.ids[pos]] = 100.0
        return s


class RowScriptedOracle(ScriptedOracle):
    """Scripted per row head symbol; prefix starts with the forced head."""

    def __init__(self, per_head, size):
        self.per_head = {h: tuple(ids) for h, ids in per_head.items()}
        self.size = size

    def scores(self, prefix):
        ids = self.per_head[prefix[0]]
        s = np.full(self.size, -100.0)
        pos = len(prefix) - 1
        if pos < len(ids):
            s[ids[pos]] = 100.0
        return s


class ConstOracle:
    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def scores(self, prefix):
        return self.values


# --- allowed_tokens ----------------------------------------------------------

def test_fresh_state_allows_entities_and_eos():
    state = initial_state(V, (3, 3))
    assert mask_ids(state) == {0, 1, 2, 3}


def test_after_full_pair_only_relations_allowed():
    state = step(step(initial_state(V, (3, 3)), 1), 2)
    # Relation block plus NO_RELATION, nothing else.
    assert mask_ids(state) == {101, 102, 103, 104, 105}


def test_tail_slot_excludes_head_ordinal():
    state = step(initial_state(V, (3, 3)), 2)  # head ordinal 1
    assert mask_ids(state) == {1, 3}


def test_quaternary_slot_masks_follow_blocks():
    state = initial_state(V4, (2, 2, 2, 2))
    assert mask_ids(state) == {0, 1, 2}          # slot-0 block + EOS
    state = step(state, 1)
    assert mask_ids(state) == {26, 27}           # slot-1 block
    state = step(state, 26)
    assert mask_ids(state) == {51, 52}           # slot-2 block
    state = step(state, 51)
    assert mask_ids(state) == {76, 77}           # slot-3 block
    state = step(state, 76)
    assert mask_ids(state) == {101, 102, 103, 104, 105}


def test_row_head_pins_first_slot():
    state = initial_state(V, (4, 4), row_head=2)
    assert mask_ids(state) == {0, 3}  # only <3> (ordinal 2) or EOS


def test_strict_mode_orders_cell_relation_tuples():
    state = initial_state(V, (3, 3), strict=True)
    state = step(step(step(state, 1), 2), 101)  # emitted ((0, 1), r0)
    assert mask_ids(state) == {0, 1, 2, 3}
    state2 = step(state, 1)
    # Same head: tail 1 is re-enterable only because higher relations
    # remain for cell (0, 1); tail 2 advances the cell.
    assert mask_ids(state2) == {2, 3}
    state3 = step(state2, 2)  # cell (0, 1) again
    assert mask_ids(state3) == {102, 103, 104, 105}  # r0 already spent


def test_strict_mode_never_dead_ends_after_last_tuple():
    state = initial_state(V, (2, 2), strict=True)
    # Finish on the maximal tuple: cell (1, 0) with the top relation ID.
    for tok in (1, 2, 101, 2, 1, 105):
        state = step(state, tok)
    assert mask_ids(state) == {0}


def test_mask_never_empty_on_random_walks():
    rng = np.random.default_rng(0)
    for _ in range(200):
        strict = bool(rng.integers(2))
        state = initial_state(V, (3, 3), strict=strict)
        for _ in range(40):
            if state.finished:
                break
            ids = sorted(mask_ids(state))
            assert ids, "empty mask in non-terminal state"
            state = step(state, int(rng.choice(ids)))


# --- step --------------------------------------------------------------------

def test_step_advances_and_completes_groups():
    state = initial_state(V, (3, 3))
    state = step(state, 1)
    assert state.position == 1 and not state.groups
    state = step(state, 3)
    assert state.position == 2
    state = step(state, 103)
    assert state.groups == (((0, 2), 2),)
    assert state.position == 0


def test_step_eos_finalizes():
    state = step(initial_state(V, (3, 3)), 0)
    assert state.finished


def test_step_rejects_disallowed_token():
    state = step(initial_state(V, (3, 3)), 1)
    with pytest.raises(ValueError):
        step(state, 0)  # EOS is illegal mid-group
    with pytest.raises(ValueError):
        step(state, 1)  # self-pair tail


def test_step_rejects_after_finish():
    state = step(initial_state(V, (3, 3)), 0)
    with pytest.raises(ValueError):
        step(state, 1)


# --- decode_greedy -----------------------------------------------------------

def test_greedy_eos_maximizer_yields_bare_eos():
    oracle = ConstOracle(np.linspace(1.0, 0.0, V.total_size))  # EOS highest
    out = decode_greedy(oracle, V, (3, 3))
    assert out.sequence.ids == (0,)
    assert not out.truncated


def test_greedy_reproduces_scripted_target():
    target = encode_symbolic(bmatrix(4, [(0, 1, 0), (2, 3, 3)]), V)
    oracle = ScriptedOracle(target.ids, V.total_size)
    out = decode_greedy(oracle, V, (4, 4))
    assert out.sequence.ids == target.ids


def test_greedy_truncates_at_last_complete_group():
    # Oracle never emits EOS: decode runs to max_len and flags truncation;
    # the emitted prefix still parses with zero malformed groups.
    oracle = ConstOracle(np.linspace(0.0, 1.0, V.total_size))
    out = decode_greedy(oracle, V, (3, 3), max_len=8)
    assert out.truncated
    assert len(out.sequence.ids) <= 8
    parsed = decode_symbolic(out.sequence, V, slot_sizes=(3, 3))
    assert parsed.malformed_groups == 0


def test_greedy_fuzz_outputs_always_parse():
    rng = np.random.default_rng(29)
    for vocab, sizes in ((V, (3, 3)), (V4, (2, 2, 2, 2))):
        for _ in range(300):
            oracle = ConstOracle(rng.normal(size=vocab.total_size))
            out = decode_greedy(oracle, vocab, sizes, max_len=30)
            parsed = decode_symbolic(out.sequence, vocab, slot_sizes=sizes)
            assert parsed.malformed_groups == 0


# --- decode_beam -------------------------------------------------------------

def test_beam_one_equals_greedy():
    rng = np.random.default_rng(31)
    for _ in range(40):
        # Static logits make the walk deterministic for both searches.
        oracle = ConstOracle(rng.normal(size=V.total_size))
        greedy = decode_greedy(oracle, V, (3, 3), max_len=16)
        beam = decode_beam(oracle, V, (3, 3),
                           BeamConfig(beam_size=1, max_len=16))
        assert beam.sequence.ids == greedy.sequence.ids


def rescore(oracle, ids, alpha=1.0):
    """The beam's own objective: allowed-token log-softmax summed over the
    emitted path, divided by length ** alpha."""
    state = initial_state(V, (3, 3))
    total, prefix = 0.0, ()
    for t in ids:
        allowed = allowed_tokens(state)
        s = np.asarray(oracle.scores(prefix), dtype=np.float64)[allowed]
        z = np.exp(s - s.max())
        total += float(s[list(allowed).index(t)] - s.max() - np.log(z.sum()))
        state = step(state, t)
        prefix = prefix + (t,)
    return total / len(ids) ** alpha


def test_beam_score_dominates_greedy():
    class PrefixOracle:
        # Scores vary with the prefix so beam can find better paths.
        def __init__(self, seed):
            self.seed = seed
            self.cache = {}

        def scores(self, prefix):
            if prefix not in self.cache:
                key = [self.seed, len(prefix)] + [int(t) for t in prefix]
                rng = np.random.default_rng(np.random.SeedSequence(key))
                self.cache[prefix] = rng.normal(size=V.total_size)
            return self.cache[prefix]

    for seed in range(10):
        oracle = PrefixOracle(seed)
        greedy = decode_greedy(oracle, V, (3, 3), max_len=10)
        beam = decode_beam(oracle, V, (3, 3),
                           BeamConfig(beam_size=4, length_penalty=1.0, max_len=10))
        assert (rescore(oracle, beam.sequence.ids)
                >= rescore(oracle, greedy.sequence.ids) - 1e-9)


def test_length_penalty_swings_hypothesis_choice():
    # Two hypotheses: bare EOS (one cheap-but-imperfect step) vs a triple
    # whose first step is costlier and whose remaining steps are ~free.
    # Log-probs are negative, so dividing by length**alpha helps the long
    # hypothesis as alpha grows; the crossover sits at alpha ~ 0.62.
    class TwoPathOracle:
        def scores(self, prefix):
            s = np.full(V.total_size, -10.0)
            if prefix == ():
                s[0] = 1.0    # logp(EOS) = -0.441 after masking
                s[1] = 0.4    # logp(<1>) = -1.041
            elif prefix == (1,):
                s[2] = 10.0
            elif prefix == (1, 2):
                s[101] = 10.0
            elif prefix == (1, 2, 101):
                s[0] = 10.0
            return s

    picks = {}
    for alpha in [round(0.2 * k, 1) for k in range(1, 11)]:
        out = decode_beam(TwoPathOracle(), V, (3, 3),
                          BeamConfig(beam_size=4, length_penalty=alpha, max_len=8))
        picks[alpha] = out.sequence.ids
    assert picks[0.2] == (0,)
    assert picks[2.0] == (1, 2, 101, 0)
    assert set(picks.values()) == {(0,), (1, 2, 101, 0)}


def test_beam_rejects_bad_config():
    with pytest.raises(ValueError):
        BeamConfig(beam_size=0)
    with pytest.raises(ValueError):
        BeamConfig(length_penalty=0.0)


# --- decode_rows_parallel ----------------------------------------------------

def test_row_decode_emits_only_that_row():
    per_head = {
        1: (1, 2, 101, 0),            # row of entity ordinal 0
        2: (2, 1, 103, 2, 3, 101, 0),  # row of ordinal 1: two groups
        3: (0,),                       # ordinal 2: empty row
    }
    oracle = RowScriptedOracle(per_head, V.total_size)
    out = decode_rows_parallel(oracle, V, (3, 3))
    assert out.matrix == bmatrix(3, [(0, 1, 0), (1, 0, 2), (1, 2, 0)])
    assert out.truncated_rows == ()


def test_row_decode_single_entity_document_is_empty():
    oracle = ConstOracle(np.zeros(V.total_size))
    out = decode_rows_parallel(oracle, V, (1, 1))
    assert out.matrix.is_empty


def test_row_decode_merge_is_deterministic_across_worker_counts():
    rng = np.random.default_rng(37)
    values = rng.normal(size=V.total_size)
    a = decode_rows_parallel(ConstOracle(values), V, (5, 5), max_workers=1)
    b = decode_rows_parallel(ConstOracle(values), V, (5, 5), max_workers=4)
    assert a.matrix == b.matrix


def test_row_factorized_oracle_matches_whole_sequence_greedy():
    # When each row's continuation depends only on that row's prefix, the
    # merged row decode must equal whole-sequence greedy decoding.
    m = bmatrix(4, [(0, 2, 1), (1, 3, 0), (3, 0, 2)])
    whole = encode_symbolic(m, V)
    per_head = {}
    groups_by_head = {}
    for inst in sorted(m.cells):
        pass
    from relgen.schema import nonzero_cells
    for inst in nonzero_cells(m):
        groups_by_head.setdefault(inst.entities[0], []).append(inst)
    for h in range(4):
        ids = []
        for inst in groups_by_head.get(h, []):
            ids.extend([V.entity_id(0, inst.entities[0]),
                        V.entity_id(1, inst.entities[1]),
                        V.relation_id(inst.relation)])
        ids.append(0)
        per_head[V.entity_id(0, h)] = tuple(ids)
    rows = decode_rows_parallel(RowScriptedOracle(per_head, V.total_size), V, (4, 4))
    whole_out = decode_greedy(ScriptedOracle(whole.ids, V.total_size), V, (4, 4))
    assert rows.matrix == decode_symbolic(whole_out.sequence, V, (4, 4)).matrix


def test_row_decode_flags_truncated_rows_independently():
    per_head = {
        1: (1, 2, 101) * 30 + (0,),  # rambles past the budget
        2: (0,),
        3: (0,),
    }
    oracle = RowScriptedOracle(per_head, V.total_size)
    out = decode_rows_parallel(oracle, V, (3, 3),
                               config=BeamConfig(max_len=10))
    assert out.truncated_rows == (0,)


# --- misc ---------------------------------------------------------------------

def test_default_max_len_formula():
    assert default_max_len(2) == 3 * 40 + 1
    assert default_max_len(4, max_groups=10) == 51
