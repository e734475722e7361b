"""Grammar-constrained decoding over symbol sequences.

The grammar is positional: a sequence is zero or more groups of
(arity entity slots, then one relation symbol), terminated by EOS, which
is legal only at a group boundary. Masking is computed per step from the
decode state; every reachable non-terminal state admits at least one
token, so constrained decoding cannot wedge.

The optional strict-order mode additionally forces groups to come out in
strictly increasing row-column order. Its masks use lookahead so that a
permitted token always leaves a completable suffix.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from .codec import SymbolSequence, SymbolVocab, decode_symbolic
from .schema import RelationMatrix, RelationInstance, matrix_from_instances

# Default cap on emitted groups per sequence; documents rarely carry more
# relation instances than this.
MAX_GROUPS_DEFAULT = 40


def default_max_len(arity: int, max_groups: int = MAX_GROUPS_DEFAULT) -> int:
    return (arity + 1) * max_groups + 1


class ScoreOracle(Protocol):
    """Anything that scores the next token given emitted symbols.

    `prefix` is the decoder-side token tuple so far: for whole-sequence
    decoding the symbols emitted, for row decoding the forced row-head
    symbol followed by the symbols emitted. Scores must be deterministic
    in `prefix` and cover at least the symbol ID space.
    """

    def scores(self, prefix: tuple[int, ...]) -> np.ndarray: ...


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 4
    length_penalty: float = 1.0
    max_len: int | None = None

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            raise ValueError(f"beam size {self.beam_size} must be >= 1")
        if self.length_penalty <= 0:
            raise ValueError(f"length penalty {self.length_penalty} must be positive")


@dataclass(frozen=True)
class DecodeState:
    """Immutable decoder state: what was emitted, what may come next."""

    vocab: SymbolVocab
    slot_sizes: tuple[int, ...]
    strict: bool = False
    row_head: int | None = None  # entity ordinal whose row this decode is pinned to
    groups: tuple[tuple[tuple[int, ...], int], ...] = ()
    current: tuple[int, ...] = ()
    finished: bool = False

    def __post_init__(self) -> None:
        if len(self.slot_sizes) != self.vocab.arity:
            raise ValueError(
                f"{len(self.slot_sizes)} slot sizes for arity {self.vocab.arity}"
            )
        for slot, n in enumerate(self.slot_sizes):
            if n < 1:
                raise ValueError(f"slot {slot} size {n} must be >= 1")
            if n > self.vocab.slot_capacity(slot):
                raise ValueError(
                    f"slot {slot} needs {n} ordinals but the vocabulary block "
                    f"holds {self.vocab.slot_capacity(slot)}"
                )
        if self.row_head is not None and not 0 <= self.row_head < self.slot_sizes[0]:
            raise ValueError(f"row head {self.row_head} outside slot 0")

    @property
    def position(self) -> int:
        """0..arity-1: entity slot to fill next; arity: relation next."""
        return len(self.current)


def initial_state(
    vocab: SymbolVocab,
    slot_sizes: tuple[int, ...],
    strict: bool = False,
    row_head: int | None = None,
) -> DecodeState:
    return DecodeState(
        vocab=vocab, slot_sizes=tuple(slot_sizes), strict=strict, row_head=row_head
    )


def _slot_candidates(state: DecodeState, slot: int) -> list[int]:
    """Grammar-valid entity ordinals for the slot being filled, before any
    strict-order pruning."""
    n = state.slot_sizes[slot]
    if slot == 0 and state.row_head is not None:
        cands = [state.row_head]
    else:
        cands = list(range(n))
    if state.vocab.arity == 2 and slot == 1:
        cands = [c for c in cands if c != state.current[0]]
    return cands


def _completion_exists(state: DecodeState, slot: int, value: int) -> bool:
    """Could a group that puts `value` in `slot` still be finished? Only
    binary head choice can be dead-ended (needs a distinct tail)."""
    if state.vocab.arity == 2 and slot == 0:
        return state.slot_sizes[1] >= 2 or value != 0
    return True


def _suffix_successor_exists(state: DecodeState, q: int, head: int) -> bool:
    """Strict mode: with the open group equal to the last group through
    slot q-1 (and slot 0 carrying `head`), can slots q.. plus the relation
    strictly exceed the last group?"""
    last_t, last_r = state.groups[-1]
    k = state.vocab.arity
    if q == k:
        return last_r < state.vocab.relation_count
    lo = last_t[q]
    for v in range(lo + 1, state.slot_sizes[q]):
        if k == 2 and q == 1 and v == head:
            continue
        return True
    # Equality at this slot keeps the comparison open further right.
    return _suffix_successor_exists(state, q + 1, head)


def _strict_filter(state: DecodeState, slot: int, cands: list[int]) -> list[int]:
    if not state.groups:
        return cands
    last_t, _ = state.groups[-1]
    if state.current != last_t[: len(state.current)]:
        return cands  # an earlier slot already exceeded the last group
    out = []
    for v in cands:
        if v > last_t[slot]:
            out.append(v)
        elif v == last_t[slot]:
            head = v if slot == 0 else state.current[0]
            if _suffix_successor_exists(state, slot + 1, head):
                out.append(v)
    return out


def allowed_tokens(state: DecodeState) -> np.ndarray:
    """Sorted array of symbol IDs permitted at this state.

    Never empty for a reachable non-terminal state: EOS is always legal at
    a group boundary, and mid-group positions only arise after lookahead
    admitted the tokens that led there.
    """
    if state.finished:
        raise ValueError("sequence already terminated")
    vocab = state.vocab
    p = state.position
    if p < vocab.arity:
        cands = _slot_candidates(state, p)
        cands = [v for v in cands if _completion_exists(state, p, v)]
        if state.strict:
            cands = _strict_filter(state, p, cands)
        ids = [vocab.entity_id(p, v) for v in cands]
        if p == 0:
            ids.append(vocab.eos_id)
        return np.array(sorted(ids), dtype=np.int64)
    # Relation position.
    rels = range(vocab.relation_count + 1)
    if state.strict and state.groups:
        last_t, last_r = state.groups[-1]
        if state.current == last_t:
            rels = range(last_r + 1, vocab.relation_count + 1)
    return np.array([vocab.relation_id(r) for r in rels], dtype=np.int64)


def step(state: DecodeState, token: int) -> DecodeState:
    """Advance by one token; the token must be permitted at this state."""
    allowed = allowed_tokens(state)
    if token not in allowed:
        raise ValueError(
            f"token {token} not permitted at position {state.position} "
            f"(allowed: {allowed.tolist()})"
        )
    vocab = state.vocab
    p = state.position
    if p == 0 and token == vocab.eos_id:
        return replace(state, finished=True)
    if p < vocab.arity:
        return replace(state, current=state.current + (vocab.entity_index(p, token),))
    group = (state.current, vocab.relation_index(token))
    return replace(state, groups=state.groups + (group,), current=())


@dataclass(frozen=True)
class DecodeResult:
    sequence: SymbolSequence
    truncated: bool
    score: float | None = None


def _truncate_to_groups(ids: list[int], arity: int) -> list[int]:
    keep = (len(ids) // (arity + 1)) * (arity + 1)
    return ids[:keep]


def decode_greedy(
    oracle: ScoreOracle,
    vocab: SymbolVocab,
    slot_sizes: tuple[int, ...],
    max_len: int | None = None,
    strict: bool = False,
    row_head: int | None = None,
) -> DecodeResult:
    """Masked argmax decoding. Ties break toward the lowest symbol ID.

    The emitted sequence always parses cleanly: it either ends in EOS or,
    when the length cap interrupts, is cut back to the last complete group
    and flagged truncated.
    """
    if max_len is None:
        max_len = default_max_len(vocab.arity)
    state = initial_state(vocab, slot_sizes, strict=strict, row_head=row_head)
    start = () if row_head is None else (vocab.entity_id(0, row_head),)
    emitted: list[int] = []
    truncated = False
    while not state.finished:
        if len(emitted) >= max_len:
            truncated = True
            break
        allowed = allowed_tokens(state)
        s = np.asarray(oracle.scores(start + tuple(emitted)))
        token = int(allowed[np.argmax(s[allowed])])
        state = step(state, token)
        emitted.append(token)
    if truncated:
        emitted = _truncate_to_groups(emitted, vocab.arity)
    return DecodeResult(
        sequence=SymbolSequence(ids=tuple(emitted), arity=vocab.arity),
        truncated=truncated,
    )


def _log_softmax(values: np.ndarray) -> np.ndarray:
    m = values.max()
    z = np.exp(values - m)
    return values - m - np.log(z.sum())


def decode_beam(
    oracle: ScoreOracle,
    vocab: SymbolVocab,
    slot_sizes: tuple[int, ...],
    config: BeamConfig | None = None,
    strict: bool = False,
    row_head: int | None = None,
) -> DecodeResult:
    """Beam search under the same masks.

    Scores are log-probabilities renormalized over the permitted tokens;
    finished hypotheses compete on total log-probability divided by
    length ** length_penalty. Deterministic: ties break toward the
    lexicographically smaller sequence.
    """
    if config is None:
        config = BeamConfig()
    max_len = config.max_len or default_max_len(vocab.arity)
    start = () if row_head is None else (vocab.entity_id(0, row_head),)
    init = initial_state(vocab, slot_sizes, strict=strict, row_head=row_head)
    beams: list[tuple[DecodeState, tuple[int, ...], float]] = [(init, (), 0.0)]
    done: list[tuple[tuple[int, ...], float, bool]] = []  # ids, logp, truncated
    while beams:
        candidates: list[tuple[float, tuple[int, ...], DecodeState]] = []
        for state, ids, logp in beams:
            if len(ids) >= max_len:
                done.append((ids, logp, True))
                continue
            allowed = allowed_tokens(state)
            s = np.asarray(oracle.scores(start + ids), dtype=np.float64)
            logps = _log_softmax(s[allowed])
            for tok, lp in zip(allowed.tolist(), logps.tolist()):
                candidates.append((logp + lp, ids + (tok,), step(state, int(tok))))
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beams = []
        for logp, ids, state in candidates[: config.beam_size]:
            if state.finished:
                done.append((ids, logp, False))
            else:
                beams.append((state, ids, logp))

    def final_score(item: tuple[tuple[int, ...], float, bool]) -> float:
        ids, logp, _ = item
        return logp / max(len(ids), 1) ** config.length_penalty

    done.sort(key=lambda item: (-final_score(item), item[0]))
    ids, logp, truncated = done[0]
    out = list(ids)
    if truncated:
        out = _truncate_to_groups(out, vocab.arity)
    return DecodeResult(
        sequence=SymbolSequence(ids=tuple(out), arity=vocab.arity),
        truncated=truncated,
        score=final_score((ids, logp, truncated)),
    )


@dataclass(frozen=True)
class RowDecodeOutcome:
    """Merged matrix plus per-row sequences and flags."""

    matrix: RelationMatrix
    rows: dict[int, DecodeResult] = field(repr=False)
    truncated_rows: tuple[int, ...]

    @property
    def any_truncated(self) -> bool:
        return bool(self.truncated_rows)


def decode_rows_parallel(
    oracle: ScoreOracle,
    vocab: SymbolVocab,
    slot_sizes: tuple[int, ...],
    config: BeamConfig | None = None,
    strict: bool = False,
    use_beam: bool = False,
    max_workers: int | None = None,
) -> RowDecodeOutcome:
    """Decode every row independently and merge.

    Each row decode forces the row-head symbol as the decoder start token
    and pins group heads to that row; rows therefore produce disjoint
    cells and the merge is order-independent. Results are merged by row
    index, so scheduling cannot perturb the outcome.
    """
    max_len = (config.max_len if config else None) or default_max_len(vocab.arity)

    def one_row(r: int) -> DecodeResult:
        if use_beam:
            row_cfg = config or BeamConfig()
            return decode_beam(
                oracle, vocab, slot_sizes, config=row_cfg, strict=strict, row_head=r
            )
        return decode_greedy(
            oracle, vocab, slot_sizes, max_len=max_len, strict=strict, row_head=r
        )

    n_rows = slot_sizes[0]
    with ThreadPoolExecutor(max_workers=max_workers or min(8, n_rows or 1)) as pool:
        results = list(pool.map(one_row, range(n_rows)))

    instances: list[RelationInstance] = []
    seen: set[tuple[tuple[int, ...], int]] = set()
    truncated = []
    rows: dict[int, DecodeResult] = {}
    for r, res in enumerate(results):
        rows[r] = res
        if res.truncated:
            truncated.append(r)
        parse = decode_symbolic(res.sequence, vocab, slot_sizes=tuple(slot_sizes))
        for inst in sorted(
            RelationInstance(entities=c, relation=rel)
            for c, rels in parse.matrix.cells.items()
            for rel in rels
        ):
            key = (inst.entities, inst.relation)
            if key not in seen:  # rows are disjoint; guard anyway
                seen.add(key)
                instances.append(inst)
    if instances:
        matrix = matrix_from_instances(instances, slot_sizes=tuple(slot_sizes))
    else:
        matrix = RelationMatrix(
            arity=vocab.arity, slot_sizes=tuple(slot_sizes), cells={}
        )
    return RowDecodeOutcome(
        matrix=matrix, rows=rows, truncated_rows=tuple(truncated)
    )
