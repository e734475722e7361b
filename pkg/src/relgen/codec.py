"""Codecs between relation matrices and flat sequences.

The symbolic codec maps each fact to a fixed-width group of reserved
symbol IDs (entity slots, then the relation) and terminates the sequence
with EOS. Entity symbols encode the entity's in-document ordinal, not its
surface, so the mapping is bijective given the order. The lexical codec
renders the same facts as mention text and relation names.
"""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .negsample import NegSamplePlan
from .schema import (
    Document,
    RelationInstance,
    RelationMatrix,
    RelationTypeSet,
    matrix_from_instances,
    nonzero_cells,
)

EOS_ID = 0

# Default ID layout: entities occupy [1, 100], relations [101, 200].
DEFAULT_ENTITY_CAPACITY = 100
DEFAULT_RELATION_CAPACITY = 100


@dataclass(frozen=True)
class SymbolVocab:
    """Reserved-symbol ID layout for one arity.

    `entity_ranges` holds one (start, size) block per entity slot; binary
    uses a single block for both slots, 4-ary slices the entity capacity
    into four equal blocks. `relation_range` is the (start, size) block for
    relation symbols; annotated relation r maps to start + r and the
    NO_RELATION marker sits at start + relation_count.
    """

    arity: int
    entity_ranges: tuple[tuple[int, int], ...]
    relation_range: tuple[int, int]
    relation_count: int
    eos_id: int = EOS_ID

    def __post_init__(self) -> None:
        if self.arity not in (2, 4):
            raise ValueError(f"arity {self.arity} unsupported")
        blocks = list(self.entity_ranges) + [self.relation_range]
        spans = []
        for start, size in blocks:
            if size <= 0 or start <= self.eos_id:
                raise ValueError(f"bad symbol block ({start}, {size})")
            spans.append((start, start + size))
        spans.sort()
        for (_, end_a), (start_b, _) in zip(spans, spans[1:]):
            if start_b < end_a:
                raise ValueError("overlapping symbol blocks")
        if not 0 < self.relation_count + 1 <= self.relation_range[1]:
            raise ValueError(
                f"{self.relation_count} relation types plus NO_RELATION do not "
                f"fit in a block of {self.relation_range[1]}"
            )
        expected = 1 if self.arity == 2 else 4
        if len(self.entity_ranges) != expected:
            raise ValueError(
                f"arity {self.arity} needs {expected} entity blocks, got "
                f"{len(self.entity_ranges)}"
            )

    @classmethod
    def default(
        cls,
        relation_count: int,
        arity: int = 2,
        entity_capacity: int = DEFAULT_ENTITY_CAPACITY,
        relation_capacity: int = DEFAULT_RELATION_CAPACITY,
    ) -> "SymbolVocab":
        if arity == 2:
            ranges = ((1, entity_capacity),)
        elif arity == 4:
            if entity_capacity % 4:
                raise ValueError(f"entity capacity {entity_capacity} not divisible by 4")
            width = entity_capacity // 4
            ranges = tuple((1 + slot * width, width) for slot in range(4))
        else:
            raise ValueError(f"arity {arity} unsupported")
        return cls(
            arity=arity,
            entity_ranges=ranges,
            relation_range=(1 + entity_capacity, relation_capacity),
            relation_count=relation_count,
        )

    def _slot_range(self, slot: int) -> tuple[int, int]:
        # Binary shares one block across both slots.
        return self.entity_ranges[0 if self.arity == 2 else slot]

    def slot_capacity(self, slot: int) -> int:
        return self._slot_range(slot)[1]

    def entity_id(self, slot: int, index: int) -> int:
        start, size = self._slot_range(slot)
        if not 0 <= index < size:
            raise ValueError(
                f"entity ordinal {index} exceeds slot {slot} capacity {size}"
            )
        return start + index

    def entity_index(self, slot: int, symbol: int) -> int:
        start, size = self._slot_range(slot)
        if not start <= symbol < start + size:
            raise ValueError(f"symbol {symbol} not in entity slot {slot}")
        return symbol - start

    def is_entity_symbol(self, slot: int, symbol: int) -> bool:
        start, size = self._slot_range(slot)
        return start <= symbol < start + size

    def relation_id(self, index: int) -> int:
        if not 0 <= index <= self.relation_count:
            raise ValueError(f"relation index {index} out of range")
        return self.relation_range[0] + index

    def relation_index(self, symbol: int) -> int:
        start = self.relation_range[0]
        if not start <= symbol <= start + self.relation_count:
            raise ValueError(f"symbol {symbol} not a relation symbol")
        return symbol - start

    def is_relation_symbol(self, symbol: int) -> bool:
        start = self.relation_range[0]
        return start <= symbol <= start + self.relation_count

    @property
    def no_relation_id(self) -> int:
        return self.relation_range[0] + self.relation_count

    @property
    def total_size(self) -> int:
        """One past the highest reserved ID (EOS included)."""
        tops = [s + n for s, n in self.entity_ranges]
        tops.append(self.relation_range[0] + self.relation_range[1])
        return max(tops)

    def describe(self) -> str:
        """Deterministic one-line-per-ID dump of the whole layout."""
        roles: dict[int, str] = {self.eos_id: "eos"}
        slots = range(1) if self.arity == 2 else range(4)
        for slot in slots:
            start, size = self._slot_range(slot)
            tag = "entity" if self.arity == 2 else f"entity_slot{slot}"
            for k in range(size):
                roles[start + k] = f"{tag}:{k}"
        start = self.relation_range[0]
        for k in range(self.relation_range[1]):
            if k < self.relation_count:
                roles[start + k] = f"relation:{k}"
            elif k == self.relation_count:
                roles[start + k] = "no_relation"
            else:
                roles[start + k] = "relation_unused"
        return "\n".join(f"{i}\t{roles[i]}" for i in sorted(roles))


@dataclass(frozen=True)
class SymbolSequence:
    """A flat run of symbol IDs, EOS-terminated when well formed.

    Construction does not enforce the group grammar: model output must be
    representable even when malformed. Use `is_well_formed` to check.
    """

    ids: tuple[int, ...]
    arity: int

    def __len__(self) -> int:
        return len(self.ids)

    def is_well_formed(self, vocab: SymbolVocab) -> bool:
        ids = self.ids
        if not ids or ids[-1] != vocab.eos_id:
            return False
        body = ids[:-1]
        k = self.arity
        if len(body) % (k + 1):
            return False
        for g in range(len(body) // (k + 1)):
            group = body[g * (k + 1) : (g + 1) * (k + 1)]
            for slot in range(k):
                if not vocab.is_entity_symbol(slot, group[slot]):
                    return False
            if not vocab.is_relation_symbol(group[k]):
                return False
            if k == 2 and group[0] == group[1]:
                return False
        return True

    def render(self) -> str:
        return " ".join(f"<{i}>" for i in self.ids)


_SYMBOL_RE = re.compile(r"<(\d+)>|(\d+)")


def parse_symbol_text(text: str) -> tuple[int, ...]:
    """Read a rendered sequence; both "<1> <2>" and raw "1 2" forms parse."""
    ids = []
    for tok in text.split():
        m = _SYMBOL_RE.fullmatch(tok)
        if not m:
            raise ValueError(f"unparseable symbol token {tok!r}")
        ids.append(int(m.group(1) or m.group(2)))
    return tuple(ids)


@dataclass(frozen=True)
class OrderKind:
    """How facts are serialized: fixed row-column scan, the order they were
    annotated in, or a seeded shuffle (stable per document)."""

    kind: str
    seed: int | None = None

    _KINDS = ("row_column", "annotation", "random")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown order kind {self.kind!r}")
        if self.kind == "random" and self.seed is None:
            raise ValueError("random order requires a seed")

    @classmethod
    def row_column(cls) -> "OrderKind":
        return cls("row_column")

    @classmethod
    def annotation(cls) -> "OrderKind":
        return cls("annotation")

    @classmethod
    def random(cls, seed: int) -> "OrderKind":
        return cls("random", seed=seed)


def order_cells(
    instances: Sequence[RelationInstance],
    order: OrderKind,
    annotation_order: Mapping[tuple[tuple[int, ...], int], int] | None = None,
    doc_id: str = "",
) -> list[RelationInstance]:
    """Arrange facts for serialization.

    Row-column sorts lexicographically. Annotation order follows the
    recorded ordinals and fails loudly when one is missing. Random applies
    a permutation drawn from (seed, doc_id), so a rerun is stable but
    different documents shuffle differently.
    """
    if order.kind == "row_column":
        return sorted(instances)
    if order.kind == "annotation":
        if annotation_order is None:
            raise ValueError("annotation order requested but none recorded")
        try:
            return sorted(
                instances, key=lambda t: annotation_order[(t.entities, t.relation)]
            )
        except KeyError as exc:
            raise ValueError(f"no annotation ordinal for fact {exc}") from None
    rng = np.random.default_rng(
        np.random.SeedSequence([order.seed, zlib.crc32(doc_id.encode())])
    )
    base = sorted(instances)
    return [base[i] for i in rng.permutation(len(base))]


def encode_symbolic(
    matrix: RelationMatrix,
    vocab: SymbolVocab,
    order: OrderKind | None = None,
    plan: NegSamplePlan | None = None,
    doc_id: str = "",
) -> SymbolSequence:
    """Serialize a matrix (plus any sampled negative cells) to symbols.

    Negative cells are emitted as groups whose relation is the NO_RELATION
    marker. Under row-column order positives and negatives interleave in
    one lexicographic scan; under annotation order the sampled negatives
    follow the annotated facts in row-column order; under random order the
    union is shuffled together.
    """
    if order is None:
        order = OrderKind.row_column()
    if matrix.arity != vocab.arity:
        raise ValueError(f"matrix arity {matrix.arity} vs vocab arity {vocab.arity}")
    positives = nonzero_cells(matrix)
    negatives = [
        RelationInstance(entities=c, relation=vocab.relation_count)
        for c in sorted(plan.cells)
    ] if plan is not None else []
    for cell in (plan.cells if plan is not None else ()):
        if matrix.relations_at(cell):
            raise ValueError(f"sampled cell {cell} is not empty")

    if order.kind == "annotation":
        ordered = order_cells(
            positives, order, matrix.annotation_order, doc_id
        ) + sorted(negatives)
    elif order.kind == "random":
        ordered = order_cells(positives + negatives, order, doc_id=doc_id)
    else:
        ordered = sorted(positives + negatives)

    ids: list[int] = []
    for inst in ordered:
        for slot, e in enumerate(inst.entities):
            ids.append(vocab.entity_id(slot, e))
        ids.append(vocab.relation_id(inst.relation))
    ids.append(vocab.eos_id)
    return SymbolSequence(ids=tuple(ids), arity=matrix.arity)


@dataclass(frozen=True)
class SymbolicParse:
    """Decoded matrix plus a count of discarded malformed groups."""

    matrix: RelationMatrix
    malformed_groups: int


def decode_symbolic(
    sequence: SymbolSequence | Sequence[int],
    vocab: SymbolVocab,
    slot_sizes: tuple[int, ...] | None = None,
) -> SymbolicParse:
    """Parse symbols back to a matrix, tolerantly.

    Scans complete groups until EOS (or end of input); NO_RELATION groups
    are dropped, duplicate (cell, relation) pairs keep the first
    occurrence, and any trailing fragment that breaks the grammar is
    discarded with its (k+1)-sized chunks counted as malformed. A group
    whose entity ordinal exceeds `slot_sizes` also stops the scan.

    Without explicit `slot_sizes` the sizes are inferred as the smallest
    square (binary) or per-slot (4-ary) hull of the decoded ordinals.
    """
    if isinstance(sequence, SymbolSequence):
        if sequence.arity != vocab.arity:
            raise ValueError(
                f"sequence arity {sequence.arity} vs vocab arity {vocab.arity}"
            )
        ids: Sequence[int] = sequence.ids
    else:
        ids = list(sequence)
    k = vocab.arity
    kept: list[RelationInstance] = []
    seen: set[tuple[tuple[int, ...], int]] = set()
    malformed = 0
    pos = 0
    clean = True
    while pos < len(ids):
        if ids[pos] == vocab.eos_id:
            pos += 1
            break
        group = ids[pos : pos + k + 1]
        ok = len(group) == k + 1
        ordinals: list[int] = []
        if ok:
            for slot in range(k):
                if not vocab.is_entity_symbol(slot, group[slot]):
                    ok = False
                    break
                o = vocab.entity_index(slot, group[slot])
                if slot_sizes is not None and o >= slot_sizes[slot]:
                    ok = False
                    break
                ordinals.append(o)
        if ok and not vocab.is_relation_symbol(group[k]):
            ok = False
        if ok and k == 2 and ordinals[0] == ordinals[1]:
            ok = False
        if not ok:
            clean = False
            break
        rel = vocab.relation_index(group[k])
        if rel != vocab.relation_count:  # drop NO_RELATION groups
            key = (tuple(ordinals), rel)
            if key not in seen:
                seen.add(key)
                kept.append(RelationInstance(entities=tuple(ordinals), relation=rel))
        pos += k + 1
    if not clean:
        tail = len(ids) - pos
        malformed = -(-tail // (k + 1))  # ceil: whole fragment, in group chunks

    if slot_sizes is None:
        if k == 2:
            n = max((max(t.entities) for t in kept), default=-1) + 1
            slot_sizes = (max(n, 1), max(n, 1))
        else:
            sizes = [1, 1, 1, 1]
            for t in kept:
                for slot, e in enumerate(t.entities):
                    sizes[slot] = max(sizes[slot], e + 1)
            slot_sizes = tuple(sizes)
    matrix = matrix_from_instances(kept, slot_sizes=tuple(slot_sizes))
    return SymbolicParse(matrix=matrix, malformed_groups=malformed)


# ---------------------------------------------------------------------------
# Lexical codec: the text-surface baseline.

FIELD_SEP = "|"
GROUP_SEP = ";"


def _canonical_surface(doc: Document, entity_index: int) -> str:
    return " ".join(doc.entities[entity_index].first_mention.surface)


def encode_lexical(
    doc: Document,
    matrix: RelationMatrix,
    relations: RelationTypeSet,
    order: OrderKind | None = None,
) -> str:
    """Render facts as text: canonical head mention, separator, canonical
    tail mention(s), separator, relation name, group terminator. An empty
    matrix renders as the empty string (the model target is then just EOS).
    """
    if order is None:
        order = OrderKind.row_column()
    ordered = order_cells(
        nonzero_cells(matrix), order, matrix.annotation_order, doc.doc_id
    )
    groups = []
    for inst in ordered:
        fields = [_canonical_surface(doc, e) for e in inst.entities]
        fields.append(relations.name(inst.relation))
        groups.append(f" {FIELD_SEP} ".join(fields) + f" {GROUP_SEP}")
    return " ".join(groups)


@dataclass(frozen=True)
class LexicalParse:
    """Decoded matrix plus per-category counts of dropped groups."""

    matrix: RelationMatrix
    dropped_unknown_mention: int
    dropped_unknown_relation: int
    dropped_malformed: int


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def mention_lookup(doc: Document) -> dict[str, int]:
    """Normalized mention surface -> entity index; ties go to the lowest
    entity index so resolution is deterministic."""
    table: dict[str, int] = {}
    for ent in doc.entities:
        for m in ent.mentions:
            key = _normalize(" ".join(m.surface))
            if key not in table:
                table[key] = ent.index
    return table


def parse_lexical(
    text: str,
    doc: Document,
    relations: RelationTypeSet,
    arity: int = 2,
) -> LexicalParse:
    """Parse rendered facts back to a matrix, resolving mentions against
    the document.

    Groups with the wrong field count (or that resolve to a self-pair)
    count as malformed; groups naming an unresolvable mention or an
    unknown relation are dropped under their own counters. Duplicate facts
    collapse.
    """
    table = mention_lookup(doc)
    n = doc.entity_count
    slot_sizes = (n,) * arity
    kept: list[RelationInstance] = []
    seen: set[tuple[tuple[int, ...], int]] = set()
    unknown_mention = unknown_relation = malformed = 0
    for raw in text.split(GROUP_SEP):
        raw = raw.strip()
        if not raw:
            continue
        fields = [f.strip() for f in raw.split(FIELD_SEP)]
        if len(fields) != arity + 1:
            malformed += 1
            continue
        ents: list[int] = []
        missing = False
        for f in fields[:arity]:
            e = table.get(_normalize(f))
            if e is None:
                missing = True
                break
            ents.append(e)
        if missing:
            unknown_mention += 1
            continue
        rel_name = " ".join(fields[arity].split())
        if rel_name not in relations:
            unknown_relation += 1
            continue
        if arity == 2 and ents[0] == ents[1]:
            malformed += 1
            continue
        key = (tuple(ents), relations.index(rel_name))
        if key not in seen:
            seen.add(key)
            kept.append(RelationInstance(entities=key[0], relation=key[1]))
    if kept:
        matrix = matrix_from_instances(kept, slot_sizes=slot_sizes)
    else:
        matrix = RelationMatrix(arity=arity, slot_sizes=slot_sizes, cells={})
    return LexicalParse(
        matrix=matrix,
        dropped_unknown_mention=unknown_mention,
        dropped_unknown_relation=unknown_relation,
        dropped_malformed=malformed,
    )
