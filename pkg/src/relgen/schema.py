"""Core data model: documents, entities, relation types, relation matrices.

Entity indices are 0-based ordinals assigned by order of first appearance
in the document. A relation matrix stores only its nonzero cells; zero
cells are enumerated lazily. Binary matrices exclude self-pairs by
construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Iterator, Mapping

NO_RELATION_NAME = "NO_RELATION"

VALID_ARITIES = (2, 4)


@dataclass(frozen=True)
class Mention:
    """One occurrence of an entity: a token span inside one sentence."""

    sentence_id: int
    start: int
    end: int
    surface: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.sentence_id < 0:
            raise ValueError(f"negative sentence_id {self.sentence_id}")
        if not 0 <= self.start < self.end:
            raise ValueError(f"empty or inverted span [{self.start}, {self.end})")
        if len(self.surface) != self.end - self.start:
            raise ValueError(
                f"surface has {len(self.surface)} tokens for span of width "
                f"{self.end - self.start}"
            )


@dataclass(frozen=True)
class Entity:
    """A document-level entity with at least one mention.

    `index` is the entity's ordinal by first appearance; `mentions` are
    kept sorted by (sentence_id, start) so mentions[0] is the canonical
    (first-appearing) mention.
    """

    index: int
    mentions: tuple[Mention, ...]
    entity_type: str | None = None

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError(f"negative entity index {self.index}")
        if not self.mentions:
            raise ValueError(f"entity {self.index} has no mentions")
        keys = [(m.sentence_id, m.start, m.end) for m in self.mentions]
        if sorted(keys) != keys:
            raise ValueError(f"entity {self.index} mentions are not in document order")
        if len(set(keys)) != len(keys):
            raise ValueError(f"entity {self.index} has duplicate mention spans")

    @property
    def first_mention(self) -> Mention:
        return self.mentions[0]


@dataclass(frozen=True)
class Document:
    """Tokenized sentences plus the entities grounded in them."""

    doc_id: str
    sentences: tuple[tuple[str, ...], ...]
    entities: tuple[Entity, ...]

    def __post_init__(self) -> None:
        for ent in self.entities:
            for m in ent.mentions:
                if m.sentence_id >= len(self.sentences):
                    raise ValueError(
                        f"doc {self.doc_id!r}: entity {ent.index} mention in "
                        f"sentence {m.sentence_id} but document has "
                        f"{len(self.sentences)} sentences"
                    )
                sent = self.sentences[m.sentence_id]
                if m.end > len(sent):
                    raise ValueError(
                        f"doc {self.doc_id!r}: span [{m.start}, {m.end}) exceeds "
                        f"sentence {m.sentence_id} length {len(sent)}"
                    )
                if tuple(sent[m.start : m.end]) != m.surface:
                    raise ValueError(
                        f"doc {self.doc_id!r}: mention surface {m.surface} does not "
                        f"match sentence tokens {tuple(sent[m.start:m.end])}"
                    )
        indices = [e.index for e in self.entities]
        if indices != list(range(len(self.entities))):
            raise ValueError(
                f"doc {self.doc_id!r}: entity indices {indices} are not 0..n-1"
            )

    @property
    def entity_count(self) -> int:
        return len(self.entities)

    def tokens(self) -> Iterator[str]:
        for sent in self.sentences:
            yield from sent


@dataclass(frozen=True)
class RelationTypeSet:
    """The closed inventory of annotated relation types.

    `names` holds the C annotated types. The reserved NO_RELATION label
    sits at the fixed index C, after every annotated type; it never
    appears in gold matrices, only in training targets.
    """

    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.names:
            raise ValueError("relation type set is empty")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate relation type names")
        if NO_RELATION_NAME in self.names:
            raise ValueError(f"{NO_RELATION_NAME} is reserved and cannot be annotated")

    @property
    def count(self) -> int:
        """Number of annotated types, excluding NO_RELATION."""
        return len(self.names)

    @property
    def no_relation_index(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        if name == NO_RELATION_NAME:
            return self.no_relation_index
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown relation type {name!r}") from None

    def name(self, index: int) -> str:
        if index == self.no_relation_index:
            return NO_RELATION_NAME
        if not 0 <= index < len(self.names):
            raise IndexError(f"relation index {index} out of range")
        return self.names[index]

    def __contains__(self, name: str) -> bool:
        return name in self.names


@dataclass(frozen=True, order=True)
class RelationInstance:
    """One fact: an entity tuple plus its relation index.

    Ordering is lexicographic over (entities, relation), which is exactly
    row-column order, so sorting instances sorts cells.
    """

    entities: tuple[int, ...]
    relation: int

    def __post_init__(self) -> None:
        if len(self.entities) not in VALID_ARITIES:
            raise ValueError(f"arity {len(self.entities)} unsupported")
        if any(e < 0 for e in self.entities):
            raise ValueError(f"negative entity index in {self.entities}")
        if self.relation < 0:
            raise ValueError(f"negative relation index {self.relation}")
        if len(self.entities) == 2 and self.entities[0] == self.entities[1]:
            raise ValueError(f"self-pair {self.entities} is not a valid cell")

    @property
    def arity(self) -> int:
        return len(self.entities)


@dataclass(frozen=True)
class RelationMatrix:
    """Sparse relation matrix over a document's entities.

    `cells` maps an entity tuple to the nonempty set of relation indices
    holding for it (document-level RE is multi-label). Binary matrices
    never contain diagonal cells. `annotation_order`, when present, maps
    (entity tuple, relation) to its ordinal in the source annotation; it
    is carried for ordering experiments and ignored by equality.
    """

    arity: int
    slot_sizes: tuple[int, ...]
    cells: Mapping[tuple[int, ...], frozenset[int]]
    annotation_order: Mapping[tuple[tuple[int, ...], int], int] | None = field(
        default=None, compare=False, repr=False
    )

    def __post_init__(self) -> None:
        if self.arity not in VALID_ARITIES:
            raise ValueError(f"arity {self.arity} unsupported")
        if len(self.slot_sizes) != self.arity:
            raise ValueError(
                f"{len(self.slot_sizes)} slot sizes for arity {self.arity}"
            )
        if any(s <= 0 for s in self.slot_sizes):
            raise ValueError(f"non-positive slot size in {self.slot_sizes}")
        for cell, labels in self.cells.items():
            if len(cell) != self.arity:
                raise ValueError(f"cell {cell} does not match arity {self.arity}")
            for slot, e in enumerate(cell):
                if not 0 <= e < self.slot_sizes[slot]:
                    raise ValueError(
                        f"cell {cell}: slot {slot} index {e} outside "
                        f"[0, {self.slot_sizes[slot]})"
                    )
            if self.arity == 2 and cell[0] == cell[1]:
                raise ValueError(f"diagonal cell {cell} stored in binary matrix")
            if not labels:
                raise ValueError(f"cell {cell} stored with empty label set")
            if any(r < 0 for r in labels):
                raise ValueError(f"cell {cell} has negative relation index")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RelationMatrix):
            return NotImplemented
        return (
            self.arity == other.arity
            and self.slot_sizes == other.slot_sizes
            and dict(self.cells) == dict(other.cells)
        )

    def __hash__(self) -> int:
        return hash((self.arity, self.slot_sizes, frozenset(self.cells.items())))

    @property
    def is_empty(self) -> bool:
        return not self.cells

    def instance_count(self) -> int:
        return sum(len(labels) for labels in self.cells.values())

    def relations_at(self, cell: tuple[int, ...]) -> frozenset[int]:
        return self.cells.get(tuple(cell), frozenset())


def matrix_from_instances(
    instances: Iterable[RelationInstance],
    slot_sizes: tuple[int, ...],
    annotation_order: Mapping[tuple[tuple[int, ...], int], int] | None = None,
    relation_count: int | None = None,
) -> RelationMatrix:
    """Build a matrix from instances, merging duplicates set-wise.

    When `relation_count` is given, relation indices must lie in
    [0, relation_count); this keeps NO_RELATION out of gold matrices.
    """
    cells: dict[tuple[int, ...], set[int]] = {}
    arity: int | None = None
    for inst in instances:
        if arity is None:
            arity = inst.arity
        elif inst.arity != arity:
            raise ValueError(f"mixed arities {arity} and {inst.arity}")
        if relation_count is not None and inst.relation >= relation_count:
            raise ValueError(
                f"relation index {inst.relation} outside [0, {relation_count})"
            )
        cells.setdefault(inst.entities, set()).add(inst.relation)
    return RelationMatrix(
        arity=arity if arity is not None else len(slot_sizes),
        slot_sizes=tuple(slot_sizes),
        cells={c: frozenset(rs) for c, rs in cells.items()},
        annotation_order=annotation_order,
    )


def nonzero_cells(matrix: RelationMatrix) -> list[RelationInstance]:
    """All stored facts in row-column (lexicographic) order."""
    out = [
        RelationInstance(entities=cell, relation=r)
        for cell, labels in matrix.cells.items()
        for r in labels
    ]
    out.sort()
    return out


def zero_cells(matrix: RelationMatrix) -> Iterator[tuple[int, ...]]:
    """Lazily yield empty cells in row-column order.

    For binary matrices the diagonal is skipped: self-pairs are not cells
    at all, so they count as neither zero nor nonzero.
    """
    for cell in product(*(range(s) for s in matrix.slot_sizes)):
        if matrix.arity == 2 and cell[0] == cell[1]:
            continue
        if cell not in matrix.cells:
            yield cell


def all_cells(matrix: RelationMatrix) -> Iterator[tuple[int, ...]]:
    """Every addressable cell (zero or not) in row-column order."""
    for cell in product(*(range(s) for s in matrix.slot_sizes)):
        if matrix.arity == 2 and cell[0] == cell[1]:
            continue
        yield cell
