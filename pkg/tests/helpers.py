"""Hand-rolled fixtures shared across test modules."""
from __future__ import annotations

from relgen.schema import (
    Document,
    Entity,
    Mention,
    RelationInstance,
    RelationMatrix,
    RelationTypeSet,
    matrix_from_instances,
)


def make_doc(names: list[str], doc_id: str = "d0",
             aliases: dict[int, str] | None = None) -> Document:
    """One-sentence-per-entity document; entity i's canonical mention is
    names[i]. `aliases` adds one extra single-token mention per entity in
    a trailing sentence, for coreference fixtures.
    """
    sentences = []
    entities = []
    for i, name in enumerate(names):
        toks = tuple(name.split())
        sentences.append(toks + ("speaks",))
        mentions = [Mention(sentence_id=i, start=0, end=len(toks), surface=toks)]
        entities.append((i, mentions))
    if aliases:
        extra = tuple(aliases[k] for k in sorted(aliases))
        sentences.append(extra)
        for pos, i in enumerate(sorted(aliases)):
            entities[i][1].append(
                Mention(sentence_id=len(sentences) - 1, start=pos, end=pos + 1,
                        surface=(extra[pos],))
            )
    return Document(
        doc_id=doc_id,
        sentences=tuple(sentences),
        entities=tuple(Entity(index=i, mentions=tuple(ms)) for i, ms in entities),
    )


def bmatrix(n: int, facts: list[tuple[int, int, int]],
            annotation_order: dict | None = None) -> RelationMatrix:
    """Binary matrix over n entities from (head, tail, relation) triples."""
    insts = [RelationInstance(entities=(h, t), relation=r) for h, t, r in facts]
    if not insts:
        return RelationMatrix(arity=2, slot_sizes=(n, n), cells={},
                              annotation_order=annotation_order)
    return matrix_from_instances(insts, slot_sizes=(n, n),
                                 annotation_order=annotation_order)


def qmatrix(sizes: tuple[int, int, int, int],
            facts: list[tuple[tuple[int, int, int, int], int]]) -> RelationMatrix:
    """4-ary matrix from ((a, b, c, d), relation) pairs."""
    insts = [RelationInstance(entities=e, relation=r) for e, r in facts]
    if not insts:
        return RelationMatrix(arity=4, slot_sizes=sizes, cells={})
    return matrix_from_instances(insts, slot_sizes=sizes)


REL4 = RelationTypeSet(names=("born in", "works for", "part of", "date of birth"))
