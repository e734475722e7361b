"""Corpora: canonical JSONL IO, external-format import, synthetic generation.

The synthetic generator builds documents with an explicit grounding
structure: first one intro sentence per entity carrying a 1-based ordinal
marker next to (never inside) the entity's name, then shuffled fact,
distractor, and noise sentences. Relations are only ever signaled by the
relation's own trigger token, so co-occurrence alone never implies a
fact. Generation is a pure function of the config, including the seed.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .schema import (
    Document,
    Entity,
    Mention,
    RelationInstance,
    RelationMatrix,
    RelationTypeSet,
    matrix_from_instances,
    nonzero_cells,
)

# Reference corpus sizes (train/dev/test documents) for the public
# benchmarks this data model targets; used by `ingest` to flag suspicious
# splits, not to enforce anything.
REFERENCE_SPLIT_SIZES: dict[str, tuple[int, int, int]] = {
    "docred": (3053, 1000, 1000),
    "cdr": (500, 500, 500),
    "gda": (23353, 5839, 1000),
    "scirex": (306, 66, 66),
}

_FILLERS = ("near", "with", "also", "plus")


@dataclass(frozen=True)
class CorpusSplit:
    name: str
    documents: tuple[Document, ...]
    gold: Mapping[str, RelationMatrix]
    relations: RelationTypeSet

    def __post_init__(self) -> None:
        ids = [d.doc_id for d in self.documents]
        if len(set(ids)) != len(ids):
            raise ValueError(f"split {self.name!r} has duplicate doc ids")
        if set(ids) != set(self.gold):
            raise ValueError(f"split {self.name!r}: gold keys do not match documents")

    def __len__(self) -> int:
        return len(self.documents)


# ---------------------------------------------------------------------------
# Canonical JSONL format. One document per line:
#   {"doc_id": ..., "sents": [[tok, ...], ...],
#    "entities": [{"type": ..., "mentions": [{"sent": s, "start": a, "end": b}]}],
#    "facts": [{"h": i, "t": j, "r": name} | {"slots": [a,b,c,d], "r": name}]}
# The facts list is stored in annotation order, which round-trips the
# ordering information without a separate field.


def _doc_to_record(doc: Document, matrix: RelationMatrix, relations: RelationTypeSet) -> dict:
    entities = []
    for ent in doc.entities:
        entities.append(
            {
                "type": ent.entity_type,
                "mentions": [
                    {"sent": m.sentence_id, "start": m.start, "end": m.end}
                    for m in ent.mentions
                ],
            }
        )
    insts = nonzero_cells(matrix)
    if matrix.annotation_order is not None:
        insts.sort(key=lambda t: matrix.annotation_order[(t.entities, t.relation)])
    facts = []
    for inst in insts:
        rec: dict = {"r": relations.name(inst.relation)}
        if matrix.arity == 2:
            rec["h"], rec["t"] = inst.entities
        else:
            rec["slots"] = list(inst.entities)
        facts.append(rec)
    return {
        "doc_id": doc.doc_id,
        "sents": [list(s) for s in doc.sentences],
        "entities": entities,
        "facts": facts,
    }


def _doc_from_record(rec: dict, relations: RelationTypeSet, arity: int) -> tuple[Document, RelationMatrix]:
    sents = tuple(tuple(s) for s in rec["sents"])
    entities = []
    for i, e in enumerate(rec["entities"]):
        mentions = tuple(
            Mention(
                sentence_id=m["sent"],
                start=m["start"],
                end=m["end"],
                surface=sents[m["sent"]][m["start"] : m["end"]],
            )
            for m in e["mentions"]
        )
        entities.append(Entity(index=i, mentions=mentions, entity_type=e.get("type")))
    doc = Document(doc_id=rec["doc_id"], sentences=sents, entities=tuple(entities))
    insts = []
    order: dict[tuple[tuple[int, ...], int], int] = {}
    for pos, f in enumerate(rec["facts"]):
        cell = tuple(f["slots"]) if "slots" in f else (f["h"], f["t"])
        inst = RelationInstance(entities=cell, relation=relations.index(f["r"]))
        insts.append(inst)
        order.setdefault((inst.entities, inst.relation), pos)
    n = len(entities)
    slot_sizes = (n,) * (len(insts[0].entities) if insts else arity)
    matrix = matrix_from_instances(
        insts, slot_sizes=slot_sizes, annotation_order=order or None,
        relation_count=relations.count,
    ) if insts else RelationMatrix(arity=arity, slot_sizes=(n,) * arity, cells={})
    return doc, matrix


def write_corpus(directory: str | Path, splits: Iterable[CorpusSplit]) -> None:
    """Write relations.json plus one JSONL file per split. Deterministic:
    the same splits always produce the same bytes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    splits = list(splits)
    if not splits:
        raise ValueError("nothing to write")
    relations = splits[0].relations
    for s in splits[1:]:
        if s.relations != relations:
            raise ValueError("splits disagree on the relation inventory")
    (directory / "relations.json").write_text(
        json.dumps({"names": list(relations.names)}, sort_keys=True) + "\n"
    )
    for split in splits:
        with open(directory / f"{split.name}.jsonl", "w") as fh:
            for doc in split.documents:
                rec = _doc_to_record(doc, split.gold[doc.doc_id], relations)
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_corpus(
    directory: str | Path, names: Sequence[str] | None = None, arity: int = 2
) -> dict[str, CorpusSplit]:
    directory = Path(directory)
    rel_path = directory / "relations.json"
    if not rel_path.exists():
        raise FileNotFoundError(f"no relations.json under {directory}")
    relations = RelationTypeSet(tuple(json.loads(rel_path.read_text())["names"]))
    if names is None:
        names = sorted(p.stem for p in directory.glob("*.jsonl"))
    out = {}
    for name in names:
        docs, gold = [], {}
        with open(directory / f"{name}.jsonl") as fh:
            for line in fh:
                doc, matrix = _doc_from_record(json.loads(line), relations, arity)
                docs.append(doc)
                gold[doc.doc_id] = matrix
        out[name] = CorpusSplit(
            name=name, documents=tuple(docs), gold=gold, relations=relations
        )
    return out


# ---------------------------------------------------------------------------
# External import.


def import_docred(
    records: Iterable[dict],
    relations: RelationTypeSet | None = None,
    name: str = "train",
) -> CorpusSplit:
    """Import records in the common exported-benchmark layout: `sents`,
    `vertexSet` (mention clusters with sent_id/pos/type), `labels`
    (h/t/r). Entities are reindexed by first appearance; mentions are
    deduplicated and sorted. A record that breaks the layout is rejected
    with a diagnostic naming the offending field.
    """
    records = list(records)
    if relations is None:
        seen = set()
        for rec in records:
            for lab in rec.get("labels", ()):
                seen.add(str(lab.get("r")))
        relations = RelationTypeSet(tuple(sorted(seen)))
    docs, gold = [], {}
    for pos, rec in enumerate(records):
        where = f"record {pos} ({rec.get('title', '?')!r})"
        try:
            doc, matrix = _import_one(rec, relations)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{where}: missing or ill-typed field {exc}") from None
        except ValueError as exc:
            raise ValueError(f"{where}: {exc}") from None
        docs.append(doc)
        gold[doc.doc_id] = matrix
    return CorpusSplit(
        name=name, documents=tuple(docs), gold=gold, relations=relations
    )


def _import_one(rec: dict, relations: RelationTypeSet) -> tuple[Document, RelationMatrix]:
    sents = tuple(tuple(str(t) for t in s) for s in rec["sents"])
    if not sents:
        raise ValueError("sents: document has no sentences")
    vertex_set = rec["vertexSet"]
    if not vertex_set:
        raise ValueError("vertexSet: document has no entities")
    parsed = []
    for vi, cluster in enumerate(vertex_set):
        if not cluster:
            raise ValueError(f"vertexSet[{vi}]: empty mention cluster")
        mentions = []
        for mi, m in enumerate(cluster):
            sid, pos = m["sent_id"], m["pos"]
            if not 0 <= sid < len(sents):
                raise ValueError(f"vertexSet[{vi}][{mi}].sent_id: {sid} out of range")
            if len(pos) != 2 or not 0 <= pos[0] < pos[1] <= len(sents[sid]):
                raise ValueError(f"vertexSet[{vi}][{mi}].pos: bad span {pos}")
            mentions.append(
                Mention(
                    sentence_id=sid, start=pos[0], end=pos[1],
                    surface=sents[sid][pos[0] : pos[1]],
                )
            )
        key = lambda m: (m.sentence_id, m.start, m.end)
        uniq = sorted({key(m): m for m in mentions}.values(), key=key)
        etype = cluster[0].get("type")
        parsed.append((tuple(uniq), etype))
    # Reindex by first appearance; ties keep source order.
    first = [(ms[0].sentence_id, ms[0].start, vi) for vi, (ms, _) in enumerate(parsed)]
    rank = {vi: new for new, (_, _, vi) in enumerate(sorted(first))}
    entities = tuple(
        Entity(index=rank[vi], mentions=ms, entity_type=et)
        for vi, (ms, et) in enumerate(parsed)
    )
    entities = tuple(sorted(entities, key=lambda e: e.index))
    doc = Document(
        doc_id=str(rec["title"]), sentences=sents, entities=entities
    )
    n = len(entities)
    insts, order = [], {}
    for li, lab in enumerate(rec.get("labels", ())):
        h, t, r = lab["h"], lab["t"], str(lab["r"])
        if not (0 <= h < len(vertex_set)) or not (0 <= t < len(vertex_set)):
            raise ValueError(f"labels[{li}]: entity index out of range")
        if h == t:
            raise ValueError(f"labels[{li}]: relation on a self-pair")
        if r not in relations:
            raise ValueError(f"labels[{li}].r: unknown relation {r!r}")
        inst = RelationInstance(
            entities=(rank[h], rank[t]), relation=relations.index(r)
        )
        insts.append(inst)
        order.setdefault((inst.entities, inst.relation), len(order))
    if insts:
        matrix = matrix_from_instances(
            insts, slot_sizes=(n, n), annotation_order=order,
            relation_count=relations.count,
        )
    else:
        matrix = RelationMatrix(arity=2, slot_sizes=(n, n), cells={})
    return doc, matrix


# ---------------------------------------------------------------------------
# Synthetic generation.


@dataclass(frozen=True)
class SynthConfig:
    document_count: int
    max_entities: int = 8
    min_entities: int = 4
    relation_type_count: int = 4
    density: float = 0.03
    token_vocab_size: int = 50
    sentence_len_bounds: tuple[int, int] = (4, 7)
    two_word_name_prob: float = 0.35
    diagonal_fact_odds: float = 1.0
    # With intros off, documents reduce to the pair sentences themselves:
    # no names, no padding words, no noise. Ordinal tokens carry mentions.
    intro_sentences: bool = True
    # Zero cells within this band distance get an explicit filler sentence,
    # so relation-vs-co-occurrence is a reading decision there. max_entities
    # - 1 or more realizes every ordered pair.
    pair_sentence_window: int = 1
    seed: int = 0
    name: str = "train"

    def __post_init__(self) -> None:
        if self.document_count < 1:
            raise ValueError("document_count must be positive")
        if not 2 <= self.min_entities <= self.max_entities:
            raise ValueError(
                f"entity bounds [{self.min_entities}, {self.max_entities}] invalid"
            )
        if self.relation_type_count < 1:
            raise ValueError("need at least one relation type")
        if not 0.0 <= self.density <= 1.0:
            raise ValueError(f"density {self.density} outside [0, 1]")
        # Every entity needs a distinct name; padding needs spare words.
        per_name = 2 if self.two_word_name_prob > 0 else 1
        if (
            self.intro_sentences
            and self.token_vocab_size < per_name * self.max_entities + 2
        ):
            raise ValueError(
                f"token_vocab_size {self.token_vocab_size} too small for "
                f"{self.max_entities} entities"
            )
        lo, hi = self.sentence_len_bounds
        if not 4 <= lo <= hi:
            raise ValueError(f"sentence_len_bounds {self.sentence_len_bounds} invalid")
        if not 0.0 <= self.two_word_name_prob <= 1.0:
            raise ValueError(
                f"two_word_name_prob {self.two_word_name_prob} outside [0, 1]"
            )
        if self.diagonal_fact_odds < 1.0:
            raise ValueError("diagonal_fact_odds must be >= 1")
        if self.pair_sentence_window < 1:
            raise ValueError("pair_sentence_window must be >= 1")


def synth_relations(relation_type_count: int) -> RelationTypeSet:
    return RelationTypeSet(tuple(f"rel{r}" for r in range(relation_type_count)))


def _pad_sentence(
    core: list[str], rng: np.random.Generator, pool: list[str], bounds: tuple[int, int]
) -> list[str]:
    # Core ends without the terminator; padding goes before the final ".".
    lo, hi = bounds
    target = int(rng.integers(lo, hi + 1))
    pad = max(0, target - len(core) - 1) if pool else 0
    extra = [pool[int(i)] for i in rng.integers(0, len(pool), size=pad)]
    return core + extra + ["."]


def _gen_document(
    cfg: SynthConfig, relations: RelationTypeSet, index: int
) -> tuple[Document, RelationMatrix]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    n = int(rng.integers(cfg.min_entities, cfg.max_entities + 1))
    pool = [f"w{j}" for j in range(cfg.token_vocab_size)]

    names: list[tuple[str, ...]] = []
    free_pool: list[str] = []
    if cfg.intro_sentences:
        # Distinct name words per document: names stay unambiguous.
        lengths = [
            2 if rng.random() < cfg.two_word_name_prob else 1 for _ in range(n)
        ]
        word_ids = rng.choice(
            cfg.token_vocab_size, size=sum(lengths), replace=False
        )
        used = 0
        for i in range(n):
            names.append(
                tuple(pool[int(j)] for j in word_ids[used : used + lengths[i]])
            )
            used += lengths[i]
        doc_words = {w for name in names for w in name}
        free_pool = [w for w in pool if w not in doc_words]

    # Facts: one Bernoulli draw per ordered pair, then a relation type.
    # diagonal_fact_odds > 1 concentrates mass on adjacent pairs (|i-j| = 1)
    # while keeping the overall pair density fixed, mirroring the locality
    # bias of real document-level corpora.
    band = 2 * (n - 1)
    far = n * (n - 1) - band
    p_far = cfg.density * (band + far) / (band * cfg.diagonal_fact_odds + far)
    p_band = cfg.diagonal_fact_odds * p_far
    facts: list[RelationInstance] = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            p = p_band if abs(i - j) == 1 else p_far
            if rng.random() < p:
                facts.append(
                    RelationInstance(
                        entities=(i, j),
                        relation=int(rng.integers(cfg.relation_type_count)),
                    )
                )

    # Entity references are ordinal-marked, the way numbered parties recur
    # in a contract. With intros on, sentence i couples entity i's ordinal
    # with its name tokens and later sentences refer back by bare ordinal;
    # with intros off, the pair sentences themselves carry the mentions.
    sentences: list[list[str]] = []
    mention_sites: list[list[tuple[int, int, int]]] = [[] for _ in range(n)]  # (sent, start, end)
    if cfg.intro_sentences:
        for i in range(n):
            core = [str(i + 1), *names[i]]
            sent = _pad_sentence(core, rng, free_pool, cfg.sentence_len_bounds)
            mention_sites[i].append((len(sentences), 0, len(core)))
            sentences.append(sent)

    body: list[tuple[str, list[str], list[tuple[int, tuple[int, int]]]]] = []
    # (kind, tokens, [(entity, span-within-sentence)])
    for inst in facts:
        h, t = inst.entities
        rel = relations.name(inst.relation)
        core = [str(h + 1), rel, str(t + 1)]
        spans = [(h, (0, 1)), (t, (2, 3))]
        body.append(("fact", core, spans))

    # Every near-diagonal pair gets a sentence: a relation word when
    # related, a filler verb otherwise. Neighbors always co-occur in text,
    # so telling mere co-occurrence from a relation is a reading decision,
    # and those cells are the hard negatives that diagonal sampling targets.
    others: list[tuple[str, list[str], list[tuple[int, tuple[int, int]]]]] = []
    fact_cells = {f.entities for f in facts}
    for a in range(n):
        for b in range(n):
            if a == b or abs(a - b) > cfg.pair_sentence_window:
                continue
            if (a, b) in fact_cells:
                continue
            filler = _FILLERS[int(rng.integers(len(_FILLERS)))]
            core = [str(a + 1), filler, str(b + 1)]
            spans = [(a, (0, 1)), (b, (2, 3))]
            others.append(("distract", core, spans))
    if cfg.intro_sentences:
        for _ in range(int(rng.integers(0, 2))):
            length = int(rng.integers(2, 4))
            core = [
                free_pool[int(i)]
                for i in rng.integers(0, len(free_pool), size=length)
            ]
            others.append(("noise", core, []))

    # Fact sentences appear in row-column (sorted-pair) order. With intros
    # on, distractor and noise sentences land at random slots between them;
    # in pure mode every pair sentence sits at its cell's canonical place,
    # so the source reads as one walk over the matrix band.
    if cfg.intro_sentences:
        total = len(body) + len(others)
        other_slots = set(
            int(s) for s in rng.choice(total, size=len(others), replace=False)
        ) if others else set()
        merged: list[tuple[str, list[str], list]] = []
        fi, oi = 0, 0
        for slot in range(total):
            if slot in other_slots:
                merged.append(others[oi])
                oi += 1
            else:
                merged.append(body[fi])
                fi += 1
    else:
        def cell_of(entry):
            spans = entry[2]
            return (spans[0][0], spans[1][0]) if spans else (n, n)

        merged = sorted(body + others, key=cell_of)

    fact_order: dict[tuple[tuple[int, ...], int], int] = {}
    fact_pos = 0
    fact_iter = iter(facts)
    for kind, core, spans in merged:
        sid = len(sentences)
        sent = _pad_sentence(core, rng, free_pool, cfg.sentence_len_bounds)
        for ent, (a, b) in spans:
            mention_sites[ent].append((sid, a, b))
        sentences.append(sent)
        if kind == "fact":
            inst = next(fact_iter)
            fact_order[(inst.entities, inst.relation)] = fact_pos
            fact_pos += 1

    sents = tuple(tuple(s) for s in sentences)
    entities = tuple(
        Entity(
            index=i,
            mentions=tuple(
                Mention(
                    sentence_id=s, start=a, end=b, surface=sents[s][a:b]
                )
                for s, a, b in sorted(mention_sites[i])
            ),
        )
        for i in range(n)
    )
    doc = Document(
        doc_id=f"{cfg.name}-{index:05d}", sentences=sents, entities=entities
    )
    if facts:
        matrix = matrix_from_instances(
            facts, slot_sizes=(n, n), annotation_order=fact_order,
            relation_count=relations.count,
        )
    else:
        matrix = RelationMatrix(arity=2, slot_sizes=(n, n), cells={})
    return doc, matrix


def gen_synthetic(cfg: SynthConfig) -> CorpusSplit:
    """Deterministic synthetic split; equal configs give identical output
    byte for byte."""
    n = cfg.max_entities
    if cfg.density * n * (n - 1) < 1:
        # Expected facts per doc below one even at max size.
        warnings.warn(
            "density %g with at most %d entities expects <1 fact per "
            "document; the corpus may contain fact-free documents"
            % (cfg.density, n),
            stacklevel=2,
        )
    relations = synth_relations(cfg.relation_type_count)
    docs, gold = [], {}
    for i in range(cfg.document_count):
        doc, matrix = _gen_document(cfg, relations, i)
        docs.append(doc)
        gold[doc.doc_id] = matrix
    return CorpusSplit(
        name=cfg.name, documents=tuple(docs), gold=gold, relations=relations
    )


# ---------------------------------------------------------------------------
# Train-overlap keys.


def surface_fact_key(
    doc: Document, inst: RelationInstance, relations: RelationTypeSet
) -> tuple:
    """Surface form of a fact: normalized canonical mention text per slot
    plus the relation name. Used to match facts across documents."""
    surfaces = tuple(
        " ".join(doc.entities[e].first_mention.surface).lower() for e in inst.entities
    )
    return (*surfaces, relations.name(inst.relation))


def training_fact_set(split: CorpusSplit) -> frozenset:
    keys = set()
    for doc in split.documents:
        for inst in nonzero_cells(split.gold[doc.doc_id]):
            keys.add(surface_fact_key(doc, inst, split.relations))
    return frozenset(keys)


def split_fact_keyer(split: CorpusSplit):
    """fact_key callable for ign scoring over this split's documents."""
    by_id = {d.doc_id: d for d in split.documents}
    relations = split.relations

    def key(doc_id: str, inst: RelationInstance) -> tuple:
        return surface_fact_key(by_id[doc_id], inst, relations)

    return key


def corpus_stats(split: CorpusSplit) -> dict:
    counts = [split.gold[d.doc_id].instance_count() for d in split.documents]
    ents = [d.entity_count for d in split.documents]
    pairs = [n * (n - 1) for n in ents]
    return {
        "documents": len(split.documents),
        "facts": int(sum(counts)),
        "mean_facts_per_doc": float(np.mean(counts)) if counts else 0.0,
        "mean_entities": float(np.mean(ents)) if ents else 0.0,
        "pair_density": float(sum(counts) / sum(pairs)) if sum(pairs) else 0.0,
        "max_facts_per_doc": int(max(counts, default=0)),
    }
