"""Corpus-level evaluation: micro precision/recall/F1 over exact facts.

A predicted fact counts iff its entity tuple and relation both match a
gold fact of the same document. The ignore-overlap variant additionally
removes facts whose key appears in the training split from both sides
before counting.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .schema import RelationInstance, RelationTypeSet


@dataclass(frozen=True)
class RelationScore:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class EvalReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    ign_f1: float | None = None
    ign_degenerate: bool = False
    per_relation: Mapping[int, RelationScore] = field(default_factory=dict)

    def summary(self, relations: RelationTypeSet | None = None) -> str:
        lines = [
            f"P={self.precision:.4f} R={self.recall:.4f} F1={self.f1:.4f} "
            f"(tp={self.tp} fp={self.fp} fn={self.fn})"
        ]
        if self.ign_f1 is not None:
            note = " [degenerate: no facts left after overlap removal]" if self.ign_degenerate else ""
            lines.append(f"ign_F1={self.ign_f1:.4f}{note}")
        for r in sorted(self.per_relation):
            s = self.per_relation[r]
            name = relations.name(r) if relations is not None else str(r)
            lines.append(
                f"  {name}: P={s.precision:.4f} R={s.recall:.4f} F1={s.f1:.4f} "
                f"(tp={s.tp} fp={s.fp} fn={s.fn})"
            )
        return "\n".join(lines)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


FactSets = Mapping[str, Iterable[RelationInstance]]


def _as_sets(facts: FactSets) -> dict[str, frozenset[RelationInstance]]:
    # Duplicate instances collapse here; scoring is over fact sets.
    return {doc_id: frozenset(insts) for doc_id, insts in facts.items()}


def micro_f1(
    predictions: FactSets,
    gold: FactSets,
    per_relation: bool = False,
) -> EvalReport:
    """Micro-averaged exact-match scoring over all documents.

    Both mappings must cover the same documents; a missing prediction
    entry is an error, not an empty prediction, so silent document drops
    cannot inflate precision.
    """
    pred = _as_sets(predictions)
    ref = _as_sets(gold)
    if set(pred) != set(ref):
        missing = sorted(set(ref) ^ set(pred))[:5]
        raise ValueError(f"prediction/gold document sets differ, e.g. {missing}")
    tp = fp = fn = 0
    by_rel: dict[int, list[int]] = {}
    for doc_id, g in ref.items():
        p = pred[doc_id]
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
        if per_relation:
            for inst in p | g:
                row = by_rel.setdefault(inst.relation, [0, 0, 0])
                if inst in p and inst in g:
                    row[0] += 1
                elif inst in p:
                    row[1] += 1
                else:
                    row[2] += 1
    precision, recall, f1 = _prf(tp, fp, fn)
    rel_scores = {
        r: RelationScore(t, f, n, *_prf(t, f, n))
        for r, (t, f, n) in sorted(by_rel.items())
    }
    return EvalReport(
        precision=precision, recall=recall, f1=f1, tp=tp, fp=fp, fn=fn,
        per_relation=rel_scores,
    )


FactKey = Callable[[str, RelationInstance], object]


def _default_key(doc_id: str, inst: RelationInstance) -> object:
    return inst


def ign_f1(
    predictions: FactSets,
    gold: FactSets,
    train_keys: frozenset,
    fact_key: FactKey = _default_key,
) -> tuple[float, bool]:
    """F1 after removing train-overlapping facts from both sides.

    `fact_key` maps (doc_id, instance) to the key space of `train_keys`;
    the default keys on the instance itself. Returns (f1, degenerate)
    where degenerate flags the case of nothing left to score, which
    reports zero rather than failing.
    """
    pred = _as_sets(predictions)
    ref = _as_sets(gold)
    if set(pred) != set(ref):
        raise ValueError("prediction/gold document sets differ")
    tp = fp = fn = 0
    remaining = 0
    for doc_id, g in ref.items():
        keep_g = {i for i in g if fact_key(doc_id, i) not in train_keys}
        keep_p = {i for i in pred[doc_id] if fact_key(doc_id, i) not in train_keys}
        remaining += len(keep_g) + len(keep_p)
        tp += len(keep_p & keep_g)
        fp += len(keep_p - keep_g)
        fn += len(keep_g - keep_p)
    _, _, f1 = _prf(tp, fp, fn)
    return f1, remaining == 0


def evaluate(
    predictions: FactSets,
    gold: FactSets,
    train_keys: frozenset | None = None,
    fact_key: FactKey = _default_key,
    per_relation: bool = False,
) -> EvalReport:
    """micro_f1 plus, when a training fact set is supplied, the
    ignore-overlap variant."""
    report = micro_f1(predictions, gold, per_relation=per_relation)
    if train_keys is None:
        return report
    ign, degenerate = ign_f1(predictions, gold, train_keys, fact_key)
    return EvalReport(
        precision=report.precision, recall=report.recall, f1=report.f1,
        tp=report.tp, fp=report.fp, fn=report.fn,
        ign_f1=ign, ign_degenerate=degenerate,
        per_relation=report.per_relation,
    )


def nary_f1(predictions: FactSets, gold: FactSets, arity: int) -> EvalReport:
    """Exact-match scoring for fixed-arity tuples; instances of any other
    arity are rejected up front."""
    for name, facts in (("prediction", predictions), ("gold", gold)):
        for doc_id, insts in facts.items():
            for inst in insts:
                if inst.arity != arity:
                    raise ValueError(
                        f"{name} fact in {doc_id!r} has arity {inst.arity}, "
                        f"expected {arity}"
                    )
    return micro_f1(predictions, gold)
