"""Self-verification suites: exhaustive codec round-trips, optimum
consistency, masking soundness, sampling statistics, gradient checks.

Each suite returns a VerifyOutcome so the CLI and the test suite share one
implementation. Suites are deterministic given their seeds.
"""
from __future__ import annotations

import itertools
import time
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from . import decoding
from .codec import (
    OrderKind,
    SymbolVocab,
    decode_symbolic,
    encode_symbolic,
)
from .negsample import (
    DYNAMIC_VARIANTS,
    NegSamplePlan,
    diagonal_band_size,
    dynamic_variant,
    make_plan,
    plan_all,
    plan_asymmetric,
    plan_diagonal,
    plan_dynamic,
    plan_none,
    plan_random,
)
from .schema import RelationInstance, RelationMatrix, nonzero_cells, zero_cells


@dataclass(frozen=True)
class VerifyOutcome:
    name: str
    ok: bool
    detail: str
    seconds: float


def _outcome(name: str, ok: bool, detail: str, t0: float) -> VerifyOutcome:
    return VerifyOutcome(name=name, ok=ok, detail=detail, seconds=time.monotonic() - t0)


# ---------------------------------------------------------------------------
# Matrix enumeration and random generation.


def enumerate_binary_matrices(n: int, relation_count: int) -> list[RelationMatrix]:
    """Every binary matrix over n entities and the given type inventory,
    cells being arbitrary (possibly empty) label subsets."""
    cells = [(i, j) for i in range(n) for j in range(n) if i != j]
    subsets = []
    labels = list(range(relation_count))
    for size in range(relation_count + 1):
        subsets.extend(frozenset(c) for c in itertools.combinations(labels, size))
    out = []
    for assignment in itertools.product(subsets, repeat=len(cells)):
        chosen = {
            cell: labels_
            for cell, labels_ in zip(cells, assignment)
            if labels_
        }
        out.append(RelationMatrix(arity=2, slot_sizes=(n, n), cells=chosen))
    return out


def random_matrix(
    rng: np.random.Generator,
    arity: int = 2,
    max_entities: int = 12,
    max_relations: int = 6,
) -> RelationMatrix:
    if arity == 2:
        n = int(rng.integers(2, max_entities + 1))
        slot_sizes: tuple[int, ...] = (n, n)
        cells = [(i, j) for i in range(n) for j in range(n) if i != j]
    else:
        slot_sizes = tuple(int(rng.integers(1, max_entities + 1)) for _ in range(4))
        total = int(np.prod(slot_sizes))
        picks = rng.integers(0, total, size=min(total, 12))
        cells = []
        for flat in picks:
            cell = []
            rest = int(flat)
            for s in reversed(slot_sizes):
                cell.append(rest % s)
                rest //= s
            cells.append(tuple(reversed(cell)))
        cells = sorted(set(cells))
    c = int(rng.integers(1, max_relations + 1))
    density = rng.uniform(0.0, 0.4)
    chosen: dict[tuple[int, ...], frozenset[int]] = {}
    order: dict[tuple[tuple[int, ...], int], int] = {}
    for cell in cells:
        if rng.random() < density:
            k = 1 + int(rng.random() < 0.2 and c > 1)
            labels = frozenset(
                int(x) for x in rng.choice(c, size=min(k, c), replace=False)
            )
            chosen[tuple(cell)] = labels
    matrix = RelationMatrix(arity=arity, slot_sizes=slot_sizes, cells=chosen)
    insts = nonzero_cells(matrix)
    perm = rng.permutation(len(insts))
    for pos, idx in enumerate(perm):
        inst = insts[int(idx)]
        order[(inst.entities, inst.relation)] = pos
    return RelationMatrix(
        arity=arity, slot_sizes=slot_sizes, cells=chosen, annotation_order=order
    )


def _all_plans(matrix: RelationMatrix, seed: int) -> list[NegSamplePlan]:
    plans = [
        plan_none(matrix),
        plan_all(matrix),
        plan_random(matrix, 0.10, seed),
        plan_random(matrix, 0.5, seed + 1),
    ]
    if matrix.arity == 2:
        plans += [
            plan_diagonal(matrix, 1),
            plan_diagonal(matrix, 2),
            plan_asymmetric(matrix, "left"),
            plan_asymmetric(matrix, "right"),
            plan_dynamic(matrix, seed=seed, epoch=0, doc_id="verify"),
        ]
    return plans


# ---------------------------------------------------------------------------
# Suite 1: round-trips.


def roundtrip_exhaustive(relation_count: int = 2, max_entities: int = 3) -> VerifyOutcome:
    """decode(encode(m, plan)) == m for every small binary matrix under
    every sampling strategy, plus injectivity of the canonical encoding."""
    t0 = time.monotonic()
    checked = 0
    failures: list[str] = []
    for c in range(1, relation_count + 1):
        vocab = SymbolVocab.default(c)
        for n in range(1, max_entities + 1):
            seen: dict[tuple[int, ...], RelationMatrix] = {}
            for matrix in enumerate_binary_matrices(n, c):
                seq = encode_symbolic(matrix, vocab)
                if seq.ids in seen and seen[seq.ids] != matrix:
                    failures.append(f"collision at n={n} C={c}: {seq.ids}")
                seen[seq.ids] = matrix
                for plan in _all_plans(matrix, seed=checked):
                    s = encode_symbolic(matrix, vocab, plan=plan)
                    parse = decode_symbolic(s, vocab, slot_sizes=(n, n))
                    checked += 1
                    if parse.matrix != matrix or parse.malformed_groups:
                        failures.append(
                            f"round-trip failed: n={n} C={c} plan={plan.strategy} "
                            f"cells={dict(matrix.cells)}"
                        )
                        if len(failures) > 5:
                            return _outcome(
                                "roundtrip_exhaustive", False, "; ".join(failures), t0
                            )
    ok = not failures
    detail = f"{checked} (matrix, plan) round-trips, all exact" if ok else "; ".join(failures)
    return _outcome("roundtrip_exhaustive", ok, detail, t0)


def roundtrip_randomized(cases: int = 100_000, seed: int = 7) -> VerifyOutcome:
    """Randomized round-trips over larger matrices, both arities, all
    ordering kinds, random plans."""
    t0 = time.monotonic()
    rng = np.random.default_rng(seed)
    failures = 0
    first = ""
    for case in range(cases):
        arity = 4 if case % 5 == 4 else 2
        # 4-ary zero-cell pools grow as the slot-size product; keep them small.
        matrix = random_matrix(rng, arity=arity, max_entities=4 if arity == 4 else 12)
        c = 1 + max(
            (max(labels) for labels in matrix.cells.values()), default=0
        )
        vocab = SymbolVocab.default(max(c, int(rng.integers(1, 7))), arity=arity)
        kind = ("row_column", "annotation", "random")[case % 3]
        if kind == "random":
            order = OrderKind.random(int(rng.integers(1 << 30)))
        else:
            order = OrderKind(kind)
        strategies = ["none", "all", "random"] + (
            ["diagonal", "asym_left", "asym_right", "dynamic"] if arity == 2 else []
        )
        strategy = strategies[int(rng.integers(len(strategies)))]
        plan = make_plan(
            matrix, strategy, fraction=float(rng.uniform(0, 0.5)),
            window=int(rng.integers(1, 4)), seed=case, epoch=case % 7,
            doc_id=f"doc{case}",
        )
        seq = encode_symbolic(matrix, vocab, order=order, plan=plan, doc_id=f"doc{case}")
        parse = decode_symbolic(seq, vocab, slot_sizes=matrix.slot_sizes)
        expected_len = (arity + 1) * (matrix.instance_count() + plan.size) + 1
        if (
            parse.matrix != matrix
            or parse.malformed_groups
            or len(seq.ids) != expected_len
        ):
            failures += 1
            if not first:
                first = f"case {case}: arity={arity} order={kind} plan={strategy}"
    ok = failures == 0
    detail = f"{cases} randomized round-trips, all exact" if ok else (
        f"{failures} failures, first: {first}"
    )
    return _outcome("roundtrip_randomized", ok, detail, t0)


# ---------------------------------------------------------------------------
# Suite 2: sequence-optimal equals matrix-optimal.


def consistent_optimum(trials: int = 100, seed: int = 11) -> VerifyOutcome:
    """Over the full canonical sequence space of a 3-entity, 2-type
    instance: the argmax sequence decodes to the argmax matrix of the
    induced matrix distribution, for `trials` random distributions."""
    t0 = time.monotonic()
    vocab = SymbolVocab.default(2)
    matrices = enumerate_binary_matrices(3, 2)
    sequences = [encode_symbolic(m, vocab).ids for m in matrices]
    if len(set(sequences)) != len(sequences):
        return _outcome("consistent_optimum", False, "encoding not injective", t0)
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        probs = rng.dirichlet(np.ones(len(sequences)))
        seq_best = int(np.argmax(probs))
        matrix_probs: dict[RelationMatrix, float] = {}
        for m, p in zip(matrices, probs):
            matrix_probs[m] = matrix_probs.get(m, 0.0) + float(p)
        matrix_best = max(matrix_probs.items(), key=lambda kv: kv[1])[0]
        decoded = decode_symbolic(
            list(sequences[seq_best]), vocab, slot_sizes=(3, 3)
        ).matrix
        if decoded != matrix_best:
            bad += 1
    ok = bad == 0
    detail = (
        f"{trials}/{trials} argmax sequences decoded to the argmax matrix"
        if ok
        else f"{bad}/{trials} mismatches"
    )
    return _outcome("consistent_optimum", ok, detail, t0)


# ---------------------------------------------------------------------------
# Suite 3: masked decoding soundness.


class RandomScoreOracle:
    """Deterministic random logits per prefix; thread-safe and stateless."""

    def __init__(self, seed: int, size: int) -> None:
        self.seed = seed
        self.size = size

    def scores(self, prefix: tuple[int, ...]) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, *prefix]))
        return rng.standard_normal(self.size)


def masking_validity(
    oracles: int = 10_000, seed: int = 23, strict_fraction: float = 0.2
) -> VerifyOutcome:
    """Greedy decoding under random logits always yields grammatical
    output: parses cleanly, no malformed groups, respects slot sizes."""
    t0 = time.monotonic()
    rng = np.random.default_rng(seed)
    bad = 0
    first = ""
    for i in range(oracles):
        arity = 2 if i % 2 == 0 else 4
        vocab = SymbolVocab.default(int(rng.integers(1, 5)), arity=arity)
        if arity == 2:
            n = int(rng.integers(1, 7))
            slot_sizes: tuple[int, ...] = (n, n)
        else:
            slot_sizes = tuple(int(x) for x in rng.integers(1, 5, size=4))
        strict = rng.random() < strict_fraction
        oracle = RandomScoreOracle(seed=i, size=vocab.total_size)
        res = decoding.decode_greedy(
            oracle, vocab, slot_sizes,
            max_len=int(rng.integers(4, 40)), strict=strict,
        )
        parse = decode_symbolic(res.sequence, vocab, slot_sizes=slot_sizes)
        ok = parse.malformed_groups == 0
        if ok and not res.truncated:
            ok = res.sequence.is_well_formed(vocab)
        if ok and strict:
            got = [
                (inst.entities, inst.relation)
                for inst in _sequence_instances(res.sequence, vocab)
            ]
            ok = got == sorted(got) and len(got) == len(set(got))
        if not ok:
            bad += 1
            if not first:
                first = f"oracle {i}: arity={arity} strict={strict} ids={res.sequence.ids}"
    ok = bad == 0
    detail = (
        f"{oracles} random-logit decodes, all grammatical"
        if ok
        else f"{bad} invalid outputs, first: {first}"
    )
    return _outcome("masking_validity", ok, detail, t0)


def _sequence_instances(seq, vocab: SymbolVocab) -> list[RelationInstance]:
    """Groups of a clean sequence in emission order, NO_RELATION kept out."""
    k = vocab.arity
    body = seq.ids[:-1] if seq.ids and seq.ids[-1] == vocab.eos_id else seq.ids
    out = []
    for g in range(len(body) // (k + 1)):
        chunk = body[g * (k + 1) : (g + 1) * (k + 1)]
        rel = vocab.relation_index(chunk[k])
        if rel == vocab.relation_count:
            continue
        out.append(
            RelationInstance(
                entities=tuple(vocab.entity_index(s, chunk[s]) for s in range(k)),
                relation=rel,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Suite 4: parallel-row equivalence.


class ScriptOracle:
    """Row-factorized oracle that drives greedy decoding to a fixed fact
    list, whether the decode runs whole-sequence or per row.

    Scores depend only on the current row and the position inside it, so
    whole-sequence decoding and forced-row decoding follow the same
    per-row conditionals. Prefix interpretation (with or without a forced
    row-head start token) is resolved structurally; the one ambiguous
    shape, a single leading entity symbol, satisfies both readings at
    disjoint mask positions.
    """

    HIGH = 4.0
    LOW = -8.0

    def __init__(self, instances: list[RelationInstance], vocab: SymbolVocab) -> None:
        self.script = sorted(instances)
        self.keys = [(t.entities, t.relation) for t in self.script]
        self.vocab = vocab

    def scores(self, prefix: tuple[int, ...]) -> np.ndarray:
        v = np.full(self.vocab.total_size, self.LOW)
        for groups, partial, row_head in self._parses(prefix):
            tok = self._desired(groups, partial, row_head)
            v[tok if tok is not None else self.vocab.eos_id] = self.HIGH
        return v

    def _chunk(self, ids: tuple[int, ...]):
        k = self.vocab.arity
        groups = []
        for g in range(len(ids) // (k + 1)):
            chunk = ids[g * (k + 1) : (g + 1) * (k + 1)]
            ents = []
            for s in range(k):
                if not self.vocab.is_entity_symbol(s, chunk[s]):
                    return None
                ents.append(self.vocab.entity_index(s, chunk[s]))
            if not self.vocab.is_relation_symbol(chunk[k]):
                return None
            if k == 2 and ents[0] == ents[1]:
                return None
            groups.append((tuple(ents), self.vocab.relation_index(chunk[k])))
        rest = ids[(len(ids) // (k + 1)) * (k + 1) :]
        partial = []
        for s, tok in enumerate(rest):
            if not self.vocab.is_entity_symbol(s, tok):
                return None
            partial.append(self.vocab.entity_index(s, tok))
        if k == 2 and len(partial) == 2 and partial[0] == partial[1]:
            return None
        return groups, tuple(partial)

    def _parses(self, prefix: tuple[int, ...]):
        out = []
        whole = self._chunk(prefix)
        if whole is not None:
            out.append((whole[0], whole[1], None))
        if prefix and self.vocab.is_entity_symbol(0, prefix[0]):
            head = self.vocab.entity_index(0, prefix[0])
            row = self._chunk(prefix[1:])
            if row is not None and all(g[0][0] == head for g in row[0]):
                out.append((row[0], row[1], head))
        return out

    def _desired(self, groups, partial, row_head) -> int | None:
        last = groups[-1] if groups else None
        idx = bisect_right(self.keys, last) if last is not None else 0
        k = self.vocab.arity
        for inst in self.script[idx:]:
            if row_head is not None:
                if inst.entities[0] < row_head:
                    continue
                if inst.entities[0] > row_head:
                    break  # rows are contiguous in the sorted script
            if partial and inst.entities[: len(partial)] != partial:
                continue
            if len(partial) < k:
                return self.vocab.entity_id(len(partial), inst.entities[len(partial)])
            return self.vocab.relation_id(inst.relation)
        return None


def parallel_row_equivalence(cases: int = 50, seed: int = 31) -> VerifyOutcome:
    """Merged per-row greedy decodes equal the whole-sequence greedy decode
    under row-factorized oracles."""
    t0 = time.monotonic()
    rng = np.random.default_rng(seed)
    bad = 0
    first = ""
    for case in range(cases):
        matrix = random_matrix(rng, arity=2, max_entities=6, max_relations=4)
        c = 1 + max((max(ls) for ls in matrix.cells.values()), default=0)
        vocab = SymbolVocab.default(max(c, 2))
        oracle = ScriptOracle(nonzero_cells(matrix), vocab)
        whole = decoding.decode_greedy(oracle, vocab, matrix.slot_sizes)
        rows = decoding.decode_rows_parallel(oracle, vocab, matrix.slot_sizes)
        whole_matrix = decode_symbolic(
            whole.sequence, vocab, slot_sizes=matrix.slot_sizes
        ).matrix
        if not (
            rows.matrix == whole_matrix == matrix
            and not whole.truncated
            and not rows.truncated_rows
        ):
            bad += 1
            if not first:
                first = f"case {case}: cells={dict(matrix.cells)}"
    ok = bad == 0
    detail = (
        f"{cases}/{cases} row-merged matrices equal whole-sequence decodes"
        if ok
        else f"{bad} mismatches, first: {first}"
    )
    return _outcome("parallel_row_equivalence", ok, detail, t0)


# ---------------------------------------------------------------------------
# Suite 5: sampling statistics.


def sampling_statistics(draws: int = 10_000, seed: int = 43) -> VerifyOutcome:
    from scipy import stats

    t0 = time.monotonic()
    problems: list[str] = []
    # Diagonal band size, closed form, empty matrices.
    for n in range(2, 9):
        for w in range(1, 4):
            empty = RelationMatrix(arity=2, slot_sizes=(n, n), cells={})
            got = plan_diagonal(empty, window=w).size
            want = diagonal_band_size(n, w)
            if got != want:
                problems.append(f"diagonal n={n} w={w}: {got} != {want}")
    # Random plan size: exact floor.
    rng = np.random.default_rng(seed)
    for i in range(50):
        matrix = random_matrix(rng, arity=2, max_entities=12)
        pool = sum(1 for _ in zero_cells(matrix))
        got = plan_random(matrix, 0.10, seed=i).size
        if got != int(np.floor(0.10 * pool)):
            problems.append(f"random plan {i}: {got} != floor(0.1*{pool})")
    # Dynamic mixture uniformity.
    counts = {v: 0 for v in DYNAMIC_VARIANTS}
    for i in range(draws):
        counts[dynamic_variant(seed=seed, epoch=i % 40, doc_id=f"doc{i}")] += 1
    expected = draws / len(DYNAMIC_VARIANTS)
    sigma = float(np.sqrt(draws * 0.25 * 0.75))
    for variant, got in counts.items():
        if abs(got - expected) > 3 * sigma:
            problems.append(
                f"dynamic {variant}: {got} outside {expected}±3σ ({sigma:.1f})"
            )
    chi = stats.chisquare(list(counts.values()))
    if chi.pvalue <= 0.01:
        problems.append(f"dynamic chi-square p={chi.pvalue:.5f} <= 0.01")
    ok = not problems
    detail = (
        f"band sizes exact, random sizes exact, dynamic counts {dict(counts)} "
        f"(chi2 p={chi.pvalue:.3f})"
        if ok
        else "; ".join(problems)
    )
    return _outcome("sampling_statistics", ok, detail, t0)


# ---------------------------------------------------------------------------
# Suite 6: gradients.


def gradient_check(seed: int = 3, h: float = 1e-5) -> VerifyOutcome:
    """Analytic gradients vs central differences on a width-16 model in
    float64, for both loss formulations, every parameter tensor."""
    import torch

    from .model import (
        CellScorer,
        ModelConfig,
        Seq2SeqModel,
        matrix_loss,
        pool_entities,
        sequence_loss,
    )

    t0 = time.monotonic()
    torch.manual_seed(seed)
    vocab = SymbolVocab.default(2, entity_capacity=8, relation_capacity=4)
    cfg = ModelConfig(
        width=16, heads=2, encoder_layers=1, decoder_layers=1, ffn_width=24,
        max_src_len=24, max_tgt_len=16, dropout=0.0,
    )
    vocab_size = vocab.total_size + 6
    model = Seq2SeqModel(cfg, vocab_size).double()
    scorer = CellScorer(cfg.width, vocab.relation_count).double()

    src = torch.tensor([[13, 14, 15, 16, 17, 13, 15]], dtype=torch.long)
    matrix = RelationMatrix(
        arity=2, slot_sizes=(3, 3),
        cells={(0, 1): frozenset({0}), (2, 0): frozenset({0, 1})},
    )
    seq = encode_symbolic(matrix, vocab)
    dec_in = torch.tensor([[13] + list(seq.ids[:-1])], dtype=torch.long)
    targets = torch.tensor(list(seq.ids), dtype=torch.long)
    mentions = [[0, 5], [1], [2, 6]]

    def seq_loss() -> torch.Tensor:
        logits, _ = model(src, dec_in)
        return sequence_loss(logits[0], targets)

    def mat_loss() -> torch.Tensor:
        memory = model.encode(src, None)
        pooled = pool_entities(memory[0], mentions)
        logits = scorer(pooled, list(_matrix_cells(matrix)))
        return matrix_loss(logits, matrix).total

    worst = 0.0
    worst_at = ""
    checked = 0
    for loss_fn, params in (
        (seq_loss, list(model.named_parameters())),
        (mat_loss, list(model.named_parameters()) + list(scorer.named_parameters())),
    ):
        for p in (model, scorer):
            p.zero_grad(set_to_none=True)
        loss = loss_fn()
        loss.backward()
        grads = {name: (p.grad.clone() if p.grad is not None else None)
                 for name, p in params}
        for name, p in params:
            grad = grads[name]
            flat = p.data.view(-1)
            n_coords = flat.shape[0]
            coords = range(n_coords) if n_coords <= 64 else np.random.default_rng(
                [seed, checked]
            ).choice(n_coords, size=64, replace=False)
            for c in coords:
                c = int(c)
                keep = float(flat[c])
                with torch.no_grad():
                    flat[c] = keep + h
                    hi = float(loss_fn())
                    flat[c] = keep - h
                    lo = float(loss_fn())
                    flat[c] = keep
                numeric = (hi - lo) / (2 * h)
                analytic = float(grad.view(-1)[c]) if grad is not None else 0.0
                if abs(analytic) < 1e-8 and abs(numeric) < 1e-8:
                    continue
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
                checked += 1
                if rel > worst:
                    worst = rel
                    worst_at = f"{loss_fn.__name__}:{name}[{c}]"
    ok = worst < 1e-4
    detail = f"{checked} coordinates, worst relative error {worst:.2e} at {worst_at}"
    return _outcome("gradient_check", ok, detail, t0)


def _matrix_cells(matrix: RelationMatrix):
    from .schema import all_cells

    return all_cells(matrix)


def split_identity_check(seed: int = 5) -> VerifyOutcome:
    """matrix_loss total equals positive + negative terms to 1e-9."""
    import torch

    from .model import matrix_loss

    t0 = time.monotonic()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(50):
        matrix = random_matrix(rng, arity=2, max_entities=8, max_relations=4)
        c = 1 + max((max(ls) for ls in matrix.cells.values()), default=0)
        cells = list(_matrix_cells(matrix))
        logits = torch.tensor(
            rng.standard_normal((len(cells), c + 1)), dtype=torch.float64
        )
        res = matrix_loss(logits, matrix, cells)
        gap = abs(float(res.total) - (float(res.positive_term) + float(res.negative_term)))
        worst = max(worst, gap)
    ok = worst < 1e-9
    return _outcome(
        "split_identity", ok, f"worst |total - (pos+neg)| = {worst:.2e}", t0
    )


ALL_SUITES = (
    roundtrip_exhaustive,
    roundtrip_randomized,
    consistent_optimum,
    masking_validity,
    parallel_row_equivalence,
    sampling_statistics,
    gradient_check,
    split_identity_check,
)


def run_all(fast: bool = False) -> list[VerifyOutcome]:
    out = []
    for suite in ALL_SUITES:
        if fast and suite is roundtrip_randomized:
            out.append(roundtrip_randomized(cases=5_000))
        elif fast and suite is masking_validity:
            out.append(masking_validity(oracles=1_000))
        else:
            out.append(suite())
    return out
