"""Negative cell sampling: which empty matrix cells enter a training target.

A plan is just a set of zero cells. Strategies range from none (positives
only) to all (every empty cell); in between sit random subsets, diagonal
bands, asymmetric bands, and a per-epoch dynamic mixture.
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from .schema import RelationMatrix, zero_cells

# Band strategies address cells by |row - col|, which only makes sense on
# square binary matrices.
_BAND_STRATEGIES_ARITY = 2

# Window used for the asymmetric variants inside the dynamic mixture.
DYNAMIC_ASYMMETRIC_WINDOW = 2

DYNAMIC_VARIANTS = ("none", "diagonal", "asym_right", "asym_left")


@dataclass(frozen=True)
class NegSamplePlan:
    """A chosen set of empty cells, tagged with the strategy that made it."""

    strategy: str
    cells: frozenset[tuple[int, ...]]

    @property
    def size(self) -> int:
        return len(self.cells)

    def ordered(self) -> list[tuple[int, ...]]:
        return sorted(self.cells)


def _require_binary(matrix: RelationMatrix, strategy: str) -> None:
    if matrix.arity != _BAND_STRATEGIES_ARITY:
        raise ValueError(
            f"{strategy} sampling is defined on binary matrices, got arity "
            f"{matrix.arity}"
        )


def plan_none(matrix: RelationMatrix) -> NegSamplePlan:
    return NegSamplePlan(strategy="none", cells=frozenset())


def plan_all(matrix: RelationMatrix, length_budget: int | None = None) -> NegSamplePlan:
    """Every empty cell. Warns when the resulting target would exceed
    `length_budget` tokens (groups of arity+1 plus the terminator)."""
    cells = frozenset(zero_cells(matrix))
    if length_budget is not None:
        need = (matrix.arity + 1) * (matrix.instance_count() + len(cells)) + 1
        if need > length_budget:
            warnings.warn(
                f"plan_all target needs {need} tokens, over budget {length_budget}",
                stacklevel=2,
            )
    return NegSamplePlan(strategy="all", cells=cells)


def plan_random(matrix: RelationMatrix, fraction: float, seed: int) -> NegSamplePlan:
    """A uniform sample of floor(fraction * |zero cells|) cells, without
    replacement."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    pool = sorted(zero_cells(matrix))
    take = int(np.floor(fraction * len(pool)))
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(pool), size=take, replace=False) if take else []
    return NegSamplePlan(
        strategy="random", cells=frozenset(pool[i] for i in picked)
    )


def plan_diagonal(matrix: RelationMatrix, window: int = 1) -> NegSamplePlan:
    """Empty cells within `window` of the main diagonal: 0 < |i - j| <= w."""
    _require_binary(matrix, "diagonal")
    if window < 1:
        raise ValueError(f"window {window} must be >= 1")
    cells = frozenset(
        c for c in zero_cells(matrix) if abs(c[0] - c[1]) <= window
    )
    return NegSamplePlan(strategy="diagonal", cells=cells)


def diagonal_band_size(n: int, window: int) -> int:
    """Cell count of the full band 0 < |i - j| <= window on an n x n matrix
    with an empty gold matrix: 2 * sum_{d=1..w} (n - d)."""
    return 2 * sum(n - d for d in range(1, window + 1) if n - d > 0)


def plan_asymmetric(
    matrix: RelationMatrix, heavy_side: str, window: int = DYNAMIC_ASYMMETRIC_WINDOW
) -> NegSamplePlan:
    """Diagonal band with unequal sides.

    The heavy side takes the full window; the light side keeps only the
    single cell adjacent to the diagonal. heavy_side="right" weights cells
    above the diagonal (j > i), "left" weights cells below it.
    """
    _require_binary(matrix, "asymmetric")
    if heavy_side not in ("left", "right"):
        raise ValueError(f"heavy_side must be 'left' or 'right', got {heavy_side!r}")
    if window < 1:
        raise ValueError(f"window {window} must be >= 1")
    cells = set()
    for i, j in zero_cells(matrix):
        d = j - i
        if d > 0:
            limit = window if heavy_side == "right" else 1
            if d <= limit:
                cells.add((i, j))
        else:
            limit = window if heavy_side == "left" else 1
            if -d <= limit:
                cells.add((i, j))
    return NegSamplePlan(strategy=f"asym_{heavy_side}", cells=frozenset(cells))


def _doc_key(doc_id: str) -> int:
    # Stable across processes; hash() is salted so it cannot be used here.
    return int.from_bytes(hashlib.blake2b(doc_id.encode(), digest_size=8).digest(), "big")


def dynamic_variant(seed: int, epoch: int, doc_id: str) -> str:
    """Which mixture component a (seed, epoch, doc) triple draws."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, _doc_key(doc_id)]))
    return DYNAMIC_VARIANTS[int(rng.integers(len(DYNAMIC_VARIANTS)))]


def plan_dynamic(
    matrix: RelationMatrix, seed: int, epoch: int, doc_id: str
) -> NegSamplePlan:
    """Per-epoch mixture: uniformly one of no sampling, the width-1
    diagonal band, or an asymmetric band with either side heavy.

    The draw is a pure function of (seed, epoch, doc_id), so a rerun with
    the same seed rebuilds identical targets.
    """
    variant = dynamic_variant(seed, epoch, doc_id)
    if variant == "none":
        inner = plan_none(matrix)
    elif variant == "diagonal":
        inner = plan_diagonal(matrix, window=1)
    elif variant == "asym_right":
        inner = plan_asymmetric(matrix, "right")
    else:
        inner = plan_asymmetric(matrix, "left")
    return NegSamplePlan(strategy=f"dynamic:{inner.strategy}", cells=inner.cells)


def make_plan(
    matrix: RelationMatrix,
    strategy: str,
    *,
    fraction: float = 0.10,
    window: int = 1,
    seed: int = 0,
    epoch: int = 0,
    doc_id: str = "",
    length_budget: int | None = None,
) -> NegSamplePlan:
    """Dispatch by strategy name; the single entry point used by training
    and the CLI."""
    if strategy == "none":
        return plan_none(matrix)
    if strategy == "all":
        return plan_all(matrix, length_budget=length_budget)
    if strategy == "random":
        return plan_random(matrix, fraction=fraction, seed=seed)
    if strategy == "diagonal":
        return plan_diagonal(matrix, window=window)
    if strategy in ("asym_left", "asym_right"):
        return plan_asymmetric(matrix, strategy.removeprefix("asym_"), window=window)
    if strategy == "dynamic":
        return plan_dynamic(matrix, seed=seed, epoch=epoch, doc_id=doc_id)
    raise ValueError(f"unknown sampling strategy {strategy!r}")


def target_term_counts(matrix: RelationMatrix, plan: NegSamplePlan) -> dict[str, int]:
    """Loss-composition diagnostic: how many positive groups, negative
    groups, and terminator steps a target built from (matrix, plan) holds."""
    return {
        "positive": matrix.instance_count(),
        "negative": plan.size,
        "eos": 1,
    }
