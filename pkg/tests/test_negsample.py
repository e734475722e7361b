import math
from collections import Counter

import numpy as np
import pytest

from relgen.negsample import (
    DYNAMIC_ASYMMETRIC_WINDOW,
    diagonal_band_size,
    dynamic_variant,
    make_plan,
    plan_all,
    plan_asymmetric,
    plan_diagonal,
    plan_dynamic,
    plan_none,
    plan_random,
    target_term_counts,
)
from relgen.schema import zero_cells
from helpers import bmatrix


# --- plan_none ---------------------------------------------------------------

def test_none_is_always_empty():
    for n in (1, 2, 4, 9):
        assert plan_none(bmatrix(n, [])).cells == frozenset()
    assert plan_none(bmatrix(4, [(0, 1, 0)])).cells == frozenset()


# --- plan_random -------------------------------------------------------------

def test_random_fraction_zero_and_one():
    m = bmatrix(5, [(0, 1, 0)])
    assert plan_random(m, 0.0, seed=1).cells == frozenset()
    assert plan_random(m, 1.0, seed=1).cells == frozenset(zero_cells(m))


def test_random_size_is_floor_of_fraction():
    # 10 entities, 3 gold cells: |R-| = 90 - 3 = 87, floor(0.1 * 87) = 8.
    m = bmatrix(10, [(0, 1, 0), (4, 2, 1), (9, 0, 3)])
    plan = plan_random(m, 0.10, seed=0)
    assert len(plan.cells) == 8


def test_random_is_seeded_and_subsets_zero_cells():
    m = bmatrix(7, [(0, 1, 0)])
    a = plan_random(m, 0.3, seed=5)
    b = plan_random(m, 0.3, seed=5)
    c = plan_random(m, 0.3, seed=6)
    assert a.cells == b.cells
    assert a.cells != c.cells
    assert a.cells <= frozenset(zero_cells(m))


def test_random_rejects_bad_fraction():
    with pytest.raises(ValueError):
        plan_random(bmatrix(3, []), 1.5, seed=0)


# --- plan_diagonal -----------------------------------------------------------

def test_diagonal_window1_four_entities():
    got = plan_diagonal(bmatrix(4, []), window=1).cells
    assert got == frozenset(
        {(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)}
    )


def test_diagonal_excludes_gold_cells():
    m = bmatrix(4, [(0, 1, 2)])
    got = plan_diagonal(m, window=1).cells
    assert (0, 1) not in got
    assert got == frozenset({(1, 0), (1, 2), (2, 1), (2, 3), (3, 2)})


def test_diagonal_single_entity_is_empty():
    assert plan_diagonal(bmatrix(1, []), window=1).cells == frozenset()


def test_diagonal_closed_form():
    # |band| = 2 * sum_{d=1..w} (n - d) on an empty matrix.
    for n in range(1, 12):
        for w in range(1, 5):
            expect = 2 * sum(max(n - d, 0) for d in range(1, w + 1))
            assert len(plan_diagonal(bmatrix(n, []), w).cells) == expect
            assert diagonal_band_size(n, w) == expect


def test_diagonal_requires_positive_window():
    with pytest.raises(ValueError):
        plan_diagonal(bmatrix(3, []), window=0)


# --- plan_asymmetric ---------------------------------------------------------

def test_asymmetric_right_heavy_row_shape():
    # 5 entities, window 2, row 1: light side is the single left neighbor,
    # heavy side is both cells within the window to the right.
    plan = plan_asymmetric(bmatrix(5, []), "right", window=2)
    row1 = {c for c in plan.cells if c[0] == 1}
    assert row1 == {(1, 0), (1, 2), (1, 3)}


def test_asymmetric_left_heavy_mirrors_right_heavy():
    n = 6
    right = plan_asymmetric(bmatrix(n, []), "right", window=2).cells
    left = plan_asymmetric(bmatrix(n, []), "left", window=2).cells
    mirrored = {(n - 1 - i, n - 1 - j) for i, j in right}
    assert left == mirrored


def test_asymmetric_window1_equals_diagonal_window1():
    for n in (2, 3, 5, 8):
        m = bmatrix(n, [(0, 1, 0)] if n > 1 else [])
        diag = plan_diagonal(m, window=1).cells
        assert plan_asymmetric(m, "right", window=1).cells == diag
        assert plan_asymmetric(m, "left", window=1).cells == diag


def test_asymmetric_skips_gold_cells():
    m = bmatrix(5, [(1, 2, 0)])
    plan = plan_asymmetric(m, "right", window=2)
    assert (1, 2) not in plan.cells


def test_asymmetric_rejects_unknown_side():
    with pytest.raises(ValueError):
        plan_asymmetric(bmatrix(3, []), "up", window=1)


# --- plan_dynamic ------------------------------------------------------------

def test_dynamic_is_deterministic_per_key():
    m = bmatrix(5, [])
    a = plan_dynamic(m, seed=1, epoch=3, doc_id="doc7")
    b = plan_dynamic(m, seed=1, epoch=3, doc_id="doc7")
    assert a.strategy == b.strategy
    assert a.cells == b.cells


def test_dynamic_marginal_is_uniform_over_four_variants():
    counts = Counter(
        dynamic_variant(seed=11, epoch=e, doc_id=f"d{i}")
        for e in range(100) for i in range(100)
    )
    assert set(counts) == {"none", "diagonal", "asym_right", "asym_left"}
    # Binomial 3 sigma around 2500: sigma = sqrt(1e4 * .25 * .75) ~ 43.3.
    for variant, c in counts.items():
        assert abs(c - 2500) <= 150, (variant, c)
    # Chi-square df=3 at p=0.01 is 11.345.
    chi2 = sum((c - 2500.0) ** 2 / 2500.0 for c in counts.values())
    assert chi2 < 11.345


def test_dynamic_redraws_across_epochs():
    # P(same variant 10 epochs straight) = (1/4)^9; over 200 docs the
    # fraction that vary must clear 0.9 with huge margin.
    varied = 0
    for i in range(200):
        seen = {dynamic_variant(seed=2, epoch=e, doc_id=f"doc{i}")
                for e in range(10)}
        varied += len(seen) > 1
    assert varied / 200 >= 0.9


def test_dynamic_realizes_the_named_variant():
    m = bmatrix(6, [(0, 1, 0)])
    for epoch in range(12):
        plan = plan_dynamic(m, seed=9, epoch=epoch, doc_id="x")
        variant = dynamic_variant(seed=9, epoch=epoch, doc_id="x")
        if variant == "none":
            assert plan.cells == frozenset()
        elif variant == "diagonal":
            assert plan.cells == plan_diagonal(m, window=1).cells
        elif variant == "asym_right":
            assert plan.cells == plan_asymmetric(
                m, "right", DYNAMIC_ASYMMETRIC_WINDOW).cells
        else:
            assert plan.cells == plan_asymmetric(
                m, "left", DYNAMIC_ASYMMETRIC_WINDOW).cells


# --- plan_all ----------------------------------------------------------------

def test_all_three_entities_empty_gold():
    assert len(plan_all(bmatrix(3, [])).cells) == 6


def test_all_is_exact_complement():
    m = bmatrix(6, [(0, 3, 1), (5, 2, 0)])
    assert plan_all(m).cells == frozenset(zero_cells(m))


def test_all_single_entity_is_empty():
    assert plan_all(bmatrix(1, [])).cells == frozenset()


def test_all_warns_when_exceeding_length_budget():
    m = bmatrix(10, [])
    with pytest.warns(UserWarning):
        plan_all(m, length_budget=30)


# --- shared properties -------------------------------------------------------

def test_plans_disjoint_from_gold_and_diagonal():
    rng = np.random.default_rng(17)
    for _ in range(30):
        n = int(rng.integers(2, 9))
        facts = [(h, t, int(rng.integers(0, 4)))
                 for h in range(n) for t in range(n)
                 if h != t and rng.random() < 0.1]
        m = bmatrix(n, facts)
        gold = set(m.cells)
        plans = [
            plan_none(m),
            plan_random(m, 0.5, seed=3),
            plan_diagonal(m, window=2),
            plan_asymmetric(m, "right", window=2),
            plan_dynamic(m, seed=0, epoch=1, doc_id="p"),
            plan_all(m),
        ]
        for plan in plans:
            assert not (plan.cells & gold), plan.strategy
            assert all(i != j for i, j in plan.cells), plan.strategy


def test_make_plan_dispatch_matches_direct_calls():
    m = bmatrix(5, [(0, 1, 0)])
    assert make_plan(m, "none").cells == plan_none(m).cells
    assert make_plan(m, "diagonal", window=2).cells == plan_diagonal(m, 2).cells
    assert (make_plan(m, "random", fraction=0.2, seed=4).cells
            == plan_random(m, 0.2, seed=4).cells)
    assert (make_plan(m, "asym_right", window=2).cells
            == plan_asymmetric(m, "right", 2).cells)
    assert (make_plan(m, "asym_left", window=2).cells
            == plan_asymmetric(m, "left", 2).cells)
    assert (make_plan(m, "dynamic", seed=1, epoch=2, doc_id="z").cells
            == plan_dynamic(m, seed=1, epoch=2, doc_id="z").cells)
    assert make_plan(m, "all").cells == plan_all(m).cells
    with pytest.raises(ValueError):
        make_plan(m, "bogus")


def test_diagonal_strictly_increases_negative_terms():
    # The imbalance diagnostic: with no sampling the only negative
    # supervision is the EOS step; the diagonal band adds cells.
    m = bmatrix(8, [(0, 1, 0), (3, 4, 2)])
    base = target_term_counts(m, plan_none(m))
    banded = target_term_counts(m, plan_diagonal(m, window=1))
    assert banded["negative"] > base["negative"]
    assert banded["positive"] == base["positive"] == 2
