"""Optimal bipartite assignment with a deterministic tie-break.

scipy's O(n^3) solver provides optimal totals; on top of it the solve
routine refines the answer so that among all optimal assignments the
returned pair list (sorted by row) is lexicographically smallest. Ties
within ~1e-9 relative of the optimum are treated as exact ties, so
integer-valued matrices always tie-break exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InputError

Pair = tuple[int, int]


@dataclass(frozen=True)
class CostMatrix:
    """Dense cost or similarity matrix with an optimization sense."""

    values: np.ndarray
    sense: Literal["minimize", "maximize"] = "minimize"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InputError(f"cost matrix must be 2-D, got {values.ndim}-D")
        if not np.all(np.isfinite(values)):
            raise InputError("cost matrix contains non-finite values")
        if self.sense not in ("minimize", "maximize"):
            raise InputError(f"unknown sense {self.sense!r}")
        object.__setattr__(self, "values", values)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def solve(costs: CostMatrix) -> list[Pair]:
    """Optimal assignment of size min(rows, cols), sorted by row.

    Among equally optimal assignments the lexicographically smallest
    (row, col) pair list is returned; identical input always yields the
    identical answer.
    """
    matrix = costs.values if costs.sense == "minimize" else -costs.values
    return _solve_minimize_lex(matrix)


def solve_thresholded(similarity: np.ndarray | CostMatrix, floor: float) -> list[Pair]:
    """Maximize total similarity, then drop matched pairs below floor.

    The assignment is solved on the full matrix first; thresholding only
    unmatches pairs afterwards, so a floor of -inf reproduces solve().
    Accepts a raw matrix or a maximize-sense CostMatrix.
    """
    if isinstance(similarity, CostMatrix):
        if similarity.sense != "maximize":
            raise InputError("thresholded solving is defined on similarities, "
                             "not costs; use sense='maximize'")
        costs = similarity
    else:
        costs = CostMatrix(values=np.asarray(similarity, dtype=np.float64),
                           sense="maximize")
    pairs = solve(costs)
    return [(r, c) for r, c in pairs if costs.values[r, c] >= floor]


def _solve_minimize_lex(matrix: np.ndarray) -> list[Pair]:
    n_rows, n_cols = matrix.shape
    size = min(n_rows, n_cols)
    if size == 0:
        return []
    base_rows, base_cols = linear_sum_assignment(matrix)
    optimum = float(matrix[base_rows, base_cols].sum())
    tol = 1e-9 * max(1.0, float(np.abs(matrix).max()) * size)

    rows = list(range(n_rows))
    cols = list(range(n_cols))
    completion = dict(zip(base_rows.tolist(), base_cols.tolist()))
    chosen: list[Pair] = []
    spent = 0.0

    for position in range(size):
        need = size - position
        # The maintained completion is an optimal solution of the current
        # subproblem; its smallest pair bounds the candidate scan.
        known_row = min(completion)
        known = (known_row, completion[known_row])
        pick, sub_solution = _smallest_feasible(
            matrix, rows, cols, need, optimum - spent, tol, known
        )
        if sub_solution is None:
            completion.pop(pick[0])
        else:
            completion = sub_solution
        chosen.append(pick)
        spent += float(matrix[pick[0], pick[1]])
        rows = [r for r in rows if r > pick[0]]
        cols.remove(pick[1])
    return chosen


def _smallest_feasible(matrix, rows, cols, need, budget, tol, known):
    """First (row, col) in lexicographic order that an optimal assignment
    of the subproblem can start with; rows before it stay unmatched.

    Returns the pair plus the probe's sub-solution, or None for the
    known-feasible fallback pair."""
    max_skip = len(rows) - need
    col_arr = np.asarray(cols, dtype=np.intp)
    for row_pos, r in enumerate(rows):
        if row_pos > max_skip or (r, cols[0] if cols else 0) > known:
            break
        sub_rows = rows[row_pos + 1:]
        bounds = _exclusion_bounds(matrix, sub_rows, col_arr, need - 1)
        row_vals = matrix[r, col_arr]
        for col_pos, c in enumerate(cols):
            if (r, c) == known:
                return known, None
            if (r, c) > known:
                break
            lower = float(row_vals[col_pos]) + bounds[col_pos]
            if lower > budget + tol:
                continue
            sub_cols = [x for x in cols if x != c]
            total, solution = _probe(matrix, sub_rows, sub_cols, need - 1)
            if float(row_vals[col_pos]) + total <= budget + tol:
                return (r, c), solution
    return known, None


def _exclusion_bounds(matrix, sub_rows, col_arr, need):
    """For each candidate column, a lower bound on the optimal completion
    cost once that column is removed. Uses the two smallest entries per
    row so the bound is O(rows * cols) for the whole column sweep."""
    n_cands = len(col_arr)
    if need == 0 or not sub_rows:
        return np.zeros(n_cands)
    sub = matrix[np.asarray(sub_rows, dtype=np.intp)[:, None], col_arr]
    order = np.argsort(sub, axis=1)
    best = sub[np.arange(len(sub_rows)), order[:, 0]]
    if sub.shape[1] > 1:
        second = sub[np.arange(len(sub_rows)), order[:, 1]]
    else:
        second = np.full(len(sub_rows), np.inf)
    # per-candidate-column row minima: swap in the second-best where the
    # removed column was the argmin
    per_col = np.tile(best[:, None], (1, n_cands))
    hit = order[:, 0][:, None] == np.arange(n_cands)[None, :]
    per_col = np.where(hit, second[:, None], per_col)
    if len(sub_rows) == need:
        return per_col.sum(axis=0)
    part = np.partition(per_col, need - 1, axis=0)[:need]
    return part.sum(axis=0)


def _probe(matrix, sub_rows, sub_cols, need):
    """Optimal completion over the given rows/cols; returns its total and
    the solution mapped back to original indices."""
    if need == 0:
        return 0.0, {}
    row_idx = np.asarray(sub_rows, dtype=np.intp)
    col_idx = np.asarray(sub_cols, dtype=np.intp)
    sub = matrix[row_idx[:, None], col_idx]
    rr, cc = linear_sum_assignment(sub)
    total = float(sub[rr, cc].sum())
    solution = {int(row_idx[i]): int(col_idx[j]) for i, j in zip(rr, cc)}
    return total, solution
