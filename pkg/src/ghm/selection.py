"""Information criterion and (G, L) grid search."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def information_criterion(loglik: float, N: int, G: int, L: int, m: int,
                          dims: Sequence[int]) -> float:
    """``-2 Q + log(N) * (G (L - 1) + m + sum(dims))``."""
    return -2.0 * loglik + math.log(N) * (G * (L - 1) + m + sum(dims))


def ic(result, data=None) -> float:
    """IC of a fitted model; ``data`` only needs ``N`` and ``m`` when given."""
    N = data.N if data is not None else result.N
    m = data.m if data is not None else result.m
    # the structured-grouping term is a prior on labels, not part of Q
    return information_criterion(result.loglik, N, result.G, result.L, m, result.dims)


def cell_seed(seed: int, G: int, L: int) -> int:
    return int(seed) ^ ((G << 16) | L)


@dataclass
class SelectionGrid:
    G_candidates: list[int]
    L_candidates: list[int]
    results: dict = field(default_factory=dict)

    def __post_init__(self):
        self.G_candidates = sorted(int(g) for g in self.G_candidates)
        self.L_candidates = sorted(int(v) for v in self.L_candidates)
        if not self.G_candidates or not self.L_candidates:
            raise ValueError("candidate lists must be nonempty")
        if self.G_candidates[0] < 1 or self.L_candidates[0] < 1:
            raise ValueError("candidates must be positive")

    def ic_table(self) -> np.ndarray:
        """IC values with rows indexed by G and columns by L (NaN if unfitted)."""
        t = np.full((len(self.G_candidates), len(self.L_candidates)), np.nan)
        for a, G in enumerate(self.G_candidates):
            for b, L in enumerate(self.L_candidates):
                if (G, L) in self.results:
                    t[a, b] = self.results[G, L].ic
        return t

    @property
    def best(self) -> tuple[int, int]:
        # iteration order is G then L ascending, so strict < keeps the smaller cell on ties
        best, best_ic = None, math.inf
        for G in self.G_candidates:
            for L in self.L_candidates:
                r = self.results.get((G, L))
                if r is not None and r.ic < best_ic:
                    best, best_ic = (G, L), r.ic
        if best is None:
            raise ValueError("no fitted cells")
        return best

    @property
    def best_result(self):
        return self.results[self.best]

    def unconverged(self) -> list[tuple[int, int]]:
        return [c for c, r in self.results.items() if not r.converged]

    def to_csv(self) -> str:
        lines = ["G," + ",".join(f"L={L}" for L in self.L_candidates)]
        for G, row in zip(self.G_candidates, self.ic_table()):
            lines.append(f"{G}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        G, L = self.best
        return {
            "G": G,
            "L": L,
            "ic": self.results[G, L].ic,
            "G_candidates": self.G_candidates,
            "L_candidates": self.L_candidates,
            "unconverged": [list(c) for c in sorted(self.unconverged())],
        }


def parse_range(text: str) -> list[int]:
    """``"1..8"`` or ``"2,3,4"`` or ``"3"`` -> list of ints."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return sorted(set(out))


def select(data, grid: SelectionGrid, base_config, kinds, similarity=None,
           jobs: int = 1) -> SelectionGrid:
    """Fit every (G, L) cell and attach the results to ``grid``.

    Cells are seeded from ``base_config.seed`` XOR the cell coordinates. The
    G-independent part of initialization (local mixtures and the shared
    refinement) is computed once per ``L``, seeded by ``seed ^ L``, and shared
    by every ``G`` in that column. Non-converged cells take part in the selection and
    are listed by :meth:`SelectionGrid.unconverged`.
    """
    from dataclasses import replace

    from . import em
    from . import families as fam

    if grid.G_candidates[-1] > data.m:
        raise ValueError(f"G candidates exceed the number of clusters m={data.m}")
    cells = [(G, L) for G in grid.G_candidates for L in grid.L_candidates]

    def run_column(L):
        kinds_L = fam.expand_kinds(kinds, L)
        est = em.initial_estimates(data, L, kinds_L, seed=int(base_config.seed) ^ L,
                                   n_starts=base_config.local_starts,
                                   max_iter=base_config.max_iter, tol=base_config.tol)
        out = {}
        for G in grid.G_candidates:
            cfg = replace(base_config, G=G, L=L, seed=cell_seed(base_config.seed, G, L))
            out[G, L] = em.fit(data, cfg, kinds_L, similarity=similarity, estimates=est)
        return out

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            columns = list(ex.map(run_column_job, [(data, grid.G_candidates, L, base_config, kinds,
                                                    similarity) for L in grid.L_candidates]))
    else:
        columns = [run_column(L) for L in grid.L_candidates]
    for col in columns:
        grid.results.update(col)
    assert set(grid.results) >= set(cells)
    return grid


def run_column_job(args):
    data, G_candidates, L, base_config, kinds, similarity = args
    g = SelectionGrid(G_candidates, [L])
    return select(data, g, base_config, kinds, similarity, jobs=1).results
