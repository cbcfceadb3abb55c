"""Reproducible Brownian increments on a fine grid, with exact coarsening.

Key derivation
--------------
Path ``i`` of a run with master seed ``s`` draws from a Philox-4x64 counter
stream keyed by the 128-bit key ``(s, i)`` with the counter starting at 0.
Distinct path indices therefore never share counter ranges, and a path's
increments do not depend on which worker produced them or in what order.

Each 64-bit output word ``w`` becomes a uniform ``u = ((w >> 11) + 0.5) * 2**-53``
in the open interval (0, 1) and then a standard normal ``ndtri(u)`` (inverse
normal CDF, Cephes rational approximations, double precision).

Coarsening
----------
Increments are coarsened by repeated pairwise halving, ``a[0::2] + a[1::2]``.
This fixes one summation tree for every factor, so coarsening by 2 twice
equals coarsening by 4 bit for bit, and the single increment left after
coarsening by ``n_fine`` is exactly ``W(T)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

__all__ = ["BrownianGrid", "generate", "generate_batch", "coarsen", "coarsen_array", "tree_sum"]

_MASK64 = (1 << 64) - 1


def _is_pow2(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n >= 1 and (int(n) & (int(n) - 1)) == 0


def _standard_normals(master_seed: int, path_index: int, n: int) -> np.ndarray:
    key = np.array([int(master_seed) & _MASK64, int(path_index) & _MASK64], dtype=np.uint64)
    bits = np.random.Philox(key=key, counter=0).random_raw(n)
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass(frozen=True, eq=False)
class BrownianGrid:
    T: float
    n_fine: int
    increments: np.ndarray
    master_seed: int
    path_index: int

    @property
    def dt(self) -> float:
        return self.T / self.n_fine

    @property
    def W_T(self) -> float:
        return float(tree_sum(self.increments))

    def path(self) -> np.ndarray:
        """``W`` at the ``n_fine + 1`` fine grid points, starting from 0."""
        return np.concatenate(([0.0], np.cumsum(self.increments)))


def _check_n_fine(n_fine) -> int:
    if not _is_pow2(n_fine):
        raise ValueError(f"n_fine must be a power of two, got {n_fine}")
    return int(n_fine)


def generate(T: float, n_fine: int, master_seed: int, path_index: int) -> BrownianGrid:
    """Fine-grid Brownian increments for one path, i.i.d. ``N(0, T/n_fine)``."""
    n_fine = _check_n_fine(n_fine)
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    inc = _standard_normals(master_seed, path_index, n_fine) * math.sqrt(T / n_fine)
    inc.flags.writeable = False
    return BrownianGrid(float(T), n_fine, inc, int(master_seed), int(path_index))


def generate_batch(T: float, n_fine: int, master_seed: int, path_indices) -> np.ndarray:
    """Increments for several paths stacked as rows; row ``k`` equals ``generate(..., path_indices[k])``."""
    n_fine = _check_n_fine(n_fine)
    idx = list(path_indices)
    out = np.empty((len(idx), n_fine))
    scale = math.sqrt(T / n_fine)
    for row, i in enumerate(idx):
        out[row] = _standard_normals(master_seed, i, n_fine) * scale
    return out


def coarsen_array(increments: np.ndarray, factor: int) -> np.ndarray:
    """Coarsen along the last axis by a power-of-two factor using the fixed pairwise tree."""
    a = np.asarray(increments, dtype=float)
    n = a.shape[-1]
    if not _is_pow2(factor):
        raise ValueError(f"coarsening factor must be a power of two, got {factor}")
    if n % factor:
        raise ValueError(f"factor {factor} does not divide {n}")
    while factor > 1:
        a = a[..., 0::2] + a[..., 1::2]
        factor //= 2
    return a


def coarsen(grid: BrownianGrid, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` fine increments (no resampling)."""
    return coarsen_array(grid.increments, factor)


def tree_sum(increments: np.ndarray) -> np.ndarray:
    """Sum of increments along the last axis in the coarsening tree order."""
    a = np.asarray(increments, dtype=float)
    return coarsen_array(a, a.shape[-1])[..., 0]
