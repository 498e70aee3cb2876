"""Transducer negative log-likelihood over the (T, U+1) alignment lattice.

Three routes compute the same quantity:

* ``transducer_nll``           — forward/backward DP kernels; the analytic
                                 occupancy gradient is its tape backward.
                                 This is the training path.
* ``transducer_nll_autodiff``  — the same recursion built from tape ops
                                 (logaddexp per cell); its gradient comes
                                 from plain reverse-mode. Oracle for the
                                 analytic path.
* ``brute_force_nll``          — explicit enumeration of all alignments,
                                 summed in the linear domain. Oracle for
                                 both, feasible for T+U <= 12.

All lattice math runs in the log domain with a -inf-safe logadd
(max + log1p(exp(-|delta|))); the loss permits any number of label
emissions per frame (the decoder imposes its own cap separately).
"""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ShapeError, Tensor

BRUTE_FORCE_LIMIT = 12


def _check_inputs(shape, labels: np.ndarray, blank: int) -> None:
    if len(shape) != 3:
        raise ShapeError(f"grid must be (T, U+1, K), got {shape}")
    T, U1, K = shape
    if T < 1:
        raise ShapeError("grid needs at least one frame")
    if labels.size != U1 - 1:
        raise ShapeError(f"grid has U+1={U1} label rows but {labels.size} labels")
    if not 0 <= blank < K:
        raise ValueError(f"blank index {blank} outside symbol range {K}")
    if labels.size:
        if (labels == blank).any():
            raise ValueError("labels must not contain the blank index")
        if ((labels < 0) | (labels >= K)).any():
            raise ValueError("label index outside symbol range")


def transducer_nll(grid, labels, blank: int) -> Tensor:
    """-log P(labels | grid), summing over all monotonic alignments.

    Differentiable through the grid: the backward pass applies the analytic
    occupancy gradient from the alpha/beta products.
    """
    grid_t = grid if isinstance(grid, Tensor) else Tensor(grid)
    labels = np.asarray(labels, dtype=np.int64)
    _check_inputs(grid_t.shape, labels, blank)
    logp = np.ascontiguousarray(grid_t.data)
    _, ll = kernels.lattice_alpha(logp, labels, blank)

    def backward(g):
        _, occ = kernels.lattice_grad(logp, labels, blank)
        ad._accumulate(grid_t, g * occ)

    return ad._make(np.asarray(-ll), (grid_t,), backward)


def transducer_grad(grid: np.ndarray, labels, blank: int) -> np.ndarray:
    """Analytic gradient of the negative log-likelihood w.r.t. the log-probs.

    grad[t, u, k] = -(occupancy of emitting k at (t, u)); zero everywhere
    when the labels have zero probability.
    """
    grid = np.ascontiguousarray(np.asarray(grid, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    _check_inputs(grid.shape, labels, blank)
    _, occ = kernels.lattice_grad(grid, labels, blank)
    return occ


def transducer_nll_autodiff(grid, labels, blank: int) -> Tensor:
    """Tape-composed twin of `transducer_nll` (per-cell logaddexp ops).

    Quadratic tape growth makes this the verification path, not the
    training path.
    """
    grid_t = grid if isinstance(grid, Tensor) else Tensor(grid)
    labels = np.asarray(labels, dtype=np.int64)
    _check_inputs(grid_t.shape, labels, blank)
    T, U1, _ = grid_t.shape
    U = U1 - 1
    alpha: list[list[Tensor | None]] = [[None] * U1 for _ in range(T)]
    alpha[0][0] = Tensor(0.0)
    for t in range(1, T):
        alpha[t][0] = ad.add(alpha[t - 1][0], grid_t[t - 1, 0, blank])
    for u in range(1, U1):
        alpha[0][u] = ad.add(alpha[0][u - 1], grid_t[0, u - 1, int(labels[u - 1])])
    for t in range(1, T):
        for u in range(1, U1):
            via_blank = ad.add(alpha[t - 1][u], grid_t[t - 1, u, blank])
            via_label = ad.add(alpha[t][u - 1], grid_t[t, u - 1, int(labels[u - 1])])
            alpha[t][u] = ad.logaddexp(via_blank, via_label)
    return ad.neg(ad.add(alpha[T - 1][U], grid_t[T - 1, U, blank]))


def alignment_label_slots(T: int, U: int):
    """All placements of U label emissions among the first T+U-1 steps.

    Each alignment interleaves T blanks and U labels and must end with a
    blank, so only the first T+U-1 positions are free. Yields index tuples;
    there are binomial(T+U-1, U) of them.
    """
    return combinations(range(T + U - 1), U)


def brute_force_nll(grid: np.ndarray, labels, blank: int) -> float:
    """Enumerate every alignment; sum path probabilities in linear domain."""
    grid = np.asarray(grid, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_inputs(grid.shape, labels, blank)
    T, U1, _ = grid.shape
    U = U1 - 1
    if T + U > BRUTE_FORCE_LIMIT:
        raise ValueError(f"T+U = {T + U} exceeds enumeration bound {BRUTE_FORCE_LIMIT}")
    total = 0.0
    for slots in alignment_label_slots(T, U):
        slot_set = set(slots)
        t = u = 0
        logp = 0.0
        for step in range(T + U - 1):
            if step in slot_set:
                logp += grid[t, u, labels[u]]
                u += 1
            else:
                logp += grid[t, u, blank]
                t += 1
        logp += grid[T - 1, U, blank]
        total += math.exp(logp)
    return math.inf if total == 0.0 else -math.log(total)
