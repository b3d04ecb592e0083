# src/nsn_engine/poisson.py
"""
Gradient-domain (Poisson) blending.

Per channel, over the interior Omega' of the masked region:
    4 f_p - sum_{q in N(p), q interior} f_q = sum_{q in N(p), q known} t_q + (4 g_p - sum_{q in N(p)} g_q)
where g is the source, t the target, and "known" pixels are the boundary ring
(mask pixels 4-adjacent to a non-mask pixel or to the source edge).
The 5-point Laplacian is SPD, solved with conjugate gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg

from nsn_engine.config import DEFAULT_CG_TOL
from nsn_engine.errors import ConfigurationError, PlacementError, PoissonConvergenceError

logger = logging.getLogger(__name__)

_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class PoissonSolveParams:
    tolerance: float = DEFAULT_CG_TOL
    max_iterations: int | None = None  # None -> 10 x number of unknowns

    def __post_init__(self) -> None:
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be > 0")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")

    def iterations_for(self, unknowns: int) -> int:
        return self.max_iterations if self.max_iterations is not None else max(1, 10 * unknowns)


def interior_of(mask: np.ndarray) -> np.ndarray:
    """Mask pixels whose four neighbours are all in the mask (array edge counts as outside)."""
    m = np.pad(mask.astype(bool), 1, constant_values=False)
    inner = m[1:-1, 1:-1].copy()
    for dy, dx in _NEIGHBOURS:
        inner &= m[1 + dy : m.shape[0] - 1 + dy, 1 + dx : m.shape[1] - 1 + dx]
    return inner


def boundary_ring(mask: np.ndarray) -> np.ndarray:
    return mask.astype(bool) & ~interior_of(mask)


def _assemble(interior: np.ndarray) -> tuple[sparse.csr_matrix, np.ndarray]:
    ys, xs = np.nonzero(interior)
    n = ys.size
    index = np.full(interior.shape, -1, dtype=np.int64)
    index[ys, xs] = np.arange(n)

    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [np.full(n, 4.0)]
    for dy, dx in _NEIGHBOURS:
        # interior pixels always have in-array neighbours
        q = index[ys + dy, xs + dx]
        ok = q >= 0
        rows.append(np.arange(n)[ok])
        cols.append(q[ok])
        vals.append(np.full(int(ok.sum()), -1.0))
    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return A, index


def _rhs(interior: np.ndarray, index: np.ndarray, g: np.ndarray, t: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(interior)
    b = 4.0 * g[ys, xs]
    for dy, dx in _NEIGHBOURS:
        qy, qx = ys + dy, xs + dx
        b -= g[qy, qx]
        known = index[qy, qx] < 0
        b[known] += t[qy[known], qx[known]]
    return b


def relative_residual(A: sparse.spmatrix, x: np.ndarray, b: np.ndarray) -> float:
    r = float(np.linalg.norm(b - A @ x))
    bn = float(np.linalg.norm(b))
    return r / bn if bn > 0.0 else r


def solve_poisson(
    target_patch: np.ndarray,
    source: np.ndarray,
    mask: np.ndarray,
    params: PoissonSolveParams | None = None,
) -> np.ndarray:
    """
    Unclamped float solution over the source footprint. Pixels outside the interior
    keep the target values; interior pixels carry the CG solution.
    """
    params = params or PoissonSolveParams()
    t = target_patch.astype(np.float64)
    g = source.astype(np.float64)
    out = t.copy()
    interior = interior_of(mask)
    if not interior.any():
        return out

    A, index = _assemble(interior)
    n = A.shape[0]
    maxiter = params.iterations_for(n)
    ys, xs = np.nonzero(interior)

    channels = [None] if t.ndim == 2 else range(t.shape[2])
    for ch in channels:
        tc = t if ch is None else t[..., ch]
        gc = g if ch is None else g[..., ch]
        b = _rhs(interior, index, gc, tc)
        x0 = tc[ys, xs]

        iterations = 0

        def _count(_xk: np.ndarray) -> None:
            nonlocal iterations
            iterations += 1

        x, info = cg(A, b, x0=x0, rtol=params.tolerance, atol=0.0, maxiter=maxiter, callback=_count)
        res = relative_residual(A, x, b)
        if info != 0 or res > params.tolerance:
            raise PoissonConvergenceError(res, iterations)
        logger.debug("channel %s converged in %d iterations (residual %.2e)", ch, iterations, res)
        if ch is None:
            out[ys, xs] = x
        else:
            out[ys, xs, ch] = x
    return out


def _check_placement(target: np.ndarray, source: np.ndarray, mask: np.ndarray, offset: tuple[int, int]) -> None:
    if source.shape[:2] != mask.shape:
        raise PlacementError(f"source {source.shape[:2]} and mask {mask.shape} dims differ")
    th, tw = target.shape[:2]
    r, c = int(offset[0]), int(offset[1])
    h, w = mask.shape
    if r < 0 or c < 0 or r + h > th or c + w > tw:
        raise PlacementError(f"source placed at {offset} leaves the {tw}x{th} target")
    ys, xs = np.nonzero(mask)
    ys = ys + r
    xs = xs + c
    if (ys == 0).any() or (xs == 0).any() or (ys == th - 1).any() or (xs == tw - 1).any():
        raise PlacementError(f"mask region placed at {offset} touches the target border")


def poisson_blend(
    target: np.ndarray,
    source: np.ndarray,
    mask: np.ndarray,
    offset: tuple[int, int],
    params: PoissonSolveParams | None = None,
) -> np.ndarray:
    """Blend source into target over mask; offset is the (row, col) of the source's top-left."""
    mask = mask.astype(bool)
    if not mask.any():
        return target.copy()
    _check_placement(target, source, mask, offset)

    r, c = int(offset[0]), int(offset[1])
    h, w = mask.shape
    patch = target[r : r + h, c : c + w]
    solved = solve_poisson(patch, source, mask, params)

    interior = interior_of(mask)
    out = target.copy()
    region = out[r : r + h, c : c + w]
    region[interior] = np.clip(np.floor(solved[interior] + 0.5), 0, 255).astype(np.uint8)
    return out


def hard_paste(target: np.ndarray, source: np.ndarray, mask: np.ndarray, offset: tuple[int, int]) -> np.ndarray:
    """Direct masked copy, the fallback when blending fails."""
    mask = mask.astype(bool)
    if not mask.any():
        return target.copy()
    _check_placement(target, source, mask, offset)
    r, c = int(offset[0]), int(offset[1])
    h, w = mask.shape
    out = target.copy()
    out[r : r + h, c : c + w][mask] = source[mask]
    return out
