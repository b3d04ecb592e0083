import numpy as np
import pytest

from nsn_engine.errors import ConfigurationError, PlacementError, PoissonConvergenceError
from nsn_engine.poisson import (
    PoissonSolveParams,
    boundary_ring,
    hard_paste,
    interior_of,
    poisson_blend,
    solve_poisson,
)

TIGHT = PoissonSolveParams(tolerance=1e-10)


def make_blob_mask(rng, h, w):
    mask = np.zeros((h, w), dtype=bool)
    y0, x0 = rng.integers(0, max(1, h // 3)), rng.integers(0, max(1, w // 3))
    y1, x1 = rng.integers(y0 + 3, h + 1), rng.integers(x0 + 3, w + 1)
    mask[y0:y1, x0:x1] = True
    # carve a notch so the region is not always a rectangle
    if rng.random() < 0.5 and y1 - y0 > 4:
        mask[y0 + 2, x0:(x0 + x1) // 2] = False
    return mask


def dense_oracle(target, source, mask):
    interior = interior_of(mask)
    ys, xs = np.nonzero(interior)
    index = {(int(y), int(x)): i for i, (y, x) in enumerate(zip(ys, xs))}
    n = len(index)
    A = np.zeros((n, n))
    b = np.zeros(n)
    for i, (y, x) in enumerate(zip(ys, xs)):
        A[i, i] = 4.0
        b[i] = 4.0 * source[y, x]
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            q = (int(y + dy), int(x + dx))
            b[i] -= source[q]
            if q in index:
                A[i, index[q]] = -1.0
            else:
                b[i] += target[q]
    out = target.astype(np.float64).copy()
    if n:
        out[ys, xs] = np.linalg.solve(A, b)
    return out


def test_interior_and_ring_partition_the_mask():
    mask = np.zeros((6, 6), dtype=bool)
    mask[1:5, 1:5] = True
    assert interior_of(mask).sum() == 4
    assert boundary_ring(mask).sum() == 12
    assert not (interior_of(mask) & boundary_ring(mask)).any()


def test_sparse_solution_matches_dense_solve():
    rng = np.random.default_rng(11)
    for _ in range(100):
        h, w = rng.integers(4, 17, size=2)
        target = rng.uniform(0, 255, size=(h, w))
        source = rng.uniform(0, 255, size=(h, w))
        mask = make_blob_mask(rng, h, w)
        got = solve_poisson(target, source, mask, TIGHT)
        np.testing.assert_allclose(got, dense_oracle(target, source, mask), atol=1e-5)


def test_empty_mask_returns_identical_image():
    target = np.random.default_rng(0).integers(0, 256, size=(10, 10, 3), dtype=np.uint8)
    out = poisson_blend(target, np.zeros((4, 4, 3), dtype=np.uint8), np.zeros((4, 4), dtype=bool), (3, 3))
    assert np.array_equal(out, target)
    assert out is not target


def test_constant_source_into_constant_target_is_flat():
    target = np.full((20, 20, 3), 90, dtype=np.uint8)
    source = np.full((10, 10, 3), 200, dtype=np.uint8)
    mask = np.ones((10, 10), dtype=bool)
    out = poisson_blend(target, source, mask, (5, 5))
    assert np.abs(out.astype(int) - 90).max() <= 1


def test_pixels_outside_interior_are_untouched():
    rng = np.random.default_rng(5)
    target = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
    source = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
    mask = np.zeros((12, 12), dtype=bool)
    mask[2:10, 3:11] = True
    out = poisson_blend(target, source, mask, (6, 6))

    changed = np.zeros((24, 24), dtype=bool)
    changed[6:18, 6:18] = interior_of(mask)
    assert np.array_equal(out[~changed], target[~changed])


def test_mask_touching_target_border_is_rejected():
    target = np.zeros((16, 16, 3), dtype=np.uint8)
    source = np.zeros((8, 8, 3), dtype=np.uint8)
    mask = np.ones((8, 8), dtype=bool)
    with pytest.raises(PlacementError):
        poisson_blend(target, source, mask, (0, 4))
    with pytest.raises(PlacementError):
        hard_paste(target, source, mask, (10, 4))


def test_hard_paste_copies_masked_pixels():
    target = np.zeros((10, 10, 3), dtype=np.uint8)
    source = np.full((4, 4, 3), 255, dtype=np.uint8)
    mask = np.zeros((4, 4), dtype=bool)
    mask[1:3, 1:3] = True
    out = hard_paste(target, source, mask, (3, 3))
    assert out[4:6, 4:6].min() == 255
    assert out.sum() == 4 * 3 * 255


def test_iteration_cap_raises_convergence_error():
    rng = np.random.default_rng(2)
    target = rng.uniform(0, 255, size=(30, 30))
    source = rng.uniform(0, 255, size=(30, 30))
    mask = np.ones((30, 30), dtype=bool)
    with pytest.raises(PoissonConvergenceError):
        solve_poisson(target, source, mask, PoissonSolveParams(tolerance=1e-12, max_iterations=1))


def test_solver_params_validated():
    with pytest.raises(ConfigurationError):
        PoissonSolveParams(tolerance=0.0)
    with pytest.raises(ConfigurationError):
        PoissonSolveParams(max_iterations=0)
