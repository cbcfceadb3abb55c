import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from logem.noise import coarsen, coarsen_array, generate, generate_batch, tree_sum


def test_same_inputs_same_increments():
    a = generate(1.0, 256, 42, 7)
    b = generate(1.0, 256, 42, 7)
    assert np.array_equal(a.increments, b.increments)
    assert a.increments.shape == (256,)


def test_increments_are_read_only():
    g = generate(1.0, 8, 1, 0)
    with pytest.raises(ValueError):
        g.increments[0] = 1.0


def test_distinct_paths_and_seeds_differ():
    base = generate(1.0, 64, 3, 0).increments
    assert not np.array_equal(base, generate(1.0, 64, 3, 1).increments)
    assert not np.array_equal(base, generate(1.0, 64, 4, 0).increments)


def test_batch_rows_match_single_paths():
    rows = generate_batch(2.0, 32, 9, [5, 0, 11])
    for r, i in zip(rows, [5, 0, 11]):
        assert np.array_equal(r, generate(2.0, 32, 9, i).increments)


def test_prefix_stable_across_resolution():
    # the counter stream is shared, so a path's first normals do not depend on n_fine
    a = generate(1.0, 16, 5, 2).increments / math.sqrt(1 / 16)
    b = generate(1.0, 64, 5, 2).increments / math.sqrt(1 / 64)
    np.testing.assert_array_equal(a, b[:16])


@pytest.mark.parametrize("n", [0, 3, 12, 100])
def test_n_fine_must_be_power_of_two(n):
    with pytest.raises(ValueError):
        generate(1.0, n, 0, 0)


def test_terminal_moments():
    n = 100_000
    wt = generate_batch(1.0, 1, 2024, range(n))[:, 0]
    assert abs(wt.mean()) < 3 * 10**-2.5
    assert abs(wt.var() - 1.0) < 0.05


def test_increment_variance_scales_with_dt():
    inc = generate_batch(0.5, 1024, 1, range(200))
    assert inc.var() == pytest.approx(0.5 / 1024, rel=0.02)


def test_coarsen_full_factor_is_w_t():
    g = generate(1.0, 1024, 8, 3)
    out = coarsen(g, 1024)
    assert out.shape == (1,)
    assert out[0] == g.W_T


def test_coarsen_identity():
    g = generate(1.0, 64, 8, 3)
    assert np.array_equal(coarsen(g, 1), g.increments)


def test_coarsen_errors():
    g = generate(1.0, 64, 8, 3)
    with pytest.raises(ValueError):
        coarsen(g, 3)
    with pytest.raises(ValueError):
        coarsen(g, 128)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**63), st.integers(min_value=0, max_value=10**6),
       st.integers(min_value=1, max_value=10), st.data())
def test_coarsening_associative_and_exact(seed, idx, log_n, data):
    n = 2**log_n
    g = generate(1.0, n, seed, idx)
    a = data.draw(st.integers(min_value=0, max_value=log_n))
    b = data.draw(st.integers(min_value=0, max_value=log_n - a))
    twice = coarsen_array(coarsen(g, 2**a), 2**b)
    once = coarsen(g, 2 ** (a + b))
    assert np.array_equal(twice, once)
    assert tree_sum(once) == g.W_T


def test_blocks_are_exact_sums():
    g = generate(1.0, 16, 1, 1)
    out = coarsen(g, 4)
    for j in range(4):
        blk = g.increments[4 * j: 4 * j + 4]
        assert out[j] == (blk[0] + blk[1]) + (blk[2] + blk[3])


def test_path_starts_at_zero():
    g = generate(1.0, 8, 1, 1)
    p = g.path()
    assert p[0] == 0.0 and len(p) == 9
    assert p[-1] == pytest.approx(g.W_T, abs=1e-14)
