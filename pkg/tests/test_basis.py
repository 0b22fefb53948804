import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvemi.basis import (KnotError, TveSpec, basis, basis_matrix, parse_tve_flag, ph_contrast,
                         select_knots, tve_eval)


def test_rcs_values_before_and_between_knots():
    spec = TveSpec.rcs((1, 2, 3))
    np.testing.assert_allclose(basis(spec, 0.5), [1, 0.5, 0])
    # 1.5^3 - 0.5^3 * (3-1)/(3-2)
    np.testing.assert_allclose(basis(spec, 2.5), [1, 2.5, 3.125])
    assert tve_eval(spec, [0, 0, 1], 2.5) == pytest.approx(3.125)


def test_simple_forms():
    assert tve_eval(TveSpec(), [0.5], 7.0) == 0.5
    assert tve_eval(TveSpec.linear(), [0.1, 0.2], 2.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        tve_eval(TveSpec.linear(), [0.1], 2.0)


def test_step_rows_are_one_hot():
    spec = TveSpec.step((1.0, 3.0, 5.0))
    B = basis_matrix(spec, [0.2, 1.0, 1.1, 4.0, 9.0])
    np.testing.assert_array_equal(B.sum(axis=1), 1)
    np.testing.assert_array_equal(B.argmax(axis=1), [0, 0, 1, 2, 2])


def test_knots_match_interpolated_percentiles():
    t = np.arange(1, 101, dtype=float)
    np.testing.assert_allclose(select_knots(t, 5), (5.95, 25.75, 50.5, 75.25, 95.05))
    np.testing.assert_allclose(select_knots(t, 3), np.percentile(t, [10, 50, 90]))
    with pytest.raises(KnotError):
        select_knots(np.ones(50), 5)


def test_ph_contrast_shapes():
    assert ph_contrast(TveSpec()).shape[0] == 0
    assert ph_contrast(TveSpec.rcs((1, 2, 3, 4, 5))).shape == (4, 5)
    C = ph_contrast(TveSpec.step((1, 2, 3)))
    np.testing.assert_array_equal(C @ np.array([0.7, 0.7, 0.7]), 0)


def test_spec_string_round_trip():
    for s in (TveSpec(), TveSpec.linear(), TveSpec.rcs((0.1, 1 / 3, 2.0)), TveSpec.step((1.5, 4.0))):
        assert TveSpec.from_string(s.to_string()) == s
    assert parse_tve_flag("rcs3", np.arange(1, 30.0)).dimension == 3
    with pytest.raises(ValueError):
        TveSpec.rcs((2, 1, 3))


def _knot_sets(draw_n):
    return st.lists(st.floats(0.05, 20.0), min_size=draw_n, max_size=draw_n, unique=True).map(sorted).filter(
        lambda k: np.min(np.diff(k)) > 0.05)


def _local_cubic(spec, centre, offsets):
    """Exact cubic through basis samples at centre+offsets, in powers of (t - centre).

    Returns coefficients lowest order first for every basis component.
    """
    t = centre + np.asarray(offsets)
    V = np.vander(np.asarray(offsets), 4, increasing=True)
    return np.linalg.solve(V, basis_matrix(spec, t))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(3, 5), data=st.data())
def test_rcs_smooth_at_knots_and_linear_in_tails(n, data):
    knots = data.draw(_knot_sets(n))
    spec = TveSpec.rcs(knots)
    gap = float(np.min(np.diff(knots)))
    h = gap / 4
    scale = max(1.0, float(np.abs(basis_matrix(spec, [knots[-1] + 1.0])).max()))
    for u in knots:
        left = _local_cubic(spec, u, -h * np.array([0.25, 0.5, 0.75, 1.0]))
        right = _local_cubic(spec, u, h * np.array([0.25, 0.5, 0.75, 1.0]))
        # value, first and second derivative agree at the knot
        assert np.abs(left[:3] - right[:3]).max() < 1e-6 * scale
    for lo in (knots[-1] + 1e-3, knots[-1] + 25.0):
        tail = _local_cubic(spec, lo, np.array([0.0, 0.5, 1.0, 1.5]))
        assert np.abs(2 * tail[2]).max() < 1e-6 * scale
        assert np.abs(6 * tail[3]).max() < 1e-6 * scale
    head = _local_cubic(spec, knots[0] / 2, knots[0] / 4 * np.array([-1.0, -0.5, 0.5, 1.0]))
    assert np.abs(head[2:]).max() < 1e-9
