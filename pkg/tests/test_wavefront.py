import json

import numpy as np
import pytest

from tubewave.core import Field
from tubewave.wavefront import (
    BracketError,
    SpeedBracket,
    UniquenessViolation,
    center_index,
    center_value,
    critical_speed,
    reflect_wave,
    refine_truncation,
    relative_error_tail,
    sandwich_check,
    steady_profile_for_speed,
)


def test_bracket_check():
    SpeedBracket(0.1, 0.2, 0.05, 0.01).check(0.03)
    with pytest.raises(BracketError):
        SpeedBracket(0.2, 0.1, 0.05, 0.01).check(0.03)
    with pytest.raises(BracketError):
        SpeedBracket(0.1, 0.2, 0.02, 0.01).check(0.03)


def test_supplied_bracket_is_reverified(phi4):
    # both endpoints far above the critical speed: the centre value vanishes at both
    with pytest.raises(BracketError):
        critical_speed(4.0, phi4, bracket=SpeedBracket(0.4, 0.8))


def test_bad_anchor_fraction(phi4):
    with pytest.raises(ValueError):
        critical_speed(4.0, phi4, anchor_fraction=1.0)


def test_wave_j4_golden(wave4):
    # frozen from the bisection at p = 4, L = 1, h = 1/16, tol_c = 1e-3
    assert wave4.c_star == pytest.approx(0.128515625, abs=1e-9)
    assert wave4.c_anchor == pytest.approx(0.128325, abs=2e-5)


def test_wave_j4_properties(wave4, phi4):
    lo, hi = wave4.bracket
    assert hi - lo < 1e-3
    assert lo <= wave4.c_star <= hi
    assert lo - 1e-3 <= wave4.c_anchor <= hi + 1e-3
    assert wave4.monotone_centers
    assert all(wave4.checks.values())
    w = wave4.profile.values
    assert np.all(w >= 0.0)
    assert np.all(w <= phi4.values[None, :] * (1 + 1e-6) + 1e-14)
    # non-increasing along the direction of travel
    assert np.all(np.diff(w, axis=0) <= 1e-10)
    assert center_value(wave4.profile) == pytest.approx(0.5 * phi4.mid_value, rel=1e-10)


def test_certified_and_plain_bisection_agree(wave4, phi4):
    plain = critical_speed(4.0, phi4, warm=False)
    assert plain.c_star == wave4.c_star
    assert plain.bracket == wave4.bracket
    assert plain.c_anchor == pytest.approx(wave4.c_anchor, abs=1e-6)
    seeds = {t["seed"] for t in wave4.trace}
    assert {"above", "below"} <= seeds
    assert "above" not in {t["seed"] for t in plain.trace}


def test_bisection_trace_is_consistent(wave4, phi4):
    half = 0.5 * phi4.mid_value
    for t in wave4.trace:
        if t["c"] <= wave4.bracket[0]:
            assert t["center"] > half
        if t["c"] >= wave4.bracket[1]:
            assert t["center"] <= half


def test_fixed_speed_steady_state_monotone_in_c(phi4):
    a = steady_profile_for_speed(0.2, 4.0, phi4).values
    b = steady_profile_for_speed(0.3, 4.0, phi4).values
    assert np.all(b <= a + 1e-8)


def test_truncation_ladder(ladder):
    c_last, per_j, report = ladder
    speeds = report["speeds"]
    assert [r.j for r in per_j] == [4.0, 8.0, 16.0]
    assert c_last == speeds[-1]
    assert all(b >= a - 1e-3 for a, b in zip(speeds, speeds[1:]))
    assert report["refined"] and report["converged"]
    assert len(report["increments"]) == 2


def test_truncation_validation(phi4):
    with pytest.raises(ValueError):
        refine_truncation([], phi4)
    with pytest.raises(ValueError):
        refine_truncation([8.0, 4.0], phi4)


def test_center_index(wave4):
    i, k = center_index(wave4.profile.grid)
    assert wave4.profile.grid.y[i] == 0.0
    assert k == wave4.profile.grid.cross_section.mid_index


def _translate(field, rows, inlet):
    v = np.asarray(field.values)
    out = np.empty_like(v)
    if rows >= 0:
        out[: v.shape[0] - rows] = v[rows:]
        out[v.shape[0] - rows:] = 0.0
    else:
        out[-rows:] = v[: v.shape[0] + rows]
        out[:-rows] = inlet
    return Field(field.grid, out, field.time_tag)


@pytest.mark.parametrize("rows", [0, 3, -5])
def test_sandwich_of_exact_translate(wave4, phi4, rows):
    shifted = _translate(wave4.profile, rows, phi4.values)
    dy = wave4.profile.grid.dy
    l1, l2 = sandwich_check(wave4.profile, shifted, inlet=phi4.values)
    assert l1 == pytest.approx(rows * dy)
    assert l2 == pytest.approx(rows * dy)


def test_sandwich_rejects_impossible_pair(wave4, phi4):
    bad = Field(wave4.profile.grid, np.asarray(wave4.profile.values) * 0 + 2 * phi4.sup,
                0.0)
    with pytest.raises(UniquenessViolation):
        sandwich_check(wave4.profile, bad, inlet=phi4.values)


def test_relative_error_tail(wave4, phi4):
    assert relative_error_tail(wave4.profile, phi4, 0.0) == pytest.approx(0.0, abs=1e-12)
    near = relative_error_tail(wave4.profile, phi4, 0.5)
    far = relative_error_tail(wave4.profile, phi4, 2.0)
    assert 0.0 <= near <= far <= 1.0


def test_reflection(wave4):
    r = reflect_wave(wave4)
    assert r.direction == -1 and r.c_star == wave4.c_star
    np.testing.assert_array_equal(r.profile.values, wave4.profile.values[::-1])
    rr = reflect_wave(r)
    np.testing.assert_array_equal(rr.profile.values, wave4.profile.values)
    assert rr.direction == 1


def test_save(tmp_path, wave4):
    paths = wave4.save(tmp_path, stem="w")
    assert all(p.exists() for p in paths)
    data = json.loads(paths[2].read_text())
    assert data["c_star"] == wave4.c_star and data["j"] == 4.0
    trace = np.loadtxt(paths[1], delimiter=",", ndmin=2)
    assert trace.shape == (len(wave4.trace), 3)
