from __future__ import annotations

import math

import numpy as np
import pytest

from stumprib.phantom import CurveSpec, analytic_length, grid_around, tube_phantom, voxelize_tube
from stumprib.rlma import (
    CONE_END,
    MAX_ITERATIONS,
    IterationLimitError,
    PathPolyline,
    RibCloud,
    RlmaConfig,
    classify_stump,
    cone_directions,
    find_start_point,
    measure_rib,
    next_path_point,
    prepare_rib,
    shell_candidates,
    terminal_point,
)
from stumprib.volume import LabelVolume

CFG = RlmaConfig()


def straight(length, radius=4.0, start=(10.0, 0.0, 0.0), direction=(1.0, 0.0, 0.0)):
    start = np.asarray(start, float)
    end = start + length * np.asarray(direction, float) / np.linalg.norm(direction)
    return CurveSpec.line(start, end, tube_radius=radius)


@pytest.fixture(scope="module")
def tube100():
    curve = straight(100.0)
    return curve, prepare_rib(tube_phantom(curve))


# --- configuration and types ---------------------------------------------------


def test_config_defaults_and_validation():
    assert (CFG.shell_min_mm, CFG.shell_max_mm, CFG.step_fraction, CFG.resample_mm) == (14.5, 15.5, 0.5, 0.5)
    for bad in ({"shell_min_mm": 16}, {"shell_min_mm": 0}, {"step_fraction": 0}, {"step_fraction": 1.5},
                {"cone_ray_count": 0}, {"resample_mm": -1}, {"crop_margin_mm": -1}):
        with pytest.raises(ValueError):
            RlmaConfig(**bad)
    assert RlmaConfig(step_fraction=1.0).step_fraction == 1.0


def test_polyline_length():
    p = PathPolyline([[0, 0, 0], [3, 4, 0], [3, 4, 12]], CONE_END)
    assert p.length == pytest.approx(17.0)
    assert len(p) == 3
    assert p.as_dict()["length_mm"] == 17.0
    with pytest.raises(ValueError):
        PathPolyline(np.zeros((0, 3)))


@pytest.mark.parametrize("length, expected", [(37.0, True), (38.0, True), (38.1, False), (0.0, True)])
def test_classify_stump(length, expected):
    assert classify_stump(length) is expected


def test_classify_stump_rejects_negative():
    with pytest.raises(ValueError):
        classify_stump(-0.1)


# --- start point ------------------------------------------------------------------


def test_start_on_near_end_face(tube100):
    _, cloud = tube100
    p = find_start_point(cloud, (0, 0, 0))
    assert np.linalg.norm(p - [10, 0, 0]) <= 0.5 * math.sqrt(3) + 1e-9


def test_start_refinement_moves_toward_axis():
    # corpus center off-axis: the raw nearest surface voxel sits on the rim side
    curve = straight(40.0, radius=5.0)
    cloud = prepare_rib(tube_phantom(curve))
    corpus = np.array([0.0, 8.0, 0.0])
    raw = cloud.nearest_surface(corpus)
    refined = find_start_point(cloud, corpus)
    assert np.hypot(*refined[1:]) <= np.hypot(*raw[1:]) + 1e-9


def test_single_voxel_rib():
    grid = np.zeros((3, 3, 3), np.uint8)
    grid[1, 1, 1] = 1
    cloud = RibCloud(LabelVolume.from_spacing(grid, (0.5, 0.5, 0.5)))
    np.testing.assert_allclose(find_start_point(cloud, (10, 10, 10)), (0.5, 0.5, 0.5))
    path = measure_rib(LabelVolume.from_spacing(grid, (0.5,) * 3), (10, 10, 10))
    assert path.length <= 0.5


# --- stepping ---------------------------------------------------------------------


def test_next_point_steps_half_shell(tube100):
    _, cloud = tube100
    start = find_start_point(cloud, (0, 0, 0))
    nxt = next_path_point(cloud, [start])
    assert nxt[0] - start[0] == pytest.approx(7.5, abs=0.5)
    assert np.hypot(*(nxt - start)[1:]) <= 0.5 * math.sqrt(2) + 1e-9


def test_shell_candidates_band(tube100):
    _, cloud = tube100
    start = find_start_point(cloud, (0, 0, 0))
    cand = shell_candidates(cloud, [start])
    d = np.linalg.norm(cand - start, axis=1)
    assert len(cand) and d.min() >= 14.5 and d.max() <= 15.5


def test_backward_candidates_removed(tube100):
    _, cloud = tube100
    # mid-tube: the shell is two discs, the one nearer the previous point is dropped
    path = np.array([[50.0, 0, 0], [57.5, 0, 0]])
    cand = shell_candidates(cloud, path)
    assert np.all(cand[:, 0] > 57.5)
    both = shell_candidates(cloud, path[1:])
    assert np.any(both[:, 0] < 57.5)


def test_empty_shell_near_end():
    cloud = prepare_rib(tube_phantom(straight(20.0)))
    assert next_path_point(cloud, [[20.0, 0, 0], [26.0, 0, 0]]) is None


def test_arc_turns_monotonically():
    curve = CurveSpec.arc((0, 20, 0), (1, 0, 0), (0, 1, 0), radius=60.0, angle_deg=90.0, tube_radius=4.0)
    cloud = prepare_rib(tube_phantom(curve))
    path = measure_rib(cloud, (0, 0, 0))
    # the last segment is the cone shot aimed at the far end face; the first starts on the
    # tube surface rather than its axis, so neither follows the centerline tangent
    steps = path.points[1:-1]
    seg = np.diff(steps, axis=0)
    heading = np.degrees(np.arctan2(seg[:, 1], seg[:, 0]))
    assert np.all(np.diff(heading) > 0)
    # a chord between arc angles a and b points along the tangent at (a + b) / 2
    rel = steps - np.array([0.0, 80.0, 0.0])
    phi = np.degrees(np.arctan2(rel[:, 0], -rel[:, 1]))
    expected_turn = (phi[-1] + phi[-2]) / 2 - (phi[0] + phi[1]) / 2
    # snapping both chord ends to the 0.5 mm grid tilts a chord by at most atan(half diagonal / chord)
    snap = math.degrees(math.atan(0.5 * math.sqrt(2) / np.linalg.norm(seg, axis=1).min()))
    assert heading[-1] - heading[0] == pytest.approx(expected_turn, abs=2 * snap)
    assert path.length == pytest.approx(analytic_length(curve), abs=max(2.0, 0.03 * analytic_length(curve)))


# --- terminal point ------------------------------------------------------------------


def test_cone_directions():
    axis = np.array([0.3, -0.2, 0.9])
    d = cone_directions(axis, 30.0, 64)
    assert d.shape == (64, 3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    cos = d @ (axis / np.linalg.norm(axis))
    assert cos.min() >= math.cos(math.radians(30)) - 1e-12
    np.testing.assert_array_equal(d, cone_directions(axis, 30.0, 64))


def same_rays(a: np.ndarray, b: np.ndarray) -> bool:
    key = lambda d: np.round(d, 9)[np.lexsort(np.round(d, 9).T[::-1])]  # noqa: E731
    return np.allclose(key(a), key(b), atol=1e-9)


def test_cone_follows_rotations_and_reflections(rng):
    axis, ref = np.array([0.3, -0.2, 0.9]), np.array([1.0, 0.4, 0.0])
    base = cone_directions(axis, 30.0, 64, reference=ref)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    rot = q * np.sign(np.linalg.det(q))
    np.testing.assert_allclose(cone_directions(rot @ axis, 30.0, 64, reference=rot @ ref), base @ rot.T, atol=1e-12)
    mirror = np.diag([-1.0, 1.0, 1.0])
    assert same_rays(cone_directions(mirror @ axis, 30.0, 64, reference=mirror @ ref), base @ mirror.T)


def test_terminal_reaches_far_face(tube100):
    curve, cloud = tube100
    path = measure_rib(cloud, (0, 0, 0))
    assert path.termination == CONE_END
    assert abs(path.points[-1][0] - 110.0) <= 0.5 * math.sqrt(3)


def test_terminal_at_extreme_returns_itself(tube100):
    _, cloud = tube100
    last = cloud.coords[np.argmax(cloud.coords[:, 0])]
    last = cloud.coords[np.argmin(np.linalg.norm(cloud.coords - [last[0], 0, 0], axis=1))]
    end = terminal_point(cloud, [last - [7.5, 0, 0], last])
    np.testing.assert_array_equal(end, last)


def test_terminal_respects_reach(tube100):
    _, cloud = tube100
    for reach in (5.0, 12.0, 20.0):
        cfg = RlmaConfig(cone_max_len_mm=reach)
        last = np.array([40.0, 0, 0])
        end = terminal_point(cloud, [last - [7.5, 0, 0], last], cfg)
        assert 0 < np.linalg.norm(end - last) <= reach


def test_single_point_cone_points_away_from_corpus(tube100):
    _, cloud = tube100
    end = terminal_point(cloud, [[10.0, 0, 0]], corpus_center=(0, 0, 0))
    assert end[0] > 10.0
    with pytest.raises(ValueError):
        terminal_point(cloud, [[10.0, 0, 0]])


# --- full measurement -------------------------------------------------------------


def test_straight_tube_100mm(tube100):
    _, cloud = tube100
    path = measure_rib(cloud, (0, 0, 0))
    assert 97.0 <= path.length <= 103.0
    assert np.all(path.segment_lengths <= CFG.shell_max_mm)


def test_path_points_lie_on_rib(tube100):
    _, cloud = tube100
    path = measure_rib(cloud, (0, 0, 0))
    _, hit = cloud.voxel_index(path.points)
    assert hit.all()


@pytest.mark.slow
def test_quarter_circle_r120():
    curve = CurveSpec.arc((10, 0, 0), (1, 0, 0), (0, 1, 0), radius=120.0, angle_deg=90.0, tube_radius=5.0)
    assert analytic_length(curve) == pytest.approx(2 * math.pi * 120 / 4)
    path = measure_rib(tube_phantom(curve), (0, 0, 0))
    assert 183.0 <= path.length <= 192.0


def test_ball_has_short_path():
    ball = CurveSpec.line((10, 0, 0), (10, 0, 0), tube_radius=5.0)
    path = measure_rib(tube_phantom(ball), (0, 0, 0))
    assert len(path) <= 2
    assert path.length <= 10.0


def test_measurement_on_coarse_input_grid():
    # a 1 mm input is resampled to 0.5 mm before stepping
    curve = straight(80.0, radius=4.0)
    grid = grid_around(curve.sample(1.0), 6.0, 1.0)
    path = measure_rib(voxelize_tube(CurveSpec.line(curve.start, curve.end, 4.0, spacing=1.0), grid), (0, 0, 0))
    assert abs(path.length - 80.0) <= max(2.0, 0.03 * 80)


def test_truncation_is_monotone():
    lengths = [measure_rib(tube_phantom(straight(L)), (0, 0, 0)).length for L in (30.0, 45.0, 60.0)]
    assert lengths[0] <= lengths[1] + 1.0 and lengths[1] <= lengths[2] + 1.0


def test_rigid_invariance_of_length():
    base = measure_rib(tube_phantom(straight(60.0, direction=(1, 0, 0))), (0, 0, 0)).length
    rot_z = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    rot_x = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0.0]])
    for rot in (rot_z, rot_x @ rot_z, -np.eye(3) @ rot_z):
        start = rot @ np.array([10.0, 0, 0])
        curve = straight(60.0, start=start, direction=rot @ [1.0, 0, 0])
        moved = measure_rib(tube_phantom(curve), (0, 0, 0)).length
        assert moved == pytest.approx(base, rel=0.01)


def test_iteration_cap():
    cfg = RlmaConfig(max_iterations=2)
    with pytest.raises(IterationLimitError) as err:
        measure_rib(tube_phantom(straight(80.0)), (0, 0, 0), cfg)
    assert err.value.path.termination == MAX_ITERATIONS
    assert len(err.value.path) == 3


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        measure_rib(LabelVolume(np.zeros((3, 3, 3), np.uint8)), (0, 0, 0))
