import numpy as np
import pytest

from daba.geometry import CameraState
from daba.io import synthesize_problem
from daba.partition import build_partition, partition_problem
from helpers import make_problem

CAM = CameraState(np.eye(3), np.zeros(3), np.array([1.0, 0, 0]))


def two_camera_problem():
    cams = [CAM, CameraState(np.eye(3), np.array([1.0, 0, 0]), np.array([1.0, 0, 0]))]
    return make_problem(cams, [[0, 0, 3.0]], [[0, 0, 0.0, 0.0], [1, 0, -0.3, 0.0]])


def test_single_device_owns_everything(small_synthetic):
    problem, _ = small_synthetic
    part = partition_problem(problem, 1)
    d = part.devices[0]
    assert np.all(part.camera_owner == 0) and np.all(part.point_owner == 0)
    assert len(d.intra) == problem.num_observations
    assert len(d.camera_side) == len(d.point_side) == 0
    assert d.neighbors == ()
    assert part.crossing_count() == 0 and part.floats_per_exchange() == 0


def test_shared_point_tie_goes_to_lowest_device():
    part = partition_problem(two_camera_problem(), 2)
    assert list(part.camera_owner) == [0, 1]
    assert list(part.point_owner) == [0]
    assert part.crossing_count() == 1
    assert part.devices[0].neighbors == (1,) and part.devices[1].neighbors == (0,)
    # device 0 sends the point, device 1 sends its camera
    assert part.floats_per_exchange() == 30 + 6


@pytest.mark.parametrize("count", [0, -1, 9])
def test_bad_device_count(small_synthetic, count):
    problem, _ = small_synthetic
    with pytest.raises(ValueError):
        partition_problem(problem, count)


def test_unknown_strategy(small_synthetic):
    with pytest.raises(ValueError):
        partition_problem(small_synthetic[0], 2, strategy="random")


@pytest.mark.parametrize("strategy", ["observations", "cameras"])
@pytest.mark.parametrize("count", [2, 3, 4])
def test_pair_classification_is_exhaustive(small_synthetic, strategy, count):
    problem, _ = small_synthetic
    part = partition_problem(problem, count, strategy)
    n_obs = problem.num_observations
    intra = np.concatenate([d.intra for d in part.devices])
    cs = np.concatenate([d.camera_side for d in part.devices])
    ps = np.concatenate([d.point_side for d in part.devices])
    # each observation is intra to one device, or camera-side to one and point-side to another
    assert sorted(np.concatenate([intra, cs])) == list(range(n_obs))
    assert sorted(cs) == sorted(ps)
    for d in part.devices:
        assert np.all(part.camera_owner[problem.camera_ids[d.intra]] == d.device)
        assert np.all(part.point_owner[problem.point_ids[d.intra]] == d.device)
        assert np.all(part.camera_owner[problem.camera_ids[d.camera_side]] == d.device)
        assert np.all(part.point_owner[problem.point_ids[d.point_side]] == d.device)
        for b in d.neighbors:
            assert d.device in part.devices[b].neighbors
            np.testing.assert_array_equal(d.send_cameras[b], part.devices[b].recv_cameras[d.device])
            np.testing.assert_array_equal(d.send_points[b], part.devices[b].recv_points[d.device])


def test_observation_balance():
    problem, _ = synthesize_problem(num_cameras=20, num_points=300, seed=5)
    part = partition_problem(problem, 4)
    load = np.bincount(part.camera_owner[problem.camera_ids], minlength=4)
    assert load.max() <= 2 * load.min()


def test_points_go_to_plurality_device():
    problem, _ = synthesize_problem(num_cameras=12, num_points=100, seed=6)
    part = partition_problem(problem, 3)
    for j in range(problem.num_points):
        votes = np.bincount(part.camera_owner[problem.camera_ids[problem.point_ids == j]], minlength=3)
        assert part.point_owner[j] == int(np.argmax(votes))


def test_explicit_ownership():
    problem = two_camera_problem()
    part = build_partition(problem, [0, 1], [1])
    assert len(part.devices[1].intra) == 1 and len(part.devices[0].camera_side) == 1
    np.testing.assert_array_equal(part.devices[1].send_points[0], [0])
