import bz2
import gzip
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from daba.errors import CountMismatch, DabaError, ParseError, SchemaVersionMismatch
from daba.geometry import LossFunction, mean_pixel_reprojection_error, optimal_scale, total_objective, undistorted_ray
from daba.io import (
    BalFile,
    export_ply,
    format_bal,
    from_problem,
    parse_bal,
    read_metrics,
    read_bal,
    read_ply,
    synthesize_problem,
    synthetic_suite,
    to_problem,
    write_metrics,
)
from daba.runtime import IterationReport

TINY = """1 2 2
0 0 -1.5 2.25
0 1 0.5 -0.5
0.1 0.2 0.3
-1 2 -3
500 1e-7 2e-13
1 2 -10
-0.5 0.25 -8
"""


def bal_native_residuals(bal):
    """Pixel residuals under the BAL camera model, written from its definition."""
    out = []
    for i, j, uv in zip(bal.camera_index, bal.point_index, bal.pixels):
        cam = bal.cameras[i]
        P = Rotation.from_rotvec(cam[:3]).apply(bal.points[j]) + cam[3:6]
        p = -P[:2] / P[2]
        n2 = p @ p
        pred = cam[6] * (1.0 + cam[7] * n2 + cam[8] * n2 * n2) * p
        out.append(np.linalg.norm(pred - uv))
    return np.array(out)


# --- parsing --------------------------------------------------------------


def test_parse_minimal_file():
    bal = parse_bal(TINY)
    assert (bal.num_cameras, bal.num_points, bal.num_observations) == (1, 2, 2)
    np.testing.assert_array_equal(bal.camera_index, [0, 0])
    np.testing.assert_array_equal(bal.point_index, [0, 1])
    np.testing.assert_array_equal(bal.pixels, [[-1.5, 2.25], [0.5, -0.5]])
    np.testing.assert_array_equal(bal.cameras[0], [0.1, 0.2, 0.3, -1, 2, -3, 500, 1e-7, 2e-13])
    np.testing.assert_array_equal(bal.points, [[1, 2, -10], [-0.5, 0.25, -8]])


def test_parse_accepts_bytes_and_streams():
    assert parse_bal(TINY.encode()) == parse_bal(io.StringIO(TINY)) == parse_bal(TINY)


def test_parse_tolerates_any_whitespace_layout():
    assert parse_bal(" ".join(TINY.split())) == parse_bal(TINY)


def test_point_index_out_of_range_reports_line():
    text = TINY.replace("0 1 0.5 -0.5", "0 2 0.5 -0.5")
    with pytest.raises(CountMismatch) as err:
        parse_bal(text)
    assert err.value.line == 3


def test_truncated_file():
    with pytest.raises(CountMismatch):
        parse_bal(TINY.rsplit("\n", 2)[0])


def test_trailing_garbage():
    with pytest.raises(ParseError) as err:
        parse_bal(TINY + "7\n")
    assert err.value.line == 9


def test_bad_token_reports_line():
    with pytest.raises(ParseError) as err:
        parse_bal(TINY.replace("-1 2 -3", "-1 two -3"))
    assert err.value.line == 5


@pytest.mark.parametrize("text", ["", "1 2", "1.5 2 2\n", "-1 0 0\n", "0 0 0\n nan", "1e310 0 0"])
def test_malformed_headers(text):
    with pytest.raises(ParseError):
        parse_bal(text)


def test_non_finite_values_rejected():
    with pytest.raises(ParseError):
        parse_bal(TINY.replace("-0.5 0.25 -8", "-0.5 inf -8"))


def test_fractional_index_rejected():
    with pytest.raises(ParseError):
        parse_bal(TINY.replace("0 1 0.5", "0 0.5 0.5"))


@settings(max_examples=200)
@given(st.binary(max_size=300))
def test_random_bytes_parse_or_fail_cleanly(data):
    try:
        bal = parse_bal(data)
    except DabaError:
        return
    assert isinstance(bal, BalFile)


@settings(max_examples=100)
@given(st.text(alphabet="0123456789 .-e\n", max_size=200))
def test_random_numeric_text_parse_or_fail_cleanly(text):
    try:
        parse_bal(text)
    except ParseError:
        pass


@pytest.mark.parametrize("suffix,opener", [("", open), (".bz2", bz2.open), (".gz", gzip.open)])
def test_read_bal_decompresses_by_suffix(tmp_path, suffix, opener):
    path = tmp_path / ("tiny.txt" + suffix)
    with opener(path, "wt") as fh:
        fh.write(TINY)
    assert read_bal(path) == parse_bal(TINY)


def test_empty_problem_parses():
    bal = parse_bal("0 0 0\n")
    assert bal.num_observations == 0 and bal.cameras.shape == (0, 9)


# --- conventions ----------------------------------------------------------


def test_point_in_front_of_bal_camera_has_positive_scale():
    # identity BAL camera looks down -z
    bal = parse_bal("1 1 1\n0 0 0 0\n0 0 0 0 0 0 1 0 0\n0 0 -1\n")
    problem = to_problem(bal)
    x = problem.initial
    p = undistorted_ray(x.intrinsics[0], problem.pixels[0])
    assert optimal_scale(x.rotations[0], x.centers[0], x.points[0], p) > 0
    assert total_objective(problem, x) == pytest.approx(0.0, abs=1e-30)


def test_pixel_metric_matches_bal_camera_model():
    problem, _ = synthesize_problem(num_cameras=6, num_points=40, seed=3, focal=300.0, distortion=(-0.1, 0.02), pixel_noise=0.5)
    bal = from_problem(problem)
    native = bal_native_residuals(bal)
    assert mean_pixel_reprojection_error(to_problem(bal), to_problem(bal).initial) == pytest.approx(native.mean(), rel=1e-10)
    assert mean_pixel_reprojection_error(problem, problem.initial) == pytest.approx(native.mean(), rel=1e-10)


def test_hand_computed_pixel_error():
    # point at depth 10 straight ahead of an identity BAL camera projects to the origin
    bal = parse_bal("1 1 1\n0 0 3 4\n0 0 0 0 0 0 500 0 0\n0 0 -10\n")
    problem = to_problem(bal)
    assert mean_pixel_reprojection_error(problem, problem.initial) == pytest.approx(5.0)
    assert bal_native_residuals(bal)[0] == pytest.approx(5.0)


def test_conversion_round_trip():
    problem, _ = synthesize_problem(num_cameras=7, num_points=30, seed=4, focal=500.0, distortion=(0.05, -0.01))
    bal = from_problem(problem)
    back = from_problem(to_problem(bal))
    np.testing.assert_array_equal(back.camera_index, bal.camera_index)
    np.testing.assert_array_equal(back.point_index, bal.point_index)
    np.testing.assert_array_equal(back.pixels, bal.pixels)
    np.testing.assert_array_equal(back.points, bal.points)
    # rotations pass through log/exp, so agreement is to rounding
    np.testing.assert_allclose(back.cameras, bal.cameras, rtol=1e-12, atol=1e-12)


def test_text_round_trip_is_exact():
    bal = from_problem(synthesize_problem(num_cameras=4, num_points=20, seed=5)[0])
    assert parse_bal(format_bal(bal)) == bal


# --- synthetic ------------------------------------------------------------


def test_noiseless_truth_has_zero_objective():
    problem, truth = synthesize_problem(num_cameras=10, num_points=100, seed=6, distortion=(0.1, -0.02))
    assert total_objective(problem, truth) < 1e-25


def test_same_seed_same_problem():
    a, _ = synthesize_problem(seed=8, num_cameras=5, num_points=30)
    b, _ = synthesize_problem(seed=8, num_cameras=5, num_points=30)
    assert a.initial.equals(b.initial) and np.array_equal(a.pixels, b.pixels)


def test_synthetic_golden_values():
    problem, _ = synthesize_problem()
    assert (problem.num_cameras, problem.num_points, problem.num_observations) == (20, 500, GOLDEN_SYNTHETIC_OBS)
    assert total_objective(problem, problem.initial) == pytest.approx(GOLDEN_SYNTHETIC_F0, rel=1e-10)


GOLDEN_SYNTHETIC_OBS = 2208
GOLDEN_SYNTHETIC_F0 = 0.6919620688635495


def test_suite_problems_differ_only_by_seed():
    suite = synthetic_suite(3)
    assert len(suite) == 3 and all(p.num_cameras == 12 and p.num_points == 150 for p in suite)
    assert not np.array_equal(suite[0].pixels, suite[1].pixels)
    assert np.array_equal(suite[2].pixels, synthetic_suite(3)[2].pixels)


def test_view_counts_respect_bounds():
    problem, _ = synthesize_problem(num_cameras=12, num_points=80, seed=1, min_views=2, max_views=4)
    views = np.bincount(problem.point_ids)
    assert views.min() >= 2 and views.max() <= 4


# --- PLY ------------------------------------------------------------------


@pytest.mark.parametrize("binary", [False, True])
def test_ply_round_trip(tmp_path, binary):
    problem, _ = synthesize_problem(num_cameras=3, num_points=5, seed=0, min_views=2, max_views=3)
    path = tmp_path / "scene.ply"
    export_ply(problem.initial, path, binary=binary)
    xyz, cam = read_ply(path)
    np.testing.assert_array_equal(xyz, np.concatenate([problem.initial.points, problem.initial.centers]))
    np.testing.assert_array_equal(cam, [False] * 5 + [True] * 3)


@pytest.mark.filterwarnings("ignore:.*no observation")
def test_ply_one_point_one_camera(tmp_path):
    problem, _ = synthesize_problem(num_cameras=2, num_points=1, seed=0, min_views=1, max_views=1)
    state = problem.initial.take([0], [0])
    export_ply(state, tmp_path / "a.ply")
    text = (tmp_path / "a.ply").read_text()
    assert "element vertex 2" in text
    assert text.rstrip().splitlines()[-1].endswith(" 1")


# --- metrics --------------------------------------------------------------


def _records(n):
    return [IterationReport(iteration=k, objective=1.0 / (k + 1), mean_pixel_error=0.5, restarted=[False, k == 2]) for k in range(n)]


def test_empty_metrics_file(tmp_path):
    write_metrics([], tmp_path / "m.jsonl")
    assert (tmp_path / "m.jsonl").read_text() == ""
    assert read_metrics(tmp_path / "m.jsonl") == (None, [])


def test_metrics_round_trip(tmp_path):
    path = tmp_path / "m.jsonl"
    write_metrics(_records(3), path, config={"devices": 2})
    config, records = read_metrics(path)
    assert config == {"devices": 2}
    assert records == _records(3)


def test_metrics_version_mismatch(tmp_path):
    path = tmp_path / "m.jsonl"
    write_metrics(_records(1), path)
    d = json.loads(path.read_text())
    d["version"] = 99
    path.write_text(json.dumps(d) + "\n")
    with pytest.raises(SchemaVersionMismatch):
        read_metrics(path)


def test_metrics_invalid_json(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("{not json}\n")
    with pytest.raises(ParseError):
        read_metrics(path)


def test_metrics_are_stable_text(tmp_path):
    write_metrics(_records(2), tmp_path / "a.jsonl")
    write_metrics(_records(2), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_huber_loss_carried_through_conversion():
    bal = parse_bal(TINY)
    assert to_problem(bal, LossFunction("huber", 2.0)).loss == LossFunction("huber", 2.0)
