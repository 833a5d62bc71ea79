import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daba import solver
from daba.errors import LinearSolveFailure
from daba.geometry import LossFunction, criticality_norm, hat, reprojection_error, undistorted_ray
from daba.io import synthesize_problem
from daba.partition import partition_problem
from daba.solver import LMConfig, linearize_surrogate, retract, solve_normal_equations, solve_subproblem
from daba.surrogate import build_surrogate, evaluate_surrogate

seeds = st.integers(0, 2**31 - 1)


def tiny(devices=2, seed=1, loss=LossFunction("huber", 0.02), noise=2e-2):
    problem, _ = synthesize_problem(num_cameras=3, num_points=6, seed=seed, pixel_noise=noise, loss=loss, min_views=2, max_views=3)
    part = partition_problem(problem, devices)
    return problem, part


def owned(problem, part, a):
    d = part.devices[a]
    return problem.initial.take(d.cameras, d.points)


# --- retraction -----------------------------------------------------------


def test_zero_step_is_identity(small_synthetic):
    problem, _ = small_synthetic
    x = problem.initial
    y = retract(x, np.zeros((x.num_cameras, 9)), np.zeros((x.num_points, 3)))
    assert y.equals(x)


def test_half_turn_step(small_synthetic):
    x = small_synthetic[0].initial
    step = np.zeros((x.num_cameras, 9))
    step[0, 0] = np.pi
    y = retract(x, step, np.zeros((x.num_points, 3)))
    np.testing.assert_allclose(y.rotations[0], np.diag([1.0, -1, -1]) @ x.rotations[0], atol=1e-14)


def test_retraction_is_first_order_accurate(rng):
    # Richardson: the first-order remainder of exp(h w) R shrinks like h^2
    x = synthesize_problem(num_cameras=2, num_points=4, seed=0, min_views=2, max_views=2)[0].initial
    v = rng.normal(size=(2, 9))
    errs = []
    for h in (1e-2, 5e-3):
        y = retract(x, h * v, np.zeros((4, 3)))
        linear = x.rotations + h * hat(v[:, :3]) @ x.rotations
        errs.append(np.abs(y.rotations - linear).max())
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_nonfinite_step_rejected(small_synthetic):
    x = small_synthetic[0].initial
    step = np.zeros((x.num_cameras, 9))
    step[0, 3] = np.nan
    with pytest.raises(ValueError):
        retract(x, step, np.zeros((x.num_points, 3)))


# --- linearization --------------------------------------------------------


def residual_vector(spec, x, weights):
    """Stacked residuals whose half squared norm is the IRLS model of the surrogate.

    ``weights`` holds the frozen intra weights.  Built straight from the
    pair formulas, independent of the solver's Jacobian code.
    """
    loc = spec.local
    out = []
    for k in range(len(loc.intra_obs)):
        R = x.rotations[loc.intra_cam[k]]
        t = x.centers[loc.intra_cam[k]]
        l = x.points[loc.intra_pt[k]]
        q = R @ undistorted_ray(x.intrinsics[loc.intra_cam[k]], loc.intra_pixels[k])
        y = l - t
        out.append(np.sqrt(weights[k]) * (q - (q @ y) / (y @ y) * y))
    c = spec.cs_coeff
    for k in range(len(loc.cs_obs)):
        i = loc.cs_cam[k]
        q = x.rotations[i] @ undistorted_ray(x.intrinsics[i], loc.cs_pixels[k])
        out.append(np.sqrt(2 * c.w[k]) * (q + c.lam[k] * x.centers[i] - c.g[k]))
    c = spec.ps_coeff
    for k in range(len(loc.ps_obs)):
        out.append(np.sqrt(2 * c.w[k]) * (c.lam[k] * x.points[loc.ps_pt[k]] - c.g[k]))
    a = spec.anchor
    s = np.sqrt(spec.xi)
    out += [s * (x.rotations - a.rotations).ravel(), s * (x.centers - a.centers).ravel(), s * (x.intrinsics - a.intrinsics).ravel(), s * (x.points - a.points).ravel()]
    return np.concatenate([np.ravel(o) for o in out])


def intra_weights(spec, x):
    loc = spec.local
    if not len(loc.intra_obs):
        return np.zeros(0)
    e = reprojection_error(x.camera(loc.intra_cam), x.points[loc.intra_pt], loc.intra_pixels)
    return spec.loss.evaluate(np.sum(e * e, axis=-1))[1]


def tangent_fd(fn, x, h=1e-6):
    C, P = x.num_cameras, x.num_points
    n = 9 * C + 3 * P
    cols = []
    for k in range(n):
        v = np.zeros(n)
        v[k] = h
        plus = fn(retract(x, v[: 9 * C].reshape(C, 9), v[9 * C :].reshape(P, 3)))
        v[k] = -h
        minus = fn(retract(x, v[: 9 * C].reshape(C, 9), v[9 * C :].reshape(P, 3)))
        cols.append((plus - minus) / (2 * h))
    return np.array(cols).T


@pytest.mark.parametrize("devices", [1, 2, 3])
def test_normal_equations_match_dense_finite_difference_assembly(devices, rng):
    problem, part = tiny(devices)
    for a in range(devices):
        spec = build_surrogate(problem, part, problem.initial, a, 1e-2)
        x = owned(problem, part, a)
        x = retract(x, rng.normal(scale=1e-2, size=(x.num_cameras, 9)), rng.normal(scale=1e-2, size=(x.num_points, 3)))
        w = intra_weights(spec, x)
        J = tangent_fd(lambda z: residual_vector(spec, z, w), x)
        r = residual_vector(spec, x, w)
        H, g = linearize_surrogate(spec, x).dense()
        # rotations enter the proximal residual nonlinearly; its curvature uses the exact Gram 2 xi I
        np.testing.assert_allclose(H, J.T @ J, atol=1e-6 * max(1.0, np.abs(H).max()))
        np.testing.assert_allclose(g, J.T @ r, atol=1e-7 * max(1.0, np.abs(g).max()))


def test_gradient_is_tangent_derivative_of_surrogate(rng):
    problem, part = tiny(2)
    for a in range(2):
        spec = build_surrogate(problem, part, problem.initial, a, 1e-2)
        x = owned(problem, part, a)
        x = retract(x, rng.normal(scale=1e-2, size=(x.num_cameras, 9)), rng.normal(scale=1e-2, size=(x.num_points, 3)))
        fd = tangent_fd(lambda z: np.array([evaluate_surrogate(spec, z)]), x)[0]
        _, g = linearize_surrogate(spec, x).dense()
        np.testing.assert_allclose(g, fd, atol=1e-7 * max(1.0, np.abs(fd).max()))


def test_no_intra_pairs_means_no_coupling():
    problem, part = tiny(3)
    for a in range(3):
        spec = build_surrogate(problem, part, problem.initial, a, 1e-2)
        ne = linearize_surrogate(spec, owned(problem, part, a))
        assert len(ne.coupling) == len(spec.intra_pairs)


@pytest.mark.parametrize("mode", ["levenberg", "marquardt"])
@pytest.mark.parametrize("damping", [1e-6, 1e-2, 10.0])
def test_schur_step_matches_dense_solve(mode, damping):
    problem, part = tiny(1, seed=4)
    spec = build_surrogate(problem, part, problem.initial, 0, 1e-3)
    ne = linearize_surrogate(spec, problem.initial)
    H, g = ne.dense()
    assert len(g) <= 60
    scale = 1.0 / (1.0 + np.sqrt(np.diag(H)))
    Hs = H * scale[:, None] * scale[None, :]
    D = np.eye(len(g)) if mode == "levenberg" else np.diag(np.maximum(np.diag(Hs), 1e-12))
    expected = scale * np.linalg.solve(Hs + damping * D, -scale * g)
    dc, dp = solve_normal_equations(ne, damping, mode)
    np.testing.assert_allclose(np.concatenate([dc.ravel(), dp.ravel()]), expected, rtol=1e-8, atol=1e-12 * np.abs(expected).max())


# --- subproblem -----------------------------------------------------------


def test_critical_start_is_left_alone():
    problem, truth = synthesize_problem(num_cameras=4, num_points=20, seed=8)
    part = partition_problem(problem, 1)
    spec = build_surrogate(problem, part, truth, 0, 1e-4)
    result = solve_subproblem(spec, truth, LMConfig())
    assert result.successful_steps == 0 and result.converged
    assert result.new_state.equals(truth)


def test_repeated_steps_descend_to_critical_point():
    problem, _ = synthesize_problem(num_cameras=5, num_points=40, seed=3)
    part = partition_problem(problem, 1)
    spec = build_surrogate(problem, part, problem.initial, 0, 0.0)
    x, damping = problem.initial, None
    values = [evaluate_surrogate(spec, x)]
    for _ in range(40):
        res = solve_subproblem(spec, x, LMConfig(), damping)
        x, damping = res.new_state, res.damping
        values.append(res.final_value)
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert criticality_norm(problem, x) < 1e-6


@settings(max_examples=15)
@given(seeds, st.sampled_from(["levenberg", "marquardt"]))
def test_accepted_steps_never_increase_the_surrogate(seed, mode):
    problem, part = tiny(2, seed=seed % 50)
    rng = np.random.default_rng(seed)
    a = int(rng.integers(2))
    spec = build_surrogate(problem, part, problem.initial, a, 1e-3)
    x = owned(problem, part, a)
    x = retract(x, rng.normal(scale=5e-2, size=(x.num_cameras, 9)), rng.normal(scale=5e-2, size=(x.num_points, 3)))
    res = solve_subproblem(spec, x, LMConfig(damping_mode=mode, min_successful_steps=3, max_inner_iterations=10))
    assert res.final_value <= res.initial_value
    assert res.final_value == evaluate_surrogate(spec, res.new_state)


def test_device_subproblems_do_not_depend_on_order():
    problem, part = tiny(3)
    specs = [build_surrogate(problem, part, problem.initial, a, 1e-3) for a in range(3)]
    forward = [solve_subproblem(s, owned(problem, part, a)).new_state for a, s in enumerate(specs)]
    backward = [solve_subproblem(s, owned(problem, part, a)).new_state for a, s in reversed(list(enumerate(specs)))][::-1]
    assert all(f.equals(b) for f, b in zip(forward, backward))


def test_unfactorizable_system_raises(monkeypatch):
    problem, part = tiny(1)
    spec = build_surrogate(problem, part, problem.initial, 0, 1e-3)

    def broken(*args, **kwargs):
        raise np.linalg.LinAlgError("not positive definite")

    monkeypatch.setattr(solver, "solve_normal_equations", broken)
    with pytest.raises(LinearSolveFailure):
        solve_subproblem(spec, problem.initial)


def test_config_validation():
    with pytest.raises(ValueError):
        LMConfig(initial_damping=-1)
    with pytest.raises(ValueError):
        LMConfig(damping_mode="dogleg")
