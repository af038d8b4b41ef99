import math

import numpy as np
import pytest

from hjcert import envs
from hjcert.errors import ContractError

from conftest import ENV_NAMES


def test_dims_and_input_range():
    dims = {"double_integrator": (2, 1), "double_integrator_2d": (4, 2), "unicycle": (3, 1), "robot_arm": (4, 2)}
    for name, (m, n) in dims.items():
        env = envs.make_env(name)
        assert (env.state_dim, env.control_dim) == (m, n)
        assert 3 <= env.input_dim <= 6
        assert env.dt == 0.1


def test_box_rejects_inverted_bounds():
    with pytest.raises(ContractError):
        envs.Box([1.0], [0.0])
    with pytest.raises(ContractError):
        envs.Box([], [])


def test_step_examples():
    di = envs.make_env("double_integrator")
    np.testing.assert_allclose(envs.step(di, [0.0, 0.5], [1.0]), [0.05, 0.6], atol=1e-15)
    uni = envs.make_env("unicycle")
    np.testing.assert_allclose(envs.step(uni, [0.0, 0.0, 0.0], [0.0]), [0.09, 0.0, 0.0], atol=1e-15)


def test_robot_arm_step_matches_scalar_recompute(rng):
    env = envs.make_env("robot_arm")
    for _ in range(50):
        x = env.state_box.sample(rng, 1)[0]
        u = env.control_box.sample(rng, 1)[0]
        out = envs.step(env, x, u)
        wrap = lambda a: (a + math.pi) % (2 * math.pi) - math.pi
        ref = [wrap(x[0] + 0.1 * x[2]), wrap(x[1] + 0.1 * x[3]), x[2] + 0.1 * u[0], x[3] + 0.1 * u[1]]
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_step_contract_errors():
    di = envs.make_env("double_integrator")
    with pytest.raises(ContractError):
        envs.step(di, [0.0, 0.0, 0.0], [0.0])
    with pytest.raises(ContractError):
        envs.step(di, [2.0, 0.0], [0.0])
    with pytest.raises(ContractError):
        envs.step(di, [0.0, 0.0], [1.5])
    # tolerance of 1e-9 on the boundary
    envs.step(di, [1.0 + 5e-10, 0.0], [0.0])


def test_step_is_deterministic(rng):
    for name in ENV_NAMES:
        env = envs.make_env(name)
        x, u = env.state_box.sample(rng, 100), env.control_box.sample(rng, 100)
        assert np.array_equal(envs.step(env, x, u), envs.step(env, x, u))


def test_constraint_examples():
    assert envs.constraint(envs.make_env("double_integrator"), [0.95, 0.0]) == pytest.approx(0.05)
    assert envs.constraint(envs.make_env("double_integrator_2d"), [0.0] * 4) == pytest.approx(0.4)
    uni = envs.make_env("unicycle")
    for th in (-3.0, 0.0, 1.2):
        assert envs.constraint(uni, [0.4, 0.0, th]) == pytest.approx(0.0, abs=1e-15)


def test_constraint_domain_exit_term():
    di = envs.make_env("double_integrator")
    # velocity near the box edge violates through the exit term only
    assert envs.constraint(di, [0.0, 0.99]) == pytest.approx(0.01)
    assert envs.constraint(di, [0.0, 0.97]) < 0
    arm = envs.make_env("robot_arm")
    # angles never trigger the exit term: folded arm at the origin is safe
    assert envs.constraint(arm, [math.pi, math.pi, 0.0, 0.0]) < 0
    assert envs.constraint(arm, [0.0, 0.0, 0.0, 0.0]) == pytest.approx(1.0 - 0.85)


def test_constraint_sign_on_boundaries():
    env = envs.make_env("double_integrator_2d")
    for a in np.linspace(0, 2 * np.pi, 13):
        r_in, r_out = 0.4 + 1e-6, 0.4 - 1e-6
        assert envs.constraint(env, [r_in * np.cos(a), r_in * np.sin(a), 0, 0]) < 0
        assert envs.constraint(env, [r_out * np.cos(a), r_out * np.sin(a), 0, 0]) > 0


def test_jacobian_examples():
    di = envs.make_env("double_integrator")
    _, fu, _ = envs.jacobians(di, [0.3, -0.2], [0.5])
    np.testing.assert_array_equal(fu, [[0.0], [0.1]])
    uni = envs.make_env("unicycle")
    fx, _, _ = envs.jacobians(uni, [0.1, 0.2, np.pi / 2], [0.0])
    np.testing.assert_allclose(fx[:, 2], [-0.09, 0.0, 1.0], atol=1e-15)


def test_jacobian_subgradient_at_origin():
    di = envs.make_env("double_integrator")
    _, _, hx = envs.jacobians(di, [0.0, 0.0], [0.0])
    np.testing.assert_array_equal(hx, [0.0, 0.0])


@pytest.mark.parametrize("name", ENV_NAMES)
def test_jacobians_match_central_differences(name, rng):
    env = envs.make_env(name)
    eps = 1e-6
    lo, hi = env.state_box.lo * 0.9, env.state_box.hi * 0.9
    for _ in range(100):
        x = lo + (hi - lo) * rng.random(env.state_dim)
        u = 0.9 * env.control_box.sample(rng, 1)[0]
        fx, fu, hx = envs.jacobians(env, x, u)
        num_fx = np.zeros_like(fx)
        num_hx = np.zeros_like(hx)
        for i in range(env.state_dim):
            e = np.zeros(env.state_dim)
            e[i] = eps
            num_fx[:, i] = (envs.step(env, x + e, u, check=False) - envs.step(env, x - e, u, check=False)) / (2 * eps)
            num_hx[i] = (envs.constraint(env, x + e) - envs.constraint(env, x - e)) / (2 * eps)
        num_fu = np.zeros_like(fu)
        for j in range(env.control_dim):
            e = np.zeros(env.control_dim)
            e[j] = eps
            num_fu[:, j] = (envs.step(env, x, u + e, check=False) - envs.step(env, x, u - e, check=False)) / (2 * eps)
        for a, b in ((fx, num_fx), (fu, num_fu), (hx, num_hx)):
            assert np.max(np.abs(a - b)) <= 1e-5 * max(1.0, np.max(np.abs(b)))


def test_step_interval_examples():
    di = envs.make_env("double_integrator")
    out = envs.step_interval(di, envs.Box([0, 0], [0, 1]), envs.Box([-1], [1]))
    np.testing.assert_allclose(out.lo, [0.0, -0.1], atol=1e-12)
    np.testing.assert_allclose(out.hi, [0.1, 1.1], atol=1e-12)
    uni = envs.make_env("unicycle")
    out = envs.step_interval(uni, envs.Box([0.2, 0.3, -np.pi], [0.2, 0.3, np.pi]), envs.Box([0.0], [0.0]))
    np.testing.assert_allclose(out.lo[:2], [0.2 - 0.09, 0.3 - 0.09], atol=1e-12)
    np.testing.assert_allclose(out.hi[:2], [0.2 + 0.09, 0.3 + 0.09], atol=1e-12)


@pytest.mark.parametrize("name", ENV_NAMES)
def test_step_interval_contains_samples(name, rng):
    env = envs.make_env(name)
    for _ in range(10):
        a, b = env.state_box.sample(rng, 2)
        xb = envs.Box(np.minimum(a, b), np.maximum(a, b))
        c, d = env.control_box.sample(rng, 2)
        ub = envs.Box(np.minimum(c, d), np.maximum(c, d))
        out = envs.step_interval(env, xb, ub)
        xs = envs.step(env, xb.sample(rng, 1000), ub.sample(rng, 1000))
        assert np.all(out.contains(xs, 1e-12))


def test_cos_sin_ranges_are_exact():
    lo, hi = np.array([-0.5, 1.0, -3.0]), np.array([0.5, 2.0, 3.0])
    clo, chi = envs.cos_range(lo, hi)
    slo, shi = envs.sin_range(lo, hi)
    t = np.linspace(0, 1, 20001)[:, None]
    grid = lo + (hi - lo) * t
    np.testing.assert_allclose(clo, np.cos(grid).min(0), atol=1e-7)
    np.testing.assert_allclose(chi, np.cos(grid).max(0), atol=1e-7)
    np.testing.assert_allclose(slo, np.sin(grid).min(0), atol=1e-7)
    np.testing.assert_allclose(shi, np.sin(grid).max(0), atol=1e-7)


def test_constraint_interval_contains_samples(rng):
    for name in ENV_NAMES:
        env = envs.make_env(name)
        a, b = env.state_box.sample(rng, 200), env.state_box.sample(rng, 200)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        clo, chi = envs.constraint_interval(env, lo, hi)
        t = rng.random((50,) + lo.shape)
        h = envs.constraint(env, lo + (hi - lo) * t)
        assert np.all(h >= clo - 1e-12) and np.all(h <= chi + 1e-12)


def test_envspec_json_roundtrip():
    for name in ENV_NAMES:
        env = envs.make_env(name)
        assert envs.EnvSpec.from_dict(env.to_dict()) == env


def test_envspec_validates_dims():
    with pytest.raises(ContractError):
        envs.EnvSpec("double_integrator", 0.1, envs.Box([-1], [1]), envs.Box([-1], [1]))
    with pytest.raises(ContractError):
        envs.EnvSpec("double_integrator", 0.0, envs.Box([-1, -1], [1, 1]), envs.Box([-1], [1]))


def test_step_pieces_when_whole_angle_image_wraps(rng):
    env = envs.make_env("unicycle")
    # heading near +pi and positive turn rate: every successor heading wraps
    xlo, xhi = np.array([[0.1, 0.1, 3.1]]), np.array([[0.2, 0.2, np.pi]])
    ulo, uhi = np.array([[3.0]]), np.array([[4.0]])
    pieces = envs.step_interval_pieces(env, xlo, xhi, ulo, uhi)
    valid = [(lo[0], hi[0]) for lo, hi, v in pieces if v[0]]
    assert valid and all(np.all(lo <= hi) for lo, hi in valid)
    x = xlo + (xhi - xlo) * rng.random((5000, 3))
    u = ulo + (uhi - ulo) * rng.random((5000, 1))
    xn = envs.step(env, x, u)
    inside = np.zeros(5000, dtype=bool)
    for lo, hi in valid:
        inside |= np.all((xn >= lo - 1e-12) & (xn <= hi + 1e-12), axis=1)
    assert inside.all()
