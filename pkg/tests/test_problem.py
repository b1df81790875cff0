import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ffo import (ConstraintParamLp, ParametricQp, check_derivatives, circle,
                 make_constraint_lp, make_parametric_qp, preset, random_qp, solve_lower, wall)
from ffo.exceptions import (DerivativeMismatch, DimensionMismatch, NotPositiveDefinite,
                            UnknownPreset)
from ffo.problem import BilevelProblem, spot_check


def test_identity_qp_gradient_matches_q():
    pb = make_parametric_qp(ParametricQp(Q=np.eye(2), P=np.eye(2), q0=np.zeros(2)))
    np.testing.assert_allclose(pb.g_grad_y(np.array([1.0, 2.0]), np.zeros(2)), [1.0, 2.0])
    assert pb.mu_g == pytest.approx(1.0)


def test_qp_constructor_reproduces_wall():
    a = 100.0
    definition = ParametricQp(Q=[[1.0]], P=[[0.0]], q0=[-a], G_ineq=[[1.0]], h0=[0.0], H_x=[[a]])
    built, ref = make_parametric_qp(definition), wall(a)
    rng = np.random.default_rng(0)
    for _ in range(10):
        x, y = rng.standard_normal(1), rng.standard_normal(1)
        assert built.g_grad_y(x, y) == pytest.approx(ref.g_grad_y(x, y))
        assert built.h_values(x, y) == pytest.approx(ref.h_values(x, y))
        assert built.h_jac_x(x, y) == pytest.approx(ref.h_jac_x(x, y))


def test_random_qp_grad_x_finite_differences():
    pb = random_qp(seed=0, d=5, m=3)
    rng = np.random.default_rng(1)
    errs = check_derivatives(pb, rng.standard_normal(pb.dim_x), rng.standard_normal(5))
    assert errs["g_grad_x"] <= 1e-5


def test_wall_and_circle_solutions():
    assert solve_lower(wall(100), [0.9]).y[0] == pytest.approx(90.0)
    assert solve_lower(circle(), [0.0]).y[0] == pytest.approx(1.0)


@pytest.mark.parametrize("name,kwargs", [
    ("wall", {"a": 100.0}), ("circle", {}),
    ("random_qp", {"seed": 3, "d": 5, "m": 3, "p": 1}),
    ("random-qp", {"seed": 4, "d": 6, "m": 4, "p": 0}),
])
def test_preset_derivatives_at_100_points(name, kwargs):
    pb = preset(name, **kwargs)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-0.9, 0.9, pb.dim_x)
        y = rng.standard_normal(pb.dim_y)
        errs = check_derivatives(pb, x, y, lam=rng.uniform(0, 2, pb.n_ineq),
                                 nu=rng.standard_normal(pb.n_eq))
        worst = max(worst, max(errs.values()))
    assert worst <= 1e-5


def test_constraint_lp_derivatives():
    rng = np.random.default_rng(2)
    definition = ConstraintParamLp(epsilon_reg=0.1, cost=rng.standard_normal(4),
                             A0=rng.standard_normal((2, 4)), anchor=np.full(4, 0.25))
    pb = make_constraint_lp(definition)
    for _ in range(20):
        errs = check_derivatives(pb, rng.standard_normal(pb.dim_x), rng.standard_normal(4),
                                 nu=rng.standard_normal(2))
        assert max(errs.values()) <= 1e-5


def test_random_qp_is_deterministic():
    a = random_qp(seed=0, d=4, m=2, p=1)
    b = random_qp(seed=0, d=4, m=2, p=1)
    x, y = a.x_default, np.arange(4.0)
    assert np.array_equal(a.x_default, b.x_default)
    for field in ("Q", "q", "G", "h", "A", "b"):
        assert np.array_equal(getattr(a.qp_at(x), field), getattr(b.qp_at(x), field))
    assert a.g_value(x, y) == b.g_value(x, y)


def test_random_qp_condition_number_capped():
    for seed in range(10):
        eigs = np.linalg.eigvalsh(random_qp(seed=seed, d=8, m=4).qp_at(np.zeros(3)).Q)
        assert eigs[-1] / eigs[0] <= 100


def test_declared_mu_g_holds():
    pb = random_qp(seed=5, d=6, m=3)
    Q = pb.qp_at(pb.x_default).Q
    rng = np.random.default_rng(0)
    for y in rng.standard_normal((100, 6)):
        assert y @ Q @ y >= pb.mu_g * (y @ y) - 1e-12


def test_parametric_qp_json_round_trip():
    rng = np.random.default_rng(3)
    definition = ParametricQp(Q=np.diag([1.0, 2.0, 3.0]), P=rng.standard_normal((3, 2)),
                        q0=rng.standard_normal(3), G_ineq=rng.standard_normal((2, 3)),
                        h0=np.ones(2), H_x=rng.standard_normal((2, 2)))
    back = ParametricQp.from_json(definition.to_json())
    for key, val in definition.to_dict().items():
        np.testing.assert_array_equal(getattr(back, key), np.asarray(val).reshape(getattr(back, key).shape))


def test_not_positive_definite():
    with pytest.raises(NotPositiveDefinite):
        make_parametric_qp(ParametricQp(Q=[[1.0, 0.0], [0.0, -1.0]], P=np.eye(2), q0=[0, 0]))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        ParametricQp(Q=np.eye(2), P=np.eye(3), q0=np.zeros(2))


def test_unknown_preset():
    with pytest.raises(UnknownPreset):
        preset("banana")


def test_wall_requires_a_above_one():
    with pytest.raises(ValueError):
        wall(0.5)


def test_spot_check_catches_bad_gradient():
    good = wall(10.0)
    bad = BilevelProblem(dim_y=1, dim_x=1, n_ineq=0, n_eq=0, mu_g=1.0,
                         g_value=good.g_value, g_grad_y=lambda x, y: 2 * (y - 10.0),
                         g_grad_x=good.g_grad_x)
    assert spot_check(good)
    with pytest.raises(DerivativeMismatch):
        spot_check(bad)


def test_debug_flag_runs_spot_check(monkeypatch):
    definition = ParametricQp(Q=np.eye(2), P=np.eye(2), q0=np.zeros(2))
    calls = []
    monkeypatch.setattr("ffo.problem.spot_check", lambda pb: calls.append(pb))
    make_parametric_qp(definition)
    assert not calls
    make_parametric_qp(definition, debug=True)
    assert len(calls) == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_random_qp_reference_point_is_optimal(seed, d):
    pb = random_qp(seed=seed, d=d, m=3, p=min(1, d - 1), dim_x=2)
    sol = solve_lower(pb, pb.x_default)
    assert sol.max_residual <= 1e-10
    assert np.all(sol.lam >= -1e-12)
