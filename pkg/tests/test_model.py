import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gscpot.errors import ConfigError, ConvergenceError, NonFiniteError
from gscpot.model import (
    Chart,
    RegularBEC,
    VectorState,
    de_step,
    iterate_de,
    make_product_model,
    make_regular_bec,
    model_from_config,
    shipped_models,
    solve_gradient_equation,
)

interior = st.floats(0.02, 0.98)


def fd(fun, x, h=1e-6):
    return (fun(x + h) - fun(x - h)) / (2 * h)


class TestRegularBEC:
    def test_one_step_from_erasure(self):
        m = make_regular_bec(3, 6, 0.5)
        assert m.grad_G([1.0])[0] == 1.0
        assert m.grad_F([1.0])[0] == 0.5

    @pytest.mark.parametrize("eps", [0.0, 0.3, 0.45, 1.0])
    def test_zero_is_fixed(self, eps):
        m = make_regular_bec(3, 6, eps)
        assert m.grad_G([0.0])[0] == 0.0
        assert m.grad_F([0.0])[0] == 0.0

    def test_hess_G_closed_form(self, bec45):
        u = np.linspace(0, 1, 101)[:, None]
        np.testing.assert_allclose(bec45.hess_G(u)[:, 0, 0], 5 * (1 - u[:, 0]) ** 4, rtol=1e-14)
        assert np.all(bec45.hess_G(u) >= 0)

    @pytest.mark.parametrize("l,r", [(2, 6), (3, 2), (4, 3)])
    def test_rejects_bad_degrees(self, l, r):
        with pytest.raises(ValueError):
            make_regular_bec(l, r, 0.5)

    def test_rejects_eps(self):
        with pytest.raises(ValueError):
            make_regular_bec(3, 6, 1.5)

    @settings(max_examples=60, deadline=None)
    @given(u=interior, eps=st.floats(0.05, 1.0))
    def test_derivative_chain(self, u, eps):
        m = make_regular_bec(3, 6, eps)
        x = np.array([u])
        assert m.grad_G(x)[0] == pytest.approx(float(fd(m.eval_G, x)), rel=1e-6, abs=1e-9)
        assert m.hess_G(x)[0, 0] == pytest.approx(fd(m.grad_G, x)[0], rel=1e-6, abs=1e-9)
        assert m.third_G(x)[0, 0, 0] == pytest.approx(fd(lambda y: m.hess_G(y)[..., 0], x)[0], rel=1e-5, abs=1e-8)
        assert m.grad_F(x)[0] == pytest.approx(float(fd(m.eval_F, x)), rel=1e-6, abs=1e-9)
        assert m.hess_F(x)[0, 0] == pytest.approx(fd(m.grad_F, x)[0], rel=1e-6, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(u=interior, eps=st.floats(0.0, 1.0))
    def test_textbook_recursion(self, u, eps):
        m = make_regular_bec(3, 6, eps)
        nxt, v = de_step(m, VectorState([u], Chart.U))
        assert v.values[0] == pytest.approx(1 - (1 - u) ** 5, abs=1e-15)
        assert nxt.values[0] == pytest.approx(eps * (1 - (1 - u) ** 5) ** 2, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(vt=st.floats(0.0, 1.0), eps=st.floats(0.1, 1.0))
    def test_closed_form_inverses(self, vt, eps):
        m = make_regular_bec(4, 8, eps)
        assert m.grad_G(m.inv_grad_G([vt]))[0] == pytest.approx(vt, abs=1e-12)
        ut = eps * vt
        assert m.grad_F(m.inv_grad_F([ut]))[0] == pytest.approx(ut, abs=1e-12)


class TestDEStep:
    def test_erasure_start(self):
        nxt, v = de_step(make_regular_bec(3, 6, 0.5), VectorState([1.0]))
        assert v.chart is Chart.V and nxt.chart is Chart.U
        assert v.values[0] == 1.0 and nxt.values[0] == 0.5

    def test_fixed_point_is_kept(self, bec45):
        u_b = 0.3554433077481068  # independent root of u = eps (1-(1-u)^5)^2
        nxt, _ = de_step(bec45, [u_b])
        assert abs(nxt.values[0] - u_b) < 1e-12

    def test_below_bp_decodes(self):
        assert iterate_de(make_regular_bec(3, 6, 0.42), [1.0], 10_000)[0] < 1e-8

    def test_non_finite(self, quadratic):
        with pytest.raises(NonFiniteError):
            de_step(quadratic, [np.nan, 0.0])


class TestProduct:
    def test_block_hessian(self):
        p = make_product_model(make_regular_bec(3, 6, 0.3), make_regular_bec(3, 6, 0.3))
        h = p.hess_G([0.2, 0.7])
        assert h.shape == (2, 2)
        assert h[0, 1] == 0.0 and h[1, 0] == 0.0
        assert h[1, 1] == pytest.approx(5 * 0.3**4)

    def test_third_is_block_diagonal(self, product45):
        t = product45.third_G([0.3, 0.6])
        mask = np.ones_like(t, dtype=bool)
        mask[0, 0, 0] = mask[1, 1, 1] = False
        assert np.all(t[mask] == 0.0)

    def test_fixed_points_are_cartesian(self, product45):
        from gscpot.potential import find_fixed_points

        a = find_fixed_points(product45.components[0])
        b = find_fixed_points(product45.components[1])
        pr = find_fixed_points(product45)
        expected = sorted((float(p.u[0]), float(q.u[0])) for p in a.points for q in b.points)
        got = sorted(tuple(map(float, p.u)) for p in pr.points)
        np.testing.assert_allclose(got, expected, atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(u1=interior, u2=interior)
    def test_potential_is_sum(self, u1, u2):
        from gscpot.potential import potential

        m1, m2 = make_regular_bec(3, 6, 0.45), make_regular_bec(4, 8, 0.45)
        p = make_product_model(m1, m2)
        assert potential(p, [u1, u2]) == pytest.approx(potential(m1, [u1]) + potential(m2, [u2]), abs=1e-12)

    def test_perf_is_sum(self, product45):
        assert product45.perf([0.25, 0.5]) == pytest.approx(0.75)


class TestNewtonSolver:
    def test_generic_solver_on_bec(self):
        m = make_regular_bec(3, 6, 0.5)
        target = np.linspace(0.05, 0.95, 19)[:, None]
        u = solve_gradient_equation(m.grad_G, m.hess_G, target, m.domain_D)
        np.testing.assert_allclose(u, 1 - (1 - target) ** 0.2, atol=1e-11)

    def test_quadratic_one_step(self, quadratic):
        target = np.array([[0.3, -0.2], [0.1, 0.4]])
        u = quadratic.inv_grad_G(target)
        np.testing.assert_allclose(u @ quadratic.a.T, target, atol=1e-14)

    def test_unreachable_target(self):
        m = make_regular_bec(3, 6, 0.5)
        with pytest.raises(ConvergenceError) as info:
            solve_gradient_equation(m.grad_G, m.hess_G, [[1.5]], m.domain_D)
        assert info.value.last is not None

    def test_fd_third_fallback(self, quadratic):
        t = quadratic.third_G([0.1, 0.2])
        assert t.shape == (2, 2, 2)
        assert np.max(np.abs(t)) < 1e-9


class TestConfig:
    def test_round_trip(self, product45):
        again = model_from_config(product45.config())
        assert again.name == product45.name

    @pytest.mark.parametrize(
        "cfg,key",
        [
            ({"type": "regular_bec", "l": 3, "r": 6}, "model.eps"),
            ({"type": "regular_bec", "l": 3, "r": 6, "eps": 2.0}, "model.eps"),
            ({"type": "regular_bec", "l": 2, "r": 6, "eps": 0.4}, "model.l"),
            ({"type": "regular_bec", "l": 3, "r": 6, "eps": 0.4, "x": 1}, "model.x"),
            ({"type": "product", "components": [{"type": "regular_bec", "l": 3, "r": 6, "eps": 0.4}]}, "model.components"),
            ({"type": "ldpc"}, "model.type"),
        ],
    )
    def test_errors_name_the_key(self, cfg, key):
        with pytest.raises(ConfigError) as info:
            model_from_config(cfg)
        assert info.value.key == key

    def test_free_eps(self):
        m = model_from_config({"type": "regular_bec", "l": 3, "r": 6}, free_eps=0.3)
        assert isinstance(m, RegularBEC) and m.eps == 0.3

    def test_shipped(self):
        names = [m.name for m in shipped_models()]
        assert len(names) == 5 and names[-1].startswith("product")


def test_state_clamping(bec45):
    assert bec45.clamp_u(np.array([1.2]))[0] == 1.0
    assert bec45.clamp_v(np.array([-0.1]))[0] == 0.0
