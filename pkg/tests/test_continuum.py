import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gscpot.errors import NonFiniteError, SingularHessianError
from gscpot.lattice import Init
from gscpot.model import Chart, VectorState, make_product_model, make_regular_bec
from gscpot.continuum import (
    ContinuumField,
    bvp_residual,
    conservation_check,
    coupling_operator,
    energy_functional,
    energy_tensor,
    from_affine,
    make_continuum_field,
    pde_step,
    run_pde,
    stable_dt,
    to_affine,
    verify_affine_connection,
    write_field_snapshot,
)
from gscpot.potential import dual_potential, find_fixed_points, potential

from conftest import QuadraticModel

# closed form 1 - (1 - 0.5)^(1/5), evaluated with mpmath outside the package
PHI_HALF = 0.12944943670387586


def uniform(model, value, k=1, n=9, m=1e-3, chart=Chart.V_AFFINE):
    value = np.atleast_1d(np.asarray(value, dtype=float))
    vals = np.broadcast_to(value, (n,) * k + (model.n,)).copy()
    return ContinuumField(vals, chart, m, value)


class TestCharts:
    @pytest.mark.parametrize("which", ["bec", "product"])
    def test_round_trip(self, which, bec45, product45):
        m = bec45 if which == "bec" else product45
        rng = np.random.default_rng(7)
        # interior: 0.1 margin from the box; at u -> 1 the map drops (1-u)^5 below roundoff
        u = rng.uniform(0.1, 0.9, (100, m.n))
        back = from_affine(m, to_affine(m, VectorState(u, Chart.U))).values
        assert np.max(np.abs(back - u)) < 1e-10

    def test_phi_at_half(self, bec50):
        u = from_affine(bec50, VectorState([0.5], Chart.V_AFFINE)).values
        assert u[0] == pytest.approx(PHI_HALF, abs=1e-12)

    def test_fixed_points_map_to_fixed_points(self, bec45):
        for p in find_fixed_points(bec45).points:
            vt = to_affine(bec45, VectorState(p.u, Chart.U)).values
            ut = to_affine(bec45, VectorState(vt, Chart.V)).values
            np.testing.assert_allclose(ut, p.u, atol=1e-12)

    def test_affine_input_rejected(self, bec45):
        with pytest.raises(ValueError):
            to_affine(bec45, VectorState([0.2], Chart.V_AFFINE))


class TestCoupling:
    def test_uniform_is_zero(self, product45):
        f = uniform(product45, [0.3, 0.6], k=2)
        assert np.max(np.abs(coupling_operator(product45, f))) == 0.0

    def test_constant_metric_parabola(self):
        q = QuadraticModel([[1.0]], [[0.7]], box=2.0)
        n = 21
        x = np.linspace(-1, 1, n)
        f = ContinuumField((x**2)[:, None], Chart.V_AFFINE, 1e-3, [1.0])
        c = coupling_operator(q, f)
        np.testing.assert_allclose(c[1:-1, 0], 2 * 0.7, atol=1e-11)
        assert np.all(c[[0, -1]] == 0.0)

    def test_richardson(self, bec50):
        def field(n):
            x = np.linspace(-1, 1, n)
            return ContinuumField((0.4 + 0.3 * np.cos(np.pi * x / 2))[:, None], Chart.V_AFFINE, 1e-3, [0.4])

        ns = [17, 33, 65, 129]
        vals = [coupling_operator(bec50, field(n))[:, 0] for n in ns]
        # node x = 0.5 is shared by every grid; compare against the finest one
        at = [v[(n - 1) * 3 // 4] for v, n in zip(vals, ns)]
        errs = [abs(a - at[-1]) for a in at[:-1]]
        assert errs[0] / errs[1] > 3.0
        dx = 2.0 / (ns[0] - 1)
        assert errs[0] < 10 * dx**2 * max(1.0, abs(at[-1]))

    def test_single_node(self, product45):
        f = make_continuum_field(product45, 2, 9, 1e-2, init=Init.CUSTOM, custom=lambda c: 0.4 + 0.1 * c)
        full = coupling_operator(product45, f)
        np.testing.assert_array_equal(coupling_operator(product45, f, node=(3, 5)), full[3, 5])


class TestStep:
    def test_stationary_kept(self, bec45):
        f = make_continuum_field(bec45, 1, 33, 1e-3, init=Init.ALL_GOOD)
        out = pde_step(bec45, f, stable_dt(bec45, f.dx, 1e-3))
        np.testing.assert_array_equal(out.values, f.values)
        assert out.step == 1

    def test_boundary_pinned(self, bec50):
        f = make_continuum_field(bec50, 2, 9, 1e-3)
        out = pde_step(bec50, f, stable_dt(bec50, f.dx, 1e-3))
        mask = f.boundary_mask()
        np.testing.assert_array_equal(out.values[mask], f.values[mask])

    def test_non_finite_names_node(self, bec45):
        f = make_continuum_field(bec45, 1, 9, 1e-3)
        f.values[4] = np.nan
        with pytest.raises(NonFiniteError) as info:
            pde_step(bec45, f, 1e-3)
        assert info.value.position[0] in (3, 4, 5)

    def test_dt_rule(self, bec45):
        dx = 2.0 / 64
        assert stable_dt(bec45, dx, 0.0 + 1e-300) == pytest.approx(0.2, rel=1e-12)
        assert stable_dt(bec45, dx, 1e-3) < stable_dt(bec45, dx, 1e-4) < 0.2

    def test_saturation_at_046(self):
        m = make_regular_bec(3, 6, 0.46)
        run = run_pde(m, make_continuum_field(m, 1, 129, 1e-3), record_every=1000)
        assert run.converged
        assert np.max(np.abs(run.field.values - run.field.boundary)) < 1e-4


class TestEnergy:
    def test_zero_at_good_state(self, bec45):
        f = make_continuum_field(bec45, 1, 33, 1e-3, init=Init.ALL_GOOD)
        assert energy_functional(bec45, f) == 0.0

    @settings(max_examples=20, deadline=None)
    @given(u=st.floats(0.05, 0.95), k=st.integers(1, 2))
    def test_uniform_is_volume_times_potential(self, u, k):
        m = make_regular_bec(3, 6, 0.45)
        f = uniform(m, m.grad_G([u]), k=k)
        assert energy_functional(m, f) == pytest.approx(2**k * potential(m, [u]), rel=1e-9, abs=1e-13)

    def test_dual_chart_uniform(self, bec45):
        f = uniform(bec45, [0.3], chart=Chart.U_AFFINE)
        pre = bec45.inv_grad_F([0.3])
        assert energy_functional(bec45, f) == pytest.approx(2 * dual_potential(bec45, pre), rel=1e-12)

    @pytest.mark.parametrize("chart,n", [(Chart.V_AFFINE, 129), (Chart.U_AFFINE, 33)])
    def test_monotone_along_run(self, bec50, chart, n):
        # the vt-chart quadrature lags the flow by O(dx^4) per step on coarse grids
        run = run_pde(bec50, make_continuum_field(bec50, 1, n, 1e-3, chart=chart), steps=2000)
        assert run.max_increase <= 1e-9
        e = run.energies
        assert e[-1] < e[0]


class TestBVP:
    def test_zero_at_good_state(self, bec45):
        f = make_continuum_field(bec45, 1, 17, 1e-3, chart=Chart.U_AFFINE, init=Init.ALL_GOOD)
        assert np.max(np.abs(bvp_residual(bec45, f))) < 1e-10

    @pytest.mark.parametrize("u", [0.1, 0.25, 0.4])  # ut ranges over [0, eps]
    def test_uniform_non_stationary(self, bec45, u):
        f = uniform(bec45, [u], chart=Chart.U_AFFINE)
        res = bvp_residual(bec45, f)[4, 0]
        # -dVt(Psi(ut))/d ut by a central difference of the dual potential
        h = 1e-6
        dv = (
            dual_potential(bec45, bec45.inv_grad_F([u + h])) - dual_potential(bec45, bec45.inv_grad_F([u - h]))
        ) / (2 * h)
        assert res == pytest.approx(-dv, rel=1e-6, abs=1e-10)

    def test_rejects_vt_chart(self, bec45):
        with pytest.raises(ValueError):
            bvp_residual(bec45, uniform(bec45, [0.2]))

    def test_converged_nontrivial_profile(self, bec50):
        f = make_continuum_field(bec50, 1, 129, 1e-3, chart=Chart.U_AFFINE)
        f.values[1:-1] = 0.4
        scale = np.max(np.abs(bvp_residual(bec50, f)))
        run = run_pde(bec50, f, record_every=1000)
        assert run.converged
        assert np.max(np.abs(bvp_residual(bec50, run.field))) < 10 * f.dx**2 * scale


class TestConservation:
    def test_uniform_has_no_drift(self, bec45):
        _, drift = conservation_check(bec45, uniform(bec45, [0.3], chart=Chart.U_AFFINE, n=33))
        assert drift == 0.0

    def test_needs_k1_dual_chart(self, bec45):
        with pytest.raises(ValueError):
            conservation_check(bec45, uniform(bec45, [0.3], k=2, chart=Chart.U_AFFINE))
        with pytest.raises(ValueError):
            conservation_check(bec45, uniform(bec45, [0.3]))


class TestEnergyTensor:
    def test_uniform(self, product45):
        ut = np.array([0.2, 0.3])
        f = uniform(product45, ut, k=2, chart=Chart.U_AFFINE)
        vt = dual_potential(product45, product45.inv_grad_F(ut))
        np.testing.assert_allclose(energy_tensor(product45, f, (4, 4)), -vt * np.eye(2), atol=1e-15)

    def test_k1_matches_conservation_density(self, bec45):
        x = np.linspace(-1, 1, 33)
        f = ContinuumField((0.2 + 0.1 * np.sin(2 * x))[:, None], Chart.U_AFFINE, 1e-2, [0.0])
        e, _ = conservation_check(bec45, f)
        for j in (1, 10, 31):
            assert energy_tensor(bec45, f, (j,))[0, 0] == pytest.approx(-e[j], rel=1e-12, abs=1e-15)

    def test_k2_symmetric_profile(self, bec45):
        f = make_continuum_field(
            bec45,
            2,
            17,
            1e-2,
            chart=Chart.U_AFFINE,
            init=Init.CUSTOM,
            custom=lambda c: (0.3 * (1 - c[..., 0] ** 2) * (1 - 0.5 * c[..., 1] ** 2))[..., None],
        )
        for j in range(1, 16):
            t = energy_tensor(bec45, f, (8, j))
            assert abs(t[0, 1]) < 1e-8 and abs(t[1, 0]) < 1e-8

    def test_boundary_node_rejected(self, bec45):
        with pytest.raises(ValueError):
            energy_tensor(bec45, uniform(bec45, [0.1], chart=Chart.U_AFFINE), (0,))


class TestAffineConnection:
    def test_quadratic_is_exactly_flat(self, quadratic):
        assert np.max(np.abs(verify_affine_connection(quadratic, [0.1, -0.2]))) < 1e-8

    def test_bec(self):
        gamma = verify_affine_connection(make_regular_bec(3, 6, 0.45), [0.5])
        assert np.max(np.abs(gamma)) < 1e-6

    def test_product_blocks(self, product45):
        gamma = verify_affine_connection(product45, [0.4, 0.7])
        assert gamma.shape == (2, 2, 2)
        assert np.max(np.abs(gamma)) < 1e-6

    def test_singular_hessian(self, bec45):
        with pytest.raises(SingularHessianError):
            verify_affine_connection(bec45, [1.0])


def test_potential_lower_bound_on_stationary_field(bec50):
    run = run_pde(bec50, make_continuum_field(bec50, 1, 65, 1e-3), record_every=1000)
    rep = find_fixed_points(bec50)
    u = bec50.inv_grad_G(run.field.values)
    assert np.min(potential(bec50, u)) >= rep.points[rep.good].value - 1e-6


@pytest.mark.slow
def test_deviation_shrinks_with_m():
    m = make_regular_bec(3, 6, 0.46)
    devs = []
    for coeff in (1e-2, 1e-3, 1e-4):
        run = run_pde(m, make_continuum_field(m, 1, 257, coeff), record_every=10_000)
        assert run.converged
        devs.append(float(np.max(np.abs(m.inv_grad_G(run.field.values)))))
    assert devs[0] > devs[1] > devs[2]
    assert devs[0] < 1e-6


def test_field_snapshot_layout(tmp_path, bec45):
    f = make_continuum_field(bec45, 2, 5, 1e-3)
    path = tmp_path / "f.bin"
    write_field_snapshot(path, f)
    raw = path.read_bytes()
    assert np.frombuffer(raw[:24], "<i8").tolist() == [2, 5, 1]
    np.testing.assert_array_equal(np.frombuffer(raw[24:], "<f8").reshape(5, 5, 1), f.values)


def test_make_field_validation(bec45):
    with pytest.raises(ValueError):
        make_continuum_field(bec45, 4, 9, 1e-3)
    with pytest.raises(ValueError):
        make_continuum_field(bec45, 1, 2, 1e-3)
    with pytest.raises(ValueError):
        make_continuum_field(bec45, 1, 9, 0.0)


def test_product_of_bec_stays_in_box():
    p = make_product_model(make_regular_bec(3, 6, 0.5), make_regular_bec(4, 8, 0.5))
    f = make_continuum_field(p, 1, 17, 1e-3)
    for _ in range(20):
        f = pde_step(p, f, stable_dt(p, f.dx, 1e-3))
    lo, hi = p.domain_Dtilde
    assert np.all(f.values >= lo) and np.all(f.values <= hi)
