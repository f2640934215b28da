"""Invariant suite run by ``gscpot verify``.

Every check returns :class:`CheckResult` rows with the measured error and
the tolerance it is held to, so the report can show the remaining slack.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .continuum import (
    conservation_check,
    from_affine,
    make_continuum_field,
    run_pde,
    to_affine,
    verify_affine_connection,
)
from .lattice import CouplingConfig, Init, LatticeField, gsc_step
from .model import Chart, RegularBEC, VectorState, iterate_de, shipped_models
from .potential import (
    find_fixed_points,
    force_line_integral,
    gradient_flow,
    potential,
    potential_gradient,
)

__all__ = ["CheckResult", "run_suite", "MODEL_CHECKS", "GLOBAL_CHECKS"]

FD_STEP = 1e-5
FD_RTOL = 1e-5
MARGIN = 0.1  # fraction of the box kept away from the edges when sampling


@dataclass
class CheckResult:
    name: str
    model: str
    measured: float
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.measured) and self.measured <= self.tolerance)

    @property
    def slack(self):
        return self.tolerance - self.measured

    def as_dict(self):
        d = asdict(self)
        d.update(passed=self.passed, slack=self.slack)
        return d


def _interior(box, rng, count, margin=MARGIN):
    lo, hi = box
    width = hi - lo
    return lo + width * (margin + (1 - 2 * margin) * rng.random((count, len(lo))))


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def _fd(fun, x, h):
    """Central differences of ``fun`` along each coordinate; derivative index last."""
    cols = []
    for i in range(x.shape[-1]):
        s = np.zeros_like(x)
        s[..., i] = h
        cols.append((fun(x + s) - fun(x - s)) / (2 * h))
    return np.stack(cols, axis=-1)


def derivative_consistency(model, rng):
    out = []
    for tag, box, ev, gr, he, th in (
        ("G", model.domain_D, model.eval_G, model.grad_G, model.hess_G, model.third_G),
        ("F", model.domain_Dtilde, model.eval_F, model.grad_F, model.hess_F, model.third_F),
    ):
        x = _interior(box, rng, 100)
        err = max(
            _rel(gr(x), _fd(ev, x, FD_STEP)),
            _rel(he(x), _fd(gr, x, FD_STEP)),
            _rel(th(x), _fd(he, x, FD_STEP)),
        )
        out.append(CheckResult(f"derivatives_{tag}", model.name, err, FD_RTOL))
    return out


def symmetry(model, rng):
    u = _interior(model.domain_D, rng, 100)
    v = _interior(model.domain_Dtilde, rng, 100)
    hs = max(
        float(np.max(np.abs(h - np.swapaxes(h, -1, -2)))) for h in (model.hess_G(u), model.hess_F(v))
    )
    t = model.third_G(u)
    ts = max(float(np.max(np.abs(t - np.transpose(t, (0,) + p)))) for p in itertools.permutations((1, 2, 3)))
    eig = float(np.min(np.linalg.eigvalsh(model.hess_G(_interior(model.domain_D, rng, 100, 0.0)))))
    return [
        CheckResult("hessian_symmetry", model.name, hs, 1e-12),
        CheckResult("third_symmetry", model.name, ts, 1e-12),
        CheckResult("hess_G_psd", model.name, max(0.0, -eig), 1e-10),
    ]


def potential_duality(model, rng):
    report = find_fixed_points(model)
    err = max((abs(p.value - p.dual_value) for p in report.points), default=0.0)
    res = max((float(np.max(np.abs(p.u - model.grad_F(model.grad_G(p.u))))) for p in report.points), default=0.0)
    return [
        CheckResult("potential_duality", model.name, err, 1e-10),
        CheckResult("fixed_point_residual", model.name, res, 1e-10),
    ]


def gradient_identity(model, rng):
    u = _interior(model.domain_D, rng, 100)
    fd = _fd(lambda x: potential(model, x), u, FD_STEP)
    return [CheckResult("gradient_identity", model.name, _rel(potential_gradient(model, u), fd), FD_RTOL)]


def lyapunov_flow(model, rng):
    report = find_fixed_points(model)
    u0 = _interior(model.domain_D, rng, 10, 0.0)
    u, values, _ = gradient_flow(model, u0)
    rise = float(np.max(np.diff(values, axis=0)))
    fps = np.array([p.u for p in report.points])
    dist = float(np.max(np.min(np.max(np.abs(u[:, None, :] - fps[None]), axis=-1), axis=1)))
    return [
        CheckResult("lyapunov_flow_rise", model.name, max(rise, 0.0), 1e-12),
        CheckResult("lyapunov_flow_endpoint", model.name, dist, 1e-6),
    ]


def line_integral(model, rng):
    a, b = _interior(model.domain_Dtilde, rng, 2)
    integral, diff = force_line_integral(model, a, b)
    return [CheckResult("line_integral", model.name, abs(integral - diff), 1e-6)]


def affine_connection(model, rng):
    u = _interior(model.domain_D, rng, 50)
    err = max(float(np.max(np.abs(verify_affine_connection(model, p)))) for p in u)
    return [CheckResult("affine_connection", model.name, err, 1e-6)]


def round_trip(model, rng):
    u = _interior(model.domain_D, rng, 100)
    back = from_affine(model, to_affine(model, VectorState(u, Chart.U))).values
    return [CheckResult("affine_round_trip", model.name, float(np.max(np.abs(back - u))), 1e-10)]


MODEL_CHECKS = [
    derivative_consistency,
    symmetry,
    potential_duality,
    gradient_identity,
    lyapunov_flow,
    line_integral,
    affine_connection,
    round_trip,
]


def bec_recursion(rng):
    worst = 0.0
    for _ in range(20):
        u, eps = rng.random(2)
        m = RegularBEC(3, 6, float(eps))
        ref = eps * (1 - (1 - u) ** 5) ** 2
        worst = max(worst, abs(float(iterate_de(m, [u], 1)[0]) - ref))
    return [CheckResult("bec_recursion", "regular_bec(3,6,*)", worst, 1e-12)]


def lattice_reduction(rng):
    m = RegularBEC(3, 6, 0.45)
    cfg = CouplingConfig(2, 6, 0, [0.0])
    data = rng.random((cfg.side, cfg.side, 1))
    fld = LatticeField(data.copy(), cfg)
    for _ in range(5):
        fld = gsc_step(m, fld)
    err = float(np.max(np.abs(fld.data - iterate_de(m, data, 5))))
    return [CheckResult("lattice_w0_reduction", m.name, err, 0.0)]


def lattice_symmetry(rng):
    m = RegularBEC(3, 6, 0.46)
    cfg = CouplingConfig(2, 8, 1, [0.0])
    data = rng.random((cfg.l_size, cfg.l_size, 1))
    for axis in (0, 1):
        data = np.concatenate([np.flip(data, axis)[:-1] if axis == 0 else np.flip(data, axis)[:, :-1], data], axis)
    fld = LatticeField(data, cfg)
    worst = 0.0
    for _ in range(10):
        fld = gsc_step(m, fld)
        d = fld.data
        worst = max(worst, float(np.max(np.abs(d - d[::-1]))), float(np.max(np.abs(d - d[:, ::-1]))))
    return [CheckResult("lattice_reflection", m.name, worst, 0.0)]


def pde_lyapunov(rng):
    m = RegularBEC(3, 6, 0.46)
    fld = make_continuum_field(m, 1, 65, 1e-3)
    run = run_pde(m, fld, steps=20_000, record_every=1000)
    u = m.inv_grad_G(run.field.values)
    report = find_fixed_points(m)
    gap = float(potential(m, report.u_good)) - float(np.min(potential(m, u)))
    return [
        CheckResult("pde_energy_rise", m.name, max(run.max_increase, 0.0), 1e-9),
        CheckResult("pde_converged", m.name, 0.0 if run.converged else 1.0, 0.0),
        CheckResult("stationary_potential_floor", m.name, max(gap, 0.0), 1e-6),
    ]


def conservation(rng):
    m = RegularBEC(3, 6, 0.5)
    fld = make_continuum_field(m, 1, 65, 1e-3, chart=Chart.U_AFFINE)
    run = run_pde(m, fld, steps=50_000, stop_eps=1e-14, record_every=1000)
    _, drift = conservation_check(m, run.field)
    # drift is first order in the grid spacing; 0.1*dx is a loose ceiling
    return [CheckResult("conservation_drift", m.name, drift, 0.1 * run.field.dx)]


GLOBAL_CHECKS = [bec_recursion, lattice_reduction, lattice_symmetry, pde_lyapunov, conservation]


def run_suite(seed=0, workers=None, models=None):
    """Run all checks; results come back in a fixed order whatever ``workers`` is."""
    models = shipped_models() if models is None else models
    jobs = [(c, mdl) for mdl in models for c in MODEL_CHECKS] + [(c, None) for c in GLOBAL_CHECKS]

    def work(item):
        idx, (check, mdl) = item
        rng = np.random.default_rng([seed, idx])
        return check(mdl, rng) if mdl is not None else check(rng)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(work, enumerate(jobs)))
    return [r for chunk in chunks for r in chunk]

