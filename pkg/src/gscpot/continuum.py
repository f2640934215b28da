"""
Continuum limit of the coupled system on the hypercube ``[-1, 1]^K``.

Fields are stored in affine coordinates, either ``vt = grad G(u)``
(``Chart.V_AFFINE``) or ``ut = grad F(v)`` (``Chart.U_AFFINE``).  In the
``vt`` chart the gradient flow is

    d vt_a / dt = g_ab(Phi(vt)) [ -dV(Phi(vt))/d vt_b + M C^b(vt) ]
    C^a(vt)     = sum_alpha f^ab(vt) vt_b,aa + 1/2 (df^ab/dv_c)(vt) vt_b,a vt_c,a

with ``Phi`` the inverse of ``grad G``.  The ``ut`` chart is the mirror
image with F and G (and ``Psi``, the inverse of ``grad F``) swapped; its
stationary states solve ``M C~(ut) = dVt(Psi(ut))/d ut``.  The chain rule
collapses ``-dV(Phi(vt))/d vt`` to ``grad F(vt) - Phi(vt)`` and
``-dVt(Psi(ut))/d ut`` to ``grad G(ut) - Psi(ut)``, which is how both
forces are evaluated.

Boundary nodes are pinned to the image of the good solution ``u_G``.
Spatial derivatives are second-order central differences.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, SingularHessianError
from .lattice import Init
from .model import Chart, VectorState, _as_state
from .potential import dual_potential, find_fixed_points, potential

__all__ = [
    "ContinuumField",
    "PDERun",
    "make_continuum_field",
    "to_affine",
    "from_affine",
    "preimage",
    "coupling_operator",
    "stationarity_residual",
    "bvp_residual",
    "stable_dt",
    "pde_step",
    "run_pde",
    "energy_functional",
    "to_dual_chart",
    "conservation_check",
    "energy_tensor",
    "verify_affine_connection",
    "write_field_snapshot",
]


@dataclass
class ContinuumField:
    values: np.ndarray  # (n,)*K + (N,)
    chart: Chart
    m_coeff: float
    boundary: np.ndarray
    seed: np.ndarray | None = field(default=None, repr=False)  # Newton seed for the preimage
    step: int = 0

    def __post_init__(self):
        if self.chart not in (Chart.V_AFFINE, Chart.U_AFFINE):
            raise ValueError("continuum fields live in an affine chart")
        if self.m_coeff <= 0:
            raise ValueError("M must be positive")
        self.boundary = _as_state(self.boundary)

    @property
    def k(self):
        return self.values.ndim - 1

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def dx(self):
        return 2.0 / (self.n - 1)

    @property
    def x(self):
        return np.linspace(-1.0, 1.0, self.n)

    def interior(self):
        return tuple(slice(1, -1) for _ in range(self.k))

    def boundary_mask(self):
        mask = np.ones((self.n,) * self.k, dtype=bool)
        mask[self.interior()] = False
        return mask


@dataclass
class PDERun:
    field: ContinuumField
    dt: float
    rows: list = field(default_factory=list)  # (step, H, max_residual)
    converged: bool = False
    max_increase: float = float("-inf")

    @property
    def energies(self):
        return np.array([r[1] for r in self.rows])


def _chart_box(model, chart):
    return model.domain_Dtilde if chart is Chart.V_AFFINE else model.domain_D


def make_continuum_field(model, k, n, m_coeff, chart=Chart.V_AFFINE, init=Init.ALL_BAD, custom=None, report=None):
    """Grid of ``n`` nodes per axis, boundary pinned to the image of ``u_G``.

    ``init`` fills the interior with the image of the worst stable fixed
    point (ALL_BAD), the boundary value (ALL_GOOD) or ``custom``, which is
    either an array or a function of the node coordinates ``(..., K)``.
    """
    chart = Chart(chart)
    if not 1 <= k <= 3:
        raise ValueError("k must be 1, 2 or 3")
    if n < 3:
        raise ValueError("need at least 3 nodes per axis")
    init = Init(init)
    report = report or find_fixed_points(model)
    if report.u_good is None:
        raise ValueError("model has no stable fixed point for the boundary")
    image = (lambda u: model.grad_G(u)) if chart is Chart.V_AFFINE else (lambda u: _as_state(u))
    bval = image(report.u_good)
    shape = (n,) * k + (model.n,)
    if init is Init.ALL_BAD:
        values = np.broadcast_to(image(report.u_bad), shape).copy()
    elif init is Init.ALL_GOOD:
        values = np.broadcast_to(bval, shape).copy()
    else:
        if callable(custom):
            x = np.linspace(-1.0, 1.0, n)
            coords = np.stack(np.meshgrid(*([x] * k), indexing="ij"), axis=-1)
            values = np.broadcast_to(custom(coords), shape).astype(float).copy()
        else:
            values = np.broadcast_to(np.asarray(custom, dtype=float), shape).copy()
    f = ContinuumField(values, chart, float(m_coeff), bval)
    f.values[f.boundary_mask()] = bval
    return f


def to_affine(model, state: VectorState) -> VectorState:
    """``u -> vt = grad G(u)`` and ``v -> ut = grad F(v)``."""
    if state.chart is Chart.U:
        return VectorState(model.grad_G(state.values), Chart.V_AFFINE)
    if state.chart is Chart.V:
        return VectorState(model.grad_F(state.values), Chart.U_AFFINE)
    raise ValueError(f"state already in affine chart {state.chart}")


def from_affine(model, state: VectorState, seed=None) -> VectorState:
    """Inverse maps ``Phi`` (vt -> u) and ``Psi`` (ut -> v) by damped Newton."""
    if state.chart is Chart.V_AFFINE:
        return VectorState(model.inv_grad_G(state.values, seed), Chart.U)
    if state.chart is Chart.U_AFFINE:
        return VectorState(model.inv_grad_F(state.values, seed), Chart.V)
    raise ValueError(f"state is not in an affine chart ({state.chart})")


def preimage(model, fld: ContinuumField):
    """``Phi(vt)`` or ``Psi(ut)`` at every node, seeded from the cached solution."""
    if fld.chart is Chart.V_AFFINE:
        return model.inv_grad_G(fld.values, fld.seed)
    return model.inv_grad_F(fld.values, fld.seed)


def _parts(model, fld, pre):
    """Chart-dependent pieces: (diffusion tensor, its derivative, mobility, force)."""
    vals = fld.values
    if fld.chart is Chart.V_AFFINE:
        return model.hess_F(vals), model.third_F(vals), model.hess_G(pre), model.grad_F(vals) - pre
    return model.hess_G(vals), model.third_G(vals), model.hess_F(pre), model.grad_G(vals) - pre


def _shift(a, axis, offset, k):
    idx = [slice(1, -1)] * k
    n = a.shape[axis]
    idx[axis] = slice(1 + offset, n - 1 + offset)
    return a[tuple(idx)]


def _central(a, dx, k):
    """First and second central differences at interior nodes, per axis."""
    centre = a[tuple(slice(1, -1) for _ in range(k))]
    d1, d2 = [], []
    for axis in range(k):
        plus, minus = _shift(a, axis, 1, k), _shift(a, axis, -1, k)
        d1.append((plus - minus) / (2.0 * dx))
        d2.append(((plus + minus) - 2.0 * centre) / (dx * dx))
    return d1, d2


def _coupling(fld, diff, third):
    k = fld.k
    inner = fld.interior()
    D, T = diff[inner], third[inner]
    d1, d2 = _central(fld.values, fld.dx, k)
    c = np.zeros(D.shape[:-1])
    for alpha in range(k):
        c += np.einsum("...ab,...b->...a", D, d2[alpha])
        c += 0.5 * np.einsum("...abc,...b,...c->...a", T, d1[alpha], d1[alpha])
    out = np.zeros_like(fld.values)
    out[inner] = c
    return out


def coupling_operator(model, fld: ContinuumField, node=None):
    """Coupling operator at interior nodes (zero on the boundary).

    Uses ``f`` and ``df/dv`` in the ``vt`` chart and ``g`` and ``dg/du`` in
    the ``ut`` chart.  With ``node`` given, returns that node's N-vector.
    """
    if fld.chart is Chart.V_AFFINE:
        c = _coupling(fld, model.hess_F(fld.values), model.third_F(fld.values))
    else:
        c = _coupling(fld, model.hess_G(fld.values), model.third_G(fld.values))
    return c if node is None else c[tuple(node)]


def stationarity_residual(model, fld: ContinuumField, pre=None):
    """``-dV/d vt + M C`` (or its dual) at every node; zero on the boundary."""
    pre = preimage(model, fld) if pre is None else pre
    diff, third, _, force = _parts(model, fld, pre)
    res = force + fld.m_coeff * _coupling(fld, diff, third)
    res[fld.boundary_mask()] = 0.0
    return res


def bvp_residual(model, fld: ContinuumField):
    """``M C~_a(ut) - dVt(Psi(ut))/d ut^a`` at interior nodes (``ut`` chart only)."""
    if fld.chart is not Chart.U_AFFINE:
        raise ValueError("bvp_residual expects a field in the ut chart")
    return stationarity_residual(model, fld)


def stable_dt(model, dx, m_coeff, samples=257):
    """Explicit Euler step ``0.2 dx^2 / (M lam + dx^2)``.

    ``lam`` bounds the spectrum of ``g f`` over a sample of both charts.
    """
    rng = np.random.default_rng(0)
    pts = []
    for lo, hi in (model.domain_D, model.domain_Dtilde):
        if model.n == 1:
            pts.append(np.linspace(lo, hi, samples))
        else:
            pts.append(lo + (hi - lo) * rng.random((samples * 8, model.n)))
    u, v = pts
    m1 = model.hess_G(u) @ model.hess_F(model.grad_G(u))
    m2 = model.hess_F(v) @ model.hess_G(model.grad_F(v))
    lam = max(float(np.max(np.abs(np.linalg.eigvals(m)))) for m in (m1, m2))
    return 0.2 * dx * dx / (m_coeff * lam + dx * dx)


def _advance(model, fld, dt, pre):
    diff, third, mob, force = _parts(model, fld, pre)
    bracket = force + fld.m_coeff * _coupling(fld, diff, third)
    rate = np.einsum("...ab,...b->...a", mob, bracket)
    mask = fld.boundary_mask()
    rate[mask] = 0.0
    new = fld.values + dt * rate
    bad = ~np.all(np.isfinite(new), axis=-1)
    if bad.any():
        node = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(f"non-finite value at node {node}; dt={dt:g} too large?", node)
    lo, hi = _chart_box(model, fld.chart)
    new = np.clip(new, lo, hi)
    new[mask] = fld.boundary
    bracket[mask] = 0.0
    out = replace(fld, values=new, seed=pre, step=fld.step + 1)
    return out, bracket


def pde_step(model, fld: ContinuumField, dt) -> ContinuumField:
    """One explicit Euler step on interior nodes; boundary re-pinned."""
    return _advance(model, fld, dt, preimage(model, fld))[0]


def energy_functional(model, fld: ContinuumField, pre=None):
    """Discrete Lyapunov functional.

    ``vt`` chart: ``int V(Phi(vt)) + M/2 sum_alpha vt_a,alpha vt_b,alpha f^ab(vt)``;
    ``ut`` chart: the dual Lagrangian with ``Vt(Psi(ut))`` and ``g``.

    The potential term uses the trapezoidal rule on nodes.  The gradient
    term is evaluated per cell edge: the central difference across the edge,
    the metric averaged over its two end nodes, trapezoidal weights across
    the remaining axes.
    """
    pre = preimage(model, fld) if pre is None else pre
    if fld.chart is Chart.V_AFFINE:
        dens = potential(model, pre)
        metric = model.hess_F(fld.values)
    else:
        dens = dual_potential(model, pre)
        metric = model.hess_G(fld.values)
    w1 = np.full(fld.n, fld.dx)
    w1[0] = w1[-1] = 0.5 * fld.dx
    total = np.sum(_outer_weights([w1] * fld.k) * dens)
    cell = np.full(fld.n - 1, fld.dx)
    for alpha in range(fld.k):
        d = np.diff(fld.values, axis=alpha) / fld.dx
        lo = [slice(None)] * fld.k
        hi = [slice(None)] * fld.k
        lo[alpha], hi[alpha] = slice(None, -1), slice(1, None)
        g = 0.5 * (metric[tuple(lo)] + metric[tuple(hi)])
        e = np.einsum("...a,...ab,...b->...", d, g, d)
        weights = [cell if a == alpha else w1 for a in range(fld.k)]
        total += 0.5 * fld.m_coeff * np.sum(_outer_weights(weights) * e)
    return float(total)


def _outer_weights(ws):
    w = ws[0]
    for other in ws[1:]:
        w = np.multiply.outer(w, other)
    return w


def run_pde(
    model,
    fld: ContinuumField,
    dt=None,
    steps=1_000_000,
    stop_eps=1e-13,
    snapshot_every=0,
    snapshot_dir=None,
    record_every=1,
) -> PDERun:
    """Integrate until the sup-norm update falls below ``stop_eps``.

    ``H`` is evaluated at every step so that ``max_increase`` (largest
    one-step rise of H) is exact; ``rows`` keeps every ``record_every``-th
    ``(step, H, max_residual)`` plus the last one.
    """
    if dt is None:
        dt = stable_dt(model, fld.dx, fld.m_coeff)
    run = PDERun(fld, dt)
    prev_h = None
    for i in range(steps + 1):
        pre = preimage(model, fld)
        h = energy_functional(model, fld, pre)
        if prev_h is not None:
            run.max_increase = max(run.max_increase, h - prev_h)
        prev_h = h
        if snapshot_every and snapshot_dir is not None and fld.step % snapshot_every == 0:
            write_field_snapshot(Path(snapshot_dir) / f"snap_{fld.step:08d}.bin", fld)
        if i == steps:
            res = stationarity_residual(model, fld, pre)
            run.rows.append((fld.step, h, float(np.max(np.abs(res)))))
            break
        new, bracket = _advance(model, fld, dt, pre)
        change = float(np.max(np.abs(new.values - fld.values)))
        if i % record_every == 0 or change < stop_eps:
            run.rows.append((fld.step, h, float(np.max(np.abs(bracket)))))
        fld = new
        if change < stop_eps:
            run.converged = True
            pre = preimage(model, fld)
            h = energy_functional(model, fld, pre)
            run.max_increase = max(run.max_increase, h - prev_h)
            res = stationarity_residual(model, fld, pre)
            run.rows.append((fld.step, h, float(np.max(np.abs(res)))))
            break
    run.field = fld
    return run


def to_dual_chart(model, fld: ContinuumField) -> ContinuumField:
    """Map a ``vt`` field to the ``ut`` chart.

    Interior nodes use ``ut = grad F(v)`` with ``v = vt + (M/2) lap(vt)``,
    the leading-order relation between the two fields; the boundary takes
    ``u_G``.
    """
    if fld.chart is not Chart.V_AFFINE:
        raise ValueError("expected a vt-chart field")
    inner = fld.interior()
    _, d2 = _central(fld.values, fld.dx, fld.k)
    v = fld.values.copy()
    v[inner] = v[inner] + 0.5 * fld.m_coeff * sum(d2)
    v = model.clamp_v(v)
    ut = model.grad_F(v)
    u_g = model.inv_grad_G(fld.boundary)
    ut[fld.boundary_mask()] = u_g
    return ContinuumField(model.clamp_u(ut), Chart.U_AFFINE, fld.m_coeff, u_g)


def conservation_check(model, fld: ContinuumField):
    """Energy density ``E(x) = Vt(Psi(ut)) - (M/2) <ut', g ut'>`` on a K=1 field.

    Derivatives are central inside and second-order one-sided at the two
    boundary nodes.  Returns ``(E, max_drift)`` with the drift measured
    against the left boundary value.
    """
    if fld.chart is not Chart.U_AFFINE or fld.k != 1:
        raise ValueError("conservation_check needs a K=1 field in the ut chart")
    pre = preimage(model, fld)
    d = np.gradient(fld.values, fld.dx, axis=0, edge_order=2)
    kinetic = 0.5 * fld.m_coeff * np.einsum("...a,...ab,...b->...", d, model.hess_G(fld.values), d)
    e = dual_potential(model, pre) - kinetic
    return e, float(np.max(np.abs(e - e[0])))


def energy_tensor(model, fld: ContinuumField, node):
    """K x K tensor ``T[alpha, beta] = M ut_alpha . g . ut_beta - delta L`` at an interior node."""
    if fld.chart is not Chart.U_AFFINE:
        raise ValueError("energy_tensor expects a field in the ut chart")
    node = tuple(int(i) for i in node)
    if any(i <= 0 or i >= fld.n - 1 for i in node):
        raise ValueError("energy_tensor needs an interior node")
    ut = fld.values[node]
    seed = None if fld.seed is None else fld.seed[node]
    pre = model.inv_grad_F(ut, seed)
    g = model.hess_G(ut)
    grads = []
    for alpha in range(fld.k):
        up = list(node)
        dn = list(node)
        up[alpha] += 1
        dn[alpha] -= 1
        grads.append((fld.values[tuple(up)] - fld.values[tuple(dn)]) / (2.0 * fld.dx))
    grads = np.array(grads)  # (K, N)
    gram = grads @ g @ grads.T
    lagrangian = float(dual_potential(model, pre)) + 0.5 * fld.m_coeff * float(np.trace(gram))
    return fld.m_coeff * gram - lagrangian * np.eye(fld.k)


def _hessian_derivative(model, u, h):
    """``dg_ad/du^e`` stacked with ``e`` last.

    Uses a complex step when ``hess_G`` propagates complex input, which
    avoids cancellation where g is tiny.  Otherwise falls back to a
    five-point stencil with step ``h`` times the box width.
    """
    n = model.n
    dg = np.empty((n, n, n))
    tiny = 1e-30
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", np.exceptions.ComplexWarning)
            probe = model.hess_G(u + 1j * tiny * np.eye(n)[0])
    except (TypeError, ValueError, np.exceptions.ComplexWarning):
        probe = None
    if probe is not None and np.iscomplexobj(probe):
        for e in range(n):
            dg[:, :, e] = model.hess_G(u + 1j * tiny * np.eye(n)[e]).imag / tiny
        return dg
    lo, hi = model.domain_D
    step = h * (hi - lo)
    for e in range(n):
        s = np.zeros(n)
        s[e] = step[e]
        dg[:, :, e] = (
            -model.hess_G(u + 2 * s) + 8 * model.hess_G(u + s) - 8 * model.hess_G(u - s) + model.hess_G(u - 2 * s)
        ) / (12.0 * step[e])
    return dg


def verify_affine_connection(model, u, h=1e-2):
    """Connection coefficients of the ``vt`` chart at ``u``; should vanish.

    The first term contracts the analytic third derivative of G with two
    inverse Hessians.  The second differentiates ``g_ad`` with respect to
    ``vt_c`` through the chain rule ``dg_ad/du^e g^ec``, with ``dg/du``
    taken numerically (see :func:`_hessian_derivative`).
    """
    u = _as_state(u)
    g = model.hess_G(u)
    if np.linalg.cond(g) > 1e12:
        raise SingularHessianError(f"Hessian of G is singular at u={u!r}")
    ginv = np.linalg.inv(g)
    dg = _hessian_derivative(model, u, h)
    term1 = np.einsum("db,ec,ade->abc", ginv, ginv, model.third_G(u))
    dg_dvt = np.einsum("ade,ec->adc", dg, ginv)
    term2 = np.einsum("adc,db->abc", dg_dvt, ginv)
    return term1 - term2


def write_field_snapshot(path, fld: ContinuumField):
    """Same flat layout as the lattice dump: int64 (K, n, N) then float64 values."""
    import struct

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<qqq", fld.k, fld.n, fld.values.shape[-1]))
        fh.write(np.ascontiguousarray(fld.values, dtype="<f8").tobytes())

