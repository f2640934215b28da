"""
Potential functions of the uncoupled system and what they predict.

The divergence ``D(u, v) = G(u) + F(v) - <u, v>`` gives the potential
``V(u) = -D(u, grad G(u))`` and its dual ``Vt(v) = -D(grad F(v), v)``.
Stationary points of either are exactly the DE fixed points, and the two
agree there.  This module finds and classifies those fixed points and
bisects for the BP and potential thresholds of a model family.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BracketError, NonFiniteError
from .model import RegularBEC, SystemModel, _as_state, iterate_de

__all__ = [
    "Stability",
    "FixedPoint",
    "FixedPointReport",
    "ModelFamily",
    "divergence",
    "potential",
    "dual_potential",
    "potential_gradient",
    "dual_potential_gradient",
    "de_map_residual",
    "de_map_jacobian",
    "find_fixed_points",
    "threshold_scan",
    "regular_bec_family",
    "gradient_flow",
    "force_line_integral",
    "potential_profile",
]

DEDUP_TOL = 1e-7
FP_RESIDUAL_TOL = 1e-13
SINGULAR_COND = 1e12


def divergence(model, u, v):
    u, v = _as_state(u), _as_state(v)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise NonFiniteError("divergence called with non-finite arguments")
    return model.eval_G(u) + model.eval_F(v) - np.sum(u * v, axis=-1)


def potential(model, u):
    u = _as_state(u)
    return -divergence(model, u, model.grad_G(u))


def dual_potential(model, v):
    v = _as_state(v)
    return -divergence(model, model.grad_F(v), v)


def de_map_residual(model, u):
    """``u - grad F(grad G(u))``; zero exactly at fixed points."""
    u = _as_state(u)
    return u - model.grad_F(model.grad_G(u))


def potential_gradient(model, u):
    """Closed form ``dV/du_a = g_ab(u) (u^b - dF/dv_b(grad G(u)))``."""
    u = _as_state(u)
    return np.einsum("...ab,...b->...a", model.hess_G(u), de_map_residual(model, u))


def dual_potential_gradient(model, v):
    v = _as_state(v)
    r = v - model.grad_G(model.grad_F(v))
    return np.einsum("...ab,...b->...a", model.hess_F(v), r)


def de_map_jacobian(model, u):
    """Jacobian of ``u -> grad F(grad G(u))``, i.e. ``f(v) g(u)``."""
    u = _as_state(u)
    return model.hess_F(model.grad_G(u)) @ model.hess_G(u)


class Stability(enum.Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    DEGENERATE = "degenerate"


@dataclass
class FixedPoint:
    u: np.ndarray
    v: np.ndarray
    value: float
    dual_value: float
    perf: float
    stability: Stability
    spectral_radius: float

    def as_dict(self):
        return {
            "u": [float(x) for x in self.u],
            "v": [float(x) for x in self.v],
            "V": float(self.value),
            "V_dual": float(self.dual_value),
            "perf": float(self.perf),
            "classification": self.stability.value,
            "spectral_radius": float(self.spectral_radius),
        }


@dataclass
class FixedPointReport:
    """Fixed points ordered by potential value.

    ``good`` is the unique stable global minimiser of V over all
    stationary solutions (None when there is none or it is not unique).
    ``best``/``bad`` are the stable points with the lowest/highest
    performance value; ``best`` is the boundary value used for coupling.
    """

    points: list[FixedPoint]
    good: int | None
    best: int | None
    bad: int | None
    failed_seeds: int = 0

    @property
    def u_good(self):
        return None if self.best is None else self.points[self.best].u

    @property
    def u_bad(self):
        """Worst stable point, falling back to the best one when unique."""
        idx = self.bad if self.bad is not None else self.best
        return None if idx is None else self.points[idx].u

    @property
    def saturates(self):
        """True when the best-performing stable point also uniquely minimises V."""
        return self.good is not None and self.good == self.best

    def as_dict(self):
        return {
            "points": [p.as_dict() for p in self.points],
            "good": self.good,
            "best": self.best,
            "bad": self.bad,
            "saturates": self.saturates,
            "failed_seeds": self.failed_seeds,
        }


def _classify(model, u):
    g = model.hess_G(u)
    if np.linalg.cond(g) > SINGULAR_COND:
        rho = float(np.max(np.abs(np.linalg.eigvals(de_map_jacobian(model, u)))))
        return Stability.DEGENERATE, rho
    rho = float(np.max(np.abs(np.linalg.eigvals(de_map_jacobian(model, u)))))
    if rho < 1.0 - 1e-9:
        return Stability.STABLE, rho
    if rho > 1.0 + 1e-9:
        return Stability.UNSTABLE, rho
    return Stability.DEGENERATE, rho


def _seeds(model, resolution):
    lo, hi = model.domain_D
    n = model.n
    axes = [np.linspace(lo[a], hi[a], resolution) for a in range(n)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    h = de_map_residual(model, grid)
    seeds = [grid.reshape(-1, n)[np.all(np.abs(h.reshape(-1, n)) < 1e-12, axis=-1)]]
    # cells in which every component of the residual changes sign
    corners = [tuple(int(b) for b in np.binary_repr(i, n)) for i in range(2**n)] if n > 0 else []
    shape = (resolution - 1,) * n
    sign_pos = np.zeros(shape + (n,), dtype=bool)
    sign_neg = np.zeros(shape + (n,), dtype=bool)
    for c in corners:
        sl = tuple(slice(ci, ci + resolution - 1) for ci in c)
        hc = h[sl]
        sign_pos |= hc >= 0
        sign_neg |= hc <= 0
    crossing = np.all(sign_pos & sign_neg, axis=-1)
    lower = grid[tuple(slice(0, resolution - 1) for _ in range(n))]
    step = (hi - lo) / (resolution - 1)
    seeds.append(lower[crossing] + 0.5 * step)
    # near-tangencies: local minima of |h| that come close to zero
    if n == 1:
        a = np.abs(h[:, 0])
        idx = np.where((a[1:-1] <= a[:-2]) & (a[1:-1] <= a[2:]) & (a[1:-1] < 1e-3))[0] + 1
        seeds.append(grid[idx])
    return np.concatenate(seeds, axis=0)


def _newton_fixed_points(model, seeds, max_iter=100):
    """Damped Newton on ``h(u) = u - grad F(grad G(u))`` from every seed."""
    lo, hi = model.domain_D
    x = seeds.copy()
    r = de_map_residual(model, x)
    rn = np.max(np.abs(r), axis=-1)
    eye = np.eye(model.n)
    for _ in range(max_iter):
        active = rn > FP_RESIDUAL_TOL
        if not np.any(active):
            break
        J = eye - de_map_jacobian(model, x[active])
        try:
            step = np.linalg.solve(J, r[active][..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = (np.linalg.pinv(J) @ r[active][..., None])[..., 0]
        xa, rna = x[active], rn[active]
        t = np.ones(len(xa))
        new_x, new_r, new_rn = xa.copy(), r[active].copy(), rna.copy()
        pending = np.ones(len(xa), dtype=bool)
        for _ in range(30):
            cand = np.clip(xa - t[:, None] * step, lo, hi)
            rc = de_map_residual(model, cand)
            rcn = np.max(np.abs(rc), axis=-1)
            ok = pending & (rcn < rna)
            new_x[ok], new_r[ok], new_rn[ok] = cand[ok], rc[ok], rcn[ok]
            pending &= ~ok
            if not pending.any():
                break
            t[pending] *= 0.5
        if pending.all():
            break
        x[active], r[active], rn[active] = new_x, new_r, new_rn
    return x, rn <= FP_RESIDUAL_TOL


def find_fixed_points(model: SystemModel, grid_resolution: int = 2001) -> FixedPointReport:
    """Locate, refine and classify every DE fixed point in the domain box.

    Seeds come from a grid scan of the sign structure of
    ``u - grad F(grad G(u))`` (which shares the sign of dV/du where the
    Hessian of G is positive definite); each seed is refined by damped
    Newton.  Points closer than 1e-7 in the sup norm are merged.
    """
    if grid_resolution < 2:
        raise ValueError("grid_resolution must be at least 2")
    seeds = _seeds(model, grid_resolution)
    roots, ok = _newton_fixed_points(model, seeds)
    failed = int(np.count_nonzero(~ok))
    unique = []
    for x in roots[ok]:
        if not any(np.max(np.abs(x - y)) < DEDUP_TOL for y in unique):
            unique.append(x)

    points = []
    for u in unique:
        v = model.grad_G(u)
        stab, rho = _classify(model, u)
        points.append(
            FixedPoint(
                u=u,
                v=v,
                value=float(potential(model, u)),
                dual_value=float(dual_potential(model, v)),
                perf=float(model.perf(u)),
                stability=stab,
                spectral_radius=rho,
            )
        )
    points.sort(key=lambda p: (p.value, tuple(p.u)))

    good = None
    if points:
        vmin = points[0].value
        tied = [i for i, p in enumerate(points) if p.value - vmin <= 1e-12]
        if len(tied) == 1 and points[0].stability is Stability.STABLE:
            good = 0
    stable = [i for i, p in enumerate(points) if p.stability is Stability.STABLE]
    best = min(stable, key=lambda i: points[i].perf) if stable else None
    worst = max(stable, key=lambda i: points[i].perf) if stable else None
    bad = worst if worst is not None and worst != best else None
    return FixedPointReport(points, good, best, bad, failed)


@dataclass
class ModelFamily:
    """One-parameter family ``build(param) -> SystemModel``.

    The family must be monotone: "below threshold" at ``bracket[0]`` and
    "above threshold" at ``bracket[1]``.
    """

    name: str
    build: Callable[[float], SystemModel]
    bracket: tuple[float, float] = (0.0, 1.0)
    grid_resolution: int = 2001
    meta: dict = field(default_factory=dict)

    def __call__(self, param):
        return self.build(param)


def regular_bec_family(l, r):
    return ModelFamily(f"regular_bec({l},{r},*)", lambda eps: RegularBEC(l, r, eps), (0.0, 1.0))


def _below_bp(family, param, iterations):
    model = family(param)
    report = find_fixed_points(model, family.grid_resolution)
    if report.best is None:
        return False
    u = iterate_de(model, model.worst_state(), iterations)
    return bool(np.max(np.abs(u - report.points[report.best].u)) < 1e-6)


def _below_potential(family, param):
    return find_fixed_points(family(param), family.grid_resolution).saturates


def threshold_scan(family: ModelFamily, kind: str, tol: float, iterations: int = 10_000, trace=None):
    """Bisect for the BP or potential threshold of ``family``.

    ``kind="bp"``: largest parameter for which DE from the worst-case state
    reaches the best stable fixed point within ``iterations`` rounds.
    ``kind="potential"``: largest parameter for which that point is the
    unique stable minimiser of V.

    Bisection stops once half the bracket width is at most ``tol`` and
    returns the bracket midpoint.  If ``trace`` is a list, each evaluated
    ``(param, below)`` pair is appended to it.
    """
    kind = kind.lower()
    if kind == "bp":
        pred = lambda p: _below_bp(family, p, iterations)  # noqa: E731
    elif kind == "potential":
        pred = lambda p: _below_potential(family, p)  # noqa: E731
    else:
        raise ValueError(f"unknown threshold kind {kind!r}")
    if tol <= 0:
        raise ValueError("tol must be positive")

    lo, hi = map(float, family.bracket)
    below_lo, below_hi = pred(lo), pred(hi)
    if trace is not None:
        trace.extend([(lo, below_lo), (hi, below_hi)])
    if below_lo == below_hi:
        raise BracketError(f"{kind} predicate is {below_lo} at both ends of {family.bracket}")
    while hi - lo > 2.0 * tol:
        mid = 0.5 * (lo + hi)
        below = pred(mid)
        if trace is not None:
            trace.append((mid, below))
        if below:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gradient_flow(model, u0, dt=1e-3, max_steps=500_000, tol=1e-10):
    """Explicit Euler on ``du/dt = -g^{-1} dV/du`` for a batch of starts.

    ``g^{-1} dV/du`` equals ``u - grad F(grad G(u))`` wherever g is
    invertible, so that form is integrated directly.  Returns the final
    states, the per-step potential values (shape ``(steps+1, batch)``)
    and the number of steps taken.
    """
    u = model.clamp_u(np.atleast_2d(_as_state(u0)).copy())
    values = [potential(model, u)]
    steps = 0
    for steps in range(1, max_steps + 1):
        du = -de_map_residual(model, u)
        u = model.clamp_u(u + dt * du)
        values.append(potential(model, u))
        if np.max(np.abs(du)) < tol:
            break
    return u, np.array(values), steps


def force_line_integral(model, vt_start, vt_end, nodes=64):
    """Gauss-Legendre quadrature of the conservative force along a segment.

    The force is ``A^a(vt) = Phi(vt)^a - dF/dv_a(vt)`` with ``Phi`` the
    inverse of ``grad G``; its line integral along any path should equal
    ``V(Phi(vt_end)) - V(Phi(vt_start))``.  Returns ``(integral, difference)``.
    """
    a, b = _as_state(vt_start), _as_state(vt_end)
    x, w = np.polynomial.legendre.leggauss(nodes)
    s = 0.5 * (x + 1.0)
    path = a + s[:, None] * (b - a)
    u = model.inv_grad_G(path)
    force = u - model.grad_F(path)
    integral = 0.5 * float(np.sum(w * (force @ (b - a))))
    ua, ub = model.inv_grad_G(a), model.inv_grad_G(b)
    diff = float(potential(model, ub) - potential(model, ua))
    return integral, diff


def potential_profile(model, points=401, axis=0, base=None):
    """V and dV/du along one coordinate of the domain box.

    Other coordinates are held at ``base`` (defaults to the box midpoint).
    Returns ``(s, V, dV, perf)`` with ``s`` the swept coordinate.
    """
    lo, hi = model.domain_D
    base = 0.5 * (lo + hi) if base is None else _as_state(base)
    s = np.linspace(lo[axis], hi[axis], points)
    u = np.broadcast_to(base, (points, model.n)).copy()
    u[:, axis] = s
    return s, potential(model, u), potential_gradient(model, u)[:, axis], model.perf(u)

