"""
Uncoupled system models.

A model is a pair of scalar fields ``F(v)`` and ``G(u)`` on R^N.  The
uncoupled density-evolution (DE) recursion alternates

    v(t)   = grad G(u(t))
    u(t+1) = grad F(v(t))

Every method is vectorised over leading axes: a state array has shape
``(..., N)``, Hessians ``(..., N, N)`` and third derivatives
``(..., N, N, N)``.  Lower performance values are better (for the erasure
channel ``perf(u) = u`` is the erasure probability).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConvergenceError, NonFiniteError

__all__ = [
    "Chart",
    "VectorState",
    "SystemModel",
    "RegularBEC",
    "ProductModel",
    "make_regular_bec",
    "make_product_model",
    "model_from_config",
    "shipped_models",
    "de_step",
    "iterate_de",
    "solve_gradient_equation",
]

# Relative step for the finite-difference fallback of third derivatives.
THIRD_FD_STEP = 1e-4


class Chart(enum.Enum):
    U = "u"
    V = "v"
    U_AFFINE = "u_affine"
    V_AFFINE = "v_affine"


@dataclass(frozen=True)
class VectorState:
    """An N-vector tagged with the coordinate chart it lives in."""

    values: np.ndarray
    chart: Chart = Chart.U

    def __post_init__(self):
        object.__setattr__(self, "values", np.atleast_1d(np.asarray(self.values, dtype=float)))

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return self.values.shape[-1]


def _as_state(x):
    x = np.asarray(x)
    # complex input passes through so callers can take complex-step derivatives
    return np.atleast_1d(x if np.iscomplexobj(x) else x.astype(float, copy=False))


class SystemModel:
    """Base class for an uncoupled system ``(F, G)``.

    Subclasses set ``n`` and the two domain boxes and implement the value,
    gradient and Hessian of both fields.  Third derivatives fall back to
    central differences of the Hessian when not overridden.
    """

    n: int = 1
    name: str = "model"

    # Each box is a pair of (N,) arrays (lower, upper).
    domain_D: tuple[np.ndarray, np.ndarray]
    domain_Dtilde: tuple[np.ndarray, np.ndarray]

    def eval_G(self, u):
        raise NotImplementedError

    def eval_F(self, v):
        raise NotImplementedError

    def grad_G(self, u):
        raise NotImplementedError

    def grad_F(self, v):
        raise NotImplementedError

    def hess_G(self, u):
        raise NotImplementedError

    def hess_F(self, v):
        raise NotImplementedError

    def third_G(self, u):
        return _fd_third(self.hess_G, _as_state(u), self.domain_D)

    def third_F(self, v):
        return _fd_third(self.hess_F, _as_state(v), self.domain_Dtilde)

    def perf(self, u):
        """Performance map; defaults to the first state component."""
        return _as_state(u)[..., 0]

    def worst_state(self):
        """Worst-case initial state for the BP recursion (upper domain corner)."""
        return self.domain_D[1].copy()

    def config(self):
        """Configuration record that rebuilds this model."""
        raise NotImplementedError

    # inverse gradient maps, used for the affine charts

    def inv_grad_G(self, vt, seed=None, tol=1e-12):
        """Solve ``grad_G(u) = vt`` for ``u`` by damped Newton."""
        return solve_gradient_equation(self.grad_G, self.hess_G, vt, self.domain_D, seed, tol)

    def inv_grad_F(self, ut, seed=None, tol=1e-12):
        """Solve ``grad_F(v) = ut`` for ``v`` by damped Newton."""
        return solve_gradient_equation(self.grad_F, self.hess_F, ut, self.domain_Dtilde, seed, tol)

    def clamp_u(self, u):
        lo, hi = self.domain_D
        return np.clip(u, lo, hi)

    def clamp_v(self, v):
        lo, hi = self.domain_Dtilde
        return np.clip(v, lo, hi)

    def __repr__(self):
        return f"<{type(self).__name__} {self.name}>"


def _fd_third(hess, x, box):
    lo, hi = box
    h = THIRD_FD_STEP * np.maximum(hi - lo, 1e-300)
    n = x.shape[-1]
    out = np.empty(x.shape + (n, n))
    for c in range(n):
        e = np.zeros(n)
        e[c] = h[c]
        out[..., :, :, c] = (hess(x + e) - hess(x - e)) / (2.0 * h[c])
    # symmetrise over all index permutations
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    lead = x.ndim - 1
    axes = [tuple(range(lead)) + tuple(lead + p for p in perm) for perm in perms]
    return sum(np.transpose(out, ax) for ax in axes) / 6.0


def solve_gradient_equation(grad, hess, target, box, seed=None, tol=1e-12, max_iter=100):
    """Damped Newton solve of ``grad(x) = target`` inside an axis-aligned box.

    Vectorised over the leading axes of ``target``.  Each point takes the
    full Newton step when it lowers the residual, otherwise the step is
    halved up to 40 times.  Iterates are clamped to ``box``.

    Raises
    ------
    ConvergenceError
        If any point still has residual above ``tol * max(1, |target|)``
        after ``max_iter`` iterations; ``.last`` carries the iterate.
    """
    target = _as_state(target)
    shape = target.shape
    target = target.reshape(-1, shape[-1])
    lo, hi = box
    if seed is None:
        x = np.broadcast_to(0.5 * (lo + hi), target.shape).copy()
    else:
        x = np.clip(np.broadcast_to(_as_state(seed), shape).reshape(target.shape), lo, hi)
    scale = tol * np.maximum(1.0, np.max(np.abs(target), axis=-1))

    r = grad(x) - target
    rn = np.max(np.abs(r), axis=-1)
    # a small residual in grad-space can hide a large error in x where the
    # Hessian is small, so the last accepted step must be small as well
    moved = np.full(rn.shape, np.inf)
    for _ in range(max_iter):
        active = (rn > scale) | (moved > tol * np.maximum(1.0, np.max(np.abs(x), axis=-1)))
        if not np.any(active):
            return x.reshape(shape)
        H = hess(x[active])
        step = _solve(H, r[active])
        xa, ra, rna, ta = x[active], r[active], rn[active], target[active]
        best_x, best_r, best_rn = xa.copy(), ra.copy(), rna.copy()
        # points already within tolerance take one plain polishing step
        polish = rna <= scale[active]
        if np.any(polish):
            cand = np.clip(xa[polish] - step[polish], lo, hi)
            rc = grad(cand) - ta[polish]
            best_x[polish], best_r[polish], best_rn[polish] = cand, rc, np.max(np.abs(rc), axis=-1)
        pending = np.flatnonzero(~polish)
        t = 1.0
        for _ in range(40):
            if pending.size == 0:
                break
            cand = np.clip(xa[pending] - t * step[pending], lo, hi)
            rc = grad(cand) - ta[pending]
            rcn = np.max(np.abs(rc), axis=-1)
            ok = np.isfinite(rcn) & (rcn < rna[pending])
            idx = pending[ok]
            best_x[idx], best_r[idx], best_rn[idx] = cand[ok], rc[ok], rcn[ok]
            pending = pending[~ok]
            t *= 0.5
        if not np.any(polish) and np.all(best_rn >= rna):
            break
        moved[active] = np.max(np.abs(best_x - xa), axis=-1)
        x[active], r[active], rn[active] = best_x, best_r, best_rn
    if np.any(rn > scale):
        raise ConvergenceError(
            f"Newton inversion stalled (max residual {float(np.max(rn)):.3e})", last=x.reshape(shape)
        )
    return x.reshape(shape)


def _solve(H, r):
    try:
        return np.linalg.solve(H, r[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return (np.linalg.pinv(H) @ r[..., None])[..., 0]


class RegularBEC(SystemModel):
    """(l, r)-regular LDPC ensemble on the binary erasure channel.

    ``G(u) = u - (1 - (1-u)^r) / r`` and ``F(v) = eps v^l / l``, so one DE
    round is ``u+ = eps (1 - (1-u)^(r-1))^(l-1)``.
    """

    n = 1

    def __init__(self, l, r, eps):
        if int(l) != l or int(r) != r:
            raise ValueError("degrees must be integers")
        l, r = int(l), int(r)
        if l < 3:
            raise ValueError(f"variable degree l={l} must be at least 3")
        if r < l:
            raise ValueError(f"check degree r={r} must be at least l={l}")
        if not 0.0 <= eps <= 1.0:
            raise ValueError(f"erasure probability eps={eps} outside [0, 1]")
        self.l, self.r, self.eps = l, r, float(eps)
        self.name = f"regular_bec({l},{r},{self.eps:g})"
        self.domain_D = (np.zeros(1), np.ones(1))
        self.domain_Dtilde = (np.zeros(1), np.ones(1))

    def eval_G(self, u):
        u = _as_state(u)[..., 0]
        return u - (1.0 - (1.0 - u) ** self.r) / self.r

    def grad_G(self, u):
        u = _as_state(u)
        return 1.0 - (1.0 - u) ** (self.r - 1)

    def hess_G(self, u):
        u = _as_state(u)
        return ((self.r - 1) * (1.0 - u) ** (self.r - 2))[..., None]

    def third_G(self, u):
        u = _as_state(u)
        return (-(self.r - 1) * (self.r - 2) * (1.0 - u) ** (self.r - 3))[..., None, None]

    def eval_F(self, v):
        v = _as_state(v)[..., 0]
        return self.eps * v**self.l / self.l

    def grad_F(self, v):
        v = _as_state(v)
        return self.eps * v ** (self.l - 1)

    def hess_F(self, v):
        v = _as_state(v)
        return (self.eps * (self.l - 1) * v ** (self.l - 2))[..., None]

    def third_F(self, v):
        v = _as_state(v)
        return (self.eps * (self.l - 1) * (self.l - 2) * v ** (self.l - 3))[..., None, None]

    # both gradients are monotone power maps with explicit inverses

    def inv_grad_G(self, vt, seed=None, tol=1e-12):
        vt = np.clip(_as_state(vt), 0.0, 1.0)
        return 1.0 - (1.0 - vt) ** (1.0 / (self.r - 1))

    def inv_grad_F(self, ut, seed=None, tol=1e-12):
        if self.eps == 0.0:
            return super().inv_grad_F(ut, seed, tol)
        ut = np.clip(_as_state(ut) / self.eps, 0.0, 1.0)
        return ut ** (1.0 / (self.l - 1))

    def config(self):
        return {"type": "regular_bec", "l": self.l, "r": self.r, "eps": self.eps}


class ProductModel(SystemModel):
    """Block-diagonal composition of independent models."""

    def __init__(self, components):
        self.components = list(components)
        if not self.components:
            raise ValueError("product needs at least one component")
        self.sizes = [m.n for m in self.components]
        self.offsets = np.cumsum([0] + self.sizes)
        self.n = int(self.offsets[-1])
        self.name = "product(" + ", ".join(m.name for m in self.components) + ")"
        self.domain_D = tuple(np.concatenate([m.domain_D[i] for m in self.components]) for i in (0, 1))
        self.domain_Dtilde = tuple(
            np.concatenate([m.domain_Dtilde[i] for m in self.components]) for i in (0, 1)
        )

    def _split(self, x):
        x = _as_state(x)
        return [x[..., a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def _sum(self, method, x):
        return sum(getattr(m, method)(part) for m, part in zip(self.components, self._split(x)))

    def _cat(self, method, x):
        return np.concatenate(
            [getattr(m, method)(part) for m, part in zip(self.components, self._split(x))], axis=-1
        )

    def _block(self, method, x, order):
        x = _as_state(x)
        out = np.zeros(x.shape[:-1] + (self.n,) * order, dtype=np.result_type(x, float))
        for m, part, a, b in zip(self.components, self._split(x), self.offsets[:-1], self.offsets[1:]):
            idx = (Ellipsis,) + (slice(a, b),) * order
            out[idx] = getattr(m, method)(part)
        return out

    def eval_G(self, u):
        return self._sum("eval_G", u)

    def eval_F(self, v):
        return self._sum("eval_F", v)

    def grad_G(self, u):
        return self._cat("grad_G", u)

    def grad_F(self, v):
        return self._cat("grad_F", v)

    def hess_G(self, u):
        return self._block("hess_G", u, 2)

    def hess_F(self, v):
        return self._block("hess_F", v, 2)

    def third_G(self, u):
        return self._block("third_G", u, 3)

    def third_F(self, v):
        return self._block("third_F", v, 3)

    def perf(self, u):
        return self._sum("perf", u)

    def worst_state(self):
        return np.concatenate([m.worst_state() for m in self.components])

    def inv_grad_G(self, vt, seed=None, tol=1e-12):
        seeds = self._split(seed) if seed is not None else [None] * len(self.components)
        return np.concatenate(
            [m.inv_grad_G(p, s, tol) for m, p, s in zip(self.components, self._split(vt), seeds)], axis=-1
        )

    def inv_grad_F(self, ut, seed=None, tol=1e-12):
        seeds = self._split(seed) if seed is not None else [None] * len(self.components)
        return np.concatenate(
            [m.inv_grad_F(p, s, tol) for m, p, s in zip(self.components, self._split(ut), seeds)], axis=-1
        )

    def config(self):
        return {"type": "product", "components": [m.config() for m in self.components]}


def make_regular_bec(l, r, eps):
    return RegularBEC(l, r, eps)


def make_product_model(m1, m2, *more):
    return ProductModel([m1, m2, *more])


_BEC_KEYS = {"type", "l", "r", "eps"}


def model_from_config(cfg, path="model", free_eps=None):
    """Build a model from ``{type: regular_bec, l, r, eps}`` or
    ``{type: product, components: [...]}``.

    ``free_eps`` fills in a missing ``eps`` (used when scanning a family).
    """
    if not isinstance(cfg, dict):
        raise ConfigError(path, "expected an object")
    kind = cfg.get("type")
    if kind == "regular_bec":
        unknown = set(cfg) - _BEC_KEYS
        if unknown:
            raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown key")
        for key in ("l", "r"):
            if key not in cfg:
                raise ConfigError(f"{path}.{key}", "missing")
            if not isinstance(cfg[key], int) or isinstance(cfg[key], bool):
                raise ConfigError(f"{path}.{key}", "must be an integer")
        if cfg["l"] < 3:
            raise ConfigError(f"{path}.l", "must be >= 3")
        if cfg["r"] < cfg["l"]:
            raise ConfigError(f"{path}.r", "must be >= l")
        eps = cfg.get("eps", free_eps)
        if eps is None:
            raise ConfigError(f"{path}.eps", "missing")
        if not isinstance(eps, (int, float)) or isinstance(eps, bool) or not 0.0 <= eps <= 1.0:
            raise ConfigError(f"{path}.eps", "must be a number in [0, 1]")
        return RegularBEC(cfg["l"], cfg["r"], float(eps))
    if kind == "product":
        unknown = set(cfg) - {"type", "components"}
        if unknown:
            raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown key")
        comps = cfg.get("components")
        if not isinstance(comps, list) or len(comps) < 2:
            raise ConfigError(f"{path}.components", "needs a list of at least two models")
        return ProductModel(
            [model_from_config(c, f"{path}.components[{i}]", free_eps) for i, c in enumerate(comps)]
        )
    raise ConfigError(f"{path}.type", f"unknown model type {kind!r}")


def shipped_models():
    """Models every invariant check runs on."""
    models = [RegularBEC(3, 6, eps) for eps in (0.40, 0.45, 0.50, 0.55)]
    models.append(ProductModel([RegularBEC(3, 6, 0.45), RegularBEC(4, 8, 0.45)]))
    return models


def de_step(model, u):
    """One uncoupled DE round; returns ``(u_next, v)`` as chart-tagged states."""
    u_arr = _as_state(u)
    v = model.clamp_v(model.grad_G(u_arr))
    u_next = model.clamp_u(model.grad_F(v))
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(u_next))):
        raise NonFiniteError(f"non-finite DE update from u={u_arr!r}")
    return VectorState(u_next, Chart.U), VectorState(v, Chart.V)


def iterate_de(model, u0, iterations):
    """Run ``iterations`` DE rounds on an array of states (no history kept)."""
    u = model.clamp_u(_as_state(u0).copy())
    for _ in range(iterations):
        u = model.clamp_u(model.grad_F(model.clamp_v(model.grad_G(u))))
    if not np.all(np.isfinite(u)):
        raise NonFiniteError("non-finite value during DE iteration")
    return u
