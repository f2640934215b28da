"""
Spatially-coupled density evolution on a K-dimensional lattice.

Positions run over ``[-L+1 : L-1]^K``; everything outside is pinned to the
boundary state ``u_G``.  One iteration is synchronous:

    v(l)  = < grad G(u(l - m)) >_m
    u+(l) = < grad F(v(l + m)) >_m

with ``< . >_m`` the uniform average over ``m in [-W : W]^K``.  The
second average reads ``v`` up to ``W`` sites beyond the lattice, and those
values come from the first equation applied to the pinned ``u``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import NonFiniteError
from .model import _as_state
from .potential import find_fixed_points

__all__ = [
    "Init",
    "Direction",
    "CouplingConfig",
    "LatticeField",
    "HistoryRow",
    "GSCRun",
    "Profile",
    "window_average",
    "gsc_step",
    "run_gsc",
    "profile_extract",
    "write_snapshot",
    "read_snapshot",
]

MAX_K = 3


class Init(enum.Enum):
    ALL_BAD = "all_bad"
    ALL_GOOD = "all_good"
    CUSTOM = "custom"


class Direction(enum.Enum):
    FORWARD = 1
    BACKWARD = -1


@dataclass(frozen=True)
class CouplingConfig:
    k: int
    l_size: int
    w: int
    boundary: np.ndarray

    def __post_init__(self):
        if not 1 <= self.k <= MAX_K:
            raise ValueError(f"coupling dimension k={self.k} must be in 1..{MAX_K}")
        if self.l_size < 2:
            raise ValueError(f"half-size L={self.l_size} must be at least 2")
        if self.w < 0:
            raise ValueError(f"window W={self.w} must be non-negative")
        object.__setattr__(self, "boundary", _as_state(self.boundary))

    @property
    def m_coeff(self):
        """Effective diffusion coefficient ``sum m^2 / (L^2 (2W+1))``."""
        m = np.arange(-self.w, self.w + 1, dtype=float)
        return float(np.sum(m * m) / (self.l_size**2 * (2 * self.w + 1)))

    @property
    def side(self):
        return 2 * self.l_size - 1

    @property
    def positions(self):
        """1-D lattice coordinates ``-L+1 .. L-1``."""
        return np.arange(-self.l_size + 1, self.l_size)


@dataclass
class LatticeField:
    data: np.ndarray  # shape (2L-1,)*K + (N,)
    config: CouplingConfig
    t: int = 0

    def value_at(self, position):
        """State at an integer position; pinned to the boundary outside the lattice."""
        pos = np.atleast_1d(np.asarray(position, dtype=int))
        L = self.config.l_size
        if np.any(np.abs(pos) > L - 1):
            return self.config.boundary.copy()
        return self.data[tuple(pos + L - 1)].copy()

    def perf(self, model):
        return model.perf(self.data)


class HistoryRow(NamedTuple):
    iteration: int
    linf_change: float
    max_perf: float
    mean_perf: float


class Profile(NamedTuple):
    x: np.ndarray
    perf: np.ndarray
    u: np.ndarray


@dataclass
class GSCRun:
    field: LatticeField
    history: list[HistoryRow] = field(default_factory=list)
    converged: bool = False

    @property
    def status(self):
        return "CONVERGED" if self.converged else "NON_CONVERGED"

    @property
    def iterations(self):
        return self.field.t


def window_average(field, position, direction=Direction.FORWARD, values=None):
    """Uniform average of ``values`` over the ``(2W+1)^K`` shifted positions.

    ``values`` defaults to the lattice state itself; shifted reads outside
    the lattice return the pinned boundary.  FORWARD reads ``l + m`` and
    BACKWARD ``l - m``.
    """
    cfg = field.config
    pos = np.atleast_1d(np.asarray(position, dtype=int))
    sign = Direction(direction).value
    offsets = np.arange(-cfg.w, cfg.w + 1)
    total = np.zeros(field.data.shape[-1])
    count = 0
    for m in np.stack(np.meshgrid(*([offsets] * cfg.k), indexing="ij"), axis=-1).reshape(-1, cfg.k):
        if values is None:
            total += field.value_at(pos + sign * m)
        else:
            total += values(pos + sign * m)
        count += 1
    return total / count


def _box_mean(a, w, axis):
    """Mean over a (2w+1)-window along ``axis``; output shrinks by 2w.

    Shifts are added in mirrored pairs so that the result is exactly
    reflection symmetric for reflection-symmetric input.
    """
    if w == 0:
        return a
    n = a.shape[axis] - 2 * w

    def sl(start):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + n)
        return a[tuple(idx)]

    out = sl(w).copy()
    for m in range(1, w + 1):
        out += sl(w + m) + sl(w - m)
    return out / (2 * w + 1)


def _window_mean_all(a, w, k):
    for axis in range(k):
        a = _box_mean(a, w, axis)
    return a


def _pad(data, width, boundary, k):
    pad = [(width, width)] * k + [(0, 0)]
    out = np.pad(data, pad)
    if width:
        inner = tuple(slice(width, -width) for _ in range(k))
        mask = np.ones(out.shape[:k], dtype=bool)
        mask[inner] = False
        out[mask] = boundary
    return out


def gsc_step(model, field: LatticeField) -> LatticeField:
    """One synchronous coupled DE iteration (all ``v`` first, then all ``u``)."""
    cfg = field.config
    k, w = cfg.k, cfg.w
    padded = _pad(field.data, 2 * w, cfg.boundary, k)
    v = _window_mean_all(model.grad_G(padded), w, k)  # lattice grown by W each side
    u = _window_mean_all(model.grad_F(v), w, k)
    bad = ~np.isfinite(u)
    if bad.any():
        idx = np.argwhere(bad)[0][:k] - (cfg.l_size - 1)
        raise NonFiniteError(f"non-finite value at lattice position {tuple(int(i) for i in idx)}", tuple(idx))
    u = model.clamp_u(u)
    return LatticeField(u, cfg, field.t + 1)


def make_field(model, config, init=Init.ALL_BAD, custom=None, report=None):
    init = Init(init)
    shape = (config.side,) * config.k + (model.n,)
    if init is Init.CUSTOM:
        if custom is None:
            raise ValueError("CUSTOM init needs an initial array")
        data = np.broadcast_to(np.asarray(custom, dtype=float), shape).copy()
    elif init is Init.ALL_GOOD:
        data = np.broadcast_to(config.boundary, shape).copy()
    else:
        report = report or find_fixed_points(model)
        if report.u_bad is None:
            raise ValueError("model has no stable fixed point to start from")
        data = np.broadcast_to(report.u_bad, shape).copy()
    return LatticeField(model.clamp_u(data), config, 0)


def run_gsc(
    model,
    config: CouplingConfig,
    init=Init.ALL_BAD,
    max_iters=100_000,
    stop_eps=1e-10,
    custom=None,
    report=None,
    snapshot_every=0,
    snapshot_dir=None,
    callback=None,
) -> GSCRun:
    """Iterate :func:`gsc_step` until the sup-norm change drops below ``stop_eps``.

    Returns a :class:`GSCRun`; ``converged`` is False when ``max_iters``
    was reached first.  ``callback(field)`` is invoked after every step.
    """
    field = make_field(model, config, init, custom, report)
    run = GSCRun(field)
    if snapshot_every and snapshot_dir is not None:
        Path(snapshot_dir).mkdir(parents=True, exist_ok=True)
        write_snapshot(Path(snapshot_dir) / f"snap_{0:08d}.bin", field)
    for _ in range(max_iters):
        new = gsc_step(model, field)
        change = float(np.max(np.abs(new.data - field.data)))
        perf = model.perf(new.data)
        run.history.append(HistoryRow(new.t, change, float(np.max(perf)), float(np.mean(perf))))
        field = new
        if callback is not None:
            callback(field)
        if snapshot_every and snapshot_dir is not None and field.t % snapshot_every == 0:
            write_snapshot(Path(snapshot_dir) / f"snap_{field.t:08d}.bin", field)
        if change < stop_eps:
            run.converged = True
            break
    run.field = field
    return run


def profile_extract(model, field: LatticeField, axis=0) -> Profile:
    """Slice along ``axis`` through the lattice centre (other coordinates 0)."""
    cfg = field.config
    if not 0 <= axis < cfg.k:
        raise ValueError(f"axis {axis} out of range for k={cfg.k}")
    idx = [cfg.l_size - 1] * cfg.k
    idx[axis] = slice(None)
    u = field.data[tuple(idx)]
    x = cfg.positions / cfg.l_size
    return Profile(x, model.perf(u), u.copy())


_HEADER = struct.Struct("<qqq")


def write_snapshot(path, field: LatticeField):
    """Flat binary dump: int64 header (K, L, N), then little-endian float64
    values, row-major over positions then components."""
    cfg = field.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(cfg.k, cfg.l_size, field.data.shape[-1]))
        fh.write(np.ascontiguousarray(field.data, dtype="<f8").tobytes())


def read_snapshot(path):
    """Inverse of :func:`write_snapshot`; returns ``(K, L, data)``."""
    raw = Path(path).read_bytes()
    k, l_size, n = _HEADER.unpack_from(raw)
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return k, l_size, data.reshape((2 * l_size - 1,) * k + (n,))
