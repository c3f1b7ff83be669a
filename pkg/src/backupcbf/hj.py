"""Grid dynamic-programming oracle for the finite-horizon reach-avoid value function.

Backward semi-Lagrangian recursion with zero-order-hold controls:

    W_T(x)      = max_j h_bj(x)
    W_{t-dt}(x) = min( h_s(x), max_u W_t(x + dt * (f(x) + g(x) u)) )
    V(x)        = min( h_s(x), W_0(x) )

The zero-superlevel set of V approximates the set of states from which some
admissible control keeps h_s >= 0 on [0, T] and reaches a backup set at T.
It serves as ground truth for set-containment tests; it is deliberately a
plain, convergent discretization rather than a PDE solver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dynamics import Box, SystemModel


@dataclass(frozen=True)
class GridSpec:
    """Uniform 2-D grid over a state box plus the recursion's time step and horizon."""

    lower: np.ndarray
    upper: np.ndarray
    shape: tuple
    dt: float = 0.02
    horizon_T: float = 2.0

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(self.shape) != 2 or lower.size != 2 or upper.size != 2:
            raise ValueError("GridSpec is 2-D only")
        if any(s < 3 for s in self.shape):
            raise ValueError("need at least 3 points per dimension")
        if self.dt <= 0 or self.horizon_T <= 0:
            raise ValueError("dt and horizon_T must be positive")

    def axes(self):
        return (np.linspace(self.lower[0], self.upper[0], self.shape[0]),
                np.linspace(self.lower[1], self.upper[1], self.shape[1]))

    def points(self):
        ax0, ax1 = self.axes()
        return np.stack(np.meshgrid(ax0, ax1, indexing="ij"), axis=-1).reshape(-1, 2)

    def cell_size(self):
        return ((self.upper - self.lower) / (np.array(self.shape) - 1.0))

    def to_json(self):
        return json.dumps({"lower": self.lower.tolist(), "upper": self.upper.tolist(),
                           "shape": list(self.shape), "dt": self.dt,
                           "horizon_T": self.horizon_T})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(np.array(d["lower"]), np.array(d["upper"]), tuple(d["shape"]),
                   d["dt"], d["horizon_T"])


@dataclass
class ValueGrid:
    values: np.ndarray  # shape == spec.shape
    spec: GridSpec


def _bilinear(values, spec: GridSpec, pts, oob_value):
    """Bilinear interpolation of a grid field; out-of-box points get oob_value."""
    lo, hi = spec.lower, spec.upper
    cell = spec.cell_size()
    inside = np.all((pts >= lo) & (pts <= hi), axis=-1)
    t = (np.clip(pts, lo, hi) - lo) / cell
    i0 = np.clip(t[..., 0].astype(int), 0, spec.shape[0] - 2)
    j0 = np.clip(t[..., 1].astype(int), 0, spec.shape[1] - 2)
    fx = t[..., 0] - i0
    fy = t[..., 1] - j0
    v = (values[i0, j0] * (1 - fx) * (1 - fy)
         + values[i0 + 1, j0] * fx * (1 - fy)
         + values[i0, j0 + 1] * (1 - fx) * fy
         + values[i0 + 1, j0 + 1] * fx * fy)
    return np.where(inside, v, oob_value)


def solve_value_grid(sys: SystemModel, h_s, h_b_list, spec: GridSpec,
                     control_samples, boundary_margin=0.1, verbose=False):
    """Backward value recursion; returns a ValueGrid.

    control_samples is a finite subset of the admissible controls (ZOH over
    each dt step). States stepping outside the grid box are scored with the
    unsafe-side clamp min(h_s at the clamped point, -boundary_margin), which
    cannot inflate the zero-superlevel set as long as that set lies strictly
    inside the box.
    """
    pts = spec.points()
    hs_grid = h_s(pts)
    w = np.max(np.stack([hb(pts) for hb in h_b_list], axis=-1), axis=-1)
    steps = int(round(spec.horizon_T / spec.dt))
    controls = np.atleast_2d(np.asarray(control_samples, dtype=float))
    if controls.shape[0] == 1 and controls.shape[1] != sys.m:
        controls = controls.T
    f_pts = sys.f(pts)
    g_pts = sys.g(pts)
    # Destination points are control-independent in x: precompute per control.
    dests = [pts + spec.dt * (f_pts + g_pts @ u) for u in controls]
    oob_penalties = [np.minimum(h_s(np.clip(dest, spec.lower, spec.upper)),
                                -abs(boundary_margin)) for dest in dests]
    for step in range(steps):
        w_field = w.reshape(spec.shape)
        best = None
        for dest, oob in zip(dests, oob_penalties):
            cand = _bilinear(w_field, spec, dest, 0.0)
            inside = np.all((dest >= spec.lower) & (dest <= spec.upper), axis=-1)
            cand = np.where(inside, cand, oob)
            best = cand if best is None else np.maximum(best, cand)
        w = np.minimum(hs_grid, best)
        if verbose and step % 20 == 0:
            print(f"  sweep {step}/{steps}")
    values = np.minimum(hs_grid, w).reshape(spec.shape)
    return ValueGrid(values=values, spec=spec)


def query_value(grid: ValueGrid, x):
    """Bilinear interpolation at x; x must lie inside the grid box."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all((x >= grid.spec.lower) & (x <= grid.spec.upper)):
        raise ValueError("query point outside the value grid box")
    v = _bilinear(grid.values, grid.spec, x, np.nan)
    return v[0] if v.size == 1 else v


def interpolation_error_bound(grid: ValueGrid):
    """Measured one-cell interpolation error: rebuild odd nodes from the even subgrid.

    The returned delta bounds how far bilinear interpolation can stray from
    the stored field at one-cell scale; containment sweeps use it as the
    tolerance on V.
    """
    v = grid.values
    coarse = v[::2, ::2]
    ni, nj = coarse.shape
    # Interpolated values at the fine nodes covered by the coarse cells.
    fi = np.linspace(0, ni - 1, 2 * ni - 1)
    fj = np.linspace(0, nj - 1, 2 * nj - 1)
    i0 = np.clip(fi.astype(int), 0, ni - 2)
    j0 = np.clip(fj.astype(int), 0, nj - 2)
    fx = (fi - i0)[:, None]
    fy = (fj - j0)[None, :]
    interp = (coarse[i0][:, j0] * (1 - fx) * (1 - fy)
              + coarse[i0 + 1][:, j0] * fx * (1 - fy)
              + coarse[i0][:, j0 + 1] * (1 - fx) * fy
              + coarse[i0 + 1][:, j0 + 1] * fx * fy)
    fine = v[: 2 * ni - 1, : 2 * nj - 1]
    return float(np.max(np.abs(interp - fine)))


def save_value_grid(csv_path, sidecar_path, grid: ValueGrid):
    pts = grid.spec.points()
    vals = grid.values.reshape(-1)
    with open(csv_path, "w") as fh:
        fh.write("x1,x2,V\n")
        for (x1, x2), v in zip(pts, vals):
            fh.write(f"{x1!r},{x2!r},{v!r}\n")
    with open(sidecar_path, "w") as fh:
        fh.write(grid.spec.to_json())


def load_value_grid(csv_path, sidecar_path):
    with open(sidecar_path) as fh:
        spec = GridSpec.from_json(fh.read())
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1)
    return ValueGrid(values=data[:, 2].reshape(spec.shape), spec=spec)
