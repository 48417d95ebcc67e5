"""Stationary potential for a non-flat background: ``Δφ = e^φ - ρ̄``.

Two geometries: radial ℝ³ (``φ'' + 2φ'/r`` on ``[0, R]`` with ``φ'(0) = 0``
and ``φ(R) = 0``) and the periodic interval ``[0, 2π)``. Both are
second-order finite differences solved by Newton's method on the sparse
operator ``Δ - diag(e^φ)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

GEOMETRIES = ("radial", "torus")
SMALLNESS = 0.5


class SmallnessError(ValueError):
    pass


class NewtonDivergence(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class ProfileGrid:
    geometry: str
    points: int
    radius: float = 20.0  # far-field cutoff R (radial only)

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"geometry must be one of {GEOMETRIES}")
        if self.points < 8:
            raise ValueError("need at least 8 grid points")

    @property
    def x(self) -> np.ndarray:
        if self.geometry == "radial":
            return np.linspace(0.0, self.radius, self.points)
        return 2 * math.pi * np.arange(self.points) / self.points

    @property
    def h(self) -> float:
        x = self.x
        return float(x[1] - x[0])

    def laplacian(self) -> sp.csr_matrix:
        """Discrete Laplacian on the unknowns (radial: all nodes but ``r = R``)."""
        h, m = self.h, self.points
        if self.geometry == "torus":
            main = -2.0 * np.ones(m)
            off = np.ones(m - 1)
            D = sp.diags([off, main, off], [-1, 0, 1], shape=(m, m), format="lil")
            D[0, m - 1] = D[m - 1, 0] = 1.0
            return (D / h**2).tocsr()
        r = self.x[:-1]
        n = len(r)
        lower = np.zeros(n - 1)
        upper = np.zeros(n - 1)
        main = -2.0 * np.ones(n) / h**2
        ri = r[1:]
        lower[:] = (1.0 - h / ri) / h**2
        upper[1:] = (1.0 + h / ri[:-1]) / h**2
        # r = 0: Δφ = 3 φ'' with the even extension φ_{-1} = φ_1
        main[0] = -6.0 / h**2
        upper[0] = 6.0 / h**2
        # φ_n = φ(R) = 0 drops out of the last row
        return sp.diags([lower, main, upper], [-1, 0, 1], format="csr")


@dataclass
class StationaryProfile:
    grid: ProfileGrid
    phi: np.ndarray  # on grid.x (radial includes φ(R) = 0)
    rho_bar: np.ndarray
    residual: float
    history: list = field(default_factory=list)

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.phi)))

    def csv_rows(self):
        yield ("x", "phi", "rho_bar")
        for row in zip(self.grid.x, self.phi, self.rho_bar):
            yield tuple(float(v) for v in row)


def _sample(rho_spec, grid: ProfileGrid) -> np.ndarray:
    if callable(rho_spec):
        return np.asarray(rho_spec(grid.x), dtype=float)
    arr = np.asarray(rho_spec, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.points, float(arr))
    if arr.shape != (grid.points,):
        raise ValueError(f"rho_bar samples must have shape ({grid.points},)")
    return arr


def bump(eps: float, width: float = 1.0, center: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
    """``ρ̄ = 1 + ε exp(-(x - center)²/width²)``; on the torus the bump is centred at π."""
    return lambda x: 1.0 + eps * np.exp(-((x - center) / width) ** 2)


def solve_stationary(rho_spec, grid: ProfileGrid, tol: float = 1e-10, max_iter: int = 30,
                     smallness: float = SMALLNESS, initial: np.ndarray | None = None) -> StationaryProfile:
    """Newton iteration for ``Δφ = e^φ - ρ̄``; ``history`` holds the residual after every step."""
    rho = _sample(rho_spec, grid)
    dev = float(np.max(np.abs(rho - 1.0)))
    if dev > smallness:
        raise SmallnessError(f"‖ρ̄ - 1‖_∞ = {dev:.3g} exceeds the smallness threshold {smallness:g}")
    if np.any(rho <= 0):
        raise SmallnessError("ρ̄ must be positive")
    D = grid.laplacian()
    inner = slice(0, D.shape[0])
    r = rho[inner]
    phi = np.zeros(D.shape[0]) if initial is None else np.array(initial, dtype=float)[inner]

    def F(p):
        return D @ p - np.exp(p) + r

    res = float(np.max(np.abs(F(phi))))
    history = [res]
    for _ in range(max_iter):
        if res <= tol:
            break
        J = (D - sp.diags(np.exp(phi))).tocsc()
        phi = phi - spla.spsolve(J, F(phi))
        res = float(np.max(np.abs(F(phi))))
        history.append(res)
        if not np.isfinite(res) or res > 1e3 * history[0] + 1.0:
            raise NewtonDivergence(f"Newton diverged, last residual {res:.3e}", history)
    if res > tol:
        raise NewtonDivergence(f"Newton stalled at residual {res:.3e} > {tol:g}", history)
    full = np.append(phi, 0.0) if grid.geometry == "radial" else phi
    return StationaryProfile(grid, full, rho, res, history)


def linearized_solution(rho_spec, grid: ProfileGrid) -> np.ndarray:
    """Solution of ``(Δ - 1)φ = 1 - ρ̄``, the second Newton start."""
    rho = _sample(rho_spec, grid)
    D = grid.laplacian()
    n = D.shape[0]
    phi = spla.spsolve((D - sp.eye(n)).tocsc(), 1.0 - rho[:n])
    return np.append(phi, 0.0) if grid.geometry == "radial" else phi


def newton_contraction(history: list, below: float = 1e-2) -> float:
    """Largest ``res_{j+1} / res_j²`` once ``res_j < below`` (above roundoff)."""
    ratios = [b / a**2 for a, b in zip(history, history[1:]) if a < below and a > 1e-13 and b > 1e-15]
    return max(ratios, default=0.0)


def weighted_sup_norm(profile: StationaryProfile | np.ndarray, m: int, theta: float,
                      grid: ProfileGrid | None = None) -> float:
    """``sup (1+|x|)^θ Σ_{k≤m} |∂^k g|`` with second-order difference derivatives.

    For radial profiles ``|x| = r`` and the derivatives are radial; on the torus
    ``|x|`` is the periodic distance to ``0``.
    """
    if m < 0 or m > 2:
        raise ValueError(f"m = {m} is beyond the finite-difference accuracy of the profile grid (m ≤ 2)")
    if isinstance(profile, StationaryProfile):
        g, grid = profile.phi, profile.grid
    else:
        g = np.asarray(profile, dtype=float)
        if grid is None:
            raise ValueError("a grid is required for raw samples")
    x = grid.x
    h = grid.h
    if grid.geometry == "torus":
        dist = np.minimum(x, 2 * math.pi - x)
        d1 = (np.roll(g, -1) - np.roll(g, 1)) / (2 * h)
        d2 = (np.roll(g, -1) - 2 * g + np.roll(g, 1)) / h**2
    else:
        dist = x
        d1 = np.gradient(g, h, edge_order=2)
        d2 = np.gradient(d1, h, edge_order=2)
    total = np.abs(g)
    if m >= 1:
        total = total + np.abs(d1)
    if m >= 2:
        total = total + np.abs(d2)
    return float(np.max((1 + dist) ** theta * total))


@dataclass
class ScalingReport:
    eps: tuple
    sups: tuple
    ratio: float
    target: float
    tolerance: float
    residuals: tuple
    contraction: float
    constants: dict
    uniqueness_gap: float
    cutoff_sensitivity: float
    passed: bool

    def summary(self) -> dict:
        from dataclasses import asdict

        return {"kind": "stationary", **asdict(self)}


def scaling_study(geometry: str = "radial", eps: tuple = (1e-3, 5e-4), points: int = 801, radius: float = 20.0,
                  width: float = 1.0, tol: float = 1e-10, tolerance: float = 0.1, m: int = 2,
                  theta: float = 1.0) -> ScalingReport:
    """Halving ``‖ρ̄ - 1‖`` should halve ``‖φ‖_∞``; also reports ``C`` in the weighted bound."""
    grid = ProfileGrid(geometry, points, radius)
    center = math.pi if geometry == "torus" else 0.0
    profs = [solve_stationary(bump(e, width, center), grid, tol) for e in eps]
    sups = tuple(p.sup for p in profs)
    ratio = sups[0] / sups[1]
    target = eps[0] / eps[1]
    # ‖φ‖ ≤ C ‖ρ̄ - 1‖ in the weighted norm, at this grid and a refined one
    consts = {}
    for label, pts in (("base", points), ("refined", 2 * points - 1)):
        gr = ProfileGrid(geometry, pts, radius)
        vals = []
        for e in eps:
            p = solve_stationary(bump(e, width, center), gr, tol)
            vals.append(weighted_sup_norm(p, m, theta) / weighted_sup_norm(p.rho_bar - 1.0, m, theta, gr))
        consts[label] = max(vals)
    # uniqueness: other Newton starts land on the same profile. The first step
    # from 0 is the linearized solution itself, so its reflection is tried too.
    lin = linearized_solution(bump(eps[0], width, center), grid)
    gap = 0.0
    for start in (lin, -lin):
        alt = solve_stationary(bump(eps[0], width, center), grid, tol, initial=start)
        gap = max(gap, float(np.max(np.abs(alt.phi - profs[0].phi))))
    # cutoff sensitivity (radial): solve on [0, 1.5R] and compare on [0, R]
    sens = 0.0
    if geometry == "radial":
        h = grid.h
        big = ProfileGrid("radial", int(round(1.5 * radius / h)) + 1, 1.5 * radius)
        pb = solve_stationary(bump(eps[0], width), big, tol)
        sens = float(np.max(np.abs(pb.phi[: points] - profs[0].phi)))
    contraction = max(newton_contraction(p.history) for p in profs)
    passed = abs(ratio / target - 1.0) <= tolerance and all(p.residual <= tol for p in profs)
    return ScalingReport(tuple(eps), sups, float(ratio), float(target), tolerance,
                         tuple(p.residual for p in profs), float(contraction), consts, gap, sens, bool(passed))
