"""Velocity-space discretization and the macro-micro decomposition.

Slices hold values of the perturbation ``u`` (not ``f``) at the grid nodes.
Integrals ``∫ g dξ`` are evaluated as ``sum(grid.weights * g)``; on the
Gauss-Hermite grid the rule is exact whenever ``g / M`` is a polynomial of
per-axis degree below ``2 * order``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

STRATEGIES = ("gauss_hermite_tensor", "uniform_truncated")

# half-width of the uniform velocity box; Gaussian tails past it are < 1e-14
UNIFORM_HALF_WIDTH = 9.0

#: moments ⟨g, M⟩ of the normalized 3D Maxwellian used as the reference table
MAXWELLIAN_MOMENT_TABLE = {
    "1": (lambda xi: np.ones(len(xi)), 1.0),
    "xi_j^2": (lambda xi: xi[:, 0] ** 2, 1.0),
    "|xi|^2": (lambda xi: np.sum(xi**2, axis=1), 3.0),
    "xi_j^2 xi_m^2": (lambda xi: xi[:, 0] ** 2 * xi[:, 1] ** 2, 1.0),
    "xi_j^4": (lambda xi: xi[:, 0] ** 4, 3.0),
    "|xi|^2 xi_j^2": (lambda xi: np.sum(xi**2, axis=1) * xi[:, 0] ** 2, 5.0),
    "|xi|^4": (lambda xi: np.sum(xi**2, axis=1) ** 2, 15.0),
    "|xi|^4 xi_j^2": (lambda xi: np.sum(xi**2, axis=1) ** 2 * xi[:, 0] ** 2, 35.0),
    "|xi|^6": (lambda xi: np.sum(xi**2, axis=1) ** 3, 105.0),
}


class GridError(ValueError):
    pass


def maxwellian(xi: np.ndarray) -> np.ndarray:
    """Normalized Maxwellian ``(2π)^{-n/2} exp(-|ξ|²/2)`` at rows of ``xi``."""
    xi = np.atleast_2d(xi)
    n = xi.shape[1]
    return np.exp(-0.5 * np.sum(xi**2, axis=1)) / (2.0 * np.pi) ** (n / 2)


def hermite_functions(y: np.ndarray, count: int) -> np.ndarray:
    """Orthonormal Hermite functions ``ψ_0..ψ_{count-1}`` at points ``y``.

    ``ψ_n(y) = He_n(y) e^{-y²/4} / sqrt(n! sqrt(2π))``, so that ``√M`` is a
    multiple of ``ψ_0``. Returns an array of shape ``y.shape + (count,)``.
    The three-term recurrence keeps the Gaussian factor inside, which stays
    finite far outside the node range.
    """
    y = np.asarray(y, dtype=float)
    out = np.empty(y.shape + (count,))
    out[..., 0] = np.exp(-0.25 * y**2) / (2.0 * np.pi) ** 0.25
    if count > 1:
        out[..., 1] = y * out[..., 0]
    for n in range(1, count - 1):
        out[..., n + 1] = (y * out[..., n] - np.sqrt(n) * out[..., n - 1]) / np.sqrt(n + 1)
    return out


@dataclass(frozen=True, eq=False)
class VelocityGrid:
    """Tensor-product velocity grid with Maxwellian structure.

    ``weights`` integrate ``∫ · dξ``; ``maxwellian`` and ``weight_fn`` hold
    ``M(ξ_i)`` and ``w(ξ_i) = (1+|ξ_i|²)^{1/2}``.
    """

    dim: int
    order: int
    strategy: str
    nodes: np.ndarray
    weights: np.ndarray
    maxwellian: np.ndarray
    weight_fn: np.ndarray
    nodes_1d: np.ndarray
    weights_1d: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return (len(self.nodes_1d),) * self.dim

    @cached_property
    def sqrt_m(self) -> np.ndarray:
        return np.sqrt(self.maxwellian)

    @cached_property
    def speed2(self) -> np.ndarray:
        return np.sum(self.nodes**2, axis=1)

    @cached_property
    def sqrt_w(self) -> np.ndarray:
        """``sqrt(weights)``: maps node values to coordinates with identity Gram matrix."""
        return np.sqrt(self.weights)

    def integrate(self, g: np.ndarray) -> np.ndarray:
        """``∫ g dξ`` along the last axis of ``g``."""
        return np.asarray(g) @ self.weights

    def inner(self, u: np.ndarray, v: np.ndarray) -> complex:
        """Complex inner product ``(u | v) = ∫ u conj(v) dξ``."""
        return np.sum(self.weights * u * np.conj(v), axis=-1)

    def norm(self, u: np.ndarray) -> float:
        return np.sqrt(np.real(self.inner(u, u)))

    def moment(self, g: np.ndarray) -> float:
        """``⟨g, M⟩`` for node values ``g``."""
        return float(self.integrate(g * self.maxwellian))

    def describe(self) -> dict:
        return {"dim": self.dim, "order": self.order, "strategy": self.strategy}

    def to_json(self) -> str:
        return json.dumps(self.describe(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "VelocityGrid":
        d = json.loads(text)
        return build_grid(d["dim"], d["order"], d["strategy"])

    def same_as(self, other: "VelocityGrid") -> bool:
        return self is other or self.describe() == other.describe()

    # Hermite machinery; only meaningful on the Gauss-Hermite grid.

    @cached_property
    def hermite_transform_1d(self) -> np.ndarray:
        """Orthogonal map from sqrt(W)-scaled node values to Hermite coefficients."""
        self._require_hermite()
        psi = hermite_functions(self.nodes_1d, len(self.nodes_1d))
        return (psi * np.sqrt(self.weights_1d)[:, None]).T

    def interpolation_matrix_1d(self, y: np.ndarray) -> np.ndarray:
        """Rows evaluating the spectral interpolant of 1D node values at ``y``.

        Exact for ``p(ξ)√M`` with ``deg p < order``; returns ``y.shape + (order,)``.
        """
        m = len(self.nodes_1d)
        G = self.hermite_transform_1d * np.sqrt(self.weights_1d)[None, :]
        return hermite_functions(y, m) @ G

    @cached_property
    def derivative_matrix_1d(self) -> np.ndarray:
        """Nodal ∂_ξ along one axis.

        Spectral on the Hermite grid (skew-adjoint in the weighted inner
        product); second-order centered differences on the uniform grid.
        """
        m = len(self.nodes_1d)
        if self.strategy == "gauss_hermite_tensor":
            n = np.arange(1, m)
            Dc = np.zeros((m, m))
            # ψ_n' = (√n/2) ψ_{n-1} - (√(n+1)/2) ψ_{n+1}, top mode truncated
            Dc[n - 1, n] = np.sqrt(n) / 2.0
            Dc[n, n - 1] = -np.sqrt(n) / 2.0
            T = self.hermite_transform_1d
            s = np.sqrt(self.weights_1d)
            return (T.T @ Dc @ T) * (s[None, :] / s[:, None])
        h = self.nodes_1d[1] - self.nodes_1d[0]
        D = (np.eye(m, k=1) - np.eye(m, k=-1)) / (2.0 * h)
        return D

    def derivative(self, u: np.ndarray, axis: int) -> np.ndarray:
        """``∂_{ξ_axis} u`` for node values ``u`` (leading batch axes allowed)."""
        D = self.derivative_matrix_1d
        batch = u.shape[:-1]
        t = u.reshape(batch + self.shape)
        t = np.moveaxis(np.tensordot(t, D, axes=([len(batch) + axis], [1])), -1, len(batch) + axis)
        return t.reshape(batch + (self.size,))

    def _require_hermite(self):
        if self.strategy != "gauss_hermite_tensor":
            raise GridError("operation needs the gauss_hermite_tensor grid")


def build_grid(dim: int, order: int, strategy: str = "gauss_hermite_tensor") -> VelocityGrid:
    """Tensor velocity grid of the given per-axis order.

    For ``uniform_truncated`` the box ``[-9, 9]`` carries ``3*order + 1``
    equispaced trapezoid nodes per axis.
    """
    if dim not in (1, 2, 3):
        raise GridError(f"dim must be 1, 2 or 3, got {dim}")
    if int(order) != order or order < 4:
        raise GridError(f"order must be an integer >= 4 to resolve |ξ|⁴ moments, got {order}")
    if strategy not in STRATEGIES:
        raise GridError(f"unknown strategy {strategy!r}")
    order = int(order)
    if strategy == "gauss_hermite_tensor":
        x, wg = np.polynomial.hermite_e.hermegauss(order)
        # ∫ g dx = Σ wg_i e^{x_i²/2} g(x_i) exactly when g e^{x²/2} is a polynomial
        w1 = wg * np.exp(0.5 * x**2)
    else:
        x = np.linspace(-UNIFORM_HALF_WIDTH, UNIFORM_HALF_WIDTH, 3 * order + 1)
        w1 = np.full_like(x, x[1] - x[0])
        w1[[0, -1]] *= 0.5
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.ones(len(nodes))
    wgrids = np.meshgrid(*([w1] * dim), indexing="ij")
    for g in wgrids:
        weights = weights * g.ravel()
    return VelocityGrid(
        dim=dim,
        order=order,
        strategy=strategy,
        nodes=nodes,
        weights=weights,
        maxwellian=maxwellian(nodes),
        weight_fn=np.sqrt(1.0 + np.sum(nodes**2, axis=1)),
        nodes_1d=x,
        weights_1d=w1,
    )


def moment_table_errors(grid: VelocityGrid) -> dict[str, float]:
    """Absolute errors of the Maxwellian moment table on a 3D grid."""
    if grid.dim != 3:
        raise GridError("the moment table is stated for dim = 3")
    return {name: abs(grid.moment(f(grid.nodes)) - ref) for name, (f, ref) in MAXWELLIAN_MOMENT_TABLE.items()}


def check_grid(grid: VelocityGrid, tol: float = 1e-10) -> dict[str, float]:
    """Residuals of the grid invariants; raises if any exceeds ``tol``."""
    n = grid.dim
    res = {
        "mass": abs(grid.moment(np.ones(grid.size)) - 1.0),
        "second": max(abs(grid.moment(grid.nodes[:, j] ** 2) - 1.0) for j in range(n)),
        "fourth": abs(grid.moment(grid.speed2**2) - n * (n + 2)),
    }
    if np.any(grid.weights <= 0):
        raise GridError("non-positive quadrature weight")
    bad = {k: v for k, v in res.items() if v > tol}
    if bad:
        raise GridError(f"moment check failed: {bad}")
    return res


# ---------------------------------------------------------------------------
# macroscopic quantities and projections


@dataclass(frozen=True)
class MacroState:
    a: complex
    b: np.ndarray
    c: complex

    @property
    def density(self):
        """``a + n c``, equal to ``∫ √M u dξ``."""
        return self.a + len(self.b) * self.c


@dataclass(frozen=True)
class HighMoments:
    A: np.ndarray
    B: np.ndarray


class MacroFunctionals:
    """Linear functionals ``u ↦ ∫ φ u dξ`` as coefficient rows (cached per grid).

    Every row is already multiplied by the quadrature weights, so a functional
    is evaluated as ``row @ u`` (batched over leading axes of ``u``).
    """

    def __init__(self, grid: VelocityGrid):
        self.grid = grid
        n = grid.dim
        xi, s2, sm, W = grid.nodes, grid.speed2, grid.sqrt_m, grid.weights
        self.a = 0.5 * ((n + 2) - s2) * sm * W
        self.b = (xi * (sm * W)[:, None]).T  # (n, N)
        self.c = (s2 - n) * sm * W / (2 * n)
        self.rho = sm * W
        self.A = np.empty((n, n, grid.size))
        for j in range(n):
            for m in range(n):
                self.A[j, m] = (xi[:, j] * xi[:, m] - 1.0) * sm * W
        self.B = ((s2 - (n + 2))[:, None] * xi * (sm * W)[:, None]).T
        # P u = basis.T @ coeffs with coeffs = (a, b_1..b_n, c)
        self.coef_rows = np.vstack([self.a[None], self.b, self.c[None]])
        self.coef_basis = np.vstack([sm[None], (xi * sm[:, None]).T, (s2 * sm)[None]])


_FUNCTIONALS: dict[int, MacroFunctionals] = {}


def functionals(grid: VelocityGrid) -> MacroFunctionals:
    key = id(grid)
    f = _FUNCTIONALS.get(key)
    if f is None or f.grid is not grid:
        f = MacroFunctionals(grid)
        _FUNCTIONALS[key] = f
    return f


def macro_coefficients(grid: VelocityGrid, u: np.ndarray) -> np.ndarray:
    """``(a, b_1..b_n, c)`` stacked on the last axis; batches over leading axes."""
    _check(grid, u)
    return u @ functionals(grid).coef_rows.T


def macro_project(grid: VelocityGrid, u: np.ndarray) -> MacroState:
    coef = macro_coefficients(grid, np.asarray(u))
    n = grid.dim
    return MacroState(a=coef[..., 0], b=coef[..., 1 : n + 1], c=coef[..., n + 1])


PROJECTIONS = ("P", "P0", "P1", "I_minus_P", "I_minus_P1")


def project(grid: VelocityGrid, u: np.ndarray, which: str = "P") -> np.ndarray:
    """Apply ``P``, ``P0``, ``P1``, ``I-P`` or ``I-P1`` to node values ``u``."""
    u = np.asarray(u)
    F = functionals(grid)
    coef = macro_coefficients(grid, u)
    n = grid.dim
    if which in ("P", "I_minus_P"):
        Pu = coef @ F.coef_basis
        return Pu if which == "P" else u - Pu
    rho = coef[..., 0] + n * coef[..., n + 1]
    P0u = rho[..., None] * grid.sqrt_m
    if which == "P0":
        return P0u
    if which in ("P1", "I_minus_P1"):
        P1u = coef @ F.coef_basis - P0u
        return P1u if which == "P1" else u - P1u
    raise ValueError(f"unknown projection {which!r}")


def high_moments(grid: VelocityGrid, u: np.ndarray) -> HighMoments:
    """``A_jm(u) = ⟨(ξ_jξ_m - 1)√M, u⟩`` and ``B_j(u) = ⟨(|ξ|² - (n+2)) ξ_j √M, u⟩``."""
    _check(grid, u)
    F = functionals(grid)
    A = np.einsum("jmi,...i->...jm", F.A, u)
    B = np.einsum("ji,...i->...j", F.B, u)
    return HighMoments(A=A, B=B)


def weighted_norm(grid: VelocityGrid, u: np.ndarray, power: float = 0, nu: np.ndarray | None = None) -> float:
    """``(∫ w^power |u|² dξ)^{1/2}``, with ``ν`` in place of ``w`` when given."""
    if power not in (-1, 0, 1, 2):
        raise ValueError("power must be one of -1, 0, 1, 2")
    base = grid.weight_fn if nu is None else nu
    return float(np.sqrt(np.sum(grid.weights * base**power * np.abs(u) ** 2, axis=-1)))


@dataclass(frozen=True)
class BasisSet:
    """Orthonormal collision invariants ``e_0..e_{n+1}`` and the spanning set."""

    invariants: np.ndarray  # rows e_j (values of e_j, not e_j √M)
    spanning: np.ndarray  # rows √M, ξ_j √M, |ξ|² √M

    def gram(self, grid: VelocityGrid) -> np.ndarray:
        E = self.invariants * grid.sqrt_m
        return (E * grid.weights) @ E.T


def basis_set(grid: VelocityGrid) -> BasisSet:
    n = grid.dim
    inv = np.vstack([np.ones(grid.size), grid.nodes.T, (grid.speed2 - n) / np.sqrt(2 * n)])
    return BasisSet(invariants=inv, spanning=functionals(grid).coef_basis)


def _check(grid: VelocityGrid, u: np.ndarray):
    if np.shape(u)[-1] != grid.size:
        raise GridError(f"slice has {np.shape(u)[-1]} entries, grid has {grid.size} nodes")
