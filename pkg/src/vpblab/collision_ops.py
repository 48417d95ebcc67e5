"""Linearized collision operators and the bilinear collision term.

Two backends share one interface:

* ``hard_sphere``: the linearized hard-sphere operator ``L = -ν + K`` in three
  velocity dimensions, assembled as a dense matrix.
* ``bgk_surrogate``: ``L_s u = -{I-P}(ν {I-P}u)`` with ``ν = w``, available in
  every dimension. It is a relaxation model, not a physical collision law.

Hard-sphere quadrature. The collision sphere is parametrized in a frame
aligned with the relative velocity ``v = ξ - ξ_*``, so ``|v·ω| = |v|μ`` and the
μ-integral uses Gauss-Legendre nodes on ``[0, 1]``; the hemisphere is doubled
because ``ω`` and ``-ω`` give the same post-collision pair. Post-collision
values are read off the Hermite-function interpolant of the slice, which is
exact on the collision invariants. ``ν`` at the nodes uses the same ξ_* rule
as ``K``, so the loss and gain terms cancel on the invariants to roundoff.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist
from scipy.special import erf

from .velocity_space import GridError, VelocityGrid, basis_set, functionals, maxwellian, project

MAX_DENSE_NODES = 20_000
SYMMETRY_FAILURE = 1e-3
_CHUNK = 20_000


class AssemblyError(RuntimeError):
    pass


class CoercivityError(RuntimeError):
    pass


@dataclass(eq=False)
class CollisionBackend:
    """Collision operator on a velocity grid.

    ``k_action`` is the dense matrix of ``K`` in node values (``None`` for the
    surrogate, which acts matrix-free). ``report`` collects assembly
    diagnostics such as symmetrization deviation and kernel defect.
    """

    kind: str
    grid: VelocityGrid
    nu: np.ndarray
    k_action: np.ndarray | None = None
    certified_coercivity: float | None = None
    angular_order: int | None = None
    report: dict = field(default_factory=dict)

    def apply_L(self, u: np.ndarray) -> np.ndarray:
        return apply_L(self, u)

    def matrix(self) -> np.ndarray:
        """Dense ``L`` acting on node values (``Lu = L @ u``)."""
        if self.kind == "hard_sphere":
            return self.k_action - np.diag(self.nu)
        R = _complement_projector(self.grid)
        return -R @ (self.nu[:, None] * R)

    def summary(self) -> dict:
        g = self.grid
        ratio = self.nu / g.weight_fn
        out = {
            "kind": self.kind,
            "grid": g.describe(),
            "nu_over_w": [float(ratio.min()), float(ratio.max())],
            "coercivity": self.certified_coercivity,
        }
        out.update(self.report)
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, default=float)


# ---------------------------------------------------------------------------
# helpers


def _complement_projector(grid: VelocityGrid) -> np.ndarray:
    """Nodal matrix of ``I - P``."""
    F = functionals(grid)
    return np.eye(grid.size) - F.coef_basis.T @ F.coef_rows


def _check_slice(backend: CollisionBackend, u: np.ndarray):
    if np.shape(u)[-1] != backend.grid.size:
        raise GridError(f"slice has {np.shape(u)[-1]} entries, backend grid has {backend.grid.size} nodes")


def _hemisphere(order: int):
    """Nodes ``μ`` in [0,1] and azimuths with weights for ``∫_{S²} |v·ω| · dω / |v|``."""
    mu, wmu = np.polynomial.legendre.leggauss(order)
    mu, wmu = 0.5 * (mu + 1.0), 0.5 * wmu
    nphi = 2 * order
    phi = 2.0 * np.pi * (np.arange(nphi) + 0.5) / nphi
    # 2 for the hemisphere, μ for |v·ω| / |v|
    w = 2.0 * (wmu * mu)[:, None] * np.full(nphi, 2.0 * np.pi / nphi)[None, :]
    return mu, phi, w


def _frames(vhat: np.ndarray):
    """Two unit vectors completing each row of ``vhat`` to an orthonormal frame."""
    a = np.where(np.abs(vhat[:, [0]]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    e2 = np.cross(vhat, a)
    e2 /= np.linalg.norm(e2, axis=1)[:, None]
    return e2, np.cross(vhat, e2)


def _sphere_directions(mu, phi, vhat):
    """Unit vectors ω for every (μ, φ, row of vhat); shape ``(nμ, nφ, J, 3)``."""
    e2, e3 = _frames(vhat)
    st = np.sqrt(1.0 - mu**2)
    return (
        mu[:, None, None, None] * vhat[None, None]
        + (st[:, None] * np.cos(phi))[:, :, None, None] * e2[None, None]
        + (st[:, None] * np.sin(phi))[:, :, None, None] * e3[None, None]
    )


def _interp_rows(grid: VelocityGrid, pts: np.ndarray):
    return [grid.interpolation_matrix_1d(pts[:, d]) for d in range(3)]


def accumulate_rows(grid: VelocityGrid, pts: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """``Σ_p coef_p I(pts_p)``: the row vector of a weighted sum of point evaluations."""
    m = grid.order
    out = np.zeros(m**3)
    for s in range(0, len(coef), _CHUNK):
        p, c = pts[s : s + _CHUNK], coef[s : s + _CHUNK]
        Ix, Iy, Iz = _interp_rows(grid, p)
        T = ((c[:, None] * Ix)[:, :, None] * Iy[:, None, :]).reshape(len(c), -1)
        out += (T.T @ Iz).ravel()
    return out


def interpolate(grid: VelocityGrid, u: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Values of the Hermite interpolant of node values ``u`` at ``pts``."""
    m = grid.order
    U = u.reshape(m, m, m)
    out = np.empty(len(pts), dtype=np.result_type(u, float))
    for s in range(0, len(pts), _CHUNK):
        Ix, Iy, Iz = _interp_rows(grid, pts[s : s + _CHUNK])
        A = np.einsum("pa,abc->pbc", Ix, U)
        A = np.einsum("pbc,pb->pc", A, Iy)
        out[s : s + _CHUNK] = np.einsum("pc,pc->p", A, Iz)
    return out


def _signed_permutation_orbits(m: int):
    """Orbit representatives of the grid under coordinate permutations and reflections.

    Returns the multi-indices, their folded form and the sorted representatives.
    """
    idx = np.array(list(itertools.product(range(m), repeat=3)))
    folded = np.minimum(idx, m - 1 - idx)
    reps = sorted({tuple(np.sort(f)) for f in folded})
    return idx, folded, reps


# ---------------------------------------------------------------------------
# collision frequency


def nu_hard_sphere_exact(r: np.ndarray) -> np.ndarray:
    """Closed-form ``ν(|ξ| = r) = 2π ∫ |ξ - ξ_*| M_* dξ_*`` (reference values)."""
    r = np.maximum(np.asarray(r, dtype=float), 1e-12)
    return 2.0 * np.pi * (np.sqrt(2.0 / np.pi) * np.exp(-0.5 * r**2) + (r + 1.0 / r) * erf(r / np.sqrt(2.0)))


def _distance_matrix(grid: VelocityGrid) -> np.ndarray:
    return cdist(grid.nodes, grid.nodes)


def _require_3d(grid: VelocityGrid):
    if grid.dim != 3:
        raise GridError("the hard-sphere kernel is three-dimensional; use the surrogate for dim != 3")
    grid._require_hermite()


def collision_frequency(grid: VelocityGrid, angular_order: int = 8) -> np.ndarray:
    """``ν(ξ_i)`` by product quadrature over ξ_* (grid rule) and ω (hemisphere rule)."""
    _require_3d(grid)
    if angular_order < 6:
        raise ValueError("angular_order must be >= 6")
    _, _, w = _hemisphere(angular_order)
    sphere = w.sum()  # equals 2π up to roundoff
    return sphere * (_distance_matrix(grid) @ (grid.weights * grid.maxwellian))


def collision_frequency_at(points: np.ndarray, angular_order: int = 8, radial_order: int = 64,
                           polar_order: int = 96) -> np.ndarray:
    """``ν`` at arbitrary velocities in relative-velocity coordinates.

    ``ξ_* = ξ - r v̂`` turns the integrand into the smooth function
    ``r³ M(ξ - r v̂)``; the polar axis of ``v̂`` is aligned with ``ξ`` and the
    ω-integral uses the hemisphere rule. Converges spectrally, unlike the
    grid rule, whose error at ``ξ = 0`` decays only algebraically.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    _, _, w = _hemisphere(angular_order)
    sphere = w.sum()
    ct, wct = np.polynomial.legendre.leggauss(polar_order)
    out = np.empty(len(pts))
    for n, x in enumerate(pts):
        s = np.linalg.norm(x)
        R = s + 10.0
        r, wr = np.polynomial.legendre.leggauss(radial_order)
        r, wr = 0.5 * R * (r + 1.0), 0.5 * R * wr
        # |ξ - r v̂|² with cosθ measured from ξ; the azimuth integrates to 2π
        d2 = s**2 + r[:, None] ** 2 - 2.0 * s * r[:, None] * ct[None, :]
        m = np.exp(-0.5 * d2) / (2.0 * np.pi) ** 1.5
        out[n] = sphere * 2.0 * np.pi * np.sum((wr * r**3)[:, None] * wct[None, :] * m)
    return out


# ---------------------------------------------------------------------------
# hard-sphere assembly


def _gain_row(grid: VelocityGrid, i: int, mu, phi, wang, dist_row) -> np.ndarray:
    """Row ``i`` of the gain operator ``2∫∫ |v·ω| √M_* √M'_* u' dω dξ_*``."""
    xi = grid.nodes
    js = np.nonzero(dist_row > 1e-12)[0]
    vn = dist_row[js]
    vhat = (xi[i] - xi[js]) / vn[:, None]
    om = _sphere_directions(mu, phi, vhat)  # (nμ, nφ, J, 3)
    vo = mu[:, None, None] * vn[None, None, :]  # v·ω
    xp = xi[i] - vo[..., None] * om
    xsp = xi[js][None, None] + vo[..., None] * om
    shape = om.shape[:3]
    msp = np.sqrt(maxwellian(xsp.reshape(-1, 3)).reshape(shape))
    c = 2.0 * wang[:, :, None] * vn[None, None, :] * msp * (grid.weights[js] * grid.sqrt_m[js])[None, None, :]
    keep = c.ravel() > 1e-300
    return accumulate_rows(grid, xp.reshape(-1, 3)[keep], c.ravel()[keep])


def _resolved_asymmetry(grid: VelocityGrid, S: np.ndarray) -> float:
    """Relative asymmetry of the scaled matrix on Hermite modes of per-axis degree ≤ order/2."""
    T = grid.hermite_transform_1d
    Q = np.kron(np.kron(T, T), T)
    C = Q @ S @ Q.T
    deg = np.max(np.array(list(itertools.product(range(grid.order), repeat=3))), axis=1)
    sel = deg <= grid.order // 2
    B = C[np.ix_(sel, sel)]
    return float(np.linalg.norm(B - B.T, 2) / np.linalg.norm(C, 2))


def assemble_hard_sphere(grid: VelocityGrid, angular_order: int = 8,
                         max_deviation: float = SYMMETRY_FAILURE) -> CollisionBackend:
    """Dense hard-sphere ``L = -ν + K`` on a three-dimensional Hermite grid.

    Steps: loss and gain parts of ``K`` by quadrature (only one row per orbit
    of the coordinate symmetry group is computed), symmetrization in the
    weighted inner product, then compression onto the microscopic subspace
    so that ``N`` is the exact discrete kernel. The report records the raw
    kernel defect, the kernel defect after symmetrization, and the
    symmetrization deviation on resolved modes and on the whole space.
    Assembly fails when the resolved deviation exceeds ``max_deviation``.
    """
    _require_3d(grid)
    if grid.size > MAX_DENSE_NODES:
        raise AssemblyError(f"{grid.size} nodes exceeds the dense limit {MAX_DENSE_NODES}")
    if angular_order < 6:
        raise ValueError("angular_order must be >= 6")
    t0 = time.perf_counter()
    m, N = grid.order, grid.size
    D = _distance_matrix(grid)
    mu, phi, wang = _hemisphere(angular_order)
    nu = collision_frequency(grid, angular_order)
    sm, W = grid.sqrt_m, grid.weights

    idx, folded, reps = _signed_permutation_orbits(m)
    rep_rows = {}
    for r in reps:
        i = int(np.ravel_multi_index(r, (m,) * 3))
        rep_rows[r] = _gain_row(grid, i, mu, phi, wang, D[i])
    K = np.empty((N, N))
    for n, (I, f) in enumerate(zip(idx, folded)):
        rank = np.argsort(np.argsort(f, kind="stable"), kind="stable")
        J = idx[:, rank]
        J = np.where((I != f)[None, :], m - 1 - J, J)
        K[n, np.ravel_multi_index(J.T, (m,) * 3)] = rep_rows[tuple(np.sort(f))]
    K -= 2.0 * np.pi * sm[:, None] * (sm * W)[None, :] * D  # loss term

    inv = basis_set(grid).invariants * sm
    L_raw = K - np.diag(nu)
    raw_defect = max(float(grid.norm(L_raw @ e) / grid.norm(e)) for e in inv)

    s = grid.sqrt_w
    S = s[:, None] * L_raw / s[None, :]
    full_dev = float(np.linalg.norm(S - S.T, 2) / np.linalg.norm(S, 2))
    resolved_dev = _resolved_asymmetry(grid, s[:, None] * K / s[None, :])
    if resolved_dev > max_deviation:
        raise AssemblyError(f"symmetrization deviation {resolved_dev:.3e} exceeds {max_deviation}")
    S = 0.5 * (S + S.T)
    E = inv * s
    sym_defect = max(float(np.linalg.norm(S @ e) / np.linalg.norm(e)) for e in E)
    Qe, _ = np.linalg.qr(E.T)
    Pi = np.eye(N) - Qe @ Qe.T
    S = Pi @ S @ Pi
    S = 0.5 * (S + S.T)
    L = S * (s[None, :] / s[:, None])
    report = {
        "angular_order": angular_order,
        "symmetrization_deviation": resolved_dev,
        "symmetrization_deviation_full": full_dev,
        "kernel_defect_raw": raw_defect,
        "kernel_defect_symmetrized": sym_defect,
        "orbit_representatives": len(reps),
        "assembly_seconds": time.perf_counter() - t0,
    }
    return CollisionBackend("hard_sphere", grid, nu, L + np.diag(nu), angular_order=angular_order, report=report)


def assemble_bgk(grid: VelocityGrid) -> CollisionBackend:
    """Relaxation surrogate ``L_s u = -{I-P}(w {I-P}u)``; coercivity constant 1."""
    return CollisionBackend("bgk_surrogate", grid, grid.weight_fn.copy(), None, certified_coercivity=1.0,
                            report={"coercivity_exact": 1.0})


def make_backend(kind: str, grid: VelocityGrid, angular_order: int = 8,
                 max_deviation: float = SYMMETRY_FAILURE) -> CollisionBackend:
    if kind == "hard_sphere":
        return assemble_hard_sphere(grid, angular_order, max_deviation)
    if kind == "bgk_surrogate":
        return assemble_bgk(grid)
    raise ValueError(f"unknown backend {kind!r}")


# ---------------------------------------------------------------------------
# actions


def apply_L(backend: CollisionBackend, u: np.ndarray) -> np.ndarray:
    _check_slice(backend, u)
    if backend.kind == "hard_sphere":
        return u @ backend.k_action.T - backend.nu * u
    g = backend.grid
    r = project(g, u, "I_minus_P")
    return -project(g, backend.nu * r, "I_minus_P")


def apply_gamma(backend: CollisionBackend, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear collision term.

    Surrogate: ``Γ_s(u, v) = {I-P}[ρ_u ν v]`` with ``ρ_u = ∫ √M u dξ``
    (non-physical; only bilinearity and microscopic range matter).

    Hard sphere: the symmetrized ``Γ(u,v) = ½ M^{-1/2}[Q(√M u, √M v) + Q(√M v, √M u)]``
    defined through its weak form
    ``½ ∫∫∫ |v·ω| √M u √M_* v_* (χ' + χ'_* - χ - χ_*)`` with ``χ = φ/√M``,
    so the discrete term conserves mass, momentum and energy exactly.
    """
    _check_slice(backend, u)
    _check_slice(backend, v)
    g = backend.grid
    if backend.kind == "bgk_surrogate":
        rho = np.asarray(u) @ functionals(g).rho
        return project(g, np.asarray(rho)[..., None] * backend.nu * v, "I_minus_P")
    u, v = np.broadcast_arrays(np.asarray(u), np.asarray(v))
    batch = u.shape[:-1]
    U, V = u.reshape(-1, g.size), v.reshape(-1, g.size)
    if np.isrealobj(U) and np.isrealobj(V):
        out = _gamma_hard_sphere(backend, U, V)
    else:
        # real bilinear pieces of the complex product
        Ur, Ui, Vr, Vi = U.real, U.imag, V.real, V.imag
        G = _gamma_hard_sphere(backend, np.vstack([Ur, Ui, Ur, Ui]), np.vstack([Vr, Vi, Vi, Vr]))
        G = G.reshape(4, -1, g.size)
        out = (G[0] - G[1]) + 1j * (G[2] + G[3])
    return out.reshape(batch + (g.size,))


def _gamma_hard_sphere(backend: CollisionBackend, U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Batched real hard-sphere Γ for rows of ``U`` and ``V``."""
    g = backend.grid
    xi, W, sm = g.nodes, g.weights, g.sqrt_m
    D = _distance_matrix(g)
    mu, phi, wang = _hemisphere(backend.angular_order or 8)
    sphere = wang.sum()
    FU, FV = U * (W * sm), V * (W * sm)
    # loss part: -½(u ν_v + v ν_u) with ν_f(ξ) = 2π ∫ |ξ-ξ_*| √M_* f_*
    out = -0.5 * sphere * (U * (FV @ D) + V * (FU @ D))
    ws = W * sm
    amp = ws[:, None] * ws[None, :]
    pairs = np.argwhere((amp > 1e-18 * amp.max()) & (D > 0))
    m = g.order
    acc = np.zeros((len(U), m, m, m))
    step = max(1, _CHUNK // (len(mu) * len(phi)))
    for s in range(0, len(pairs), step):
        pi, pj = pairs[s : s + step].T
        vn = D[pi, pj]
        om = _sphere_directions(mu, phi, (xi[pi] - xi[pj]) / vn[:, None])
        vo = mu[:, None, None] * vn[None, None, :]
        geo = 0.5 * wang[:, :, None] * vn[None, None, :]
        coef = (FU[:, pi] * FV[:, pj])  # (B, J)
        for pts in (xi[pi] - vo[..., None] * om, xi[pj] + vo[..., None] * om):
            pts = pts.reshape(-1, 3)
            c = (geo / np.sqrt(maxwellian(pts)).reshape(geo.shape)).reshape(-1, len(pi))  # (A, J)
            Ix, Iy, Iz = _interp_rows(g, pts)
            C = (c[None] * coef[:, None, :]).reshape(len(U), -1)  # (B, P)
            X = (Ix[:, :, None] * Iy[:, None, :]).reshape(len(pts), -1)
            Z = (C.T[:, :, None] * Iz[:, None, :]).reshape(len(pts), -1)  # (P, B*m)
            acc += (X.T @ Z).reshape(m, m, len(U), m).transpose(2, 0, 1, 3)
    return out + acc.reshape(len(U), -1) / W


# ---------------------------------------------------------------------------
# coercivity


def coercivity_estimate(backend: CollisionBackend, samples: int = 50, seed: int = 0, dense: bool = True) -> float:
    """``λ̂ = min -⟨u, Lu⟩ / ‖ν^{1/2}{I-P}u‖²`` over samples and, when dense,
    the generalized eigenproblem on the microscopic subspace. Stored on the backend."""
    if samples < 10:
        raise ValueError("samples must be >= 10")
    g = backend.grid
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((samples, g.size)) * g.sqrt_m ** 0.5
    LU = apply_L(backend, U)
    R = project(g, U, "I_minus_P")
    num = -np.sum(g.weights * U * LU, axis=1)
    den = np.sum(g.weights * backend.nu * R**2, axis=1)
    lam = float(np.min(num / den))
    if dense and g.size <= MAX_DENSE_NODES:
        s = g.sqrt_w
        S = s[:, None] * backend.matrix() / s[None, :]
        S = 0.5 * (S + S.T)
        E = basis_set(g).invariants * g.sqrt_m * s
        Z = sla.null_space(E)
        A = -Z.T @ S @ Z
        B = Z.T @ (backend.nu[:, None] * Z)
        lam_eig = float(sla.eigh(0.5 * (A + A.T), 0.5 * (B + B.T), eigvals_only=True, subset_by_index=[0, 0])[0])
        lam = min(lam, lam_eig)
    if not lam > 0:
        raise CoercivityError(f"measured coercivity {lam:.3e} is not positive")
    backend.certified_coercivity = lam
    return lam


def gamma_bound_constant(backend: CollisionBackend, pairs: int = 50, seed: int = 0) -> float:
    """Largest observed ``‖ν^{-1/2}Γ(u,v)‖ / (‖ν^{1/2}u‖‖v‖ + ‖u‖‖ν^{1/2}v‖)``."""
    g = backend.grid
    rng = np.random.default_rng(seed)
    nu = backend.nu
    U = rng.standard_normal((pairs, g.size)) * g.sqrt_m
    V = rng.standard_normal((pairs, g.size)) * g.sqrt_m
    G = apply_gamma(backend, U, V)
    lhs = g.norm(G / np.sqrt(nu))
    rhs = g.norm(np.sqrt(nu) * U) * g.norm(V) + g.norm(U) * g.norm(np.sqrt(nu) * V)
    return float(np.max(lhs / rhs))
