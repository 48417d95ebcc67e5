"""Nonlinear perturbation dynamics on the one-dimensional torus.

The spatial variable lives on ``[0, 2π)`` with ``N_x`` equispaced points and
points along ``e₁`` of the velocity space, so ``ξ·∇_x = ξ₁ ∂_x`` and
``∇_xΦ·∇_ξ = Φ' ∂_{ξ₁}``. The unknown ``u(x, ξ)`` is stored as an array of
shape ``(N_x, N_ξ)`` and evolves by

    ∂_t u = -ξ₁ ∂_x u - Φ' ∂_{ξ₁} u + ½ ξ₁ Φ' u + Φ' ξ₁ √M + L u + Γ(u, u),
    Φ'' = ∫ √M u dξ  (mean removed).

x-derivatives are spectral (FFT), ξ-derivatives use the grid's
differentiation matrix. The module also evaluates the energy functionals of
the stability theory along trajectories, with their free constants found by
search.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .collision_ops import CollisionBackend, apply_gamma, apply_L, make_backend
from .decay_experiments import DecayReport, fit_decay
from .velocity_space import VelocityGrid, build_grid, functionals, project

MAX_LEDGER_ORDER = 2
BLOWUP_FACTOR = 10.0


class BlowUpError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# grids and state


@dataclass(frozen=True, eq=False)
class TorusGrid:
    nx: int
    length: float = 2 * math.pi

    @property
    def x(self) -> np.ndarray:
        return self.length * np.arange(self.nx) / self.nx

    @property
    def dx(self) -> float:
        return self.length / self.nx

    @property
    def wavenumbers(self) -> np.ndarray:
        k = np.fft.fftfreq(self.nx, d=1.0 / self.nx) * (2 * math.pi / self.length)
        if self.nx % 2 == 0:
            k[self.nx // 2] = 0.0  # drop the unpaired Nyquist mode
        return k

    def derivative(self, f: np.ndarray, order: int = 1) -> np.ndarray:
        """Spectral ``∂_x^order`` along axis 0 (real in, real out)."""
        if order == 0:
            return f
        ik = (1j * self.wavenumbers) ** order
        shape = (-1,) + (1,) * (np.ndim(f) - 1)
        return np.real(np.fft.ifft(ik.reshape(shape) * np.fft.fft(f, axis=0), axis=0))

    def integrate(self, f: np.ndarray) -> np.ndarray:
        return self.dx * np.sum(f, axis=0)


@dataclass(eq=False)
class NonlinearState:
    u: np.ndarray  # (nx, N)
    t: float
    xgrid: TorusGrid
    vgrid: VelocityGrid

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        if self.u.shape != (self.xgrid.nx, self.vgrid.size):
            raise ValueError(f"u must have shape {(self.xgrid.nx, self.vgrid.size)}")

    @property
    def density(self) -> np.ndarray:
        return self.u @ functionals(self.vgrid).rho

    def poisson(self) -> "PoissonSolution":
        return solve_poisson(self.density, self.xgrid)


@dataclass
class PoissonSolution:
    phi: np.ndarray
    grad: np.ndarray
    residual: float
    mean_removed: float


def solve_poisson(density: np.ndarray, xgrid: TorusGrid) -> PoissonSolution:
    """Spectral solve of ``Φ'' = ρ - mean(ρ)`` with mean-zero ``Φ``."""
    rho = np.asarray(density, dtype=float)
    k = xgrid.wavenumbers
    rh = np.fft.fft(rho)
    mean = float(np.real(rh[0]) / xgrid.nx)
    ph = np.zeros_like(rh)
    nz = k != 0
    ph[nz] = -rh[nz] / k[nz] ** 2
    phi = np.real(np.fft.ifft(ph))
    grad = np.real(np.fft.ifft(1j * k * ph))
    # residual against the resolved part of the density
    rho_resolved = np.real(np.fft.ifft(np.where(nz, rh, 0.0)))
    res = float(np.max(np.abs(xgrid.derivative(phi, 2) - rho_resolved), initial=0.0))
    return PoissonSolution(phi, grad, res, mean)


# ---------------------------------------------------------------------------
# right-hand side


TERMS = ("streaming", "force", "half", "field", "collision", "gamma")


def _dxi(vgrid: VelocityGrid, u: np.ndarray) -> np.ndarray:
    return vgrid.derivative(u, 0)


def rhs_terms(state: NonlinearState, backend: CollisionBackend) -> dict:
    """Every term of the right-hand side, separately."""
    g, xg, u = state.vgrid, state.xgrid, state.u
    xi1 = g.nodes[:, 0]
    dphi = state.poisson().grad[:, None]
    return {
        "streaming": -xi1 * xg.derivative(u),
        "force": -dphi * _dxi(g, u),
        "half": 0.5 * xi1 * dphi * u,
        "field": dphi * (xi1 * g.sqrt_m),
        "collision": apply_L(backend, u),
        "gamma": apply_gamma(backend, u, u),
    }


def nonlinear_rhs(state: NonlinearState, backend: CollisionBackend) -> np.ndarray:
    return sum(rhs_terms(state, backend).values())


def source_split(state: NonlinearState, backend: CollisionBackend) -> dict:
    """``G₁ = Γ(u,u)``, ``G₂ = -Φ'∂_ξu + ½ξΦ'u`` and the norms ``‖P G₁‖``, ``‖P₀ G₂‖``."""
    terms = rhs_terms(state, backend)
    G1 = terms["gamma"]
    G2 = terms["force"] + terms["half"]
    g, xg = state.vgrid, state.xgrid
    norm = lambda f: float(np.sqrt(xg.integrate(np.sum(g.weights * f**2, axis=-1))))
    return {
        "G1": G1,
        "G2": G2,
        "PG1": norm(project(g, G1, "P")),
        "P0G2": norm(project(g, G2, "P0")),
        "scale": max(norm(G1), norm(G2)),
    }


@dataclass
class MicroAudit:
    residual: float
    relative: float
    lhs_norm: float
    rhs_norm: float


def microscopic_rhs_audit(state: NonlinearState, backend: CollisionBackend) -> MicroAudit:
    """Both sides of the evolution equation of ``{I-P}u``.

    Left: ``∂_t{I-P}u + ξ₁∂_x{I-P}u + Φ'∂_ξ{I-P}u`` with ``∂_t`` taken from the
    full right-hand side. Right: ``L{I-P}u + Γ + ½ξ₁Φ'{I-P}u - {I-P}T(Pu) -
    P T({I-P}u)`` with ``T = ξ₁∂_x + Φ'∂_ξ - ½ξ₁Φ'``.
    """
    g, xg, u = state.vgrid, state.xgrid, state.u
    xi1 = g.nodes[:, 0]
    dphi = state.poisson().grad[:, None]
    Pu = project(g, u, "P")
    Mu = u - Pu

    def T(f):
        return xi1 * xg.derivative(f) + dphi * _dxi(g, f) - 0.5 * xi1 * dphi * f

    dMu = project(g, nonlinear_rhs(state, backend), "I_minus_P")
    lhs = dMu + xi1 * xg.derivative(Mu) + dphi * _dxi(g, Mu)
    rhs = (apply_L(backend, Mu) + apply_gamma(backend, u, u) + 0.5 * xi1 * dphi * Mu
           - project(g, T(Pu), "I_minus_P") + project(g, T(Mu), "P"))
    norm = lambda f: float(np.sqrt(xg.integrate(np.sum(g.weights * f**2, axis=-1))))
    res = norm(lhs - rhs)
    scale = max(norm(lhs), norm(rhs), 1e-300)
    return MicroAudit(res, res / scale if scale > 1e-300 else 0.0, norm(lhs), norm(rhs))


def max_dt(xgrid: TorusGrid, backend: CollisionBackend, dphi_max: float = 0.0) -> float:
    g = backend.grid
    kmax = np.max(np.abs(xgrid.wavenumbers))
    D = g.derivative_matrix_1d
    rate = kmax * np.max(np.abs(g.nodes[:, 0])) + np.max(backend.nu) + dphi_max * np.max(np.abs(np.linalg.eigvals(D)))
    return 0.5 / rate


def rk4_step(state: NonlinearState, backend: CollisionBackend, dt: float) -> NonlinearState:
    def f(u):
        return nonlinear_rhs(NonlinearState(u, state.t, state.xgrid, state.vgrid), backend)

    u = state.u
    k1 = f(u)
    k2 = f(u + 0.5 * dt * k1)
    k3 = f(u + 0.5 * dt * k2)
    k4 = f(u + dt * k3)
    return NonlinearState(u + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4), state.t + dt, state.xgrid, state.vgrid)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (T, nx, N)
    xgrid: TorusGrid
    vgrid: VelocityGrid
    aborted: bool = False
    message: str = ""

    def state(self, j: int) -> NonlinearState:
        return NonlinearState(self.states[j], float(self.times[j]), self.xgrid, self.vgrid)


def l2_norm(xgrid: TorusGrid, vgrid: VelocityGrid, u: np.ndarray) -> np.ndarray:
    """``‖u‖`` over ``T × ℝⁿ``; batched over leading axes before ``(nx, N)``."""
    return np.sqrt(xgrid.dx * np.sum(vgrid.weights * u**2, axis=(-2, -1)))


def evolve(state: NonlinearState, backend: CollisionBackend, dt: float, nsteps: int,
           blowup: float = BLOWUP_FACTOR) -> Trajectory:
    """RK4 trajectory; stops with ``aborted=True`` once ``‖u‖`` exceeds ``blowup × ‖u₀‖``."""
    n0 = float(l2_norm(state.xgrid, state.vgrid, state.u))
    out = [state.u]
    times = [state.t]
    s = state
    for j in range(nsteps):
        s = rk4_step(s, backend, dt)
        nrm = float(l2_norm(s.xgrid, s.vgrid, s.u))
        out.append(s.u)
        times.append(s.t)
        if not np.isfinite(nrm) or (n0 > 0 and nrm > blowup * n0):
            return Trajectory(np.array(times), np.stack(out), state.xgrid, state.vgrid, True,
                              f"norm {nrm:.3e} exceeded {blowup:g} x initial {n0:.3e} at t = {s.t:.4g}")
    return Trajectory(np.array(times), np.stack(out), state.xgrid, state.vgrid)


# ---------------------------------------------------------------------------
# moment balances


def _time_derivative(f: np.ndarray, dt: float) -> np.ndarray:
    """Fourth-order centered difference along axis 0 (drops two samples at each end)."""
    return (f[:-4] - 8 * f[1:-3] + 8 * f[3:-1] - f[4:]) / (12 * dt)


def balance_residuals(traj: Trajectory, backend: CollisionBackend) -> dict:
    """Max-norm residuals of the local conservation laws and high-moment equations.

    Time derivatives are fourth-order differences of the stored trajectory, so
    the residuals are ``O(dt⁴)``, the order of the integrator. Each entry also
    carries ``scale``, the largest single term of the identity.
    """
    g, xg = traj.vgrid, traj.xgrid
    n = g.dim
    F = functionals(g)
    U = traj.states
    if len(U) < 5:
        raise ValueError("balance residuals need at least five snapshots")
    dt = float(traj.times[1] - traj.times[0])
    xi = g.nodes
    xi1 = xi[:, 0]
    coef = U @ F.coef_rows.T
    b, c = coef[..., 1 : n + 1], coef[..., n + 1]
    rho = coef[..., 0] + n * c
    Mu = project(g, U, "I_minus_P")
    inner = lambda row, f: f @ (row * g.sqrt_m * g.weights)
    dphi = np.stack([solve_poisson(r, xg).grad for r in rho])
    RG = np.stack([
        -xi1 * xg.derivative(m) + apply_L(backend, m) + apply_gamma(backend, u, u)
        - dp[:, None] * _dxi(g, u) + 0.5 * xi1 * dp[:, None] * u
        for u, m, dp in zip(U, Mu, dphi)
    ])
    mid = slice(2, -2)
    dt_ = lambda f: _time_derivative(f, dt)

    def ddx(f, k=1):  # x is axis 1 of (T, nx, ...)
        return np.moveaxis(xg.derivative(np.moveaxis(f, 1, 0), k), 0, 1)

    out = {}

    def record(name, *terms):
        """Terms are signed so that the identity reads ``Σ terms = 0``."""
        terms = [np.broadcast_to(t, terms[0].shape) for t in terms]
        out[name] = {"residual": float(np.max(np.abs(sum(terms)))),
                     "scale": max(float(np.max(np.abs(t))) for t in terms)}

    zero = np.zeros_like(rho[mid])
    # mass: ∂_t ρ + ∂_x b₁ = 0
    record("mass", dt_(rho), ddx(b[..., 0])[mid])
    # momentum: ∂_t b_j + ∂_x⟨ξ₁ξ_j√M, u⟩ - δ_1j Φ' = δ_1j ρ Φ'
    for j in range(n):
        mflux = ddx(inner(xi1 * xi[:, j], U))[mid]
        field_ = -dphi[mid] if j == 0 else zero
        src = -(rho * dphi)[mid] if j == 0 else zero
        record(f"momentum_{j + 1}", dt_(b[..., j]), mflux, field_, src)
    # energy: ∂_t⟨|ξ|²√M, u⟩ + ∂_x⟨|ξ|²ξ₁√M, u⟩ = 2 b₁ Φ'
    record("energy", dt_(inner(g.speed2, U)), ddx(inner(g.speed2 * xi1, U))[mid], -2 * (b[..., 0] * dphi)[mid])

    A = np.einsum("jmi,...i->...jm", F.A, Mu)
    B = np.einsum("ji,...i->...j", F.B, Mu)
    ARG = np.einsum("jmi,...i->...jm", F.A, RG)[mid]
    BRG = np.einsum("ji,...i->...j", F.B, RG)[mid]
    db = ddx(b)[mid]
    # diagonal A: ∂_t[A_jj + 2c] + 2∂_j b_j = A_jj(R+G)
    for j in range(n):
        record(f"A_diag_{j + 1}", dt_(A[..., j, j]), 2 * dt_(c), 2 * db[..., 0] if j == 0 else zero, -ARG[..., j, j])
    # off-diagonal A: ∂_t A_jm + ∂_j b_m + ∂_m b_j = A_jm(R+G), j < m (only ∂_1 ≠ 0)
    for j, m in itertools.combinations(range(n), 2):
        record(f"A_off_{j + 1}{m + 1}", dt_(A[..., j, m]), db[..., m] if j == 0 else zero, -ARG[..., j, m])
    # B: ∂_t B_j + 2(n+2) ∂_j c = B_j(R+G)
    for j in range(n):
        record(f"B_{j + 1}", dt_(B[..., j]), 2 * (n + 2) * ddx(c)[mid] if j == 0 else zero, -BRG[..., j])
    # second-order equation for b₁:
    # -∂_t[Σ_j ∂_j A_j1 + ½∂_1 A_11] - Δb_1 - ∂_1² b_1 + (n-3) ∂_t∂_1 c
    #   = ½ Σ_{j≠1} ∂_1 A_jj(R+G) - Σ_j ∂_j A_j1(R+G)
    dARG = np.moveaxis(xg.derivative(np.moveaxis(ARG, 1, 0)), 0, 1)
    rhs = -dARG[..., 0, 0] + 0.5 * sum((dARG[..., j, j] for j in range(1, n)), zero)
    record("b_second_order", -1.5 * dt_(ddx(A[..., 0, 0])), -2 * ddx(b[..., 0], 2)[mid], (n - 3) * dt_(ddx(c)), -rhs)
    return out


# ---------------------------------------------------------------------------
# energy functionals


def _multi_indices(n: int, order: int):
    return [b for b in itertools.product(range(order + 1), repeat=n) if sum(b) == order]


def _dxi_beta(g: VelocityGrid, u: np.ndarray, beta) -> np.ndarray:
    for axis, times in enumerate(beta):
        for _ in range(times):
            u = g.derivative(u, axis)
    return u


@dataclass
class EnergyConstants:
    kappa0: float = 1.0
    kappa3: float = 0.01
    kappa4: float = 0.1
    kappa5: float = 1.0
    lam: float = 0.0
    lam_w: float = 0.0
    C_w: float = 0.0
    lam_es: float = 0.0
    C_es: float = 0.0
    N: int = 1
    eps: float = 0.25  # the ε of the weighted sup functional
    certified: bool = False


def functional_components(traj_states: np.ndarray, xgrid: TorusGrid, backend: CollisionBackend, N: int) -> dict:
    """Quadratic building blocks of every ledger functional, one value per snapshot."""
    if N > MAX_LEDGER_ORDER or N < 0:
        raise ValueError(f"derivative order N = {N} is not supported (max {MAX_LEDGER_ORDER})")
    g = backend.grid
    n = g.dim
    F = functionals(g)
    W, nu, w = g.weights, backend.nu, g.weight_fn
    U = np.asarray(traj_states)
    single = U.ndim == 2
    if single:
        U = U[None]
    dx = xgrid.dx

    def ddx(f, k=1):
        return np.moveaxis(xgrid.derivative(np.moveaxis(f, 1, 0), k), 0, 1)

    def sq(f, weight=None):
        ww = W if weight is None else W * weight
        return dx * np.sum(ww * f**2, axis=(-2, -1))

    def pair(f, h):
        return dx * np.sum(f * h, axis=-1)

    coef = U @ F.coef_rows.T
    a, b, c = coef[..., 0], coef[..., 1 : n + 1], coef[..., n + 1]
    rho = a + n * c
    Mu = project(g, U, "I_minus_P")
    dphi = np.stack([solve_poisson(r, xgrid).grad for r in rho])
    out = {k: np.zeros(len(U)) for k in (
        "Z", "Zh", "X", "Fa", "Fr", "Dmic", "Dxxi", "Dmac", "micro", "micro_w", "Zw", "Xw",
        "Dw_micro", "Dw_x", "Dw_xxi", "grad_P", "micro_nu")}
    for al in range(N + 1):
        du = ddx(U, al)
        dM = ddx(Mu, al)
        field2 = dx * np.sum(ddx(dphi, al) ** 2, axis=-1)
        out["Z"] += sq(du) + field2
        if al >= 1:
            out["Zh"] += sq(du) + field2
            out["Zw"] += sq(du, w)
            out["Dw_x"] += sq(du, w**2)
        out["Dmic"] += sq(dM, nu)
        for k in range(1, N - al + 1):
            for beta in _multi_indices(n, k):
                z = _dxi_beta(g, dM, beta)
                out["X"] += sq(z)
                out["Xw"] += sq(z, w)
                out["Dxxi"] += sq(z, nu)
                out["Dw_xxi"] += sq(z, w**2)
        if al <= N - 1:
            A = np.einsum("jmi,...i->...jm", F.A, dM)
            B = np.einsum("ji,...i->...j", F.B, dM)
            db = ddx(ddx(b, al))
            dc = ddx(ddx(c, al))
            out["Fa"] += 2 * sum(pair(A[..., 0, j], db[..., j]) for j in range(n))
            out["Fa"] += pair(A[..., 0, 0], db[..., 0]) + pair(B[..., 0], dc)
            out["Fr"] -= pair(ddx(rho, al), db[..., 0])
            out["Dmac"] += (pair(ddx(rho, al + 1), ddx(rho, al + 1)) + pair(dc, dc)
                            + sum(pair(db[..., j], db[..., j]) for j in range(n)))
    out["Dmac"] += pair(rho, rho)
    out["micro"] = sq(Mu)
    out["micro_nu"] = sq(Mu, nu)
    out["micro_w"] = sq(Mu, w)
    out["Dw_micro"] = sq(Mu, w**2)
    Pu = U - Mu
    out["grad_P"] = sq(ddx(Pu))
    if single:
        out = {k: v[0] for k, v in out.items()}
    return out


def energy_values(comp: dict, kc: EnergyConstants) -> dict:
    free = kc.kappa0 * comp["Fa"] + comp["Fr"]
    E = comp["Z"] + kc.kappa3 * comp["X"] + kc.kappa4 * free
    D = comp["Dmic"] + comp["Dxxi"] + comp["Dmac"]
    Eh = comp["micro"] + comp["Zh"] + kc.kappa3 * comp["X"] + kc.kappa4 * free
    Ehw = comp["micro_w"] + comp["Zw"] + comp["Xw"] + kc.kappa5 * Eh
    Dw = comp["Dw_micro"] + comp["Dw_x"] + comp["Dw_xxi"] + D
    return {"E": E, "D": D, "E_free": free, "E_h": Eh, "E_hw": Ehw, "D_w": Dw}


@dataclass
class EnergyLedger:
    times: np.ndarray
    values: dict  # name -> series
    constants: EnergyConstants
    eps0: float
    eps0_nu: float
    eps1: float

    def running(self, name: str, exponent: float) -> np.ndarray:
        return np.maximum.accumulate((1 + self.times) ** exponent * self.values[name])

    @property
    def E_inf(self) -> dict:
        return {m: self.running("E", 0.5 + m) for m in (0, 1)}

    @property
    def E_hw_inf(self) -> np.ndarray:
        return self.running("E_hw", 2 * (0.75 - self.constants.eps))

    def table(self) -> dict:
        cols = {"t": self.times}
        cols.update(self.values)
        cols["E_inf_0"] = self.E_inf[0]
        cols["E_inf_1"] = self.E_inf[1]
        cols["E_hw_inf"] = self.E_hw_inf
        return cols

    def csv_rows(self):
        cols = self.table()
        keys = list(cols)
        yield tuple(keys)
        for j in range(len(self.times)):
            yield tuple(float(cols[k][j]) for k in keys)


def initial_norms(u0: np.ndarray, xgrid: TorusGrid, backend: CollisionBackend, N: int):
    """``ε₀``, ``ε₀,ν`` and ``ε₁`` of the data."""
    g = backend.grid
    dx = xgrid.dx

    def hn(weight):
        return sum(dx * np.sum(g.weights * weight * xgrid.derivative(u0, al) ** 2) for al in range(N + 1))

    z1 = math.sqrt(np.sum(g.weights * (dx * np.sum(np.abs(u0), axis=0)) ** 2))
    hN = hn(1.0)
    nu2 = dx * np.sum(g.weights * backend.nu * u0**2)
    eps0 = hN + z1**2
    return float(eps0), float(eps0 + nu2), float(hn(g.weight_fn) + z1**2)


def energy_ledger(traj: Trajectory, backend: CollisionBackend, constants: EnergyConstants) -> EnergyLedger:
    comp = functional_components(traj.states, traj.xgrid, backend, constants.N)
    vals = energy_values(comp, constants)
    vals["grad_P"] = comp["grad_P"]
    vals["micro"] = comp["micro"]
    vals["micro_w"] = comp["micro_w"]
    e0, e0n, e1 = initial_norms(traj.states[0], traj.xgrid, backend, constants.N)
    return EnergyLedger(traj.times, vals, constants, e0, e0n, e1)


# ---------------------------------------------------------------------------
# calibration and audits


def random_initial_state(xgrid: TorusGrid, vgrid: VelocityGrid, amplitude: float, rng: np.random.Generator,
                         modes: int = 3) -> np.ndarray:
    """Smooth random data with zero-mean macroscopic part, scaled to ``‖u₀‖ = amplitude``."""
    x = xgrid.x
    m = min(vgrid.order, 6)
    u = np.zeros((xgrid.nx, vgrid.size))
    for k in range(1, modes + 1):
        for phase in (np.cos, np.sin):
            chi = vgrid.sqrt_m * np.polynomial.hermite_e.hermeval(vgrid.nodes[:, 0], rng.standard_normal(m))
            if vgrid.dim > 1:
                chi = chi * (1 + 0.3 * rng.standard_normal() * vgrid.nodes[:, 1:].sum(axis=1))
            u += phase(k * x)[:, None] * chi[None, :] / k**2
    # remove the macroscopic part of the spatial mean
    mean = u.mean(axis=0)
    u -= project(vgrid, mean, "P")[None, :]
    return amplitude * u / float(l2_norm(xgrid, vgrid, u))


def _lambda_for(E, D, dt):
    """Largest ``λ`` with ``E(t+dt) - E(t) + λ ∫ D ≤ 0`` at every step (trapezoid)."""
    dE = E[..., 1:] - E[..., :-1]
    intD = 0.5 * dt * (D[..., 1:] + D[..., :-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(intD > 0, -dE / intD, np.where(dE <= 0, np.inf, -np.inf))
    return r.min(axis=-1)


def calibrate_energy(backend: CollisionBackend, xgrid: TorusGrid, N: int = 1, amplitude: float = 1e-3,
                     trajectories: int = 3, t_max: float = 4.0, seed: int = 0, safety: float = 0.5,
                     kappa0_grid=tuple(2.0**j for j in range(-4, 3)),
                     kappa3_grid=tuple(2.0**-j for j in range(2, 12)),
                     kappa4_grid=tuple(2.0**-j for j in range(0, 12)),
                     kappa5_grid=tuple(2.0**j for j in range(0, 5))) -> EnergyConstants:
    """Search ``κ₀, κ₃, κ₄`` for ``dE/dt + λD ≤ 0`` and ``κ₅`` for the weighted inequality."""
    rng = np.random.default_rng(seed)
    g = backend.grid
    dt = max_dt(xgrid, backend, dphi_max=amplitude)
    nsteps = int(np.ceil(t_max / dt))
    comps = []
    for _ in range(trajectories):
        u0 = random_initial_state(xgrid, g, amplitude, rng)
        tr = evolve(NonlinearState(u0, 0.0, xgrid, g), backend, dt, nsteps)
        comps.append(functional_components(tr.states, xgrid, backend, N))
    C = {k: np.stack([c[k] for c in comps]) for k in comps[0]}  # (traj, T)
    K0, K3, K4 = (a.ravel() for a in np.meshgrid(kappa0_grid, kappa3_grid, kappa4_grid, indexing="ij"))
    E = (C["Z"][None] + K3[:, None, None] * C["X"][None]
         + K4[:, None, None] * (K0[:, None, None] * C["Fa"][None] + C["Fr"][None]))
    D = C["Dmic"] + C["Dxxi"] + C["Dmac"]
    positive = np.all(E > 0, axis=(1, 2))
    lam = np.where(positive, _lambda_for(E, D[None], dt).min(axis=1), -np.inf)
    best = int(np.argmax(lam))
    kc = EnergyConstants(kappa0=float(K0[best]), kappa3=float(K3[best]), kappa4=float(K4[best]), N=N)
    kc.certified = bool(lam[best] > 0)
    kc.lam = safety * float(lam[best]) if kc.certified else 0.0
    # weighted functional: pick κ₅, then λ_w = half its best rate with C_w from the data
    gradP = C["grad_P"]
    best_w = (-np.inf, None, None)
    for k5 in kappa5_grid:
        kc.kappa5 = k5
        v = energy_values(C, kc)
        lw = 0.5 * float(np.min(_lambda_for(v["E_hw"], v["D_w"], dt)))
        if not np.isfinite(lw) or lw <= 0:
            lw = 0.5 * float(np.min(v["D_w"] > 0))
        dE = v["E_hw"][:, 1:] - v["E_hw"][:, :-1]
        intD = 0.5 * dt * (v["D_w"][:, 1:] + v["D_w"][:, :-1])
        intG = 0.5 * dt * (gradP[:, 1:] + gradP[:, :-1])
        need = np.where(intG > 0, (dE + max(lw, 0) * intD) / np.where(intG > 0, intG, 1), 0.0)
        Cw = 2.0 * max(0.0, float(np.max(need)))
        score = max(lw, 0) / (1 + Cw)
        if score > best_w[0]:
            best_w = (score, k5, (max(lw, 0), Cw))
    kc.kappa5 = best_w[1]
    kc.lam_w, kc.C_w = best_w[2]
    kc.lam_es, kc.C_es = micro_energy_constants(backend)
    return kc


def micro_energy_constants(backend: CollisionBackend):
    """``λ`` and ``C`` for the micro energy estimate, from the coercivity constant
    and the coupling ``{I-P}(ξ₁ ∂_x P u)`` measured on the grid."""
    from .collision_ops import coercivity_estimate

    g = backend.grid
    lam_hat = backend.certified_coercivity or coercivity_estimate(backend)
    # c_ξ² = sup over macroscopic e of ‖ν^{-1/2}{I-P}(ξ₁ e)‖² / ‖e‖²
    basis = functionals(g).coef_basis
    Q = basis.T
    G = (Q * g.weights[:, None]).T @ Q
    M = project(g, g.nodes[:, 0] * basis, "I_minus_P")
    H = (M * (g.weights / backend.nu)) @ M.T
    c2 = float(np.max(np.linalg.eigvals(np.linalg.solve(G, H)).real))
    return float(lam_hat), float(c2 / lam_hat)


@dataclass
class NonlinearConfig:
    n: int = 1
    order: int = 16
    backend: str = "bgk_surrogate"
    angular_order: int = 8
    nx: int = 32
    amplitude: float = 1e-3
    N: int = 1
    t_max: float = 8.0
    dt: float | None = None
    seed: int = 0
    window: tuple = (1.0, 8.0)
    calibration_trajectories: int = 3
    calibration_t_max: float = 4.0
    margin_tol: float = 1e-6
    split_tol: float = 1e-8
    balance_tol: float = 1e-5
    zero_data: bool = False


@dataclass
class NonlinearReport:
    ledger: EnergyLedger | None
    decay: DecayReport | None
    trajectory: Trajectory
    checks: dict
    passed: bool
    aborted: bool = False
    message: str = ""

    def summary(self) -> dict:
        out = {"kind": "nonlinear", "passed": bool(self.passed), "aborted": self.aborted, "message": self.message,
               "checks": self.checks}
        if self.ledger is not None:
            out["constants"] = asdict(self.ledger.constants)
            out["eps0"], out["eps0_nu"], out["eps1"] = self.ledger.eps0, self.ledger.eps0_nu, self.ledger.eps1
        if self.decay is not None and self.decay.fit is not None:
            out["fit"] = asdict(self.decay.fit)
        return out


def _simpson_pairs(y, dt):
    return dt / 3.0 * (y[0:-2:2] + 4.0 * y[1:-1:2] + y[2::2])


def run_nonlinear(cfg: NonlinearConfig, constants: EnergyConstants | None = None) -> NonlinearReport:
    g = build_grid(cfg.n, cfg.order)
    backend = make_backend(cfg.backend, g, cfg.angular_order)
    xg = TorusGrid(cfg.nx)
    rng = np.random.default_rng(cfg.seed)
    u0 = np.zeros((cfg.nx, g.size)) if cfg.zero_data else random_initial_state(xg, g, cfg.amplitude, rng)
    dt = cfg.dt or max_dt(xg, backend, dphi_max=max(cfg.amplitude, 1e-12))
    nsteps = int(np.ceil(cfg.t_max / dt))
    nsteps += nsteps % 2
    traj = evolve(NonlinearState(u0, 0.0, xg, g), backend, dt, nsteps)
    if traj.aborted:
        return NonlinearReport(None, None, traj, {"blowup": traj.message}, False, True, traj.message)
    if constants is None:
        constants = calibrate_energy(backend, xg, cfg.N, max(cfg.amplitude, 1e-6), cfg.calibration_trajectories,
                                     cfg.calibration_t_max, cfg.seed + 1)
    ledger = energy_ledger(traj, backend, constants)
    E, D = ledger.values["E"], ledger.values["D"]
    scale = max(float(E[0]), 1e-300)
    checks = {}
    mass = xg.dx * np.sum(traj.states @ functionals(g).rho, axis=-1)
    checks["mass_drift"] = float(np.max(np.abs(mass - mass[0])))
    margin = -(E[2::2] - E[:-2:2] + constants.lam * _simpson_pairs(D, dt)) / scale
    checks["energy_margin"] = float(np.min(margin)) if len(margin) else 0.0
    checks["energy_monotone"] = bool(np.all(np.diff(E) <= cfg.margin_tol * scale))
    stride = max(1, len(traj.times) // 50)
    split = [source_split(traj.state(j), backend) for j in range(0, len(traj.times), stride)]
    checks["PG1_max"] = max(s["PG1"] for s in split)
    checks["P0G2_max"] = max(s["P0G2"] for s in split)
    micro = [microscopic_rhs_audit(traj.state(j), backend) for j in range(0, len(traj.times), stride)]
    checks["micro_audit_max_relative"] = max(m.relative for m in micro)
    bal = balance_residuals(traj, backend)
    checks["balances"] = bal
    top = max(v["scale"] for v in bal.values())
    checks["balance_max_relative"] = max(v["residual"] for v in bal.values()) / top if top > 0 else 0.0
    # micro energy estimate: d/dt‖{I-P}u‖² + λ‖ν^{1/2}{I-P}u‖² ≤ C‖∂_x P u‖² + margin
    mic, micn, gp = ledger.values["micro"], None, ledger.values["grad_P"]
    comp = functional_components(traj.states, xg, backend, 0)
    micn = comp["micro_nu"]
    es = -(mic[2::2] - mic[:-2:2] + constants.lam_es * _simpson_pairs(micn, dt)
           - constants.C_es * _simpson_pairs(gp, dt)) / scale
    checks["micro_energy_margin"] = float(np.min(es)) if len(es) else 0.0
    # weighted high-order inequality
    Ehw, Dw = ledger.values["E_hw"], ledger.values["D_w"]
    wm = -(Ehw[2::2] - Ehw[:-2:2] + constants.lam_w * _simpson_pairs(Dw, dt)
           - constants.C_w * _simpson_pairs(gp, dt)) / max(float(Ehw[0]), 1e-300)
    checks["weighted_margin"] = float(np.min(wm)) if len(wm) else 0.0
    checks["E_inf_monotone"] = bool(all(np.all(np.diff(v) >= 0) for v in ledger.E_inf.values()))
    checks["finite"] = bool(all(np.all(np.isfinite(v)) for v in ledger.values.values()))
    norms = l2_norm(xg, g, traj.states)
    decay = None
    if not cfg.zero_data and np.all(norms > 0):
        fit = fit_decay(traj.times, norms, cfg.window, "exponential")
        decay = DecayReport("nonlinear", traj.times, norms, np.zeros_like(norms), fit, None, 0.0, True)
    passed = (
        checks["mass_drift"] <= 1e-10 * max(1.0, cfg.amplitude)
        and checks["energy_margin"] >= -cfg.margin_tol
        and checks["PG1_max"] <= cfg.split_tol
        and checks["P0G2_max"] <= cfg.split_tol
        and checks["balance_max_relative"] <= cfg.balance_tol
        and checks["finite"]
        and (constants.certified or cfg.zero_data)
    )
    checks["constants_certified"] = constants.certified
    return NonlinearReport(ledger, decay, traj, checks, bool(passed))
