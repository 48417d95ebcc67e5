"""Per-wavenumber linearized dynamics and its Lyapunov functionals.

For a fixed wavenumber ``k`` the Fourier coefficient ``û(t, k, ·)`` obeys

    ∂_t û = -i ξ·k û - i (k·ξ / |k|²)(a + n c) √M + L û + ĥ,

a linear ODE on the velocity grid. The functional

    E(û) = ‖û‖² + |a + n c|² / |k|² + κ₂ Re E_free(û)

is audited along trajectories, and the constants ``κ₁, κ₂, λ, C`` are found
by search. Slices are node values; quadratic forms are built in the scaled
coordinates ``ũ = √W u`` where the grid inner product is Euclidean.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .collision_ops import MAX_DENSE_NODES, CollisionBackend, apply_L
from .velocity_space import VelocityGrid, basis_set, functionals, project

DT_SAFETY = 0.5
SOURCE_TOL = 1e-10


class CalibrationError(RuntimeError):
    pass


class StepError(ValueError):
    pass


# ---------------------------------------------------------------------------
# operator and state


@dataclass(eq=False)
class ModeOperator:
    """Generator of the linearized evolution at wavenumber ``k``."""

    k: np.ndarray
    backend: CollisionBackend
    grid: VelocityGrid
    streaming: np.ndarray  # -i ξ·k
    has_field: bool

    @property
    def k2(self) -> float:
        return float(self.k @ self.k)

    @property
    def r(self) -> float:
        """``|k|² / (1 + |k|²)``."""
        return self.k2 / (1.0 + self.k2)

    def field_coupling(self, u: np.ndarray) -> np.ndarray:
        if not self.has_field:
            return np.zeros_like(u, dtype=complex)
        rho = u @ functionals(self.grid).rho
        xk = self.grid.nodes @ self.k
        return -1j * np.asarray(rho)[..., None] * (xk * self.grid.sqrt_m) / self.k2

    def apply(self, u: np.ndarray, source: np.ndarray | None = None) -> np.ndarray:
        """Time derivative of ``u`` (batched over leading axes)."""
        out = self.streaming * u + self.field_coupling(u) + apply_L(self.backend, u)
        if source is not None:
            out = out + source
        return out

    def __call__(self, u):
        return self.apply(u)

    def potential(self, u: np.ndarray):
        """``Φ̂ = -(a + n c) / |k|²``."""
        if not self.has_field:
            raise ValueError("Φ̂ is undefined at k = 0")
        return -(u @ functionals(self.grid).rho) / self.k2

    def max_dt(self) -> float:
        """Largest step allowed by the guard ``dt ≤ 0.5 / (max|ξ·k| + max ν)``."""
        return DT_SAFETY / (np.max(np.abs(self.streaming)) + np.max(self.backend.nu))

    def dense(self) -> np.ndarray:
        """Dense generator acting on node values."""
        if self.grid.size > MAX_DENSE_NODES:
            raise ValueError("grid too large for dense assembly")
        A = np.diag(self.streaming) + self.backend.matrix().astype(complex)
        if self.has_field:
            xk = self.grid.nodes @ self.k
            A += -1j * np.outer(xk * self.grid.sqrt_m, functionals(self.grid).rho) / self.k2
        return A

    def dense_scaled(self) -> np.ndarray:
        """Generator in coordinates ``√W u``."""
        s = self.grid.sqrt_w
        return s[:, None] * self.dense() / s[None, :]


@dataclass(frozen=True, eq=False)
class ModeState:
    u: np.ndarray
    t: float
    k: np.ndarray
    grid: VelocityGrid

    @property
    def phi(self):
        k2 = float(self.k @ self.k)
        if k2 == 0:
            return np.nan
        return -(self.u @ functionals(self.grid).rho) / k2


def assemble_mode_operator(k, backend: CollisionBackend, grid: VelocityGrid | None = None) -> ModeOperator:
    grid = backend.grid if grid is None else grid
    if not grid.same_as(backend.grid):
        raise ValueError("backend and grid differ")
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if k.shape != (grid.dim,):
        raise ValueError(f"k must have {grid.dim} components")
    return ModeOperator(k, backend, backend.grid, -1j * (backend.grid.nodes @ k), bool(k @ k > 0))


def rk4(op: ModeOperator, u: np.ndarray, dt: float, source=None) -> np.ndarray:
    k1 = op.apply(u, source)
    k2 = op.apply(u + 0.5 * dt * k1, source)
    k3 = op.apply(u + 0.5 * dt * k2, source)
    k4 = op.apply(u + dt * k3, source)
    return u + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def check_source(grid: VelocityGrid, h: np.ndarray, tol: float = SOURCE_TOL) -> None:
    defect = grid.norm(project(grid, h, "P"))
    scale = max(1.0, float(np.max(grid.norm(h))))
    if np.any(defect > tol * scale):
        raise StepError(f"source is not microscopic: ‖P h‖ = {float(np.max(defect)):.3e}")


def step(op: ModeOperator, state: ModeState, dt: float, source: np.ndarray | None = None) -> ModeState:
    """One RK4 step; the source is held constant over the step."""
    if dt <= 0 or dt > op.max_dt() * (1 + 1e-12):
        raise StepError(f"dt = {dt} violates the guard dt <= {op.max_dt():.4g}")
    if source is not None:
        check_source(op.grid, source)
    return ModeState(rk4(op, state.u.astype(complex), dt, source), state.t + dt, op.k, op.grid)


def evolve(op: ModeOperator, u0: np.ndarray, dt: float, nsteps: int, source=None, record_every: int = 1):
    """RK4 trajectory of a batch of states; returns times and the stacked states."""
    if dt > op.max_dt() * (1 + 1e-12):
        raise StepError(f"dt = {dt} violates the guard dt <= {op.max_dt():.4g}")
    if source is not None:
        check_source(op.grid, source)
    u = np.asarray(u0, dtype=complex)
    ts, us = [0.0], [u]
    for j in range(1, nsteps + 1):
        u = rk4(op, u, dt, source)
        if j % record_every == 0:
            ts.append(j * dt)
            us.append(u)
    return np.array(ts), np.stack(us)


# ---------------------------------------------------------------------------
# functionals


@dataclass
class EnergyFunctionalParams:
    kappa1: float = 1.0
    kappa2: float = 0.0
    lam: float = 0.0
    C: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    certificate: str = "none"
    lam_matrix: float | None = None
    lam_trajectory: float | None = None
    micro_bound: dict = field(default_factory=dict)
    free_energy_bound: dict = field(default_factory=dict)
    k_samples: list = field(default_factory=list)
    dt_fraction: float = 1.0
    grid: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)

    @classmethod
    def from_json(cls, text: str) -> "EnergyFunctionalParams":
        return cls(**json.loads(text))


def _pair(x, y):
    """``(x | y) = x conj(y)``."""
    return x * np.conj(y)


def energy_components(grid: VelocityGrid, k: np.ndarray, u: np.ndarray):
    """``(E0, F1, F3)`` with ``Re E_free = κ₁ F1 + F3`` and ``E = E0 + κ₂ Re E_free``.

    ``E0 = ‖u‖² + |a+nc|²/|k|²``; ``F1`` collects the two κ₁-weighted
    pairings, ``F3`` the ``(b | i k (a+nc) / (1+|k|²))`` term. Batched.
    """
    k = np.asarray(k, dtype=float)
    n, k2 = grid.dim, float(k @ k)
    F = functionals(grid)
    coef = u @ F.coef_rows.T
    a, b, c = coef[..., 0], coef[..., 1 : n + 1], coef[..., n + 1]
    rho = a + n * c
    micro = project(grid, u, "I_minus_P")
    A = np.einsum("jmi,...i->...jm", F.A, micro)
    B = np.einsum("ji,...i->...j", F.B, micro)
    E0 = np.real(np.sum(grid.weights * np.abs(u) ** 2, axis=-1))
    if k2 > 0:
        E0 = E0 + np.abs(rho) ** 2 / k2
    d = 1.0 + k2
    alpha = 1j / d * (np.einsum("j,...jm->...m", k, A) + 0.5 * k * np.diagonal(A, axis1=-2, axis2=-1))
    F1 = np.sum(_pair(alpha, -b), axis=-1) + np.sum(_pair(B, 1j * k / d * c[..., None]), axis=-1)
    F3 = np.sum(_pair(b, 1j * k / d * rho[..., None]), axis=-1)
    return E0, np.real(F1), np.real(F3)


def free_energy(state: ModeState, params: EnergyFunctionalParams) -> float:
    """``Re E_free(û)``."""
    _, F1, F3 = energy_components(state.grid, state.k, state.u)
    return params.kappa1 * F1 + F3


def total_energy(state: ModeState, params: EnergyFunctionalParams) -> float:
    if float(state.k @ state.k) == 0:
        raise ValueError("the whole-space functional needs k != 0")
    E0, F1, F3 = energy_components(state.grid, state.k, state.u)
    return E0 + params.kappa2 * (params.kappa1 * F1 + F3)


class _Forms:
    """Scaled-coordinate matrices of the energy pieces at one wavenumber."""

    def __init__(self, op: ModeOperator):
        g, k = op.grid, op.k
        n, k2, s = g.dim, op.k2, g.sqrt_w
        F = functionals(g)
        E = basis_set(g).invariants * g.sqrt_m * s
        Q, _ = np.linalg.qr(E.T)
        self.Q = Q
        self.Pi = np.eye(g.size) - Q @ Q.T
        ra, rb, rc, rr = F.a / s, F.b / s, F.c / s, F.rho / s
        A, Bm = (F.A / s) @ self.Pi, (F.B / s) @ self.Pi
        d = 1.0 + k2
        outer = lambda p, q: np.outer(np.conj(q), p)  # (p·u | q·u) = u^H outer u
        herm = lambda M: 0.5 * (M + M.conj().T)
        T1 = sum(outer(1j / d * (sum(k[j] * A[j, m] for j in range(n)) + 0.5 * k[m] * A[m, m]), -rb[m]) for m in range(n))
        T2 = sum(outer(Bm[j], 1j * k[j] / d * rc) for j in range(n))
        T3 = sum(outer(rb[m], 1j * k[m] / d * rr) for m in range(n))
        self.F1 = herm(T1 + T2)
        self.F3 = herm(T3)
        self.H0 = np.eye(g.size) + (np.outer(rr, rr) / k2 if k2 > 0 else 0.0)
        self.Dmac = np.outer(rr, rr) + op.r * (rb.T @ rb + np.outer(rc, rc))
        self.B = op.dense_scaled()
        self.nu = op.backend.nu
        self.r = op.r

    def H(self, kappa1, kappa2):
        return self.H0 + kappa2 * (kappa1 * self.F1 + self.F3)


def _min_geneig(A, B):
    return float(sla.eigh(A, B, eigvals_only=True, subset_by_index=[0, 0])[0])


def _is_pd(H) -> bool:
    try:
        np.linalg.cholesky(H)
        return True
    except np.linalg.LinAlgError:
        return False


def matrix_certificate(forms: _Forms, kappa1: float, kappa2: float) -> float:
    """Largest ``λ`` with ``HB + BᴴH + λ r H ≼ 0`` (``-inf`` if ``H`` is not positive)."""
    H = forms.H(kappa1, kappa2)
    if not _is_pd(H):
        return -np.inf
    A = -(H @ forms.B + forms.B.conj().T @ H)
    return _min_geneig(0.5 * (A + A.conj().T), H) / forms.r


def source_constant(forms: _Forms, kappa1, kappa2, lam) -> float:
    """``sup_h hᴴ H M⁻¹ H h / ‖ν^{-1/2}h‖²`` over microscopic ``h``, ``M = -(HB+BᴴH) - λ r H``."""
    H = forms.H(kappa1, kappa2)
    M = -(H @ forms.B + forms.B.conj().T @ H) - lam * forms.r * H
    M = 0.5 * (M + M.conj().T)
    Z = sla.null_space(forms.Q.T)
    HZ = H @ Z
    num = HZ.conj().T @ np.linalg.solve(M, HZ)
    den = Z.T @ (Z / forms.nu[:, None])
    num = 0.5 * (num + num.conj().T)
    return float(sla.eigh(num, den, eigvals_only=True)[-1])


def free_energy_constants(forms: _Forms, kappa1: float, lam_fr: float):
    """Constant ``C`` of the free-energy inequality at dissipation rate ``lam_fr``.

    The inequality reads ``d/dt Re E_free + λ D_mac ≤ C (‖{I-P}u‖² + ‖ν^{-1/2}h‖²)``
    with a microscopic source ``h``. Returns ``inf`` when the left side is not
    negative on macroscopic states, i.e. no ``C`` exists.
    """
    Hf = kappa1 * forms.F1 + forms.F3
    Bs = forms.B
    Qf = Hf @ Bs + Bs.conj().T @ Hf + lam_fr * forms.Dmac
    Qf = 0.5 * (Qf + Qf.conj().T)
    Z = sla.null_space(forms.Q.T)
    # unknowns (u, h) with h = Z η; form [[Qf, Hf Z], [Zᴴ Hf, 0]]
    top = np.hstack([Qf, Hf @ Z])
    bot = np.hstack([Z.T @ Hf, np.zeros((Z.shape[1], Z.shape[1]))])
    G = np.vstack([top, bot])
    G = 0.5 * (G + G.conj().T)
    Dn = sla.block_diag(forms.Pi, Z.T @ (Z / forms.nu[:, None]))
    # restrict the numerator to the macroscopic directions where Dn vanishes
    Qm = forms.Q.T @ Qf @ forms.Q
    if np.max(np.linalg.eigvalsh(0.5 * (Qm + Qm.conj().T))) >= -1e-12:
        return np.inf
    # Schur complement removes macroscopic directions exactly
    T = np.vstack([forms.Q, np.zeros((Z.shape[1], forms.Q.shape[1]))])
    R = sla.null_space(T.conj().T)
    Gmm = T.conj().T @ G @ T
    Gmr = T.conj().T @ G @ R
    Grr = R.conj().T @ G @ R
    S = Grr - Gmr.conj().T @ np.linalg.solve(Gmm, Gmr)
    Dr = R.conj().T @ Dn @ R
    S = 0.5 * (S + S.conj().T)
    return max(0.0, float(sla.eigh(S, 0.5 * (Dr + Dr.conj().T), eigvals_only=True)[-1]))


# ---------------------------------------------------------------------------
# calibration


DEFAULT_KAPPA1 = tuple(2.0**j for j in range(-2, 7))
DEFAULT_KAPPA2 = tuple(2.0 ** -j for j in range(0, 25))


def random_states(grid: VelocityGrid, count: int, rng: np.random.Generator, k=None) -> np.ndarray:
    """Complex random slices, white in the scaled coordinates and normalized so
    ``‖u‖² + |a+nc|²/|k|² = 1``."""
    z = rng.standard_normal((count, grid.size)) + 1j * rng.standard_normal((count, grid.size))
    u = z / grid.sqrt_w
    if k is not None:
        E0, _, _ = energy_components(grid, np.asarray(k, float), u)
    else:
        E0 = np.sum(grid.weights * np.abs(u) ** 2, axis=-1)
    return u / np.sqrt(E0)[:, None]


def random_micro_source(grid: VelocityGrid, rng: np.random.Generator, count: int = 1) -> np.ndarray:
    h = random_states(grid, count, rng)
    h = project(grid, h, "I_minus_P")
    return h / np.sqrt(np.sum(grid.weights * np.abs(h) ** 2 / 1.0, axis=-1))[:, None]


def _trajectory_components(op, u0, horizon, max_steps, source=None, dt_fraction=1.0):
    dt = op.max_dt() * dt_fraction
    nsteps = int(min(max_steps, max(20, np.ceil(horizon / dt))))
    ts, us = evolve(op, u0, dt, nsteps, source)
    E0, F1, F3 = energy_components(op.grid, op.k, us)
    return dt, E0, F1, F3, us


def calibrate_functional(backend: CollisionBackend, grid: VelocityGrid | None = None, k_samples=(0.05, 0.5, 1, 5, 20),
                         trajectories: int = 20, seed: int = 0, horizon: float = 10.0, max_steps: int = 2000,
                         kappa1_grid=DEFAULT_KAPPA1, kappa2_grid=DEFAULT_KAPPA2, matrix_candidates: int = 8,
                         safety: float = 0.5, dt_fraction: float = 1.0) -> EnergyFunctionalParams:
    """Search ``(κ₁, κ₂)`` and certify a decay constant ``λ``.

    For each sampled ``k``, random states are evolved with ``h = 0`` and the
    largest ``λ`` with ``E(t+dt) ≤ E(t)(1 - λ r dt)`` at every step is
    recorded. The best few pairs are then checked against the matrix
    inequality ``HB + BᴴH + λ r H ≼ 0``; a pair passing it is preferred
    because that certificate covers every state, not only sampled ones.
    The returned ``lam`` is ``safety`` times the certified value.
    """
    grid = backend.grid if grid is None else grid
    rng = np.random.default_rng(seed)
    ks = [np.r_[float(k), np.zeros(grid.dim - 1)] if np.ndim(k) == 0 else np.asarray(k, float) for k in k_samples]
    if not ks:
        raise CalibrationError("k_samples is empty")
    K1, K2 = np.meshgrid(np.asarray(kappa1_grid, float), np.asarray(kappa2_grid, float), indexing="ij")
    K1, K2 = K1.ravel(), K2.ravel()
    lam_traj = np.full(len(K1), np.inf)
    ops = []
    for k in ks:
        op = assemble_mode_operator(k, backend)
        ops.append(op)
        u0 = random_states(grid, trajectories, rng, k)
        dt, E0, F1, F3, _ = _trajectory_components(op, u0, horizon, max_steps, dt_fraction=dt_fraction)
        # E for every (κ₁, κ₂): shape (combos, steps, states)
        E = E0[None] + K2[:, None, None] * (K1[:, None, None] * F1[None] + F3[None])
        ok = np.all(E > 0, axis=(1, 2))
        ratio = (1.0 - E[:, 1:] / E[:, :-1]) / (dt * op.r)
        lam_k = np.where(ok, ratio.min(axis=(1, 2)), -np.inf)
        lam_traj = np.minimum(lam_traj, lam_k)
    order = np.argsort(-lam_traj)
    best = order[0]
    if not lam_traj[best] > 0:
        raise CalibrationError(f"no (κ₁, κ₂) in the search grid certifies λ > 0 (best {lam_traj[best]:.3e})")

    chosen, kind, lam_mat = best, "trajectory", None
    if grid.size <= 1500:
        forms = [_Forms(op) for op in ops]
        best_mat = -np.inf
        for idx in order[:matrix_candidates]:
            if not lam_traj[idx] > 0:
                break
            lm = min(matrix_certificate(f, K1[idx], K2[idx]) for f in forms)
            if lm > best_mat:
                best_mat, best_idx = lm, idx
        if best_mat > 0:
            chosen, kind, lam_mat = best_idx, "matrix", best_mat
    else:
        forms = None

    k1, k2c = float(K1[chosen]), float(K2[chosen])
    lam_cert = min(lam_traj[chosen], lam_mat) if lam_mat is not None else lam_traj[chosen]
    lam = safety * float(lam_cert)
    params = EnergyFunctionalParams(kappa1=k1, kappa2=k2c, lam=lam, certificate=kind,
                                    lam_matrix=lam_mat, lam_trajectory=float(lam_traj[chosen]),
                                    k_samples=[list(map(float, k)) for k in ks], dt_fraction=dt_fraction,
                                    grid=grid.describe())
    lam_hat = backend.certified_coercivity
    if lam_hat is None:
        from .collision_ops import coercivity_estimate

        lam_hat = coercivity_estimate(backend)
    params.micro_bound = {"lam": float(lam_hat), "C": float(1.0 / lam_hat)}

    if forms is not None:
        l1, l2, C = np.inf, 0.0, 0.0
        for f in forms:
            H = f.H(k1, k2c)
            w = sla.eigh(H, f.H0, eigvals_only=True)
            l1, l2 = min(l1, w[0]), max(l2, w[-1])
            if kind == "matrix":
                C = max(C, source_constant(f, k1, k2c, lam))
        params.lambda1, params.lambda2 = float(l1), float(l2)
        lam_fr = lam_cert * k2c * 0.25
        Cfr = max(free_energy_constants(f, k1, lam_fr) for f in forms)
        params.free_energy_bound = {"lam": float(lam_fr), "C": float(Cfr), "certified": bool(np.isfinite(Cfr))}
    else:
        C = 0.0
        samples = random_states(grid, 100, rng)
        ratios = []
        for op in ops:
            E0, F1, F3 = energy_components(grid, op.k, samples)
            ratios.append((E0 + k2c * (k1 * F1 + F3)) / E0)
        params.lambda1, params.lambda2 = float(np.min(ratios)), float(np.max(ratios))
        params.free_energy_bound = {"lam": None, "C": None, "certified": False}
    if kind != "matrix":
        C = _empirical_source_constant(ops, params, rng, trajectories, horizon, max_steps, dt_fraction)
    params.C = float(C)
    return params


def _empirical_source_constant(ops, params, rng, trajectories, horizon, max_steps, dt_fraction) -> float:
    """Source constant fitted on trajectories with constant microscopic sources, doubled."""
    worst = 0.0
    for op in ops:
        g = op.grid
        u0 = random_states(g, trajectories, rng, op.k)
        h = random_micro_source(g, rng, trajectories)
        dt, E0, F1, F3, _ = _trajectory_components(op, u0, horizon, max_steps, source=h, dt_fraction=dt_fraction)
        E = E0 + params.kappa2 * (params.kappa1 * F1 + F3)
        S = np.sum(g.weights * np.abs(h) ** 2 / op.backend.nu, axis=-1)
        excess = E[1:] - E[:-1] * (1.0 - params.lam * op.r * dt)
        worst = max(worst, float(np.max(excess / (dt * S[None, :]))))
    return 2.0 * worst


# ---------------------------------------------------------------------------
# diagnostics


def spectrum(op: ModeOperator) -> np.ndarray:
    ev = np.linalg.eigvals(op.dense())
    return ev[np.argsort(-ev.real)]


@dataclass
class AuditReport:
    worst_margin_combined: float
    worst_margin_micro: float
    worst_margin_free_energy: float | None
    steps: int
    dt: float
    monotone: bool
    details: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        vals = [self.worst_margin_combined, self.worst_margin_micro]
        if self.worst_margin_free_energy is not None:
            vals.append(self.worst_margin_free_energy)
        return min(vals)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)


def _simpson_pairs(y, dt):
    """Integrals of ``y`` over consecutive step pairs ``[t_j, t_{j+2}]``, j even."""
    return dt / 3.0 * (y[0:-2:2] + 4.0 * y[1:-1:2] + y[2::2])


def lyapunov_audit(op: ModeOperator, times, states, params: EnergyFunctionalParams, source=None, tol: float = 1e-6):
    """Check the three dissipation inequalities along a recorded trajectory.

    ``states`` has shape ``(steps+1, ..., N)`` with a uniform step.
    ``source`` is the constant microscopic forcing used to produce the
    trajectory (same batch shape as one state) or ``None``.

    Margins are ``right side - left side`` of each inequality integrated over
    pairs of steps with Simpson's rule, divided by the initial value of
    ``‖u‖² + |a+nc|²/|k|²``; negative margins are violations.
    """
    g = op.grid
    times = np.asarray(times)
    states = np.asarray(states)
    nsteps = len(times) - 1
    if nsteps < 2:
        raise ValueError("audit needs at least two steps")
    if nsteps % 2:
        states, times, nsteps = states[:-1], times[:-1], nsteps - 1
    dt = float(times[1] - times[0])
    E0, F1, F3 = energy_components(g, op.k, states)
    scale = np.maximum(E0[0], 1e-300)
    E = E0 + params.kappa2 * (params.kappa1 * F1 + F3)
    Ef = params.kappa1 * F1 + F3
    nu = op.backend.nu
    micro = project(g, states, "I_minus_P")
    D_micro = np.sum(g.weights * nu * np.abs(micro) ** 2, axis=-1)
    micro_sq = np.sum(g.weights * np.abs(micro) ** 2, axis=-1)
    coef = states @ functionals(g).coef_rows.T
    n = g.dim
    rho = coef[..., 0] + n * coef[..., n + 1]
    D_mac = op.r * (np.sum(np.abs(coef[..., 1 : n + 1]) ** 2, axis=-1) + np.abs(coef[..., n + 1]) ** 2) + np.abs(rho) ** 2
    if source is None:
        S = np.zeros_like(E0)
    else:
        S = np.broadcast_to(np.sum(g.weights * np.abs(source) ** 2 / nu, axis=-1), E0.shape)
    dE = E[2::2] - E[:-2:2]
    combined = params.C * _simpson_pairs(S, dt) - params.lam * op.r * _simpson_pairs(E, dt) - dE
    lu = params.micro_bound
    micro_bound = (lu["C"] * _simpson_pairs(S, dt) - lu["lam"] * _simpson_pairs(D_micro, dt)
               - (E0[2::2] - E0[:-2:2]))
    fr = params.free_energy_bound
    if fr.get("certified"):
        free = (fr["C"] * _simpson_pairs(micro_sq + S, dt) - fr["lam"] * _simpson_pairs(D_mac, dt)
                - (Ef[2::2] - Ef[:-2:2]))
        free_worst = float(np.min(free / scale))
    else:
        free_worst = None
    mono = bool(np.all(np.diff(E, axis=0) <= tol * scale)) if source is None else True
    return AuditReport(
        worst_margin_combined=float(np.min(combined / scale)),
        worst_margin_micro=float(np.min(micro_bound / scale)),
        worst_margin_free_energy=free_worst,
        steps=nsteps,
        dt=dt,
        monotone=mono,
        details={"k": op.k.tolist(),
                 "E_final_over_initial": float(np.max(np.divide(E[-1], E[0], out=np.zeros_like(E[0]), where=E[0] > 0)))},
    )


def continuity_residual(op: ModeOperator, times, states) -> float:
    """Max of ``|d/dt(a+nc) + i k·b|`` with a centered difference of the trajectory."""
    g, n = op.grid, op.grid.dim
    coef = np.asarray(states) @ functionals(g).coef_rows.T
    rho = coef[..., 0] + n * coef[..., n + 1]
    b = coef[..., 1 : n + 1]
    dt = times[1] - times[0]
    drho = (rho[2:] - rho[:-2]) / (2 * dt)
    return float(np.max(np.abs(drho + 1j * np.einsum("j,...j->...", op.k, b[1:-1]))))


def audit_suite(backend: CollisionBackend, params: EnergyFunctionalParams, k_samples=(0.05, 0.5, 1, 5, 20),
                states: int = 20, seed: int = 7, horizon: float = 10.0, max_steps: int = 2000, tol: float = 1e-6):
    """Audit ``states`` random trajectories per ``|k|`` (along ``e₁``), without and with a microscopic source."""
    g = backend.grid
    rng = np.random.default_rng(seed)
    rows = []
    for k in k_samples:
        op = assemble_mode_operator(np.r_[k, np.zeros(g.dim - 1)], backend)
        u0 = random_states(g, states, rng, op.k)
        dt = op.max_dt()
        ns = int(min(max_steps, np.ceil(horizon / dt)))
        ns += ns % 2
        for h in (None, random_micro_source(g, rng, states)):
            ts, us = evolve(op, u0, dt, ns, h)
            r = lyapunov_audit(op, ts, us, params, source=h, tol=tol)
            rows.append({"k": float(k), "source": h is not None, "combined": r.worst_margin_combined,
                         "micro_bound": r.worst_margin_micro, "free_energy": r.worst_margin_free_energy,
                         "monotone": r.monotone, "worst": r.worst})
    return rows
