"""Penalty dual decomposition for the joint beamforming/trajectory problem.

The solver works on an equivalent, rescaled copy of the problem so that the
received coefficients, the sensing auxiliary and the precoders are all of
order one (see :class:`Units`).  Every block update below is a pure function
of arrays with an optional leading slot axis, so all ``T`` slots are updated
in one vectorised call.

Shapes (per slot, ``I = K + S``):

=========  ==================  =============================
``F``      (Mt*Nt, Mt*Nrf)     block-diagonal analog beamformer
``W``      (Mt*Nrf, I)         digital beamformer
``P``      (K, I)              received coefficients h_k^H F w_i
``V``      (Mt*Nt, I)          effective precoder F W
``Z``      (Mr*Nr, I)          sensing echo A F W
``H``      (Mt*Nt, K)          stacked user channels
``A``      (Mr*Nr, Mt*Nt)      stacked sensing matrix
=========  ==================  =============================
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels, metrics
from .errors import NonFiniteValue
from .scenario import Scenario, all_channels, init_trajectory, make_rng

log = logging.getLogger(__name__)

LN2 = np.log(2.0)


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------

@dataclass
class SolverConfig:
    rho0: float = 0.3
    shrink_xi: float = 0.8
    eta: float = 1e-4
    eps1: float = 1e-6
    eps2: float = 1e-8
    n1_max: int = 100
    n2_max: int = 100
    mm_iters_p: int = 50
    mm_iters_z: int = 50
    bcd_iters_f: int = 50
    sca_iters_q: int = 3
    inner_tol: float = 1e-8
    trust_region: float = 2.0
    seed: int = 0
    update_trajectory: bool = True
    fully_digital: bool = False
    normalize: bool = True
    record_blocks: bool = False

    def problems(self):
        out = []
        if not 0 < self.shrink_xi < 1:
            out.append("shrink_xi must lie in (0, 1)")
        for name in ("rho0", "eta", "eps1", "eps2", "inner_tol"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be > 0")
        if self.trust_region < 0:
            out.append("trust_region must be >= 0")
        for name in ("n1_max", "n2_max", "mm_iters_p", "mm_iters_z", "bcd_iters_f", "sca_iters_q"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        return out

    def replace(self, **changes) -> "SolverConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class Units:
    """Reference magnitudes of the rescaled problem.

    Digital precoders are expressed in units of ``sqrt(power)``, received
    coefficients in units of ``user`` and sensing echoes in units of
    ``sensing``; noise powers and thresholds are divided accordingly, so
    every SINR, SNR and rate is unchanged.
    """

    power: float = 1.0
    user: float = 1.0
    sensing: float = 1.0

    @classmethod
    def for_scenario(cls, scenario: Scenario) -> "Units":
        p = scenario.params
        power = float(np.max(scenario.power_budget))
        H2 = p.altitude**2
        return cls(power=power,
                   user=float(np.sqrt(p.ref_pathloss / H2 * power)),
                   sensing=float(np.sqrt(p.radar_gain / H2**2 * power)))

    @property
    def h_scale(self) -> float:
        return np.sqrt(self.power) / self.user

    @property
    def a_scale(self) -> float:
        return np.sqrt(self.power) / self.sensing


@dataclass
class SolverVariables:
    Q: np.ndarray
    F: np.ndarray
    W: np.ndarray
    P: np.ndarray
    V: np.ndarray
    Z: np.ndarray

    def copy(self) -> "SolverVariables":
        return SolverVariables(*(np.array(getattr(self, n)) for n in ("Q", "F", "W", "P", "V", "Z")))


@dataclass
class DualState:
    U: np.ndarray
    Y: np.ndarray
    T: np.ndarray
    rho: np.ndarray

    def copy(self) -> "DualState":
        return DualState(self.U.copy(), self.Y.copy(), self.T.copy(), self.rho.copy())


class Problem:
    """Fixed, rescaled data of one solve."""

    def __init__(self, scenario: Scenario, config: SolverConfig):
        self.scenario = scenario
        self.config = config
        self.units = Units.for_scenario(scenario) if config.normalize else Units()
        u = self.units
        self.noise = scenario.noise_user / u.user**2
        self.sense_target = scenario.gamma_s * scenario.params.noise_sensing / u.sensing**2
        self.budget = scenario.power_budget / u.power
        self.weights = scenario.weights
        self.Mt, self.Nt, self.Nrf = scenario.Mt, scenario.Nt, scenario.Nrf
        self.mask = metrics.block_diag_mask(self.Mt, self.Nt, self.Nrf)
        if config.fully_digital:
            self.alphabet = None
        else:
            self.alphabet = scenario.phase_mode.alphabet() if scenario.phase_mode.is_discrete else None

    def channels(self, Q):
        H, A = all_channels(Q, self.scenario)
        return H * self.units.h_scale, A * self.units.a_scale

    def to_physical(self, F, W) -> metrics.Beamformers:
        return metrics.Beamformers(F=np.array(F), W=np.array(W) * np.sqrt(self.units.power))


@dataclass
class SolutionTrace:
    """Per-outer-iteration history plus the final feasibility report."""

    rows: list = field(default_factory=list)
    block_steps: list = field(default_factory=list)
    inner_al: list = field(default_factory=list)
    report: Optional[metrics.FeasibilityReport] = None
    status: str = "IterationCapped"
    subsolver_warnings: int = 0

    def column(self, name):
        return np.array([row[name] for row in self.rows])


@dataclass
class Solution:
    scenario: Scenario
    Q: np.ndarray
    beamformers: metrics.Beamformers
    variables: SolverVariables
    duals: DualState
    status: str
    wsr: float
    report: metrics.FeasibilityReport
    outer_iterations: int
    inner_iterations: int


# ---------------------------------------------------------------------------
# objective pieces
# ---------------------------------------------------------------------------

def _herm(X):
    return np.conj(np.swapaxes(X, -1, -2))


def _fro2(X):
    return np.sum(np.abs(X) ** 2, axis=(-2, -1))


def rates_from_P(P, noise):
    return np.log2(1.0 + metrics.sinr_from_coefficients(P, noise))


def al_objective(v: SolverVariables, d: DualState, H, A, weights, noise, per_slot=False):
    """Augmented Lagrangian: weighted rate of P minus the three scaled penalties."""
    G = v.F @ v.W
    rho = d.rho
    pen = (_fro2(v.P - _herm(H) @ G + rho[:, None, None] * d.U)
           + _fro2(v.V - G + rho[:, None, None] * d.Y)
           + _fro2(v.Z - A @ G + rho[:, None, None] * d.T))
    slot = rates_from_P(v.P, noise) @ weights - pen / (2.0 * rho)
    return slot if per_slot else float(np.sum(slot))


def residuals(v: SolverVariables, H, A):
    """Primal residuals r_P, r_V, r_Z and the violation E(t) = max of inf-norms."""
    G = v.F @ v.W
    rP = v.P - _herm(H) @ G
    rV = v.V - G
    rZ = v.Z - A @ G
    E = np.maximum.reduce([np.abs(r).max(axis=(-2, -1)) for r in (rP, rV, rZ)])
    return rP, rV, rZ, E


def dual_penalty_step(d: DualState, rP, rV, rZ, E, eta: float, xi: float) -> DualState:
    """Multiplier ascent on slots with E(t) <= eta, penalty shrink elsewhere."""
    ok = np.asarray(E) <= eta
    inv = (1.0 / d.rho)[:, None, None]
    sel = ok[:, None, None]
    return DualState(
        U=np.where(sel, d.U + inv * rP, d.U),
        Y=np.where(sel, d.Y + inv * rV, d.Y),
        T=np.where(sel, d.T + inv * rZ, d.T),
        rho=np.where(ok, d.rho, xi * d.rho),
    )


# ---------------------------------------------------------------------------
# block updates
# ---------------------------------------------------------------------------

def w_objective(W, F, H, A, Gamma, Upsilon, Lam):
    G = F @ W
    return _fro2(_herm(H) @ G - Gamma) + _fro2(G - Upsilon) + _fro2(A @ G - Lam)


def update_W(F, H, A, Gamma, Upsilon, Lam, rcond=1e-12):
    """Closed-form least-squares digital beamformer (F^H Phi F)^+ F^H Xi."""
    HF = _herm(H) @ F
    AF = A @ F
    gram = _herm(F) @ F + _herm(AF) @ AF + _herm(HF) @ HF
    rhs = _herm(HF) @ Gamma + _herm(F) @ Upsilon + _herm(AF) @ Lam
    return np.linalg.pinv(gram, rcond=rcond, hermitian=True) @ rhs


def f_matrices(H, A, W, Gamma, Upsilon, Lam):
    """B, C, D of the analog-beamformer trace problem."""
    n = H.shape[-2]
    B = np.eye(n) + _herm(A) @ A + H @ _herm(H)
    Xi = H @ Gamma + _herm(A) @ Lam + Upsilon
    C = Xi @ _herm(W)
    D = W @ _herm(W)
    return B, C, D


def f_objective(F, B, C, D):
    """Tr(F^H B F D) - 2 Re Tr(F^H C)."""
    quad = np.real(np.trace(_herm(F) @ B @ F @ D, axis1=-2, axis2=-1))
    lin = np.real(np.sum(np.conj(F) * C, axis=(-2, -1)))
    return quad - 2.0 * lin


def quantize_phase(b, alphabet, tie_tol=1e-15):
    """Alphabet point maximising Re{conj(b) f}; ties go to the smaller index."""
    vals = np.real(np.conj(np.asarray(b))[..., None] * alphabet)
    best = vals.max(axis=-1, keepdims=True)
    scale = np.maximum(1.0, np.abs(b))[..., None]
    idx = np.argmax(vals >= best - tie_tol * scale, axis=-1)
    return alphabet[idx]


def f_entry_update(b, current, alphabet=None):
    """Element-wise optimum: phase of b (continuous) or nearest alphabet point."""
    b = np.asarray(b)
    if alphabet is None:
        new = np.exp(1j * np.angle(b))
    else:
        new = quantize_phase(b, alphabet)
    return np.where(b == 0, current, new)


def bcd_entries(mask):
    """On-block (p, q) pairs: row-major inside each block, blocks in UAV order."""
    rows, cols = np.nonzero(mask)
    # np.nonzero is row-major over the whole matrix; for a block-diagonal mask
    # the rows of block m all precede those of block m+1, so the order holds.
    return list(zip(rows.tolist(), cols.tolist()))


def update_F(F, B, C, D, mask, alphabet=None, iters=50, tol=1e-8, history=None):
    """Block coordinate descent over the on-block entries of F.

    One sweep visits every on-block entry once.  Stops when the relative
    objective change of a sweep drops to ``tol`` or after ``iters`` sweeps.

    The sweep runs in entry space: with f the on-block entries and
    m = [B F D] at those entries, changing entry e by delta moves m by
    delta * B[:, p_e] D[q_e, :] restricted to the entries.
    """
    F = np.array(F, dtype=complex)
    batch = F.shape[:-2]
    F3 = F.reshape((-1,) + F.shape[-2:])
    B3 = np.broadcast_to(B, batch + B.shape[-2:]).reshape((-1,) + B.shape[-2:])
    C3 = np.broadcast_to(C, F.shape).reshape(F3.shape)
    D3 = np.broadcast_to(D, batch + D.shape[-2:]).reshape((-1,) + D.shape[-2:])
    rows, cols = (np.asarray(x) for x in zip(*bcd_entries(mask)))
    n_e = rows.size

    # coupling[e] (n_e, T): effect on every entry of a unit change of entry e
    coupling = np.ascontiguousarray(
        np.transpose(B3[:, rows[:, None], rows[None, :]] * D3[:, cols[None, :], cols[:, None]],
                     (2, 1, 0)))
    diag = np.ascontiguousarray(coupling[np.arange(n_e), np.arange(n_e)])
    ce = np.ascontiguousarray(C3[:, rows, cols].T)
    fe = np.ascontiguousarray(F3[:, rows, cols].T)

    def objective(m):
        return np.real(np.sum(np.conj(fe) * (m - 2.0 * ce), axis=0))

    me = np.ascontiguousarray((B3 @ F3 @ D3)[:, rows, cols].T)
    obj = objective(me)
    if history is not None:
        history.append(obj.reshape(batch))
    # slots stop individually, so each result depends on its own slot only
    active = np.ones(fe.shape[1], dtype=bool)
    for _ in range(iters):
        _kernels.sweep(fe, me, ce, coupling, diag, alphabet, active)
        # refresh to keep the running products exact
        F3[:, rows, cols] = fe.T
        me = np.ascontiguousarray((B3 @ F3 @ D3)[:, rows, cols].T)
        new_obj = objective(me)
        if history is not None:
            history.append(new_obj.reshape(batch))
        change = np.abs(obj - new_obj) / np.maximum(np.abs(new_obj), 1e-300)
        obj = new_obj
        active &= change > tol
        if not active.any():
            break
    F3[:, rows, cols] = fe.T
    return F3.reshape(F.shape)


def project_power(X, budget, Mt: int):
    """Scale each UAV's rows of X onto its power ball (Frobenius projection)."""
    X = np.asarray(X)
    shape = X.shape
    blocks = X.reshape(shape[:-2] + (Mt, -1, shape[-1]))
    norm2 = np.sum(np.abs(blocks) ** 2, axis=(-2, -1))
    budget = np.asarray(budget, dtype=float)
    with np.errstate(divide="ignore"):
        factor = np.minimum(np.sqrt(budget) / np.sqrt(norm2), 1.0)
    factor = np.where(norm2 > 0, factor, 1.0)
    return (blocks * factor[..., None, None]).reshape(shape)


def update_V(X, budget, Mt: int):
    return project_power(X, budget, Mt)


def _z_restart(A, n_cols, target):
    """Leading left singular direction of A, replicated over columns, norm sqrt(target)."""
    u, _, _ = np.linalg.svd(A)
    lead = u[..., :, 0]
    Z = np.repeat(lead[..., None], n_cols, axis=-1)
    return Z * np.sqrt(target / n_cols)


def update_Z(Z0, Omega, target, A=None, iters=50, tol=1e-8):
    """MM iterations for min ||Z - Omega||^2 s.t. ||Z||^2 >= target.

    Each step solves the problem with the constraint linearised at the
    current iterate; a zero iterate is restarted from the leading left
    singular direction of ``A``.
    """
    Omega = np.asarray(Omega)
    if target <= 0:
        return Omega.copy()
    Z = np.array(Z0, dtype=complex)
    n2 = _fro2(Z)
    zero = n2 == 0
    if np.any(zero):
        if A is None:
            raise ValueError("zero Z iterate and no sensing matrix to restart from")
        restart = _z_restart(A, Omega.shape[-1], target)
        Z = np.where(zero[..., None, None], restart, Z)
    active = np.ones(Z.shape[:-2], dtype=bool)
    for _ in range(max(iters, 1)):
        n2 = _fro2(Z)
        gamma_p = 0.5 * (target + n2)
        inner = np.real(np.sum(np.conj(Z) * Omega, axis=(-2, -1)))
        step = np.maximum(gamma_p - inner, 0.0) / n2
        Z_new = Omega + step[..., None, None] * Z
        change = np.sqrt(_fro2(Z_new - Z)) / np.maximum(np.sqrt(_fro2(Z_new)), 1e-300)
        Z = np.where(active[..., None, None], Z_new, Z)
        active = active & (change > tol)
        if not active.any():
            break
    return Z


def rate_surrogate(p_row, k: int, sigma_k2: float, expansion):
    """Concave minorant c*sum|p_i|^2 + Re{d^H p} + const of R_k at ``expansion``."""
    p0 = np.asarray(expansion, dtype=complex)
    mag2 = np.abs(p0) ** 2
    alpha = mag2.sum() - mag2[k] + sigma_k2
    beta = alpha + mag2[k]
    c = -mag2[k] / (alpha * beta * LN2)
    d = np.zeros_like(p0)
    d[k] = 2.0 * p0[k] / (alpha * LN2)
    r0 = np.log2(1.0 + mag2[k] / alpha)
    const = r0 - c * mag2.sum() - np.real(np.vdot(d, p0))
    return float(c), d, float(const)


def surrogate_value(p_row, c, d, const):
    p = np.asarray(p_row)
    return c * np.sum(np.abs(p) ** 2) + np.real(np.vdot(d, p)) + const


def p_objective(P, Psi, rho, weights, noise):
    rho = np.asarray(rho, dtype=float)
    return rates_from_P(P, noise) @ weights - _fro2(P - Psi) / (2.0 * rho)


def update_P(P0, Psi, rho, weights, noise, iters=50, tol=1e-8, history=None):
    """MM on the weighted rate plus proximal term; closed-form per element."""
    P = np.array(P0, dtype=complex)
    Psi = np.asarray(Psi)
    rho = np.asarray(rho, dtype=float)
    K = P.shape[-2]
    kk = np.arange(K)
    w = np.asarray(weights, dtype=float)
    inv_rho = (1.0 / rho)[..., None, None] if rho.ndim else 1.0 / rho
    zero_w = (w == 0)[:, None]
    obj = p_objective(P, Psi, rho, w, noise)
    if history is not None:
        history.append(obj)
    active = np.ones(P.shape[:-2], dtype=bool)
    for _ in range(iters):
        mag2 = np.abs(P) ** 2
        sig = mag2[..., kk, kk]
        alpha = mag2.sum(axis=-1) - sig + noise
        beta = alpha + sig
        c = -sig / (alpha * beta * LN2)
        d = np.zeros_like(P)
        d[..., kk, kk] = 2.0 * P[..., kk, kk] / (alpha * LN2)
        num = w[:, None] * d + inv_rho * Psi
        den = inv_rho - 2.0 * (w * c)[..., None]
        P_new = np.where(zero_w, Psi, num / den)
        P = np.where(np.asarray(active)[..., None, None], P_new, P)
        new_obj = p_objective(P, Psi, rho, w, noise)
        if history is not None:
            history.append(new_obj)
        change = np.abs(new_obj - obj) / np.maximum(np.abs(new_obj), 1e-300)
        obj = new_obj
        active = active & (change > tol)
        if not np.any(active):
            break
    return P


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def initial_variables(problem: Problem, rng: np.random.Generator) -> SolverVariables:
    """Seeded random beamformers at full power with consistent auxiliaries."""
    sc = problem.scenario
    T, Mt, I = sc.T, sc.Mt, sc.n_streams
    Q = init_trajectory(sc)
    if problem.config.fully_digital:
        F = np.broadcast_to(np.eye(Mt * sc.Nt, dtype=complex), (T, Mt * sc.Nt, Mt * sc.Nt)).copy()
    else:
        F = np.zeros((T, Mt * sc.Nt, Mt * sc.Nrf), dtype=complex)
        n_on = int(problem.mask.sum())
        if problem.alphabet is None:
            vals = np.exp(1j * rng.uniform(0.0, 2 * np.pi, size=(T, n_on)))
        else:
            vals = problem.alphabet[rng.integers(0, len(problem.alphabet), size=(T, n_on))]
        F[:, problem.mask] = vals
    n_rf = F.shape[-1]
    W = (rng.standard_normal((T, n_rf, I)) + 1j * rng.standard_normal((T, n_rf, I))) / np.sqrt(2)
    # scale each UAV's digital rows so it transmits at exactly its budget
    Wb = W.reshape(T, Mt, n_rf // Mt, I)
    Fb = [F[:, m * (F.shape[1] // Mt):(m + 1) * (F.shape[1] // Mt),
            m * (n_rf // Mt):(m + 1) * (n_rf // Mt)] for m in range(Mt)]
    for m in range(Mt):
        pw = _fro2(Fb[m] @ Wb[:, m])
        Wb[:, m] *= np.sqrt(problem.budget[m] / pw)[:, None, None]
    W = Wb.reshape(T, n_rf, I)
    H, A = problem.channels(Q)
    G = F @ W
    return SolverVariables(Q=Q, F=F, W=W, P=_herm(H) @ G, V=G,
                           Z=_lift_onto_snr_set(A @ G, A, problem.sense_target))


def _lift_onto_snr_set(Z, A, target):
    """Scale slots with ||Z||^2 below ``target`` up to the sphere.

    The BSUM sweeps only increase the AL from a point that already meets the
    sensing constraint, so the initial Z is made feasible.
    """
    if target <= 0:
        return Z
    n2 = _fro2(Z)
    low = n2 < target
    if not np.any(low):
        return Z
    scale = np.sqrt(target / np.where(n2 > 0, n2, 1.0))
    lifted = np.where((low & (n2 > 0))[..., None, None], Z * scale[..., None, None], Z)
    zero = low & (n2 == 0)
    if np.any(zero):
        lifted = np.where(zero[..., None, None], _z_restart(A, Z.shape[-1], target), lifted)
    return lifted


def initial_duals(problem: Problem, v: SolverVariables) -> DualState:
    T = problem.scenario.T
    return DualState(U=np.zeros_like(v.P), Y=np.zeros_like(v.V), T=np.zeros_like(v.Z),
                     rho=np.full(T, float(problem.config.rho0)))


class _Blocks:
    """One BSUM sweep W -> F -> V -> Z -> P -> Q on a problem."""

    def __init__(self, problem: Problem, trace: SolutionTrace):
        self.problem = problem
        self.cfg = problem.config
        self.trace = trace

    def sweep(self, v: SolverVariables, d: DualState, H, A):
        from .trajectory import sca_update_Q

        pb, cfg = self.problem, self.cfg
        rho = d.rho[:, None, None]
        record = cfg.record_blocks
        al = (lambda: al_objective(v, d, H, A, pb.weights, pb.noise)) if record else None
        before = al() if record else None

        def mark(name):
            nonlocal before
            if record:
                after = al()
                self.trace.block_steps.append((name, before, after))
                before = after

        Gamma, Ups, Lam = v.P + rho * d.U, v.V + rho * d.Y, v.Z + rho * d.T
        v.W = update_W(v.F, H, A, Gamma, Ups, Lam)
        mark("W")
        if not cfg.fully_digital:
            B, C, D = f_matrices(H, A, v.W, Gamma, Ups, Lam)
            v.F = update_F(v.F, B, C, D, pb.mask, pb.alphabet, cfg.bcd_iters_f, cfg.inner_tol)
        mark("F")
        G = v.F @ v.W
        v.V = update_V(G - rho * d.Y, pb.budget, pb.Mt)
        mark("V")
        v.Z = update_Z(v.Z, A @ G - rho * d.T, pb.sense_target, A, cfg.mm_iters_z, cfg.inner_tol)
        mark("Z")
        v.P = update_P(v.P, _herm(H) @ G - rho * d.U, d.rho, pb.weights, pb.noise,
                       cfg.mm_iters_p, cfg.inner_tol)
        mark("P")
        if cfg.update_trajectory and cfg.sca_iters_q > 0:
            Q, info = sca_update_Q(v.Q, G, v.P + rho * d.U, v.Z + rho * d.T, d.rho, pb, cfg)
            self.trace.subsolver_warnings += info.get("stalls", 0)
            if Q is not v.Q:
                v.Q = Q
                H, A = pb.channels(Q)
        mark("Q")
        return H, A


def finalize(problem: Problem, v: SolverVariables):
    """Physical beamformers, scaled per UAV so no power budget is exceeded."""
    bf = problem.to_physical(v.F, v.W)
    sc = problem.scenario
    power = metrics.per_uav_power(bf.V, sc.Mt)
    factor = np.minimum(1.0, np.sqrt(sc.power_budget[None] / power))
    factor = np.where(power > 0, factor, 1.0)
    n_rf = bf.W.shape[1] // sc.Mt
    bf.W = bf.W * np.repeat(factor, n_rf, axis=1)[:, :, None]
    return bf


def solve(scenario: Scenario, config: Optional[SolverConfig] = None, callback=None):
    """Run the PDD outer loop with BSUM inner sweeps.

    Returns ``(Solution, SolutionTrace)``.  ``status`` is ``"Converged"``
    when max_t E(t) <= eps2, ``"IterationCapped"`` otherwise.
    """
    config = config or SolverConfig()
    scenario.validate() if not config.fully_digital else _validate_fd(scenario)
    problem = Problem(scenario, config)
    rng = make_rng(config.seed, stream=2)
    v = initial_variables(problem, rng)
    d = initial_duals(problem, v)
    trace = SolutionTrace()
    blocks = _Blocks(problem, trace)
    H, A = problem.channels(v.Q)
    t_start = time.perf_counter()
    status = "IterationCapped"
    outer = inner_total = 0
    al_prev = al_objective(v, d, H, A, problem.weights, problem.noise)
    while outer < config.n2_max:
        outer += 1
        tau = 0
        while True:
            H, A = blocks.sweep(v, d, H, A)
            tau += 1
            al_new = al_objective(v, d, H, A, problem.weights, problem.noise)
            if not np.isfinite(al_new):
                raise NonFiniteValue(f"augmented Lagrangian is {al_new} at outer {outer}, inner {tau}")
            trace.inner_al.append(al_new)
            rel = abs(al_new - al_prev) / max(abs(al_new), 1e-300)
            al_prev = al_new
            if rel <= config.eps1 or tau >= config.n1_max:
                break
        inner_total += tau
        rP, rV, rZ, E = residuals(v, H, A)
        bf = problem.to_physical(v.F, v.W)
        row = dict(outer_iter=outer, inner_iters=tau, al=al_new,
                   wsr=metrics.wsr(scenario, v.Q, bf),
                   wsr_aux=float(np.sum(rates_from_P(v.P, problem.noise) @ problem.weights)),
                   violation=float(E.max()), rho_min=float(d.rho.min()),
                   rho_max=float(d.rho.max()), seconds=time.perf_counter() - t_start)
        trace.rows.append(row)
        log.debug("outer %d: %s", outer, row)
        if callback is not None:
            callback(row)
        if E.max() <= config.eps2:
            status = "Converged"
            break
        d = dual_penalty_step(d, rP, rV, rZ, E, config.eta, config.shrink_xi)
        al_prev = al_objective(v, d, H, A, problem.weights, problem.noise)

    bf = finalize(problem, v)
    report = metrics.certify(scenario, v.Q, bf, check_phase=not config.fully_digital)
    trace.report = report
    trace.status = status
    sol = Solution(scenario=scenario, Q=v.Q.copy(), beamformers=bf, variables=v, duals=d,
                   status=status, wsr=metrics.wsr(scenario, v.Q, bf), report=report,
                   outer_iterations=outer, inner_iterations=inner_total)
    return sol, trace


def _validate_fd(scenario: Scenario):
    """Fully digital runs use Nrf == Nt, which the hybrid invariant excludes."""
    from .errors import ValidationError

    problems = [p for p in scenario.problems() if not p.startswith("need 1 <= Nrf")]
    if scenario.Nrf != scenario.Nt:
        problems.append("fully digital scheme needs Nrf == Nt")
    if problems:
        raise ValidationError(problems)
