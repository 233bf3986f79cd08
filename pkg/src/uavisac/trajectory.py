"""Trajectory block: tracking cost, its gradient and the SCA trust-region step.

For fixed effective precoders ``G = F W`` and targets ``Gamma``, ``Lam`` the
trajectory only enters through the channels, via the per-slot tracking cost

    L_q(t) = ||H(q(t))^H G(t) - Gamma(t)||_F^2 + ||A(q(t)) G(t) - Lam(t)||_F^2.

Each SCA step linearises sum_t w_t L_q(t), replaces the collision
constraint by its first-order lower bound, adds a trust region and solves
the resulting convex program with a log-barrier Newton method.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import SubsolverStall
from .scenario import Scenario, _phase_step

log = logging.getLogger(__name__)

# feasibility slack (m^2) on the constraints of each convex subproblem
CONSTRAINT_SLACK = 1e-9


# ---------------------------------------------------------------------------
# tracking cost and gradient
# ---------------------------------------------------------------------------

def _geometry(Q, scenario: Scenario):
    """Distances and per-antenna phase slopes for users and target."""
    p = scenario.params
    Mt = scenario.Mt
    H_alt = p.altitude
    tx, rx = Q[:, :Mt], Q[:, Mt:]
    du = tx[:, :, None, :] - scenario.user_positions[:, None, :, :]      # (T, Mt, K, 2)
    dist_u = np.sqrt(np.sum(du**2, axis=-1) + H_alt**2)                  # (T, Mt, K)
    tgt = scenario.target_positions[:, None, :]
    dt = tx - tgt                                                          # (T, Mt, 2)
    dr = rx - tgt                                                          # (T, Mr, 2)
    dist_t = np.sqrt(np.sum(dt**2, axis=-1) + H_alt**2)
    dist_r = np.sqrt(np.sum(dr**2, axis=-1) + H_alt**2)
    return du, dist_u, dt, dist_t, dr, dist_r


def _tracking_parts(Q, G, Gamma, Lam, scenario: Scenario, h_scale: float, a_scale: float):
    p = scenario.params
    Mt, Mr, Nt, Nr, K = scenario.Mt, scenario.Mr, scenario.Nt, scenario.Nr, scenario.K
    T = Q.shape[0]
    kphi = _phase_step(p)
    H_alt = p.altitude
    du, dist_u, dt, dist_t, dr, dist_r = _geometry(Q, scenario)
    nt, nr = np.arange(Nt), np.arange(Nr)

    # conj(h_{m,k}[n]) with scaling, shape (T, Mt, K, Nt)
    hc = (h_scale * np.sqrt(p.ref_pathloss) / dist_u)[..., None] * np.exp(
        -1j * kphi * (H_alt / dist_u)[..., None] * nt)
    Gm = G.reshape(T, Mt, Nt, -1)
    HG = np.einsum("tmkn,tmni->tki", hc, Gm)
    M1 = HG - Gamma

    # stacked target responses
    at_c = np.exp(-1j * kphi * (H_alt / dist_t)[..., None] * nt) / dist_t[..., None]   # conj a_t blocks
    ar = np.exp(1j * kphi * (H_alt / dist_r)[..., None] * nr) / dist_r[..., None]      # (T, Mr, Nr)
    amp = a_scale * np.sqrt(p.radar_gain)
    b = np.einsum("tmn,tmni->ti", at_c, Gm)                                             # a_t^H G
    AG = amp * ar.reshape(T, Mr * Nr)[:, :, None] * b[:, None, :]
    M2 = AG - Lam
    return dict(hc=hc, Gm=Gm, M1=M1, at_c=at_c, ar=ar, amp=amp, b=b, M2=M2,
                du=du, dist_u=dist_u, dt=dt, dist_t=dist_t, dr=dr, dist_r=dist_r,
                kphi=kphi, nt=nt, nr=nr)


def tracking_cost(Q, G, Gamma, Lam, scenario: Scenario, h_scale=1.0, a_scale=1.0):
    """L_q for every slot, shape (T,)."""
    Q = np.asarray(Q, dtype=float)
    parts = _tracking_parts(Q, G, Gamma, Lam, scenario, h_scale, a_scale)
    return (np.sum(np.abs(parts["M1"]) ** 2, axis=(1, 2))
            + np.sum(np.abs(parts["M2"]) ** 2, axis=(1, 2)))


def tracking_grad(Q, G, Gamma, Lam, scenario: Scenario, h_scale=1.0, a_scale=1.0):
    """Analytic gradient of L_q(t) with respect to every UAV position, (T, M, 2).

    Each channel coefficient depends on a UAV position only through its
    distance d to the ground point, via 1/d and the phase n*k*H/d.
    """
    Q = np.asarray(Q, dtype=float)
    s = _tracking_parts(Q, G, Gamma, Lam, scenario, h_scale, a_scale)
    H_alt = scenario.params.altitude
    Mt, Mr, Nr = scenario.Mt, scenario.Mr, scenario.Nr
    T = Q.shape[0]
    kphi, nt, nr = s["kphi"], s["nt"], s["nr"]

    # user term: d conj(h)/dd = conj(h) * (-1/d + j k n H / d^2)
    du = s["dist_u"][..., None]
    dhc = s["hc"] * (-1.0 / du + 1j * kphi * nt * H_alt / du**2)
    dL_du = 2.0 * np.real(np.einsum("tmkn,tmni,tki->tmk", dhc, s["Gm"], np.conj(s["M1"])))
    grad_tx = np.einsum("tmk,tmkc->tmc", dL_du / s["dist_u"], s["du"])

    # sensing term
    M2 = s["M2"].reshape(T, Mr, Nr, -1)
    dr = s["dist_r"][..., None]
    dar = s["ar"] * (-1.0 / dr - 1j * kphi * nr * H_alt / dr**2)
    dL_dr = 2.0 * np.real(s["amp"] * np.einsum("trni,trn,ti->tr", np.conj(M2), dar, s["b"]))
    grad_rx = (dL_dr / s["dist_r"])[..., None] * s["dr"]

    dtt = s["dist_t"][..., None]
    datc = s["at_c"] * (-1.0 / dtt + 1j * kphi * nt * H_alt / dtt**2)
    proj = s["amp"] * np.einsum("trni,trn->ti", np.conj(M2), s["ar"])
    dL_dt = 2.0 * np.real(np.einsum("ti,tmn,tmni->tm", proj, datc, s["Gm"]))
    grad_tx = grad_tx + (dL_dt / s["dist_t"])[..., None] * s["dt"]

    return np.concatenate([grad_tx, grad_rx], axis=1)


def l_q(q_slot, t: int, G, Gamma, Lam, scenario: Scenario, h_scale=1.0, a_scale=1.0) -> float:
    """Tracking cost of a single slot for stacked positions ``q_slot``."""
    Q = np.asarray(q_slot, dtype=float).reshape(1, scenario.M, 2)
    sub = _slot_scenario(scenario, t)
    return float(tracking_cost(Q, np.asarray(G)[None], np.asarray(Gamma)[None],
                               np.asarray(Lam)[None], sub, h_scale, a_scale)[0])


def grad_l_q(q_slot, t: int, G, Gamma, Lam, scenario: Scenario, h_scale=1.0, a_scale=1.0):
    """Gradient of :func:`l_q`, flattened to length 2*(Mt+Mr)."""
    Q = np.asarray(q_slot, dtype=float).reshape(1, scenario.M, 2)
    sub = _slot_scenario(scenario, t)
    g = tracking_grad(Q, np.asarray(G)[None], np.asarray(Gamma)[None], np.asarray(Lam)[None],
                      sub, h_scale, a_scale)
    return g[0].reshape(-1)


def _slot_scenario(scenario: Scenario, t: int):
    class _View:
        pass

    view = _View()
    for name in ("Mt", "Mr", "Nt", "Nr", "K", "params", "M"):
        setattr(view, name, getattr(scenario, name))
    view.user_positions = scenario.user_positions[t:t + 1]
    view.target_positions = scenario.target_positions[t:t + 1]
    return view


# ---------------------------------------------------------------------------
# convex subproblem
# ---------------------------------------------------------------------------

@dataclass
class ConvexSubproblem:
    """Linear cost over the free slots with ball and half-space constraints.

    Constraints are stored as ``f(Y) <= 0`` on the full trajectory ``Y``
    (points indexed by ``t*M + m``):

    * balls: ||Y[ia] - Y[ib] - e||^2 - r^2 <= 0 (``ib = -1`` means no point),
    * half-spaces: sum_j <a_j, Y[idx_j]> - b <= 0.
    """

    center: np.ndarray          # expansion point, (T, M, 2)
    cost: np.ndarray            # linear coefficients, (T, M, 2)
    free: np.ndarray            # boolean mask over points (T*M,)
    ball_a: np.ndarray
    ball_b: np.ndarray
    ball_e: np.ndarray
    ball_r2: np.ndarray
    ball_kind: np.ndarray       # 0 velocity, 1 trust region
    lin_i: np.ndarray
    lin_j: np.ndarray
    lin_c: np.ndarray           # (n, 2) coefficient on Y[i]; Y[j] gets -lin_c
    lin_b: np.ndarray
    delta: float

    @property
    def n_points(self):
        return self.center.shape[0] * self.center.shape[1]

    def objective(self, Q) -> float:
        return float(np.sum(self.cost * (np.asarray(Q) - self.center)))

    def constraint_values(self, Y):
        """All f_i at a full point array Y (n_points, 2)."""
        Yb = np.where((self.ball_b >= 0)[:, None], Y[np.maximum(self.ball_b, 0)], 0.0)
        u = Y[self.ball_a] - Yb - self.ball_e
        fb = np.sum(u**2, axis=1) - self.ball_r2
        fl = np.sum(self.lin_c * (Y[self.lin_i] - Y[self.lin_j]), axis=1) - self.lin_b
        return fb, fl, u


def build_subproblem(Q, grads, scenario: Scenario, delta: float, slack: float = CONSTRAINT_SLACK):
    """Linearised trajectory program around ``Q`` with trust radius ``delta``.

    ``grads`` are the (weighted) tracking-cost gradients, shape (T, M, 2).
    """
    Q = np.asarray(Q, dtype=float)
    T, M, _ = Q.shape
    idx = np.arange(T * M).reshape(T, M)
    free = np.zeros((T, M), dtype=bool)
    free[1:T - 1] = True

    # velocity balls between consecutive slots
    va = idx[1:].reshape(-1)
    vb = idx[:-1].reshape(-1)
    r2_v = np.full(va.size, scenario.max_step**2 + slack)
    # trust-region balls on free points
    ta = idx[1:T - 1].reshape(-1)
    tb = -np.ones_like(ta)
    te = Q[1:T - 1].reshape(-1, 2)
    r2_t = np.full(ta.size, delta**2)

    ball_a = np.concatenate([va, ta])
    ball_b = np.concatenate([vb, tb])
    ball_e = np.concatenate([np.zeros((va.size, 2)), te])
    ball_r2 = np.concatenate([r2_v, r2_t])
    kind = np.concatenate([np.zeros(va.size, int), np.ones(ta.size, int)])

    # linearised separation: d^2 + ||c||^2 - 2 c.(q_m - q_m') - slack <= 0
    d2 = scenario.d_min**2
    pm, pm2 = np.triu_indices(M, k=1)
    c = (Q[1:T - 1, pm] - Q[1:T - 1, pm2]).reshape(-1, 2)
    c[~np.any(c, axis=1)] = (1e-3, 0.0)
    lin_i = idx[1:T - 1, pm].reshape(-1)
    lin_j = idx[1:T - 1, pm2].reshape(-1)
    lin_c = -2.0 * c
    lin_b = -(d2 + np.sum(c**2, axis=1)) + slack

    sub = ConvexSubproblem(center=Q.copy(), cost=np.asarray(grads, dtype=float).copy(),
                           free=free.reshape(-1), ball_a=ball_a, ball_b=ball_b, ball_e=ball_e,
                           ball_r2=ball_r2, ball_kind=kind, lin_i=lin_i, lin_j=lin_j,
                           lin_c=lin_c, lin_b=lin_b, delta=float(delta))
    # keep the expansion point strictly inside: relax any constraint that it
    # already touches (possible only for inputs violating by more than slack)
    fb, fl, _ = sub.constraint_values(Q.reshape(-1, 2))
    tight_b = fb >= 0
    if np.any(tight_b & (kind == 0)):
        sub.ball_r2 = np.where(tight_b & (kind == 0), sub.ball_r2 + fb + slack, sub.ball_r2)
    if np.any(fl >= 0):
        sub.lin_b = np.where(fl >= 0, sub.lin_b + fl + slack, sub.lin_b)
    return sub


@dataclass
class ConvexResult:
    Q: np.ndarray
    objective: float
    kkt_residual: float
    newton_steps: int
    stalled: bool


class _BarrierForm:
    """The subproblem restated on the free points only.

    With x the free positions (n_free, 2): ball residuals are
    u = Db x + u0, half-space values are fl = sum(lin_c * (Dl x)) + fl0.
    """

    def __init__(self, sub: ConvexSubproblem):
        n_pts = sub.n_points
        Y0 = sub.center.reshape(-1, 2)
        fixed = np.where(sub.free[:, None], 0.0, Y0)
        nb, nl = sub.ball_r2.size, sub.lin_b.size
        Db = np.zeros((nb, n_pts))
        Db[np.arange(nb), sub.ball_a] += 1.0
        has_b = sub.ball_b >= 0
        Db[np.arange(nb)[has_b], sub.ball_b[has_b]] -= 1.0
        Dl = np.zeros((nl, n_pts))
        Dl[np.arange(nl), sub.lin_i] += 1.0
        Dl[np.arange(nl), sub.lin_j] -= 1.0
        self.u0 = Db @ fixed - sub.ball_e
        self.fl0 = np.sum(sub.lin_c * (Dl @ fixed), axis=1) - sub.lin_b
        self.Db = Db[:, sub.free]
        self.Dl = Dl[:, sub.free]
        self.r2 = sub.ball_r2
        self.lc = sub.lin_c
        self.cost = sub.cost.reshape(-1, 2)[sub.free]
        self.x0 = Y0[sub.free].copy()
        self.n_con = nb + nl


def _barrier_newton(Db, u0, r2, Dl, lc, fl0, cost, x0, t_bar, mu, gap_target, n_con, max_newton):
    """Damped Newton centring steps along the barrier path.

    Works on the free points x (n, 2) with ball residuals ``u = Db x + u0``
    and half-space values ``fl = sum(lc * (Dl x)) + fl0``.  Written in the
    numpy subset numba compiles.  Returns ``(x, steps, stalled, |g|/t)``.
    """
    n = x0.shape[0]
    x = x0.copy()
    steps = 0
    stalled = False
    g = np.zeros(2 * n)
    DbT = np.ascontiguousarray(Db.T)
    DlT = np.ascontiguousarray(Dl.T)
    while True:
        for _ in range(60):
            u = Db @ x + u0
            fb = np.sum(u * u, axis=1) - r2
            fl = np.sum(lc * (Dl @ x), axis=1) + fl0
            wb = -1.0 / fb
            wl = -1.0 / fl
            gb = 2.0 * u * np.expand_dims(wb, 1)
            gl = lc * np.expand_dims(wl, 1)
            grad = t_bar * cost + DbT @ gb + DlT @ gl
            g[:n] = grad[:, 0]
            g[n:] = grad[:, 1]
            hess = np.zeros((2 * n, 2 * n))
            base = (DbT * (2.0 * wb)) @ Db
            for a in range(2):
                for b in range(a, 2):
                    blk = (DbT * (gb[:, a] * gb[:, b])) @ Db + (DlT * (gl[:, a] * gl[:, b])) @ Dl
                    if a == b:
                        blk = blk + base
                    hess[a * n:(a + 1) * n, b * n:(b + 1) * n] = blk
                    if a != b:
                        hess[b * n:(b + 1) * n, a * n:(a + 1) * n] = blk.T
            try:
                dxf = -np.linalg.solve(hess, g)
            except Exception:
                dxf = -np.linalg.lstsq(hess, g)[0]
            dec2 = -np.dot(g, dxf)
            steps += 1
            if dec2 / 2.0 <= 1e-9:
                break
            dx = np.empty((n, 2))
            dx[:, 0] = dxf[:n]
            dx[:, 1] = dxf[n:]

            # largest step keeping every constraint strictly satisfied
            du = Db @ dx
            qa = np.sum(du * du, axis=1)
            qb = 2.0 * np.sum(u * du, axis=1)
            smax = np.inf
            for i in range(qa.size):
                if qa[i] > 0:
                    disc = max(qb[i] ** 2 - 4.0 * qa[i] * fb[i], 0.0)
                    smax = min(smax, (-qb[i] + np.sqrt(disc)) / (2.0 * qa[i]))
            dfl = np.sum(lc * (Dl @ dx), axis=1)
            for i in range(dfl.size):
                if dfl[i] > 0:
                    smax = min(smax, -fl[i] / dfl[i])
            step = min(1.0, 0.99 * smax)

            # backtracking on the barrier objective
            val = t_bar * np.sum(cost * x) - np.sum(np.log(-fb)) - np.sum(np.log(-fl))
            accepted = False
            while step > 1e-14:
                xn = x + step * dx
                un = Db @ xn + u0
                fbn = np.sum(un * un, axis=1) - r2
                fln = np.sum(lc * (Dl @ xn), axis=1) + fl0
                if np.all(fbn < 0) and np.all(fln < 0):
                    vn = t_bar * np.sum(cost * xn) - np.sum(np.log(-fbn)) - np.sum(np.log(-fln))
                    if vn <= val - 0.25 * step * dec2:
                        accepted = True
                        break
                step *= 0.5
            if not accepted:
                stalled = True
                break
            x = xn
            if steps >= max_newton:
                stalled = True
                break
        gnorm = np.sqrt(np.dot(g, g)) / t_bar
        if stalled or n_con / t_bar <= gap_target:
            break
        t_bar *= mu
    return x, steps, stalled, gnorm


_barrier_newton_fast = _kernels.maybe_jit(_barrier_newton)


def solve_convex(sub: ConvexSubproblem, tol: float = 1e-6, max_newton: int = 400,
                 mu: float = 50.0) -> ConvexResult:
    """Log-barrier interior-point method started at the expansion point.

    Stops when the duality-gap bound (#constraints / t) falls below ``tol``
    times the largest objective change the trust region allows.
    """
    T, M, _ = sub.center.shape
    c_free = sub.cost.reshape(-1, 2)[sub.free]
    cnorm = np.linalg.norm(c_free)
    if not np.any(sub.free) or sub.delta <= 0 or cnorm == 0:
        return ConvexResult(sub.center.copy(), 0.0, 0.0, 0, False)

    # without the velocity and separation constraints the optimum moves each
    # free point by delta against its cost; if that point is feasible it is
    # also optimal for the full program
    c_pts = sub.cost.reshape(-1, 2)
    norms = np.linalg.norm(c_pts, axis=1)
    step = np.where(norms[:, None] > 0, c_pts / np.where(norms > 0, norms, 1.0)[:, None], 0.0)
    Y = sub.center.reshape(-1, 2) - sub.delta * np.where(sub.free[:, None], step, 0.0)
    fb, fl, _ = sub.constraint_values(Y)
    other = sub.ball_kind == 0
    if np.all(fb[other] <= 0) and np.all(fl <= 0):
        Qn = Y.reshape(T, M, 2)
        return ConvexResult(Qn, sub.objective(Qn), 0.0, 0, False)

    form = _BarrierForm(sub)
    n_free = form.x0.shape[0]
    spread = cnorm * sub.delta * np.sqrt(n_free)
    gap_target = tol * spread
    t_bar = form.n_con / spread
    arrays = [np.ascontiguousarray(a, dtype=float) for a in
              (form.Db, form.u0, form.r2, form.Dl, form.lc, form.fl0, form.cost, form.x0)]
    x, steps, stalled, gnorm = _barrier_newton_fast(
        *arrays,
        float(t_bar), float(mu), float(gap_target), float(form.n_con), int(max_newton))
    kkt = gnorm / cnorm

    Y = sub.center.reshape(-1, 2).copy()
    Y[sub.free] = x
    Qn = Y.reshape(T, M, 2)
    obj = sub.objective(Qn)
    if obj > 0:
        # never worse than the expansion point
        Qn, obj = sub.center.copy(), 0.0
    return ConvexResult(Qn, obj, float(kkt), steps, stalled)


# ---------------------------------------------------------------------------
# SCA loop
# ---------------------------------------------------------------------------

def sca_update_Q(Q, G, Gamma, Lam, rho, problem, config):
    """SCA steps on sum_t L_q(t)/(2 rho_t) with trust-region backtracking.

    A step is accepted only if the true cost does not increase; otherwise
    the trust radius is halved (at most 5 times) and the step retried.  The
    radius is restored to ``config.trust_region`` for every new SCA step.
    Returns the (possibly unchanged) trajectory and a small info dict.
    """
    sc = problem.scenario
    hs, as_ = problem.units.h_scale, problem.units.a_scale
    w = 1.0 / (2.0 * np.asarray(rho, dtype=float))

    def cost(Qc):
        return float(np.sum(w * tracking_cost(Qc, G, Gamma, Lam, sc, hs, as_)))

    info = {"accepted": 0, "stalls": 0, "halvings": 0}
    if sc.T <= 2:
        return Q, info
    current = cost(Q)
    Q_out = Q
    for _ in range(config.sca_iters_q):
        grads = w[:, None, None] * tracking_grad(Q_out, G, Gamma, Lam, sc, hs, as_)
        delta = config.trust_region
        accepted = False
        for _halving in range(6):
            sub = build_subproblem(Q_out, grads, sc, delta)
            res = solve_convex(sub)
            if res.stalled:
                info["stalls"] += 1
                warnings.warn("trajectory subproblem stalled; using best feasible iterate",
                              RuntimeWarning, stacklevel=2)
            new = cost(res.Q)
            if new <= current:
                accepted = True
                break
            delta *= 0.5
            info["halvings"] += 1
        if not accepted:
            break
        info["accepted"] += 1
        gain = current - new
        Q_out, current = res.Q, new
        if gain <= config.inner_tol * max(abs(current), 1e-300):
            break
    return Q_out, info


__all__ = [
    "tracking_cost", "tracking_grad", "l_q", "grad_l_q", "build_subproblem", "solve_convex",
    "sca_update_Q", "ConvexSubproblem", "ConvexResult", "SubsolverStall",
]
