"""Comparison schemes built from configuration transforms of the main solver.

Fully digital (FD) schemes use ``Nrf = Nt`` with the analog stage fixed to
the identity, so the digital precoder spans the whole antenna space.  MAP
decomposes an FD solution into a hybrid pair, and the bi-static scheme keeps
only the first Tx and the first Rx UAV.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import replace
from typing import Optional

import numpy as np

from . import metrics
from .errors import SchemeInfeasible
from .pdd import SolverConfig, f_entry_update, solve
from .scenario import PhaseMode, Scenario


class Scheme(str, enum.Enum):
    PROPOSED = "Proposed"
    FD_JOINT = "FdJoint"
    FD_COMM_ONLY = "FdCommOnly"
    FIXED_TRAJ = "FixedTraj"
    MAP = "Map"
    BISTATIC = "BiStatic"

    @classmethod
    def parse(cls, name) -> "Scheme":
        if isinstance(name, cls):
            return name
        key = str(name).replace("_", "").replace("-", "").lower()
        for s in cls:
            if s.value.lower() == key:
                return s
        raise ValueError(f"unknown scheme {name!r}; choose from {[s.value for s in cls]}")


def fd_scenario(scenario: Scenario, comm_only: bool = False) -> Scenario:
    """Fully digital copy: one RF chain per antenna, phase constraint dropped."""
    sc = scenario.replace(Nrf=scenario.Nt, phase_mode=PhaseMode.continuous())
    if comm_only:
        sc = sc.replace(gamma_s=0.0)
    return sc


def bistatic_scenario(scenario: Scenario) -> Scenario:
    """Keep Tx UAV 1 and Rx UAV 1 only.

    If the remaining RF chains cannot carry K + S streams, the sensing
    streams are kept and the user count is capped (with a warning).
    """
    Mt, Mr = scenario.Mt, scenario.Mr
    if Mt == 1 and Mr == 1:
        return scenario
    keep = [0, Mt]
    changes = dict(
        Mt=1, Mr=1,
        q_init=scenario.q_init[keep].copy(),
        q_final=scenario.q_final[keep].copy(),
        power_budget=scenario.power_budget[:1].copy(),
    )
    K = scenario.K
    if K + scenario.S > scenario.Nrf:
        K = max(scenario.Nrf - scenario.S, 0)
        warnings.warn(f"bi-static scenario carries at most {scenario.Nrf} streams; "
                      f"keeping {K} of {scenario.K} users", RuntimeWarning, stacklevel=2)
        changes.update(K=K, user_positions=scenario.user_positions[:, :K].copy(),
                       weights=scenario.weights[:K].copy())
    return scenario.replace(**changes)


# ---------------------------------------------------------------------------
# matrix approximation of a fully digital precoder
# ---------------------------------------------------------------------------

def _blocks(X, Mt):
    """Split the leading matrix axis of X (..., Mt*n, c) into Mt row blocks."""
    n = X.shape[-2] // Mt
    return [X[..., m * n:(m + 1) * n, :] for m in range(Mt)]


def _ls_digital(F, V, Mt):
    """Per-UAV least-squares W given a block-diagonal F."""
    Fb = [F[..., m * (F.shape[-2] // Mt):(m + 1) * (F.shape[-2] // Mt),
            m * (F.shape[-1] // Mt):(m + 1) * (F.shape[-1] // Mt)] for m in range(Mt)]
    Vb = _blocks(V, Mt)
    return np.concatenate([np.linalg.pinv(f, rcond=1e-12) @ v for f, v in zip(Fb, Vb)], axis=-2)


def _initial_analog(V, scenario: Scenario, alphabet):
    """Phases of the leading left singular vectors of every UAV block."""
    Mt, Nt, Nrf = scenario.Mt, scenario.Nt, scenario.Nrf
    T = V.shape[0]
    F = np.zeros((T, Mt * Nt, Mt * Nrf), dtype=complex)
    for m, Vm in enumerate(_blocks(V, Mt)):
        U, _, _ = np.linalg.svd(Vm, full_matrices=True)
        lead = U[..., :Nrf]
        block = f_entry_update(lead, np.ones_like(lead), alphabet)
        F[:, m * Nt:(m + 1) * Nt, m * Nrf:(m + 1) * Nrf] = block
    return F


def map_residual(F, W, V_fd) -> float:
    return float(np.sqrt(np.sum(np.abs(F @ W - V_fd) ** 2)))


def map_decompose(V_fd, scenario: Scenario, iters: int = 50, history: Optional[list] = None,
                  rescale: bool = True):
    """Approximate per-slot FD precoders by a hybrid pair (F, W).

    Alternates a least-squares W step with element-wise BCD sweeps on F
    (``B = I``, ``C = V W^H``, ``D = W W^H``).  The residual
    ``||F W - V_fd||_F`` never increases.  With ``rescale`` each UAV's
    digital rows are finally scaled down to its power budget.
    """
    from .pdd import update_F

    V_fd = np.asarray(V_fd, dtype=complex)
    if V_fd.ndim == 2:
        V_fd = V_fd[None]
    Mt = scenario.Mt
    alphabet = scenario.phase_mode.alphabet() if scenario.phase_mode.is_discrete else None
    mask = metrics.block_diag_mask(Mt, scenario.Nt, scenario.Nrf)
    F = _initial_analog(V_fd, scenario, alphabet)
    W = _ls_digital(F, V_fd, Mt)
    if history is not None:
        history.append(map_residual(F, W, V_fd))
    eye = np.broadcast_to(np.eye(F.shape[-2], dtype=complex), (F.shape[0],) + (F.shape[-2],) * 2)
    for _ in range(iters):
        C = V_fd @ np.conj(np.swapaxes(W, -1, -2))
        D = W @ np.conj(np.swapaxes(W, -1, -2))
        F = update_F(F, eye, C, D, mask, alphabet, iters=1)
        W = _ls_digital(F, V_fd, Mt)
        if history is not None:
            history.append(map_residual(F, W, V_fd))
    if rescale:
        power = metrics.per_uav_power(F @ W, Mt)
        factor = np.where(power > 0,
                          np.minimum(1.0, np.sqrt(scenario.power_budget[None] / np.where(power > 0, power, 1.0))),
                          1.0)
        W = W * np.repeat(factor, scenario.Nrf, axis=1)[:, :, None]
    return F, W


# ---------------------------------------------------------------------------
# scheme runner
# ---------------------------------------------------------------------------

def _flag_infeasible(scheme: Scheme, solution, trace, scenario: Scenario):
    report = solution.report
    tol = metrics.Tolerances().snr_rel * scenario.gamma_s
    trace.scheme_error = None
    if report.min_sensing_snr_margin < -tol:
        trace.scheme_error = SchemeInfeasible(
            f"{scheme.value}: sensing SNR misses gamma_s by {-report.min_sensing_snr_margin:.3e}")
    return solution, trace


def run_scheme(kind, scenario: Scenario, config: Optional[SolverConfig] = None, callback=None,
               map_iters: int = 50):
    """Run one comparison scheme and return ``(solution, trace)``.

    A scheme that ends below the sensing threshold is reported through
    ``trace.scheme_error`` (a :class:`SchemeInfeasible`), not raised.
    """
    scheme = Scheme.parse(kind)
    config = config or SolverConfig()

    if scheme is Scheme.PROPOSED:
        sol, tr = solve(scenario, config, callback)
    elif scheme is Scheme.FIXED_TRAJ:
        sol, tr = solve(scenario, config.replace(update_trajectory=False), callback)
    elif scheme in (Scheme.FD_JOINT, Scheme.FD_COMM_ONLY):
        sc = fd_scenario(scenario, comm_only=scheme is Scheme.FD_COMM_ONLY)
        sol, tr = solve(sc, config.replace(fully_digital=True), callback)
    elif scheme is Scheme.MAP:
        sol, tr = solve(fd_scenario(scenario), config.replace(fully_digital=True), callback)
        F, W = map_decompose(sol.beamformers.V, scenario, iters=map_iters)
        bf = metrics.Beamformers(F=F, W=W)
        report = metrics.certify(scenario, sol.Q, bf)
        sol = replace(sol, scenario=scenario, beamformers=bf, report=report,
                      wsr=metrics.wsr(scenario, sol.Q, bf))
        tr.report = report
    elif scheme is Scheme.BISTATIC:
        sc = bistatic_scenario(scenario)
        sol, tr = solve(sc, config, callback)
        scenario = sc
    else:  # pragma: no cover
        raise ValueError(scheme)
    return _flag_infeasible(scheme, sol, tr, sol.scenario)


__all__ = ["Scheme", "run_scheme", "map_decompose", "map_residual", "bistatic_scenario",
           "fd_scenario"]
