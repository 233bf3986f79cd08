"""Objective and constraint evaluation in physical units.

Beamformers are stored per slot: ``F`` has shape ``(T, Mt*Nt, Mt*Nrf)``
(block diagonal) and ``W`` has shape ``(T, Mt*Nrf, K+S)`` with the user
columns first and the sensing streams after them.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .scenario import Scenario, all_channels, min_separation_sq, step_lengths_sq


@dataclass
class Beamformers:
    F: np.ndarray
    W: np.ndarray

    @property
    def V(self) -> np.ndarray:
        """The effective fully digital precoder F @ W per slot."""
        return self.F @ self.W


@dataclass(frozen=True)
class Tolerances:
    power: float = 1e-9       # watts
    snr_rel: float = 1e-6     # relative to gamma_s
    geometry: float = 1e-6    # metres (squared quantities compared as m^2)
    phase: float = 1e-9


@dataclass
class FeasibilityReport:
    """Constraint margins of a candidate solution.

    Violations are >= 0 when violated; margins are >= 0 when satisfied.
    """

    max_power_violation: float
    min_sensing_snr_margin: float
    max_velocity_violation: float
    min_pairwise_sep_margin: float
    endpoint_error: float
    max_phase_error: float
    feasible: bool

    def as_dict(self):
        return asdict(self)


def block_diag_mask(Mt: int, Nt: int, Nrf: int) -> np.ndarray:
    """Boolean mask of the on-block entries of a stacked analog beamformer."""
    mask = np.zeros((Mt * Nt, Mt * Nrf), dtype=bool)
    for m in range(Mt):
        mask[m * Nt:(m + 1) * Nt, m * Nrf:(m + 1) * Nrf] = True
    return mask


def tx_power(F_m, W_m) -> float:
    """sum_i ||F_m w_{m,i}||^2 for one UAV (W_m holds that UAV's Nrf rows)."""
    return float(np.sum(np.abs(np.asarray(F_m) @ np.asarray(W_m)) ** 2))


def per_uav_power(V, Mt: int) -> np.ndarray:
    """Transmit power of every Tx UAV from V = F W, shape (..., Mt)."""
    V = np.asarray(V)
    blocks = V.reshape(V.shape[:-2] + (Mt, -1, V.shape[-1]))
    return np.sum(np.abs(blocks) ** 2, axis=(-2, -1))


def received_coefficients(H, F, W) -> np.ndarray:
    """p_{k,i} = h_k^H F w_i, shape (..., K, K+S)."""
    return np.conj(np.swapaxes(H, -1, -2)) @ (F @ W)


def sinr_from_coefficients(P, noise) -> np.ndarray:
    """Per-user SINR from received coefficients P (..., K, K+S)."""
    P = np.asarray(P)
    K = P.shape[-2]
    power = np.abs(P) ** 2
    signal = power[..., np.arange(K), np.arange(K)]
    interference = power.sum(axis=-1) - signal
    return signal / (interference + np.asarray(noise))


def sinr_user(H, F, W, k: int, sigma_k2: float) -> float:
    """SINR of user k (0-based) for a single slot."""
    h = H[:, k]
    gains = np.abs(h.conj() @ F @ W) ** 2
    return float(gains[k] / (gains.sum() - gains[k] + sigma_k2))


def rate(sinr):
    return np.log2(1.0 + np.asarray(sinr))


def wsr(scenario: Scenario, Q, beamformers: Beamformers, per_slot: bool = False):
    """Weighted sum-rate sum_t sum_k w_k log2(1 + SINR_k(t)) in bit/s/Hz."""
    H, _ = all_channels(Q, scenario)
    P = received_coefficients(H, beamformers.F, beamformers.W)
    slot = rate(sinr_from_coefficients(P, scenario.noise_user)) @ scenario.weights
    return slot if per_slot else float(slot.sum())


def sensing_snr(A, F, W, sigma_n2: float):
    """||A F W||_F^2 / sigma_n^2 (batched over leading axes)."""
    AFW = np.asarray(A) @ np.asarray(F) @ np.asarray(W)
    return np.sum(np.abs(AFW) ** 2, axis=(-2, -1)) / sigma_n2


def sensing_snr_rank_one(a_r, a_t, F, W, radar_gain: float, sigma_n2: float) -> float:
    """Same SNR through the factored form gain*||a_r||^2*||a_t^H F W||^2/sigma_n^2."""
    beam = np.asarray(a_t).conj() @ np.asarray(F) @ np.asarray(W)
    return float(radar_gain * np.sum(np.abs(a_r) ** 2) * np.sum(np.abs(beam) ** 2) / sigma_n2)


def phase_error(F, scenario: Scenario) -> float:
    """Largest deviation of F from the phase-shifter constraint set."""
    F = np.asarray(F)
    mask = block_diag_mask(scenario.Mt, scenario.Nt, scenario.Nrf)
    off = np.abs(F[..., ~mask]).max(initial=0.0)
    on = F[..., mask]
    if scenario.phase_mode.is_discrete:
        alphabet = scenario.phase_mode.alphabet()
        dev = np.abs(on[..., None] - alphabet).min(axis=-1)
    else:
        dev = np.abs(np.abs(on) - 1.0)
    return float(max(off, dev.max(initial=0.0)))


def certify(scenario: Scenario, Q, beamformers: Beamformers, tolerances: Tolerances = Tolerances(),
            check_phase: bool = True, check_sensing: bool = True) -> FeasibilityReport:
    """Evaluate every constraint of the joint problem on a candidate."""
    Q = np.asarray(Q, dtype=float)
    V = beamformers.V
    power = per_uav_power(V, scenario.Mt)
    max_power_violation = float(np.max(power - scenario.power_budget[None]))

    _, A = all_channels(Q, scenario)
    snr = sensing_snr(A, beamformers.F, beamformers.W, scenario.params.noise_sensing)
    snr_margin = float(np.min(snr - scenario.gamma_s))

    if scenario.T > 1:
        vel_violation = float(np.max(step_lengths_sq(Q) - scenario.max_step**2))
    else:
        vel_violation = -np.inf
    sep_margin = float(np.min(min_separation_sq(Q) - scenario.d_min**2))
    endpoint_error = float(max(np.linalg.norm(Q[0] - scenario.q_init, axis=1).max(),
                               np.linalg.norm(Q[-1] - scenario.q_final, axis=1).max()))
    ph_err = phase_error(beamformers.F, scenario) if check_phase else 0.0

    ok = (
        max_power_violation <= tolerances.power
        and (not check_sensing or snr_margin >= -tolerances.snr_rel * scenario.gamma_s)
        and vel_violation <= tolerances.geometry
        and sep_margin >= -tolerances.geometry
        and endpoint_error <= tolerances.geometry
        and ph_err <= tolerances.phase
    )
    return FeasibilityReport(max_power_violation, snr_margin, vel_violation, sep_margin,
                             endpoint_error, ph_err, bool(ok))
