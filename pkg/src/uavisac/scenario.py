"""Physical scenario and line-of-sight channel geometry.

Every channel quantity here is a pure function of UAV, user and target
positions.  Arrays follow one layout throughout the package:

* trajectories ``Q`` have shape ``(T, M, 2)`` with the ``Mt`` transmit UAVs
  first and the ``Mr`` receive UAVs after them,
* user positions have shape ``(T, K, 2)``, target positions ``(T, 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InfeasibleInit, ValidationError

SPEED_OF_LIGHT = 299_792_458.0


def db_to_linear(x_db):
    return 10.0 ** (np.asarray(x_db, dtype=float) / 10.0)


def dbm_to_watt(x_dbm):
    return 10.0 ** ((np.asarray(x_dbm, dtype=float) - 30.0) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(x)


def watt_to_dbm(x):
    return 10.0 * np.log10(x) + 30.0


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator (Philox4x64-10) keyed by ``(seed, stream)``.

    Different streams give independent sequences for the same seed, so
    scenario sampling and solver initialisation never share draws.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


RNG_ALGORITHM = "philox4x64-10"


@dataclass(frozen=True)
class PhysicalParams:
    """Radio constants shared by all UAVs.

    Powers are linear (watts), gains are linear power ratios.
    ``antenna_spacing`` defaults to half a wavelength.
    """

    altitude: float = 50.0
    carrier_freq: float = 1.9e9
    antenna_spacing: Optional[float] = None
    ref_pathloss: float = 1e-5
    rcs_variance: float = 1.0
    noise_user: float = 1e-14
    noise_sensing: float = float(dbm_to_watt(-94.0))
    wavelength: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "wavelength", SPEED_OF_LIGHT / self.carrier_freq)
        if self.antenna_spacing is None:
            object.__setattr__(self, "antenna_spacing", self.wavelength / 2.0)

    @property
    def radar_gain(self) -> float:
        """lambda^2 sigma_RCS^2 / (4 pi)^3 from the radar range equation."""
        return self.wavelength**2 * self.rcs_variance / (4.0 * np.pi) ** 3

    def problems(self):
        out = []
        for name in ("altitude", "carrier_freq", "antenna_spacing", "ref_pathloss",
                     "rcs_variance", "noise_sensing"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                out.append(f"{name} must be finite and > 0 (got {value})")
        noise = np.atleast_1d(np.asarray(self.noise_user, dtype=float))
        if not np.all(np.isfinite(noise) & (noise > 0)):
            out.append("noise_user must be finite and > 0")
        return out


@dataclass(frozen=True)
class PhaseMode:
    """Phase-shifter resolution: ``bits=None`` means continuous phases."""

    bits: Optional[int] = None

    @classmethod
    def continuous(cls):
        return cls(None)

    @classmethod
    def discrete(cls, bits: int):
        return cls(int(bits))

    @property
    def is_discrete(self) -> bool:
        return self.bits is not None

    def alphabet(self) -> np.ndarray:
        """The 2^bits unit-modulus points exp(j 2 pi m / 2^bits), m ascending."""
        if self.bits is None:
            raise ValueError("continuous phase mode has no finite alphabet")
        levels = 2 ** self.bits
        return np.exp(1j * 2.0 * np.pi * np.arange(levels) / levels)

    def __str__(self):
        return "continuous" if self.bits is None else f"{self.bits}-bit"


@dataclass
class Scenario:
    """A complete problem instance.

    ``power_budget`` is per transmit UAV in watts, ``gamma_s`` the linear
    sensing-SNR threshold.  Users and the (single) target are given by
    explicit per-slot positions.
    """

    Mt: int
    Mr: int
    Nt: int
    Nr: int
    Nrf: int
    K: int
    S: int
    T: int
    delta_t: float
    area: tuple
    user_positions: np.ndarray
    target_positions: np.ndarray
    q_init: np.ndarray
    q_final: np.ndarray
    v_max: float
    d_min: float
    power_budget: np.ndarray
    gamma_s: float
    weights: np.ndarray
    phase_mode: PhaseMode = field(default_factory=PhaseMode)
    params: PhysicalParams = field(default_factory=PhysicalParams)

    def __post_init__(self):
        self.user_positions = np.asarray(self.user_positions, dtype=float)
        self.target_positions = np.asarray(self.target_positions, dtype=float)
        self.q_init = np.asarray(self.q_init, dtype=float)
        self.q_final = np.asarray(self.q_final, dtype=float)
        self.power_budget = np.broadcast_to(
            np.asarray(self.power_budget, dtype=float), (self.Mt,)).copy()
        self.weights = np.asarray(self.weights, dtype=float)
        self.area = tuple(float(a) for a in self.area)

    # -- sizes -------------------------------------------------------------
    @property
    def M(self) -> int:
        return self.Mt + self.Mr

    @property
    def n_streams(self) -> int:
        return self.K + self.S

    @property
    def noise_user(self) -> np.ndarray:
        """Per-user noise power, shape (K,)."""
        return np.broadcast_to(np.asarray(self.params.noise_user, dtype=float), (self.K,)).copy()

    @property
    def max_step(self) -> float:
        return self.v_max * self.delta_t

    def replace(self, **changes) -> "Scenario":
        return replace(self, **changes)

    # -- validation ----------------------------------------------------------
    def problems(self):
        """Every violated invariant, as a list of messages (empty if valid)."""
        out = list(self.params.problems())
        for name in ("Mt", "Mr", "Nt", "Nr", "Nrf", "K", "T"):
            if int(getattr(self, name)) < 1:
                out.append(f"{name} must be >= 1")
        if self.S < 0:
            out.append("S must be >= 0")
        if self.T < 2:
            out.append("T must be >= 2 (initial and final slots are pinned)")
        if not 1 <= self.Nrf < self.Nt:
            out.append(f"need 1 <= Nrf < Nt (got Nrf={self.Nrf}, Nt={self.Nt})")
        if self.K + self.S > self.Mt * self.Nrf:
            out.append(f"need K + S <= Mt*Nrf (got {self.K + self.S} > {self.Mt * self.Nrf})")
        if self.delta_t <= 0 or self.v_max <= 0:
            out.append("delta_t and v_max must be > 0")
        if self.d_min < 0:
            out.append("d_min must be >= 0")
        if self.gamma_s < 0:
            out.append("gamma_s must be >= 0")
        shapes = {
            "user_positions": (self.user_positions, (self.T, self.K, 2)),
            "target_positions": (self.target_positions, (self.T, 2)),
            "q_init": (self.q_init, (self.M, 2)),
            "q_final": (self.q_final, (self.M, 2)),
            "weights": (self.weights, (self.K,)),
        }
        bad_shape = False
        for name, (arr, shape) in shapes.items():
            if arr.shape != shape:
                out.append(f"{name} has shape {arr.shape}, expected {shape}")
                bad_shape = True
        if np.any(self.power_budget <= 0):
            out.append("power_budget must be > 0 for every Tx UAV")
        if bad_shape:
            return out
        if np.any(self.weights < 0) or not self.weights.sum() > 0:
            out.append("weights must be nonnegative with a positive sum")
        lx, ly = self.area
        for name in ("user_positions", "target_positions", "q_init", "q_final"):
            pts = getattr(self, name).reshape(-1, 2)
            if np.any(pts[:, 0] < 0) or np.any(pts[:, 0] > lx) or np.any(pts[:, 1] < 0) \
                    or np.any(pts[:, 1] > ly):
                out.append(f"{name} leaves the area [0,{lx}]x[0,{ly}]")
        reach = (self.T - 1) * self.max_step
        gap = np.linalg.norm(self.q_final - self.q_init, axis=1)
        for m in np.flatnonzero(gap > reach * (1 + 1e-12)):
            out.append(f"UAV {m} cannot reach its final position ({gap[m]:.3f} m > {reach:.3f} m)")
        if self.phase_mode.bits is not None and self.phase_mode.bits < 1:
            out.append("discrete phase mode needs at least 1 bit")
        return out

    def validate(self) -> "Scenario":
        problems = self.problems()
        if problems:
            raise ValidationError(problems)
        return self


# ---------------------------------------------------------------------------
# channel geometry
# ---------------------------------------------------------------------------

def _phase_step(params: PhysicalParams) -> float:
    return 2.0 * np.pi * params.antenna_spacing / params.wavelength


def steering_vector(uav_pos, ground_pos, n_antennas: int, params: PhysicalParams) -> np.ndarray:
    """ULA response towards a ground point; element n is exp(j k d n cos(theta)).

    The departure angle is theta = arccos(H / dist), so cos(theta) enters
    directly as H / dist.
    """
    _, resp = _responses(np.asarray(uav_pos, dtype=float)[None],
                         np.asarray(ground_pos, dtype=float)[None], n_antennas, params)
    return resp[0, 0]


def user_channel(uav_pos, user_pos, Nt: int, params: PhysicalParams) -> np.ndarray:
    dist, resp = _responses(np.asarray(uav_pos, dtype=float)[None],
                            np.asarray(user_pos, dtype=float)[None], Nt, params)
    return (np.sqrt(params.ref_pathloss) / dist[..., None] * resp)[0, 0]


def _responses(uav, ground, n, params):
    """Scaled responses for every (uav, ground) pair.

    ``uav`` (..., U, 2) and ``ground`` (..., G, 2); returns distances
    (..., U, G) and unit-modulus responses (..., U, G, n).
    """
    diff = uav[..., :, None, :] - ground[..., None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1) + params.altitude**2)
    phase = _phase_step(params) * (params.altitude / dist)[..., None] * np.arange(n)
    return dist, np.exp(1j * phase)


def stacked_user_channels(q_slot, scenario: Scenario, t: int) -> np.ndarray:
    """H(t) of shape (Mt*Nt, K); column k stacks h_{m,k} over Tx UAVs."""
    q_slot = np.asarray(q_slot, dtype=float).reshape(scenario.M, 2)
    return _user_channels(q_slot[: scenario.Mt], scenario.user_positions[t], scenario)


def _user_channels(q_tx, users, scenario):
    p = scenario.params
    dist, resp = _responses(q_tx, users, scenario.Nt, p)  # (..., Mt, K), (..., Mt, K, Nt)
    h = np.sqrt(p.ref_pathloss) / dist[..., None] * resp
    h = np.moveaxis(h, -2, -1)  # (..., Mt, Nt, K)
    return h.reshape(h.shape[:-3] + (scenario.Mt * scenario.Nt, scenario.K))


def _stacked_target_response(q, target, n, params):
    """a_{m,s}/d_{m,s} stacked over the given UAVs: shape (..., U*n)."""
    dist, resp = _responses(q, target[..., None, :], n, params)
    vec = resp[..., 0, :] / dist[..., 0, None]
    return vec.reshape(vec.shape[:-2] + (-1,))


def sensing_matrix(q_slot, scenario: Scenario, t: int):
    """Return (A, a_r, a_t) with A = sqrt(radar_gain) a_r a_t^H."""
    q_slot = np.asarray(q_slot, dtype=float).reshape(scenario.M, 2)
    target = scenario.target_positions[t]
    p = scenario.params
    a_t = _stacked_target_response(q_slot[: scenario.Mt], target, scenario.Nt, p)
    a_r = _stacked_target_response(q_slot[scenario.Mt:], target, scenario.Nr, p)
    A = np.sqrt(p.radar_gain) * np.outer(a_r, a_t.conj())
    return A, a_r, a_t


def all_channels(Q, scenario: Scenario):
    """Batched H (T, Mt*Nt, K) and A (T, Mr*Nr, Mt*Nt) for a full trajectory."""
    Q = np.asarray(Q, dtype=float)
    p = scenario.params
    H = _user_channels(Q[:, : scenario.Mt], scenario.user_positions, scenario)
    a_t = _stacked_target_response(Q[:, : scenario.Mt], scenario.target_positions, scenario.Nt, p)
    a_r = _stacked_target_response(Q[:, scenario.Mt:], scenario.target_positions, scenario.Nr, p)
    A = np.sqrt(p.radar_gain) * a_r[:, :, None] * a_t.conj()[:, None, :]
    return H, A


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def min_separation_sq(Q) -> np.ndarray:
    """Smallest squared pairwise distance per slot, shape (T,)."""
    Q = np.asarray(Q)
    if Q.shape[1] < 2:
        return np.full(Q.shape[0], np.inf)
    diff = Q[:, :, None, :] - Q[:, None, :, :]
    d2 = np.sum(diff**2, axis=-1)
    iu = np.triu_indices(Q.shape[1], k=1)
    return d2[:, iu[0], iu[1]].min(axis=1)


def step_lengths_sq(Q) -> np.ndarray:
    """Squared per-slot displacement, shape (T-1, M)."""
    return np.sum(np.diff(np.asarray(Q), axis=0) ** 2, axis=-1)


def init_trajectory(scenario: Scenario) -> np.ndarray:
    """Straight-line flight from q_init to q_final, nudged apart if needed.

    UAVs involved in a separation violation get a perpendicular bump of
    peak height d_min (sign alternating with the UAV index) that vanishes
    at both endpoints.
    """
    T = scenario.T
    frac = np.linspace(0.0, 1.0, T)[:, None, None]
    Q = scenario.q_init[None] + frac * (scenario.q_final - scenario.q_init)[None]
    Q[0], Q[-1] = scenario.q_init, scenario.q_final
    tol = 1e-9
    if np.all(min_separation_sq(Q) >= scenario.d_min**2 - tol):
        return Q

    diff = Q[:, :, None, :] - Q[:, None, :, :]
    d2 = np.sum(diff**2, axis=-1)
    d2[:, np.arange(scenario.M), np.arange(scenario.M)] = np.inf
    involved = np.flatnonzero(np.any(d2 < scenario.d_min**2 - tol, axis=(0, 2)))
    bump = np.sin(np.pi * np.linspace(0.0, 1.0, T))
    bump[0] = bump[-1] = 0.0
    for m in involved:
        direction = scenario.q_final[m] - scenario.q_init[m]
        norm = np.linalg.norm(direction)
        if norm > 0:
            perp = np.array([-direction[1], direction[0]]) / norm
            # orientation independent of travel direction, so that UAVs
            # flying head-on are pushed to opposite sides
            if perp[1] < 0 or (perp[1] == 0 and perp[0] < 0):
                perp = -perp
        else:
            perp = np.array([0.0, 1.0])
        sign = 1.0 if m % 2 == 0 else -1.0
        Q[:, m] += sign * scenario.d_min * bump[:, None] * perp[None]

    ok_sep = np.all(min_separation_sq(Q) >= scenario.d_min**2 - tol)
    ok_vel = np.all(step_lengths_sq(Q) <= scenario.max_step**2 + tol)
    if not (ok_sep and ok_vel):
        raise InfeasibleInit("no collision-free interpolated trajectory found after the nudge pass")
    return Q


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_PAPER_ENDPOINTS = (
    np.array([[180.0, 150.0], [20.0, 50.0], [180.0, 110.0], [20.0, 90.0]]),
    np.array([[20.0, 150.0], [180.0, 50.0], [20.0, 110.0], [180.0, 90.0]]),
)

PRESETS = {
    "paper": dict(Mt=2, Mr=2, Nt=16, Nr=16, Nrf=8, K=7, S=1, T=30, delta_t=1.0,
                  area=(200.0, 200.0), endpoint_scale=1.0),
    "small": dict(Mt=2, Mr=2, Nt=8, Nr=8, Nrf=4, K=3, S=1, T=10, delta_t=1.0,
                  area=(100.0, 100.0), endpoint_scale=0.5),
}


def linear_motion(start, velocity, T, delta_t, area):
    """Constant-velocity positions over T slots, clipped to the area."""
    start = np.asarray(start, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    steps = np.arange(T, dtype=float)[:, None] * delta_t
    if start.ndim == 2:
        pos = start[None] + steps[:, :, None] * velocity[None]
    else:
        pos = start[None] + steps * velocity[None]
    pos[..., 0] = np.clip(pos[..., 0], 0.0, area[0])
    pos[..., 1] = np.clip(pos[..., 1], 0.0, area[1])
    return pos


def make_scenario(preset: str = "small", seed: int = 0, *, power_dbm: float = 20.0,
                  gamma_s_db: float = 10.0, phase_mode: Optional[PhaseMode] = None,
                  user_speed: float = 1.0, target_speed: float = 1.0, d_min: float = 10.0,
                  v_max: float = 20.0, params: Optional[PhysicalParams] = None,
                  **overrides) -> Scenario:
    """Build a preset scenario with seeded user and target motion.

    Users start uniformly inside the area (10% margin), the target starts
    within 10% of the area centre; both move on straight lines with a
    random heading and speed up to ``user_speed`` / ``target_speed``.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    spec = dict(PRESETS[preset])
    scale = spec.pop("endpoint_scale")
    spec.update({k: v for k, v in overrides.items() if k in spec})
    extra = {k: v for k, v in overrides.items() if k not in spec}
    K, T, area = spec["K"], spec["T"], spec["area"]
    Mt, Mr = spec["Mt"], spec["Mr"]
    lx, ly = area

    rng = make_rng(seed, stream=1)
    margin = np.array([0.1 * lx, 0.1 * ly])
    starts = margin + rng.uniform(size=(K, 2)) * (np.array([lx, ly]) - 2 * margin)
    heading = rng.uniform(0.0, 2 * np.pi, size=K)
    speed = rng.uniform(0.0, user_speed, size=K)
    vel = np.stack([np.cos(heading), np.sin(heading)], axis=1) * speed[:, None]
    users = linear_motion(starts, vel, T, spec["delta_t"], area)

    centre = np.array([lx, ly]) / 2
    t_start = centre + rng.uniform(-0.1, 0.1, size=2) * np.array([lx, ly])
    t_head = rng.uniform(0.0, 2 * np.pi)
    t_vel = target_speed * rng.uniform() * np.array([np.cos(t_head), np.sin(t_head)])
    target = linear_motion(t_start, t_vel, T, spec["delta_t"], area)

    q_i, q_f = (e * scale for e in _PAPER_ENDPOINTS)
    if Mt != 2 or Mr != 2:
        q_i = np.concatenate([q_i[:Mt], q_i[2:2 + Mr]]) if Mt <= 2 and Mr <= 2 else None
        q_f = np.concatenate([q_f[:Mt], q_f[2:2 + Mr]]) if Mt <= 2 and Mr <= 2 else None
    q_init = extra.pop("q_init", q_i)
    q_final = extra.pop("q_final", q_f)
    if q_init is None or q_final is None:
        raise ValueError("explicit q_init/q_final required for more than 2 UAVs per role")

    scenario = Scenario(
        **spec,
        user_positions=extra.pop("user_positions", users),
        target_positions=extra.pop("target_positions", target),
        q_init=q_init,
        q_final=q_final,
        v_max=v_max,
        d_min=d_min,
        power_budget=extra.pop("power_budget", dbm_to_watt(power_dbm)),
        gamma_s=extra.pop("gamma_s", float(db_to_linear(gamma_s_db))),
        weights=extra.pop("weights", np.full(K, 1.0 / K)),
        phase_mode=phase_mode or PhaseMode.continuous(),
        params=params or PhysicalParams(),
    )
    if extra:
        raise TypeError(f"unexpected scenario overrides: {sorted(extra)}")
    return scenario
