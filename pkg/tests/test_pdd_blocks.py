import numpy as np
import pytest
from scipy.optimize import brentq, minimize

from uavisac.metrics import block_diag_mask
from uavisac.pdd import (DualState, SolverVariables, al_objective, bcd_entries, dual_penalty_step,
                         f_entry_update, f_matrices, f_objective, p_objective, project_power,
                         quantize_phase, rate_surrogate, rates_from_P, residuals, surrogate_value,
                         update_F, update_P, update_V, update_W, update_Z, w_objective)
from uavisac.scenario import PhaseMode


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def slot_problem(rng, Mt=2, Nt=4, Nrf=2, Mr=2, Nr=3, K=3, S=1):
    mask = block_diag_mask(Mt, Nt, Nrf)
    F = np.zeros(mask.shape, complex)
    F[mask] = np.exp(1j * rng.uniform(0, 2 * np.pi, mask.sum()))
    I = K + S
    return dict(
        mask=mask, F=F, W=crandn(rng, Mt * Nrf, I),
        H=crandn(rng, Mt * Nt, K), A=np.outer(crandn(rng, Mr * Nr), crandn(rng, Mt * Nt).conj()),
        Gamma=crandn(rng, K, I), Ups=crandn(rng, Mt * Nt, I), Lam=crandn(rng, Mr * Nr, I),
    )


def true_rate(p, k, sigma2):
    mag2 = np.abs(p) ** 2
    return np.log2(1 + mag2[k] / (mag2.sum() - mag2[k] + sigma2))


# ---------------------------------------------------------------------------
# W
# ---------------------------------------------------------------------------

def test_update_w_matches_stacked_least_squares():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = slot_problem(rng)
        F, H, A = s["F"], s["H"], s["A"]
        W = update_W(F, H, A, s["Gamma"], s["Ups"], s["Lam"])
        M = np.vstack([H.conj().T @ F, F, A @ F])
        rhs = np.vstack([s["Gamma"], s["Ups"], s["Lam"]])
        W_ls = np.linalg.lstsq(M, rhs, rcond=None)[0]
        ours = w_objective(W, F, H, A, s["Gamma"], s["Ups"], s["Lam"])
        ref = w_objective(W_ls, F, H, A, s["Gamma"], s["Ups"], s["Lam"])
        assert ours <= ref * (1 + 1e-8)
        # normal equations
        gram = M.conj().T @ M
        xi = M.conj().T @ rhs
        assert np.linalg.norm(gram @ W - xi) <= 1e-9 * np.linalg.norm(xi)


def test_update_w_trivial_cases():
    rng = np.random.default_rng(1)
    s = slot_problem(rng)
    F = s["F"]
    W0 = crandn(rng, *s["W"].shape)
    H0 = np.zeros_like(s["H"])
    A0 = np.zeros_like(s["A"])
    W = update_W(F, H0, A0, np.zeros_like(s["Gamma"]), F @ W0, np.zeros_like(s["Lam"]))
    np.testing.assert_allclose(W, W0, atol=1e-10)
    Wz = update_W(F, s["H"], s["A"], 0 * s["Gamma"], 0 * s["Ups"], 0 * s["Lam"])
    assert np.all(Wz == 0)


# ---------------------------------------------------------------------------
# F
# ---------------------------------------------------------------------------

def test_entry_rule_examples():
    assert f_entry_update(1 + 0j, 0.5j) == 1 + 0j
    alpha = PhaseMode.discrete(2).alphabet()
    assert f_entry_update(np.exp(0.3j), 1j, alpha) == alpha[0]
    # zero coefficient keeps the previous value
    assert f_entry_update(0j, 1j) == 1j
    assert f_entry_update(0j, -1 + 0j, alpha) == -1 + 0j


def test_quantize_tie_breaks_to_lower_index():
    alpha = PhaseMode.discrete(2).alphabet()
    # exactly between 1 and j
    assert quantize_phase(np.exp(1j * np.pi / 4), alpha) == alpha[0]
    assert quantize_phase(np.exp(1j * 3 * np.pi / 4), alpha) == alpha[1]


def _bcd_data(rng, s):
    return f_matrices(s["H"], s["A"], s["W"], s["Gamma"], s["Ups"], s["Lam"])


@pytest.mark.parametrize("bits", [1, 2, 3])
def test_entry_update_matches_enumeration(bits):
    rng = np.random.default_rng(10 + bits)
    alpha = PhaseMode.discrete(bits).alphabet()
    checked = 0
    for _ in range(15):
        s = slot_problem(rng, Mt=1, Nt=2, Nrf=2, Mr=1, Nr=2, K=1, S=1)
        F = alpha[rng.integers(0, len(alpha), s["F"].shape)] * s["mask"]
        B, C, D = _bcd_data(rng, s)
        for p, q in bcd_entries(s["mask"]):
            single = np.zeros_like(s["mask"])
            single[p, q] = True
            new = update_F(F, B, C, D, single, alpha, iters=1)
            scores = []
            for a in alpha:
                G = F.copy()
                G[p, q] = a
                scores.append(f_objective(G, B, C, D))
            assert new[p, q] == alpha[int(np.argmin(scores))]
            # only the selected entry may change
            other = np.ones_like(single)
            other[p, q] = False
            assert np.array_equal(new[other], F[other])
            checked += 1
    assert checked == 60


def test_continuous_entry_update_is_coordinate_minimiser():
    rng = np.random.default_rng(4)
    s = slot_problem(rng)
    B, C, D = _bcd_data(rng, s)
    F = s["F"]
    p, q = bcd_entries(s["mask"])[5]
    single = np.zeros_like(s["mask"])
    single[p, q] = True
    new = update_F(F, B, C, D, single, None, iters=1)
    grid = np.exp(1j * np.linspace(0, 2 * np.pi, 3601))
    vals = []
    for g in grid:
        G = F.copy()
        G[p, q] = g
        vals.append(f_objective(G, B, C, D))
    assert f_objective(new, B, C, D) <= min(vals) + 1e-9 * abs(min(vals))


@pytest.mark.parametrize("alphabet", [None, PhaseMode.discrete(1).alphabet(),
                                      PhaseMode.discrete(3).alphabet()])
def test_update_f_monotone_and_structure(alphabet):
    rng = np.random.default_rng(5)
    s = slot_problem(rng)
    B, C, D = _bcd_data(rng, s)
    F0 = s["F"] if alphabet is None else alphabet[rng.integers(0, len(alphabet), s["F"].shape)] * s["mask"]
    hist = []
    F = update_F(F0, B, C, D, s["mask"], alphabet, iters=50, tol=1e-12, history=hist)
    hist = np.array(hist)
    assert np.all(np.diff(hist) <= 1e-10 * np.abs(hist[1:]))
    assert np.all(F[~s["mask"]] == 0)
    on = F[s["mask"]]
    if alphabet is None:
        np.testing.assert_allclose(np.abs(on), 1.0, atol=1e-12)
    else:
        assert all(np.any(v == alphabet) for v in on)


def test_update_f_matches_reference_element_loop():
    rng = np.random.default_rng(6)
    s = slot_problem(rng)
    B, C, D = _bcd_data(rng, s)
    F = s["F"].copy()
    ours = update_F(F, B, C, D, s["mask"], None, iters=3, tol=0.0)
    ref = F.copy()
    for _ in range(3):
        for p, q in bcd_entries(s["mask"]):
            grad = (B @ ref @ D)[p, q]
            b = C[p, q] - grad + B[p, p] * D[q, q] * ref[p, q]
            ref[p, q] = f_entry_update(b, ref[p, q])
    np.testing.assert_allclose(ours, ref, atol=1e-12)


def _batched_inputs(rng, T=4):
    slots = [slot_problem(rng) for _ in range(T)]
    st = {k: np.stack([s[k] for s in slots]) for k in ("F", "W", "H", "A", "Gamma", "Ups", "Lam")}
    st["mask"] = slots[0]["mask"]
    st["B"], st["C"], st["D"] = f_matrices(st["H"], st["A"], st["W"], st["Gamma"], st["Ups"], st["Lam"])
    st["rho"] = rng.uniform(0.01, 0.5, T)
    return st


def _block_outputs(st, idx, alphabet):
    """All five block updates evaluated on the slots ``idx``."""
    g = {k: (v[idx] if isinstance(v, np.ndarray) and v.ndim >= 1 and k != "mask" else v)
         for k, v in st.items()}
    w = np.full(3, 1 / 3)
    return [
        update_W(g["F"], g["H"], g["A"], g["Gamma"], g["Ups"], g["Lam"]),
        update_F(g["F"], g["B"], g["C"], g["D"], st["mask"], alphabet, iters=50),
        update_V(g["F"] @ g["W"], [0.7, 1.3], 2),
        update_Z(g["Lam"], g["Lam"] * 0.1, 5.0, iters=50),
        update_P(g["Gamma"], 1.1 * g["Gamma"], g["rho"], w, 0.2,
                 iters=50),
    ]


@pytest.mark.parametrize("alphabet", [None, PhaseMode.discrete(2).alphabet()])
def test_block_updates_are_slot_independent(alphabet):
    rng = np.random.default_rng(7)
    st = _batched_inputs(rng)
    full = _block_outputs(st, np.arange(4), alphabet)
    perm = np.array([2, 0, 3, 1])
    permuted = _block_outputs(st, perm, alphabet)
    for a, b in zip(full, permuted):
        assert np.array_equal(a[perm], b)
    for t in range(4):
        alone = _block_outputs(st, np.array([t]), alphabet)
        for a, b in zip(full, alone):
            assert np.array_equal(a[t], b[0])


def test_compiled_sweep_matches_numpy_sweep():
    from uavisac import _kernels
    if not _kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    rng = np.random.default_rng(8)
    st = _batched_inputs(rng)
    for alphabet in (None, PhaseMode.discrete(3).alphabet()):
        outs = []
        for use_numba in (True, False):
            saved = _kernels.HAVE_NUMBA
            _kernels.HAVE_NUMBA = use_numba
            try:
                outs.append(update_F(st["F"], st["B"], st["C"], st["D"], st["mask"], alphabet, iters=4,
                                     tol=0.0))
            finally:
                _kernels.HAVE_NUMBA = saved
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)


def test_bcd_order_row_major_per_block():
    mask = block_diag_mask(2, 2, 2)
    assert bcd_entries(mask) == [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 3), (3, 2), (3, 3)]


# ---------------------------------------------------------------------------
# V
# ---------------------------------------------------------------------------

def kkt_bisection_projection(X, budget):
    n2 = np.sum(np.abs(X) ** 2)
    if n2 <= budget:
        return X.copy()
    mu = brentq(lambda m: n2 / (1 + m) ** 2 - budget, 0.0, 1e12, xtol=1e-15, rtol=1e-15)
    return X / (1 + mu)


def test_update_v_matches_kkt_bisection():
    rng = np.random.default_rng(8)
    Mt, Nt, I = 2, 4, 3
    for _ in range(50):
        X = crandn(rng, Mt * Nt, I) * rng.uniform(0.1, 3)
        budget = rng.uniform(0.5, 5, Mt)
        V = update_V(X, budget, Mt)
        for m in range(Mt):
            ref = kkt_bisection_projection(X[m * Nt:(m + 1) * Nt], budget[m])
            assert np.max(np.abs(V[m * Nt:(m + 1) * Nt] - ref)) <= 1e-10


def test_update_v_examples():
    X = np.ones((4, 2), complex)
    np.testing.assert_array_equal(update_V(X, [100.0], 1), X)
    V = update_V(X, [2.0], 1)           # ||X||^2 = 8 = 4 P
    np.testing.assert_allclose(V, X / 2, rtol=1e-15)
    assert np.sum(np.abs(V) ** 2) == pytest.approx(2.0, rel=1e-14)
    assert np.all(update_V(np.zeros((4, 2)), [1.0], 1) == 0)
    rng = np.random.default_rng(9)
    X = crandn(rng, 6, 2) * 5
    once = project_power(X, [1.0, 2.0], 2)
    np.testing.assert_allclose(project_power(once, [1.0, 2.0], 2), once, rtol=1e-14)


# ---------------------------------------------------------------------------
# Z
# ---------------------------------------------------------------------------

def test_update_z_matches_sphere_lifting():
    rng = np.random.default_rng(11)
    for _ in range(30):
        Omega = crandn(rng, 6, 4) * 0.1
        target = rng.uniform(1.5, 10) * np.sum(np.abs(Omega) ** 2)
        Z0 = crandn(rng, 6, 4)
        Z = update_Z(Z0, Omega, target, iters=50, tol=1e-8)
        ref = Omega * np.sqrt(target / np.sum(np.abs(Omega) ** 2))
        assert np.max(np.abs(Z - ref)) <= 1e-6
        assert np.sum(np.abs(Z) ** 2) >= target * (1 - 1e-8)


def test_update_z_examples():
    rng = np.random.default_rng(12)
    Omega = crandn(rng, 4, 2)
    # inactive: the linearised constraint already holds at Omega
    Z0 = Omega.copy()
    Z = update_Z(Z0, Omega, 0.5 * np.sum(np.abs(Omega) ** 2), iters=1)
    np.testing.assert_allclose(Z, Omega, rtol=1e-15)
    # fixed point on the sphere with Omega = 0
    Zs = crandn(rng, 4, 2)
    target = np.sum(np.abs(Zs) ** 2)
    np.testing.assert_allclose(update_Z(Zs, np.zeros((4, 2)), target, iters=1), Zs, rtol=1e-14)


def test_update_z_linearised_constraint_each_step():
    rng = np.random.default_rng(13)
    Omega = crandn(rng, 4, 3) * 0.2
    target = 3.0
    Z = crandn(rng, 4, 3)
    for _ in range(10):
        prev = Z
        Z = update_Z(prev, Omega, target, iters=1)
        gp = 0.5 * (target + np.sum(np.abs(prev) ** 2))
        assert np.real(np.vdot(prev, Z)) >= gp * (1 - 1e-12)


def test_update_z_restarts_from_zero():
    rng = np.random.default_rng(14)
    A = np.outer(crandn(rng, 4), crandn(rng, 6).conj())
    Z = update_Z(np.zeros((4, 2)), np.zeros((4, 2)), 2.0, A=A, iters=50)
    assert np.sum(np.abs(Z) ** 2) == pytest.approx(2.0, rel=1e-8)
    with pytest.raises(ValueError):
        update_Z(np.zeros((4, 2)), np.zeros((4, 2)), 2.0, A=None)


# ---------------------------------------------------------------------------
# P
# ---------------------------------------------------------------------------

def test_surrogate_is_minorant():
    rng = np.random.default_rng(15)
    for _ in range(500):
        n = rng.integers(2, 6)
        k = rng.integers(0, n - 1)
        sigma2 = rng.uniform(0.01, 2)
        p0 = crandn(rng, n) * rng.uniform(0.1, 3)
        p = crandn(rng, n) * rng.uniform(0.1, 3)
        c, d, const = rate_surrogate(p, k, sigma2, p0)
        assert c <= 0
        assert surrogate_value(p, c, d, const) <= true_rate(p, k, sigma2) + 1e-12
        assert surrogate_value(p0, c, d, const) == pytest.approx(true_rate(p0, k, sigma2), abs=1e-10)


def test_surrogate_at_zero():
    c, d, const = rate_surrogate(np.zeros(3), 0, 0.5, np.zeros(3))
    assert c == 0 and np.all(d == 0) and const == 0


def test_update_p_scalar_calculus_oracle():
    rng = np.random.default_rng(16)
    for _ in range(20):
        p0 = crandn(rng, 1, 1)
        psi = crandn(rng, 1, 1)
        rho, w, noise = rng.uniform(0.05, 2), rng.uniform(0.2, 1), rng.uniform(0.1, 1)
        P1 = update_P(p0, psi, rho, np.array([w]), noise, iters=1)
        c, d, const = rate_surrogate(p0[0], 0, noise, p0[0])

        def neg(x):
            p = np.array([x[0] + 1j * x[1]])
            return -(w * surrogate_value(p, c, d, const) - abs(p[0] - psi[0, 0]) ** 2 / (2 * rho))

        best = minimize(neg, [psi[0, 0].real, psi[0, 0].imag], method="BFGS", tol=1e-14).x
        assert abs(P1[0, 0] - (best[0] + 1j * best[1])) <= 1e-6


def test_update_p_monotone():
    rng = np.random.default_rng(17)
    P0 = crandn(rng, 3, 3, 4)
    Psi = crandn(rng, 3, 3, 4)
    rho = np.array([0.3, 0.05, 1.0])
    w = np.full(3, 1 / 3)
    hist = []
    update_P(P0, Psi, rho, w, 0.2, iters=50, tol=0.0, history=hist)
    hist = np.array(hist)
    assert np.all(np.diff(hist, axis=0) >= -1e-12 * np.abs(hist[1:]))


def test_update_p_zero_weight_and_small_rho():
    rng = np.random.default_rng(18)
    P0 = crandn(rng, 3, 4)
    Psi = crandn(rng, 3, 4)
    out = update_P(P0, Psi, 0.3, np.zeros(3), 0.1)
    assert np.array_equal(out, Psi)
    tiny = update_P(P0, Psi, 1e-9, np.full(3, 1 / 3), 0.1)
    assert np.max(np.abs(tiny - Psi)) < 1e-6 * np.max(np.abs(Psi))


def test_p_objective_definition():
    rng = np.random.default_rng(19)
    P, Psi = crandn(rng, 2, 3), crandn(rng, 2, 3)
    w = np.array([0.4, 0.6])
    ref = sum(w[k] * true_rate(P[k], k, 0.3) for k in range(2)) - np.sum(np.abs(P - Psi) ** 2) / 1.0
    assert p_objective(P, Psi, 0.5, w, 0.3) == pytest.approx(ref, rel=1e-12)


# ---------------------------------------------------------------------------
# AL, residuals, dual step
# ---------------------------------------------------------------------------

def random_state(rng, T=3, Mt=2, Nt=4, Nrf=2, Mr=2, Nr=3, K=3, S=1):
    mask = block_diag_mask(Mt, Nt, Nrf)
    F = np.zeros((T,) + mask.shape, complex)
    F[:, mask] = np.exp(1j * rng.uniform(0, 6.3, (T, mask.sum())))
    I = K + S
    v = SolverVariables(Q=np.zeros((T, Mt + Mr, 2)), F=F, W=crandn(rng, T, Mt * Nrf, I),
                        P=crandn(rng, T, K, I), V=crandn(rng, T, Mt * Nt, I),
                        Z=crandn(rng, T, Mr * Nr, I))
    d = DualState(U=crandn(rng, T, K, I), Y=crandn(rng, T, Mt * Nt, I), T=crandn(rng, T, Mr * Nr, I),
                  rho=rng.uniform(0.01, 1, T))
    H = crandn(rng, T, Mt * Nt, K)
    A = crandn(rng, T, Mr * Nr, Mt * Nt)
    return v, d, H, A


def test_al_matches_term_by_term_sum():
    rng = np.random.default_rng(20)
    v, d, H, A = random_state(rng)
    w = np.array([0.2, 0.3, 0.5])
    noise = 0.4
    total = 0.0
    for t in range(v.F.shape[0]):
        G = v.F[t] @ v.W[t]
        for k in range(3):
            total += w[k] * true_rate(v.P[t, k], k, noise)
        pen = 0.0
        for X, target, dual in ((v.P[t], H[t].conj().T @ G, d.U[t]), (v.V[t], G, d.Y[t]),
                                (v.Z[t], A[t] @ G, d.T[t])):
            for i in range(X.shape[0]):
                for j in range(X.shape[1]):
                    pen += abs(X[i, j] - target[i, j] + d.rho[t] * dual[i, j]) ** 2
        total -= pen / (2 * d.rho[t])
    assert al_objective(v, d, H, A, w, noise) == pytest.approx(total, rel=1e-10)


def test_al_trivial_values():
    rng = np.random.default_rng(21)
    v, d, H, A = random_state(rng)
    G = v.F @ v.W
    v.P = np.conj(np.swapaxes(H, -1, -2)) @ G
    v.V, v.Z = G, A @ G
    zero = DualState(0 * d.U, 0 * d.Y, 0 * d.T, d.rho)
    w = np.full(3, 1 / 3)
    assert al_objective(v, zero, H, A, w, 0.5) == pytest.approx(
        float(np.sum(rates_from_P(v.P, 0.5) @ w)), rel=1e-12)
    v.W = 0 * v.W
    v.P, v.V, v.Z = 0 * v.P, 0 * v.V, 0 * v.Z
    assert al_objective(v, zero, H, A, w, 0.5) == 0.0


def test_residuals():
    rng = np.random.default_rng(22)
    v, d, H, A = random_state(rng)
    G = v.F @ v.W
    v.P = np.conj(np.swapaxes(H, -1, -2)) @ G
    v.V, v.Z = G.copy(), A @ G
    _, _, _, E = residuals(v, H, A)
    assert np.all(E == 0)
    v.P[1, 2, 0] += 0.125
    _, _, _, E = residuals(v, H, A)
    assert E[1] == 0.125 and E[0] == 0 and E[2] == 0
    v2, _, H2, A2 = random_state(rng)
    rP, rV, rZ, E = residuals(v2, H2, A2)
    for t in range(3):
        G = v2.F[t] @ v2.W[t]
        ref = max(np.max(np.abs(v2.P[t] - H2[t].conj().T @ G)), np.max(np.abs(v2.V[t] - G)),
                  np.max(np.abs(v2.Z[t] - A2[t] @ G)))
        assert E[t] == pytest.approx(ref, rel=1e-14)


def test_dual_penalty_step():
    rng = np.random.default_rng(23)
    _, d, _, _ = random_state(rng)
    rP, rV, rZ = 0 * d.U, 0 * d.Y, 0 * d.T
    same = dual_penalty_step(d, rP, rV, rZ, np.zeros(3), 1e-4, 0.8)
    assert np.array_equal(same.U, d.U) and np.array_equal(same.rho, d.rho)
    rP = crandn(rng, *d.U.shape)
    rV = crandn(rng, *d.Y.shape)
    rZ = crandn(rng, *d.T.shape)
    E = np.array([1e-5, 1e-3, 1e-4])
    out = dual_penalty_step(d, rP, rV, rZ, E, 1e-4, 0.8)
    assert out.rho[1] == 0.8 * d.rho[1]
    assert out.rho[0] == d.rho[0] and out.rho[2] == d.rho[2]
    assert np.array_equal(out.U[1], d.U[1])
    np.testing.assert_allclose(out.U[0], d.U[0] + rP[0] / d.rho[0], rtol=1e-15)
    np.testing.assert_allclose(out.T[2], d.T[2] + rZ[2] / d.rho[2], rtol=1e-15)


# ---------------------------------------------------------------------------
# initial point
# ---------------------------------------------------------------------------

def test_initial_z_meets_sensing_target():
    from uavisac.pdd import Problem, SolverConfig, initial_variables
    from uavisac.scenario import make_scenario

    for gamma in (5.0, 30.0):
        sc = make_scenario("small", seed=0, power_dbm=20, gamma_s_db=gamma)
        pb = Problem(sc, SolverConfig())
        v = initial_variables(pb, np.random.default_rng(0))
        _, A = pb.channels(v.Q)
        AG = A @ (v.F @ v.W)
        z2 = np.sum(np.abs(v.Z) ** 2, axis=(-2, -1))
        assert np.all(z2 >= pb.sense_target * (1 - 1e-12))
        # slots that already meet the target keep Z = A F W
        ok = np.sum(np.abs(AG) ** 2, axis=(-2, -1)) >= pb.sense_target
        np.testing.assert_array_equal(v.Z[ok], AG[ok])
        if gamma == 30.0:
            assert not np.all(ok)
