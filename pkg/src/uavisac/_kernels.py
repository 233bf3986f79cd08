"""Compiled inner loops: the analog-beamformer BCD sweep and the barrier
Newton iterations of the trajectory subproblem.

numba is optional: without it the same code runs as plain numpy (agreeing to
rounding, several times slower).
"""

from __future__ import annotations

import numpy as np

try:  # pragma: no cover - exercised implicitly when numba is installed
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def maybe_jit(fn):
    """``numba.njit(cache=True)`` when numba is installed, else ``fn`` itself."""
    return njit(cache=True)(fn) if HAVE_NUMBA else fn


def _quantize_numpy(b, alphabet, tie_tol=1e-15):
    vals = np.real(np.conj(b)[..., None] * alphabet)
    best = vals.max(axis=-1, keepdims=True)
    scale = np.maximum(1.0, np.abs(b))[..., None]
    return alphabet[np.argmax(vals >= best - tie_tol * scale, axis=-1)]


def sweep_numpy(fe, me, ce, coupling, diag, alphabet, active):
    """One BCD sweep in entry space over the ``active`` slots (columns).

    ``fe`` and ``me`` are updated in place.
    """
    for e in range(fe.shape[0]):
        cur = fe[e]
        b = diag[e] * cur - me[e] + ce[e]
        if alphabet is None:
            mag = np.abs(b)
            new = np.where(mag > 0, b / np.where(mag > 0, mag, 1.0), cur)
        else:
            new = np.where(b == 0, cur, _quantize_numpy(b, alphabet))
        new = np.where(active, new, cur)
        delta = new - cur
        fe[e] = new
        me += coupling[e] * delta


if HAVE_NUMBA:
    @njit(cache=True)
    def _sweep_jit(fe, me, ce, coupling, diag, alphabet, discrete, active):  # pragma: no cover
        n_e, T = fe.shape
        n_a = alphabet.shape[0]
        for e in range(n_e):
            for t in range(T):
                if not active[t]:
                    continue
                cur = fe[e, t]
                b = diag[e, t] * cur - me[e, t] + ce[e, t]
                if b == 0:
                    continue
                if discrete:
                    best = -np.inf
                    for i in range(n_a):
                        v = (np.conj(b) * alphabet[i]).real
                        if v > best:
                            best = v
                    thresh = best - 1e-15 * max(1.0, abs(b))
                    new = alphabet[0]
                    for i in range(n_a):
                        if (np.conj(b) * alphabet[i]).real >= thresh:
                            new = alphabet[i]
                            break
                else:
                    new = b / abs(b)
                delta = new - cur
                if delta != 0:
                    fe[e, t] = new
                    for e2 in range(n_e):
                        me[e2, t] += coupling[e, e2, t] * delta


def sweep(fe, me, ce, coupling, diag, alphabet, active):
    active = np.ascontiguousarray(active, dtype=np.bool_)
    if HAVE_NUMBA:
        if alphabet is None:
            _sweep_jit(fe, me, ce, coupling, diag, np.ones(1, dtype=np.complex128), False, active)
        else:
            _sweep_jit(fe, me, ce, coupling, diag, np.ascontiguousarray(alphabet, dtype=np.complex128),
                       True, active)
    else:
        sweep_numpy(fe, me, ce, coupling, diag, alphabet, active)
