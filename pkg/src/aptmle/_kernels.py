"""Hot inner loops: weighted lasso coordinate descent and the MARS knot scan.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature. The numba path is used when numba imports cleanly and the
``APTMLE_DISABLE_NUMBA`` environment variable is unset (or "0"). The choice
is made once, at import time.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_DISABLED = os.environ.get("APTMLE_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")
USE_NUMBA = numba is not None and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"

# hinge columns whose residual norm (after projection on the current basis)
# falls below this fraction of their raw norm are treated as aliased
_ALIAS_TOL = 1e-10


# ---------------------------------------------------------------------------
# coordinate descent for  (1/2n) sum w (z - X b)^2 + lam * sum_{penalized} |b_j|
# ---------------------------------------------------------------------------

def _cd_wls_numpy(X, z, w, lam, penalized, beta, max_iter, tol):
    n, p = X.shape
    beta = beta.copy()
    r = z - X @ beta
    wx = w[:, None] * X
    xwx = np.einsum("ij,ij->j", wx, X) / n
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        max_change = 0.0
        for j in range(p):
            if xwx[j] <= 0.0:
                continue
            rho = wx[:, j] @ r / n + xwx[j] * beta[j]
            if penalized[j]:
                new = np.sign(rho) * max(abs(rho) - lam, 0.0) / xwx[j]
            else:
                new = rho / xwx[j]
            delta = new - beta[j]
            if delta != 0.0:
                r -= delta * X[:, j]
                beta[j] = new
                max_change = max(max_change, xwx[j] * delta * delta)
        if max_change < tol:
            break
    return beta, n_iter


def _knot_gains_numpy(x, knots, Q, r):
    # h+ = max(0, x - t), h- = max(0, t - x) for every knot t (columns)
    diff = x[:, None] - knots[None, :]
    hp = np.maximum(diff, 0.0)
    hm = np.maximum(-diff, 0.0)
    qp = Q.T @ hp
    qm = Q.T @ hm
    hp_norm = np.einsum("ij,ij->j", hp, hp)
    hm_norm = np.einsum("ij,ij->j", hm, hm)
    app = hp_norm - np.einsum("ij,ij->j", qp, qp)
    amm = hm_norm - np.einsum("ij,ij->j", qm, qm)
    apm = -np.einsum("ij,ij->j", qp, qm)
    cp = r @ hp
    cm = r @ hm
    return _combine_gains(app, amm, apm, cp, cm, hp_norm, hm_norm)


def _combine_gains(app, amm, apm, cp, cm, hp_norm, hm_norm):
    ok_p = (hp_norm > 0.0) & (app > _ALIAS_TOL * hp_norm)
    ok_m = (hm_norm > 0.0) & (amm > _ALIAS_TOL * hm_norm)
    safe_app = np.where(ok_p, app, 1.0)
    safe_amm = np.where(ok_m, amm, 1.0)
    single_p = np.where(ok_p, cp * cp / safe_app, 0.0)
    single_m = np.where(ok_m, cm * cm / safe_amm, 0.0)
    det = app * amm - apm * apm
    both = ok_p & ok_m & (det > _ALIAS_TOL * safe_app * safe_amm)
    safe_det = np.where(both, det, 1.0)
    pair = np.where(both, (amm * cp * cp - 2.0 * apm * cp * cm + app * cm * cm) / safe_det, 0.0)
    gain = np.where(both, pair, np.maximum(single_p, single_m))
    use_p = np.where(both, True, ok_p & (single_p >= single_m))
    use_m = np.where(both, True, ok_m & (single_m > single_p))
    return gain, use_p, use_m


if USE_NUMBA:

    @numba.njit(cache=True)
    def _cd_wls_numba(X, z, w, lam, penalized, beta, max_iter, tol):
        n, p = X.shape
        beta = beta.copy()
        r = z - X @ beta
        xwx = np.zeros(p)
        for j in range(p):
            acc = 0.0
            for i in range(n):
                acc += w[i] * X[i, j] * X[i, j]
            xwx[j] = acc / n
        n_iter = 0
        for it in range(max_iter):
            n_iter = it + 1
            max_change = 0.0
            for j in range(p):
                if xwx[j] <= 0.0:
                    continue
                acc = 0.0
                for i in range(n):
                    acc += w[i] * X[i, j] * r[i]
                rho = acc / n + xwx[j] * beta[j]
                if penalized[j]:
                    mag = abs(rho) - lam
                    if mag > 0.0:
                        new = np.sign(rho) * mag / xwx[j]
                    else:
                        new = 0.0
                else:
                    new = rho / xwx[j]
                delta = new - beta[j]
                if delta != 0.0:
                    for i in range(n):
                        r[i] -= delta * X[i, j]
                    beta[j] = new
                    change = xwx[j] * delta * delta
                    if change > max_change:
                        max_change = change
            if max_change < tol:
                break
        return beta, n_iter

    @numba.njit(cache=True)
    def _knot_moments_numba(x, knots, Q, r):
        n, m = Q.shape
        K = knots.shape[0]
        app = np.empty(K)
        amm = np.empty(K)
        apm = np.empty(K)
        cp = np.empty(K)
        cm = np.empty(K)
        hp_norm = np.empty(K)
        hm_norm = np.empty(K)
        qp = np.empty(m)
        qm = np.empty(m)
        for k in range(K):
            t = knots[k]
            qp[:] = 0.0
            qm[:] = 0.0
            sp = 0.0
            sm = 0.0
            rp = 0.0
            rm = 0.0
            for i in range(n):
                d = x[i] - t
                if d > 0.0:
                    sp += d * d
                    rp += d * r[i]
                    for c in range(m):
                        qp[c] += Q[i, c] * d
                elif d < 0.0:
                    d = -d
                    sm += d * d
                    rm += d * r[i]
                    for c in range(m):
                        qm[c] += Q[i, c] * d
            pp = 0.0
            mm = 0.0
            pm = 0.0
            for c in range(m):
                pp += qp[c] * qp[c]
                mm += qm[c] * qm[c]
                pm += qp[c] * qm[c]
            app[k] = sp - pp
            amm[k] = sm - mm
            apm[k] = -pm
            cp[k] = rp
            cm[k] = rm
            hp_norm[k] = sp
            hm_norm[k] = sm
        return app, amm, apm, cp, cm, hp_norm, hm_norm

    def _knot_gains_numba(x, knots, Q, r):
        moments = _knot_moments_numba(
            np.ascontiguousarray(x, dtype=np.float64),
            np.ascontiguousarray(knots, dtype=np.float64),
            np.ascontiguousarray(Q, dtype=np.float64),
            np.ascontiguousarray(r, dtype=np.float64),
        )
        return _combine_gains(*moments)


def cd_wls(X, z, w, lam, penalized, beta, max_iter=10_000, tol=1e-12):
    """Cyclic coordinate descent on a weighted, L1-penalized least-squares problem.

    Minimizes ``(1/2n) sum_i w_i (z_i - x_i'b)^2 + lam * sum_{j penalized} |b_j|``
    starting from ``beta``. Returns ``(beta, n_sweeps)``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    penalized = np.ascontiguousarray(penalized, dtype=np.bool_)
    beta = np.ascontiguousarray(beta, dtype=np.float64)
    if USE_NUMBA:
        return _cd_wls_numba(X, z, w, float(lam), penalized, beta, int(max_iter), float(tol))
    return _cd_wls_numpy(X, z, w, float(lam), penalized, beta, int(max_iter), float(tol))


def knot_gains(x, knots, Q, r):
    """RSS reduction from adding the hinge pair at each knot to an orthonormal basis ``Q``.

    ``r`` must be the residual of the current fit (orthogonal to ``Q``).
    Returns ``(gain, use_plus, use_minus)``; a side flagged False is aliased
    with the current basis (or identically zero) and should not be added.
    """
    if USE_NUMBA:
        return _knot_gains_numba(x, knots, Q, r)
    return _knot_gains_numpy(
        np.asarray(x, dtype=np.float64), np.asarray(knots, dtype=np.float64),
        np.asarray(Q, dtype=np.float64), np.asarray(r, dtype=np.float64),
    )
