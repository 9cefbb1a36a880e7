"""Local-linear smoothers on a grid with a product quartic kernel.

Both smoothers assemble their normal equations from kernel moments. Because the
product kernel factorises over axes, the moments are matrix products of small
per-axis kernel matrices. The second-moment smoother sums over distinct pairs
within each day exactly: the full per-day double sum is an outer product of
per-day moments, and the ``j == k`` terms are subtracted afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from implcorr.dsfm.grid import Grid2D

#: exponents (a, b) of the scaled offsets (q1**a * q2**b) used by the local-linear fits
EXPONENTS = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
COND_LIMIT = 1e10
MIN_OBS = 3


def quartic_kernel(q):
    """``15/16 (1 - q^2)^2`` on ``|q| < 1`` and zero elsewhere."""
    q = np.asarray(q, float)
    return np.where(np.abs(q) < 1.0, 15.0 / 16.0 * (1.0 - q * q) ** 2, 0.0)


def _check_bandwidth(h) -> tuple[float, float]:
    h1, h2 = (float(v) for v in h)
    if not (0 < h1 < 1 and 0 < h2 < 1):
        raise ValueError(f"bandwidth components must lie in (0, 1), got {(h1, h2)}")
    return h1, h2


@dataclass
class SmootherDiagnostics:
    """Nodes (or node pairs) whose local fit was replaced by the nearest valid one."""

    filled: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    n_nodes: int = 0

    @property
    def n_filled(self) -> int:
        return int(self.filled.size)


def _axis_moments(nodes, x, h):
    """Per-axis kernel matrices ``k(q) * q**a`` for a = 0, 1, 2, each (G, n)."""
    q = (x[None, :] - nodes[:, None]) / h
    k = quartic_kernel(q)
    return [k, k * q, k * q * q], (k > 0).astype(float)


def _node_moments(A1, A2, weights, exps=EXPONENTS):
    """``sum_j w_j k1 q1^a k2 q2^b`` for every grid node, flattened row-major."""
    return {e: ((A1[e[0]] * weights) @ A2[e[1]].T).ravel() for e in exps}


def _well_conditioned(M):
    """Boolean mask of batched symmetric matrices with acceptable scaled condition number."""
    d = np.sqrt(np.clip(np.einsum("...ii->...i", M), 0, None))
    ok = np.all(d > 0, axis=-1)
    safe = np.where(d > 0, d, 1.0)
    S = M / (safe[..., :, None] * safe[..., None, :])
    ev = np.linalg.eigvalsh(S)
    ok &= ev[..., 0] > ev[..., -1] / COND_LIMIT
    return ok


def _fill_nearest(values, valid, coords):
    if valid.all():
        return values, np.zeros(0, int)
    if not valid.any():
        raise ValueError("no grid node has enough local data for the smoother")
    tree = cKDTree(coords[valid])
    bad = np.flatnonzero(~valid)
    _, nearest = tree.query(coords[bad])
    out = values.copy()
    out[bad] = values[valid][nearest]
    return out, bad


def _solve_intercepts(M, r, valid):
    out = np.zeros(M.shape[0])
    if valid.any():
        sol = np.linalg.solve(M[valid], r[valid][..., None])[..., 0]
        out[valid] = sol[:, 0]
    return out


def smooth_mean(X, y, grid: Grid2D, h, return_diagnostics: bool = False):
    """Local-linear estimate of the regression surface at every grid node.

    Parameters
    ----------
    X : array of shape (n, 2)
        Observation coordinates in the unit square.
    y : array of shape (n,)
        Responses.
    grid : Grid2D
    h : pair of floats
        Bandwidths per axis.

    Returns
    -------
    ndarray of shape grid.shape, plus diagnostics when requested.
    """
    X = np.asarray(X, float).reshape(-1, 2)
    y = np.asarray(y, float)
    h1, h2 = _check_bandwidth(h)
    A1, I1 = _axis_moments(grid.u_nodes, X[:, 0], h1)
    A2, I2 = _axis_moments(grid.v_nodes, X[:, 1], h2)
    m = _node_moments(A1, A2, np.ones_like(y))
    my = _node_moments(A1, A2, y, EXPONENTS[:3])
    counts = (I1 @ I2.T).ravel()

    z = [(0, 0), (1, 0), (0, 1)]
    G = grid.size
    M = np.empty((G, 3, 3))
    for a in range(3):
        for b in range(3):
            M[:, a, b] = m[(z[a][0] + z[b][0], z[a][1] + z[b][1])]
    r = np.column_stack([my[e] for e in z])
    valid = counts >= MIN_OBS
    valid[valid] = _well_conditioned(M[valid])
    est, bad = _fill_nearest(_solve_intercepts(M, r, valid), valid, grid.points)
    out = est.reshape(grid.shape)
    if return_diagnostics:
        return out, SmootherDiagnostics(bad, G)
    return out


def smooth_pair_products(X, day, grid: Grid2D, h, left, right, chunk: int = 4096,
                         return_diagnostics: bool = False):
    """Local-linear smoother over within-day pairs ``j != k`` of ``sum_s left[j, s] * right[k, s]``.

    The fit at node pair (u, v) regresses the pair response on
    ``[1, (X_j - u) / h, (X_k - v) / h]`` with weight ``K_h(X_j - u) K_h(X_k - v)``
    and returns the intercept. The result has shape (G, G) with G = grid.size
    and is not symmetrised.
    """
    X = np.asarray(X, float).reshape(-1, 2)
    day = np.asarray(day, int)
    left = np.asarray(left, float).reshape(X.shape[0], -1)
    right = np.asarray(right, float).reshape(X.shape[0], -1)
    if left.shape != right.shape:
        raise ValueError("left and right response factors must have the same shape")
    h1, h2 = _check_bandwidth(h)
    T = int(day.max()) + 1
    n = X.shape[0]
    A1, I1 = _axis_moments(grid.u_nodes, X[:, 0], h1)
    A2, I2 = _axis_moments(grid.v_nodes, X[:, 1], h2)
    G = grid.size
    lin = EXPONENTS[:3]
    n_resp = left.shape[1]
    day_of = sparse.csr_matrix((np.ones(n), (day, np.arange(n))), shape=(T, n))

    # per-day node moments (T, G): unweighted, and weighted by each response factor
    E1 = {e: np.zeros((T, G)) for e in EXPONENTS}
    EL = [{e: np.zeros((T, G)) for e in lin} for _ in range(n_resp)]
    ER = [{e: np.zeros((T, G)) for e in lin} for _ in range(n_resp)]
    # sums over ordered pairs (j, k) within a day, first with then without j == k
    pairs = [((0, 0), (0, 0)), ((1, 0), (0, 0)), ((0, 1), (0, 0)), ((2, 0), (0, 0)),
             ((1, 1), (0, 0)), ((0, 2), (0, 0)), ((1, 0), (1, 0)), ((1, 0), (0, 1)),
             ((0, 1), (0, 1))]
    rhs_pairs = [((0, 0), (0, 0)), ((1, 0), (0, 0)), ((0, 1), (0, 0)), ((0, 0), (1, 0)),
                 ((0, 0), (0, 1))]
    S = {p: np.zeros((G, G)) for p in pairs}
    R = {p: np.zeros((G, G)) for p in rhs_pairs}
    diag_w = np.sum(left * right, axis=1)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        D = day_of[:, sl]
        F = {e: (A1[e[0]][:, None, sl] * A2[e[1]][None, :, sl]).reshape(G, -1) for e in EXPONENTS}
        for e in EXPONENTS:
            E1[e] += D @ F[e].T
        for s in range(n_resp):
            for e in lin:
                EL[s][e] += D @ (F[e] * left[sl, s]).T
                ER[s][e] += D @ (F[e] * right[sl, s]).T
        for e, f in pairs:
            S[(e, f)] -= F[e] @ F[f].T
        w = diag_w[sl]
        for e, f in rhs_pairs:
            R[(e, f)] -= (F[e] * w) @ F[f].T
    for e, f in pairs:
        S[(e, f)] += E1[e].T @ E1[f]
    for s in range(n_resp):
        for e, f in rhs_pairs:
            R[(e, f)] += EL[s][e].T @ ER[s][f]

    def moment(e, f):
        if (e, f) in S:
            return S[(e, f)]
        return S[(f, e)].T

    # regressors: 1, q_u1(j), q_u2(j), q_v1(k), q_v2(k) as (left exponent, right exponent)
    z = [((0, 0), (0, 0)), ((1, 0), (0, 0)), ((0, 1), (0, 0)), ((0, 0), (1, 0)), ((0, 0), (0, 1))]
    M = np.empty((G, G, 5, 5))
    for a in range(5):
        for b in range(a, 5):
            e = (z[a][0][0] + z[b][0][0], z[a][0][1] + z[b][0][1])
            f = (z[a][1][0] + z[b][1][0], z[a][1][1] + z[b][1][1])
            M[:, :, a, b] = moment(e, f)
            M[:, :, b, a] = M[:, :, a, b]
    rhs = np.stack([R[zz] for zz in z], axis=-1)
    M = M.reshape(G * G, 5, 5)
    rhs = rhs.reshape(G * G, 5)

    counts = (I1 @ I2.T).ravel()
    node_ok = counts >= MIN_OBS
    valid = (node_ok[:, None] & node_ok[None, :]).ravel()
    valid[valid] = _well_conditioned(M[valid])
    est = _solve_intercepts(M, rhs, valid)
    pts = grid.points
    coords = np.concatenate([np.repeat(pts, G, axis=0), np.tile(pts, (G, 1))], axis=1)
    est, bad = _fill_nearest(est, valid, coords)
    out = est.reshape(G, G)
    if return_diagnostics:
        return out, SmootherDiagnostics(bad, G * G)
    return out


def smooth_second_moment(X, y, day, grid: Grid2D, h, return_diagnostics: bool = False):
    """Symmetrised local-linear estimate of ``E[Y(u) Y(v)]`` from distinct within-day pairs."""
    y = np.asarray(y, float)
    res = smooth_pair_products(X, day, grid, h, y, y, return_diagnostics=return_diagnostics)
    phi, diag = res if return_diagnostics else (res, None)
    phi = 0.5 * (phi + phi.T)
    return (phi, diag) if return_diagnostics else phi
