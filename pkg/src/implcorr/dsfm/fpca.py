"""Covariance operator, its eigen-decomposition and per-day factor scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from implcorr.dsfm.grid import Grid2D

RIDGE = 1e-8


def covariance_surface(phi_hat, mu_hat) -> np.ndarray:
    """``phi(u, v) - mu(u) mu(v)`` projected onto the positive semidefinite cone.

    ``phi_hat`` is (G, G) over flattened grid nodes and ``mu_hat`` has G entries
    (any shape). Negative eigenvalues are clipped to zero.
    """
    phi = np.asarray(phi_hat, float)
    mu = np.ravel(mu_hat)
    if phi.shape != (mu.size, mu.size):
        raise ValueError(f"phi shape {phi.shape} does not match mean with {mu.size} nodes")
    psi = phi - np.outer(mu, mu)
    psi = 0.5 * (psi + psi.T)
    vals, vecs = np.linalg.eigh(psi)
    vals = np.clip(vals, 0.0, None)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def fpca(psi_hat, grid: Grid2D, L_max: int, variance_threshold: float):
    """Eigenfunctions of the covariance operator under grid quadrature.

    Returns
    -------
    basis : ndarray of shape (L, G1, G2)
        Orthonormal under ``grid.inner``; the largest-magnitude entry of each is positive.
    eigenvalues : ndarray of shape (G1 * G2,)
        Full spectrum in decreasing order, negatives clipped to zero.
    L : int
        ``min(L_max, smallest L whose cumulative eigenvalue share reaches the threshold)``.
    """
    psi = np.asarray(psi_hat, float)
    G = grid.size
    if psi.shape != (G, G):
        raise ValueError(f"covariance shape {psi.shape} does not match grid of {G} nodes")
    scale = max(np.abs(psi).max(), 1e-300)
    if np.abs(psi - psi.T).max() > 1e-12 * scale:
        raise ValueError("covariance surface must be symmetric")
    if not 0 < variance_threshold <= 1:
        raise ValueError("variance_threshold must lie in (0, 1]")
    sw = np.sqrt(grid.node_weights)
    B = sw[:, None] * psi * sw[None, :]
    vals, vecs = np.linalg.eigh(0.5 * (B + B.T))
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    total = vals.sum()
    if total <= 0:
        return np.zeros((0,) + grid.shape), vals, 0
    share = np.cumsum(vals) / total
    L = int(min(L_max, np.searchsorted(share, variance_threshold - 1e-12) + 1))
    gamma = vecs[:, :L] / sw[:, None]
    peak = gamma[np.argmax(np.abs(gamma), axis=0), np.arange(L)]
    gamma = gamma * np.sign(peak)
    return gamma.T.reshape((L,) + grid.shape), vals, L


@dataclass
class ScoreDiagnostics:
    carried_forward: list[int]
    ridge: list[int]


def factor_scores(X, y, day, m0, basis, grid: Grid2D, n_days: int | None = None,
                  return_diagnostics: bool = False):
    """Per-day least-squares loadings of ``y - m0(X)`` on the basis surfaces.

    Surfaces are bilinearly interpolated at the observation coordinates. Days
    with fewer than ``L + 1`` observations repeat the previous day's scores
    (zeros on the first day). A rank-deficient design uses a small ridge penalty.
    """
    X = np.asarray(X, float).reshape(-1, 2)
    y = np.asarray(y, float)
    day = np.asarray(day, int)
    basis = np.asarray(basis, float).reshape((-1,) + grid.shape)
    L = basis.shape[0]
    T = int(day.max()) + 1 if n_days is None else n_days
    resid = y - grid.interpolate(m0, X)
    design = grid.interpolate(basis, X) if L else np.zeros((y.size, 0))
    scores = np.zeros((T, L))
    carried, ridge = [], []
    order = np.argsort(day, kind="stable")
    bounds = np.searchsorted(day[order], np.arange(T + 1))
    prev = np.zeros(L)
    for t in range(T):
        idx = order[bounds[t]:bounds[t + 1]]
        if L == 0:
            continue
        if idx.size < L + 1:
            scores[t] = prev
            carried.append(t)
            continue
        A = design[idx]
        r = resid[idx]
        if np.linalg.matrix_rank(A) < L:
            scores[t] = np.linalg.solve(A.T @ A + RIDGE * np.eye(L), A.T @ r)
            ridge.append(t)
        else:
            scores[t] = np.linalg.lstsq(A, r, rcond=None)[0]
        prev = scores[t]
    if return_diagnostics:
        return scores, ScoreDiagnostics(carried, ridge)
    return scores
