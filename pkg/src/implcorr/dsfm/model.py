"""Fitted factor model container and the scikit-learn style estimator."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from implcorr.correlation import fisher_z_inv
from implcorr.dsfm.bandwidth import DEFAULT_CANDIDATES, Bandwidth, default_h_star, select_bandwidth
from implcorr.dsfm.fpca import covariance_surface, factor_scores, fpca
from implcorr.dsfm.grid import Grid2D
from implcorr.dsfm.smoothing import smooth_mean, smooth_second_moment
from implcorr.marketdata import EcdfTransformer, SurfacePanel


def fit_components(U, y, day, grid: Grid2D, h_mu, h_phi, L_max: int, variance_threshold: float):
    """Mean, covariance, basis and scores on already transformed coordinates.

    ``explained_variance`` is the in-sample share of ``y - m0(X)`` variance
    captured by the factor part; ``eigenvalue_share`` is the cumulative share of
    the leading eigenvalues in the clipped covariance spectrum.
    """
    m0, d_mu = smooth_mean(U, y, grid, tuple(h_mu), return_diagnostics=True)
    phi, d_phi = smooth_second_moment(U, y, day, grid, tuple(h_phi), return_diagnostics=True)
    psi = covariance_surface(phi, m0)
    basis, eigenvalues, L = fpca(psi, grid, L_max, variance_threshold)
    scores, d_sc = factor_scores(U, y, day, m0, basis, grid, return_diagnostics=True)
    total = eigenvalues.sum()
    eigen_share = float(eigenvalues[:L].sum() / total) if total > 0 else 1.0
    # share of the de-meaned data variance captured by the factor part
    resid0 = y - grid.interpolate(m0, U)
    resid = resid0 - (np.sum(grid.interpolate(basis, U) * scores[day], axis=1) if L else 0.0)
    ss0 = float(resid0 @ resid0)
    explained = float(np.clip(1.0 - (resid @ resid) / ss0, 0.0, 1.0)) if ss0 > 0 else 1.0
    return {
        "m0": m0, "basis": basis, "eigenvalues": eigenvalues[:L], "L": L, "scores": scores,
        "explained_variance": explained, "eigenvalue_share": eigen_share,
        "diagnostics": {
            "mean_nodes_filled": d_mu.n_filled,
            "pair_nodes_filled": d_phi.n_filled,
            "days_carried_forward": d_sc.carried_forward,
            "days_ridge": d_sc.ridge,
            "eigenvalue_share": eigen_share,
        },
    }


@dataclass(eq=False)
class FactorModel:
    """Grid-sampled mean and basis surfaces with eigenvalues and daily scores."""

    grid: Grid2D
    m0: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    scores: np.ndarray
    explained_variance: float
    dates: list = field(default_factory=list)
    bandwidth_mean: tuple = ()
    bandwidth_phi: tuple = ()
    h_star: tuple = ()
    ecdf: EcdfTransformer | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.m0 = np.asarray(self.m0, float).reshape(self.grid.shape)
        self.basis = np.asarray(self.basis, float).reshape((-1,) + self.grid.shape)
        self.eigenvalues = np.asarray(self.eigenvalues, float)
        self.scores = np.asarray(self.scores, float).reshape(-1, self.basis.shape[0])
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ValueError("eigenvalues must be nonincreasing")

    @property
    def n_factors(self) -> int:
        return self.basis.shape[0]

    def gram(self) -> np.ndarray:
        """Quadrature Gram matrix of the basis surfaces."""
        B = self.basis.reshape(self.n_factors, -1)
        return (B * self.grid.node_weights) @ B.T

    def surface(self, z) -> np.ndarray:
        """``m0 + sum_l z_l m_l`` on the grid."""
        z = np.asarray(z, float).reshape(self.n_factors)
        return self.m0 + np.tensordot(z, self.basis, axes=1)

    def to_unit(self, x, check_range: bool = True) -> np.ndarray:
        """Raw coordinates mapped to the unit square; out-of-range points clamp when unchecked."""
        x = np.asarray(x, float).reshape(-1, 2)
        if self.ecdf is None:
            return x
        return self.ecdf.transform(x, check_range=check_range)

    def predict_transformed(self, z, x) -> np.ndarray:
        """Surface value before the inverse Fisher-Z map at raw coordinates ``x``."""
        return self.grid.interpolate(self.surface(z), self.to_unit(x))

    def evaluate_surface(self, z, x) -> np.ndarray:
        """Correlation at raw (kappa, tau) coordinates for score vector ``z``."""
        return fisher_z_inv(self.predict_transformed(z, x))

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "m0": self.m0.ravel().tolist(),
            "basis": [b.ravel().tolist() for b in self.basis],
            "eigenvalues": self.eigenvalues.tolist(),
            "explained_variance": self.explained_variance,
            "dates": [d.isoformat() for d in self.dates],
            "scores": self.scores.tolist(),
            "bandwidth_mean": list(self.bandwidth_mean),
            "bandwidth_phi": list(self.bandwidth_phi),
            "h_star": list(self.h_star),
            "ecdf": None if self.ecdf is None else self.ecdf.to_dict(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FactorModel":
        grid = Grid2D.from_dict(d["grid"])
        L = len(d["basis"])
        return cls(
            grid=grid,
            m0=np.asarray(d["m0"], float),
            basis=np.asarray(d["basis"], float).reshape((L,) + grid.shape),
            eigenvalues=np.asarray(d["eigenvalues"], float),
            scores=np.asarray(d["scores"], float).reshape(-1, L),
            explained_variance=d["explained_variance"],
            dates=[dt.date.fromisoformat(s) for s in d["dates"]],
            bandwidth_mean=tuple(d["bandwidth_mean"]),
            bandwidth_phi=tuple(d["bandwidth_phi"]),
            h_star=tuple(d["h_star"]),
            ecdf=None if d["ecdf"] is None else EcdfTransformer.from_dict(d["ecdf"]),
            diagnostics=d.get("diagnostics", {}),
        )

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "FactorModel":
        return cls.from_dict(json.loads(text))


def evaluate_surface(model: FactorModel, z, x):
    return model.evaluate_surface(z, x)


def _unpack(X, y, day):
    if isinstance(X, SurfacePanel):
        Xa, ya, da = X.to_arrays()
        return Xa, ya, da, X.dates
    if y is None or day is None:
        raise ValueError("pass a SurfacePanel or the arrays X, y and day")
    day = np.asarray(day, int)
    return np.asarray(X, float).reshape(-1, 2), np.asarray(y, float), day, []


class DSFM(TransformerMixin, BaseEstimator):
    """Dynamic semiparametric factor model fitted by smoothing and functional PCA.

    Parameters
    ----------
    grid_size : tuple of int
        Nodes per axis of the evaluation grid on the unit square.
    bandwidth : tuple of float or "auto"
        Mean-smoother bandwidth in transformed coordinates. ``"auto"`` searches
        ``candidate_bandwidths``.
    bandwidth_phi : tuple of float, optional
        Second-moment bandwidth; defaults to the mean bandwidth.
    candidate_bandwidths : sequence of pairs, optional
    n_factors_max : int
    variance_threshold : float
        Cumulative eigenvalue share used to choose the number of factors.
    h_star : tuple of float, optional
        Weighting bandwidth of the selection criterion.
    transform_coordinates : bool
        Map coordinates through their pooled empirical CDF before smoothing.

    Attributes
    ----------
    model_ : FactorModel
    scores_ : ndarray of shape (T, L)
    bandwidth_scores_ : dict
        Criterion value per candidate when ``bandwidth="auto"``.
    """

    def __init__(self, grid_size=(25, 25), bandwidth=(0.12, 0.17), bandwidth_phi=None,
                 candidate_bandwidths=None, n_factors_max=3, variance_threshold=0.99,
                 h_star=None, transform_coordinates=True):
        self.grid_size = grid_size
        self.bandwidth = bandwidth
        self.bandwidth_phi = bandwidth_phi
        self.candidate_bandwidths = candidate_bandwidths
        self.n_factors_max = n_factors_max
        self.variance_threshold = variance_threshold
        self.h_star = h_star
        self.transform_coordinates = transform_coordinates

    def fit(self, X, y=None, day=None, dates=None):
        X, y, day, panel_dates = _unpack(X, y, day)
        if X.shape[0] != y.shape[0] or day.shape[0] != y.shape[0]:
            raise ValueError("X, y and day lengths differ")
        grid = Grid2D.regular(*self.grid_size)
        ecdf = EcdfTransformer().fit(X) if self.transform_coordinates else None
        U = X if ecdf is None else ecdf.transform(X)
        h_star = Bandwidth(*(self.h_star if self.h_star is not None else default_h_star(U)))
        self.bandwidth_scores_ = {}
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "auto":
                raise ValueError(f"unknown bandwidth option {self.bandwidth!r}")
            cands = self.candidate_bandwidths or DEFAULT_CANDIDATES
            h_mu, self.bandwidth_scores_ = select_bandwidth(
                U, y, day, grid, cands, self.n_factors_max, self.variance_threshold, h_star)
        else:
            h_mu = Bandwidth(*self.bandwidth)
        h_phi = h_mu if self.bandwidth_phi is None else Bandwidth(*self.bandwidth_phi)
        comp = fit_components(U, y, day, grid, h_mu, h_phi, self.n_factors_max,
                              self.variance_threshold)
        self.model_ = FactorModel(
            grid=grid, m0=comp["m0"], basis=comp["basis"], eigenvalues=comp["eigenvalues"],
            scores=comp["scores"], explained_variance=comp["explained_variance"],
            dates=list(dates if dates is not None else panel_dates),
            bandwidth_mean=tuple(h_mu), bandwidth_phi=tuple(h_phi), h_star=tuple(h_star),
            ecdf=ecdf, diagnostics=comp["diagnostics"])
        self.scores_ = self.model_.scores
        self.n_factors_ = self.model_.n_factors
        self.explained_variance_ = self.model_.explained_variance
        return self

    def transform(self, X, y=None, day=None):
        """Factor scores of new days under the fitted mean and basis.

        Coordinates outside the fitted range are clamped to its edge.
        """
        check_is_fitted(self, "model_")
        X, y, day, _ = _unpack(X, y, day)
        m = self.model_
        return factor_scores(m.to_unit(X, check_range=False), y, day, m.m0, m.basis, m.grid)

    def predict(self, X, scores=None):
        """Transformed-scale surface values at raw coordinates; defaults to the last fitted day."""
        check_is_fitted(self, "model_")
        z = self.model_.scores[-1] if scores is None else scores
        return self.model_.predict_transformed(z, X)
