"""Dynamic semiparametric factor model for daily scattered surfaces."""

from implcorr.dsfm.bandwidth import Bandwidth, bandwidth_criterion, default_h_star, select_bandwidth
from implcorr.dsfm.fpca import covariance_surface, factor_scores, fpca
from implcorr.dsfm.grid import Grid2D
from implcorr.dsfm.model import DSFM, FactorModel, evaluate_surface, fit_components
from implcorr.dsfm.smoothing import (quartic_kernel, smooth_mean, smooth_pair_products,
                                     smooth_second_moment)

__all__ = [
    "Bandwidth", "DSFM", "FactorModel", "Grid2D", "bandwidth_criterion", "covariance_surface",
    "default_h_star", "evaluate_surface", "factor_scores", "fit_components", "fpca",
    "quartic_kernel", "select_bandwidth", "smooth_mean", "smooth_pair_products",
    "smooth_second_moment",
]
