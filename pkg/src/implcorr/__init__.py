"""Implied basket correlation surfaces, their factor dynamics, and dispersion backtests."""

from implcorr.correlation import (
    SegmentedRegression,
    basket_variance,
    equicorrelation,
    fisher_z,
    fisher_z_inv,
)
from implcorr.dsfm import DSFM, FactorModel, Grid2D
from implcorr.marketdata import EcdfTransformer, OptionTrade, SurfacePanel, SurfacePoint
from implcorr.timeseries import FactorDynamics, VarModel

__version__ = "0.1.0"

__all__ = [
    "DSFM",
    "EcdfTransformer",
    "FactorDynamics",
    "FactorModel",
    "Grid2D",
    "OptionTrade",
    "SegmentedRegression",
    "SurfacePanel",
    "SurfacePoint",
    "VarModel",
    "basket_variance",
    "equicorrelation",
    "fisher_z",
    "fisher_z_inv",
]
