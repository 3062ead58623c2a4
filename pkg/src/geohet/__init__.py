"""Geographic regression with learned spatiotemporal conditions."""

from .baselines import GWRRegressor, OLSRegressor
from .estimator import GeoHetRegressor, WindowScaler

__all__ = ["GeoHetRegressor", "GWRRegressor", "OLSRegressor", "WindowScaler"]
__version__ = "0.1.0"
