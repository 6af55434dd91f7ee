"""RETAIN-style attention networks with Gaussian stochastic attention for calibrated EHR prediction."""
from .retain import Variant

__version__ = "0.1.0"
__all__ = ["Variant", "__version__"]
