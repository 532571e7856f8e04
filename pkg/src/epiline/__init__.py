"""Two-view calibration from motion barcodes of image lines."""

from .errors import EpilineError

__version__ = "0.1.0"

__all__ = ["EpilineError", "__version__"]
