"""Learned visual-masking enhancement for full-reference image quality metrics.

A small CNN predicts a per-pixel (or per-feature-location) mask from a
reference/distorted pair; the base metric (MAE, PSNR, SSIM, MS-SSIM, FLIP,
VGG, LPIPS, DISTS) is evaluated on the masked inputs and a tiny scaler maps
the result onto the MOS scale.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source checkout
    __version__ = "0.1.0"

from .masking import EnhancedMetric, enhanced_score, force_mask_output  # noqa: E402
from .metrics import METRIC_IDS, get_metric  # noqa: E402

__all__ = ["EnhancedMetric", "METRIC_IDS", "enhanced_score", "force_mask_output", "get_metric", "__version__"]
