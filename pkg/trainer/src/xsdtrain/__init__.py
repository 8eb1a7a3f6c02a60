"""Training side of the xSDNet pipeline.

Builds datasets through the spiralcine command-line tools and their binary
file formats, trains the disentangled network with the SDNet loss family
plus a perceptual reconstruction loss, and exports XSDW weight files that
the inference engine loads directly.
"""

from .model import XsdNet, default_manifest, export_tensors  # noqa: F401
from .data import TrainingSample, augment, build_dataset  # noqa: F401
from .train import TrainConfig, train  # noqa: F401
from .fileio import read_imgs, read_mask, write_xsdw  # noqa: F401
