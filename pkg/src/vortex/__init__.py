"""Consistency-trained multi-coil MRI reconstruction on synthetic phantoms.

Subpackage layout:

* :mod:`vortex.fourier` -- centered orthonormal 2D FFTs
* :mod:`vortex.forward` -- SENSE forward operator, masks, zero-filled recon
* :mod:`vortex.augment` -- physics-driven and image-based augmentations
* :mod:`vortex.model` -- small U-Net with hand-written backprop
* :mod:`vortex.training` -- losses, Adam, the training loop
* :mod:`vortex.evaluate` -- cPSNR / SSIM and the perturbation harness
* :mod:`vortex.data` -- phantom synthesis and the VTXD dataset format
* :mod:`vortex.cli` -- config-driven experiment runner
"""

__version__ = "0.1.0"

from vortex.errors import (
    CorruptDatasetError,
    InvalidArgumentError,
    NonFiniteGradientError,
    VortexError,
)

__all__ = [
    "__version__",
    "VortexError",
    "InvalidArgumentError",
    "CorruptDatasetError",
    "NonFiniteGradientError",
]
