"""Centered, orthonormally scaled 2D Fourier transforms.

Conventions, fixed for the whole package:

* transforms act on the last two axes, so multi-coil stacks pass through
  unchanged on the leading axes;
* "centered" means the zero-frequency sample sits at index
  ``(H // 2, W // 2)``, and the spatial origin is the same pixel
  (``ifftshift`` before the FFT, ``fftshift`` after);
* orthonormal scaling (``1/sqrt(H*W)`` in each direction), so the
  transform is unitary and the SENSE forward/adjoint pair are true
  adjoints without extra constants.

Any ``H, W >= 1`` is supported; output size always equals input size.
"""

from __future__ import annotations

import numpy as np

from vortex.errors import InvalidArgumentError


def _check_2d(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise InvalidArgumentError(
            f"{name} expects an array with two nonempty trailing axes, got shape {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError(f"{name} input contains NaN/Inf")
    return x


def fft2c(img: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2D DFT of ``img`` over its last two axes."""
    img = _check_2d(img, "fft2c")
    shifted = np.fft.ifftshift(img, axes=(-2, -1))
    ksp = np.fft.fft2(shifted, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(ksp, axes=(-2, -1))


def ifft2c(ksp: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    ksp = _check_2d(ksp, "ifft2c")
    shifted = np.fft.ifftshift(ksp, axes=(-2, -1))
    img = np.fft.ifft2(shifted, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(img, axes=(-2, -1))
