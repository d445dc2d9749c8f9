"""Multi-coil SENSE forward model and undersampling masks.

The acquisition operator maps an image ``x`` to per-coil k-space via
coil-sensitivity weighting, a centered orthonormal FFT, and a binary
sampling mask.  Its adjoint (coil-combined inverse FFT of the masked
data) doubles as the zero-filled reconstruction fed to the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vortex import rng as vrng
from vortex.errors import InvalidArgumentError
from vortex.fourier import fft2c, ifft2c

COUNT_TOLERANCE = 0.05  # achieved mask density must be within +-5% of H*W/R


@dataclass(frozen=True)
class SensitivityMaps:
    """Per-coil complex spatial modulation, root-sum-of-squares normalized.

    ``maps`` has shape (C, H, W).  The generator in :mod:`vortex.data`
    normalizes so that ``sum_c |S_c(p)|^2 == 1`` at every pixel.
    """

    maps: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.maps, dtype=np.complex128)
        if m.ndim != 3 or m.shape[0] < 1:
            raise InvalidArgumentError(f"maps must be (C, H, W), got shape {m.shape}")
        object.__setattr__(self, "maps", m)

    @property
    def coils(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps.shape[-2:]

    def rss(self) -> np.ndarray:
        """Root-sum-of-squares magnitude, shape (H, W)."""
        return np.sqrt(np.sum(np.abs(self.maps) ** 2, axis=0))


@dataclass(frozen=True)
class UndersamplingMask:
    """Binary H x W sampling pattern with a fully sampled calibration block."""

    mask: np.ndarray
    acceleration: float
    calibration: tuple[int, int]
    seed: int

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise InvalidArgumentError(f"mask must be 2D, got shape {m.shape}")
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "calibration", tuple(self.calibration))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def as_float(self) -> np.ndarray:
        return self.mask.astype(np.float64)


@dataclass(frozen=True)
class ForwardOperator:
    """Frozen pairing of sensitivity maps and a sampling mask."""

    maps: SensitivityMaps
    mask: UndersamplingMask

    def __post_init__(self):
        if self.maps.shape != self.mask.shape:
            raise InvalidArgumentError(
                f"maps shape {self.maps.shape} != mask shape {self.mask.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def coils(self) -> int:
        return self.maps.coils


def _check_image(op: ForwardOperator, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    if x.shape != op.shape:
        raise InvalidArgumentError(f"image shape {x.shape} != operator shape {op.shape}")
    return x


def _check_kspace(op: ForwardOperator, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.complex128)
    if y.shape != (op.coils,) + op.shape:
        raise InvalidArgumentError(
            f"k-space shape {y.shape} != operator shape {(op.coils,) + op.shape}"
        )
    return y


def forward_apply(op: ForwardOperator, x: np.ndarray) -> np.ndarray:
    """Apply the acquisition operator: per coil, mask * fft2c(S_c * x).

    Returns (C, H, W) k-space with exact zeros at unacquired locations.
    """
    x = _check_image(op, x)
    ksp = fft2c(op.maps.maps * x[None])
    return ksp * op.mask.as_float()


def adjoint_apply(op: ForwardOperator, y: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`forward_apply` under the complex dot product."""
    y = _check_kspace(op, y)
    imgs = ifft2c(y * op.mask.as_float())
    return np.sum(np.conj(op.maps.maps) * imgs, axis=0)


def zero_filled_recon(op: ForwardOperator, y: np.ndarray) -> np.ndarray:
    """Zero-filled reconstruction (the adjoint image); the network input."""
    return adjoint_apply(op, y)


def _bridson_points(height: int, width: int, radius: float, gen: np.random.Generator,
                    k: int = 30) -> np.ndarray:
    """Bridson dart throwing on [0, H) x [0, W) with minimum distance ``radius``."""
    cell = radius / np.sqrt(2.0)
    gh = int(np.ceil(height / cell))
    gw = int(np.ceil(width / cell))
    grid = -np.ones((gh, gw), dtype=np.int64)

    points = []
    first = np.array([gen.uniform(0.0, height), gen.uniform(0.0, width)])
    points.append(first)
    grid[int(first[0] / cell), int(first[1] / cell)] = 0
    active = [0]

    while active:
        # Deterministic LIFO processing; all randomness comes from ``gen``.
        idx = active[-1]
        center = points[idx]
        r = radius * np.sqrt(gen.uniform(1.0, 4.0, size=k))
        theta = gen.uniform(0.0, 2.0 * np.pi, size=k)
        cand = center + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        placed = False
        for cy, cx in cand:
            if not (0.0 <= cy < height and 0.0 <= cx < width):
                continue
            gy, gx = int(cy / cell), int(cx / cell)
            y0, y1 = max(gy - 2, 0), min(gy + 3, gh)
            x0, x1 = max(gx - 2, 0), min(gx + 3, gw)
            neighbors = grid[y0:y1, x0:x1]
            occ = neighbors[neighbors >= 0]
            if occ.size:
                pts = np.asarray([points[i] for i in occ])
                d2 = (pts[:, 0] - cy) ** 2 + (pts[:, 1] - cx) ** 2
                if np.min(d2) < radius * radius:
                    continue
            points.append(np.array([cy, cx]))
            grid[gy, gx] = len(points) - 1
            active.append(len(points) - 1)
            placed = True
            break
        if not placed:
            active.pop()
    return np.asarray(points)


def _rasterize(points: np.ndarray, height: int, width: int) -> np.ndarray:
    """Each point claims its nearest integer pixel; duplicates collapse."""
    mask = np.zeros((height, width), dtype=bool)
    iy = np.clip(np.round(points[:, 0]).astype(np.int64), 0, height - 1)
    ix = np.clip(np.round(points[:, 1]).astype(np.int64), 0, width - 1)
    mask[iy, ix] = True
    return mask


def calibration_block(height: int, width: int, calibration: tuple[int, int]) -> np.ndarray:
    """Boolean mask of the centered calibration region."""
    h_cal, w_cal = calibration
    block = np.zeros((height, width), dtype=bool)
    y0 = height // 2 - h_cal // 2
    x0 = width // 2 - w_cal // 2
    block[y0:y0 + h_cal, x0:x0 + w_cal] = True
    return block


def _mask_for_radius(height: int, width: int, radius: float, calibration: tuple[int, int],
                     seed: int) -> np.ndarray:
    gen = vrng.stream("poisson-mask", height, width, float(radius), seed)
    mask = _rasterize(_bridson_points(height, width, radius, gen), height, width)
    mask |= calibration_block(height, width, calibration)
    return mask


def make_poisson_disc_mask(height: int, width: int, acceleration: float,
                           calibration: tuple[int, int], seed: int) -> UndersamplingMask:
    """Poisson-disc undersampling mask hitting the sample budget H*W/R within +-5%.

    The Bridson minimum-distance parameter is found by bisection: smaller
    radii pack more points.  The calibration block is forced to ones after
    sampling.  Regeneration with identical arguments is bit-identical.
    """
    h_cal, w_cal = calibration
    if acceleration <= 1.0:
        raise InvalidArgumentError(f"acceleration must be > 1, got {acceleration}")
    if not (1 <= h_cal <= height and 1 <= w_cal <= width):
        raise InvalidArgumentError(
            f"calibration {calibration} does not fit inside {height}x{width}"
        )
    target = height * width / acceleration
    if target < h_cal * w_cal:
        raise InvalidArgumentError(
            f"budget {target:.1f} samples is below the {h_cal}x{w_cal} calibration block"
        )
    lo_count = int(np.ceil(target * (1.0 - COUNT_TOLERANCE)))
    hi_count = int(np.floor(target * (1.0 + COUNT_TOLERANCE)))

    def build(radius: float) -> tuple[np.ndarray, int]:
        mask = _mask_for_radius(height, width, radius, calibration, seed)
        return mask, int(mask.sum())

    r_lo, r_hi = 0.35, float(np.sqrt(2.0 * height * width))
    best = None
    for _ in range(48):
        r_mid = 0.5 * (r_lo + r_hi)
        mask, count = build(r_mid)
        if lo_count <= count <= hi_count:
            best = mask
            break
        if count > hi_count:
            r_lo = r_mid  # too dense -> larger minimum distance
        else:
            r_hi = r_mid
    if best is None:
        # Bisection can straddle the window when the count jumps; walk the
        # final bracket in fine steps.
        for radius in np.linspace(r_lo, r_hi, 200):
            mask, count = build(float(radius))
            if lo_count <= count <= hi_count:
                best = mask
                break
    if best is None:
        raise InvalidArgumentError(
            f"could not reach {target:.0f}+-5% samples for {height}x{width} at R={acceleration}"
        )
    return UndersamplingMask(mask=best, acceleration=float(acceleration),
                             calibration=(h_cal, w_cal), seed=int(seed))
