"""Physics-driven and image-based data augmentations.

Two families with different consistency semantics:

* invariant (physics-driven): additive masked k-space noise and
  odd/even-line motion phase errors.  The reconstruction should not
  change under these, so they perturb the input only.
* equivariant (image-based): flips, 90-degree and arbitrary rotations,
  translation, isotropic/anisotropic scaling, shearing.  These act on
  the image and the sensitivity maps together, and the reconstruction
  should commute with them.

Difficulty (noise std ``sigma``, motion amplitude ``alpha``) is sampled
from a half-open range whose upper bound follows a linear or exponential
curriculum over training epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from vortex.errors import InvalidArgumentError
from vortex.forward import ForwardOperator, SensitivityMaps, UndersamplingMask, forward_apply
from vortex.fourier import fft2c, ifft2c

INVARIANT_KINDS = ("noise", "motion")
EQUIVARIANT_KINDS = (
    "flip_h", "flip_v", "rot90", "rotate", "translate",
    "scale_iso", "scale_aniso", "shear",
)


# ---------------------------------------------------------------------------
# Declarative specs and curricula


@dataclass(frozen=True)
class TransformSpec:
    """Declarative description of one augmentation family member.

    ``difficulty`` is the half-open ``[lo, hi)`` range for noise/motion;
    the remaining fields parameterize image-based kinds and are ignored
    otherwise.
    """

    kind: str
    difficulty: tuple[float, float] | None = None
    probability: float = 1.0
    angle_deg: float = 15.0
    translate_frac: float = 0.08
    scale_range: tuple[float, float] = (0.9, 1.1)
    shear_deg: float = 10.0

    def __post_init__(self):
        if self.kind not in INVARIANT_KINDS + EQUIVARIANT_KINDS:
            raise InvalidArgumentError(f"unknown transform kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise InvalidArgumentError(f"probability must be in [0, 1], got {self.probability}")
        if self.kind in INVARIANT_KINDS:
            if self.difficulty is None:
                raise InvalidArgumentError(f"{self.kind} spec requires a difficulty range")
            lo, hi = self.difficulty
            if not 0.0 <= lo < hi:
                raise InvalidArgumentError(
                    f"difficulty range must satisfy 0 <= lo < hi, got [{lo}, {hi})"
                )
            object.__setattr__(self, "difficulty", (float(lo), float(hi)))

    @property
    def family(self) -> str:
        return "invariant" if self.kind in INVARIANT_KINDS else "equivariant"


@dataclass(frozen=True)
class CurriculumSchedule:
    """Difficulty schedule: ``upper(t) = lo + beta(t) * (hi - lo)``.

    ``ramp_epochs`` is the number of epochs over which difficulty grows;
    the exponential time constant is ``ramp_epochs / gamma``.  After the
    ramp, training proceeds with the constant upper bound.
    """

    kind: str = "exponential"
    ramp_epochs: int = 200
    gamma: float = 5.0
    base_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("none", "linear", "exponential"):
            raise InvalidArgumentError(f"unknown curriculum kind {self.kind!r}")
        if self.kind != "none" and self.ramp_epochs <= 0:
            raise InvalidArgumentError(f"ramp_epochs must be positive, got {self.ramp_epochs}")
        if self.gamma <= 0.0:
            raise InvalidArgumentError(f"gamma must be positive, got {self.gamma}")


def curriculum_beta(sched: CurriculumSchedule, t: float) -> float:
    """Difficulty fraction ``beta(t)`` in [0, 1], nondecreasing, 1 for t >= ramp."""
    if t < 0:
        raise InvalidArgumentError(f"epoch must be >= 0, got {t}")
    if sched.kind == "none":
        return 1.0
    m = float(sched.ramp_epochs)
    t = min(float(t), m)
    if sched.kind == "linear":
        return t / m
    tau = m / sched.gamma
    return float(-np.expm1(-t / tau) / -np.expm1(-m / tau))


def schedule_difficulty(sched: CurriculumSchedule, t: float) -> float:
    """Upper difficulty bound at epoch ``t`` for the schedule's base range."""
    lo, hi = sched.base_range
    return lo + curriculum_beta(sched, t) * (hi - lo)


def schedule_probability(p_max: float, t: float, sched: CurriculumSchedule) -> float:
    """Augmentation probability ramp ``p(t) = p_max * beta_exp(t)``.

    Always uses the exponential ramp shape with the schedule's
    ``ramp_epochs`` and ``gamma``, regardless of ``sched.kind``.
    """
    if not 0.0 <= p_max <= 1.0:
        raise InvalidArgumentError(f"p_max must be in [0, 1], got {p_max}")
    exp_sched = replace(sched, kind="exponential")
    return p_max * curriculum_beta(exp_sched, t)


# ---------------------------------------------------------------------------
# Physics-driven (invariant) transforms


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, UndersamplingMask):
        return mask.mask
    return np.asarray(mask, dtype=bool)


def apply_noise(y: np.ndarray, mask, sigma: float, gen: np.random.Generator) -> np.ndarray:
    """Add masked complex Gaussian noise to multi-coil k-space.

    The effective std is ``sigma * RMS(|y|)`` over acquired entries of all
    coils, so the same ``sigma`` induces the same relative SNR change on
    any scan.  Per-component std is ``sigma_eff / sqrt(2)`` (so the noise
    modulus has RMS ``sigma_eff``).  Unacquired entries are untouched.
    """
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be >= 0, got {sigma}")
    y = np.asarray(y, dtype=np.complex128)
    m = _mask_array(mask)
    if m.shape != y.shape[-2:]:
        raise InvalidArgumentError(f"mask shape {m.shape} != k-space grid {y.shape[-2:]}")
    out = y.copy()
    if sigma == 0.0 or not m.any():
        return out
    acquired = np.broadcast_to(m, y.shape)
    sigma_eff = sigma * np.sqrt(np.mean(np.abs(y[acquired]) ** 2))
    comps = gen.standard_normal(size=(2,) + y.shape)
    noise = (comps[0] + 1j * comps[1]) * (sigma_eff / np.sqrt(2.0))
    out[acquired] += noise[acquired]
    return out


def apply_motion(y: np.ndarray, alpha: float, gen: np.random.Generator) -> np.ndarray:
    """Apply odd/even-line phase errors modeling inter-shot rigid motion.

    Draws ``m_o, m_e ~ U(-1, 1)`` once per call; rows with odd 0-based
    index (all coils, all columns) are multiplied by ``exp(-j*pi*alpha*m_o)``
    and even rows by ``exp(-j*pi*alpha*m_e)``.  Unit-modulus factors leave
    every ``|y|`` entry unchanged up to float rounding.
    """
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be >= 0, got {alpha}")
    y = np.asarray(y, dtype=np.complex128)
    m_o, m_e = gen.uniform(-1.0, 1.0, size=2)
    rows = np.arange(y.shape[-2])
    phase = np.where(rows % 2 == 1, np.pi * alpha * m_o, np.pi * alpha * m_e)
    return y * np.exp(-1j * phase)[:, None]


@dataclass(frozen=True)
class AppliedNoise:
    kind: str = field(default="noise", init=False)
    family: str = field(default="invariant", init=False)
    sigma: float = 0.0

    def apply_kspace(self, y, mask, gen):
        return apply_noise(y, mask, self.sigma, gen)


@dataclass(frozen=True)
class AppliedMotion:
    kind: str = field(default="motion", init=False)
    family: str = field(default="invariant", init=False)
    alpha: float = 0.0

    def apply_kspace(self, y, mask, gen):
        return apply_motion(y, self.alpha, gen)


# ---------------------------------------------------------------------------
# Image-based (equivariant) transforms

# Each transform is a linear map on images.  ``apply_image`` acts on the
# last two axes; ``apply_image_adjoint`` is the exact transpose (needed to
# pull consistency-loss gradients back through the transform);
# ``transform_mask`` returns the permuted sampling mask for grid-exact
# kinds and None when the original mask should be reused.


def _shift2d(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    yi = slice(max(-dy, 0), min(h - dy, h))
    xi = slice(max(-dx, 0), min(w - dx, w))
    out[..., ys, xs] = img[..., yi, xi]
    return out


class _WarpMixin:
    """Bilinear warp with zero padding, plus its exact adjoint."""

    def _inverse_map(self, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        minv, shift = self._inverse_matrix_shift()
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        oy, ox = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        vy = oy - cy - shift[0]
        vx = ox - cx - shift[1]
        ys = minv[0, 0] * vy + minv[0, 1] * vx + cy
        xs = minv[1, 0] * vy + minv[1, 1] * vx + cx
        return ys, xs

    def _corners(self, h: int, w: int):
        ys, xs = self._inverse_map(h, w)
        y0 = np.floor(ys).astype(np.int64)
        x0 = np.floor(xs).astype(np.int64)
        wy = ys - y0
        wx = xs - x0
        corners = []
        for dy, dx, wgt in (
            (0, 0, (1 - wy) * (1 - wx)),
            (0, 1, (1 - wy) * wx),
            (1, 0, wy * (1 - wx)),
            (1, 1, wy * wx),
        ):
            yc, xc = y0 + dy, x0 + dx
            valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
            idx = np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)
            corners.append((idx.ravel(), (wgt * valid).ravel()))
        return corners

    def apply_image(self, img: np.ndarray) -> np.ndarray:
        h, w = img.shape[-2:]
        flat = img.reshape(img.shape[:-2] + (h * w,))
        out = np.zeros_like(flat)
        for idx, wgt in self._corners(h, w):
            out += flat[..., idx] * wgt
        return out.reshape(img.shape)

    def apply_image_adjoint(self, grad: np.ndarray) -> np.ndarray:
        h, w = grad.shape[-2:]
        lead = int(np.prod(grad.shape[:-2], dtype=np.int64)) if grad.ndim > 2 else 1
        flat = grad.reshape(lead, h * w)
        acc = np.zeros_like(flat)
        for idx, wgt in self._corners(h, w):
            np.add.at(acc, (slice(None), idx), flat * wgt)
        return acc.reshape(grad.shape)

    def transform_mask(self, mask: np.ndarray):
        return None  # interpolating transforms reuse the untransformed mask


@dataclass(frozen=True)
class AppliedFlip:
    kind: str
    family: str = field(default="equivariant", init=False)

    def apply_image(self, img):
        axis = -1 if self.kind == "flip_h" else -2
        return np.flip(img, axis=axis).copy()

    def apply_image_adjoint(self, grad):
        return self.apply_image(grad)  # flips are involutions

    def transform_mask(self, mask):
        return self.apply_image(mask)


@dataclass(frozen=True)
class AppliedRot90:
    turns: int
    kind: str = field(default="rot90", init=False)
    family: str = field(default="equivariant", init=False)

    def _rot(self, img, k):
        h, w = img.shape[-2:]
        if k % 2 == 1 and h != w:
            raise InvalidArgumentError("odd quarter turns require square images")
        return np.rot90(img, k=k, axes=(-2, -1)).copy()

    def apply_image(self, img):
        return self._rot(img, self.turns)

    def apply_image_adjoint(self, grad):
        return self._rot(grad, -self.turns)

    def transform_mask(self, mask):
        return self._rot(mask, self.turns)


@dataclass(frozen=True)
class AppliedTranslate(_WarpMixin):
    dy: float
    dx: float
    kind: str = field(default="translate", init=False)
    family: str = field(default="equivariant", init=False)

    def _is_integer(self) -> bool:
        return float(self.dy).is_integer() and float(self.dx).is_integer()

    def _inverse_matrix_shift(self):
        return np.eye(2), (self.dy, self.dx)

    def apply_image(self, img):
        if self._is_integer():
            return _shift2d(img, int(self.dy), int(self.dx))
        return super().apply_image(img)

    def apply_image_adjoint(self, grad):
        if self._is_integer():
            return _shift2d(grad, -int(self.dy), -int(self.dx))
        return super().apply_image_adjoint(grad)


@dataclass(frozen=True)
class AppliedRotate(_WarpMixin):
    angle_deg: float
    kind: str = field(default="rotate", init=False)
    family: str = field(default="equivariant", init=False)

    def _inverse_matrix_shift(self):
        a = np.deg2rad(self.angle_deg)
        minv = np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]])
        return minv, (0.0, 0.0)


@dataclass(frozen=True)
class AppliedScale(_WarpMixin):
    sy: float
    sx: float
    kind: str = "scale_iso"
    family: str = field(default="equivariant", init=False)

    def __post_init__(self):
        if self.sy <= 0 or self.sx <= 0:
            raise InvalidArgumentError(f"scale factors must be > 0, got ({self.sy}, {self.sx})")

    def _inverse_matrix_shift(self):
        return np.diag([1.0 / self.sy, 1.0 / self.sx]), (0.0, 0.0)


@dataclass(frozen=True)
class AppliedShear(_WarpMixin):
    shear_y_deg: float
    shear_x_deg: float
    kind: str = field(default="shear", init=False)
    family: str = field(default="equivariant", init=False)

    def _inverse_matrix_shift(self):
        ty = np.tan(np.deg2rad(self.shear_y_deg))
        tx = np.tan(np.deg2rad(self.shear_x_deg))
        det = 1.0 - ty * tx
        if abs(det) < 1e-6:
            raise InvalidArgumentError("degenerate shear")
        minv = np.array([[1.0, -ty], [-tx, 1.0]]) / det
        return minv, (0.0, 0.0)


def draw_transform(spec: TransformSpec, gen: np.random.Generator, beta: float | None = None,
                   shape: tuple[int, int] | None = None):
    """Sample a concrete transform from ``spec``.

    For noise/motion the difficulty is drawn uniformly from
    ``[lo, lo + beta*(hi - lo))``; ``beta=None`` means the full range.
    Translation needs ``shape`` to scale its fraction-of-FOV range.
    """
    if spec.kind in INVARIANT_KINDS:
        lo, hi = spec.difficulty
        upper = hi if beta is None else lo + beta * (hi - lo)
        level = float(gen.uniform(lo, upper)) if upper > lo else lo
        return AppliedNoise(sigma=level) if spec.kind == "noise" else AppliedMotion(alpha=level)
    if spec.kind in ("flip_h", "flip_v"):
        return AppliedFlip(kind=spec.kind)
    if spec.kind == "rot90":
        return AppliedRot90(turns=int(gen.integers(1, 4)))
    if spec.kind == "rotate":
        return AppliedRotate(angle_deg=float(gen.uniform(-spec.angle_deg, spec.angle_deg)))
    if spec.kind == "translate":
        if shape is None:
            raise InvalidArgumentError("translate draw requires the image shape")
        f = spec.translate_frac
        return AppliedTranslate(dy=float(gen.uniform(-f, f)) * shape[0],
                                dx=float(gen.uniform(-f, f)) * shape[1])
    if spec.kind == "scale_iso":
        s = float(gen.uniform(*spec.scale_range))
        return AppliedScale(sy=s, sx=s, kind="scale_iso")
    if spec.kind == "scale_aniso":
        sy, sx = gen.uniform(*spec.scale_range, size=2)
        return AppliedScale(sy=float(sy), sx=float(sx), kind="scale_aniso")
    if spec.kind == "shear":
        sy, sx = gen.uniform(-spec.shear_deg, spec.shear_deg, size=2)
        return AppliedShear(shear_y_deg=float(sy), shear_x_deg=float(sx))
    raise InvalidArgumentError(f"unknown transform kind {spec.kind!r}")


def apply_image_transform(x: np.ndarray, maps: SensitivityMaps, transform,
                          ) -> tuple[np.ndarray, SensitivityMaps]:
    """Apply one equivariant transform to an image and every coil of its maps."""
    if transform.family != "equivariant":
        raise InvalidArgumentError(f"{transform.kind} is not an equivariant transform")
    x_t = transform.apply_image(np.asarray(x, dtype=np.complex128))
    maps_t = transform.apply_image(maps.maps)
    return x_t, SensitivityMaps(maps=maps_t)


def equivariant_on_kspace(y: np.ndarray, op: ForwardOperator, transform,
                          ) -> tuple[np.ndarray, ForwardOperator]:
    """Apply an equivariant transform to undersampled k-space.

    Per coil: inverse FFT, spatial transform of coil images and maps,
    forward FFT, re-mask.  Grid-exact transforms (flips, quarter turns)
    permute the mask the same way; interpolating transforms keep the
    original mask (approximate equivariance).
    """
    if transform.family != "equivariant":
        raise InvalidArgumentError(f"{transform.kind} is not an equivariant transform")
    y = np.asarray(y, dtype=np.complex128)
    imgs = transform.apply_image(ifft2c(y))
    maps_t = SensitivityMaps(maps=transform.apply_image(op.maps.maps))
    mask_t = transform.transform_mask(op.mask.mask)
    old = op.mask
    mask = old if mask_t is None else UndersamplingMask(
        mask=mask_t, acceleration=old.acceleration, calibration=old.calibration, seed=old.seed)
    y_t = fft2c(imgs) * mask.as_float()
    return y_t, ForwardOperator(maps=maps_t, mask=mask)


# ---------------------------------------------------------------------------
# Composition


@dataclass(frozen=True)
class SupervisedSample:
    """Fully sampled training example: ground-truth image, maps, scan mask."""
    image: np.ndarray
    maps: SensitivityMaps
    mask: UndersamplingMask


@dataclass(frozen=True)
class UndersampledSample:
    """Prospectively undersampled example: masked k-space plus its operator."""
    kspace: np.ndarray
    operator: ForwardOperator


@dataclass(frozen=True)
class AugmentedSample:
    kspace: np.ndarray
    operator: ForwardOperator
    target: np.ndarray | None
    applied: tuple


def compose(specs, sample, gen: np.random.Generator, beta: float | None = None,
            ) -> AugmentedSample:
    """Select and apply a cascade of augmentations to one example.

    Each spec is selected independently with its probability.  Selected
    equivariant transforms run first, in the given order -- in the image
    domain before undersampling when fully sampled data is available
    (:class:`SupervisedSample`), otherwise on the undersampled k-space.
    Selected invariant transforms then perturb the undersampled k-space.
    """
    if not specs:
        raise InvalidArgumentError("specs must be nonempty")
    if isinstance(sample, SupervisedSample):
        shape = sample.mask.shape
    elif isinstance(sample, UndersampledSample):
        shape = sample.operator.shape
    else:
        raise InvalidArgumentError(f"unsupported sample type {type(sample).__name__}")
    selected = []
    for spec in specs:
        if gen.uniform() < spec.probability:
            selected.append(draw_transform(spec, gen, beta, shape=shape))
    equivariant = [t for t in selected if t.family == "equivariant"]
    invariant = [t for t in selected if t.family == "invariant"]

    if isinstance(sample, SupervisedSample):
        x, maps = np.asarray(sample.image, dtype=np.complex128), sample.maps
        for t in equivariant:
            x, maps = apply_image_transform(x, maps, t)
        op = ForwardOperator(maps=maps, mask=sample.mask)
        y = forward_apply(op, x)
        target = x
    else:
        y, op = np.asarray(sample.kspace, dtype=np.complex128).copy(), sample.operator
        for t in equivariant:
            y, op = equivariant_on_kspace(y, op, t)
        target = None

    for t in invariant:
        y = t.apply_kspace(y, op.mask, gen)
    return AugmentedSample(kspace=y, operator=op, target=target, applied=tuple(selected))
