"""Synthetic phantom datasets and the VTXD on-disk format.

A dataset is a JSON manifest plus one binary blob per scan.  Blob layout
(all integers little-endian):

====================  =======================================================
field                 bytes
====================  =======================================================
magic                 ``b"VTXD"``
version               u32 (currently 1)
coils, height, width  u32 each
n_slices              u32
has_ground_truth      u8 (1 for supervised/val/test scans, 0 for unsupervised)
mask                  H rows of ceil(W/8) bytes, ``packbits(bitorder="little")``
maps                  C*H*W complex64 (interleaved re, im float32)
kspace                n_slices*C*H*W complex64; masked scans store exact zeros
                      at unacquired locations
ground truth          n_slices*H*W complex64 (only if has_ground_truth)
support               n_slices rows-of-bits blocks (only if has_ground_truth)
crc32                 u32 over every preceding byte
====================  =======================================================

Scans are generated in float32 precision end-to-end (image and maps are
rounded to complex64 *before* the forward model runs), so a stored scan's
k-space is exactly the transform of its stored image and maps.

Per-scan randomness is keyed by ``hash64(dataset_seed, scan_id)``; the
same seed always rebuilds byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from vortex import rng as vrng
from vortex.errors import CorruptDatasetError, InvalidArgumentError
from vortex.forward import (
    ForwardOperator,
    SensitivityMaps,
    UndersamplingMask,
    make_poisson_disc_mask,
)
from vortex.fourier import fft2c

_MAGIC = b"VTXD"
_VERSION = 1
ROLES = ("train-supervised", "train-unsupervised", "val", "test")
_PAD_MULTIPLE = 8  # H, W padded so models up to 3 pooling levels fit


@dataclass(frozen=True)
class DatasetConfig:
    """Generation parameters for a synthetic dataset."""

    coils: int = 4
    height: int = 32
    width: int = 32
    slices_per_scan: int = 8
    n_train_supervised: int = 4
    n_train_unsupervised: int = 20
    n_val: int = 2
    n_test: int = 3
    acceleration: float = 8.0
    calibration: tuple[int, int] = (6, 6)
    seed: int = 0

    def __post_init__(self):
        if self.coils < 1 or self.slices_per_scan < 1:
            raise InvalidArgumentError("coils and slices_per_scan must be >= 1")
        if self.height < 16 or self.width < 16:
            raise InvalidArgumentError("height and width must be >= 16")
        if min(self.n_train_supervised, self.n_train_unsupervised,
               self.n_val, self.n_test) < 0 or self.total_scans < 1:
            raise InvalidArgumentError("scan counts must be nonnegative, total >= 1")
        object.__setattr__(self, "calibration", tuple(self.calibration))

    @property
    def total_scans(self) -> int:
        return (self.n_train_supervised + self.n_train_unsupervised
                + self.n_val + self.n_test)

    @property
    def padded_shape(self) -> tuple[int, int]:
        pad = lambda v: ((v + _PAD_MULTIPLE - 1) // _PAD_MULTIPLE) * _PAD_MULTIPLE
        return pad(self.height), pad(self.width)


@dataclass(frozen=True)
class ScanInfo:
    scan_id: str
    role: str
    path: str
    nbytes: int
    crc32: int


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    dataset_seed: int
    coils: int
    height: int
    width: int
    slices_per_scan: int
    acceleration: float
    calibration: tuple[int, int]
    scans: tuple[ScanInfo, ...]

    def to_json(self) -> str:
        doc = {
            "format": "vtxd",
            "version": self.version,
            "dataset_seed": self.dataset_seed,
            "geometry": {
                "coils": self.coils,
                "height": self.height,
                "width": self.width,
                "slices_per_scan": self.slices_per_scan,
            },
            "acceleration": self.acceleration,
            "calibration": list(self.calibration),
            "scans": [
                {"id": s.scan_id, "role": s.role, "path": s.path,
                 "bytes": s.nbytes, "crc32": s.crc32}
                for s in self.scans
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise CorruptDatasetError(f"manifest is not valid JSON: {e}") from e
        if doc.get("format") != "vtxd" or doc.get("version") != _VERSION:
            raise CorruptDatasetError(
                f"unsupported manifest format/version: {doc.get('format')}/{doc.get('version')}"
            )
        geom = doc["geometry"]
        scans = []
        seen = set()
        for s in doc["scans"]:
            if s["role"] not in ROLES:
                raise CorruptDatasetError(f"unknown scan role {s['role']!r}")
            if s["id"] in seen:
                raise CorruptDatasetError(f"duplicate scan id {s['id']!r}")
            seen.add(s["id"])
            scans.append(ScanInfo(scan_id=s["id"], role=s["role"], path=s["path"],
                                  nbytes=s["bytes"], crc32=s["crc32"]))
        return cls(version=doc["version"], dataset_seed=doc["dataset_seed"],
                   coils=geom["coils"], height=geom["height"], width=geom["width"],
                   slices_per_scan=geom["slices_per_scan"],
                   acceleration=doc["acceleration"],
                   calibration=tuple(doc["calibration"]), scans=tuple(scans))


@dataclass
class ScanRecord:
    """One scan in memory (arrays upcast to complex128 for computation)."""

    scan_id: str
    role: str
    kspace: np.ndarray          # (S, C, H, W); masked for unsupervised scans
    maps: SensitivityMaps
    mask: UndersamplingMask
    ground_truth: np.ndarray | None = None   # (S, H, W)
    support: np.ndarray | None = None        # (S, H, W) bool

    @property
    def n_slices(self) -> int:
        return self.kspace.shape[0]

    @property
    def operator(self) -> ForwardOperator:
        return ForwardOperator(maps=self.maps, mask=self.mask)


def scan_seed(dataset_seed: int, scan_id: str) -> int:
    """Stable per-scan seed; masks and phantoms derive all draws from it."""
    return vrng.hash64(dataset_seed, scan_id)


# ---------------------------------------------------------------------------
# Phantom and coil-map synthesis


def generate_phantom(height: int, width: int, gen: np.random.Generator,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Random-ellipse complex phantom with a smooth phase field.

    Returns ``(image, support)`` where the image magnitude lies in [0, 1]
    and the support is the union of the ellipses dilated by 2 px.
    """
    if height < 16 or width < 16:
        raise InvalidArgumentError(f"phantom needs at least 16x16, got {height}x{width}")
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    scale = min(height, width)
    n_ellipses = int(gen.integers(5, 13))
    mag = np.zeros((height, width))
    inside_any = np.zeros((height, width), dtype=bool)
    for _ in range(n_ellipses):
        cy, cx, th = gen.uniform(0.22, 0.78), gen.uniform(0.22, 0.78), gen.uniform(0.0, np.pi)
        a = gen.uniform(0.08, 0.26) * scale
        b = gen.uniform(0.08, 0.26) * scale
        amp = gen.uniform(0.25, 1.0)
        dy, dx = yy - cy * height, xx - cx * width
        u = (dy * np.cos(th) + dx * np.sin(th)) / a
        v = (-dy * np.sin(th) + dx * np.cos(th)) / b
        inside = u * u + v * v <= 1.0
        mag += amp * inside
        inside_any |= inside
    mag = np.minimum(mag, 1.0)
    yn = (yy - height / 2) / (height / 2)
    xn = (xx - width / 2) / (width / 2)
    c = gen.uniform(-0.8, 0.8, size=5)
    c0 = gen.uniform(-np.pi, np.pi)
    phase = c0 + c[0] * yn + c[1] * xn + c[2] * yn * xn + c[3] * yn ** 2 + c[4] * xn ** 2
    image = mag * np.exp(1j * phase)
    support = ndimage.binary_dilation(inside_any, iterations=2)
    return image, support


def synthesize_maps(coils: int, height: int, width: int, gen: np.random.Generator,
                    ) -> SensitivityMaps:
    """Smooth Gaussian-lobe coil profiles with linear phase ramps.

    Lobes are centered at distinct positions around the image border and
    the result is root-sum-of-squares normalized to 1 at every pixel.
    """
    if coils < 1:
        raise InvalidArgumentError(f"coils must be >= 1, got {coils}")
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    span = max(height, width)
    angles = 2 * np.pi * np.arange(coils) / coils + gen.uniform(-0.3, 0.3, size=coils)
    widths = gen.uniform(0.7, 1.0, size=coils) * span
    ramp_mag = gen.uniform(0.02, 0.12, size=coils)
    ramp_dir = gen.uniform(0.0, 2 * np.pi, size=coils)
    radius = 0.55 * span
    maps = np.empty((coils, height, width), dtype=np.complex128)
    for c in range(coils):
        cy = height / 2 + radius * np.cos(angles[c])
        cx = width / 2 + radius * np.sin(angles[c])
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        lobe = np.exp(-d2 / (2.0 * widths[c] ** 2))
        ramp = ramp_mag[c] * ((yy - height / 2) * np.cos(ramp_dir[c])
                              + (xx - width / 2) * np.sin(ramp_dir[c]))
        maps[c] = lobe * np.exp(1j * ramp)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return SensitivityMaps(maps=maps / rss[None])


# ---------------------------------------------------------------------------
# Blob serialization


def _pack_bits(mask: np.ndarray) -> bytes:
    return np.packbits(mask.astype(np.uint8), axis=-1, bitorder="little").tobytes()


def _unpack_bits(data: bytes, rows: int, width: int) -> np.ndarray:
    row_bytes = (width + 7) // 8
    arr = np.frombuffer(data, dtype=np.uint8).reshape(rows, row_bytes)
    return np.unpackbits(arr, axis=-1, bitorder="little")[:, :width].astype(bool)


def _encode_scan(kspace32: np.ndarray, maps32: np.ndarray, mask: np.ndarray,
                 gt32: np.ndarray | None, support: np.ndarray | None) -> bytes:
    n_slices, coils, h, w = kspace32.shape
    parts = [
        _MAGIC,
        struct.pack("<IIIIIB", _VERSION, coils, h, w, n_slices,
                    1 if gt32 is not None else 0),
        _pack_bits(mask),
        maps32.astype("<c8").tobytes(),
        kspace32.astype("<c8").tobytes(),
    ]
    if gt32 is not None:
        parts.append(gt32.astype("<c8").tobytes())
        parts.append(_pack_bits(support.reshape(n_slices * h, w)))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _decode_scan(data: bytes, scan_id: str) -> dict:
    try:
        if data[:4] != _MAGIC:
            raise CorruptDatasetError(f"{scan_id}: bad magic")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise CorruptDatasetError(f"{scan_id}: CRC mismatch")
        version, coils, h, w, n_slices, has_gt = struct.unpack("<IIIIIB", data[4:25])
        if version != _VERSION:
            raise CorruptDatasetError(f"{scan_id}: unsupported blob version {version}")
        off = 25
        row_bytes = (w + 7) // 8
        mask = _unpack_bits(data[off:off + h * row_bytes], h, w)
        off += h * row_bytes
        maps = np.frombuffer(data[off:off + coils * h * w * 8], dtype="<c8")
        maps = maps.reshape(coils, h, w).astype(np.complex128)
        off += coils * h * w * 8
        ksp = np.frombuffer(data[off:off + n_slices * coils * h * w * 8], dtype="<c8")
        ksp = ksp.reshape(n_slices, coils, h, w).astype(np.complex128)
        off += n_slices * coils * h * w * 8
        gt = support = None
        if has_gt:
            gt = np.frombuffer(data[off:off + n_slices * h * w * 8], dtype="<c8")
            gt = gt.reshape(n_slices, h, w).astype(np.complex128)
            off += n_slices * h * w * 8
            support = _unpack_bits(data[off:off + n_slices * h * row_bytes],
                                   n_slices * h, w).reshape(n_slices, h, w)
            off += n_slices * h * row_bytes
        if off != len(body):
            raise CorruptDatasetError(f"{scan_id}: trailing bytes in blob")
        return {"mask": mask, "maps": maps, "kspace": ksp, "gt": gt, "support": support,
                "geometry": (coils, h, w, n_slices)}
    except (struct.error, ValueError) as e:
        raise CorruptDatasetError(f"{scan_id}: truncated or malformed blob: {e}") from e


# ---------------------------------------------------------------------------
# Build / read


def _build_scan(cfg: DatasetConfig, scan_id: str, role: str) -> bytes:
    h, w = cfg.padded_shape
    seed = scan_seed(cfg.seed, scan_id)
    mask = make_poisson_disc_mask(h, w, cfg.acceleration, cfg.calibration, seed)
    maps64 = synthesize_maps(cfg.coils, h, w, vrng.stream(seed, "maps"))
    maps32 = maps64.maps.astype(np.complex64)

    images, supports = [], []
    for s in range(cfg.slices_per_scan):
        img, sup = generate_phantom(h, w, vrng.stream(seed, "phantom", s))
        images.append(img.astype(np.complex64))
        supports.append(sup)
    gt32 = np.stack(images)
    support = np.stack(supports)

    # k-space from the *rounded* image and maps, so stored scans are
    # exactly forward-consistent at float32 precision
    maps128 = maps32.astype(np.complex128)
    ksp = np.stack([
        fft2c(maps128 * gt32[s].astype(np.complex128)[None]).astype(np.complex64)
        for s in range(cfg.slices_per_scan)
    ])
    if role == "train-unsupervised":
        ksp = ksp * mask.mask.astype(np.float32)
        return _encode_scan(ksp, maps32, mask.mask, None, None)
    return _encode_scan(ksp, maps32, mask.mask, gt32, support)


def build_dataset(cfg: DatasetConfig, out_dir) -> DatasetManifest:
    """Generate scans, assign roles, and write blobs plus the manifest.

    Role assignment is a seeded random partition of the scan ids.  Workers
    are capped by the ``VORTEX_NUM_WORKERS`` environment variable; output
    bytes do not depend on the worker count.
    """
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)

    n = cfg.total_scans
    ids = [f"scan-{i:03d}" for i in range(n)]
    order = vrng.stream(cfg.seed, "roles").permutation(n)
    roles = {}
    cursor = 0
    for role, count in (("train-supervised", cfg.n_train_supervised),
                        ("train-unsupervised", cfg.n_train_unsupervised),
                        ("val", cfg.n_val), ("test", cfg.n_test)):
        for j in order[cursor:cursor + count]:
            roles[ids[j]] = role
        cursor += count

    workers = max(1, min(int(os.environ.get("VORTEX_NUM_WORKERS", "1") or 1), n))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blobs = list(pool.map(lambda sid: _build_scan(cfg, sid, roles[sid]), ids))
    else:
        blobs = [_build_scan(cfg, sid, roles[sid]) for sid in ids]

    h, w = cfg.padded_shape
    infos = []
    for sid, blob in zip(ids, blobs):
        rel = f"scans/{sid}.vtxd"
        with open(out / rel, "wb") as f:
            f.write(blob)
        infos.append(ScanInfo(scan_id=sid, role=roles[sid], path=rel,
                              nbytes=len(blob), crc32=zlib.crc32(blob)))
    manifest = DatasetManifest(
        version=_VERSION, dataset_seed=cfg.seed, coils=cfg.coils, height=h, width=w,
        slices_per_scan=cfg.slices_per_scan, acceleration=cfg.acceleration,
        calibration=cfg.calibration, scans=tuple(infos),
    )
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


class Dataset:
    """Lazy per-scan view over a dataset directory."""

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._by_id = {s.scan_id: s for s in manifest.scans}

    def scan_ids(self, role: str | None = None) -> list[str]:
        return [s.scan_id for s in self.manifest.scans
                if role is None or s.role == role]

    def load(self, scan_id: str) -> ScanRecord:
        info = self._by_id.get(scan_id)
        if info is None:
            raise InvalidArgumentError(f"unknown scan id {scan_id!r}")
        path = self.root / info.path
        try:
            data = path.read_bytes()
        except FileNotFoundError as e:
            raise CorruptDatasetError(f"{scan_id}: missing blob {info.path}") from e
        if len(data) != info.nbytes or zlib.crc32(data) != info.crc32:
            raise CorruptDatasetError(f"{scan_id}: blob does not match manifest")
        dec = _decode_scan(data, scan_id)
        m = self.manifest
        if dec["geometry"] != (m.coils, m.height, m.width, m.slices_per_scan):
            raise CorruptDatasetError(f"{scan_id}: geometry disagrees with manifest")
        mask = UndersamplingMask(mask=dec["mask"], acceleration=m.acceleration,
                                 calibration=m.calibration,
                                 seed=scan_seed(m.dataset_seed, scan_id))
        return ScanRecord(scan_id=scan_id, role=info.role, kspace=dec["kspace"],
                          maps=SensitivityMaps(maps=dec["maps"]), mask=mask,
                          ground_truth=dec["gt"], support=dec["support"])

    def iter_role(self, role: str):
        for sid in self.scan_ids(role):
            yield self.load(sid)


def read_dataset(path) -> Dataset:
    """Open a dataset directory; scans load lazily and round-trip exactly."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise CorruptDatasetError(f"no manifest.json under {root}")
    manifest = DatasetManifest.from_json(mpath.read_text(encoding="utf-8"))
    return Dataset(root, manifest)
