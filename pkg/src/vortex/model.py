"""Small encoder-decoder reconstruction network with hand-written backprop.

The network maps a zero-filled complex image (as two real channels) to a
reconstructed complex image of the same size.  Architecture, per level:
two 3x3 convolutions with leaky-rectifier activations; 2x2 average-pool
down; nearest-neighbor upsample plus a 3x3 convolution up; skip
connections by channel concatenation; a final 1x1 projection back to two
channels.  Channel width doubles per level from ``base_channels``.

The forward pass records every intermediate needed for an exact
reverse-mode gradient, plus the latent tensors at configured taps:
``("enc", k)`` / ``("dec", k)`` at resolution ``H/2^k`` for levels
``1 <= k < depth``, and ``("bottleneck",)`` at ``H/2^depth``.

Gradients are analytic and verified against central finite differences
(see :func:`gradient_check`); there is no autodiff framework underneath.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from vortex import rng as vrng
from vortex.errors import CorruptDatasetError, InvalidArgumentError

LEAKY_SLOPE = 0.01
_CKPT_MAGIC = b"VTXC"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Network hyperparameters.

    ``latent_taps`` lists resolution levels at which latent activations
    are recorded: integers ``1 .. depth-1`` (encoder/decoder pair) and
    ``"bottleneck"``; the integer ``depth`` is accepted as an alias for
    the bottleneck.
    """

    depth: int = 2
    base_channels: int = 8
    latent_taps: tuple = ()

    def __post_init__(self):
        if self.depth < 1:
            raise InvalidArgumentError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise InvalidArgumentError(f"base_channels must be >= 1, got {self.base_channels}")
        taps = []
        for t in self.latent_taps:
            if t == "bottleneck" or t == self.depth:
                tap = "bottleneck"
            elif isinstance(t, int) and 1 <= t < self.depth:
                tap = t
            else:
                raise InvalidArgumentError(
                    f"invalid latent tap {t!r} for depth {self.depth}; "
                    f"valid: 1..{self.depth} or 'bottleneck'"
                )
            if tap in taps:
                raise InvalidArgumentError(f"duplicate latent tap {t!r}")
            taps.append(tap)
        object.__setattr__(self, "latent_taps", tuple(taps))

    def channels(self, level: int) -> int:
        return self.base_channels * (2 ** level)

    def to_dict(self) -> dict:
        return {"depth": self.depth, "base_channels": self.base_channels,
                "latent_taps": list(self.latent_taps)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        taps = tuple(t if isinstance(t, int) else str(t) for t in d.get("latent_taps", ()))
        return cls(depth=int(d["depth"]), base_channels=int(d["base_channels"]),
                   latent_taps=taps)


def _layer_shapes(config: ModelConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) pairs covering the whole parameter vector."""
    bc = config.base_channels
    shapes: list[tuple[str, tuple]] = []

    def conv(name, cin, cout, k=3):
        shapes.append((f"{name}.w", (cout, cin, k, k)))
        shapes.append((f"{name}.b", (cout,)))

    cin = 2
    for i in range(config.depth):
        cout = config.channels(i)
        conv(f"enc{i}.conv1", cin, cout)
        conv(f"enc{i}.conv2", cout, cout)
        cin = cout
    cbot = config.channels(config.depth)
    conv("bottleneck.conv1", cin, cbot)
    conv("bottleneck.conv2", cbot, cbot)
    for i in range(config.depth - 1, -1, -1):
        cdeep = config.channels(i + 1)
        clev = config.channels(i)
        conv(f"up{i}.conv", cdeep, clev)
        conv(f"dec{i}.conv1", 2 * clev, clev)
        conv(f"dec{i}.conv2", clev, clev)
    conv("out", bc, 2, k=1)
    return shapes


@dataclass
class ModelParameters:
    """Flat float64 parameter vector plus a (name -> offset, shape) layout."""

    config: ModelConfig
    vector: np.ndarray
    layout: dict = field(repr=False)

    @classmethod
    def _build_layout(cls, config: ModelConfig) -> tuple[dict, int]:
        layout, offset = {}, 0
        for name, shape in _layer_shapes(config):
            size = int(np.prod(shape))
            layout[name] = (offset, shape)
            offset += size
        return layout, offset

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParameters":
        layout, total = cls._build_layout(config)
        return cls(config=config, vector=np.zeros(total, dtype=np.float64), layout=layout)

    @classmethod
    def from_vector(cls, config: ModelConfig, vector: np.ndarray) -> "ModelParameters":
        layout, total = cls._build_layout(config)
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (total,):
            raise InvalidArgumentError(
                f"parameter vector has {vector.shape} entries, layout needs {total}"
            )
        return cls(config=config, vector=vector, layout=layout)

    def view(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        return self.vector[offset:offset + int(np.prod(shape))].reshape(shape)

    @property
    def size(self) -> int:
        return self.vector.size

    def copy(self) -> "ModelParameters":
        return ModelParameters(config=self.config, vector=self.vector.copy(),
                               layout=self.layout)

    def checksum(self) -> int:
        return zlib.crc32(np.ascontiguousarray(self.vector).tobytes())


def init_parameters(config: ModelConfig, seed: int) -> ModelParameters:
    """Seeded uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    params = ModelParameters.zeros(config)
    gen = vrng.stream("model-init", seed)
    for name, (offset, shape) in params.layout.items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
        else:
            w_shape = params.layout[name[:-2] + ".w"][1]
            fan_in = int(np.prod(w_shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        size = int(np.prod(shape))
        params.vector[offset:offset + size] = gen.uniform(-bound, bound, size=size)
    return params


# ---------------------------------------------------------------------------
# Layer primitives (forward + exact backward)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if kh == 1:
        out = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x, optimize=True)
        return out + b[None, :, None, None]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, wd), dtype=x.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, :, k] = xp[:, :, dy:dy + h, dx:dx + wd]
    cols = cols.reshape(n, c * 9, h * wd)
    out = np.matmul(w.reshape(cout, cin * 9), cols)
    return out.reshape(n, cout, h, wd) + b[None, :, None, None]


def _conv_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray,
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_w, grad_b) for :func:`_conv_forward`."""
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    go = grad_out.reshape(n, cout, h * wd)
    grad_b = go.sum(axis=(0, 2))
    if kh == 1:
        grad_w = np.einsum("nohw,nchw->oc", grad_out, x, optimize=True)[:, :, None, None]
        grad_x = np.einsum("oc,nohw->nchw", w[:, :, 0, 0], grad_out, optimize=True)
        return grad_x, grad_w, grad_b
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, wd), dtype=x.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, :, k] = xp[:, :, dy:dy + h, dx:dx + wd]
    cols = cols.reshape(n, c * 9, h * wd)
    grad_w = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    grad_cols = np.matmul(w.reshape(cout, cin * 9).T, go).reshape(n, c, 9, h, wd)
    grad_xp = np.zeros((n, c, h + 2, wd + 2), dtype=x.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        grad_xp[:, :, dy:dy + h, dx:dx + wd] += grad_cols[:, :, k]
    return grad_xp[:, :, 1:-1, 1:-1], grad_w, grad_b


def _lrelu(pre: np.ndarray) -> np.ndarray:
    return np.where(pre > 0, pre, LEAKY_SLOPE * pre)


def _lrelu_backward(pre: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * np.where(pre > 0, 1.0, LEAKY_SLOPE)


def _avgpool(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool_backward(grad: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * 0.25


def _upsample(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample_backward(grad: np.ndarray) -> np.ndarray:
    n, c, h, w = grad.shape
    return grad.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


@dataclass
class ForwardTrace:
    """Everything the backward pass needs: layer inputs, preactivations,
    per-item normalization scales, and latent tensors at configured taps."""

    input_shape: tuple
    batched: bool
    scales: np.ndarray
    conv_cache: dict = field(default_factory=dict, repr=False)
    taps: dict = field(default_factory=dict, repr=False)
    params_checksum: int = 0

    def min_preact_abs(self) -> float:
        """Smallest |preactivation| across all rectifier inputs (kink margin)."""
        vals = [np.min(np.abs(pre)) for (_x, pre) in self.conv_cache.values()
                if pre is not None]
        return float(min(vals)) if vals else np.inf


def _normalize_input(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    x = np.asarray(x, dtype=np.complex128)
    batched = x.ndim == 3
    if x.ndim == 2:
        x = x[None]
    elif x.ndim != 3:
        raise InvalidArgumentError(f"expected (H, W) or (N, H, W) input, got shape {x.shape}")
    mags = np.abs(x).reshape(x.shape[0], -1)
    scales = np.percentile(mags, 99.0, axis=1)
    scales = np.where(scales > 0, scales, 1.0)
    return x, scales, batched


def model_forward(params: ModelParameters, x_zf: np.ndarray,
                  ) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network on zero-filled complex input(s).

    Accepts (H, W) or a batch (N, H, W).  Each item is normalized by its
    own 99th-percentile magnitude; the output is scaled back, so the map
    is well-conditioned across scan intensity scales.  Deterministic for
    fixed ``params`` and input.
    """
    cfg = params.config
    x, scales, batched = _normalize_input(x_zf)
    h, w = x.shape[-2:]
    div = 2 ** cfg.depth
    if h % div or w % div:
        raise InvalidArgumentError(
            f"input {h}x{w} not divisible by 2^depth = {div}"
        )

    xn = x / scales[:, None, None]
    a = np.stack([xn.real, xn.imag], axis=1)
    trace = ForwardTrace(input_shape=x.shape, batched=batched, scales=scales,
                         params_checksum=params.checksum())

    def conv_block(name: str, inp: np.ndarray) -> np.ndarray:
        pre = _conv_forward(inp, params.view(f"{name}.w"), params.view(f"{name}.b"))
        trace.conv_cache[name] = (inp, pre)
        return _lrelu(pre)

    taps = set(cfg.latent_taps)
    skips = []
    for i in range(cfg.depth):
        a = conv_block(f"enc{i}.conv1", a)
        a = conv_block(f"enc{i}.conv2", a)
        skips.append(a)
        if i in taps:
            trace.taps[("enc", i)] = a
        a = _avgpool(a)
    a = conv_block("bottleneck.conv1", a)
    a = conv_block("bottleneck.conv2", a)
    if "bottleneck" in taps:
        trace.taps[("bottleneck",)] = a
    for i in range(cfg.depth - 1, -1, -1):
        a = _upsample(a)
        a = conv_block(f"up{i}.conv", a)
        if i in taps:
            trace.taps[("dec", i)] = a
        a = np.concatenate([skips[i], a], axis=1)
        a = conv_block(f"dec{i}.conv1", a)
        a = conv_block(f"dec{i}.conv2", a)
    out_w, out_b = params.view("out.w"), params.view("out.b")
    y2 = _conv_forward(a, out_w, out_b)
    trace.conv_cache["out"] = (a, None)

    out = (y2[:, 0] + 1j * y2[:, 1]) * scales[:, None, None]
    return (out if batched else out[0]), trace


def model_backward(params: ModelParameters, trace: ForwardTrace, grad_out: np.ndarray,
                   tap_grads: dict | None = None) -> np.ndarray:
    """Exact gradient of the forward map.

    ``grad_out`` is the output cotangent as a complex array whose real
    and imaginary parts are d(loss)/d(Re out) and d(loss)/d(Im out).
    ``tap_grads`` optionally injects cotangents at latent tap tensors.
    Returns a flat gradient vector aligned with ``params.vector``.
    """
    if trace.params_checksum != params.checksum():
        raise InvalidArgumentError("trace was produced by different parameters")
    cfg = params.config
    tap_grads = dict(tap_grads or {})
    for key in tap_grads:
        if key not in trace.taps:
            raise InvalidArgumentError(f"tap grad {key!r} has no recorded tap in the trace")

    grad_out = np.asarray(grad_out, dtype=np.complex128)
    if not trace.batched:
        grad_out = grad_out[None]
    if grad_out.shape != trace.input_shape:
        raise InvalidArgumentError(
            f"grad_out shape {grad_out.shape} != forward shape {trace.input_shape}"
        )
    gscaled = grad_out * trace.scales[:, None, None]
    g = np.stack([gscaled.real, gscaled.imag], axis=1)

    grads = ModelParameters.zeros(cfg)

    def conv_block_back(name: str, grad: np.ndarray) -> np.ndarray:
        inp, pre = trace.conv_cache[name]
        grad = _lrelu_backward(pre, grad)
        gx, gw, gb = _conv_backward(inp, params.view(f"{name}.w"), grad)
        grads.view(f"{name}.w")[...] = grads.view(f"{name}.w") + gw
        grads.view(f"{name}.b")[...] = grads.view(f"{name}.b") + gb
        return gx

    inp, _ = trace.conv_cache["out"]
    gx, gw, gb = _conv_backward(inp, params.view("out.w"), g)
    grads.view("out.w")[...] = gw
    grads.view("out.b")[...] = gb
    g = gx

    skip_grads: dict[int, np.ndarray] = {}
    for i in range(cfg.depth):
        g = conv_block_back(f"dec{i}.conv2", g)
        g = conv_block_back(f"dec{i}.conv1", g)
        c_skip = trace.conv_cache[f"dec{i}.conv1"][0].shape[1] // 2
        skip_grads[i] = g[:, :c_skip]
        g = g[:, c_skip:]
        if ("dec", i) in tap_grads:
            g = g + tap_grads[("dec", i)]
        g = conv_block_back(f"up{i}.conv", g)
        g = _upsample_backward(g)
    if ("bottleneck",) in tap_grads:
        g = g + tap_grads[("bottleneck",)]
    g = conv_block_back("bottleneck.conv2", g)
    g = conv_block_back("bottleneck.conv1", g)
    for i in range(cfg.depth - 1, -1, -1):
        g = _avgpool_backward(g)
        g = g + skip_grads[i]
        if ("enc", i) in tap_grads:
            g = g + tap_grads[("enc", i)]
        g = conv_block_back(f"enc{i}.conv2", g)
        g = conv_block_back(f"enc{i}.conv1", g)
    return grads.vector


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradientCheckReport:
    checked: int
    max_rel_err: float
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures


def check_gradients(loss_fn, analytic_grad: np.ndarray, vector: np.ndarray, *,
                    n_checks: int = 50, step: float = 1e-5, tolerance: float = 1e-3,
                    gen: np.random.Generator) -> GradientCheckReport:
    """Compare ``analytic_grad`` to central differences of ``loss_fn``.

    Checks ``n_checks`` randomly selected coordinates of ``vector`` with
    relative error ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    n = min(n_checks, vector.size)
    indices = gen.choice(vector.size, size=n, replace=False)
    failures, max_rel = [], 0.0
    for i in indices:
        vp = vector.copy(); vp[i] += step
        vm = vector.copy(); vm[i] -= step
        numeric = (loss_fn(vp) - loss_fn(vm)) / (2.0 * step)
        rel = abs(analytic_grad[i] - numeric) / max(1e-8, abs(numeric))
        max_rel = max(max_rel, rel)
        if rel >= tolerance:
            failures.append((int(i), float(analytic_grad[i]), float(numeric), float(rel)))
    return GradientCheckReport(checked=n, max_rel_err=float(max_rel), failures=failures)


def gradient_check(config: ModelConfig | None = None, tolerance: float = 1e-3,
                   seed: int = 0, n_checks: int = 50, step: float = 1e-5,
                   ) -> GradientCheckReport:
    """Finite-difference check of the supervised l1 loss on a small model.

    Inputs near rectifier kinks or l1 kinks (margin < 1e-4) are redrawn
    so the central difference stays on one smooth branch.
    """
    config = config or ModelConfig(depth=1, base_channels=2)
    if ModelParameters.zeros(config).size > 10_000:
        raise InvalidArgumentError("gradient_check expects a small config (<= 1e4 parameters)")
    size = 8 * (2 ** max(0, config.depth - 1))
    for attempt in range(64):
        gen = vrng.stream("gradient-check", seed, attempt)
        params = init_parameters(config, seed=int(gen.integers(2 ** 31)))
        x = gen.normal(size=(size, size)) + 1j * gen.normal(size=(size, size))
        target = gen.normal(size=(size, size)) + 1j * gen.normal(size=(size, size))

        def loss_of(vector: np.ndarray) -> float:
            p = ModelParameters.from_vector(config, vector)
            out, _ = model_forward(p, x)
            return float(np.mean(np.abs(out - target)))

        out, trace = model_forward(params, x)
        diff = out - target
        margin = min(trace.min_preact_abs(), float(np.min(np.abs(diff))))
        if margin < 1e-4:
            continue
        n = diff.size
        grad_out = diff / np.abs(diff) / n
        analytic = model_backward(params, trace, grad_out)
        return check_gradients(loss_of, analytic, params.vector, n_checks=n_checks,
                               step=step, tolerance=tolerance, gen=gen)
    raise InvalidArgumentError("could not find a kink-free configuration to check")


# ---------------------------------------------------------------------------
# Checkpoint serialization


def save_checkpoint(path, params: ModelParameters) -> None:
    """Write config + layout header followed by little-endian float32 weights."""
    header = {
        "config": params.config.to_dict(),
        "layout": [[name, off, list(shape)] for name, (off, shape) in params.layout.items()],
        "count": int(params.size),
        "dtype": "<f4",
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = params.vector.astype("<f4").tobytes()
    body = _CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(blob)) + blob + payload
    with open(path, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> ModelParameters:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != _CKPT_MAGIC:
        raise CorruptDatasetError(f"{path}: not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptDatasetError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _CKPT_VERSION:
        raise CorruptDatasetError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    vector = np.frombuffer(data[12 + hlen:-4], dtype="<f4").astype(np.float64)
    config = ModelConfig.from_dict(header["config"])
    if vector.size != header["count"]:
        raise CorruptDatasetError(f"{path}: truncated parameter payload")
    return ModelParameters.from_vector(config, vector)
