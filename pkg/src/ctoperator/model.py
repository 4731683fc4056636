"""CTO reconstruction model: UDNO blocks, sinogram/image operators, cascades.

Parameters live in a flat ``dict`` of named arrays. Forward passes are
recorded on an :class:`~ctoperator.autodiff.Tape` so the same code serves
training (gradients) and inference.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import disco
from .autodiff import Node, Tape
from .classical import FbpConfig, fbp_scale
from .core import FormatError, Image, Sinogram, make_rng, resample_bilinear
from .projector import ProjectorConfig, get_projector

SINO_PADDING = ("flipped_circular_theta", "reflect")
SINO_PADDING_NO_EQUIV = ("zero", "reflect")
IMAGE_PADDING = ("zero", "zero")


@dataclass(frozen=True)
class UdnoConfig:
    levels: int = 2
    hidden: int = 8
    in_channels: int = 1
    out_channels: int = 1
    cutoff: float = 0.04
    rings: int = 5
    per_ring: int = 7
    padding: tuple[str, str] = IMAGE_PADDING
    pool_axes: tuple[int, ...] = (0, 1)
    head_cutoff: float = 0.003

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        object.__setattr__(self, "padding", tuple(self.padding))
        object.__setattr__(self, "pool_axes", tuple(self.pool_axes))

    def basis(self, level: int) -> disco.KernelBasis:
        # receptive field in pixels stays constant across pooling levels
        return disco.KernelBasis(self.cutoff * 2 ** level, self.rings, self.per_ring)

    def head_basis(self) -> disco.KernelBasis:
        return disco.KernelBasis(self.head_cutoff, 0, 1)


@dataclass(frozen=True)
class CtoConfig:
    image_size: int = 64
    spacing: float = 2 / 64
    det_count: int = 96
    det_spacing: float = 2 / 64
    step_fraction: float = 0.5
    cascades: int = 3
    nos_spatial: UdnoConfig = UdnoConfig(padding=SINO_PADDING, pool_axes=(1,))
    nos_freq: UdnoConfig = UdnoConfig(in_channels=2, out_channels=2, padding=SINO_PADDING,
                                      pool_axes=(1,))
    noi: UdnoConfig = UdnoConfig()
    eta_init: float = 0.5
    lambda_init: float = 1.0
    fbp_pad_factor: int = 2

    def __post_init__(self):
        if self.cascades < 1:
            raise ValueError("cascades must be >= 1")

    @classmethod
    def mini(cls, **kw) -> "CtoConfig":
        return cls(**kw)

    @classmethod
    def full_size(cls) -> "CtoConfig":
        sino = dict(levels=4, hidden=32, cutoff=0.02, pool_axes=(1,))
        return cls(image_size=256, spacing=2 / 256, det_count=300, det_spacing=2 / 256,
                   nos_spatial=UdnoConfig(padding=SINO_PADDING, **sino),
                   nos_freq=UdnoConfig(in_channels=2, out_channels=2, padding=SINO_PADDING, **sino),
                   noi=UdnoConfig(levels=4, hidden=32, cutoff=0.02))

    def without_equivariance(self) -> "CtoConfig":
        """Zero padding along the view-angle axis in both sinogram branches."""
        return replace(self, nos_spatial=replace(self.nos_spatial, padding=SINO_PADDING_NO_EQUIV),
                       nos_freq=replace(self.nos_freq, padding=SINO_PADDING_NO_EQUIV))

    def projector(self, sino: Sinogram, scale: int = 1) -> ProjectorConfig:
        n = self.image_size * scale
        return ProjectorConfig(n, n, sino.angle_set, self.det_count, self.spacing / scale,
                               self.det_spacing, self.step_fraction)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "CtoConfig":
        raw = json.loads(text)
        for key in ("nos_spatial", "nos_freq", "noi"):
            raw[key] = UdnoConfig(**raw[key])
        return cls(**raw)


# -- parameters ---------------------------------------------------------------

def _block_names(cfg: UdnoConfig):
    """(name, in_channels, out_channels, level) for every DISCO block, in order."""
    h = cfg.hidden
    out = []
    for lvl in range(cfg.levels):
        out.append((f"enc{lvl}.0", cfg.in_channels if lvl == 0 else h, h, lvl))
        out.append((f"enc{lvl}.1", h, h, lvl))
    out.append(("mid.0", h, h, cfg.levels))
    out.append(("mid.1", h, h, cfg.levels))
    for lvl in reversed(range(cfg.levels)):
        out.append((f"dec{lvl}.0", h, h, lvl))
        out.append((f"dec{lvl}.1", h, h, lvl))
    return out


def init_udno(cfg: UdnoConfig, prefix: str, rng: np.random.Generator) -> dict:
    params = {}
    total = cfg.basis(0).total
    for name, c_in, c_out, _ in _block_names(cfg):
        a = 1 / math.sqrt(c_in * total)
        params[f"{prefix}.{name}.kernel"] = rng.uniform(-a, a, (c_out, c_in, total))
        b = 1 / math.sqrt(c_out)
        params[f"{prefix}.{name}.mix_w"] = rng.uniform(-b, b, (c_out, c_out))
        params[f"{prefix}.{name}.mix_b"] = np.zeros(c_out)
    a = 1 / math.sqrt(cfg.hidden)
    params[f"{prefix}.head.kernel"] = rng.uniform(-a, a, (cfg.out_channels, cfg.hidden, 1))
    return params


def init_params(cfg: CtoConfig, seed: int = 0) -> dict:
    rng = make_rng(seed)
    params = {}
    params.update(init_udno(cfg.nos_spatial, "nos.spatial", rng))
    params.update(init_udno(cfg.nos_freq, "nos.freq", rng))
    for t in range(cfg.cascades):
        params.update(init_udno(cfg.noi, f"noi.{t}", rng))
        params[f"eta.{t}"] = np.asarray(cfg.eta_init, dtype=float)
        params[f"lam.{t}"] = np.asarray(cfg.lambda_init, dtype=float)
    return dict(sorted(params.items()))


def symmetrize_params(params: dict, cfg: CtoConfig, prefixes=("nos.",)) -> dict:
    """Make sinogram kernels even in the detector offset (mirror-slot averaging)."""
    basis = cfg.nos_spatial.basis(0)
    out = dict(params)
    for name, value in params.items():
        if name.startswith(prefixes) and name.endswith(".kernel") and value.shape[-1] == basis.total:
            out[name] = disco.symmetrize(value, basis)
    return out


def isotropic_params(params: dict, prefixes=("noi.",)) -> dict:
    """Zero every anisotropic coefficient of the selected kernels."""
    out = dict(params)
    for name, value in params.items():
        if name.startswith(prefixes) and name.endswith(".kernel") and value.shape[-1] > 1:
            v = np.zeros_like(value)
            v[..., 0] = value[..., 0]
            out[name] = v
    return out


# -- graph construction -------------------------------------------------------

_OPERATORS: dict[tuple, disco.DiscreteOperator] = {}


def layer_operator(shape, basis: disco.KernelBasis, padding, pitch_scale: float = 1.0):
    key = (tuple(shape), basis, tuple(padding), pitch_scale)
    op = _OPERATORS.get(key)
    if op is None:
        grid = disco.Grid(shape, tuple(pitch_scale / n for n in shape))
        op = disco.discretize(basis, grid, padding=padding, normalize=True)
        if len(_OPERATORS) > 256:
            _OPERATORS.clear()
        op.plan()
        _OPERATORS[key] = op
    return op


class Graph:
    """Builds model computations on a tape from a parameter dict."""

    def __init__(self, params: dict, tape: Tape | None = None):
        self.tape = Tape() if tape is None else tape
        self.p = {k: self.tape.leaf(v, k) for k, v in params.items()}

    def block(self, x: Node, prefix: str, basis, padding, pitch_scale) -> Node:
        t = self.tape
        op = layer_operator(x.shape[1:], basis, padding, pitch_scale)
        h = t.apply("disco_apply", x, self.p[f"{prefix}.kernel"], op=op)
        h = t.apply("pointwise_affine", h, self.p[f"{prefix}.mix_w"], self.p[f"{prefix}.mix_b"])
        return t.apply("relu", h)

    def udno(self, x: Node, cfg: UdnoConfig, prefix: str, pitch_scale: float = 1.0) -> Node:
        t = self.tape
        axes = cfg.pool_axes
        factor = 2 ** cfg.levels
        for ax in axes:
            if x.shape[1 + ax] % factor:
                raise ValueError(f"grid axis {ax} of size {x.shape[1 + ax]} not divisible by {factor}")
        skips = []
        h = x
        for lvl in range(cfg.levels):
            for k in range(2):
                h = self.block(h, f"{prefix}.enc{lvl}.{k}", cfg.basis(lvl), cfg.padding, pitch_scale)
            skips.append(h)
            h = t.apply("downsample2", h, axes=axes)
        for k in range(2):
            h = self.block(h, f"{prefix}.mid.{k}", cfg.basis(cfg.levels), cfg.padding, pitch_scale)
        for lvl in reversed(range(cfg.levels)):
            h = t.apply("upsample2", h, axes=axes)
            h = t.apply("add", h, skips[lvl])
            for k in range(2):
                h = self.block(h, f"{prefix}.dec{lvl}.{k}", cfg.basis(lvl), cfg.padding, pitch_scale)
        op = layer_operator(h.shape[1:], cfg.head_basis(), cfg.padding, pitch_scale)
        return t.apply("disco_apply", h, self.p[f"{prefix}.head.kernel"], op=op)

    def nos(self, sino: Node, cfg: CtoConfig) -> Node:
        t = self.tape
        spatial = self.udno(sino, cfg.nos_spatial, "nos.spatial")
        spec = t.apply("fft_r", sino)
        freq = t.apply("ifft_r", self.udno(spec, cfg.nos_freq, "nos.freq"))
        return t.apply("scale", t.apply("add", spatial, freq), factor=0.5)

    def fbp(self, sino: Node, proj: ProjectorConfig, cfg: CtoConfig) -> Node:
        t = self.tape
        filtered = t.apply("ramp_filter", sino, cfg=FbpConfig("ramp", cfg.fbp_pad_factor))
        back = t.apply("projector_adjoint", filtered, cfg=proj)
        return t.apply("scale", back, factor=fbp_scale(proj))

    def cascade(self, k: int, x: Node, sino: Node, proj: ProjectorConfig, cfg: CtoConfig,
                pitch_scale: float = 1.0) -> Node:
        t = self.tape
        resid = t.apply("sub", t.apply("projector_forward", x, cfg=proj), sino)
        grad = t.apply("projector_adjoint", resid, cfg=proj)
        # eta is stored in units of 1/||A||^2 so one value serves every view count
        dc = t.apply("scale", grad, self.p[f"eta.{k}"], factor=1.0 / get_projector(proj).norm_sq())
        reg = t.apply("scale", self.udno(x, cfg.noi, f"noi.{k}", pitch_scale), self.p[f"lam.{k}"])
        return t.apply("add", t.apply("sub", x, dc), reg)

    def cto(self, sino: Sinogram, cfg: CtoConfig) -> Node:
        t = self.tape
        proj = cfg.projector(sino)
        p = t.constant(sino.values[None])
        x = self.fbp(self.nos(p, cfg), proj, cfg)
        for k in range(cfg.cascades):
            x = self.cascade(k, x, p, proj, cfg)
        return x


def _check_sino(sino: Sinogram, cfg: CtoConfig) -> None:
    if sino.det_count != cfg.det_count:
        raise ValueError(f"sinogram has {sino.det_count} detectors, model expects {cfg.det_count}")
    if not math.isclose(sino.det_spacing, cfg.det_spacing, rel_tol=1e-12):
        raise ValueError("detector spacing does not match the model configuration")


def udno_forward(cfg: UdnoConfig, params: dict, x: np.ndarray, prefix: str = "udno") -> np.ndarray:
    g = Graph({k: v for k, v in params.items() if k.startswith(prefix + ".")})
    return g.udno(g.tape.constant(np.asarray(x, dtype=float)), cfg, prefix).value


def nos_forward(params: dict, sino: Sinogram, cfg: CtoConfig) -> Sinogram:
    _check_sino(sino, cfg)
    g = Graph(params)
    out = g.nos(g.tape.constant(sino.values[None]), cfg).value[0]
    return sino.with_values(out)


def cascade_step(k: int, params: dict, x: Image, sino: Sinogram, cfg: CtoConfig) -> Image:
    _check_sino(sino, cfg)
    proj = cfg.projector(sino)
    if x.shape != proj.image_shape:
        raise ValueError("image grid does not match the model configuration")
    g = Graph(params)
    t = g.tape
    out = g.cascade(k, t.constant(x.values[None]), t.constant(sino.values[None]), proj, cfg)
    return Image(out.value[0], x.spacing)


def cto_forward(params: dict, sino: Sinogram, cfg: CtoConfig) -> Image:
    _check_sino(sino, cfg)
    return Image(Graph(params).cto(sino, cfg).value[0], cfg.spacing)


def infer_superres(params: dict, sino: Sinogram, cfg: CtoConfig, scale: int = 2,
                   fixed_pixel_support: bool = False) -> Image:
    """Run the cascades on a grid ``scale`` times finer than the training grid.

    Sinogram processing and initialization run at the base resolution; the
    initial image is bilinearly upsampled. Image-space kernels are
    re-discretized with the same normalized cutoff, or, with
    ``fixed_pixel_support``, keep their base-resolution pixel footprint.
    """
    _check_sino(sino, cfg)
    if scale < 1:
        raise ValueError("scale must be >= 1")
    g = Graph(params)
    t = g.tape
    base = cfg.projector(sino)
    p = t.constant(sino.values[None])
    x0 = g.fbp(g.nos(p, cfg), base, cfg).value[0]
    n = cfg.image_size * scale
    up = resample_bilinear(Image(x0, cfg.spacing), n, n)
    fine = cfg.projector(sino, scale)
    x = t.constant(up.values[None])
    pitch_scale = float(scale) if fixed_pixel_support else 1.0
    for k in range(cfg.cascades):
        x = g.cascade(k, x, p, fine, cfg, pitch_scale)
    return Image(x.value[0], up.spacing)


def loss_and_grads(params: dict, sino: Sinogram, target: Image, cfg: CtoConfig):
    from .autodiff import grad

    g = Graph(params)
    out = g.cto(sino, cfg)
    loss = g.tape.apply("mse_loss", out, g.tape.constant(target.values[None]))
    return float(loss.value), grad(g.tape, loss, {k: g.p[k] for k in params})


# -- model files --------------------------------------------------------------

MODEL_MAGIC = b"CTOM"
MODEL_VERSION = 1


def save_model(path, cfg: CtoConfig, params: dict) -> None:
    text = cfg.to_json().encode()
    parts = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION), struct.pack("<I", len(text)), text]
    for name in sorted(params):
        raw = name.encode()
        values = np.ascontiguousarray(params[name], dtype="<f8").ravel()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<Q", values.size), values.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> tuple[CtoConfig, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise FormatError("bad magic; not a CTOM model file")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model version {version}")
        pos = 12
        cfg = CtoConfig.from_json(data[pos:pos + n].decode())
        pos += n
        shapes = {k: np.shape(v) for k, v in init_params(cfg).items()}
        params = {}
        while pos < len(data):
            (ln,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + ln].decode()
            pos += 4 + ln
            (count,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if name not in shapes or int(np.prod(shapes[name])) != count:
                raise FormatError(f"leaf {name!r} does not match the configuration")
            if pos + 8 * count > len(data):
                raise FormatError("truncated parameter payload")
            values = np.frombuffer(data, "<f8", count, pos).astype(np.float64)
            params[name] = values.reshape(shapes[name])
            pos += 8 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError, KeyError) as exc:
        raise FormatError(f"corrupt model file: {exc}") from None
    if set(params) != set(shapes):
        raise FormatError("model file is missing parameters")
    return cfg, dict(sorted(params.items()))
