"""Tape-based reverse-mode differentiation over the toolkit's primitives.

Every primitive is a registered (forward, vjp) pair. A :class:`Tape` records
applications in order; :meth:`Tape.gradients` walks the records backwards and
accumulates vector-Jacobian products. Input values stay on the tape as the
saved activations.

FFT convention: ``dft_r`` is unnormalized, ``idft_r`` scales by ``1/N``. Both
use a centered transform along the detector axis (sample and frequency grids
symmetric about zero), and complex data is carried as real/imaginary channel
blocks ``[re..., im...]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import disco
from .classical import FbpConfig, filter_rows
from .projector import get_projector


class InternalError(RuntimeError):
    pass


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable  # (g, out, *inputs, **attrs) -> tuple of input gradients
    linear: bool = False


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str, vjp: Callable, linear: bool = False):
    def register(fn):
        PRIMITIVES[name] = Primitive(name, fn, vjp, linear)
        return fn
    return register


class Node:
    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node({self.index}, shape={self.shape})"


@dataclass
class _Record:
    op: str
    inputs: tuple[int, ...]
    attrs: dict
    output: int


class Tape:
    def __init__(self):
        self.values: list = []
        self.records: list[_Record] = []
        self.leaves: dict[str, int] = {}

    def _push(self, value) -> Node:
        self.values.append(value)
        return Node(self, len(self.values) - 1, value)

    def leaf(self, value, name: str | None = None) -> Node:
        node = self._push(np.asarray(value, dtype=float))
        if name is not None:
            if name in self.leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaves[name] = node.index
        return node

    def constant(self, value) -> Node:
        return self._push(np.asarray(value, dtype=float))

    def apply(self, name: str, *inputs: Node, **attrs) -> Node:
        prim = PRIMITIVES.get(name)
        if prim is None:
            raise InternalError(f"unsupported primitive {name!r}")
        for n in inputs:
            if n.tape is not self:
                raise ValueError("inputs belong to a different tape")
        out = prim.forward(*(n.value for n in inputs), **attrs)
        node = self._push(out)
        self.records.append(_Record(name, tuple(n.index for n in inputs), attrs, node.index))
        return node

    def gradients(self, loss: Node) -> list:
        """Adjoint of every tape value w.r.t. a scalar ``loss`` (None where unreachable)."""
        if np.size(loss.value) != 1:
            raise ValueError("loss must be a scalar")
        grads: list = [None] * len(self.values)
        grads[loss.index] = np.ones_like(self.values[loss.index])
        for rec in reversed(self.records):
            g = grads[rec.output]
            if g is None:
                continue
            prim = PRIMITIVES.get(rec.op)
            if prim is None:
                raise InternalError(f"no backward rule for {rec.op!r}")
            ins = [self.values[i] for i in rec.inputs]
            for i, gi in zip(rec.inputs, prim.vjp(g, self.values[rec.output], *ins, **rec.attrs)):
                if gi is None:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        return grads

    def replay(self, overrides: dict[int, np.ndarray] | None = None) -> list:
        """Re-run the recorded program, optionally with replaced leaf values."""
        values = list(self.values)
        for i, v in (overrides or {}).items():
            values[i] = np.asarray(v, dtype=float)
        for rec in self.records:
            prim = PRIMITIVES[rec.op]
            values[rec.output] = prim.forward(*(values[i] for i in rec.inputs), **rec.attrs)
        return values


def grad(tape: Tape, loss: Node, leaves: dict[str, Node] | None = None) -> dict[str, np.ndarray]:
    """Gradients for named leaves; unreachable leaves get exact zeros."""
    all_grads = tape.gradients(loss)
    if leaves is None:
        leaves = {name: Node(tape, i, tape.values[i]) for name, i in tape.leaves.items()}
    out = {}
    for name, node in leaves.items():
        g = all_grads[node.index]
        out[name] = np.zeros_like(node.value) if g is None else g
    return out


# -- primitives ---------------------------------------------------------------

def _unbroadcast(g, shape):
    while np.ndim(g) > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and np.shape(g)[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@primitive("add", lambda g, out, a, b: (_unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))),
           linear=True)
def _add(a, b):
    return a + b


@primitive("sub", lambda g, out, a, b: (_unbroadcast(g, np.shape(a)), -_unbroadcast(g, np.shape(b))),
           linear=True)
def _sub(a, b):
    return a - b


def _scale_vjp(g, out, x, s=None, factor=1.0):
    if s is None:
        return (g * factor,)
    return g * (s * factor), np.asarray(np.sum(g * x) * factor)


@primitive("scale", _scale_vjp, linear=True)
def _scale(x, s=None, factor=1.0):
    """``x * factor`` or, with a scalar node ``s``, ``x * s * factor``."""
    return x * factor if s is None else x * (s * factor)


@primitive("relu", lambda g, out, x: (g * (x > 0),))
def _relu(x):
    return np.maximum(x, 0.0)


def _affine_vjp(g, out, x, w, b):
    c_in = x.shape[0]
    xf = x.reshape(c_in, -1)
    gf = g.reshape(g.shape[0], -1)
    return (w.T @ gf).reshape(x.shape), gf @ xf.T, gf.sum(axis=1)


@primitive("pointwise_affine", _affine_vjp)
def _affine(x, w, b):
    """Channel mixing ``out[o] = sum_c w[o, c] x[c] + b[o]``."""
    c_in = x.shape[0]
    return (w @ x.reshape(c_in, -1) + b[:, None]).reshape((w.shape[0],) + x.shape[1:])


@primitive("disco_apply", lambda g, out, x, c, op: disco.apply_vjp(op, x, c, g))
def _disco(x, c, op):
    return disco.apply(op, x, c)


def _pool_shape(shape, axes):
    return tuple(n // 2 if ax in axes else n for ax, n in enumerate(shape[1:], 0))


@primitive("downsample2",
           lambda g, out, x, axes: (_upsample(g, axes) / (2 ** len(axes)),), linear=True)
def _downsample(x, axes):
    """2x average pooling along the given grid axes (0 and/or 1)."""
    c, n0, n1 = x.shape
    a0 = 2 if 0 in axes else 1
    a1 = 2 if 1 in axes else 1
    if n0 % a0 or n1 % a1:
        raise ValueError(f"grid {x.shape[1:]} not divisible for pooling along {axes}")
    return x.reshape(c, n0 // a0, a0, n1 // a1, a1).mean(axis=(2, 4))


def _upsample(x, axes):
    out = x
    for ax in axes:
        out = np.repeat(out, 2, axis=ax + 1)
    return out


@primitive("upsample2", lambda g, out, x, axes: (_downsample(g, axes) * (2 ** len(axes)),),
           linear=True)
def _upsample_prim(x, axes):
    """2x nearest-neighbour upsampling along the given grid axes."""
    return _upsample(x, axes)


@primitive("projector_forward", lambda g, out, x, cfg: (get_projector(cfg).adjoint(g[0])[None],),
           linear=True)
def _proj_fwd(x, cfg):
    return get_projector(cfg).forward(x[0])[None]


@primitive("projector_adjoint", lambda g, out, y, cfg: (get_projector(cfg).forward(g[0])[None],),
           linear=True)
def _proj_adj(y, cfg):
    return get_projector(cfg).adjoint(y[0])[None]


@primitive("ramp_filter", lambda g, out, x, cfg=FbpConfig(): (filter_rows(g, cfg),), linear=True)
def _ramp(x, cfg=FbpConfig()):
    return filter_rows(x, cfg)


@lru_cache(maxsize=16)
def centered_dft_matrix(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of ``E[k, d] = exp(-2 pi i (k - c)(d - c) / n)``."""
    c = (n - 1) / 2
    k = np.arange(n) - c
    phase = -2 * np.pi * np.outer(k, k) / n
    re, im = np.cos(phase), np.sin(phase)
    re.setflags(write=False)
    im.setflags(write=False)
    return re, im


def dft_r(x: np.ndarray) -> np.ndarray:
    re, im = centered_dft_matrix(x.shape[-1])
    return np.concatenate([x @ re.T, x @ im.T], axis=0)


def idft_r(z: np.ndarray) -> np.ndarray:
    n = z.shape[-1]
    half = z.shape[0] // 2
    re, im = centered_dft_matrix(n)
    # Re(conj(E)^T (zr + i zi)) / n
    return (z[:half] @ re + z[half:] @ im) / n


@primitive("fft_r", lambda g, out, x: (_dft_t(g),), linear=True)
def _fft(x):
    return dft_r(x)


def _dft_t(g):
    n = g.shape[-1]
    half = g.shape[0] // 2
    re, im = centered_dft_matrix(n)
    return g[:half] @ re + g[half:] @ im


@primitive("ifft_r", lambda g, out, z: (np.concatenate([g @ centered_dft_matrix(g.shape[-1])[0].T,
                                                        g @ centered_dft_matrix(g.shape[-1])[1].T])
                                         / g.shape[-1],), linear=True)
def _ifft(z):
    return idft_r(z)


def _mse_vjp(g, out, x, target):
    d = x - target
    gx = g * 2 * d / d.size
    return gx, -gx


@primitive("mse_loss", _mse_vjp)
def _mse(x, target):
    return np.asarray(np.mean((x - target) ** 2))


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls(0, {k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape mismatch for {name}")
        m = beta1 * state.m[name] + (1 - beta1) * g
        v = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


# -- parameter trees ----------------------------------------------------------

def flatten(tree: dict) -> tuple[np.ndarray, tuple]:
    """Concatenate leaves in sorted-name order; returns ``(vector, layout)``."""
    names = sorted(tree)
    layout = tuple((name, np.shape(tree[name])) for name in names)
    if not names:
        return np.zeros(0), layout
    vec = np.concatenate([np.asarray(tree[n], dtype=float).ravel() for n in names])
    return vec, layout


def unflatten(vector: np.ndarray, layout: tuple) -> dict:
    vector = np.asarray(vector, dtype=float)
    sizes = [int(np.prod(shape)) for _, shape in layout]
    if vector.shape != (sum(sizes),):
        raise ValueError(f"vector of length {vector.size} does not match layout ({sum(sizes)})")
    out, pos = {}, 0
    for (name, shape), n in zip(layout, sizes):
        out[name] = vector[pos:pos + n].reshape(shape).copy()
        pos += n
    return out
