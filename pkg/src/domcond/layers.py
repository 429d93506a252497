"""Trainable layers: linear, conv, FiLM generation/application, embeddings.

Parameter initialization is keyed by (seed, parameter name), so a layer with
the same name starts identically in every model variant built from one seed.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import (
    DimensionError,
    Parameter,
    Tensor,
    ValidationError,
    _emit,
    add,
    conv2d,
    matmul,
    mean_squared_error,
    scale,
    transpose,
)

FILM_MODES = ("full", "scale_only", "offset_only")


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Deterministic, name-keyed stream so shared layers match across variants."""
    digest = hashlib.blake2s(name.encode(), digest_size=8).digest()
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest, "little")]))


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class LinearLayer:
    """Affine map x -> x @ W^T + b with W: (out, in)."""

    def __init__(self, name: str, in_dim: int, out_dim: int, seed: int):
        rng = param_rng(seed, f"{name}.weight")
        self.weight = Parameter(f"{name}.weight", _glorot(rng, (out_dim, in_dim), in_dim, out_dim))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, transpose(self.weight)), self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class Conv2dLayer:
    """Stride-1 zero-padded convolution layer; kernel extents must be odd."""

    def __init__(self, name, in_channels, out_channels, kernel, pad, seed):
        if kernel % 2 == 0:
            raise ValidationError(f"{name}: kernel extent must be odd, got {kernel}")
        fan_in = in_channels * kernel * kernel
        fan_out = out_channels * kernel * kernel
        rng = param_rng(seed, f"{name}.weight")
        shape = (out_channels, in_channels, kernel, kernel)
        self.weight = Parameter(f"{name}.weight", _glorot(rng, shape, fan_in, fan_out))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels))
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.pad)

    def parameters(self):
        return [self.weight, self.bias]


class FiLMGenerator:
    """Maps a conditioning vector to per-channel scales and offsets.

    Weights start at zero with unit scale bias, so the generated modulation is
    the identity map until training moves it. mode freezes one branch:
    scale_only pins offsets to 0, offset_only pins scales to 1, and the frozen
    branch receives no gradient.
    """

    def __init__(self, name: str, cond_dim: int, channels: int, seed: int, mode: str = "full"):
        if mode not in FILM_MODES:
            raise ValidationError(f"{name}: unknown FiLM mode {mode!r}")
        self.w_scale = Parameter(f"{name}.w_scale", np.zeros((channels, cond_dim)))
        self.b_scale = Parameter(f"{name}.b_scale", np.ones(channels))
        self.w_offset = Parameter(f"{name}.w_offset", np.zeros((channels, cond_dim)))
        self.b_offset = Parameter(f"{name}.b_offset", np.zeros(channels))
        self.cond_dim = cond_dim
        self.channels = channels
        self.mode = mode

    def parameters(self):
        return [self.w_scale, self.b_scale, self.w_offset, self.b_offset]


def film_generate(gen: FiLMGenerator, z: Tensor):
    """Per-example (scale, offset) pair, each (N, channels)."""
    if z.data.ndim != 2 or z.shape[1] != gen.cond_dim:
        raise DimensionError(f"film_generate: conditioning shape {z.shape} "
                             f"does not match dimension {gen.cond_dim}")
    n = z.shape[0]
    if gen.mode == "offset_only":
        s = Tensor(np.ones((n, gen.channels)))
    else:
        s = add(matmul(z, transpose(gen.w_scale)), gen.b_scale)
    if gen.mode == "scale_only":
        o = Tensor(np.zeros((n, gen.channels)))
    else:
        o = add(matmul(z, transpose(gen.w_offset)), gen.b_offset)
    return s, o


def film_apply(x: Tensor, s: Tensor, o: Tensor) -> Tensor:
    """Per-channel affine modulation of a feature map by (scale, offset)."""
    if x.data.ndim != 4:
        raise DimensionError(f"film_apply: need (N, C, H, W) features, got shape {x.shape}")
    n, c = x.shape[:2]
    if s.shape != (n, c) or o.shape != (n, c):
        raise DimensionError(f"film_apply: modulation shapes {s.shape}/{o.shape} "
                             f"do not match features {x.shape}")
    sx = s.data[:, :, None, None]
    out = sx * x.data
    out += o.data[:, :, None, None]

    def vjp(g):
        return sx * g, (g * x.data).sum(axis=(2, 3)), g.sum(axis=(2, 3))

    return _emit(out, (x, s, o), vjp)


def film_penalty(pairs) -> Tensor:
    """Average MSE between each modulation layer's input and output (scalar)."""
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("film_penalty: need at least one (input, output) pair")
    acc = mean_squared_error(pairs[0][0], pairs[0][1])
    for before, after in pairs[1:]:
        acc = add(acc, mean_squared_error(before, after))
    return scale(acc, 1.0 / len(pairs))


class EmbeddingTable:
    """One learned conditioning row per training domain."""

    def __init__(self, name: str, rows: int, dim: int, seed: int):
        rng = param_rng(seed, f"{name}.table")
        self.table = Parameter(f"{name}.table", 0.1 * rng.standard_normal((rows, dim)))

    def parameters(self):
        return [self.table]


def embedding_lookup(table: EmbeddingTable, ids) -> Tensor:
    """Gather rows by id; gradients scatter-add onto the selected rows only."""
    ids = np.asarray(ids)
    rows = table.table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ValidationError(f"embedding_lookup: ids must lie in [0, {rows}), "
                              f"got range [{ids.min()}, {ids.max()}]")
    p = table.table

    def vjp(g):
        gt = np.zeros_like(p.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit(p.data[ids], (p,), vjp)
