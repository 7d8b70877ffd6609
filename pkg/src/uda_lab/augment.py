"""Dirichlet mixing of randomly sampled augmentation operations.

Every op is written as an explicit coordinate or pixel formula so results are
bit-reproducible:

points (any dimension >= 2, rotation acts on the first two coordinates)
    gaussian_jitter   x + s * N(0, I)                      s in [0.01, 0.1]
    rotate            rotation about the origin by s deg   s in [-15, 15]
    uniform_scale     s * x                                s in [0.9, 1.1]
    translate         x + u, u_k ~ U(-s, s) per axis       s in [0, 0.1]

images (H x W, values in [0, 1], every op clips back to [0, 1])
    brightness        x + s                                s in [-0.3, 0.3]
    contrast          m + (1 + s)(x - m), m = mean(x)      s in [-0.5, 0.5]
    posterize         round(x (L - 1)) / (L - 1),
                      L = 2 ** round(8 - s)                s in [0, 6]
    solarize          1 - x where x >= 1 - s               s in [0, 0.5]
    gaussian_noise    x + s * N(0, I)                      s in [0, 0.1]
    translate_x/_y    integer shift by round(s), zero fill s in [-2, 2]
    rotate            bilinear rotation about the centre   s in [-15, 15] deg

Severity 0 (or 8 bits for posterize) is the identity wherever the range
contains it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

MODALITIES = ("points2d", "vector", "image")


@dataclass(frozen=True)
class AugOp:
    name: str
    lo: float
    hi: float
    apply: Callable[[np.ndarray, float, np.random.Generator], np.ndarray]

    def __call__(self, x, severity, rng):
        out = self.apply(x, severity, rng)
        if out.shape != x.shape:
            raise ValueError(f"{self.name} changed shape {x.shape} -> {out.shape}")
        return out


@dataclass(frozen=True)
class OpRegistry:
    modality: str
    ops: tuple[AugOp, ...]
    compose: bool = True
    image_size: int | None = None

    def __post_init__(self):
        if not self.ops:
            raise ValueError("registry needs at least one op")

    @property
    def names(self) -> list[str]:
        return [op.name for op in self.ops]


@dataclass(frozen=True)
class MixSpec:
    K: int = 4
    concentration: float = 1.0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")


# ---------------------------------------------------------------------------
# point ops
# ---------------------------------------------------------------------------


def _jitter(x, s, rng):
    return x + s * rng.standard_normal(x.shape)


def _rotate_points(x, s, rng):
    t = np.deg2rad(s)
    out = x.copy()
    c, n = np.cos(t), np.sin(t)
    out[..., 0] = c * x[..., 0] - n * x[..., 1]
    out[..., 1] = n * x[..., 0] + c * x[..., 1]
    return out


def _scale(x, s, rng):
    return s * x


def _translate(x, s, rng):
    return x + rng.uniform(-s, s, size=x.shape)


POINT_OPS = (
    AugOp("gaussian_jitter", 0.01, 0.1, _jitter),
    AugOp("rotate_about_origin", -15.0, 15.0, _rotate_points),
    AugOp("uniform_scale", 0.9, 1.1, _scale),
    AugOp("translate", 0.0, 0.1, _translate),
)


# ---------------------------------------------------------------------------
# image ops (operate on [H, W] arrays)
# ---------------------------------------------------------------------------


def _brightness(x, s, rng):
    return np.clip(x + s, 0.0, 1.0)


def _contrast(x, s, rng):
    m = x.mean()
    return np.clip(m + (1.0 + s) * (x - m), 0.0, 1.0)


def _posterize(x, s, rng):
    levels = 2 ** int(round(8 - s))
    return np.clip(np.round(x * (levels - 1)) / (levels - 1), 0.0, 1.0)


def _solarize(x, s, rng):
    threshold = 1.0 - s
    return np.where(x >= threshold, 1.0 - x, x) if s > 0 else x.copy()


def _noise(x, s, rng):
    return np.clip(x + s * rng.standard_normal(x.shape), 0.0, 1.0)


def _shift(x, k, axis):
    k = int(round(k))
    out = np.zeros_like(x)
    if k == 0:
        return x.copy()
    if axis == 1:
        if k > 0:
            out[:, k:] = x[:, :-k]
        else:
            out[:, :k] = x[:, -k:]
    else:
        if k > 0:
            out[k:, :] = x[:-k, :]
        else:
            out[:k, :] = x[-k:, :]
    return out


def _translate_x(x, s, rng):
    return _shift(x, s, axis=1)


def _translate_y(x, s, rng):
    return _shift(x, s, axis=0)


def _rotate_image(x, s, rng):
    if s == 0:
        return x.copy()
    return np.clip(ndimage.rotate(x, s, reshape=False, order=1, mode="constant", cval=0.0), 0.0, 1.0)


IMAGE_OPS = (
    AugOp("brightness", -0.3, 0.3, _brightness),
    AugOp("contrast", -0.5, 0.5, _contrast),
    AugOp("posterize", 0.0, 6.0, _posterize),
    AugOp("solarize", 0.0, 0.5, _solarize),
    AugOp("gaussian_noise", 0.0, 0.1, _noise),
    AugOp("translate_x", -2.0, 2.0, _translate_x),
    AugOp("translate_y", -2.0, 2.0, _translate_y),
    AugOp("rotate", -15.0, 15.0, _rotate_image),
)

PHOTOMETRIC = ("brightness", "contrast", "posterize", "solarize", "gaussian_noise")


def builtin_registry(modality: str, image_size: int = 16, compose: bool = True, photometric_only: bool = False) -> OpRegistry:
    if modality in ("points2d", "vector"):
        return OpRegistry(modality, POINT_OPS, compose)
    if modality == "image":
        ops = tuple(op for op in IMAGE_OPS if not photometric_only or op.name in PHOTOMETRIC)
        return OpRegistry("image", ops, compose, image_size)
    raise ValueError(f"unknown modality {modality!r}")


def identity_registry(modality: str = "points2d") -> OpRegistry:
    return OpRegistry(modality, (AugOp("identity", 0.0, 0.0, lambda x, s, rng: x.copy()),), compose=False)


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------


def sample_dirichlet(K: int, rng: np.random.Generator, concentration: float = 1.0) -> np.ndarray:
    """Convex coefficients drawn from Dir(c, ..., c)."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if K == 1:
        return np.ones(1)
    alpha = np.asarray(rng.dirichlet(np.full(K, concentration)), dtype=np.float64)
    return alpha / alpha.sum()


def _sample_branch(registry: OpRegistry, K: int, rng):
    """Ops and severities for one branch, in the order they are drawn."""
    depth = 1
    if registry.compose and K > 1:
        depth = 1 + int(rng.integers(2))
    chain = []
    for _ in range(depth):
        op = registry.ops[int(rng.integers(len(registry.ops)))]
        chain.append((op, float(rng.uniform(op.lo, op.hi))))
    return chain


def _as_sample(x: np.ndarray, registry: OpRegistry) -> np.ndarray:
    if registry.modality == "image":
        size = registry.image_size or int(round(np.sqrt(x.size)))
        if x.size != size * size:
            raise ValueError(f"image registry expects {size}x{size} samples, got {x.shape}")
        return x.reshape(size, size)
    if x.ndim != 1 or x.size < 2:
        raise ValueError(f"point registry expects a 1-D sample of dimension >= 2, got {x.shape}")
    return x


def mix_augment(x: np.ndarray, registry: OpRegistry, spec: MixSpec, rng: np.random.Generator) -> np.ndarray:
    """``sum_i alpha_i o_i(x)`` for a single sample.

    Draw order: the K Dirichlet coefficients, then for every branch the
    chain depth (only when composition is enabled and K > 1), then for every
    op in the chain its index and severity, then whatever the op itself
    draws.
    """
    x = np.asarray(x, dtype=np.float64)
    sample = _as_sample(x, registry)
    alpha = sample_dirichlet(spec.K, rng, spec.concentration)
    mixed = np.zeros_like(sample)
    for a in alpha:
        branch = sample
        for op, severity in _sample_branch(registry, spec.K, rng):
            branch = op(branch, severity, rng)
        mixed += a * branch
    return mixed.reshape(x.shape)


def mix_augment_batch(x: np.ndarray, registry: OpRegistry, spec: MixSpec, rng: np.random.Generator) -> np.ndarray:
    return np.stack([mix_augment(row, registry, spec, rng) for row in np.asarray(x, dtype=np.float64)])
