"""Product of constant-curvature factors with one unconstrained free factor.

A restricted factor of curvature ``c != 0`` and spatial dimension ``d`` is
the set ``{z in R^(d+1) : <z, z>_c = 1/c}`` with
``<x, y>_c = sgn(c) x_t y_t + x_s . y_s``.  For ``c < 0`` this is the upper
sheet of a hyperboloid, for ``c > 0`` a sphere of radius ``1/sqrt(c)``.
Points are stored in ambient coordinates, time-like coordinate first, with
arbitrary leading batch axes.

All functions accept numpy arrays or :class:`~curvclust.autodiff.Tensor`
values; the factor's curvature may itself be a tensor so curvature
magnitudes can be trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

# softplus^{-1}(1): magnitude parameter that yields |c| = 1
UNIT_MAGNITUDE = float(np.log(np.expm1(1.0)))


class ConstraintError(ValueError):
    """A point violates its factor's norm constraint."""


class LogSingularityError(ValueError):
    """Logarithmic map requested at the antipode of the pole."""


@dataclass(frozen=True)
class FreeFactor:
    """The unconstrained ``R^d0`` factor."""

    dim: int

    def __post_init__(self):
        if self.dim <= 1:
            raise ValueError(f"free factor needs dim > 1, got {self.dim}")


@dataclass
class RestrictedFactor:
    """Constant-curvature factor with a fixed sign and a learnable magnitude.

    ``magnitude_param`` is unconstrained; the curvature is
    ``sign * softplus(magnitude_param)`` so it never crosses zero.
    """

    sign: int
    dim: int
    magnitude_param: object = UNIT_MAGNITUDE

    def __post_init__(self):
        if self.sign not in (-1, 1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")
        if self.dim < 1:
            raise ValueError("restricted factor needs at least one spatial dim")

    @classmethod
    def from_curvature(cls, c: float, dim: int) -> "RestrictedFactor":
        if c == 0:
            raise ValueError("restricted factor curvature must be non-zero")
        return cls(int(np.sign(c)), dim, float(np.log(np.expm1(abs(c)))))

    @property
    def magnitude(self):
        return ad.softplus(self.magnitude_param)

    @property
    def curvature(self):
        return ad.mul(self.sign, self.magnitude)

    @property
    def ambient_dim(self) -> int:
        return self.dim + 1

    @property
    def hyperbolic(self) -> bool:
        return self.sign < 0

    def metric(self) -> np.ndarray:
        m = np.ones(self.dim + 1)
        m[0] = self.sign
        return m

    def pole(self) -> np.ndarray:
        z = np.zeros(self.dim + 1)
        z[0] = 1.0 / np.sqrt(float(ad.value(self.magnitude)))
        return z

    def signature(self) -> tuple[int, int]:
        return (self.sign, self.dim)


@dataclass
class ProductManifold:
    """Free factor followed by an ordered list of restricted factors."""

    free: FreeFactor
    restricted: list[RestrictedFactor] = field(default_factory=list)

    @classmethod
    def build(cls, d0: int, dims, signs, magnitudes=None) -> "ProductManifold":
        if len(dims) != len(signs):
            raise ValueError("dims and signs must have equal length")
        factors = []
        for k, (d, s) in enumerate(zip(dims, signs)):
            mag = 1.0 if magnitudes is None else magnitudes[k]
            factors.append(RestrictedFactor.from_curvature(s * mag, int(d)))
        return cls(FreeFactor(int(d0)), factors)

    @property
    def num_restricted(self) -> int:
        return len(self.restricted)

    def curvatures(self) -> list:
        return [f.curvature for f in self.restricted]

    def signature(self) -> dict:
        return {"d0": self.free.dim, "factors": [list(f.signature()) for f in self.restricted]}

    def block_sizes(self) -> list[int]:
        return [self.free.dim] + [f.ambient_dim for f in self.restricted]


# ---------------------------------------------------------------- factor ops

def _time(x):
    return ad.getitem(x, (Ellipsis, slice(0, 1)))


def _space(x):
    return ad.getitem(x, (Ellipsis, slice(1, None)))


def _norm(x, keepdims: bool = True):
    return ad.sqrt(ad.sum(ad.mul(x, x), axis=-1, keepdims=keepdims))


def inner(f: RestrictedFactor, x, y):
    """Metric inner product along the last axis."""
    return ad.sum(ad.mul(ad.mul(x, y), f.metric()), axis=-1)


def constraint_violation(f: RestrictedFactor, z) -> np.ndarray:
    """``|<z, z>_c - 1/c|`` per point (numpy, no gradient)."""
    zv = ad.value(z)
    c = float(ad.value(f.curvature))
    return np.abs(np.sum(zv * zv * f.metric(), axis=-1) - 1.0 / c)


def check_on_factor(f: RestrictedFactor, z, tol: float = 1e-6) -> None:
    zv = ad.value(z)
    if zv.shape[-1] != f.ambient_dim:
        raise ConstraintError(f"expected ambient dim {f.ambient_dim}, got {zv.shape[-1]}")
    scale = np.maximum(1.0, zv[..., 0] ** 2)
    viol = constraint_violation(f, zv)
    if np.any(viol > tol * scale):
        raise ConstraintError(f"point off factor: max violation {viol.max():.3e}")
    if f.hyperbolic and np.any(zv[..., 0] <= 0):
        raise ConstraintError("hyperbolic point on the lower sheet")


def _distance_from_inner(f: RestrictedFactor, g):
    k = f.magnitude
    u = ad.mul(f.curvature, g)
    if f.hyperbolic:
        return ad.div(ad.arcosh(ad.clamp(u, lo=1.0)), ad.sqrt(k))
    return ad.div(ad.arccos(ad.clamp(u, lo=-1.0, hi=1.0)), ad.sqrt(k))


def factor_distance(f: RestrictedFactor, x, y, check: bool = True):
    """Geodesic distance between matching rows of ``x`` and ``y``."""
    if check:
        check_on_factor(f, x)
        check_on_factor(f, y)
    return _distance_from_inner(f, inner(f, x, y))


def pairwise_factor_distance(f: RestrictedFactor, x, y):
    """``(n, m)`` distance matrix between rows of ``x`` (n) and ``y`` (m)."""
    g = ad.matmul(ad.mul(x, f.metric()), ad.transpose(y))
    return _distance_from_inner(f, g)


def free_distance(x, y):
    """Euclidean distance along the last axis."""
    if np.shape(ad.value(x))[-1] != np.shape(ad.value(y))[-1]:
        raise ValueError("free_distance: length mismatch")
    d = ad.sub(x, y)
    return ad.sqrt(ad.sum(ad.mul(d, d), axis=-1))


def pairwise_free_distance(x, y):
    n, d = np.shape(ad.value(x))
    m, d2 = np.shape(ad.value(y))
    if d != d2:
        raise ValueError("pairwise_free_distance: length mismatch")
    diff = ad.sub(ad.reshape(x, (n, 1, d)), ad.reshape(y, (1, m, d)))
    return ad.sqrt(ad.sum(ad.mul(diff, diff), axis=-1))


def product_distance(p: ProductManifold, x: list, y: list):
    """Square root of the summed squared per-factor distances.

    ``x`` and ``y`` are block lists ``[free, restricted_1, ..., restricted_M]``.
    """
    _check_blocks(p, x)
    _check_blocks(p, y)
    sq = ad.pow(free_distance(x[0], y[0]), 2)
    for f, xb, yb in zip(p.restricted, x[1:], y[1:]):
        sq = ad.add(sq, ad.pow(factor_distance(f, xb, yb), 2))
    return ad.sqrt(sq)


def pairwise_product_distance(p: ProductManifold, x: list, y: list):
    sq = ad.pow(pairwise_free_distance(x[0], y[0]), 2)
    for f, xb, yb in zip(p.restricted, x[1:], y[1:]):
        sq = ad.add(sq, ad.pow(pairwise_factor_distance(f, xb, yb), 2))
    return ad.sqrt(sq)


def _check_blocks(p: ProductManifold, blocks: list) -> None:
    sizes = p.block_sizes()
    if len(blocks) != len(sizes):
        raise ValueError(f"expected {len(sizes)} blocks, got {len(blocks)}")
    for k, (b, n) in enumerate(zip(blocks, sizes)):
        if np.shape(ad.value(b))[-1] != n:
            raise ValueError(f"block {k}: expected length {n}, got {np.shape(ad.value(b))[-1]}")


def exp_at_pole_spatial(f: RestrictedFactor, vs):
    """Exponential map at the pole of a tangent vector given by its spatial part."""
    sk = ad.sqrt(f.magnitude)
    r = ad.mul(sk, _norm(vs))
    if f.hyperbolic:
        zt = ad.div(ad.cosh(r), sk)
        zs = ad.mul(ad.sinhc(r), vs)
    else:
        zt = ad.div(ad.cos(r), sk)
        zs = ad.mul(ad.sinc(r), vs)
    return ad.concat([zt, zs], axis=-1)


def exp_at_pole(f: RestrictedFactor, v):
    """Exponential map at the pole; ``v`` is ambient with zero time part."""
    vv = ad.value(v)
    if vv.shape[-1] != f.ambient_dim:
        raise ValueError(f"expected ambient dim {f.ambient_dim}, got {vv.shape[-1]}")
    if np.any(np.abs(vv[..., 0]) > 1e-12):
        raise ValueError("tangent vector at the pole must have zero time component")
    return exp_at_pole_spatial(f, _space(v))


def log_at_pole(f: RestrictedFactor, z, check: bool = True):
    """Logarithmic map at the pole; returns ambient vectors with zero time part."""
    if check:
        check_on_factor(f, z)
    sk = ad.sqrt(f.magnitude)
    zs = _space(z)
    s = ad.mul(sk, _norm(zs))
    if f.hyperbolic:
        scale = ad.arsinhc(s)
    else:
        t = ad.mul(sk, _time(z))
        sv, tv = ad.value(s), ad.value(t)
        if np.any((sv < 1e-12) & (tv < 0)):
            raise LogSingularityError("log map undefined at the antipode of the pole")
        scale = ad.atan2c(s, t)
    vs = ad.mul(zs, scale)
    zero = np.zeros(np.shape(ad.value(vs))[:-1] + (1,))
    return ad.concat([zero, vs], axis=-1)


def project_to_factor(f: RestrictedFactor, z):
    """Retraction onto the factor.

    Hyperbolic: keep the spatial part and solve for a positive time part.
    Spherical: rescale the ambient vector to radius ``1/sqrt(c)``.
    """
    k = f.magnitude
    if f.hyperbolic:
        zs = _space(z)
        zt = ad.sqrt(ad.add(ad.div(1.0, k), ad.sum(ad.mul(zs, zs), axis=-1, keepdims=True)))
        return ad.concat([zt, zs], axis=-1)
    nrm = _norm(z)
    if np.any(ad.value(nrm) == 0):
        raise ConstraintError("cannot project the zero vector onto a sphere")
    return ad.div(z, ad.mul(nrm, ad.sqrt(k)))
