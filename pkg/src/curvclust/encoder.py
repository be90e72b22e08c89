"""Fully Riemannian graph convolutions, one stack per product factor.

Restricted factors never leave the manifold: features enter through the
exponential map at the pole, the linear layer solves its time coordinate
in closed form, and neighbourhood aggregation is the normalised weighted
ambient sum (the closed-form weighted centroid).  The free factor uses an
ordinary affine map and weighted mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import Graph
from .manifold import (
    FreeFactor,
    ProductManifold,
    RestrictedFactor,
    _distance_from_inner,
    exp_at_pole_spatial,
    free_distance,
    inner,
)

NUM_LAYERS = 2
OVERFLOW_MARGIN = 1e-6
DEGENERATE_AGG = 1e-12

diagnostics = {"spherical_overflow": 0, "degenerate_aggregate": 0}


class DegenerateAggregateError(ArithmeticError):
    """Weighted ambient sum has (numerically) zero norm."""


@dataclass
class EmbeddingSet:
    """Per-factor node coordinates: free ``(N, d0)`` then restricted ``(N, d_m + 1)``."""

    free: object
    restricted: list = field(default_factory=list)

    @property
    def blocks(self) -> list:
        return [self.free] + list(self.restricted)

    def row(self, i: int) -> list:
        return [ad.value(b)[i] for b in self.blocks]

    def numpy(self) -> "EmbeddingSet":
        return EmbeddingSet(ad.detach(self.free), [ad.detach(z) for z in self.restricted])


# ---------------------------------------------------------------- params

def glorot(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-a, a, size=(d_out, d_in))


_UNIT = float(np.log(np.expm1(1.0)))


def init_params(p: ProductManifold, in_dim: int, rng: np.random.Generator,
                mlp_hidden: int = 16) -> dict[str, ad.Tensor]:
    """Fresh encoder, curvature and curvature-MLP parameters.

    Curvature magnitudes are taken from the current values in ``p``.
    """
    out: dict[str, np.ndarray] = {}
    for m, f in enumerate(p.restricted):
        out[f"curv/{m}"] = np.array(float(ad.value(f.magnitude_param)))
    d0 = p.free.dim
    out["free/proj"] = glorot(rng, d0, in_dim)
    for l in range(NUM_LAYERS):
        out[f"free/{l}/W"] = glorot(rng, d0 - 1, d0 - 1)
        out[f"free/{l}/b"] = np.zeros(d0 - 1)
        out[f"free/{l}/wt"] = np.array(1.0)
        out[f"free/{l}/tau"] = np.array(_UNIT)
        out[f"free/{l}/gamma"] = np.array(0.0)
    for m, f in enumerate(p.restricted):
        out[f"r{m}/proj"] = glorot(rng, f.dim, in_dim)
        for l in range(NUM_LAYERS):
            out[f"r{m}/{l}/W"] = glorot(rng, f.dim, f.dim)
            out[f"r{m}/{l}/b"] = np.zeros(f.dim)
            out[f"r{m}/{l}/tau"] = np.array(_UNIT)
            out[f"r{m}/{l}/gamma"] = np.array(0.0)
    k = p.num_restricted + 1
    out["mlp/W1"] = glorot(rng, mlp_hidden, k)
    out["mlp/b1"] = np.zeros(mlp_hidden)
    out["mlp/W2"] = glorot(rng, 1, mlp_hidden)
    out["mlp/b2"] = np.zeros(1)
    return {name: ad.Tensor(v, requires_grad=True, name=name) for name, v in out.items()}


def bind_manifold(p: ProductManifold, params: dict) -> ProductManifold:
    """Copy of ``p`` whose curvature magnitudes are the ``curv/*`` parameters."""
    factors = [RestrictedFactor(f.sign, f.dim, params[f"curv/{m}"])
               for m, f in enumerate(p.restricted)]
    return ProductManifold(FreeFactor(p.free.dim), factors)


# ---------------------------------------------------------------- operators

def lift_features(x, f: RestrictedFactor | FreeFactor, proj):
    """Map Euclidean features onto a factor: ``exp_0((0, proj x))`` or ``proj x``."""
    v = ad.matmul(x, ad.transpose(proj))
    if isinstance(f, FreeFactor):
        return v
    return exp_at_pole_spatial(f, v)


def _solve_time(f: RestrictedFactor, ys):
    """Attach the time coordinate that puts spatial rows ``ys`` on ``f``."""
    k = f.magnitude
    ell = ad.sum(ad.mul(ys, ys), axis=-1, keepdims=True)
    if f.hyperbolic:
        return ad.concat([ad.sqrt(ad.add(ad.div(1.0, k), ell)), ys], axis=-1)
    limit = 1.0 / float(ad.value(k))
    over = ad.value(ell) >= limit
    if np.any(over):
        diagnostics["spherical_overflow"] += int(over.sum())
        sel = over.astype(np.float64)
        target = ad.div(1.0 - OVERFLOW_MARGIN, ad.sqrt(k))
        # overflowing rows rescaled to the target norm, others untouched
        scale = ad.div(target, ad.add(ad.sqrt(ell), 1.0 - sel))
        ys = ad.mul(ys, ad.add(1.0 - sel, ad.mul(sel, scale)))
        ell = ad.sum(ad.mul(ys, ys), axis=-1, keepdims=True)
    return ad.concat([ad.sqrt(ad.clamp(ad.sub(ad.div(1.0, k), ell), lo=0.0)), ys], axis=-1)


def glt(f: RestrictedFactor, W, z):
    """Dimension-changing transform ``(w_t z_t, W z_s)`` staying on the factor."""
    zs = ad.getitem(z, (Ellipsis, slice(1, None)))
    ys = ad.matmul(zs, ad.transpose(W)) if np.ndim(ad.value(z)) == 2 else ad.matmul(W, zs)
    return _solve_time(f, ys)


def linear_layer(f: RestrictedFactor, W, b, z):
    """``(w_t z_t, W z_s + b)`` with the time scale solved for ``||W z_s + b||^2``."""
    zs = ad.getitem(z, (Ellipsis, slice(1, None)))
    ys = ad.matmul(zs, ad.transpose(W)) if np.ndim(ad.value(z)) == 2 else ad.matmul(W, zs)
    return _solve_time(f, ad.add(ys, b))


def _factor_dist(f, x, y):
    if isinstance(f, FreeFactor):
        return free_distance(x, y)
    return _distance_from_inner(f, inner(f, x, y))


def attention_weights(f, h_i, h_nbrs, tau, gamma):
    """Softmax of ``-tau * d(h_j, h_i) - gamma`` over the rows of ``h_nbrs``."""
    d = _factor_dist(f, h_nbrs, h_i)
    return ad.softmax(ad.sub(ad.mul(ad.neg(tau), d), gamma), axis=-1)


def aggregate(f: RestrictedFactor, h, nu):
    """Weighted centroid ``s / (sqrt|c| sqrt|<s, s>_c|)`` with ``s = sum_j nu_j h_j``."""
    s = ad.sum(ad.mul(ad.reshape(nu, (-1, 1)), h), axis=0)
    q = ad.abs(inner(f, s, s))
    if float(ad.value(q)) < DEGENERATE_AGG:
        raise DegenerateAggregateError("weighted sum cancels to zero norm")
    return ad.div(s, ad.mul(ad.sqrt(f.magnitude), ad.sqrt(q)))


@dataclass(frozen=True)
class Neighborhoods:
    """Flattened closed neighbourhoods: pair ``e`` joins ``center[e]`` and ``member[e]``."""

    center: np.ndarray
    member: np.ndarray
    is_self: np.ndarray
    num_nodes: int


def neighborhoods(g: Graph) -> Neighborhoods:
    centers, members = [], []
    for i in range(g.num_nodes):
        closed = np.union1d(g.neighbors[i], [i])
        centers.append(np.full(closed.size, i))
        members.append(closed)
    center = np.concatenate(centers).astype(np.intp)
    member = np.concatenate(members).astype(np.intp)
    return Neighborhoods(center, member, center == member, g.num_nodes)


def _segment_softmax(nb: Neighborhoods, logits):
    lv = ad.value(logits)
    mx = np.full(nb.num_nodes, -np.inf)
    np.maximum.at(mx, nb.center, lv)
    e = ad.exp(ad.sub(logits, mx[nb.center]))
    denom = ad.take(ad.segment_sum(e, nb.center, nb.num_nodes), nb.center)
    return ad.div(e, denom)


def _attend(nb: Neighborhoods, f, h, tau, gamma):
    hi = ad.take(h, nb.center)
    hj = ad.take(h, nb.member)
    d = ad.mul(_factor_dist(f, hj, hi), (~nb.is_self).astype(np.float64))
    return _segment_softmax(nb, ad.sub(ad.mul(ad.neg(tau), d), gamma))


def _aggregate_all(nb: Neighborhoods, f: RestrictedFactor, h, nu):
    s = ad.segment_sum(ad.mul(ad.reshape(nu, (-1, 1)), ad.take(h, nb.member)), nb.center, nb.num_nodes)
    q = ad.abs(inner(f, s, s))
    bad = (ad.value(q) < DEGENERATE_AGG).astype(np.float64)
    if bad.any():
        diagnostics["degenerate_aggregate"] += int(bad.sum())
    denom = ad.mul(ad.sqrt(f.magnitude), ad.sqrt(ad.add(q, bad)))
    normalized = ad.div(s, ad.reshape(denom, (-1, 1)))
    keep = (1.0 - bad)[:, None]
    return ad.add(ad.mul(normalized, keep), ad.mul(h, bad[:, None]))


def free_layer(params: dict, l: int, z0, nb: Neighborhoods):
    """Affine map (scaled first coordinate, ``W rest + b``) then attentive mean."""
    first = ad.mul(ad.getitem(z0, (slice(None), slice(0, 1))), params[f"free/{l}/wt"])
    rest = ad.add(ad.matmul(ad.getitem(z0, (slice(None), slice(1, None))),
                            ad.transpose(params[f"free/{l}/W"])), params[f"free/{l}/b"])
    h = ad.concat([first, rest], axis=1)
    tau = ad.softplus(params[f"free/{l}/tau"])
    nu = _attend(nb, FreeFactor(max(2, np.shape(ad.value(h))[1])), h, tau, params[f"free/{l}/gamma"])
    return ad.segment_sum(ad.mul(ad.reshape(nu, (-1, 1)), ad.take(h, nb.member)), nb.center, nb.num_nodes)


def restricted_layer(params: dict, m: int, l: int, f: RestrictedFactor, z, nb: Neighborhoods):
    h = linear_layer(f, params[f"r{m}/{l}/W"], params[f"r{m}/{l}/b"], z)
    tau = ad.softplus(params[f"r{m}/{l}/tau"])
    nu = _attend(nb, f, h, tau, params[f"r{m}/{l}/gamma"])
    return _aggregate_all(nb, f, h, nu)


def encode(g: Graph, p: ProductManifold, params: dict, nb: Neighborhoods | None = None,
           features=None) -> EmbeddingSet:
    """Embed every node of ``g`` in each factor of ``p`` (bound to ``params``)."""
    nb = neighborhoods(g) if nb is None else nb
    x = g.features if features is None else features
    z0 = lift_features(x, p.free, params["free/proj"])
    for l in range(NUM_LAYERS):
        z0 = free_layer(params, l, z0, nb)
    restricted = []
    for m, f in enumerate(p.restricted):
        z = lift_features(x, f, params[f"r{m}/proj"])
        for l in range(NUM_LAYERS):
            z = restricted_layer(params, m, l, f, z, nb)
        restricted.append(z)
    return EmbeddingSet(z0, restricted)


def estimate_node_curvature(params: dict, z0, curvatures):
    """Two-layer tanh MLP on ``[first free coordinate, c_1, ..., c_M]`` per node."""
    z0v = ad.value(z0)
    single = z0v.ndim == 1
    if single:
        z0 = ad.reshape(z0, (1, -1))
    n = np.shape(ad.value(z0))[0]
    ones = np.ones((n, 1))
    cols = [ad.getitem(z0, (slice(None), slice(0, 1)))] + [ad.mul(ones, c) for c in curvatures]
    inp = ad.concat(cols, axis=1)
    hidden = ad.tanh(ad.add(ad.matmul(inp, ad.transpose(params["mlp/W1"])), params["mlp/b1"]))
    out = ad.add(ad.matmul(hidden, ad.transpose(params["mlp/W2"])), params["mlp/b2"])
    out = ad.reshape(out, (n,))
    return ad.getitem(out, 0) if single else out
