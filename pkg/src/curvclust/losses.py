"""Clustering objective: Ricci loss, curvature consistency and reweighted contrast.

All functions are polymorphic over numpy arrays and autodiff tensors.
Embedding and centroid arguments are block lists
``[free, restricted_1, ..., restricted_M]``.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .encoder import glt
from .manifold import ProductManifold, RestrictedFactor, log_at_pole, pairwise_product_distance


class NonFiniteLossError(FloatingPointError):
    """A loss component evaluated to NaN or infinity."""

    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component} is not finite ({value})")
        self.component = component


def soft_assign(p: ProductManifold, z_blocks: list, centroid_blocks: list):
    """Membership ``softmax_k(-d_P(z_i, phi_k))``, shape ``(N, K)``."""
    d = pairwise_product_distance(p, z_blocks, centroid_blocks)
    return ad.softmax(ad.neg(d), axis=1)


def hard_labels(pi) -> np.ndarray:
    """Argmax of each membership row; ``np.argmax`` breaks ties by lowest index."""
    return np.argmax(ad.value(pi), axis=1)


def ricci_loss(edges: np.ndarray, edge_ricci: np.ndarray, pi, alpha0: float = 1.0):
    """``alpha0 * D_inter - D_intra`` over the undirected edge list.

    ``D_intra`` averages ``Ric(i, j) * sum_k pi_ik pi_jk`` over edges and
    ``D_inter`` averages ``Ric(i, j) * sum_{k1 != k2} pi_ik1 pi_jk2`` over edges,
    further divided by ``K``.
    """
    n_edges = len(edges)
    if n_edges == 0:
        return 0.0
    k = np.shape(ad.value(pi))[1]
    pa = ad.take(pi, edges[:, 0])
    pb = ad.take(pi, edges[:, 1])
    agree = ad.sum(ad.mul(pa, pb), axis=1)
    full = ad.mul(ad.sum(pa, axis=1), ad.sum(pb, axis=1))
    d_intra = ad.div(ad.sum(ad.mul(edge_ricci, agree)), n_edges)
    d_inter = ad.div(ad.sum(ad.mul(edge_ricci, ad.sub(full, agree))), n_edges * k)
    return ad.sub(ad.mul(alpha0, d_inter), d_intra)


def curvature_loss(node_ricci: np.ndarray, estimates):
    """Mean squared gap between node curvature and its estimate.

    Isolated nodes (NaN curvature) carry no target and are left out of both
    the sum and the count.
    """
    mask = ~np.isnan(node_ricci)
    if not mask.any():
        return 0.0
    idx = np.flatnonzero(mask)
    gap = ad.sub(node_ricci[idx], ad.take(estimates, idx))
    return ad.mean(ad.mul(gap, gap))


def view_image(f: RestrictedFactor, w, z):
    """Free-view image of restricted points: log at the pole after a gLT to ``d0 - 1``."""
    return log_at_pole(f, glt(f, w, z), check=False)


def similarity(zhat, z0, s):
    """Bilinear critic ``zhat^T S z0``; on matrices returns all row pairs."""
    if np.ndim(ad.value(zhat)) == 1:
        return ad.sum(ad.mul(zhat, ad.matmul(s, z0)))
    return ad.matmul(ad.matmul(zhat, s), ad.transpose(z0))


def dual_weight(agreement, sim, beta: int = 2):
    """``|agreement - sim| ** beta``; agreement is ``pi_i . pi_j`` or ``[pi_i]_k``."""
    return ad.pow(ad.abs(ad.sub(agreement, sim)), beta)


def _info_nce(sim, agreement, positives: np.ndarray, beta: int, reweight_grad: bool):
    w = dual_weight(agreement, sim, beta)
    if not reweight_grad:
        w = ad.detach(w)
    logits = ad.mul(w, sim)
    n = np.shape(ad.value(sim))[0]
    pos = ad.getitem(logits, (np.arange(n), positives))
    return ad.sum(ad.sub(ad.logsumexp(logits, axis=1), pos))


def n2n_loss(images, z0, pi, s, beta: int = 2, reverse: bool = False,
             reweight_grad: bool = False):
    """Node-to-node contrast between a restricted view's images and the free view.

    Forward: each image anchors a softmax over all free-view rows.  Reverse:
    each free-view row anchors a softmax over all images, with the same
    critic.  The positive is always the same node in the other view.
    """
    sim = similarity(images, z0, s)
    if reverse:
        sim = ad.transpose(sim)
    agreement = ad.matmul(pi, ad.transpose(pi))
    n = np.shape(ad.value(sim))[0]
    return _info_nce(sim, agreement, np.arange(n), beta, reweight_grad)


def positive_clusters(pi) -> np.ndarray:
    return hard_labels(pi)


def n2c_loss(nodes, centroids, pi, s, beta: int = 2, node_is_image: bool = True,
             reweight_grad: bool = False):
    """Node-to-cluster contrast: each node's softmax over the ``K`` centroids.

    ``nodes`` and ``centroids`` come from different views; the critic is
    applied with the restricted-view image on the left, so
    ``node_is_image`` says which side that is.  The positive is the node's
    argmax cluster and every term is weighted with ``[pi_i]_k``.
    """
    if node_is_image:
        sim = similarity(nodes, centroids, s)
    else:
        sim = ad.transpose(similarity(centroids, nodes, s))
    return _info_nce(sim, pi, positive_clusters(pi), beta, reweight_grad)


def rgc_terms(p: ProductManifold, z_blocks: list, centroid_blocks: list, pi, s, view_weights: list,
              beta: int = 2, reweight_grad: bool = False) -> dict:
    """Every contrast term, keyed ``n2n/{m}``, ``n2n_rev/{m}``, ``n2c/{m}``, ``n2c_rev/{m}``.

    Per restricted factor ``m`` the node view is paired with the free nodes
    (both directions) and with the clusters: restricted nodes against free
    centroids, and free nodes against restricted centroids.
    """
    if p.num_restricted < 1:
        raise ValueError("contrast needs at least one restricted factor")
    z0, phi0 = z_blocks[0], centroid_blocks[0]
    out = {}
    for m, f in enumerate(p.restricted):
        img = view_image(f, view_weights[m], z_blocks[m + 1])
        cimg = view_image(f, view_weights[m], centroid_blocks[m + 1])
        out[f"n2n/{m}"] = n2n_loss(img, z0, pi, s, beta, False, reweight_grad)
        out[f"n2n_rev/{m}"] = n2n_loss(img, z0, pi, s, beta, True, reweight_grad)
        out[f"n2c/{m}"] = n2c_loss(img, phi0, pi, s, beta, True, reweight_grad)
        out[f"n2c_rev/{m}"] = n2c_loss(z0, cimg, pi, s, beta, False, reweight_grad)
    return out


def rgc_loss(p: ProductManifold, z_blocks: list, centroid_blocks: list, pi, s, view_weights: list,
             beta: int = 2, reweight_grad: bool = False):
    terms = rgc_terms(p, z_blocks, centroid_blocks, pi, s, view_weights, beta, reweight_grad)
    total = 0.0
    for v in terms.values():
        total = ad.add(total, v)
    return total


def total_loss(l_ric, l_curv, l_rgc, alpha1: float = 1.0, alpha2: float = 1.0):
    """``J = L_Ric + alpha1 L_Curv + alpha2 L_RGC``; rejects non-finite components."""
    for name, v in (("L_ric", l_ric), ("L_curv", l_curv), ("L_rgc", l_rgc)):
        val = float(np.asarray(ad.value(v)))
        if not math.isfinite(val):
            raise NonFiniteLossError(name, val)
    return ad.add(ad.add(l_ric, ad.mul(alpha1, l_curv)), ad.mul(alpha2, l_rgc))
