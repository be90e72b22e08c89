"""End-to-end training: encode, score, backpropagate, step, retract.

Parameters live in one ordered ``dict[str, Tensor]``:

* encoder weights, curvature magnitudes ``curv/{m}`` and the curvature MLP
  (see :func:`curvclust.encoder.init_params`),
* the contrast critic ``S`` and view maps ``view/{m}``,
* centroid blocks ``cent/free`` and ``cent/{m}``.

Every parameter is updated with Adam moments; the restricted centroid blocks
are then projected back onto their factor at the freshly updated curvature.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import losses as L
from .encoder import Neighborhoods, bind_manifold, encode, estimate_node_curvature, glorot, init_params, neighborhoods
from .graph import Graph
from .manifold import (
    ConstraintError,
    LogSingularityError,
    ProductManifold,
    pairwise_product_distance,
    project_to_factor,
)
from .metrics import cluster_density, cluster_entropy, score
from .ricci import RicciTable

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_FIELDS = ["epoch", "J", "L_ric", "L_curv", "L_rgc", "nmi", "ari", "acc"]
CURVE_FIELDS = ["epoch", "density", "entropy"]


class ConfigError(ValueError):
    """Missing, unknown or malformed configuration key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


class CheckpointError(ValueError):
    """Checkpoint unreadable, from another version, or for another manifold."""


class TrainingDiverged(FloatingPointError):
    """The objective stopped being finite; carries the last finite parameters."""

    def __init__(self, epoch: int, reason: str, params: dict, history: list):
        super().__init__(f"training diverged at epoch {epoch}: {reason}")
        self.epoch = epoch
        self.params = params
        self.history = history


# ---------------------------------------------------------------- config

def _ints(s: str) -> list[int]:
    return [int(v) for v in s.replace(",", " ").split()]


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


CENTROID_INITS = ("spread", "farthest", "uniform")


@dataclass
class TrainConfig:
    k: int = 3
    m_factors: int = 3
    dims: list = field(default_factory=lambda: [32, 16, 16])
    signs: list = field(default_factory=lambda: [-1, -1, 1])
    d0: int = 32
    lam: float = 0.5
    alpha0: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta: int = 2
    lr: float = 3e-4
    epochs: int = 300
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mlp_hidden: int = 16
    reweight_grad: bool = False
    normalize_features: bool = False
    workers: int = 1
    critic_scale: float = 1.0
    centroid_init: str = "farthest"

    REQUIRED = ("k", "m_factors", "dims", "signs", "d0", "lambda", "alpha0", "alpha1", "alpha2",
                "beta", "lr", "epochs", "seed", "beta1", "beta2", "eps")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k", "must be positive")
        if self.m_factors < 1:
            raise ConfigError("m_factors", "must be at least 1")
        if len(self.dims) != self.m_factors:
            raise ConfigError("dims", f"expected {self.m_factors} values, got {len(self.dims)}")
        if len(self.signs) != self.m_factors or any(s not in (-1, 1) for s in self.signs):
            raise ConfigError("signs", f"expected {self.m_factors} values from {{-1, 1}}")
        if any(d < 1 for d in self.dims):
            raise ConfigError("dims", "must be positive")
        if self.d0 < 2:
            raise ConfigError("d0", "must be at least 2")
        if not 0.0 <= self.lam < 1.0:
            raise ConfigError("lambda", "must lie in [0, 1)")
        for key in ("alpha0", "alpha1", "alpha2", "lr"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be nonnegative")
        if self.beta < 1:
            raise ConfigError("beta", "must be a positive integer")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1", "Adam moment decays must lie in [0, 1)")
        if self.centroid_init not in CENTROID_INITS:
            raise ConfigError("centroid_init", f"must be one of {CENTROID_INITS}")
        if self.eps <= 0:
            raise ConfigError("eps", "must be positive")

    @classmethod
    def from_mapping(cls, raw: dict, require_all: bool = True) -> "TrainConfig":
        if require_all:
            for key in cls.REQUIRED:
                if key not in raw:
                    raise ConfigError(key, "missing")
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, text in raw.items():
            name = "lam" if key == "lambda" else key
            if name not in kinds:
                raise ConfigError(key, "unknown key")
            try:
                if name in ("dims", "signs"):
                    kw[name] = _ints(text)
                elif kinds[name] == "str":
                    kw[name] = text
                elif kinds[name] == "bool":
                    kw[name] = _bool(text)
                elif kinds[name] == "int":
                    kw[name] = int(text)
                else:
                    kw[name] = float(text)
            except ValueError:
                raise ConfigError(key, f"cannot parse {text!r}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        raw = {}
        with open(path) as fh:
            for ln, line in enumerate(fh, start=1):
                s = line.split("#", 1)[0].strip()
                if not s:
                    continue
                if "=" not in s:
                    raise ConfigError(s, f"line {ln} is not key=value")
                key, val = (t.strip() for t in s.split("=", 1))
                raw[key] = val
        return cls.from_mapping(raw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            key = "lambda" if f.name == "lam" else f.name
            lines.append(f"{key}={','.join(map(str, v)) if isinstance(v, list) else v}")
        return "\n".join(lines) + "\n"

    def manifold(self) -> ProductManifold:
        return ProductManifold.build(self.d0, self.dims, self.signs)


# ---------------------------------------------------------------- state

@dataclass
class ClusterState:
    """Centroid blocks ``[free, restricted_1, ...]`` and the membership matrix."""

    centroids: list
    membership: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return L.hard_labels(self.membership)


def init_centroids(p: ProductManifold, z_blocks: list, k: int, rng: np.random.Generator,
                   method: str = "spread") -> list:
    """``k`` distinct node embeddings, drawn without replacement.

    ``method="uniform"`` draws uniformly.  ``method="spread"`` draws the first
    node uniformly and each further node with probability proportional to
    its squared product distance from the nearest node already drawn
    (k-means++ seeding), which makes duplicate picks from one dense region
    unlikely.  ``method="farthest"`` draws the first node uniformly and then
    greedily takes the node farthest from every node already drawn.
    """
    z_blocks = [np.asarray(ad.value(b)) for b in z_blocks]
    n = z_blocks[0].shape[0]
    if k > n:
        raise ValueError(f"cannot draw {k} centroids from {n} nodes")
    if method == "uniform":
        idx = rng.choice(n, size=k, replace=False)
    elif method in ("spread", "farthest"):
        idx = [int(rng.integers(n))]
        nearest = np.full(n, np.inf)
        for _ in range(k - 1):
            d = np.asarray(pairwise_product_distance(p, z_blocks, [b[idx[-1:]] for b in z_blocks]))[:, 0]
            nearest = np.minimum(nearest, d * d)
            nearest[idx] = 0.0
            total = nearest.sum()
            if method == "farthest" and total > 0:
                idx.append(int(np.argmax(nearest)))
            elif total > 0:
                idx.append(int(rng.choice(n, p=nearest / total)))
            else:
                rest = np.setdiff1d(np.arange(n), idx)
                idx.append(int(rng.choice(rest)))
        idx = np.array(idx)
    else:
        raise ValueError(f"unknown centroid initialisation {method!r}")
    return [b[idx].copy() for b in z_blocks]


def init_model(g: Graph, p: ProductManifold, cfg: TrainConfig) -> dict:
    """All trainable parameters for a fresh run, seeded by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params = init_params(p, g.features.shape[1], rng, cfg.mlp_hidden)
    params["S"] = ad.Tensor(cfg.critic_scale * glorot(rng, cfg.d0, cfg.d0), True, "S")
    for m, f in enumerate(p.restricted):
        params[f"view/{m}"] = ad.Tensor(glorot(rng, cfg.d0 - 1, f.dim), True, f"view/{m}")
    z = encode(g, bind_manifold(p, _values(params)), _values(params))
    cents = init_centroids(bind_manifold(p, _values(params)), z.blocks, cfg.k, rng, cfg.centroid_init)
    params["cent/free"] = ad.Tensor(cents[0], True, "cent/free")
    for m in range(p.num_restricted):
        params[f"cent/{m}"] = ad.Tensor(cents[m + 1], True, f"cent/{m}")
    return params


def _values(params: dict) -> dict:
    return {k: v.value if isinstance(v, ad.Tensor) else v for k, v in params.items()}


def centroid_blocks(params: dict, m_factors: int) -> list:
    return [params["cent/free"]] + [params[f"cent/{m}"] for m in range(m_factors)]


@dataclass
class Forward:
    J: object
    components: dict
    membership: object
    embeddings: object


def forward(g: Graph, nb: Neighborhoods, p: ProductManifold, params: dict, table: RicciTable,
            cfg: TrainConfig) -> Forward:
    """Evaluate the objective at ``params`` (tensors are traced, arrays are not)."""
    q = bind_manifold(p, params)
    z = encode(g, q, params, nb)
    cents = centroid_blocks(params, p.num_restricted)
    pi = L.soft_assign(q, z.blocks, cents)
    l_ric = L.ricci_loss(table.edges, table.edge_values, pi, cfg.alpha0)
    est = estimate_node_curvature(params, z.free, q.curvatures())
    l_curv = L.curvature_loss(table.node_values, est)
    views = [params[f"view/{m}"] for m in range(p.num_restricted)]
    l_rgc = L.rgc_loss(q, z.blocks, cents, pi, params["S"], views, cfg.beta, cfg.reweight_grad)
    comps = {"L_ric": l_ric, "L_curv": l_curv, "L_rgc": l_rgc}
    J = L.total_loss(l_ric, l_curv, l_rgc, cfg.alpha1, cfg.alpha2)
    return Forward(J, comps, pi, z)


class Adam:
    """Adam moments over a parameter dict, with bias correction."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.value) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            step = self.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
            p.value = p.value - step


def retract_centroids(p: ProductManifold, params: dict) -> None:
    """Project restricted centroid blocks onto their factor at the current curvature."""
    q = bind_manifold(p, _values(params))
    for m, f in enumerate(q.restricted):
        t = params[f"cent/{m}"]
        t.value = np.array(project_to_factor(f, t.value))


def evaluate(fw: Forward, g: Graph) -> dict:
    """Loss components and (when labels exist) NMI/ARI/ACC plus curve statistics."""
    row = {"J": float(ad.value(fw.J))}
    row.update({k: float(ad.value(v)) for k, v in fw.components.items()})
    labels = L.hard_labels(fw.membership)
    row["density"] = cluster_density(g, labels)
    if g.labels is not None:
        row.update(score(labels, g.labels))
        row["entropy"] = cluster_entropy(labels, g.labels)
    else:
        row.update(nmi=math.nan, ari=math.nan, acc=math.nan, entropy=math.nan)
    return row


@dataclass
class TrainResult:
    params: dict
    state: ClusterState
    history: list
    manifold: ProductManifold

    @property
    def final(self) -> dict:
        return self.history[-1]


NUMERIC_FAILURES = (FloatingPointError, ad.NumericDomainError, ConstraintError, LogSingularityError)


def train(g: Graph, table: RicciTable, cfg: TrainConfig, params: dict | None = None,
          metrics_path=None, curves_path=None, callback=None) -> TrainResult:
    """Run ``cfg.epochs`` optimizer updates.

    ``history[e]`` describes the model after ``e`` updates, so ``history[0]``
    is the initial state.  Deterministic for a fixed configuration.
    """
    if table.graph_hash and table.graph_hash != g.content_hash():
        raise ValueError("curvature table was computed for a different graph")
    p = cfg.manifold()
    nb = neighborhoods(g)
    params = init_model(g, p, cfg) if params is None else params
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history: list[dict] = []
    last_good = {k: v.value.copy() for k, v in params.items()}
    fw = None
    for epoch in range(cfg.epochs + 1):
        training = epoch < cfg.epochs
        try:
            with ad.Tape() as tape:
                fw = forward(g, nb, p, params, table, cfg)
                if training:
                    grads = tape.backward(fw.J, list(params.values()))
        except NUMERIC_FAILURES as exc:
            raise TrainingDiverged(epoch, str(exc), last_good, history) from exc
        row = {"epoch": epoch, **evaluate(fw, g)}
        history.append(row)
        if callback is not None:
            callback(row)
        log.debug("epoch %d J=%.6g nmi=%.4f", epoch, row["J"], row["nmi"])
        last_good = {k: v.value.copy() for k, v in params.items()}
        if not training:
            break
        bad = [k for k, gr in zip(params, grads) if not np.all(np.isfinite(gr))]
        if bad:
            raise TrainingDiverged(epoch, f"non-finite gradient for {bad[0]}", last_good, history)
        opt.step(params, dict(zip(params, grads)))
        try:
            retract_centroids(p, params)
        except NUMERIC_FAILURES as exc:
            raise TrainingDiverged(epoch, str(exc), last_good, history) from exc
    if metrics_path is not None:
        write_metrics(history, metrics_path)
    if curves_path is not None:
        write_curves(history, curves_path)
    state = ClusterState([np.array(ad.value(c)) for c in centroid_blocks(params, p.num_restricted)],
                         np.array(ad.value(fw.membership)))
    return TrainResult(params, state, history, bind_manifold(p, _values(params)))


def predict(g: Graph, table: RicciTable, cfg: TrainConfig, params: dict) -> tuple[dict, np.ndarray]:
    """Metrics row and membership for fixed parameters, without training."""
    p = cfg.manifold()
    fw = forward(g, neighborhoods(g), p, _values(params), table, cfg)
    return evaluate(fw, g), np.array(ad.value(fw.membership))


# ---------------------------------------------------------------- output

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in history:
            w.writerow([_fmt(row[k]) for k in METRIC_FIELDS])


def write_curves(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for row in history:
            w.writerow([_fmt(row[k]) for k in CURVE_FIELDS])


def save_checkpoint(path, params: dict, cfg: TrainConfig) -> None:
    """Versioned ``.npz`` holding every parameter, the config and the manifold signature."""
    arrays = {f"param:{k}": np.asarray(ad.value(v)) for k, v in params.items()}
    meta = {"version": CHECKPOINT_VERSION, "signature": cfg.manifold().signature(),
            "k": cfg.k, "order": list(params), "config": cfg.to_text()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path, cfg: TrainConfig | None = None) -> tuple[dict, TrainConfig]:
    """Parameters (as tensors) and the stored config.

    With ``cfg`` given, its manifold signature and ``k`` must match the file.
    """
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            params = {k: ad.Tensor(z[f"param:{k}"], True, k) for k in meta["order"]}
    except (OSError, ValueError, KeyError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    except Exception as exc:  # zipfile.BadZipFile and friends
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    stored = TrainConfig.from_mapping(dict(
        line.split("=", 1) for line in meta["config"].splitlines() if line))
    if cfg is not None:
        if cfg.manifold().signature() != meta["signature"] or cfg.k != meta["k"]:
            raise CheckpointError(
                f"checkpoint signature {meta['signature']} (k={meta['k']}) does not match "
                f"{cfg.manifold().signature()} (k={cfg.k})")
    return params, stored

