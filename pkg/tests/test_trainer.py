import numpy as np
import pytest

from curvclust import autodiff as ad
from curvclust.encoder import encode, bind_manifold
from curvclust.graph import stochastic_block_model
from curvclust.manifold import constraint_violation
from curvclust.ricci import compute_ricci_table
from curvclust.trainer import (
    METRIC_FIELDS,
    Adam,
    CheckpointError,
    ConfigError,
    TrainConfig,
    init_centroids,
    init_model,
    load_checkpoint,
    predict,
    retract_centroids,
    save_checkpoint,
    train,
    write_metrics,
)

from conftest import gradient_problem, worst_gradient_error

SMALL = dict(k=3, m_factors=2, dims=[3, 2], signs=[-1, 1], d0=4)


@pytest.fixture(scope="module")
def tiny():
    g = stochastic_block_model([6, 6, 6], 0.6, 0.05, feature_dim=4, feature_shift=0.9,
                               feature_noise=0.3, seed=4)
    return g, compute_ricci_table(g)


def config_text(**over):
    cfg = TrainConfig(**{**SMALL, **over})
    return cfg.to_text()


def test_config_roundtrip(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n" + config_text(epochs=7, lr=0.002))
    cfg = TrainConfig.load(path)
    assert cfg.epochs == 7 and cfg.lr == 0.002 and cfg.dims == [3, 2] and cfg.signs == [-1, 1]


def test_config_missing_key_is_named(tmp_path):
    text = "\n".join(line for line in config_text().splitlines() if not line.startswith("beta2"))
    path = tmp_path / "c.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError) as info:
        TrainConfig.load(path)
    assert info.value.key == "beta2"


@pytest.mark.parametrize("bad", [{"k": 0}, {"dims": [3]}, {"signs": [1, 0]}, {"lam": 1.0},
                                 {"beta": 0}, {"lr": -1.0}, {"centroid_init": "nope"}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**{**SMALL, **bad})


def test_config_parse_errors():
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"k": "three"}, require_all=False)
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"colour": "red"}, require_all=False)


def test_init_centroids(tiny):
    g, _ = tiny
    cfg = TrainConfig(**SMALL)
    p = cfg.manifold()
    params = init_model(g, p, cfg)
    z = encode(g, bind_manifold(p, params), {k: v.value for k, v in params.items()}).numpy()
    n = g.num_nodes
    for method in ("uniform", "spread", "farthest"):
        c = init_centroids(p, z.blocks, n, np.random.default_rng(0), method)
        rows = sorted(map(tuple, np.round(c[0], 12)))
        assert rows == sorted(map(tuple, np.round(z.blocks[0], 12)))
        for f, block in zip(p.restricted, c[1:]):
            assert constraint_violation(f, block).max() <= 1e-6
    a = init_centroids(p, z.blocks, 3, np.random.default_rng(0), "uniform")
    b = init_centroids(p, z.blocks, 3, np.random.default_rng(1), "uniform")
    assert not np.array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        init_centroids(p, z.blocks, n + 1, np.random.default_rng(0))


def test_zero_learning_rate_freezes_everything(tiny):
    g, table = tiny
    cfg = TrainConfig(**SMALL, lr=0.0, epochs=3)
    params = init_model(g, cfg.manifold(), cfg)
    start = {k: v.value.copy() for k, v in params.items()}
    result = train(g, table, cfg, params=params)
    for k, v in result.params.items():
        np.testing.assert_allclose(v.value, start[k], atol=1e-15)
    js = [row["J"] for row in result.history]
    assert len(js) == 4 and max(js) - min(js) < 1e-12


def test_training_is_deterministic(tiny, tmp_path):
    g, table = tiny
    cfg = TrainConfig(**SMALL, epochs=4)
    train(g, table, cfg, metrics_path=tmp_path / "a.csv")
    train(g, table, cfg, metrics_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == ",".join(METRIC_FIELDS)


def test_history_invariants(tiny):
    g, table = tiny
    result = train(g, table, TrainConfig(**SMALL, epochs=3, lr=0.01))
    assert [row["epoch"] for row in result.history] == [0, 1, 2, 3]
    np.testing.assert_allclose(result.state.membership.sum(axis=1), 1.0, atol=1e-9)
    for f, block in zip(result.manifold.restricted, result.state.centroids[1:]):
        assert constraint_violation(f, block).max() <= 1e-9


def test_retraction_after_each_step(tiny):
    g, table = tiny
    cfg = TrainConfig(**SMALL, epochs=5, lr=0.05)
    seen = []

    def check(row):
        seen.append(row["epoch"])
    result = train(g, table, cfg, callback=check)
    assert seen == list(range(6))
    params = result.params
    params["cent/0"].value = params["cent/0"].value * 1.3
    retract_centroids(cfg.manifold(), params)
    f = bind_manifold(cfg.manifold(), {k: v.value for k, v in params.items()}).restricted[0]
    assert constraint_violation(f, params["cent/0"].value).max() <= 1e-9


def test_adam_first_step_is_lr_times_sign():
    t = ad.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam({"x": t}, lr=0.1)
    opt.step({"x": t}, {"x": np.array([5.0, -0.01, 0.0])})
    np.testing.assert_allclose(t.value, [0.9, -1.9, 3.0], atol=1e-6)


def test_graph_mismatch_rejected(tiny):
    g, _ = tiny
    other = compute_ricci_table(stochastic_block_model([5, 5], 0.5, 0.1, feature_dim=4, seed=9))
    with pytest.raises(ValueError):
        train(g, other, TrainConfig(**SMALL, epochs=0))


def test_checkpoint_roundtrip_and_predict(tiny, tmp_path):
    g, table = tiny
    cfg = TrainConfig(**SMALL, epochs=3)
    result = train(g, table, cfg)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, result.params, cfg)
    params, stored = load_checkpoint(path, cfg)
    assert stored.to_text() == cfg.to_text()
    row, membership = predict(g, table, stored, params)
    np.testing.assert_array_equal(membership, result.state.membership)
    assert row["J"] == result.final["J"]


def test_checkpoint_mismatch_and_corruption(tiny, tmp_path):
    g, table = tiny
    cfg = TrainConfig(**SMALL, epochs=0)
    result = train(g, table, cfg)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, result.params, cfg)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, TrainConfig(**{**SMALL, "dims": [3, 3]}))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, TrainConfig(**{**SMALL, "k": 2}))
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")


def test_metrics_writer_uses_full_precision(tmp_path):
    row = {"epoch": 0, "J": 1 / 3, "L_ric": 0.1, "L_curv": 0.2, "L_rgc": 0.3, "nmi": float("nan"),
           "ari": 0.5, "acc": 1.0}
    write_metrics([row], tmp_path / "m.csv")
    line = (tmp_path / "m.csv").read_text().splitlines()[1]
    assert line.startswith("0,0.3333333333333333,")
    assert ",nan," in line


def test_gradients_of_every_piece_match_finite_differences():
    g, table, cfg, params = gradient_problem(n=8)
    worst = worst_gradient_error(g, table, cfg, params, max_entries=4)
    assert len(worst) == 2 + 4 * 2 + 1
    assert max(worst.values()) <= 1.0, worst
