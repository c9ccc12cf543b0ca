import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluematch.errors import DatasetTooSmall, DimensionMismatch, NonFiniteLoss
from fluematch.neural import (Adam, Adamax, Mlp, MlpSpec, SearchSpace, TrainConfig, hyperparameter_search,
                              ledger_csv, train, write_ledger)


def data(rng, n=40, d_in=6, d_out=3):
    X = rng.normal(size=(n, d_in))
    W = rng.normal(size=(d_in, d_out))
    return X, np.tanh(X @ W / 3)


def fd_check(net, X, Y, rng, n_coords=100, h=1e-5):
    """Worst elementwise relative error between analytic and central-difference gradients."""
    _, grads = net.loss_and_gradients(X, Y)
    flat_grads = [g for pair in grads for g in pair]
    params = net.parameters()
    worst = 0.0
    for _ in range(n_coords):
        k = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(s)) for s in params[k].shape)
        old = params[k][idx]
        params[k][idx] = old + h
        up = net.mse(X, Y)
        params[k][idx] = old - h
        down = net.mse(X, Y)
        params[k][idx] = old
        num = (up - down) / (2 * h)
        ana = flat_grads[k][idx]
        worst = max(worst, abs(num - ana) / max(abs(num) + abs(ana), 1e-8))
    return worst


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(4, 2, (0,))
    with pytest.raises(ValueError):
        MlpSpec(4, 2, (8,), activation="sigmoid")
    with pytest.raises(ValueError):
        MlpSpec(4, 2, (8,), dropout_rate=0.6)
    assert MlpSpec(4, 2, (32, 64)).in_search_space()
    assert not MlpSpec(4, 2, (33, 64)).in_search_space()
    assert not MlpSpec(4, 2, (32,)).in_search_space()
    with pytest.raises(ValueError):
        TrainConfig(patience=4000, max_epochs=4000)
    with pytest.raises(ValueError):
        TrainConfig(validation_split=1.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_zero_network_outputs_zero(rng):
    net = Mlp.zeros(MlpSpec(5, 3, (8, 8)))
    assert np.all(net.predict(rng.normal(size=(4, 5))) == 0.0)


def test_identity_networks(rng):
    x = rng.uniform(0, 2, size=(5, 4))
    lin = Mlp(MlpSpec(4, 4, ()), [np.eye(4)], [np.zeros(4)])
    assert np.array_equal(lin.predict(x), x)
    relu = Mlp(MlpSpec(4, 4, (4,), "relu"), [np.eye(4), np.eye(4)], [np.zeros(4), np.zeros(4)])
    assert np.array_equal(relu.predict(x), x)


def test_forward_deterministic_and_dropout(rng):
    net = Mlp.init(MlpSpec(6, 3, (16, 16), "relu", dropout_rate=0.5), seed=3)
    x = rng.normal(size=(2, 6))
    assert np.array_equal(net.predict(x), net.predict(x))
    a = net.forward(x, training=True, rng=np.random.default_rng(0))
    b = net.forward(x, training=True, rng=np.random.default_rng(1))
    assert not np.array_equal(a, b)
    with pytest.raises(DimensionMismatch):
        net.predict(np.zeros((1, 5)))


def test_inverted_dropout_keeps_expectation():
    net = Mlp(MlpSpec(1, 1, (2000,), "relu", dropout_rate=0.4),
              [np.ones((1, 2000)), np.full((2000, 1), 1 / 2000)], [np.zeros(2000), np.zeros(1)])
    x = np.ones((1, 1))
    r = np.random.default_rng(0)
    runs = [net.forward(x, training=True, rng=r)[0, 0] for _ in range(200)]
    assert np.mean(runs) == pytest.approx(net.predict(x)[0, 0], rel=0.01)


def test_perfect_prediction_zero_gradients(rng):
    net = Mlp.init(MlpSpec(4, 2, (8,)), seed=0)
    X = rng.normal(size=(5, 4))
    mse, grads = net.loss_and_gradients(X, net.predict(X))
    assert mse == 0.0
    assert all(not np.any(gw) and not np.any(gb) for gw, gb in grads)
    assert [g.shape for pair in grads for g in pair] == [p.shape for p in net.parameters()]


def test_duplicated_rows_leave_loss_and_gradients(rng):
    net = Mlp.init(MlpSpec(4, 2, (8, 8), "tanh"), seed=1)
    X, Y = data(rng, 7, 4, 2)
    m1, g1 = net.loss_and_gradients(X, Y)
    m2, g2 = net.loss_and_gradients(np.vstack([X, X]), np.vstack([Y, Y]))
    assert m1 == pytest.approx(m2, rel=1e-12)
    for (a, b), (c, d) in zip(g1, g2):
        assert np.allclose(a, c, rtol=1e-10, atol=1e-14) and np.allclose(b, d, rtol=1e-10, atol=1e-14)


def test_loss_errors(rng):
    net = Mlp.init(MlpSpec(4, 2, (8,)), seed=0)
    with pytest.raises(DimensionMismatch):
        net.loss_and_gradients(np.zeros((0, 4)), np.zeros((0, 2)))
    with pytest.raises(DimensionMismatch):
        net.loss_and_gradients(np.zeros((3, 4)), np.zeros((3, 3)))
    with pytest.raises(NonFiniteLoss):
        net.loss_and_gradients(np.full((2, 4), np.nan), np.zeros((2, 2)))


@pytest.mark.parametrize("activation", ["tanh", "relu"])
@pytest.mark.parametrize("layers", [(12, 10), (12, 10, 8), (12, 10, 8, 6)])
def test_gradient_check(activation, layers):
    r = np.random.default_rng(len(layers))
    net = Mlp.init(MlpSpec(5, 3, layers, activation), seed=2)
    for b in net.biases:
        b[:] = r.normal(0, 0.1, b.shape)
    X, Y = data(r, 9, 5, 3)
    assert fd_check(net, X, Y, r) < 1e-4


def test_train_too_small(rng):
    X, Y = data(rng, 8)
    with pytest.raises(DatasetTooSmall):
        train(Mlp.init(MlpSpec(6, 3, (8,))), X, Y)


def test_train_reproducible_and_best_epoch(rng):
    X, Y = data(rng, 60)
    cfg = TrainConfig("adam", 1e-2, batch_size=16, max_epochs=300, patience=20, seed=5)
    spec = MlpSpec(6, 3, (32, 32), "tanh", dropout_rate=0.1)
    a = train(Mlp.init(spec, 5), X, Y, cfg)
    b = train(Mlp.init(spec, 5), X, Y, cfg)
    assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert a.history == b.history
    va = a.val_indices
    assert len(va) == 6
    val = a.mse(X[va], Y[va])
    assert val == pytest.approx(min(h[2] for h in a.history), rel=1e-12)
    assert val <= a.history[-1][2]
    assert len(a.history) < 300 or a.best_epoch > 280


def test_sgd_momentum_monotone_window(rng):
    X, Y = data(rng, 50)
    cfg = TrainConfig("sgd_momentum", 1e-2, momentum_max=0.8, batch_size=50, max_epochs=50, patience=49, seed=0)
    net = train(Mlp.init(MlpSpec(6, 3, (64, 64), "tanh"), 0), X, Y, cfg)
    tr = [h[1] for h in net.history]
    assert len(tr) == 50
    assert all(b < a for a, b in zip(tr, tr[1:]))


@pytest.mark.parametrize("cls", [Adam, Adamax])
def test_adaptive_moments_stay_finite(cls, rng):
    net = Mlp.init(MlpSpec(6, 3, (16,)), 0)
    params = net.parameters()
    opt = cls(params, TrainConfig(cls.__name__.lower(), 1e-3))
    for scale in (1e-30, 1.0, 1e30):
        X, Y = data(rng, 10)
        _, grads = net.loss_and_gradients(X, Y * scale if scale < 1e20 else Y)
        flat = [g * scale for pair in grads for g in pair]
        opt.step(params, flat)
    moments = [m for m in getattr(opt, "m")] + [v for v in (getattr(opt, "v", None) or getattr(opt, "u"))]
    assert all(np.all(np.isfinite(m)) for m in moments)
    assert all(np.all(np.isfinite(p)) for p in params)


def test_save_load_and_json(tmp_path, rng):
    X, Y = data(rng, 30)
    net = train(Mlp.init(MlpSpec(6, 3, (8, 4), "relu", 0.2), 1), X, Y,
                TrainConfig(max_epochs=5, patience=2))
    net.save(tmp_path / "m.npz")
    back = Mlp.load(tmp_path / "m.npz")
    assert back.spec == net.spec and back.history == net.history
    assert np.array_equal(back.predict(X), net.predict(X))
    again = Mlp.from_json(net.to_json())
    assert np.array_equal(again.predict(X), net.predict(X))
    rows = list(csv.reader(io.StringIO(net.history_csv())))
    assert rows[0] == ["epoch", "train_mse", "val_mse"] and len(rows) == len(net.history) + 1


def test_load_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", header=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError):
        Mlp.load(tmp_path / "x.npz")


SMALL = SearchSpace(n_layers=(1, 2), size_exponents=(3, 4), lr_exponents=(-3, -2),
                    batch_size=(8, 16), max_epochs=20, patience=5)


def test_search_single_trial(rng):
    X, Y = data(rng, 30)
    trials = hyperparameter_search(SMALL, X, Y, 1, seed=0)
    assert len(trials) == 1 and trials[0].rank == 1 and trials[0].model is not None


def test_search_sorted_and_reproducible(rng, tmp_path):
    X, Y = data(rng, 30)
    a = hyperparameter_search(SMALL, X, Y, 5, seed=3)
    b = hyperparameter_search(SMALL, X, Y, 5, seed=3, workers=2)
    maes = [t.val_mae for t in a]
    assert maes == sorted(maes)
    assert [t.rank for t in a] == [1, 2, 3, 4, 5]
    assert ledger_csv(a) == ledger_csv(b)
    write_ledger(tmp_path / "l.csv", a)
    rows = list(csv.DictReader(open(tmp_path / "l.csv")))
    assert [float(r["val_mae"]) for r in rows] == maes


def test_search_records_failed_trials(rng):
    X, Y = data(rng, 30)
    wild = SearchSpace(n_layers=(2, 2), size_exponents=(5, 5), optimizers=("sgd_momentum",),
                       lr_exponents=(4, 4), batch_size=(10, 10), max_epochs=30, patience=5)
    with np.errstate(all="ignore"):
        trials = hyperparameter_search(wild, X, Y, 2, seed=0)
    failed = [t for t in trials if t.error]
    assert failed and all(t.val_mae == np.inf and t.model is None for t in failed)
    assert trials[-1].error
    assert "NonFiniteLoss" in ledger_csv(trials)


@given(st.integers(0, 2 ** 32 - 1))
def test_search_space_samples_in_range(seed):
    spec, cfg = SearchSpace().sample(np.random.default_rng(seed), 10, 27, seed)
    assert spec.in_search_space()
    assert cfg.optimizer in ("sgd_momentum", "adam", "adamax")
    assert -8 <= np.log10(cfg.learning_rate) <= -2
    assert cfg.momentum_max in (0.8, 0.9)
    assert 10 <= cfg.batch_size <= 2000
    assert (cfg.max_epochs, cfg.patience, cfg.validation_split) == (4000, 400, 0.10)
