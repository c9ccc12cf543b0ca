"""Fully-connected regression networks from features to normalized parameters.

Plain numpy, float64 throughout. Hidden layers use tanh or ReLU with optional
inverted dropout; the output layer is linear. Inputs are standardized with a
per-feature mean/std stored in the model.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DatasetTooSmall, DimensionMismatch, NonFiniteLoss
from .tone import atomic_write_bytes, atomic_write_text

log = logging.getLogger(__name__)

FORMAT = "fluematch-mlp"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    layer_sizes: tuple = (256, 256)
    activation: str = "tanh"
    dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if self.input_dim < 1 or self.output_dim < 1 or any(s < 1 for s in self.layer_sizes):
            raise ValueError("all layer sizes must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ValueError("activation must be 'tanh' or 'relu'")
        if not 0.0 <= self.dropout_rate <= 0.5:
            raise ValueError("dropout_rate must be in [0, 0.5]")

    def in_search_space(self):
        """True when the layout is inside the explored grid: 2-12 hidden layers of 2^5..2^12 units."""
        ok_sizes = all(s in {2 ** i for i in range(5, 13)} for s in self.layer_sizes)
        return 2 <= len(self.layer_sizes) <= 12 and ok_sizes

    @property
    def dims(self):
        return (self.input_dim, *self.layer_sizes, self.output_dim)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum_max: float = 0.9
    batch_size: int = 32
    max_epochs: int = 4000
    patience: int = 400
    validation_split: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd_momentum", "adam", "adamax"):
            raise ValueError("optimizer must be sgd_momentum, adam or adamax")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.validation_split < 1:
            raise ValueError("validation_split must be in (0, 1)")
        if not self.patience < self.max_epochs:
            raise ValueError("patience must be < max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def replace(self, **kw):
        return replace(self, **kw)


class Mlp:
    def __init__(self, spec, weights, biases, x_mean=None, x_std=None):
        self.spec = spec
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.x_mean = np.zeros(spec.input_dim) if x_mean is None else np.asarray(x_mean, float)
        self.x_std = np.ones(spec.input_dim) if x_std is None else np.asarray(x_std, float)
        self.history = []  # (epoch, train_mse, val_mse)
        dims = spec.dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise DimensionMismatch("layer count does not match spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise DimensionMismatch(f"layer {i}: got {w.shape}/{b.shape}, expected {(dims[i], dims[i + 1])}")

    @classmethod
    def init(cls, spec, seed=0):
        """Glorot-uniform weights (x sqrt(2) for ReLU), zero biases."""
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        dims = spec.dims
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            if spec.activation == "relu" and i < len(dims) - 2:
                limit *= math.sqrt(2.0)
            ws.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(spec, ws, bs)

    @classmethod
    def zeros(cls, spec):
        dims = spec.dims
        return cls(spec, [np.zeros((dims[i], dims[i + 1])) for i in range(len(dims) - 1)],
                   [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)])

    # -- parameters as a flat list ---------------------------------------------

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        m = Mlp(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                self.x_mean.copy(), self.x_std.copy())
        m.history = list(self.history)
        return m

    def set_input_scaling(self, X):
        X = np.asarray(X, float)
        self.x_mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.x_std = np.where(std > 1e-12, std, 1.0)

    # -- passes ----------------------------------------------------------------

    def _act(self, z):
        return np.tanh(z) if self.spec.activation == "tanh" else np.maximum(z, 0.0)

    def _act_grad(self, z, a):
        return 1.0 - a * a if self.spec.activation == "tanh" else (z > 0).astype(float)

    def _check_input(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.spec.input_dim:
            raise DimensionMismatch(f"input has {X.shape[1]} features, network expects {self.spec.input_dim}")
        return X

    def forward(self, X, training=False, rng=None, cache=False):
        """Network output for a batch (or a single vector).

        Dropout is active only with ``training=True`` (inverted: kept units are
        scaled by 1/(1-p), so inference needs no rescaling).
        """
        single = np.ndim(X) == 1
        X = self._check_input(X)
        a = (X - self.x_mean) / self.x_std
        p = self.spec.dropout_rate
        store = [(None, a, None)]
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            if i == n_layers - 1:
                a = z
                mask = None
            else:
                a = self._act(z)
                mask = None
                if training and p > 0:
                    if rng is None:
                        raise ValueError("dropout needs an rng")
                    mask = (rng.random(a.shape) >= p) / (1.0 - p)
                    store.append((z, a, mask))
                    a = a * mask
                    continue
            store.append((z, a, mask))
        out = a[0] if single else a
        return (out, store) if cache else out

    def predict(self, X):
        return self.forward(X, training=False)

    def loss_and_gradients(self, X, Y, training=False, rng=None):
        """MSE over batch and outputs, and its gradients as [(dW, db), ...]."""
        Y = np.asarray(Y, dtype=float)
        X = self._check_input(X)
        if Y.ndim == 1:
            Y = Y[None, :]
        if X.shape[0] == 0:
            raise DimensionMismatch("empty batch")
        if Y.shape != (X.shape[0], self.spec.output_dim):
            raise DimensionMismatch(f"targets shape {Y.shape}, expected {(X.shape[0], self.spec.output_dim)}")
        out, store = self.forward(X, training=training, rng=rng, cache=True)
        err = out - Y
        mse = float(np.mean(err * err))
        if not math.isfinite(mse):
            raise NonFiniteLoss()
        delta = 2.0 * err / err.size
        grads = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            a_prev = store[i][1]
            if store[i][2] is not None:
                a_prev = a_prev * store[i][2]
            grads[i] = (a_prev.T @ delta, delta.sum(axis=0))
            if i > 0:
                z, a, mask = store[i]
                da = delta @ self.weights[i].T
                if mask is not None:
                    da = da * mask
                delta = da * self._act_grad(z, a)
        return mse, grads

    def mse(self, X, Y):
        err = self.predict(X) - np.asarray(Y, float)
        return float(np.mean(err * err))

    def mae(self, X, Y):
        return float(np.mean(np.abs(self.predict(X) - np.asarray(Y, float))))

    # -- persistence -------------------------------------------------------------

    def header(self):
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "spec": {**asdict(self.spec), "layer_sizes": list(self.spec.layer_sizes)},
        }

    def save(self, path):
        """Versioned binary form: npz with a JSON header and the weight arrays."""
        arrays = {"header": np.frombuffer(json.dumps(self.header()).encode(), dtype=np.uint8),
                  "x_mean": self.x_mean, "x_std": self.x_std,
                  "history": np.array(self.history, dtype=float).reshape(-1, 3)}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W{i}"] = w
            arrays[f"b{i}"] = b
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            header = json.loads(z["header"].tobytes().decode())
            if header.get("format") != FORMAT:
                raise ValueError(f"{path}: not a {FORMAT} file")
            if header.get("version") != FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported version {header.get('version')}")
            spec = MlpSpec(**header["spec"])
            n = len(spec.dims) - 1
            m = cls(spec, [z[f"W{i}"] for i in range(n)], [z[f"b{i}"] for i in range(n)],
                    z["x_mean"], z["x_std"])
            m.history = [tuple(r) for r in z["history"].tolist()]
        return m

    def to_json(self):
        return json.dumps({**self.header(),
                           "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                           "weights": [w.tolist() for w in self.weights],
                           "biases": [b.tolist() for b in self.biases]})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(MlpSpec(**d["spec"]), d["weights"], d["biases"], d["x_mean"], d["x_std"])

    def history_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["epoch", "train_mse", "val_mse"])
        for e, tr, va in self.history:
            w.writerow([int(e), repr(tr), repr(va)])
        return buf.getvalue()


# -- optimizers ------------------------------------------------------------------

class _Optimizer:
    def __init__(self, params, cfg):
        self.lr = cfg.learning_rate
        self.t = 0


class SgdMomentum(_Optimizer):
    def __init__(self, params, cfg):
        super().__init__(params, cfg)
        self.mu = cfg.momentum_max
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        for p, g, v in zip(params, grads, self.v):
            v *= self.mu
            v -= self.lr * g
            p += v


class Adam(_Optimizer):
    b1, b2, eps = 0.9, 0.999, 1e-8

    def __init__(self, params, cfg):
        super().__init__(params, cfg)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Adamax(_Optimizer):
    b1, b2, eps = 0.9, 0.999, 1e-8

    def __init__(self, params, cfg):
        super().__init__(params, cfg)
        self.m = [np.zeros_like(p) for p in params]
        self.u = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        for p, g, m, u in zip(params, grads, self.m, self.u):
            m *= self.b1
            m += (1 - self.b1) * g
            np.maximum(self.b2 * u, np.abs(g), out=u)
            p -= (self.lr / c1) * m / (u + self.eps)


OPTIMIZERS = {"sgd_momentum": SgdMomentum, "adam": Adam, "adamax": Adamax}


def split_indices(n, fraction, rng):
    perm = rng.permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return perm[n_val:], perm[:n_val]


def train(mlp, X, Y, cfg=TrainConfig(), log_every=0):
    """Minibatch training with early stopping on the validation split.

    Returns a copy holding the parameters of the best-validation epoch, with
    ``history`` filled in. Deterministic for a given ``cfg.seed``.
    """
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    if X.shape[0] < 10:
        raise DatasetTooSmall(f"need at least 10 items, got {X.shape[0]}")
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch("features and targets differ in length")
    rng = np.random.default_rng(cfg.seed)
    tr_idx, va_idx = split_indices(X.shape[0], cfg.validation_split, rng)
    Xtr, Ytr, Xva, Yva = X[tr_idx], Y[tr_idx], X[va_idx], Y[va_idx]

    net = mlp.copy()
    net.set_input_scaling(Xtr)
    net.history = []
    params = net.parameters()
    opt = OPTIMIZERS[cfg.optimizer](params, cfg)
    best = (math.inf, None, 0)
    n = Xtr.shape[0]
    bs = min(cfg.batch_size, n)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            b = perm[start:start + bs]
            try:
                _, grads = net.loss_and_gradients(Xtr[b], Ytr[b], training=True, rng=rng)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(epoch) from exc
            flat = [g for pair in grads for g in pair]
            opt.step(params, flat)
        tr_mse = net.mse(Xtr, Ytr)
        va_mse = net.mse(Xva, Yva)
        if not (math.isfinite(tr_mse) and math.isfinite(va_mse)):
            raise NonFiniteLoss(epoch)
        net.history.append((epoch, tr_mse, va_mse))
        if log_every and epoch % log_every == 0:
            log.info("epoch %d train %.3g val %.3g", epoch, tr_mse, va_mse)
        if va_mse < best[0]:
            best = (va_mse, [p.copy() for p in params], epoch)
        elif epoch - best[2] >= cfg.patience:
            break
    for p, saved in zip(params, best[1]):
        p[...] = saved
    net.best_epoch = best[2]
    net.val_indices = va_idx
    return net


# -- random hyperparameter search --------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    """Ranges sampled by hyperparameter_search (defaults: the full explored grid)."""

    n_layers: tuple = (2, 12)
    size_exponents: tuple = (5, 12)
    activations: tuple = ("tanh", "relu")
    dropout: tuple = (0.0, 0.5)
    optimizers: tuple = ("sgd_momentum", "adam", "adamax")
    lr_exponents: tuple = (-8, -2)
    momentum_max: tuple = (0.8, 0.9)
    batch_size: tuple = (10, 2000)
    max_epochs: int = 4000
    patience: int = 400
    validation_split: float = 0.10

    def sample(self, rng, input_dim, output_dim, seed):
        n_layers = int(rng.integers(self.n_layers[0], self.n_layers[1] + 1))
        sizes = tuple(int(2 ** rng.integers(self.size_exponents[0], self.size_exponents[1] + 1))
                      for _ in range(n_layers))
        spec = MlpSpec(input_dim, output_dim, sizes,
                       activation=str(rng.choice(list(self.activations))),
                       dropout_rate=float(rng.uniform(*self.dropout)))
        cfg = TrainConfig(
            optimizer=str(rng.choice(list(self.optimizers))),
            learning_rate=float(10.0 ** rng.integers(self.lr_exponents[0], self.lr_exponents[1] + 1)),
            momentum_max=float(rng.choice(list(self.momentum_max))),
            batch_size=int(rng.integers(self.batch_size[0], self.batch_size[1] + 1)),
            max_epochs=self.max_epochs,
            patience=self.patience,
            validation_split=self.validation_split,
            seed=seed,
        )
        return spec, cfg


@dataclass
class Trial:
    index: int
    spec: MlpSpec
    train_cfg: TrainConfig
    val_mae: float = math.inf
    val_mse: float = math.inf
    epochs: int = 0
    model: Mlp = field(default=None, repr=False)
    error: str = ""
    rank: int = 0

    def ledger_row(self):
        return {
            "rank": self.rank,
            "trial": self.index,
            "val_mae": self.val_mae,
            "val_mse": self.val_mse,
            "epochs": self.epochs,
            "layers": "x".join(str(s) for s in self.spec.layer_sizes),
            "activation": self.spec.activation,
            "dropout": self.spec.dropout_rate,
            "optimizer": self.train_cfg.optimizer,
            "learning_rate": self.train_cfg.learning_rate,
            "momentum_max": self.train_cfg.momentum_max,
            "batch_size": self.train_cfg.batch_size,
            "seed": self.train_cfg.seed,
            "error": self.error,
        }


def trial_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def run_trial(index, spec, cfg, X, Y):
    trial = Trial(index, spec, cfg)
    try:
        net = train(Mlp.init(spec, seed=cfg.seed), X, Y, cfg)
    except (NonFiniteLoss, FloatingPointError, ValueError) as exc:
        trial.error = f"{type(exc).__name__}: {exc}"
        log.warning("trial %d failed: %s", index, trial.error)
        return trial
    va = net.val_indices
    trial.val_mae = net.mae(X[va], Y[va])
    trial.val_mse = net.mse(X[va], Y[va])
    trial.epochs = len(net.history)
    trial.model = net
    return trial


def hyperparameter_search(space, X, Y, n_trials, seed=0, workers=1):
    """Train n_trials random configurations; return trials ranked by validation MAE.

    Failed trials are kept (with ``error`` set and infinite MAE) at the end.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    rng = np.random.default_rng(seed)
    seeds = trial_seeds(seed, n_trials)
    drawn = [space.sample(rng, X.shape[1], Y.shape[1], seeds[i]) for i in range(n_trials)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            trials = list(pool.map(lambda a: run_trial(a[0], *a[1], X, Y), enumerate(drawn)))
    else:
        trials = [run_trial(i, s, c, X, Y) for i, (s, c) in enumerate(drawn)]
    trials.sort(key=lambda t: (t.val_mae, t.index))
    for r, t in enumerate(trials, 1):
        t.rank = r
    return trials


def ledger_csv(trials):
    buf = io.StringIO()
    rows = [t.ledger_row() for t in trials]
    w = csv.DictWriter(buf, fieldnames=list(rows[0]))
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def write_ledger(path, trials):
    atomic_write_text(path, ledger_csv(trials))
