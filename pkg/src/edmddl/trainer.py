"""EDMD with dictionary learning: alternate a closed-form Koopman-matrix update
with Adam steps on the dictionary network."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import TimeSeriesDataset
from .edmd import Dictionary, KoopmanModel, _pairs, compute_K, dataset_features, decompose, gram_from_features
from .networks import AdamState, DictionaryNetwork, adam_step, init_mlp, init_node
from .odeint import IntegratorConfig
from .systems import make_rng

log = logging.getLogger(__name__)

RIDGE_CONVENTIONS = ("loss", "literal")


class TrainingError(RuntimeError):
    def __init__(self, message, trace=None):
        self.trace = trace or []
        super().__init__(message)


@dataclass
class TrainConfig:
    """Hyperparameters of one EDMD-DL run.

    ``n_dict`` is the total dictionary size M (constant + projections + trainable).
    ``ridge_convention="loss"`` updates K with ``ridge / N`` so that it is the exact
    minimizer of the summed loss; ``"literal"`` plugs ``ridge`` into ``(G + ridge I)^+ A``
    with the averaged Gram matrices.
    """

    network: str = "node"
    n_dict: int = 25
    width: int = 120
    depth: int = 3
    field_width: int = 16
    ridge: float = 0.01
    tol: float = 30.0
    learning_rate: float = 1e-3
    max_epochs: int = 5000
    inner_steps: int = 1
    batch_size: int | None = None
    seed: int = 0
    init_scale: str = "inverse"
    field_std: float = 0.1
    time_span: tuple[float, float] = (0.0, 1.0)
    abs_tol: float = 1e-9
    rel_tol: float = 1e-7
    per_row: bool = False
    ridge_convention: str = "loss"
    cutoff: float = 1e-12
    # wall-clock budget in seconds; training stops after the epoch that crosses it
    max_time: float | None = None

    def __post_init__(self):
        if self.network not in ("node", "mlp"):
            raise ValueError(f"network must be 'node' or 'mlp', got {self.network!r}")
        if self.ridge < 0:
            raise ValueError("ridge (lambda) must be nonnegative")
        if not self.tol > 0:
            raise ValueError("tol (epsilon) must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate (delta) must be positive")
        if self.max_epochs < 1 or self.inner_steps < 1:
            raise ValueError("max_epochs and inner_steps must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_time is not None and not self.max_time > 0:
            raise ValueError("max_time must be positive")
        if self.ridge_convention not in RIDGE_CONVENTIONS:
            raise ValueError(f"ridge_convention must be one of {RIDGE_CONVENTIONS}")
        self.time_span = tuple(float(t) for t in self.time_span)

    def m_trainable(self, d: int) -> int:
        m = self.n_dict - d - 1
        if m < 1:
            raise ValueError(f"n_dict={self.n_dict} leaves no trainable elements for d={d}")
        return m

    def build_network(self, d: int) -> DictionaryNetwork:
        m = self.m_trainable(d)
        if self.network == "mlp":
            return init_mlp(d, self.width, self.depth, m, self.seed, self.init_scale)
        integ = IntegratorConfig(abs_tol=self.abs_tol, rel_tol=self.rel_tol)
        return init_node(d, self.width, self.field_width, m, self.seed, self.time_span, integ,
                         self.init_scale, self.field_std, self.per_row)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["time_span"] = list(self.time_span)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    # J at the new parameters with the previous K, i.e. just before each K update
    losses_before_update: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    iterations: int = 0
    success: bool = False
    wall_time: float = 0.0
    n_params: int = 0
    best_iteration: int = 0


def _residual_loss(K, psi_x, psi_y, ridge):
    r = psi_y - psi_x @ K
    return float(np.sum(r * r) + ridge * np.sum(K * K)), r


def loss_J(K, dictionary: Dictionary, dataset: TimeSeriesDataset, ridge: float) -> float:
    """``sum_n ||Psi(x_{n+1}) - Psi(x_n) K||^2 + ridge ||K||_F^2`` (row convention)."""
    psi_x, psi_y, _, _ = dataset_features(dictionary, dataset)
    return _residual_loss(np.asarray(K, dtype=float), psi_x, psi_y, ridge)[0]


def _effective_ridge(ridge, n_pairs, convention):
    return ridge / n_pairs if convention == "loss" else ridge


def update_K(dictionary: Dictionary, dataset: TimeSeriesDataset, ridge: float,
             convention: str = "loss", cutoff: float = 1e-12) -> np.ndarray:
    psi_x, psi_y, _, _ = dataset_features(dictionary, dataset)
    g, a = gram_from_features(psi_x, psi_y)
    return compute_K(g, a, _effective_ridge(ridge, psi_x.shape[0], convention), cutoff)


def _feature_gradient(K, r, x_idx, y_idx, n_rows):
    """dJ/dPsi for every snapshot row, accumulating rows that are both x_n and x_{n+1}."""
    grad = np.zeros((n_rows, K.shape[0]))
    np.add.at(grad, y_idx, 2.0 * r)
    np.add.at(grad, x_idx, -2.0 * r @ K.T)
    return grad


def train(config: TrainConfig, dataset: TimeSeriesDataset,
          callback: Callable[[int, float, Dictionary], None] | None = None,
          network: DictionaryNetwork | None = None) -> tuple[Dictionary, KoopmanModel, TrainReport]:
    """Run the alternating optimization until ``J <= tol`` or ``max_epochs``.

    Each epoch evaluates the dictionary on every snapshot, recomputes K in closed
    form, then takes ``inner_steps`` Adam steps on J with K held fixed. With
    ``batch_size`` set, those steps use random subsets of the transition pairs.
    The returned model is built from the lowest-loss epoch.
    """
    d = dataset.d
    net = network or config.build_network(d)
    if net.d != d:
        raise ValueError(f"network expects dimension {net.d}, dataset has {d}")
    dictionary = Dictionary(d, net)
    x_idx, y_idx = dataset.pair_index
    snapshots = dataset.snapshots
    n_pairs, n_rows = x_idx.size, snapshots.shape[0]
    ridge_k = _effective_ridge(config.ridge, n_pairs, config.ridge_convention)
    rng = make_rng([config.seed, 1])
    state = AdamState()
    report = TrainReport(n_params=net.n_params)
    best = (np.inf, None, None, 0)
    K = None
    t0 = time.perf_counter()

    for epoch in range(config.max_epochs):
        psi, record = dictionary.forward(snapshots)
        if not np.all(np.isfinite(psi)):
            raise TrainingError(f"non-finite dictionary values at epoch {epoch}", report.losses)
        psi_x, psi_y = psi[x_idx], psi[y_idx]
        if K is not None:
            report.losses_before_update.append(_residual_loss(K, psi_x, psi_y, config.ridge)[0])
        with np.errstate(over="ignore", invalid="ignore"):
            g, a = gram_from_features(psi_x, psi_y)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(a))):
            raise TrainingError(f"Gram matrices overflowed at epoch {epoch}", report.losses)
        K = compute_K(g, a, ridge_k, config.cutoff)
        J, r = _residual_loss(K, psi_x, psi_y, config.ridge)
        report.losses.append(J)
        report.iterations = epoch + 1
        if not np.isfinite(J):
            raise TrainingError(f"non-finite loss at epoch {epoch}", report.losses)
        if J < best[0]:
            best = (J, net.get_flat(), K, epoch)
        if callback is not None:
            callback(epoch, J, dictionary)
        if J <= config.tol:
            report.success = True
            break
        if epoch == config.max_epochs - 1:
            break
        if config.max_time is not None and time.perf_counter() - t0 >= config.max_time:
            log.info("stopping at epoch %d: time budget of %.0fs used", epoch, config.max_time)
            break

        for inner in range(config.inner_steps):
            if config.batch_size is None or config.batch_size >= n_pairs:
                if inner > 0:
                    psi, record = dictionary.forward(snapshots)
                    _, r = _residual_loss(K, psi[x_idx], psi[y_idx], config.ridge)
                grad = _feature_gradient(K, r, x_idx, y_idx, n_rows)
                rows, sub = None, record
            else:
                pick = rng.choice(n_pairs, size=config.batch_size, replace=False)
                rows, inv = np.unique(np.concatenate([x_idx[pick], y_idx[pick]]), return_inverse=True)
                bx, by = inv[:pick.size], inv[pick.size:]
                if inner == 0:
                    sub_psi, sub = psi[rows], net.slice_record(record, rows)
                else:
                    sub_psi, sub = dictionary.forward(snapshots[rows])
                _, rb = _residual_loss(K, sub_psi[bx], sub_psi[by], 0.0)
                grad = _feature_gradient(K, rb, bx, by, rows.size) * (n_pairs / pick.size)
            grads = net.backward(sub, grad[:, dictionary.n_fixed:])
            new_params, state = adam_step(net.params, grads, state, config.learning_rate)
            net.set_params(new_params)

        if log.isEnabledFor(logging.INFO) and (epoch % 50 == 0):
            log.info("epoch %d  J=%.6g  (%.1fs)", epoch, J, time.perf_counter() - t0)

    best_J, best_flat, best_K, best_epoch = best
    if best_flat is not None and best_epoch != report.iterations - 1:
        net.set_flat(best_flat)
    report.final_loss = float(best_J)
    report.best_iteration = int(best_epoch)
    report.wall_time = time.perf_counter() - t0
    model = decompose(best_K, dictionary.identity_observable(), dictionary)
    return dictionary, model, report


class EDMDDL(BaseEstimator):
    """scikit-learn style wrapper around :func:`train`.

    ``fit(X, Y)`` takes snapshot pairs or a :class:`TimeSeriesDataset`; after fitting,
    ``transform`` gives Koopman eigenfunction values and ``predict`` multi-step
    trajectories.
    """

    def __init__(self, network="node", n_dict=25, width=120, depth=3, field_width=16, ridge=0.01,
                 tol=30.0, learning_rate=1e-3, max_epochs=5000, inner_steps=1, batch_size=None, seed=0,
                 init_scale="inverse", abs_tol=1e-9, rel_tol=1e-7, ridge_convention="loss"):
        self.network = network
        self.n_dict = n_dict
        self.width = width
        self.depth = depth
        self.field_width = field_width
        self.ridge = ridge
        self.tol = tol
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.inner_steps = inner_steps
        self.batch_size = batch_size
        self.seed = seed
        self.init_scale = init_scale
        self.abs_tol = abs_tol
        self.rel_tol = rel_tol
        self.ridge_convention = ridge_convention

    def _config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, X, Y=None):
        dataset = _pairs(X, Y)
        self.dictionary_, self.model_, self.report_ = train(self._config(), dataset)
        self.n_features_in_ = dataset.d
        self.eigenvalues_ = self.model_.eigenvalues
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.eigenfunctions(check_array(X))

    def predict(self, X, n_steps=1):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_array(X), n_steps)
