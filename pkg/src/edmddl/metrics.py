"""Evaluation: trajectory reconstruction error, Monte-Carlo eigenfunction
normalization and error, basin classification, and parameter-efficiency sweeps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .edmd import KoopmanModel
from .systems import DuffingParams, duffing_trajectories, make_rng


class MetricError(ArithmeticError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 10_000
    low: float | Sequence[float] = -2.0
    high: float | Sequence[float] = 2.0
    seed: int = 0
    horizon: int = 49

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if np.any(np.asarray(self.high, dtype=float) <= np.asarray(self.low, dtype=float)):
            raise ValueError("sampling box is degenerate")

    def samples(self, d: int, seed=None) -> np.ndarray:
        rng = make_rng(self.seed if seed is None else seed)
        low = np.broadcast_to(np.asarray(self.low, dtype=float), (d,))
        high = np.broadcast_to(np.asarray(self.high, dtype=float), (d,))
        return rng.uniform(low, high, size=(self.n_samples, d))


def reconstruction_error(actual, predicted) -> float:
    """RMS over steps ``1..N`` of the Euclidean state error; step 0 is excluded."""
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if actual.shape != predicted.shape:
        raise ValueError(f"trajectory shapes differ: {actual.shape} vs {predicted.shape}")
    if actual.shape[0] < 2:
        raise ValueError("trajectories need at least two states")
    diff = (actual - predicted)[1:].reshape(actual.shape[0] - 1, -1)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def _state_dim(model: KoopmanModel) -> int:
    return model.dictionary.d if model.dictionary is not None else model.d


def normalize_eigenfunctions(model: KoopmanModel, cfg: EvalConfig = EvalConfig(),
                             samples=None) -> KoopmanModel:
    """Rescale each eigenfunction to unit empirical L2 norm over uniform samples."""
    x = cfg.samples(_state_dim(model)) if samples is None else np.asarray(samples, dtype=float)
    phi = model.eigenfunctions(x)
    a = np.mean(np.abs(phi) ** 2, axis=0)
    zero = np.flatnonzero(~(a > 0))
    if zero.size:
        raise MetricError(f"eigenfunction {int(zero[0])} vanishes on the sampling region")
    return model.with_scaled_eigenvectors(1.0 / np.sqrt(a))


def eigenfunction_errors_from_values(phi_x, phi_fx, eigenvalues):
    """Per-eigenpair residual ``sqrt(mean |phi(F x) - mu phi(x)|^2)`` and their mean."""
    res = np.asarray(phi_fx) - np.asarray(eigenvalues)[None, :] * np.asarray(phi_x)
    e = np.sqrt(np.mean(np.abs(res) ** 2, axis=0))
    return e, float(np.mean(e))


def eigenfunction_error(model: KoopmanModel, truth_stepper: Callable[[np.ndarray], np.ndarray],
                        cfg: EvalConfig = EvalConfig(), normalize: bool = True, samples=None):
    """``(E_j for every eigenpair, their average)``. One sample set is shared by
    the normalization and by every ``j``."""
    x = cfg.samples(_state_dim(model)) if samples is None else np.asarray(samples, dtype=float)
    if normalize:
        model = normalize_eigenfunctions(model, cfg, samples=x)
    fx = truth_stepper(x)
    return eigenfunction_errors_from_values(model.eigenfunctions(x), model.eigenfunctions(fx),
                                            model.eigenvalues)


@dataclass
class BasinResult:
    initial_conditions: np.ndarray
    truth: np.ndarray
    predicted: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.truth == self.predicted))


def nearest_equilibrium(x1) -> np.ndarray:
    """+1 or -1, whichever is closer (ties go to +1)."""
    return np.where(np.asarray(x1) >= 0.0, 1, -1)


def duffing_truth_labels(ics, horizon: int = 49, params: DuffingParams = DuffingParams()) -> np.ndarray:
    traj = duffing_trajectories(params, ics, horizon)
    return nearest_equilibrium(traj[:, horizon, 0])


def classify_basins(model: KoopmanModel, initial_conditions, horizon: int = 49, truth=None,
                    params: DuffingParams = DuffingParams()) -> BasinResult:
    ics = np.atleast_2d(np.asarray(initial_conditions, dtype=float))
    pred = model.predict(ics, horizon)
    labels = nearest_equilibrium(pred[:, horizon, 0])
    if truth is None:
        truth = duffing_truth_labels(ics, horizon, params)
    return BasinResult(ics, np.asarray(truth), labels)


@dataclass
class SweepRow:
    label: str
    n_params: int
    metric: float


def efficiency_sweep(candidates: Iterable[tuple[str, Callable[[], tuple[int, float]]]],
                     target: float | None = None, higher_is_better: bool = False):
    """Run each ``(label, run)`` candidate, where ``run()`` trains and evaluates an
    architecture and returns ``(n_params, metric)``.

    Returns the table and the smallest parameter count whose metric meets
    ``target`` (``None`` when no candidate does or no target is given).
    """
    rows = []
    for label, run in candidates:
        n, m = run()
        rows.append(SweepRow(label, int(n), float(m)))
    best = None
    if target is not None:
        ok = [r.n_params for r in rows if (r.metric >= target if higher_is_better else r.metric <= target)]
        best = min(ok) if ok else None
    return rows, best


# -- evaluation protocols used by the CLI and the acceptance suite -----------

def held_out_duffing_ics(n_per_basin: int, seed: int, horizon: int = 49, box: float = 2.0,
                         params: DuffingParams = DuffingParams()):
    """Fresh uniform initial conditions, ``n_per_basin`` converging to each of +1 and -1.

    Returns ``(ics, labels)`` with the +1 basin first.
    """
    rng = make_rng(seed)
    plus, minus = [], []
    while len(plus) < n_per_basin or len(minus) < n_per_basin:
        ics = rng.uniform(-box, box, size=(4 * n_per_basin, 2))
        for ic, lab in zip(ics, duffing_truth_labels(ics, horizon, params)):
            (plus if lab > 0 else minus).append(ic)
    ics = np.array(plus[:n_per_basin] + minus[:n_per_basin])
    labels = np.array([1] * n_per_basin + [-1] * n_per_basin)
    return ics, labels


def trajectory_errors(model: KoopmanModel, truth) -> np.ndarray:
    """Reconstruction error of the model rollout against each true trajectory."""
    truth = np.asarray(truth, dtype=float)
    pred = model.predict(truth[:, 0], truth.shape[1] - 1)
    return np.array([reconstruction_error(a, p) for a, p in zip(truth, pred)])


def _summary(errors) -> dict:
    errors = np.asarray(errors, dtype=float)
    return {"median": float(np.median(errors)), "mean": float(np.mean(errors)),
            "max": float(np.max(errors)), "per_ic": errors.tolist()}


def duffing_recon_report(model: KoopmanModel, n_per_basin: int = 10, horizon: int = 50, seed: int = 1,
                         params: DuffingParams = DuffingParams()) -> dict:
    ics, labels = held_out_duffing_ics(n_per_basin, seed, params=params)
    errors = trajectory_errors(model, duffing_trajectories(params, ics, horizon))
    return {"horizon": horizon, "seed": seed, "n_per_basin": n_per_basin,
            "plus": _summary(errors[labels > 0]), "minus": _summary(errors[labels < 0])}


def ks_recon_report(model: KoopmanModel, params, n_ics: int = 10, horizon: int = 100, seed: int = 1,
                    amplitude: float = 4.0) -> dict:
    from .systems import ks_trajectories

    ics = make_rng(seed).uniform(-amplitude, amplitude, size=(n_ics, params.nx))
    errors = trajectory_errors(model, ks_trajectories(params, ics, horizon))
    return {"horizon": horizon, "seed": seed, "n_ics": n_ics, "all": _summary(errors)}


def eigen_report(model: KoopmanModel, stepper, cfg: EvalConfig) -> dict:
    e_j, e_mean = eigenfunction_error(model, stepper, cfg)
    return {"E_eigen": e_mean, "E_j": e_j.tolist(), "n_samples": cfg.n_samples, "seed": cfg.seed,
            "low": cfg.low, "high": cfg.high}
