"""EDMD core: dictionaries, Gram matrices, the Koopman matrix, its spectral
decomposition and multi-step prediction.

Conventions: ``Psi(x)`` is a row vector, so for a batch ``X`` of shape ``(n, d)``
the dictionary matrix has shape ``(n, M)`` and ``Psi(x_{n+1}) ~ Psi(x_n) K``.
Right eigenvectors ``zeta_k`` give eigenfunctions ``phi_k(x) = Psi(x) zeta_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import TimeSeriesDataset
from .networks import DictionaryNetwork
from .numerics import as_matrix, eig_nonsymmetric, pseudo_inverse

IMAG_RESIDUE_TOL = 1e-6


class PredictionError(ArithmeticError):
    pass


class Dictionary:
    """``[1, x_1, ..., x_d, network(x)]``; the first ``d + 1`` entries are fixed."""

    def __init__(self, d: int, network: DictionaryNetwork | None = None, projections: bool = True):
        if network is not None and network.d != d:
            raise ValueError(f"network expects dimension {network.d}, dictionary has {d}")
        self.d = d
        self.network = network
        self.projections = projections

    @property
    def n_fixed(self) -> int:
        return 1 + (self.d if self.projections else 0)

    @property
    def n_trainable(self) -> int:
        return 0 if self.network is None else self.network.n_outputs

    @property
    def size(self) -> int:
        return self.n_fixed + self.n_trainable

    def _fixed(self, x):
        ones = np.ones((x.shape[0], 1))
        return np.hstack([ones, x]) if self.projections else ones

    def forward(self, x):
        """Dictionary matrix and the network's forward record (``None`` without a network)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.d:
            raise ValueError(f"expected states of dimension {self.d}, got {x.shape[1]}")
        if self.network is None:
            return self._fixed(x), None
        out, record = self.network.forward(x)
        return np.hstack([self._fixed(x), out]), record

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def identity_observable(self) -> np.ndarray:
        """``B`` (M x d) with ``Psi(x) B = x``: the projection rows hold the identity."""
        if not self.projections:
            raise ValueError("identity observable needs the projection elements")
        b = np.zeros((self.size, self.d))
        b[1:1 + self.d] = np.eye(self.d)
        return b


def evaluate_dictionary(dictionary: Dictionary, x) -> np.ndarray:
    psi = dictionary(x)
    return psi[0] if np.ndim(x) == 1 else psi


def gram_from_features(psi_x, psi_y):
    """Averaged outer products ``G = Psi_x^T Psi_x / N`` and ``A = Psi_x^T Psi_y / N``."""
    psi_x = np.asarray(psi_x, dtype=float)
    psi_y = np.asarray(psi_y, dtype=float)
    n = psi_x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    g = psi_x.T @ psi_x / n
    return 0.5 * (g + g.T), psi_x.T @ psi_y / n


def dataset_features(dictionary: Dictionary, dataset: TimeSeriesDataset):
    """Dictionary evaluated once per snapshot; returns ``(Psi_x, Psi_y, Psi_all, record)``."""
    psi, record = dictionary.forward(dataset.snapshots)
    xi, yi = dataset.pair_index
    return psi[xi], psi[yi], psi, record


def compute_gram(dictionary: Dictionary, dataset: TimeSeriesDataset):
    if dataset.n_pairs < 1:
        raise ValueError("empty dataset")
    psi_x, psi_y, _, _ = dataset_features(dictionary, dataset)
    return gram_from_features(psi_x, psi_y)


def compute_K(g, a, ridge: float = 0.0, cutoff: float = 1e-12) -> np.ndarray:
    """``K = (G + ridge I)^+ A``."""
    g = as_matrix(g, "G")
    a = as_matrix(a, "A")
    if g.shape != a.shape or g.shape[0] != g.shape[1]:
        raise ValueError(f"G and A must be square and equal in shape, got {g.shape}, {a.shape}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    return pseudo_inverse(g + ridge * np.eye(g.shape[0]), cutoff) @ a


@dataclass(frozen=True)
class KoopmanModel:
    K: np.ndarray
    eigenvalues: np.ndarray
    right: np.ndarray     # columns zeta_k
    left: np.ndarray      # columns xi_k, xi_j^* zeta_k = delta_jk
    B: np.ndarray
    modes: np.ndarray     # row k is m_k = (xi_k^* B)^T
    dictionary: Dictionary | None = None

    @property
    def M(self) -> int:
        return self.K.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[1]

    def eigenfunctions_from_features(self, psi) -> np.ndarray:
        return np.asarray(psi) @ self.right

    def eigenfunctions(self, x) -> np.ndarray:
        if self.dictionary is None:
            raise ValueError("model has no dictionary attached")
        return self.eigenfunctions_from_features(self.dictionary(x))

    def with_scaled_eigenvectors(self, scale) -> "KoopmanModel":
        """Scale ``zeta_k`` by ``scale_k`` (and ``xi_k`` by ``1/conj(scale_k)``, keeping
        biorthogonality and leaving modes times eigenfunctions unchanged)."""
        scale = np.asarray(scale, dtype=complex)
        left = self.left / np.conj(scale)
        return replace(self, right=self.right * scale, left=left, modes=left.conj().T @ self.B)

    def predict_from_features(self, psi0, n_steps: int) -> np.ndarray:
        """``x_n = sum_k mu_k^n m_k phi_k(x_0)`` for ``n = 0..n_steps``; shape ``(b, n_steps+1, d)``."""
        if n_steps < 0:
            raise ValueError("n_steps must be nonnegative")
        phi = np.atleast_2d(psi0) @ self.right                      # (b, M)
        powers = self.eigenvalues[None, :] ** np.arange(n_steps + 1)[:, None]   # (n+1, M)
        traj = np.einsum("bk,nk,kd->bnd", phi, powers, self.modes)
        residue = np.max(np.abs(traj.imag)) if traj.size else 0.0
        bound = IMAG_RESIDUE_TOL * max(1.0, float(np.max(np.abs(traj.real))))
        if residue > bound:
            raise PredictionError(f"imaginary residue {residue:.3e} exceeds {bound:.3e}; "
                                  "conjugate eigenpairs are not cancelling")
        return traj.real

    def predict(self, x0, n_steps: int) -> np.ndarray:
        """Trajectory of ``n_steps + 1`` states from one initial state (or a batch)."""
        if self.dictionary is None:
            raise ValueError("model has no dictionary attached")
        x0 = np.asarray(x0, dtype=float)
        traj = self.predict_from_features(self.dictionary(np.atleast_2d(x0)), n_steps)
        return traj[0] if x0.ndim == 1 else traj


def decompose(K, B, dictionary: Dictionary | None = None) -> KoopmanModel:
    K = as_matrix(K, "K")
    B = as_matrix(B, "B")
    if B.shape[0] != K.shape[0]:
        raise ValueError(f"B must have {K.shape[0]} rows, got {B.shape[0]}")
    eig = eig_nonsymmetric(K)
    modes = eig.left.conj().T @ B
    return KoopmanModel(K, eig.values, eig.right, eig.left, B, modes, dictionary)


def eigenfunctions_at(model: KoopmanModel, x) -> np.ndarray:
    phi = model.eigenfunctions(np.atleast_2d(x))
    return phi[0] if np.ndim(x) == 1 else phi


def predict(model: KoopmanModel, x0, n_steps: int) -> np.ndarray:
    return model.predict(x0, n_steps)


def _pairs(X, Y):
    if isinstance(X, TimeSeriesDataset):
        return X
    X = check_array(X)
    Y = check_array(Y)
    return TimeSeriesDataset.from_pairs(X, Y)


class EDMD(BaseEstimator):
    """Extended DMD with the fixed dictionary ``[1, x]`` and an optional network.

    ``fit(X, Y)`` takes snapshot pairs (or a :class:`TimeSeriesDataset` as ``X``);
    ``transform`` returns eigenfunction values and ``predict`` rolls trajectories out.
    """

    def __init__(self, network=None, ridge=0.0, cutoff=1e-12):
        self.network = network
        self.ridge = ridge
        self.cutoff = cutoff

    def fit(self, X, Y=None):
        dataset = _pairs(X, Y)
        self.dictionary_ = Dictionary(dataset.d, self.network)
        g, a = compute_gram(self.dictionary_, dataset)
        self.K_ = compute_K(g, a, self.ridge, self.cutoff)
        self.model_ = decompose(self.K_, self.dictionary_.identity_observable(), self.dictionary_)
        self.eigenvalues_ = self.model_.eigenvalues
        self.n_features_in_ = dataset.d
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.eigenfunctions(check_array(X))

    def predict(self, X, n_steps=1):
        check_is_fitted(self, "model_")
        X = check_array(X)
        return self.model_.predict(X, n_steps)
