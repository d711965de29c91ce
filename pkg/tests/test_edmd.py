import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edmddl.data import TimeSeriesDataset
from edmddl.edmd import (EDMD, Dictionary, PredictionError, compute_gram, compute_K, decompose,
                         eigenfunctions_at, evaluate_dictionary, gram_from_features, predict)
from edmddl.networks import init_mlp
from edmddl.numerics import DefectiveMatrixError

from conftest import linear_dataset


def scalar_half_model():
    ds = TimeSeriesDataset.from_pairs(np.array([[1.0], [2.0], [-3.0]]), np.array([[0.5], [1.0], [-1.5]]))
    dic = Dictionary(1)
    g, a = compute_gram(dic, ds)
    return decompose(compute_K(g, a), dic.identity_observable(), dic), g, a


def test_dictionary_zero_network():
    net = init_mlp(2, 4, 2, 3, seed=0)
    net.set_flat(np.zeros(net.n_params))
    psi = evaluate_dictionary(Dictionary(2, net), np.array([3.0, -1.0]))
    np.testing.assert_array_equal(psi, [1, 3, -1, 0, 0, 0])


def test_dictionary_prefix_independent_of_network():
    x = np.random.default_rng(0).normal(size=(7, 2))
    a = Dictionary(2, init_mlp(2, 4, 2, 3, seed=1))(x)
    b = Dictionary(2, init_mlp(2, 4, 2, 3, seed=2))(x)
    assert np.array_equal(a[:, :3], b[:, :3])
    assert np.all(a[:, 0] == 1)
    assert not np.array_equal(a[:, 3:], b[:, 3:])


def test_dictionary_sizes_and_checks():
    dic = Dictionary(2, init_mlp(2, 4, 2, 22, seed=0))
    assert (dic.n_fixed, dic.n_trainable, dic.size) == (3, 22, 25)
    with pytest.raises(ValueError):
        Dictionary(3, init_mlp(2, 4, 2, 2, seed=0))
    with pytest.raises(ValueError):
        dic(np.ones((2, 3)))
    b = dic.identity_observable()
    assert b.shape == (25, 2)
    np.testing.assert_array_equal(b[1:3], np.eye(2))
    assert np.count_nonzero(b) == 2


def test_gram_single_pair():
    g, a = gram_from_features(np.array([[1.0, 2.0]]), np.array([[1.0, 0.0]]))
    np.testing.assert_array_equal(g, [[1, 2], [2, 4]])
    np.testing.assert_array_equal(a, [[1, 0], [2, 0]])


def test_gram_constant_dictionary():
    ds = TimeSeriesDataset.from_pairs(np.ones((4, 1)), np.ones((4, 1)))
    g, a = compute_gram(Dictionary(1, projections=False), ds)
    np.testing.assert_array_equal(g, [[1.0]])
    np.testing.assert_array_equal(a, [[1.0]])


def test_gram_matches_loop():
    rng = np.random.default_rng(3)
    px, py = rng.normal(size=(50, 4)), rng.normal(size=(50, 4))
    g, a = gram_from_features(px, py)
    g_loop = sum(np.outer(p, p) for p in px) / 50
    a_loop = sum(np.outer(p, q) for p, q in zip(px, py)) / 50
    np.testing.assert_allclose(g, g_loop, atol=1e-12)
    np.testing.assert_allclose(a, a_loop, atol=1e-12)


def test_gram_empty():
    with pytest.raises(ValueError):
        gram_from_features(np.zeros((0, 2)), np.zeros((0, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gram_psd(seed):
    ds = linear_dataset(np.random.default_rng(seed).normal(size=(2, 2)), n_pairs=30, seed=seed)
    g, _ = compute_gram(Dictionary(2, init_mlp(2, 4, 2, 3, seed=seed)), ds)
    assert np.array_equal(g, g.T)
    assert np.linalg.eigvalsh(g).min() >= -1e-10


def test_compute_K_identity_cases():
    np.testing.assert_array_equal(compute_K(np.eye(3), np.eye(3), 0.0), np.eye(3))
    np.testing.assert_allclose(compute_K(np.eye(3), np.eye(3), 1.0), 0.5 * np.eye(3), atol=1e-15)
    with pytest.raises(ValueError):
        compute_K(np.eye(2), np.eye(2), -1.0)
    with pytest.raises(ValueError):
        compute_K(np.eye(2), np.eye(3))


def test_compute_K_scalar_linear():
    _, g, a = scalar_half_model()
    np.testing.assert_allclose(compute_K(g, a), [[1, 0], [0, 0.5]], atol=1e-14)


def test_decompose_identity():
    B = np.zeros((3, 1))
    B[0, 0] = 1.0
    model = decompose(np.eye(3), B)
    np.testing.assert_array_equal(model.eigenvalues, np.ones(3))
    # modes recover B row by row
    np.testing.assert_allclose(np.abs(model.modes), np.abs(B), atol=1e-15)


def test_decompose_scalar_linear():
    model, _, _ = scalar_half_model()
    np.testing.assert_allclose(model.eigenvalues, [1.0, 0.5], atol=1e-14)
    np.testing.assert_allclose(model.modes[1] * model.right[1, 1], [1.0], atol=1e-14)
    np.testing.assert_allclose(eigenfunctions_at(model, np.array([2.0]))[1] * model.modes[1, 0], 2.0, atol=1e-14)


def test_decompose_defective():
    with pytest.raises(DefectiveMatrixError):
        decompose(np.array([[1.0, 1.0], [0.0, 1.0]]), np.eye(2))


def test_decompose_shape_check():
    with pytest.raises(ValueError):
        decompose(np.eye(3), np.eye(2))


def test_biorthogonality_and_modes():
    K = np.random.default_rng(1).normal(size=(5, 5))
    B = np.random.default_rng(2).normal(size=(5, 2))
    m = decompose(K, B)
    np.testing.assert_allclose(m.left.conj().T @ m.right, np.eye(5), atol=1e-8)
    np.testing.assert_allclose(m.modes, m.left.conj().T @ B)


def test_eigenfunctions_constant_dictionary():
    model = decompose(np.eye(1), np.ones((1, 1)), Dictionary(2, projections=False))
    phi = eigenfunctions_at(model, np.array([0.3, 4.0]))
    np.testing.assert_allclose(np.abs(phi), [1.0])


def test_eigenfunction_linear_in_zeta():
    model, _, _ = scalar_half_model()
    x = np.array([[1.5], [-0.2]])
    scaled = model.with_scaled_eigenvectors([1.0, 3.0])
    np.testing.assert_allclose(scaled.eigenfunctions(x)[:, 1], 3 * model.eigenfunctions(x)[:, 1])
    # predictions do not depend on the eigenvector scaling
    np.testing.assert_allclose(scaled.predict(x, 4), model.predict(x, 4), atol=1e-14)


def test_predict_scalar_linear():
    model, _, _ = scalar_half_model()
    np.testing.assert_allclose(predict(model, np.array([2.0]), 3)[:, 0], [2, 1, 0.5, 0.25], atol=1e-14)


def test_predict_zero_steps_reconstructs():
    x = np.random.default_rng(0).uniform(-2, 2, size=(10, 2))
    ds = linear_dataset([[0.9, 0.1], [0.0, 0.8]])
    model = EDMD(network=init_mlp(2, 6, 2, 4, seed=0)).fit(ds).model_
    np.testing.assert_allclose(model.predict(x, 0)[:, 0], x, atol=1e-8)


def test_predict_power_law_on_linear_oracle(upper_triangular_data):
    model = EDMD().fit(upper_triangular_data).model_
    x0 = np.array([0.7, -0.4])
    half = model.predict(x0, 3)[-1]
    np.testing.assert_allclose(model.predict(x0, 6)[-1], model.predict(half, 3)[-1], atol=1e-12)
    A = np.array([[0.9, 0.1], [0.0, 0.8]])
    np.testing.assert_allclose(model.predict(x0, 6)[-1], np.linalg.matrix_power(A, 6) @ x0, atol=1e-12)


def test_predict_rejects_broken_pairs():
    model, _, _ = scalar_half_model()
    broken = type(model)(model.K, np.array([1.0, 0.5j]), model.right.astype(complex), model.left,
                         model.B, model.modes, model.dictionary)
    with pytest.raises(PredictionError):
        broken.predict(np.array([2.0]), 3)
    with pytest.raises(ValueError):
        model.predict(np.array([2.0]), -1)


def test_linear_oracle_eigenvalues_fast(upper_triangular_data):
    t0 = time.perf_counter()
    est = EDMD(ridge=0.0).fit(upper_triangular_data)
    assert time.perf_counter() - t0 < 1.0
    np.testing.assert_allclose(np.sort(est.eigenvalues_.real), [0.8, 0.9, 1.0], atol=1e-8)
    assert np.all(np.abs(est.eigenvalues_.imag) < 1e-8)


def test_classical_dmd_equivalence():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(3, 3)) * 0.4
    x = rng.normal(size=(200, 3))
    y = x @ A.T + 1e-3 * rng.normal(size=(200, 3))
    est = EDMD(ridge=0.0).fit(x, y)
    # independent fit: least squares with an affine column, x_{n+1} ~ [1, x_n] W
    W, *_ = np.linalg.lstsq(np.hstack([np.ones((200, 1)), x]), y, rcond=None)
    full = np.zeros((4, 4))
    full[0, 0] = 1.0
    full[:, 1:] = W
    expected = np.sort_complex(np.linalg.eigvals(full))
    np.testing.assert_allclose(np.sort_complex(est.eigenvalues_), expected, atol=1e-8)


def test_estimator_api(upper_triangular_data):
    est = EDMD(ridge=1e-9)
    assert est.get_params() == {"network": None, "ridge": 1e-9, "cutoff": 1e-12}
    x = np.random.default_rng(0).uniform(-1, 1, size=(500, 2))
    y = x @ np.array([[0.9, 0.1], [0.0, 0.8]]).T
    est.fit(x, y)
    assert est.n_features_in_ == 2
    assert est.transform(x[:5]).shape == (5, 3)
    assert est.predict(x[:5], n_steps=2).shape == (5, 3, 2)
    with pytest.raises(ValueError):
        est.fit(x, y[:-1])
