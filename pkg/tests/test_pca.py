import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvsample import field, pca
from mvsample.pca import LocalPCAModel


def _model_from_ev(ev) -> LocalPCAModel:
    d = len(ev)
    return LocalPCAModel(np.zeros(d), np.eye(d), np.asarray(ev, float), d, 10)


def _brute_cov(x):
    xc = x - x.mean(axis=0)
    return xc.T @ xc / (x.shape[0] - 1)


data_matrices = st.tuples(st.integers(2, 60), st.integers(1, 8), st.integers(0, 2**32 - 1)).map(
    lambda t: np.random.default_rng(t[2]).standard_normal((t[0], t[1])) * np.random.default_rng(t[2] + 1).uniform(0.1, 10, t[1])
)


def test_fit_line_y_equals_x():
    t = np.linspace(-3, 3, 25)
    model = pca.fit(np.column_stack([t, t]))
    assert model.ev[1] == pytest.approx(0.0, abs=1e-12)
    assert model.ev[0] == pytest.approx(2 * np.var(t, ddof=1))
    np.testing.assert_allclose(model.c_full[0], [1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-12)


def test_fit_single_point():
    model = pca.fit([[1.5, -2.0, 3.0]])
    np.testing.assert_array_equal(model.mu, [1.5, -2.0, 3.0])
    np.testing.assert_array_equal(model.ev, 0.0)
    np.testing.assert_array_equal(model.c_full, np.eye(3))
    assert model.n_points == 1 and model.q == 3


def test_fit_covariance_oracle(rng):
    x = rng.standard_normal((50, 4)) @ rng.standard_normal((4, 4))
    model = pca.fit(x)
    np.testing.assert_allclose(model.covariance(), _brute_cov(x), rtol=0, atol=1e-8 * np.abs(_brute_cov(x)).max())


def test_fit_rejects_nonfinite():
    with pytest.raises(ValueError):
        pca.fit([[1.0, np.inf], [0.0, 1.0]])


def test_select_q_examples():
    m = _model_from_ev([9, 1, 0, 0])
    assert pca.select_q(m, 0.9) == 1
    assert pca.select_q(m, 0.999) == 2
    assert pca.select_q(_model_from_ev([0, 0, 0]), 0.5) == 1
    with pytest.raises(ValueError):
        pca.select_q(m, 0.0)


def test_select_q_full_variance_keeps_every_component():
    assert pca.select_q(_model_from_ev([9, 1, 0, 0]), 1.0) == 4
    # a variance 1e-14 of the total is still data and survives at p just below 1
    m = _model_from_ev([1.0, 1e-14])
    assert pca.select_q(m, 1.0) == 2
    assert pca.select_q(m, 1.0 - 1e-12) == 1


def test_explained_variance_ratio_examples():
    assert pca.explained_variance_ratio(_model_from_ev([3, 1]), 1) == 0.75
    assert pca.explained_variance_ratio(_model_from_ev([3, 1]), 2) == 1.0


def test_project_reconstruct_examples(rng):
    x = rng.standard_normal((30, 5))
    model = pca.fit(x)
    np.testing.assert_allclose(pca.project(model, model.mu), 0.0, atol=1e-12)
    np.testing.assert_array_equal(pca.reconstruct(model, np.zeros((1, 5))), model.mu[None, :])
    back = pca.reconstruct(model, pca.project(model, x))
    assert np.linalg.norm(back - x) <= 1e-9 * np.linalg.norm(x)


def test_rank_two_reconstruction():
    gen = field.gen_synthetic(field.SyntheticConfig(grid=(20, 20), d=6, n_regions=1, ranks=(2,), seed=5))
    x = gen.field.data
    model = pca.fit(x).with_q(2)
    resid = x - pca.reconstruct(model, pca.project(model, x))
    assert np.sum(resid**2) / np.sum((x - model.mu) ** 2) <= 1e-8


def test_dimension_errors(rng):
    model = pca.fit(rng.standard_normal((10, 3))).with_q(2)
    with pytest.raises(ValueError):
        pca.project(model, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        pca.reconstruct(model, np.zeros((4, 3)))
    with pytest.raises(ValueError):
        model.with_q(4)


def test_residual_identity_random_100x6(rng):
    x = rng.standard_normal((100, 6)) @ rng.standard_normal((6, 6))
    model = pca.fit(x)
    for q in range(1, 7):
        m = model.with_q(q)
        direct = np.sum((x - pca.reconstruct(m, pca.project(m, x))) ** 2) / np.sum((x - m.mu) ** 2)
        assert pca.explained_variance_ratio(m) + direct == pytest.approx(1.0, abs=1e-8)
        assert pca.normalized_residual(x, m) == pytest.approx(direct, abs=1e-12)


def test_select_q_bounds_residual(rng):
    x = rng.standard_normal((200, 7)) @ rng.standard_normal((7, 7))
    model = pca.fit(x)
    for p in (0.5, 0.9, 0.99, 0.999, 1.0):
        q = pca.select_q(model, p)
        assert pca.normalized_residual(x, model, q) <= 1 - p + 1e-8


# --- properties ------------------------------------------------------------

@given(data_matrices)
def test_orthonormal_and_sorted(x):
    model = pca.fit(x)
    d = x.shape[1]
    assert np.max(np.abs(model.c_full @ model.c_full.T - np.eye(d))) <= 1e-8
    assert np.all(np.diff(model.ev) <= 0)
    assert np.all(model.ev >= 0)
    total = np.trace(_brute_cov(x))
    assert model.total_variance == pytest.approx(total, rel=1e-8, abs=1e-300)


@given(data_matrices)
def test_spectral_reassembly(x):
    model = pca.fit(x)
    cov = _brute_cov(x)
    assert np.linalg.norm(model.covariance() - cov) <= 1e-8 * max(np.linalg.norm(cov), 1e-300)


@given(data_matrices)
def test_eq_identity_all_q(x):
    model = pca.fit(x)
    if np.sum((x - model.mu) ** 2) == 0:
        return
    for q in range(1, x.shape[1] + 1):
        assert pca.explained_variance_ratio(model, q) + pca.normalized_residual(x, model, q) == pytest.approx(1.0, abs=1e-8)


@given(data_matrices)
def test_ratio_monotone_and_select_q_monotone(x):
    model = pca.fit(x)
    ratios = [pca.explained_variance_ratio(model, q) for q in range(1, model.d + 1)]
    assert all(b >= a for a, b in zip(ratios, ratios[1:]))
    qs = [pca.select_q(model, p) for p in (1.0, 0.999, 0.99, 0.9, 0.5, 0.1)]
    assert all(b <= a for a, b in zip(qs, qs[1:]))


@given(data_matrices)
def test_fit_deterministic_signs(x):
    a, b = pca.fit(x), pca.fit(x.copy())
    assert a.c_full.tobytes() == b.c_full.tobytes()
    assert a.ev.tobytes() == b.ev.tobytes()
    lead = np.argmax(np.abs(a.c_full) >= np.abs(a.c_full).max(axis=1, keepdims=True) - 1e-12, axis=1)
    assert np.all(a.c_full[np.arange(a.d), lead] > 0)


@given(data_matrices)
def test_full_q_roundtrip(x):
    model = pca.fit(x)
    back = pca.reconstruct(model, pca.project(model, x))
    assert np.linalg.norm(back - x) <= 1e-9 * max(np.linalg.norm(x), 1.0)
