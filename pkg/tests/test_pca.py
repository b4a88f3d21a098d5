"""PCA: closed-form oracles, orthonormality, random-projection comparison."""

import numpy as np
import pytest

from expertfuse.errors import ContractError
from expertfuse.pca import (PcaProjection, pca_fit, pca_project,
                            pca_reconstruct, reconstruction_error)


def closed_form_2x2_eig(cov):
    """Eigenpairs of a symmetric 2x2 matrix from the quadratic formula."""
    a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
    disc = np.sqrt(((a - c) / 2.0) ** 2 + b * b)
    lams = np.array([(a + c) / 2.0 + disc, (a + c) / 2.0 - disc])
    vecs = []
    for lam in lams:
        if abs(b) > 1e-12:
            v = np.array([b, lam - a])
        else:
            v = np.array([1.0, 0.0]) if abs(lam - a) <= abs(lam - c) \
                else np.array([0.0, 1.0])
        vecs.append(v / np.linalg.norm(v))
    return lams, np.stack(vecs, axis=1)


def random_orthonormal(rng, dim, d):
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q[:, :d]


def test_rank_one_line():
    rng = np.random.default_rng(0)
    t = rng.normal(size=40)
    direction = np.ones(3) / np.sqrt(3.0)
    samples = t[:, None] * direction[None, :]
    proj = pca_fit(samples, d=1)
    np.testing.assert_allclose(np.abs(proj.components[:, 0]), direction, atol=1e-10)
    np.testing.assert_allclose(proj.explained_variance[0], np.var(t, ddof=1),
                               atol=1e-10)


def test_axis_aligned_dataset_matches_closed_form():
    samples = np.array([[2.0, 0.0], [0.0, 1.0], [-2.0, 0.0], [0.0, -1.0]])
    centered = samples - samples.mean(axis=0)
    cov = centered.T @ centered / (len(samples) - 1)
    lams, vecs = closed_form_2x2_eig(cov)
    np.testing.assert_allclose(lams, [8.0 / 3.0, 2.0 / 3.0], atol=1e-12)

    proj = pca_fit(samples, d=2)
    np.testing.assert_allclose(proj.explained_variance, lams, atol=1e-12)
    np.testing.assert_allclose(np.abs(proj.components), np.abs(vecs), atol=1e-12)
    np.testing.assert_allclose(np.abs(proj.components[:, 0]), [1.0, 0.0],
                               atol=1e-12)


def test_fitted_beats_random_projections():
    rng = np.random.default_rng(1)
    base = rng.normal(size=(6, 16))
    weights = rng.normal(size=(200, 6))
    samples = weights @ base + 0.01 * rng.normal(size=(200, 16))
    proj = pca_fit(samples, d=6)
    fitted_err = reconstruction_error(proj, samples)
    for _ in range(100):
        q = random_orthonormal(rng, 16, 6)
        alt = PcaProjection(mean=samples.mean(axis=0), components=q,
                            explained_variance=np.zeros(6))
        assert fitted_err <= reconstruction_error(alt, samples) + 1e-12


def test_components_orthonormal_and_variance_sorted():
    rng = np.random.default_rng(2)
    samples = rng.normal(size=(50, 12))
    proj = pca_fit(samples, d=8)
    gram = proj.components.T @ proj.components
    np.testing.assert_allclose(gram, np.eye(8), atol=1e-8)
    assert np.all(np.diff(proj.explained_variance) <= 1e-12)


def test_rank_deficient_completion():
    rng = np.random.default_rng(3)
    line = rng.normal(size=(30, 1)) * rng.normal(size=(1, 10))
    proj = pca_fit(line, d=6)
    gram = proj.components.T @ proj.components
    np.testing.assert_allclose(gram, np.eye(6), atol=1e-8)
    np.testing.assert_allclose(proj.explained_variance[1:], 0.0, atol=1e-10)


def test_project_mean_is_zero():
    rng = np.random.default_rng(4)
    samples = rng.normal(size=(20, 5))
    proj = pca_fit(samples, d=3)
    np.testing.assert_allclose(pca_project(proj, proj.mean), np.zeros(3),
                               atol=1e-12)


def test_roundtrip_on_component_span():
    rng = np.random.default_rng(5)
    samples = rng.normal(size=(30, 7))
    proj = pca_fit(samples, d=4)
    coords = rng.normal(size=4)
    v = pca_reconstruct(proj, coords)
    np.testing.assert_allclose(pca_project(proj, v), coords, atol=1e-8)


def test_projection_never_grows_norm():
    rng = np.random.default_rng(6)
    samples = rng.normal(size=(25, 9))
    proj = pca_fit(samples, d=5)
    for _ in range(20):
        v = rng.normal(size=9)
        direct = np.linalg.norm(v - proj.mean)
        assert np.linalg.norm(pca_project(proj, v)) <= direct + 1e-8


def test_too_few_samples_rejected():
    with pytest.raises(ContractError, match="2 samples"):
        pca_fit(np.zeros((1, 4)), d=2)


def test_dimension_mismatch_rejected():
    proj = pca_fit(np.random.default_rng(7).normal(size=(10, 4)), d=2)
    with pytest.raises(Exception, match="shape"):
        pca_project(proj, np.zeros(5))
