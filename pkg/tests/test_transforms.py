import numpy as np
import pytest

from svback.core import DataError, EmbeddingSet
from svback.linalg import covariance
from svback.transforms import (DegenerateWarning, LinearTransform, PipelineConfig, apply_transform,
                               compose, fit_center, fit_coral, fit_lda, fit_pipeline,
                               fit_whitener, length_normalize, length_normalize_set,
                               stack_embeddings)


def _es(x, labels=None):
    x = np.asarray(x, dtype=float)
    ids = [f"u{i}" for i in range(len(x))]
    lab = None if labels is None else dict(zip(ids, map(str, labels)))
    return EmbeddingSet(ids, x, lab)


class TestCenter:
    def test_offset(self):
        t = fit_center(_es([[1, 1], [3, 3]]))
        np.testing.assert_array_equal(t.offset, [-2, -2])
        np.testing.assert_array_equal(t.matrix, np.eye(2))

    def test_single_vector(self):
        out = apply_transform(fit_center(_es([[4.0, -1.0]])), _es([[4.0, -1.0]]))
        np.testing.assert_array_equal(out.vectors, [[0, 0]])

    def test_centered_set(self, rng):
        x = rng.standard_normal((100, 3))
        x -= x.mean(axis=0)
        assert np.abs(fit_center(_es(x)).offset).max() < 1e-12

    def test_mean_zero(self, rng):
        es = _es(rng.standard_normal((50, 4)) + 7)
        assert np.abs(apply_transform(fit_center(es), es).vectors.mean(axis=0)).max() < 1e-10

    def test_empty(self):
        with pytest.raises(DataError):
            fit_center(EmbeddingSet([], np.zeros((0, 2))))


class TestWhitener:
    def test_identity_covariance(self, rng):
        x = rng.standard_normal((500, 3))
        x = (x - x.mean(0)) @ np.linalg.inv(np.linalg.cholesky(covariance(x))).T
        np.testing.assert_allclose(fit_whitener(_es(x)).matrix, np.eye(3), atol=1e-10)

    def test_scale_half(self):
        x = np.array([[-2.0], [2.0]])  # variance 4
        assert fit_whitener(_es(x)).matrix[0, 0] == pytest.approx(0.5)

    def test_gaussian_sample(self, rng):
        a = rng.standard_normal((5, 5))
        es = _es(rng.standard_normal((10000, 5)) @ a.T + 3)
        out = apply_transform(fit_whitener(es), es)
        assert np.abs(covariance(out.vectors) - np.eye(5)).max() < 0.05
        off = covariance(out.vectors) - np.diag(np.diag(covariance(out.vectors)))
        assert np.abs(off).max() < 1e-6

    def test_refit_is_identity(self, rng):
        es = _es(rng.standard_normal((300, 4)) @ rng.standard_normal((4, 4)))
        out = apply_transform(fit_whitener(es), es)
        t2 = fit_whitener(out)
        np.testing.assert_allclose(t2.matrix, np.eye(4), atol=1e-6)
        np.testing.assert_allclose(t2.offset, 0, atol=1e-6)

    def test_symmetric_root(self, rng):
        t = fit_whitener(_es(rng.standard_normal((200, 3)) * [1, 2, 3]))
        np.testing.assert_allclose(t.matrix, t.matrix.T, atol=1e-12)

    def test_singular(self):
        with pytest.raises(DataError, match="positive definite"):
            fit_whitener(_es([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]))

    def test_ridge_rescues_singular(self):
        t = fit_whitener(_es([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]), ridge=0.1)
        assert np.all(np.isfinite(t.matrix))


class TestLda:
    def _two_class(self, rng, n=400):
        lab = np.repeat(np.arange(4), n // 4)
        means = np.column_stack([np.arange(4) * 3.0, np.zeros(4)])
        return _es(means[lab] + rng.standard_normal((n, 2)), lab)

    def test_direction(self, rng):
        t = fit_lda(self._two_class(rng), 1)
        v = t.matrix[0] / np.linalg.norm(t.matrix[0])
        assert abs(v[0]) > 0.99

    def test_generalized_eigenproblem(self, rng):
        from svback.transforms import class_scatter
        lab = np.repeat(np.arange(6), 30)
        es = _es(rng.standard_normal((6, 4))[lab] * 2 + rng.standard_normal((180, 4)), lab)
        t = fit_lda(es, 3, ridge_scale=0.0)
        _, sw, sb, _ = class_scatter(es.vectors, es.label_array())
        lam = []
        for v in t.matrix:
            lam.append(v @ sb @ v / (v @ sw @ v))
            np.testing.assert_allclose(sb @ v, lam[-1] * sw @ v, atol=1e-8)
        assert lam == sorted(lam, reverse=True)

    def test_out_dim_too_large(self, rng):
        es = self._two_class(rng)
        with pytest.raises(DataError):
            fit_lda(es, 3)  # n_classes = 4, dim = 2
        lab = np.repeat(np.arange(3), 10)
        with pytest.raises(DataError):
            fit_lda(_es(rng.standard_normal((30, 5)), lab), 3)  # out_dim = n_classes

    def test_identical_means_warns(self, rng):
        lab = np.repeat([0, 1], 50)
        x = rng.standard_normal((100, 3))
        x[lab == 1] = x[lab == 0]  # identical class samples, so identical means
        with pytest.warns(DegenerateWarning):
            t = fit_lda(_es(x, lab), 1)
        assert t.out_dim == 1

    def test_affine_invariance(self, rng):
        lab = np.repeat(np.arange(5), 40)
        x = rng.standard_normal((5, 3))[lab] * 2 + rng.standard_normal((200, 3))
        a = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        b = rng.standard_normal(3)
        p1 = apply_transform(fit_lda(_es(x, lab), 2, 0.0), _es(x, lab)).vectors
        y = x @ a.T + b
        p2 = apply_transform(fit_lda(_es(y, lab), 2, 0.0), _es(y, lab)).vectors
        for k in range(2):
            c = np.corrcoef(p1[:, k], p2[:, k])[0, 1]
            assert abs(abs(c) - 1) < 1e-8


class TestLengthNorm:
    def test_example(self):
        np.testing.assert_allclose(length_normalize(np.array([3.0, 4.0])), [0.6, 0.8])

    def test_unit(self):
        v = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(length_normalize(v), v)

    def test_zero(self):
        with pytest.raises(DataError):
            length_normalize(np.zeros(2))

    def test_idempotent(self, rng):
        x = length_normalize(rng.standard_normal((20, 5)))
        np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1, atol=1e-12)
        np.testing.assert_allclose(length_normalize(x), x, atol=1e-15)

    def test_set(self, rng):
        es = length_normalize_set(_es(rng.standard_normal((5, 3))))
        np.testing.assert_allclose(np.linalg.norm(es.vectors, axis=1), 1)


class TestCoral:
    def test_equal_covariances(self, rng):
        x = rng.standard_normal((500, 3))
        np.testing.assert_allclose(fit_coral(_es(x), _es(x)).matrix, np.eye(3), atol=1e-10)

    def test_weight_zero(self, rng):
        t = fit_coral(_es(rng.standard_normal((300, 3))), _es(5 * rng.standard_normal((300, 3))), 0.0)
        np.testing.assert_allclose(t.matrix, np.eye(3), atol=1e-10)
        np.testing.assert_allclose(t.offset, 0, atol=1e-10)

    def test_diagonal_closed_form(self, rng):
        z = rng.standard_normal((4000, 2))
        z = (z - z.mean(0)) @ np.linalg.inv(np.linalg.cholesky(covariance(z))).T
        t = fit_coral(_es(z * [2.0, 1.0]), _es(z * [1.0, 2.0]), 1.0)
        np.testing.assert_allclose(t.matrix, np.diag([0.5, 2.0]), atol=1e-10)

    def test_full_weight_matches_in_domain(self, rng):
        out = _es(rng.standard_normal((2000, 3)) @ rng.standard_normal((3, 3)))
        inn = _es(rng.standard_normal((2000, 3)) @ rng.standard_normal((3, 3)) + 1)
        mapped = apply_transform(fit_coral(out, inn, 1.0), out)
        np.testing.assert_allclose(covariance(mapped.vectors), covariance(inn.vectors), atol=1e-9)
        np.testing.assert_allclose(mapped.vectors.mean(0), inn.vectors.mean(0), atol=1e-9)

    def test_rank_deficient_warns(self, rng):
        x = rng.standard_normal((50, 1)) * [1.0, 1.0]
        with pytest.warns(DegenerateWarning):
            fit_coral(_es(x), _es(rng.standard_normal((50, 2))))

    def test_bad_weight(self, rng):
        es = _es(rng.standard_normal((10, 2)))
        with pytest.raises(DataError):
            fit_coral(es, es, 1.5)


class TestStacking:
    def _sets(self, dims, n=3):
        return [_es(np.full((n, d), float(k))) for k, d in enumerate(dims)]

    @pytest.mark.parametrize("dims,total", [([512] * 4, 2048), ([512] * 6, 3072),
                                            ([512] * 4 + [256], 2304)])
    def test_dims(self, dims, total):
        assert stack_embeddings(self._sets(dims)).dim == total

    def test_single(self, rng):
        es = _es(rng.standard_normal((4, 3)))
        out = stack_embeddings([es])
        np.testing.assert_array_equal(out.vectors, es.vectors)

    def test_associative(self, rng):
        a, b, c = (_es(rng.standard_normal((4, d))) for d in (2, 3, 1))
        np.testing.assert_array_equal(stack_embeddings([stack_embeddings([a, b]), c]).vectors,
                                      stack_embeddings([a, b, c]).vectors)

    def test_order_follows_first_set(self, rng):
        a = _es(rng.standard_normal((3, 2)))
        b = a.subset(["u2", "u0", "u1"])
        out = stack_embeddings([a, b])
        np.testing.assert_array_equal(out.vectors[:, 2:], a.vectors)

    def test_mismatch_named(self, rng):
        a = _es(rng.standard_normal((3, 2)))
        with pytest.raises(DataError, match="u2"):
            stack_embeddings([a, a.subset(["u0", "u1"])])


class TestTransform:
    def test_identity(self, rng):
        es = _es(rng.standard_normal((5, 3)))
        np.testing.assert_array_equal(apply_transform(LinearTransform.identity(3), es).vectors,
                                      es.vectors)

    def test_compose(self, rng):
        es = _es(rng.standard_normal((100, 3)) @ rng.standard_normal((3, 3)) + 2)
        c, w = fit_center(es), fit_whitener(apply_transform(fit_center(es), es))
        seq = apply_transform(w, apply_transform(c, es)).vectors
        np.testing.assert_allclose(apply_transform(compose(c, w), es).vectors, seq, atol=1e-10)

    def test_zero_matrix(self, rng):
        t = LinearTransform(np.zeros((2, 3)), [1.0, -1.0])
        out = apply_transform(t, _es(rng.standard_normal((4, 3))))
        np.testing.assert_array_equal(out.vectors, np.tile([1.0, -1.0], (4, 1)))

    def test_dim_mismatch(self, rng):
        with pytest.raises(DataError):
            apply_transform(LinearTransform.identity(2), _es(rng.standard_normal((2, 3))))

    def test_serialization(self, rng):
        t = LinearTransform(rng.standard_normal((2, 3)), rng.standard_normal(2))
        back = LinearTransform.from_bytes(t.to_bytes())
        np.testing.assert_array_equal(back.matrix, t.matrix)
        np.testing.assert_array_equal(back.offset, t.offset)

    def test_metadata_carried(self):
        es = EmbeddingSet(["a"], [[1.0, 2.0]], {"a": "s"}, {"a": "A"}, {"a": 3.0})
        out = apply_transform(LinearTransform.identity(2), es)
        assert (out.labels, out.domains, out.durations) == (es.labels, es.domains, es.durations)


class TestPipeline:
    def test_order_and_output(self, small_corpus):
        _, es = small_corpus
        p = fit_pipeline(es, PipelineConfig(lda_dim=4))
        assert p.stages == ["center", "whiten", "lda", "length_norm"]
        out = p.apply(es)
        assert out.dim == 4
        np.testing.assert_allclose(np.linalg.norm(out.vectors, axis=1), 1)

    def test_coral_needs_in_domain(self, small_corpus):
        with pytest.raises(DataError):
            fit_pipeline(small_corpus[1], PipelineConfig(coral_weight=0.5))
