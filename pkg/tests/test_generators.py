import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nalattice.generators import (GaussianNearestNeighbor, GeneratorSpec, HeavyTailMarginal, IidHeavyTail, IidNormal,
                                  IidRademacher, Multinomial, TruncatedCentered, circulant_eigenvalues,
                                  covariance_model, exact_sigma_squared, field_model, g_trunc, h_trunc,
                                  heavy_tail_condition_check, iter_slab_blocks, kind_from_dict, kind_to_dict,
                                  parse_kind, sample_field, spec_from_dict, spec_to_dict, truncate_center,
                                  truncation_centers, truncation_schedule)
from nalattice.lattice import Field
from nalattice.oracles import DiscreteLaw, exact_distribution_tiny
from nalattice.rng import chunk_rng

ALL_KINDS = [
    IidNormal(2.0), IidRademacher(), IidHeavyTail(3.0, 1.0), GaussianNearestNeighbor(0.2), Multinomial(50),
    TruncatedCentered(IidHeavyTail(2.5), level=2.0), TruncatedCentered(IidNormal(), schedule_epsilon=8.0),
]


class TestSpecs:
    @pytest.mark.parametrize("rho", [0.0, -0.1, 0.26])
    def test_rho_range(self, rho):
        with pytest.raises(ValueError):
            GeneratorSpec(GaussianNearestNeighbor(rho), (4, 4))

    def test_rho_boundary_allowed(self):
        GeneratorSpec(GaussianNearestNeighbor(0.25), (4, 4))

    @pytest.mark.parametrize("make", [
        lambda: IidNormal(0.0), lambda: IidHeavyTail(0.0), lambda: IidHeavyTail(2.0, -1.0), lambda: Multinomial(0),
        lambda: TruncatedCentered(IidNormal()), lambda: TruncatedCentered(IidNormal(), level=-1.0),
        lambda: TruncatedCentered(IidNormal(), level=1.0, schedule_epsilon=1.0),
    ])
    def test_invalid_kinds(self, make):
        with pytest.raises(ValueError):
            make()

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_serialization_round_trip(self, kind):
        spec = GeneratorSpec(kind, (3, 5), 17)
        assert spec_from_dict(spec_to_dict(spec)) == spec
        assert kind_from_dict(kind_to_dict(kind)) == kind

    @pytest.mark.parametrize("text,kind", [
        ("rademacher", IidRademacher()),
        ("iid-normal:variance=2", IidNormal(2.0)),
        ("gauss-nn:rho=0.2", GaussianNearestNeighbor(0.2)),
        ("heavy-tail:tail=3,logpow=1", IidHeavyTail(3.0, 1.0)),
        ("multinomial:total=100", Multinomial(100)),
        ("truncated:b=1@heavy-tail:tail=3", TruncatedCentered(IidHeavyTail(3.0), level=1.0)),
    ])
    def test_parse_kind(self, text, kind):
        assert parse_kind(text) == kind

    @pytest.mark.parametrize("text", ["nope", "rademacher:x", "truncated:b=1"])
    def test_parse_kind_rejects(self, text):
        with pytest.raises(ValueError):
            parse_kind(text)


class TestSampling:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_deterministic(self, kind):
        spec = GeneratorSpec(kind, (6, 7), 5)
        a, b = sample_field(spec), sample_field(spec)
        np.testing.assert_array_equal(a.values, b.values)
        assert not np.array_equal(a.values, sample_field(spec.with_seed(6)).values)

    @pytest.mark.parametrize("kind", [IidNormal(), IidRademacher(), IidHeavyTail(2.5),
                                      TruncatedCentered(IidNormal(), schedule_epsilon=8.0)])
    def test_keyed_kinds_nest(self, kind):
        big = sample_field(GeneratorSpec(kind, (12, 10), 3)).array
        small = sample_field(GeneratorSpec(kind, (5, 4), 3)).array
        np.testing.assert_array_equal(big[:5, :4], small)

    def test_slab_blocks_cover_field(self):
        spec = GeneratorSpec(IidNormal(), (50, 30), 2)
        blocks = list(iter_slab_blocks(spec, cells_per_block=300))
        assert len(blocks) == 5
        np.testing.assert_array_equal(np.concatenate(blocks), sample_field(spec).array)

    def test_non_keyed_window_limit(self):
        spec = GeneratorSpec(GaussianNearestNeighbor(0.1), (8, 8), 1)
        with pytest.raises(ValueError):
            list(iter_slab_blocks(spec, (9, 9)))

    def test_rademacher_values(self):
        x = field_model(GeneratorSpec(IidRademacher(), (50, 50))).sample_batch(chunk_rng(1, 0, 0), 20)
        assert set(np.unique(x)) == {-1, 1}
        assert abs(x.mean()) < 4 / math.sqrt(x.size)

    def test_multinomial_centered_exactly(self):
        model = field_model(GeneratorSpec(Multinomial(100), (8, 8)))
        x = model.sample_batch(chunk_rng(2, 0, 0), 200)
        np.testing.assert_allclose(x.reshape(200, -1).sum(axis=1), 0.0, atol=1e-9)
        assert np.all((x + 100 / 64) % 1 == 0)

    def test_multinomial_two_balls_two_cells_law(self):
        law = DiscreteLaw.multinomial(2, (2,))
        dist = {tuple(o): p for o, p in zip(law.outcomes, law.probs)}
        assert dist == pytest.approx({(1.0, -1.0): 0.25, (0.0, 0.0): 0.5, (-1.0, 1.0): 0.25})
        model = field_model(GeneratorSpec(Multinomial(2), (2,)))
        x = model.sample_batch(chunk_rng(3, 0, 0), 40_000)
        freq = np.mean(x[:, 0] == 1.0)
        assert abs(freq - 0.25) < 4 * math.sqrt(0.25 * 0.75 / 40_000)

    def test_totals_match_batches_in_law(self):
        # Rademacher totals come from a popcount path; compare moments with the exact law
        model = field_model(GeneratorSpec(IidRademacher(), (10, 13)))
        s = model.sample_totals(chunk_rng(4, 0, 0), 50_000)
        assert np.all((s + 130) % 2 == 0)
        assert abs(s.mean()) < 4 * math.sqrt(130 / 50_000)
        assert s.var() == pytest.approx(130, rel=0.03)


class TestGaussianNearestNeighbor:
    @pytest.mark.parametrize("d,rho", [(1, 0.5), (2, 0.25), (3, 1 / 6), (2, 0.1)])
    def test_embedding_is_psd(self, d, rho):
        lam = circulant_eigenvalues(GeneratorSpec(GaussianNearestNeighbor(rho), (9,) * d).shape, rho)
        assert lam.min() >= 0

    def test_covariance_matches_model(self):
        spec = GeneratorSpec(GaussianNearestNeighbor(0.2), (6, 6), 1)
        model = field_model(spec)
        x = model.sample_batch(chunk_rng(7, 0, 0), 100_000)
        cov = covariance_model(spec)
        centre = x[:, 2, 2]
        for j in [(0, 0), (0, 1), (1, 0), (1, 1), (0, 2), (2, 0), (-1, 0)]:
            other = x[:, 2 + j[0], 2 + j[1]]
            prod = centre * other
            se = prod.std() / math.sqrt(prod.size)
            assert abs(prod.mean() - cov(j)) < 4 * se, j

    def test_total_variance_closed_form(self):
        model = field_model(GeneratorSpec(GaussianNearestNeighbor(0.2), (16, 16)))
        assert model.total_variance() == pytest.approx(256 - 0.2 * 960)


class TestSigma:
    @pytest.mark.parametrize("d", [1, 2, 3])
    @pytest.mark.parametrize("rho", [0.05, 0.1])
    def test_gauss_nn_anchor(self, d, rho):
        spec = GeneratorSpec(GaussianNearestNeighbor(rho), (3,) * d)
        assert exact_sigma_squared(spec) + 2 * d * rho == 1.0

    def test_boundary_is_zero(self):
        assert exact_sigma_squared(GeneratorSpec(GaussianNearestNeighbor(0.25), (3, 3))) == 0.0

    def test_iid(self):
        assert exact_sigma_squared(GeneratorSpec(IidNormal(1.0), (2, 2, 2))) == 1.0
        assert exact_sigma_squared(GeneratorSpec(IidNormal(3.5), (2,))) == 3.5

    def test_covariance_model_sum(self):
        spec = GeneratorSpec(GaussianNearestNeighbor(0.2), (4, 4))
        assert covariance_model(spec).sigma_squared == pytest.approx(0.2)

    def test_multinomial_rejected(self):
        with pytest.raises(ValueError):
            exact_sigma_squared(GeneratorSpec(Multinomial(5), (3,)))


class TestHeavyTail:
    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.5, 6.0), st.floats(0.0, 4.0), st.floats(1e-12, 1.0))
    def test_ppf_inverts_tail(self, a, q, u):
        m = HeavyTailMarginal(a, q)
        x = float(m.ppf_abs(np.array([u]))[0])
        assert x >= 1.0
        assert float(m.tail_abs(np.array([x]))[0]) == pytest.approx(u, rel=1e-9)

    def test_tail_is_proper(self):
        m = HeavyTailMarginal(3.0, 2.0)
        assert float(m.tail_abs(np.array([1.0]))[0]) == 1.0
        xs = np.linspace(1, 100, 500)
        assert np.all(np.diff(m.tail_abs(xs)) <= 0)

    def test_sampler_matches_tail(self):
        spec = GeneratorSpec(IidHeavyTail(2.5, 1.0), (100, 100), 3)
        x = np.abs(sample_field(spec).values)
        m = HeavyTailMarginal(2.5, 1.0)
        for t in (1.5, 3.0, 10.0):
            p = float(m.tail_abs(np.array([t]))[0])
            assert abs(np.mean(x > t) - p) < 4 * math.sqrt(p * (1 - p) / x.size)

    def test_second_moment_closed_form(self):
        m = HeavyTailMarginal(4.0, 0.0)
        # P(|X| > x) = x^-4 on x >= 1 gives E X^2 = 1 + int_1^inf 2x * x^-4 dx = 2
        assert m.abs_moment(2.0) == pytest.approx(2.0, rel=1e-9)
        assert m.abs_moment(4.0) == math.inf

    @pytest.mark.parametrize("a,q,d,want", [
        (3.0, 0.0, 2, True), (3.0, 5.0, 2, True), (2.0, 1.0, 2, False), (2.0, 4.0, 2, True),
        (2.0, 2.0, 2, False), (1.5, 10.0, 1, False), (2.0, 1.5, 1, True),
    ])
    def test_condition_check(self, a, q, d, want):
        assert heavy_tail_condition_check(a, q, d) is want

    def test_condition_check_rejects(self):
        with pytest.raises(ValueError):
            heavy_tail_condition_check(0.0, 1.0, 2)


class TestTruncation:
    def test_direct_clipping(self):
        f = Field.from_array(np.array([-3.0, 0.5, 2.0]))
        g, h = truncate_center(f, 1.0)
        np.testing.assert_array_equal(g.values, [-1.0, 0.5, 1.0])
        np.testing.assert_array_equal(h.values, [-2.0, 0.0, 1.0])

    def test_large_level_leaves_no_remainder(self):
        f = Field.from_array(np.array([[-3.0, 0.5], [2.0, 1.0]]))
        _, h = truncate_center(f, 10.0)
        assert np.all(h.values == 0)

    def test_decomposition_identity(self):
        # h = x - g is rounded once, so the identity holds to one ulp
        x = np.random.default_rng(0).standard_cauchy(10_000)
        for b in (0.1, 1.0, 7.5):
            err = np.abs(g_trunc(x, b) + h_trunc(x, b) - x)
            assert np.all(err <= np.spacing(np.abs(x)))

    @settings(max_examples=40)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(0.01, 10.0), st.floats(0, 5))
    def test_monotone(self, values, b, shift):
        x = np.array(values)
        g1, h1 = truncate_center(Field.from_array(x), b, centers=(0.3, -0.2))
        g2, h2 = truncate_center(Field.from_array(x + shift), b, centers=(0.3, -0.2))
        assert np.all(g1.values <= g2.values) and np.all(h1.values <= h2.values)

    def test_centering_reconstructs(self):
        x = np.random.default_rng(1).standard_normal((5, 5))
        cg, ch = truncation_centers(IidNormal(), 0.7)
        g, h = truncate_center(Field.from_array(x), 0.7, centers=(cg, ch))
        np.testing.assert_allclose(g.array + h.array + cg + ch, x, atol=1e-15)

    def test_rejects_nonpositive_level(self):
        with pytest.raises(ValueError):
            truncate_center(Field.from_array(np.ones(3)), 0.0)

    @pytest.mark.parametrize("m,eps,s2,want", [(1, 40.0, 1.0, 1.0), (100, 40.0, 4.0, 16.18)])
    def test_schedule_examples(self, m, eps, s2, want):
        assert truncation_schedule(m, eps, s2) == pytest.approx(want, abs=5e-3)

    def test_schedule_rejects_zero_moment(self):
        with pytest.raises(ValueError):
            truncation_schedule(10, 1.0, 0.0)

    def test_truncated_field_is_centered_and_bounded(self):
        spec = GeneratorSpec(TruncatedCentered(IidHeavyTail(2.2, 0.0), level=3.0), (40, 40), 8)
        model = field_model(spec)
        x = sample_field(spec).values
        assert np.abs(x).max() <= model.bound
        assert abs(x.mean()) < 4 * x.std() / math.sqrt(x.size)

    def test_truncated_rademacher_law_exact(self):
        spec = GeneratorSpec(TruncatedCentered(IidRademacher(), level=0.5), (2,))
        m = field_model(spec)
        assert m.second_moment_sum() == pytest.approx(0.5)
        law = DiscreteLaw.iid([-0.5, 0.5], [0.5, 0.5], (2,))
        dist = exact_distribution_tiny(law, "S")
        assert dist == [(-1.0, 0.25), (0.0, 0.5), (1.0, 0.25)]


class TestClosedFormMoments:
    @pytest.mark.parametrize("kind", [IidNormal(1.5), IidRademacher(), IidHeavyTail(4.5, 1.0), Multinomial(30),
                                      TruncatedCentered(IidNormal(), level=1.0), GaussianNearestNeighbor(0.15)])
    def test_second_and_third_moments_against_mc(self, kind):
        model = field_model(GeneratorSpec(kind, (4, 5), 1))
        x = model.sample_batch(chunk_rng(9, 0, 0), 40_000).reshape(40_000, -1).astype(np.float64)
        for p, closed in ((2.0, model.second_moment_sum()), (3.0, model.abs_moment_sum(3.0))):
            per_rep = (np.abs(x) ** p).sum(axis=1)
            se = per_rep.std() / math.sqrt(per_rep.size)
            assert abs(per_rep.mean() - closed) <= 5 * se + 1e-9, p

    @pytest.mark.parametrize("kind", [IidNormal(), GaussianNearestNeighbor(0.2), Multinomial(7), IidRademacher()])
    def test_total_variance_against_mc(self, kind):
        model = field_model(GeneratorSpec(kind, (3, 4), 2))
        s = model.sample_batch(chunk_rng(10, 0, 0), 60_000).reshape(60_000, -1).sum(axis=1)
        var = model.total_variance()
        se = np.std((s - s.mean()) ** 2) / math.sqrt(s.size)
        assert abs(s.var() - var) < 5 * se + 1e-9

    def test_cross_covariances(self):
        m = field_model(GeneratorSpec(Multinomial(12), (2, 3)))
        # six cells, each pair has Cov = -12/36
        assert m.cross_cov_abs_sum() == pytest.approx(30 * 12 / 36)
        g = field_model(GeneratorSpec(GaussianNearestNeighbor(0.1), (3, 3)))
        assert g.cross_cov_abs_sum() == pytest.approx(0.1 * 24)

    def test_max_exceed_prob(self):
        m = field_model(GeneratorSpec(IidRademacher(), (8, 8)))
        assert m.max_exceed_prob(2.0) == 0.0
        n = field_model(GeneratorSpec(IidNormal(), (2,)))
        p = 0.5 * math.erfc(1 / math.sqrt(2))
        assert n.max_exceed_prob(1.0) == pytest.approx(1 - (1 - p) ** 2, rel=1e-9)
