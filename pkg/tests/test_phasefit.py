import json
import math

import numpy as np
import pytest
from scipy import stats

from subcell.phasefit import (DurationSamples, PhaseTypeDist, PhaseTypeError, dump_dist,
                              empht_fit, load_dist, ph_cdf, ph_mean, ph_moment, ph_pdf,
                              ph_sample, read_durations)


def exp60():
    return PhaseTypeDist(np.array([1.0]), np.array([[-1 / 60]]))


def erlang2(mu=0.1):
    return PhaseTypeDist(np.array([1.0, 0.0]), np.array([[-mu, mu], [0.0, -mu]]))


def random_ph(rng, m):
    alpha = rng.dirichlet(np.ones(m))
    off = rng.uniform(0, 1, (m, m))
    np.fill_diagonal(off, 0)
    exit_ = rng.uniform(0.1, 1, m)
    return PhaseTypeDist(alpha, off - np.diag(off.sum(1) + exit_))


class TestValidation:
    def test_alpha_must_sum_to_one(self):
        with pytest.raises(PhaseTypeError):
            PhaseTypeDist(np.array([0.5, 0.4]), np.array([[-1.0, 0.0], [0.0, -1.0]]))

    def test_rejects_positive_off_diagonal_row_sum(self):
        with pytest.raises(PhaseTypeError):
            PhaseTypeDist(np.array([1.0, 0.0]), np.array([[-1.0, 2.0], [0.0, -1.0]]))

    def test_rejects_non_absorbing(self):
        with pytest.raises(PhaseTypeError):
            PhaseTypeDist(np.array([1.0, 0.0]), np.array([[-1.0, 1.0], [1.0, -1.0]]))

    def test_samples_reject_nonpositive(self):
        with pytest.raises(PhaseTypeError):
            DurationSamples([1.0, -2.0])
        with pytest.raises(PhaseTypeError, match="no samples"):
            DurationSamples([])


class TestCdf:
    def test_zero(self):
        assert ph_cdf(exp60(), 0.0) == 0.0

    def test_exponential_closed_form(self):
        assert ph_cdf(exp60(), 60.0) == pytest.approx(1 - math.exp(-1), abs=1e-12)

    def test_erlang2_closed_form(self):
        assert ph_cdf(erlang2(), 20.0) == pytest.approx(1 - math.exp(-2) * 3, abs=1e-12)

    def test_matches_gamma_oracle(self):
        d = PhaseTypeDist.erlang(4, 0.2)
        x = np.linspace(0, 80, 50)
        np.testing.assert_allclose(ph_cdf(d, x), stats.gamma(4, scale=5).cdf(x), atol=1e-12)
        np.testing.assert_allclose(ph_pdf(d, x), stats.gamma(4, scale=5).pdf(x), atol=1e-12)

    def test_monotone_and_tends_to_one(self):
        rng = np.random.default_rng(3)
        for m in (1, 2, 4):
            d = random_ph(rng, m)
            x = np.linspace(0, 10 * ph_mean(d), 1000)
            f = ph_cdf(d, x)
            assert np.all(np.diff(f) >= -1e-14)
            assert f[-1] > 1 - 1e-3

    def test_negative_x(self):
        with pytest.raises(PhaseTypeError):
            ph_cdf(exp60(), -1.0)


class TestMoments:
    def test_means(self):
        assert ph_mean(exp60()) == pytest.approx(60)
        assert ph_mean(erlang2()) == pytest.approx(20)

    def test_scaling(self):
        d = random_ph(np.random.default_rng(1), 3)
        assert ph_mean(d.scaled(2.5)) == pytest.approx(ph_mean(d) / 2.5)

    def test_second_moment_against_gamma(self):
        d = PhaseTypeDist.erlang(3, 0.5)
        assert ph_moment(d, 2) == pytest.approx(stats.gamma(3, scale=2).moment(2))


class TestSampling:
    def test_exponential_mean(self):
        x = ph_sample(exp60(), 1, 100_000)
        assert x.mean() == pytest.approx(60, rel=0.02)

    def test_seeded(self):
        np.testing.assert_array_equal(ph_sample(erlang2(), 5, 100), ph_sample(erlang2(), 5, 100))

    def test_erlang_variance(self):
        x = ph_sample(erlang2(), 2, 100_000)
        assert x.var() == pytest.approx(2 / 0.01, rel=0.05)

    @pytest.mark.parametrize("m", [1, 2, 4])
    def test_ks_against_cdf(self, m):
        d = random_ph(np.random.default_rng(10 + m), m)
        x = np.sort(ph_sample(d, 4, 100_000))
        ecdf = np.arange(1, x.size + 1) / x.size
        assert np.max(np.abs(ecdf - ph_cdf(d, x))) <= 0.01


class TestEm:
    def test_exponential_mle(self):
        x = np.random.default_rng(0).exponential(60, 10_000)
        fit = empht_fit(x, m=1)
        assert fit.converged
        assert ph_mean(fit.dist) == pytest.approx(x.mean(), rel=1e-6)
        assert ph_mean(fit.dist) == pytest.approx(60, rel=0.03)
        assert fit.dist.rate_matrix.shape == (1, 1)

    def test_lognormal_mean_and_monotone(self):
        x = np.random.default_rng(1).lognormal(math.log(60), 0.063, 60)
        fit = empht_fit(x, m=4)
        assert ph_mean(fit.dist) == pytest.approx(x.mean(), rel=0.05)
        assert np.all(np.diff(fit.loglik) >= -1e-9)
        assert fit.dist.alpha.sum() == pytest.approx(1, abs=1e-9)
        assert np.all(fit.dist.rate_matrix.sum(1) <= 1e-9)

    def test_loglik_matches_density(self):
        x = np.random.default_rng(2).gamma(2.0, 10.0, 300)
        fit = empht_fit(x, m=2, max_iters=50)
        ll = float(np.sum(np.log(ph_pdf(fit.dist, x))))
        assert fit.loglik[-1] == pytest.approx(ll, rel=1e-9)

    def test_unpacks(self):
        dist, trace = empht_fit([1.0, 2.0, 3.0, 4.0, 5.0], m=1)
        assert isinstance(dist, PhaseTypeDist) and len(trace) >= 1

    def test_warnings(self):
        fit = empht_fit([5.0] * 8, m=2)
        assert fit.status == "ill_conditioned"
        assert empht_fit([1.0, 2.0, 3.0], m=1).status == "warning"

    def test_too_few_samples(self):
        with pytest.raises(PhaseTypeError):
            empht_fit([1.0], m=2)


class TestIo:
    def test_read(self, tmp_path):
        p = tmp_path / "d.txt"
        p.write_text("# stays\n1.5\n\n2.5\n")
        assert read_durations(p).values.tolist() == [1.5, 2.5]

    def test_read_errors(self, tmp_path):
        p = tmp_path / "d.txt"
        p.write_text("1\nabc\n")
        with pytest.raises(PhaseTypeError, match="line 2"):
            read_durations(p)
        p.write_text("\n# nothing\n")
        with pytest.raises(PhaseTypeError, match="no samples"):
            read_durations(p)

    def test_round_trip(self, tmp_path):
        d = random_ph(np.random.default_rng(4), 3)
        p = tmp_path / "ph.json"
        dump_dist(d, p, [-1.0, -0.5])
        back = load_dist(p)
        np.testing.assert_array_equal(back.alpha, d.alpha)
        np.testing.assert_array_equal(back.rate_matrix, d.rate_matrix)
        assert json.loads(p.read_text())["loglik"] == [-1.0, -0.5]
