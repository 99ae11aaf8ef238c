import math

import numpy as np
import pytest

from subcell.maxdet import Block, solve_maxdet
from subcell.mimo_core import bd_precoders, sample_channel, sample_error
from subcell.robust_bf import (BeamformerSolution, BfError, RobustBfProblem, assemble_lmi,
                               beamformer_from_Q, feasibility_report, hermitian_basis,
                               interference, solve_p2, solve_p2_batch, water_filling,
                               water_filling_capacity)


def random_psd(rng, n, rank=None):
    a = sample_channel(n, rank or n, rng)
    return a @ a.conj().T


def make_problem(rng, eps_sq=0.1, zeta=1.0, p_sap=10.0, n_c=2, null_inhabitants=True):
    hs = sample_channel(2, 8, rng, size=(n_c, 2))
    hi = sample_channel(2, 8, rng, size=(n_c, 2))
    est = hi - math.sqrt(eps_sq) * sample_channel(2, 8, rng, size=(n_c, 2))
    extra = est.reshape(n_c, 4, 8) if null_inhabitants else None
    w, s = bd_precoders(hs, extra)
    return RobustBfProblem(s, w, est, eps_sq, zeta, p_sap, 100.0, 8, math.e)


class TestInterference:
    def test_trivial(self):
        h = sample_channel(2, 4, 0)
        assert interference(h, np.zeros((4, 4))) == 0.0
        q, _ = np.linalg.qr(sample_channel(4, 4, 1))
        assert interference(q[:2], np.eye(4)) == pytest.approx(2.0)

    def test_loop_oracle(self):
        rng = np.random.default_rng(2)
        h, q = sample_channel(2, 5, rng), random_psd(rng, 5)
        total = 0j
        for r in range(2):
            for a in range(5):
                for b in range(5):
                    total += h[r, a] * q[a, b] * np.conj(h[r, b])
        assert interference(h, q) == pytest.approx(total.real, abs=1e-10)

    def test_shape(self):
        with pytest.raises(BfError):
            interference(np.zeros((2, 3)), np.eye(4))


class TestLmi:
    def test_zero_covariance(self):
        m = assemble_lmi(np.zeros((4, 4)), sample_channel(2, 4, 0), 0.3, 1.5, 0.0)
        assert m.shape == (9, 9)
        np.testing.assert_array_equal(m[:8, :8], 0)
        assert m[8, 8] == 1.5

    def test_hermitian(self):
        rng = np.random.default_rng(1)
        m = assemble_lmi(random_psd(rng, 4), sample_channel(2, 4, rng), 0.5, 2.0, 3.0)
        np.testing.assert_allclose(m, m.conj().T, atol=0)

    def test_schur_oracle(self):
        rng = np.random.default_rng(3)
        agree = 0
        for _ in range(50):
            q = 0.3 * random_psd(rng, 4, 2)
            h = sample_channel(2, 4, rng)
            eps, zeta = rng.uniform(0, 1), rng.uniform(0.5, 5)
            alpha = np.linalg.eigvalsh(q).max() * rng.uniform(1.05, 3)
            m = assemble_lmi(q, h, eps, zeta, alpha)
            b = (q @ h.conj().T).reshape(-1, order="F")
            a = alpha * np.eye(8) - np.kron(np.eye(2), q)
            k = zeta - np.trace(h @ q @ h.conj().T).real
            schur = k - alpha * eps - (b.conj() @ np.linalg.solve(a, b)).real
            assert (np.linalg.eigvalsh(m)[0] >= -1e-12) == (schur >= -1e-12)
            agree += 1
        assert agree == 50

    def test_eps_zero_reduces_to_trace(self):
        rng = np.random.default_rng(4)
        q, h = random_psd(rng, 4, 2), sample_channel(2, 4, rng)
        tr = np.trace(h @ q @ h.conj().T).real
        big = 1e6
        assert np.linalg.eigvalsh(assemble_lmi(q, h, 0.0, tr * 1.01, big))[0] >= 0
        assert np.linalg.eigvalsh(assemble_lmi(q, h, 0.0, tr * 0.99, big))[0] < 0

    def test_lmi_implies_robustness(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            q, h = 0.2 * random_psd(rng, 8, 2), sample_channel(2, 8, rng)
            eps = 0.5
            alpha = 2 * np.linalg.eigvalsh(q).max()
            b = (q @ h.conj().T).reshape(-1, order="F")
            a = alpha * np.eye(16) - np.kron(np.eye(2), q)
            zeta = (np.trace(h @ q @ h.conj().T).real + alpha * eps
                    + (b.conj() @ np.linalg.solve(a, b)).real) * (1 + 1e-9)
            assert np.linalg.eigvalsh(assemble_lmi(q, h, eps, zeta, alpha))[0] >= -1e-10
            dh = sample_error((10_000, 2, 8), eps, "boundary", rng)
            ht = h + dh
            vals = np.einsum("nij,jk,nik->n", ht, q, ht.conj()).real
            assert vals.max() <= zeta * (1 + 1e-9)


def test_hermitian_basis_spans():
    b = hermitian_basis(3)
    assert b.shape == (9, 3, 3)
    flat = np.concatenate([b.real.reshape(9, -1), b.imag.reshape(9, -1)], axis=1)
    assert np.linalg.matrix_rank(flat) == 9
    np.testing.assert_array_equal(b, np.swapaxes(b, 1, 2).conj())


def test_maxdet_analytic():
    # maximize log det X with tr X <= 1 over 2x2 real diagonal X
    c = np.zeros((1, 3, 2, 2))
    c[0, 1, 0, 0] = c[0, 2, 1, 1] = 1
    power = np.zeros((1, 3, 1, 1))
    power[0, 0] = 1
    power[0, 1:, 0, 0] = -1
    res = solve_maxdet([Block(c, objective=True), Block(power)], np.array([[0.1, 0.1]]))
    assert res.status[0] == "optimal"
    np.testing.assert_allclose(res.x[0], [0.5, 0.5], atol=1e-5)
    assert res.objective[0] == pytest.approx(2 * math.log(0.5), abs=1e-6)


class TestSolve:
    def test_water_filling_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            pr = make_problem(rng, eps_sq=0.0, zeta=math.inf)
            sol = solve_p2(pr)
            wf = water_filling_capacity(pr.sigmas, pr.p_sap, pr.snr, pr.n_st_star, math.e)
            assert sol.status == "optimal"
            assert sol.objective == pytest.approx(wf, rel=1e-4)

    def test_zero_power(self):
        sol = solve_p2(make_problem(np.random.default_rng(1), p_sap=0.0))
        assert sol.status == "optimal" and sol.objective == 0.0
        assert np.all(sol.Q == 0)

    def test_nonpositive_zeta(self):
        rng = np.random.default_rng(2)
        assert solve_p2(make_problem(rng, zeta=0.0)).status == "infeasible"
        assert solve_p2(make_problem(rng, zeta=-1.0)).status == "infeasible"

    def test_certificates(self):
        rng = np.random.default_rng(3)
        for eps, zeta in [(0.1, 0.5), (1.0, 1.0), (5.0, 2.0)]:
            pr = make_problem(rng, eps, zeta)
            sol = solve_p2(pr)
            assert sol.status == "optimal"
            rep = feasibility_report(pr, sol, n_samples=2000, rng=1)
            assert rep["min_eig_q"] >= -1e-8
            assert rep["power_residual"] <= 1e-6 * pr.p_sap
            assert rep["lmi_min_eig_rel"] >= -1e-6
            assert rep["worst_sampled_ratio"] <= 1 + 1e-3
            assert np.all(sol.s_multipliers >= -1e-10)

    def test_exact_nulling_is_flat_in_zeta(self):
        rng = np.random.default_rng(4)
        base = make_problem(rng, eps_sq=0.0)
        objs = [solve_p2(RobustBfProblem(base.sigmas, base.precoders, base.victims, 0.0, z,
                                         10.0, 100.0, 8, math.e)).objective
                for z in (0.25, 1.0, 3.0)]
        assert max(objs) - min(objs) <= 1e-5 * max(objs)

    def test_monotone_in_zeta_and_eps(self):
        rng = np.random.default_rng(5)
        base = make_problem(rng, eps_sq=0.5, null_inhabitants=False)

        def obj(eps, zeta):
            return solve_p2(RobustBfProblem(base.sigmas, base.precoders, base.victims, eps,
                                            zeta, 10.0, 100.0, 8, math.e)).objective

        by_zeta = [obj(0.5, z) for z in (0.25, 0.5, 1.0, 2.0)]
        assert all(b >= a - 1e-5 for a, b in zip(by_zeta, by_zeta[1:]))
        by_eps = [obj(e, 1.0) for e in (0.0, 0.1, 1.0, 5.0)]
        assert all(b <= a + 1e-5 for a, b in zip(by_eps, by_eps[1:]))

    def test_batch_equals_single_and_deterministic(self):
        rng = np.random.default_rng(6)
        probs = [make_problem(rng, 0.1, z) for z in (0.5, 1.0)]
        batch = solve_p2_batch(probs)
        for p, s in zip(probs, batch):
            assert solve_p2(p).objective == pytest.approx(s.objective, rel=1e-7)
        again = solve_p2_batch(probs)
        assert [s.objective for s in again] == [s.objective for s in batch]

    def test_round_trip(self):
        pr = make_problem(np.random.default_rng(7), 0.1, 1.0, n_c=1)
        back = RobustBfProblem.from_dict(pr.to_dict())
        np.testing.assert_array_equal(back.precoders, pr.precoders)
        assert back.zeta == pr.zeta
        sol = solve_p2(pr)
        sol2 = BeamformerSolution.from_dict(sol.to_dict())
        np.testing.assert_array_equal(sol2.Q, sol.Q)
        assert solve_p2(back).objective == sol.objective

    def test_infinite_zeta_round_trip(self):
        pr = make_problem(np.random.default_rng(8), 0.0, math.inf, n_c=1)
        assert RobustBfProblem.from_dict(pr.to_dict()).zeta == math.inf


class TestBeamformer:
    def test_canonical(self):
        np.testing.assert_allclose(beamformer_from_Q(np.eye(3)), np.eye(3), atol=1e-12)
        np.testing.assert_array_equal(beamformer_from_Q(np.zeros((2, 2))), 0)

    def test_reconstruct(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            q = random_psd(rng, 3, 2)
            p = beamformer_from_Q(q)
            assert np.linalg.norm(p @ p.conj().T - q) <= 1e-8

    def test_indefinite(self):
        with pytest.raises(BfError):
            beamformer_from_Q(np.diag([1.0, -1e-3]))


def test_water_filling_basics():
    np.testing.assert_allclose(water_filling([1.0, 1.0], 2.0), [1.0, 1.0])
    p = water_filling([10.0, 1.0, 0.01], 1.0)
    assert p.sum() == pytest.approx(1.0)
    assert p[2] == 0.0
    # KKT: equal water level on active channels
    active = p > 0
    lev = p[active] + 1 / np.array([10.0, 1.0, 0.01])[active]
    np.testing.assert_allclose(lev, lev[0])
