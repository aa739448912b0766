import math

import numpy as np
import pytest

from mtfl import analysis, network, tasks
from mtfl._util import spectral_norm

from oracles import jacobi_svd_values, mc_a_blocks_loops


def test_project_slices_and_reconstruct():
    W = np.eye(3)
    par = analysis.project_parallel(W, 1)
    assert par.shape == (3, 1)
    assert np.array_equal(par[:, 0], np.array([1.0, 0.0, 0.0]))
    rng = np.random.default_rng(0)
    M = rng.standard_normal((5, 7))
    again = np.hstack([analysis.project_parallel(M, 3), analysis.project_perp(M, 3)])
    assert np.array_equal(again, M)


def test_project_perp_zero_iff_tail_columns_zero():
    M = np.zeros((4, 6))
    M[:, :2] = 1.0
    assert not analysis.project_perp(M, 2).any()
    M[1, 4] = 0.5
    assert analysis.project_perp(M, 2).any()


def test_project_rejects_bad_r():
    with pytest.raises(ValueError):
        analysis.project_parallel(np.zeros((3, 4)), 4)
    with pytest.raises(ValueError):
        analysis.project_perp(np.zeros((3, 4)), 0)


def test_spectral_norm_matches_jacobi_oracle():
    rng = np.random.default_rng(7)
    for shape in ((6, 4), (4, 6), (40, 25), (60, 35)):
        M = rng.standard_normal(shape)
        want = jacobi_svd_values(M)[0]
        assert abs(spectral_norm(M) - want) < 1e-10 * max(1.0, want)


def test_recovery_metrics_zero_perp_block():
    rng = np.random.default_rng(1)
    W0 = rng.standard_normal((8, 6))
    Wplus = np.zeros((8, 6))
    Wplus[:, :2] = rng.standard_normal((8, 2))
    m = analysis.recovery_metrics(W0, Wplus, 2, 1.0, 0.1)
    assert m.prop1_perp_norm == 0.0
    assert m.thm1_ratio == 0.0


def test_recovery_metrics_exact_rescale_gives_zero_residual():
    rng = np.random.default_rng(2)
    W0 = rng.standard_normal((8, 6))
    coeff = 2.0 ** (-2 - 2)
    m = analysis.recovery_metrics(W0, coeff * W0, 2, 1.0, 0.1)
    assert m.prop1_parallel_residual < 1e-14


def test_recovery_metrics_sigma_r_matches_jacobi():
    rng = np.random.default_rng(3)
    W0 = rng.standard_normal((12, 4))
    Wplus = rng.standard_normal((12, 4))
    m = analysis.recovery_metrics(W0, Wplus, 2, 1.0, 0.1)
    svals = jacobi_svd_values(Wplus[:6, :2])
    assert abs(m.sigma_r_parallel - svals[1]) < 1e-10
    perp = jacobi_svd_values(Wplus[:6, 2:])[0]
    assert abs(m.thm1_ratio - perp / svals[1]) < 1e-9


def test_recovery_metrics_ratio_scale_invariant():
    rng = np.random.default_rng(4)
    W0 = rng.standard_normal((10, 8))
    Wplus = rng.standard_normal((10, 8))
    base = analysis.recovery_metrics(W0, Wplus, 3, 1.0, 0.05)
    scaled = analysis.recovery_metrics(W0, 7.3 * Wplus, 3, 1.0, 0.05)
    assert abs(base.thm1_ratio - scaled.thm1_ratio) < 1e-12 * base.thm1_ratio


def test_recovery_metrics_singular_sentinel():
    W0 = np.zeros((4, 5))
    m = analysis.recovery_metrics(W0, W0, 2, 1.0, 0.1)
    assert math.isinf(m.thm1_ratio)


def test_beta_bounds_and_diagonal():
    ts = tasks.sample_tasks(2, 100, 5)
    rng = np.random.default_rng(6)
    for _ in range(20):
        x, xp = rng.standard_normal(9), rng.standard_normal(9)
        b = analysis.beta(ts, x, xp)
        assert -1.0 <= b <= 1.0
        assert analysis.beta(ts, x, x) == 1.0


def test_beta_same_pattern_is_one():
    ts = tasks.sample_tasks(2, 37, 8)
    x = np.array([0.4, -0.2, 5.0, 1.0])
    xp = np.array([1.3, -2.0, -4.0, 0.5])  # same signs on the first 2
    assert analysis.beta(ts, x, xp) == 1.0


def test_beta_full_universe_distinct_pattern_zero():
    # exhaustive enumeration over the 16 tables: exact cancellation
    uni = tasks.enumerate_universe(2)
    x = np.array([0.5, 0.5, 0.0, 0.0])
    xp = np.array([0.5, -0.5, 0.0, 0.0])
    assert analysis.beta(uni, x, xp) == 0.0


def test_beta_sampled_concentration():
    # binomial oracle: sd 1/sqrt(4096) = 0.0156, 5 sigma = 0.078 <= 0.08
    ts = tasks.sample_tasks(2, 4096, 9)
    x = np.array([1.0, 1.0, 0.3])
    xp = np.array([1.0, -1.0, -0.3])
    assert abs(analysis.beta(ts, x, xp)) <= 0.08


def test_contrastive_pair_zero_weights():
    ts = tasks.sample_tasks(2, 16, 3)
    X = tasks.sample_gaussian_inputs(8, 30, 4)
    pair = analysis.contrastive_loss_pair(np.zeros((6, 8)), ts, X)
    assert pair.exact_loss == 1.0
    assert pair.contrastive_approx == 1.0
    assert pair.threshold_rate == 0.0


def test_contrastive_pair_at_init_scale():
    # spec-scale instance: the two routes agree whenever no threshold trips,
    # and at init scale the trip rate is below 1e-3
    d, m, T, n = 32, 64, 1024, 512
    params = network.symmetric_init(d, 2, m, T, d**-1.25, 1 / math.sqrt(m), 3)
    ts = tasks.sample_tasks(2, T, 4)
    X = tasks.sample_gaussian_inputs(d, n, 5)
    pair = analysis.contrastive_loss_pair(params.W, ts, X)
    assert abs(pair.exact_loss - pair.contrastive_approx) \
        < 0.05 * max(1.0, abs(pair.exact_loss))
    assert pair.threshold_rate < 1e-3


def test_estimate_blocks_match_dense_loop_oracle():
    w = np.random.default_rng(10).standard_normal(8)
    est = analysis.estimate_A_blocks(w, 2, 40_000, 123)
    opp, opq, oqp, oqq = mc_a_blocks_loops(w, 2, 40_000, 456)
    # independent draws: agreement within combined MC error (5 sigma-ish)
    for got, want, se in ((est.A_pp, opp, est.se_pp), (est.A_pq, opq, est.se_pq),
                          (est.A_qp, oqp, est.se_qp), (est.A_qq, oqq, est.se_qq)):
        assert np.linalg.norm(got - want) < 10 * se + 1e-3


def test_estimate_blocks_shapes_and_determinism():
    w = np.random.default_rng(1).standard_normal(12)
    a = analysis.estimate_A_blocks(w, 3, 20_000, 7)
    b = analysis.estimate_A_blocks(w, 3, 20_000, 7)
    assert a.A_pp.shape == (3, 3) and a.A_pq.shape == (3, 9)
    assert a.A_qp.shape == (9, 3) and a.A_qq.shape == (9, 9)
    for x, y in ((a.A_pp, b.A_pp), (a.A_pq, b.A_pq), (a.A_qp, b.A_qp),
                 (a.A_qq, b.A_qq)):
        assert np.array_equal(x, y)


def test_estimate_blocks_threads_do_not_change_bytes(monkeypatch):
    w = np.random.default_rng(2).standard_normal(10)
    monkeypatch.setenv("MTFL_THREADS", "1")
    a = analysis.estimate_A_blocks(w, 2, 150_000, 9)
    monkeypatch.setenv("MTFL_THREADS", "4")
    b = analysis.estimate_A_blocks(w, 2, 150_000, 9)
    assert a.A_qq.tobytes() == b.A_qq.tobytes()
    assert a.A_pq.tobytes() == b.A_pq.tobytes()


def test_estimate_blocks_input_guards():
    w = np.zeros(6)
    w[:2] = 1.0
    with pytest.raises(ValueError):
        analysis.estimate_A_blocks(w, 2, 20_000, 0)  # zero spurious block
    with pytest.raises(ValueError):
        analysis.estimate_A_blocks(np.ones(6), 2, 100, 0)  # n_mc too small
    with pytest.raises(ValueError):
        analysis.estimate_A_blocks(np.ones(6), 6, 20_000, 0)  # r = d


def test_estimate_blocks_pp_symmetric_within_se():
    w = np.random.default_rng(3).standard_normal(20)
    est = analysis.estimate_A_blocks(w, 2, 200_000, 5)
    asym = np.linalg.norm(est.A_pp - est.A_pp.T)
    assert asym < 3 * math.sqrt(2) * est.se_pp


def test_estimate_blocks_error_halves_when_n_quadruples():
    # 1/sqrt(n) convergence against a high-fidelity reference estimate
    w = np.random.default_rng(4).standard_normal(12)
    ref = analysis.estimate_A_blocks(w, 2, 2_560_000, 99)
    errs = []
    for n_mc, seed in ((40_000, 11), (160_000, 12)):
        est = analysis.estimate_A_blocks(w, 2, n_mc, seed)
        errs.append(np.linalg.norm(est.A_qq - ref.A_qq))
    ratio = errs[0] / errs[1]
    assert 1.0 <= ratio <= 3.0  # halving within a +/-50% band


def test_aligned_w_edge_case():
    # r=1, d=3, w nearly along the relevant axis: the spurious block of the
    # estimate collapses like eps^2 plus MC error (independent halves cancel)
    eps = 1e-3
    w = np.array([1.0, eps, eps])
    est = analysis.estimate_A_blocks(w, 1, 200_000, 21)
    assert np.linalg.norm(est.A_qq) < 100 * eps**2 + 5 * est.se_qq


def test_closed_forms_pp_exact_quarter_identity():
    w = np.random.default_rng(5).standard_normal(9)
    App, _, _ = analysis.a_block_closed_forms(w, 3)
    assert np.array_equal(App, 0.25 * np.eye(3))


def test_closed_forms_qq_limit():
    # nearly no relevant mass: rank-one form with top eigenvalue 1/(2 pi)
    w = np.concatenate([np.full(2, 1e-6), np.random.default_rng(6).standard_normal(30)])
    _, _, Aqq = analysis.a_block_closed_forms(w, 2)
    top = np.linalg.eigvalsh(Aqq)[-1]
    assert abs(top - 1.0 / (2.0 * math.pi)) < 1e-9


def test_parallel_perp_candidates_differ_by_factor_four():
    w = np.random.default_rng(7).standard_normal(11)
    cands = analysis.a_parallel_perp_candidates(w, 2)
    assert np.allclose(4.0 * cands["coeff-1-over-2pi"], cands["coeff-2-over-pi"])


def test_adjudication_selects_small_coefficient():
    report = analysis.adjudicate_a_parallel_perp(20, 2, 250_000, 2, 17)
    assert report["winner"] == "coeff-1-over-2pi"
    assert report["loser_over_winner_error"] > 1.0
    assert len(report["per_probe_error"]["coeff-1-over-2pi"]) == 2


def test_init_sanity_desk_scale():
    nu = 256.0 ** -1.25
    params = network.symmetric_init(256, 2, 128, 1, nu, 0.1, 7)
    report = analysis.init_sanity(params.W, nu, 128, 2)
    assert report["all_within_envelopes"]
    assert report["sigma_ok"]
    assert report["sigma_r_parallel_over_scale"] >= report["sigma_bound"]
    assert report["ok"]


def test_init_sanity_zero_matrix_flags():
    report = analysis.init_sanity(np.zeros((128, 256)), 0.01, 128, 2)
    assert not report["ok"]


def test_ablock_estimate_json_fields():
    w = np.random.default_rng(8).standard_normal(8)
    est = analysis.estimate_A_blocks(w, 2, 20_000, 31)
    obj = est.to_dict()
    assert obj["n_mc"] == 20_000
    assert obj["seed"] == 31
    assert set(obj["se_frobenius"]) == {"pp", "pq", "qp", "qq"}
    assert len(obj["A_qq"]) == 6
