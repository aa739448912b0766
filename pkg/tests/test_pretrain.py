import math
from dataclasses import replace

import numpy as np
import pytest

from mtfl import network, pretrain, tasks
from mtfl._util import as_generator


def test_default_hyperparams_values():
    eta, lam_a, lam_w, nu_w = pretrain.default_hyperparams(2, 32)
    assert eta == 1.0
    assert lam_a == 1.0
    assert abs(lam_w - (1.0 + 0.125 / math.pi)) < 1e-15
    assert abs(lam_w - 1.0397887) < 1e-6
    assert nu_w == 32.0 ** -1.25


def test_default_hyperparams_r1():
    _, _, lam_w, _ = pretrain.default_hyperparams(1, 8)
    assert abs(lam_w - (1.0 + 1.0 / (4.0 * math.pi))) < 1e-15


def test_config_fills_derived_defaults():
    cfg = pretrain.PretrainConfig(d=16, r=2, m=8, T=4, n_per_task=10, seed=0)
    assert cfg.lambda_a == 1.0
    assert abs(cfg.lambda_w - (1.0 + 0.125 / math.pi)) < 1e-15
    assert cfg.nu_w == 16.0 ** -1.25
    assert cfg.nu_a == 1.0 / math.sqrt(8)


def test_config_validation_errors():
    with pytest.raises(ValueError):
        pretrain.PretrainConfig(d=16, r=2, m=7, T=4, n_per_task=10, seed=0)
    with pytest.raises(ValueError):
        pretrain.PretrainConfig(d=1, r=2, m=8, T=4, n_per_task=10, seed=0)
    with pytest.raises(ValueError):
        pretrain.PretrainConfig(d=16, r=2, m=8, T=4, n_per_task=10, seed=0, eta=0.0)


def test_config_warns_when_m_exceeds_d():
    with pytest.warns(UserWarning, match="recovery guarantees"):
        pretrain.PretrainConfig(d=8, r=2, m=16, T=4, n_per_task=10, seed=0)


def test_head_step_zero_weights():
    params = network.NetParams(np.zeros((4, 6)), np.zeros(4),
                               np.zeros((2, 4)), 6, 2, 4, 2)
    X = np.random.default_rng(0).standard_normal((10, 6))
    y = np.ones(10)
    step = pretrain.head_step(params, 0, X, y, 1.0, 1.0)
    assert np.array_equal(step, np.zeros(4))


def test_head_step_single_positive_sample():
    params = network.symmetric_init(6, 2, 4, 2, 0.3, 0.2, 1)
    x = np.random.default_rng(2).standard_normal((1, 6))
    step = pretrain.head_step(params, 0, x, np.array([1.0]), 1.0, 1.0)
    want = np.maximum(x[0] @ params.W.T, 0.0)
    assert np.max(np.abs(step - want)) < 1e-15


def test_head_step_constant_labels_sign():
    # constant-label task: the update is eta * mean(relu(W x)) up to the sign
    params = network.symmetric_init(6, 2, 4, 2, 0.3, 0.2, 8)
    X = tasks.sample_gaussian_inputs(6, 40, 3)
    up = pretrain.head_step(params, 0, X, np.ones(40), 1.0, 1.0)
    dn = pretrain.head_step(params, 0, X, -np.ones(40), 1.0, 1.0)
    want = np.maximum(X @ params.W.T, 0.0).mean(axis=0)
    assert np.max(np.abs(up - want)) < 1e-14
    assert np.max(np.abs(dn + want)) < 1e-14


def test_head_step_gd_equals_closed_form():
    rng = np.random.default_rng(5)
    for trial in range(20):
        d = int(rng.integers(3, 9))
        m = 2 * int(rng.integers(1, 5))
        params = network.symmetric_init(d, 1, m, 3, 0.4, 0.3, int(rng.integers(1 << 30)))
        X = rng.standard_normal((15, d))
        y = np.where(rng.standard_normal(15) > 0, 1.0, -1.0)
        gd = pretrain.head_step(params, 1, X, y, 1.0, 1.0, method="gd")
        closed = pretrain.head_step(params, 1, X, y, 1.0, 1.0, method="closed_form")
        assert np.max(np.abs(gd - closed)) < 1e-12


def test_head_step_closed_form_contract():
    params = network.symmetric_init(5, 1, 4, 2, 0.3, 0.2, 0)
    broken = params.with_heads(params.heads + 0.1)
    X = np.ones((3, 5))
    y = np.ones(3)
    with pytest.raises(pretrain.ContractViolation):
        pretrain.head_step(broken, 0, X, y, 1.0, 1.0, method="closed_form")
    with pytest.raises(pretrain.ContractViolation):
        # lambda_a != 1/eta also voids the shortcut
        pretrain.head_step(params, 0, X, y, 1.0, 0.5, method="closed_form")


def test_representation_step_zero_gradient():
    # zero heads give zero gradient; eta * lambda_w = 1 wipes the weights
    params = network.symmetric_init(6, 2, 4, 3, 0.3, 0.2, 4)
    heads = np.zeros((3, 4))
    batches = [(np.ones((5, 6)), np.ones(5))] * 3
    Wplus = pretrain.representation_step(params, heads, batches, 1.0, 1.0)
    assert np.array_equal(Wplus, np.zeros((4, 6)))


def test_representation_step_batch_mismatch():
    params = network.symmetric_init(6, 2, 4, 3, 0.3, 0.2, 4)
    with pytest.raises(ValueError):
        pretrain.representation_step(params, params.heads,
                                     [(np.ones((5, 6)), np.ones(5))], 1.0, 1.0)


def test_representation_step_matches_finite_differences():
    # gradient path vs central differences of the head-frozen global loss
    rng = np.random.default_rng(11)
    params = network.NetParams(rng.standard_normal((4, 5)), np.zeros(4),
                               rng.standard_normal((3, 4)), 5, 2, 4, 3)
    batches = [(rng.standard_normal((12, 5)),
                np.where(rng.standard_normal(12) > 0, 1.0, -1.0))
               for _ in range(3)]
    eta, lam_w = 0.7, 0.3
    Wplus = pretrain.representation_step(params, params.heads, batches, eta, lam_w)
    grad_implied = ((1.0 - eta * lam_w) * params.W - Wplus) / eta
    h = 1e-5
    for j in range(4):
        for k in range(5):
            Wp, Wm = params.W.copy(), params.W.copy()
            Wp[j, k] += h
            Wm[j, k] -= h
            up = network.multitask_loss(
                network.NetParams(Wp, params.b, params.heads, 5, 2, 4, 3),
                params.heads, batches)
            dn = network.multitask_loss(
                network.NetParams(Wm, params.b, params.heads, 5, 2, 4, 3),
                params.heads, batches)
            fd = (up - dn) / (2 * h)
            assert abs(grad_implied[j, k] - fd) < 1e-5 * max(1.0, abs(fd))


def test_representation_step_linear_in_eta_frozen_gradient():
    # replaying the same batches, the gradient contribution scales with eta
    rng = np.random.default_rng(13)
    params = network.NetParams(rng.standard_normal((4, 5)), np.zeros(4),
                               rng.standard_normal((2, 4)), 5, 2, 4, 2)
    batches = [(rng.standard_normal((9, 5)),
                np.where(rng.standard_normal(9) > 0, 1.0, -1.0))
               for _ in range(2)]
    lam_w = 0.4
    contrib = {}
    for eta in (0.5, 1.0):
        Wplus = pretrain.representation_step(params, params.heads, batches, eta, lam_w)
        contrib[eta] = Wplus - (1.0 - eta * lam_w) * params.W
    assert np.allclose(2.0 * contrib[0.5], contrib[1.0], atol=1e-14)


def test_pretrain_matches_per_task_reference():
    """The fused blocked phases equal composing the public per-task ops."""
    cfg = pretrain.PretrainConfig(d=10, r=2, m=8, T=17, n_per_task=23, seed=5,
                                  lambda_a=0.7)
    res = pretrain.pretrain(cfg)

    task_ss, init_ss, head_ss, rep_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    ts = tasks.sample_tasks(cfg.r, cfg.T, as_generator(task_ss))
    params = network.symmetric_init(cfg.d, cfg.r, cfg.m, cfg.T, cfg.nu_w,
                                    cfg.nu_a, as_generator(init_ss))
    gen = as_generator(head_ss)
    heads = np.empty((cfg.T, cfg.m))
    for i, table in enumerate(ts.tables):
        X = tasks.sample_gaussian_inputs(cfg.d, cfg.n_per_task, gen)
        heads[i] = pretrain.head_step(params, i, X, tasks.labels_for(table, X),
                                      cfg.eta, cfg.lambda_a)
    gen2 = as_generator(rep_ss)
    batches = []
    for table in ts.tables:
        X = tasks.sample_gaussian_inputs(cfg.d, cfg.n_per_task, gen2)
        batches.append((X, tasks.labels_for(table, X)))
    Wplus = pretrain.representation_step(params, heads, batches, cfg.eta,
                                         cfg.lambda_w)
    assert np.max(np.abs(res.heads_plus - heads)) < 1e-12
    assert np.max(np.abs(res.Wplus - Wplus)) < 1e-12
    assert res.task_set == ts


def test_pretrain_deterministic_and_config_untouched():
    cfg = pretrain.PretrainConfig(d=12, r=2, m=8, T=9, n_per_task=16, seed=3)
    echo = cfg.to_dict()
    a = pretrain.pretrain(cfg)
    b = pretrain.pretrain(cfg)
    assert a.Wplus.tobytes() == b.Wplus.tobytes()
    assert a.heads_plus.tobytes() == b.heads_plus.tobytes()
    assert a.W0.tobytes() == b.W0.tobytes()
    assert cfg.to_dict() == echo
    assert a.config is cfg
    assert a.seed == 3


def test_pretrain_different_seeds_differ():
    cfg = pretrain.PretrainConfig(d=12, r=2, m=8, T=9, n_per_task=16, seed=3)
    other = replace(cfg, seed=4)
    assert not np.array_equal(pretrain.pretrain(cfg).Wplus,
                              pretrain.pretrain(other).Wplus)
