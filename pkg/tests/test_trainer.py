import numpy as np
import pytest

from wavmtl.data import KWS, SV, Loader
from wavmtl.heads import EMBEDDING, HeadConfig
from wavmtl.nn import make_rng
from wavmtl.sre import SREConfig, SREModel
from wavmtl.tensor import Tensor
from wavmtl.trainer import (FROZEN_SRE, PRETRAIN, Adam, MetricsLog, NumericalError, TrainConfig,
                            adam_step, build_task_head, multitask_train, pretrain)

TINY = SREConfig(conv_channels=8, d_model=16, n_heads=2, ffn_dim=32, code_dim=16,
                 entries_per_codebook=8, distractors=4)


def _setup(corpus, tasks=(KWS, SV), seed=0, **train):
    sre = SREModel(TINY, make_rng(seed, "sre-init"))
    heads = {
        KWS: build_task_head(KWS, 16, HeadConfig(n_out=12), seed, 12),
        SV: build_task_head(SV, 16, HeadConfig(output=EMBEDDING, n_out=8, input_seconds=2),
                            seed, len(corpus.train_speakers)),
    }
    data = {KWS: corpus.kws_train, SV: corpus.sv_train}
    loaders = {t: Loader(data[t], 2, seed, task=t, name=t) for t in tasks}
    cfg = TrainConfig(tasks=list(tasks), **train)
    return cfg, sre, {t: heads[t] for t in tasks}, loaders


def _sre_bytes(sre):
    return b"".join(p.data.tobytes() for p in sre.parameters())


# -- Algorithm 1 schedule ---------------------------------------------------------------

def test_round_robin_order_and_count(corpus):
    cfg, sre, heads, loaders = _setup(corpus, max_iterations=3, freeze_iters=1)
    state = multitask_train(cfg, sre, heads, loaders)
    assert state.updates == [(0, KWS), (0, SV), (1, KWS), (1, SV), (2, KWS), (2, SV)]
    assert state.optimizer.updates == 6


def test_single_task_degenerates(corpus):
    cfg, sre, heads, loaders = _setup(corpus, tasks=(KWS,), max_iterations=4, freeze_iters=2)
    log = MetricsLog()
    state = multitask_train(cfg, sre, heads, loaders, log)
    assert state.updates == [(i, KWS) for i in range(4)]
    assert [r.task for r in log.records] == [KWS] * 4


def test_freeze_schedule(corpus):
    cfg, sre, heads, loaders = _setup(corpus, max_iterations=5, freeze_iters=3)
    initial = _sre_bytes(sre)
    head_start = heads[KWS].head.proj.weight.data.copy()
    seen = []
    multitask_train(cfg, sre, heads, loaders,
                    on_update=lambda st, task: seen.append((st.iteration, task, _sre_bytes(sre),
                                                            st.sre_frozen)))
    for it, task, snapshot, frozen in seen:
        assert frozen == (it < 3)
        assert (snapshot == initial) == (it < 3), (it, task)
    assert not np.array_equal(heads[KWS].head.proj.weight.data, head_start)


def test_frozen_ablation_never_touches_the_sre(corpus):
    cfg, sre, heads, loaders = _setup(corpus, max_iterations=3, freeze_iters=0,
                                      ablation=FROZEN_SRE)
    initial = _sre_bytes(sre)
    state = multitask_train(cfg, sre, heads, loaders)
    assert _sre_bytes(sre) == initial and state.sre_frozen


def test_pretraining_only_parameters_stay_put(corpus):
    cfg, sre, heads, loaders = _setup(corpus, max_iterations=2, freeze_iters=0)
    before = sre.quantizer.to_logits.weight.data.copy()
    multitask_train(cfg, sre, heads, loaders)
    np.testing.assert_array_equal(sre.quantizer.to_logits.weight.data, before)


def test_sre_step_is_ten_times_smaller(corpus):
    cfg, sre, heads, loaders = _setup(corpus, tasks=(KWS,), max_iterations=1, freeze_iters=0)
    sre_before = [p.data.copy() for p in sre.finetune_parameters()]
    head_before = [p.data.copy() for p in heads[KWS].parameters()]
    multitask_train(cfg, sre, heads, loaders)

    def typical_step(params, before):
        steps = np.concatenate([np.abs(p.data - b).ravel() for p, b in zip(params, before)])
        return np.median(steps[steps > 0])

    ratio = (typical_step(heads[KWS].parameters(), head_before)
             / typical_step(sre.finetune_parameters(), sre_before))
    assert ratio == pytest.approx(10.0, rel=0.01)


def test_cached_frozen_features_change_nothing(corpus):
    logs = []
    for use_cache in (True, False):
        cfg, sre, heads, loaders = _setup(corpus, max_iterations=4, freeze_iters=2)
        log = MetricsLog()
        multitask_train(cfg, sre, heads, loaders, log, use_cache=use_cache)
        logs.append([loss for _, _, loss in log.deterministic_view()])
    np.testing.assert_allclose(logs[0], logs[1], rtol=1e-10)


def test_runs_are_deterministic(corpus):
    views = []
    for _ in range(2):
        cfg, sre, heads, loaders = _setup(corpus, max_iterations=3, freeze_iters=1)
        log = MetricsLog()
        multitask_train(cfg, sre, heads, loaders, log)
        views.append((log.deterministic_view(), _sre_bytes(sre)))
    assert views[0] == views[1]


def test_non_finite_loss_raises(corpus):
    cfg, sre, heads, loaders = _setup(corpus, tasks=(KWS,), max_iterations=2, freeze_iters=0)
    heads[KWS].head.proj.weight.data[0, 0] = np.nan
    with pytest.raises(NumericalError, match="iteration 0"):
        multitask_train(cfg, sre, heads, loaders)


def test_missing_head_or_loader(corpus):
    cfg, sre, heads, loaders = _setup(corpus, tasks=(KWS,), max_iterations=1)
    cfg.tasks = [KWS, SV]
    with pytest.raises(ValueError, match="sv"):
        multitask_train(cfg, sre, heads, loaders)


def test_metrics_log_format():
    log = MetricsLog()
    log.add(0, KWS, 2.5, 12.3456)
    assert log.text() == "iter,task,loss,wall_ms\n0,kws,2.5,12.346\n"
    assert log.deterministic_view() == [(0, KWS, 2.5)]


@pytest.mark.parametrize("bad", [dict(lr_sre=1e-4), dict(lr_head=-1.0), dict(beta1=1.0),
                                 dict(freeze_iters=-1), dict(mode="joint")])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# -- Adam -------------------------------------------------------------------------------

def test_first_step_moves_by_learning_rate():
    g = np.array([3.0, -0.02, 1e-3])
    new, _ = adam_step([np.zeros(3)], [g], None, lr=0.01)
    np.testing.assert_allclose(new[0], -0.01 * np.sign(g), rtol=1e-5)


def test_zero_gradient_decays_moments_only():
    p = [np.array([1.0, -2.0])]
    _, state = adam_step(p, [np.array([1.0, 1.0])], None, lr=0.1)
    m_before, v_before = state["m"][0].copy(), state["v"][0].copy()
    kept, state = adam_step([np.array([0.5, 0.5])], [np.zeros(2)], state, lr=0.0)
    np.testing.assert_array_equal(kept[0], [0.5, 0.5])
    np.testing.assert_allclose(state["m"][0], 0.9 * m_before)
    np.testing.assert_allclose(state["v"][0], 0.999 * v_before)


def test_quadratic_converges():
    x, state = [np.array([1.0])], None
    for _ in range(100):
        x, state = adam_step(x, [2.0 * x[0]], state, lr=0.1)
    assert abs(x[0][0]) < 0.1


def test_class_and_function_agree():
    rng = np.random.default_rng(0)
    p = Tensor(rng.standard_normal(4), requires_grad=True)
    arr, state = [p.data.copy()], None
    opt = Adam()
    for _ in range(10):
        g = rng.standard_normal(4)
        p.grad = g
        opt.step([([p], 0.05)])
        arr, state = adam_step(arr, [g], state, lr=0.05)
    np.testing.assert_allclose(p.data, arr[0], rtol=1e-14)


def test_missing_gradient_is_an_error():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError, match="no gradient"):
        Adam().step([([p], 0.1)])
    with pytest.raises(ValueError, match="no gradient"):
        adam_step([np.ones(2)], [None], None, 0.1)


# -- pretraining --------------------------------------------------------------------------

def test_pretraining_is_deterministic_and_moves_weights(corpus):
    states = []
    for _ in range(2):
        sre = SREModel(TINY, make_rng(0, "sre-init"))
        start = _sre_bytes(sre)
        loader = Loader(corpus.kws_train, 2, 0, task=PRETRAIN, length=4000)
        masks = []
        log = pretrain(TrainConfig(pretrain_steps=3), sre, loader, 0,
                       on_step=lambda step, parts: masks.append(parts.mask))
        assert _sre_bytes(sre) != start
        assert all(m.any(axis=1).all() for m in masks)
        states.append((log.deterministic_view(), _sre_bytes(sre)))
    assert states[0] == states[1]
