import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import TINY, minibatch, perturbed_model, tiny_corpus
from sireweight.data import DataConfig
from sireweight.grad_core import NumericError
from sireweight.reweight import (Adam, AdamConfig, ReweightConfig, TrainConfig, canonical_variant, normalize_scores,
                                 read_metrics, schedule_tau, softmax_weights, train, unweighted_step, variant_tau,
                                 weighted_step)
from sireweight.toy_lm import build_model

scores = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=12)
taus = st.floats(-5, 5, allow_nan=False)


# -- normalization and weights ---------------------------------------------


def test_normalize_examples():
    assert normalize_scores([5.0]).scores.tolist() == [0.0]
    np.testing.assert_allclose(normalize_scores([1.0, 3.0]).scores, [-1.0, 1.0], atol=1e-6)
    assert np.array_equal(normalize_scores([2.0, 2.0, 2.0]).scores, np.zeros(3))
    with pytest.raises(ValueError):
        normalize_scores([])


def test_softmax_examples():
    assert softmax_weights([0.3, -2.0, 7.0], 0.0).tolist() == [1 / 3] * 3
    np.testing.assert_allclose(softmax_weights([-1.0, 1.0], 1.0), [0.1192, 0.8808], atol=1e-3)
    np.testing.assert_allclose(softmax_weights([-1.0, 1.0], -1.0), [0.8808, 0.1192], atol=1e-3)


def test_softmax_extreme_tau_is_finite():
    w = softmax_weights(normalize_scores([0.0, 1.0, 1e6]), 1e4)
    assert np.isfinite(w).all() and abs(w.sum() - 1) <= 1e-12


@given(scores, taus)
def test_weights_sum_to_one(s, tau):
    w = softmax_weights(normalize_scores(s), tau)
    assert abs(w.sum() - 1.0) <= 1e-9 and (w >= 0).all()


@given(scores, taus)
def test_weights_monotone_or_antitone(s, tau):
    w = softmax_weights(normalize_scores(s), tau)
    for i in range(len(s)):
        for j in range(len(s)):
            if s[i] < s[j]:
                if tau > 0:
                    assert w[i] <= w[j]
                elif tau < 0:
                    assert w[i] >= w[j]


@given(scores, taus, st.floats(-1e3, 1e3))
def test_shift_invariance(s, tau, c):
    a = softmax_weights(normalize_scores(s), tau)
    b = softmax_weights(normalize_scores(np.asarray(s) + c), tau)
    np.testing.assert_allclose(a, b, atol=1e-6)


@given(st.lists(st.floats(0, 1e2), min_size=2, max_size=8).filter(lambda v: np.var(v) > 0.1), taus,
       st.floats(0.5, 100))
def test_positive_scale_invariance(s, tau, c):
    a = softmax_weights(normalize_scores(s), tau)
    b = softmax_weights(normalize_scores(np.asarray(s) * c), tau)
    np.testing.assert_allclose(a, b, atol=1e-6)


# -- schedule --------------------------------------------------------------


def test_schedule_boundaries():
    cfg = ReweightConfig(tau1=1.0, tau2=-1.0, switch_step=3)
    assert [schedule_tau(s, cfg) for s in range(1, 6)] == [1.0, 1.0, 1.0, -1.0, -1.0]
    assert schedule_tau(1, ReweightConfig(switch_step=0)) == -1.0
    with pytest.raises(ValueError):
        schedule_tau(0, cfg)


def test_variant_taus():
    cfg = ReweightConfig(tau1=2.0, tau2=-0.5, switch_step=2)
    seq = lambda v: [variant_tau(s, v, cfg) for s in (1, 2, 3)]  # noqa: E731
    assert seq("baseline") == [None] * 3
    assert seq("presence") == [2.0, 2.0, -0.5]
    assert seq("presence-i-d") == [-0.5, -0.5, 2.0]
    assert seq("presence_d") == [2.0] * 3
    assert seq("presence-i") == [-0.5] * 3
    with pytest.raises(ValueError):
        canonical_variant("presence-x")


def test_config_validation():
    with pytest.raises(ValueError):
        ReweightConfig(n_microbatches=0)
    with pytest.raises(ValueError):
        ReweightConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        ReweightConfig(weight_scale="other")


def test_adam_schedule():
    opt = Adam(build_model(TINY).params, AdamConfig(lr=1e-3, warmup_steps=100))
    assert opt.lr_at(1) == pytest.approx(1e-5)
    assert opt.lr_at(100) == pytest.approx(1e-3)
    assert opt.lr_at(400) == pytest.approx(5e-4)


# -- steps -----------------------------------------------------------------


class _Capture:
    """Stands in for the optimizer and records the aggregated gradient."""

    def apply(self, params, grads):
        self.g = grads


def _micro_grads(model, mb):
    return [model.loss_and_grad(m)[1].flat() for m in mb.microbatches]


def test_unweighted_sum_flatten_oracle():
    m = perturbed_model(TINY, 0.1)
    mb = minibatch(tiny_corpus(6, 1), 3)
    cap = _Capture()
    log = unweighted_step(m, mb, cap, step=1)
    np.testing.assert_allclose(cap.g.flat(), sum(_micro_grads(m, mb)), rtol=0, atol=1e-15)
    assert math.isnan(log.tau) and log.weights == [1 / 3] * 3


def test_unweighted_duplicated_halves_doubles_gradient():
    m = perturbed_model(TINY, 0.1)
    samples = tiny_corpus(2, 3)
    cap2, cap1 = _Capture(), _Capture()
    unweighted_step(m, minibatch(samples + samples, 2), cap2)
    unweighted_step(m, minibatch(samples, 1), cap1)
    assert np.array_equal(cap2.g.flat(), 2 * cap1.g.flat())


@pytest.mark.parametrize("scale", ["paper_literal", "sum_preserving"])
def test_weighted_flatten_oracle(scale):
    m = perturbed_model(TINY, 0.1)
    mb = minibatch(tiny_corpus(8, 4), 4)
    cfg = ReweightConfig(tau1=1.0, n_microbatches=4, switch_step=10, weight_scale=scale)
    cap = _Capture()
    log = weighted_step(m, mb, cap, cfg, step=1)
    raw = np.array(log.raw_scores)
    w = softmax_weights(normalize_scores(raw), 1.0)
    assert np.array_equal(w, log.weights) and log.tau == 1.0
    oracle = sum(wi * g for wi, g in zip(w, _micro_grads(m, mb))) * (4 if scale == "sum_preserving" else 1)
    np.testing.assert_allclose(cap.g.flat(), oracle, rtol=1e-12, atol=1e-15)


def test_weighted_step_upweights_high_si_for_positive_tau():
    m = perturbed_model(TINY, 0.1)
    log = weighted_step(m, minibatch(tiny_corpus(8, 4), 4), _Capture(),
                        ReweightConfig(n_microbatches=4, switch_step=5), step=1)
    assert np.argmax(log.weights) == np.argmax(log.raw_scores)


def test_weighted_step_microbatch_count_checked():
    m = build_model(TINY)
    with pytest.raises(ValueError):
        weighted_step(m, minibatch(tiny_corpus(8), 2), _Capture(), ReweightConfig(n_microbatches=4), step=1)


def test_non_finite_scores_abort_before_update():
    m = perturbed_model(TINY, 0.1)
    m.params["lm_head", "w"][:] *= 1e200
    before = m.params.tobytes()
    opt = Adam(m.params)
    with pytest.raises(NumericError):
        weighted_step(m, minibatch(tiny_corpus(4), 2), opt, ReweightConfig(n_microbatches=2, layers=("dec_0",)),
                      step=1)
    assert m.params.tobytes() == before and opt.t == 0


def _run(variant, steps=10, **rw):
    cfg = TrainConfig(total_steps=steps, variant=variant,
                      reweight=ReweightConfig(n_microbatches=4, **rw),
                      model=TINY, data=DataConfig(minibatch_size=8, seed=2))
    return train(cfg, tiny_corpus(32, 7))


def test_tau_zero_sum_preserving_matches_unweighted():
    base = _run("baseline")
    flat = _run("presence_d", tau1=0.0, weight_scale="sum_preserving")
    a, b = base.model.params.flat(), flat.model.params.flat()
    assert np.abs(a - b).max() <= 1e-12
    assert all(abs(x.minibatch_loss - y.minibatch_loss) <= 1e-12 for x, y in zip(base.logs, flat.logs))


def test_presence_with_late_switch_equals_presence_d():
    a = _run("presence", switch_step=10)
    b = _run("presence_d")
    assert a.model.params.tobytes() == b.model.params.tobytes()
    assert [l.tau for l in a.logs] == [l.tau for l in b.logs] == [1.0] * 10


def test_locked_ten_step_losses():
    # Regression fixture: ten presence steps on a fixed tiny corpus.
    losses = [l.minibatch_loss for l in _run("presence", switch_step=5).logs]
    expected = [3.880521446738824, 3.8765666191709363, 3.883104681870116, 3.8691430453336135, 3.8851984980166305,
                3.87208245232371, 3.870016695627787, 3.849502586966466, 3.884133014181449, 3.855078059371597]
    np.testing.assert_allclose(losses, expected, rtol=0, atol=1e-12)


def test_run_directory_outputs(tmp_path):
    cfg = TrainConfig(total_steps=4, variant="presence-i-d", checkpoint_every=2,
                      reweight=ReweightConfig(n_microbatches=2, switch_step=2),
                      model=TINY, data=DataConfig(minibatch_size=4, seed=1))
    res = train(cfg, tiny_corpus(16), run_dir=tmp_path / "run")
    names = sorted(p.name for p in (tmp_path / "run").iterdir())
    assert names == ["ckpt_2.bin", "final.bin", "manifest.json", "metrics.tsv"]
    rows = read_metrics(tmp_path / "run" / "metrics.tsv")
    assert [r["tau"] for r in rows] == [-1.0, -1.0, 1.0, 1.0]
    assert rows[-1]["loss"] == res.logs[-1].minibatch_loss
    with pytest.raises(FileExistsError):
        train(cfg, tiny_corpus(16), run_dir=tmp_path / "run")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_baseline_equals_presence_with_zero_taus():
    base = _run("baseline")
    flat = _run("presence", tau1=0.0, tau2=0.0, switch_step=5, weight_scale="sum_preserving")
    assert all(abs(x.minibatch_loss - y.minibatch_loss) <= 1e-9 for x, y in zip(base.logs, flat.logs))


def test_single_microbatch_weight_is_one():
    samples = tiny_corpus(4, 6)
    a, b = perturbed_model(TINY, 0.1), perturbed_model(TINY, 0.1)
    log = weighted_step(a, minibatch(samples, 1), Adam(a.params), ReweightConfig(n_microbatches=1), step=1)
    unweighted_step(b, minibatch(samples, 1), Adam(b.params), step=1)
    assert log.weights == [1.0]
    assert a.params.tobytes() == b.params.tobytes()
