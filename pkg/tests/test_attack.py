import math

import numpy as np
import pytest

from conftest import MICRO_NAMES, micro_images, micro_model
from promptdoor.attack import (
    AttackConfig, AttackState, ConstraintViolation, TrainingDiverged, Trigger, apply_trigger, joint_stage, load_trigger,
    loss_cle, loss_total, loss_tri, project_linf, run_attack, save_trigger, warmup_stage,
)
from promptdoor.numerics import Tensor, backward, finite_difference_grad, relative_error
from promptdoor.promptengine import ClassTokenSet, ContextGenerator, StaticContext
from promptdoor.synthcorpus import Corpus

EPS = 4 / 255


def randomised_generator(model, seed=0):
    gen = ContextGenerator.init(model, seed)
    rng = np.random.default_rng([seed, 99])
    for p in gen.parameters():
        p.data[...] = rng.normal(0, 0.3, p.shape)
    return gen


def micro_corpus(n_per_class=2, seed=0):
    x = micro_images(2 * n_per_class, seed)
    return Corpus(x, np.repeat([0, 1], n_per_class), list(MICRO_NAMES))


# --- trigger application and projection ---------------------------------------------------

def test_zero_trigger_is_identity():
    x = micro_images(2)
    np.testing.assert_array_equal(apply_trigger(x, np.zeros((3, 8, 8))).data, x)


def test_trigger_clamped_to_pixel_range():
    x = np.ones((1, 3, 2, 2))
    assert np.all(apply_trigger(x, np.full((3, 2, 2), EPS)).data == 1.0)


def test_trigger_moves_pixels_by_at_most_eps():
    x = micro_images(3)
    d = np.random.default_rng(0).uniform(-EPS, EPS, (3, 8, 8))
    assert np.abs(apply_trigger(x, d).data - x).max() <= EPS + 1e-12


def test_trigger_shape_checked():
    with pytest.raises(ValueError):
        apply_trigger(micro_images(1), np.zeros((3, 4, 4)))


def test_projection():
    t = Trigger(np.array([10 / 255, -10 / 255, 1 / 255]), EPS)
    project_linf(t)
    np.testing.assert_allclose(t.delta, [EPS, -EPS, 1 / 255])
    before = t.delta.copy()
    project_linf(t)
    np.testing.assert_array_equal(t.delta, before)


def test_constraint_check_raises():
    with pytest.raises(ConstraintViolation):
        Trigger(np.array([0.5]), EPS).check()
    with pytest.raises(ValueError):
        Trigger(np.zeros(1), -1.0)


# --- losses ---------------------------------------------------------------------------------

def test_uniform_posterior_gives_log_k(micro):
    model, _ = micro
    same = ClassTokenSet(["a", "b"], Tensor(np.tile(model.params["tok_emb"].data[:1], (2, 1))))
    loss = loss_tri(model, StaticContext.init(model, 0), same, np.zeros((3, 8, 8)), micro_images(2), 0)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_saturated_posterior_gives_zero_loss():
    model = micro_model(frozen=False)
    model.params["log_tau"].data[...] = math.log(1e-5)
    model.freeze()
    tokens = ClassTokenSet.from_names(model, MICRO_NAMES)
    learner = StaticContext.init(model, 0)
    x = micro_images(1)
    from promptdoor.promptengine import prompt_logits

    target = int(prompt_logits(model, learner, tokens, x).data.argmax())
    assert loss_tri(model, learner, tokens, np.zeros((3, 8, 8)), x, target).item() < 1e-6
    assert loss_cle(model, learner, tokens, x, [target]).item() < 1e-6


def _fd_check(fn, tensor, h=1e-6):
    """Analytic gradient of ``fn`` w.r.t. ``tensor`` against central differences."""
    (g,) = backward(fn(), [tensor])
    orig = tensor.data.copy()

    def at(v):
        tensor.data[...] = v
        return fn().item()

    num = finite_difference_grad(at, orig, h)
    tensor.data[...] = orig
    return relative_error(g, num)


def _micro_setup():
    model = micro_model()
    tokens = ClassTokenSet.from_names(model, MICRO_NAMES)
    gen = randomised_generator(model)
    x, y = micro_images(2), np.array([0, 1])
    delta = Tensor(np.random.default_rng(5).uniform(-EPS, EPS, (3, 8, 8)), requires_grad=True)
    return model, tokens, gen, x, y, delta


def test_loss_tri_gradients_match_fd():
    model, tokens, gen, x, _, delta = _micro_setup()

    def fn():
        return loss_tri(model, gen, tokens, delta, x, 0)

    assert _fd_check(fn, delta) < 1e-3
    for p in gen.parameters():
        assert _fd_check(fn, p) < 1e-3


def test_loss_cle_gradients_match_fd_and_ignore_delta():
    model, tokens, gen, x, y, delta = _micro_setup()

    def fn():
        return loss_cle(model, gen, tokens, x, y)

    for p in gen.parameters():
        assert _fd_check(fn, p) < 1e-3
    (gd,) = backward(fn(), [delta])
    assert not np.any(gd)


def test_loss_total_is_sum_and_gradients_add():
    model, tokens, gen, x, y, delta = _micro_setup()
    total = loss_total(model, gen, tokens, delta, x, y, 1)
    tri, cle = loss_tri(model, gen, tokens, delta, x, 1), loss_cle(model, gen, tokens, x, y)
    assert total.item() == pytest.approx(tri.item() + cle.item(), abs=1e-14)
    params = gen.parameters()
    g_total = backward(loss_total(model, gen, tokens, delta, x, y, 1), params)
    g_total = [g.copy() for g in g_total]
    g_tri = [g.copy() for g in backward(loss_tri(model, gen, tokens, delta, x, 1), params)]
    g_cle = backward(loss_cle(model, gen, tokens, x, y), params)
    for a, b, c in zip(g_total, g_tri, g_cle):
        np.testing.assert_allclose(a, b + c, atol=1e-12)


# --- stages ----------------------------------------------------------------------------------

def _state(model, learner, corpus):
    tokens = ClassTokenSet.from_names(model, corpus.class_names)
    return AttackState(model, learner, tokens, Trigger.zeros((3, 8, 8), EPS, model.dtype), corpus, np.arange(2))


def test_warmup_single_step_oracle():
    model = micro_model()
    gen = randomised_generator(model)
    corpus = micro_corpus(1)
    state = _state(model, gen, corpus)
    state.trigger.delta[...] = np.random.default_rng(3).uniform(-EPS / 2, EPS / 2, (3, 8, 8))
    start = state.trigger.delta.copy()
    cfg = AttackConfig(warmup_epochs=1, batch_size=2, alpha=0.1)
    d = Tensor(start.copy(), requires_grad=True)
    (g,) = backward(loss_tri(model, gen, state.class_tokens, d, corpus.images, 0), [d])
    expected = np.clip(start - 0.1 * g, -EPS, EPS)
    before = model.checksum()
    warmup_stage(state, cfg)
    np.testing.assert_allclose(state.trigger.delta, expected, atol=1e-15)
    assert model.checksum() == before and state.linf_checks == 1


def test_warmup_zero_epochs_keeps_delta():
    model = micro_model()
    state = _state(model, randomised_generator(model), micro_corpus())
    warmup_stage(state, AttackConfig(warmup_epochs=0))
    assert not np.any(state.trigger.delta) and state.iterations["warmup"] == 0


def test_joint_iteration_count():
    model = micro_model()
    state = _state(model, randomised_generator(model), micro_corpus(3))
    cfg = AttackConfig(joint_epochs=4, batch_size=4)
    joint_stage(state, cfg)
    assert state.iterations["joint"] == 4 * math.ceil(6 / 4)
    assert state.linf_checks == state.iterations["joint"]
    assert state.trigger.linf <= EPS


def test_divergence_raises_with_last_good():
    model = micro_model()
    gen = randomised_generator(model)
    gen.w1.data[...] = np.nan
    state = _state(model, gen, micro_corpus())
    with pytest.raises(TrainingDiverged) as info:
        joint_stage(state, AttackConfig(joint_epochs=2))
    assert info.value.last_good is None


def test_run_attack_contracts():
    model = micro_model()
    corpus = micro_corpus(2)
    res = run_attack(model, corpus, [0, 1], AttackConfig(warmup_epochs=1, joint_epochs=2, beta=0.05))
    m = res.manifest
    assert m["iterations"]["warmup"] == 4 and m["iterations"]["joint"] == 8
    assert m["linf_checks"] == 12 and res.trigger.linf <= EPS
    assert res.target_name == MICRO_NAMES[0]
    with pytest.raises(RuntimeError):
        run_attack(micro_model(frozen=False), corpus, [0, 1], AttackConfig())
    with pytest.raises(ValueError):
        run_attack(model, corpus, [0], AttackConfig())


@pytest.mark.parametrize("kw", [dict(epsilon=-1), dict(learner="mlp"), dict(batch_size=0), dict(target_class=-1), dict(n_ctx=0)])
def test_attack_config_validation(kw):
    with pytest.raises(ValueError):
        AttackConfig(**kw)


def test_clean_only_leaves_trigger_zero():
    model = micro_model()
    res = run_attack(model, micro_corpus(), [0, 1], AttackConfig(learner="static", clean_only=True, joint_epochs=2))
    assert not np.any(res.trigger.delta) and res.manifest["iterations"]["warmup"] == 0


def test_trigger_round_trip(tmp_path):
    t = Trigger(np.random.default_rng(0).uniform(-EPS, EPS, (3, 8, 8)).astype(np.float32), EPS)
    save_trigger(t, tmp_path / "t.pdck")
    back = load_trigger(tmp_path / "t.pdck")
    np.testing.assert_array_equal(back.delta, t.delta)
    assert back.epsilon == EPS


@pytest.mark.slow
def test_joint_loss_trends_down(desk_bundles):
    for bundle in desk_bundles.values():
        totals = [e["total"] for e in bundle["generator"].manifest["losses"]["joint"]]
        assert totals[-1] < totals[0]
        for a, b in zip(totals, totals[1:]):
            assert b <= a * 1.1
