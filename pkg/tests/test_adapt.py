from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delta_tta import adapt, netcore
from delta_tta.adapt import AdaptState, DotVariant, Strategy, method_from_name
from delta_tta.errors import ConfigError, ContractError
from delta_tta.losses import LossKind, entropy_loss, softmax
from delta_tta.normalize import NormMode

from helpers import random_net


def onehot(labels, k):
    p = np.zeros((len(labels), k))
    p[np.arange(len(labels)), labels] = 1.0
    return p


class TestDotWeights:
    def test_uniform_z(self, rng):
        k = 5
        w = adapt.dot_weights(softmax(rng.normal(size=(7, k))), adapt.uniform_z(k), eps=1e-6)
        assert np.allclose(w, k / (1 + k * 1e-6), rtol=1e-15)
        assert np.all(w == w[0])

    def test_hand_example(self):
        w = adapt.dot_weights(onehot([0, 1, 1, 1], 2), np.array([0.75, 0.25]), eps=0.0)
        assert np.allclose(w, [4 / 3, 4, 4, 4], rtol=0, atol=1e-15)

    def test_soft_matches_hard_on_one_hot(self, rng):
        p = onehot(rng.integers(0, 6, 20), 6)
        z = rng.dirichlet(np.ones(6))
        assert np.array_equal(adapt.dot_weights(p, z, DotVariant.SOFT), adapt.dot_weights(p, z, DotVariant.HARD))

    def test_ties_pick_lowest_class(self):
        w = adapt.dot_weights(np.array([[0.5, 0.5]]), np.array([0.2, 0.8]), eps=0.0)
        assert w[0] == 5.0

    def test_monotone_rebalancing(self, rng):
        p = softmax(rng.normal(size=(12, 4)) * 3)
        labels = p.argmax(1)
        z = np.array([0.25, 0.25, 0.25, 0.25])
        z2 = np.array([0.4, 0.2, 0.2, 0.2])  # class 0 got larger
        w, w2 = adapt.dot_weights(p, z), adapt.dot_weights(p, z2)
        assert np.all(w2[labels == 0] < w[labels == 0])
        nw, nw2 = adapt.normalize_weights(w), adapt.normalize_weights(w2)
        if (labels == 0).any() and (labels != 0).any():
            assert np.all(nw2[labels != 0] > nw[labels != 0])


class TestNormalizeWeights:
    def test_hand_example(self):
        assert np.allclose(adapt.normalize_weights([4 / 3, 4, 4, 4]), [0.4, 1.2, 1.2, 1.2], rtol=0, atol=1e-15)

    def test_equal_gives_exact_ones(self):
        assert np.array_equal(adapt.normalize_weights(np.full(7, 1 / 3)), np.ones(7))

    def test_single(self):
        assert np.array_equal(adapt.normalize_weights([0.123]), [1.0])

    def test_zero(self):
        with pytest.raises(ContractError):
            adapt.normalize_weights(np.zeros(3))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(1e-3, 1e6), min_size=1, max_size=256))
    def test_mean_is_one(self, w):
        nw = adapt.normalize_weights(w)
        assert abs(nw.mean() - 1.0) <= 1e-12
        assert np.array_equal(np.argsort(nw, kind="stable"), np.argsort(np.array(w), kind="stable"))


class TestUpdateZ:
    def test_hand_example(self):
        z = adapt.update_z(np.array([0.5, 0.5]), onehot([0, 0], 2), 0.9)
        assert np.allclose(z, [0.55, 0.45], rtol=0, atol=1e-15)

    def test_fixed_point(self):
        z = np.array([0.2, 0.3, 0.5])
        assert np.allclose(adapt.update_z(z, np.tile(z, (4, 1)), 0.9), z, rtol=0, atol=1e-15)

    def test_frozen(self, rng):
        z = np.array([0.2, 0.8])
        assert np.array_equal(adapt.update_z(z, softmax(rng.normal(size=(3, 2))), 1.0), z)

    def test_simplex(self, rng):
        z = adapt.uniform_z(8)
        for _ in range(500):
            z = adapt.update_z(z, softmax(rng.normal(size=(16, 8)) * 5), rng.uniform(0, 1))
            assert abs(z.sum() - 1) <= 1e-9 and np.all(z >= 0)


class TestStrategies:
    def test_la_uniform_prior_is_identity(self, rng):
        logits = rng.normal(size=(5, 4))
        assert np.allclose(adapt.la_adjust(logits, adapt.uniform_z(4)), softmax(logits), atol=1e-15)

    def test_la_zero_tau(self, rng):
        logits = rng.normal(size=(5, 3))
        assert np.allclose(adapt.la_adjust(logits, np.array([0.7, 0.2, 0.1]), tau=0), softmax(logits), atol=0)

    def test_la_hand_example(self):
        p = adapt.la_adjust(np.zeros((1, 2)), np.array([0.8, 0.2]), 1.0)
        assert np.allclose(p, [[0.2, 0.8]], rtol=0, atol=1e-15)

    def test_sample_drop(self):
        assert np.array_equal(adapt.sample_drop_filter([10, 0], [0, 1]), [False, True])
        assert adapt.sample_drop_filter([3, 3, 3], [0, 1, 2]).all()
        assert adapt.sample_drop_filter([0, 0], [1, 1]).all()


class TestPresets:
    @pytest.mark.parametrize("name", adapt.PRESETS)
    def test_every_preset_parses(self, name):
        m = method_from_name(name)
        assert m.name == name

    def test_components(self):
        m = method_from_name("ent-w+delta+la:soft")
        assert m.norm is NormMode.TBR and m.dot and m.dot_variant is DotVariant.SOFT
        assert m.loss.kind is LossKind.ENTW and m.strategy is Strategy.LA
        assert method_from_name("tent+sample-drop").strategy is Strategy.SAMPLE_DROP
        assert method_from_name("tent+dot").norm is NormMode.BATCH_STAT
        assert method_from_name("source").loss is None

    @pytest.mark.parametrize("bad", ["nope", "tent+xyz", "tent:hard", "tent:soft", "source+dot", "tema+la"])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            method_from_name(bad)

    def test_test_ema_gradients_need_opt_in(self):
        with pytest.raises(ConfigError):
            adapt.MethodSpec("x", norm=NormMode.TEST_EMA, loss=method_from_name("tent").loss)
        assert method_from_name("tent+tema").allow_test_ema_grad


@pytest.fixture
def net(rng):
    return random_net(rng, dim=4, hidden=(6, 5), classes=3)


class TestAdaptStep:
    def test_source_is_frozen(self, net, rng):
        x = rng.normal(size=(8, 4))
        s = AdaptState.start(3)
        r = adapt.adapt_step(net, x, method_from_name("source"), s)
        assert np.array_equal(r.probs, netcore.predict(net, x)) and r.state.z is s.z
        assert all(a is b for a, b in zip(r.model.norms, net.norms))

    def test_bn_adapt_leaves_z(self, net, rng):
        s = AdaptState.start(3)
        r = adapt.adapt_step(net, rng.normal(size=(8, 4)), method_from_name("bn-adapt"), s)
        assert r.state.z is s.z and not r.updated

    def test_uniform_predictions_are_stationary(self, net, rng):
        m = replace(net, head=(np.zeros_like(net.head[0]), np.zeros(3)))
        r = adapt.adapt_step(m, rng.normal(size=(8, 4)), method_from_name("tent"), AdaptState.start(3))
        for a, b in zip(r.model.affine_params(), m.affine_params()):
            assert np.array_equal(a, b)

    def test_predictions_precede_update(self, net, rng):
        x = rng.normal(size=(8, 4))
        r = adapt.adapt_step(net, x, method_from_name("tent+tbr"), AdaptState.start(3))
        _, p, _, _ = netcore.forward(net, x, NormMode.TBR)
        assert np.array_equal(r.probs, p) and r.updated

    def test_dense_weights_never_change(self, net, rng):
        m, s = net, AdaptState.start(3)
        meth = method_from_name("tent+delta", optimizer=netcore.OptimizerConfig("adam", 0.05))
        for _ in range(20):
            r = adapt.adapt_step(m, rng.normal(size=(8, 4)) * 3, meth, s)
            m, s = r.model, r.state
        assert m.dense is net.dense and m.head is net.head
        assert not np.array_equal(m.norms[0].gamma, net.norms[0].gamma)

    def test_delta_step_matches_hand_composition(self, net, rng):
        x = rng.normal(size=(8, 4)) * 2
        meth = method_from_name("tent+delta", optimizer=netcore.OptimizerConfig("adam", 0.01))
        s = replace(AdaptState.start(3), z=np.array([0.5, 0.3, 0.2]))
        r = adapt.adapt_step(net, x, meth, s)
        # step-by-step oracle
        logits, p, tr, m1 = netcore.forward(net, x, NormMode.TBR)
        k = p.argmax(1)
        raw = 1.0 / (s.z[k] + 1e-6)
        wbar = 8 * raw / raw.sum()
        h_grad = -(p * np.log(p) + p * (-(p * np.log(p)).sum(1, keepdims=True)))
        grads = netcore.backward_affine(m1, tr, h_grad, wbar)
        params, _ = netcore.optimizer_step(m1.affine_params(), grads, None, meth.optimizer)
        for a, b in zip(r.model.affine_params(), params):
            assert np.allclose(a, b, rtol=0, atol=1e-14)
        assert np.allclose(r.state.z, 0.9 * s.z + 0.1 * p.mean(0), rtol=0, atol=1e-15)

    def test_dot_with_uniform_z_is_bitwise_unweighted(self, net, rng):
        x = rng.normal(size=(8, 4))
        s = AdaptState.start(3)
        a = adapt.adapt_step(net, x, method_from_name("tent+delta"), s)
        b = adapt.adapt_step(net, x, method_from_name("tent+tbr"), s)
        for u, v in zip(a.model.affine_params(), b.model.affine_params()):
            assert np.array_equal(u, v)

    def test_fully_gated_batch_skips_update_but_advances_state(self, net, rng):
        meth = method_from_name("pl+delta")
        meth = replace(meth, loss=replace(meth.loss, tau=1.0 + 1e-9))
        s = AdaptState.start(3)
        r = adapt.adapt_step(net, rng.normal(size=(8, 4)), meth, s)
        assert not r.updated
        for a, b in zip(r.model.affine_params(), net.affine_params()):
            assert a is b
        assert r.model.norms[0].initialized and not np.array_equal(r.state.z, s.z)

    def test_la_changes_predictions_not_z_source(self, net, rng):
        x = rng.normal(size=(8, 4))
        s = replace(AdaptState.start(3), z=np.array([0.6, 0.3, 0.1]))
        r = adapt.adapt_step(net, x, method_from_name("tent+tbr+la"), s)
        logits, p, _, _ = netcore.forward(net, x, NormMode.TBR)
        assert np.allclose(r.probs, adapt.la_adjust(logits, s.z))
        assert np.allclose(r.state.z, adapt.update_z(s.z, p, 0.9))

    def test_sample_drop_counts(self, net, rng):
        x = rng.normal(size=(8, 4))
        s = replace(AdaptState.start(3), used_counts=np.array([100, 0, 0]))
        r = adapt.adapt_step(net, x, method_from_name("tent+tbr+sample-drop"), s)
        kept = r.pseudo_labels != 0
        assert np.array_equal(r.state.used_counts - s.used_counts, np.bincount(r.pseudo_labels[kept], minlength=3))

    def test_deterministic(self, net, rng):
        x = rng.normal(size=(8, 4))
        a = adapt.adapt_step(net, x, method_from_name("ent-w+delta"), AdaptState.start(3))
        b = adapt.adapt_step(net, x, method_from_name("ent-w+delta"), AdaptState.start(3))
        assert np.array_equal(a.probs, b.probs)
        for u, v in zip(a.model.affine_params(), b.model.affine_params()):
            assert np.array_equal(u, v)
