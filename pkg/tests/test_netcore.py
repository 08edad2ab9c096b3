import math
from dataclasses import replace

import numpy as np
import pytest

from delta_tta import checkpoint, netcore
from delta_tta.errors import ConfigError, ContractError, InputError, NumericError
from delta_tta.losses import LossKind, LossSpec, entropy_loss
from delta_tta.netcore import ModelSpec, OptimizerConfig, OptimizerState
from delta_tta.normalize import NormMode
from delta_tta.streams import LabeledDataset

from helpers import ema_primed, random_net


def linear_head_only(w, b):
    spec = ModelSpec(w.shape[0], (), w.shape[1])
    return netcore.ModelState(spec, (), (), (np.asarray(w, float), np.asarray(b, float)))


class TestForward:
    def test_zero_head_gives_uniform(self, rng):
        m = netcore.init_model(ModelSpec(3, (5,), 4, seed=1))
        m = replace(m, head=(np.zeros((5, 4)), np.zeros(4)))
        logits, probs, _, _ = netcore.forward(m, rng.normal(size=(6, 3)), NormMode.BATCH_STAT)
        assert not logits.any() and np.all(probs == 0.25)

    def test_identity_layer_by_hand(self):
        m = linear_head_only(np.eye(2), np.zeros(2))
        logits, probs, _, _ = netcore.forward(m, np.array([[1.0, 2.0]]))
        e = math.e
        assert np.array_equal(logits, [[1.0, 2.0]])
        assert np.allclose(probs, [[1 / (1 + e), e / (1 + e)]], rtol=0, atol=1e-15)

    def test_source_mode_is_pure(self, rng):
        m = random_net(rng)
        x = rng.normal(size=(5, m.spec.input_dim))
        a, _, _, m1 = netcore.forward(m, x, NormMode.SOURCE_EMA)
        b, _, _, m2 = netcore.forward(m1, x, NormMode.SOURCE_EMA)
        assert np.array_equal(a, b)
        for s0, s1 in zip(m.norms, m2.norms):
            assert s0 is s1

    def test_only_statistics_change(self, rng):
        m = random_net(rng)
        x = rng.normal(size=(5, m.spec.input_dim))
        _, _, _, m2 = netcore.forward(m, x, NormMode.TBR)
        assert m2.dense is m.dense and m2.head is m.head
        for s0, s1 in zip(m.norms, m2.norms):
            assert s0.gamma is s1.gamma and s0.beta is s1.beta
            assert s1.initialized and not s0.initialized

    def test_probability_rows(self, rng):
        m = random_net(rng)
        _, p, _, _ = netcore.forward(m, rng.normal(size=(9, m.spec.input_dim)) * 50, NormMode.BATCH_STAT)
        assert np.all((p >= 0) & (p <= 1)) and np.allclose(p.sum(1), 1, atol=1e-9)

    def test_dimension_mismatch(self, rng):
        m = random_net(rng, dim=3)
        with pytest.raises(ConfigError):
            netcore.forward(m, np.zeros((2, 4)))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_layer(self, rng):
        m = random_net(rng, dim=3, hidden=(4, 4))
        x = np.ones((2, 3))
        x[0, 0] = np.inf
        with pytest.raises(NumericError, match="layer 0"):
            netcore.forward(m, x, NormMode.SOURCE_EMA)


class TestBackward:
    def test_zero_weights(self, rng):
        m = random_net(rng)
        x = rng.normal(size=(6, m.spec.input_dim))
        _, p, tr, _ = netcore.forward(m, x, NormMode.BATCH_STAT)
        grads = netcore.backward_affine(m, tr, entropy_loss(p)[1], np.zeros(6))
        assert all(not g.any() for g in grads)

    def test_weights_scale_linearly(self, rng):
        m = random_net(rng)
        x = rng.normal(size=(6, m.spec.input_dim))
        _, p, tr, _ = netcore.forward(m, x, NormMode.BATCH_STAT)
        g = entropy_loss(p)[1]
        a = netcore.backward_affine(m, tr, g, np.full(6, 2.0))
        b = netcore.backward_affine(m, tr, g)
        assert all(np.allclose(x, 2 * y) for x, y in zip(a, b))

    def test_source_trace_rejected(self, rng):
        m = random_net(rng)
        _, p, tr, _ = netcore.forward(m, rng.normal(size=(4, m.spec.input_dim)))
        with pytest.raises(ContractError):
            netcore.backward_affine(m, tr, p)

    def test_negative_weights_rejected(self, rng):
        m = random_net(rng)
        _, p, tr, _ = netcore.forward(m, rng.normal(size=(4, m.spec.input_dim)), NormMode.TBR)
        with pytest.raises(ContractError):
            netcore.backward_affine(m, tr, p, np.array([1, -1, 1, 1.0]))

    def test_two_layer_entropy_oracle(self, rng):
        m = ema_primed(random_net(rng, dim=5, hidden=(8, 8), classes=4), rng)
        x = rng.normal(size=(8, 5))
        for mode in (NormMode.BATCH_STAT, NormMode.TBR):
            err = netcore.finite_diff_check(m, x, LossSpec(LossKind.ENTROPY), 1e-5, mode)
            assert err <= 1e-4, (mode, err)

    @pytest.mark.parametrize("kind", [LossKind.ENTROPY, LossKind.PL, LossKind.ENTW])
    @pytest.mark.parametrize("mode", [NormMode.BATCH_STAT, NormMode.TBR])
    def test_random_nets(self, kind, mode):
        rng = np.random.default_rng(hash((kind.value, mode.value)) % (1 << 32))
        for _ in range(4):
            m = ema_primed(random_net(rng), rng)
            x = rng.normal(size=(int(rng.integers(2, 17)), m.spec.input_dim))
            loss = LossSpec(kind, 0.0 if kind is LossKind.PL else 1.0)
            assert netcore.finite_diff_check(m, x, loss, 1e-5, mode) <= 1e-4

    def test_quadratic_loss_is_exact(self, rng):
        m = netcore.init_model(ModelSpec(3, (4,), 3, seed=3))
        # large beta keeps every unit active, so logits are affine in (gamma, beta)
        m = m.with_norms([replace(m.norms[0], beta=np.full(4, 10.0))])
        x = rng.normal(size=(6, 3))
        assert netcore.finite_diff_check(m, x, LossSpec(LossKind.QUADRATIC), 1e-3, NormMode.BATCH_STAT) <= 1e-9

    def test_zero_step(self, rng):
        with pytest.raises(InputError):
            netcore.finite_diff_check(random_net(rng), np.zeros((2, 8)), LossSpec(), 0.0)

    def test_frozen_rd_makes_tbr_differ_from_tema_gradient(self, rng):
        # forward values agree, but a plain difference quotient through TBR would see the
        # dependence of r, d on the input; freezing them is what makes the oracle meaningful
        m = ema_primed(random_net(rng, dim=4, hidden=(6, 6), classes=3), rng)
        x = rng.normal(size=(8, 4))
        _, p, tr, _ = netcore.forward(m, x, NormMode.TBR, update_stats=False)
        _, p2, tr2, _ = netcore.forward(m, x, NormMode.TEST_EMA, update_stats=False)
        assert np.allclose(p, p2, atol=1e-12)
        g = entropy_loss(p)[1]
        a = netcore.backward_affine(m, tr, g)
        b = netcore.backward_affine(m, tr2, g, allow_test_ema=True)
        assert not np.allclose(a[0], b[0])


class TestOptimizer:
    def test_sgd(self):
        p, _ = netcore.optimizer_step([np.array([1.0])], [np.array([2.0])], None, OptimizerConfig("sgd", 0.1))
        assert abs(p[0][0] - 0.8) < 1e-15

    def test_zero_gradient(self):
        for kind in ("sgd", "adam"):
            p, _ = netcore.optimizer_step([np.array([1.5])], [np.array([0.0])], None, OptimizerConfig(kind, 0.1))
            assert p[0][0] == 1.5

    @pytest.mark.parametrize("g", [1e-3, -0.5, 7.0, -300.0])
    def test_adam_first_step(self, g):
        lr = 1e-3
        p, st = netcore.optimizer_step([np.array([0.0])], [np.array([g])], None, OptimizerConfig("adam", lr))
        # m_hat = g, v_hat = g^2 -> step = lr * |g| / (|g| + 1e-8)
        expected = lr * abs(g) / (abs(g) + 1e-8)
        assert abs(abs(p[0][0]) - expected) < 1e-15
        assert 0.99 * lr <= abs(p[0][0]) <= lr and np.sign(p[0][0]) == -np.sign(g)
        assert st.t == 1

    def test_deterministic(self, rng):
        ps = [rng.normal(size=3)]
        gs = [rng.normal(size=3)]
        a = netcore.optimizer_step(ps, gs, None, OptimizerConfig())
        b = netcore.optimizer_step(ps, gs, None, OptimizerConfig())
        assert np.array_equal(a[0][0], b[0][0])

    def test_bad_kind(self):
        with pytest.raises(ConfigError):
            OptimizerConfig("rmsprop")


def blobs(rng, n):
    y = rng.integers(0, 2, n)
    x = rng.normal(size=(n, 2)) * 0.7 + np.where(y[:, None] == 1, 2.0, -2.0)
    return LabeledDataset(x, y, 2)


def lda_accuracy(train, test):
    """Closed-form linear discriminant (shared covariance) as an independent baseline."""
    mu = [train.x[train.y == k].mean(0) for k in (0, 1)]
    cov = sum(np.cov(train.x[train.y == k].T) for k in (0, 1)) / 2
    w = np.linalg.solve(cov, mu[1] - mu[0])
    b = -0.5 * (mu[1] + mu[0]) @ w
    return np.mean((test.x @ w + b > 0) == (test.y == 1))


class TestTrainSource:
    def test_separable_blobs(self, rng):
        train, test = blobs(rng, 600), blobs(rng, 400)
        assert lda_accuracy(train, test) >= 0.95
        m = netcore.train_source(ModelSpec(2, (8,), 2, seed=0), train, epochs=20)
        acc = np.mean(netcore.predict(m, test.x).argmax(1) == test.y)
        assert acc >= 0.95
        assert all(np.all(s.sigma_src > 0) for s in m.norms)

    def test_deterministic(self, rng):
        train = blobs(rng, 200)
        a = netcore.train_source(ModelSpec(2, (4, 3), 2, seed=5), train, epochs=2)
        b = netcore.train_source(ModelSpec(2, (4, 3), 2, seed=5), train, epochs=2)
        assert checkpoint.dumps(checkpoint.model_to_dict(a)) == checkpoint.dumps(checkpoint.model_to_dict(b))

    def test_zero_epochs(self, rng):
        spec = ModelSpec(2, (4,), 2, seed=5)
        m = netcore.train_source(spec, blobs(rng, 50), epochs=0)
        m0 = netcore.init_model(spec)
        assert np.array_equal(m.dense[0][0], m0.dense[0][0]) and np.array_equal(m.head[0], m0.head[0])
        assert np.array_equal(m.norms[0].sigma_src, m0.norms[0].sigma_src)

    def test_empty(self):
        with pytest.raises(InputError):
            netcore.train_source(ModelSpec(2, (4,), 2), LabeledDataset(np.zeros((0, 2)), np.zeros(0), 2))


class TestModelSpec:
    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelSpec(2, (4,), 1)
        with pytest.raises(ConfigError):
            ModelSpec(2, (0,), 3)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, rng, tmp_path):
        m = ema_primed(random_net(rng), rng)
        path = tmp_path / "m.json"
        checkpoint.save_model(m, path, meta={"note": "x"})
        m2, meta = checkpoint.load_model(path, with_meta=True)
        assert meta == {"note": "x"}
        a, b = checkpoint.model_to_dict(m), checkpoint.model_to_dict(m2)
        assert checkpoint.dumps(a) == checkpoint.dumps(b)
        for s0, s1 in zip(m.norms, m2.norms):
            assert np.array_equal(s0.gamma, s1.gamma) and np.array_equal(s0.sigma_ema, s1.sigma_ema)
        assert np.array_equal(m.head[0], m2.head[0])

    def test_seventeen_digits(self):
        text = checkpoint.dumps({"x": 0.1})
        assert text == '{"x": 0.10000000000000001}'

    def test_uninitialized_stats_survive(self, rng, tmp_path):
        m = random_net(rng)
        checkpoint.save_model(m, tmp_path / "m.json")
        assert not checkpoint.load_model(tmp_path / "m.json").norms[0].initialized

    def test_bad_schema(self, tmp_path):
        (tmp_path / "bad.json").write_text('{"schema": "other"}')
        with pytest.raises(InputError):
            checkpoint.load_model(tmp_path / "bad.json")
