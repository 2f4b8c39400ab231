import numpy as np
import pytest
from scipy.linalg import LinAlgError

import esnac.gp as gp_mod
from esnac import (EmbedderParams, EvalRecord, EvalSet, KernelConfig,
                   NonFiniteLossError, NumericalFailureError, Posterior,
                   PosteriorModel, RegressionHead, SequenceEncoding,
                   TrainConfig, embed, encoding_width, init_params, kernel,
                   loo_loss, loss_and_grad, posterior, train_kernel)


def synthetic_set(rng, n, n_max=4, rewards=None):
    width = encoding_width(n_max)
    records = []
    for i in range(n):
        rows = int(rng.integers(1, n_max + 1))
        s = SequenceEncoding(rng.random((rows, width)), n_max)
        y = float(rng.uniform(0.0, 1.0)) if rewards is None else float(rewards[i])
        records.append(EvalRecord(arch=None, encoding=s, accuracy=0.0,
                                  params=0, reward=y))
    return EvalSet(records=records)


def embeddings_of(params, data):
    return np.stack([embed(params, rec.encoding).values for rec in data])


def dense_posterior(h_mat, y, h_query, cfg):
    """Naive matrix-inverse reference for the posterior equations."""
    n = h_mat.shape[0]
    mu0 = y.mean() if n else 0.0
    d2 = ((h_mat[:, None, :] - h_mat[None, :, :]) ** 2).sum(axis=2)
    gram = np.exp(-d2 / (2 * cfg.sigma ** 2))
    np.fill_diagonal(gram, 1.0)
    a_inv = np.linalg.inv(gram + (cfg.noise_var + cfg.jitter) * np.eye(n))
    k_star = np.exp(-((h_mat - h_query) ** 2).sum(axis=1) / (2 * cfg.sigma ** 2))
    mean = mu0 + k_star @ a_inv @ (y - mu0)
    var = 1.0 - k_star @ a_inv @ k_star
    return float(mean), max(0.0, float(var))


class TestKernel:
    def test_self_kernel_is_one(self):
        rng = np.random.default_rng(0)
        params = init_params(1, 4, encoding_width(3))
        s = SequenceEncoding(rng.random((2, encoding_width(3))), 3)
        cfg = KernelConfig()
        assert kernel(params, cfg, s, s) == 1.0

    def test_symmetry_and_distance_law(self):
        rng = np.random.default_rng(2)
        params = init_params(3, 4, encoding_width(3))
        cfg = KernelConfig(sigma=0.7)
        a = SequenceEncoding(rng.random((2, encoding_width(3))), 3)
        b = SequenceEncoding(rng.random((3, encoding_width(3))), 3)
        kab = kernel(params, cfg, a, b)
        assert kab == kernel(params, cfg, b, a)
        d2 = np.sum((embed(params, a).values - embed(params, b).values) ** 2)
        assert abs(kab - np.exp(-d2 / (2 * 0.7 ** 2))) < 1e-14
        assert 0.0 < kab <= 1.0

    def test_unit_vector_geometry(self):
        # orthogonal unit embeddings sit at distance sqrt(2), antipodal at 2
        assert abs(np.exp(-2.0 / 2.0) - 0.36788) < 5e-6
        assert abs(np.exp(-4.0 / 2.0) - 0.13534) < 5e-6

    def test_gram_psd_up_to_fifty_points(self):
        rng = np.random.default_rng(5)
        params = init_params(7, 4, encoding_width(4))
        data = synthetic_set(rng, 50)
        gram = gp_mod._gram(embeddings_of(params, data), 1.0)
        assert np.allclose(gram, gram.T)
        assert np.all(np.diag(gram) == 1.0)
        assert np.linalg.eigvalsh(gram).min() >= -1e-8

    def test_config_validation(self):
        with pytest.raises(ValueError):
            KernelConfig(sigma=0.0)
        with pytest.raises(ValueError):
            KernelConfig(jitter=0.0)
        with pytest.raises(ValueError):
            KernelConfig(noise_var=-1.0)


class TestPosterior:
    def test_empty_train_is_prior(self):
        rng = np.random.default_rng(7)
        params = init_params(11, 4, encoding_width(3))
        q = SequenceEncoding(rng.random((2, encoding_width(3))), 3)
        p = posterior(params, KernelConfig(), EvalSet(), q)
        assert p.mean == 0.0 and p.variance == 1.0

    def test_interpolates_single_point(self):
        rng = np.random.default_rng(8)
        params = init_params(13, 4, encoding_width(4))
        data = synthetic_set(rng, 1, rewards=[0.73])
        cfg = KernelConfig(noise_var=0.0, jitter=1e-12)
        p = posterior(params, cfg, data, data.records[0].encoding)
        assert abs(p.mean - 0.73) < 1e-9
        assert p.variance < 1e-10

    def test_training_inputs_have_tiny_variance_without_noise(self):
        rng = np.random.default_rng(9)
        params = init_params(17, 4, encoding_width(4))
        data = synthetic_set(rng, 6)
        cfg = KernelConfig(noise_var=0.0, jitter=1e-10)
        model = PosteriorModel(params, cfg, data)
        for rec in data:
            assert model.predict(rec.encoding).variance < 1e-6

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(10)
        cfg = KernelConfig()
        for trial in range(200):
            n = int(rng.integers(1, 21))
            params = init_params(int(rng.integers(0, 2**31)), 4, encoding_width(4))
            data = synthetic_set(rng, n)
            q = SequenceEncoding(rng.random((2, encoding_width(4))), 4)
            p = posterior(params, cfg, data, q)
            mean, var = dense_posterior(embeddings_of(params, data),
                                        data.rewards(), embed(params, q).values,
                                        cfg)
            assert abs(p.mean - mean) < 1e-10
            assert abs(p.variance - var) < 1e-10

    def test_variance_never_negative(self):
        assert Posterior(0.0, 0.0).variance == 0.0
        with pytest.raises(ValueError):
            Posterior(0.0, -1e-3)


class TestEvalSet:
    def test_duplicate_rejected(self):
        rng = np.random.default_rng(11)
        data = synthetic_set(rng, 3)
        rec = data.records[0]
        dup = EvalRecord(arch=None, encoding=rec.encoding, accuracy=0.0,
                         params=0, reward=0.9)
        assert not data.add(dup)
        assert len(data) == 3
        with pytest.raises(ValueError):
            EvalSet(records=[rec, dup])

    def test_subset_by_mask_preserves_order(self):
        rng = np.random.default_rng(12)
        data = synthetic_set(rng, 5)
        sub = data.subset_by_mask([True, False, True, False, True])
        assert [r.reward for r in sub] == [data.records[i].reward for i in (0, 2, 4)]


class TestLooLoss:
    def refit_oracle(self, params, cfg, data):
        n = len(data)
        total = 0.0
        for i in range(n):
            rest = EvalSet(records=[r for j, r in enumerate(data) if j != i])
            p = posterior(params, cfg, rest, data.records[i].encoding)
            var = p.variance + cfg.noise_var + cfg.jitter
            y = data.records[i].reward
            total += 0.5 * np.log(2 * np.pi * var) + (y - p.mean) ** 2 / (2 * var)
        return total / n

    def test_matches_refits(self):
        rng = np.random.default_rng(13)
        cfg = KernelConfig()
        for trial in range(100):
            n = int(rng.integers(2, 16))
            params = init_params(int(rng.integers(0, 2**31)), 4, encoding_width(4))
            data = synthetic_set(rng, n)
            closed = loo_loss(params, cfg, data)
            naive = self.refit_oracle(params, cfg, data)
            assert abs(closed - naive) < 1e-8

    def test_near_orthogonal_limit(self):
        # sharp kernel + orthogonal unit embeddings: cross-kernels vanish, so
        # each fold predicts the mean of the others with variance 1 + ridge
        cfg = KernelConfig(sigma=0.1, noise_var=1e-3, jitter=1e-12)
        h = np.eye(4)
        y = np.array([0.2, 0.4, 0.6, 0.8])
        ridge = cfg.noise_var + cfg.jitter
        gram = gp_mod._gram(h, cfg.sigma)
        assert np.abs(gram - np.eye(4)).max() < 1e-30
        q_inv = np.linalg.inv(gram + ridge * np.eye(4))
        mu, var, _, _, _ = gp_mod._loo_terms(q_inv, y)
        fold_means = (y.sum() - y) / 3
        assert np.allclose(var, 1.0 + ridge, atol=1e-12)
        assert np.allclose(mu, fold_means, atol=1e-12)
        dens = 0.5 * np.log(2 * np.pi * var) + (y - mu) ** 2 / (2 * var)
        limit = 0.5 * np.log(2 * np.pi * (1 + ridge)) \
            + (y - fold_means) ** 2 / (2 * (1 + ridge))
        assert abs(dens.mean() - limit.mean()) < 1e-12

    def test_mean_shift_invariance(self):
        rng = np.random.default_rng(15)
        params = init_params(19, 4, encoding_width(4))
        cfg = KernelConfig()
        data = synthetic_set(rng, 6)
        shifted = EvalSet(records=[
            EvalRecord(arch=None, encoding=r.encoding, accuracy=r.accuracy,
                       params=r.params, reward=r.reward + 5.0)
            for r in data])
        a = loo_loss(params, cfg, data)
        b = loo_loss(params, cfg, shifted)
        assert abs(a - b) < 1e-9

    def test_needs_two_records(self):
        rng = np.random.default_rng(16)
        params = init_params(23, 4, encoding_width(4))
        with pytest.raises(ValueError):
            loo_loss(params, KernelConfig(), synthetic_set(rng, 1))


class TestFactor:
    def test_escalation_recovers_slightly_indefinite_input(self):
        cfg = KernelConfig(noise_var=0.0, jitter=1e-8)
        base = np.eye(3)
        base[0, 1] = base[1, 0] = 1.0 + 5e-7  # min eigenvalue ~ -5e-7
        (c, low), ridge = gp_mod._factor(base, cfg)
        assert ridge > cfg.noise_var + cfg.jitter

    def test_gives_up_on_hopeless_input(self):
        cfg = KernelConfig(noise_var=0.0, jitter=1e-8)
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3, -1
        with pytest.raises(NumericalFailureError):
            gp_mod._factor(bad, cfg)


class TestGradients:
    @staticmethod
    def pack_eval(objective, params, head, cfg, data):
        h, w = params.hidden_size, params.input_size

        def fn(vec):
            split = params.num_params()
            p = EmbedderParams.from_vector(vec[:split], h, w)
            hd = RegressionHead.from_vector(vec[split:]) if head is not None else None
            tcfg = TrainConfig(objective=objective)
            loss, _, _ = loss_and_grad(p, cfg, tcfg, data, head=hd)
            return loss

        vec = params.to_vector()
        if head is not None:
            vec = np.concatenate([vec, head.to_vector()])
        return fn, vec

    @pytest.mark.parametrize("objective", ["loo_posterior", "marginal_likelihood",
                                           "euclidean"])
    def test_finite_differences(self, objective):
        rng = np.random.default_rng(17)
        h = 3
        width = encoding_width(3)
        params = init_params(29, h, width)
        data = synthetic_set(rng, 3, n_max=3)
        cfg = KernelConfig()
        head = RegressionHead(rng.standard_normal(2 * h) * 0.3, 0.1) \
            if objective == "euclidean" else None
        tcfg = TrainConfig(objective=objective)
        _, g_params, g_head = loss_and_grad(params, cfg, tcfg, data, head=head)
        analytic = g_params.to_vector()
        if g_head is not None:
            analytic = np.concatenate([analytic, g_head.to_vector()])

        fn, vec = self.pack_eval(objective, params, head, cfg, data)
        step = 1e-5
        numeric = np.empty_like(vec)
        for i in range(vec.size):
            up, down = vec.copy(), vec.copy()
            up[i] += step
            down[i] -= step
            numeric[i] = (fn(up) - fn(down)) / (2 * step)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-6)
        assert rel.max() < 1e-4

    def test_euclidean_perfect_head_has_zero_loss(self):
        rng = np.random.default_rng(18)
        params = init_params(31, 3, encoding_width(3))
        data = synthetic_set(rng, 4, n_max=3)
        h_mat = embeddings_of(params, data)
        y = data.rewards()
        w, *_ = np.linalg.lstsq(np.column_stack([h_mat, np.ones(len(y))]), y,
                                rcond=None)
        head = RegressionHead(w[:-1], float(w[-1]))
        loss, _, g_head = loss_and_grad(params, KernelConfig(),
                                        TrainConfig(objective="euclidean"),
                                        data, head=head)
        assert loss < 1e-18
        assert np.abs(g_head.to_vector()).max() < 1e-9

    def test_record_order_invariance(self):
        rng = np.random.default_rng(19)
        params = init_params(37, 3, encoding_width(3))
        data = synthetic_set(rng, 5, n_max=3)
        perm = EvalSet(records=[data.records[i] for i in (3, 0, 4, 1, 2)])
        cfg = KernelConfig()
        tcfg = TrainConfig(objective="loo_posterior")
        la, ga, _ = loss_and_grad(params, cfg, tcfg, data)
        lb, gb, _ = loss_and_grad(params, cfg, tcfg, perm)
        assert abs(la - lb) < 1e-12
        assert np.allclose(ga.to_vector(), gb.to_vector(), atol=1e-12)

    def test_non_finite_loss_raises(self):
        # fifty points with astronomically scaled targets overflow the
        # quadratic form; the failure must be signalled, never returned
        rng = np.random.default_rng(20)
        params = init_params(41, 3, encoding_width(4))
        data = synthetic_set(rng, 50, rewards=rng.uniform(1e200, 2e200, size=50))
        with np.errstate(over="ignore", invalid="ignore"), \
                pytest.raises(NonFiniteLossError):
            loss_and_grad(params, KernelConfig(),
                          TrainConfig(objective="marginal_likelihood"), data)


class TestTrainKernel:
    def smooth_attribute_set(self, rng, n=10, n_max=3):
        width = encoding_width(n_max)
        records = []
        for i in range(n):
            mat = rng.random((2, width)) * 0.1
            a = rng.uniform(0.0, 1.0)
            mat[:, 9] = a  # one attribute carries the signal
            records.append(EvalRecord(
                arch=None, encoding=SequenceEncoding(mat, n_max), accuracy=0.0,
                params=0, reward=0.5 + 0.4 * np.sin(3.0 * a)))
        return EvalSet(records=records)

    def test_training_improves_loo(self):
        cfg = KernelConfig()
        wins = 0
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            data = self.smooth_attribute_set(rng)
            init = init_params(seed, 4, encoding_width(3))
            tcfg = TrainConfig(objective="loo_posterior", learning_rate=1e-2,
                               epochs=40, rng_seed=seed)
            before = loo_loss(init, cfg, data)
            after = loo_loss(train_kernel(init, cfg, tcfg, data), cfg, data)
            wins += after < before
        assert wins >= 18

    def test_deterministic(self):
        rng = np.random.default_rng(21)
        data = synthetic_set(rng, 5)
        init = init_params(43, 3, encoding_width(4))
        tcfg = TrainConfig(epochs=5, learning_rate=1e-2)
        a = train_kernel(init, KernelConfig(), tcfg, data)
        b = train_kernel(init, KernelConfig(), tcfg, data)
        assert np.array_equal(a.to_vector(), b.to_vector())

    def test_single_epoch_takes_exactly_one_step(self):
        rng = np.random.default_rng(22)
        data = synthetic_set(rng, 4)
        init = init_params(47, 3, encoding_width(4))
        cfg = KernelConfig()
        tcfg = TrainConfig(epochs=1, learning_rate=1e-3)
        out = train_kernel(init, cfg, tcfg, data)
        # reproduce one adaptive-moment step by hand
        _, g, _ = loss_and_grad(init, cfg, tcfg, data)
        grad = g.to_vector()
        m_hat = grad  # first-step bias correction cancels the (1-beta) factor
        v_hat = grad * grad
        expected = init.to_vector() - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert np.allclose(out.to_vector(), expected, atol=1e-14)
        assert not np.array_equal(out.to_vector(), init.to_vector())

    def test_returns_best_seen_iterate(self):
        rng = np.random.default_rng(23)
        data = synthetic_set(rng, 6)
        init = init_params(53, 3, encoding_width(4))
        cfg = KernelConfig()
        tcfg = TrainConfig(epochs=25, learning_rate=5e-2)  # big steps oscillate
        out = train_kernel(init, cfg, tcfg, data)
        final = loo_loss(out, cfg, data)
        # no other observable iterate is required to beat it, but it must not
        # be worse than the raw final iterate path's best; re-run manually
        best = np.inf
        theta = init.copy()
        m = np.zeros(init.num_params())
        v = np.zeros_like(m)
        vec = theta.to_vector()
        for t in range(1, 26):
            _, g, _ = loss_and_grad(
                EmbedderParams.from_vector(vec, 3, init.input_size), cfg, tcfg, data)
            grad = g.to_vector()
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            vec = vec - 5e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            best = min(best, loo_loss(
                EmbedderParams.from_vector(vec, 3, init.input_size), cfg, data))
        assert abs(final - best) < 1e-9

    def test_halving_recovers_from_transient_blowup(self, monkeypatch):
        rng = np.random.default_rng(24)
        data = synthetic_set(rng, 5)
        init = init_params(59, 3, encoding_width(4))
        real = gp_mod.loss_and_grad
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 2:
                raise NonFiniteLossError("synthetic blowup")
            return real(*args, **kwargs)

        monkeypatch.setattr(gp_mod, "loss_and_grad", flaky)
        out = train_kernel(init, KernelConfig(), TrainConfig(epochs=3), data)
        assert np.isfinite(out.to_vector()).all()
        assert calls["n"] >= 4

    def test_persistent_blowup_propagates(self, monkeypatch):
        rng = np.random.default_rng(25)
        data = synthetic_set(rng, 5)
        init = init_params(61, 3, encoding_width(4))

        def always_bad(*args, **kwargs):
            raise NonFiniteLossError("synthetic blowup")

        monkeypatch.setattr(gp_mod, "loss_and_grad", always_bad)
        with pytest.raises(NonFiniteLossError):
            train_kernel(init, KernelConfig(), TrainConfig(epochs=3), data)

    def test_euclidean_objective_trains(self):
        rng = np.random.default_rng(26)
        data = synthetic_set(rng, 8)
        init = init_params(67, 3, encoding_width(4))
        tcfg = TrainConfig(objective="euclidean", epochs=10, learning_rate=1e-2)
        out = train_kernel(init, KernelConfig(), tcfg, data)
        assert isinstance(out, EmbedderParams)
        assert out.to_vector().shape == init.to_vector().shape
