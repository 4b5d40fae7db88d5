import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hipmdp import bnn
from hipmdp.bnn import (
    AlphaConfig,
    BnnInput,
    PriorSpec,
    Standardizer,
    WeightPosterior,
    build_bnn_spec,
)
from hipmdp.replay import PrioritizedBuffer, TransitionRecord


def tiny_embedded_spec(latent_dim=2, hidden=()):
    return build_bnn_spec("embedded", state_dim=1, action_count=1,
                          hidden=hidden, latent_dim=latent_dim)


def make_posterior(spec, rng, log_var=-4.0, noise_var=0.04):
    post = bnn.init_posterior(spec, rng, init_log_variance=log_var,
                              noise_init_variance=noise_var)
    return post


def synthetic_batch(n, rng, slope=0.5, noise=0.05):
    x = rng.uniform(-1.0, 1.0, size=n)
    delta = slope * x + rng.normal(0.0, noise, size=n)
    core = np.stack([x, np.ones(n)], axis=1)  # state + constant one-hot
    return core, delta[:, None]


def regression_buffer(n, rng, slope=0.5, noise=0.05):
    buf = PrioritizedBuffer()
    x = rng.uniform(-1.0, 1.0, size=n)
    delta = slope * x + rng.normal(0.0, noise, size=n)
    for xi, di in zip(x, delta):
        buf.push(TransitionRecord(np.array([xi]), 0, 0.0, np.array([xi + di]), "inst:0"))
    return buf


class TestStandardizer:
    def test_fit_round_trip(self):
        rng = np.random.default_rng(0)
        states = rng.normal(3.0, 2.0, size=(500, 4))
        std = Standardizer.fit(states)
        enc = std.encode_state(states)
        assert enc.mean(axis=0) == pytest.approx(np.zeros(4), abs=1e-12)
        assert enc.std(axis=0) == pytest.approx(np.ones(4), rel=1e-12)
        d = rng.normal(size=4)
        assert std.decode_delta(std.encode_delta(d)) == pytest.approx(d)


class TestSpecShapes:
    def test_embedded_input_width(self):
        spec = build_bnn_spec("embedded", 2, 4, (25, 25, 25), latent_dim=5)
        # state + one-hot + latent + stochastic input
        assert spec.net.in_width == 2 + 4 + 5 + 1
        assert spec.net.out_width == 2

    def test_plain_has_no_latent_block(self):
        spec = build_bnn_spec("plain", 2, 4, (25,))
        assert spec.net.in_width == 2 + 4 + 1
        assert spec.latent_dim == 0
        binput = bnn.make_input(spec, np.zeros(2), 1)
        assert binput.core.shape == (6,)
        assert binput.latent is None

    def test_linear_output_is_basis_matrix(self):
        spec = build_bnn_spec("linear", 3, 2, (8,), latent_dim=5)
        assert spec.net.in_width == 3 + 2 + 1
        assert spec.net.out_width == 5 * 3

    def test_one_hot_validation(self):
        with pytest.raises(ValueError):
            BnnInput(np.zeros(2), np.array([1.0, 1.0, 0.0]))
        with pytest.raises(ValueError):
            bnn.one_hot(3, 4)


class TestSampleWeights:
    def test_degenerate_variance_returns_means(self):
        spec = tiny_embedded_spec()
        post = make_posterior(spec, np.random.default_rng(0))
        post.log_variance[:] = np.log(1e-30)
        draws = bnn.sample_weights(post, np.random.default_rng(1), 8)
        assert np.abs(draws - post.mean).max() < 1e-10

    def test_fixed_seed_reproducible(self):
        spec = tiny_embedded_spec()
        post = make_posterior(spec, np.random.default_rng(0))
        a = bnn.sample_weights(post, np.random.default_rng(42), 5)
        b = bnn.sample_weights(post, np.random.default_rng(42), 5)
        assert a.tobytes() == b.tobytes()

    def test_sample_mean_clt(self):
        post = WeightPosterior(
            mean=np.array([2.0]), log_variance=np.array([0.0]),
            noise_log_variance=np.array([0.0]),
        )
        draws = bnn.sample_weights(post, np.random.default_rng(2), 100_000)
        assert abs(draws.mean() - 2.0) < 0.02  # 3 sigma / sqrt(N) with sigma=1

    def test_rejects_zero_samples(self):
        spec = tiny_embedded_spec()
        post = make_posterior(spec, np.random.default_rng(0))
        with pytest.raises(ValueError):
            bnn.sample_weights(post, np.random.default_rng(0), 0)


class TestPredict:
    def test_zero_network_predicts_identity_transition(self):
        spec = build_bnn_spec("plain", 2, 3, (4,))
        post = make_posterior(spec, np.random.default_rng(0))
        post.mean[:] = 0.0
        post.log_variance[:] = np.log(1e-30)
        post.noise_log_variance[:] = np.log(0.09)
        binput = bnn.make_input(spec, np.array([0.3, -0.7]), 1)
        res = bnn.predict(post, spec, binput, np.random.default_rng(1), 40)
        assert res.mean == pytest.approx(np.zeros(2), abs=1e-10)
        assert res.variance == pytest.approx(np.full(2, 0.09), rel=1e-9)

    def test_variance_floor(self):
        spec = tiny_embedded_spec(latent_dim=2, hidden=(4,))
        rng = np.random.default_rng(3)
        post = make_posterior(spec, rng, log_var=-1.0, noise_var=0.2)
        binput = BnnInput(np.array([0.5]), np.array([1.0]), np.array([0.1, -0.2]))
        res = bnn.predict(post, spec, binput, rng, 25)
        assert (res.variance >= np.exp(post.noise_log_variance) - 1e-12).all()

    def test_rejects_zero_samples(self):
        spec = tiny_embedded_spec()
        post = make_posterior(spec, np.random.default_rng(0))
        binput = BnnInput(np.array([0.5]), np.array([1.0]), np.zeros(2))
        with pytest.raises(ValueError):
            bnn.predict(post, spec, binput, np.random.default_rng(0), 0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_variance_decomposition_property(self, seed):
        rng = np.random.default_rng(seed)
        spec = build_bnn_spec("plain", 2, 2, (5,))
        post = bnn.init_posterior(spec, rng,
                                  init_log_variance=float(rng.uniform(-8, 0)),
                                  noise_init_variance=float(rng.uniform(0.01, 2.0)))
        binput = bnn.make_input(spec, rng.normal(size=2), int(rng.integers(0, 2)))
        res = bnn.predict(post, spec, binput, rng, 10)
        assert (res.variance >= np.exp(post.noise_log_variance) - 1e-12).all()


class TestLinearForm:
    def _deterministic(self, rng):
        spec = build_bnn_spec("linear", 2, 2, (6,), latent_dim=3)
        post = make_posterior(spec, rng)
        post.log_variance[:] = np.log(1e-30)
        post.input_noise_variance = 0.0
        return spec, post

    def test_unit_latent_selects_basis_row(self):
        rng = np.random.default_rng(4)
        spec, post = self._deterministic(rng)
        core = np.array([[0.4, -1.0, 1.0, 0.0]])
        basis = bnn.nets.forward_batch(spec.net, post.mean, np.concatenate(
            [core, np.zeros((1, 1))], axis=1)).reshape(3, 2)
        for k in range(3):
            e_k = np.zeros(3)
            e_k[k] = 1.0
            pred = bnn.predict_batch_mean(post, spec, core, e_k, np.random.default_rng(0), 3)
            assert pred[0] == pytest.approx(basis[k], abs=1e-9)

    def test_prediction_linear_in_latent(self):
        rng = np.random.default_rng(5)
        spec, post = self._deterministic(rng)
        core = np.array([[1.0, 0.25, 0.0, 1.0]])
        w1 = np.array([0.3, -0.1, 0.8])
        w2 = np.array([-1.0, 0.4, 0.2])
        p = lambda w: bnn.predict_batch_mean(post, spec, core, w, np.random.default_rng(0), 2)[0]
        lhs = p(2.0 * w1 - 0.5 * w2)
        rhs = 2.0 * p(w1) - 0.5 * p(w2)
        assert lhs == pytest.approx(rhs, abs=1e-9)


class TestAlphaEnergy:
    def test_zero_dataset_weight_leaves_pure_kl(self):
        # posterior equal to the prior: KL term is exactly zero
        spec = tiny_embedded_spec(hidden=(3,))
        post = make_posterior(spec, np.random.default_rng(0))
        post.mean[:] = 0.0
        prior_var = 0.5
        post.log_variance[:] = np.log(prior_var)
        core, targets = synthetic_batch(8, np.random.default_rng(1))
        latents = np.zeros((8, 2))
        res = bnn.alpha_energy(post, spec, prior_var, core, targets, latents,
                               dataset_size=0, config=AlphaConfig(mc_samples=4),
                               rng=np.random.default_rng(2))
        assert res.energy == 0.0

    def test_alpha_to_zero_matches_free_energy(self):
        spec = build_bnn_spec("embedded", 1, 1, (6,), latent_dim=2)
        rng = np.random.default_rng(6)
        post = make_posterior(spec, rng, log_var=-3.0)
        core, targets = synthetic_batch(20, rng)
        latents = rng.normal(size=(20, 2)) * 0.3
        cfg = AlphaConfig(alpha=1e-6, mc_samples=10)
        energy = bnn.alpha_energy(post, spec, 1.0, core, targets, latents, 20,
                                  cfg, np.random.default_rng(99)).energy
        vfe = bnn.variational_free_energy(post, spec, 1.0, core, targets, latents, 20,
                                          cfg, np.random.default_rng(99))
        assert energy == pytest.approx(vfe, rel=1e-3)

    def test_empty_batch_rejected(self):
        spec = tiny_embedded_spec()
        post = make_posterior(spec, np.random.default_rng(0))
        with pytest.raises(ValueError):
            bnn.alpha_energy(post, spec, 1.0, np.zeros((0, 2)), np.zeros((0, 1)),
                             np.zeros((0, 2)), 10, AlphaConfig(), np.random.default_rng(0))

    def test_non_finite_energy_raises(self):
        spec = tiny_embedded_spec()
        post = make_posterior(spec, np.random.default_rng(0))
        post.mean[:] = 1e200
        post.noise_log_variance[:] = -700.0
        core, targets = synthetic_batch(4, np.random.default_rng(1))
        with pytest.raises(Exception):
            bnn.alpha_energy(post, spec, 1.0, core, targets, np.zeros((4, 2)), 10,
                             AlphaConfig(mc_samples=2), np.random.default_rng(2))

    @pytest.mark.parametrize("alpha", [0.5, 1.0])
    def test_gradients_match_finite_differences(self, alpha):
        # 4-weight plain net, 3 data points, common random numbers
        spec = build_bnn_spec("plain", 1, 2, ())
        rng = np.random.default_rng(7)
        base = make_posterior(spec, rng, log_var=-2.0, noise_var=0.3)
        core = np.array([[0.5, 1.0, 0.0], [-0.2, 0.0, 1.0], [1.3, 1.0, 0.0]])
        targets = np.array([[0.4], [-0.1], [0.9]])
        cfg = AlphaConfig(alpha=alpha, mc_samples=6)
        seed = 1234
        p = base.mean.shape[0]

        def energy_at(vec):
            post = WeightPosterior(vec[:p].copy(), vec[p:2 * p].copy(),
                                   vec[2 * p:].copy(), base.input_noise_variance)
            return bnn.alpha_energy(post, spec, 0.7, core, targets, None, 11, cfg,
                                    np.random.default_rng(seed)).energy

        vec0 = np.concatenate([base.mean, base.log_variance, base.noise_log_variance])
        res = bnn.alpha_energy(base, spec, 0.7, core, targets, None, 11, cfg,
                               np.random.default_rng(seed))
        analytic = np.concatenate([
            res.grads.mean, res.grads.log_variance, res.grads.noise_log_variance
        ])
        h = 1e-5
        fd = np.zeros_like(vec0)
        for i in range(len(vec0)):
            up, dn = vec0.copy(), vec0.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (energy_at(up) - energy_at(dn)) / (2 * h)
        scale = np.maximum(np.abs(fd), 1e-6)
        assert (np.abs(analytic - fd) / scale).max() < 1e-4

    @pytest.mark.parametrize("form", ["embedded", "linear"])
    def test_latent_gradients_match_finite_differences(self, form):
        spec = build_bnn_spec(form, 2, 2, (5,), latent_dim=3)
        rng = np.random.default_rng(8)
        base = make_posterior(spec, rng, log_var=-2.5, noise_var=0.2)
        core = np.concatenate([rng.normal(size=(4, 2)),
                               np.eye(2)[rng.integers(0, 2, 4)]], axis=1)
        targets = rng.normal(size=(4, 2)) * 0.3
        w = rng.normal(size=3) * 0.4
        cfg = AlphaConfig(alpha=0.5, mc_samples=5)
        seed = 777

        def energy_at(wvec):
            return bnn.alpha_energy(base, spec, 1.0, core, targets, wvec, 9, cfg,
                                    np.random.default_rng(seed)).energy

        res = bnn.alpha_energy(base, spec, 1.0, core, targets, w, 9, cfg,
                               np.random.default_rng(seed))
        analytic = res.grads.latent.sum(axis=0)  # shared latent across the batch
        h = 1e-5
        for i in range(3):
            up, dn = w.copy(), w.copy()
            up[i] += h
            dn[i] -= h
            fd = (energy_at(up) - energy_at(dn)) / (2 * h)
            assert analytic[i] == pytest.approx(fd, rel=1e-4, abs=1e-7)


class TestPriorSchedule:
    def test_starts_small_and_grows(self):
        prior = PriorSpec()
        assert prior.weight_variance(0) == pytest.approx(np.exp(-10.0))
        values = [prior.weight_variance(k) for k in range(8)]
        assert values == sorted(values)
        assert values[4] == pytest.approx(np.exp(-10.0) * 1e4)
        assert values[7] == values[4]  # growth stops after the configured steps

    @given(st.integers(-3, 50))
    @settings(max_examples=60, deadline=None)
    def test_capped_and_positive(self, phase):
        prior = PriorSpec(initial_weight_variance=1e-3, growth_factor=10.0,
                          growth_steps=6, max_variance=1.0)
        v = prior.weight_variance(phase)
        assert 0.0 < v <= 1.0


class TestTrainBnn:
    def test_constant_dataset_drives_prediction_to_constant(self):
        spec = build_bnn_spec("plain", 1, 1, (8,))
        rng = np.random.default_rng(9)
        buf = PrioritizedBuffer()
        for xi in np.linspace(-1, 1, 48):
            buf.push(TransitionRecord(np.array([xi]), 0, 0.0, np.array([xi + 0.7]), "i"))
        post = make_posterior(spec, rng, log_var=-6.0, noise_var=0.25)
        cfg = AlphaConfig(alpha=0.5, mc_samples=5, epochs=60, draw_size=64,
                          minibatch=32, learning_rate=2e-2)
        post = bnn.train_bnn(post, spec, 1.0, buf, None, cfg, rng)
        binput = bnn.make_input(spec, np.array([0.2]), 0)
        res = bnn.predict(post, spec, binput, np.random.default_rng(1), 50)
        noise_std = float(np.exp(0.5 * post.noise_log_variance[0]))
        assert abs(res.mean[0] - 0.7) < max(noise_std, 0.1)

    def test_latents_bitwise_unchanged(self):
        spec = build_bnn_spec("embedded", 1, 1, (4,), latent_dim=2)
        rng = np.random.default_rng(10)
        buf = regression_buffer(40, rng)
        w = rng.normal(size=2)
        snapshot = w.tobytes()
        post = make_posterior(spec, rng)
        cfg = AlphaConfig(mc_samples=3, epochs=3, draw_size=32, minibatch=16,
                          learning_rate=1e-3)
        bnn.train_bnn(post, spec, 1.0, buf, lambda _: w, cfg, rng)
        assert w.tobytes() == snapshot

    def test_variance_stays_positive(self):
        spec = build_bnn_spec("plain", 1, 1, (6,))
        rng = np.random.default_rng(11)
        buf = regression_buffer(40, rng)
        post = make_posterior(spec, rng)
        cfg = AlphaConfig(mc_samples=5, epochs=20, draw_size=32, minibatch=16,
                          learning_rate=5e-2)
        post = bnn.train_bnn(post, spec, 1.0, buf, None, cfg, rng)
        assert (post.variance > 0.0).all()

    def test_energy_decreases_on_fixed_set(self):
        spec = build_bnn_spec("plain", 1, 1, (6,))
        wins = 0
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            buf = regression_buffer(64, rng)
            core, targets, _ = bnn.batch_from_records(spec, buf.records, None)
            post = make_posterior(spec, rng, log_var=-6.0)
            cfg = AlphaConfig(alpha=0.5, mc_samples=5, epochs=100, draw_size=64,
                              minibatch=32, learning_rate=5e-3)
            eval_cfg = AlphaConfig(alpha=0.5, mc_samples=40)
            before = bnn.alpha_energy(post, spec, 1.0, core, targets, None, len(buf),
                                      eval_cfg, np.random.default_rng(0)).energy
            post = bnn.train_bnn(post, spec, 1.0, buf, None, cfg, rng)
            after = bnn.alpha_energy(post, spec, 1.0, core, targets, None, len(buf),
                                     eval_cfg, np.random.default_rng(0)).energy
            wins += after <= before
        assert wins >= 4

    def test_training_is_deterministic(self):
        spec = build_bnn_spec("plain", 1, 1, (5,))

        def run():
            rng = np.random.default_rng(12)
            buf = regression_buffer(32, np.random.default_rng(50))
            post = make_posterior(spec, np.random.default_rng(51))
            cfg = AlphaConfig(mc_samples=4, epochs=5, draw_size=32, minibatch=16,
                              learning_rate=1e-3)
            return bnn.train_bnn(post, spec, 1.0, buf, None, cfg, rng)

        a, b = run(), run()
        assert a.mean.tobytes() == b.mean.tobytes()
        assert a.log_variance.tobytes() == b.log_variance.tobytes()
        assert a.noise_log_variance.tobytes() == b.noise_log_variance.tobytes()

    def test_synthetic_regression_calibration(self):
        # y = x + noise; the predictive envelope should cover the truth
        spec = build_bnn_spec("plain", 1, 1, (12,))
        rng = np.random.default_rng(13)
        buf = PrioritizedBuffer()
        for xi in rng.uniform(-1, 1, size=120):
            target = xi + rng.normal(0.0, 0.05)
            buf.push(TransitionRecord(np.array([xi]), 0, 0.0, np.array([xi + target]), "i"))
        post = make_posterior(spec, rng, log_var=-6.0, noise_var=0.25)
        cfg = AlphaConfig(alpha=0.5, mc_samples=8, epochs=120, draw_size=96,
                          minibatch=32, learning_rate=1e-2)
        post = bnn.train_bnn(post, spec, 1.0, buf, None, cfg, rng)
        grid = np.linspace(-0.9, 0.9, 40)
        covered = 0
        for xg in grid:
            res = bnn.predict(post, spec, bnn.make_input(spec, np.array([xg]), 0),
                              np.random.default_rng(3), 50)
            covered += abs(res.mean[0] - xg) <= 2.0 * np.sqrt(res.variance[0])
        assert covered / len(grid) >= 0.95


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(14)
        std = Standardizer(rng.normal(size=2), np.abs(rng.normal(size=2)) + 0.5)
        spec = build_bnn_spec("embedded", 2, 4, (25, 25), latent_dim=5, standardizer=std)
        post = make_posterior(spec, rng)
        post.noise_log_variance[:] = rng.normal(size=2)
        bnn.save_posterior(tmp_path / "posterior_embedded", spec, post)
        spec2, post2 = bnn.load_posterior(tmp_path / "posterior_embedded")
        assert spec2.form == "embedded"
        assert spec2.net == spec.net
        assert post2.mean.tobytes() == post.mean.tobytes()
        assert post2.log_variance.tobytes() == post.log_variance.tobytes()
        assert np.array_equal(post2.noise_log_variance, post.noise_log_variance)
        assert np.array_equal(spec2.standardizer.mean, std.mean)
        assert np.array_equal(spec2.standardizer.std, std.std)
