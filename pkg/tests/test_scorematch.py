import numpy as np
import pytest

from clearcbm.dataio import EmbeddingSet
from clearcbm.errors import ConfigError, ShapeMismatchError
from clearcbm.nn import MlpParams, make_rng, mlp_jvp
from clearcbm.scorematch import (
    ScoreNet,
    SsmConfig,
    load_score_net,
    score,
    ssm_objective,
    train_score,
)


def negid_scorenet(d):
    """Hard-wired s(x) = -x, the score of N(0, I)."""
    ws = [-np.eye(d), np.eye(d), np.eye(d)]
    bs = [np.zeros(d)] * 3
    return ScoreNet(MlpParams(ws, bs, activation="identity"))


def zero_scorenet(d):
    ws = [np.zeros((d, d))] * 3
    bs = [np.zeros(d)] * 3
    return ScoreNet(MlpParams(ws, bs, activation="identity"))


class TestSsmObjective:
    def test_standard_normal_analytic_expectation(self):
        # For s(x) = -x and x ~ N(0, I_d): E[v.Jv] = -d, E[0.5||x||^2] = d/2,
        # so the loss estimator should sit at -d/2 within Monte-Carlo error.
        d, n = 8, 100_000
        net = negid_scorenet(d)
        rng = make_rng(123)
        x = rng.standard_normal((n, d))
        loss, _ = ssm_objective(net, x, make_rng(7), n_slices=1)
        # per-sample values are -d + 0.5 chi2_d; var = d/2
        se = np.sqrt(d / 2.0 / n)
        assert abs(loss - (-d / 2)) < 3 * se

    def test_zero_score_zero_loss(self):
        net = zero_scorenet(5)
        x = make_rng(1).standard_normal((64, 5))
        loss, grads = ssm_objective(net, x, make_rng(2))
        assert loss == 0.0

    def test_gradient_finite_differences(self):
        from clearcbm.nn import init_mlp

        d, h = 3, 5
        rng = make_rng(3)
        net = ScoreNet(init_mlp(d, h, d, rng))
        x = rng.standard_normal((6, d))

        # freeze the slice draw so the finite-difference loss is the same function
        def loss_at(params):
            n2 = ScoreNet(params)
            return ssm_objective(n2, x, make_rng(77))[0]

        base_loss, grads = ssm_objective(net, x, make_rng(77))
        eps = 1e-5
        for block in range(6):
            arr = net.params.flatten()[block]
            for idx in [0, arr.size // 2, arr.size - 1]:
                p = net.params.copy()
                p.flatten()[block].flat[idx] += eps
                up = loss_at(p)
                p = net.params.copy()
                p.flatten()[block].flat[idx] -= eps
                dn = loss_at(p)
                fd = (up - dn) / (2 * eps)
                assert grads[block].flat[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_rademacher_slice_trace_identity(self):
        # averaging v.Jv over all 2^d sign vectors reproduces trace(J) exactly
        from clearcbm.nn import init_mlp
        from itertools import product

        d = 5
        rng = make_rng(4)
        net = ScoreNet(init_mlp(d, 7, d, rng))
        x = rng.standard_normal(d)
        jac = np.stack(
            [mlp_jvp(net.params, x, np.eye(d)[i]) for i in range(d)], axis=1
        )
        trace = float(np.trace(jac))
        vals = []
        for signs in product([-1.0, 1.0], repeat=d):
            v = np.array(signs)
            vals.append(float(v @ mlp_jvp(net.params, x, v)))
        assert np.mean(vals) == pytest.approx(trace, rel=1e-10, abs=1e-10)

    def test_estimator_deviation_shrinks_with_sample_size(self):
        d = 8
        net = negid_scorenet(d)
        rng = make_rng(5)
        devs = []
        for n in (1_000, 100_000):
            reps = []
            for r in range(5):
                x = rng.standard_normal((n, d))
                loss, _ = ssm_objective(net, x, make_rng(100 + r))
                reps.append(abs(loss - (-d / 2)))
            devs.append(np.mean(reps))
        # 100x the samples should shrink the deviation roughly 10x; allow slack
        assert devs[1] < devs[0] / 3

    def test_empty_batch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            ssm_objective(zero_scorenet(3), np.zeros((0, 3)), make_rng(0))


def gaussian_images(n, mu, sigma, seed):
    rng = make_rng(seed)
    x = mu + sigma * rng.standard_normal((n, len(mu)))
    return EmbeddingSet.from_array(x.astype(np.float32))


def empty_descriptors(d):
    return EmbeddingSet.from_array(np.zeros((0, d), dtype=np.float32))


class TestTrainScore:
    def test_zero_epochs_returns_initial_net(self):
        imgs = gaussian_images(50, np.zeros(3), 1.0, 1)
        cfg = SsmConfig(epochs=0, hidden_dim=8, image_batch_size=16, seed=3)
        net, losses = train_score(imgs, empty_descriptors(3), cfg)
        assert losses == []
        from clearcbm.nn import init_mlp

        fresh = init_mlp(3, 8, 3, make_rng(3, 0))
        for a, b in zip(net.params.flatten(), fresh.flatten()):
            assert a.tobytes() == b.tobytes()

    def test_dimension_mismatch(self):
        imgs = gaussian_images(10, np.zeros(3), 1.0, 1)
        descs = gaussian_images(4, np.zeros(5), 1.0, 2)
        with pytest.raises(ShapeMismatchError):
            train_score(imgs, descs, SsmConfig(epochs=1, hidden_dim=8))

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            SsmConfig(learning_rate=-1.0).validate()
        with pytest.raises(ConfigError):
            SsmConfig(slice_distribution="cauchy").validate()

    def test_reproducible_bitwise(self):
        imgs = gaussian_images(60, np.array([1.0, -1.0]), 0.5, 9)
        cfg = SsmConfig(epochs=3, hidden_dim=16, image_batch_size=32,
                        learning_rate=1e-3, seed=11)
        n1, l1 = train_score(imgs, empty_descriptors(2), cfg)
        n2, l2 = train_score(imgs, empty_descriptors(2), cfg)
        assert l1 == l2
        for a, b in zip(n1.params.flatten(), n2.params.flatten()):
            assert a.tobytes() == b.tobytes()

    def test_descriptor_batches_enter_every_step(self):
        # training with descriptors must differ from training without
        imgs = gaussian_images(40, np.zeros(2), 1.0, 4)
        descs = gaussian_images(8, np.array([5.0, 5.0]), 0.1, 5)
        cfg = SsmConfig(epochs=2, hidden_dim=8, image_batch_size=20,
                        descriptor_batch_size=4, learning_rate=1e-3, seed=6)
        with_d, _ = train_score(imgs, descs, cfg)
        without, _ = train_score(imgs, empty_descriptors(2), cfg)
        diffs = [
            np.abs(a - b).max()
            for a, b in zip(with_d.params.flatten(), without.params.flatten())
        ]
        assert max(diffs) > 0

    def test_recovers_gaussian_score(self):
        # N(mu, sigma^2 I) has score (mu - x) / sigma^2
        mu, sigma = np.array([1.0, -1.0]), 0.5
        imgs = gaussian_images(2000, mu, sigma, 21)
        cfg = SsmConfig(epochs=120, hidden_dim=48, image_batch_size=256,
                        learning_rate=1e-3, seed=22)
        net, losses = train_score(imgs, empty_descriptors(2), cfg)
        held = make_rng(23).standard_normal((500, 2)) * sigma + mu
        pred = score(net, held)
        truth = (mu - held) / sigma**2
        cos = np.sum(pred * truth, axis=1) / (
            np.linalg.norm(pred, axis=1) * np.linalg.norm(truth, axis=1)
        )
        assert np.mean(cos) > 0.95
        # loss should improve over training
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_mixture_score_field_points_to_nearer_mode(self):
        rng = make_rng(31)
        mus = [np.array([2.0, 0.0]), np.array([-2.0, 0.0])]
        sigma = 0.5
        comps = rng.integers(0, 2, size=3000)
        samples = np.stack([mus[c] for c in comps]) + sigma * rng.standard_normal((3000, 2))
        imgs = EmbeddingSet.from_array(samples.astype(np.float32))
        cfg = SsmConfig(epochs=150, hidden_dim=48, image_batch_size=256,
                        learning_rate=1e-3, seed=32)
        net, _ = train_score(imgs, empty_descriptors(2), cfg)

        def mixture_score(x):
            # analytic score of 0.5 N(mu1, s^2 I) + 0.5 N(mu2, s^2 I)
            d1 = x - mus[0]
            d2 = x - mus[1]
            w1 = np.exp(-np.sum(d1 * d1, axis=1) / (2 * sigma**2))
            w2 = np.exp(-np.sum(d2 * d2, axis=1) / (2 * sigma**2))
            tot = w1 + w2
            return (-(w1[:, None] * d1 + w2[:, None] * d2) / tot[:, None]) / sigma**2

        test_rng = make_rng(33)
        pts = []
        for mu in mus:
            pts.append(mu + sigma * test_rng.standard_normal((200, 2)) * 0.9)
        pts = np.concatenate(pts)
        within = np.minimum(
            np.linalg.norm(pts - mus[0], axis=1), np.linalg.norm(pts - mus[1], axis=1)
        ) <= sigma
        pred = score(net, pts[within])
        truth = mixture_score(pts[within])
        agree = np.sum(pred * truth, axis=1) > 0
        assert np.mean(agree) >= 0.90


class TestScoreEval:
    def test_zero_net(self):
        net = zero_scorenet(4)
        np.testing.assert_array_equal(score(net, np.ones(4)), np.zeros(4))

    def test_deterministic(self):
        from clearcbm.nn import init_mlp

        net = ScoreNet(init_mlp(3, 8, 3, make_rng(40)))
        x = make_rng(41).standard_normal(3)
        assert score(net, x).tobytes() == score(net, x).tobytes()

    def test_score_magnitude_grows_away_from_mode(self):
        mu, sigma = np.array([1.0, -1.0]), 0.5
        imgs = gaussian_images(2000, mu, sigma, 51)
        cfg = SsmConfig(epochs=100, hidden_dim=32, image_batch_size=256,
                        learning_rate=1e-3, seed=52)
        net, _ = train_score(imgs, empty_descriptors(2), cfg)
        at_mode = np.linalg.norm(score(net, mu))
        away = np.linalg.norm(score(net, mu + 3 * sigma * np.array([1.0, 0.0])))
        assert at_mode < away


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        imgs = gaussian_images(30, np.zeros(2), 1.0, 61)
        cfg = SsmConfig(epochs=1, hidden_dim=8, image_batch_size=16, seed=62)
        net, _ = train_score(imgs, empty_descriptors(2), cfg, checkpoint_dir=tmp_path)
        back = load_score_net(tmp_path / "score.clnn")
        for a, b in zip(net.params.flatten(), back.params.flatten()):
            assert a.tobytes() == b.tobytes()
        assert back.params.activation == "softplus"
        assert back.trained_on == net.trained_on
