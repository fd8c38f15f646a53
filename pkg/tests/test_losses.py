import numpy as np
import pytest

from sa4d.field import IdentityFieldParams, classifier_logits, softmax
from sa4d.losses import (LossConfig, LossDataError, NeighborIndex, _kl_terms,
                         loss_2d, loss_3d, loss_proj)
from sa4d.scene import Camera, CanonicalScene, Gaussian
from sa4d.splatting import compute_plan, render

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def make_camera(size=24):
    return Camera(extrinsic=np.eye(4), fx=float(size), fy=float(size),
                  cx=size / 2, cy=size / 2, width=size, height=size)


def random_scene(rng, n=12):
    gaussians = []
    for i in range(n):
        gaussians.append(Gaussian(
            index=i, position=rng.uniform(-0.5, 0.5, 3) + np.array([0, 0, 4.0]),
            rotation=IDENTITY_Q, scale=rng.uniform(0.05, 0.15, 3),
            opacity=float(rng.uniform(0.3, 0.9)), color=rng.uniform(0, 1, 3)))
    return CanonicalScene(gaussians=tuple(gaussians), object_count=1)


class TestLoss2d:
    def test_uniform_logits_give_log_num_classes(self):
        logits = np.zeros((3, 3, 4))
        mask = np.zeros((3, 3), dtype=int)
        loss, _ = loss_2d(logits, mask)
        assert loss == pytest.approx(np.log(4.0))

    def test_confident_correct_is_near_zero(self):
        logits = np.zeros((2, 2, 4))
        logits[:, :, 1] = 50.0
        mask = np.ones((2, 2), dtype=int)
        loss, _ = loss_2d(logits, mask)
        assert loss < 1e-12

    def test_void_is_an_ordinary_class(self):
        logits = np.zeros((2, 2, 4))
        logits[:, :, 0] = 50.0
        mask = np.zeros((2, 2), dtype=int)
        loss, _ = loss_2d(logits, mask)
        assert loss < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 5, 6))
        mask = rng.integers(0, 6, size=(4, 5))
        _, grad = loss_2d(logits, mask)
        h = 1e-6
        for _ in range(30):
            i, j, c = rng.integers(4), rng.integers(5), rng.integers(6)
            lp = logits.copy()
            lp[i, j, c] += h
            lm = logits.copy()
            lm[i, j, c] -= h
            fd = (loss_2d(lp, mask)[0] - loss_2d(lm, mask)[0]) / (2 * h)
            assert abs(fd - grad[i, j, c]) < 1e-6

    def test_grad_rows_sum_to_zero(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(3, 3, 5))
        mask = rng.integers(0, 5, size=(3, 3))
        _, grad = loss_2d(logits, mask)
        assert np.allclose(grad.sum(axis=-1), 0.0, atol=1e-12)

    def test_out_of_range_ids_rejected(self):
        with pytest.raises(LossDataError):
            loss_2d(np.zeros((2, 2, 3)), np.full((2, 2), 7))


class TestKL:
    def test_two_class_example(self):
        # KL((0.9, 0.1) || (0.5, 0.5)) = 0.9 ln 1.8 + 0.1 ln 0.2
        kl, _, _ = _kl_terms(np.array([[0.9, 0.1]]), np.array([[0.5, 0.5]]))
        expected = 0.9 * np.log(1.8) + 0.1 * np.log(0.2)
        assert kl[0] == pytest.approx(expected, abs=1e-12)
        assert kl[0] == pytest.approx(0.3680642071684971, abs=1e-9)

    def test_identical_distributions_zero(self):
        p = np.array([[0.2, 0.3, 0.5]])
        kl, _, _ = _kl_terms(p, p)
        assert kl[0] == pytest.approx(0.0, abs=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = rng.dirichlet(np.ones(6), size=1)
            b = rng.dirichlet(np.ones(6), size=1)
            kl, _, _ = _kl_terms(a, b)
            assert kl[0] >= -1e-12


class TestNeighborIndex:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(40, 3))
        index = NeighborIndex(pts)
        queries = np.arange(40)
        got = index.query(queries, k=5)
        for qi in queries:
            d = np.linalg.norm(pts - pts[qi], axis=1)
            order = sorted((dist, j) for j, dist in enumerate(d) if j != qi)
            expected = [j for _, j in order[:5]]
            assert got[qi].tolist() == expected

    def test_duplicate_points(self):
        pts = np.zeros((6, 3))
        pts[4:] = [[1, 0, 0], [2, 0, 0]]
        index = NeighborIndex(pts)
        got = index.query([0], k=4)[0]
        assert 0 not in got
        assert len(set(got.tolist())) == 4

    def test_k_too_large_rejected(self):
        index = NeighborIndex(np.zeros((3, 3)))
        with pytest.raises(LossDataError):
            index.query([0], k=3)


class TestLoss3d:
    def setup_params(self, n=25):
        rng = np.random.default_rng(4)
        params = IdentityFieldParams.init(seed=0)
        # widen the classifier so probabilities are non-uniform
        params.weights["wc"] = rng.normal(size=params.weights["wc"].shape) * 0.5
        encodings = rng.normal(size=(n, 32))
        positions = rng.normal(size=(n, 3))
        return params, encodings, NeighborIndex(positions)

    def test_identical_encodings_zero_loss(self):
        params, _, index = self.setup_params()
        encodings = np.tile(np.random.default_rng(5).normal(size=32), (25, 1))
        cfg = LossConfig(sample_count=10)
        loss, _, _ = loss_3d(encodings, params, index,
                             cfg, np.random.Generator(np.random.Philox(0)))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_encoding_gradient_matches_finite_differences(self):
        params, encodings, index = self.setup_params()
        cfg = LossConfig(sample_count=10, k=5)

        def run(e):
            return loss_3d(e, params, index, cfg,
                           np.random.Generator(np.random.Philox(7)))

        loss, grad_e, _ = run(encodings)
        rng = np.random.default_rng(6)
        h = 1e-6
        for _ in range(25):
            i, d = rng.integers(encodings.shape[0]), rng.integers(32)
            ep = encodings.copy()
            ep[i, d] += h
            em = encodings.copy()
            em[i, d] -= h
            fd = (run(ep)[0] - run(em)[0]) / (2 * h)
            denom = max(abs(fd), abs(grad_e[i, d]), 1e-6)
            assert abs(fd - grad_e[i, d]) / denom < 1e-4

    def test_classifier_gradient_matches_finite_differences(self):
        params, encodings, index = self.setup_params()
        cfg = LossConfig(sample_count=10, k=5)

        def run(p):
            return loss_3d(encodings, p, index, cfg,
                           np.random.Generator(np.random.Philox(7)))

        loss, _, grad_cls = run(params)
        rng = np.random.default_rng(8)
        h = 1e-6
        for name in ("wc", "bc"):
            d = rng.normal(size=params.weights[name].shape)
            pp = params.copy()
            pp.weights[name] += h * d
            pm = params.copy()
            pm.weights[name] -= h * d
            fd = (run(pp)[0] - run(pm)[0]) / (2 * h)
            an = np.sum(grad_cls[name] * d)
            denom = max(abs(fd), abs(an), 1e-6)
            assert abs(fd - an) / denom < 1e-4, name

    def test_deterministic_given_rng(self):
        params, encodings, index = self.setup_params()
        cfg = LossConfig(sample_count=8)
        a = loss_3d(encodings, params, index, cfg,
                    np.random.Generator(np.random.Philox(1)))[0]
        b = loss_3d(encodings, params, index, cfg,
                    np.random.Generator(np.random.Philox(1)))[0]
        assert a == b

    def test_oversampling_rejected(self):
        params, encodings, index = self.setup_params(n=6)
        cfg = LossConfig(sample_count=50)
        with pytest.raises(LossDataError):
            loss_3d(encodings[:6], params, index, cfg,
                    np.random.Generator(np.random.Philox(0)))


class TestLossProj:
    def test_value_matches_manual_sum(self):
        rng = np.random.default_rng(9)
        scene = random_scene(rng)
        cam = make_camera()
        payload = rng.uniform(0, 1, (len(scene), 1))
        out = render(scene, cam, payload)
        gt = (rng.uniform(size=(cam.height, cam.width)) > 0.5).astype(float)
        lam = 1.5
        loss, _ = loss_proj(out, gt, lam)
        m = out.image[:, :, 0]
        expected = -np.sum(gt * m) + lam * np.sum((1 - gt) * m)
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        scene = random_scene(rng)
        cam = make_camera()
        payload = rng.uniform(0, 1, (len(scene), 1))
        plan = compute_plan(scene, cam)
        out = render(scene, cam, payload, plan=plan)
        gt = (rng.uniform(size=(cam.height, cam.width)) > 0.5).astype(float)
        _, grads = loss_proj(out, gt, 2.0)
        h = 1e-4
        for i in range(len(scene)):
            pp = payload.copy()
            pp[i, 0] += h
            pm = payload.copy()
            pm[i, 0] -= h
            lp = loss_proj(render(scene, cam, pp, plan=plan), gt, 2.0)[0]
            lm = loss_proj(render(scene, cam, pm, plan=plan), gt, 2.0)[0]
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(grads[i]), 1e-3)
            assert abs(fd - grads[i]) / denom < 1e-4

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(0)
        scene = random_scene(rng)
        cam = make_camera()
        out = render(scene, cam, np.ones((len(scene), 1)))
        with pytest.raises(LossDataError):
            loss_proj(out, np.zeros((4, 4)), 1.0)


class TestConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.lambda_2d == 1.0
        assert cfg.lambda_3d == 2.0
        assert cfg.k == 5
        assert cfg.sample_count == 1000

    def test_negative_weight_rejected(self):
        with pytest.raises(LossDataError):
            LossConfig(lambda_3d=-1.0)
