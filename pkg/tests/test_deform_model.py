import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gridtrack.deform_model import (DeformModelParams, RotationError, TimeEncoder,
                                    apply_transform, assemble_input, map_rotation,
                                    map_translation, mlp_backward, mlp_forward,
                                    model_forward, model_vjp, rotation_vjp)


def rng_of(seed):
    return np.random.default_rng(seed)


class TestTimeEncoding:
    def test_fourier_first_frame(self):
        enc = TimeEncoder.create("fourier", 4, rng_of(0))
        np.testing.assert_allclose(enc.encode(1, 9), [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-15)

    def test_fourier_last_frame(self):
        enc = TimeEncoder.create("fourier", 4, rng_of(0))
        out = enc.encode(9, 9)
        np.testing.assert_allclose(out, [0, -1, 0, 1, 0, 1, 0, 1], atol=1e-12)

    def test_polynomial_midpoint(self):
        enc = TimeEncoder.create("polynomial", 4, rng_of(0))
        out = enc.encode(2, 3)  # normalized time 0.5
        np.testing.assert_allclose(out, [0.5 ** j for j in range(1, 9)], atol=1e-15)

    def test_fourier_and_gaussian_bounded(self):
        for variant in ("fourier", "gaussian"):
            enc = TimeEncoder.create(variant, 4, rng_of(3))
            out = enc.encode_all(50)
            assert np.abs(out).max() <= 1.0 + 1e-12

    def test_gaussian_frequencies_frozen(self):
        enc1 = TimeEncoder.create("gaussian", 4, rng_of(7))
        enc2 = TimeEncoder.create("gaussian", 4, rng_of(7))
        np.testing.assert_array_equal(enc1.gaussian_b, enc2.gaussian_b)
        np.testing.assert_array_equal(enc1.encode_all(12), enc2.encode_all(12))

    def test_learned_output_dim(self):
        enc = TimeEncoder.create("learned", 4, rng_of(1))
        assert enc.encode_all(5).shape == (5, 8)

    def test_single_frame_warns(self):
        enc = TimeEncoder.create("fourier", 4, rng_of(0))
        with pytest.warns(UserWarning):
            out = enc.encode_all(1)
        np.testing.assert_allclose(out, [[0, 1, 0, 1, 0, 1, 0, 1]], atol=1e-15)

    def test_learned_gradient_matches_fd(self):
        enc = TimeEncoder.create("learned", 2, rng_of(5))
        # move the zero-initialized biases off the activation kink (normalized
        # time 0 would otherwise put frame 1 exactly at the non-smooth point)
        enc.learned_params[0] = (enc.learned_params[0][0],
                                 0.3 * rng_of(50).standard_normal(64))
        t = 6
        up = rng_of(6).standard_normal((t, 4))

        def loss():
            return float((enc.encode_all(t) * up).sum())

        base = loss()
        _ = enc.encode_all(t)
        grads = enc.backward(up)
        eps = 1e-6
        for (gw, gb), (w, b) in zip(grads, enc.learned_params):
            for arr, g in ((w, gw), (b, gb)):
                flat, gflat = arr.ravel(), np.asarray(g).ravel()
                for k in range(0, flat.size, max(1, flat.size // 17)):
                    saved = flat[k]
                    flat[k] = saved + eps
                    hi = loss()
                    flat[k] = saved - eps
                    lo = loss()
                    flat[k] = saved
                    assert gflat[k] == pytest.approx((hi - lo) / (2 * eps),
                                                     rel=1e-5, abs=1e-8)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            TimeEncoder.create("spline", 4, rng_of(0))


class TestAssembleInput:
    def test_zero_inputs(self):
        y = assemble_input(np.zeros((1, 2)), np.zeros((1, 30)), np.zeros((1, 8)))
        np.testing.assert_array_equal(y, np.zeros((1, 40)))

    def test_ordering(self):
        y = assemble_input(np.array([[1.0, 2.0]]), np.zeros((1, 30)), np.zeros((1, 8)))
        assert y[0, 0] == 1.0 and y[0, 1] == 2.0
        assert np.all(y[0, 2:] == 0.0)

    def test_order_matters_through_mlp(self):
        # with a nonzero head, permuting the concatenation changes the output
        params = DeformModelParams.create(40, rng_of(2), hidden_width=16)
        params.layers[-1] = (rng_of(3).standard_normal((16, 7)), np.zeros(7))
        z_n, z_p, gamma = (rng_of(4).standard_normal((1, 2)),
                           rng_of(5).standard_normal((1, 30)),
                           rng_of(6).standard_normal((1, 8)))
        y = assemble_input(z_n, z_p, gamma)
        y_permuted = np.concatenate([z_p, z_n, gamma], axis=1)
        out_a = np.concatenate(mlp_forward(params, y), axis=1)
        out_b = np.concatenate(mlp_forward(params, y_permuted), axis=1)
        assert np.abs(out_a - out_b).max() > 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            assemble_input(np.zeros((2, 2)), np.zeros((3, 30)), np.zeros((2, 8)))


class TestMlp:
    def test_zero_head_outputs_zero(self):
        params = DeformModelParams.create(40, rng_of(0))
        q, d = mlp_forward(params, rng_of(1).standard_normal((5, 40)))
        np.testing.assert_array_equal(q, np.zeros((5, 4)))
        np.testing.assert_array_equal(d, np.zeros((5, 3)))

    def test_zero_hidden_nonzero_bias(self):
        params = DeformModelParams.create(6, rng_of(0), hidden_width=4)
        for i, (w, b) in enumerate(params.layers[:-1]):
            params.layers[i] = (np.zeros_like(w), np.zeros_like(b))
        bias = np.arange(7.0)
        params.layers[-1] = (np.zeros((4, 7)), bias)
        q, d = mlp_forward(params, rng_of(2).standard_normal((3, 6)))
        np.testing.assert_array_equal(np.concatenate([q, d], axis=1),
                                      np.tile(bias, (3, 1)))

    def test_gradients_match_fd(self):
        params = DeformModelParams.create(8, rng_of(3), hidden_width=8)
        params.layers[-1] = (0.3 * rng_of(4).standard_normal((8, 7)),
                             0.1 * rng_of(5).standard_normal(7))
        y = rng_of(6).standard_normal((4, 8))
        up = rng_of(7).standard_normal((4, 7))

        def loss():
            q, d = mlp_forward(params, y)
            return float((np.concatenate([q, d], axis=1) * up).sum())

        _, cache = mlp_forward(params, y, want_cache=True)
        grads, dy = mlp_backward(params, cache, up)
        eps = 1e-6
        for (gw, gb), (w, b) in zip(grads, params.layers):
            for arr, g in ((w, gw), (b, gb)):
                flat, gflat = arr.ravel(), g.ravel()
                for k in range(0, flat.size, max(1, flat.size // 13)):
                    saved = flat[k]
                    flat[k] = saved + eps
                    hi = loss()
                    flat[k] = saved - eps
                    lo = loss()
                    flat[k] = saved
                    assert gflat[k] == pytest.approx((hi - lo) / (2 * eps),
                                                     rel=1e-5, abs=1e-8)
        # input gradient
        for k in range(y.size):
            saved = y.ravel()[k]
            y.ravel()[k] = saved + eps
            hi = loss()
            y.ravel()[k] = saved - eps
            lo = loss()
            y.ravel()[k] = saved
            assert dy.ravel()[k] == pytest.approx((hi - lo) / (2 * eps), rel=1e-5, abs=1e-8)

    def test_non_finite_params_rejected(self):
        params = DeformModelParams.create(4, rng_of(0), hidden_width=4)
        params.layers[0][0][0, 0] = np.nan
        with pytest.raises(FloatingPointError):
            mlp_forward(params, np.zeros((1, 4)))


class TestRotations:
    @pytest.mark.parametrize("variant", ["quaternion", "cayley", "exponential"])
    def test_zero_input_identity_exact(self, variant):
        r = map_rotation(np.zeros((1, 4)), variant)[0]
        np.testing.assert_array_equal(r, np.eye(3))

    def test_quaternion_matches_scipy(self):
        # oracle: scipy's quaternion-to-matrix conversion (Hamilton, xyzw order)
        raw = np.array([[0.0, 1.0, 0.0, 0.0]])
        r = map_rotation(raw, "quaternion")[0]
        q_hat = np.array([1.0, 1.0, 0.0, 0.0]) / np.sqrt(2.0)  # (w, x, y, z)
        expect = Rotation.from_quat([q_hat[1], q_hat[2], q_hat[3], q_hat[0]]).as_matrix()
        np.testing.assert_allclose(r, expect, atol=1e-14)
        np.testing.assert_allclose(
            r, Rotation.from_rotvec([np.pi / 2, 0, 0]).as_matrix(), atol=1e-14)

    def test_quaternion_random_matches_scipy(self):
        rng = rng_of(8)
        raw = rng.uniform(-2, 2, (50, 4))
        r = map_rotation(raw, "quaternion")
        v = raw.copy()
        v[:, 0] += 1.0
        v /= np.linalg.norm(v, axis=1)[:, None]
        expect = Rotation.from_quat(v[:, [1, 2, 3, 0]]).as_matrix()
        np.testing.assert_allclose(r, expect, atol=1e-12)

    def test_exponential_matches_rodrigues_oracle(self):
        raw = np.array([[0.0, 0.0, 0.0, np.pi / 2]])
        r = map_rotation(raw, "exponential")[0]
        np.testing.assert_allclose(r @ np.array([1.0, 0, 0]), [0, 1, 0], atol=1e-14)
        expect = Rotation.from_rotvec([0, 0, np.pi / 2]).as_matrix()
        np.testing.assert_allclose(r, expect, atol=1e-14)

    def test_exponential_random_matches_scipy(self):
        rng = rng_of(9)
        raw = np.concatenate([np.zeros((40, 1)), rng.uniform(-3, 3, (40, 3))], axis=1)
        r = map_rotation(raw, "exponential")
        expect = Rotation.from_rotvec(raw[:, 1:]).as_matrix()
        np.testing.assert_allclose(r, expect, atol=1e-12)

    def test_cayley_equals_offset_quaternion(self):
        # (I-S)^-1 (I+S) is the rotation of the unnormalized quaternion (1, w)
        rng = rng_of(10)
        raw = np.concatenate([np.zeros((30, 1)), rng.uniform(-2, 2, (30, 3))], axis=1)
        np.testing.assert_allclose(map_rotation(raw, "cayley"),
                                   map_rotation(raw, "quaternion"), atol=1e-12)

    @pytest.mark.parametrize("variant", ["quaternion", "cayley", "exponential"])
    def test_orthonormal_and_proper(self, variant):
        rng = rng_of(11)
        raw = rng.uniform(-5, 5, (2000, 4))
        r = map_rotation(raw, variant)
        rtr = np.einsum("sji,sjk->sik", r, r)
        assert np.abs(rtr - np.eye(3)).max() <= 1e-6
        assert np.abs(np.linalg.det(r) - 1.0).max() <= 1e-6

    def test_quaternion_degenerate_offset(self):
        with pytest.raises(RotationError):
            map_rotation(np.array([[-1.0, 0.0, 0.0, 0.0]]), "quaternion")

    @pytest.mark.parametrize("variant", ["quaternion", "cayley", "exponential"])
    def test_vjp_matches_fd(self, variant):
        rng = rng_of(12)
        raw = rng.uniform(-1.5, 1.5, (6, 4))
        up = rng.standard_normal((6, 3, 3))
        grad = rotation_vjp(raw, variant, up)
        eps = 1e-6
        for s in range(len(raw)):
            for k in range(4):
                saved = raw[s, k]
                raw[s, k] = saved + eps
                hi = float((map_rotation(raw[s:s + 1], variant)[0] * up[s]).sum())
                raw[s, k] = saved - eps
                lo = float((map_rotation(raw[s:s + 1], variant)[0] * up[s]).sum())
                raw[s, k] = saved
                assert grad[s, k] == pytest.approx((hi - lo) / (2 * eps),
                                                   rel=1e-5, abs=1e-8)

    def test_vjp_near_zero_exponential(self):
        rng = rng_of(13)
        raw = np.zeros((3, 4))
        raw[1, 1:] = 1e-6
        raw[2, 1:] = 5e-5
        up = rng.standard_normal((3, 3, 3))
        grad = rotation_vjp(raw, "exponential", up)
        eps = 1e-7
        for s in range(3):
            for k in range(1, 4):
                saved = raw[s, k]
                raw[s, k] = saved + eps
                hi = float((map_rotation(raw[s:s + 1], "exponential")[0] * up[s]).sum())
                raw[s, k] = saved - eps
                lo = float((map_rotation(raw[s:s + 1], "exponential")[0] * up[s]).sum())
                raw[s, k] = saved
                assert grad[s, k] == pytest.approx((hi - lo) / (2 * eps),
                                                   rel=1e-4, abs=1e-7)


class TestTranslation:
    def test_zero(self):
        np.testing.assert_array_equal(map_translation(np.zeros(3)), np.zeros(3))

    def test_tanh_value(self):
        out = map_translation(np.array([10.0, 0.0, 0.0]))
        np.testing.assert_allclose(out, [np.tanh(1.0), 0, 0], atol=1e-15)
        assert out[0] == pytest.approx(0.761594, abs=1e-6)

    def test_bounded(self):
        out = map_translation(np.array([1e9, -1e9, 0.0]))
        assert np.all(np.abs(out) <= 1.0)
        big = map_translation(np.array([1e3, -1e3, 500.0]))
        assert np.all(np.abs(big) < 1.0)


class TestApplyTransform:
    def test_identity(self):
        x = np.array([[0.3, -0.1, 0.9]])
        out = apply_transform(x, np.eye(3)[None], np.zeros((1, 3)))
        np.testing.assert_array_equal(out, x)

    def test_pure_translation(self):
        out = apply_transform(np.zeros((1, 3)), np.eye(3)[None],
                              np.array([[0.1, 0.0, 0.0]]))
        np.testing.assert_allclose(out, [[0.1, 0, 0]], atol=1e-15)

    def test_rotation_about_z(self):
        r = Rotation.from_rotvec([0, 0, np.pi / 2]).as_matrix()[None]
        out = apply_transform(np.array([[1.0, 0, 0]]), r, np.zeros((1, 3)))
        np.testing.assert_allclose(out, [[0, 1, 0]], atol=1e-14)


class TestFullModel:
    def _toy(self, variant="quaternion", seed=0):
        rng = rng_of(seed)
        params = DeformModelParams.create(12, rng, hidden_width=8,
                                          rotation_variant=variant)
        params.layers[-1] = (0.2 * rng.standard_normal((8, 7)),
                             0.05 * rng.standard_normal(7))
        z_n = rng.standard_normal((6, 2))
        z_p = rng.standard_normal((6, 6))
        gamma = rng.standard_normal((6, 4))
        pts = rng.uniform(-0.8, 0.8, (6, 3))
        return params, z_n, z_p, gamma, pts

    def test_identity_at_init(self):
        rng = rng_of(1)
        params = DeformModelParams.create(12, rng, hidden_width=8)
        pts = rng.uniform(-1, 1, (10, 3))
        pred, _ = model_forward(params, np.zeros((10, 2)), np.zeros((10, 6)),
                                rng.standard_normal((10, 4)), pts)
        np.testing.assert_array_equal(pred, pts)

    def test_zero_upstream_zero_grads(self):
        params, z_n, z_p, gamma, pts = self._toy()
        _, cache = model_forward(params, z_n, z_p, gamma, pts)
        grads, dz_n, dz_p, dgamma = model_vjp(params, cache, np.zeros((6, 3)), 2, 6)
        for gw, gb in grads:
            np.testing.assert_array_equal(gw, np.zeros_like(gw))
            np.testing.assert_array_equal(gb, np.zeros_like(gb))
        np.testing.assert_array_equal(dz_n, np.zeros_like(dz_n))
        np.testing.assert_array_equal(dz_p, np.zeros_like(dz_p))
        np.testing.assert_array_equal(dgamma, np.zeros_like(dgamma))

    def test_translation_gradient_at_origin(self):
        # with a fresh zero head, d_raw = 0, so d(tanh(a*d))/dd = a exactly
        rng = rng_of(2)
        params = DeformModelParams.create(12, rng, hidden_width=8)
        z = np.zeros((1, 2)), np.zeros((1, 6)), np.zeros((1, 4))
        _, cache = model_forward(params, *z, np.zeros((1, 3)))
        up = np.array([[1.0, 2.0, -3.0]])
        grads, *_ = model_vjp(params, cache, up, 2, 6)
        head_bias_grad = grads[-1][1]
        np.testing.assert_allclose(head_bias_grad[4:], 0.1 * up[0], atol=1e-12)

    @pytest.mark.parametrize("variant", ["quaternion", "cayley", "exponential"])
    def test_full_gradient_matches_fd(self, variant):
        params, z_n, z_p, gamma, pts = self._toy(variant=variant, seed=3)
        up = rng_of(4).standard_normal((6, 3))

    # chained objective: sum(up * pred)
        def loss():
            pred, _ = model_forward(params, z_n, z_p, gamma, pts)
            return float((pred * up).sum())

        _, cache = model_forward(params, z_n, z_p, gamma, pts)
        grads, dz_n, dz_p, dgamma = model_vjp(params, cache, up, 2, 6)
        eps = 1e-6

        def check(array, grad_array, label):
            flat, gflat = array.ravel(), grad_array.ravel()
            step = max(1, flat.size // 23)
            for k in range(0, flat.size, step):
                saved = flat[k]
                flat[k] = saved + eps
                hi = loss()
                flat[k] = saved - eps
                lo = loss()
                flat[k] = saved
                fd = (hi - lo) / (2 * eps)
                assert gflat[k] == pytest.approx(fd, rel=1e-4, abs=1e-7), label

        for i, ((w, b), (gw, gb)) in enumerate(zip(params.layers, grads)):
            check(w, gw, f"W{i}")
            check(b, gb, f"b{i}")
        check(z_n, dz_n, "z_n")
        check(z_p, dz_p, "z_p")
        check(gamma, dgamma, "gamma")
