import numpy as np
import pytest

from gridtrack.objective import (ConfidenceState, ObjectiveError, chamfer,
                                 chamfer_assignments, chamfer_fixed,
                                 confidence_weights, delta_schedule, isometry_loss,
                                 keyframe_edge_lengths, omega, total_loss)


class TestChamfer:
    def test_identical_sets(self):
        pts = np.random.default_rng(0).uniform(-1, 1, (20, 3))
        value, grad = chamfer(pts, pts.copy())
        assert value == 0.0
        np.testing.assert_array_equal(grad, np.zeros_like(pts))

    def test_single_pair_hand_computed(self):
        # both directions contribute: 1 + 1 = 2; gradient doubles up on A's point
        a = np.zeros((1, 3))
        b = np.array([[1.0, 0.0, 0.0]])
        value, grad = chamfer(a, b)
        assert value == pytest.approx(2.0)
        np.testing.assert_allclose(grad, [[-4.0, 0.0, 0.0]])

    def test_gradient_matches_fd_fixed_assignment(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(-1, 1, (200, 3))
        b = rng.uniform(-1, 1, (200, 3))
        idx_ab, idx_ba = chamfer_assignments(a, b)
        value, grad = chamfer_fixed(a, b, idx_ab, idx_ba)
        eps = 1e-6
        flat = a.ravel()
        for k in range(0, flat.size, 17):
            saved = flat[k]
            flat[k] = saved + eps
            hi, _ = chamfer_fixed(a, b, idx_ab, idx_ba, want_grad=False)
            flat[k] = saved - eps
            lo, _ = chamfer_fixed(a, b, idx_ab, idx_ba, want_grad=False)
            flat[k] = saved
            assert grad.ravel()[k] == pytest.approx((hi - lo) / (2 * eps),
                                                    rel=1e-5, abs=1e-9)

    def test_symmetric_when_equal_sizes(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(-1, 1, (50, 3))
        b = rng.uniform(-1, 1, (50, 3))
        assert chamfer(a, b)[0] == pytest.approx(chamfer(b, a)[0], rel=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a = rng.uniform(-1, 1, (30, 3))
            b = rng.uniform(-1, 1, (40, 3))
            assert chamfer(a, b)[0] >= 0.0

    def test_truncation_caps_value_and_gradient(self):
        a = np.zeros((1, 3))
        b = np.array([[10.0, 0.0, 0.0]])
        value, grad = chamfer(a, b, truncation=1.0)
        assert value == pytest.approx(2.0)  # both terms capped at tau^2 = 1
        np.testing.assert_array_equal(grad, np.zeros((1, 3)))

    def test_empty_set_rejected(self):
        with pytest.raises(ObjectiveError):
            chamfer(np.zeros((0, 3)), np.zeros((4, 3)))


class TestOmega:
    def test_at_or_below_keyframe(self):
        assert omega(0.5, 0.5) == 1.0
        assert omega(0.2, 0.5) == 1.0

    def test_one_above(self):
        assert omega(1.5, 0.5) == pytest.approx(0.5)

    def test_three_above(self):
        assert omega(3.5, 0.5) == pytest.approx(0.25)

    def test_variants(self):
        assert omega(9.0, 0.5, "constant") == 1.0
        assert omega(9.0, 0.5, "delta") == 0.5
        assert omega(1.5, 0.5, "single") == pytest.approx(0.5)


class TestDeltaSchedule:
    def test_default_endpoints(self):
        assert delta_schedule(0.0) == 1.0
        assert delta_schedule(1.0) == 0.0

    def test_linear_endpoints(self):
        assert delta_schedule(0.0, "linear") == 1.0
        assert delta_schedule(1.0, "linear") == 0.0

    def test_constant(self):
        assert delta_schedule(0.7, "constant") == 1.0

    def test_exponential_value(self):
        assert delta_schedule(1.0, "exponential") == pytest.approx(np.exp(-5.0))
        assert delta_schedule(1.0, "exponential") == pytest.approx(0.0067379, abs=1e-7)

    def test_out_of_range(self):
        with pytest.raises(ObjectiveError):
            delta_schedule(1.5)
        with pytest.raises(ObjectiveError):
            delta_schedule(-0.1)


class TestConfidenceWeights:
    def _state(self, t_key, delta_variant="default", omega_variant="default"):
        return ConfidenceState(t_key=t_key, delta_variant=delta_variant,
                               omega_variant=omega_variant)

    def test_all_omega_one(self):
        state = self._state(2)
        w = state.refresh(np.array([0.3, 0.3, 0.3, 0.3]), 0.0)
        np.testing.assert_array_equal(w, np.ones(4))

    def test_delta_zero_gives_ones(self):
        state = self._state(1)
        w = state.refresh(np.array([0.1, 5.0, 9.0]), 1.0)  # default delta(1) = 0
        np.testing.assert_array_equal(w, np.ones(3))

    def test_hand_product(self):
        # t_key = 1, omega = (1, 0.5, 0.5), delta = 1 -> w = (1, 0.5, 0.25)
        state = self._state(1)
        cd = np.array([0.0, 1.0, 1.0])  # omega = 1/(1+1) = 0.5 for frames 2, 3
        w = state.refresh(cd, 0.0)
        np.testing.assert_allclose(w, [1.0, 0.5, 0.25])

    def test_backward_product_mirrors_forward(self):
        state = self._state(3)
        cd = np.array([1.0, 1.0, 0.0])
        w = state.refresh(cd, 0.0)
        np.testing.assert_allclose(w, [0.25, 0.5, 1.0])

    @pytest.mark.parametrize("delta_variant",
                             ["default", "constant", "linear", "exponential",
                              "interpolated"])
    @pytest.mark.parametrize("omega_variant", ["default", "constant", "delta", "single"])
    def test_keyframe_weight_is_one(self, delta_variant, omega_variant):
        state = self._state(3, delta_variant, omega_variant)
        cd = np.array([4.0, 0.5, 0.2, 3.0, 9.0])
        for e_bar in (0.0, 0.37, 1.0):
            w = state.refresh(cd, e_bar)
            assert w[2] == 1.0

    def test_single_variant_non_cumulative(self):
        state = self._state(1, omega_variant="single")
        cd = np.array([0.0, 1.0, 1.0])
        w = state.refresh(cd, 0.0)  # delta = 1
        np.testing.assert_allclose(w, [1.0, 0.5, 0.5])  # no product accumulation

    def test_interpolated_blend(self):
        state = self._state(1, delta_variant="interpolated")
        cd = np.array([0.0, 1.0])
        w = state.refresh(cd, 0.25)
        assert w[1] == pytest.approx(0.75 * 0.5 + 0.25)

    def test_monotone_damping_default(self):
        rng = np.random.default_rng(4)
        state = self._state(4)
        cd = rng.uniform(0, 5, 9)
        w = state.refresh(cd, 0.2)
        left = w[:4]   # frames 1..4 walking away from the keyframe
        assert np.all(np.diff(left) >= -1e-15)
        right = w[3:]
        assert np.all(np.diff(right) <= 1e-15)


class TestIsometry:
    def test_rigid_frames_zero(self):
        from gridtrack.evalsynth import base_shape
        from scipy.spatial.transform import Rotation
        mesh = base_shape(1)
        rot = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
        frames = np.stack([mesh.vertices, mesh.vertices @ rot.T + [0.1, 0, 0]])
        key = keyframe_edge_lengths(mesh.vertices, mesh.edges)
        value, grad = isometry_loss(frames, mesh.edges, key)
        assert value <= 1e-12
        # |.| has a bang-bang subgradient: rounding noise in the lengths can
        # leave entries of size 1/(T*E), but no larger
        assert np.abs(grad).max() <= len(mesh.edges) ** -0.5

    def test_single_edge_stretch(self):
        edges = np.array([[0, 1]])
        key = np.array([1.0])
        frames = np.array([[[0.0, 0, 0], [2.0, 0, 0]]])  # stretched to 2
        value, grad = isometry_loss(frames, edges, key)
        assert value == pytest.approx(1.0)
        np.testing.assert_allclose(grad[0, 1], [1.0, 0, 0])
        np.testing.assert_allclose(grad[0, 0], [-1.0, 0, 0])

    def test_uniform_scale_closed_form(self):
        from gridtrack.evalsynth import base_shape
        mesh = base_shape(1)
        key = keyframe_edge_lengths(mesh.vertices, mesh.edges)
        s = 1.37
        frames = np.stack([s * mesh.vertices, s * mesh.vertices])
        value, _ = isometry_loss(frames, mesh.edges, key)
        assert value == pytest.approx(key.mean() * abs(s - 1.0), rel=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(5)
        verts = rng.uniform(-1, 1, (8, 3))
        edges = np.array([[0, 1], [1, 2], [2, 3], [4, 5], [5, 6], [6, 7], [0, 7]])
        key = keyframe_edge_lengths(verts, edges)
        frames = rng.uniform(-1, 1, (2, 8, 3))
        _, grad = isometry_loss(frames, edges, key)
        eps = 1e-7
        flat = frames.ravel()
        for k in range(0, flat.size, 5):
            saved = flat[k]
            flat[k] = saved + eps
            hi, _ = isometry_loss(frames, edges, key, want_grad=False)
            flat[k] = saved - eps
            lo, _ = isometry_loss(frames, edges, key, want_grad=False)
            flat[k] = saved
            assert grad.ravel()[k] == pytest.approx((hi - lo) / (2 * eps),
                                                    rel=1e-4, abs=1e-9)

    def test_zero_length_edge_subgradient(self):
        edges = np.array([[0, 1]])
        frames = np.zeros((1, 2, 3))  # coincident endpoints
        value, grad = isometry_loss(frames, edges, np.array([1.0]))
        assert value == pytest.approx(1.0)
        np.testing.assert_array_equal(grad, np.zeros_like(grad))

    def test_empty_edges_rejected(self):
        with pytest.raises(ObjectiveError):
            isometry_loss(np.zeros((1, 3, 3)), np.zeros((0, 2), dtype=int),
                          np.zeros(0))


class TestTotalLoss:
    def _toy(self, seed=6):
        rng = np.random.default_rng(seed)
        verts = rng.uniform(-0.5, 0.5, (12, 3))
        edges = np.array([[i, (i + 1) % 12] for i in range(12)])
        return verts, edges

    def test_perfect_rigid_fit_is_zero(self):
        verts, edges = self._toy()
        frames = np.stack([verts, verts + [0.1, 0, 0]])
        clouds = [frames[0].copy(), frames[1].copy()]
        key = keyframe_edge_lengths(verts, edges)
        state = ConfidenceState(t_key=1)
        breakdown, grad = total_loss(frames, clouds, state, edges, key, e_bar=0.0)
        assert breakdown.total == 0.0
        np.testing.assert_array_equal(grad, np.zeros_like(frames))

    def test_w_iso_scales_only_isometry(self):
        verts, edges = self._toy()
        rng = np.random.default_rng(7)
        frames = np.stack([verts + 0.05 * rng.standard_normal(verts.shape)])
        clouds = [rng.uniform(-0.5, 0.5, (30, 3))]
        key = keyframe_edge_lengths(verts, edges)
        b1, _ = total_loss(frames, clouds, ConfidenceState(t_key=1), edges, key,
                           e_bar=0.0, w_iso=100.0)
        b2, _ = total_loss(frames, clouds, ConfidenceState(t_key=1), edges, key,
                           e_bar=0.0, w_iso=200.0)
        assert b2.total - b2.deformation == pytest.approx(
            2.0 * (b1.total - b1.deformation), rel=1e-12)

    def test_single_frame_equals_chamfer_when_iso_zero(self):
        verts, edges = self._toy()
        rng = np.random.default_rng(8)
        clouds = [rng.uniform(-0.5, 0.5, (25, 3))]
        frames = np.stack([verts])
        key = keyframe_edge_lengths(verts, edges)
        breakdown, _ = total_loss(frames, clouds, ConfidenceState(t_key=1), edges,
                                  key, e_bar=0.0, use_isometry=False)
        expect, _ = chamfer(verts, clouds[0])
        assert breakdown.total == pytest.approx(expect, rel=1e-12)
        assert breakdown.weights[0] == 1.0

    def test_breakdown_identity(self):
        verts, edges = self._toy()
        rng = np.random.default_rng(9)
        frames = np.stack([verts, verts + 0.03 * rng.standard_normal(verts.shape)])
        clouds = [rng.uniform(-0.5, 0.5, (40, 3)) for _ in range(2)]
        key = keyframe_edge_lengths(verts, edges)
        breakdown, _ = total_loss(frames, clouds, ConfidenceState(t_key=1), edges,
                                  key, e_bar=0.3)
        assert breakdown.total == pytest.approx(
            breakdown.deformation + breakdown.w_iso * breakdown.isometry, rel=1e-12)

    def test_frame_count_mismatch(self):
        verts, edges = self._toy()
        with pytest.raises(ObjectiveError):
            total_loss(np.stack([verts]), [verts, verts], ConfidenceState(t_key=1),
                       edges, keyframe_edge_lengths(verts, edges), e_bar=0.0)
