import numpy as np
import pytest

from rvio import so3
from rvio.state import (CameraImuExtrinsics, NoiseConfig, RelativePose, SlidingWindow,
                        inject_error, new_state)
from rvio.update import (FeatureTrack, InverseDepthLandmark, StackedResidual, augment, bearing,
                         ekf_update, mahalanobis_gate, measurement_jacobians, nullspace_project,
                         qr_compress, relative_pose_chain, triangulate,
                         update_with_tracks)


def random_extrinsics(rng):
    return CameraImuExtrinsics(so3.from_rotvec(rng.normal(size=3) * 0.3), rng.normal(size=3) * 0.1)


def random_window(rng, n, step=0.4, turn=0.1):
    w = SlidingWindow(n_max=20, frames=[0])
    for k in range(n):
        w.poses.append(RelativePose(so3.from_rotvec(rng.normal(size=3) * turn), rng.normal(size=3) * step))
        w.frames.append(k + 1)
    return w


def homogeneous(R, t):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def camera_from_imu(ex):
    # maps IMU coordinates into camera coordinates
    return homogeneous(ex.R_ci, ex.p_imu_in_cam)


def frame_transform(pose):
    # maps R_{n-1} coordinates into R_n coordinates
    C = so3.to_rotation(pose.q)
    return homogeneous(C, -C @ pose.p)


def chain_oracle(window, ex, a, i):
    T = np.eye(4)
    for m in range(a + 1, i + 1):
        T = frame_transform(window.poses[m - 1]) @ T
    T_ci = camera_from_imu(ex)
    return T_ci @ T @ np.linalg.inv(T_ci)


def project_landmark(window, ex, a, i, point_in_anchor_cam):
    T = chain_oracle(window, ex, a, i)
    x = T @ np.r_[point_in_anchor_cam, 1.0]
    return x[:2] / x[2]


def visible_point(rng, window, ex, a, b, depth=5.0):
    # a point in front of every camera of the chain; retry until it is
    for _ in range(100):
        p = np.r_[rng.normal(size=2) * 0.3, 1.0] * depth * rng.uniform(0.8, 1.2)
        if all((chain_oracle(window, ex, a, i) @ np.r_[p, 1.0])[2] > 0.5 for i in range(a, b + 1)):
            return p
    raise RuntimeError("no visible point")


def make_track(window, ex, a, b, p, noise=0.0, rng=None):
    obs = []
    for i in range(a, b + 1):
        z = project_landmark(window, ex, a, i, p)
        if noise:
            z = z + rng.normal(size=2) * noise
        obs.append((window.frames[i], z))
    return FeatureTrack(7, obs)


def landmark_of(p):
    rho = 1.0 / np.linalg.norm(p)
    e = p * rho
    return InverseDepthLandmark(np.arcsin(e[1]), np.arctan2(e[0], e[2]), rho)


# --- relative pose chain ---

def test_chain_identity():
    rng = np.random.default_rng(0)
    w, ex = random_window(rng, 3), random_extrinsics(rng)
    C, p = relative_pose_chain(w, ex, 2, 2)
    np.testing.assert_allclose(C, np.eye(3), atol=1e-14)
    np.testing.assert_allclose(p, 0.0, atol=1e-14)


def test_chain_pure_translation():
    w = SlidingWindow(frames=[0, 1], poses=[RelativePose(so3.identity(), np.array([1.0, 0.0, 0.0]))])
    C, p = relative_pose_chain(w, CameraImuExtrinsics(), 0, 1)
    np.testing.assert_array_equal(C, np.eye(3))
    np.testing.assert_allclose(p, [-1.0, 0.0, 0.0])


@pytest.mark.parametrize("seed", range(10))
def test_chain_matches_homogeneous_transforms(seed):
    rng = np.random.default_rng(seed)
    w, ex = random_window(rng, 3, turn=1.0), random_extrinsics(rng)
    C, p = relative_pose_chain(w, ex, 0, 3)
    T = chain_oracle(w, ex, 0, 3)
    np.testing.assert_allclose(C, T[:3, :3], atol=1e-10)
    np.testing.assert_allclose(p, T[:3, 3], atol=1e-10)


def test_chain_out_of_range():
    w = random_window(np.random.default_rng(0), 2)
    with pytest.raises(IndexError):
        relative_pose_chain(w, CameraImuExtrinsics(), 0, 3)


# --- triangulation ---

def test_triangulate_two_rays():
    w = SlidingWindow(frames=[0, 1], poses=[RelativePose(so3.identity(), np.array([1.0, 0.0, 0.0]))])
    track = FeatureTrack(1, [(0, np.zeros(2)), (1, np.array([-0.2, 0.0]))])
    lam = triangulate(track, w, CameraImuExtrinsics())
    np.testing.assert_allclose(lam.as_array(), [0.0, 0.0, 0.2], atol=1e-8)


def test_triangulate_zero_baseline():
    w = SlidingWindow(frames=[0, 1, 2], poses=[RelativePose(so3.identity(), np.zeros(3))] * 2)
    z = np.array([0.1, -0.05])
    track = FeatureTrack(1, [(0, z), (1, z), (2, z)])
    lam = triangulate(track, w, CameraImuExtrinsics())
    assert lam.rho == 0.0
    np.testing.assert_allclose(bearing(lam.phi, lam.psi)[:2] / bearing(lam.phi, lam.psi)[2], z, atol=1e-12)


def test_triangulate_noisy_depth():
    rng = np.random.default_rng(11)
    ex = CameraImuExtrinsics()
    errors = []
    for _ in range(50):
        w = random_window(rng, 9, step=0.1, turn=0.02)
        p = visible_point(rng, w, ex, 0, 9, depth=6.0)
        track = make_track(w, ex, 0, 9, p, noise=1.5 / 460, rng=rng)
        lam = triangulate(track, w, ex)
        errors.append(abs(1.0 / lam.rho - np.linalg.norm(p)) / np.linalg.norm(p))
    assert np.mean(errors) < 0.05


def test_triangulate_recovers_noise_free_landmark():
    rng = np.random.default_rng(12)
    ex = random_extrinsics(rng)
    w = random_window(rng, 5)
    p = visible_point(rng, w, ex, 1, 5)
    lam = triangulate(make_track(w, ex, 1, 5, p), w, ex)
    np.testing.assert_allclose(lam.as_array(), landmark_of(p).as_array(), atol=1e-8)


def test_triangulate_needs_two_views():
    with pytest.raises(ValueError):
        triangulate(FeatureTrack(0, [(0, np.zeros(2))]), SlidingWindow(frames=[0]), CameraImuExtrinsics())


# --- measurement Jacobians ---

def test_on_axis_projection_jacobian():
    w = SlidingWindow(frames=[0, 1], poses=[RelativePose(so3.identity(), np.array([0.0, 0.0, -1.0]))])
    lam = InverseDepthLandmark(0.0, 0.0, 0.25)
    track = FeatureTrack(0, [(0, np.array([0.01, 0.0])), (1, np.array([0.01, 0.0]))])
    r, H_x, H_l = measurement_jacobians(track, lam, w, CameraImuExtrinsics(), eps_pp=1e-3)
    # second view: h = e + ρ p̄ = (0, 0, 1 + 0.25); position Jacobian is -ρ·H_p
    hz = 1.25
    np.testing.assert_allclose(H_x[2:, 27:30], -0.25 * np.array([[1, 0, 0], [0, 1, 0]]) / hz, atol=1e-15)


def _predicted(state_window, ex, track, lam):
    return np.concatenate([project_landmark_lambda(state_window, ex, track, lam, f) for f, _ in track.observations])


def project_landmark_lambda(window, ex, track, lam, frame):
    a = window.frames.index(track.observations[0][0])
    i = window.frames.index(frame)
    C, p = relative_pose_chain(window, ex, a, i)
    h = C @ bearing(lam[0], lam[1]) + lam[2] * p
    return h[:2] / h[2]


@pytest.mark.parametrize("seed", range(100))
def test_measurement_jacobians_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    ex = random_extrinsics(rng)
    s = new_state()
    s.window = random_window(rng, 5)
    a, b = 1, 5
    p = visible_point(rng, s.window, ex, a, b)
    track = make_track(s.window, ex, a, b, p, noise=1e-3, rng=rng)
    lam = landmark_of(p * 1.05)
    r, H_x, H_l = measurement_jacobians(track, lam, s.window, ex, eps_pp=0.0)

    eps = 1e-6
    H_fd = np.zeros_like(H_x)
    for k in range(s.dim):
        d = np.zeros(s.dim)
        d[k] = eps
        plus = _predicted(inject_error(s, d).window, ex, track, lam.as_array())
        minus = _predicted(inject_error(s, -d).window, ex, track, lam.as_array())
        H_fd[:, k] = (plus - minus) / (2 * eps)
    L_fd = np.zeros_like(H_l)
    for k in range(3):
        d = np.zeros(3)
        d[k] = eps
        L_fd[:, k] = (_predicted(s.window, ex, track, lam.as_array() + d)
                      - _predicted(s.window, ex, track, lam.as_array() - d)) / (2 * eps)
    assert np.abs(H_x - H_fd).max() / np.abs(H_fd).max() < 1e-5
    assert np.abs(H_l - L_fd).max() / np.abs(L_fd).max() < 1e-5
    np.testing.assert_array_equal(H_x[:, :24], 0.0)
    z = np.concatenate([o for _, o in track.observations])
    np.testing.assert_allclose(r, z - _predicted(s.window, ex, track, lam.as_array()), atol=1e-14)


def test_infinite_landmark_is_bearing_only():
    rng = np.random.default_rng(3)
    ex = random_extrinsics(rng)
    w = random_window(rng, 3)
    p = visible_point(rng, w, ex, 0, 3)
    lam = landmark_of(p)
    lam.rho = 0.0
    track = make_track(w, ex, 0, 3, p)
    _, H_x, _ = measurement_jacobians(track, lam, w, ex)
    for n in range(3):
        np.testing.assert_array_equal(H_x[:, 24 + 6 * n + 3:24 + 6 * n + 6], 0.0)


def test_principal_point_views_are_dropped():
    w = SlidingWindow(frames=[0, 1, 2], poses=[RelativePose(so3.identity(), np.array([0.1, 0.0, 0.0]))] * 2)
    track = FeatureTrack(0, [(0, np.zeros(2)), (1, np.array([-0.02, 0.0])), (2, np.array([-0.04, 0.0]))])
    r, H_x, H_l = measurement_jacobians(track, InverseDepthLandmark(0.0, 0.0, 0.2), w, CameraImuExtrinsics())
    assert len(r) == 4
    lone = FeatureTrack(0, [(0, np.zeros(2)), (1, np.zeros(2))])
    with pytest.raises(ValueError):
        measurement_jacobians(lone, InverseDepthLandmark(0.0, 0.0, 0.0), w, CameraImuExtrinsics())


# --- nullspace projection ---

def _projector(H_l, parallax=True):
    n = H_l.shape[0]
    res = nullspace_project(np.zeros(n), np.eye(n), H_l, parallax, 1.0)
    return res.H_x  # rows are O^T


@pytest.mark.parametrize("n_views", [2, 5, 10])
def test_nullspace_annihilates_landmark_jacobian(n_views):
    rng = np.random.default_rng(n_views)
    H_l = rng.normal(size=(2 * n_views, 3))
    Ot = _projector(H_l)
    assert Ot.shape[0] == 2 * n_views - 3
    assert np.abs(Ot @ H_l).max() < 1e-10
    np.testing.assert_allclose(Ot @ Ot.T, np.eye(2 * n_views - 3), atol=1e-12)


def test_nullspace_dof_for_ten_views():
    rng = np.random.default_rng(0)
    H_l = rng.normal(size=(20, 3))
    r, H_x = rng.normal(size=20), rng.normal(size=(20, 30))
    assert nullspace_project(r, H_x, H_l, True, 1.0).dof == 17
    low = nullspace_project(r, H_x, H_l, False, 1.0)
    assert low.dof == 18
    Ot = _projector(H_l, parallax=False)
    assert np.abs(Ot @ H_l[:, :2]).max() < 1e-10


def test_nullspace_preserves_information():
    rng = np.random.default_rng(1)
    H_l = rng.normal(size=(12, 3))
    H_x = rng.normal(size=(12, 30))
    res = nullspace_project(np.zeros(12), H_x, H_l, True, 1.0)
    Q, _ = np.linalg.qr(H_l)  # orthonormal basis of range(H_λ)
    projected_out = H_x.T @ Q @ Q.T @ H_x
    np.testing.assert_allclose(res.H_x.T @ res.H_x + projected_out, H_x.T @ H_x, atol=1e-9)


def test_nullspace_too_few_rows():
    with pytest.raises(ValueError):
        nullspace_project(np.zeros(2), np.zeros((2, 30)), np.ones((2, 3)))


# --- gate ---

def test_gate_zero_residual():
    res = StackedResidual(np.zeros(3), np.ones((3, 24)), 1e-4)
    assert mahalanobis_gate(res, np.eye(24), 0.05)


def test_gate_rejection_rate():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(30, 30)) * 0.01
    P = A @ A.T + 1e-6 * np.eye(30)
    H = rng.normal(size=(7, 30))
    sig2 = 1e-4
    S = H @ P @ H.T + sig2 * np.eye(7)
    L = np.linalg.cholesky(S)
    rejected = 0
    trials = 10000
    for _ in range(trials):
        res = StackedResidual(L @ rng.normal(size=7), H, sig2)
        rejected += not mahalanobis_gate(res, P, 0.05)
    assert abs(rejected / trials - 0.05) < 0.01


def test_gate_rejects_inflated_residual():
    rng = np.random.default_rng(6)
    H = rng.normal(size=(5, 24))
    P = np.eye(24) * 1e-4
    S = H @ P @ H.T + 1e-4 * np.eye(5)
    r = np.linalg.cholesky(S) @ np.ones(5)
    assert mahalanobis_gate(StackedResidual(r, H, 1e-4), P)
    assert not mahalanobis_gate(StackedResidual(10 * r, H, 1e-4), P)


def test_gate_handles_broken_covariance():
    H = np.ones((2, 24))
    assert not mahalanobis_gate(StackedResidual(np.ones(2), H, 0.0), -np.eye(24))


# --- QR compression and EKF update ---

def random_stacked(rng, rows, n_poses=3):
    H = np.zeros((rows, 24 + 6 * n_poses))
    H[:, 24:] = rng.normal(size=(rows, 6 * n_poses))
    return StackedResidual(rng.normal(size=rows), H, 2.5e-5)


def test_qr_square_case():
    rng = np.random.default_rng(0)
    res = random_stacked(rng, 18)
    out = qr_compress(res)
    Q, T = np.linalg.qr(res.H_x[:, 24:])
    np.testing.assert_allclose(np.abs(out.H_x[:, 24:]), np.abs(T), atol=1e-12)
    assert np.linalg.norm(out.r) == pytest.approx(np.linalg.norm(res.r), rel=1e-12)


def test_qr_preserves_normal_equations():
    rng = np.random.default_rng(1)
    res = random_stacked(rng, 60)
    out = qr_compress(res)
    assert out.H_x.shape[0] == 18
    np.testing.assert_allclose(out.H_x.T @ out.H_x, res.H_x.T @ res.H_x, atol=1e-9)
    np.testing.assert_allclose(out.H_x.T @ out.r, res.H_x.T @ res.r, atol=1e-9)


def test_qr_skips_short_systems():
    res = random_stacked(np.random.default_rng(2), 10)
    assert qr_compress(res) is res


def random_filter_state(rng, n_poses=3):
    s = new_state()
    s.window = random_window(rng, n_poses)
    A = rng.normal(size=(s.dim, s.dim)) * 0.01
    s.cov = A @ A.T + 1e-6 * np.eye(s.dim)
    return s


def test_compressed_and_full_updates_agree():
    rng = np.random.default_rng(3)
    s = random_filter_state(rng)
    res = random_stacked(rng, 60)
    res.r *= 1e-3
    full = ekf_update(s, res)
    comp = ekf_update(s, qr_compress(res))
    np.testing.assert_allclose(comp.cov, full.cov, atol=1e-8)
    for a, b in zip(comp.window.poses, full.window.poses):
        np.testing.assert_allclose(a.p, b.p, atol=1e-8)
        np.testing.assert_allclose(a.q, b.q, atol=1e-8)


def test_zero_residual_update():
    rng = np.random.default_rng(4)
    s = random_filter_state(rng)
    res = random_stacked(rng, 5)
    res.r[:] = 0.0
    out = ekf_update(s, res)
    for a, b in zip(out.window.poses, s.window.poses):
        np.testing.assert_array_equal(a.p, b.p)
    assert np.trace(out.cov) <= np.trace(s.cov)


def test_scalar_kalman_gain():
    s = new_state()
    s.cov = np.eye(24) * 4.0
    H = np.zeros((1, 24))
    H[0, 15] = 1.0  # observe v_x
    out = ekf_update(s, StackedResidual(np.array([2.0]), H, 1.0))
    k = 4.0 / (4.0 + 1.0)
    assert out.v[0] == pytest.approx(k * 2.0)
    assert out.cov[15, 15] == pytest.approx((1 - k) * 4.0)


def test_joseph_form_stays_psd():
    rng = np.random.default_rng(7)
    s = random_filter_state(rng, 2)
    for _ in range(10000):
        H = np.zeros((2, s.dim))
        H[:, rng.integers(0, s.dim, size=3)] = rng.normal(size=(2, 3)) * 100
        s.cov = ekf_update(s, StackedResidual(np.zeros(2), H, 1e-6)).cov
        s.cov += 1e-8 * np.eye(s.dim)  # keep some process noise flowing
    s.check()


# --- augmentation ---

def test_augment_fresh_state():
    s = new_state()
    out = augment(s)
    assert len(out.window) == 1 and out.window.frames == [0, 1]
    np.testing.assert_array_equal(out.window.poses[0].q, so3.identity())
    np.testing.assert_array_equal(out.cov[24:, :], 0.0)


def test_augment_matches_dense_oracle():
    rng = np.random.default_rng(8)
    s = random_filter_state(rng, 2)
    s.q_rel = so3.normalize(rng.normal(size=4))
    s.p_rel = rng.normal(size=3)
    out = augment(s)
    J = np.zeros((s.dim + 6, s.dim))
    J[:s.dim] = np.eye(s.dim)
    J[s.dim:s.dim + 3, 9:12] = np.eye(3)
    J[s.dim + 3:, 12:15] = np.eye(3)
    np.testing.assert_allclose(out.cov, J @ s.cov @ J.T, atol=1e-15)
    np.testing.assert_array_equal(out.window.poses[-1].q, s.q_rel)
    np.testing.assert_array_equal(out.window.poses[-1].p, s.p_rel)


def test_augment_jacobian_finite_differences():
    # the clone map x -> (x, q_rel, p_rel) has Jacobian J; check it numerically
    rng = np.random.default_rng(9)
    s = random_filter_state(rng, 1)
    s.q_rel = so3.normalize(rng.normal(size=4))
    base = augment(s)
    eps = 1e-6
    for k in (9, 10, 11, 12, 13, 14):
        d = np.zeros(s.dim)
        d[k] = eps
        moved = augment(inject_error(s, d))
        dq = so3.multiply(moved.window.poses[-1].q, so3.inverse(base.window.poses[-1].q))
        dtheta = 2 * dq[:3] / eps
        dp = (moved.window.poses[-1].p - base.window.poses[-1].p) / eps
        expected = np.zeros(6)
        expected[k - 9] = 1.0
        np.testing.assert_allclose(np.r_[dtheta, dp], expected, atol=1e-6)


def test_augment_at_capacity():
    rng = np.random.default_rng(10)
    s = random_filter_state(rng, 3)
    s.window.n_max = 3
    out = augment(s)
    assert out.dim == s.dim and len(out.window) == 3
    assert out.window.frames == [1, 2, 3, 4]


# --- end to end on a synthetic window ---

def test_update_with_tracks_reduces_window_uncertainty():
    rng = np.random.default_rng(13)
    ex = random_extrinsics(rng)
    s = new_state()
    s.window = random_window(rng, 6, step=0.3, turn=0.05)
    s.cov = np.eye(s.dim) * 1e-4
    tracks = []
    for fid in range(30):
        p = visible_point(rng, s.window, ex, 0, 6)
        tr = make_track(s.window, ex, 0, 6, p, noise=1e-4, rng=rng)
        tr.feature_id = fid
        tracks.append(tr)
    out, stats = update_with_tracks(s, tracks, ex, NoiseConfig(sigma_im=1e-4))
    assert stats.accepted >= 28
    assert np.trace(out.cov[24:, 24:]) < 0.5 * np.trace(s.cov[24:, 24:])
    assert out.preint is None
    out.check()
