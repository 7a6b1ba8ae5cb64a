import numpy as np
import pytest

from dreamphys import backends
from dreamphys.cameras import NEAR_PLANE, look_at
from dreamphys.errors import BehindCamera, ShapeMismatch, StaleRecord
from dreamphys.render import (ALPHA_MIN, LOWPASS, KernelStates, VideoTensor,
                              eval_color, project, render, render_backward,
                              render_video, rest_states)

ALPHA_MAX = 0.99
T_STOP = 1e-4


def brute_composite(states: KernelStates, camera):
    """Independent per-pixel compositor following the documented contract."""
    from dreamphys.render import _project_batch, eval_sh_colors
    t, depth, mean2d, _, cov2d = _project_batch(states.centers,
                                                states.covariances, camera)
    vis = np.nonzero(depth > NEAR_PLANE)[0]
    order = vis[np.argsort(depth[vis], kind="stable")]
    dirs = states.centers[order] - camera.position
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.einsum("nji,nj->ni", states.rotations[order], dirs)
    colors = eval_sh_colors(states.sh[order], dirs, states.sh_degree)
    H, W = camera.height, camera.width
    img = np.zeros((H, W, 3))
    for py in range(H):
        for px in range(W):
            T = 1.0
            acc = np.zeros(3)
            for m, n in enumerate(order):
                if T < T_STOP:
                    break
                d = np.array([px + 0.5, py + 0.5]) - mean2d[n]
                q = d @ np.linalg.solve(cov2d[n], d)
                alpha = min(states.opacities[n] * np.exp(-0.5 * q), ALPHA_MAX)
                if alpha < ALPHA_MIN:
                    continue
                acc += T * alpha * colors[m]
                T *= 1.0 - alpha
            img[py, px] = acc
    return img


def make_states(rng, n=8, degree=0):
    centers = np.concatenate([np.zeros((1, 3)),
                              0.35 * rng.standard_normal((n - 1, 3))])
    a = 0.05 * rng.standard_normal((n, 3, 3))
    covs = np.einsum("nij,nkj->nik", a, a) + 0.02**2 * np.tile(np.eye(3), (n, 1, 1))
    rot = np.tile(np.eye(3), (n, 1, 1))
    opac = 0.3 + 0.6 * rng.random(n)
    sh = rng.uniform(-0.7, 0.7, size=(n, (degree + 1) ** 2, 3))
    return KernelStates(centers, covs, rot, opac, sh, degree)


def cam(h=17, w=17, fov=0.8):
    return look_at(eye=(0.1, 0.2, 2.0), target=(0.0, 0.0, 0.0), fov_y=fov,
                   height=h, width=w)


class TestProject:
    def test_on_axis_maps_to_center(self):
        camera = look_at(eye=(0, 0, -2.0), target=(0, 0, 0), height=20, width=30)
        mean2d, cov2d, depth = project(np.zeros(3), 1e-4 * np.eye(3), camera)
        np.testing.assert_allclose(mean2d, [15.0, 10.0], atol=1e-9)
        assert depth == pytest.approx(2.0)

    def test_isotropic_covariance_on_axis(self):
        camera = look_at(eye=(0, 0, -3.0), target=(0, 0, 0), fov_y=0.7,
                         height=32, width=32)
        s = 0.02
        mean2d, cov2d, depth = project(np.zeros(3), s**2 * np.eye(3), camera)
        f = camera.focal
        expect = (f * s / 3.0) ** 2 + LOWPASS
        np.testing.assert_allclose(cov2d, expect * np.eye(2), rtol=1e-9)

    def test_behind_camera(self):
        camera = look_at(eye=(0, 0, -2.0), target=(0, 0, 0), height=8, width=8)
        with pytest.raises(BehindCamera):
            project(np.array([0, 0, -5.0]), 1e-4 * np.eye(3), camera)


class TestEvalColor:
    def test_dc_zero_is_half(self):
        rgb = eval_color(np.zeros((1, 3)), np.array([0, 0, 1.0]), np.eye(3))
        np.testing.assert_allclose(rgb, 0.5)

    def test_dc_rotation_invariant(self, rng):
        sh = rng.uniform(-0.5, 0.5, (1, 3))
        from dreamphys.scene import quat_to_rotmat
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        R = quat_to_rotmat(q[None])[0]
        a = eval_color(sh, np.array([0, 0, 1.0]), np.eye(3))
        b = eval_color(sh, np.array([0, 0, 1.0]), R)
        np.testing.assert_allclose(a, b)

    def test_degree1_z_coefficient(self):
        c = 0.31
        sh = np.zeros((4, 3))
        sh[2, :] = c  # z-aligned degree-1 basis slot
        rgb = eval_color(sh, np.array([0, 0, 1.0]), np.eye(3))
        np.testing.assert_allclose(rgb, 0.5 + c * 0.4886025119029199, rtol=1e-9)


class TestRender:
    def test_empty_scene_black(self):
        ks = KernelStates(np.zeros((0, 3)), np.zeros((0, 3, 3)),
                          np.zeros((0, 3, 3)), np.zeros(0), np.zeros((0, 1, 3)), 0)
        img = render(ks, cam())
        assert img.shape == (17, 17, 3)
        assert np.all(img == 0)

    def test_single_opaque_kernel_center_pixel(self):
        camera = look_at(eye=(0, 0, -2.0), target=(0, 0, 0), fov_y=0.8,
                         height=17, width=17)
        ks = KernelStates(np.zeros((1, 3)), 0.05**2 * np.tile(np.eye(3), (1, 1, 1)),
                          np.tile(np.eye(3), (1, 1, 1)), np.array([0.99]),
                          np.zeros((1, 1, 3)), 0)
        img = render(ks, camera, dtype=np.float64)
        np.testing.assert_allclose(img[8, 8], 0.99 * 0.5, rtol=1e-6)

    @pytest.mark.parametrize("backend_name", ["numpy", "compiled"])
    def test_matches_brute_force(self, rng, backend_name):
        if backend_name == "compiled" and backends.compiled is None:
            pytest.skip("compiled backend unavailable")
        be = backends.compiled if backend_name == "compiled" else backends.numpy_impl
        for degree in (0, 1):
            ks = make_states(rng, n=30, degree=degree)
            camera = cam(h=24, w=20)
            img = render(ks, camera, dtype=np.float64, backend=be)
            ref = brute_composite(ks, camera)
            np.testing.assert_allclose(img, ref, atol=1e-6)

    def test_two_overlapping_kernels_vs_brute(self, rng):
        ks = make_states(rng, n=2)
        ks.centers[1] = ks.centers[0] + [0.01, 0.0, 0.05]
        camera = cam()
        np.testing.assert_allclose(render(ks, camera, dtype=np.float64),
                                   brute_composite(ks, camera), atol=1e-6)

    def test_transmittance_bound(self, rng):
        # accumulated alpha never exceeds 1: white scene stays <= 1
        ks = make_states(rng, n=40)
        ks.sh[:, 0, :] = (1.0 - 0.5) / 0.28209479177387814   # pure white
        img = render(ks, cam(), dtype=np.float64)
        assert img.max() <= 1.0 + 1e-12

    def test_degree0_rotation_argument_invariance(self, rng):
        ks = make_states(rng, n=12, degree=0)
        img_a = render(ks, cam(), dtype=np.float64)
        from dreamphys.scene import quat_to_rotmat
        q = rng.standard_normal((12, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        ks_rot = KernelStates(ks.centers, ks.covariances, quat_to_rotmat(q),
                              ks.opacities, ks.sh, 0)
        img_b = render(ks_rot, cam(), dtype=np.float64)
        np.testing.assert_array_equal(img_a, img_b)


class TestRenderBackward:
    def test_zero_gradient_image(self, rng):
        ks = make_states(rng, n=5)
        img, rec = render(ks, cam(), dtype=np.float64, record=True)
        gc, gS = render_backward(np.zeros_like(img), rec)
        assert np.all(gc == 0) and np.all(gS == 0)

    def test_center_gradient_fd(self, rng):
        ks = make_states(rng, n=1)
        camera = cam()
        img, rec = render(ks, camera, dtype=np.float64, record=True)
        g_img = np.zeros_like(img)
        g_img[8, 8, 0] = 1.0   # center-pixel red probe
        gc, _ = render_backward(g_img, rec)
        h = 1e-6
        for axis in range(3):
            cp, cm = ks.centers.copy(), ks.centers.copy()
            cp[0, axis] += h
            cm[0, axis] -= h
            up = render(KernelStates(cp, ks.covariances, ks.rotations,
                                     ks.opacities, ks.sh, 0), camera,
                        dtype=np.float64)[8, 8, 0]
            dn = render(KernelStates(cm, ks.covariances, ks.rotations,
                                     ks.opacities, ks.sh, 0), camera,
                        dtype=np.float64)[8, 8, 0]
            fd = (up - dn) / (2 * h)
            assert fd == pytest.approx(gc[0, axis], rel=1e-3, abs=1e-10)

    def test_sigma_gradient_fd_three_kernels(self, rng):
        ks = make_states(rng, n=3)
        camera = cam()
        img, rec = render(ks, camera, dtype=np.float64, record=True)
        g_img = rng.standard_normal(img.shape)
        _, gS = render_backward(g_img, rec)

        def probe(covs):
            return float(np.sum(g_img * render(
                KernelStates(ks.centers, covs, ks.rotations, ks.opacities,
                             ks.sh, 0), camera, dtype=np.float64)))

        h = 1e-7
        for k in range(3):
            for a in range(3):
                for b in range(a, 3):
                    cp, cm_ = ks.covariances.copy(), ks.covariances.copy()
                    cp[k, a, b] += h
                    cp[k, b, a] = cp[k, a, b]
                    cm_[k, a, b] -= h
                    cm_[k, b, a] = cm_[k, a, b]
                    if a == b:
                        cp[k, a, a] = ks.covariances[k, a, a] + h
                        cm_[k, a, a] = ks.covariances[k, a, a] - h
                    fd = (probe(cp) - probe(cm_)) / (2 * h)
                    an = gS[k, a, b] + gS[k, b, a] if a != b else gS[k, a, a]
                    assert fd == pytest.approx(an, rel=1e-3, abs=1e-8)

    def test_stale_record(self, rng):
        ks = make_states(rng, n=4)
        img, rec = render(ks, cam(), dtype=np.float64, record=True)
        with pytest.raises(StaleRecord):
            render_backward(np.zeros((3, 3, 3)), rec)

    @pytest.mark.parametrize("backend_name", ["numpy", "compiled"])
    def test_backward_backend_parity(self, rng, backend_name):
        if backend_name == "compiled" and backends.compiled is None:
            pytest.skip("compiled backend unavailable")
        be = backends.compiled if backend_name == "compiled" else backends.numpy_impl
        ks = make_states(rng, n=15)
        img, rec = render(ks, cam(), dtype=np.float64, record=True, backend=be)
        g_img = rng.standard_normal(img.shape)
        gc, gS = render_backward(g_img, rec, backend=be)
        ref = render_backward(g_img, rec, backend=backends.numpy_impl)
        np.testing.assert_allclose(gc, ref[0], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(gS, ref[1], rtol=1e-10, atol=1e-12)


class TestVideo:
    def test_single_frame_matches_render(self, rng):
        ks = make_states(rng, n=6)
        camera = cam()
        video = render_video([ks], camera)
        np.testing.assert_array_equal(video.frames[0], render(ks, camera))

    def test_static_scene_static_camera(self, rng):
        ks = make_states(rng, n=6)
        video = render_video([ks] * 4, cam())
        assert len(video) == 4
        for t in range(1, 4):
            np.testing.assert_array_equal(video.frames[t], video.frames[0])

    def test_camera_count_mismatch(self, rng):
        ks = make_states(rng, n=3)
        with pytest.raises(ShapeMismatch):
            render_video([ks] * 4, [cam(), cam()])

    def test_default_frame_count_is_16(self):
        from dreamphys.config import SimConfig
        assert SimConfig().frame_count == 16

    def test_video_tensor_validation(self):
        with pytest.raises(ShapeMismatch):
            VideoTensor(np.zeros((2, 4, 4, 2)), np.zeros(2))
        with pytest.raises(ShapeMismatch):
            VideoTensor(np.full((1, 2, 2, 3), np.nan), np.zeros(1))
