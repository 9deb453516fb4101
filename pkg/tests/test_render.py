import numpy as np
import pytest

from helpers import look_down_camera, small_field, small_scene
from skysplat.scene import GaussianPrimitive, compose_scene
from skysplat.render import (
    ALPHA_CLAMP,
    Projection,
    RenderOutput,
    Splats,
    project_gaussian,
    rasterize,
    rasterize_backward,
    render_backward,
    render_scene,
)


def isotropic_splat(x, y, sigma_px, depth=5.0, opacity=0.6, color=(1.0, 0.0, 0.0), tag=-1):
    return ([x, y], np.eye(2) * sigma_px ** 2, depth, opacity, color, tag)


def make_splats(rows):
    cols = list(zip(*rows))
    return Splats(np.array(cols[0]), np.array(cols[1]), np.array(cols[2]),
                  np.array(cols[3]), np.array(cols[4]), np.array(cols[5]))


class TestProjection:
    def test_on_axis_isotropic_covariance(self):
        cam = look_down_camera(height_m=20.0, width=32, image_height=32, focal=40.0)
        sigma = 0.5
        mean = np.array([[0.0, 0.0, 10.0]])  # depth 10 below the camera
        cov = np.eye(3)[None] * sigma ** 2
        proj = Projection(mean, cov, cam)
        expect = (40.0 * sigma / 10.0) ** 2
        assert np.allclose(proj.cov2d[0], np.eye(2) * expect + np.eye(2) * 0.3, atol=1e-9)

    def test_mean_is_pinhole_projection(self):
        cam = look_down_camera(height_m=20.0, width=32, image_height=32, focal=40.0)
        p = np.array([[1.0, 2.0, 5.0]])
        proj = Projection(p, np.eye(3)[None] * 0.01, cam)
        P = cam.effective_pose()
        Xc = P.rotation @ p[0] + P.translation
        uv = cam.K @ (Xc / Xc[2])
        assert np.allclose(proj.means2d[0], uv[:2], atol=1e-9)

    def test_behind_camera_culled(self):
        cam = look_down_camera(height_m=20.0, width=32, image_height=32)
        p = np.array([[0.0, 0.0, 30.0]])  # above the camera
        proj = Projection(p, np.eye(3)[None] * 0.01, cam)
        assert len(proj.kept) == 0

    def test_far_outside_image_culled(self):
        cam = look_down_camera(height_m=20.0, width=32, image_height=32, focal=40.0)
        p = np.array([[500.0, 0.0, 0.0]])
        proj = Projection(p, np.eye(3)[None] * 0.01, cam)
        assert len(proj.kept) == 0

    def test_project_gaussian_single(self):
        cam = look_down_camera(height_m=20.0, width=32, image_height=32)
        prim = GaussianPrimitive(np.array([0.0, 0.0, 0.0]), np.full(3, -1.0),
                                 np.array([1.0, 0.0, 0.0, 0.0]), 0.0)
        s = project_gaussian(prim, cam)
        assert s is not None
        assert s.depth == pytest.approx(20.0)
        behind = GaussianPrimitive(np.array([0.0, 0.0, 50.0]), np.full(3, -1.0),
                                   np.array([1.0, 0.0, 0.0, 0.0]), 0.0)
        assert project_gaussian(behind, cam) is None


class TestRasterize:
    CAM = look_down_camera(height_m=20.0, width=24, image_height=20)

    def test_empty_list_is_background(self):
        out = rasterize(Splats.empty(), self.CAM, background=[0.2, 0.3, 0.4])
        assert np.allclose(out.image, [0.2, 0.3, 0.4])
        assert np.allclose(out.alpha, 0.0)

    def test_single_opaque_gaussian_center_pixel(self):
        s = make_splats([isotropic_splat(10.0, 10.0, 3.0, opacity=1.0)])
        out = rasterize(s, self.CAM, background=[0.0, 0.0, 1.0])
        # alpha clamps at 0.99, so 1% of background leaks through
        expect = ALPHA_CLAMP * np.array([1.0, 0.0, 0.0]) + 0.01 * np.array([0.0, 0.0, 1.0])
        assert np.allclose(out.image[10, 10], expect, atol=1e-12)

    def test_two_gaussians_match_hand_unrolled_compositing(self):
        s = make_splats([
            isotropic_splat(11.0, 9.0, 2.0, depth=4.0, opacity=0.7, color=(1.0, 0.2, 0.1)),
            isotropic_splat(12.5, 10.0, 3.0, depth=6.0, opacity=0.5, color=(0.1, 0.9, 0.3)),
        ])
        bg = np.array([0.05, 0.05, 0.05])
        out = rasterize(s, self.CAM, background=bg)
        ys, xs = np.mgrid[0:20, 0:24]
        # unrolled two-term compositing: front gaussian first (depth 4 < 6)
        a1 = np.minimum(0.7 * np.exp(-0.5 * (((xs - 11.0) ** 2 + (ys - 9.0) ** 2) / 4.0)), 0.99)
        a2 = np.minimum(0.5 * np.exp(-0.5 * (((xs - 12.5) ** 2 + (ys - 10.0) ** 2) / 9.0)), 0.99)
        c1, c2 = np.array([1.0, 0.2, 0.1]), np.array([0.1, 0.9, 0.3])
        ref = (a1[..., None] * c1 + ((1 - a1) * a2)[..., None] * c2
               + ((1 - a1) * (1 - a2))[..., None] * bg)
        assert np.abs(out.image - ref).max() < 1e-6

    def test_alpha_plus_transmittance_is_one(self):
        rng = np.random.default_rng(0)
        rows = [isotropic_splat(rng.uniform(0, 24), rng.uniform(0, 20),
                                rng.uniform(1.0, 4.0), depth=rng.uniform(2, 10),
                                opacity=rng.uniform(0.2, 0.95),
                                color=tuple(rng.uniform(size=3))) for _ in range(12)]
        s = make_splats(rows)
        out = rasterize(s, self.CAM)
        # recompute transmittance by unrolled per-pixel compositing
        order = np.argsort(s.depths, kind="stable")
        ys, xs = np.mgrid[0:20, 0:24]
        T = np.ones((20, 24))
        for i in order:
            m = s.means2d[i]
            cov = s.cov2d[i]
            inv = np.linalg.inv(cov)
            dx, dy = xs - m[0], ys - m[1]
            q = inv[0, 0] * dx ** 2 + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy ** 2
            a = np.minimum(s.opacities[i] * np.exp(-0.5 * q), ALPHA_CLAMP)
            a = np.where(T >= 1e-4, a, 0.0)
            T = T * (1 - a)
        assert np.abs(out.alpha + T - 1.0).max() < 1e-6

    def test_transmittance_monotone_and_equal_depth_tiebreak(self):
        # equal depths composite in primitive-index order (stable sort)
        rows = [isotropic_splat(12.0, 10.0, 3.0, depth=5.0, opacity=0.8, color=(1, 0, 0)),
                isotropic_splat(12.0, 10.0, 3.0, depth=5.0, opacity=0.8, color=(0, 1, 0))]
        out = rasterize(make_splats(rows), self.CAM)
        px = out.image[10, 12]
        a = np.minimum(0.8, ALPHA_CLAMP)
        assert px[0] > px[1]  # index 0 composites first
        assert np.isclose(px[0], a, atol=1e-9)
        assert np.isclose(px[1], (1 - a) * a, atol=1e-9)

    def test_dynamic_coverage_mask(self):
        rows = [isotropic_splat(6.0, 6.0, 2.0, opacity=0.9, color=(1, 0, 0), tag=3),
                isotropic_splat(18.0, 14.0, 2.0, opacity=0.9, color=(0, 1, 0), tag=-1)]
        out = rasterize(make_splats(rows), self.CAM)
        assert out.dynamic_coverage[6, 6]
        assert not out.dynamic_coverage[14, 18]


class TestRasterizeBackward:
    CAM = look_down_camera(height_m=20.0, width=24, image_height=20)

    def test_zero_gradient_in_zero_out(self):
        s = make_splats([isotropic_splat(10.0, 10.0, 3.0)])
        out = rasterize(s, self.CAM)
        g = rasterize_backward(out, np.zeros_like(out.image))
        for arr in g:
            assert np.allclose(arr, 0.0)

    def test_single_gaussian_color_gradient_is_effective_alpha(self):
        s = make_splats([isotropic_splat(10.0, 10.0, 3.0, opacity=0.6)])
        out = rasterize(s, self.CAM)
        g_img = np.zeros_like(out.image)
        g_img[10, 10, :] = 1.0  # loss = sum of center pixel channels
        _, _, _, g_col = rasterize_backward(out, g_img)
        assert np.allclose(g_col[0], 0.6, atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        rows = [isotropic_splat(rng.uniform(5, 19), rng.uniform(5, 15),
                                rng.uniform(1.5, 3.0), depth=rng.uniform(2, 10),
                                opacity=rng.uniform(0.3, 0.9),
                                color=tuple(rng.uniform(size=3)),
                                tag=-1) for _ in range(6)]
        s = make_splats(rows)
        bg = np.array([0.1, 0.2, 0.3])
        g_img = rng.normal(size=(20, 24, 3))

        def loss(sp):
            return np.sum(g_img * rasterize(sp, self.CAM, background=bg).image)

        out = rasterize(s, self.CAM, background=bg)
        g_m2d, g_cov, g_opac, g_col = rasterize_backward(out, g_img)
        h = 1e-5
        for i in range(6):
            for d in range(2):
                sp = make_splats(rows)
                sp.means2d[i, d] += h
                up = loss(sp)
                sp.means2d[i, d] -= 2 * h
                dn = loss(sp)
                num = (up - dn) / (2 * h)
                assert abs(num - g_m2d[i, d]) < 1e-4 * max(1.0, abs(num))
            sp = make_splats(rows)
            sp.opacities[i] += h
            up = loss(sp)
            sp.opacities[i] -= 2 * h
            dn = loss(sp)
            num = (up - dn) / (2 * h)
            assert abs(num - g_opac[i]) < 1e-4 * max(1.0, abs(num))
            for (a, b) in [(0, 0), (0, 1), (1, 1)]:
                sp = make_splats(rows)
                sp.cov2d[i, a, b] += h
                sp.cov2d[i, b, a] = sp.cov2d[i, a, b]
                up = loss(sp)
                sp.cov2d[i, a, b] -= 2 * h
                sp.cov2d[i, b, a] = sp.cov2d[i, a, b]
                dn = loss(sp)
                num = (up - dn) / (2 * h)
                got = g_cov[i, a, b] + (g_cov[i, b, a] if a != b else 0.0)
                assert abs(num - got) < 2e-4 * max(1.0, abs(num))


class TestFullChainGradients:
    def test_render_backward_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        scene = small_scene(rng, n_static=6, n_objects=1, n_frames=3, image=16)
        field = small_field(seed=3)
        frame = 1
        g_img = rng.normal(size=(16, 16, 3))

        def loss():
            out = render_scene(scene, field, frame_index=frame)
            return np.sum(g_img * out.image)

        out, cache = render_scene(scene, field, frame_index=frame, with_cache=True)
        grads = {name: np.zeros_like(arr) for name, arr in field.param_items()}
        grads.update({
            "static.means": np.zeros_like(scene.static_gaussians.means),
            "static.log_scales": np.zeros_like(scene.static_gaussians.log_scales),
            "static.quats": np.zeros_like(scene.static_gaussians.quats),
            "static.opacity_logits": np.zeros_like(scene.static_gaussians.opacity_logits),
            "camera.residuals": np.zeros((len(scene.cameras), 6)),
        })
        obj = scene.objects[0]
        grads.update({
            "object.1.means": np.zeros_like(obj.gaussians.means),
            "object.1.log_scales": np.zeros_like(obj.gaussians.log_scales),
            "object.1.quats": np.zeros_like(obj.gaussians.quats),
            "object.1.opacity_logits": np.zeros_like(obj.gaussians.opacity_logits),
            "object.1.trajectory": np.zeros_like(obj.trajectory.twists),
            "object.1.residuals": np.zeros_like(obj.residuals),
            "object.1.embedding": np.zeros_like(obj.embedding),
        })
        render_backward(scene, field, cache, g_img, grads)

        h = 1e-5
        rng2 = np.random.default_rng(3)
        checks = [
            (scene.static_gaussians.means, grads["static.means"]),
            (scene.static_gaussians.log_scales, grads["static.log_scales"]),
            (scene.static_gaussians.quats, grads["static.quats"]),
            (scene.static_gaussians.opacity_logits, grads["static.opacity_logits"]),
            (obj.gaussians.means, grads["object.1.means"]),
            (obj.trajectory.twists, grads["object.1.trajectory"]),
            (obj.residuals, grads["object.1.residuals"]),
            (obj.embedding, grads["object.1.embedding"]),
            (scene.cameras[frame].pose_residual,
             grads["camera.residuals"][frame]),
            (field.w2, grads["appearance.w2"]),
            (field.w0, grads["appearance.w0"]),
            (field.static_embedding, grads["appearance.static_embedding"]),
        ]
        for arr, g in checks:
            flat = arr.reshape(-1)
            gflat = np.asarray(g).reshape(-1)
            idxs = rng2.choice(flat.size, size=min(8, flat.size), replace=False)
            for kk in idxs:
                old = flat[kk]
                flat[kk] = old + h
                up = loss()
                flat[kk] = old - h
                dn = loss()
                flat[kk] = old
                num = (up - dn) / (2 * h)
                ref = max(1.0, abs(num))
                assert abs(num - gflat[kk]) < 1e-3 * ref, (
                    f"param mismatch: num={num:.6e} got={gflat[kk]:.6e}")
