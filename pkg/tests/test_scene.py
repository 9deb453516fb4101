import numpy as np
import pytest

from skysplat.liealg import RigidTransform, TwistSpline, se3_exp, so3_exp, spline_eval
from skysplat.scene import (
    Camera,
    ComposedGaussians,
    DynamicObject,
    GaussianPrimitive,
    GaussianSet,
    GroundPlane,
    ObjectPoseEval,
    Scene,
    compose_scene,
    object_center,
    object_pose,
    object_up_axis,
    ray_ground_intersect,
)


def make_gaussians(rng, n, spread=1.0):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(rng.normal(size=(n, 3)) * spread,
                       rng.normal(size=(n, 3)) * 0.2 - 1.0,
                       q,
                       rng.normal(size=n))


def make_object(rng, oid=1, n=5, times=(0.0, 1.0, 2.0)):
    twists = rng.normal(size=(len(times), 6)) * 0.3
    return DynamicObject(id=oid, gaussians=make_gaussians(rng, n, 0.5),
                         dims=(2.0, 4.0, 1.6),
                         trajectory=TwistSpline(np.array(times), twists))


def make_camera(width=64, height=64):
    K = np.array([[60.0, 0.0, 32.0], [0.0, 60.0, 32.0], [0.0, 0.0, 1.0]])
    pose = RigidTransform(np.eye(3), np.array([0.0, 0.0, 5.0]))
    return Camera(K=K, pose=pose, width=width, height=height)


def make_scene(rng, n_static=6, objects=()):
    cams = [make_camera() for _ in range(3)]
    return Scene(static_gaussians=make_gaussians(rng, n_static, 3.0),
                 objects=list(objects), cameras=cams,
                 ground=GroundPlane(np.array([0.0, 0.0, 1.0]), 0.0))


class TestObjectPose:
    def test_zero_residuals_equals_spline(self):
        rng = np.random.default_rng(0)
        obj = make_object(rng)
        for t in [0.0, 0.5, 1.7]:
            assert np.allclose(object_pose(obj, t).matrix(),
                               spline_eval(obj.trajectory, t).matrix(), atol=1e-12)

    def test_residual_translation_on_identity_trajectory(self):
        obj = DynamicObject(id=1, gaussians=GaussianSet.empty(), dims=(1, 1, 1),
                            trajectory=TwistSpline([0.0, 1.0], np.zeros((2, 6))))
        obj.residuals[:] = [0.0, 0.0, 0.0, 0.1, 0.0, 0.0]
        T = object_pose(obj, 0.5)
        assert np.allclose(T.translation, [0.1, 0.0, 0.0], atol=1e-12)
        assert np.allclose(T.rotation, np.eye(3))

    def test_matches_independent_matrix_product(self):
        rng = np.random.default_rng(1)
        obj = make_object(rng)
        obj.residuals[:] = rng.normal(size=obj.residuals.shape) * 0.1
        t = 0.8
        w = obj.trajectory.weights(t)
        M_traj = se3_exp(w @ obj.trajectory.twists).matrix()
        M_res = se3_exp(w @ obj.residuals).matrix()
        assert np.allclose(object_pose(obj, t).matrix(), M_res @ M_traj, atol=1e-12)

    def test_center_and_up_identity(self):
        obj = DynamicObject(id=1, gaussians=GaussianSet.empty(), dims=(1, 1, 1),
                            trajectory=TwistSpline([0.0], np.zeros((1, 6))))
        assert np.allclose(object_center(obj, 0.0), np.zeros(3))
        assert np.allclose(object_up_axis(obj, 0.0), [0.0, 0.0, 1.0])

    def test_up_after_quarter_turn_about_x(self):
        xi = np.zeros(6)
        xi[:3] = [np.pi / 2, 0.0, 0.0]
        obj = DynamicObject(id=1, gaussians=GaussianSet.empty(), dims=(1, 1, 1),
                            trajectory=TwistSpline([0.0], [xi]))
        assert np.allclose(object_up_axis(obj, 0.0), [0.0, -1.0, 0.0], atol=1e-12)

    def test_up_axis_unit_norm(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            xi = rng.normal(size=6)
            n = np.linalg.norm(xi[:3])
            if n > 2.5:
                xi[:3] *= 2.5 / n
            obj = DynamicObject(id=1, gaussians=GaussianSet.empty(), dims=(1, 1, 1),
                                trajectory=TwistSpline([0.0], [xi]))
            assert abs(np.linalg.norm(object_up_axis(obj, 0.0)) - 1.0) < 1e-9

    def test_pose_eval_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        obj = make_object(rng)
        obj.residuals[:] = rng.normal(size=obj.residuals.shape) * 0.1
        t = 1.3
        gR = rng.normal(size=(3, 3))
        gt = rng.normal(size=3)

        def loss():
            T = object_pose(obj, t)
            return np.sum(gR * T.rotation) + gt @ T.translation

        g_traj, g_res = ObjectPoseEval(obj, t).backward(gR, gt)
        h = 1e-6
        for arr, g in [(obj.trajectory.twists, g_traj), (obj.residuals, g_res)]:
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = loss()
                arr[idx] = old - h
                dn = loss()
                arr[idx] = old
                num = (up - dn) / (2 * h)
                assert abs(num - g[idx]) < 1e-5 * max(1.0, abs(num))


class TestComposeScene:
    def test_no_objects_identity(self):
        rng = np.random.default_rng(4)
        scene = make_scene(rng)
        comp = compose_scene(scene, 0.0)
        assert np.allclose(comp.means, scene.static_gaussians.means)
        assert np.all(comp.tags == -1)

    def test_identity_pose_leaves_canonical(self):
        rng = np.random.default_rng(5)
        obj = DynamicObject(id=7, gaussians=make_gaussians(rng, 4), dims=(1, 1, 1),
                            trajectory=TwistSpline([0.0, 1.0], np.zeros((2, 6))))
        scene = make_scene(rng, objects=[obj])
        comp = compose_scene(scene, 0.5)
        sel = comp.tags == 7
        assert np.allclose(comp.means[sel], obj.gaussians.means, atol=1e-12)

    def test_translation_moves_means_keeps_spectrum(self):
        rng = np.random.default_rng(6)
        xi = np.zeros(6)
        xi[3:] = [5.0, 0.0, 0.0]
        obj = DynamicObject(id=2, gaussians=make_gaussians(rng, 6), dims=(1, 1, 1),
                            trajectory=TwistSpline([0.0], [xi]))
        scene = make_scene(rng, objects=[obj])
        comp = compose_scene(scene, 0.0)
        sel = comp.tags == 2
        assert np.allclose(comp.means[sel], obj.gaussians.means + [5.0, 0.0, 0.0], atol=1e-12)
        covs = comp.covariances()[sel]
        ref_obj = DynamicObject(id=2, gaussians=obj.gaussians, dims=(1, 1, 1),
                                trajectory=TwistSpline([0.0], [np.zeros(6)]))
        ref = compose_scene(make_scene(rng, objects=[ref_obj]), 0.0)
        ref_covs = ref.covariances()[ref.tags == 2]
        for c, rc in zip(covs, ref_covs):
            assert np.allclose(np.sort(np.linalg.eigvalsh(c)),
                               np.sort(np.linalg.eigvalsh(rc)), atol=1e-9)

    def test_size_and_tag_partition(self):
        rng = np.random.default_rng(7)
        objs = [make_object(rng, oid=i, n=3 + i) for i in range(1, 4)]
        scene = make_scene(rng, n_static=5, objects=objs)
        for t in [0.0, 0.9, 2.0]:
            comp = compose_scene(scene, t)
            assert len(comp) == 5 + sum(3 + i for i in range(1, 4))
            assert np.sum(comp.tags == -1) == 5
            for o in objs:
                assert np.sum(comp.tags == o.id) == len(o.gaussians)

    def test_rigid_composition_preserves_pairwise_distances(self):
        rng = np.random.default_rng(8)
        obj = make_object(rng, n=6)
        scene = make_scene(rng, n_static=0, objects=[obj])
        ref = obj.gaussians.means
        dref = np.linalg.norm(ref[:, None] - ref[None], axis=-1)
        for t in [0.0, 0.7, 1.9]:
            m = compose_scene(scene, t).means
            d = np.linalg.norm(m[:, None] - m[None], axis=-1)
            assert np.allclose(d, dref, atol=1e-9)

    def test_center_continuity_in_time(self):
        rng = np.random.default_rng(9)
        obj = make_object(rng)
        eps = 1e-4
        for t in [0.3, 1.0, 1.6]:
            c0 = object_center(obj, t)
            c1 = object_center(obj, t + eps)
            assert np.linalg.norm(c1 - c0) < 10.0 * eps

    def test_compose_backward_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        obj = make_object(rng, n=3)
        scene = make_scene(rng, n_static=2, objects=[obj])
        t = 0.6
        comp = compose_scene(scene, t)
        gm = rng.normal(size=comp.means.shape)
        gR = rng.normal(size=comp.rotations.shape)
        gs = rng.normal(size=comp.log_scales.shape)
        go = rng.normal(size=comp.opacity_logits.shape)

        def loss():
            c = compose_scene(scene, t)
            return (np.sum(gm * c.means) + np.sum(gR * c.rotations)
                    + np.sum(gs * c.log_scales) + np.sum(go * c.opacity_logits))

        grads = {
            "static.means": np.zeros_like(scene.static_gaussians.means),
            "static.log_scales": np.zeros_like(scene.static_gaussians.log_scales),
            "static.quats": np.zeros_like(scene.static_gaussians.quats),
            "static.opacity_logits": np.zeros_like(scene.static_gaussians.opacity_logits),
            "object.1.means": np.zeros_like(obj.gaussians.means),
            "object.1.log_scales": np.zeros_like(obj.gaussians.log_scales),
            "object.1.quats": np.zeros_like(obj.gaussians.quats),
            "object.1.opacity_logits": np.zeros_like(obj.gaussians.opacity_logits),
            "object.1.trajectory": np.zeros_like(obj.trajectory.twists),
            "object.1.residuals": np.zeros_like(obj.residuals),
        }
        comp.backward(gm, gR, gs, go, grads)

        h = 1e-6
        checks = [
            (scene.static_gaussians.means, grads["static.means"]),
            (scene.static_gaussians.quats, grads["static.quats"]),
            (obj.gaussians.means, grads["object.1.means"]),
            (obj.gaussians.quats, grads["object.1.quats"]),
            (obj.trajectory.twists, grads["object.1.trajectory"]),
            (obj.residuals, grads["object.1.residuals"]),
        ]
        for arr, g in checks:
            flat = arr.reshape(-1)
            for k in range(flat.size):
                old = flat[k]
                flat[k] = old + h
                up = loss()
                flat[k] = old - h
                dn = loss()
                flat[k] = old
                num = (up - dn) / (2 * h)
                assert abs(num - g.reshape(-1)[k]) < 2e-5 * max(1.0, abs(num))


class TestRayGround:
    GROUND = GroundPlane(np.array([0.0, 0.0, 1.0]), 0.0)

    def test_nadir_ray(self):
        p = ray_ground_intersect(np.array([0.0, 0.0, 10.0]), np.array([0.0, 0.0, -1.0]), self.GROUND)
        assert np.allclose(p, [0.0, 0.0, 0.0])

    def test_oblique_ray(self):
        r = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
        p = ray_ground_intersect(np.array([0.0, 0.0, 10.0]), r, self.GROUND)
        assert np.allclose(p, [10.0, 0.0, 0.0], atol=1e-9)
        assert abs(self.GROUND.normal @ p - self.GROUND.offset) < 1e-9

    def test_parallel_ray_is_none(self):
        assert ray_ground_intersect(np.array([0.0, 0.0, 10.0]),
                                    np.array([1.0, 0.0, 0.0]), self.GROUND) is None

    def test_behind_camera_is_none(self):
        assert ray_ground_intersect(np.array([0.0, 0.0, 10.0]),
                                    np.array([0.0, 0.0, 1.0]), self.GROUND) is None


class TestTypes:
    def test_duplicate_object_ids_rejected(self):
        rng = np.random.default_rng(11)
        objs = [make_object(rng, oid=1), make_object(rng, oid=1)]
        with pytest.raises(ValueError):
            make_scene(rng, objects=objs)

    def test_camera_requires_upper_triangular_K(self):
        K = np.array([[60.0, 0.0, 32.0], [5.0, 60.0, 32.0], [0.0, 0.0, 1.0]])
        with pytest.raises(ValueError):
            Camera(K=K, pose=RigidTransform.identity(), width=64, height=64)

    def test_ground_plane_requires_unit_normal(self):
        with pytest.raises(ValueError):
            GroundPlane(np.array([0.0, 0.0, 2.0]), 0.0)

    def test_primitive_covariance_spd(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            p = GaussianPrimitive(rng.normal(size=3), rng.normal(size=3),
                                  rng.normal(size=4), rng.normal())
            ev = np.linalg.eigvalsh(p.covariance())
            assert np.all(ev > 0)
            assert 0.0 < p.opacity < 1.0

    def test_gaussian_set_round_trip(self):
        rng = np.random.default_rng(13)
        gs = make_gaussians(rng, 4)
        back = GaussianSet.from_primitives(gs.to_primitives())
        assert np.allclose(back.means, gs.means)
        assert np.allclose(back.quats, gs.quats)

    def test_effective_camera_pose_applies_residual(self):
        cam = make_camera()
        cam.pose_residual[:] = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        P = cam.effective_pose()
        assert np.allclose(P.translation, [1.0, 0.0, 5.0])
