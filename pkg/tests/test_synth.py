import threading

import numpy as np
import pytest

from mcgs import synth
from mcgs.errors import GenerationError, InvalidArgument
from mcgs.geometry import (
    PinholeIntrinsics, RigCalibration, RigCamera, SE3Pose, pair_transform, project_points,
    rotation_about,
)
from mcgs.mcba import residual


def frame_equal(a, b):
    return all(np.array_equal(a.views[c].image, b.views[c].image)
               and np.array_equal(a.views[c].depth, b.views[c].depth)
               and np.array_equal(a.views[c].normals, b.views[c].normals) for c in a.views)


class TestSequence:
    def test_static_trajectory_frames_identical(self, scene, rig):
        traj = synth.Trajectory.from_config(synth.TrajectoryConfig(kind="static"))
        fr = synth.generate_sequence(scene, rig, traj, 3)
        assert frame_equal(fr[0], fr[1]) and frame_equal(fr[1], fr[2])

    def test_rerun_is_bitwise_identical(self, rig):
        cfg = synth.SceneConfig(seed=7)
        traj = synth.Trajectory.from_config(synth.TrajectoryConfig())
        a = synth.generate_sequence(synth.build_scene(cfg), rig, traj, 2)
        b = synth.generate_sequence(synth.build_scene(cfg), rig, traj, 2)
        assert all(frame_equal(x, y) for x, y in zip(a, b))

    def test_depth_decreases_toward_plane(self, scene):
        intr = PinholeIntrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)
        rig = RigCalibration((RigCamera("front", intr, SE3Pose()),))
        ctrl = [[0.0, 0, -0.5, 2.0, 1, 0, 0, 0], [1.0, 0, -0.5, 4.0, 1, 0, 0, 0]]
        traj = synth.Trajectory.from_config(synth.TrajectoryConfig(kind="custom", controls=ctrl))
        # only the back wall, far from the objects flanking the corridor
        d = np.stack([f.views["front"].depth[20:28, 28:36] for f in synth.generate_sequence(scene, rig, traj, 4)])
        assert np.all(np.diff(d, axis=0) < 0)

    def test_leaving_bounds_names_frame(self, scene, rig):
        cfg = synth.TrajectoryConfig(kind="custom", controls=[[0, 0, 0, 0, 1, 0, 0, 0], [1, 0, 0, 40, 1, 0, 0, 0]])
        with pytest.raises(GenerationError) as exc:
            synth.generate_sequence(scene, rig, synth.Trajectory.from_config(cfg), 5)
        assert exc.value.frame is not None and "frame" in str(exc.value)

    def test_needs_two_frames(self, scene, rig):
        with pytest.raises(InvalidArgument):
            synth.generate_sequence(scene, rig, synth.Trajectory.from_config(synth.TrajectoryConfig()), 1)

    def test_normals_face_camera(self, frames, rig):
        for cam in rig.ids:
            v = frames[0].views[cam]
            rays = rig.intrinsics(cam).rays(rig.intrinsics(cam).pixel_grid())
            assert np.all(np.einsum("hwi,hwi->hw", v.normals, rays) <= 0)
            np.testing.assert_allclose(np.linalg.norm(v.normals, axis=2), 1.0, atol=1e-12)


class TestDepthPrior:
    def test_no_corruption(self, frames):
        d = frames[0].views["front"].depth
        prior, bias = synth.corrupt_depth_prior(d)
        assert np.array_equal(prior, d) and np.all(bias == 1)

    def test_constant_bias(self, frames):
        d = frames[0].views["front"].depth
        prior, _ = synth.corrupt_depth_prior(d, 0.0, 1.2)
        np.testing.assert_allclose(prior, 1.2 * d, rtol=1e-15)

    def test_noise_statistics(self):
        d = np.full((400, 300), 3.0)
        prior, _ = synth.corrupt_depth_prior(d, 0.05, 1.0, np.random.default_rng(0))
        rel = prior / d - 1.0
        assert 0.045 <= rel.std() <= 0.055

    @pytest.mark.parametrize("sigma,bias", [(-0.1, 1.0), (0.0, 0.0), (0.0, -2.0)])
    def test_invalid(self, sigma, bias):
        with pytest.raises(InvalidArgument):
            synth.corrupt_depth_prior(np.ones((4, 4)), sigma, bias)

    def test_bias_field_polynomial(self):
        f = synth.BiasField((1.0, 0.1, -0.2, 0.0, 0.0, 0.0)).raster(4, 2)
        x = (np.arange(4) + 0.5) / 4 * 2 - 1
        y = (np.arange(2) + 0.5) / 2 * 2 - 1
        np.testing.assert_allclose(f, 1.0 + 0.1 * x[None, :] - 0.2 * y[:, None])


class TestKeyframeSelect:
    def test_identical_frame_skips(self, frames, rig):
        kf = synth.make_keyframe(0, frames[0], rig)
        promote, flow = synth.keyframe_select(frames[0], kf, 1.0, rig)
        assert not promote and flow < 1e-9

    def test_zero_threshold_promotes_any_motion(self, frames, rig):
        kf = synth.make_keyframe(0, frames[0], rig)
        promote, flow = synth.keyframe_select(frames[1], kf, 0.0, rig)
        assert promote and flow > 0

    def test_pure_rotation_against_dense_flow(self, frames, rig):
        f0 = frames[0]
        kf = synth.make_keyframe(0, f0, rig)
        moved = synth.Frame(1, 0.1, f0.pose @ SE3Pose(rotation_about([0, 1, 0], 0.02)), f0.views)
        _, flow = synth.keyframe_select(moved, kf, 1.0, rig, stride=1)
        dense = []
        for cam in rig.ids:
            intr = rig.intrinsics(cam)
            for v in range(intr.height):
                for u in range(intr.width):
                    z = f0.views[cam].depth[v, u]
                    if not np.isfinite(z):
                        continue
                    X = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0]) * z
                    T = pair_transform("temporal", f0.pose, moved.pose, rig, cam, cam)
                    p, ok = project_points(intr, T.apply(X))
                    if ok:
                        dense.append(np.hypot(p[0] - u, p[1] - v))
        assert abs(flow - np.mean(dense)) < 1e-6


class TestGraph:
    def test_single_keyframe_cross_view_only(self, frames, rig):
        g = synth.build_graph([synth.make_keyframe(0, frames[0], rig)], 2, rig)
        assert g.edges and all(e.kind == "cross_view" for e in g.edges)

    def test_window_one_single_camera(self, frames):
        intr = PinholeIntrinsics(40.0, 40.0, 31.5, 23.5, 64, 48)
        rig1 = RigCalibration((RigCamera("front", intr, SE3Pose()),))
        kfs = [synth.make_keyframe(i, synth.Frame(i, f.timestamp, f.pose, {"front": f.views["front"]}), rig1)
               for i, f in enumerate(frames[:3])]
        pairs = {(e.i, e.j) for e in synth.build_graph(kfs, 1, rig1).edges}
        assert {tuple(sorted(p)) for p in pairs} == {(0, 1), (1, 2)}

    def test_opposite_cameras_have_no_cross_edge(self, scene, rig, frames):
        intr = rig.intrinsics("front")
        rig2 = RigCalibration((RigCamera("a", intr, SE3Pose()),
                               RigCamera("b", intr, SE3Pose(rotation_about([0, 1, 0], np.pi)))))
        f = frames[0]
        views = {c: synth.render_view(scene, rig2, f.pose, c) for c in rig2.ids}
        kf = synth.make_keyframe(0, synth.Frame(0, 0.0, f.pose, views), rig2)
        assert not synth.build_graph([kf], 1, rig2).edges

    def test_edge_invariants(self, frames, rig):
        kfs = [synth.make_keyframe(i, f, rig) for i, f in enumerate(frames[:4])]
        for e in synth.build_graph(kfs, 2, rig).edges:
            assert not (e.i == e.j and e.cam_i == e.cam_j)
            if e.kind == "temporal":
                assert e.cam_i == e.cam_j and e.i != e.j and abs(e.i - e.j) <= 2
            else:
                assert e.i == e.j and e.cam_i != e.cam_j

    def test_malformed_edges_rejected(self):
        with pytest.raises(InvalidArgument):
            synth.CovisibilityGraph([0], [synth.Edge(0, "a", 0, "a", "temporal")])
        with pytest.raises(InvalidArgument):
            synth.CovisibilityGraph([0, 1], [synth.Edge(0, "a", 1, "b", "cross_view")])

    def test_window_must_be_positive(self, frames, rig):
        with pytest.raises(InvalidArgument):
            synth.build_graph([], 0, rig)


@pytest.fixture(scope="module")
def corr_setup(frames, rig, scene):
    kfs = {i: synth.make_keyframe(i, f, rig) for i, f in enumerate(frames[:3])}
    graph = synth.build_graph(list(kfs.values()), 2, rig)
    return kfs, graph


class TestCorrespondences:
    def test_identity_motion_targets_equal_pixels(self, frames, rig, scene):
        kfs = {0: synth.make_keyframe(0, frames[0], rig), 1: synth.make_keyframe(1, frames[0], rig)}
        cs = synth.sample_correspondences(synth.Edge(0, "front", 1, "front", "temporal"), kfs, rig, scene)
        assert len(cs) > 0
        np.testing.assert_allclose(cs.targets, cs.pixels, atol=1e-9)

    def test_exact_residual_zero_at_ground_truth(self, corr_setup, rig, scene):
        kfs, graph = corr_setup
        worst, n = 0.0, 0
        for e in graph.edges:
            cs = synth.sample_correspondences(e, kfs, rig, scene)
            d = kfs[e.i].frame.views[e.cam_i].depth
            for k in range(0, len(cs), 7):
                p = cs.pixels[k]
                inv = 1.0 / d[int(p[1]), int(p[0])]
                r, _ = residual(e, p, cs.targets[k], cs.weights[k], kfs[e.i].pose, kfs[e.j].pose, inv, rig)
                worst = max(worst, np.abs(r).max())
                n += 1
            assert np.all(cs.weights == 1.0)
        assert n > 100 and worst < 1e-9

    def test_occlusion_consistency(self, corr_setup, rig, scene):
        kfs, graph = corr_setup
        for e in graph.edges:
            cs = synth.sample_correspondences(e, kfs, rig, scene)
            if not len(cs):
                continue
            fi, fj = kfs[e.i].frame, kfs[e.j].frame
            T = pair_transform(e.kind, fi.pose, fj.pose, rig, e.cam_i, e.cam_j)
            d = fi.views[e.cam_i].depth[cs.pixels[:, 1].astype(int), cs.pixels[:, 0].astype(int)]
            Y = T.apply(rig.intrinsics(e.cam_i).rays(cs.pixels) * d[:, None])
            T_wc = rig.camera_pose(fj.pose, e.cam_j)
            t_hit, _, _ = scene.raycast(T_wc.t[None], rig.intrinsics(e.cam_j).rays(cs.targets) @ T_wc.R.T)
            assert np.abs(t_hit - Y[:, 2]).max() <= 1e-6
            assert rig.intrinsics(e.cam_i).in_bounds(cs.pixels).all()

    def test_noise_statistics(self, corr_setup, rig, scene):
        kfs, graph = corr_setup
        rng = np.random.default_rng(5)
        diffs = []
        for e in graph.edges:
            exact = synth.sample_correspondences(e, kfs, rig, scene, "exact", 2)
            noisy = synth.sample_correspondences(e, kfs, rig, scene, synth.NoisyMode(1.0, 0.0), 2, rng)
            diffs.append(noisy.targets - exact.targets)
        diffs = np.concatenate(diffs)
        assert len(diffs) >= 10_000
        rms = np.sqrt(np.mean(np.sum(diffs ** 2, axis=1)))
        assert 0.9 * np.sqrt(2) <= rms <= 1.1 * np.sqrt(2)

    def test_outliers_downweighted(self, corr_setup, rig, scene):
        kfs, graph = corr_setup
        cs = synth.sample_correspondences(graph.edges[0], kfs, rig, scene, synth.NoisyMode(0.0, 0.3, 0.01), 4,
                                          np.random.default_rng(0))
        w = np.unique(cs.weights)
        assert set(w.tolist()) <= {0.01, 1.0} and 0.01 in w

    def test_deterministic_given_rng_seed(self, corr_setup, rig, scene):
        kfs, graph = corr_setup
        mode = synth.NoisyMode(1.0, 0.1)
        a = synth.sample_correspondences(graph.edges[0], kfs, rig, scene, mode, 4, np.random.default_rng(3))
        b = synth.sample_correspondences(graph.edges[0], kfs, rig, scene, mode, 4, np.random.default_rng(3))
        assert np.array_equal(a.targets, b.targets) and np.array_equal(a.weights, b.weights)


class TestKeyframes:
    def test_rasters_match_intrinsics(self, frames, rig):
        kf = synth.make_keyframe(0, frames[0], rig, bias={"front": 1.2})
        for cam, v in kf.views.items():
            shape = rig.intrinsics(cam).shape
            assert v.image.shape[:2] == shape and v.depth_prior.shape == shape
            assert v.inv_depth.shape == shape and v.valid.shape == shape
            assert np.all(v.inv_depth[v.valid] > 0)
            assert np.all(v.scale_grid.values > 0)

    def test_buffer_readers_get_copies(self, frames, rig):
        buf = synth.KeyframeBuffer()
        kf = synth.make_keyframe(0, frames[0], rig)
        buf.put(kf)
        got = buf.get(0)
        got.views["front"].inv_depth[:] = -1
        assert np.all(buf.get(0).views["front"].inv_depth >= 0)
        buf.update_pose(0, SE3Pose(t=[1, 2, 3]))
        assert np.array_equal(buf.get(0).pose.t, [1, 2, 3])

    def test_buffer_concurrent_readers_see_whole_keyframes(self, frames, rig):
        buf = synth.KeyframeBuffer()
        kfs = [synth.make_keyframe(i, f, rig) for i, f in enumerate(frames[:4])]
        errors = []

        def reader():
            for _ in range(50):
                for i in buf.indices():
                    k = buf.get(i)
                    if set(k.views) != set(rig.ids):
                        errors.append(i)

        threads = [threading.Thread(target=reader) for _ in range(3)]
        for t in threads:
            t.start()
        for kf in kfs:
            buf.put(kf)
        for t in threads:
            t.join()
        assert not errors and len(buf) == 4


class TestRasterFiles:
    @pytest.mark.parametrize("shape", [(5, 7), (5, 7, 3)])
    def test_raster_round_trip(self, tmp_path, rng, shape):
        a = rng.normal(size=shape).astype(np.float32).astype(float)
        synth.write_raster(tmp_path / "r.bin", a)
        raw = (tmp_path / "r.bin").read_bytes()
        assert raw[:4] == b"MCGS" and len(raw) == 16 + 4 * a.size
        assert np.array_equal(synth.read_raster(tmp_path / "r.bin"), a)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "r.bin").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(InvalidArgument):
            synth.read_raster(tmp_path / "r.bin")

    def test_png_round_trip(self, tmp_path, rng):
        img = np.round(rng.uniform(0, 1, (6, 5, 3)) * 255) / 255
        synth.write_png(tmp_path / "a.png", img)
        np.testing.assert_allclose(synth.read_png(tmp_path / "a.png"), img, atol=1e-12)
