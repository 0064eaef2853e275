#!/usr/bin/env python3

import unittest
import sys
import os
import math
import tempfile

import numpy as np
from scipy.spatial import cKDTree

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import InvalidParams
from features import nndr_match
from geom import DEFAULT_CAMERA, back_project_points, compose, exp_tangent, transform_points
from synthworld import (MAPPING_SCHEDULE, FeatureFamilyConfig, IlluminationSchedule, OdometryNoise, SessionData,
                        TrajectorySpec, Waypoint, World, WorldParams, camera_pose, clock, clock_label,
                        family_config, generate_world, heading_of, render_frame, simulate_odometry,
                        simulate_session)

K = DEFAULT_CAMERA


def observed_landmarks(world, frame, pose):
    """Indices of the landmarks behind a noiseless, clutter-free frame."""
    points = transform_points(pose, back_project_points(frame.pixels, frame.depths, K))
    dist, idx = cKDTree(world.positions).query(points)
    return idx, dist


def exact_frame(world, pose, hhmm, cfg, seed):
    return render_frame(world, pose, clock(hhmm), K, cfg, np.random.default_rng(seed), clutter=0, pixel_noise=0.0,
                        depth_noise=0.0)


def correct_match_rate(world, poses, cfg, first, second):
    """Share of the first frames' features that NNDR matches to the same landmark in the second frames."""
    correct, total = 0, 0
    for k, pose in enumerate(poses):
        a = exact_frame(world, pose, first, cfg, 2 * k)
        b = exact_frame(world, pose, second, cfg, 2 * k + 1)
        if len(a) == 0 or len(b) == 0:
            total += len(a)
            continue
        ia, _ = observed_landmarks(world, a, pose)
        ib, _ = observed_landmarks(world, b, pose)
        correct += sum(1 for m in nndr_match(a, b) if ia[m.index_a] == ib[m.index_b])
        total += len(a)
    return correct / total


class TestWorld(unittest.TestCase):
    def test_deterministic(self):
        a, b = generate_world(5), generate_world(5)
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.bands, b.bands)
        np.testing.assert_array_equal(a.descriptor_model("SU").base, b.descriptor_model("SU").base)
        self.assertFalse(np.array_equal(a.positions, generate_world(6).positions))

    def test_window_share(self):
        world = generate_world(0, WorldParams(n_landmarks=500, window_fraction=0.3))
        self.assertEqual(len(world), 500)
        self.assertEqual(int(world.regions.sum()), 150)

    def test_landmarks_stay_in_the_room(self):
        world = generate_world(1)
        L, W, H = world.params.room
        self.assertTrue(np.all(world.positions >= -1e-9))
        self.assertTrue(np.all(world.positions <= np.array([L, W, H]) + 1e-9))

    def test_invalid_params(self):
        with self.assertRaises(InvalidParams):
            generate_world(0, WorldParams(n_landmarks=0))
        with self.assertRaises(InvalidParams):
            generate_world(0, WorldParams(window_fraction=1.5))
        with self.assertRaises(InvalidParams):
            generate_world(0, WorldParams(daylight_only_fraction=0.7, night_only_fraction=0.5))

    def test_binary_models_are_bits(self):
        base = generate_world(2).descriptor_model("FR").base
        self.assertEqual(base.dtype, np.uint8)
        self.assertTrue(set(np.unique(base)) <= {0, 1})

    def test_save_and_load(self):
        world = generate_world(4)
        with tempfile.TemporaryDirectory() as tmp:
            loaded = World.load(world.save(os.path.join(tmp, "world.json")))
        np.testing.assert_array_equal(loaded.positions, world.positions)
        np.testing.assert_array_equal(loaded.regions, world.regions)
        self.assertEqual(loaded.params, world.params)


class TestIllumination(unittest.TestCase):
    def test_sunset_is_monotone(self):
        s = IlluminationSchedule()
        levels = [s.global_level(clock(hhmm)) for hhmm in MAPPING_SCHEDULE.values()]
        for a, b in zip(levels, levels[1:]):
            self.assertGreater(a, b)
        self.assertAlmostEqual(s.global_level(s.midpoint), 0.5)

    def test_interior_keeps_room_light(self):
        s = IlluminationSchedule()
        window, interior = s.effective_levels(clock("23:00"))
        self.assertLess(window, 0.01)
        self.assertGreaterEqual(interior, s.interior_floor)

    def test_glare_dims_window_light_only_in_daylight(self):
        s = IlluminationSchedule()
        noon = clock("12:00")
        window, interior = s.effective_levels(noon, facing_window=True)
        self.assertAlmostEqual(window, s.global_level(noon) * s.window_gain)
        self.assertEqual(interior, s.effective_levels(noon)[1])
        night = clock("21:00")
        self.assertEqual(s.effective_levels(night, facing_window=True), s.effective_levels(night))

    def test_descriptor_shift_grows_over_the_sunset(self):
        world = generate_world(0)
        pose = camera_pose(1.5, 3.0, math.pi)
        cfg = FeatureFamilyConfig("SU", 1.1, dropout_base=0.0, dropout_slope=0.0, noise_sigma=0.0)
        base = world.descriptor_model("SU").base
        shifts = []
        for k, hhmm in enumerate(MAPPING_SCHEDULE.values()):
            frame = exact_frame(world, pose, hhmm, cfg, k)
            idx, _ = observed_landmarks(world, frame, pose)
            shifts.append(dict(zip(idx, np.linalg.norm(frame.descriptors - base[idx], axis=1))))
        common = set.intersection(*(set(s) for s in shifts))
        self.assertGreater(len(common), 10)
        means = [np.mean([s[i] for i in common]) for s in shifts]
        for a, b in zip(means, means[1:]):
            self.assertLess(a, b)

    def test_clock(self):
        self.assertEqual(clock("18:15"), 18 * 3600 + 15 * 60)
        self.assertEqual(clock_label(clock("07:05")), "07:05")

    def test_unknown_family(self):
        with self.assertRaises(InvalidParams):
            family_config("XX")
        with self.assertRaises(InvalidParams):
            FeatureFamilyConfig("SU", -1.0)


class TestRender(unittest.TestCase):
    def setUp(self):
        self.world = generate_world(0)
        self.pose = camera_pose(1.5, 3.0, math.pi)

    def test_deterministic(self):
        cfg = family_config("SU")
        a = render_frame(self.world, self.pose, clock("17:00"), K, cfg, np.random.default_rng(1))
        b = render_frame(self.world, self.pose, clock("17:00"), K, cfg, np.random.default_rng(1))
        np.testing.assert_array_equal(a.pixels, b.pixels)
        np.testing.assert_array_equal(a.descriptors, b.descriptors)

    def test_features_back_project_onto_landmarks(self):
        frame = render_frame(self.world, self.pose, clock("17:00"), K, family_config("SU"), np.random.default_rng(2),
                             clutter=0, pixel_noise=0.0, depth_noise=0.0)
        self.assertGreater(len(frame), 20)
        _, dist = observed_landmarks(self.world, frame, self.pose)
        self.assertLess(dist.max(), 1e-6)
        self.assertTrue(np.all(K.contains(frame.pixels)))

    def test_descriptor_dtypes(self):
        rng = np.random.default_rng(3)
        su = render_frame(self.world, self.pose, clock("17:00"), K, family_config("SU"), rng)
        fr = render_frame(self.world, self.pose, clock("17:00"), K, family_config("FR"), rng)
        self.assertEqual(su.descriptors.dtype, np.float32)
        self.assertEqual(fr.descriptors.dtype, np.uint8)
        self.assertEqual(su.descriptors.shape[1], 64)

    def test_facing_the_window_in_daylight_hides_interior(self):
        pose = camera_pose(4.0, 3.0, math.pi / 2)
        frame = render_frame(self.world, pose, clock("12:00"), K, family_config("SP"), np.random.default_rng(4),
                             clutter=0, pixel_noise=0.0, depth_noise=0.0)
        self.assertGreater(len(frame), 0)
        idx, _ = observed_landmarks(self.world, frame, pose)
        self.assertTrue(np.all(self.world.regions[idx]))

    def test_sensitive_families_lose_more_detections_at_night(self):
        traj = TrajectorySpec()
        counts = {}
        for name in ("SP", "FR"):
            rng = np.random.default_rng(5)
            counts[name] = sum(len(render_frame(self.world, p, clock("20:30"), K, family_config(name), rng))
                               for p in traj.poses())
        self.assertGreater(counts["SP"], counts["FR"])

    def test_binary_family_matches_less_across_time(self):
        poses = TrajectorySpec().poses()[::8]
        cfg = family_config("FR")
        same = correct_match_rate(self.world, poses, cfg, "17:00", "17:00")
        cross = correct_match_rate(self.world, poses, cfg, "17:00", "20:30")
        self.assertGreater(same, 0.5)
        self.assertLess(cross, same)

    def test_families_rank_by_robustness(self):
        poses = TrajectorySpec().poses()[::8]
        rates = {name: correct_match_rate(self.world, poses, family_config(name), "17:00", "20:30")
                 for name in ("SP", "SU", "FR")}
        self.assertGreater(rates["SP"], rates["SU"])
        self.assertGreater(rates["SU"], rates["FR"])


class TestTrajectory(unittest.TestCase):
    def test_returns_to_start(self):
        traj = TrajectorySpec()
        poses = traj.poses()
        step = traj.speed * traj.frame_period
        self.assertLessEqual(np.linalg.norm(poses[-1].translation - poses[0].translation), step)
        self.assertAlmostEqual(abs(heading_of(poses[0])), math.pi)
        self.assertAlmostEqual(heading_of(camera_pose(1.0, 2.0, 0.7)), 0.7)
        self.assertGreater(len(poses), 50)

    def test_steps_respect_speed(self):
        traj = TrajectorySpec()
        poses = traj.poses()
        for a, b in zip(poses, poses[1:]):
            self.assertLessEqual(np.linalg.norm(b.translation - a.translation), traj.speed * traj.frame_period + 1e-9)

    def test_must_close_the_loop(self):
        with self.assertRaises(InvalidParams):
            TrajectorySpec(waypoints=[Waypoint(2.0, 2.0)]).poses()
        with self.assertRaises(InvalidParams):
            TrajectorySpec(speed=0.0).poses()


class TestSession(unittest.TestCase):
    def setUp(self):
        self.world = generate_world(0)
        self.traj = TrajectorySpec(waypoints=[Waypoint(2.5, 3.0), Waypoint(1.5, 3.0)])

    def test_noiseless_odometry_follows_ground_truth(self):
        s = simulate_session(self.world, self.traj, clock("17:00"), family_config("SP"), OdometryNoise(0.0, 0.0),
                             seed=1)
        for r in s.records:
            self.assertTrue(r.odom_pose.allclose(r.gt_pose, atol=1e-9))

    def test_frame_offset(self):
        offset = exp_tangent([0, 0, 1.2, 0.5, -0.3, 0])
        s = simulate_session(self.world, self.traj, clock("17:00"), family_config("SP"), OdometryNoise(0.0, 0.0),
                             seed=1, frame_offset=offset)
        for r in s.records:
            self.assertTrue(r.odom_pose.allclose(compose(offset, r.gt_pose), atol=1e-9))

    def test_noisy_odometry_drifts(self):
        s = simulate_session(self.world, self.traj, clock("17:00"), family_config("SP"), OdometryNoise(0.01, 0.02),
                             seed=1)
        self.assertTrue(s.records[0].odom_pose.allclose(s.records[0].gt_pose))
        last = s.records[-1]
        self.assertGreater(np.linalg.norm(last.odom_pose.translation - last.gt_pose.translation), 0.0)

    def test_translation_drift_follows_a_random_walk(self):
        steps, sigma, runs = 100, 0.005, 100
        gt = [camera_pose(1.0 + 0.01 * k, 3.0, 0.3 * math.sin(0.1 * k)) for k in range(steps + 1)]
        squared = []
        for seed in range(runs):
            odom = simulate_odometry(gt, OdometryNoise(0.0, sigma), np.random.default_rng(seed))
            squared.append(np.sum((odom[-1].translation - gt[-1].translation) ** 2))
        # |e|^2 / (steps sigma^2) is chi-square with 3 degrees of freedom: mean 3, variance 6
        normalized = np.mean(squared) / (steps * sigma ** 2)
        self.assertLess(abs(normalized - 3.0), 3.0 * math.sqrt(6.0 / runs))

    def test_timestamps_and_save(self):
        s = simulate_session(self.world, self.traj, clock("17:00"), family_config("BF"), OdometryNoise(), seed=2,
                             label="1")
        times = [r.timestamp for r in s.records]
        self.assertEqual(times[0], clock("17:00"))
        self.assertTrue(all(b - a == self.traj.frame_period for a, b in zip(times, times[1:])))
        with tempfile.TemporaryDirectory() as tmp:
            loaded = SessionData.load(s.save(os.path.join(tmp, "s.json")))
        self.assertEqual(len(loaded), len(s))
        self.assertEqual(loaded.family, "BF")
        for a, b in zip(loaded.records, s.records):
            self.assertTrue(a.odom_pose.allclose(b.odom_pose, atol=1e-9))
            np.testing.assert_array_equal(a.frame.descriptors, b.frame.descriptors)


if __name__ == '__main__':
    unittest.main()
