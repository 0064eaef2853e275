#!/usr/bin/env python3

import unittest
import sys
import os
import io
import json
import tempfile
from argparse import Namespace
from contextlib import redirect_stdout

import numpy as np

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import DataError, InvalidParams, MissingLogs
from features import FeatureFrame
from geom import Pose, compose, exp_tangent
from mapio import file_digest
from graph import MultiSessionMap
from evalcli import (EXIT_DATA, SUMMARY_FIELDS, TIMELINE_FIELDS, ExperimentSpec, closest_time_baseline,
                     localize_session, main, map_session, max_gap, memory_row, merge_sessions, read_csv,
                     run_experiment, session_offset, slam_config_from_args, summarize, timeline_rows, write_csv)
from slam import LocalizationEvent, Outcome, SlamConfig
from synthworld import (FeatureFamilyConfig, OdometryNoise, TrajectorySpec, Waypoint, WorldParams, clock,
                        generate_world, simulate_session)


def row(outcome="proximity", session="1", inlier_pct="50.000", jump="", gt=""):
    return {"map_id": "1", "query_id": "A", "family": "SU", "seed": "0", "outcome": outcome,
            "matched_session": session if outcome != "failed" else "", "inlier_pct": inlier_pct,
            "jump_mm": jump, "gt_error_mm": gt}


def run_main(argv):
    out = io.StringIO()
    with redirect_stdout(out):
        with CaptureExit() as ctx:
            main(argv)
    return ctx.code, json.loads(out.getvalue())


class CaptureExit:
    """Capture the SystemExit raised by main."""

    def __enter__(self):
        self.code = None
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is SystemExit:
            self.code = exc.code
            return True
        return False


class TestMaxGap(unittest.TestCase):
    def test_runs(self):
        self.assertEqual(max_gap([]), 0)
        self.assertEqual(max_gap([True, True]), 0)
        self.assertEqual(max_gap([True, False, False, True, False]), 2)
        self.assertEqual(max_gap([False] * 4), 4)


class TestSummarize(unittest.TestCase):
    def test_all_localized(self):
        s = summarize([row(jump="2.000"), row(jump="4.000"), row(session="2")])
        self.assertEqual(s["localization_pct"], "100.000")
        self.assertEqual(s["max_gap"], 0)
        self.assertEqual(s["jump_mm"], "3.000")
        self.assertEqual(s["matched_sessions"], "1:2;2:1")
        self.assertEqual(s["frames"], 3)

    def test_alternating(self):
        rows = [row() if k % 2 == 0 else row("failed") for k in range(10)]
        s = summarize(rows)
        self.assertEqual(s["localization_pct"], "50.000")
        self.assertEqual(s["max_gap"], 1)
        self.assertEqual(s["inlier_pct"], "50.000")

    def test_nothing_localized(self):
        s = summarize([row("failed"), row("failed")])
        self.assertEqual(s["localization_pct"], "0.000")
        self.assertEqual(s["inlier_pct"], "")
        self.assertEqual(s["matched_sessions"], "")

    def test_missing_logs(self):
        with self.assertRaises(MissingLogs):
            summarize([])


class TestTimelineRows(unittest.TestCase):
    def test_first_acceptance_has_no_jump(self):
        m = MultiSessionMap("SU")
        m.add_session("1", frame_offset=Pose.identity())
        m.add_node(0, 0.0, Pose.identity(), FeatureFrame(0, 0.0, "SU", np.zeros((0, 2)), np.zeros(0),
                                                           np.zeros((0, 64))))
        near = Pose(np.eye(3), [0.01, 0.0, 0.0])
        events = [
            LocalizationEvent(0, 0.0, Outcome.LOOP_CLOSURE, near, 0, 0, jump_mm=12.0, inliers=30, inlier_pct=60.0,
                              gt_pose=Pose.identity()),
            LocalizationEvent(1, 1.0, Outcome.PROXIMITY, near, 0, 0, jump_mm=5.0, inliers=25, inlier_pct=50.0),
            LocalizationEvent(2, 2.0, Outcome.FAILED, near, stage="matching"),
        ]
        rows = timeline_rows(events, m, "1", "A", "SU", 0, 100.0)
        self.assertEqual([r["jump_mm"] for r in rows], ["", "5.000", ""])
        self.assertEqual(rows[0]["gt_error_mm"], "10.000")
        self.assertEqual(rows[1]["gt_error_mm"], "")
        self.assertEqual(rows[2]["matched_session"], "")
        self.assertEqual(rows[2]["stage"], "matching")
        self.assertEqual(summarize(rows)["jump_mm"], "5.000")

    def test_switching_frames_restarts_the_jump(self):
        m = MultiSessionMap("SU")
        m.add_session("1", frame_offset=Pose.identity())
        offset = exp_tangent([0.0, 0.0, 0.9, 2.0, -1.0, 0.0])
        m.add_session("2", frame_offset=offset)
        blank = FeatureFrame(0, 0.0, "SU", np.zeros((0, 2)), np.zeros(0), np.zeros((0, 64)))
        m.add_node(0, 0.0, Pose.identity(), blank)
        m.add_node(1, 0.0, offset, blank)
        self.assertFalse(m.sessions[1].aligned)
        truth = compose(offset, Pose.identity())
        off_by = Pose(truth.rotation, truth.translation + [0.0, 0.02, 0.0])
        events = [
            LocalizationEvent(0, 0.0, Outcome.LOOP_CLOSURE, Pose.identity(), 0, 0, jump_mm=7.0,
                              gt_pose=Pose.identity()),
            LocalizationEvent(1, 1.0, Outcome.LOOP_CLOSURE, off_by, 1, 1, jump_mm=900.0, gt_pose=Pose.identity(),
                              frame_session=1),
            LocalizationEvent(2, 2.0, Outcome.PROXIMITY, off_by, 1, 1, jump_mm=3.0, frame_session=1),
        ]
        rows = timeline_rows(events, m, "1+2", "F", "SU", 0, 0.0)
        self.assertEqual([r["pose_frame"] for r in rows], ["1", "2", "2"])
        self.assertEqual([r["jump_mm"] for r in rows], ["", "", "3.000"])
        self.assertEqual(rows[0]["gt_error_mm"], "0.000")
        self.assertEqual(rows[1]["gt_error_mm"], "20.000")


class TestBaseline(unittest.TestCase):
    def test_picks_closest_mapping_session(self):
        summary = [dict(row(), map_id="1", localization_pct="10.000"),
                   dict(row(), map_id="2", localization_pct="90.000")]
        out = closest_time_baseline(summary, {"1": 100.0, "2": 500.0}, {("SU", "0", "A"): 450.0})
        self.assertEqual(len(out), 1)
        self.assertEqual(out[0]["map_id"], "1|2")
        self.assertEqual(out[0]["localization_pct"], "90.000")

    def test_tie_goes_to_earlier_label(self):
        summary = [dict(row(), map_id="1", localization_pct="10.000"),
                   dict(row(), map_id="2", localization_pct="90.000")]
        out = closest_time_baseline(summary, {"1": 100.0, "2": 300.0}, {("SU", "0", "A"): 200.0})
        self.assertEqual(out[0]["localization_pct"], "10.000")


class TestCsv(unittest.TestCase):
    def test_round_trip(self):
        rows = [row(), row("failed")]
        with tempfile.TemporaryDirectory() as tmp:
            path = write_csv(os.path.join(tmp, "out", "t.csv"), list(rows[0]), rows)
            self.assertEqual(read_csv(path), rows)

    def test_schema_line_is_checked(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "bad.csv")
            with open(path, "w") as f:
                f.write("map_id,query_id\n1,A\n")
            with self.assertRaises(DataError):
                read_csv(path)


class TestExperimentSpec(unittest.TestCase):
    def test_defaults_are_valid(self):
        spec = ExperimentSpec()
        spec.validate()
        self.assertEqual(len(spec.mapping_sessions), 6)
        self.assertEqual(spec.merged_maps[-1], ["1", "2", "3", "4", "5", "6"])

    def test_from_dict(self):
        spec = ExperimentSpec.from_dict({"name": "quick", "seeds": [1, 2], "families": ["SP"],
                                         "world": {"n_landmarks": 200, "room": [8.0, 6.0, 2.6]},
                                         "slam": {"radius": 0.5}})
        self.assertEqual(spec.world.n_landmarks, 200)
        self.assertEqual(spec.world.room, (8.0, 6.0, 2.6))
        self.assertEqual(spec.slam_config().radius, 0.5)

    def test_merged_maps_need_known_sessions(self):
        with self.assertRaises(InvalidParams):
            ExperimentSpec.from_dict({"merged_maps": [["1", "9"]]})
        with self.assertRaises(InvalidParams):
            ExperimentSpec.from_dict({"merged_maps": [["1"]]})

    def test_unknown_family(self):
        with self.assertRaises(InvalidParams):
            ExperimentSpec.from_dict({"families": ["XX"]})

    def test_missing_file(self):
        with self.assertRaises(DataError):
            ExperimentSpec.load("/nonexistent/spec.json")


class TestHelpers(unittest.TestCase):
    def test_fixed_frame_starts_odometry_at_origin(self):
        traj = TrajectorySpec()
        offset = session_offset([0, 0, 0], traj, enabled=False)
        self.assertTrue(compose(offset, traj.poses()[0]).allclose(Pose.identity(), atol=1e-9))

    def test_random_frame_is_seeded(self):
        traj = TrajectorySpec()
        a = session_offset([3, 0, 1], traj, enabled=True)
        b = session_offset([3, 0, 1], traj, enabled=True)
        c = session_offset([3, 0, 2], traj, enabled=True)
        self.assertTrue(a.allclose(b, atol=0.0))
        self.assertFalse(a.allclose(c, atol=1e-6))
        self.assertAlmostEqual(compose(a, traj.poses()[0]).translation[2], 0.0)

    def test_engine_overrides(self):
        args = Namespace(radius=0.5, threshold=0.2, min_inliers=30, ratio=None)
        cfg = slam_config_from_args(args)
        self.assertEqual(cfg.radius, 0.5)
        self.assertEqual(cfg.bayes.loop_threshold, 0.2)
        self.assertEqual(cfg.registration.min_inliers, 30)
        self.assertEqual(cfg.registration.nndr_ratio, SlamConfig().registration.nndr_ratio)


class TestRuns(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        world = generate_world(3, WorldParams(daylight_only_fraction=0.0, night_only_fraction=0.0))
        fam = FeatureFamilyConfig("SU", 0.0, dropout_base=0.0, dropout_slope=0.0, noise_sigma=0.05, random_flip=0.0)
        traj = TrajectorySpec(waypoints=[Waypoint(2.5, 3.0, True), Waypoint(1.5, 3.0)])
        night = clock("21:00")
        cls.first = simulate_session(world, traj, night, fam, OdometryNoise(0.0, 0.0), seed=1, label="1")
        cls.second = simulate_session(world, traj, night + 600, fam, OdometryNoise(0.0, 0.0), seed=2, label="2")
        cls.cfg = SlamConfig()

    def test_map_and_localize(self):
        m, events, anchored = map_session(self.first, None, self.cfg)
        self.assertTrue(anchored)
        self.assertEqual(len(events), len(self.first))
        rows = timeline_rows(localize_session(m, self.second, self.cfg), m, "1", "2", "SU", 3,
                             self.second.start_time)
        self.assertEqual(len(rows), len(self.second))
        self.assertEqual(set(rows[0]), set(TIMELINE_FIELDS))
        s = summarize(rows)
        self.assertGreater(float(s["localization_pct"]), 50.0)
        self.assertLess(float(s["gt_error_mm"]), 100.0)
        self.assertTrue(set(s) <= set(SUMMARY_FIELDS))
        with tempfile.TemporaryDirectory() as tmp:
            path = m.save(os.path.join(tmp, "map_1.json"))
            mem = memory_row(m, "1", 3, os.path.getsize(path))
        self.assertEqual(mem["nodes"], len(self.first))
        self.assertEqual(mem["descriptor_bytes"], sum(len(r.frame) for r in self.first.records) * 64 * 4)

    def test_merge(self):
        m = merge_sessions([self.first, self.second], self.cfg)
        self.assertEqual(len(m.sessions), 2)
        self.assertEqual(len(m.nodes), len(self.first) + len(self.second))
        self.assertTrue(all(s.aligned for s in m.sessions))

    def test_merge_needs_two_sessions(self):
        with self.assertRaises(InvalidParams):
            merge_sessions([self.first], self.cfg)


class TestExperiment(unittest.TestCase):
    """Early and late mapping sessions against early and late queries, one robust and one fragile family."""

    @classmethod
    def setUpClass(cls):
        cls.spec = ExperimentSpec(name="two-times", seeds=[0], families=["SP", "FR"],
                                  mapping_sessions={"1": "16:46", "6": "19:35"},
                                  localization_sessions={"A": "16:51", "F": "19:42"},
                                  merged_maps=[["1", "6"]])
        cls.tmp = tempfile.TemporaryDirectory()
        cls.first = os.path.join(cls.tmp.name, "first")
        cls.second = os.path.join(cls.tmp.name, "second")
        run_experiment(cls.spec, cls.first)
        run_experiment(cls.spec, cls.second, workers=2)
        cls.summary = {(r["family"], r["map_id"], r["query_id"]): r
                       for r in read_csv(os.path.join(cls.first, "summary.csv"))}
        cls.chain = {r["family"]: r for r in read_csv(os.path.join(cls.first, "chain.csv"))}

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def pct(self, family, map_id, query_id):
        return float(self.summary[(family, map_id, query_id)]["localization_pct"])

    def test_reruns_are_byte_identical(self):
        def digests(root):
            out = {}
            for directory, _, files in os.walk(root):
                for name in files:
                    path = os.path.join(directory, name)
                    out[os.path.relpath(path, root)] = file_digest(path)
            return out

        first = digests(self.first)
        self.assertIn("summary.csv", first)
        self.assertIn("chain.csv", first)
        self.assertEqual(first, digests(self.second))

    def test_matching_times_dominate_for_a_fragile_family(self):
        diagonal = (self.pct("FR", "1", "A") + self.pct("FR", "6", "F")) / 2.0
        off = (self.pct("FR", "1", "F") + self.pct("FR", "6", "A")) / 2.0
        self.assertGreaterEqual(diagonal - off, 10.0)

    def test_robust_family_wins_across_the_sunset(self):
        self.assertGreater(self.pct("SP", "1", "F"), self.pct("FR", "1", "F"))

    def test_merged_map_keeps_the_best_single_map(self):
        for family in ("SP", "FR"):
            for query in ("A", "F"):
                frames = int(self.summary[(family, "1+6", query)]["frames"])
                best = max(self.pct(family, "1", query), self.pct(family, "6", query))
                # two frames of slack
                self.assertGreaterEqual(self.pct(family, "1+6", query), best - 200.0 / frames, f"{family}/{query}")

    def test_robust_family_chains_early(self):
        row = self.chain["SP"]
        self.assertEqual(row["anchored"], "1")
        self.assertNotEqual(row["first_closure_frame"], "")
        self.assertLessEqual(int(row["first_closure_frame"]), 0.1 * int(row["frames"]))


class TestMain(unittest.TestCase):
    def test_merge_of_one_map_is_a_data_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, record = run_main(["--log-level", "ERROR", "merge", "--maps", os.path.join(tmp, "a.json"),
                                     "--out", os.path.join(tmp, "m.json")])
        self.assertEqual(code, EXIT_DATA)
        self.assertEqual(record["status"], "error")
        self.assertEqual(record["error_type"], "InvalidParams")

    def test_eval_without_logs(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, record = run_main(["--log-level", "ERROR", "eval", "--logs-dir", tmp, "--out-dir", tmp])
        self.assertEqual(code, EXIT_DATA)
        self.assertEqual(record["error_type"], "MissingLogs")

    def test_missing_map_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, record = run_main(["--log-level", "ERROR", "map", "--sessions", os.path.join(tmp, "none.json"),
                                     "--out", os.path.join(tmp, "m.json")])
        self.assertEqual(code, EXIT_DATA)
        self.assertEqual(record["command"], "map")

    def test_eval_writes_summary(self):
        with tempfile.TemporaryDirectory() as tmp:
            logs = os.path.join(tmp, "timelines")
            write_csv(os.path.join(logs, "1__A.csv"), list(row()), [row(), row("failed")])
            code, record = run_main(["--log-level", "ERROR", "eval", "--logs-dir", logs, "--out-dir", tmp])
            self.assertEqual(code, 0)
            self.assertEqual(record["rows"], 1)
            summary = read_csv(os.path.join(tmp, "summary.csv"))
        self.assertEqual(summary[0]["localization_pct"], "50.000")


if __name__ == '__main__':
    unittest.main()
