#!/usr/bin/env python3
"""
Command-line harness: synthetic worlds and sessions, mapping, map merging,
localization runs, metrics and full experiment matrices.

Every command prints one JSON status record on stdout; logs go to stderr.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import AnchorNotFound, DataError, DisconnectedGraph, InvalidParams, MissingLogs
from features import FAMILIES, get_family
from geom import Pose, compose, exp_tangent, invert
from graph import MultiSessionMap, optimize
from mapio import file_digest
from slam import LocalizationEvent, SlamConfig, finish_session, start_localization, start_session
from synthworld import (LOCALIZATION_SCHEDULE, MAPPING_SCHEDULE, OdometryNoise, SessionData, SessionRecord,
                        TrajectorySpec, World, WorldParams, clock, family_config, generate_world,
                        simulate_session)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_DATA = 3

CSV_SCHEMA = "msloc-csv/1"
SUMMARY_FIELDS = ["map_id", "query_id", "family", "seed", "frames", "localization_pct", "inlier_pct",
                  "jump_mm", "max_gap", "gt_error_mm", "matched_sessions"]
TIMELINE_FIELDS = ["map_id", "query_id", "family", "seed", "query_time", "frame_index", "timestamp", "outcome",
                   "matched_node", "matched_session", "pose_frame", "stage", "jump_mm", "inliers", "inlier_pct",
                   "gt_error_mm"]
MEMORY_FIELDS = ["map_id", "family", "seed", "sessions", "nodes", "words", "words_per_frame",
                 "descriptor_bytes", "map_bytes"]
CHAIN_FIELDS = ["family", "seed", "session", "prior_session", "frames", "localization_pct", "first_closure_frame",
                "anchored", "max_gap"]
BASELINE_MAP_ID = "|"


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def map_session(session: SessionData, prior_map: Optional[MultiSessionMap] = None,
                cfg: SlamConfig = None) -> Tuple[MultiSessionMap, List[LocalizationEvent], bool]:
    """Map one session, optionally onto a prior map. Returns (map, events, anchored)."""
    engine = start_session(prior_map, session.label, session.start_time, session.family, cfg, session.frame_offset)
    for r in session.records:
        engine.process_frame(r.odom_pose, r.frame, r.timestamp, r.gt_pose)
    anchored = True
    try:
        finish_session(engine)
    except AnchorNotFound as e:
        logger.warning(f"{e}; the session stays unaligned")
        anchored = False
    return engine.map, engine.events, anchored


def merge_sessions(sessions: Sequence[SessionData], cfg: SlamConfig = None) -> MultiSessionMap:
    """Map each session onto the accumulated map, then optimize the whole graph."""
    if len(sessions) < 2:
        raise InvalidParams("merging needs at least two sessions")
    m = None
    for s in sessions:
        m, _, _ = map_session(s, m, cfg)
    try:
        optimize(m, (cfg or SlamConfig.from_dict(m.config)).optimizer)
    except DisconnectedGraph as e:
        logger.warning(f"merged map has {len(e.unreached)} nodes in unaligned sessions")
    return m


def sessions_from_map(m: MultiSessionMap) -> List[SessionData]:
    """Replay data of every session stored in a map, word ids cleared."""
    out = []
    for s in m.sessions:
        records = []
        for node_id in s.node_ids:
            n = m.nodes[node_id]
            frame = n.frame.copy()
            frame.word_ids[:] = -1
            records.append(SessionRecord(n.timestamp, n.odom_pose, n.gt_pose or n.odom_pose, frame))
        out.append(SessionData(s.label, s.start_time, s.family, s.frame_offset or Pose.identity(), records))
    return out


def localize_session(m: MultiSessionMap, session: SessionData, cfg: SlamConfig = None) -> List[LocalizationEvent]:
    engine = start_localization(m, cfg)
    for r in session.records:
        engine.process_frame(r.odom_pose, r.frame, r.timestamp, r.gt_pose)
    return engine.events


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _fmt(x: Optional[float], digits: int = 3) -> str:
    return "" if x is None else f"{x:.{digits}f}"


def timeline_rows(events: Sequence[LocalizationEvent], m: MultiSessionMap, map_id: str, query_id: str,
                  family: str, seed: int, query_time: float) -> List[dict]:
    """
    One row per frame. The first accepted localization has no previous
    estimate to jump from, and neither does one that moves the estimate into
    another session's frame; their jumps are left empty. Poses are in the
    anchor session's odometry frame, or in an unaligned session's own frame
    (`pose_frame`), and ground-truth error is measured in that frame.
    """
    anchor = m.sessions[0] if m.sessions else None
    rows = []
    first = True
    previous_frame = None
    for e in events:
        jump, gt_err, session, frame_label = None, None, "", ""
        if e.accepted:
            session = m.sessions[e.matched_session].label
            frame = m.sessions[e.frame_session] if e.frame_session is not None else anchor
            frame_label = frame.label
            if not first and e.frame_session == previous_frame:
                jump = e.jump_mm
            first = False
            previous_frame = e.frame_session
            if e.gt_pose is not None and frame.frame_offset is not None:
                truth = compose(frame.frame_offset, e.gt_pose)
                gt_err = float(np.linalg.norm(truth.translation - e.pose.translation) * 1000.0)
        rows.append({
            "map_id": map_id, "query_id": query_id, "family": family, "seed": seed,
            "query_time": _fmt(query_time, 1), "frame_index": e.frame_index, "timestamp": _fmt(e.timestamp, 1),
            "outcome": e.outcome.value, "matched_node": "" if e.matched_node is None else e.matched_node,
            "matched_session": session, "pose_frame": frame_label, "stage": e.stage or "", "jump_mm": _fmt(jump),
            "inliers": e.inliers, "inlier_pct": _fmt(e.inlier_pct), "gt_error_mm": _fmt(gt_err),
        })
    return rows


def max_gap(accepted: Sequence[bool]) -> int:
    """Longest run of consecutive failed frames."""
    longest = run = 0
    for ok in accepted:
        run = 0 if ok else run + 1
        longest = max(longest, run)
    return longest


def _mean(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def summarize(rows: Sequence[dict]) -> dict:
    """Aggregate timeline rows of one (map, query) pair into a summary row."""
    if not rows:
        raise MissingLogs("no timeline rows to summarize")
    accepted = [r["outcome"] != "failed" for r in rows]
    ok_rows = [r for r, ok in zip(rows, accepted) if ok]
    matched: Dict[str, int] = {}
    for r in ok_rows:
        matched[r["matched_session"]] = matched.get(r["matched_session"], 0) + 1
    first = rows[0]
    return {
        "map_id": first["map_id"], "query_id": first["query_id"], "family": first["family"],
        "seed": first["seed"], "frames": len(rows),
        "localization_pct": _fmt(100.0 * len(ok_rows) / len(rows)),
        "inlier_pct": _fmt(_mean([float(r["inlier_pct"]) for r in ok_rows])),
        "jump_mm": _fmt(_mean([float(r["jump_mm"]) for r in ok_rows if r["jump_mm"] != ""])),
        "max_gap": max_gap(accepted),
        "gt_error_mm": _fmt(_mean([float(r["gt_error_mm"]) for r in ok_rows if r["gt_error_mm"] != ""])),
        "matched_sessions": ";".join(f"{k}:{v}" for k, v in sorted(matched.items())),
    }


def closest_time_baseline(summary: Sequence[dict], mapping_times: Dict[str, float],
                          query_times: Dict[Tuple[str, str, str], float]) -> List[dict]:
    """
    For every (family, seed, query) the row of the single-session map
    recorded closest in time, relabelled with the combined map id.
    """
    baseline_id = BASELINE_MAP_ID.join(mapping_times)
    by_key = {(r["family"], str(r["seed"]), r["query_id"], r["map_id"]): r for r in summary}
    rows = []
    for (family, seed, query), qt in sorted(query_times.items()):
        best = min(mapping_times, key=lambda label: (abs(mapping_times[label] - qt), label))
        row = by_key.get((family, seed, query, best))
        if row is not None:
            rows.append(dict(row, map_id=baseline_id))
    return rows


def memory_row(m: MultiSessionMap, map_id: str, seed: int, map_bytes: int) -> dict:
    fam = get_family(m.family)
    features = sum(len(n.frame) for n in m.nodes.values())
    counts = list(m.vocabulary.node_word_counts.values())
    return {
        "map_id": map_id, "family": m.family, "seed": seed, "sessions": len(m.sessions), "nodes": len(m.nodes),
        "words": len(m.vocabulary), "words_per_frame": _fmt(_mean(counts), 1),
        "descriptor_bytes": features * fam.dimension * fam.bytes_per_element, "map_bytes": map_bytes,
    }


def write_csv(path: str, fields: List[str], rows: Iterable[dict]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# {CSV_SCHEMA}\n")
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logger.info(f"Wrote {path}")
    return path


def read_csv(path: str) -> List[dict]:
    with open(path, newline="") as f:
        header = f.readline().strip()
        if header != f"# {CSV_SCHEMA}":
            raise DataError(f"{path}: unexpected CSV schema line {header!r}")
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# Experiment matrices
# ---------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    name: str = "sunset"
    seeds: List[int] = field(default_factory=lambda: [0])
    families: List[str] = field(default_factory=lambda: list(FAMILIES))
    world: WorldParams = field(default_factory=WorldParams)
    mapping_sessions: Dict[str, str] = field(default_factory=lambda: dict(MAPPING_SCHEDULE))
    localization_sessions: Dict[str, str] = field(default_factory=lambda: dict(LOCALIZATION_SCHEDULE))
    merged_maps: List[List[str]] = field(default_factory=lambda: [["1", "6"], ["1", "3", "5"], ["2", "4", "6"],
                                                                  ["1", "2", "3", "4", "5", "6"]])
    chain: bool = True
    odometry: OdometryNoise = field(default_factory=OdometryNoise)
    slam: dict = field(default_factory=dict)
    frame_offsets: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        world = d.pop("world", {})
        odometry = d.pop("odometry", {})
        spec = cls(world=WorldParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in world.items()}),
                   odometry=OdometryNoise(**odometry), **d)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path: str) -> "ExperimentSpec":
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except FileNotFoundError:
            raise DataError(f"experiment spec not found: {path}")
        except (json.JSONDecodeError, TypeError) as e:
            raise DataError(f"invalid experiment spec {path}: {e}")

    def validate(self):
        for f in self.families:
            family_config(f)
        for combo in self.merged_maps:
            if len(combo) < 2 or any(label not in self.mapping_sessions for label in combo):
                raise InvalidParams(f"merged map {combo} must name at least two mapping sessions")
        self.world.validate()

    def slam_config(self) -> SlamConfig:
        cfg = SlamConfig.from_dict(self.slam) if self.slam else SlamConfig()
        cfg.odom_sigma_rot = self.odometry.sigma_rot or cfg.odom_sigma_rot
        cfg.odom_sigma_trans = self.odometry.sigma_trans or cfg.odom_sigma_trans
        return cfg


def session_seed(seed: int, kind: int, index: int) -> List[int]:
    return [seed, kind, index]


def session_offset(seed_seq: List[int], traj: TrajectorySpec, enabled: bool) -> Pose:
    """Odometry starts at the origin of a randomly placed per-session frame."""
    start = invert(traj.poses()[0])
    if not enabled:
        return start
    rng = np.random.default_rng(seed_seq + [99])
    xi = np.concatenate([[0.0, 0.0, rng.uniform(-np.pi, np.pi)], rng.uniform(-1.0, 1.0, 3) * [1.0, 1.0, 0.0]])
    return compose(exp_tangent(xi), start)


def simulate_all(world: World, spec: ExperimentSpec, family: str, seed: int) -> Tuple[Dict[str, SessionData],
                                                                                    Dict[str, SessionData]]:
    traj = TrajectorySpec()
    fam_cfg = family_config(family)
    out = []
    for kind, schedule in enumerate((spec.mapping_sessions, spec.localization_sessions)):
        sessions = {}
        for i, (label, hhmm) in enumerate(schedule.items()):
            seq = session_seed(seed, kind, i)
            sessions[label] = simulate_session(world, traj, clock(hhmm), fam_cfg, spec.odometry,
                                               seed=int(np.random.SeedSequence(seq).generate_state(1)[0]),
                                               label=label, frame_offset=session_offset(seq, traj, spec.frame_offsets))
        out.append(sessions)
    return out[0], out[1]


def run_cell(job: Tuple[ExperimentSpec, str, int, str]) -> dict:
    """
    One (family, seed) cell: simulate, build single/merged/chained maps,
    localize every query on every map. Writes maps and timelines under
    out_dir and returns the summary, memory and chain rows.
    """
    spec, family, seed, out_dir = job
    started = time.time()
    cell_dir = os.path.join(out_dir, family, f"seed_{seed}")
    cfg = spec.slam_config()
    world = generate_world(seed, spec.world)
    mapping, queries = simulate_all(world, spec, family, seed)

    maps: Dict[str, MultiSessionMap] = {}
    for label, s in mapping.items():
        maps[label], _, _ = map_session(s, None, cfg)
    for combo in spec.merged_maps:
        maps["+".join(combo)] = merge_sessions([mapping[label] for label in combo], cfg)

    memory, summary, chain = [], [], []
    for map_id, m in maps.items():
        path = m.save(os.path.join(cell_dir, "maps", f"map_{map_id}.json"))
        memory.append(memory_row(m, map_id, seed, os.path.getsize(path)))
        for query_id, q in queries.items():
            rows = timeline_rows(localize_session(m, q, cfg), m, map_id, query_id, family, seed, q.start_time)
            write_csv(os.path.join(cell_dir, "timelines", f"{map_id}__{query_id}.csv"), TIMELINE_FIELDS, rows)
            summary.append(summarize(rows))

    if spec.chain:
        labels = list(mapping)
        for prev, label in zip(labels[:-1], labels[1:]):
            prior = MultiSessionMap.load(os.path.join(cell_dir, "maps", f"map_{prev}.json"))
            _, events, anchored = map_session(mapping[label], prior, cfg)
            sid = len(prior.sessions) - 1
            over_prior = [e.accepted and e.matched_session != sid for e in events]
            first = next((i for i, ok in enumerate(over_prior) if ok), None)
            chain.append({
                "family": family, "seed": seed, "session": label, "prior_session": prev, "frames": len(events),
                "localization_pct": _fmt(100.0 * sum(over_prior) / max(len(events), 1)),
                "first_closure_frame": "" if first is None else first,
                "anchored": int(anchored), "max_gap": max_gap(over_prior),
            })
    logger.info(f"Cell {family}/seed {seed} finished in {time.time() - started:.1f}s")
    return {"summary": summary, "memory": memory, "chain": chain}


def run_experiment(spec: ExperimentSpec, out_dir: str, workers: int = 1) -> dict:
    jobs = [(spec, family, seed, out_dir) for family in spec.families for seed in spec.seeds]
    if workers > 1:
        with Pool(workers) as pool:
            results = pool.map(run_cell, jobs)
    else:
        results = [run_cell(j) for j in jobs]
    summary = [r for res in results for r in res["summary"]]
    mapping_times = {k: clock(v) for k, v in spec.mapping_sessions.items()}
    query_times = {(r["family"], str(r["seed"]), r["query_id"]): clock(spec.localization_sessions[r["query_id"]])
                   for r in summary}
    summary += closest_time_baseline(summary, mapping_times, query_times)
    paths = {
        "summary": write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_FIELDS, summary),
        "memory": write_csv(os.path.join(out_dir, "memory.csv"), MEMORY_FIELDS,
                            [r for res in results for r in res["memory"]]),
    }
    if spec.chain:
        paths["chain"] = write_csv(os.path.join(out_dir, "chain.csv"), CHAIN_FIELDS,
                                   [r for res in results for r in res["chain"]])
    return paths


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def slam_config_from_args(args, base: SlamConfig = None) -> SlamConfig:
    cfg = base or SlamConfig()
    if getattr(args, "radius", None) is not None:
        cfg.radius = args.radius
    if getattr(args, "threshold", None) is not None:
        cfg.bayes.loop_threshold = args.threshold
    if getattr(args, "min_inliers", None) is not None:
        cfg.registration.min_inliers = args.min_inliers
    if getattr(args, "ratio", None) is not None:
        cfg.registration.nndr_ratio = args.ratio
        cfg.vocabulary.nndr_ratio = args.ratio
    return cfg


def cmd_genworld(args) -> dict:
    params = WorldParams(n_landmarks=args.landmarks, window_fraction=args.window_fraction)
    world = generate_world(args.seed, params)
    path = world.save(args.world)
    return {"world": path, "landmarks": len(world), "window_lit": int(world.regions.sum())}


def cmd_simulate(args) -> dict:
    world = World.load(args.world)
    traj = TrajectorySpec()
    start = clock(args.time)
    noise = OdometryNoise(args.sigma_rot, args.sigma_trans)
    offset = session_offset([args.seed, 0, 0], traj, args.random_frame)
    session = simulate_session(world, traj, start, family_config(args.family), noise, args.seed,
                               label=args.label, frame_offset=offset)
    path = session.save(args.out)
    return {"session": path, "frames": len(session), "family": session.family}


def cmd_map(args) -> dict:
    session = SessionData.load(args.sessions)
    prior = MultiSessionMap.load(args.prior) if args.prior else None
    base = SlamConfig.from_dict(prior.config) if prior is not None and prior.config else SlamConfig(
        odom_sigma_rot=session.noise.sigma_rot or SlamConfig.odom_sigma_rot,
        odom_sigma_trans=session.noise.sigma_trans or SlamConfig.odom_sigma_trans,
        camera=session.camera)
    m, events, anchored = map_session(session, prior, slam_config_from_args(args, base))
    path = m.save(args.out)
    return {"map": path, "sessions": len(m.sessions), "nodes": len(m.nodes), "anchored": anchored,
            "closures": sum(e.accepted for e in events)}


def cmd_merge(args) -> dict:
    if len(args.maps) < 2:
        raise InvalidParams("merge needs at least two map files")
    loaded = [MultiSessionMap.load(p) for p in args.maps]
    families = {m.family for m in loaded}
    if len(families) != 1:
        raise InvalidParams(f"maps use different descriptor families: {sorted(families)}")
    base = SlamConfig.from_dict(loaded[0].config) if loaded[0].config else SlamConfig()
    sessions = [s for m in loaded for s in sessions_from_map(m)]
    m = merge_sessions(sessions, slam_config_from_args(args, base))
    path = m.save(args.out)
    return {"map": path, "sessions": len(m.sessions), "nodes": len(m.nodes),
            "aligned": sum(s.aligned for s in m.sessions)}


def cmd_localize(args) -> dict:
    digest = file_digest(args.maps)
    m = MultiSessionMap.load(args.maps)
    before = json.dumps(m.to_dict(), sort_keys=True)
    session = SessionData.load(args.sessions)
    cfg = slam_config_from_args(args, SlamConfig.from_dict(m.config) if m.config else None)
    events = localize_session(m, session, cfg)
    if json.dumps(m.to_dict(), sort_keys=True) != before or file_digest(args.maps) != digest:
        raise RuntimeError("localization modified the map")
    map_id = args.map_id or os.path.splitext(os.path.basename(args.maps))[0]
    query_id = args.query_id or session.label
    rows = timeline_rows(events, m, map_id, query_id, m.family, args.seed, session.start_time)
    path = write_csv(os.path.join(args.out_dir, f"{map_id}__{query_id}.csv"), TIMELINE_FIELDS, rows)
    return dict(summarize(rows), timeline=path)


def cmd_eval(args) -> dict:
    logs_dir = args.logs_dir
    paths = sorted(os.path.join(logs_dir, f) for f in os.listdir(logs_dir)
                   if f.endswith(".csv")) if os.path.isdir(logs_dir) else []
    if not paths:
        raise MissingLogs(f"no event logs in {logs_dir}")
    summary = [summarize(read_csv(p)) for p in paths]
    if args.baseline:
        mapping_times = {k: clock(v) for k, v in MAPPING_SCHEDULE.items()}
        query_times = {}
        for p in paths:
            first = read_csv(p)[0]
            query_times[(first["family"], str(first["seed"]), first["query_id"])] = float(first["query_time"])
        summary += closest_time_baseline(summary, mapping_times, query_times)
    out = write_csv(os.path.join(args.out_dir, "summary.csv"), SUMMARY_FIELDS, summary)
    return {"summary": out, "rows": len(summary)}


def cmd_experiment(args) -> dict:
    spec = ExperimentSpec.load(args.spec) if args.spec else ExperimentSpec()
    if args.family:
        spec.families = args.family
    if args.seeds:
        spec.seeds = args.seeds
    overrides = slam_config_from_args(args, spec.slam_config())
    spec.slam = overrides.to_dict()
    spec.validate()
    paths = run_experiment(spec, args.out_dir, args.workers)
    return {"experiment": spec.name, "cells": len(spec.families) * len(spec.seeds), **paths}


COMMANDS = {
    "genworld": cmd_genworld, "simulate": cmd_simulate, "map": cmd_map, "merge": cmd_merge,
    "localize": cmd_localize, "eval": cmd_eval, "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(description="Multi-session localization under illumination changes",
                                     formatter_class=fmt)
    parser.add_argument("--log-level", default=os.getenv("MSLOC_LOG_LEVEL", "INFO"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging level")

    engine = argparse.ArgumentParser(add_help=False)
    engine.add_argument("--radius", type=float, default=None, help="Proximity radius in meters (default 1.0)")
    engine.add_argument("--threshold", type=float, default=None, help="Loop closure threshold (default 0.15)")
    engine.add_argument("--min-inliers", type=int, default=None, help="Minimum registration inliers (default 20)")
    engine.add_argument("--ratio", type=float, default=None, help="NNDR ratio (default 0.8)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("genworld", help="Generate a synthetic world", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="World seed")
    p.add_argument("--world", required=True, help="Output world file")
    p.add_argument("--landmarks", type=int, default=WorldParams.n_landmarks, help="Landmark count")
    p.add_argument("--window-fraction", type=float, default=WorldParams.window_fraction,
                   help="Share of window-lit landmarks")

    p = sub.add_parser("simulate", help="Simulate one session", formatter_class=fmt)
    p.add_argument("--world", required=True, help="World file")
    p.add_argument("--family", required=True, choices=list(FAMILIES), help="Descriptor family")
    p.add_argument("--time", required=True, help="Session start time HH:MM")
    p.add_argument("--label", default="1", help="Session label")
    p.add_argument("--seed", type=int, default=0, help="Session seed")
    p.add_argument("--sigma-rot", type=float, default=OdometryNoise.sigma_rot,
                   help="Odometry rotation noise (rad/step)")
    p.add_argument("--sigma-trans", type=float, default=OdometryNoise.sigma_trans,
                   help="Odometry translation noise (m/step)")
    p.add_argument("--random-frame", action="store_true", help="Start odometry in a randomly placed frame")
    p.add_argument("--out", required=True, help="Output session file")

    p = sub.add_parser("map", help="Map a session, optionally onto a prior map", parents=[engine], formatter_class=fmt)
    p.add_argument("--sessions", required=True, help="Session file")
    p.add_argument("--prior", help="Prior map file")
    p.add_argument("--out", required=True, help="Output map file")

    p = sub.add_parser("merge", help="Merge maps into one multi-session map", parents=[engine], formatter_class=fmt)
    p.add_argument("--maps", nargs="+", required=True, help="Map files, oldest first")
    p.add_argument("--out", required=True, help="Output map file")

    p = sub.add_parser("localize", help="Localize a session against a map", parents=[engine], formatter_class=fmt)
    p.add_argument("--maps", required=True, help="Map file")
    p.add_argument("--sessions", required=True, help="Query session file")
    p.add_argument("--seed", type=int, default=0, help="Seed recorded in the event log")
    p.add_argument("--map-id", help="Map id for the log (default: file name)")
    p.add_argument("--query-id", help="Query id for the log (default: session label)")
    p.add_argument("--out-dir", default="results/timelines", help="Event log directory")

    p = sub.add_parser("eval", help="Summarize event logs", formatter_class=fmt)
    p.add_argument("--logs-dir", default="results/timelines", help="Event log directory")
    p.add_argument("--out-dir", default="results", help="Output directory")
    p.add_argument("--baseline", action="store_true", help="Add the closest-time single map baseline rows")

    p = sub.add_parser("experiment", help="Run a full experiment matrix", parents=[engine], formatter_class=fmt)
    p.add_argument("--spec", help="Experiment spec JSON (default: built-in sunset matrix)")
    p.add_argument("--family", nargs="+", choices=list(FAMILIES), help="Restrict to these families")
    p.add_argument("--seed", dest="seeds", type=int, nargs="+", help="Restrict to these seeds")
    p.add_argument("--workers", type=int, default=1, help="Worker processes")
    p.add_argument("--out-dir", default="results", help="Output directory")
    return parser


def main(argv: Optional[List[str]] = None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format='%(asctime)s - %(levelname)s - %(message)s')

    exit_code = EXIT_OK
    try:
        record = {"status": "success", "command": args.command}
        record.update(COMMANDS[args.command](args))
    except DataError as e:
        logger.error(f"{args.command} failed: {e}")
        record = {"status": "error", "command": args.command, "error_type": type(e).__name__, "error": str(e)}
        exit_code = EXIT_DATA
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {e}")
        record = {"status": "error", "command": args.command, "error_type": type(e).__name__, "error": str(e)}
        exit_code = EXIT_UNEXPECTED
    print(json.dumps(record, indent=2, default=str))
    sys.exit(exit_code)


if __name__ == "__main__":
    main()
