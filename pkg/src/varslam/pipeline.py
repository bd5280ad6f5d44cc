"""Desk-scale tracking + local-mapping loop over a simulated sequence.

Every frame is tracked against the current map with a fixed kernel. Every
``keyframe_interval`` frames a keyframe is inserted, new map points are
created from its depth measurements, and a local bundle adjustment runs over
the last ``window_size`` keyframes (oldest one fixed, plus up to
``max_fixed_keyframes`` earlier covisible keyframes held fixed). Frame poses
are stored relative to their reference keyframe, so BA corrections propagate
to the output trajectory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import ExperimentConfig
from .errors import ObservabilityError, StructuralError
from .evaluate import AteResult, Trajectory, ate_rmse
from .geometry import MapPoint, Observation, SE3Pose, batch_residuals, unproject
from .kernel import PartitionTable, get_partition_table
from .sim import FrameObservations, SimScene, generate_scene, render_frame, semantic_filter
from .solver import (BarronAdaptive, KernelMode, SolveReport, WindowProblem,
                     _optimize_pose_arrays, classify_outliers, optimize_window)

log = logging.getLogger(__name__)

MIN_FIXED_KEYFRAMES = 2
TRACKING_ROUNDS = 4
SEARCH_RADIUS_PX = 15.0


@dataclass
class WindowRecord:
    window_index: int
    keyframe: int
    report: SolveReport


@dataclass
class SequenceResult:
    seed: int
    ablation: str
    poses_cw: List[SE3Pose]
    timestamps: np.ndarray
    windows: List[WindowRecord] = field(default_factory=list)
    tracking_failures: int = 0
    skipped_windows: int = 0
    ate: Optional[AteResult] = None

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory.from_world_to_camera(self.timestamps, self.poses_cw)

    @property
    def final_alphas(self) -> List[float]:
        return [w.report.final_alpha for w in self.windows]

    def alpha_rows(self) -> List[Tuple[int, int, float, float]]:
        """(window_index, outer_iteration, alpha, cost) per outer iteration."""
        rows = []
        for w in self.windows:
            last: Dict[int, Tuple[float, float]] = {}
            for outer, cost, alpha, _ in w.report.history:
                last[outer] = (alpha, cost)
            for outer in sorted(last):
                rows.append((w.window_index, outer, *last[outer]))
        return rows


class _Mapper:
    def __init__(self, scene: SimScene, cfg: ExperimentConfig, table: PartitionTable):
        self.scene = scene
        self.cfg = cfg
        self.table = table
        self.intr = scene.intrinsics
        self.points: Dict[int, np.ndarray] = {}
        self.birth: Dict[int, int] = {}
        self.kf_ids: List[int] = []
        self.kf_pose: Dict[int, SE3Pose] = {}
        self.kf_obs: Dict[int, FrameObservations] = {}
        self.alpha = cfg.solver.alpha_init
        self.windows: List[WindowRecord] = []
        self.skipped = 0
        self.strikes: Dict[int, int] = {}

    def observe(self, frame_id: int) -> FrameObservations:
        fr = render_frame(self.scene, frame_id)
        if self.cfg.filter_enabled:
            fr = semantic_filter(fr, self.cfg.run.depth_margin)
        return fr

    def _backproject(self, pose: SE3Pose, fr: FrameObservations, mask: np.ndarray) -> np.ndarray:
        pc = unproject(fr.pixels[mask], fr.depths[mask], self.intr)
        return (pc - pose.translation) @ pose.rotation

    def add_keyframe(self, frame_id: int, pose: SE3Pose, fr: FrameObservations) -> None:
        self.kf_ids.append(frame_id)
        self.kf_pose[frame_id] = pose
        self.kf_obs[frame_id] = fr
        limit = self.cfg.run.max_point_strikes
        new = np.array([pid not in self.points and self.strikes.get(int(pid), 0) < limit
                        for pid in fr.point_ids], dtype=bool)
        new &= fr.depths > 0.1
        for pid, X in zip(fr.point_ids[new], self._backproject(pose, fr, new)):
            self.points[int(pid)] = X
            self.birth[int(pid)] = frame_id

    def _edges(self, kf: int):
        fr = self.kf_obs[kf]
        keep = np.array([self.birth.get(int(p), 1 << 60) <= kf for p in fr.point_ids], dtype=bool)
        return fr.point_ids[keep], fr.pixels[keep], fr.sigmas[keep]

    def local_ba(self) -> None:
        cfg = self.cfg
        window = self.kf_ids[-cfg.run.window_size:]
        if len(window) < 2:
            return
        edges = {kf: self._edges(kf) for kf in window}
        counts: Dict[int, int] = {}
        for pids, _, _ in edges.values():
            for p in pids:
                counts[int(p)] = counts.get(int(p), 0) + 1
        need = min(cfg.run.min_point_keyframes, len(window))
        local = {p for p, c in counts.items() if c >= max(need, 2)}
        if not local:
            self.skipped += 1
            return

        fixed = [window[0]]
        earlier = self.kf_ids[:-len(window)]
        for kf in reversed(earlier):
            if len(fixed) > cfg.run.max_fixed_keyframes:
                break
            pids, _, _ = self._edges(kf)
            if any(int(p) in local for p in pids):
                edges[kf] = self._edges(kf)
                fixed.append(kf)

        # monocular BA also has a free scale: keep at least two poses fixed
        for kf in window[1:]:
            if len(fixed) >= MIN_FIXED_KEYFRAMES:
                break
            fixed.append(kf)

        observations = []
        frames_used = set()
        for kf, (pids, pixels, sigmas) in edges.items():
            for p, px, s in zip(pids, pixels, sigmas):
                if int(p) in local:
                    observations.append(Observation(int(p), kf, px, float(s)))
                    frames_used.add(kf)
        keyframes = [(kf, self.kf_pose[kf]) for kf in sorted(frames_used)]
        fixed_set = frozenset(kf for kf in fixed if kf in frames_used)
        if not fixed_set:
            self.skipped += 1
            return
        problem = WindowProblem(keyframes, [MapPoint(p, self.points[p]) for p in sorted(local)],
                                observations, self.intr, fixed_set)
        mode = cfg.kernel_mode
        solver_cfg = cfg.solver
        if isinstance(mode, BarronAdaptive) and cfg.run.warm_start_alpha:
            solver_cfg = replace(solver_cfg, alpha_init=self.alpha)
        try:
            sol, report = optimize_window(problem, mode, solver_cfg, self.table)
        except StructuralError as exc:
            log.debug("window at keyframe %d skipped: %s", window[-1], exc)
            self.skipped += 1
            return
        for kf, pose in sol.poses.items():
            if kf not in fixed_set:
                self.kf_pose[kf] = pose
        self.points.update(sol.points)
        if isinstance(mode, BarronAdaptive):
            self.alpha = report.final_alpha
        self.windows.append(WindowRecord(len(self.windows), window[-1], report))
        if cfg.run.cull_outliers:
            self.cull_outliers(problem, report)

    def cull_outliers(self, problem: WindowProblem, report: SolveReport) -> None:
        """Drop map points with a chi-square outlier edge in the last window.

        A dropped point may be re-created from a later keyframe's depth until
        it has been dropped ``max_point_strikes`` times.
        """
        flagged = {o.point_id for o, bad in zip(problem.observations, report.outlier_flags) if bad}
        for pid in flagged:
            self.points.pop(pid, None)
            self.birth.pop(pid, None)
            self.strikes[pid] = self.strikes.get(pid, 0) + 1


def _magnitudes(pose: SE3Pose, X, pixels, sigmas, intr):
    n = len(X)
    r, valid, _, _ = batch_residuals(np.broadcast_to(pose.rotation, (n, 3, 3)),
                                     np.broadcast_to(pose.translation, (n, 3)),
                                     X, pixels, sigmas, intr, jacobians=False)
    return np.linalg.norm(r, axis=1), valid


def track_frame(guess: SE3Pose, X: np.ndarray, pixels: np.ndarray, sigmas: np.ndarray, intr,
                mode: KernelMode, config, rounds: int = TRACKING_ROUNDS,
                search_radius: float = SEARCH_RADIUS_PX) -> SE3Pose:
    """Pose-only refinement of one frame against the map.

    Map points are matched only when their projection under ``guess`` lands
    within ``search_radius`` pixels of the keypoint, as a projection-search
    front end would. The solve then runs in rounds; chi-square outliers of one
    round sit out the next, and every edge is re-classified each round.
    """
    e0, valid0 = _magnitudes(guess, X, pixels, sigmas, intr)
    use = valid0 & (e0 * sigmas <= search_radius)
    if use.sum() < 6:
        raise ObservabilityError(f"only {int(use.sum())} map points matched in the search window")
    pose = guess
    for _ in range(rounds):
        pose, _ = _optimize_pose_arrays(pose, X[use], pixels[use], sigmas[use], intr, mode, config)
        e, valid = _magnitudes(pose, X, pixels, sigmas, intr)
        keep = valid & (e0 * sigmas <= search_radius) & ~classify_outliers(e, config.outlier_chi2_threshold)
        if keep.sum() < 6 or np.array_equal(keep, use):
            break
        use = keep
    return pose


def run_sequence(scene: SimScene, cfg: ExperimentConfig, table: PartitionTable | None = None,
                 seed: int | None = None) -> SequenceResult:
    if table is None:
        k = cfg.kernel
        table = get_partition_table(k.grid, k.tau, k.quad_nodes)
    mapper = _Mapper(scene, cfg, table)
    n = scene.n_frames
    gt = scene.gt_trajectory
    track_mode = cfg.tracking_mode
    interval = cfg.run.keyframe_interval

    # per frame: (reference keyframe, T_frame @ T_ref^-1)
    relative: List[Tuple[int, SE3Pose]] = [(0, SE3Pose.identity())]
    fr0 = mapper.observe(0)
    mapper.add_keyframe(0, gt[0], fr0)
    prev, prev2 = gt[0], None
    failures = 0

    for f in range(1, n):
        fr = mapper.observe(f)
        guess = prev if prev2 is None else ((prev @ prev2.inverse()) @ prev).normalized()
        known = np.array([int(p) in mapper.points for p in fr.point_ids], dtype=bool)
        pose = guess
        if known.sum() >= 6:
            X = np.array([mapper.points[int(p)] for p in fr.point_ids[known]])
            try:
                pose = track_frame(guess, X, fr.pixels[known], fr.sigmas[known],
                                   scene.intrinsics, track_mode, cfg.solver, cfg.run.tracking_rounds,
                                   cfg.run.search_radius)
            except ObservabilityError:
                failures += 1
        else:
            failures += 1
        if f % interval == 0:
            mapper.add_keyframe(f, pose, fr)
            mapper.local_ba()
            pose = mapper.kf_pose[f]
        ref = mapper.kf_ids[-1]
        relative.append((ref, (pose @ mapper.kf_pose[ref].inverse()).normalized()))
        prev2, prev = prev, pose

    poses = [(rel @ mapper.kf_pose[ref]).normalized() for ref, rel in relative]
    result = SequenceResult(seed=scene.config.seed if seed is None else seed,
                            ablation=cfg.ablation, poses_cw=poses, timestamps=scene.timestamps,
                            windows=mapper.windows, tracking_failures=failures,
                            skipped_windows=mapper.skipped)
    gt_traj = Trajectory.from_world_to_camera(scene.timestamps, gt)
    result.ate = ate_rmse(gt_traj, result.trajectory, align=cfg.run.align, max_dt=cfg.run.max_dt)
    return result


def run_seed(cfg: ExperimentConfig, seed: int) -> SequenceResult:
    scene = generate_scene(replace(cfg.scene, seed=seed))
    return run_sequence(scene, cfg, seed=seed)
