"""Synthetic dynamic scenes with ground truth, and the depth-aware semantic
keypoint filter.

A scene holds static points, clustered "known" dynamic objects that a
detector reports (people), and "unknown" dynamic objects it never reports
(boxes, balloons). The camera follows a circular arc around the workspace,
looking at its centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError
from .geometry import CameraIntrinsics, MapPoint, Observation, SE3Pose, project_points

STATIC = "static"
KNOWN_DYNAMIC = "known_dynamic"
UNKNOWN_DYNAMIC = "unknown_dynamic"
LABELS = (STATIC, KNOWN_DYNAMIC, UNKNOWN_DYNAMIC)

IMAGE_MARGIN = 2.0  # px kept free at the image border
PERSON_SIZE = (0.3, 1.6, 0.2)  # width, height, depth in metres
BOX_EDGE = 0.5
BOX_PAD = 4.0  # px added around the person's projected extent
PERSON_CLEARANCE = 0.5  # m of depth around the person kept free of static points


@dataclass(frozen=True)
class MotionModel:
    """Constant speed (m/frame) applied during frames [start, end).

    With ``period > 0`` the object shuttles: the velocity flips sign every
    ``period / 2`` frames, so it sweeps back and forth and stays in view.
    Displacement is measured from the position at ``start``.
    """

    velocity: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    start: int = 0
    end: int = 10 ** 9
    period: int = 0
    phase: int = 0

    def displacement(self, frame: int) -> np.ndarray:
        steps = min(max(frame - self.start, 0), max(self.end - self.start, 0))
        if self.period > 0:
            # triangle wave; ``phase`` shifts where in the sweep the object starts
            t = (steps + self.phase) % self.period
            steps = min(t, self.period - t) - min(self.phase, self.period - self.phase)
        return steps * np.asarray(self.velocity, dtype=float)

    def is_moving(self, frame: int) -> bool:
        return self.start <= frame < self.end and any(v != 0 for v in self.velocity)


@dataclass(frozen=True)
class TrajectoryParams:
    kind: str = "circular"
    radius: float = 3.0
    frames: int = 200
    arc_degrees: float = 60.0
    height_amplitude: float = 0.2
    height_cycles: float = 2.0
    linear_length: float = 2.0
    fps: float = 30.0


@dataclass(frozen=True)
class SceneConfig:
    n_static: int = 150
    n_known_dynamic: int = 50
    n_unknown_dynamic: int = 140
    n_unknown_groups: int = 12
    pixel_noise_sigma: float = 0.7
    observation_sigma: float = 1.0
    known_motion: MotionModel = MotionModel((0.004, 0.0, 0.0))
    unknown_motion: MotionModel = MotionModel((0.03, -0.015, 0.0), period=60)
    trajectory: TrajectoryParams = TrajectoryParams()
    detection_recall: float = 0.9
    depth_noise_sigma: float = 0.05
    workspace_radius: float = 2.0
    person_distance: float = 1.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_static", "n_known_dynamic", "n_unknown_dynamic"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"scene.{name} must be >= 0")
        if self.n_unknown_groups < 1:
            raise InvalidArgumentError("scene.n_unknown_groups must be >= 1")
        if self.n_static + self.n_known_dynamic + self.n_unknown_dynamic == 0:
            raise InvalidArgumentError("scene has no points")
        for name in ("pixel_noise_sigma", "depth_noise_sigma"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"scene.{name} must be >= 0")
        if not self.observation_sigma > 0:
            raise InvalidArgumentError("scene.observation_sigma must be > 0")
        if not 0.0 <= self.detection_recall <= 1.0:
            raise InvalidArgumentError("scene.detection_recall must lie in [0, 1]")
        traj = self.trajectory
        if traj.kind not in ("circular", "linear"):
            raise InvalidArgumentError(f"scene.trajectory.kind must be circular or linear, got {traj.kind!r}")
        if traj.frames < 1 or traj.radius <= 0 or traj.fps <= 0:
            raise InvalidArgumentError("scene.trajectory needs frames >= 1, radius > 0, fps > 0")
        if not 0 < self.person_distance < traj.radius:
            raise InvalidArgumentError("scene.person_distance must lie between camera and centre")


@dataclass(frozen=True)
class DetectionBox:
    frame_id: int
    pixel_rect: Tuple[float, float, float, float]
    foreground_depth: float

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = self.pixel_rect
        return ((pixels[:, 0] >= x0) & (pixels[:, 0] <= x1)
                & (pixels[:, 1] >= y0) & (pixels[:, 1] <= y1))


@dataclass
class SimScene:
    config: SceneConfig
    positions: np.ndarray            # (N, 3) world positions at frame 0
    labels: np.ndarray               # (N,) label strings
    groups: np.ndarray               # (N,) object id, -1 for static points
    motions: Dict[int, MotionModel]
    gt_trajectory: List[SE3Pose]     # world-to-camera per frame
    intrinsics: CameraIntrinsics

    @property
    def n_frames(self) -> int:
        return len(self.gt_trajectory)

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.config.trajectory.fps

    def positions_at(self, frame: int) -> np.ndarray:
        out = self.positions.copy()
        for gid, motion in self.motions.items():
            out[self.groups == gid] += motion.displacement(frame)
        return out

    def map_points(self, frame: int = 0) -> List[MapPoint]:
        return [MapPoint(i, p) for i, p in enumerate(self.positions_at(frame))]

    def moving_mask(self, frame: int) -> np.ndarray:
        mask = np.zeros(len(self.positions), dtype=bool)
        for gid, motion in self.motions.items():
            if motion.is_moving(frame):
                mask |= self.groups == gid
        return mask


@dataclass
class FrameObservations:
    frame_id: int
    point_ids: np.ndarray   # (M,) int
    pixels: np.ndarray      # (M, 2)
    sigmas: np.ndarray      # (M,)
    depths: np.ndarray      # (M,) noisy camera-frame depth
    labels: np.ndarray      # (M,) ground-truth label of the generating point
    boxes: List[DetectionBox] = field(default_factory=list)

    def __len__(self) -> int:
        return self.point_ids.size

    @property
    def observations(self) -> List[Observation]:
        return [Observation(int(pid), self.frame_id, px, float(s))
                for pid, px, s in zip(self.point_ids, self.pixels, self.sigmas)]

    def subset(self, mask: np.ndarray) -> "FrameObservations":
        return FrameObservations(self.frame_id, self.point_ids[mask], self.pixels[mask],
                                 self.sigmas[mask], self.depths[mask], self.labels[mask],
                                 list(self.boxes))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def look_at(camera_center, target=(0.0, 0.0, 0.0)) -> SE3Pose:
    """World-to-camera pose looking at ``target``; world +y is image-down."""
    c = np.asarray(camera_center, dtype=float)
    z = np.asarray(target, dtype=float) - c
    z /= np.linalg.norm(z)
    x = np.cross([0.0, 1.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_cw = np.vstack([x, y, z])
    return SE3Pose(R_cw, -R_cw @ c)


def camera_trajectory(params: TrajectoryParams) -> List[SE3Pose]:
    n = params.frames
    s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    heights = params.height_amplitude * np.sin(2.0 * math.pi * params.height_cycles * s)
    poses = []
    if params.kind == "circular":
        angles = math.radians(params.arc_degrees) * (s - 0.5)
        for a, h in zip(angles, heights):
            c = (params.radius * math.sin(a), h, -params.radius * math.cos(a))
            poses.append(look_at(c))
    else:
        xs = params.linear_length * (s - 0.5)
        for x, h in zip(xs, heights):
            c = np.array([x, h, -params.radius])
            poses.append(look_at(c, c + np.array([0.0, 0.0, 1.0])))
    return poses


def _visible(poses: Sequence[SE3Pose], pts: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    ok = np.ones(len(pts), dtype=bool)
    for pose in poses:
        uv, front = project_points(pose.act(pts), intr)
        inside = ((uv[:, 0] >= IMAGE_MARGIN) & (uv[:, 0] <= intr.width - IMAGE_MARGIN)
                  & (uv[:, 1] >= IMAGE_MARGIN) & (uv[:, 1] <= intr.height - IMAGE_MARGIN))
        ok &= front & inside
    return ok


def _sample_ball(rng, n: int, radius: float) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)


def _clear_of_person(pts: np.ndarray, person: np.ndarray, motion: MotionModel,
                     poses: Sequence[SE3Pose], intr: CameraIntrinsics) -> np.ndarray:
    """False for points that ever share the person's image box within
    ``PERSON_CLEARANCE`` of its depth, so a perfect detector never hides them."""
    ok = np.ones(len(pts), dtype=bool)
    for f, pose in enumerate(poses):
        pp = pose.act(person + motion.displacement(f))
        puv, pfront = project_points(pp, intr)
        if not pfront.any():
            continue
        (x0, y0), (x1, y1) = puv[pfront].min(axis=0) - BOX_PAD, puv[pfront].max(axis=0) + BOX_PAD
        pc = pose.act(pts)
        uv, front = project_points(pc, intr)
        inside = front & (uv[:, 0] >= x0) & (uv[:, 0] <= x1) & (uv[:, 1] >= y0) & (uv[:, 1] <= y1)
        ok &= ~(inside & (np.abs(pc[:, 2] - np.median(pp[pfront, 2])) <= PERSON_CLEARANCE))
    return ok


def _sample_visible(rng, n, sampler, poses, intr, what, keep=None) -> np.ndarray:
    out = np.empty((0, 3))
    for _ in range(200):
        if len(out) >= n:
            break
        cand = sampler(max(2 * (n - len(out)), 8))
        mask = _visible(poses, cand, intr)
        if keep is not None:
            mask &= keep(cand)
        out = np.vstack([out, cand[mask]])
    if len(out) < n:
        raise InvalidArgumentError(f"could not place {n} visible {what} points")
    return out[:n]


def _yaw(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _split_counts(total: int, parts: int) -> List[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def generate_scene(config: SceneConfig, intrinsics: CameraIntrinsics | None = None) -> SimScene:
    config.validate()
    intr = intrinsics or CameraIntrinsics()
    rng = np.random.default_rng([config.seed, 0])
    poses = camera_trajectory(config.trajectory)
    # static visibility is checked against a subsample of the trajectory
    check = poses[:: max(1, len(poses) // 20)] + [poses[-1]]

    positions, labels, groups = [], [], []
    motions: Dict[int, MotionModel] = {}

    person = np.empty((0, 3))
    if config.n_known_dynamic:
        # one person standing between the mid-trajectory camera and the centre
        mid = poses[len(poses) // 2].inverse().translation
        centre = mid / np.linalg.norm(mid) * (np.linalg.norm(mid) - config.person_distance)
        centre[1] = 0.0
        half = np.array(PERSON_SIZE) / 2.0
        person = centre + rng.uniform(-half, half, size=(config.n_known_dynamic, 3))

    if config.n_static:
        keep = None
        if len(person):
            keep = lambda c: _clear_of_person(c, person, config.known_motion, poses, intr)
        pts = _sample_visible(rng, config.n_static,
                              lambda m: _sample_ball(rng, m, config.workspace_radius),
                              check, intr, "static", keep)
        positions.append(pts)
        labels += [STATIC] * len(pts)
        groups += [-1] * len(pts)

    gid = 0
    if len(person):
        positions.append(person)
        labels += [KNOWN_DYNAMIC] * len(person)
        groups += [gid] * len(person)
        motions[gid] = config.known_motion
        gid += 1

    if config.n_unknown_dynamic:
        inner = max(config.workspace_radius - BOX_EDGE, 0.1)
        for count in _split_counts(config.n_unknown_dynamic, config.n_unknown_groups):
            if count == 0:
                continue
            centre = _sample_ball(rng, 1, inner)[0]
            pts = centre + rng.uniform(-BOX_EDGE / 2, BOX_EDGE / 2, size=(count, 3))
            positions.append(pts)
            labels += [UNKNOWN_DYNAMIC] * count
            groups += [gid] * count
            # groups share the class speed but not direction or shuttle phase
            heading = rng.uniform(0.0, 2.0 * math.pi)
            motion = config.unknown_motion
            motion = replace(motion, velocity=tuple(_yaw(heading) @ np.asarray(motion.velocity)))
            if motion.period > 0:
                motion = replace(motion, phase=int(rng.integers(motion.period)))
            motions[gid] = motion
            gid += 1

    return SimScene(config=config, positions=np.vstack(positions), labels=np.array(labels),
                    groups=np.array(groups, dtype=int), motions=motions,
                    gt_trajectory=poses, intrinsics=intr)


def render_frame(scene: SimScene, frame_id: int) -> FrameObservations:
    """Noisy observations, depths and detection boxes at ``frame_id``."""
    if not 0 <= frame_id < scene.n_frames:
        raise InvalidArgumentError(f"frame {frame_id} outside trajectory of {scene.n_frames}")
    cfg = scene.config
    intr = scene.intrinsics
    rng = np.random.default_rng([cfg.seed, 1, frame_id])
    pose = scene.gt_trajectory[frame_id]
    pc = pose.act(scene.positions_at(frame_id))
    uv, front = project_points(pc, intr)
    inside = front & intr.contains(uv)

    n = len(pc)
    noise = rng.normal(0.0, 1.0, size=(n, 2)) * cfg.pixel_noise_sigma
    depth_noise = rng.normal(0.0, 1.0, size=n) * cfg.depth_noise_sigma
    detect_draw = rng.uniform(size=max(len(scene.motions), 1))

    noisy = uv + noise
    keep = inside & intr.contains(np.where(inside[:, None], noisy, 0.0))
    idx = np.flatnonzero(keep)

    boxes = []
    for gid in sorted(scene.motions):
        members = np.flatnonzero((scene.groups == gid) & (scene.labels == KNOWN_DYNAMIC) & inside)
        if members.size == 0 or detect_draw[gid] >= cfg.detection_recall:
            continue
        px = uv[members]
        x0, y0 = px.min(axis=0) - BOX_PAD
        x1, y1 = px.max(axis=0) + BOX_PAD
        rect = (max(x0, 0.0), max(y0, 0.0), min(x1, intr.width), min(y1, intr.height))
        boxes.append(DetectionBox(frame_id, rect, float(np.median(pc[members, 2]))))

    return FrameObservations(
        frame_id=frame_id,
        point_ids=idx,
        pixels=noisy[idx],
        sigmas=np.full(idx.size, cfg.observation_sigma),
        depths=pc[idx, 2] + depth_noise[idx],
        labels=scene.labels[idx],
        boxes=boxes,
    )


def semantic_filter(frame: FrameObservations, depth_margin: float = 0.3) -> FrameObservations:
    """Drop in-box keypoints whose depth agrees with the box foreground.

    Keypoints outside every box pass; keypoints inside a box survive only when
    their depth differs from that box's foreground depth by more than
    ``depth_margin`` (background seen around the person).
    """
    if not depth_margin > 0:
        raise InvalidArgumentError("depth_margin must be positive")
    if not frame.boxes or len(frame) == 0:
        return frame.subset(np.ones(len(frame), dtype=bool))
    discard = np.zeros(len(frame), dtype=bool)
    for box in frame.boxes:
        inside = box.contains(frame.pixels)
        discard |= inside & (np.abs(frame.depths - box.foreground_depth) <= depth_margin)
    return frame.subset(~discard)


def dump_observations(frames: Sequence[FrameObservations], stream) -> None:
    stream.write("frame_id,point_id,u,v,depth,label\n")
    for fr in frames:
        for pid, (u, v), d, lab in zip(fr.point_ids, fr.pixels, fr.depths, fr.labels):
            stream.write(f"{fr.frame_id},{pid},{u:.6f},{v:.6f},{d:.6f},{lab}\n")
